use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::laa::{attack_batch, AttackConfig};
use crate::ndgrad::{softmax_cross_entropy, Array4, GradRequest, Mode, ParamStore, SgdState};
use crate::rng::SeededRng;
use crate::synthdata::{augment, stack_images, stack_labels, Scene, ANOMALY_ID, IGNORE_ID, NUM_CLASSES, PIXELS};

use super::arch::{argmax_channels, SegNet};

/// Ids never supervised by the segmentation loss.
pub const SEG_IGNORE: [u8; 2] = [IGNORE_ID, ANOMALY_ID];

#[derive(Debug, Clone, PartialEq)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// The learning rate halves once `e` epochs have completed, for each `e`.
    pub lr_halving_epochs: Vec<usize>,
    pub seed: u64,
    /// Attack every batch with `attack` before the loss.
    pub robust: bool,
    pub attack: AttackConfig,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            lr: 0.05,
            batch: 8,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_halving_epochs: vec![20, 35],
            seed: 0,
            robust: false,
            attack: AttackConfig::default(),
        }
    }
}

impl SegTrainConfig {
    pub fn validate(&self) -> Result<()> {
        validate_optimizer(self.epochs, self.lr, self.batch, self.momentum, self.weight_decay, &self.lr_halving_epochs)?;
        self.attack.validate()
    }
}

pub(crate) fn validate_optimizer(
    epochs: usize,
    lr: f64,
    batch: usize,
    momentum: f64,
    weight_decay: f64,
    halving: &[usize],
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("lr must be positive, got {lr}")));
    }
    if batch == 0 {
        return Err(Error::Config("batch must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::Config(format!("momentum {momentum} outside [0, 1)")));
    }
    if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
        return Err(Error::Config(format!("weight decay must be >= 0, got {weight_decay}")));
    }
    if let Some(&e) = halving.iter().find(|&&e| e < 1 || (epochs > 0 && e > epochs)) {
        return Err(Error::Config(format!("lr halving epoch {e} outside [1, {epochs}]")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegEpoch {
    pub epoch: usize,
    pub loss: f64,
    /// Running mIoU of the training-mode predictions over the epoch.
    pub miou: f64,
}

#[derive(Debug, Clone)]
pub struct SegTrainReport {
    pub params: ParamStore,
    pub epochs: Vec<SegEpoch>,
}

impl SegTrainReport {
    pub fn loss_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    pub fn log_csv(&self) -> String {
        let mut s = String::from("epoch,loss,miou\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{:.6},{:.6}", e.epoch, e.loss, e.miou);
        }
        s
    }
}

/// Independent random streams of one training run.
pub(crate) struct Streams {
    pub init: SeededRng,
    pub order: SeededRng,
    pub augment: SeededRng,
    pub dropout: SeededRng,
    pub attack: SeededRng,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self {
            init: SeededRng::derive(seed, 0),
            order: SeededRng::derive(seed, 1),
            augment: SeededRng::derive(seed, 2),
            dropout: SeededRng::derive(seed, 3),
            attack: SeededRng::derive(seed, 4),
        }
    }
}

/// Trains the segmenter from a fresh initialization. Void is supervised as
/// its own output channel; padding and anomaly pixels are ignored.
pub fn train_segmenter(net: &SegNet, train: &[Scene], cfg: &SegTrainConfig) -> Result<SegTrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let mut rngs = Streams::new(cfg.seed);
    let mut params = net.init_params(&mut rngs.init);
    let mut sgd = SgdState::new(&params, cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        if cfg.lr_halving_epochs.contains(&epoch) {
            sgd.lr *= 0.5;
        }
        rngs.order.shuffle(&mut order);
        let mut confusion = Confusion::default();
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for (step, chunk) in order.chunks(cfg.batch).enumerate() {
            let scenes: Vec<Scene> = chunk.iter().map(|&i| augment(&train[i], &mut rngs.augment)).collect();
            let refs: Vec<&Scene> = scenes.iter().collect();
            let labels = stack_labels(&refs);
            let mut images = stack_images(&refs);
            if cfg.robust {
                images = attack_batch(net, &params, &images, Some(&labels), &cfg.attack, &mut rngs.attack)?.images;
            }
            let (loss, grads) = seg_step(net, &params, &images, &labels, &mut rngs.dropout, &mut confusion)
                .inspect_err(|e| log::error!("segmenter training failed at epoch {epoch}, step {step}: {e}"))?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            sgd.step(&mut params, &grads)?;
            loss_sum += loss;
            steps += 1;
        }
        let record = SegEpoch {
            epoch,
            loss: loss_sum / steps as f64,
            miou: confusion.miou(),
        };
        log::info!("seg epoch {epoch}: loss {:.4} miou {:.4}", record.loss, record.miou);
        epochs.push(record);
    }
    Ok(SegTrainReport { params, epochs })
}

fn seg_step(
    net: &SegNet,
    params: &ParamStore,
    images: &Array4,
    labels: &[u8],
    dropout: &mut SeededRng,
    confusion: &mut Confusion,
) -> Result<(f64, ParamStore)> {
    let tape = net.forward_tape(params, images, Mode::Train, dropout)?;
    let logits = tape.value(net.logits_node());
    confusion.add(&argmax_channels(logits), labels);
    let (loss, grad) = softmax_cross_entropy(logits, labels, &SEG_IGNORE)?;
    let grads = tape.backward_from(vec![(net.logits_node(), grad)], GradRequest::PARAMS)?;
    net.note_backward(images.batch());
    Ok((loss, grads.params.expect("parameter gradients requested")))
}

/// Same as [`train_segmenter`] with every batch attacked first.
pub fn train_segmenter_robust(
    net: &SegNet,
    train: &[Scene],
    cfg: &SegTrainConfig,
    attack: &AttackConfig,
) -> Result<SegTrainReport> {
    let cfg = SegTrainConfig {
        robust: true,
        attack: *attack,
        ..cfg.clone()
    };
    train_segmenter(net, train, &cfg)
}

/// Confusion counts over the in-distribution classes. Pixels whose ground
/// truth is void, anomaly or padding are skipped.
#[derive(Debug, Clone)]
pub struct Confusion {
    /// `counts[gt][pred]`, pred ranging over every output id seen.
    counts: [[u64; 256]; NUM_CLASSES],
}

impl Default for Confusion {
    fn default() -> Self {
        Self {
            counts: [[0; 256]; NUM_CLASSES],
        }
    }
}

impl Confusion {
    pub fn add(&mut self, pred: &[u8], gt: &[u8]) {
        for (&p, &g) in pred.iter().zip(gt) {
            if (g as usize) < NUM_CLASSES {
                self.counts[g as usize][p as usize] += 1;
            }
        }
    }

    /// Mean IoU over classes that occur in the ground truth or prediction.
    pub fn miou(&self) -> f64 {
        let mut sum = 0.0;
        let mut present = 0;
        for c in 0..NUM_CLASSES {
            let tp = self.counts[c][c];
            let fn_: u64 = self.counts[c].iter().sum::<u64>() - tp;
            let fp: u64 = (0..NUM_CLASSES).filter(|&g| g != c).map(|g| self.counts[g][c]).sum();
            let denom = tp + fp + fn_;
            if denom > 0 {
                sum += tp as f64 / denom as f64;
                present += 1;
            }
        }
        if present == 0 {
            0.0
        } else {
            sum / present as f64
        }
    }

    pub fn global_acc(&self) -> f64 {
        let total: u64 = self.counts.iter().flatten().sum();
        let correct: u64 = (0..NUM_CLASSES).map(|c| self.counts[c][c]).sum();
        if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        }
    }
}

/// `(mIoU, global accuracy)` of a prediction map against ground truth.
pub fn miou_globalacc(pred: &[u8], gt: &[u8]) -> (f64, f64) {
    let mut c = Confusion::default();
    c.add(pred, gt);
    (c.miou(), c.global_acc())
}

pub const EVAL_BATCH: usize = 16;

/// Eval-mode argmax predictions for every scene, `scenes.len() * PIXELS`.
pub fn predict(net: &SegNet, params: &ParamStore, scenes: &[Scene]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(scenes.len() * PIXELS);
    let mut rng = SeededRng::new(0);
    for chunk in scenes.chunks(EVAL_BATCH) {
        let refs: Vec<&Scene> = chunk.iter().collect();
        let seg = net.forward(params, &stack_images(&refs), Mode::Eval, &mut rng)?;
        out.extend(seg.predictions());
    }
    Ok(out)
}

/// Segmentation quality of `params` on a split.
pub fn evaluate_segmenter(net: &SegNet, params: &ParamStore, scenes: &[Scene]) -> Result<(f64, f64)> {
    if scenes.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    let pred = predict(net, params, scenes)?;
    let gt: Vec<u8> = scenes.iter().flat_map(|s| s.labels.iter().copied()).collect();
    Ok(miou_globalacc(&pred, &gt))
}
