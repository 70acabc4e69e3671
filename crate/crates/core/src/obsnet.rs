//! The observer network: predicts, per pixel, the probability that the
//! frozen segmenter is wrong, from the image plus the segmenter's internal
//! feature maps.
//!
//! Every stage mirrors the segmenter; the segmenter tap whose shape matches
//! the stage input is concatenated in front of the stage's first conv:
//!
//! ```text
//! enc1: image                         conv(3->16)  conv(16->16)  pool1
//! enc2: pool1 ++ dec2 tap             conv(32->32) conv(32->32)  pool2
//! enc3: pool2 ++ dec3 tap             conv(64->64) conv(64->64)  pool3
//! dec3: unpool3 ++ enc3 tap           conv(128->64) conv(64->32)
//! dec2: unpool2 ++ enc2 tap           conv(64->32) conv(32->16)
//! dec1: unpool1 ++ enc1 tap           conv(32->16) conv(16->16)
//! head: dec1 ++ dec1 tap ++ softmax   conv(38->1) sigmoid
//! ```

use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::laa::{make_obsnet_sample, AttackConfig};
use crate::ndgrad::{weighted_bce, Array4, GradRequest, Graph, Mode, NodeId, ParamStore, SgdState};
use crate::rng::SeededRng;
use crate::segmenter::{SegNet, SegOutput, EVAL_BATCH, WIDTHS};
use crate::synthdata::{augment, stack_images, stack_labels, Scene, NUM_OUTPUTS};

/// Architecture ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObsVariant {
    /// Feed the segmenter's taps and softmax; when false they are replaced
    /// by zeros of the same shape.
    pub skips: bool,
    /// Feed the image; when false it is replaced by zeros.
    pub image: bool,
}

impl Default for ObsVariant {
    fn default() -> Self {
        Self { skips: true, image: true }
    }
}

/// Segmenter tap indices (shallow to deep: enc1, enc2, enc3, dec3, dec2,
/// dec1) in the order the observer consumes them.
const TAP_ORDER: [usize; 6] = [4, 3, 2, 1, 0, 5];

#[derive(Debug)]
pub struct ObsNet {
    graph: Graph,
    variant: ObsVariant,
    logit: NodeId,
    forward_passes: AtomicU64,
}

impl Default for ObsNet {
    fn default() -> Self {
        Self::new(ObsVariant::default())
    }
}

fn stage(g: &mut Graph, name: &str, x: NodeId, cin: usize, mid: usize, cout: usize) -> NodeId {
    let c1 = g.conv(&format!("{name}.conv1"), x, cin, mid);
    let r1 = g.relu(&format!("{name}.relu1"), c1);
    let c2 = g.conv(&format!("{name}.conv2"), r1, mid, cout);
    g.relu(&format!("{name}.relu2"), c2)
}

impl ObsNet {
    pub fn new(variant: ObsVariant) -> Self {
        let [w1, w2, w3] = WIDTHS;
        let geo = SegNet::tap_geometry();
        let mut g = Graph::new();
        let x = g.input("image", 3);
        let taps: Vec<NodeId> = TAP_ORDER
            .iter()
            .map(|&t| g.input(&format!("tap{t}"), geo[t].0))
            .collect();
        let softmax = g.input("seg_softmax", NUM_OUTPUTS);

        let e1 = stage(&mut g, "enc1", x, 3, w1, w1);
        let p1 = g.maxpool("pool1", e1);
        let c2 = g.concat("enc2.skip", &[p1, taps[0]]);
        let e2 = stage(&mut g, "enc2", c2, 2 * w1, w2, w2);
        let p2 = g.maxpool("pool2", e2);
        let c3 = g.concat("enc3.skip", &[p2, taps[1]]);
        let e3 = stage(&mut g, "enc3", c3, 2 * w2, w3, w3);
        let p3 = g.maxpool("pool3", e3);
        let u3 = g.unpool("unpool3", p3, p3);
        let cd3 = g.concat("dec3.skip", &[u3, taps[2]]);
        let d3 = stage(&mut g, "dec3", cd3, 2 * w3, w3, w2);
        let u2 = g.unpool("unpool2", d3, p2);
        let cd2 = g.concat("dec2.skip", &[u2, taps[3]]);
        let d2 = stage(&mut g, "dec2", cd2, 2 * w2, w2, w1);
        let u1 = g.unpool("unpool1", d2, p1);
        let cd1 = g.concat("dec1.skip", &[u1, taps[4]]);
        let d1 = stage(&mut g, "dec1", cd1, 2 * w1, w1, w1);
        let ch = g.concat("head.skip", &[d1, taps[5], softmax]);
        let logit = g.conv("head", ch, 2 * w1 + NUM_OUTPUTS, 1);
        g.sigmoid("sigmoid", logit);
        Self {
            graph: g,
            variant,
            logit,
            forward_passes: AtomicU64::new(0),
        }
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn variant(&self) -> ObsVariant {
        self.variant
    }

    pub fn logit_node(&self) -> NodeId {
        self.logit
    }

    /// Fresh Kaiming initialization of every layer.
    pub fn init_params(&self, rng: &mut SeededRng) -> ParamStore {
        self.graph.init_params(rng)
    }

    /// Copies the segmenter's weights into every layer whose name matches.
    /// Input channels introduced by a skip concatenation (placed after the
    /// layer's own channels) keep their fresh Kaiming values, and the head
    /// stays fresh.
    pub fn init_from_segmenter(&self, seg_params: &ParamStore, rng: &mut SeededRng) -> ParamStore {
        let mut params = self.init_params(rng);
        for p in params.iter_mut() {
            if p.name.starts_with("head.") {
                continue;
            }
            let Some(src) = seg_params.by_name(&p.name) else { continue };
            if src.shape == p.shape {
                p.data.copy_from_slice(&src.data);
            } else if src.shape.len() == 4 && p.shape.len() == 4 && src.shape[0] == p.shape[0] && src.shape[1] < p.shape[1]
            {
                // weight [cout, cin, 3, 3]: copy the leading cin_seg input channels
                let (cin_src, cin_dst) = (src.shape[1], p.shape[1]);
                for o in 0..p.shape[0] {
                    let s = o * cin_src * 9;
                    let d = o * cin_dst * 9;
                    p.data[d..d + cin_src * 9].copy_from_slice(&src.data[s..s + cin_src * 9]);
                }
            }
        }
        params
    }

    /// Observer inputs for a batch, with ablated inputs zeroed.
    pub fn inputs(&self, images: &Array4, seg: &SegOutput) -> Result<Vec<Array4>> {
        if seg.taps.len() != TAP_ORDER.len() {
            return Err(Error::ShapeMismatch {
                node: "seg_taps".into(),
                detail: format!("expected {} taps, got {}", TAP_ORDER.len(), seg.taps.len()),
            });
        }
        let gate = |a: &Array4, keep: bool| if keep { a.clone() } else { Array4::zeros(a.shape()) };
        let mut out = Vec::with_capacity(2 + TAP_ORDER.len());
        out.push(gate(images, self.variant.image));
        for &t in &TAP_ORDER {
            out.push(gate(&seg.taps[t], self.variant.skips));
        }
        out.push(gate(&seg.softmax, self.variant.skips));
        Ok(out)
    }

    fn tape<'a>(
        &'a self,
        params: &'a ParamStore,
        inputs: &[Array4],
    ) -> Result<crate::ndgrad::Tape<'a, f32>> {
        self.forward_passes.fetch_add(inputs[0].batch() as u64, Ordering::Relaxed);
        let refs: Vec<&Array4> = inputs.iter().collect();
        self.graph.forward(params, &refs, Mode::Eval, &mut SeededRng::new(0))
    }

    /// Per-pixel error probability, `(n, 1, H, W)`.
    pub fn forward(&self, params: &ParamStore, images: &Array4, seg: &SegOutput) -> Result<Array4> {
        let inputs = self.inputs(images, seg)?;
        Ok(self.tape(params, &inputs)?.output().clone())
    }

    pub fn forward_passes(&self) -> u64 {
        self.forward_passes.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.forward_passes.store(0, Ordering::Relaxed);
    }
}

/// Scores a batch: one deterministic segmenter pass for the taps, then one
/// observer pass. Returns `(scores, segmenter output)`.
pub fn obs_forward(
    seg_net: &SegNet,
    seg_params: &ParamStore,
    obs: &ObsNet,
    obs_params: &ParamStore,
    images: &Array4,
) -> Result<(Array4, SegOutput)> {
    let seg = seg_net.forward(seg_params, images, Mode::Eval, &mut SeededRng::new(0))?;
    let scores = obs.forward(obs_params, images, &seg)?;
    Ok((scores, seg))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObsTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub pos_weight: f64,
    pub lr_halving_epochs: Vec<usize>,
    /// Attack applied to every training and held-out batch; `epsilon == 0`
    /// trains on clean images.
    pub attack: AttackConfig,
    pub init_from_seg: bool,
    /// Stop after this many epochs without held-out improvement.
    pub patience: Option<usize>,
    pub heldout_fraction: f64,
    pub seed: u64,
}

impl Default for ObsTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 0.05,
            batch: 8,
            momentum: 0.9,
            weight_decay: 5e-4,
            pos_weight: 2.0,
            lr_halving_epochs: vec![25, 45],
            attack: AttackConfig::default(),
            init_from_seg: true,
            patience: Some(10),
            heldout_fraction: 0.1,
            seed: 0,
        }
    }
}

impl ObsTrainConfig {
    pub fn validate(&self) -> Result<()> {
        crate::segmenter::validate_optimizer(
            self.epochs,
            self.lr,
            self.batch,
            self.momentum,
            self.weight_decay,
            &self.lr_halving_epochs,
        )?;
        if !(self.pos_weight > 0.0 && self.pos_weight.is_finite()) {
            return Err(Error::Config(format!("pos_weight must be positive, got {}", self.pos_weight)));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(Error::Config(format!("held-out fraction {} outside [0, 1)", self.heldout_fraction)));
        }
        if self.patience == Some(0) {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        self.attack.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObsEpoch {
    pub epoch: usize,
    pub train_bce: f64,
    /// `NaN` when there is no held-out fold.
    pub heldout_bce: f64,
}

#[derive(Debug, Clone)]
pub struct ObsTrainReport {
    /// Parameters of the epoch with the lowest held-out loss (the last
    /// epoch when there is no held-out fold).
    pub params: ParamStore,
    pub epochs: Vec<ObsEpoch>,
    pub best_epoch: Option<usize>,
}

impl ObsTrainReport {
    pub fn heldout_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.heldout_bce).collect()
    }

    pub fn log_csv(&self) -> String {
        let mut s = String::from("epoch,train_bce,heldout_bce\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{:.6},{:.6}", e.epoch, e.train_bce, e.heldout_bce);
        }
        s
    }
}

/// Pre-attacked held-out batch: observer inputs, error target, validity.
struct HeldoutBatch {
    inputs: Vec<Array4>,
    target: Array4,
    valid: Vec<bool>,
}

/// Held-out fold: the last `fraction` of the training split.
pub fn heldout_split(n: usize, fraction: f64) -> usize {
    if n < 2 {
        return 0;
    }
    ((n as f64 * fraction).round() as usize).min(n - 1)
}

/// Trains the observer against a frozen segmenter. Each step augments a
/// batch, attacks it, runs the segmenter on the attacked images for taps
/// and error targets, and updates the observer with weighted BCE.
pub fn train_obsnet(
    seg_net: &SegNet,
    seg_params: &ParamStore,
    obs: &ObsNet,
    train: &[Scene],
    cfg: &ObsTrainConfig,
) -> Result<ObsTrainReport> {
    cfg.validate()?;
    let n_hold = heldout_split(train.len(), cfg.heldout_fraction);
    let (fit, hold) = train.split_at(train.len() - n_hold);
    if fit.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let seg_digest = seg_params.digest();

    let mut init_rng = SeededRng::derive(cfg.seed, 10);
    let mut order_rng = SeededRng::derive(cfg.seed, 11);
    let mut aug_rng = SeededRng::derive(cfg.seed, 12);
    let mut attack_rng = SeededRng::derive(cfg.seed, 13);
    let mut params = if cfg.init_from_seg {
        obs.init_from_segmenter(seg_params, &mut init_rng)
    } else {
        obs.init_params(&mut init_rng)
    };
    let heldout = prepare_heldout(seg_net, seg_params, obs, hold, cfg)?;

    let mut sgd = SgdState::new(&params, cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..fit.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for epoch in 0..cfg.epochs {
        if cfg.lr_halving_epochs.contains(&epoch) {
            sgd.lr *= 0.5;
        }
        order_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for (step, chunk) in order.chunks(cfg.batch).enumerate() {
            let scenes: Vec<Scene> = chunk.iter().map(|&i| augment(&fit[i], &mut aug_rng)).collect();
            let refs: Vec<&Scene> = scenes.iter().collect();
            let labels = stack_labels(&refs);
            let images = stack_images(&refs);
            let sample = make_obsnet_sample(seg_net, seg_params, &images, &labels, &cfg.attack, &mut attack_rng)?;
            let inputs = obs.inputs(&sample.images, &sample.seg)?;
            let target = Array4::from_vec([chunk.len(), 1, images.height(), images.width()], sample.target);
            let tape = obs
                .tape(&params, &inputs)
                .inspect_err(|e| log::error!("observer training failed at epoch {epoch}, step {step}: {e}"))?;
            let bce = weighted_bce(tape.output(), &target, Some(&sample.valid), cfg.pos_weight)?;
            if !bce.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: bce.loss,
                });
            }
            let grads = tape.backward_from(vec![(obs.logit, bce.grad_logit)], GradRequest::PARAMS)?;
            let grads = grads.params.expect("parameter gradients requested");
            if !grads.all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: bce.loss,
                });
            }
            sgd.step(&mut params, &grads)?;
            loss_sum += bce.loss;
            steps += 1;
        }
        let heldout_bce = heldout_loss(obs, &params, &heldout, cfg.pos_weight)?;
        let record = ObsEpoch {
            epoch,
            train_bce: loss_sum / steps as f64,
            heldout_bce,
        };
        log::info!(
            "obs epoch {epoch}: train {:.4} held-out {:.4}",
            record.train_bce,
            record.heldout_bce
        );
        epochs.push(record);

        if heldout.is_empty() {
            continue;
        }
        if best.as_ref().is_none_or(|b| heldout_bce < b.0) {
            best = Some((heldout_bce, epoch, params.clone()));
        }
        let best_epoch = best.as_ref().map(|b| b.1).unwrap_or(epoch);
        if cfg.patience.is_some_and(|p| epoch - best_epoch >= p) {
            log::info!("early stop at epoch {epoch}, best {best_epoch}");
            break;
        }
    }

    if seg_params.digest() != seg_digest {
        return Err(Error::Invariant("segmenter parameters changed during observer training".into()));
    }
    let (params, best_epoch) = match best {
        Some((_, e, p)) => (p, Some(e)),
        None => (params, None),
    };
    Ok(ObsTrainReport {
        params,
        epochs,
        best_epoch,
    })
}

fn prepare_heldout(
    seg_net: &SegNet,
    seg_params: &ParamStore,
    obs: &ObsNet,
    hold: &[Scene],
    cfg: &ObsTrainConfig,
) -> Result<Vec<HeldoutBatch>> {
    let mut rng = SeededRng::derive(cfg.seed, 14);
    let mut out = Vec::new();
    for chunk in hold.chunks(EVAL_BATCH) {
        let refs: Vec<&Scene> = chunk.iter().collect();
        let labels = stack_labels(&refs);
        let images = stack_images(&refs);
        let sample = make_obsnet_sample(seg_net, seg_params, &images, &labels, &cfg.attack, &mut rng)?;
        let inputs = obs.inputs(&sample.images, &sample.seg)?;
        out.push(HeldoutBatch {
            inputs,
            target: Array4::from_vec([chunk.len(), 1, images.height(), images.width()], sample.target),
            valid: sample.valid,
        });
    }
    Ok(out)
}

fn heldout_loss(obs: &ObsNet, params: &ParamStore, batches: &[HeldoutBatch], pos_weight: f64) -> Result<f64> {
    if batches.is_empty() {
        return Ok(f64::NAN);
    }
    let mut weighted = 0.0;
    let mut count = 0usize;
    for b in batches {
        let n_valid = b.valid.iter().filter(|&&v| v).count();
        if n_valid == 0 {
            continue;
        }
        let pred = obs.tape(params, &b.inputs)?.output().clone();
        weighted += weighted_bce(&pred, &b.target, Some(&b.valid), pos_weight)?.loss * n_valid as f64;
        count += n_valid;
    }
    if count == 0 {
        return Err(Error::NoSupervisedPixels);
    }
    Ok(weighted / count as f64)
}
