//! The seeded synthetic benchmark behind the ablation, ordering, speed,
//! decoupling and detection-mode criteria.

use std::time::Instant;

use obsnet_cli::commands::{attacked_test_images, calibration_fold, load_params};
use obsnet_cli::config::eval_attack;
use obsnet_cli::pipeline::{member_seed, Layout};
use obsnet_cli::ExperimentConfig;
use obsnet_core::baselines::{fit_odin, fit_temperature, Method, ScoringContext};
use obsnet_core::laa::{make_obsnet_sample, AttackConfig, Region};
use obsnet_core::metrics::{evaluate, EvalImage, EvalMode, MetricsReport};
use obsnet_core::obsnet::{train_obsnet, ObsNet, ObsTrainConfig, ObsVariant};
use obsnet_core::segmenter::{evaluate_segmenter, predict, train_segmenter, SegNet, SegTrainConfig};
use obsnet_core::synthdata::{stack_images, stack_labels, Dataset, Scene, PIXELS, VOID_ID};
use obsnet_core::{ParamStore, Result, SeededRng};

/// Sizes of the benchmark. Everything not listed follows the default
/// experiment configuration.
#[derive(Debug, Clone)]
pub struct Budget {
    pub seeds: usize,
    /// Leading train scenes used to fit each observer variant.
    pub obs_scenes: usize,
    pub obs_epochs: usize,
    pub sweep_scenes: usize,
    pub sweep_epochs: usize,
    pub sweep_grid: Vec<f32>,
}

/// Observer variants trained per seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Full observer, random-shape local attacks.
    Laa,
    /// Full observer, no attack.
    NoLaa,
    /// Random-shape attacks, image input only.
    NoSkip,
    /// Full observer, every pixel attacked.
    AllPixels,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Laa, Variant::NoLaa, Variant::NoSkip, Variant::AllPixels];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Laa => "obsnet",
            Variant::NoLaa => "obsnet-nolaa",
            Variant::NoSkip => "obsnet-noskip",
            Variant::AllPixels => "obsnet-allpix",
        }
    }

    fn setup(self) -> (ObsVariant, AttackConfig) {
        let attack = AttackConfig::default();
        match self {
            Variant::Laa => (ObsVariant::default(), attack),
            Variant::NoLaa => (ObsVariant::default(), AttackConfig { epsilon: 0.0, ..attack }),
            Variant::NoSkip => (
                ObsVariant {
                    skips: false,
                    image: true,
                },
                attack,
            ),
            Variant::AllPixels => (
                ObsVariant::default(),
                AttackConfig {
                    region: Region::AllPixels,
                    ..attack
                },
            ),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    /// OOD-mode reports of every method and every observer variant.
    pub ood: Vec<MetricsReport>,
    pub error_obs: MetricsReport,
    pub error_mcp: MetricsReport,
    pub attack_obs: MetricsReport,
    pub attack_mcdropout: MetricsReport,
    pub seg_miou: f64,
    pub robust_miou: f64,
    /// Network passes per test image, from the instrumented counters.
    pub obs_passes: f64,
    pub mcdropout_passes: f64,
    /// Clean scoring seconds per method.
    pub seconds: Vec<(Method, f64)>,
    pub digest_kept: bool,
    pub miou_kept: bool,
    /// Mean observer score on misclassified and on correct pixels.
    pub obs_mean_on_errors: f64,
    pub obs_mean_on_correct: f64,
    /// OOD fpr95tpr of the cheaper observers of the epsilon sweep.
    pub sweep_fpr: Vec<f64>,
}

impl SeedResult {
    pub fn ood(&self, name: &str) -> &MetricsReport {
        self.ood.iter().find(|r| r.method == name).expect("method scored")
    }

    pub fn secs(&self, m: Method) -> f64 {
        self.seconds
            .iter()
            .find(|s| s.0 == m)
            .map(|s| s.1)
            .expect("method timed")
    }
}

fn observer_config(seed: u64, epochs: usize, attack: AttackConfig) -> ObsTrainConfig {
    ObsTrainConfig {
        epochs,
        lr_halving_epochs: vec![(epochs / 2).max(1)],
        patience: None,
        attack,
        seed,
        ..Default::default()
    }
}

struct Truth {
    correct: Vec<Vec<bool>>,
    errors: Vec<Vec<bool>>,
}

fn truth(net: &SegNet, params: &ParamStore, scenes: &[Scene]) -> Result<Truth> {
    let pred = predict(net, params, scenes)?;
    let correct: Vec<Vec<bool>> = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            pred[i * PIXELS..(i + 1) * PIXELS]
                .iter()
                .zip(&s.labels)
                .map(|(p, l)| p == l)
                .collect()
        })
        .collect();
    let errors = correct.iter().map(|c| c.iter().map(|&ok| !ok).collect()).collect();
    Ok(Truth { correct, errors })
}

fn report(
    name: &str,
    mode: EvalMode,
    seed: u64,
    scores: &[Vec<f32>],
    scenes: &[Scene],
    positive: &[Vec<bool>],
    correct: &[Vec<bool>],
) -> Result<MetricsReport> {
    let images: Vec<EvalImage> = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| EvalImage {
            scores: &scores[i],
            labels: &s.labels,
            positive: &positive[i],
            correct: &correct[i],
        })
        .collect();
    evaluate(name, mode, seed, &images)
}

fn mean_where(scores: &[Vec<f32>], scenes: &[Scene], select: &[Vec<bool>]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for ((s, scene), sel) in scores.iter().zip(scenes).zip(select) {
        for p in 0..PIXELS {
            if sel[p] && scene.labels[p] != VOID_ID && !scene.ood_mask[p] {
                sum += s[p] as f64;
                n += 1;
            }
        }
    }
    sum / n.max(1) as f64
}

/// Runs one benchmark seed on the data and segmenters of a finished
/// pipeline run. Seed `k` uses segmenter member `k` as its primary
/// network and the full member set as its deep ensemble.
pub fn run_seed(layout: &Layout, cfg: &ExperimentConfig, budget: &Budget, k: usize) -> Result<SeedResult> {
    let seed = member_seed(cfg.seed, k);
    let ds = Dataset::read(&layout.data())?;
    let seg = SegNet::new();
    let params = load_params(&layout.seg(k))?;
    let mut ensemble = vec![params.clone()];
    for j in (0..cfg.scorer.ensemble_members).filter(|&j| j != k) {
        ensemble.push(load_params(&layout.seg(j))?);
    }

    let (seg_miou, _) = evaluate_segmenter(&seg, &params, &ds.test)?;
    let robust_cfg = SegTrainConfig {
        robust: true,
        seed,
        ..cfg.seg.clone()
    };
    let robust = train_segmenter(&seg, &ds.train, &robust_cfg)?;
    let (robust_miou, _) = evaluate_segmenter(&seg, &robust.params, &ds.test)?;
    log::info!("seed {seed}: seg mIoU {seg_miou:.4}, robust {robust_miou:.4}");

    let obs_train = &ds.train[..budget.obs_scenes.min(ds.train.len())];
    let digest = params.digest();
    let mut observers = Vec::new();
    for v in Variant::ALL {
        let (variant, attack) = v.setup();
        let obs = ObsNet::new(variant);
        let rep = train_obsnet(
            &seg,
            &params,
            &obs,
            obs_train,
            &observer_config(seed, budget.obs_epochs, attack),
        )?;
        log::info!("seed {seed}: trained {} (best epoch {:?})", v.name(), rep.best_epoch);
        observers.push((v, obs, rep.params));
    }
    let digest_kept = params.digest() == digest;
    let (miou_after, _) = evaluate_segmenter(&seg, &params, &ds.test)?;
    let miou_kept = miou_after.to_bits() == seg_miou.to_bits();

    let calib = calibration_fold(&ds.train, cfg.obs.heldout_fraction);
    let mut scorer = cfg.scorer;
    scorer.seed = seed;
    scorer.temperature = fit_temperature(&seg, &params, calib)?;
    (scorer.odin_temperature, scorer.odin_epsilon) = fit_odin(&seg, &params, calib)?;

    let test = &ds.test;
    let n = test.len() as f64;
    let clean = truth(&seg, &params, test)?;
    let ood_mask: Vec<Vec<bool>> = test.iter().map(|s| s.ood_mask.clone()).collect();
    let (laa_obs, laa_params) = observers
        .iter()
        .find(|o| o.0 == Variant::Laa)
        .map(|o| (&o.1, &o.2))
        .unwrap();
    let ctx = ScoringContext {
        seg: &seg,
        params: &params,
        ensemble: &ensemble,
        obs: Some((laa_obs, laa_params)),
        cfg: scorer,
    };

    let mut ood = Vec::new();
    let mut seconds = Vec::new();
    let (mut obs_passes, mut mcdropout_passes) = (0.0, 0.0);
    let mut obs_scores = Vec::new();
    let mut mcp_scores = Vec::new();
    for m in Method::ALL {
        seg.reset_counters();
        laa_obs.reset_counters();
        let start = Instant::now();
        let scores = ctx.score_scenes(m, test)?;
        seconds.push((m, start.elapsed().as_secs_f64()));
        match m {
            Method::ObsNet => obs_passes = (seg.forward_passes() + laa_obs.forward_passes()) as f64 / n,
            Method::McDropout => mcdropout_passes = seg.forward_passes() as f64 / n,
            _ => {}
        }
        ood.push(report(
            m.name(),
            EvalMode::Ood,
            seed,
            &scores,
            test,
            &ood_mask,
            &clean.correct,
        )?);
        match m {
            Method::ObsNet => obs_scores = scores,
            Method::Mcp => mcp_scores = scores,
            _ => {}
        }
    }
    for (v, obs, p) in observers.iter().filter(|o| o.0 != Variant::Laa) {
        let ctx = ScoringContext {
            obs: Some((obs, p)),
            ..ctx
        };
        let scores = ctx.score_scenes(Method::ObsNet, test)?;
        ood.push(report(
            v.name(),
            EvalMode::Ood,
            seed,
            &scores,
            test,
            &ood_mask,
            &clean.correct,
        )?);
    }

    let error_obs = report(
        "obsnet",
        EvalMode::Error,
        seed,
        &obs_scores,
        test,
        &clean.errors,
        &clean.correct,
    )?;
    let error_mcp = report(
        "mcp",
        EvalMode::Error,
        seed,
        &mcp_scores,
        test,
        &clean.errors,
        &clean.correct,
    )?;
    let obs_mean_on_errors = mean_where(&obs_scores, test, &clean.errors);
    let obs_mean_on_correct = mean_where(&obs_scores, test, &clean.correct);

    let (attacked, masks) = attacked_test_images(&seg, &params, test, &eval_attack(cfg.eval_attack_epsilon), seed)?;
    let attacked_truth = truth(&seg, &params, &attacked)?;
    let attack_obs = report(
        "obsnet",
        EvalMode::Attack,
        seed,
        &ctx.score_scenes(Method::ObsNet, &attacked)?,
        &attacked,
        &masks,
        &attacked_truth.correct,
    )?;
    let attack_mcdropout = report(
        "mcdropout",
        EvalMode::Attack,
        seed,
        &ctx.score_scenes(Method::McDropout, &attacked)?,
        &attacked,
        &masks,
        &attacked_truth.correct,
    )?;

    let sweep_train = &ds.train[..budget.sweep_scenes.min(ds.train.len())];
    let mut sweep_fpr = Vec::new();
    for &eps in &budget.sweep_grid {
        let obs = ObsNet::default();
        let attack = AttackConfig {
            epsilon: eps,
            ..Default::default()
        };
        let rep = train_obsnet(
            &seg,
            &params,
            &obs,
            sweep_train,
            &observer_config(seed, budget.sweep_epochs, attack),
        )?;
        let ctx = ScoringContext {
            obs: Some((&obs, &rep.params)),
            ..ctx
        };
        let scores = ctx.score_scenes(Method::ObsNet, test)?;
        let r = report("obsnet", EvalMode::Ood, seed, &scores, test, &ood_mask, &clean.correct)?;
        log::info!("seed {seed}: sweep eps {eps} fpr95 {:.4}", r.fpr95tpr);
        sweep_fpr.push(r.fpr95tpr);
    }

    Ok(SeedResult {
        seed,
        ood,
        error_obs,
        error_mcp,
        attack_obs,
        attack_mcdropout,
        seg_miou,
        robust_miou,
        obs_passes,
        mcdropout_passes,
        seconds,
        digest_kept,
        miou_kept,
        obs_mean_on_errors,
        obs_mean_on_correct,
        sweep_fpr,
    })
}

fn ce_in_mask(logits: &[f32], target: &[u8], mask: &[bool]) -> f64 {
    let channels = logits.len() / PIXELS;
    let (mut sum, mut n) = (0.0, 0usize);
    for p in (0..PIXELS).filter(|&p| mask[p]) {
        let z: Vec<f64> = (0..channels).map(|c| logits[c * PIXELS + p] as f64).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        sum += lse - z[target[p] as usize];
        n += 1;
    }
    sum / n.max(1) as f64
}

/// Fraction of images whose mean in-mask cross-entropy, measured against
/// the clean prediction, strictly rises under a random-shape min-pc attack.
pub fn attack_efficacy(net: &SegNet, params: &ParamStore, scenes: &[Scene], seed: u64) -> Result<f64> {
    let cfg = AttackConfig::default();
    let mut raised = 0;
    for (i, s) in scenes.iter().enumerate() {
        let x = s.to_array();
        let clean = net.forward(params, &x, obsnet_core::Mode::Eval, &mut SeededRng::new(0))?;
        let pred = clean.predictions();
        let out = obsnet_core::laa::attack_batch(net, params, &x, None, &cfg, &mut SeededRng::derive(seed, i as u64))?;
        let attacked = net.forward(params, &out.images, obsnet_core::Mode::Eval, &mut SeededRng::new(0))?;
        let mask = &out.masks[0];
        if ce_in_mask(attacked.logits.data(), &pred, mask) > ce_in_mask(clean.logits.data(), &pred, mask) {
            raised += 1;
        }
    }
    Ok(raised as f64 / scenes.len() as f64)
}

/// Mean per-image error-target rate over `scenes` for each epsilon, each
/// image attacked with the same random-shape stream.
pub fn error_rates(
    net: &SegNet,
    params: &ParamStore,
    scenes: &[Scene],
    epsilons: &[f32],
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rates = Vec::new();
    for &epsilon in epsilons {
        let cfg = AttackConfig {
            epsilon,
            ..Default::default()
        };
        let mut total = 0.0;
        for chunk_start in (0..scenes.len()).step_by(16) {
            let chunk: Vec<&Scene> = scenes[chunk_start..(chunk_start + 16).min(scenes.len())]
                .iter()
                .collect();
            let mut rng = SeededRng::derive(seed, chunk_start as u64);
            let sample = make_obsnet_sample(
                net,
                params,
                &stack_images(&chunk),
                &stack_labels(&chunk),
                &cfg,
                &mut rng,
            )?;
            for b in 0..chunk.len() {
                let t = &sample.target[b * PIXELS..(b + 1) * PIXELS];
                let v = &sample.valid[b * PIXELS..(b + 1) * PIXELS];
                let valid = v.iter().filter(|&&x| x).count().max(1);
                let pos = t.iter().zip(v).filter(|(&t, &v)| v && t > 0.5).count();
                total += pos as f64 / valid as f64;
            }
        }
        rates.push(total / scenes.len() as f64);
    }
    Ok(rates)
}
