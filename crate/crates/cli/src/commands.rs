//! Command implementations, shared by the binary and the tests.
//!
//! Artifact layout of a score directory `<out>/<method>/`:
//! `score_%05d.pfm` (per-pixel score), `pred_%05d.pgm` (segmenter argmax on
//! the scored image) and, for attacked inputs, `mask_%05d.pgm` (255 inside
//! the attack mask).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use obsnet_core::baselines::{fit_odin, fit_temperature, load_ensemble, Method, ScorerConfig, ScoringContext};
use obsnet_core::io_util::{read_file, write_atomic};
use obsnet_core::laa::{attack_batch, AttackConfig};
use obsnet_core::metrics::{evaluate, EvalImage, EvalMode, MetricsReport, CSV_HEADER};
use obsnet_core::netpbm::{read_pfm, read_pgm, write_pfm, write_pgm, FloatImage, GrayImage};
use obsnet_core::obsnet::{heldout_split, obs_forward, train_obsnet, ObsNet, ObsTrainConfig, ObsTrainReport, ObsVariant};
use obsnet_core::segmenter::{
    evaluate_segmenter, predict, train_segmenter, SegNet, SegTrainConfig, SegTrainReport,
};
use obsnet_core::synthdata::{Dataset, Scene, HEIGHT, PIXELS, WIDTH};
use obsnet_core::{Error, Mode, ParamStore, Result, SeededRng};

use crate::config::eval_attack;

/// Random-stream tag of test-time attacks, so every method sees the same
/// attacked images.
const EVAL_ATTACK_STREAM: u64 = 0x6576_616c_6174_6b00;

pub fn gen_data(out: &Path, seed: u64, n_train: usize, n_test: usize) -> Result<String> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::Config("both splits need at least one scene".into()));
    }
    Dataset::generate(seed, n_train, n_test).write(out)
}

pub fn log_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("csv")
}

/// Trains a segmenter and writes the checkpoint plus `<stem>.csv`.
pub fn train_seg(data: &Path, out: &Path, cfg: &SegTrainConfig) -> Result<SegTrainReport> {
    let ds = Dataset::read(data)?;
    let net = SegNet::new();
    let report = train_segmenter(&net, &ds.train, cfg)?;
    report.params.save(out)?;
    write_atomic(&log_path(out), report.log_csv().as_bytes())?;
    Ok(report)
}

pub fn load_params(path: &Path) -> Result<ParamStore> {
    if !path.exists() {
        return Err(Error::Missing(format!("checkpoint {}", path.display())));
    }
    ParamStore::load(path)
}

/// Trains an observer against the segmenter checkpoint `seg`.
pub fn train_obs(data: &Path, seg: &Path, out: &Path, cfg: &ObsTrainConfig, variant: ObsVariant) -> Result<ObsTrainReport> {
    let ds = Dataset::read(data)?;
    let seg_params = load_params(seg)?;
    let seg_net = SegNet::new();
    let obs = ObsNet::new(variant);
    let report = train_obsnet(&seg_net, &seg_params, &obs, &ds.train, cfg)?;
    report.params.save(out)?;
    write_atomic(&log_path(out), report.log_csv().as_bytes())?;
    Ok(report)
}

/// The calibration fold: the tail of the training split, the same scenes
/// the observer holds out.
pub fn calibration_fold(train: &[Scene], fraction: f64) -> &[Scene] {
    let n = heldout_split(train.len(), fraction).max(1);
    &train[train.len() - n..]
}

/// Inputs of a `score` run.
#[derive(Debug, Clone)]
pub struct ScoreJob {
    pub data: PathBuf,
    pub seg: PathBuf,
    pub obs: Option<PathBuf>,
    pub obs_variant: ObsVariant,
    /// Deep-ensemble checkpoints; the primary segmenter is used when empty.
    pub ensemble: Vec<PathBuf>,
    pub method: Method,
    pub out: PathBuf,
    pub scorer: ScorerConfig,
    /// Fit TempScale's temperature and ODIN's `(T, epsilon)` on the
    /// calibration fold instead of taking them from `scorer`.
    pub fit: bool,
    pub calibration_fraction: f64,
    /// Square-patch attack applied to every test image before scoring.
    pub attack_epsilon: Option<f32>,
}

#[derive(Debug, Clone)]
pub struct ScoreSummary {
    pub dir: PathBuf,
    pub images: usize,
    /// Wall-clock seconds of the scoring computation, file I/O excluded.
    pub seconds: f64,
    pub scorer: ScorerConfig,
}

pub fn method_dir(out: &Path, method: Method) -> PathBuf {
    out.join(method.name())
}

fn file(dir: &Path, kind: &str, ext: &str, i: usize) -> PathBuf {
    dir.join(format!("{kind}_{i:05}.{ext}"))
}

/// Applies the evaluation attack to each test scene independently.
pub fn attacked_test_images(
    net: &SegNet,
    params: &ParamStore,
    scenes: &[Scene],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<(Vec<Scene>, Vec<Vec<bool>>)> {
    let mut images = Vec::with_capacity(scenes.len());
    let mut masks = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let mut rng = SeededRng::derive(seed ^ EVAL_ATTACK_STREAM, i as u64);
        let out = attack_batch(net, params, &s.to_array(), None, cfg, &mut rng)?;
        images.push(Scene {
            image: out.images.data().to_vec(),
            ..s.clone()
        });
        masks.push(out.masks.into_iter().next().expect("batch of one"));
    }
    Ok((images, masks))
}

/// Scores every test image with one method and writes the score directory
/// atomically: it is assembled under a temporary name and renamed at the
/// end, so a failed run leaves no partial directory behind.
pub fn score(job: &ScoreJob) -> Result<ScoreSummary> {
    job.scorer.validate()?;
    let ds = Dataset::read(&job.data)?;
    let seg = SegNet::new();
    let params = load_params(&job.seg)?;
    let ensemble = if job.method == Method::DeepEnsemble && !job.ensemble.is_empty() {
        let paths: Vec<&Path> = job.ensemble.iter().map(|p| p.as_path()).collect();
        load_ensemble(&paths)?
    } else {
        vec![params.clone()]
    };
    let obs = ObsNet::new(job.obs_variant);
    let obs_params = match (&job.obs, job.method) {
        (Some(p), _) => Some(load_params(p)?),
        (None, Method::ObsNet) => return Err(Error::Missing("--obs checkpoint required for obsnet".into())),
        (None, _) => None,
    };

    let mut scorer = job.scorer;
    if job.fit {
        let calib = calibration_fold(&ds.train, job.calibration_fraction);
        match job.method {
            Method::TempScale => scorer.temperature = fit_temperature(&seg, &params, calib)?,
            Method::Odin => (scorer.odin_temperature, scorer.odin_epsilon) = fit_odin(&seg, &params, calib)?,
            _ => {}
        }
    }

    let (test, masks) = match job.attack_epsilon {
        Some(eps) => {
            let (imgs, masks) = attacked_test_images(&seg, &params, &ds.test, &eval_attack(eps), scorer.seed)?;
            (imgs, Some(masks))
        }
        None => (ds.test.clone(), None),
    };
    let ctx = ScoringContext {
        seg: &seg,
        params: &params,
        ensemble: &ensemble,
        obs: obs_params.as_ref().map(|p| (&obs, p)),
        cfg: scorer,
    };
    let start = Instant::now();
    let scores = ctx.score_scenes(job.method, &test)?;
    let seconds = start.elapsed().as_secs_f64();
    let preds = predict(&seg, &params, &test)?;

    let dir = method_dir(&job.out, job.method);
    let tmp = job.out.join(format!(".{}.tmp{}", job.method.name(), std::process::id()));
    let result = write_score_dir(&tmp, &scores, &preds, masks.as_deref()).and_then(|_| {
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        std::fs::rename(&tmp, &dir).map_err(|e| Error::io(&dir, e))
    });
    if result.is_err() {
        let _ = std::fs::remove_dir_all(&tmp);
    }
    result?;
    log::info!("scored {} images with {} in {seconds:.2}s", test.len(), job.method);
    Ok(ScoreSummary {
        dir,
        images: test.len(),
        seconds,
        scorer,
    })
}

fn write_score_dir(dir: &Path, scores: &[Vec<f32>], preds: &[u8], masks: Option<&[Vec<bool>]>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in scores.iter().enumerate() {
        let img = FloatImage {
            width: WIDTH,
            height: HEIGHT,
            data: s.clone(),
        };
        write_pfm(&file(dir, "score", "pfm", i), &img)?;
        let pred = GrayImage {
            width: WIDTH,
            height: HEIGHT,
            data: preds[i * PIXELS..(i + 1) * PIXELS].to_vec(),
        };
        write_pgm(&file(dir, "pred", "pgm", i), &pred)?;
        if let Some(m) = masks {
            let mask = GrayImage {
                width: WIDTH,
                height: HEIGHT,
                data: m[i].iter().map(|&b| if b { 255 } else { 0 }).collect(),
            };
            write_pgm(&file(dir, "mask", "pgm", i), &mask)?;
        }
    }
    Ok(())
}

fn read_map<T>(path: &Path, read: impl Fn(&Path) -> Result<T>, dims: impl Fn(&T) -> (usize, usize)) -> Result<T> {
    if !path.exists() {
        return Err(Error::Missing(path.display().to_string()));
    }
    let img = read(path)?;
    if dims(&img) != (WIDTH, HEIGHT) {
        return Err(Error::ShapeMismatch {
            node: path.display().to_string(),
            detail: format!("expected {WIDTH}x{HEIGHT}, got {:?}", dims(&img)),
        });
    }
    Ok(img)
}

/// Evaluates one score directory against the test split.
pub fn eval(data: &Path, scores: &Path, mode: EvalMode, method: &str, seed: u64) -> Result<MetricsReport> {
    let ds = Dataset::read(data)?;
    let mut maps = Vec::with_capacity(ds.test.len());
    for i in 0..ds.test.len() {
        let s = read_map(&file(scores, "score", "pfm", i), read_pfm, |m: &FloatImage| (m.width, m.height))?;
        let p = read_map(&file(scores, "pred", "pgm", i), read_pgm, |m: &GrayImage| (m.width, m.height))?;
        let positive: Vec<bool> = match mode {
            EvalMode::Ood => ds.test[i].ood_mask.clone(),
            EvalMode::Error => p.data.iter().zip(&ds.test[i].labels).map(|(a, b)| a != b).collect(),
            EvalMode::Attack => {
                let path = file(scores, "mask", "pgm", i);
                if !path.exists() {
                    return Err(Error::Missing(format!(
                        "{} (attack mode needs scores made with --attack-epsilon)",
                        path.display()
                    )));
                }
                read_map(&path, read_pgm, |m: &GrayImage| (m.width, m.height))?
                    .data
                    .iter()
                    .map(|&v| v > 0)
                    .collect()
            }
        };
        let correct: Vec<bool> = p.data.iter().zip(&ds.test[i].labels).map(|(a, b)| a == b).collect();
        maps.push((s.data, positive, correct));
    }
    let images: Vec<EvalImage> = maps
        .iter()
        .zip(&ds.test)
        .map(|((s, pos, cor), scene)| EvalImage {
            scores: s,
            labels: &scene.labels,
            positive: pos,
            correct: cor,
        })
        .collect();
    evaluate(method, mode, seed, &images)
}

/// Appends rows to a CSV file, writing the header when the file is new.
pub fn append_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = if path.exists() {
        String::from_utf8(read_file(path)?).map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?
    } else {
        format!("{header}\n")
    };
    if !text.starts_with(header) {
        return Err(Error::Config(format!("{} has an unexpected header", path.display())));
    }
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

pub fn write_results(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut text = format!("{CSV_HEADER}\n");
    for r in reports {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub epsilon: f32,
    pub fpr95tpr: f64,
    pub auroc: f64,
}

/// Trains one observer per epsilon and evaluates each in OOD mode.
pub fn sweep_epsilon(
    ds: &Dataset,
    seg_params: &ParamStore,
    cfg: &ObsTrainConfig,
    variant: ObsVariant,
    grid: &[f32],
) -> Result<Vec<SweepPoint>> {
    let seg = SegNet::new();
    let mut out = Vec::with_capacity(grid.len());
    for &eps in grid {
        let mut c = cfg.clone();
        c.attack.epsilon = eps;
        let obs = ObsNet::new(variant);
        let report = train_obsnet(&seg, seg_params, &obs, &ds.train, &c)?;
        let r = ood_report(&seg, seg_params, &obs, &report.params, &ds.test, cfg.seed)?;
        log::info!("epsilon {eps}: fpr95tpr {:.4} auroc {:.4}", r.fpr95tpr, r.auroc);
        out.push(SweepPoint {
            epsilon: eps,
            fpr95tpr: r.fpr95tpr,
            auroc: r.auroc,
        });
    }
    Ok(out)
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("epsilon,fpr95tpr,auroc\n");
    for p in points {
        let _ = writeln!(s, "{},{:.6},{:.6}", p.epsilon, p.fpr95tpr, p.auroc);
    }
    s
}

/// OOD-mode metrics of an in-memory observer on clean test scenes.
pub fn ood_report(
    seg: &SegNet,
    seg_params: &ParamStore,
    obs: &ObsNet,
    obs_params: &ParamStore,
    test: &[Scene],
    seed: u64,
) -> Result<MetricsReport> {
    let mut maps = Vec::with_capacity(test.len());
    for chunk in test.chunks(obsnet_core::segmenter::EVAL_BATCH) {
        let refs: Vec<&Scene> = chunk.iter().collect();
        let (scores, out) = obs_forward(seg, seg_params, obs, obs_params, &obsnet_core::synthdata::stack_images(&refs))?;
        let pred = out.predictions();
        for (b, s) in chunk.iter().enumerate() {
            let p = &pred[b * PIXELS..(b + 1) * PIXELS];
            let correct: Vec<bool> = p.iter().zip(&s.labels).map(|(a, c)| a == c).collect();
            maps.push((scores.image(b).to_vec(), correct));
        }
    }
    let images: Vec<EvalImage> = maps
        .iter()
        .zip(test)
        .map(|((s, c), scene)| EvalImage {
            scores: s,
            labels: &scene.labels,
            positive: &scene.ood_mask,
            correct: c,
        })
        .collect();
    evaluate("obsnet", EvalMode::Ood, seed, &images)
}

/// Test-split `(mIoU, global accuracy)` of a checkpoint.
pub fn seg_quality(data: &Path, seg: &Path) -> Result<(f64, f64)> {
    let ds = Dataset::read(data)?;
    let params = load_params(seg)?;
    evaluate_segmenter(&SegNet::new(), &params, &ds.test)
}

/// Clean-image segmenter output for one scene.
pub fn seg_output(params: &ParamStore, scene: &Scene) -> Result<obsnet_core::segmenter::SegOutput> {
    SegNet::new().forward(params, &scene.to_array(), Mode::Eval, &mut SeededRng::new(0))
}
