//! End-to-end experiment: data, segmenter (plus ensemble members),
//! observer, every scorer, every evaluation mode.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use obsnet_core::baselines::Method;
use obsnet_core::io_util::write_atomic;
use obsnet_core::metrics::{EvalMode, MetricsReport};
use obsnet_core::{Result, SeededRng};

use crate::commands::{eval, gen_data, score, train_obs, train_seg, write_results, ScoreJob};
use crate::config::ExperimentConfig;

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub results: Vec<MetricsReport>,
    /// `(method, clean scoring seconds)`.
    pub score_seconds: Vec<(Method, f64)>,
    pub seg_train_miou: f64,
    pub total_seconds: f64,
}

pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn seg(&self, member: usize) -> PathBuf {
        self.root.join("seg").join(format!("seg_{member}.ogw"))
    }
    pub fn obs(&self) -> PathBuf {
        self.root.join("obs").join("obs.ogw")
    }
    pub fn clean_scores(&self) -> PathBuf {
        self.root.join("scores").join("clean")
    }
    pub fn attack_scores(&self) -> PathBuf {
        self.root.join("scores").join("attack")
    }
    pub fn results(&self) -> PathBuf {
        self.root.join("results.csv")
    }
    pub fn pareto(&self) -> PathBuf {
        self.root.join("pareto.csv")
    }
}

/// Seed of deep-ensemble member `k`; member 0 is the primary segmenter.
pub fn member_seed(seed: u64, k: usize) -> u64 {
    if k == 0 {
        seed
    } else {
        SeededRng::derive(seed, 0x656e_7300 + k as u64).next_u64()
    }
}

pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let layout = Layout { root: cfg.root.clone() };
    write_atomic(&layout.root.join("config.txt"), cfg.to_text().as_bytes())?;

    let digest = gen_data(&layout.data(), cfg.seed, cfg.n_train, cfg.n_test)?;
    log::info!("dataset {digest}");

    let seg_report = train_seg(&layout.data(), &layout.seg(0), &cfg.seg)?;
    let seg_train_miou = seg_report.epochs.last().map_or(0.0, |e| e.miou);

    let mut ensemble = vec![layout.seg(0)];
    if cfg.methods.contains(&Method::DeepEnsemble) {
        for k in 1..cfg.scorer.ensemble_members {
            let member = obsnet_core::segmenter::SegTrainConfig {
                seed: member_seed(cfg.seed, k),
                ..cfg.seg.clone()
            };
            train_seg(&layout.data(), &layout.seg(k), &member)?;
            ensemble.push(layout.seg(k));
        }
    }
    let obs = if cfg.methods.contains(&Method::ObsNet) {
        train_obs(&layout.data(), &layout.seg(0), &layout.obs(), &cfg.obs, cfg.obs_variant)?;
        Some(layout.obs())
    } else {
        None
    };

    let clean = cfg.modes.iter().any(|&m| m != EvalMode::Attack);
    let attacked = cfg.modes.contains(&EvalMode::Attack);
    let mut results = Vec::new();
    let mut score_seconds = Vec::new();
    for &method in &cfg.methods {
        let job = |out: PathBuf, attack_epsilon: Option<f32>| ScoreJob {
            data: layout.data(),
            seg: layout.seg(0),
            obs: obs.clone(),
            obs_variant: cfg.obs_variant,
            ensemble: ensemble.clone(),
            method,
            out,
            scorer: cfg.scorer,
            fit: true,
            calibration_fraction: cfg.obs.heldout_fraction,
            attack_epsilon,
        };
        if clean {
            let s = score(&job(layout.clean_scores(), None))?;
            score_seconds.push((method, s.seconds));
        }
        if attacked {
            score(&job(layout.attack_scores(), Some(cfg.eval_attack_epsilon)))?;
        }
        for &mode in &cfg.modes {
            let dir = if mode == EvalMode::Attack {
                layout.attack_scores()
            } else {
                layout.clean_scores()
            };
            let r = eval(&layout.data(), &dir.join(method.name()), mode, method.name(), cfg.seed)?;
            log::info!("{} {}: auroc {:.4} fpr95 {:.4}", r.method, r.mode, r.auroc, r.fpr95tpr);
            results.push(r);
        }
    }
    write_results(&layout.results(), &results)?;
    write_atomic(&layout.pareto(), pareto_csv(&results, &score_seconds).as_bytes())?;
    Ok(PipelineOutcome {
        results,
        score_seconds,
        seg_train_miou,
        total_seconds: start.elapsed().as_secs_f64(),
    })
}

/// `method,auroc,seconds`: OOD-mode AuROC against clean scoring time.
pub fn pareto_csv(results: &[MetricsReport], seconds: &[(Method, f64)]) -> String {
    let mut s = String::from("method,auroc,seconds\n");
    for (m, secs) in seconds {
        if let Some(r) = results.iter().find(|r| r.method == m.name() && r.mode == EvalMode::Ood) {
            let _ = writeln!(s, "{},{:.6},{:.4}", m.name(), r.auroc, secs);
        }
    }
    s
}

pub fn load_and_run(config: &Path) -> Result<PipelineOutcome> {
    run_pipeline(&ExperimentConfig::load(config)?)
}
