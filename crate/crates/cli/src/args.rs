//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use obsnet_core::baselines::{Method, ScorerConfig};
use obsnet_core::laa::{AttackConfig, Direction, GradLabel, Region};
use obsnet_core::metrics::EvalMode;
use obsnet_core::obsnet::{ObsTrainConfig, ObsVariant};
use obsnet_core::segmenter::SegTrainConfig;
use obsnet_core::{Error, ErrorCategory, Result};

use crate::commands::{self, ScoreJob};
use crate::config::{ExperimentConfig, DEFAULT_N_TEST, DEFAULT_N_TRAIN};
use crate::{pipeline, render};

#[derive(Debug, Parser)]
#[command(name = "obsnet", version, about = "Observer-network OOD detection experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_N_TRAIN)]
        n_train: usize,
        #[arg(long, default_value_t = DEFAULT_N_TEST)]
        n_test: usize,
    },
    /// Train the segmenter.
    TrainSeg {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train on attacked batches.
        #[arg(long)]
        robust: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        opt: SegOptArgs,
        #[command(flatten)]
        attack: AttackArgs,
    },
    /// Train the observer against a frozen segmenter.
    TrainObsnet {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seg: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        opt: ObsOptArgs,
        #[command(flatten)]
        attack: AttackArgs,
    },
    /// Write per-image score maps for one method.
    Score {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seg: PathBuf,
        /// Observer checkpoint, required for `obsnet`.
        #[arg(long)]
        obs: Option<PathBuf>,
        #[arg(long)]
        method: Method,
        /// Scores go to `<out>/<method>/`.
        #[arg(long)]
        out: PathBuf,
        /// Deep-ensemble member checkpoints, comma separated.
        #[arg(long, value_delimiter = ',')]
        ensemble: Vec<PathBuf>,
        /// Square-patch attack strength applied to test images first
        /// (attack-mode evaluation).
        #[arg(long)]
        attack_epsilon: Option<f32>,
        #[command(flatten)]
        scorer: ScorerArgs,
        #[command(flatten)]
        variant: VariantArgs,
    },
    /// Evaluate a score directory and append a row to a results CSV.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// A `<out>/<method>/` directory written by `score`.
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value = "ood")]
        mode: EvalMode,
        #[arg(long, default_value = "results.csv")]
        out: PathBuf,
        /// Method name for the row; defaults to the directory name.
        #[arg(long)]
        method: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one observer per epsilon and write `epsilon,fpr95tpr,auroc`.
    SweepEpsilon {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seg: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.005,0.01,0.02,0.05,0.1")]
        grid: Vec<f32>,
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        opt: ObsOptArgs,
        #[command(flatten)]
        attack: AttackArgs,
    },
    /// Side-by-side panel: input, ground truth, prediction, score maps.
    Render {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seg: PathBuf,
        /// Root holding `<method>/score_%05d.pfm`.
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        image: usize,
        #[arg(long, value_delimiter = ',', default_value = "mcp,mcdropout,obsnet")]
        methods: Vec<Method>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attack one test image and render the result.
    AttackDemo {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seg: PathBuf,
        #[arg(long)]
        image: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        attack: AttackArgs,
    },
    /// Run the whole experiment from a key=value config file.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's root directory.
        #[arg(long)]
        root: Option<PathBuf>,
    },
    /// Print the default config file.
    DefaultConfig,
}

#[derive(Debug, Args)]
pub struct SegOptArgs {
    #[arg(long, default_value_t = SegTrainConfig::default().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = SegTrainConfig::default().lr)]
    pub lr: f64,
    #[arg(long, default_value_t = SegTrainConfig::default().batch)]
    pub batch: usize,
    #[arg(long, value_delimiter = ',', default_value = "20,35")]
    pub lr_halving: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct ObsOptArgs {
    #[arg(long, default_value_t = ObsTrainConfig::default().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = ObsTrainConfig::default().lr)]
    pub lr: f64,
    #[arg(long, default_value_t = ObsTrainConfig::default().batch)]
    pub batch: usize,
    #[arg(long, value_delimiter = ',', default_value = "25,45")]
    pub lr_halving: Vec<usize>,
    #[arg(long, default_value_t = ObsTrainConfig::default().pos_weight)]
    pub pos_weight: f64,
    /// Early-stopping patience in epochs; 0 disables early stopping.
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    /// Start every layer fresh instead of copying segmenter weights.
    #[arg(long)]
    pub no_pretrain: bool,
    #[command(flatten)]
    pub variant: VariantArgs,
}

#[derive(Debug, Args)]
pub struct VariantArgs {
    /// Drop the segmenter feature skips (architecture ablation).
    #[arg(long)]
    pub no_skips: bool,
    /// Drop the image input (architecture ablation).
    #[arg(long)]
    pub no_image: bool,
}

impl VariantArgs {
    pub fn variant(&self) -> ObsVariant {
        ObsVariant {
            skips: !self.no_skips,
            image: !self.no_image,
        }
    }
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    /// Attack region, or `none` for clean training.
    #[arg(long, default_value = "shape")]
    pub attack: String,
    #[arg(long, default_value = "minpc")]
    pub direction: Direction,
    #[arg(long, default_value_t = AttackConfig::default().epsilon)]
    pub epsilon: f32,
    #[arg(long, default_value = "pred")]
    pub grad_label: GradLabel,
}

impl AttackArgs {
    pub fn config(&self) -> Result<AttackConfig> {
        let mut cfg = AttackConfig {
            direction: self.direction,
            epsilon: self.epsilon,
            grad_label: self.grad_label,
            ..Default::default()
        };
        if self.attack == "none" {
            cfg.epsilon = 0.0;
        } else {
            cfg.region = self.attack.parse::<Region>()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct ScorerArgs {
    /// TempScale temperature; fitted on the calibration fold when omitted.
    #[arg(long)]
    pub temperature: Option<f32>,
    /// ODIN temperature; `(T, epsilon)` are grid-searched when omitted.
    #[arg(long)]
    pub odin_temperature: Option<f32>,
    #[arg(long, requires = "odin_temperature")]
    pub odin_epsilon: Option<f32>,
    #[arg(long, default_value_t = ScorerConfig::default().mc_passes)]
    pub mc_passes: usize,
    #[arg(long, default_value_t = ScorerConfig::default().mcda_passes)]
    pub mcda_passes: usize,
    #[arg(long, default_value_t = ScorerConfig::default().gauss_members)]
    pub gauss_members: usize,
    #[arg(long, default_value_t = ScorerConfig::default().gauss_sigma_rel)]
    pub gauss_sigma_rel: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl ScorerArgs {
    /// The scorer config and whether TempScale/ODIN must be fitted.
    fn config(&self, method: Method) -> (ScorerConfig, bool) {
        let cfg = ScorerConfig {
            temperature: self.temperature.unwrap_or(1.0),
            odin_temperature: self.odin_temperature.unwrap_or(1.0),
            odin_epsilon: self.odin_epsilon.unwrap_or(0.0),
            mc_passes: self.mc_passes,
            mcda_passes: self.mcda_passes,
            gauss_members: self.gauss_members,
            gauss_sigma_rel: self.gauss_sigma_rel,
            seed: self.seed,
            ..Default::default()
        };
        let fit = match method {
            Method::TempScale => self.temperature.is_none(),
            Method::Odin => self.odin_temperature.is_none(),
            _ => false,
        };
        (cfg, fit)
    }
}

fn seg_config(seed: u64, robust: bool, opt: &SegOptArgs, attack: &AttackArgs) -> Result<SegTrainConfig> {
    Ok(SegTrainConfig {
        epochs: opt.epochs,
        lr: opt.lr,
        batch: opt.batch,
        lr_halving_epochs: opt.lr_halving.clone(),
        seed,
        robust,
        attack: attack.config()?,
        ..Default::default()
    })
}

fn obs_config(seed: u64, opt: &ObsOptArgs, attack: &AttackArgs) -> Result<ObsTrainConfig> {
    Ok(ObsTrainConfig {
        epochs: opt.epochs,
        lr: opt.lr,
        batch: opt.batch,
        lr_halving_epochs: opt.lr_halving.clone(),
        pos_weight: opt.pos_weight,
        patience: (opt.patience > 0).then_some(opt.patience),
        init_from_seg: !opt.no_pretrain,
        attack: attack.config()?,
        seed,
        ..Default::default()
    })
}

/// Runs one command, printing its one-line summary on stdout.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            seed,
            n_train,
            n_test,
        } => {
            let digest = commands::gen_data(&out, seed, n_train, n_test)?;
            println!("{digest}");
        }
        Command::TrainSeg {
            data,
            out,
            robust,
            seed,
            opt,
            attack,
        } => {
            let cfg = seg_config(seed, robust, &opt, &attack)?;
            let report = commands::train_seg(&data, &out, &cfg)?;
            let miou = report.epochs.last().map_or(0.0, |e| e.miou);
            println!("{} train_miou={miou:.4}", out.display());
        }
        Command::TrainObsnet {
            data,
            seg,
            out,
            seed,
            opt,
            attack,
        } => {
            let cfg = obs_config(seed, &opt, &attack)?;
            let report = commands::train_obs(&data, &seg, &out, &cfg, opt.variant.variant())?;
            println!("{} best_epoch={:?}", out.display(), report.best_epoch);
        }
        Command::Score {
            data,
            seg,
            obs,
            method,
            out,
            ensemble,
            attack_epsilon,
            scorer,
            variant,
        } => {
            let (cfg, fit) = scorer.config(method);
            let job = ScoreJob {
                data,
                seg,
                obs,
                obs_variant: variant.variant(),
                ensemble,
                method,
                out,
                scorer: cfg,
                fit,
                calibration_fraction: ObsTrainConfig::default().heldout_fraction,
                attack_epsilon,
            };
            let s = commands::score(&job)?;
            println!("{} images={} seconds={:.3}", s.dir.display(), s.images, s.seconds);
        }
        Command::Eval {
            data,
            scores,
            mode,
            out,
            method,
            seed,
        } => {
            let name = match method {
                Some(m) => m,
                None => scores
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .ok_or_else(|| Error::Config("cannot infer the method name, pass --method".into()))?,
            };
            let r = commands::eval(&data, &scores, mode, &name, seed)?;
            commands::append_csv(&out, obsnet_core::metrics::CSV_HEADER, &[r.csv_row()])?;
            println!("{}", r.csv_row());
        }
        Command::SweepEpsilon {
            data,
            seg,
            grid,
            out,
            seed,
            opt,
            attack,
        } => {
            let cfg = obs_config(seed, &opt, &attack)?;
            let ds = obsnet_core::synthdata::Dataset::read(&data)?;
            let params = commands::load_params(&seg)?;
            let points = commands::sweep_epsilon(&ds, &params, &cfg, opt.variant.variant(), &grid)?;
            obsnet_core::io_util::write_atomic(&out, commands::sweep_csv(&points).as_bytes())?;
            println!("{}", out.display());
        }
        Command::Render {
            data,
            seg,
            scores,
            image,
            methods,
            out,
        } => {
            render::render(&data, &seg, &scores, image, &methods, &out)?;
            println!("{}", out.join("panel.ppm").display());
        }
        Command::AttackDemo {
            data,
            seg,
            image,
            seed,
            out,
            attack,
        } => {
            render::attack_demo(&data, &seg, image, &attack.config()?, seed, &out)?;
            println!("{}", out.join("attack_demo.ppm").display());
        }
        Command::Pipeline { config, seed, root } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg = cfg.with_seed(s);
            }
            if let Some(r) = root {
                cfg.root = r;
            }
            let out = pipeline::run_pipeline(&cfg)?;
            println!(
                "{} rows={} seconds={:.1}",
                cfg.root.join("results.csv").display(),
                out.results.len(),
                out.total_seconds
            );
        }
        Command::DefaultConfig => print!("{}", ExperimentConfig::default().to_text()),
    }
    Ok(())
}

/// Process exit code of an error.
pub fn exit_code(err: &Error) -> i32 {
    match err.category() {
        ErrorCategory::BadInput => 2,
        ErrorCategory::MissingArtifact => 3,
        ErrorCategory::Numeric => 4,
    }
}

/// `error[<category>]: <message>` on a single line.
pub fn error_line(err: &Error) -> String {
    let cat = match err.category() {
        ErrorCategory::BadInput => "bad-input",
        ErrorCategory::MissingArtifact => "missing-artifact",
        ErrorCategory::Numeric => "numeric",
    };
    let msg = err.to_string().replace('\n', " ");
    format!("error[{cat}]: {msg}")
}
