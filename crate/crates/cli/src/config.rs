//! Flat `key=value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use obsnet_core::baselines::{Method, ScorerConfig};
use obsnet_core::kv::parse_kv;
use obsnet_core::laa::{AttackConfig, Direction, GradLabel, Region};
use obsnet_core::metrics::EvalMode;
use obsnet_core::obsnet::{ObsTrainConfig, ObsVariant};
use obsnet_core::segmenter::SegTrainConfig;
use obsnet_core::{Error, Result};

pub const DEFAULT_N_TRAIN: usize = 400;
pub const DEFAULT_N_TEST: usize = 200;
pub const DEFAULT_SWEEP_GRID: [f32; 5] = [0.005, 0.01, 0.02, 0.05, 0.1];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub root: PathBuf,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    /// Seeds inside are overwritten from `seed` when a run starts.
    pub seg: SegTrainConfig,
    pub obs: ObsTrainConfig,
    pub obs_variant: ObsVariant,
    pub scorer: ScorerConfig,
    pub methods: Vec<Method>,
    pub modes: Vec<EvalMode>,
    /// Square-patch attack strength for attack-mode evaluation.
    pub eval_attack_epsilon: f32,
    pub sweep_grid: Vec<f32>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("run"),
            seed: 0,
            n_train: DEFAULT_N_TRAIN,
            n_test: DEFAULT_N_TEST,
            seg: SegTrainConfig::default(),
            obs: ObsTrainConfig::default(),
            obs_variant: ObsVariant::default(),
            scorer: ScorerConfig::default(),
            methods: Method::ALL.to_vec(),
            modes: vec![EvalMode::Ood, EvalMode::Error, EvalMode::Attack],
            eval_attack_epsilon: 0.02,
            sweep_grid: DEFAULT_SWEEP_GRID.to_vec(),
        }
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| bad(key, s)))
        .collect()
}

fn bad(key: &str, value: &str) -> Error {
    Error::Config(format!("bad value `{value}` for `{key}`"))
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, v))
}

impl ExperimentConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.seg.seed = seed;
        self.obs.seed = seed;
        self.scorer.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train < 2 || self.n_test == 0 {
            return Err(Error::Config("need at least 2 train and 1 test scene".into()));
        }
        self.seg.validate()?;
        self.obs.validate()?;
        self.scorer.validate()?;
        if self.methods.is_empty() || self.modes.is_empty() {
            return Err(Error::Config("methods and modes must be non-empty".into()));
        }
        if !(self.eval_attack_epsilon >= 0.0) || self.sweep_grid.iter().any(|&e| !(e >= 0.0)) {
            return Err(Error::Config("epsilons must be >= 0".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("root", self.root.display().to_string());
        put("seed", self.seed.to_string());
        put("data.n_train", self.n_train.to_string());
        put("data.n_test", self.n_test.to_string());
        let g = &self.seg;
        put("seg.epochs", g.epochs.to_string());
        put("seg.lr", g.lr.to_string());
        put("seg.batch", g.batch.to_string());
        put("seg.momentum", g.momentum.to_string());
        put("seg.weight_decay", g.weight_decay.to_string());
        put("seg.lr_halving", join(&g.lr_halving_epochs));
        put("seg.robust", g.robust.to_string());
        let o = &self.obs;
        put("obs.epochs", o.epochs.to_string());
        put("obs.lr", o.lr.to_string());
        put("obs.batch", o.batch.to_string());
        put("obs.momentum", o.momentum.to_string());
        put("obs.weight_decay", o.weight_decay.to_string());
        put("obs.pos_weight", o.pos_weight.to_string());
        put("obs.lr_halving", join(&o.lr_halving_epochs));
        put("obs.patience", o.patience.map_or("none".into(), |p| p.to_string()));
        put("obs.heldout_fraction", o.heldout_fraction.to_string());
        put("obs.init_from_seg", o.init_from_seg.to_string());
        put("obs.skips", self.obs_variant.skips.to_string());
        put("obs.image", self.obs_variant.image.to_string());
        let a = &o.attack;
        put("attack.region", a.region.to_string());
        put("attack.direction", a.direction.to_string());
        put("attack.epsilon", a.epsilon.to_string());
        put("attack.area_min", a.area_min.to_string());
        put("attack.area_max", a.area_max.to_string());
        put("attack.sparse_density", a.sparse_density.to_string());
        put("attack.grad_label", a.grad_label.to_string());
        let c = &self.scorer;
        put("scorer.mc_passes", c.mc_passes.to_string());
        put("scorer.mcda_passes", c.mcda_passes.to_string());
        put("scorer.gauss_members", c.gauss_members.to_string());
        put("scorer.gauss_sigma_rel", c.gauss_sigma_rel.to_string());
        put("scorer.ensemble_members", c.ensemble_members.to_string());
        put("methods", join(&self.methods));
        put("modes", join(&self.modes.iter().map(|m| m.name()).collect::<Vec<_>>()));
        put("eval.attack_epsilon", self.eval_attack_epsilon.to_string());
        put("sweep.grid", join(&self.sweep_grid));
        s
    }

    /// Parses a config file body. Missing keys keep their defaults; unknown
    /// keys are rejected. The attack settings apply to both observer
    /// training and robust segmenter training.
    pub fn parse(text: &str) -> Result<Self> {
        let kv: BTreeMap<String, String> = parse_kv(text)?;
        let mut c = ExperimentConfig::default();
        for (k, v) in &kv {
            let v = v.as_str();
            match k.as_str() {
                "root" => c.root = PathBuf::from(v),
                "seed" => c.seed = parse(k, v)?,
                "data.n_train" => c.n_train = parse(k, v)?,
                "data.n_test" => c.n_test = parse(k, v)?,
                "seg.epochs" => c.seg.epochs = parse(k, v)?,
                "seg.lr" => c.seg.lr = parse(k, v)?,
                "seg.batch" => c.seg.batch = parse(k, v)?,
                "seg.momentum" => c.seg.momentum = parse(k, v)?,
                "seg.weight_decay" => c.seg.weight_decay = parse(k, v)?,
                "seg.lr_halving" => c.seg.lr_halving_epochs = parse_list(k, v)?,
                "seg.robust" => c.seg.robust = parse(k, v)?,
                "obs.epochs" => c.obs.epochs = parse(k, v)?,
                "obs.lr" => c.obs.lr = parse(k, v)?,
                "obs.batch" => c.obs.batch = parse(k, v)?,
                "obs.momentum" => c.obs.momentum = parse(k, v)?,
                "obs.weight_decay" => c.obs.weight_decay = parse(k, v)?,
                "obs.pos_weight" => c.obs.pos_weight = parse(k, v)?,
                "obs.lr_halving" => c.obs.lr_halving_epochs = parse_list(k, v)?,
                "obs.patience" => c.obs.patience = if v == "none" { None } else { Some(parse(k, v)?) },
                "obs.heldout_fraction" => c.obs.heldout_fraction = parse(k, v)?,
                "obs.init_from_seg" => c.obs.init_from_seg = parse(k, v)?,
                "obs.skips" => c.obs_variant.skips = parse(k, v)?,
                "obs.image" => c.obs_variant.image = parse(k, v)?,
                "attack.region" => c.obs.attack.region = v.parse::<Region>()?,
                "attack.direction" => c.obs.attack.direction = v.parse::<Direction>()?,
                "attack.epsilon" => c.obs.attack.epsilon = parse(k, v)?,
                "attack.area_min" => c.obs.attack.area_min = parse(k, v)?,
                "attack.area_max" => c.obs.attack.area_max = parse(k, v)?,
                "attack.sparse_density" => c.obs.attack.sparse_density = parse(k, v)?,
                "attack.grad_label" => c.obs.attack.grad_label = v.parse::<GradLabel>()?,
                "scorer.mc_passes" => c.scorer.mc_passes = parse(k, v)?,
                "scorer.mcda_passes" => c.scorer.mcda_passes = parse(k, v)?,
                "scorer.gauss_members" => c.scorer.gauss_members = parse(k, v)?,
                "scorer.gauss_sigma_rel" => c.scorer.gauss_sigma_rel = parse(k, v)?,
                "scorer.ensemble_members" => c.scorer.ensemble_members = parse(k, v)?,
                "methods" => c.methods = parse_list(k, v)?,
                "modes" => c.modes = parse_list(k, v)?,
                "eval.attack_epsilon" => c.eval_attack_epsilon = parse(k, v)?,
                "sweep.grid" => c.sweep_grid = parse_list(k, v)?,
                other => return Err(Error::Config(format!("unknown config key `{other}`"))),
            }
        }
        c.seg.attack = c.obs.attack;
        let seed = c.seed;
        let c = c.with_seed(seed);
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = obsnet_core::io_util::read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
        Self::parse(&text)
    }
}

/// The attack used for attack-mode evaluation: a square patch, min-pc.
pub fn eval_attack(epsilon: f32) -> AttackConfig {
    AttackConfig {
        epsilon,
        region: Region::SquarePatch,
        direction: Direction::MinPc,
        ..Default::default()
    }
}
