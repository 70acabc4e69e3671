//! Comparison uncertainty scorers. Every scorer maps a batch of images to
//! per-pixel scores in `[0, 1]`, higher meaning "less trustworthy".

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::metrics::{ace, auroc, ACE_RANGES};
use crate::ndgrad::{Array4, GradRequest, Mode, ParamStore};
use crate::obsnet::{obs_forward, ObsNet};
use crate::rng::SeededRng;
use crate::segmenter::{SegNet, SegOutput, EVAL_BATCH};
use crate::synthdata::{stack_images, Scene, HEIGHT, IGNORE_ID, NUM_OUTPUTS, PIXELS, VOID_ID, WIDTH};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Mcp,
    Void,
    TempScale,
    Odin,
    McDropout,
    Mcda,
    GaussPert,
    DeepEnsemble,
    ObsNet,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Mcp,
        Method::Void,
        Method::TempScale,
        Method::Odin,
        Method::McDropout,
        Method::Mcda,
        Method::GaussPert,
        Method::DeepEnsemble,
        Method::ObsNet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Mcp => "mcp",
            Method::Void => "void",
            Method::TempScale => "tempscale",
            Method::Odin => "odin",
            Method::McDropout => "mcdropout",
            Method::Mcda => "mcda",
            Method::GaussPert => "gausspert",
            Method::DeepEnsemble => "ensemble",
            Method::ObsNet => "obsnet",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
            Error::Config(format!("unknown method `{s}` ({})", names.join("|")))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScorerConfig {
    /// Temperature for TempScale.
    pub temperature: f32,
    pub odin_temperature: f32,
    pub odin_epsilon: f32,
    pub mc_passes: usize,
    pub mcda_passes: usize,
    pub gauss_members: usize,
    pub gauss_sigma_rel: f64,
    pub ensemble_members: usize,
    pub seed: u64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            odin_temperature: 1.0,
            odin_epsilon: 0.0,
            mc_passes: 50,
            mcda_passes: 25,
            gauss_members: 5,
            gauss_sigma_rel: 0.01,
            ensemble_members: 3,
            seed: 0,
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.odin_temperature > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if !(self.odin_epsilon >= 0.0 && self.gauss_sigma_rel >= 0.0) {
            return Err(Error::Config("perturbation sizes must be >= 0".into()));
        }
        if self.mc_passes == 0 || self.mcda_passes == 0 || self.gauss_members == 0 || self.ensemble_members == 0 {
            return Err(Error::Config("pass and member counts must be at least 1".into()));
        }
        Ok(())
    }
}

/// `1 - max_c p_c` per pixel.
pub fn mcp(softmax: &Array4) -> Array4 {
    reduce_channels(softmax, |p| 1.0 - p.iter().cloned().fold(0.0, f32::max))
}

/// Probability of the void channel.
pub fn void_score(softmax: &Array4) -> Array4 {
    reduce_channels(softmax, |p| p[VOID_ID as usize])
}

/// `1 - max softmax(logits / T)`.
pub fn temp_scaled_mcp(logits: &Array4, temperature: f32) -> Array4 {
    mcp(&scaled_softmax(logits, temperature))
}

/// Entropy of the per-pixel distribution divided by `ln(channels)`.
pub fn normalized_entropy(probs: &Array4) -> Array4 {
    let norm = (probs.channels() as f64).ln();
    reduce_channels(probs, |p| {
        let h: f64 = p
            .iter()
            .filter(|&&v| v > 0.0)
            .map(|&v| -(v as f64) * (v as f64).ln())
            .sum();
        (h / norm).clamp(0.0, 1.0) as f32
    })
}

fn reduce_channels(x: &Array4, f: impl Fn(&[f32]) -> f32) -> Array4 {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let mut out = Array4::zeros([n, 1, h, w]);
    let mut buf = vec![0.0f32; c];
    for b in 0..n {
        let src = x.image(b);
        let dst = out.image_mut(b);
        for p in 0..hw {
            for ch in 0..c {
                buf[ch] = src[ch * hw + p];
            }
            dst[p] = f(&buf);
        }
    }
    out
}

/// Channel softmax of `logits / T`, computed in 64-bit.
pub fn scaled_softmax(logits: &Array4, temperature: f32) -> Array4 {
    let [n, c, h, w] = logits.shape();
    let hw = h * w;
    let t = temperature as f64;
    let mut out = Array4::zeros(logits.shape());
    let mut e = vec![0.0f64; c];
    for b in 0..n {
        let src = logits.image(b);
        let dst = out.image_mut(b);
        for p in 0..hw {
            let mx = (0..c).map(|ch| src[ch * hw + p] as f64 / t).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for ch in 0..c {
                e[ch] = (src[ch * hw + p] as f64 / t - mx).exp();
                sum += e[ch];
            }
            for ch in 0..c {
                dst[ch * hw + p] = (e[ch] / sum) as f32;
            }
        }
    }
    out
}

/// Running mean of softmax maps.
struct MeanProbs {
    sum: Vec<f64>,
    count: Vec<u32>,
    shape: [usize; 4],
}

impl MeanProbs {
    fn new(shape: [usize; 4]) -> Self {
        let [n, _, h, w] = shape;
        Self {
            sum: vec![0.0; shape.iter().product()],
            count: vec![0; n * h * w],
            shape,
        }
    }

    fn add(&mut self, probs: &Array4) {
        for (s, &p) in self.sum.iter_mut().zip(probs.data()) {
            *s += p as f64;
        }
        self.count.iter_mut().for_each(|c| *c += 1);
    }

    fn mean(&self) -> Array4 {
        let [n, c, h, w] = self.shape;
        let hw = h * w;
        let mut out = Array4::zeros(self.shape);
        for b in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    let i = (b * c + ch) * hw + p;
                    out.data_mut()[i] = (self.sum[i] / self.count[b * hw + p].max(1) as f64) as f32;
                }
            }
        }
        out
    }
}

/// An invertible test-time augmentation: optional horizontal flip, then an
/// integer shift with zero fill.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TestAugment {
    pub flip: bool,
    pub dy: i32,
    pub dx: i32,
}

pub const MCDA_MAX_SHIFT: i32 = 2;

impl TestAugment {
    pub const IDENTITY: TestAugment = TestAugment {
        flip: false,
        dy: 0,
        dx: 0,
    };

    fn sample(rng: &mut SeededRng) -> Self {
        let span = (2 * MCDA_MAX_SHIFT + 1) as u64;
        Self {
            flip: rng.bernoulli(0.5),
            dy: rng.below(span) as i32 - MCDA_MAX_SHIFT,
            dx: rng.below(span) as i32 - MCDA_MAX_SHIFT,
        }
    }

    /// Source pixel of output pixel `(y, x)`, if any.
    fn source(self, y: usize, x: usize) -> Option<(usize, usize)> {
        let sy = y as i32 - self.dy;
        let sx = x as i32 - self.dx;
        if sy < 0 || sx < 0 || sy >= HEIGHT as i32 || sx >= WIDTH as i32 {
            return None;
        }
        let sx = if self.flip { WIDTH as i32 - 1 - sx } else { sx };
        Some((sy as usize, sx as usize))
    }

    /// Applies the augmentation to every channel of a batch.
    pub fn apply(self, x: &Array4) -> Array4 {
        let [n, c, h, w] = x.shape();
        let mut out = Array4::zeros(x.shape());
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        if let Some((sy, sx)) = self.source(y, xx) {
                            out.set(b, ch, y, xx, x.at(b, ch, sy, sx));
                        }
                    }
                }
            }
        }
        out
    }

    /// Maps a prediction made on the augmented image back to original
    /// coordinates. Returns the map and, per pixel, whether it was covered.
    pub fn invert(self, x: &Array4) -> (Array4, Vec<bool>) {
        let [n, c, h, w] = x.shape();
        let mut out = Array4::zeros(x.shape());
        let mut covered = vec![false; n * h * w];
        for y in 0..h {
            for xx in 0..w {
                // the augmented pixel whose source is (y, xx)
                let ox = if self.flip { w - 1 - xx } else { xx };
                let (ay, ax) = (y as i32 + self.dy, ox as i32 + self.dx);
                if ay < 0 || ax < 0 || ay >= h as i32 || ax >= w as i32 {
                    continue;
                }
                for b in 0..n {
                    covered[b * h * w + y * w + xx] = true;
                    for ch in 0..c {
                        out.set(b, ch, y, xx, x.at(b, ch, ay as usize, ax as usize));
                    }
                }
            }
        }
        (out, covered)
    }
}

/// Everything a scorer may need.
pub struct ScoringContext<'a> {
    pub seg: &'a SegNet,
    pub params: &'a ParamStore,
    /// Deep-ensemble members (the first is usually `params`).
    pub ensemble: &'a [ParamStore],
    pub obs: Option<(&'a ObsNet, &'a ParamStore)>,
    pub cfg: ScorerConfig,
}

impl ScoringContext<'_> {
    fn seg_eval(&self, params: &ParamStore, images: &Array4) -> Result<SegOutput> {
        self.seg.forward(params, images, Mode::Eval, &mut SeededRng::new(0))
    }

    /// Scores a batch with `method`. `batch_index` selects the random
    /// stream of stochastic methods so scores are reproducible.
    pub fn score_batch(&self, method: Method, images: &Array4, batch_index: u64) -> Result<Array4> {
        let mut rng = SeededRng::derive(self.cfg.seed, batch_index);
        match method {
            Method::Mcp => Ok(temp_scaled_mcp(&self.seg_eval(self.params, images)?.logits, 1.0)),
            Method::Void => Ok(void_score(&self.seg_eval(self.params, images)?.softmax)),
            Method::TempScale => Ok(temp_scaled_mcp(
                &self.seg_eval(self.params, images)?.logits,
                self.cfg.temperature,
            )),
            Method::Odin => odin(
                self.seg,
                self.params,
                images,
                self.cfg.odin_temperature,
                self.cfg.odin_epsilon,
            ),
            Method::McDropout => {
                let mut mean = MeanProbs::new([images.batch(), NUM_OUTPUTS, HEIGHT, WIDTH]);
                for _ in 0..self.cfg.mc_passes {
                    mean.add(&self.seg.forward(self.params, images, Mode::McEval, &mut rng)?.softmax);
                }
                Ok(normalized_entropy(&mean.mean()))
            }
            Method::Mcda => {
                let mut sum = MeanProbs::new([images.batch(), NUM_OUTPUTS, HEIGHT, WIDTH]);
                for pass in 0..self.cfg.mcda_passes {
                    let aug = if pass == 0 {
                        TestAugment::IDENTITY
                    } else {
                        TestAugment::sample(&mut rng)
                    };
                    let probs = self.seg_eval(self.params, &aug.apply(images))?.softmax;
                    let (back, covered) = aug.invert(&probs);
                    let hw = PIXELS;
                    for b in 0..images.batch() {
                        for p in 0..hw {
                            if covered[b * hw + p] {
                                for ch in 0..NUM_OUTPUTS {
                                    sum.sum[(b * NUM_OUTPUTS + ch) * hw + p] += back.image(b)[ch * hw + p] as f64;
                                }
                                sum.count[b * hw + p] += 1;
                            }
                        }
                    }
                }
                Ok(normalized_entropy(&sum.mean()))
            }
            Method::GaussPert => {
                let mut mean = MeanProbs::new([images.batch(), NUM_OUTPUTS, HEIGHT, WIDTH]);
                for m in 0..self.cfg.gauss_members {
                    let member = perturb_weights(self.params, self.cfg.gauss_sigma_rel, self.cfg.seed, m as u64);
                    mean.add(&self.seg_eval(&member, images)?.softmax);
                }
                Ok(normalized_entropy(&mean.mean()))
            }
            Method::DeepEnsemble => {
                if self.ensemble.is_empty() {
                    return Err(Error::Missing("deep ensemble has no members".into()));
                }
                let mut mean = MeanProbs::new([images.batch(), NUM_OUTPUTS, HEIGHT, WIDTH]);
                for member in self.ensemble {
                    mean.add(&self.seg_eval(member, images)?.softmax);
                }
                Ok(normalized_entropy(&mean.mean()))
            }
            Method::ObsNet => {
                let (obs, obs_params) = self
                    .obs
                    .ok_or_else(|| Error::Missing("observer checkpoint required for obsnet scoring".into()))?;
                Ok(obs_forward(self.seg, self.params, obs, obs_params, images)?.0)
            }
        }
    }

    /// Scores every scene, in batches of [`EVAL_BATCH`]; one `PIXELS`-long
    /// map per scene.
    pub fn score_scenes(&self, method: Method, scenes: &[Scene]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(scenes.len());
        for (i, chunk) in scenes.chunks(EVAL_BATCH).enumerate() {
            let refs: Vec<&Scene> = chunk.iter().collect();
            let scores = self.score_batch(method, &stack_images(&refs), i as u64)?;
            out.extend(scores.data().chunks(PIXELS).map(|c| c.to_vec()));
        }
        Ok(out)
    }
}

/// One Gaussian-perturbed weight set: every tensor gets i.i.d. noise with
/// standard deviation `sigma_rel * std(tensor)`.
pub fn perturb_weights(params: &ParamStore, sigma_rel: f64, seed: u64, member: u64) -> ParamStore {
    let mut rng = SeededRng::derive(seed ^ 0x6761_7573_7370_6572, member);
    let mut out = params.clone();
    if sigma_rel == 0.0 {
        return out;
    }
    for p in out.iter_mut() {
        let n = p.data.len() as f64;
        let mean = p.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = p.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let sigma = sigma_rel * var.sqrt();
        for v in p.data.iter_mut() {
            *v += (rng.normal() * sigma) as f32;
        }
    }
    out
}

/// ODIN: one backward pass to the input on `-mean log max softmax(z / T)`,
/// a full-image step of size `epsilon` against that gradient, then
/// `1 - max softmax(z' / T)`.
pub fn odin(net: &SegNet, params: &ParamStore, images: &Array4, temperature: f32, epsilon: f32) -> Result<Array4> {
    let mut unused = SeededRng::new(0);
    let tape = net.forward_tape(params, images, Mode::Eval, &mut unused)?;
    let logits = tape.value(net.logits_node()).clone();
    let probs = scaled_softmax(&logits, temperature);
    let [n, c, h, w] = logits.shape();
    let hw = h * w;
    let inv = 1.0 / (n * hw) as f32 / temperature;
    let mut grad = Array4::zeros(logits.shape());
    for b in 0..n {
        let s = probs.image(b);
        let g = grad.image_mut(b);
        for p in 0..hw {
            let best = (1..c).fold(0, |m, ch| if s[ch * hw + p] > s[m * hw + p] { ch } else { m });
            for ch in 0..c {
                let onehot = if ch == best { 1.0 } else { 0.0 };
                g[ch * hw + p] = (s[ch * hw + p] - onehot) * inv;
            }
        }
    }
    let grads = tape.backward_from(vec![(net.logits_node(), grad)], GradRequest::INPUTS)?;
    net.note_backward(n);
    let gx = grads.inputs.into_iter().next().flatten().expect("input gradient requested");
    if let Some(b) = gx.first_non_finite_batch() {
        return Err(Error::NonFiniteGradient(format!("odin input gradient, batch index {b}")));
    }
    let mut x = images.clone();
    if epsilon != 0.0 {
        for (v, g) in x.data_mut().iter_mut().zip(gx.data()) {
            if *g != 0.0 {
                *v = (*v - epsilon * g.signum()).clamp(0.0, 1.0);
            }
        }
    }
    let logits = net.forward(params, &x, Mode::Eval, &mut unused)?.logits;
    Ok(temp_scaled_mcp(&logits, temperature))
}

/// Fits the TempScale temperature on held-out scenes by golden-section
/// search over `[0.5, 5]`, minimizing ACE of the scaled max-softmax.
pub fn fit_temperature(net: &SegNet, params: &ParamStore, scenes: &[Scene]) -> Result<f32> {
    let (logits, labels) = collect_logits(net, params, scenes)?;
    let objective = |t: f64| -> Result<f64> {
        let mut conf = Vec::new();
        let mut correct = Vec::new();
        for (z, lab) in logits.iter().zip(&labels) {
            let s = scaled_softmax(z, t as f32);
            let score = mcp(&s);
            let pred = crate::segmenter::argmax_channels(&s);
            for ((&sc, &p), &l) in score.data().iter().zip(&pred).zip(lab.iter()) {
                if l == VOID_ID || l == IGNORE_ID {
                    continue;
                }
                conf.push(1.0 - sc);
                correct.push(p == l);
            }
        }
        ace(&conf, &correct, ACE_RANGES)
    };
    let (t, _) = golden_section(0.5, 5.0, 30, objective)?;
    Ok(t as f32)
}

/// Minimizes a unimodal function on `[lo, hi]`; returns `(argmin, min)`.
pub fn golden_section(lo: f64, hi: f64, iters: usize, f: impl Fn(f64) -> Result<f64>) -> Result<(f64, f64)> {
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    for _ in 0..iters {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(d)?;
        }
    }
    Ok(if fc < fd { (c, fc) } else { (d, fd) })
}

fn collect_logits(net: &SegNet, params: &ParamStore, scenes: &[Scene]) -> Result<(Vec<Array4>, Vec<Vec<u8>>)> {
    if scenes.is_empty() {
        return Err(Error::Config("calibration split is empty".into()));
    }
    let mut logits = Vec::new();
    let mut labels = Vec::new();
    for chunk in scenes.chunks(EVAL_BATCH) {
        let refs: Vec<&Scene> = chunk.iter().collect();
        let out = net.forward(params, &stack_images(&refs), Mode::Eval, &mut SeededRng::new(0))?;
        logits.push(out.logits);
        labels.push(chunk.iter().flat_map(|s| s.labels.iter().copied()).collect());
    }
    Ok((logits, labels))
}

pub const ODIN_TEMPERATURES: [f32; 4] = [1.0, 2.0, 5.0, 10.0];
pub const ODIN_EPSILONS: [f32; 3] = [0.001, 0.002, 0.004];

/// Grid-searches ODIN's `(T, epsilon)` on held-out scenes, maximizing the
/// AuROC of detecting the segmenter's errors.
pub fn fit_odin(net: &SegNet, params: &ParamStore, scenes: &[Scene]) -> Result<(f32, f32)> {
    let mut best: Option<(f64, f32, f32)> = None;
    let mut wrong = Vec::new();
    let mut keep = Vec::new();
    for chunk in scenes.chunks(EVAL_BATCH) {
        let refs: Vec<&Scene> = chunk.iter().collect();
        let out = net.forward(params, &stack_images(&refs), Mode::Eval, &mut SeededRng::new(0))?;
        for (p, l) in out.predictions().iter().zip(chunk.iter().flat_map(|s| s.labels.iter())) {
            keep.push(*l != VOID_ID && *l != IGNORE_ID);
            wrong.push(p != l);
        }
    }
    let positive: Vec<bool> = wrong.iter().zip(&keep).filter(|(_, &k)| k).map(|(&w, _)| w).collect();
    for &t in &ODIN_TEMPERATURES {
        for &eps in &ODIN_EPSILONS {
            let mut scores = Vec::with_capacity(positive.len());
            let mut k = 0;
            for chunk in scenes.chunks(EVAL_BATCH) {
                let refs: Vec<&Scene> = chunk.iter().collect();
                let s = odin(net, params, &stack_images(&refs), t, eps)?;
                for &v in s.data() {
                    if keep[k] {
                        scores.push(v);
                    }
                    k += 1;
                }
            }
            let a = auroc(&scores, &positive)?;
            if best.is_none_or(|b| a > b.0) {
                best = Some((a, t, eps));
            }
        }
    }
    let (_, t, eps) = best.expect("non-empty grid");
    Ok((t, eps))
}

/// Loads deep-ensemble members, reporting every missing file at once.
pub fn load_ensemble(paths: &[&Path]) -> Result<Vec<ParamStore>> {
    let missing: Vec<String> = paths
        .iter()
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Missing(format!("ensemble members not found: {}", missing.join(", "))));
    }
    paths.iter().map(|p| ParamStore::load(p)).collect()
}
