//! Local adversarial attacks: a region mask Ω and a single FGSM step applied
//! only inside it.
//!
//! ```text
//! min_pc:  x' = clip(x + eps * sign(grad_x CE(Seg(x), c)) * Ω)   c = argmax Seg(x)
//! max_pk:  x' = clip(x - eps * sign(grad_x CE(Seg(x), k)) * Ω)   k != c, drawn per image
//! ```
//!
//! `sign(0) = 0`, so exactly-zero gradient components leave the pixel
//! untouched. Pixels outside Ω are copied bit for bit.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ndgrad::{softmax_cross_entropy, Array4, GradRequest, Mode, ParamStore};
use crate::rng::SeededRng;
use crate::segmenter::{argmax_channels, SegNet, SegOutput};
use crate::synthdata::{ANOMALY_ID, HEIGHT, IGNORE_ID, NUM_CLASSES, PIXELS, VOID_ID, WIDTH};

/// Binary `HEIGHT x WIDTH` mask, row-major.
pub type AttackMask = Vec<bool>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    AllPixels,
    SparsePixels,
    ClassPixels,
    SquarePatch,
    RandomShape,
}

impl Region {
    pub const ALL: [Region; 5] = [
        Region::AllPixels,
        Region::SparsePixels,
        Region::ClassPixels,
        Region::SquarePatch,
        Region::RandomShape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Region::AllPixels => "all",
            Region::SparsePixels => "sparse",
            Region::ClassPixels => "class",
            Region::SquarePatch => "square",
            Region::RandomShape => "shape",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Region {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Region::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown attack region `{s}` (all|sparse|class|square|shape)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Push the predicted class down.
    MinPc,
    /// Pull a random other class up.
    MaxPk,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::MinPc => "minpc",
            Direction::MaxPk => "maxpk",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minpc" => Ok(Direction::MinPc),
            "maxpk" => Ok(Direction::MaxPk),
            _ => Err(Error::Config(format!("unknown attack direction `{s}` (minpc|maxpk)"))),
        }
    }
}

/// Label the `min_pc` gradient is taken against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradLabel {
    Pred,
    Gt,
}

impl FromStr for GradLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pred" => Ok(GradLabel::Pred),
            "gt" => Ok(GradLabel::Gt),
            _ => Err(Error::Config(format!("unknown gradient label `{s}` (pred|gt)"))),
        }
    }
}

impl fmt::Display for GradLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GradLabel::Pred => "pred",
            GradLabel::Gt => "gt",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub epsilon: f32,
    pub region: Region,
    pub direction: Direction,
    /// Area bounds, as a fraction of the image, for square and shape masks.
    pub area_min: f64,
    pub area_max: f64,
    pub sparse_density: f64,
    pub grad_label: GradLabel,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.02,
            region: Region::RandomShape,
            direction: Direction::MinPc,
            area_min: 0.05,
            area_max: 0.30,
            sparse_density: 0.05,
            grad_label: GradLabel::Pred,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(0.0 < self.area_min && self.area_min <= self.area_max && self.area_max < 1.0) {
            return Err(Error::Config(format!(
                "area range [{}, {}] must lie inside (0, 1)",
                self.area_min, self.area_max
            )));
        }
        if !(0.0..=1.0).contains(&self.sparse_density) {
            return Err(Error::Config(format!("sparse density {} outside [0, 1]", self.sparse_density)));
        }
        Ok(())
    }

    /// Inclusive side range of square patches satisfying the area bounds.
    pub fn square_sides(&self) -> (usize, usize) {
        let total = PIXELS as f64;
        let lo = (1..=HEIGHT).find(|&s| (s * s) as f64 >= self.area_min * total).unwrap_or(HEIGHT);
        let hi = (1..=HEIGHT).rev().find(|&s| (s * s) as f64 <= self.area_max * total).unwrap_or(1);
        (lo, hi.max(lo))
    }

    fn area_pixels(&self) -> (usize, usize) {
        let total = PIXELS as f64;
        ((self.area_min * total).ceil() as usize, (self.area_max * total).floor() as usize)
    }
}

/// Draws Ω for one image. `pred` (the segmenter's argmax map) is needed
/// only for [`Region::ClassPixels`].
pub fn sample_mask(rng: &mut SeededRng, cfg: &AttackConfig, pred: Option<&[u8]>) -> AttackMask {
    match cfg.region {
        Region::AllPixels => vec![true; PIXELS],
        Region::SparsePixels => (0..PIXELS).map(|_| rng.bernoulli(cfg.sparse_density)).collect(),
        Region::SquarePatch => square_mask(rng, cfg),
        Region::RandomShape => shape_mask(rng, cfg),
        Region::ClassPixels => {
            let Some(pred) = pred else {
                log::warn!("class-region attack without a prediction map, using a square patch");
                return square_mask(rng, cfg);
            };
            let mut counts = [0usize; 256];
            for &c in pred {
                counts[c as usize] += 1;
            }
            let eligible: Vec<u8> = (0..=255u8).filter(|&c| counts[c as usize] * 100 >= PIXELS).collect();
            if eligible.is_empty() {
                log::info!("no predicted class covers 1% of the image, using a square patch");
                return square_mask(rng, cfg);
            }
            let class = eligible[rng.below(eligible.len() as u64) as usize];
            pred.iter().map(|&c| c == class).collect()
        }
    }
}

fn square_mask(rng: &mut SeededRng, cfg: &AttackConfig) -> AttackMask {
    let (lo, hi) = cfg.square_sides();
    let side = rng.range_inclusive(lo as i64, hi as i64) as usize;
    let y0 = rng.below((HEIGHT - side + 1) as u64) as usize;
    let x0 = rng.below((WIDTH - side + 1) as u64) as usize;
    let mut mask = vec![false; PIXELS];
    for y in y0..y0 + side {
        mask[y * WIDTH + x0..y * WIDTH + x0 + side].fill(true);
    }
    mask
}

const SHAPE_RETRIES: usize = 20;

/// Union of 3 to 8 axis-aligned ellipses that all contain the centre of a
/// uniformly placed bounding box, so the union is connected.
fn ellipse_union(rng: &mut SeededRng) -> (AttackMask, (i64, i64)) {
    let bh = rng.range_inclusive(20, 48);
    let bw = rng.range_inclusive(20, 48);
    let y0 = rng.range_inclusive(0, HEIGHT as i64 - bh);
    let x0 = rng.range_inclusive(0, WIDTH as i64 - bw);
    let (cy, cx) = (y0 + bh / 2, x0 + bw / 2);
    let mut mask = vec![false; PIXELS];
    for _ in 0..rng.range_inclusive(3, 8) {
        let a = rng.uniform(3.0, bh as f64 / 2.0);
        let b = rng.uniform(3.0, bw as f64 / 2.0);
        // offsets keep (cy, cx) strictly inside the ellipse
        let ey = cy as f64 + rng.uniform(-a / 2.0, a / 2.0);
        let ex = cx as f64 + rng.uniform(-b / 2.0, b / 2.0);
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                let (dy, dx) = ((y as f64 - ey) / a, (x as f64 - ex) / b);
                if dy * dy + dx * dx <= 1.0 {
                    mask[y as usize * WIDTH + x as usize] = true;
                }
            }
        }
    }
    (mask, (cy, cx))
}

fn shape_mask(rng: &mut SeededRng, cfg: &AttackConfig) -> AttackMask {
    let (lo, hi) = cfg.area_pixels();
    let mut last = None;
    for _ in 0..SHAPE_RETRIES {
        let (mask, centre) = ellipse_union(rng);
        let area = popcount(&mask);
        if (lo..=hi).contains(&area) {
            return mask;
        }
        last = Some((mask, centre));
    }
    let (mut mask, (cy, cx)) = last.expect("at least one draw");
    if popcount(&mask) < lo {
        while popcount(&mask) < lo {
            mask = dilate(&mask);
        }
    } else {
        // Shrink by intersecting with a disk about the common centre; each
        // ellipse stays convex and keeps the centre, so the union stays
        // connected.
        let mut r2 = (HEIGHT * HEIGHT + WIDTH * WIDTH) as i64;
        while popcount(&mask) > hi {
            r2 -= 1;
            for y in 0..HEIGHT as i64 {
                for x in 0..WIDTH as i64 {
                    if (y - cy).pow(2) + (x - cx).pow(2) > r2 {
                        mask[y as usize * WIDTH + x as usize] = false;
                    }
                }
            }
        }
    }
    mask
}

pub fn popcount(mask: &[bool]) -> usize {
    mask.iter().filter(|&&m| m).count()
}

fn dilate(mask: &[bool]) -> AttackMask {
    let mut out = mask.to_vec();
    for y in 0..HEIGHT {
        for x in 0..WIDTH {
            if mask[y * WIDTH + x] {
                if y > 0 {
                    out[(y - 1) * WIDTH + x] = true;
                }
                if y + 1 < HEIGHT {
                    out[(y + 1) * WIDTH + x] = true;
                }
                if x > 0 {
                    out[y * WIDTH + x - 1] = true;
                }
                if x + 1 < WIDTH {
                    out[y * WIDTH + x + 1] = true;
                }
            }
        }
    }
    out
}

/// True when the set pixels form one 4-connected component.
pub fn is_connected(mask: &[bool]) -> bool {
    let Some(start) = mask.iter().position(|&m| m) else {
        return false;
    };
    let mut seen = vec![false; mask.len()];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    let mut count = 0;
    while let Some(p) = queue.pop_front() {
        count += 1;
        let (y, x) = (p / WIDTH, p % WIDTH);
        let mut visit = |q: usize| {
            if mask[q] && !seen[q] {
                seen[q] = true;
                queue.push_back(q);
            }
        };
        if y > 0 {
            visit(p - WIDTH);
        }
        if y + 1 < HEIGHT {
            visit(p + WIDTH);
        }
        if x > 0 {
            visit(p - 1);
        }
        if x + 1 < WIDTH {
            visit(p + 1);
        }
    }
    count == popcount(mask)
}

/// Result of attacking a batch.
#[derive(Debug, Clone)]
pub struct Attacked {
    pub images: Array4,
    /// One mask per batch item.
    pub masks: Vec<AttackMask>,
    /// Segmenter argmax on the clean images (`batch * PIXELS`), when a clean
    /// forward pass was needed.
    pub clean_pred: Option<Vec<u8>>,
}

/// Attacks a batch: one eval-mode forward pass, mask sampling, one backward
/// pass to the input, and the masked sign step. `gt` is required when
/// `cfg.grad_label` is [`GradLabel::Gt`]. With `epsilon == 0` the images
/// are returned unchanged and no network pass is made.
pub fn attack_batch(
    net: &SegNet,
    params: &ParamStore,
    images: &Array4,
    gt: Option<&[u8]>,
    cfg: &AttackConfig,
    rng: &mut SeededRng,
) -> Result<Attacked> {
    let n = images.batch();
    if cfg.epsilon == 0.0 {
        return Ok(Attacked {
            images: images.clone(),
            masks: vec![vec![false; PIXELS]; n],
            clean_pred: None,
        });
    }
    let mut rng_unused = SeededRng::new(0);
    let tape = net.forward_tape(params, images, Mode::Eval, &mut rng_unused)?;
    let pred = argmax_channels(tape.value(net.logits_node()));
    let masks: Vec<AttackMask> = (0..n)
        .map(|b| sample_mask(rng, cfg, Some(&pred[b * PIXELS..(b + 1) * PIXELS])))
        .collect();
    let (targets, sign) = gradient_targets(&pred, gt, cfg, rng)?;
    let (_, grad_logits) = softmax_cross_entropy(tape.value(net.logits_node()), &targets, &[IGNORE_ID, ANOMALY_ID])?;
    let grads = tape.backward_from(vec![(net.logits_node(), grad_logits)], GradRequest::INPUTS)?;
    net.note_backward(images.batch());
    let grad = grads.inputs.into_iter().next().flatten().expect("input gradient requested");
    let attacked = apply_step(images, &grad, &masks, sign * cfg.epsilon)?;
    Ok(Attacked {
        images: attacked,
        masks,
        clean_pred: Some(pred),
    })
}

/// Masked FGSM with caller-supplied masks.
pub fn fgsm_local(
    net: &SegNet,
    params: &ParamStore,
    images: &Array4,
    gt: Option<&[u8]>,
    masks: &[AttackMask],
    cfg: &AttackConfig,
    rng: &mut SeededRng,
) -> Result<Array4> {
    if masks.len() != images.batch() {
        return Err(Error::ShapeMismatch {
            node: "fgsm_local".into(),
            detail: format!("{} masks for a batch of {}", masks.len(), images.batch()),
        });
    }
    if cfg.epsilon == 0.0 {
        return Ok(images.clone());
    }
    let mut rng_unused = SeededRng::new(0);
    let tape = net.forward_tape(params, images, Mode::Eval, &mut rng_unused)?;
    let pred = argmax_channels(tape.value(net.logits_node()));
    let (targets, sign) = gradient_targets(&pred, gt, cfg, rng)?;
    let (_, grad_logits) = softmax_cross_entropy(tape.value(net.logits_node()), &targets, &[IGNORE_ID, ANOMALY_ID])?;
    let grads = tape.backward_from(vec![(net.logits_node(), grad_logits)], GradRequest::INPUTS)?;
    net.note_backward(images.batch());
    let grad = grads.inputs.into_iter().next().flatten().expect("input gradient requested");
    apply_step(images, &grad, masks, sign * cfg.epsilon)
}

/// Per-pixel labels the cross-entropy gradient is taken against, and the
/// sign of the step (+1 ascends the loss, -1 descends it).
fn gradient_targets(
    pred: &[u8],
    gt: Option<&[u8]>,
    cfg: &AttackConfig,
    rng: &mut SeededRng,
) -> Result<(Vec<u8>, f32)> {
    match cfg.direction {
        Direction::MinPc => match cfg.grad_label {
            GradLabel::Pred => Ok((pred.to_vec(), 1.0)),
            GradLabel::Gt => {
                let gt = gt.ok_or_else(|| Error::Config("ground-truth gradient label needs labels".into()))?;
                Ok((gt.to_vec(), 1.0))
            }
        },
        Direction::MaxPk => {
            let mut targets = Vec::with_capacity(pred.len());
            for image in pred.chunks(PIXELS) {
                let k = rng.below(NUM_CLASSES as u64) as u8;
                // k is redrawn per pixel only where it collides with c
                targets.extend(image.iter().map(|&c| if c == k { (k + 1) % NUM_CLASSES as u8 } else { k }));
            }
            Ok((targets, -1.0))
        }
    }
}

fn apply_step(images: &Array4, grad: &Array4, masks: &[AttackMask], step: f32) -> Result<Array4> {
    if let Some(b) = grad.first_non_finite_batch() {
        return Err(Error::NonFiniteGradient(format!("input gradient, batch index {b}")));
    }
    let mut out = images.clone();
    let hw = images.plane_len();
    for (b, mask) in masks.iter().enumerate() {
        let g = grad.image(b);
        let x = out.image_mut(b);
        for c in 0..images.channels() {
            for p in 0..hw {
                let i = c * hw + p;
                if mask[p] && g[i] != 0.0 {
                    x[i] = (x[i] + step * g[i].signum()).clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(out)
}

/// Error target for the observer: 1 where the segmenter is wrong, with a
/// validity flag that is false on void and padding pixels.
pub fn error_target(pred: &[u8], labels: &[u8]) -> (Vec<f32>, Vec<bool>) {
    let valid: Vec<bool> = labels.iter().map(|&l| l != VOID_ID && l != IGNORE_ID).collect();
    let target = pred
        .iter()
        .zip(labels)
        .zip(&valid)
        .map(|((&p, &l), &v)| if v && p != l { 1.0 } else { 0.0 })
        .collect();
    (target, valid)
}

/// An attacked batch with the segmenter's error map on it.
#[derive(Debug, Clone)]
pub struct ObsSample {
    pub images: Array4,
    pub masks: Vec<AttackMask>,
    pub target: Vec<f32>,
    pub valid: Vec<bool>,
    /// Segmenter output on the attacked images.
    pub seg: SegOutput,
}

/// Attacks the batch and labels every pixel with whether the segmenter's
/// prediction on the attacked image is wrong.
pub fn make_obsnet_sample(
    net: &SegNet,
    params: &ParamStore,
    images: &Array4,
    labels: &[u8],
    cfg: &AttackConfig,
    rng: &mut SeededRng,
) -> Result<ObsSample> {
    let attacked = attack_batch(net, params, images, Some(labels), cfg, rng)?;
    let out = net.forward(params, &attacked.images, Mode::Eval, &mut SeededRng::new(0))?;
    let (target, valid) = error_target(&out.predictions(), labels);
    Ok(ObsSample {
        images: attacked.images,
        masks: attacked.masks,
        target,
        valid,
        seg: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_side_range_from_area() {
        assert_eq!(AttackConfig::default().square_sides(), (15, 35));
    }

    #[test]
    fn all_pixels_is_full() {
        let cfg = AttackConfig {
            region: Region::AllPixels,
            ..Default::default()
        };
        assert!(sample_mask(&mut SeededRng::new(1), &cfg, None).iter().all(|&m| m));
    }

    #[test]
    fn region_names_round_trip() {
        for r in Region::ALL {
            assert_eq!(r.name().parse::<Region>().unwrap(), r);
        }
        assert!("blob".parse::<Region>().is_err());
    }

    #[test]
    fn class_mask_falls_back_when_fragmented() {
        let cfg = AttackConfig {
            region: Region::ClassPixels,
            ..Default::default()
        };
        // 128 ids of 32 pixels each; none reaches 1% (41 pixels)
        let pred: Vec<u8> = (0..PIXELS).map(|i| (i % 128) as u8).collect();
        let mask = sample_mask(&mut SeededRng::new(3), &cfg, Some(&pred));
        let (lo, hi) = cfg.square_sides();
        let n = popcount(&mask);
        assert!((lo * lo..=hi * hi).contains(&n));
    }

    #[test]
    fn error_target_marks_void_invalid() {
        let (t, v) = error_target(&[0, 1, 2, 3], &[0, 2, VOID_ID, IGNORE_ID]);
        assert_eq!(t, vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(v, vec![true, true, false, false]);
    }
}
