//! Procedural segmentation scenes with out-of-distribution objects that only
//! ever appear in the test split.
//!
//! In-distribution classes: 0 textured background, 1 horizontal road band,
//! 2 rectangles, 3 disks, 4 triangles. Class colours are muted and jittered
//! so that they overlap; each object class also carries its own faint
//! stripe orientation (horizontal, vertical, diagonal). Id 5 is the void class (thin dark
//! scribbles). Test scenes additionally carry exactly one anomaly, a
//! checkerboard-textured star or cross, labelled 255.
//!
//! Images are quantized to multiples of 1/255 at generation time, so a
//! dataset read back from disk is bit-identical to the generated one.
//! Generation uses only IEEE arithmetic (no transcendental functions).

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io_util::{read_file, write_atomic};
use crate::ndgrad::Array4;
use crate::netpbm::{self, GrayImage, RgbImage};
use crate::rng::SeededRng;

pub const NUM_CLASSES: usize = 5;
/// Segmenter output channels: the in-distribution classes plus void.
pub const NUM_OUTPUTS: usize = NUM_CLASSES + 1;
pub const HEIGHT: usize = 64;
pub const WIDTH: usize = 64;
pub const PIXELS: usize = HEIGHT * WIDTH;
pub const VOID_ID: u8 = 5;
pub const ANOMALY_ID: u8 = 255;
/// Marks zero padding introduced by augmentation; never supervised.
pub const IGNORE_ID: u8 = 254;
pub const GENERATOR_VERSION: &str = "synthscenes-2";

pub const MIN_ANOMALY_PIXELS: usize = 30;
pub const MAX_ANOMALY_PIXELS: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// Channel-major RGB intensities in `[0, 1]`, `3 * HEIGHT * WIDTH`.
    pub image: Vec<f32>,
    /// One class id per pixel.
    pub labels: Vec<u8>,
    /// True exactly where `labels == ANOMALY_ID`.
    pub ood_mask: Vec<bool>,
}

impl Scene {
    pub fn anomaly_pixels(&self) -> usize {
        self.ood_mask.iter().filter(|&&m| m).count()
    }

    pub fn to_array(&self) -> Array4 {
        Array4::from_vec([1, 3, HEIGHT, WIDTH], self.image.clone())
    }

    fn blank() -> Self {
        Self {
            image: vec![0.0; 3 * PIXELS],
            labels: vec![0; PIXELS],
            ood_mask: vec![false; PIXELS],
        }
    }

    #[inline]
    fn paint(&mut self, y: usize, x: usize, rgb: [f64; 3], label: u8) {
        let p = y * WIDTH + x;
        for (c, v) in rgb.iter().enumerate() {
            self.image[c * PIXELS + p] = v.clamp(0.0, 1.0) as f32;
        }
        self.labels[p] = label;
    }

    fn quantize(&mut self) {
        for v in self.image.iter_mut() {
            *v = quantize(*v);
        }
    }
}

/// Rounds to the nearest multiple of 1/255, the precision of the files.
#[inline]
pub fn quantize(v: f32) -> f32 {
    to_byte(v) as f32 / 255.0
}

#[inline]
pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Stacks scene images into a `(n, 3, H, W)` batch.
pub fn stack_images(scenes: &[&Scene]) -> Array4 {
    let mut data = Vec::with_capacity(scenes.len() * 3 * PIXELS);
    for s in scenes {
        data.extend_from_slice(&s.image);
    }
    Array4::from_vec([scenes.len(), 3, HEIGHT, WIDTH], data)
}

pub fn stack_labels(scenes: &[&Scene]) -> Vec<u8> {
    scenes.iter().flat_map(|s| s.labels.iter().copied()).collect()
}

fn noisy(rng: &mut SeededRng, rgb: [f64; 3], amount: f64) -> [f64; 3] {
    rgb.map(|v| v + rng.uniform(-amount, amount))
}

/// Bilinear value noise on a coarse lattice with `cell`-pixel spacing.
fn value_noise(rng: &mut SeededRng, cell: usize) -> Vec<f64> {
    let g = HEIGHT / cell + 2;
    let lattice: Vec<f64> = (0..g * g).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let mut out = vec![0.0; PIXELS];
    for y in 0..HEIGHT {
        for x in 0..WIDTH {
            let (gy, gx) = (y / cell, x / cell);
            let fy = (y % cell) as f64 / cell as f64;
            let fx = (x % cell) as f64 / cell as f64;
            let at = |yy: usize, xx: usize| lattice[yy * g + xx];
            let top = at(gy, gx) * (1.0 - fx) + at(gy, gx + 1) * fx;
            let bot = at(gy + 1, gx) * (1.0 - fx) + at(gy + 1, gx + 1) * fx;
            out[y * WIDTH + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Peak amplitude of the per-class stripe texture.
const STRIPE_AMPLITUDE: f64 = 0.05;
const PIXEL_NOISE: f64 = 0.02;
const VOID_RGB: [f64; 3] = [0.05, 0.05, 0.05];

const BACKGROUND_RGB: [f64; 3] = [0.41, 0.46, 0.39];
const RECT_RGB: [f64; 3] = [0.61, 0.39, 0.36];
const DISK_RGB: [f64; 3] = [0.36, 0.41, 0.62];
const TRIANGLE_RGB: [f64; 3] = [0.65, 0.61, 0.38];
/// Per-object colour jitter; wide enough that neighbouring classes overlap.
const COLOUR_JITTER: f64 = 0.15;

fn jitter(rng: &mut SeededRng, base: [f64; 3]) -> [f64; 3] {
    base.map(|b| b + rng.uniform(-COLOUR_JITTER, COLOUR_JITTER))
}

/// Two-pixel-wide stripes, `+1` or `-1`.
#[derive(Debug, Clone, Copy)]
enum Stripes {
    Horizontal,
    Vertical,
    Diagonal,
}

impl Stripes {
    fn sign(self, y: i64, x: i64, phase: i64) -> f64 {
        let t = match self {
            Stripes::Horizontal => y,
            Stripes::Vertical => x,
            Stripes::Diagonal => x + y,
        } + phase;
        if t.rem_euclid(4) < 2 {
            1.0
        } else {
            -1.0
        }
    }
}

fn draw_background(scene: &mut Scene, rng: &mut SeededRng) {
    let base = jitter(rng, BACKGROUND_RGB);
    let tex = value_noise(rng, 8);
    for y in 0..HEIGHT {
        for x in 0..WIDTH {
            let t = 0.10 * tex[y * WIDTH + x];
            let rgb = noisy(rng, base.map(|b| b + t), PIXEL_NOISE);
            scene.paint(y, x, rgb, 0);
        }
    }
}

fn draw_road(scene: &mut Scene, rng: &mut SeededRng) {
    let top = rng.range_inclusive(30, 50) as usize;
    let height = rng.range_inclusive(8, 14) as usize;
    let gray = rng.uniform(0.35, 0.55);
    for y in top..(top + height).min(HEIGHT) {
        let shade = 0.12 * (y - top) as f64 / height as f64;
        for x in 0..WIDTH {
            let rgb = noisy(rng, [gray + shade; 3], PIXEL_NOISE);
            scene.paint(y, x, rgb, 1);
        }
    }
}

/// Paints a shaded, striped, noisy object over every in-bounds pixel
/// `inside` selects.
fn draw_object(
    scene: &mut Scene,
    rng: &mut SeededRng,
    base: [f64; 3],
    stripes: Stripes,
    label: u8,
    bbox: (i64, i64, i64, i64),
    inside: impl Fn(i64, i64) -> bool,
) {
    let color = jitter(rng, base);
    let phase = rng.below(4) as i64;
    let (gy, gx) = (rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05));
    let (y0, x0, y1, x1) = bbox;
    let (cy, cx) = ((y0 + y1) as f64 / 2.0, (x0 + x1) as f64 / 2.0);
    let span = ((y1 - y0).max(x1 - x0).max(1)) as f64;
    for y in y0.max(0)..=y1.min(HEIGHT as i64 - 1) {
        for x in x0.max(0)..=x1.min(WIDTH as i64 - 1) {
            if inside(y, x) {
                let shade = gy * (y as f64 - cy) / span
                    + gx * (x as f64 - cx) / span
                    + STRIPE_AMPLITUDE * stripes.sign(y, x, phase);
                let rgb = noisy(rng, color.map(|c| c + shade), PIXEL_NOISE);
                scene.paint(y as usize, x as usize, rgb, label);
            }
        }
    }
}

fn draw_rectangle(scene: &mut Scene, rng: &mut SeededRng) {
    let h = rng.range_inclusive(8, 22);
    let w = rng.range_inclusive(8, 22);
    let y0 = rng.range_inclusive(-h / 2, HEIGHT as i64 - h / 2);
    let x0 = rng.range_inclusive(-w / 2, WIDTH as i64 - w / 2);
    draw_object(scene, rng, RECT_RGB, Stripes::Horizontal, 2, (y0, x0, y0 + h - 1, x0 + w - 1), |_, _| true);
}

fn draw_disk(scene: &mut Scene, rng: &mut SeededRng) {
    let r = rng.range_inclusive(4, 10);
    let cy = rng.range_inclusive(0, HEIGHT as i64 - 1);
    let cx = rng.range_inclusive(0, WIDTH as i64 - 1);
    draw_object(scene, rng, DISK_RGB, Stripes::Vertical, 3, (cy - r, cx - r, cy + r, cx + r), |y, x| {
        (y - cy).pow(2) + (x - cx).pow(2) <= r * r
    });
}

fn edge(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

fn draw_triangle(scene: &mut Scene, rng: &mut SeededRng) {
    let s = rng.range_inclusive(8, 20) as f64;
    let cy = rng.range_inclusive(0, HEIGHT as i64 - 1) as f64;
    let cx = rng.range_inclusive(0, WIDTH as i64 - 1) as f64;
    // Resample until the triangle is not a sliver.
    let verts = loop {
        let v: [(f64, f64); 3] =
            std::array::from_fn(|_| (cy + rng.uniform(-s, s), cx + rng.uniform(-s, s)));
        if edge(v[0], v[1], v[2]).abs() >= s * s {
            break v;
        }
    };
    let ys = verts.map(|v| v.0);
    let xs = verts.map(|v| v.1);
    let bbox = (
        ys.iter().cloned().fold(f64::MAX, f64::min).floor() as i64,
        xs.iter().cloned().fold(f64::MAX, f64::min).floor() as i64,
        ys.iter().cloned().fold(f64::MIN, f64::max).ceil() as i64,
        xs.iter().cloned().fold(f64::MIN, f64::max).ceil() as i64,
    );
    draw_object(scene, rng, TRIANGLE_RGB, Stripes::Diagonal, 4, bbox, |y, x| {
        let p = (y as f64 + 0.5, x as f64 + 0.5);
        let e = [
            edge(verts[0], verts[1], p),
            edge(verts[1], verts[2], p),
            edge(verts[2], verts[0], p),
        ];
        e.iter().all(|&v| v >= 0.0) || e.iter().all(|&v| v <= 0.0)
    });
}

fn draw_void_scribbles(scene: &mut Scene, rng: &mut SeededRng) {
    const STEPS: [(i64, i64); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1)];
    for _ in 0..rng.range_inclusive(1, 2) {
        let mut y = rng.range_inclusive(0, HEIGHT as i64 - 1);
        let mut x = rng.range_inclusive(0, WIDTH as i64 - 1);
        let mut dir = rng.below(8) as usize;
        for _ in 0..rng.range_inclusive(6, 14) {
            if (0..HEIGHT as i64).contains(&y) && (0..WIDTH as i64).contains(&x) {
                let rgb = noisy(rng, VOID_RGB, 0.03);
                scene.paint(y as usize, x as usize, rgb, VOID_ID);
            }
            dir = (dir + 7 + rng.below(3) as usize) % 8;
            y += STEPS[dir].0;
            x += STEPS[dir].1;
        }
    }
}

/// Shape family of the test-only anomaly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnomalyShape {
    /// Five-pointed star: outer radius, rotation step (multiples of 9 deg).
    Star { radius: u32, rotation: u32 },
    /// Axis-aligned cross: arm half-length and half-width.
    Cross { arm: u32, half_width: u32 },
}

pub const STAR_RADII: std::ops::RangeInclusive<u32> = 6..=12;
pub const STAR_ROTATIONS: u32 = 8;
pub const STAR_INNER_RATIO: f64 = 0.45;
pub const CROSS_ARMS: std::ops::RangeInclusive<u32> = 4..=10;
pub const CROSS_HALF_WIDTHS: std::ops::RangeInclusive<u32> = 1..=3;

const COS_9: f64 = 0.987_688_340_595_137_7;
const SIN_9: f64 = 0.156_434_465_040_230_87;

impl AnomalyShape {
    /// Every shape the generator can draw.
    pub fn all() -> Vec<AnomalyShape> {
        let mut out = Vec::new();
        for radius in STAR_RADII {
            for rotation in 0..STAR_ROTATIONS {
                out.push(AnomalyShape::Star { radius, rotation });
            }
        }
        for arm in CROSS_ARMS {
            for half_width in CROSS_HALF_WIDTHS {
                out.push(AnomalyShape::Cross { arm, half_width });
            }
        }
        out
    }

    fn sample(rng: &mut SeededRng) -> Self {
        if rng.bernoulli(0.5) {
            AnomalyShape::Star {
                radius: rng.range_inclusive(*STAR_RADII.start() as i64, *STAR_RADII.end() as i64) as u32,
                rotation: rng.below(STAR_ROTATIONS as u64) as u32,
            }
        } else {
            AnomalyShape::Cross {
                arm: rng.range_inclusive(*CROSS_ARMS.start() as i64, *CROSS_ARMS.end() as i64) as u32,
                half_width: rng.range_inclusive(*CROSS_HALF_WIDTHS.start() as i64, *CROSS_HALF_WIDTHS.end() as i64)
                    as u32,
            }
        }
    }

    /// Maximum |offset| of any pixel from the centre.
    pub fn extent(self) -> i64 {
        match self {
            AnomalyShape::Star { radius, .. } => radius as i64,
            AnomalyShape::Cross { arm, .. } => arm as i64,
        }
    }

    /// Pixel offsets `(dy, dx)` covered by the shape centred on a pixel.
    pub fn raster(self) -> Vec<(i64, i64)> {
        let e = self.extent();
        let mut out = Vec::new();
        match self {
            AnomalyShape::Cross { arm, half_width } => {
                let (a, w) = (arm as i64, half_width as i64);
                for dy in -e..=e {
                    for dx in -e..=e {
                        if (dy.abs() <= w && dx.abs() <= a) || (dx.abs() <= w && dy.abs() <= a) {
                            out.push((dy, dx));
                        }
                    }
                }
            }
            AnomalyShape::Star { radius, rotation } => {
                let poly = star_polygon(radius as f64, rotation);
                for dy in -e..=e {
                    for dx in -e..=e {
                        if point_in_polygon(&poly, dy as f64, dx as f64) {
                            out.push((dy, dx));
                        }
                    }
                }
            }
        }
        out
    }
}

/// Vertices `(y, x)` alternating outer/inner radius every 36 degrees.
fn star_polygon(radius: f64, rotation: u32) -> Vec<(f64, f64)> {
    // unit vector at rotation * 9 deg, advanced by 36 deg (4 steps) per vertex
    let mut c = 1.0f64;
    let mut s = 0.0f64;
    let step = |c: f64, s: f64| (c * COS_9 - s * SIN_9, s * COS_9 + c * SIN_9);
    for _ in 0..rotation {
        (c, s) = step(c, s);
    }
    let mut verts = Vec::with_capacity(10);
    for k in 0..10 {
        let r = if k % 2 == 0 { radius } else { radius * STAR_INNER_RATIO };
        verts.push((-r * c, r * s));
        for _ in 0..4 {
            (c, s) = step(c, s);
        }
    }
    verts
}

/// Even-odd rule on the pixel centre.
fn point_in_polygon(poly: &[(f64, f64)], y: f64, x: f64) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let (yi, xi) = poly[i];
        let (yj, xj) = poly[(i + n - 1) % n];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
    }
    inside
}

fn draw_anomaly(scene: &mut Scene, rng: &mut SeededRng) {
    let shape = AnomalyShape::sample(rng);
    let e = shape.extent();
    // Whole shape stays inside the frame, so no pixel is ever clipped.
    let cy = rng.range_inclusive(e, HEIGHT as i64 - 1 - e);
    let cx = rng.range_inclusive(e, WIDTH as i64 - 1 - e);
    let color_a = loop {
        let a = [rng.next_f64(), rng.next_f64(), rng.next_f64()];
        if a.iter().any(|&v| (v - 0.5).abs() > 0.25) {
            break a;
        }
    };
    let color_b = color_a.map(|v| 1.0 - v);
    for (dy, dx) in shape.raster() {
        let (y, x) = ((cy + dy) as usize, (cx + dx) as usize);
        let checker = ((y / 2) + (x / 2)) % 2 == 0;
        let rgb = if checker { color_a } else { color_b };
        scene.paint(y, x, noisy(rng, rgb, 0.02), ANOMALY_ID);
        scene.ood_mask[y * WIDTH + x] = true;
    }
}

/// Draws one scene. Train scenes never contain anomaly pixels; test scenes
/// contain exactly one anomaly of 30 to 400 pixels.
pub fn generate_scene(rng: &mut SeededRng, split: Split) -> Scene {
    let mut scene = Scene::blank();
    draw_background(&mut scene, rng);
    if rng.bernoulli(0.7) {
        draw_road(&mut scene, rng);
    }
    for _ in 0..rng.range_inclusive(2, 5) {
        match rng.below(3) {
            0 => draw_rectangle(&mut scene, rng),
            1 => draw_disk(&mut scene, rng),
            _ => draw_triangle(&mut scene, rng),
        }
    }
    draw_void_scribbles(&mut scene, rng);
    if split == Split::Test {
        draw_anomaly(&mut scene, rng);
    }
    scene.quantize();
    scene
}

/// Scene `index` of `split` for dataset `seed`.
pub fn scene_at(seed: u64, split: Split, index: usize) -> Scene {
    let mut rng = SeededRng::derive(seed, (split.tag() << 32) | index as u64);
    generate_scene(&mut rng, split)
}

/// Geometric augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Augmentation {
    pub flip: bool,
    /// Top-left corner of the crop window.
    pub crop_y: usize,
    pub crop_x: usize,
}

pub const CROP: usize = 56;

impl Augmentation {
    pub const IDENTITY_CROP: Augmentation = Augmentation {
        flip: false,
        crop_y: 0,
        crop_x: 0,
    };

    pub fn sample(rng: &mut SeededRng) -> Self {
        let flip = rng.bernoulli(0.5);
        let crop_y = rng.below((HEIGHT - CROP + 1) as u64) as usize;
        let crop_x = rng.below((WIDTH - CROP + 1) as u64) as usize;
        Self { flip, crop_y, crop_x }
    }
}

/// Horizontal flip, then a `CROP x CROP` window moved to the top-left and
/// zero-padded back to full size. Padded pixels are labelled [`IGNORE_ID`].
pub fn augment_with(scene: &Scene, aug: Augmentation) -> Scene {
    let mut out = Scene {
        image: vec![0.0; 3 * PIXELS],
        labels: vec![IGNORE_ID; PIXELS],
        ood_mask: vec![false; PIXELS],
    };
    for y in 0..CROP {
        for x in 0..CROP {
            let sy = y + aug.crop_y;
            let fx = x + aug.crop_x;
            let sx = if aug.flip { WIDTH - 1 - fx } else { fx };
            let (d, s) = (y * WIDTH + x, sy * WIDTH + sx);
            for c in 0..3 {
                out.image[c * PIXELS + d] = scene.image[c * PIXELS + s];
            }
            out.labels[d] = scene.labels[s];
            out.ood_mask[d] = scene.ood_mask[s];
        }
    }
    out
}

/// Horizontal flip only (an involution).
pub fn hflip(scene: &Scene) -> Scene {
    let mut out = scene.clone();
    for y in 0..HEIGHT {
        for x in 0..WIDTH {
            let (d, s) = (y * WIDTH + x, y * WIDTH + WIDTH - 1 - x);
            for c in 0..3 {
                out.image[c * PIXELS + d] = scene.image[c * PIXELS + s];
            }
            out.labels[d] = scene.labels[s];
            out.ood_mask[d] = scene.ood_mask[s];
        }
    }
    out
}

pub fn augment(scene: &Scene, rng: &mut SeededRng) -> Scene {
    augment_with(scene, Augmentation::sample(rng))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub num_classes: usize,
    pub version: String,
}

impl DatasetManifest {
    pub fn to_text(&self, data_sha256: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "version={}", self.version);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "n_train={}", self.n_train);
        let _ = writeln!(s, "n_test={}", self.n_test);
        let _ = writeln!(s, "num_classes={}", self.num_classes);
        let _ = writeln!(s, "void_id={VOID_ID}");
        let _ = writeln!(s, "anomaly_id={ANOMALY_ID}");
        let _ = writeln!(s, "height={HEIGHT}");
        let _ = writeln!(s, "width={WIDTH}");
        let _ = writeln!(s, "data_sha256={data_sha256}");
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = crate::kv::parse_kv(text)?;
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::Config(format!("manifest is missing `{k}`")));
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Config(format!("manifest `{k}` is not an integer")))
        };
        Ok(Self {
            seed: num("seed")?,
            n_train: num("n_train")? as usize,
            n_test: num("n_test")? as usize,
            num_classes: num("num_classes")? as usize,
            version: get("version")?.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<Scene>,
    pub test: Vec<Scene>,
}

impl Dataset {
    pub fn generate(seed: u64, n_train: usize, n_test: usize) -> Self {
        Self {
            manifest: DatasetManifest {
                seed,
                n_train,
                n_test,
                num_classes: NUM_CLASSES,
                version: GENERATOR_VERSION.to_string(),
            },
            train: (0..n_train).map(|i| scene_at(seed, Split::Train, i)).collect(),
            test: (0..n_test).map(|i| scene_at(seed, Split::Test, i)).collect(),
        }
    }

    pub fn split(&self, split: Split) -> &[Scene] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Writes the directory layout and returns the SHA-256 of all scene
    /// files concatenated in (split, index, image/labels/mask) order.
    pub fn write(&self, root: &Path) -> Result<String> {
        let mut hasher = Sha256::new();
        for split in [Split::Train, Split::Test] {
            for (i, scene) in self.split(split).iter().enumerate() {
                for (path, bytes) in scene_files(root, split, i, scene) {
                    hasher.update(&bytes);
                    write_atomic(&path, &bytes)?;
                }
            }
        }
        let digest: String = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
        write_atomic(&root.join("manifest.txt"), self.manifest.to_text(&digest).as_bytes())?;
        Ok(digest)
    }

    pub fn read(root: &Path) -> Result<Self> {
        let text = String::from_utf8(read_file(&root.join("manifest.txt"))?)
            .map_err(|_| Error::Config("manifest is not UTF-8".into()))?;
        let manifest = DatasetManifest::parse(&text)?;
        let load = |split: Split, n: usize| -> Result<Vec<Scene>> { (0..n).map(|i| read_scene(root, split, i)).collect() };
        Ok(Self {
            train: load(Split::Train, manifest.n_train)?,
            test: load(Split::Test, manifest.n_test)?,
            manifest,
        })
    }

    /// Hash of the serialized scene files without touching disk.
    pub fn content_digest(&self) -> String {
        let mut hasher = Sha256::new();
        for split in [Split::Train, Split::Test] {
            for (i, scene) in self.split(split).iter().enumerate() {
                for (_, bytes) in scene_files(Path::new(""), split, i, scene) {
                    hasher.update(&bytes);
                }
            }
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn scene_paths(root: &Path, split: Split, index: usize) -> [std::path::PathBuf; 3] {
    let dir = root.join(split.name());
    [
        dir.join(format!("img_{index:05}.ppm")),
        dir.join(format!("lab_{index:05}.pgm")),
        dir.join(format!("ood_{index:05}.pgm")),
    ]
}

pub fn scene_to_rgb(image: &[f32]) -> RgbImage {
    let mut data = Vec::with_capacity(3 * PIXELS);
    for p in 0..PIXELS {
        for c in 0..3 {
            data.push(to_byte(image[c * PIXELS + p]));
        }
    }
    RgbImage {
        width: WIDTH,
        height: HEIGHT,
        data,
    }
}

fn scene_files(root: &Path, split: Split, index: usize, scene: &Scene) -> Vec<(std::path::PathBuf, Vec<u8>)> {
    let [img, lab, ood] = scene_paths(root, split, index);
    let labels = GrayImage {
        width: WIDTH,
        height: HEIGHT,
        data: scene.labels.clone(),
    };
    let mask = GrayImage {
        width: WIDTH,
        height: HEIGHT,
        data: scene.ood_mask.iter().map(|&m| if m { 255 } else { 0 }).collect(),
    };
    vec![
        (img, netpbm::encode_ppm(&scene_to_rgb(&scene.image))),
        (lab, netpbm::encode_pgm(&labels)),
        (ood, netpbm::encode_pgm(&mask)),
    ]
}

pub fn write_scene(root: &Path, split: Split, index: usize, scene: &Scene) -> Result<()> {
    for (path, bytes) in scene_files(root, split, index, scene) {
        write_atomic(&path, &bytes)?;
    }
    Ok(())
}

pub fn read_scene(root: &Path, split: Split, index: usize) -> Result<Scene> {
    let [img_path, lab_path, ood_path] = scene_paths(root, split, index);
    let rgb = netpbm::read_ppm(&img_path)?;
    let lab = netpbm::read_pgm(&lab_path)?;
    let ood = netpbm::read_pgm(&ood_path)?;
    let dims = [(rgb.width, rgb.height), (lab.width, lab.height), (ood.width, ood.height)];
    if dims.iter().any(|&d| d != dims[0]) {
        return Err(Error::ShapeMismatch {
            node: img_path.display().to_string(),
            detail: format!("image/labels/mask dimensions differ: {dims:?}"),
        });
    }
    if dims[0] != (WIDTH, HEIGHT) {
        return Err(Error::ShapeMismatch {
            node: img_path.display().to_string(),
            detail: format!("expected {WIDTH}x{HEIGHT}, found {}x{}", dims[0].0, dims[0].1),
        });
    }
    let mut image = vec![0.0f32; 3 * PIXELS];
    for p in 0..PIXELS {
        for c in 0..3 {
            image[c * PIXELS + p] = rgb.data[p * 3 + c] as f32 / 255.0;
        }
    }
    Ok(Scene {
        image,
        labels: lab.data,
        ood_mask: ood.data.iter().map(|&v| v != 0).collect(),
    })
}
