//! Side-by-side visual panels.

use std::path::Path;

use obsnet_core::baselines::Method;
use obsnet_core::laa::{attack_batch, AttackConfig};
use obsnet_core::netpbm::{read_pfm, write_pgm, write_ppm, GrayImage, RgbImage};
use obsnet_core::segmenter::SegNet;
use obsnet_core::synthdata::{scene_to_rgb, to_byte, Dataset, ANOMALY_ID, HEIGHT, IGNORE_ID, PIXELS, WIDTH};
use obsnet_core::{Error, Result, SeededRng};

use crate::commands::{load_params, method_dir, seg_output};

const GAP: usize = 2;

/// Display colour of a label id.
pub fn palette(id: u8) -> [u8; 3] {
    match id {
        0 => [90, 110, 60],
        1 => [128, 64, 128],
        2 => [70, 130, 180],
        3 => [220, 180, 40],
        4 => [200, 60, 50],
        5 => [0, 0, 0],
        ANOMALY_ID => [255, 255, 255],
        IGNORE_ID => [128, 128, 128],
        _ => [0, 255, 0],
    }
}

pub const OUTLINE: [u8; 3] = [255, 0, 255];

fn tile(pixels: impl Fn(usize) -> [u8; 3]) -> RgbImage {
    let mut data = Vec::with_capacity(3 * PIXELS);
    for p in 0..PIXELS {
        data.extend(pixels(p));
    }
    RgbImage {
        width: WIDTH,
        height: HEIGHT,
        data,
    }
}

pub fn label_tile(labels: &[u8]) -> RgbImage {
    tile(|p| palette(labels[p]))
}

/// Ground truth with the anomaly region's border drawn in [`OUTLINE`].
pub fn gt_tile(labels: &[u8], ood: &[bool]) -> RgbImage {
    tile(|p| {
        let (y, x) = (p / WIDTH, p % WIDTH);
        let edge = ood[p]
            && [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)].iter().any(|&(dy, dx)| {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                ny < 0 || nx < 0 || ny >= HEIGHT as i64 || nx >= WIDTH as i64 || !ood[ny as usize * WIDTH + nx as usize]
            });
        if edge {
            OUTLINE
        } else {
            palette(labels[p])
        }
    })
}

/// Score in `[0, 1]` mapped linearly to 8-bit gray.
pub fn score_gray(scores: &[f32]) -> GrayImage {
    GrayImage {
        width: WIDTH,
        height: HEIGHT,
        data: scores.iter().map(|&s| to_byte(s)).collect(),
    }
}

fn gray_tile(g: &GrayImage) -> RgbImage {
    tile(|p| [g.data[p]; 3])
}

/// Concatenates tiles left to right with a white gap.
pub fn hstack(tiles: &[RgbImage]) -> RgbImage {
    let width = tiles.iter().map(|t| t.width).sum::<usize>() + GAP * tiles.len().saturating_sub(1);
    let mut data = vec![255u8; 3 * width * HEIGHT];
    let mut x0 = 0;
    for t in tiles {
        for y in 0..t.height {
            let src = &t.data[3 * y * t.width..3 * (y + 1) * t.width];
            data[3 * (y * width + x0)..3 * (y * width + x0 + t.width)].copy_from_slice(src);
        }
        x0 += t.width + GAP;
    }
    RgbImage {
        width,
        height: HEIGHT,
        data,
    }
}

/// Writes `panel.ppm` (input, ground truth, prediction, one map per method)
/// and one `<method>.pgm` per method into `out`.
pub fn render(data: &Path, seg: &Path, scores_root: &Path, image: usize, methods: &[Method], out: &Path) -> Result<()> {
    let ds = Dataset::read(data)?;
    let scene = ds
        .test
        .get(image)
        .ok_or_else(|| Error::Config(format!("image {image} outside the test split ({})", ds.test.len())))?;
    let params = load_params(seg)?;
    let pred = seg_output(&params, scene)?.predictions();
    let mut tiles = vec![scene_to_rgb(&scene.image), gt_tile(&scene.labels, &scene.ood_mask), label_tile(&pred)];
    for &m in methods {
        let path = method_dir(scores_root, m).join(format!("score_{image:05}.pfm"));
        if !path.exists() {
            return Err(Error::Missing(path.display().to_string()));
        }
        let g = score_gray(&read_pfm(&path)?.data);
        write_pgm(&out.join(format!("{}.pgm", m.name())), &g)?;
        tiles.push(gray_tile(&g));
    }
    write_ppm(&out.join("panel.ppm"), &hstack(&tiles))
}

/// Attacks one test image and writes `attack_demo.ppm`: clean image,
/// attacked image, amplified perturbation, mask, prediction before and
/// after.
pub fn attack_demo(data: &Path, seg: &Path, image: usize, cfg: &AttackConfig, seed: u64, out: &Path) -> Result<()> {
    cfg.validate()?;
    let ds = Dataset::read(data)?;
    let scene = ds
        .test
        .get(image)
        .ok_or_else(|| Error::Config(format!("image {image} outside the test split ({})", ds.test.len())))?;
    let params = load_params(seg)?;
    let net = SegNet::new();
    let x = scene.to_array();
    let attacked = attack_batch(&net, &params, &x, Some(&scene.labels), cfg, &mut SeededRng::new(seed))?;
    let xt = attacked.images.data();
    let scale = if cfg.epsilon > 0.0 { 1.0 / cfg.epsilon } else { 0.0 };
    let diff = GrayImage {
        width: WIDTH,
        height: HEIGHT,
        data: (0..PIXELS)
            .map(|p| {
                let d = (0..3).map(|c| (xt[c * PIXELS + p] - x.data()[c * PIXELS + p]).abs()).fold(0.0, f32::max);
                to_byte(d * scale)
            })
            .collect(),
    };
    let mask = GrayImage {
        width: WIDTH,
        height: HEIGHT,
        data: attacked.masks[0].iter().map(|&m| if m { 255 } else { 0 }).collect(),
    };
    let before = seg_output(&params, scene)?.predictions();
    let after_scene = obsnet_core::synthdata::Scene {
        image: xt.to_vec(),
        ..scene.clone()
    };
    let after = seg_output(&params, &after_scene)?.predictions();
    let tiles = [
        scene_to_rgb(&scene.image),
        scene_to_rgb(xt),
        gray_tile(&diff),
        gray_tile(&mask),
        label_tile(&before),
        label_tile(&after),
    ];
    write_ppm(&out.join("attack_demo.ppm"), &hstack(&tiles))
}
