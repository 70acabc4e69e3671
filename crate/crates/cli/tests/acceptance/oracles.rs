//! Property suites with independent brute-force oracles.

use obsnet_core::laa::{attack_batch, popcount, AttackConfig, Direction, Region};
use obsnet_core::metrics::{aupr, auroc, fpr_at_95_tpr};
use obsnet_core::ndgrad::gradcheck::check_graph;
use obsnet_core::ndgrad::{Array4, Graph, Mode, ParamStore};
use obsnet_core::segmenter::SegNet;
use obsnet_core::synthdata::{stack_images, Scene, PIXELS};
use obsnet_core::SeededRng;

pub const GRAD_INSTANCES: u64 = 10;
const GRAD_STEP: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-6;

fn uniform(rng: &mut SeededRng, shape: [usize; 4], lo: f64, hi: f64) -> Array4<f64> {
    let len = shape.iter().product();
    Array4::from_vec(shape, (0..len).map(|_| rng.uniform(lo, hi)).collect())
}

/// Magnitudes in [0.05, 1] with random sign: no relu kink within one step.
fn off_zero(rng: &mut SeededRng, shape: [usize; 4]) -> Array4<f64> {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let m = rng.uniform(0.05, 1.0);
            if rng.bernoulli(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Array4::from_vec(shape, data)
}

/// A random permutation of well-spaced levels: every 2x2 window has a
/// unique maximum by a margin far above the finite-difference step.
fn spaced(rng: &mut SeededRng, shape: [usize; 4]) -> Array4<f64> {
    let len: usize = shape.iter().product();
    let mut levels: Vec<usize> = (0..len).collect();
    rng.shuffle(&mut levels);
    Array4::from_vec(shape, levels.iter().map(|&l| 0.03 * l as f64 - 0.5).collect())
}

fn shape(rng: &mut SeededRng) -> [usize; 4] {
    [
        rng.range_inclusive(1, 2) as usize,
        rng.range_inclusive(1, 3) as usize,
        2 * rng.range_inclusive(1, 3) as usize,
        2 * rng.range_inclusive(1, 2) as usize,
    ]
}

type Build = fn(&mut Graph, [usize; 4], &mut SeededRng) -> Vec<[usize; 4]>;
type Gen = fn(&mut SeededRng, [usize; 4]) -> Array4<f64>;

/// `(operator, graph builder returning input shapes, input generator)`.
fn operator_cases() -> Vec<(&'static str, Build, Gen)> {
    fn unary(g: &mut Graph, s: [usize; 4], f: impl Fn(&mut Graph, usize)) -> Vec<[usize; 4]> {
        let x = g.input("x", s[1]);
        f(g, x);
        vec![s]
    }
    vec![
        (
            "conv3x3",
            |g, s, rng| {
                let cout = rng.range_inclusive(1, 3) as usize;
                let x = g.input("x", s[1]);
                g.conv("c", x, s[1], cout);
                vec![s]
            },
            |r, s| uniform(r, s, -1.0, 1.0),
        ),
        (
            "relu",
            |g, s, _| {
                unary(g, s, |g, x| {
                    g.relu("r", x);
                })
            },
            off_zero,
        ),
        (
            "maxpool2x2",
            |g, s, _| {
                unary(g, s, |g, x| {
                    g.maxpool("p", x);
                })
            },
            spaced,
        ),
        (
            "maxunpool2x2",
            |g, s, _| {
                unary(g, s, |g, x| {
                    let p = g.maxpool("p", x);
                    let y = g.scale("y", p, -2.0);
                    g.unpool("u", y, p);
                })
            },
            spaced,
        ),
        (
            "concat",
            |g, s, rng| {
                let c2 = rng.range_inclusive(1, 2) as usize;
                let a = g.input("a", s[1]);
                let b = g.input("b", c2);
                g.concat("cat", &[b, a]);
                vec![s, [s[0], c2, s[2], s[3]]]
            },
            |r, s| uniform(r, s, -1.0, 1.0),
        ),
        (
            "dropout",
            |g, s, _| {
                unary(g, s, |g, x| {
                    g.dropout("d", x, 0.3, false);
                })
            },
            |r, s| uniform(r, s, -1.0, 1.0),
        ),
        (
            "softmax",
            |g, s, _| {
                unary(g, s, |g, x| {
                    g.softmax("sm", x);
                })
            },
            |r, s| uniform(r, s, -3.0, 3.0),
        ),
        (
            "sigmoid",
            |g, s, _| {
                unary(g, s, |g, x| {
                    g.sigmoid("sg", x);
                })
            },
            |r, s| uniform(r, s, -4.0, 4.0),
        ),
        (
            "add",
            |g, s, _| {
                let a = g.input("a", s[1]);
                let b = g.input("b", s[1]);
                let t = g.add("t", b, a);
                g.add("u", t, b);
                vec![s, s]
            },
            |r, s| uniform(r, s, -1.0, 1.0),
        ),
        (
            "scale",
            |g, s, _| {
                unary(g, s, |g, x| {
                    g.scale("s", x, 1.75);
                })
            },
            |r, s| uniform(r, s, -1.0, 1.0),
        ),
    ]
}

/// Worst relative error per operator over the random instances.
pub fn gradient_suite() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    for (op, build, gen) in operator_cases() {
        let mut worst = 0.0f64;
        for i in 0..GRAD_INSTANCES {
            let mut rng = SeededRng::derive(0xacce_97ad, (op.len() as u64) << 8 | i);
            let s = shape(&mut rng);
            let mut g = Graph::new();
            let shapes = build(&mut g, s, &mut rng);
            let mut params: ParamStore<f64> = g.init_params(&mut rng);
            for p in params.iter_mut() {
                for v in p.data.iter_mut() {
                    *v = rng.uniform(-0.5, 0.5);
                }
            }
            let inputs: Vec<Array4<f64>> = shapes.iter().map(|&sh| gen(&mut rng, sh)).collect();
            let report = check_graph(&g, &params, &inputs, Mode::Train, i, GRAD_STEP).expect("gradient check runs");
            worst = worst.max(report.max_error());
        }
        out.push((op, worst));
    }
    out
}

/// P(s+ > s-) + P(s+ = s-)/2 by enumerating every pair.
pub fn pairwise_auroc(s: &[f32], y: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &yi) in y.iter().enumerate() {
        if !yi {
            continue;
        }
        for (j, &yj) in y.iter().enumerate() {
            if yj {
                continue;
            }
            den += 1.0;
            num += match s[i].partial_cmp(&s[j]).unwrap() {
                std::cmp::Ordering::Greater => 1.0,
                std::cmp::Ordering::Equal => 0.5,
                std::cmp::Ordering::Less => 0.0,
            };
        }
    }
    num / den
}

fn thresholds(s: &[f32]) -> Vec<f32> {
    let mut t = s.to_vec();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t
}

fn counts_at(s: &[f32], y: &[bool], t: f32) -> (f64, f64) {
    let mut tp = 0.0;
    let mut fp = 0.0;
    for (&v, &p) in s.iter().zip(y) {
        if v >= t {
            if p {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
    }
    (tp, fp)
}

/// Precision-recall step integral over every distinct threshold.
pub fn step_aupr(s: &[f32], y: &[bool]) -> f64 {
    let pos = y.iter().filter(|&&p| p).count() as f64;
    let mut area = 0.0;
    let mut last_recall = 0.0;
    for t in thresholds(s) {
        let (tp, fp) = counts_at(s, y, t);
        let recall = tp / pos;
        area += (recall - last_recall) * tp / (tp + fp);
        last_recall = recall;
    }
    area
}

/// Scans thresholds from the top and reports the FPR at the first one
/// whose TPR reaches 0.95.
pub fn scanned_fpr95(s: &[f32], y: &[bool]) -> f64 {
    let pos = y.iter().filter(|&&p| p).count() as f64;
    let neg = y.len() as f64 - pos;
    thresholds(s)
        .into_iter()
        .map(|t| counts_at(s, y, t))
        .find(|&(tp, _)| tp / pos >= 0.95)
        .map(|(_, fp)| fp / neg)
        .expect("the lowest threshold has full recall")
}

fn labelled_scores(seed: u64) -> (Vec<f32>, Vec<bool>) {
    let mut rng = SeededRng::derive(0x0ac1e, seed);
    let n = rng.range_inclusive(50, 2000) as usize;
    let grid = [3.0, 10.0, 64.0, 1e6][rng.below(4) as usize];
    let rate = rng.uniform(0.05, 0.7);
    let gap = rng.uniform(0.0, 0.5);
    let mut s = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let p = i % 25 == 0 || rng.bernoulli(rate);
        let v = (rng.next_f64() * (1.0 - gap) + if p { gap } else { 0.0 }).min(1.0);
        s.push(((v * grid).round() / grid) as f32);
        y.push(p);
    }
    // at least 20 positives for the fpr metric
    for p in y.iter_mut().take(20) {
        *p = true;
    }
    (s, y)
}

/// `(max |auroc error|, max |aupr error|, fpr95 mismatches)` over the
/// random instances.
pub fn metric_suite(instances: u64) -> (f64, f64, usize) {
    let (mut da, mut dp, mut bad) = (0.0f64, 0.0f64, 0);
    for seed in 0..instances {
        let (s, y) = labelled_scores(seed);
        da = da.max((auroc(&s, &y).unwrap() - pairwise_auroc(&s, &y)).abs());
        dp = dp.max((aupr(&s, &y).unwrap() - step_aupr(&s, &y)).abs());
        if fpr_at_95_tpr(&s, &y).unwrap() != scanned_fpr95(&s, &y) {
            bad += 1;
        }
    }
    (da, dp, bad)
}

pub const REGIONS: [Region; 5] = [
    Region::AllPixels,
    Region::SparsePixels,
    Region::ClassPixels,
    Region::SquarePatch,
    Region::RandomShape,
];

/// Counts violations of exact mask confinement and of the ε = 0 identity
/// over every region, direction and seed. Returns `(cases, violations)`.
pub fn confinement_suite(net: &SegNet, params: &ParamStore, scenes: &[Scene], seeds: u64) -> (usize, usize) {
    let refs: Vec<&Scene> = scenes.iter().collect();
    let x = stack_images(&refs);
    let labels: Vec<u8> = scenes.iter().flat_map(|s| s.labels.iter().copied()).collect();
    let (mut cases, mut bad) = (0, 0);
    for region in REGIONS {
        for direction in [Direction::MinPc, Direction::MaxPk] {
            for seed in 0..seeds {
                let cfg = AttackConfig {
                    region,
                    direction,
                    ..Default::default()
                };
                let out = attack_batch(net, params, &x, Some(&labels), &cfg, &mut SeededRng::new(seed)).unwrap();
                for (b, mask) in out.masks.iter().enumerate() {
                    cases += 1;
                    let xa = out.images.image(b);
                    let x0 = x.image(b);
                    let outside_same = (0..PIXELS)
                        .filter(|&p| !mask[p])
                        .all(|p| (0..3).all(|c| xa[c * PIXELS + p].to_bits() == x0[c * PIXELS + p].to_bits()));
                    if !outside_same || popcount(mask) == 0 && xa != x0 {
                        bad += 1;
                    }
                }
                let zero = AttackConfig { epsilon: 0.0, ..cfg };
                let same = attack_batch(net, params, &x, Some(&labels), &zero, &mut SeededRng::new(seed)).unwrap();
                cases += 1;
                let identical = same
                    .images
                    .data()
                    .iter()
                    .zip(x.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
                if !identical {
                    bad += 1;
                }
            }
        }
    }
    (cases, bad)
}
