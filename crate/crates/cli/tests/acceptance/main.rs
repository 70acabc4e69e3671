//! Acceptance run: prints one PASS/FAIL line per criterion, then the
//! supporting checks, and exits non-zero when any of them fails.
//!
//! `ACCEPTANCE_PROFILE=smoke` shrinks every budget so the harness itself
//! can be exercised in a minute; its verdicts carry no meaning.

mod bench;
mod oracles;

use std::time::Instant;

use obsnet_cli::commands::load_params;
use obsnet_cli::pipeline::Layout;
use obsnet_cli::{run_pipeline, ExperimentConfig};
use obsnet_core::baselines::Method;
use obsnet_core::segmenter::SegNet;
use obsnet_core::synthdata::Dataset;

use bench::{Budget, SeedResult, Variant};

/// Final running train mIoU the default segmenter must reach.
const SEG_TRAIN_MIOU_FLOOR: f64 = 0.60;
const BUDGET_SECONDS: f64 = 1800.0;
const OBS_EPOCHS: usize = 40;

struct Profile {
    smoke: bool,
    pipeline: ExperimentConfig,
    determinism: ExperimentConfig,
    budget: Budget,
    efficacy_images: usize,
    disruption_scenes: usize,
}

fn profile() -> Profile {
    let smoke = std::env::var("ACCEPTANCE_PROFILE").is_ok_and(|p| p == "smoke");
    let mut determinism = ExperimentConfig::default().with_seed(7);
    determinism.n_train = 12;
    determinism.n_test = 4;
    determinism.seg.epochs = 2;
    determinism.seg.lr_halving_epochs = vec![1];
    determinism.obs.epochs = 2;
    determinism.obs.lr_halving_epochs = vec![1];
    determinism.scorer.mc_passes = 5;
    determinism.scorer.mcda_passes = 5;
    if !smoke {
        return Profile {
            smoke,
            pipeline: ExperimentConfig::default(),
            determinism,
            budget: Budget {
                seeds: 3,
                obs_scenes: 200,
                obs_epochs: OBS_EPOCHS,
                sweep_scenes: 100,
                sweep_epochs: 10,
                sweep_grid: obsnet_cli::config::DEFAULT_SWEEP_GRID.to_vec(),
            },
            efficacy_images: 200,
            disruption_scenes: 100,
        };
    }
    let mut pipeline = ExperimentConfig::default();
    pipeline.n_train = 16;
    pipeline.n_test = 6;
    pipeline.seg.epochs = 1;
    pipeline.seg.lr_halving_epochs.clear();
    pipeline.obs.epochs = 1;
    pipeline.obs.lr_halving_epochs.clear();
    Profile {
        smoke,
        pipeline,
        determinism,
        budget: Budget {
            seeds: 3,
            obs_scenes: 8,
            obs_epochs: 1,
            sweep_scenes: 8,
            sweep_epochs: 1,
            sweep_grid: vec![0.01, 0.02, 0.05],
        },
        efficacy_images: 6,
        disruption_scenes: 8,
    }
}

#[derive(Default)]
struct Verdicts {
    failed: Vec<String>,
}

impl Verdicts {
    fn line(&mut self, id: &str, pass: bool, detail: String) {
        println!("{id:<14} {}  {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(id.to_string());
        }
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn progress(start: Instant, what: &str) {
    eprintln!("[acceptance {:>7.1}s] {what}", start.elapsed().as_secs_f64());
}

fn main() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let p = profile();
    let start = Instant::now();
    let mut v = Verdicts::default();
    if p.smoke {
        println!("profile smoke: budgets are shrunk and verdicts are not meaningful");
    }

    progress(start, "gradient suite");
    let t = Instant::now();
    let grads = oracles::gradient_suite();
    let secs = t.elapsed().as_secs_f64();
    let worst = grads
        .iter()
        .cloned()
        .fold(("", 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    v.line(
        "criterion 1",
        worst.1 < oracles::GRAD_TOL && secs < 60.0,
        format!(
            "{} operators x {} instances, worst rel err {:.2e} ({}), {secs:.1}s",
            grads.len(),
            oracles::GRAD_INSTANCES,
            worst.1,
            worst.0
        ),
    );

    progress(start, "metric oracles");
    let t = Instant::now();
    let (da, dp, mismatches) = oracles::metric_suite(200);
    let secs = t.elapsed().as_secs_f64();
    v.line(
        "criterion 2",
        da < 1e-9 && dp < 1e-9 && mismatches == 0 && secs < 60.0,
        format!("200 instances, |d auroc| {da:.1e}, |d aupr| {dp:.1e}, fpr95 mismatches {mismatches}, {secs:.1}s"),
    );

    progress(start, "default pipeline");
    let dir = tempfile::tempdir().expect("temp dir");
    let mut cfg = p.pipeline.clone();
    cfg.root = dir.path().join("run");
    let outcome = run_pipeline(&cfg).expect("default pipeline runs");
    let layout = Layout { root: cfg.root.clone() };
    let ds = Dataset::read(&layout.data()).expect("pipeline data");
    let seg = SegNet::new();
    let seg0 = load_params(&layout.seg(0)).expect("primary segmenter");

    progress(start, "mask confinement");
    let (cases, bad) = oracles::confinement_suite(&seg, &seg0, &ds.train[..2], 20);
    v.line(
        "criterion 3",
        bad == 0,
        format!("5 regions x 2 directions x 20 seeds, {cases} cases, {bad} violations"),
    );

    progress(start, "attack efficacy");
    let n_eff = p.efficacy_images.min(ds.test.len());
    let raised = bench::attack_efficacy(&seg, &seg0, &ds.test[..n_eff], cfg.seed).expect("attack runs");
    v.line(
        "criterion 4",
        raised >= 0.95,
        format!(
            "in-mask CE raised on {:.1}% of {n_eff} test images (need >= 95%)",
            raised * 100.0
        ),
    );

    let mut seeds: Vec<SeedResult> = Vec::new();
    for k in 0..p.budget.seeds {
        progress(start, &format!("benchmark seed {}/{}", k + 1, p.budget.seeds));
        seeds.push(bench::run_seed(&layout, &cfg, &p.budget, k).expect("benchmark seed runs"));
    }
    let ood_mean =
        |name: &str, f: fn(&obsnet_core::metrics::MetricsReport) -> f64| mean(seeds.iter().map(|s| f(s.ood(name))));
    let auroc = |name: &str| ood_mean(name, |r| r.auroc);

    let (laa, nolaa) = (auroc(Variant::Laa.name()), auroc(Variant::NoLaa.name()));
    v.line(
        "criterion 5",
        laa - nolaa >= 0.01,
        format!(
            "OOD auroc with LAA {laa:.4}, without {nolaa:.4}, margin {:+.2} pts (need >= 1)",
            (laa - nolaa) * 100.0
        ),
    );

    let fpr_shape = ood_mean(Variant::Laa.name(), |r| r.fpr95tpr);
    let fpr_all = ood_mean(Variant::AllPixels.name(), |r| r.fpr95tpr);
    v.line(
        "criterion 6",
        fpr_shape <= fpr_all,
        format!("OOD fpr95tpr random shape {fpr_shape:.4}, all pixels {fpr_all:.4}"),
    );

    let noskip = auroc(Variant::NoSkip.name());
    v.line(
        "criterion 7",
        laa - noskip >= 0.05,
        format!(
            "OOD auroc full {laa:.4}, w/o skip {noskip:.4}, gap {:+.2} pts (need >= 5)",
            (laa - noskip) * 100.0
        ),
    );

    let robust_ok = seeds.iter().all(|s| s.robust_miou <= s.seg_miou);
    let pairs: Vec<String> = seeds
        .iter()
        .map(|s| format!("{:.4}/{:.4}", s.robust_miou, s.seg_miou))
        .collect();
    v.line(
        "criterion 8",
        robust_ok,
        format!("test mIoU robust/standard per seed: {}", pairs.join(", ")),
    );

    let mut ranking: Vec<(&str, f64)> = Method::ALL.iter().map(|m| (m.name(), auroc(m.name()))).collect();
    ranking.sort_by(|a, b| b.1.total_cmp(&a.1));
    let rank = ranking.iter().position(|r| r.0 == Method::ObsNet.name()).unwrap() + 1;
    let mcp = auroc(Method::Mcp.name());
    let table: Vec<String> = ranking.iter().map(|(m, a)| format!("{m} {a:.4}")).collect();
    v.line(
        "criterion 9",
        laa - mcp >= 0.03 && rank <= 2,
        format!(
            "obsnet - mcp {:+.2} pts (need >= 3), rank {rank}: {}",
            (laa - mcp) * 100.0,
            table.join(", ")
        ),
    );

    let passes_ok = seeds.iter().all(|s| s.obs_passes == 2.0 && s.mcdropout_passes == 50.0);
    let obs_secs: f64 = seeds.iter().map(|s| s.secs(Method::ObsNet)).sum();
    let mcd_secs: f64 = seeds.iter().map(|s| s.secs(Method::McDropout)).sum();
    let ratio = mcd_secs / obs_secs;
    v.line(
        "criterion 10",
        passes_ok && ratio >= 5.0,
        format!(
            "passes/image obsnet {} mc-dropout {}, wall-clock ratio {ratio:.1}x (need >= 5)",
            seeds[0].obs_passes, seeds[0].mcdropout_passes
        ),
    );

    v.line(
        "criterion 11",
        seeds.iter().all(|s| s.digest_kept && s.miou_kept),
        format!(
            "segmenter digest kept {}/{}, mIoU bit-identical {}/{}",
            seeds.iter().filter(|s| s.digest_kept).count(),
            seeds.len(),
            seeds.iter().filter(|s| s.miou_kept).count(),
            seeds.len()
        ),
    );

    let err_obs = mean(seeds.iter().map(|s| s.error_obs.auroc));
    let err_mcp = mean(seeds.iter().map(|s| s.error_mcp.auroc));
    v.line(
        "criterion 12",
        err_obs > err_mcp,
        format!("error-mode auroc obsnet {err_obs:.4}, mcp {err_mcp:.4}"),
    );

    let att_obs = mean(seeds.iter().map(|s| s.attack_obs.auroc));
    let att_mcd = mean(seeds.iter().map(|s| s.attack_mcdropout.auroc));
    v.line(
        "criterion 13",
        att_obs > att_mcd,
        format!("attack-mode auroc obsnet {att_obs:.4}, mc-dropout {att_mcd:.4}"),
    );

    progress(start, "determinism");
    let csv = |tag: &str| {
        let mut c = p.determinism.clone();
        c.root = dir.path().join(tag);
        run_pipeline(&c).expect("determinism pipeline runs");
        std::fs::read(Layout { root: c.root }.results()).expect("results.csv")
    };
    let (a, b) = (csv("det_a"), csv("det_b"));
    v.line(
        "criterion 14",
        a == b && !a.is_empty(),
        format!("two seed-7 runs, results.csv {} bytes, identical {}", a.len(), a == b),
    );

    v.line(
        "criterion 15",
        outcome.total_seconds < BUDGET_SECONDS,
        format!(
            "default pipeline {:.0}s on {} hardware threads (limit {BUDGET_SECONDS:.0}s on 4 cores)",
            outcome.total_seconds,
            std::thread::available_parallelism().map_or(1, |n| n.get())
        ),
    );

    progress(start, "supporting checks");
    v.line(
        "seg-train",
        outcome.seg_train_miou >= SEG_TRAIN_MIOU_FLOOR,
        format!(
            "default segmenter final train mIoU {:.4} (floor {SEG_TRAIN_MIOU_FLOOR})",
            outcome.seg_train_miou
        ),
    );

    let rates = bench::error_rates(&seg, &seg0, &ds.train, &[0.0, 0.02], cfg.seed).expect("attack runs");
    v.line(
        "laa-positives",
        rates[1] >= 2.0 * rates[0],
        format!(
            "train-split error rate {:.4} at eps 0.02 vs {:.4} at eps 0 ({:.2}x, need >= 2x)",
            rates[1],
            rates[0],
            rates[1] / rates[0]
        ),
    );

    let n_dis = p.disruption_scenes.min(ds.train.len());
    let rates = bench::error_rates(&seg, &seg0, &ds.train[..n_dis], &[0.0, 0.02, 0.05], cfg.seed).expect("attack runs");
    v.line(
        "laa-monotone",
        rates[2] >= rates[1] && rates[1] >= rates[0],
        format!(
            "error rate over {n_dis} scenes: eps 0 {:.4}, 0.02 {:.4}, 0.05 {:.4}",
            rates[0], rates[1], rates[2]
        ),
    );

    let n_test = ds.test.len() as f64;
    let odin = mean(seeds.iter().map(|s| s.secs(Method::Odin))) / n_test;
    let obs = mean(seeds.iter().map(|s| s.secs(Method::ObsNet))) / n_test;
    v.line(
        "odin-speed",
        odin > obs,
        format!("per image odin {:.2}ms, obsnet {:.2}ms", odin * 1e3, obs * 1e3),
    );

    let on_err = mean(seeds.iter().map(|s| s.obs_mean_on_errors));
    let on_ok = mean(seeds.iter().map(|s| s.obs_mean_on_correct));
    v.line(
        "obs-errors",
        on_err > on_ok,
        format!("mean observer score on errors {on_err:.4}, on correct pixels {on_ok:.4}"),
    );

    let grid = &p.budget.sweep_grid;
    let sweep: Vec<f64> = (0..grid.len())
        .map(|i| mean(seeds.iter().map(|s| s.sweep_fpr[i])))
        .collect();
    let best = sweep.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    let points: Vec<String> = grid.iter().zip(&sweep).map(|(e, f)| format!("{e}:{f:.4}")).collect();
    v.line(
        "eps-sweep",
        best > 0 && best + 1 < grid.len(),
        format!("mean OOD fpr95tpr by eps {}, best eps {}", points.join(" "), grid[best]),
    );

    print_seed_table(&seeds);
    drop(dir);
    progress(start, "done");
    if v.failed.is_empty() {
        println!("acceptance: all checks passed");
    } else {
        println!("acceptance: {} failed: {}", v.failed.len(), v.failed.join(", "));
        std::process::exit(1);
    }
}

/// Per-seed OOD table, printed for the record.
fn print_seed_table(seeds: &[SeedResult]) {
    println!("per-seed OOD auroc / fpr95tpr:");
    for s in seeds {
        let row: Vec<String> = s
            .ood
            .iter()
            .map(|r| format!("{} {:.4}/{:.4}", r.method, r.auroc, r.fpr95tpr))
            .collect();
        println!("  seed {}: {}", s.seed, row.join(", "));
    }
}
