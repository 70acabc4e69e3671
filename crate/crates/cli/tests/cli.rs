use std::path::Path;
use std::process::{Command, Output};

use obsnet_cli::ExperimentConfig;
use obsnet_core::metrics::CSV_HEADER;
use obsnet_core::netpbm::{write_pfm, write_pgm, FloatImage, GrayImage};
use obsnet_core::synthdata::{Dataset, HEIGHT, WIDTH};

fn obsnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_obsnet")).args(args).output().expect("spawn obsnet")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen_tiny(dir: &Path) -> String {
    let data = dir.join("data");
    let o = obsnet(&["gen-data", "--out", data.to_str().unwrap(), "--seed", "3", "--n-train", "2", "--n-test", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    data.to_str().unwrap().to_string()
}

/// Writes a score directory whose maps come from `score`, with predictions
/// equal to the ground truth.
fn write_scores(data: &str, dir: &Path, score: impl Fn(usize, usize) -> f32) {
    let ds = Dataset::read(Path::new(data)).unwrap();
    std::fs::create_dir_all(dir).unwrap();
    for (i, s) in ds.test.iter().enumerate() {
        let img = FloatImage {
            width: WIDTH,
            height: HEIGHT,
            data: (0..WIDTH * HEIGHT).map(|p| score(i, p)).collect(),
        };
        write_pfm(&dir.join(format!("score_{i:05}.pfm")), &img).unwrap();
        let pred = GrayImage {
            width: WIDTH,
            height: HEIGHT,
            data: s.labels.clone(),
        };
        write_pgm(&dir.join(format!("pred_{i:05}.pgm")), &pred).unwrap();
    }
}

fn assert_one_line_error(o: &Output, code: i32, category: &str) {
    assert_eq!(o.status.code(), Some(code), "{}", stderr(o));
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with(&format!("error[{category}]: ")), "{err}");
}

#[test]
fn help_lists_subcommands() {
    let o = obsnet(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let out = String::from_utf8_lossy(&o.stdout);
    for sub in ["gen-data", "train-seg", "train-obsnet", "score", "eval", "sweep-epsilon", "render", "pipeline"] {
        assert!(out.contains(sub), "missing {sub}");
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(obsnet(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(obsnet(&["gen-data"]).status.code(), Some(2));
    assert_eq!(obsnet(&["score", "--method", "bogus"]).status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    std::fs::write(&cfg, "colour=blue\n").unwrap();
    let o = obsnet(&["pipeline", "--config", cfg.to_str().unwrap()]);
    assert_one_line_error(&o, 2, "bad-input");
}

#[test]
fn missing_checkpoint_is_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny(dir.path());
    let out = dir.path().join("scores");
    let seg = dir.path().join("nope.ogw");
    let o = obsnet(&[
        "score",
        "--data",
        &data,
        "--seg",
        seg.to_str().unwrap(),
        "--method",
        "mcp",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_one_line_error(&o, 3, "missing-artifact");
    assert!(!out.join("mcp").exists());
}

#[test]
fn non_finite_scores_are_numeric() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny(dir.path());
    let scores = dir.path().join("nan");
    write_scores(&data, &scores, |_, p| if p == 7 { f32::NAN } else { 0.5 });
    let csv = dir.path().join("r.csv");
    let o = obsnet(&["eval", "--data", &data, "--scores", scores.to_str().unwrap(), "--out", csv.to_str().unwrap()]);
    assert_one_line_error(&o, 4, "numeric");
    assert!(!csv.exists());
}

#[test]
fn eval_with_ground_truth_scores_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny(dir.path());
    let ds = Dataset::read(Path::new(&data)).unwrap();
    let scores = dir.path().join("oracle");
    write_scores(&data, &scores, |i, p| if ds.test[i].ood_mask[p] { 1.0 } else { 0.0 });
    let csv = dir.path().join("r.csv");
    let o = obsnet(&["eval", "--data", &data, "--scores", scores.to_str().unwrap(), "--out", csv.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "oracle");
    assert_eq!(row[1], "ood");
    assert_eq!(row[2].parse::<f64>().unwrap(), 0.0);
    assert_eq!(row[3].parse::<f64>().unwrap(), 1.0);
    assert_eq!(row[4].parse::<f64>().unwrap(), 1.0);

    // A second eval appends below the same header.
    let o = obsnet(&["eval", "--data", &data, "--scores", scores.to_str().unwrap(), "--out", csv.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 3);
}

#[test]
fn attack_mode_without_masks_is_missing() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny(dir.path());
    let scores = dir.path().join("clean");
    write_scores(&data, &scores, |_, _| 0.5);
    let o = obsnet(&["eval", "--data", &data, "--scores", scores.to_str().unwrap(), "--mode", "attack"]);
    assert_one_line_error(&o, 3, "missing-artifact");
}

#[test]
fn gen_data_digest_is_stable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let run = |d: &Path| {
        let o = obsnet(&["gen-data", "--out", d.join("x").to_str().unwrap(), "--seed", "9", "--n-train", "4", "--n-test", "2"]);
        assert_eq!(o.status.code(), Some(0));
        String::from_utf8(o.stdout).unwrap()
    };
    assert_eq!(run(a.path()), run(b.path()));
}

#[test]
fn default_config_parses_back() {
    let o = obsnet(&["default-config"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(ExperimentConfig::parse(&text).unwrap(), ExperimentConfig::default());
}
