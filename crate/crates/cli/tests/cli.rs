use std::path::Path;
use std::process::Command;

use sfcl::pgm::Graymap;
use sfcl::report::{read_rows, FinalRow, RoundRow, ROUND_COLUMNS};
use sfcl::runner::{compare_runs, run_experiment};
use sfcl::{CliError, RunConfig};

const TINY: &str = r#"
version = 1
mode = "splitfed_cl"
seed = 3
rounds = 2
local_epochs = 1
batch_size = 4
lr = 0.002
height = 32
width = 32
client_sizes = [4, 6, 3]
corruption_ratios = [0.5, 0.5, 0.0]
test_size = 3
"#;

fn sfcl(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_sfcl")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_writes_one_row_per_client_plus_global() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &TINY.replace("splitfed_cl", "fedavg"));
    let out = dir.path().join("out");
    let o = sfcl(&["run", "--config", &config, "--deterministic", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("rounds.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), ROUND_COLUMNS.join(","));
    let rows: Vec<RoundRow> = read_rows(&out.join("rounds.csv")).unwrap();
    assert_eq!(rows.len(), 2 * 4);
    let globals: Vec<&RoundRow> = rows.iter().filter(|r| r.client == "global").collect();
    assert_eq!(globals.len(), 2);
    for g in globals {
        assert!((g.r - 1.0).abs() < 1e-12);
        assert!(g.tau.is_infinite());
        assert!(g.test_miou.is_some_and(|m| (0.0..=1.0).contains(&m)));
    }
    let finals: Vec<FinalRow> = read_rows(&out.join("final.csv")).unwrap();
    assert_eq!(finals.len(), 1);
    assert_eq!((finals[0].mode.as_str(), finals[0].rounds), ("fedavg", 2));
    assert_eq!(RunConfig::load(&out.join("config.toml")).unwrap(), RunConfig::parse(&std::fs::read_to_string(&config).unwrap()).unwrap());
    // two corrupted samples on each noisy client, four files each
    let dumped = std::fs::read_dir(out.join("labels_before_after")).unwrap().count();
    assert_eq!(dumped, 2 * 2 * 4);
}

#[test]
fn deterministic_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = sfcl(&["run", "--config", &config, "--deterministic", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push(out);
    }
    for file in ["rounds.csv", "final.csv"] {
        assert_eq!(std::fs::read(outputs[0].join(file)).unwrap(), std::fs::read(outputs[1].join(file)).unwrap());
    }
}

#[test]
fn threaded_and_sequential_runs_agree() {
    let config = RunConfig::parse(TINY).unwrap();
    let a = run_experiment(&config, None, true).unwrap();
    let b = run_experiment(&RunConfig { threads: 2, ..config }, None, false).unwrap();
    assert_eq!(a.reports, b.reports);
    assert_eq!(a.final_row, b.final_row);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (TINY.replace("lr = 0.002", "lr = 0.002\nlearning_rate = 1"), "learning_rate"),
        (TINY.replace("mode = \"splitfed_cl\"", "mode = \"fedprox\""), "mode"),
        (TINY.replace("corruption_ratios = [0.5, 0.5, 0.0]", "corruption_ratios = [0.5, 1.5, 0.0]"), "corruption_ratios"),
        (TINY.replace("version = 1", ""), "version"),
    ];
    for (text, needle) in cases {
        let config = write_config(dir.path(), &text);
        let o = sfcl(&["run", "--config", &config, "--out", dir.path().join("x").to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{needle}");
        assert!(String::from_utf8_lossy(&o.stderr).contains(needle), "{}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn seed_override_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    std::env::set_var("SFCL_SEED", "41");
    let loaded = RunConfig::load(Path::new(&config));
    std::env::remove_var("SFCL_SEED");
    assert_eq!(loaded.unwrap().seed, 41);
}

#[test]
fn compare_reports_missing_runs() {
    let dir = tempfile::tempdir().unwrap();
    let err = compare_runs(&[dir.path().join("nowhere")]).unwrap_err();
    assert!(matches!(err, CliError::MissingRun(_)));
    assert_eq!(err.exit_code(), 3);
    let o = sfcl(&["compare", "--runs", dir.path().join("nowhere").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("final.csv"));
}

#[test]
fn compare_tabulates_finished_runs() {
    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig { rounds: 1, ..RunConfig::parse(TINY).unwrap() };
    let out = dir.path().join("run");
    let outcome = run_experiment(&config, Some(&out), true).unwrap();
    let o = sfcl(&["compare", "--runs", out.to_str().unwrap(), out.to_str().unwrap()]);
    assert!(o.status.success());
    let table = String::from_utf8(o.stdout).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.contains(&format!("{:.4}", outcome.metrics.mean_iou)));
}

#[test]
fn corrupt_round_trips_pgm_files() {
    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig::parse(TINY).unwrap();
    sfcl::runner::dump_dataset(&config, &dir.path().join("data")).unwrap();
    let image = dir.path().join("data/0_image.pgm");
    let label = dir.path().join("data/0_label.pgm");
    let out = dir.path().join("bad.pgm");
    let o = sfcl(&[
        "corrupt",
        "--image",
        image.to_str().unwrap(),
        "--label",
        label.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--classes",
        "3",
        "--amax-scale",
        "20",
        "--delta",
        "3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let before = Graymap::read(&label).unwrap();
    let after = Graymap::read(&out).unwrap();
    assert_eq!((after.width, after.height, after.maxval), (before.width, before.height, 2));
    assert!(after.pixels.iter().all(|&p| p < 3));

    let o = sfcl(&["corrupt", "--image", image.to_str().unwrap(), "--label", label.to_str().unwrap(), "--out", out.to_str().unwrap(), "--amax-scale", "0", "--classes", "3"]);
    assert!(o.status.success());
    assert_eq!(Graymap::read(&out).unwrap().pixels, before.pixels);

    let o = sfcl(&["corrupt", "--image", image.to_str().unwrap(), "--label", image.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn dump_manifest_marks_corrupted_samples() {
    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig::parse(TINY).unwrap();
    let manifest = sfcl::runner::dump_dataset(&config, dir.path()).unwrap();
    let text = std::fs::read_to_string(manifest).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "sample_id,client_id,corrupted");
    assert_eq!(lines.len(), 1 + 4 + 6 + 3 + 3);
    assert_eq!(lines.iter().filter(|l| l.ends_with("true")).count(), 2 + 3);
    assert_eq!(lines.iter().filter(|l| l.contains(",test,")).count(), 3);
}
