use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_rydberg-vmc");

const TINY: &str = r#"
[lattice]
rows = 2
cols = 2

[model]
kind = "patched_rnn"
d_hidden = 8
patch_rows = 1
patch_cols = 2

[training]
iterations = 5
n_samples = 32
mini_batch = 16
seed = 3
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn error_class(o: &Output) -> String {
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    let line = err.lines().last().unwrap();
    line.strip_prefix("error[").and_then(|s| s.split(']').next()).unwrap_or(line).to_string()
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), config).unwrap();
    dir
}

#[test]
fn count_params_prints_exact_integers() {
    let dir = tempfile::tempdir().unwrap();
    let count = |args: &[&str]| stdout(&run(dir.path(), args)).trim().to_string();
    assert_eq!(count(&["count-params", "--kind", "rnn"]), "67074");
    assert_eq!(count(&["count-params", "--kind", "patched_rnn"]), "70032");
    assert_eq!(count(&["count-params", "--kind", "patched_tf", "--patch", "1x1"]), "1203074");
    assert_eq!(count(&["count-params", "--kind", "lptf", "--patch", "8x8", "--sub", "2x2"]), "1264400");
    let d = setup(TINY);
    assert_eq!(count(&["count-params", "--config", d.path().join("run.toml").to_str().unwrap()]), "396");
    assert_eq!(error_class(&run(dir.path(), &["count-params", "--kind", "gru"])), "model");
    assert_eq!(error_class(&run(dir.path(), &["count-params", "--kind", "rnn", "--patch", "2"])), "usage");
}

#[test]
fn train_is_reproducible_under_the_deterministic_flag() {
    let d = setup(TINY);
    for copy in ["a", "b"] {
        stdout(&run(d.path(), &["train", "--config", "run.toml", "--out-dir", "o", "--deterministic", "true"]));
        fs::create_dir(d.path().join(copy)).unwrap();
        for f in ["metrics.csv", "checkpoint.bin"] {
            fs::copy(d.path().join("o").join(f), d.path().join(copy).join(f)).unwrap();
        }
    }
    let strip = |p: &str| -> Vec<String> {
        fs::read_to_string(d.path().join(p))
            .unwrap()
            .lines()
            .map(|l| {
                let mut f: Vec<&str> = l.split(',').collect();
                f.remove(4);
                f.join(",")
            })
            .collect()
    };
    let a = strip("a/metrics.csv");
    assert_eq!(a.len(), 6);
    assert_eq!(a, strip("b/metrics.csv"));
    assert_eq!(
        fs::read(d.path().join("a/checkpoint.bin")).unwrap(),
        fs::read(d.path().join("b/checkpoint.bin")).unwrap()
    );
    stdout(&run(d.path(), &["train", "--config", "run.toml", "--out-dir", "c", "--seed", "4"]));
    assert_ne!(a, strip("c/metrics.csv"));
}

#[test]
fn resuming_extends_the_metrics_table() {
    let d = setup(TINY);
    stdout(&run(d.path(), &["train", "--config", "run.toml", "--out-dir", "r"]));
    let out = stdout(&run(
        d.path(),
        &["train", "--checkpoint", "r/checkpoint.bin", "--out-dir", "r", "--iterations", "8"],
    ));
    assert!(out.starts_with("iteration=8 "), "{out}");
    let rows = fs::read_to_string(d.path().join("r/metrics.csv")).unwrap();
    assert_eq!(rows.lines().count(), 9);
}

#[test]
fn inspection_commands() {
    let d = setup(TINY);
    stdout(&run(d.path(), &["train", "--config", "run.toml", "--out-dir", "o"]));
    let ck = ["--checkpoint", "o/checkpoint.bin"];

    let rows = stdout(&run(d.path(), &[&ck[..], &["sample", "-n", "7"]].concat()));
    assert_eq!(rows.lines().count(), 7);
    assert!(rows.lines().all(|l| l.len() == 4 && l.chars().all(|c| c == '0' || c == '1')));

    let energy = stdout(&run(d.path(), &[&ck[..], &["energy"]].concat()));
    assert!(energy.contains("n_samples=32"), "{energy}");

    let norm: f64 = stdout(&run(d.path(), &[&ck[..], &["enumerate-check"]].concat())).trim().parse().unwrap();
    assert!((norm - 1.0).abs() < 1e-12);

    let cmp = stdout(&run(d.path(), &[&ck[..], &["ed-compare"]].concat()));
    let lines: Vec<&str> = cmp.lines().collect();
    let header: Vec<&str> = lines[0].split(',').collect();
    let values: Vec<f64> = lines[1].split(',').map(|v| v.parse().unwrap()).collect();
    let get = |k: &str| values[header.iter().position(|h| *h == k).unwrap()];
    assert!(get("energy_gap") >= 0.0);
    assert!(get("exact_energy") >= get("e0") - 1e-12);
    assert!((0.0..=1.0).contains(&get("fidelity")));
}

#[test]
fn delta_sweep_prints_one_row_per_detuning() {
    let d = setup(&TINY.replace("iterations = 5", "iterations = 2"));
    let out = stdout(&run(
        d.path(),
        &["ed-compare", "--config", "run.toml", "--out-dir", "s", "--delta-grid", "0,1.5"],
    ));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,") && lines[2].starts_with("1.5,"));
    assert!(d.path().join("s/delta_1.5/metrics.csv").exists());
}

#[test]
fn enumerate_check_on_a_fresh_default_large_model() {
    let d = setup("[lattice]\nrows = 4\ncols = 4\n[model]\nkind = \"lptf\"\n");
    let norm: f64 = stdout(&run(d.path(), &["enumerate-check", "--config", "run.toml"]))
        .trim()
        .parse()
        .unwrap();
    assert!((norm - 1.0).abs() < 1e-6, "{norm}");
}

#[test]
fn failures_exit_with_a_classified_error() {
    let d = setup(TINY);
    assert_eq!(error_class(&run(d.path(), &["energy", "--checkpoint", "missing.bin"])), "io");
    assert_eq!(error_class(&run(d.path(), &["energy"])), "usage");
    fs::write(d.path().join("bad.toml"), TINY.replace("seed = 3", "seed = 3\nspeed = 1")).unwrap();
    assert_eq!(error_class(&run(d.path(), &["energy", "--config", "bad.toml"])), "config");
    fs::write(d.path().join("junk.bin"), b"RVMCCKPT not really").unwrap();
    assert_eq!(error_class(&run(d.path(), &["energy", "--checkpoint", "junk.bin"])), "checksum");
    fs::write(
        d.path().join("big.toml"),
        TINY.replace("rows = 2\ncols = 2", "rows = 5\ncols = 5").replace("patch_cols = 2", "patch_cols = 1"),
    )
    .unwrap();
    let o = run(d.path(), &["ed-compare", "--config", "big.toml"]);
    assert_eq!(error_class(&o), "size-limit");
    assert_eq!(o.status.code(), Some(6));

    stdout(&run(d.path(), &["train", "--config", "run.toml", "--out-dir", "o"]));
    fs::write(d.path().join("wide.toml"), TINY.replace("d_hidden = 8", "d_hidden = 10")).unwrap();
    let o = run(d.path(), &["energy", "--config", "wide.toml", "--checkpoint", "o/checkpoint.bin"]);
    assert_eq!(error_class(&o), "checkpoint");
}
