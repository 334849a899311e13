use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use topocell::io::read_gray_png;

fn topocell(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_topocell"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Tiny network and sweep so the pipeline runs in seconds.
const TINY: &[&str] = &[
    "--set",
    "frame.resolution=16",
    "--set",
    "net.base_channels=2",
    "--set",
    "net.channel_cap=4",
    "--set",
    "stats.sections_per_side=4",
    "--set",
    "sweep.widths_um=10,25",
    "--set",
    "sweep.separations_um=4,12,20",
    "--set",
    "sweep.days=8",
    "--set",
    "sweep.densities=0.4",
    "--set",
    "sweep.replicates=1",
];

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    TINY.iter().copied().chain(args.iter().copied()).collect()
}

#[test]
fn pattern_lines_example() {
    let tmp = tempfile::tempdir().unwrap();
    let o = topocell(tmp.path(), &["pattern", "--lines", "--width-um", "25", "--sep-um", "90"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let img = read_gray_png(&tmp.path().join("pattern.png")).unwrap();
    assert_eq!(img.shape(), &[1, 64, 64]);
    assert!(tmp.path().join("topocell.conf").exists());
}

#[test]
fn pattern_stripe_geometry_on_full_frame() {
    let tmp = tempfile::tempdir().unwrap();
    let o = topocell(
        tmp.path(),
        &["--set", "frame.resolution=256", "pattern", "--lines", "--width-um", "25", "--sep-um", "90", "-o", "p.png"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let img = read_gray_png(&tmp.path().join("p.png")).unwrap();
    let column: Vec<bool> = (0..256).map(|row| img.data()[row * 256] > 0.5).collect();
    let starts: Vec<usize> = (1..256).filter(|&i| column[i] && !column[i - 1]).collect();
    assert!(starts.len() >= 2);
    assert_eq!(starts[1] - starts[0], 59);
    let thickness = (starts[0]..256).take_while(|&i| column[i]).count();
    assert_eq!(thickness, 13);
}

#[test]
fn compare_rejects_size_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(topocell(tmp.path(), &["pattern", "--blank", "-o", "a.png"]).status.success());
    assert!(topocell(tmp.path(), &["--set", "frame.resolution=32", "pattern", "--blank", "-o", "b.png"]).status.success());
    let o = topocell(tmp.path(), &["compare", "a.png", "b.png"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.starts_with("error[usage]: image sizes differ"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn compare_writes_composite_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(topocell(tmp.path(), &["pattern", "--lines", "-o", "a.png"]).status.success());
    let o = topocell(tmp.path(), &["compare", "a.png", "a.png", "-o", "cmp", "--id", "self"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("self: N=256"));
    let csv = fs::read_to_string(tmp.path().join("cmp/report.csv")).unwrap();
    assert!(csv.starts_with("image_id,N,K,n,k,p_section,p_pixel\n"));
    assert!(tmp.path().join("cmp/composite.png").exists());
}

#[test]
fn selftest_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = topocell(tmp.path(), &["selftest"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().count() >= 6);
    assert!(out.lines().all(|l| l.starts_with("PASS ")), "{out}");
}

#[test]
fn config_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.conf"), "seed = 1\noracle.theta = 4\n").unwrap();
    let o = topocell(tmp.path(), &["--config", "bad.conf", "selftest"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[config]: bad.conf:2: unknown key `oracle.theta`"));

    let o = topocell(tmp.path(), &["--set", "frame.resolution=48", "pattern", "--blank"]);
    assert_eq!(o.status.code(), Some(2));
    let o = topocell(tmp.path(), &["pattern", "--lines", "--width-um", "-3"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = topocell(tmp.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn operational_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let o = topocell(tmp.path(), &["compare", "missing.png", "missing.png"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[failed]: "));
    let o = topocell(tmp.path(), &["predict", "--checkpoint", "none.wnt", "--lines", "--day", "8", "--density", "0.3"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("run.conf"), "seed = 5\noracle.theta_align_um = 14\n").unwrap();
    let o = topocell(tmp.path(), &["--config", "run.conf", "--seed", "7", "pattern", "--blank"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let echo = fs::read_to_string(tmp.path().join("topocell.conf")).unwrap();
    assert!(echo.lines().any(|l| l == "seed = 7"));
    assert!(echo.lines().any(|l| l == "oracle.theta_align_um = 14.0"));
}

#[test]
fn failed_training_leaves_no_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let o = topocell(tmp.path(), &with_tiny(&["oracle", "-o", "ds", "--count", "3"]));
    assert!(o.status.success(), "{}", stderr(&o));
    fs::remove_file(tmp.path().join("ds/fluo_0001.png")).unwrap();
    let o = topocell(tmp.path(), &with_tiny(&["train", "--manifest", "ds", "-o", "run", "--epochs", "1"]));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("record 1"), "{}", stderr(&o));
    assert!(!tmp.path().join("run/model.wnt").exists());
}

fn pipeline(dir: &Path) {
    let steps: Vec<Vec<&str>> = vec![
        vec!["oracle", "-o", "ds", "--count", "4"],
        vec!["train", "--manifest", "ds", "-o", "run", "--epochs", "1", "--progress-lines", "0"],
        vec!["predict", "--checkpoint", "run/model.wnt", "--lines", "--day", "8", "--density", "0.4", "-o", "pred/p.png"],
        vec!["compare", "pred/p.png", "ds/fluo_0000.png", "-o", "cmp"],
        vec!["sweep", "--checkpoint", "run/model.wnt", "-o", "sweep"],
        vec!["sweep", "--oracle-direct", "-o", "direct"],
        vec!["pattern", "--crossed", "-o", "pat/x.png"],
    ];
    for step in steps {
        let mut args = vec!["--deterministic", "--seed", "11"];
        args.extend(TINY);
        args.extend(step.iter().copied());
        let o = topocell(dir, &args);
        assert!(o.status.success(), "{step:?}: {}", stderr(&o));
    }
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(tree(&p));
        } else {
            out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn pipeline_is_byte_identical_in_determinism_mode() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert!(ta.iter().any(|(name, _)| name.ends_with("model.wnt")));
    assert!(ta.iter().any(|(name, _)| name.ends_with("sweep.csv")));
    assert_eq!(ta.len(), tb.len());
    for ((na, da), (nb, db)) in ta.iter().zip(&tb) {
        assert_eq!(na, nb);
        assert!(da == db, "{na} differs between runs");
    }
}
