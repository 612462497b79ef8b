//! End-to-end behavior of the installed binary: exit codes, option handling,
//! determinism of file outputs, and the shape of printed reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_predgate"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn");
    assert!(
        out.status.success(),
        "expected success for {args:?}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_code(args: &[&str]) -> (i32, String, String) {
    let out = bin().args(args).output().expect("spawn");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn sha_line(stdout: &str) -> String {
    stdout
        .lines()
        .find(|l| l.starts_with("sha256="))
        .expect("sha line present")
        .to_string()
}

/// Small data file most tests share.
fn gen_tiny(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let path = dir.join(name);
    let mut args = vec![
        "gen-data",
        "--out",
        path.to_str().unwrap(),
        "--count",
        "6",
        "--frames",
        "4",
        "--canvas",
        "8",
        "--shapes",
        "1",
    ];
    args.extend_from_slice(extra);
    run_ok(&args);
    path
}

fn train_tiny(dir: &Path, data: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let ckpt = dir.join(name);
    let mut args = vec![
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--a-channels",
        "1,2",
        "--r-channels",
        "2,2",
        "--log",
        "/dev/null",
    ];
    args.extend_from_slice(extra);
    run_ok(&args);
    ckpt
}

#[test]
fn help_costs_nothing_and_exits_zero() {
    for args in [&["--help"][..], &["train", "--help"][..], &[][..]] {
        let (code, stdout, _) = run_code(args);
        assert_eq!(code, 0, "{args:?}");
        assert!(stdout.contains("predgate"), "{args:?} printed: {stdout}");
    }
}

#[test]
fn unknown_command_and_unknown_option_exit_two() {
    let (code, _, stderr) = run_code(&["frobnicate"]);
    assert_eq!(code, 2);
    assert!(stderr.contains("unknown command"), "{stderr}");

    let (code, _, stderr) = run_code(&["gen-data", "--out", "/tmp/x", "--wibble", "3"]);
    assert_eq!(code, 2);
    assert!(stderr.contains("--wibble"), "{stderr}");
}

#[test]
fn generation_is_reproducible_and_seed_sensitive() {
    let dir = TempDir::new().unwrap();
    let a = run_ok(&["gen-data", "--out", dir.path().join("a.pgsq").to_str().unwrap(), "--count", "4", "--seed", "3"]);
    let b = run_ok(&["gen-data", "--out", dir.path().join("b.pgsq").to_str().unwrap(), "--count", "4", "--seed", "3"]);
    let c = run_ok(&["gen-data", "--out", dir.path().join("c.pgsq").to_str().unwrap(), "--count", "4", "--seed", "4"]);
    assert_eq!(sha_line(&stdout_of(&a)), sha_line(&stdout_of(&b)));
    assert_ne!(sha_line(&stdout_of(&a)), sha_line(&stdout_of(&c)));
}

#[test]
fn seed_env_fills_in_and_flags_beat_it() {
    let dir = TempDir::new().unwrap();
    let from_env = bin()
        .env("PREDGATE_SEED", "3")
        .args(["gen-data", "--out", dir.path().join("e.pgsq").to_str().unwrap(), "--count", "4"])
        .output()
        .unwrap();
    assert!(from_env.status.success());
    let from_flag = run_ok(&["gen-data", "--out", dir.path().join("f.pgsq").to_str().unwrap(), "--count", "4", "--seed", "3"]);
    assert_eq!(sha_line(&stdout_of(&from_env)), sha_line(&stdout_of(&from_flag)));

    let flag_wins = bin()
        .env("PREDGATE_SEED", "1000")
        .args(["gen-data", "--out", dir.path().join("g.pgsq").to_str().unwrap(), "--count", "4", "--seed", "3"])
        .output()
        .unwrap();
    assert_eq!(sha_line(&stdout_of(&flag_wins)), sha_line(&stdout_of(&from_flag)));
}

#[test]
fn model_aliases_train_identical_checkpoints() {
    let dir = TempDir::new().unwrap();
    let data = gen_tiny(dir.path(), "d.pgsq", &[]);
    let by_alias = train_tiny(dir.path(), &data, "alias.pgck", &["--model", "rgclstm"]);
    let by_id = train_tiny(dir.path(), &data, "id.pgck", &["--model", "M18"]);
    assert_eq!(fs::read(by_alias).unwrap(), fs::read(by_id).unwrap());
}

#[test]
fn config_files_merge_under_flags_and_reject_unknown_keys() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("gen.cfg");
    fs::write(&cfg, "# defaults\ncount=4\nseed=3\n").unwrap();

    // config alone
    let a = run_ok(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("a.pgsq").to_str().unwrap()]);
    let b = run_ok(&["gen-data", "--count", "4", "--seed", "3", "--out", dir.path().join("b.pgsq").to_str().unwrap()]);
    assert_eq!(sha_line(&stdout_of(&a)), sha_line(&stdout_of(&b)));

    // flag overrides the file
    let c = run_ok(&["gen-data", "--config", cfg.to_str().unwrap(), "--seed", "4", "--out", dir.path().join("c.pgsq").to_str().unwrap()]);
    assert_ne!(sha_line(&stdout_of(&c)), sha_line(&stdout_of(&a)));

    // unknown keys are named; malformed lines are format errors — both exit 2
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "coutn=4\n").unwrap();
    let (code, _, stderr) = run_code(&["gen-data", "--config", bad.to_str().unwrap(), "--out", "/tmp/never.pgsq"]);
    assert_eq!(code, 2);
    assert!(stderr.contains("coutn"), "{stderr}");

    let malformed = dir.path().join("malformed.cfg");
    fs::write(&malformed, "just words\n").unwrap();
    let (code, _, stderr) = run_code(&["gen-data", "--config", malformed.to_str().unwrap(), "--out", "/tmp/never.pgsq"]);
    assert_eq!(code, 2);
    assert!(stderr.contains("name=value"), "{stderr}");
}

#[test]
fn eval_reports_model_and_baseline_rows() {
    let dir = TempDir::new().unwrap();
    let data = gen_tiny(dir.path(), "d.pgsq", &[]);
    let ckpt = train_tiny(dir.path(), &data, "m.pgck", &[]);
    let out = run_ok(&["eval", "--data", data.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
    let stdout = stdout_of(&out);
    assert!(stdout.contains("model=M18"), "{stdout}");
    assert!(stdout.lines().any(|l| l.starts_with("model: mse=")), "{stdout}");
    assert!(stdout.lines().any(|l| l.starts_with("copy_last: mse=")), "{stdout}");
    // 8x8 frames sit below the SSIM window; the fallback must be announced
    assert!(String::from_utf8_lossy(&out.stderr).contains("SSIM"), "fallback warning missing");
}

#[test]
fn predict_writes_exactly_the_requested_frames() {
    let dir = TempDir::new().unwrap();
    let data = gen_tiny(dir.path(), "d.pgsq", &[]);
    let ckpt = train_tiny(dir.path(), &data, "m.pgck", &[]);
    let frames_dir = dir.path().join("frames");

    // default seeds = whole sequence: no ground-truth companions exist
    run_ok(&[
        "predict",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--steps",
        "3",
        "--out-dir",
        frames_dir.to_str().unwrap(),
    ]);
    let mut names: Vec<String> = fs::read_dir(&frames_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, vec!["s0_p1.ppm", "s0_p2.ppm", "s0_p3.ppm"]);

    // seeding three of four frames leaves one real frame to compare against
    let gt_dir = dir.path().join("gt");
    run_ok(&[
        "predict",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--steps",
        "2",
        "--seeds",
        "3",
        "--sequence",
        "1",
        "--out-dir",
        gt_dir.to_str().unwrap(),
    ]);
    let mut names: Vec<String> = fs::read_dir(&gt_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, vec!["s1_p1.ppm", "s1_p1_gt.ppm", "s1_p2.ppm"]);

    // P6, 8x8, 255 maximum
    let ppm = fs::read(gt_dir.join("s1_p1.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n8 8\n255\n"));
    assert_eq!(ppm.len(), b"P6\n8 8\n255\n".len() + 8 * 8 * 3);
}

#[test]
fn audit_expectations_gate_the_exit_code() {
    let (code, stdout, _) = run_code(&["audit-params", "--model", "rgclstm", "--preset", "mnist", "--expect", "4316235"]);
    assert_eq!(code, 0);
    assert!(stdout.contains("expect 4316235: ok"), "{stdout}");

    // the arithmetic total is also accepted where it differs from print
    let (code, _, _) = run_code(&["audit-params", "--model", "clstm", "--preset", "mnist", "--expect", "6909818"]);
    assert_eq!(code, 0);
    let (code, _, _) = run_code(&["audit-params", "--model", "clstm", "--preset", "mnist", "--expect", "6909834"]);
    assert_eq!(code, 0);

    let (code, _, stderr) = run_code(&["audit-params", "--model", "rgclstm", "--preset", "mnist", "--expect", "1"]);
    assert_eq!(code, 1);
    assert!(stderr.contains("expected 1 parameters"), "{stderr}");
}

#[test]
fn gradcheck_passes_run_and_injected_corruption_fails() {
    let (code, stdout, _) = run_code(&["gradcheck", "--only", "cell_m2"]);
    assert_eq!(code, 0);
    assert!(stdout.contains("cell_m2") && stdout.contains("PASS"), "{stdout}");

    let (code, stdout, stderr) =
        run_code(&["gradcheck", "--only", "cell_m2", "--inject-grad-error", "f:0.05"]);
    assert_eq!(code, 1, "stdout: {stdout}");
    assert!(stdout.contains("FAIL"), "{stdout}");
    assert!(stderr.contains("gradient check failed"), "{stderr}");

    let (code, _, stderr) = run_code(&["gradcheck", "--only", "no_such_instance"]);
    assert_eq!(code, 2);
    assert!(stderr.contains("no_such_instance"), "{stderr}");
}

#[test]
fn zoo_emits_the_documented_csv() {
    let dir = TempDir::new().unwrap();
    let data = gen_tiny(dir.path(), "d.pgsq", &[]);
    let csv_path = dir.path().join("zoo.csv");
    run_ok(&[
        "zoo",
        "--data",
        data.to_str().unwrap(),
        "--models",
        "M18,M2",
        "--train-count",
        "4",
        "--a-channels",
        "1,2",
        "--r-channels",
        "2,2",
        "--out",
        csv_path.to_str().unwrap(),
    ]);
    let csv = fs::read_to_string(&csv_path).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("model,peephole,gates,roles,params,mse,mae,ssim,train_wall_ms")
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2, "{csv}");
    assert!(rows[0].starts_with("M18,stacked_conv,f,cell=f+input=f+output=f,"), "{csv}");
    assert!(rows[1].starts_with("M2,none,f,cell=f+input=one+output=one,"), "{csv}");
    for row in rows {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells.len(), 9, "{row}");
        for metric in &cells[5..8] {
            metric.parse::<f64>().expect("metric cells are numbers");
        }
        cells[8].parse::<u64>().expect("wall ms is an integer");
    }
}

#[test]
fn damaged_inputs_exit_two_with_context() {
    let dir = TempDir::new().unwrap();
    let bogus = dir.path().join("bogus.pgsq");
    fs::write(&bogus, b"NOPE....").unwrap();
    let (code, _, stderr) = run_code(&["eval", "--data", bogus.to_str().unwrap(), "--checkpoint", bogus.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(stderr.contains("magic"), "{stderr}");

    let (code, _, stderr) = run_code(&["train", "--data", dir.path().join("absent.pgsq").to_str().unwrap(), "--out", "/tmp/x.pgck"]);
    assert_eq!(code, 2);
    assert!(stderr.contains("absent.pgsq"), "{stderr}");
}

#[test]
fn train_log_has_the_documented_columns() {
    let dir = TempDir::new().unwrap();
    let data = gen_tiny(dir.path(), "d.pgsq", &[]);
    let log = dir.path().join("log.csv");
    let ckpt = dir.path().join("m.pgck");
    run_ok(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--a-channels",
        "1,2",
        "--r-channels",
        "2,2",
        "--log",
        log.to_str().unwrap(),
    ]);
    let text = fs::read_to_string(&log).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,epoch,lr,loss,wall_ms"));
    // 6 sequences, default batch 4 -> 2 steps
    assert_eq!(lines.count(), 2, "{text}");
}
