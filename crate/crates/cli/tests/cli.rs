use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hsvideo::csc::FilterBank;
use hsvideo::synthetic::MotionVideo;
use hsvideo::tensor_io::{read_tensor, save_frames, sequence_from_tensor, write_tensor, BitDepth};
use tempfile::TempDir;

fn hsvideo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsvideo"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = hsvideo(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn meta_value(dir: &Path, key: &str) -> Option<String> {
    let text = fs::read_to_string(dir.join("meta.txt")).unwrap();
    let run = text.split("[run]").nth(1)?;
    run.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")).map(str::to_string))
}

/// A small moving square written as `frame_NNNN.png`.
fn frames_dir(root: &Path, size: usize, frames: usize) -> PathBuf {
    let dir = root.join(format!("input_{frames}"));
    save_frames(&MotionVideo::MovingSquare.render(size, frames), &dir, BitDepth::Sixteen).unwrap();
    dir
}

fn small_bank(root: &Path) -> PathBuf {
    // identity plus horizontal and vertical differences
    let mut data = vec![0.0; 3 * 9];
    data[4] = 1.0;
    data[9 + 4] = 0.7;
    data[9 + 5] = -0.7;
    data[18 + 4] = 0.7;
    data[18 + 7] = -0.7;
    let path = root.join("bank.cvt");
    write_tensor(&path, &FilterBank::new(3, data).unwrap().to_tensor()).unwrap();
    path
}

const FAST: [&str; 4] = ["--set", "outer_iters=6", "--set", "stop_tol=0"];

#[test]
fn simulate_writes_capture_and_display() {
    let tmp = TempDir::new().unwrap();
    let input = frames_dir(tmp.path(), 32, 20);
    let run = tmp.path().join("sim");
    ok(&["simulate", "--input", s(&input), "--frames", "20", "--bump", "3", "--out", s(&run)]);
    for f in ["coded.cvt", "coded.png", "shutter.cvt", "meta.txt", "frames.cvt"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    assert_eq!(fs::read_dir(run.join("frames")).unwrap().count(), 20);
    let coded = read_tensor(run.join("coded.cvt")).unwrap();
    assert_eq!(coded.dims, vec![32, 32]);
    // raw sum can exceed 1, the display image is divided by L
    assert!(coded.to_f64().iter().any(|&v| v > 1.0));
    let display = image::open(run.join("coded.png")).unwrap().into_luma16();
    let c = coded.to_f64();
    for (i, p) in display.pixels().enumerate() {
        let want = (c[i] / 3.0 * 65535.0 + 0.5).floor();
        assert_eq!(p.0[0] as f64, want);
    }
    assert_eq!(meta_value(&run, "sampling_ratio").unwrap(), "0.150000");
}

#[test]
fn long_input_truncated_with_warning() {
    let tmp = TempDir::new().unwrap();
    let input = frames_dir(tmp.path(), 32, 25);
    let run = tmp.path().join("sim");
    let out = ok(&["simulate", "--input", s(&input), "--frames", "20", "--out", s(&run)]);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("WARN") && stderr.contains("first 20"), "{stderr}");
    let seq = sequence_from_tensor(&read_tensor(run.join("frames.cvt")).unwrap()).unwrap();
    assert_eq!(seq.frames, 20);
}

#[test]
fn missing_input_fails() {
    let tmp = TempDir::new().unwrap();
    let out = hsvideo(&[
        "simulate",
        "--input",
        s(&tmp.path().join("nowhere")),
        "--out",
        s(&tmp.path().join("sim")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
    assert!(!tmp.path().join("sim").exists());
}

#[test]
fn unknown_config_key_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "bump=3\nbeta_9=1\n").unwrap();
    let out = hsvideo(&[
        "simulate",
        "--synthetic",
        "rotating_bar",
        "--config",
        s(&cfg),
        "--out",
        s(&tmp.path().join("sim")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("beta_9"));
}

#[test]
fn csc_run_layout_and_objective_rows() {
    let tmp = TempDir::new().unwrap();
    let sim = tmp.path().join("sim");
    ok(&["simulate", "--synthetic", "rotating_bar", "--set", "size=32", "--out", s(&sim)]);
    let bank = small_bank(tmp.path());
    let rec = tmp.path().join("rec");
    let mut args = vec!["reconstruct-csc", "--input", s(&sim), "--dictionary", s(&bank), "--out", s(&rec)];
    args.extend(FAST);
    ok(&args);

    let objective = fs::read_to_string(rec.join("objective.csv")).unwrap();
    assert_eq!(objective.lines().count(), 1 + 6);
    let report = fs::read_to_string(rec.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 20);
    for f in ["coded.cvt", "shutter.cvt", "frames.cvt", "filters.png"] {
        assert!(rec.join(f).is_file(), "{f} missing");
    }
    let secs: f64 = meta_value(&rec, "wall_seconds").unwrap().parse().unwrap();
    assert!(secs > 0.0);
    assert_eq!(meta_value(&rec, "solver").unwrap(), "direct");
    let ms: f64 = meta_value(&rec, "mean_ms_ssim").unwrap().parse().unwrap();
    assert!(ms > 0.0 && ms <= 1.0);

    // the recorded config repeats the run exactly
    let again = tmp.path().join("again");
    ok(&[
        "reconstruct-csc",
        "--config",
        s(&rec.join("meta.txt")),
        "--input",
        s(&sim),
        "--dictionary",
        s(&bank),
        "--out",
        s(&again),
    ]);
    assert_eq!(
        fs::read(rec.join("frames.cvt")).unwrap(),
        fs::read(again.join("frames.cvt")).unwrap()
    );
}

#[test]
fn deterministic_runs_are_bit_identical() {
    let tmp = TempDir::new().unwrap();
    let sim = tmp.path().join("sim");
    ok(&["simulate", "--synthetic", "moving_square", "--set", "size=32", "--out", s(&sim)]);
    let bank = small_bank(tmp.path());
    let runs: Vec<PathBuf> = (0..2)
        .map(|i| {
            let rec = tmp.path().join(format!("rec{i}"));
            let mut args = vec![
                "reconstruct-csc",
                "--deterministic",
                "--input",
                s(&sim),
                "--dictionary",
                s(&bank),
                "--out",
                s(&rec),
            ];
            args.extend(FAST);
            ok(&args);
            rec
        })
        .collect();
    let mut names: Vec<_> = fs::read_dir(runs[0].join("frames"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 20);
    for n in names {
        assert_eq!(
            fs::read(runs[0].join("frames").join(&n)).unwrap(),
            fs::read(runs[1].join("frames").join(&n)).unwrap()
        );
    }
}

#[test]
fn training_and_patch_reconstruction() {
    let tmp = TempDir::new().unwrap();
    let patch_keys = [
        "--frames", "4", "--bump", "2", "--set", "size=32", "--set", "patch_px=4", "--set",
        "patch_py=4", "--set", "patch_stride=2",
    ];
    let dict_run = tmp.path().join("pdict");
    let mut args = vec!["train-patch", "--out", s(&dict_run)];
    args.extend(patch_keys);
    args.extend([
        "--set", "train_count=2", "--set", "train_size=16", "--set", "patch_ksvd_iters=2", "--set",
        "patch_train_sparsity=3", "--count", "60", "--strategy", "random",
    ]);
    ok(&args);
    let meta = fs::read_to_string(dict_run.join("meta.txt")).unwrap();
    assert!(meta.contains("\nselection=random\n") && meta.contains("\nselection_count=60\n"));
    let dict = dict_run.join("dictionary.cvt");
    assert_eq!(read_tensor(&dict).unwrap().dims, vec![128, 64]);
    assert_eq!(
        fs::read_to_string(dict_run.join("objective.csv")).unwrap().lines().count(),
        1 + 2
    );

    let bank_run = tmp.path().join("bank");
    ok(&[
        "train-csc", "--out", s(&bank_run), "--set", "train_count=2", "--set", "train_size=16",
        "--set", "train_filters=4", "--set", "train_filter_size=5", "--set", "train_alternations=2",
        "--set", "train_code_iters=5",
    ]);
    let bank = bank_run.join("bank.cvt");
    assert_eq!(read_tensor(&bank).unwrap().dims, vec![4, 5, 5]);
    assert!(bank_run.join("filters.png").is_file());

    let sim = tmp.path().join("sim");
    let mut args = vec!["simulate", "--synthetic", "translating_gradient", "--out", s(&sim)];
    args.extend(patch_keys);
    ok(&args);
    let rec = tmp.path().join("rec");
    let mut args = vec!["reconstruct-patch", "--input", s(&sim), "--dict", s(&dict), "--out", s(&rec)];
    args.extend(patch_keys);
    ok(&args);
    assert_eq!(meta_value(&rec, "stride").unwrap(), "2");
    let strided = tmp.path().join("strided");
    let mut args = vec!["reconstruct-patch", "--input", s(&sim), "--dict", s(&dict), "--stride", "4", "--out", s(&strided)];
    args.extend(patch_keys);
    ok(&args);
    assert_eq!(meta_value(&strided, "stride").unwrap(), "4");
    assert!(meta_value(&rec, "wall_seconds").unwrap().parse::<f64>().unwrap() > 0.0);
    assert_eq!(fs::read_to_string(rec.join("report.csv")).unwrap().lines().count(), 1 + 4);

    // each method refuses the other's dictionary
    let out = hsvideo(&["reconstruct-csc", "--input", s(&sim), "--dictionary", s(&dict), "--out", s(&tmp.path().join("x"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("parameter error"));
    let out = hsvideo(&["reconstruct-patch", "--input", s(&sim), "--dictionary", s(&bank), "--out", s(&tmp.path().join("y"))]);
    assert!(!out.status.success());

    let eval = tmp.path().join("eval");
    let out = ok(&["evaluate", "--truth", s(&sim), "--estimate", s(&rec), "--out", s(&eval)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("mean_ms_ssim="));
    assert_eq!(
        meta_value(&eval, "mean_ms_ssim"),
        meta_value(&rec, "mean_ms_ssim")
    );
}

#[test]
fn sweep_grid_has_sixteen_rows() {
    let tmp = TempDir::new().unwrap();
    let bank = small_bank(tmp.path());
    let out_dir = tmp.path().join("sweep");
    let out = ok(&[
        "sweep", "--dictionary", s(&bank), "--out", s(&out_dir), "--set", "size=32", "--frames", "6",
        "--set", "outer_iters=3", "--set", "sweep_videos=rotating_bar",
    ]);
    let csv = fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 16);
    assert!(rows.iter().any(|r| r.starts_with("100,1,")));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("best beta_d="));
    assert!(meta_value(&out_dir, "default_cell_gap").is_some());

    let out = hsvideo(&[
        "sweep", "--dictionary", s(&bank), "--out", s(&tmp.path().join("empty")), "--set", "sweep_videos=",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("parameter error"));
}
