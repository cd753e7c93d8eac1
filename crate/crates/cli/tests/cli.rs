use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use svrecon::volio::{read_stack_bundle, read_volume, BUNDLE_FILE, TRUTH_FILE};

fn svrecon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svrecon"))
        .args(args)
        .env("SVRECON_THREADS", "2")
        .output()
        .expect("spawn svrecon")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Coarse 3-stack bundle: 24³ phantom at 3.2 mm.
fn small_bundle(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "simulate", "--out", s(dir), "--dims", "24", "--spacing", "3.2", "--r1", "3.2", "--r3", "6.4", "--k-sim",
        "8", "--seed", "5",
    ];
    args.extend_from_slice(extra);
    svrecon(&args)
}

fn trained_checkpoint(dir: &Path, iters: &str) -> PathBuf {
    let bundle = dir.join("bundle");
    assert_eq!(code(&small_bundle(&bundle, &[])), 0);
    let ckpt = dir.join("model.ckpt");
    let vol = dir.join("v.nii");
    let out = svrecon(&[
        "reconstruct", "--stacks", s(&bundle), "--out", s(&ckpt), "--volume", s(&vol), "--compact", "--no-vdsg",
        "--iters", iters, "--resolution", "3.2",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    ckpt
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&svrecon(&["--help"])), 0);
    assert_eq!(code(&svrecon(&["render", "--help"])), 0);
    assert_eq!(code(&svrecon(&[])), 1);
    assert_eq!(code(&svrecon(&["simulate", "--bogus"])), 1);
    assert_eq!(code(&svrecon(&["render", "--out", "x.nii"])), 1);
    assert_eq!(code(&svrecon(&["simulate", "--out", "x", "--motion-preset", "wild"])), 1);
}

#[test]
fn simulate_writes_bundle_truth_and_phantom() {
    let dir = tempfile::tempdir().unwrap();
    let out = small_bundle(dir.path(), &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in [BUNDLE_FILE, TRUTH_FILE, "phantom.nii", "stack_000.nii", "mask_002.nii"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let stacks = read_stack_bundle(dir.path()).unwrap();
    assert_eq!(stacks.len(), 3);
    assert_eq!(read_volume(&dir.path().join("phantom.nii")).unwrap().dims(), [24, 24, 24]);
}

#[test]
fn simulate_stack_count_and_orientations() {
    let dir = tempfile::tempdir().unwrap();
    let out = small_bundle(dir.path(), &["--stacks", "8"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(read_stack_bundle(dir.path()).unwrap().len(), 8);

    let dir = tempfile::tempdir().unwrap();
    let out = small_bundle(dir.path(), &["--stacks", "2", "--orientations", "sagittal,sagittal"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stacks = read_stack_bundle(dir.path()).unwrap();
    // sagittal slices stack along world x
    let n = stacks[0].transforms[0].apply_vector([0.0, 0.0, 1.0]);
    assert!((n[0].abs() - 1.0).abs() < 0.05, "{n:?}");

    let out = small_bundle(dir.path(), &["--stacks", "3", "--orientations", "axial"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn simulate_is_byte_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(code(&small_bundle(a.path(), &["--perturb-mm", "1"])), 0);
    assert_eq!(code(&small_bundle(b.path(), &["--perturb-mm", "1"])), 0);
    for f in [BUNDLE_FILE, TRUTH_FILE, "phantom.nii", "stack_001.nii", "mask_001.nii"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
    let truth = std::fs::read(a.path().join(TRUTH_FILE)).unwrap();
    let index = std::fs::read(a.path().join(BUNDLE_FILE)).unwrap();
    assert_ne!(truth, index);
}

#[test]
fn simulate_rejects_invalid_phantom() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("phantom.json");
    std::fs::write(
        &spec,
        r#"{"ellipsoids": [{"center": [0, 0, 0], "semi_axes": [10, -1, 10], "intensity": 0.5}]}"#,
    )
    .unwrap();
    let out = small_bundle(&dir.path().join("o"), &["--phantom", s(&spec)]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    std::fs::write(&spec, "{\"ellipsoids\": 3}").unwrap();
    assert_eq!(code(&small_bundle(&dir.path().join("o"), &["--phantom", s(&spec)])), 1);
    std::fs::write(
        &spec,
        r#"{"ellipsoids": [{"center": [0, 0, 0], "semi_axes": [20, 20, 20], "intensity": 0.5}]}"#,
    )
    .unwrap();
    assert_eq!(code(&small_bundle(&dir.path().join("o"), &["--phantom", s(&spec)])), 0);
}

#[test]
fn reconstruct_from_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained_checkpoint(dir.path(), "0");
    assert!(ckpt.exists());
    assert!(dir.path().join("v.nii").exists());
    let loss = std::fs::read_to_string(dir.path().join("model.loss.csv")).unwrap();
    assert_eq!(loss, "iteration,slice,reg,bias,total\n");
}

#[test]
fn reconstruct_reports_missing_transform() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("b");
    assert_eq!(code(&small_bundle(&bundle, &[])), 0);
    let index = bundle.join(BUNDLE_FILE);
    let mut json: serde_json::Value = serde_json::from_slice(&std::fs::read(&index).unwrap()).unwrap();
    let transforms = json["stacks"][1]["transforms"].as_array_mut().unwrap();
    let kept = transforms.len() - 1;
    transforms.pop();
    std::fs::write(&index, serde_json::to_vec(&json).unwrap()).unwrap();
    let out = svrecon(&[
        "reconstruct", "--stacks", s(&bundle), "--out", s(&dir.path().join("m.ckpt")), "--volume",
        s(&dir.path().join("v.nii")), "--compact", "--iters", "0",
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains(&format!("stack stack1 slice {kept}")), "{}", stderr(&out));
}

#[test]
fn reconstruct_rejects_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("b");
    assert_eq!(code(&small_bundle(&bundle, &[])), 0);
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"iterations": 10, "learning_rate": 0.1}"#).unwrap();
    let out = svrecon(&[
        "reconstruct", "--stacks", s(&bundle), "--config", s(&cfg), "--out", s(&dir.path().join("m.ckpt")),
        "--volume", s(&dir.path().join("v.nii")),
    ]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    let out = svrecon(&[
        "reconstruct", "--stacks", s(&dir.path().join("nowhere")), "--out", s(&dir.path().join("m.ckpt")),
        "--volume", s(&dir.path().join("v.nii")),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn render_shapes_and_repeatability() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained_checkpoint(dir.path(), "5");
    let coarse = dir.path().join("c.nii");
    let fine = dir.path().join("f.nii");
    let again = dir.path().join("f2.nii");
    for (res, p) in [("1.6", &coarse), ("0.8", &fine), ("0.8", &again)] {
        let out = svrecon(&["render", "--checkpoint", s(&ckpt), "--resolution", res, "--out", s(p)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let c = read_volume(&coarse).unwrap();
    let f = read_volume(&fine).unwrap();
    for a in 0..3 {
        // each axis count is the rounded extent / spacing
        assert!((f.dims()[a] as i64 - 2 * c.dims()[a] as i64).abs() <= 1, "{:?} {:?}", c.dims(), f.dims());
    }
    let ratio = f.len() as f64 / c.len() as f64;
    assert!((ratio / 8.0 - 1.0).abs() < 0.15, "{ratio}");
    assert!(f.grid.spacing.iter().all(|&d| (d - 0.8).abs() < 1e-6));
    assert!(std::fs::read(&fine).unwrap() == std::fs::read(&again).unwrap());
    let out = svrecon(&["render", "--checkpoint", s(&dir.path().join("none.ckpt")), "--out", s(&fine)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn refine_writes_both_volumes_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained_checkpoint(dir.path(), "20");
    let run = |name: &str, steps: &str| {
        let out_path = dir.path().join(name);
        let out = svrecon(&[
            "refine", "--checkpoint", s(&ckpt), "--steps", steps, "--resolution", "3.2", "--noise-iters", "20",
            "--noise-batch", "256", "--out", s(&out_path),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        out_path
    };
    let a = run("a.nii", "10");
    let b = run("b.nii", "10");
    let lit = dir.path().join("a.literal.nii");
    assert!(lit.exists());
    assert!(std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap());
    assert!(std::fs::read(&lit).unwrap() == std::fs::read(dir.path().join("b.literal.nii")).unwrap());
    let one = run("one.nii", "1");
    assert_eq!(read_volume(&one).unwrap().dims(), read_volume(&a).unwrap().dims());

    let out = svrecon(&["refine", "--checkpoint", s(&ckpt), "--alpha0", "0.2", "--out", s(&a)]);
    assert_eq!(code(&out), 1);
    let out = svrecon(&["refine", "--checkpoint", s(&dir.path().join("x.ckpt")), "--out", s(&a)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn evaluate_identical_and_mismatched() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&small_bundle(dir.path(), &[])), 0);
    let phantom = dir.path().join("phantom.nii");
    let csv = dir.path().join("m.csv");
    let out = svrecon(&["evaluate", "--ref", s(&phantom), "--test", s(&phantom), "--out", s(&csv)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("ref,test,psnr,ssim,rmse,ncc,range"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row.len(), 7);
    assert_eq!(row[2].parse::<f64>().unwrap(), f64::INFINITY);
    assert_eq!(row[3].parse::<f64>().unwrap(), 1.0);
    assert_eq!(row[4].parse::<f64>().unwrap(), 0.0);
    assert_eq!(row[5].parse::<f64>().unwrap(), 1.0);
    assert!(lines.next().is_none());

    let other = dir.path().join("stack_000.nii");
    let out = svrecon(&["evaluate", "--ref", s(&phantom), "--test", s(&other), "--out", s(&csv)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("shape mismatch"), "{}", stderr(&out));
}

#[test]
fn pipeline_smoke_64() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("sim");
    let out = svrecon(&[
        "simulate", "--out", s(&bundle), "--dims", "64", "--spacing", "1.2", "--r1", "1.2", "--r3", "2.4", "--k-sim",
        "32", "--seed", "1",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ckpt = dir.path().join("model.ckpt");
    let vol = dir.path().join("recon.nii");
    let out = svrecon(&[
        "reconstruct", "--stacks", s(&bundle), "--out", s(&ckpt), "--volume", s(&vol), "--compact", "--iters", "200",
        "--resolution", "1.2",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let loss = std::fs::read_to_string(dir.path().join("model.loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 201);
    let refined = dir.path().join("refined.nii");
    let out = svrecon(&[
        "refine", "--checkpoint", s(&ckpt), "--resolution", "1.2", "--noise-iters", "200", "--out", s(&refined),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    // the render grid covers the observed box, so resample the phantom onto it
    let phantom = read_volume(&bundle.join("phantom.nii")).unwrap();
    let recon = read_volume(&refined).unwrap();
    let resampled = svrecon::volume::Volume::from_data(
        recon.grid,
        (0..recon.len()).map(|i| phantom.sample(recon.grid.voxel_center(i)) as f32).collect(),
    )
    .unwrap();
    let truth = dir.path().join("truth.nii");
    svrecon::volio::write_volume(&resampled, &truth).unwrap();
    let csv = dir.path().join("metrics.csv");
    let out = svrecon(&["evaluate", "--ref", s(&truth), "--test", s(&refined), "--out", s(&csv)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = std::fs::read_to_string(&csv).unwrap();
    let row: Vec<f64> = text.lines().nth(1).unwrap().split(',').skip(2).map(|v| v.parse().unwrap()).collect();
    assert!(row.iter().all(|v| v.is_finite()), "{text}");
    assert!(row[3] > 0.5, "ncc {}", row[3]);
}
