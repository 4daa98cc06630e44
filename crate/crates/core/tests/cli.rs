use std::path::Path;
use std::process::{Command, Output};

use gsu::io::{Container, VideoRecord};

fn gsu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsu")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = gsu(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// synth + project into `root/points` and `root/clean`.
fn clean_videos(root: &Path, frames: &str) {
    let points = root.join("points");
    let clean = root.join("clean");
    ok(&["synth", "--out", s(&points), "--subjects", "2", "--frames", frames, "--seed", "3"]);
    ok(&["project", "--input", s(&points), "--out", s(&clean), "--grid", "16"]);
}

#[test]
fn full_pipeline_runs_and_pins_known_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    clean_videos(root, "6");
    let (clean, degraded, model, up) = (root.join("clean"), root.join("degraded"), root.join("model"), root.join("up"));
    ok(&["degrade", "--input", s(&clean), "--out", s(&degraded), "--vmask", "2", "--pmask", "1/6", "--seed", "9"]);
    ok(&[
        "train", "--data", s(&clean), "--out", s(&model), "--iterations", "2", "--batch-size", "1", "--frames", "4",
        "--base-channels", "8",
    ]);
    let ck = model.join("checkpoint_final.gsu");
    assert!(ck.exists() && model.join("loss.log").exists() && model.join("train.resolved.cfg").exists());
    ok(&["sample", "--checkpoint", s(&ck), "--input", s(&degraded), "--out", s(&up), "--steps", "1"]);
    for id in ["s000_q00", "s001_q00"] {
        let y = VideoRecord::read(&degraded.join(format!("{id}.gsu"))).unwrap();
        let out = VideoRecord::read(&up.join(format!("{id}.gsu"))).unwrap();
        assert_eq!(out.video.depth.shape(), y.video.depth.shape());
        assert_eq!(out.video.meta, y.video.meta);
        for (o, k) in out.video.depth.data().iter().zip(y.video.depth.data()) {
            if *k > 0.0 {
                assert_eq!(o.to_bits(), k.to_bits());
            }
        }
    }
    let csv = root.join("report.csv");
    let stdout = ok(&["eval", "--reference", s(&clean), "--input", s(&up), "--out", s(&csv), "--png", s(&root.join("png"))]);
    assert!(stdout.contains("mean PSNR"));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "sequence_id,recipe,psnr_db,ssim,consistency");
    assert!(lines[1].starts_with("s000_q00,Vx1/2_Px1/6,"));
    assert!(lines[3].starts_with("MEAN,"));
    assert!(root.join("png/s000_q00_f005.png").exists());
    assert!(root.join("report.csv.resolved.cfg").exists());

    let csv = root.join("bicubic.csv");
    ok(&["eval", "--reference", s(&clean), "--input", s(&degraded), "--out", s(&csv), "--baseline", "bicubic"]);
    assert!(std::fs::read_to_string(&csv).unwrap().contains("MEAN,Vx1/2_Px1/6"));
}

#[test]
fn identity_degrade_keeps_videos() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    clean_videos(root, "3");
    let out = root.join("same");
    ok(&["degrade", "--input", s(&root.join("clean")), "--out", s(&out), "--vmask", "1", "--pmask", "0/6"]);
    for id in ["s000_q00", "s001_q00"] {
        let a = Container::read(&root.join("clean").join(format!("{id}.gsu"))).unwrap();
        let b = Container::read(&out.join(format!("{id}.gsu"))).unwrap();
        for name in ["depth", "meta/center", "meta/sensor_angle", "meta/z_min"] {
            assert_eq!(a.get(name), b.get(name), "{name}");
        }
        let (_, mask) = b.u8("mask").unwrap();
        assert!(mask.iter().all(|&v| v == 1));
    }
}

#[test]
fn config_file_and_flags_resolve_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    clean_videos(root, "2");
    let cfg = root.join("run.cfg");
    std::fs::write(&cfg, "# shared settings\nvmask = 3\npmask = 2/6\nseed = 11\n").unwrap();
    let out = root.join("d1");
    ok(&["degrade", "--config", s(&cfg), "--input", s(&root.join("clean")), "--out", s(&out), "--pmask", "1/6"]);
    let resolved = std::fs::read_to_string(out.join("degrade.resolved.cfg")).unwrap();
    assert!(resolved.contains("vmask = 3\n"), "{resolved}");
    assert!(resolved.contains("pmask = 1/6\n"));
    assert!(resolved.contains("seed = 11\n"));
    let rec = VideoRecord::read(&out.join("s000_q00.gsu")).unwrap();
    assert_eq!(rec.recipe.as_deref(), Some("Vx2/3_Px1/6"));
}

#[test]
fn malformed_inputs_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let missing = root.join("nothing");
    let cases: Vec<Vec<&str>> = vec![
        vec!["project", "--input", s(&missing), "--out", s(root)],
        vec!["frobnicate"],
        vec!["synth", "--out", s(root), "--frames", "many"],
    ];
    for args in &cases {
        assert_eq!(gsu(args).status.code(), Some(1), "{args:?}");
    }
    clean_videos(root, "2");
    let bad = gsu(&["degrade", "--input", s(&root.join("clean")), "--out", s(&root.join("x")), "--pmask", "7/6"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&bad.stderr).is_empty());
    std::fs::write(root.join("clean/s000_q00.gsu"), b"GSU1 but truncated").unwrap();
    let out = gsu(&["degrade", "--input", s(&root.join("clean")), "--out", s(&root.join("y"))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(gsu(&["--help"]).status.code(), Some(0));
}

#[test]
fn non_finite_weights_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    clean_videos(root, "2");
    let spec = gsu::denoiser::DenoiserSpec { base_channels: 8, max_frames: 2, ..Default::default() };
    let cfg = gsu::train::TrainConfig { frames: 2, ..Default::default() };
    let mut t = gsu::train::Trainer::<f32>::new(&spec, cfg).unwrap();
    let i = t.ema.position("out.conv.b").unwrap();
    t.ema.tensors_mut()[i].data_mut()[0] = f32::NAN;
    let ck = root.join("nan.gsu");
    t.to_checkpoint().unwrap().write(&ck).unwrap();
    let out = gsu(&["sample", "--checkpoint", s(&ck), "--input", s(&root.join("clean")), "--out", s(&root.join("o")), "--steps", "1"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
