use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use gsu_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(gsu_last_error()).to_str().unwrap().to_owned() }
}

fn ramp_video(frames: usize, h: usize, w: usize) -> *mut GsuVideo {
    let data: Vec<f32> = (0..frames * h * w).map(|i| 0.2 + 0.5 * ((i / w) % h) as f32 / h as f32).collect();
    let mut v = ptr::null_mut();
    assert_eq!(unsafe { gsu_video_new(frames, h, w, data.as_ptr(), &mut v) }, GsuStatus::Ok);
    v
}

fn data_of(v: *const GsuVideo) -> Vec<f32> {
    let (mut f, mut h, mut w) = (0, 0, 0);
    unsafe {
        assert_eq!(gsu_video_shape(v, &mut f, &mut h, &mut w), GsuStatus::Ok);
        let mut out = vec![0.0; f * h * w];
        assert_eq!(gsu_video_copy_data(v, out.as_mut_ptr(), out.len()), GsuStatus::Ok);
        out
    }
}

#[test]
fn video_round_trip_and_metrics() {
    let v = ramp_video(3, 12, 12);
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("v.gsu").to_str().unwrap()).unwrap();
    let mut back = ptr::null_mut();
    unsafe {
        assert_eq!(gsu_video_write(v, path.as_ptr()), GsuStatus::Ok);
        assert_eq!(gsu_video_read(path.as_ptr(), &mut back), GsuStatus::Ok);
    }
    assert_eq!(data_of(v), data_of(back));
    let mut m = GsuMetrics::default();
    unsafe { assert_eq!(gsu_metrics(v, back, &mut m), GsuStatus::Ok) };
    assert_eq!(m.psnr_db, f64::INFINITY);
    assert_eq!(m.ssim, 1.0);
    assert_eq!(m.consistency, 0.0);
    unsafe {
        gsu_video_free(v);
        gsu_video_free(back);
        gsu_video_free(ptr::null_mut());
    }
}

#[test]
fn degrade_then_bilinear_recovers_ramp() {
    let v = ramp_video(2, 13, 6);
    let id = CString::new("seq").unwrap();
    let (mut y, mut filled) = (ptr::null_mut(), ptr::null_mut());
    unsafe {
        assert_eq!(gsu_degrade(v, 2, 0, 6, 1, id.as_ptr(), &mut y), GsuStatus::Ok);
        assert_eq!(gsu_baseline(y, 1, &mut filled), GsuStatus::Ok);
    }
    let (clean, sparse, out) = (data_of(v), data_of(y), data_of(filled));
    assert!(sparse.iter().filter(|&&d| d == 0.0).count() == 2 * 6 * 6);
    for i in 0..clean.len() {
        assert!((clean[i] - out[i]).abs() < 1e-6);
    }
    unsafe {
        gsu_video_free(v);
        gsu_video_free(y);
        gsu_video_free(filled);
    }
}

#[test]
fn sample_pins_known_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let spec = gsu::denoiser::DenoiserSpec { base_channels: 8, max_frames: 2, ..Default::default() };
    let cfg = gsu::train::TrainConfig { frames: 2, ..Default::default() };
    let ck = dir.path().join("model.gsu");
    gsu::train::Trainer::<f32>::new(&spec, cfg).unwrap().to_checkpoint().unwrap().write(&ck).unwrap();
    let path = CString::new(ck.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    unsafe { assert_eq!(gsu_model_load(path.as_ptr(), &mut model), GsuStatus::Ok) };
    let v = ramp_video(3, 8, 8);
    let id = CString::new("a").unwrap();
    let (mut y, mut out) = (ptr::null_mut(), ptr::null_mut());
    let opts = GsuSampleOptions { steps: 2, clip: 2, ..gsu_sample_options_default() };
    unsafe {
        assert_eq!(gsu_degrade(v, 2, 1, 6, 4, id.as_ptr(), &mut y), GsuStatus::Ok);
        assert_eq!(gsu_sample(model, y, &opts, &mut out), GsuStatus::Ok);
    }
    let (known, got) = (data_of(y), data_of(out));
    for (k, o) in known.iter().zip(&got) {
        if *k > 0.0 {
            assert_eq!(k.to_bits(), o.to_bits());
        }
    }
    unsafe {
        gsu_model_free(model);
        for p in [v, y, out] {
            gsu_video_free(p);
        }
    }
}

#[test]
fn errors_map_to_status_codes() {
    let mut v = ptr::null_mut();
    unsafe {
        assert_eq!(gsu_video_new(1, 2, 2, ptr::null(), &mut v), GsuStatus::NullPointer);
        assert!(last_error().contains("data"));
        let bad = [0.5f32, 2.0, 0.1, 0.0];
        assert_eq!(gsu_video_new(1, 2, 2, bad.as_ptr(), &mut v), GsuStatus::InvalidArgument);
        assert_eq!(gsu_video_new(0, 2, 2, bad.as_ptr(), &mut v), GsuStatus::InvalidArgument);
        let missing = CString::new("/nonexistent/x.gsu").unwrap();
        assert_eq!(gsu_video_read(missing.as_ptr(), &mut v), GsuStatus::Io);
        assert!(v.is_null());
    }
    let a = ramp_video(2, 12, 12);
    let b = ramp_video(2, 12, 11);
    let mut m = GsuMetrics::default();
    let mut out = ptr::null_mut();
    let id = CString::new("s").unwrap();
    unsafe {
        assert_eq!(gsu_metrics(a, b, &mut m), GsuStatus::ShapeMismatch);
        assert_eq!(gsu_baseline(a, 9, &mut out), GsuStatus::InvalidArgument);
        assert_eq!(gsu_degrade(a, 0, 1, 6, 0, id.as_ptr(), &mut out), GsuStatus::InvalidArgument);
        assert_eq!(gsu_degrade(a, 2, 7, 6, 0, id.as_ptr(), &mut out), GsuStatus::InvalidArgument);
        let mut buf = [0.0f32; 3];
        assert_eq!(gsu_video_copy_data(a, buf.as_mut_ptr(), 3), GsuStatus::InvalidArgument);
        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk.gsu");
        std::fs::write(&junk, b"GSU1\x01").unwrap();
        let junk = CString::new(junk.to_str().unwrap()).unwrap();
        assert_eq!(gsu_video_read(junk.as_ptr(), &mut out), GsuStatus::Format);
        gsu_video_free(a);
        gsu_video_free(b);
    }
}

fn have(tool: &str) -> bool {
    Command::new(tool).arg("--version").output().is_ok()
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/gsu.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["gsu_video_new", "gsu_sample", "gsu_metrics", "gsu_last_error", "GSU_STATUS_NON_FINITE"] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"gsu.h\"\nint main(void) { GsuSampleOptions o = gsu_sample_options_default(); return o.steps == 32 ? 0 : 1; }\n",
    )
    .unwrap();
    let include = header.parent().unwrap();
    for (tool, lang) in [("cc", "c"), ("c++", "c++")] {
        if !have(tool) {
            continue;
        }
        let status = Command::new(tool)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang, "-I"])
            .arg(include)
            .arg(&src)
            .status()
            .unwrap();
        assert!(status.success(), "{tool} rejected the header");
    }
}
