//! End-to-end tests of the `mvfc` binary.

use std::path::Path;
use std::process::{Command, Output};

fn mvfc(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvfc"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_landmarks(path: &Path) {
    // 1-D-ish track: frames 0..3 with landmark x-coordinates 0, 10, 1, 9.
    let text = "L=1\n0, 0.0, 0.0\n1, 10.0, 0.0\n2, 1.0, 0.0\n3, 9.0, 0.0\n";
    std::fs::write(path, text).unwrap();
}

fn write_keypoints(path: &Path, frames: u32) {
    let mut text = String::new();
    for f in 0..frames {
        text.push_str(&f.to_string());
        for i in 0..10 {
            let x = -0.9 + 0.1 * i as f32 + 0.01 * f as f32;
            let y = 0.05 * i as f32 - 0.2;
            text.push_str(&format!(", {x}, {y}"));
        }
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

fn write_view_png(path: &Path, size: u32, tint: u8) {
    let img = image::RgbImage::from_fn(size, size, |x, y| {
        image::Rgb([((x * 255) / size) as u8, ((y * 255) / size) as u8, tint])
    });
    img.save(path).unwrap();
}

#[test]
fn select_views_fps_matches_library_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let landmarks = dir.path().join("landmarks.txt");
    write_landmarks(&landmarks);
    let out = mvfc(
        &[
            "select-views",
            "--strategy",
            "fps",
            "--k",
            "3",
            "--landmarks",
            landmarks.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let printed: Vec<usize> = stdout(&out)
        .lines()
        .map(|l| l.trim().parse().unwrap())
        .collect();

    let track = mvfc_core::io::read_landmark_track(&landmarks).unwrap();
    let expected = mvfc_core::selection::fps_select(&track, 3).unwrap();
    assert_eq!(printed, expected);
    assert_eq!(printed.len(), 3);
    assert_eq!(printed[0], 0);
}

#[test]
fn select_views_random_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let landmarks = dir.path().join("landmarks.txt");
    write_landmarks(&landmarks);
    let args = [
        "select-views",
        "--strategy",
        "random",
        "--k",
        "2",
        "--landmarks",
        landmarks.to_str().unwrap(),
        "--seed",
        "7",
    ];
    let a = mvfc(&args, dir.path());
    let b = mvfc(&args, dir.path());
    assert!(a.status.success());
    assert_eq!(stdout(&a), stdout(&b));
    assert!(stdout(&a).lines().next().unwrap().trim() == "0");
}

#[test]
fn encode_decode_roundtrip_preserves_keypoints_within_half_ulp() {
    let dir = tempfile::tempdir().unwrap();
    let keypoints = dir.path().join("keypoints.txt");
    write_keypoints(&keypoints, 5);
    let view_png = dir.path().join("view0.png");
    write_view_png(&view_png, 16, 40);
    let manifest = dir.path().join("views.txt");
    std::fs::write(&manifest, "0, view0.png\n").unwrap();
    let session = dir.path().join("session.mvfc");

    let out = mvfc(
        &[
            "encode",
            "--keypoints",
            keypoints.to_str().unwrap(),
            "--views",
            manifest.to_str().unwrap(),
            "--output",
            session.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(stdout(&out).contains("encoded 5 frames"));

    // Bitstream-level check: decoded keypoints match the ingested ones
    // within the binary16 quantization bound.
    let bytes = std::fs::read(&session).unwrap();
    let (header, payloads) = mvfc_core::bitstream::read_session(&bytes).unwrap();
    assert_eq!(header.view_count(), 1);
    assert_eq!(payloads.len(), 5);
    let originals = mvfc_core::io::read_keypoint_records(&keypoints).unwrap();
    for (payload, (frame, kp)) in payloads.iter().zip(&originals) {
        assert_eq!(payload.frame_index, *frame);
        let decoded = payload.keypoints().unwrap();
        for (a, b) in decoded.points().iter().zip(kp.points()) {
            assert!((a[0] - b[0]).abs() <= 4.9e-4);
            assert!((a[1] - b[1]).abs() <= 4.9e-4);
        }
    }

    // Full decode to frames.
    let recon = dir.path().join("recon");
    let png_dir = dir.path().join("png");
    let out = mvfc(
        &[
            "decode",
            "--input",
            session.to_str().unwrap(),
            "--keypoints",
            keypoints.to_str().unwrap(),
            "--output",
            recon.to_str().unwrap(),
            "--png",
            png_dir.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let frames = mvfc_core::io::FrameSet::load(&recon).unwrap();
    assert_eq!(frames.frame_count(), 5);
    assert_eq!((frames.width(), frames.height()), (16, 16));
    assert!(png_dir.join("frame_00000.png").exists());
}

#[test]
fn evaluate_self_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let frames_dir = dir.path().join("frames");
    std::fs::create_dir(&frames_dir).unwrap();
    for i in 0..3 {
        write_view_png(&frames_dir.join(format!("f{i}.png")), 24, i * 30);
    }
    let out = mvfc(
        &[
            "evaluate",
            frames_dir.to_str().unwrap(),
            frames_dir.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["l1"].as_f64().unwrap(), 0.0);
    assert!((report["ssim"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    // Identical frames have infinite PSNR, which JSON renders as null.
    assert!(report["psnr_db"].is_null());
}

#[test]
fn rd_curve_extracts_front() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("points.csv");
    std::fs::write(
        &input,
        "rate_kbps,bits_per_frame,metric,label\n1,40,10,a\n2,80,5,b\n3,120,6,c\n",
    )
    .unwrap();
    let output = dir.path().join("curve.csv");
    let out = mvfc(
        &[
            "rd-curve",
            "--input",
            input.to_str().unwrap(),
            "--direction",
            "lower",
            "--output",
            output.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let pareto = std::fs::read_to_string(dir.path().join("curve.csv.pareto.csv")).unwrap();
    let lines: Vec<&str> = pareto.lines().collect();
    assert_eq!(lines.len(), 3); // header + 2 front points
    assert!(lines[1].ends_with(",a"));
    assert!(lines[2].ends_with(",b"));
}

#[test]
fn bad_config_exits_nonzero_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let landmarks = dir.path().join("landmarks.txt");
    write_landmarks(&landmarks);
    let config = dir.path().join("bad.cfg");
    std::fs::write(&config, "sigma = not_a_number\n").unwrap();
    let out = mvfc(
        &[
            "select-views",
            "--strategy",
            "fps",
            "--k",
            "2",
            "--landmarks",
            landmarks.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.trim().lines().count(), 1, "stderr: {stderr}");
    assert!(stderr.starts_with("error:"));
}

#[test]
fn h264_baseline_without_encoder_fails_cleanly() {
    if mvfc_core::h264::H264Encoder::new().available() {
        // Encoder present: a tiny sweep must succeed instead.
        let dir = tempfile::tempdir().unwrap();
        let mut frames = mvfc_core::io::FrameSet::empty(32, 32).unwrap();
        for f in 0..8u32 {
            let img = mvfc_core::tensor::Tensor::new(
                vec![3, 32, 32],
                (0..3 * 32 * 32)
                    .map(|i| (((i as u32 + 37 * f) % 255) as f32) / 255.0)
                    .collect(),
            )
            .unwrap();
            frames.push_tensor(&img).unwrap();
        }
        let stem = dir.path().join("clip");
        frames.save(&stem).unwrap();
        let workdir = dir.path().join("work");
        let out = mvfc(
            &[
                "h264-baseline",
                "--input",
                stem.to_str().unwrap(),
                "--crf",
                "40,30",
                "--workdir",
                workdir.to_str().unwrap(),
            ],
            dir.path(),
        );
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(stdout(&out).contains("crf 40"));
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let out = mvfc(
        &[
            "h264-baseline",
            "--input",
            "missing.mp4",
            "--width",
            "64",
            "--height",
            "64",
            "--workdir",
            dir.path().join("w").to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not available"));
}
