use std::path::Path;
use std::process::{Command, Output};

use freqdis::io::{load_image, save_image, Depth};
use freqdis::Tensor;
use sha2::{Digest, Sha256};

fn freqdis(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_freqdis"))
        .args(args)
        .env_remove("FREQDIS_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = freqdis(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn digest(path: &Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = r#"{
  "acca_epochs": 2, "acca_batch": 2, "ldrm_iters": 4, "ldrm_batch": 2,
  "levels": 3, "crop": 16,
  "acca": { "wcca": { "channels": 8, "window": 8 }, "global_size": 8, "global_widths": [4, 4, 4] },
  "ldrm": { "width": 8, "blocks": 1 }
}"#;

#[test]
fn config_dump_has_explicit_defaults() {
    let text = ok(&["config", "--dump"]);
    assert!(text.contains("\"levels\": 4"));
    assert!(text.contains("\"alpha\": 1.0"));
    assert!(text.contains("\"window\": 8"));
    assert!(text.contains("\"backbone\": \"reference\""));
    assert!(text.contains("\"codec_mode\": \"exact\""));
}

#[test]
fn exit_codes() {
    let out = freqdis(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"levles": 4}"#).unwrap();
    assert_eq!(
        freqdis(&["config", "--check", p(&bad)]).status.code(),
        Some(2)
    );

    let missing = dir.path().join("missing.png");
    let out = freqdis(&[
        "decompose",
        "--input",
        p(&missing),
        "--out-dir",
        p(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.png"));
}

#[test]
fn bench_prints_counts() {
    let text = ok(&["bench", "wcca", "--h", "64", "--w", "64"]);
    assert!(text.contains("analytic  524288"), "{text}");
    let text = ok(&["bench", "params"]);
    let acca: usize = text
        .lines()
        .find_map(|l| l.strip_prefix("acca params "))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!((60_000..=120_000).contains(&acca));
}

#[test]
fn decompose_then_reconstruct() {
    let dir = tempfile::tempdir().unwrap();
    let img = freqdis::evalkit::clean_image(3, 0, 32);
    let input = dir.path().join("in.png");
    save_image(&img, &input, Depth::Sixteen).unwrap();
    let before = digest(&input);
    let bands = dir.path().join("bands");
    ok(&[
        "decompose",
        "--input",
        p(&input),
        "--levels",
        "4",
        "--out-dir",
        p(&bands),
    ]);
    for k in 1..=4 {
        assert!(bands.join(format!("band_{k}.f32")).is_file());
        assert!(bands.join(format!("band_{k}.png")).is_file());
    }
    assert_eq!(
        std::fs::metadata(bands.join("band_2.f32")).unwrap().len(),
        (3 * 16 * 16 * 4) as u64
    );
    let out = dir.path().join("out.png");
    ok(&["reconstruct", "--in-dir", p(&bands), "--output", p(&out)]);
    let back = load_image(&out).unwrap();
    let orig = load_image(&input).unwrap();
    assert!(back.max_abs_diff(&orig).unwrap() <= 0.5 / 255.0 + 1e-6);
    assert_eq!(digest(&input), before);
}

#[test]
fn full_workflow_on_a_tiny_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let pairs = d.join("pairs");
    let cfg = d.join("cfg.json");
    std::fs::write(&cfg, TINY).unwrap();
    ok(&[
        "synth",
        "--count",
        "4",
        "--size",
        "24",
        "--seed",
        "3",
        "--out",
        p(&pairs),
    ]);
    assert!(pairs.join("manifest.json").is_file());

    let w = d.join("weights");
    ok(&[
        "train",
        "--phase",
        "acca",
        "--config",
        p(&cfg),
        "--data-dir",
        p(&pairs),
        "--out",
        p(&w),
    ]);
    ok(&[
        "train",
        "--phase",
        "ldrm",
        "--config",
        p(&cfg),
        "--data-dir",
        p(&pairs),
        "--out",
        p(&w),
    ]);
    ok(&[
        "train",
        "--phase",
        "e2e",
        "--config",
        p(&cfg),
        "--data-dir",
        p(&pairs),
        "--out",
        p(&w),
    ]);
    for f in [
        "acca.fdw",
        "ldrm.fdw",
        "acca_e2e.fdw",
        "ldrm_e2e.fdw",
        "config.json",
        "history_acca.csv",
        "history_ldrm.csv",
        "history_e2e.csv",
    ] {
        assert!(w.join(f).is_file(), "{f}");
    }
    let hist = std::fs::read_to_string(w.join("history_ldrm.csv")).unwrap();
    assert!(hist.starts_with("step,l_r,l_i,l_total\n"));
    assert_eq!(hist.lines().count(), 5);
    let report = std::fs::read_to_string(w.join("report_acca.json")).unwrap();
    assert!(report.contains("perceptual"));

    // odd size: padded internally, cropped back
    let img = Tensor::from_fn(&[1, 3, 21, 30], |i| ((i * 37) % 101) as f32 / 300.0);
    let input = d.join("odd.png");
    save_image(&img, &input, Depth::Eight).unwrap();
    let before = digest(&input);
    let out = d.join("odd_out.png");
    let coarse = d.join("odd_coarse.png");
    ok(&[
        "enhance",
        "--input",
        p(&input),
        "--acca",
        p(&w.join("acca.fdw")),
        "--ldrm",
        p(&w.join("ldrm.fdw")),
        "--output",
        p(&out),
        "--coarse-output",
        p(&coarse),
    ]);
    assert_eq!(load_image(&out).unwrap().shape(), &[1, 3, 21, 30]);
    assert_eq!(load_image(&coarse).unwrap().shape(), &[1, 3, 21, 30]);
    let c2 = d.join("odd_coarse2.png");
    ok(&[
        "enhance-coarse",
        "--input",
        p(&input),
        "--weights",
        p(&w.join("acca.fdw")),
        "--output",
        p(&c2),
    ]);
    assert_eq!(load_image(&c2).unwrap().shape(), &[1, 3, 21, 30]);
    assert_eq!(digest(&input), before);

    let csv = d.join("eval.csv");
    let text = ok(&[
        "eval",
        "--pairs",
        p(&pairs),
        "--weights",
        p(&w),
        "--report",
        p(&csv),
    ]);
    assert!(text.contains("PSNR"));
    let rows = std::fs::read_to_string(&csv).unwrap();
    assert!(rows.starts_with("name,psnr,ssim\n"));
    assert_eq!(rows.lines().count(), 6);
    ok(&[
        "eval",
        "--pairs",
        p(&pairs),
        "--weights",
        p(&w),
        "--coarse-only",
    ]);

    // fine phase without coarse weights is a runtime error
    let empty = d.join("empty");
    let out = freqdis(&[
        "train",
        "--phase",
        "ldrm",
        "--config",
        p(&cfg),
        "--data-dir",
        p(&pairs),
        "--out",
        p(&empty),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn single_thread_training_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let pairs = d.join("pairs");
    let cfg = d.join("cfg.json");
    std::fs::write(&cfg, TINY).unwrap();
    ok(&["synth", "--count", "4", "--size", "24", "--out", p(&pairs)]);
    let (a, b) = (d.join("a"), d.join("b"));
    ok(&[
        "train",
        "--phase",
        "acca",
        "--config",
        p(&cfg),
        "--data-dir",
        p(&pairs),
        "--out",
        p(&a),
        "--seed",
        "5",
    ]);
    std::fs::create_dir_all(&b).unwrap();
    std::fs::copy(a.join("acca.fdw"), b.join("acca.fdw")).unwrap();
    for out in [&a, &b] {
        ok(&[
            "--single-thread",
            "train",
            "--phase",
            "ldrm",
            "--config",
            p(&cfg),
            "--data-dir",
            p(&pairs),
            "--out",
            p(out),
            "--seed",
            "5",
        ]);
    }
    assert_eq!(
        std::fs::read(a.join("ldrm.fdw")).unwrap(),
        std::fs::read(b.join("ldrm.fdw")).unwrap()
    );
}

#[test]
fn weight_files_have_the_documented_layout() {
    let mut s = freqdis::weights::WeightStore::<f32>::new();
    s.insert("x", Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap());
    let bytes = s.to_bytes().unwrap();
    let mut want = b"FDLW".to_vec();
    want.extend(1u32.to_le_bytes());
    want.extend(1u32.to_le_bytes());
    want.extend(1u16.to_le_bytes());
    want.push(b'x');
    want.push(1);
    want.extend(2u32.to_le_bytes());
    want.extend(1.0f32.to_le_bytes());
    want.extend((-2.0f32).to_le_bytes());
    assert_eq!(bytes, want);
}
