use std::path::Path;
use std::process::{Command, Output};

use forgemask::imagecore::{write_png, ImageBuffer};
use forgemask::semanticmask::{extract_features_builtin, store_feature_file, EditMask};
use forgemask::synth::{synthetic_edit_pair, EditSpec};

fn forgemask(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_forgemask"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> serde_json::Value {
    let out = forgemask(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap_or(serde_json::Value::Null)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn align_then_annotate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let pair = synthetic_edit_pair(320, 320, 42, &EditSpec::default()).unwrap();
    write_png(&pair.original, &d.join("o.png")).unwrap();
    write_png(&pair.edited, &d.join("e.png")).unwrap();

    let stats = ok(&[
        "align",
        "--original",
        s(&d.join("o.png")),
        "--edited",
        s(&d.join("e.png")),
        "--out-dir",
        s(&d.join("aligned")),
        "--seed",
        "3",
    ]);
    assert!(stats["inlier_ratio"].as_f64().unwrap() >= 0.6);
    assert_eq!(stats["refined"].as_array().unwrap().len(), 6);
    let (ao, ae) = (
        d.join("aligned/original_aligned.png"),
        d.join("aligned/edited_aligned.png"),
    );

    let mask_stats = ok(&[
        "annotate",
        "--original",
        s(&ao),
        "--edited",
        s(&ae),
        "--builtin-features",
        "--mask-out",
        s(&d.join("mask.png")),
    ]);
    assert_eq!(mask_stats["feature_source"], "builtin:patch16");
    let mask = EditMask::read_png(&d.join("mask.png")).unwrap();
    assert_eq!((mask.width(), mask.height()), (128, 128));
    assert!(mask.count_edited() > 0);

    // Precomputed FMAP features drive the same path.
    let load = |p: &Path| forgemask::imagecore::read_image(p).unwrap();
    let (fa, fb) = (d.join("a.fmap"), d.join("b.fmap"));
    store_feature_file(&extract_features_builtin(&load(&ao), 16).unwrap(), &fa).unwrap();
    store_feature_file(&extract_features_builtin(&load(&ae), 16).unwrap(), &fb).unwrap();
    ok(&[
        "annotate",
        "--original",
        s(&ao),
        "--edited",
        s(&ae),
        "--features-a",
        s(&fa),
        "--features-b",
        s(&fb),
        "--mask-out",
        s(&d.join("mask_fmap.png")),
    ]);
    assert_eq!(EditMask::read_png(&d.join("mask_fmap.png")).unwrap(), mask);

    // Loss on the edited features against the derived mask.
    let perfect = d.join("pred.png");
    mask.write_png(&perfect).unwrap();
    let losses = ok(&[
        "loss",
        "--features",
        s(&fb),
        "--mask",
        s(&d.join("mask.png")),
        "--pred",
        s(&perfect),
    ]);
    assert!(losses["contrastive"].as_f64().unwrap().is_finite());
    assert!(losses["dice"].as_f64().unwrap().abs() < 1e-12);
    assert!(losses["focal"].as_f64().unwrap() < 1e-6);
    let without_pred = ok(&[
        "loss",
        "--features",
        s(&fb),
        "--mask",
        s(&d.join("mask.png")),
    ]);
    assert!(without_pred["dice"].is_null());
}

#[test]
fn eval_scores_directories() {
    let dir = tempfile::tempdir().unwrap();
    let (truth, pred) = (dir.path().join("truth"), dir.path().join("pred"));
    std::fs::create_dir_all(&truth).unwrap();
    std::fs::create_dir_all(&pred).unwrap();
    let a = EditMask::from_fn(16, 16, |x, _| x < 4).unwrap();
    let b = EditMask::from_fn(16, 16, |x, _| x < 8).unwrap();
    a.write_png(&truth.join("1.png")).unwrap();
    a.write_png(&pred.join("1.png")).unwrap();
    a.write_png(&truth.join("2.png")).unwrap();
    b.write_png(&pred.join("2.png")).unwrap();
    a.write_png(&truth.join("3.png")).unwrap();

    let v = ok(&[
        "eval",
        "--pred-dir",
        s(&pred),
        "--truth-dir",
        s(&truth),
        "--aggregate",
        "macro",
    ]);
    assert_eq!(v["aggregate"]["mode"], "macro");
    assert_eq!(v["aggregate"]["n_items"], 2);
    assert!((v["aggregate"]["precision"].as_f64().unwrap() - 0.75).abs() < 1e-12);
    assert_eq!(v["missing_predictions"][0], "3.png");
    let v = ok(&[
        "eval",
        "--pred-dir",
        s(&pred),
        "--truth-dir",
        s(&truth),
        "--aggregate",
        "micro",
    ]);
    assert!((v["aggregate"]["precision"].as_f64().unwrap() - 128.0 / 192.0).abs() < 1e-12);
}

#[test]
fn build_records_failures_and_profiles() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&[
        "synth",
        "--out",
        s(&d.join("data")),
        "--count",
        "3",
        "--size",
        "256",
    ]);
    let listing = d.join("data/listing.csv");
    let mut text = std::fs::read_to_string(&listing).unwrap();
    text.push_str("gone,missing_o.png,missing_e.png,remove_object\n");
    std::fs::write(&listing, text).unwrap();

    let out = forgemask(&[
        "build",
        "--listing",
        s(&listing),
        "--out",
        s(&d.join("out")),
        "--workers",
        "2",
    ]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("failed:io"), "{stdout}");
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("out/summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["summary"]["total"], 4);
    assert_eq!(summary["summary"]["by_task"]["remove_object"]["failed"], 1);

    let out = forgemask(&["profile", "--manifest", s(&d.join("out/manifest.jsonl"))]);
    let text = String::from_utf8_lossy(&out.stdout);
    for stage in ["alignment", "features", "similarity", "io"] {
        assert!(text.contains(stage), "{text}");
    }
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = forgemask(&[
        "build",
        "--listing",
        s(&d.join("nope.csv")),
        "--out",
        s(&d.join("o")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("forgemask:"));

    let flat = d.join("flat.png");
    write_png(
        &ImageBuffer::filled(64, 64, forgemask::imagecore::Channels::Gray, 7).unwrap(),
        &flat,
    )
    .unwrap();
    let out = forgemask(&[
        "align",
        "--original",
        s(&flat),
        "--edited",
        s(&flat),
        "--out-dir",
        s(&d.join("a")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("detection"));

    let out = forgemask(&[
        "build",
        "--listing",
        s(&flat),
        "--out",
        s(&d.join("o")),
        "--features",
        "dino",
    ]);
    assert!(!out.status.success());
}
