use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csa-dpunet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().into_string().unwrap(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn synth_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let out = run(&[
            "synth",
            "--out",
            p(d),
            "--count",
            "8",
            "--size",
            "32",
            "--seed",
            "7",
        ]);
        assert!(out.status.success());
    }
    let files = dir_bytes(&a);
    assert_eq!(files.len(), 17);
    assert_eq!(files, dir_bytes(&b));
    let (_, bytes) = files
        .iter()
        .find(|(name, _)| name == "manifest.json")
        .unwrap();
    let manifest: serde_json::Value = serde_json::from_slice(bytes).unwrap();
    assert_eq!(manifest["count"], 8);
    assert_eq!(manifest["size"], 32);
    assert_eq!(manifest["seed"], 7);
}

#[test]
fn usage_errors_write_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("d");
    let ckpt = tmp.path().join("m.ckpt");
    let cases: Vec<Vec<&str>> = vec![
        vec!["synth", "--out", p(&out_dir), "--blobs", "3..1"],
        vec!["synth", "--out", p(&out_dir), "--count", "-4"],
        vec![
            "train",
            "--data",
            p(&out_dir),
            "--out",
            p(&ckpt),
            "--mode",
            "cosine",
        ],
        vec![
            "train",
            "--data",
            p(&out_dir),
            "--out",
            p(&ckpt),
            "--unknown",
        ],
        vec!["launch"],
    ];
    for args in cases {
        let out = run(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
    }
    assert_eq!(std::fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn domain_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.ckpt");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let img = tmp.path().join("x.pgm");
    std::fs::write(&img, b"P5\n4 4\n255\n0123456789abcdef").unwrap();
    let mask = tmp.path().join("m.pgm");
    let out = run(&[
        "infer",
        "--ckpt",
        p(&bad),
        "--image",
        p(&img),
        "--mask",
        p(&mask),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!mask.exists());

    let out = run(&["synth", "--out", p(&tmp.path().join("s")), "--size", "24"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&[
        "train",
        "--data",
        p(&tmp.path().join("missing")),
        "--out",
        p(&bad),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_eval_infer_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let ckpt = tmp.path().join("m.ckpt");
    let report = tmp.path().join("r.json");
    assert!(run(&[
        "synth",
        "--out",
        p(&data),
        "--count",
        "6",
        "--size",
        "16",
        "--seed",
        "3"
    ])
    .status
    .success());

    let cfg = tmp.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"network": {"base_channels": 4}, "train": {"batch_size": 2}}"#,
    )
    .unwrap();
    let out = run(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&ckpt),
        "--steps",
        "3",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let history = std::fs::read_to_string(tmp.path().join("m.ckpt.history.csv")).unwrap();
    assert_eq!(history.lines().count(), 4);
    assert!(history.starts_with("step,loss,train_dice\n1,"));

    let out = run(&[
        "eval",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&data),
        "--report",
        p(&report),
        "--threshold",
        "0.4",
    ]);
    assert!(out.status.success());
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["network"]["base_channels"], 4);
    assert_eq!(json["threshold"], 0.4);
    assert_eq!(json["per_image"].as_array().unwrap().len(), 6);
    let first = &json["per_image"][0];
    let total: u64 = ["tp", "fp", "fn", "tn"]
        .iter()
        .map(|k| first[k].as_u64().unwrap())
        .sum();
    assert_eq!(total, 256);

    // the predicted mask depends only on checkpoint, image and threshold
    let image = data.join("img_00002.pgm");
    let masks: Vec<Vec<u8>> = ["a.pgm", "b.pgm"]
        .iter()
        .map(|name| {
            let m = tmp.path().join(name);
            assert!(run(&[
                "infer",
                "--ckpt",
                p(&ckpt),
                "--image",
                p(&image),
                "--mask",
                p(&m)
            ])
            .status
            .success());
            std::fs::read(m).unwrap()
        })
        .collect();
    assert_eq!(masks[0], masks[1]);
    assert!(masks[0].starts_with(b"P5\n16 16\n255\n"));
    assert!(masks[0][13..].iter().all(|&v| v == 0 || v == 255));
}

#[test]
fn gradcheck_single_op() {
    let out = run(&["gradcheck", "--op", "conv2d", "--seed", "1"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| l.starts_with("conv2d ")).collect();
    assert!(!rows.is_empty());
    for row in rows {
        let rel: f64 = row.split_whitespace().nth(2).unwrap().parse().unwrap();
        assert!(rel < 1e-4, "{row}");
        assert!(row.ends_with("ok"));
    }
}

#[test]
fn bench_without_full_leaves_timing_blank() {
    let out = run(&[
        "bench-attention",
        "--h",
        "16",
        "--w",
        "8",
        "--d",
        "4",
        "--mode",
        "dot",
    ]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("h,w,d,mode,cc_elems,full_elems,ratio,cc_ms,full_ms")
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&row[..6], &["16", "8", "4", "dot", "2944", "16384"]);
    assert_eq!(row[8], "");
}
