use std::path::Path;
use std::process::{Command, Output};

fn nfseg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nfseg"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

const TINY: &str = r#"
[model]
strategy = "concat"
code_source = "combined"
hidden = 16

[training]
batch_size = 2
points = 64
max_epochs = 1

[data]
train_count = 4
val_count = 2
test_count = 2
"#;

#[test]
fn generate_train_evaluate_predict() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&nfseg(&["generate-data", "--seed", "2", "--count", "3", "--size", "64", "--out", "tiles"], d));
    assert!(d.join("tiles/images/scene_0002.png").exists());
    assert!(d.join("tiles/labels/scene_0002.png").exists());

    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    ok(&nfseg(&["train", "--config", "tiny.toml", "--out", "m.ckpt", "--seed", "5", "--lr=2e-4"], d));
    let log = std::fs::read_to_string(d.join("m.csv")).unwrap();
    assert!(log.starts_with("step,epoch,loss,val_aggregate_iou\n"), "{log}");
    assert_eq!(log.lines().count(), 1 + 2);

    let csv = ok(&nfseg(&["evaluate", "--ckpt", "m.ckpt", "--split", "val"], d));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("seed,params,runtime_s,aggregate_iou"));
    assert!(lines[1].starts_with("5,"), "{}", lines[1]);

    ok(&nfseg(
        &["predict", "--ckpt", "m.ckpt", "--image", "tiles/images/scene_0000.png", "--out", "pred.png"],
        d,
    ));
    let mask = image::open(d.join("pred.png")).unwrap().to_rgb8();
    assert_eq!(mask.dimensions(), (64, 64));
    assert!(mask.pixels().all(|p| nfseg::data::color_class(p.0).is_some()));
}

#[test]
fn compare_prints_a_table_and_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    let table = ok(&nfseg(
        &[
            "compare",
            "--config",
            "tiny.toml",
            "--seeds",
            "0,1",
            "--out",
            "cmp.csv",
            "--sizes",
            "[64]",
            "--strategies",
            r#"["concat:global", "cross_attention:tokens"]"#,
        ],
        d,
    ));
    assert!(table.contains("Cross-Attention"), "{table}");
    let csv = std::fs::read_to_string(d.join("cmp.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 + 2);
}

#[test]
fn bad_overrides_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = nfseg(&["train", "--out", "m.ckpt", "--no-such-key", "1"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
    let out = nfseg(&["train", "--out", "m.ckpt", "--lr"], d);
    assert!(!out.status.success());
}

#[test]
fn gradcheck_reports_every_kernel() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&nfseg(&["gradcheck", "--cases", "2"], dir.path()));
    for name in ["linear", "conv2d", "batch_norm", "layer_norm", "multi_head_attention", "softmax_cross_entropy"] {
        assert!(text.contains(name), "{text}");
    }
    assert_eq!(text.lines().filter(|l| l.starts_with("ok")).count(), 13, "{text}");
}
