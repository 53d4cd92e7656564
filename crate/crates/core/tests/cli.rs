use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use edgesynth::eval::MetricReport;

fn edgesynth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edgesynth"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let text = "[dataset]\nheight = 32\nwidth = 32\n\n[model]\nchannels = 8\ndisc_channels = 8\nsimilarity_resolution = 8\n\n[train]\nbatch_size = 2\neval_scenes = 4\n";
    let p = dir.join("tiny.toml");
    fs::write(&p, text).unwrap();
    path(&p).to_string()
}

#[test]
fn generate_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = edgesynth(&["generate", "--config", &cfg, "--seed", "3", "--out", path(out), "--dump-class-channels"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let mut names: Vec<String> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    for panel in ["layout.png", "edge.png", "attention.png", "image_prime.png", "image_dprime.png", "class_image.png"] {
        assert!(names.iter().any(|n| n == panel), "missing {panel}");
    }
    assert_eq!(names.iter().filter(|n| n.starts_with("class_map_class")).count(), 5);
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n} differs");
    }
}

#[test]
fn train_then_eval_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    let o = edgesynth(&["train", "--config", &cfg, "--steps", "2", "--out", path(&run), "--ablation", "b8"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(run.join("train.tsv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.starts_with("step\ttotal\td_loss"));

    let ckpt = run.join("checkpoint.ckpt");
    let out = dir.path().join("eval");
    let o = edgesynth(&["eval", "--checkpoint", path(&ckpt), "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let printed = MetricReport::from_text(&String::from_utf8(o.stdout).unwrap()).unwrap();
    let written = MetricReport::from_text(&fs::read_to_string(out.join("metrics.txt")).unwrap()).unwrap();
    assert_eq!(printed, written);
    assert_eq!(written.step, 2);
    assert!((0.0..=1.0).contains(&written.mean_iou));
    assert_eq!(fs::read_to_string(out.join("classes.tsv")).unwrap().lines().count(), 6);

    let more = dir.path().join("more");
    let o = edgesynth(&["train", "--checkpoint", path(&ckpt), "--steps", "3", "--out", path(&more)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(more.join("train.tsv")).unwrap().lines().count(), 2);
}

#[test]
fn gradcheck_prints_every_loss_and_succeeds() {
    let o = edgesynth(&["gradcheck", "--seeds", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS gradient:")).count(), 14);
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let o = edgesynth(&["train", "--ablation", "B9", "--steps", "1"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("B9"));
    let o = edgesynth(&["eval", "--checkpoint", "/nonexistent/checkpoint.ckpt"]);
    assert!(!o.status.success());
    assert!(!o.stderr.is_empty());
}
