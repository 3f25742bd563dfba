use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ps2kit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ps2kit"))
        .args(args)
        .env("PS2KIT_DETERMINISTIC", "1")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn images(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_str().unwrap().starts_with("img_"))
        .collect();
    v.sort();
    v
}

fn render(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["render-synth", "--res", "32", "--out", s(out)];
    args.extend_from_slice(extra);
    ps2kit(&args)
}

#[test]
fn render_synth_writes_a_deterministic_scene() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for dir in [&a, &b] {
        let o = render(dir, &["--seed", "7", "--shape", "heightfield"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(images(&a).len(), 25);
    let lights = std::fs::read_to_string(a.join("lights.txt")).unwrap();
    assert_eq!(lights.lines().count(), 25);
    for (x, y) in images(&a).iter().zip(images(&b)) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "render-synth");
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["deterministic"], true);

    assert_eq!(code(&render(&c, &["--seed", "7", "--shape", "heightfield", "--noise", "0.05"])), 0);
    let differ = images(&a).iter().zip(images(&c)).any(|(x, y)| std::fs::read(x).unwrap() != std::fs::read(y).unwrap());
    assert!(differ, "noise left every image unchanged");
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    assert_eq!(code(&render(&scene, &[])), 0);
    let out = tmp.path().join("out");
    let train = |extra: &[&str]| {
        let mut args = vec!["train", "--data", s(&scene), "--out", s(&out), "--epochs", "1"];
        args.extend_from_slice(extra);
        code(&ps2kit(&args))
    };
    assert_eq!(train(&["--no-le"]), 2);
    assert_eq!(train(&["--no-ir", "--no-le"]), 2);
    assert_eq!(train(&["--mode", "calibrated"]), 2);
    assert_eq!(train(&["--lr", "-1"]), 2);
    assert_eq!(code(&ps2kit(&["render-synth", "--out", s(&out), "--ks", "-1"])), 2);
    assert_eq!(code(&ps2kit(&["render-synth"])), 2);
    assert_eq!(code(&ps2kit(&["bogus"])), 2);
    let relight = |r: &str, c: &str| {
        let args = ["relight", "--checkpoint", "x.ckpt", "--image", "i.png", "--mask", "m.png", "--out", s(&out), "--target-bin", r, c];
        code(&ps2kit(&args))
    };
    assert_eq!(relight("5", "0"), 2);
    assert_eq!(relight("0", "-1"), 2);
    // a well-formed request for a missing checkpoint is a runtime failure
    assert_eq!(relight("2", "2"), 1);
    let missing = tmp.path().join("missing");
    assert_eq!(code(&ps2kit(&["train", "--data", s(&missing), "--out", s(&out)])), 1);
}

#[test]
fn train_eval_infer_and_relight() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    assert_eq!(code(&render(&scene, &["--seed", "3"])), 0);
    let run = tmp.path().join("run");
    let cfg = tmp.path().join("train.cfg");
    std::fs::write(&cfg, "# small run\nbatch = 2\nwidth_div = 16\niters_per_epoch = 2\nepochs = 5\nwarmup_iters = 2\n").unwrap();
    let o = ps2kit(&["train", "--config", s(&cfg), "--epochs", "3", "--data", s(&scene), "--out", s(&run)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ckpts = std::fs::read_dir(run.join("checkpoints")).unwrap().filter(|e| e.as_ref().unwrap().file_name() != "last.ckpt").count();
    assert_eq!(ckpts, 3, "command line overrides the config file's epochs");
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 6);
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    for key in ["iter", "epoch", "lr", "loss_total", "loss_recon", "loss_relight"] {
        assert!(first.get(key).is_some(), "metrics line lacks {key}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_file"]["batch"], "2");
    assert!(manifest["inputs"].as_object().unwrap().keys().any(|k| k.ends_with("lights.txt")));

    let ckpt = run.join("checkpoints").join("last.ckpt");
    let eval = tmp.path().join("eval");
    let o = ps2kit(&["eval", "--checkpoint", s(&ckpt), "--data", s(&scene), "--pairs", "2", "--out", s(&eval)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(eval.join("report.json")).unwrap()).unwrap();
    assert!(report[0]["mae_mean"].as_f64().unwrap() >= 0.0);
    assert!(report[0]["ssim_recon"].as_f64().is_some());

    let infer = tmp.path().join("infer");
    let (i1, i2, mask) = (scene.join("img_012.png"), scene.join("img_003.png"), scene.join("mask.png"));
    let o = ps2kit(&["infer", "--checkpoint", s(&ckpt), "--first", s(&i1), "--second", s(&i2), "--mask", s(&mask), "--out", s(&infer)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(infer.join("normals.f32")).unwrap().len(), 32 * 32 * 3 * 4);
    assert!(infer.join("normals.png").is_file() && infer.join("albedo_1.png").is_file());

    let relit = tmp.path().join("relit");
    let o = ps2kit(&["relight", "--checkpoint", s(&ckpt), "--image", s(&i1), "--mask", s(&mask), "--target-bin", "2", "2", "--out", s(&relit)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(relit.join("relit.png").is_file() && relit.join("manifest.json").is_file());
}

#[test]
fn warmup_subcommand_writes_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    assert_eq!(code(&render(&scene, &[])), 0);
    let out = tmp.path().join("warm");
    let o = ps2kit(&[
        "warmup", "--data", s(&scene), "--out", s(&out), "--width-div", "16", "--batch", "2", "--warmup-iters", "3", "--epochs", "1",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("warmup.ckpt").is_file());
    assert_eq!(std::fs::read_to_string(out.join("metrics.jsonl")).unwrap().lines().count(), 3);
}
