use std::path::Path;
use std::process::{Command, Output};

use rectisplat::scene::{RigSpec, SceneSpec};

fn run(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_rectisplat")).args(args).env("RUST_LOG", "warn").output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn small_spec(dir: &Path) -> String {
    let mut spec = SceneSpec::sudden_appearance();
    spec.frames = 3;
    spec.rig = RigSpec { width: 24, height: 24, focal: 33.0, ..Default::default() };
    spec.supersample = 1;
    for p in &mut spec.primitives {
        for k in &mut p.keyframes {
            k.frame = k.frame.min(2.0);
        }
        if p.appears_at.is_some() {
            p.appears_at = Some(2);
        }
    }
    let path = dir.join("spec.json");
    std::fs::write(&path, serde_json::to_string(&spec).unwrap()).unwrap();
    path.to_str().unwrap().to_owned()
}

const CONFIG: &str = "\
static_steps = 20
dynamic_steps = 8
init_points = 80
clip_len = 2
anchors_per_frame = 1
static_densify_until = 20
densify_until = 8
log_every = 0
static_density.warmup = 5
static_density.interval = 5
density.warmup = 2
density.interval = 3
deform.hidden = 8
rectifier.hidden = 4
";

#[test]
fn end_to_end_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let p = |name: &str| d.join(name).to_str().unwrap().to_owned();
    let spec = small_spec(d);
    std::fs::write(d.join("train.toml"), CONFIG).unwrap();

    run(&["gen-scene", "--out", &p("scene"), "--spec", &spec, "--seed", "1"]);
    assert!(d.join("scene/manifest.json").exists());
    assert!(d.join("scene/cameras.json").exists());

    run(&["train", "--scene", &p("scene"), "--out", &p("model.g4ds"), "--config", &p("train.toml"), "--seed", "2"]);
    let progress = std::fs::read_to_string(d.join("model.g4ds.progress.csv")).unwrap();
    assert!(progress.starts_with("stage,step,"));
    assert_eq!(progress.lines().count(), 1 + 20 + 8);

    // Same seed twice gives an identical checkpoint.
    run(&["train", "--scene", &p("scene"), "--out", &p("again.g4ds"), "--config", &p("train.toml"), "--seed", "2"]);
    assert_eq!(std::fs::read(d.join("model.g4ds")).unwrap(), std::fs::read(d.join("again.g4ds")).unwrap());

    run(&[
        "render", "--checkpoint", &p("model.g4ds"), "--cameras", &p("scene/cameras.json"), "--times", "0,1", "--out",
        &p("renders"), "--f32",
    ]);
    assert!(d.join("renders/cam0_t0.0000.png").exists());
    assert!(d.join("renders/cam0_t1.0000.alpha.f32").exists());

    let density = run(&["inspect-density", "--checkpoint", &p("model.g4ds")]);
    let text = String::from_utf8(density.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,frame,count,tau,densified,pruned"));
    // Final per-frame counts carry no threshold.
    let finals = text.lines().filter(|l| l.split(',').nth(3) == Some("")).count();
    assert_eq!(finals, 3, "{text}");

    let eval = run(&[
        "eval", "--checkpoint", &p("model.g4ds"), "--scene", &p("scene"), "--csv", &p("eval.csv"), "--strips",
        &p("strips"),
    ]);
    let summary: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert!(summary["psnr"].as_f64().unwrap() > 0.0);
    assert_eq!(summary["frames"], 3);
    assert!(d.join("strips/frame0002.png").exists());
    let csv = std::fs::read_to_string(d.join("eval.csv")).unwrap();
    assert!(csv.starts_with("frame,camera,psnr,ssim,count"));
}

#[test]
fn bad_inputs_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.g4ds");
    let out = Command::new(env!("CARGO_BIN_EXE_rectisplat"))
        .args(["inspect-density", "--checkpoint", missing.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());

    let garbage = tmp.path().join("garbage.g4ds");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_rectisplat"))
        .args(["inspect-density", "--checkpoint", garbage.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Error"));

    let out = Command::new(env!("CARGO_BIN_EXE_rectisplat")).args(["train", "--ablate", "sideways"]).output().unwrap();
    assert!(!out.status.success());
}
