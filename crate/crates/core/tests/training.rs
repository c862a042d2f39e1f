use rectisplat::deform::FrameAttributes;
use rectisplat::loss::{frame_loss, ViewRole, ViewSample};
use rectisplat::model::Carry;
use rectisplat::render::render;
use rectisplat::scene::{gen_scene, Dataset, Keyframe, Primitive, RigSpec, SceneSpec, Shape};
use rectisplat::train::{count_variance, init_from_masks, train, Ablation, TrainConfig, Trainer};
use rectisplat::Error;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_spec(frames: usize) -> SceneSpec {
    let mut spec = SceneSpec::sudden_appearance();
    spec.frames = frames;
    spec.rig = RigSpec { width: 32, height: 32, focal: 44.0, ..Default::default() };
    spec.supersample = 1;
    for p in &mut spec.primitives {
        for k in &mut p.keyframes {
            k.frame = k.frame.min((frames - 1) as f64);
        }
        if let Some(t0) = p.appears_at {
            p.appears_at = Some(t0.min(frames - 1));
        }
    }
    spec
}

fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        static_steps: 30,
        dynamic_steps: 12,
        init_points: 150,
        anchors_per_frame: 2,
        clip_len: 2,
        static_densify_until: 30,
        densify_until: 12,
        log_every: 0,
        ..Default::default()
    };
    cfg.static_density.warmup = 10;
    cfg.static_density.interval = 10;
    cfg.density.warmup = 3;
    cfg.density.interval = 4;
    cfg.deform.hidden = 16;
    cfg.rectifier.hidden = 8;
    cfg
}

fn static_loss(ds: &Dataset, cfg: &TrainConfig, attrs: &FrameAttributes) -> f64 {
    let cams = ds.training_cameras();
    let renders: Vec<_> = cams.iter().map(|&c| render(attrs, &ds.cameras[c].camera, &cfg.render).unwrap().0).collect();
    let samples: Vec<_> = cams
        .iter()
        .zip(&renders)
        .map(|(&c, out)| ViewSample {
            role: ds.cameras[c].role,
            rgb: &out.rgb,
            alpha: &out.alpha,
            target_rgb: &ds.views[c][0].rgb,
            target_mask: &ds.views[c][0].mask,
        })
        .collect();
    frame_loss(&samples, &cfg.weights, 1.0).0.total
}

#[test]
fn config_parses_flat_and_dotted_keys() {
    let cfg = TrainConfig::from_toml("static_steps = 7\nclip_len = 3\ndensity.lambda = 0.05\n[rectifier]\nhidden = 4\n").unwrap();
    assert_eq!(cfg.static_steps, 7);
    assert_eq!(cfg.clip_len, 3);
    assert_eq!(cfg.density.lambda, 0.05);
    assert_eq!(cfg.rectifier.hidden, 4);
    assert_eq!(cfg.dynamic_steps, TrainConfig::default().dynamic_steps);
    assert!(matches!(TrainConfig::from_toml("no_such_key = 1"), Err(Error::Config(_))));
    assert!(TrainConfig::from_toml("clip_len = 0").is_err());
    assert_eq!("spatial".parse::<Ablation>().unwrap(), Ablation::Spatial);
    assert!("sideways".parse::<Ablation>().is_err());
}

#[test]
fn learning_rate_schedule_endpoints() {
    let cfg = TrainConfig::default();
    let s = cfg.schedule();
    assert_eq!(s.at(0), 1.6e-4);
    assert_eq!(s.at(cfg.total_steps()), 1.6e-6);
    let mut last = f64::INFINITY;
    for step in (0..=cfg.total_steps()).step_by(97) {
        assert!(s.at(step) <= last);
        last = s.at(step);
    }
}

#[test]
fn zero_steps_return_the_initialization() {
    let ds = gen_scene(&tiny_spec(3), 0).unwrap();
    let mut cfg = tiny_config();
    cfg.static_steps = 0;
    cfg.dynamic_steps = 0;
    let out = train(&ds, &cfg, 5, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let init = init_from_masks(&ds, &cfg, &mut rng).unwrap();
    assert_eq!(out.model.cloud, init);
    assert!(out.progress.is_empty());
    assert_eq!(out.model.counts(), vec![init.len(); 3]);
}

#[test]
fn single_frame_dynamic_start_matches_static_result() {
    let ds = gen_scene(&tiny_spec(1), 0).unwrap();
    let cfg = tiny_config();
    let mut trainer = Trainer::new(&ds, cfg.clone(), 1).unwrap();
    trainer.train_static(None).unwrap();
    let model = &trainer.model;
    let canonical = FrameAttributes::from_cloud(&model.cloud, 0);
    let pass = model.forward_frame(0, 0.0, &Carry::new(model)).unwrap();
    let a = static_loss(&ds, &cfg, &canonical);
    let b = static_loss(&ds, &cfg, &pass.attrs);
    assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
}

#[test]
fn fixed_seed_training_is_bit_identical() {
    let ds = gen_scene(&tiny_spec(4), 0).unwrap();
    let cfg = tiny_config();
    let bytes = |seed| {
        let out = train(&ds, &cfg, seed, None).unwrap();
        out.checkpoint_bytes().unwrap()
    };
    let a = bytes(3);
    assert_eq!(a, bytes(3));
    assert_ne!(a, bytes(4));
}

#[test]
fn ablation_grid_runs_and_spatial_switch_controls_count_variance() {
    let ds = gen_scene(&tiny_spec(4), 0).unwrap();
    for ablation in [Ablation::None, Ablation::Temporal, Ablation::Spatial, Ablation::Both] {
        let cfg = tiny_config().with_ablation(ablation);
        let out = train(&ds, &cfg, 2, None).unwrap();
        out.model.ledger.check(&out.model.cloud).unwrap();
        let var = count_variance(&out.model.counts());
        if cfg.spatial {
            assert!(var > 0.0, "{ablation:?}: counts {:?}", out.model.counts());
        } else {
            assert_eq!(var, 0.0, "{ablation:?}");
        }
        assert_eq!(out.model.temporal, cfg.temporal);
    }
}

#[test]
fn disabled_rectifier_and_density_leave_rectifier_untouched() {
    let ds = gen_scene(&tiny_spec(3), 0).unwrap();
    let cfg = tiny_config().with_ablation(Ablation::Both);
    let mut trainer = Trainer::new(&ds, cfg, 0).unwrap();
    let before = trainer.model.rectifier.clone();
    trainer.train_static(None).unwrap();
    trainer.train_dynamic(None).unwrap();
    assert_eq!(trainer.model.rectifier, before);
}

#[test]
fn loss_trends_down_on_the_shipped_scene() {
    let mut spec = SceneSpec::sudden_appearance();
    spec.rig = RigSpec { width: 40, height: 40, focal: 55.0, ..Default::default() };
    spec.supersample = 1;
    let ds = gen_scene(&spec, 0).unwrap();
    let mut cfg = tiny_config();
    cfg.static_steps = 600;
    cfg.dynamic_steps = 500;
    cfg.anchors_per_frame = 1;
    cfg.clip_len = 2;
    cfg.init_points = 200;
    cfg.static_densify_until = 400;
    cfg.densify_until = 300;
    cfg.static_density.warmup = 100;
    cfg.static_density.interval = 100;
    cfg.density.warmup = 100;
    cfg.density.interval = 100;
    let out = train(&ds, &cfg, 0, None).unwrap();
    let median = |rows: &[&rectisplat::train::ProgressRow]| {
        let mut v: Vec<f64> = rows.iter().map(|r| r.total).collect();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    // Stages weight different numbers of views, so each is compared with itself.
    for stage in ["static", "dynamic"] {
        let rows: Vec<_> = out.progress.iter().filter(|r| r.stage == stage).collect();
        let first = median(&rows[..100]);
        let last = median(&rows[rows.len() - 100..]);
        assert!(first > last, "{stage}: median loss {first} -> {last}");
    }
}

#[test]
fn scene_without_primitives_is_rejected() {
    let mut spec = tiny_spec(2);
    spec.primitives.clear();
    assert!(gen_scene(&spec, 0).is_err());
    let mut spec = tiny_spec(2);
    spec.primitives = vec![Primitive {
        shape: Shape::Sphere { radius: 0.01 },
        color: [1.0; 3],
        keyframes: vec![Keyframe { frame: 0.0, position: [5.0, 5.0, 5.0] }],
        appears_at: None,
    }];
    let ds = gen_scene(&spec, 0).unwrap();
    // Nothing is visible, so the visual hull is empty.
    assert!(Trainer::new(&ds, tiny_config(), 0).is_err());
    assert_eq!(ds.indices_with_role(ViewRole::Reference), vec![0]);
}
