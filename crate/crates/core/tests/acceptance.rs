//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero when
//! any criterion fails.

mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rectisplat::deform::{DeformConfig, DeformationNet, FrameAttributes};
use rectisplat::density::{align_correspondence, top_count, DensityConfig, DensityLedger};
use rectisplat::eval::eval_run;
use rectisplat::gaussian::{Gaussian, GaussianCloud};
use rectisplat::loss::ViewRole;
use rectisplat::rectifier::{RectifiedFrame, RectifierConfig, TemporalBuffer, TemporalRectifier, FEATURE_WIDTH};
use rectisplat::scene::{gen_scene, Dataset, SceneSpec};
use rectisplat::ssm::{scan_log_depth, scan_sequential, ScanMode, SelectiveSsm, SsmConfig};
use rectisplat::train::{count_variance, train, Ablation, TrainConfig};

type Outcome = Result<String, String>;

fn random_cloud(rng: &mut impl Rng, n: usize) -> GaussianCloud {
    GaussianCloud::from_points(
        (0..n)
            .map(|_| {
                Gaussian::new(
                    std::array::from_fn(|_| rng.gen_range(-1.0..1.0)),
                    std::array::from_fn(|_| rng.gen_range(0.005..0.08)),
                    common::random_rotation(rng),
                    rng.gen_range(0.05..0.95),
                    std::array::from_fn(|_| rng.gen_range(0.0..1.0)),
                )
                .unwrap()
            })
            .collect(),
    )
}

fn bits(a: &FrameAttributes) -> Vec<u64> {
    common::flatten_attrs(a).iter().map(|v| v.to_bits()).collect()
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let mut checked = 0;
    for seed in 0..10 {
        checked += common::render_gradient_check(seed, 8)?;
        checked += common::deform_gradient_check(seed)?;
        checked += common::rectifier_gradient_check(seed)?;
    }
    let elapsed = start.elapsed();
    if elapsed > Duration::from_secs(300) {
        return Err(format!("suite took {elapsed:.1?}"));
    }
    Ok(format!("{checked} coordinates over 10 seeds x 3 components in {elapsed:.1?}"))
}

fn ssm_equivalence() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = FEATURE_WIDTH * 16;
        for len in 1..=32 {
            let a: Vec<f64> = (0..len * width).map(|_| rng.gen_range(0.0..1.0)).collect();
            let b: Vec<f64> = (0..len * width).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let seq = scan_sequential(&a, &b, width);
            let fast = scan_log_depth(&a, &b, width);
            worst = seq.iter().zip(&fast).fold(worst, |m, (x, y)| m.max((x - y).abs()));

            let mut layer = SelectiveSsm::new(SsmConfig { scan: ScanMode::Sequential, ..Default::default() }, seed);
            layer.params.iter_mut().for_each(|p| *p += rng.gen_range(-0.2..0.2));
            let xs: Vec<f64> = (0..len * FEATURE_WIDTH).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (y_seq, _) = layer.forward(&xs).map_err(|e| e.to_string())?;
            layer.config.scan = ScanMode::LogDepth;
            let (y_fast, _) = layer.forward(&xs).map_err(|e| e.to_string())?;
            worst = y_seq.iter().zip(&y_fast).fold(worst, |m, (x, y)| m.max((x - y).abs()));
        }
    }
    if worst <= 1e-5 {
        Ok(format!("max deviation {worst:.2e} over lengths 1-32, 10 seeds"))
    } else {
        Err(format!("max deviation {worst:.2e}"))
    }
}

fn ledger_with_gradients(n: usize, grads: &[f64]) -> (GaussianCloud, DensityLedger) {
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    let cloud = random_cloud(&mut rng, n);
    let mut ledger = DensityLedger::new(&cloud, 1).unwrap();
    let lineages: Vec<_> = cloud.points.iter().map(|p| p.lineage).collect();
    let g: Vec<[f64; 2]> = grads.iter().map(|&v| [v, 0.0]).collect();
    ledger.accumulate(0, &lineages, &g).unwrap();
    (cloud, ledger)
}

fn quantile_contract() -> Outcome {
    let lambda = 0.025;
    let mut report = Vec::new();
    for n in [40usize, 1000, 4001] {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64 + 7);
        let mut grads: Vec<f64> = (0..n).map(|i| 1e-4 * (i + 1) as f64).collect();
        for i in (1..n).rev() {
            grads.swap(i, rng.gen_range(0..=i));
        }
        let (_, ledger) = ledger_with_gradients(n, &grads);
        let tau = ledger.densify_threshold(0, lambda).map_err(|e| e.to_string())?;
        let got = ledger.select(0, tau).len();
        let want = (0.025 * n as f64).ceil() as usize;
        if got != want || top_count(n, lambda) != want {
            return Err(format!("n={n}: selected {got}, expected {want}"));
        }
        report.push(format!("n={n}->{got}"));
    }
    let (_, ledger) = ledger_with_gradients(200, &[3e-3; 200]);
    let tau = ledger.densify_threshold(0, lambda).map_err(|e| e.to_string())?;
    let ties = ledger.select(0, tau).len();
    if ties != 200 {
        return Err(format!("tie case selected {ties} of 200"));
    }
    Ok(format!("{}, ties select all 200", report.join(" ")))
}

fn prune_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut cloud = random_cloud(&mut rng, 1000);
    for p in &mut cloud.points {
        p.opacity_logit = rng.gen_range(-7.0..3.0);
        for s in &mut p.log_scale {
            *s = rng.gen_range((1e-4f64).ln()..(0.5f64).ln());
        }
    }
    let attrs = FrameAttributes::from_cloud(&cloud, 0);
    let cfg = DensityConfig::default();
    let oracle: BTreeSet<_> = cloud
        .points
        .iter()
        .filter(|p| {
            let opacity = 1.0 / (1.0 + (-p.opacity_logit).exp());
            let s_max = p.log_scale.iter().map(|v| v.exp()).fold(0.0, f64::max);
            opacity < 0.01 || s_max > 0.1 || s_max < 0.001
        })
        .map(|p| p.lineage)
        .collect();
    let mut ledger = DensityLedger::new(&cloud, 1).unwrap();
    let report = ledger.prune(&mut cloud, &attrs, &cfg, None).map_err(|e| e.to_string())?;
    let removed: BTreeSet<_> = report.removed.iter().copied().collect();
    if removed != oracle {
        let diff: Vec<_> = removed.symmetric_difference(&oracle).take(5).collect();
        return Err(format!("{} mismatches, e.g. {diff:?}", removed.symmetric_difference(&oracle).count()));
    }
    Ok(format!("{} of 1000 pruned, identical to the per-point oracle", removed.len()))
}

fn fifo_law() -> Outcome {
    const T: usize = 10;
    let mut sequences = 0;
    for len in 0..=3 * T {
        for stride in 1..=3 {
            let mut buffer = TemporalBuffer::new(T);
            let mut pushed = Vec::new();
            for k in 0..len {
                let frame = k * stride;
                let row: Vec<f64> = (0..FEATURE_WIDTH).map(|c| (frame * 100 + c) as f64).collect();
                buffer.push(frame, &row).map_err(|e| e.to_string())?;
                pushed.push((frame, row));
                let expect = &pushed[pushed.len().saturating_sub(T)..];
                let frames: Vec<usize> = expect.iter().map(|e| e.0).collect();
                let rows: Vec<Vec<f64>> = buffer.rows().map(|r| r.to_vec()).collect();
                let want_rows: Vec<Vec<f64>> = expect.iter().map(|e| e.1.clone()).collect();
                if buffer.frames() != frames || rows != want_rows || buffer.len() != (k + 1).min(T) {
                    return Err(format!("after {} pushes (stride {stride}) got {:?}", k + 1, buffer.frames()));
                }
            }
            sequences += 1;
        }
    }
    Ok(format!("{sequences} push sequences up to length {}", 3 * T))
}

fn identity_at_init() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cloud = random_cloud(&mut rng, 64);
    let canonical = FrameAttributes::from_cloud(&cloud, 0);
    let mut trials = 0;
    for seed in 0..10u64 {
        let net = DeformationNet::new(DeformConfig::default(), seed);
        let rect = TemporalRectifier::new(RectifierConfig::default(), seed);
        for k in 0..8 {
            let t = if k == 0 { 0.0 } else if k == 7 { 1.0 } else { rng.gen_range(0.0..1.0) };
            let frame = k + 1;
            let mut attrs = net.deform(&cloud, t, frame).map_err(|e| e.to_string())?;
            if bits(&attrs) != bits(&canonical) {
                return Err(format!("deformation changed attributes at t={t}"));
            }
            let mut buffer = TemporalBuffer::new(10);
            for f in 0..rng.gen_range(0..15) {
                let row: Vec<f64> = (0..FEATURE_WIDTH).map(|_| rng.gen_range(-2.0..2.0)).collect();
                buffer.push(f, &row).unwrap();
            }
            let mut prev = RectifiedFrame::from_attributes(&attrs);
            for (s, r) in prev.log_scales.iter_mut().zip(&mut prev.rotations) {
                s.iter_mut().for_each(|v| *v += rng.gen_range(-1.0..1.0));
                *r = common::random_rotation(&mut rng);
            }
            let history = if k % 2 == 0 { Some(&prev) } else { None };
            rect.process_frame(&buffer, &mut attrs, history).map_err(|e| e.to_string())?;
            if bits(&attrs) != bits(&canonical) {
                return Err(format!("rectifier changed attributes at t={t} with {} buffered rows", buffer.len()));
            }
            trials += 1;
        }
    }
    Ok(format!("{trials} (seed, t, buffer) combinations bit-exact"))
}

fn frame_attrs(cloud: &GaussianCloud, ledger: &DensityLedger, frame: usize, rng: &mut impl Rng) -> FrameAttributes {
    let idx = ledger.member_indices(frame, cloud).unwrap();
    let mut a = FrameAttributes::from_cloud(&cloud.subset(&idx), frame);
    for s in &mut a.log_scales {
        s.iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
    }
    a
}

fn correspondence_safety() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let frames = 5;
    let mut cloud = random_cloud(&mut rng, 60);
    let mut ledger = DensityLedger::new(&cloud, frames).unwrap();
    let cfg = DensityConfig { lambda: 0.1, max_points_per_frame: 150, ..Default::default() };
    let (mut added, mut removed) = (0, 0);
    for cycle in 0..1000 {
        let frame = rng.gen_range(0..frames);
        let attrs = frame_attrs(&cloud, &ledger, frame, &mut rng);
        let g: Vec<[f64; 2]> = (0..attrs.len()).map(|_| [rng.gen_range(0.0..1e-3), rng.gen_range(0.0..1e-3)]).collect();
        ledger.accumulate(frame, &attrs.lineages, &g).map_err(|e| e.to_string())?;
        let tau = ledger.densify_threshold(frame, cfg.lambda).map_err(|e| e.to_string())?;
        added += ledger.densify(&mut cloud, &attrs, tau, &cfg, &mut rng).map_err(|e| e.to_string())?.added();

        let mut attrs = frame_attrs(&cloud, &ledger, frame, &mut rng);
        for o in &mut attrs.opacity_logits {
            if rng.gen_bool(0.08) {
                *o = -8.0;
            }
        }
        match ledger.prune(&mut cloud, &attrs, &cfg, None) {
            Ok(r) => removed += r.removed.len(),
            Err(rectisplat::Error::EmptyPopulation(_)) => {}
            Err(e) => return Err(format!("cycle {cycle}: {e}")),
        }
        ledger.check(&cloud).map_err(|e| format!("cycle {cycle}: {e}"))?;

        let other = rng.gen_range(0..frames);
        let prev_attrs = frame_attrs(&cloud, &ledger, other, &mut rng);
        let prev = RectifiedFrame::from_attributes(&prev_attrs);
        let cur = frame_attrs(&cloud, &ledger, frame, &mut rng);
        let aligned = align_correspondence(&ledger, &prev, &cur).map_err(|e| format!("cycle {cycle}: {e}"))?;
        if aligned.lineages != cur.lineages {
            return Err(format!("cycle {cycle}: aligned history does not cover the frame"));
        }
        if cycle % 7 == 6 {
            ledger.reset_stats();
        }
    }
    Ok(format!("1000 cycles, {added} added, {removed} pruned, counts {:?}, zero dangling references", ledger.counts()))
}

/// Training recipe used for the reconstruction and ablation criteria.
fn desk_config() -> TrainConfig {
    TrainConfig::from_toml(include_str!("../../../configs/desk.toml")).expect("desk config")
}

struct Run {
    psnr: f64,
    variance: f64,
    elapsed: Duration,
}

fn run(ds: &Dataset, ablation: Ablation, seed: u64) -> Result<Run, String> {
    let cfg = desk_config().with_ablation(ablation);
    let start = Instant::now();
    let out = train(ds, &cfg, seed, None).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let holdouts = ds.indices_with_role(ViewRole::Holdout);
    let report = eval_run(&out.model, ds, &holdouts, &cfg.render, None).map_err(|e| e.to_string())?;
    let run = Run { psnr: report.psnr.unwrap_or(f64::NAN), variance: count_variance(&out.model.counts()), elapsed };
    println!(
        "  {ablation:?} seed {seed}: holdout PSNR {:.3} dB, count variance {:.2}, {:.1?}",
        run.psnr, run.variance, run.elapsed
    );
    Ok(run)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n, name, outcome: Outcome| {
        match &outcome {
            Ok(msg) => println!("criterion {n:>2} {name}: PASS ({msg})"),
            Err(msg) => println!("criterion {n:>2} {name}: FAIL ({msg})"),
        }
        results.push((n, name, outcome));
    };

    report(1, "gradient integrity", gradient_integrity());
    report(2, "ssm scan equivalence", ssm_equivalence());
    report(3, "densify quantile contract", quantile_contract());
    report(4, "prune contract", prune_contract());
    report(5, "buffer fifo law", fifo_law());
    report(6, "identity at init", identity_at_init());
    report(7, "correspondence safety", correspondence_safety());

    let ds = gen_scene(&SceneSpec::sudden_appearance(), 0).expect("shipped scene");
    let mut grid: Vec<(Ablation, Vec<Run>)> = Vec::new();
    let mut failure = None;
    for ablation in [Ablation::None, Ablation::Temporal, Ablation::Spatial] {
        let mut runs = Vec::new();
        for seed in 0..3 {
            match run(&ds, ablation, seed) {
                Ok(r) => runs.push(r),
                Err(e) => failure = Some(format!("{ablation:?} seed {seed}: {e}")),
            }
        }
        grid.push((ablation, runs));
    }

    let full = &grid[0].1;
    let c8 = match (&failure, full.first()) {
        (Some(e), _) => Err(e.clone()),
        (None, Some(r)) if r.psnr >= 28.0 && r.elapsed <= Duration::from_secs(30 * 60) => {
            Ok(format!("{:.3} dB >= 28 in {:.1?}", r.psnr, r.elapsed))
        }
        (None, Some(r)) => Err(format!("{:.3} dB in {:.1?}, need >= 28 dB within 30 min", r.psnr, r.elapsed)),
        (None, None) => Err("no run".into()),
    };
    report(8, "desk-scale reconstruction", c8);

    let c9 = if let Some(e) = failure {
        Err(e)
    } else {
        let med: Vec<f64> = grid.iter().map(|(_, runs)| median(runs.iter().map(|r| r.psnr).collect())).collect();
        let spatial_on_varies = grid[0].1.iter().chain(&grid[1].1).all(|r| r.variance > 0.0);
        let spatial_off_flat = grid[2].1.iter().all(|r| r.variance == 0.0);
        let msg = format!(
            "median PSNR full {:.3} / temporal-off {:.3} / spatial-off {:.3}; spatial-on variance > 0: {spatial_on_varies}; spatial-off variance = 0: {spatial_off_flat}",
            med[0], med[1], med[2]
        );
        if med[0] > med[1] && med[0] > med[2] && spatial_on_varies && spatial_off_flat {
            Ok(msg)
        } else {
            Err(msg)
        }
    };
    report(9, "ablation direction", c9);

    let c10 = (|| {
        let mut cfg = desk_config();
        cfg.static_steps = 60;
        cfg.dynamic_steps = 12;
        cfg.static_density.warmup = 20;
        cfg.static_density.interval = 20;
        cfg.density.warmup = 4;
        cfg.density.interval = 4;
        let bytes = |seed| train(&ds, &cfg, seed, None).and_then(|o| o.checkpoint_bytes()).map_err(|e| e.to_string());
        let a = bytes(11)?;
        let b = bytes(11)?;
        if a == b {
            Ok(format!("two seed-11 runs give identical {}-byte checkpoints", a.len()))
        } else {
            Err("checkpoints differ".to_string())
        }
    })();
    report(10, "determinism", c10);

    let failed: Vec<usize> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: all 10 criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
