//! Finite-difference harness and random fixtures shared by the integration
//! tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rectisplat::deform::{AttributeGrads, DeformConfig, DeformationNet, FrameAttributes};
use rectisplat::gaussian::{normalize_quaternion, Gaussian, GaussianCloud};
use rectisplat::rectifier::{RectifierConfig, TemporalBuffer, TemporalRectifier, FEATURE_WIDTH};
use rectisplat::render::{render, render_backward, Camera, RenderSettings};

pub const FD_EPS: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-3;
pub const ABS_FLOOR: f64 = 1e-7;

pub fn grad_close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= REL_TOL * analytic.abs().max(numeric.abs()) + ABS_FLOOR
}

/// Compares `analytic` with central differences of `eval` around `x`, one
/// coordinate at a time. Returns the first mismatch.
pub fn fd_check(label: &str, x: &[f64], analytic: &[f64], mut eval: impl FnMut(&[f64]) -> f64) -> Result<usize, String> {
    assert_eq!(x.len(), analytic.len(), "{label}: gradient length");
    if analytic.iter().all(|g| g.abs() < 1e-9) {
        return Err(format!("{label}: analytic gradient vanishes, check is vacuous"));
    }
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + FD_EPS;
        let up = eval(&probe);
        probe[i] = orig - FD_EPS;
        let down = eval(&probe);
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * FD_EPS);
        if !grad_close(analytic[i], numeric) {
            return Err(format!("{label}[{i}]: analytic {:e} vs numeric {:e}", analytic[i], numeric));
        }
    }
    Ok(x.len())
}

pub fn flatten_attrs(a: &FrameAttributes) -> Vec<f64> {
    let mut v = Vec::new();
    for i in 0..a.len() {
        v.extend_from_slice(&a.positions[i]);
        v.extend_from_slice(&a.log_scales[i]);
        v.extend_from_slice(&a.rotations[i]);
        v.push(a.opacity_logits[i]);
        v.extend_from_slice(&a.sh[i]);
    }
    v
}

pub fn unflatten_attrs(a: &mut FrameAttributes, v: &[f64]) {
    let mut it = v.iter().copied();
    for i in 0..a.len() {
        a.positions[i].iter_mut().for_each(|x| *x = it.next().unwrap());
        a.log_scales[i].iter_mut().for_each(|x| *x = it.next().unwrap());
        a.rotations[i].iter_mut().for_each(|x| *x = it.next().unwrap());
        a.opacity_logits[i] = it.next().unwrap();
        a.sh[i].iter_mut().for_each(|x| *x = it.next().unwrap());
    }
}

pub fn flatten_grads(g: &AttributeGrads) -> Vec<f64> {
    let mut v = Vec::new();
    for i in 0..g.len() {
        v.extend_from_slice(&g.positions[i]);
        v.extend_from_slice(&g.log_scales[i]);
        v.extend_from_slice(&g.rotations[i]);
        v.push(g.opacity_logits[i]);
        v.extend_from_slice(&g.sh[i]);
    }
    v
}

pub fn random_rotation(rng: &mut impl Rng) -> [f64; 4] {
    normalize_quaternion(std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).unwrap()
}

/// Up to ten points in front of a 32x32 axis camera, opacities well below the
/// clamp and colours well above zero.
pub fn random_splats(seed: u64, n: usize) -> (FrameAttributes, Camera) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = (0..n)
        .map(|_| {
            let mut g = Gaussian::new(
                [rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4), rng.gen_range(-0.5..0.5)],
                [rng.gen_range(0.04..0.2), rng.gen_range(0.04..0.2), rng.gen_range(0.04..0.2)],
                random_rotation(&mut rng),
                rng.gen_range(0.15..0.8),
                [rng.gen_range(0.3..0.8), rng.gen_range(0.3..0.8), rng.gen_range(0.3..0.8)],
            )
            .unwrap();
            for k in 3..12 {
                g.sh[k] = rng.gen_range(-0.2..0.2);
            }
            g
        })
        .collect();
    let cam = Camera::look_at([0.3, -0.2, -3.0], [0.0; 3], [0.0, -1.0, 0.0], 45.0, 32, 32).unwrap();
    (FrameAttributes::from_cloud(&GaussianCloud::from_points(pts), 0), cam)
}

pub fn random_weights(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Random linear functional of the rendered image; returns the analytic
/// attribute gradient, the screen-space mean gradient and an evaluator.
pub fn render_gradient_check(seed: u64, n: usize) -> Result<usize, String> {
    let (attrs, cam) = random_splats(seed, n);
    let settings = RenderSettings::exact();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w_rgb = random_weights(32 * 32 * 3, &mut rng);
    let w_a = random_weights(32 * 32, &mut rng);
    let loss = |a: &FrameAttributes| {
        let (out, _) = render(a, &cam, &settings).unwrap();
        out.rgb.iter().zip(&w_rgb).map(|(x, w)| x * w).sum::<f64>()
            + out.alpha.iter().zip(&w_a).map(|(x, w)| x * w).sum::<f64>()
    };
    let (_, rec) = render(&attrs, &cam, &settings).map_err(|e| e.to_string())?;
    let grads = render_backward(&attrs, &rec, &w_rgb, &w_a).map_err(|e| e.to_string())?;
    let x = flatten_attrs(&attrs);
    let mut probe = attrs.clone();
    fd_check(&format!("render seed {seed}"), &x, &flatten_grads(&grads.attrs), |v| {
        unflatten_attrs(&mut probe, v);
        loss(&probe)
    })
}

fn random_cloud(rng: &mut impl Rng, n: usize) -> GaussianCloud {
    GaussianCloud::from_points(
        (0..n)
            .map(|_| {
                Gaussian::new(
                    std::array::from_fn(|_| rng.gen_range(-0.6..0.6)),
                    std::array::from_fn(|_| rng.gen_range(0.01..0.1)),
                    random_rotation(rng),
                    rng.gen_range(0.1..0.9),
                    std::array::from_fn(|_| rng.gen_range(0.2..0.8)),
                )
                .unwrap()
            })
            .collect(),
    )
}

/// Finite-difference check of every deformation-net parameter and every
/// canonical attribute on a small net with randomized (nonzero) heads.
pub fn deform_gradient_check(seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud = random_cloud(&mut rng, 4);
    let config = DeformConfig { hidden: 12, deform_opacity: true, ..Default::default() };
    let mut net = DeformationNet::new(config, seed);
    for v in net.params.iter_mut() {
        *v += rng.gen_range(-0.3..0.3);
    }
    let t = rng.gen_range(0.05..0.95);
    let (attrs, rec) = net.deform_with_record(&cloud, t, 0).unwrap();
    let probe_len = flatten_attrs(&attrs).len();
    let w = random_weights(probe_len, &mut rng);
    let upstream = {
        let mut g = AttributeGrads::zeros(attrs.len());
        let mut a = attrs.clone();
        unflatten_attrs(&mut a, &w);
        g.positions = a.positions;
        g.log_scales = a.log_scales;
        g.rotations = a.rotations;
        g.opacity_logits = a.opacity_logits;
        g.sh = a.sh;
        g
    };
    let objective = |a: &FrameAttributes| flatten_attrs(a).iter().zip(&w).map(|(x, y)| x * y).sum::<f64>();
    let (pgrads, cgrads) = net.deform_backward(&cloud, &rec, &upstream).map_err(|e| e.to_string())?;

    let mut checked = 0;
    let params = net.params.clone();
    let mut probe_net = net.clone();
    checked += fd_check(&format!("deform params seed {seed}"), &params, &pgrads, |p| {
        probe_net.params.copy_from_slice(p);
        objective(&probe_net.deform(&cloud, t, 0).unwrap())
    })?;

    let canon = FrameAttributes::from_cloud(&cloud, 0);
    let mut probe_cloud = cloud.clone();
    checked += fd_check(&format!("deform canonical seed {seed}"), &flatten_attrs(&canon), &flatten_grads(&cgrads), |v| {
        let mut a = canon.clone();
        unflatten_attrs(&mut a, v);
        for (i, p) in probe_cloud.points.iter_mut().enumerate() {
            p.position = a.positions[i];
            p.log_scale = a.log_scales[i];
            p.rotation = a.rotations[i];
            p.opacity_logit = a.opacity_logits[i];
            p.sh = a.sh[i];
        }
        objective(&net.deform(&probe_cloud, t, 0).unwrap())
    })?;
    Ok(checked)
}

/// End-to-end check through pooling, correlation and both rectification
/// heads, with randomized head outputs and a warm buffer.
pub fn rectifier_gradient_check(seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = RectifierConfig { hidden: 6, ..Default::default() };
    let mut rect = TemporalRectifier::new(config, seed);
    for head in [&mut rect.scale_head, &mut rect.rotation_head] {
        head.params.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
    }
    rect.ssm.params.iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
    let cloud = random_cloud(&mut rng, 5);
    let mut attrs = FrameAttributes::from_cloud(&cloud, 6);
    for s in &mut attrs.log_scales {
        s.iter_mut().for_each(|v| *v = rng.gen_range(-4.0..-2.0));
    }
    let mut buffer = TemporalBuffer::new(10);
    for f in 0..6 {
        let row: Vec<f64> = (0..FEATURE_WIDTH).map(|_| rng.gen_range(-0.5..0.5)).collect();
        buffer.push(f, &row).unwrap();
    }
    let mut prev = rectisplat::rectifier::RectifiedFrame::from_attributes(&attrs);
    prev.frame_index = 5;
    for (s, r) in prev.log_scales.iter_mut().zip(prev.rotations.iter_mut()) {
        s.iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
        *r = random_rotation(&mut rng);
    }

    let n_flat = flatten_attrs(&attrs).len();
    let w = random_weights(n_flat, &mut rng);
    let objective = |a: &FrameAttributes| flatten_attrs(a).iter().zip(&w).map(|(x, y)| x * y).sum::<f64>();
    let mut upstream = AttributeGrads::zeros(attrs.len());
    {
        let mut a = attrs.clone();
        unflatten_attrs(&mut a, &w);
        upstream.positions = a.positions;
        upstream.log_scales = a.log_scales;
        upstream.rotations = a.rotations;
        upstream.opacity_logits = a.opacity_logits;
        upstream.sh = a.sh;
    }
    let mut rectified = attrs.clone();
    let (_, record) = rect.process_frame(&buffer, &mut rectified, Some(&prev)).map_err(|e| e.to_string())?;
    let (pgrads, agrads) = rect.process_frame_backward(&attrs, &record, &upstream).map_err(|e| e.to_string())?;

    let run = |r: &TemporalRectifier, a: &FrameAttributes| {
        let mut a = a.clone();
        r.process_frame(&buffer, &mut a, Some(&prev)).unwrap();
        objective(&a)
    };
    let mut checked = 0;
    let mut probe = rect.clone();
    checked += fd_check(&format!("ssm seed {seed}"), &rect.ssm.params, &pgrads.ssm, |p| {
        probe.ssm.params.copy_from_slice(p);
        run(&probe, &attrs)
    })?;
    let mut probe = rect.clone();
    checked += fd_check(&format!("scale head seed {seed}"), &rect.scale_head.params, &pgrads.scale_head, |p| {
        probe.scale_head.params.copy_from_slice(p);
        run(&probe, &attrs)
    })?;
    let mut probe = rect.clone();
    checked += fd_check(&format!("rotation head seed {seed}"), &rect.rotation_head.params, &pgrads.rotation_head, |p| {
        probe.rotation_head.params.copy_from_slice(p);
        run(&probe, &attrs)
    })?;
    let mut probe_attrs = attrs.clone();
    checked += fd_check(&format!("rectifier inputs seed {seed}"), &flatten_attrs(&attrs), &flatten_grads(&agrads), |v| {
        unflatten_attrs(&mut probe_attrs, v);
        run(&rect, &probe_attrs)
    })?;
    Ok(checked)
}
