//! Photometric, reconstruction and mask losses, and the collective average
//! over a sub-clip.
//!
//! Every loss returns its value and writes `dL/d(render)` so the caller can
//! hand it straight to the renderer's backward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewRole {
    Reference,
    Anchor,
    Holdout,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the reference-view photometric term.
    pub reference: f64,
    /// Weight of the mean anchor-view photometric term.
    pub anchor: f64,
    pub rec: f64,
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { reference: 1.0, anchor: 1.0, rec: 2e4, mask: 5e3 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub photometric: f64,
    pub rec: f64,
    pub mask: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn add_scaled(&mut self, other: &LossBreakdown, k: f64) {
        self.photometric += k * other.photometric;
        self.rec += k * other.rec;
        self.mask += k * other.mask;
        self.total += k * other.total;
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute error over all pixels and channels; adds `scale · dL/drgb`
/// into `grad` when given.
pub fn photometric_l1(rgb: &[f64], target: &[f64], scale: f64, grad: Option<&mut [f64]>) -> f64 {
    assert_eq!(rgb.len(), target.len());
    if rgb.is_empty() {
        return 0.0;
    }
    let inv = 1.0 / rgb.len() as f64;
    if let Some(g) = grad {
        for i in 0..rgb.len() {
            g[i] += scale * inv * sign(rgb[i] - target[i]);
        }
    }
    rgb.iter().zip(target).map(|(a, b)| (a - b).abs()).sum::<f64>() * inv
}

/// Mean absolute RGB error over foreground pixels (`mask >= 0.5`).
pub fn loss_rec(rgb: &[f64], target: &[f64], mask: &[f64], scale: f64, grad: Option<&mut [f64]>) -> f64 {
    assert_eq!(rgb.len(), target.len());
    assert_eq!(rgb.len(), mask.len() * 3);
    let fg = mask.iter().filter(|&&m| m >= 0.5).count();
    if fg == 0 {
        return 0.0;
    }
    let inv = 1.0 / (3 * fg) as f64;
    let mut sum = 0.0;
    let mut grad = grad;
    for (p, &m) in mask.iter().enumerate() {
        if m < 0.5 {
            continue;
        }
        for c in 0..3 {
            let i = p * 3 + c;
            let d = rgb[i] - target[i];
            sum += d.abs();
            if let Some(g) = grad.as_deref_mut() {
                g[i] += scale * inv * sign(d);
            }
        }
    }
    sum * inv
}

/// Mean absolute error between rendered alpha and the binary mask.
pub fn loss_mask(alpha: &[f64], mask: &[f64], scale: f64, grad: Option<&mut [f64]>) -> f64 {
    assert_eq!(alpha.len(), mask.len());
    if alpha.is_empty() {
        return 0.0;
    }
    let inv = 1.0 / alpha.len() as f64;
    let mut sum = 0.0;
    let mut grad = grad;
    for i in 0..alpha.len() {
        let m = if mask[i] >= 0.5 { 1.0 } else { 0.0 };
        let d = alpha[i] - m;
        sum += d.abs();
        if let Some(g) = grad.as_deref_mut() {
            g[i] += scale * inv * sign(d);
        }
    }
    sum * inv
}

/// Collective average loss: the arithmetic mean of per-frame losses.
pub fn cal(losses: &[f64]) -> Result<f64> {
    if losses.is_empty() {
        return Err(Error::InvalidInput("collective average over an empty sub-clip".into()));
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// One supervised view of a frame.
pub struct ViewSample<'a> {
    pub role: ViewRole,
    pub rgb: &'a [f64],
    pub alpha: &'a [f64],
    pub target_rgb: &'a [f64],
    pub target_mask: &'a [f64],
}

/// Per-view image gradients `(d_rgb, d_alpha)`.
pub type ViewGrads = (Vec<f64>, Vec<f64>);

/// Loss of one frame over its supervised views. Photometric terms weight the
/// reference view and the mean of the anchor views separately; the
/// reconstruction and mask terms average over all views. Gradients are
/// multiplied by `scale`.
pub fn frame_loss(views: &[ViewSample<'_>], w: &LossWeights, scale: f64) -> (LossBreakdown, Vec<ViewGrads>) {
    let n_ref = views.iter().filter(|v| v.role == ViewRole::Reference).count();
    let n_anchor = views.iter().filter(|v| v.role == ViewRole::Anchor).count();
    let n = views.len().max(1) as f64;
    let mut out = LossBreakdown::default();
    let mut grads = Vec::with_capacity(views.len());
    for v in views {
        let mut d_rgb = vec![0.0; v.rgb.len()];
        let mut d_alpha = vec![0.0; v.alpha.len()];
        let group = match v.role {
            ViewRole::Reference => w.reference / n_ref as f64,
            ViewRole::Anchor => w.anchor / n_anchor as f64,
            ViewRole::Holdout => 0.0,
        };
        if group != 0.0 {
            out.photometric += group * photometric_l1(v.rgb, v.target_rgb, scale * group, Some(&mut d_rgb));
        }
        out.rec += loss_rec(v.rgb, v.target_rgb, v.target_mask, scale * w.rec / n, Some(&mut d_rgb)) / n;
        out.mask += loss_mask(v.alpha, v.target_mask, scale * w.mask / n, Some(&mut d_alpha)) / n;
        grads.push((d_rgb, d_alpha));
    }
    out.total = out.photometric + w.rec * out.rec + w.mask * out.mask;
    (out, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rec_examples() {
        let t = vec![0.2; 12];
        let mask = vec![1.0, 0.0, 1.0, 1.0];
        assert_eq!(loss_rec(&t, &t, &mask, 1.0, None), 0.0);
        let shifted: Vec<f64> = t.iter().map(|v| v + 0.1).collect();
        assert!((loss_rec(&shifted, &t, &mask, 1.0, None) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn rec_matches_per_pixel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 50;
        let a: Vec<f64> = (0..n * 3).map(|_| rng.gen()).collect();
        let b: Vec<f64> = (0..n * 3).map(|_| rng.gen()).collect();
        let m: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
        let mut sum = 0.0;
        let mut count = 0;
        for p in 0..n {
            if m[p] == 1.0 {
                for c in 0..3 {
                    sum += (a[p * 3 + c] - b[p * 3 + c]).abs();
                    count += 1;
                }
            }
        }
        assert!((loss_rec(&a, &b, &m, 1.0, None) - sum / count as f64).abs() < 1e-12);
    }

    #[test]
    fn mask_examples() {
        let m = vec![1.0, 0.0, 0.0, 1.0];
        assert_eq!(loss_mask(&m, &m, 1.0, None), 0.0);
        let inv: Vec<f64> = m.iter().map(|v| 1.0 - v).collect();
        assert_eq!(loss_mask(&inv, &m, 1.0, None), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..20).map(|_| rng.gen()).collect();
        let mm: Vec<f64> = (0..20).map(|i| (i % 2) as f64).collect();
        let oracle = a.iter().zip(&mm).map(|(x, y)| (x - y).abs()).sum::<f64>() / 20.0;
        assert!((loss_mask(&a, &mm, 1.0, None) - oracle).abs() < 1e-12);
    }

    #[test]
    fn cal_examples() {
        assert_eq!(cal(&[0.7; 4]).unwrap(), 0.7);
        assert_eq!(cal(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 2.5);
        let l = [0.3, 1.7, 2.2, 0.1];
        let scaled: Vec<f64> = l.iter().map(|v| 3.5 * v).collect();
        assert!((cal(&scaled).unwrap() - 3.5 * cal(&l).unwrap()).abs() < 1e-12);
        assert!(cal(&[]).is_err());
    }

    #[test]
    fn frame_loss_total_is_weighted_sum_and_gradient_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let px = 6;
        let mk = |rng: &mut ChaCha8Rng, k: usize| -> Vec<f64> { (0..k).map(|_| rng.gen()).collect() };
        let rgbs: Vec<Vec<f64>> = (0..3).map(|_| mk(&mut rng, px * 3)).collect();
        let alphas: Vec<Vec<f64>> = (0..3).map(|_| mk(&mut rng, px)).collect();
        let trgb: Vec<Vec<f64>> = (0..3).map(|_| mk(&mut rng, px * 3)).collect();
        let tmask: Vec<Vec<f64>> = (0..3).map(|_| (0..px).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect()).collect();
        let roles = [ViewRole::Reference, ViewRole::Anchor, ViewRole::Anchor];
        let w = LossWeights::default();
        let eval = |rgbs: &[Vec<f64>], alphas: &[Vec<f64>]| {
            let views: Vec<ViewSample> = (0..3)
                .map(|i| ViewSample { role: roles[i], rgb: &rgbs[i], alpha: &alphas[i], target_rgb: &trgb[i], target_mask: &tmask[i] })
                .collect();
            frame_loss(&views, &w, 0.25)
        };
        let (l, g) = eval(&rgbs, &alphas);
        assert_eq!(l.total, l.photometric + w.rec * l.rec + w.mask * l.mask);
        let eps = 1e-7;
        for v in 0..3 {
            for i in 0..px * 3 {
                let mut p = rgbs.clone();
                p[v][i] += eps;
                let up = eval(&p, &alphas).0.total;
                p[v][i] -= 2.0 * eps;
                let down = eval(&p, &alphas).0.total;
                let numeric = 0.25 * (up - down) / (2.0 * eps);
                assert!((numeric - g[v].0[i]).abs() < 1e-3 * numeric.abs().max(1.0));
            }
        }
    }
}
