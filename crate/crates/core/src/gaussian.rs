//! Gaussian primitives and the small amount of geometry shared by every
//! other module: quaternions, covariance assembly and degree-1 spherical
//! harmonics.
//!
//! Scales are stored as log-scales and opacities as logits, so an
//! unconstrained gradient step can never leave the valid domain. Public
//! accessors return activated values.

use std::collections::HashMap;

use nalgebra::Matrix3;

use crate::error::{Error, Result};

/// Quaternion stored as `[w, x, y, z]`.
pub type Quat = [f64; 4];

pub const IDENTITY_QUAT: Quat = [1.0, 0.0, 0.0, 0.0];

/// Number of SH basis terms for degree <= 1.
pub const SH_BASIS: usize = 4;
/// Number of SH scalars per point (3 colour channels x 4 basis terms).
pub const SH_COEFFS: usize = 3 * SH_BASIS;
pub const SH_DEGREE: u32 = 1;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;

/// Offset added to the SH sum before clamping.
pub const SH_OFFSET: f64 = 0.5;

const MIN_QUAT_NORM: f64 = 1e-12;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Normalizes `q` and canonicalizes the double cover so that `w >= 0`.
pub fn normalize_quaternion(q: Quat) -> Result<Quat> {
    let norm = quat_norm(&q);
    if !norm.is_finite() || norm <= MIN_QUAT_NORM {
        return Err(Error::DegenerateRotation { norm });
    }
    let s = if q[0] < 0.0 { -1.0 / norm } else { 1.0 / norm };
    Ok([q[0] * s, q[1] * s, q[2] * s, q[3] * s])
}

/// Vector-Jacobian product of [`normalize_quaternion`] at `q`.
pub fn normalize_quaternion_vjp(q: &Quat, upstream: &Quat) -> Quat {
    let norm = quat_norm(q);
    let sign = if q[0] < 0.0 { -1.0 } else { 1.0 };
    let n = [q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm];
    let dot = (0..4).map(|i| n[i] * upstream[i]).sum::<f64>();
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = sign * (upstream[i] - n[i] * dot) / norm;
    }
    out
}

pub fn quat_norm(q: &Quat) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Hamilton product `a ⊗ b`.
pub fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

/// Gradients of `a ⊗ b` with respect to `a` and `b`.
pub fn quat_mul_vjp(a: &Quat, b: &Quat, g: &Quat) -> (Quat, Quat) {
    // The product is bilinear; each output row is a signed permutation.
    let ga = [
        g[0] * b[0] + g[1] * b[1] + g[2] * b[2] + g[3] * b[3],
        -g[0] * b[1] + g[1] * b[0] - g[2] * b[3] + g[3] * b[2],
        -g[0] * b[2] + g[1] * b[3] + g[2] * b[0] - g[3] * b[1],
        -g[0] * b[3] - g[1] * b[2] + g[2] * b[1] + g[3] * b[0],
    ];
    let gb = [
        g[0] * a[0] + g[1] * a[1] + g[2] * a[2] + g[3] * a[3],
        -g[0] * a[1] + g[1] * a[0] + g[2] * a[3] - g[3] * a[2],
        -g[0] * a[2] - g[1] * a[3] + g[2] * a[0] + g[3] * a[1],
        -g[0] * a[3] + g[1] * a[2] - g[2] * a[1] + g[3] * a[0],
    ];
    (ga, gb)
}

/// Rotation matrix of a quaternion via the polynomial formula. For unit
/// quaternions this is the usual rotation; the formula itself does not
/// normalize.
pub fn quat_to_matrix(q: &Quat) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Contracts `dL/dR` through [`quat_to_matrix`].
pub fn quat_to_matrix_vjp(q: &Quat, g: &Matrix3<f64>) -> Quat {
    let [w, x, y, z] = *q;
    let gw = -z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
        + x * g[(2, 1)];
    let gx = y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
        + z * g[(2, 0)]
        + w * g[(2, 1)]
        - 2.0 * x * g[(2, 2)];
    let gy = -2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
        - w * g[(2, 0)]
        + z * g[(2, 1)]
        - 2.0 * y * g[(2, 2)];
    let gz = -2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
        - 2.0 * z * g[(1, 1)]
        + y * g[(1, 2)]
        + x * g[(2, 0)]
        + y * g[(2, 1)];
    [2.0 * gw, 2.0 * gx, 2.0 * gy, 2.0 * gz]
}

/// `Σ = R · diag(s)² · Rᵀ`.
pub fn covariance_from(scale: [f64; 3], rotation: Quat) -> Result<Matrix3<f64>> {
    if scale.iter().chain(rotation.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite scale or rotation".into()));
    }
    if scale.iter().any(|&s| s <= 0.0) {
        return Err(Error::InvalidInput(format!("scale must be positive, got {scale:?}")));
    }
    Ok(covariance_unchecked(&scale, &rotation))
}

pub(crate) fn covariance_unchecked(scale: &[f64; 3], rotation: &Quat) -> Matrix3<f64> {
    let r = quat_to_matrix(rotation);
    let d = Matrix3::from_diagonal(&nalgebra::Vector3::new(
        scale[0] * scale[0],
        scale[1] * scale[1],
        scale[2] * scale[2],
    ));
    r * d * r.transpose()
}

/// Real SH basis up to degree 1 evaluated at `dir`.
pub fn sh_basis(dir: &[f64; 3]) -> [f64; SH_BASIS] {
    [SH_C0, -SH_C1 * dir[1], SH_C1 * dir[2], -SH_C1 * dir[0]]
}

/// SH sum plus offset, before the clamp at zero.
pub fn sh_radiance_unclamped(sh: &[f64; SH_COEFFS], dir: &[f64; 3]) -> [f64; 3] {
    let basis = sh_basis(dir);
    let mut rgb = [SH_OFFSET; 3];
    for (k, b) in basis.iter().enumerate() {
        for c in 0..3 {
            rgb[c] += sh[k * 3 + c] * b;
        }
    }
    rgb
}

/// View-dependent colour for an SH block laid out basis-major
/// (`sh[k * 3 + channel]`).
pub fn sh_radiance(sh: &[f64; SH_COEFFS], view_dir: &[f64; 3]) -> [f64; 3] {
    sh_radiance_unclamped(sh, view_dir).map(|v| v.max(0.0))
}

/// Sets the degree-0 coefficients so that the radiance equals `rgb`.
pub fn sh_from_rgb(rgb: [f64; 3]) -> [f64; SH_COEFFS] {
    let mut sh = [0.0; SH_COEFFS];
    for c in 0..3 {
        sh[c] = (rgb[c] - SH_OFFSET) / SH_C0;
    }
    sh
}

/// Stable identifier of a point across clone, split and prune.
pub type Lineage = u64;

#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub position: [f64; 3],
    pub log_scale: [f64; 3],
    pub rotation: Quat,
    pub opacity_logit: f64,
    pub sh: [f64; SH_COEFFS],
    pub lineage: Lineage,
}

impl Gaussian {
    pub fn new(
        position: [f64; 3],
        scale: [f64; 3],
        rotation: Quat,
        opacity: f64,
        rgb: [f64; 3],
    ) -> Result<Self> {
        if scale.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidInput(format!("scale must be positive, got {scale:?}")));
        }
        if !(opacity > 0.0 && opacity < 1.0) {
            return Err(Error::InvalidInput(format!("opacity {opacity} outside (0, 1)")));
        }
        Ok(Self {
            position,
            log_scale: scale.map(f64::ln),
            rotation: normalize_quaternion(rotation)?,
            opacity_logit: logit(opacity),
            sh: sh_from_rgb(rgb),
            lineage: 0,
        })
    }

    pub fn scale(&self) -> [f64; 3] {
        self.log_scale.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        covariance_unchecked(&self.scale(), &self.rotation)
    }
}

/// Canonical set of Gaussians anchored at frame 0.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianCloud {
    pub points: Vec<Gaussian>,
    pub canonical_time: usize,
    next_lineage: Lineage,
}

impl GaussianCloud {
    /// Builds a cloud, assigning lineages `0..n` in order.
    pub fn from_points(points: Vec<Gaussian>) -> Self {
        let mut cloud = Self::default();
        for p in points {
            cloud.push_fresh(p);
        }
        cloud
    }

    /// Rebuilds a cloud whose lineages were assigned elsewhere (checkpoint load).
    pub fn with_lineages(points: Vec<Gaussian>) -> Result<Self> {
        let next = points.iter().map(|p| p.lineage + 1).max().unwrap_or(0);
        let cloud = Self { points, canonical_time: 0, next_lineage: next };
        cloud.validate()?;
        Ok(cloud)
    }

    /// Restores the lineage allocator, which must lie past every live lineage.
    pub fn with_next_lineage(mut self, next: Lineage) -> Result<Self> {
        if next < self.next_lineage {
            return Err(Error::Format(format!("next lineage {next} collides with live lineage {}", self.next_lineage - 1)));
        }
        self.next_lineage = next;
        Ok(self)
    }

    /// The points at `indices`, in that order, sharing this cloud's allocator.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i].clone()).collect(),
            canonical_time: self.canonical_time,
            next_lineage: self.next_lineage,
        }
    }

    /// Appends `point` under a newly allocated lineage, returning it.
    pub fn push_fresh(&mut self, mut point: Gaussian) -> Lineage {
        point.lineage = self.next_lineage;
        self.next_lineage += 1;
        let id = point.lineage;
        self.points.push(point);
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn next_lineage(&self) -> Lineage {
        self.next_lineage
    }

    pub fn lineages(&self) -> Vec<Lineage> {
        self.points.iter().map(|p| p.lineage).collect()
    }

    pub fn lineage_index(&self) -> HashMap<Lineage, usize> {
        self.points.iter().enumerate().map(|(i, p)| (p.lineage, i)).collect()
    }

    /// Checks lineage uniqueness and the per-point invariants.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::with_capacity(self.points.len());
        for p in &self.points {
            if !seen.insert(p.lineage) {
                return Err(Error::Correspondence(format!("duplicate lineage {}", p.lineage)));
            }
            if (quat_norm(&p.rotation) - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidInput(format!(
                    "lineage {} has non-unit rotation",
                    p.lineage
                )));
            }
            let finite = p
                .position
                .iter()
                .chain(&p.log_scale)
                .chain(&p.sh)
                .chain(std::iter::once(&p.opacity_logit))
                .all(|v| v.is_finite());
            if !finite {
                return Err(Error::InvalidInput(format!("lineage {} has non-finite data", p.lineage)));
            }
        }
        Ok(())
    }
}
