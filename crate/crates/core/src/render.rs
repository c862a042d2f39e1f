//! Tile-based splatting rasterizer with a hand-derived backward pass.
//!
//! Points are projected with the local affine (EWA) approximation, sorted
//! once per image by `(depth, lineage)`, binned into 16x16 tiles and
//! alpha-composited front to back. The backward pass replays each pixel's
//! forward list and runs the reverse compositing recursion, then reduces the
//! per-tile partial gradients in fixed tile order.

use std::path::Path;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deform::{AttributeGrads, FrameAttributes};
use crate::error::{Error, Result};
use crate::gaussian::{quat_to_matrix, quat_to_matrix_vjp, sh_basis, sh_radiance_unclamped, sigmoid, SH_BASIS, SH_C1, SH_COEFFS};

/// Pinhole camera with a world-to-camera rigid pose. Camera space is
/// x right, y down, z forward; pixel centres sit at half-integers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Rows of the world-to-camera rotation.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Camera {
    /// Camera at `eye` looking at `target`, with `up` defining the image's
    /// upward direction.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3], focal: f64, width: usize, height: usize) -> Result<Self> {
        let eye_v = Vector3::from(eye);
        let forward = Vector3::from(target) - eye_v;
        if forward.norm() < 1e-12 {
            return Err(Error::InvalidInput("camera eye coincides with target".into()));
        }
        let z = forward.normalize();
        let x = z.cross(&Vector3::from(up));
        if x.norm() < 1e-9 {
            return Err(Error::InvalidInput("camera up vector is parallel to the view direction".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let t = -(r * eye_v);
        let cam = Self {
            width,
            height,
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rotation: [[x[0], x[1], x[2]], [y[0], y[1], y[2]], [z[0], z[1], z[2]]],
            translation: [t[0], t[1], t[2]],
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let r = &self.rotation;
        Matrix3::new(r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2])
    }

    pub fn to_camera(&self, p: &[f64; 3]) -> Vector3<f64> {
        self.rotation_matrix() * Vector3::from(*p) + Vector3::from(self.translation)
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> [f64; 3] {
        let c = -(self.rotation_matrix().transpose() * Vector3::from(self.translation));
        [c[0], c[1], c[2]]
    }

    /// Pixel coordinates of a camera-space point in front of the camera.
    pub fn project_point(&self, p: &Vector3<f64>) -> [f64; 2] {
        [self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidInput(format!("focal lengths must be positive: {} {}", self.fx, self.fy)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput("camera image size must be nonzero".into()));
        }
        let r = self.rotation_matrix();
        let err = (r * r.transpose() - Matrix3::identity()).abs().max();
        if !(err <= 1e-6) {
            return Err(Error::InvalidInput(format!("camera rotation not orthonormal (error {err:e})")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSettings {
    pub tile_size: usize,
    pub near: f64,
    /// Isotropic screen-space dilation in px².
    pub blur: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    /// Compositing stops once transmittance would drop below this.
    pub transmittance_min: f64,
    /// Footprint radius in standard deviations.
    pub radius_sigma: f64,
    pub background: [f64; 3],
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            tile_size: 16,
            near: 0.01,
            blur: 0.3,
            alpha_min: 1.0 / 255.0,
            alpha_max: 0.99,
            transmittance_min: 1e-4,
            radius_sigma: 3.0,
            background: [0.0; 3],
        }
    }
}

impl RenderSettings {
    /// Disables every truncation so the image is a smooth function of the
    /// attributes wherever no point is at the opacity clamp.
    pub fn exact() -> Self {
        Self { alpha_min: 0.0, transmittance_min: 0.0, radius_sigma: f64::INFINITY, ..Self::default() }
    }
}

/// One point after projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Projected {
    /// Row in the attribute table.
    pub index: usize,
    pub lineage: u64,
    pub depth: f64,
    pub cam: [f64; 3],
    pub mean: [f64; 2],
    /// Upper triangle `(a, b, c)` of the dilated 2D covariance.
    pub cov: [f64; 3],
    /// Upper triangle of its inverse.
    pub conic: [f64; 3],
    pub radius: f64,
    pub color: [f64; 3],
    pub color_raw: [f64; 3],
    pub opacity: f64,
    /// Exponent below which the sample falls under `alpha_min`, minus a
    /// margin so the exact test still decides near the boundary.
    log_cut: f64,
    tiles: [usize; 4],
}

/// Projects the frame's member points; culled points are omitted.
pub fn project(attrs: &FrameAttributes, camera: &Camera, settings: &RenderSettings) -> Vec<Projected> {
    let w = camera.rotation_matrix();
    let center = camera.center();
    let ts = settings.tile_size;
    let (tiles_x, tiles_y) = (camera.width.div_ceil(ts), camera.height.div_ceil(ts));
    attrs
        .membership
        .iter()
        .filter_map(|&i| {
            let p = camera.to_camera(&attrs.positions[i]);
            if !(p[2] > settings.near) {
                return None;
            }
            let j = jacobian(camera, &p);
            let t = j * w;
            let sigma = world_covariance(&attrs.log_scales[i], &attrs.rotations[i]);
            let cov = t * sigma * t.transpose() + Matrix2::identity() * settings.blur;
            let (a, b, c) = (cov[(0, 0)], cov[(0, 1)], cov[(1, 1)]);
            let det = a * c - b * b;
            if !(det > 0.0) {
                return None;
            }
            let mean = camera.project_point(&p);
            let mid = 0.5 * (a + c);
            let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
            let radius = settings.radius_sigma * lambda_max.sqrt();
            let tile_range = |m: f64, extent: usize, count: usize| -> Option<(usize, usize)> {
                let lo = m - radius;
                let hi = m + radius;
                if hi < 0.0 || lo >= extent as f64 {
                    return None;
                }
                let lo = (lo.max(0.0) / ts as f64).floor() as usize;
                let hi = ((hi.min(extent as f64 - 1e-9) / ts as f64).floor() as usize).min(count - 1);
                Some((lo, hi))
            };
            let (x0, x1) = tile_range(mean[0], camera.width, tiles_x)?;
            let (y0, y1) = tile_range(mean[1], camera.height, tiles_y)?;
            let pos = attrs.positions[i];
            let dir = normalize3(&[pos[0] - center[0], pos[1] - center[1], pos[2] - center[2]]);
            let color_raw = sh_radiance_unclamped(&attrs.sh[i], &dir);
            let opacity = sigmoid(attrs.opacity_logits[i]);
            Some(Projected {
                index: i,
                lineage: attrs.lineages[i],
                depth: p[2],
                cam: [p[0], p[1], p[2]],
                mean,
                cov: [a, b, c],
                conic: [c / det, -b / det, a / det],
                radius,
                color: color_raw.map(|v| v.max(0.0)),
                color_raw,
                opacity,
                log_cut: (settings.alpha_min / opacity).ln() - 1e-9,
                tiles: [x0, x1, y0, y1],
            })
        })
        .collect()
}

fn normalize3(v: &[f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n == 0.0 {
        [0.0, 0.0, 1.0]
    } else {
        [v[0] / n, v[1] / n, v[2] / n]
    }
}

fn jacobian(camera: &Camera, p: &Vector3<f64>) -> Matrix2x3<f64> {
    let (x, y, z) = (p[0], p[1], p[2]);
    Matrix2x3::new(camera.fx / z, 0.0, -camera.fx * x / (z * z), 0.0, camera.fy / z, -camera.fy * y / (z * z))
}

fn world_covariance(log_scale: &[f64; 3], rotation: &[f64; 4]) -> Matrix3<f64> {
    let r = quat_to_matrix(rotation);
    let s2 = Vector3::new((2.0 * log_scale[0]).exp(), (2.0 * log_scale[1]).exp(), (2.0 * log_scale[2]).exp());
    r * Matrix3::from_diagonal(&s2) * r.transpose()
}

/// Sorts by view depth, breaking ties by lineage.
pub fn depth_sort(projected: &mut [Projected]) {
    projected.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.lineage.cmp(&b.lineage)));
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// Row-major `height x width x 3`, linear.
    pub rgb: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Attribute rows in compositing order (culled points excluded).
    pub order: Vec<usize>,
    /// Footprint radius in pixels per attribute row, zero if culled.
    pub radii: Vec<f64>,
}

/// Forward state needed by [`render_backward`].
#[derive(Debug, Clone)]
pub struct RenderRecord {
    points: usize,
    camera: Camera,
    settings: RenderSettings,
    projected: Vec<Projected>,
    tiles: Vec<Vec<u32>>,
}

/// Gradients of a rendered image with respect to the frame attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderGrads {
    pub attrs: AttributeGrads,
    /// Gradient with respect to each point's projected pixel mean.
    pub mean2d: Vec<[f64; 2]>,
}

struct Sample {
    alpha: f64,
    gauss: f64,
    dx: f64,
    dy: f64,
    clamped: bool,
}

#[inline]
fn sample(p: &Projected, px: f64, py: f64, s: &RenderSettings) -> Option<Sample> {
    let dx = px - p.mean[0];
    let dy = py - p.mean[1];
    let [a, b, c] = p.conic;
    let power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy;
    if power > 0.0 || power < p.log_cut {
        return None;
    }
    let gauss = power.exp();
    let raw = p.opacity * gauss;
    let clamped = raw > s.alpha_max;
    let alpha = if clamped { s.alpha_max } else { raw };
    if alpha < s.alpha_min || alpha <= 0.0 {
        return None;
    }
    Some(Sample { alpha, gauss, dx, dy, clamped })
}

fn bin_tiles(projected: &[Projected], camera: &Camera, ts: usize) -> Vec<Vec<u32>> {
    let tiles_x = camera.width.div_ceil(ts);
    let tiles_y = camera.height.div_ceil(ts);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (k, p) in projected.iter().enumerate() {
        let [x0, x1, y0, y1] = p.tiles;
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                tiles[ty * tiles_x + tx].push(k as u32);
            }
        }
    }
    tiles
}

fn tile_pixels(tile: usize, camera: &Camera, ts: usize) -> impl Iterator<Item = (usize, usize)> {
    let tiles_x = camera.width.div_ceil(ts);
    let (tx, ty) = (tile % tiles_x, tile / tiles_x);
    let (w, h) = (camera.width, camera.height);
    (ty * ts..((ty + 1) * ts).min(h)).flat_map(move |y| (tx * ts..((tx + 1) * ts).min(w)).map(move |x| (x, y)))
}

/// Renders the frame's member points.
pub fn render(attrs: &FrameAttributes, camera: &Camera, settings: &RenderSettings) -> Result<(RenderOutput, RenderRecord)> {
    camera.validate()?;
    let mut projected = project(attrs, camera, settings);
    depth_sort(&mut projected);
    let ts = settings.tile_size.max(1);
    let tiles = bin_tiles(&projected, camera, ts);
    let (w, h) = (camera.width, camera.height);

    let blocks: Vec<Vec<(usize, [f64; 3], f64)>> = (0..tiles.len())
        .into_par_iter()
        .map(|tile| {
            let list = &tiles[tile];
            tile_pixels(tile, camera, ts)
                .map(|(x, y)| {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut t = 1.0;
                    let mut col = [0.0; 3];
                    for &k in list {
                        let p = &projected[k as usize];
                        let Some(s) = sample(p, px, py, settings) else { continue };
                        let next = t * (1.0 - s.alpha);
                        if next < settings.transmittance_min {
                            break;
                        }
                        for c in 0..3 {
                            col[c] += p.color[c] * s.alpha * t;
                        }
                        t = next;
                    }
                    for c in 0..3 {
                        col[c] += t * settings.background[c];
                    }
                    (y * w + x, col, 1.0 - t)
                })
                .collect()
        })
        .collect();

    let mut rgb = vec![0.0; w * h * 3];
    let mut alpha = vec![0.0; w * h];
    for block in blocks {
        for (pix, col, a) in block {
            rgb[pix * 3..pix * 3 + 3].copy_from_slice(&col);
            alpha[pix] = a;
        }
    }
    let mut radii = vec![0.0; attrs.len()];
    for p in &projected {
        radii[p.index] = p.radius;
    }
    let output = RenderOutput { width: w, height: h, rgb, alpha, order: projected.iter().map(|p| p.index).collect(), radii };
    let record = RenderRecord { points: attrs.len(), camera: *camera, settings: *settings, projected, tiles };
    Ok((output, record))
}

#[derive(Clone, Copy, Default)]
struct Grad2d {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

impl Grad2d {
    fn add(&mut self, o: &Grad2d) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

/// Backpropagates image gradients (`d_rgb`: `h x w x 3`, `d_alpha`: `h x w`)
/// to the attribute table that produced `record`.
pub fn render_backward(attrs: &FrameAttributes, record: &RenderRecord, d_rgb: &[f64], d_alpha: &[f64]) -> Result<RenderGrads> {
    let cam = &record.camera;
    let settings = &record.settings;
    let (w, h) = (cam.width, cam.height);
    if record.points != attrs.len() {
        return Err(Error::Contract(format!(
            "render record covers {} points but attributes have {}",
            record.points,
            attrs.len()
        )));
    }
    if d_rgb.len() != w * h * 3 || d_alpha.len() != w * h {
        return Err(Error::Contract(format!(
            "upstream image gradients have {} / {} entries for a {w}x{h} image",
            d_rgb.len(),
            d_alpha.len()
        )));
    }
    let projected = &record.projected;
    let ts = settings.tile_size.max(1);

    let partials: Vec<Vec<(u32, Grad2d)>> = (0..record.tiles.len())
        .into_par_iter()
        .map(|tile| {
            let list = &record.tiles[tile];
            let mut local = vec![Grad2d::default(); list.len()];
            let mut touched = vec![false; list.len()];
            let mut entries: Vec<(usize, Sample, f64)> = Vec::new();
            for (x, y) in tile_pixels(tile, cam, ts) {
                let pix = y * w + x;
                let g = [d_rgb[pix * 3], d_rgb[pix * 3 + 1], d_rgb[pix * 3 + 2]];
                let ga = d_alpha[pix];
                if g == [0.0; 3] && ga == 0.0 {
                    continue;
                }
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                entries.clear();
                let mut t = 1.0;
                for (slot, &k) in list.iter().enumerate() {
                    let p = &projected[k as usize];
                    let Some(s) = sample(p, px, py, settings) else { continue };
                    let next = t * (1.0 - s.alpha);
                    if next < settings.transmittance_min {
                        break;
                    }
                    entries.push((slot, s, t));
                    t = next;
                }
                let mut behind = settings.background;
                let mut behind_alpha = 0.0;
                for (slot, s, t_i) in entries.iter().rev() {
                    let p = &projected[list[*slot] as usize];
                    let lg = &mut local[*slot];
                    touched[*slot] = true;
                    let mut d_a = ga * t_i * (1.0 - behind_alpha);
                    for c in 0..3 {
                        d_a += g[c] * t_i * (p.color[c] - behind[c]);
                        lg.color[c] += g[c] * s.alpha * t_i;
                        behind[c] = p.color[c] * s.alpha + (1.0 - s.alpha) * behind[c];
                    }
                    behind_alpha = s.alpha + (1.0 - s.alpha) * behind_alpha;
                    if s.clamped {
                        continue;
                    }
                    lg.opacity += d_a * s.gauss;
                    let d_g = d_a * p.opacity * s.gauss;
                    let [a, b, c] = p.conic;
                    lg.mean[0] += d_g * (a * s.dx + b * s.dy);
                    lg.mean[1] += d_g * (b * s.dx + c * s.dy);
                    lg.conic[0] += -0.5 * d_g * s.dx * s.dx;
                    lg.conic[1] += -d_g * s.dx * s.dy;
                    lg.conic[2] += -0.5 * d_g * s.dy * s.dy;
                }
            }
            list.iter()
                .zip(local)
                .zip(touched)
                .filter(|(_, t)| *t)
                .map(|((&k, g), _)| (k, g))
                .collect()
        })
        .collect();

    let mut per_point = vec![Grad2d::default(); projected.len()];
    for tile in &partials {
        for (k, g) in tile {
            per_point[*k as usize].add(g);
        }
    }

    let n = attrs.len();
    let mut grads = AttributeGrads::zeros(n);
    let mut mean2d = vec![[0.0; 2]; n];
    let w_mat = cam.rotation_matrix();
    let center = cam.center();
    let chained: Vec<_> = projected
        .par_iter()
        .zip(per_point.par_iter())
        .map(|(p, g)| point_backward(attrs, cam, &w_mat, &center, p, g))
        .collect();
    for (p, (g, pg)) in projected.iter().zip(per_point.iter().zip(chained)) {
        let i = p.index;
        mean2d[i] = g.mean;
        grads.positions[i] = pg.position;
        grads.log_scales[i] = pg.log_scale;
        grads.rotations[i] = pg.rotation;
        grads.opacity_logits[i] = pg.opacity_logit;
        grads.sh[i] = pg.sh;
    }
    Ok(RenderGrads { attrs: grads, mean2d })
}

struct PointGrad {
    position: [f64; 3],
    log_scale: [f64; 3],
    rotation: [f64; 4],
    opacity_logit: f64,
    sh: [f64; SH_COEFFS],
}

fn point_backward(
    attrs: &FrameAttributes,
    cam: &Camera,
    w_mat: &Matrix3<f64>,
    center: &[f64; 3],
    p: &Projected,
    g: &Grad2d,
) -> PointGrad {
    let i = p.index;
    let opacity_logit = g.opacity * p.opacity * (1.0 - p.opacity);

    // Colour through the clamp, the SH basis and the view direction.
    let pos = attrs.positions[i];
    let v = [pos[0] - center[0], pos[1] - center[1], pos[2] - center[2]];
    let vn = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let dir = normalize3(&v);
    let basis = sh_basis(&dir);
    let d_col: [f64; 3] = std::array::from_fn(|c| if p.color_raw[c] < 0.0 { 0.0 } else { g.color[c] });
    let mut sh = [0.0; SH_COEFFS];
    let mut d_basis = [0.0; SH_BASIS];
    for k in 0..SH_BASIS {
        for c in 0..3 {
            sh[k * 3 + c] = basis[k] * d_col[c];
            d_basis[k] += attrs.sh[i][k * 3 + c] * d_col[c];
        }
    }
    let d_dir = [-SH_C1 * d_basis[3], -SH_C1 * d_basis[1], SH_C1 * d_basis[2]];
    let mut position = [0.0; 3];
    if vn > 0.0 {
        let dot = dir[0] * d_dir[0] + dir[1] * d_dir[1] + dir[2] * d_dir[2];
        for k in 0..3 {
            position[k] = (d_dir[k] - dir[k] * dot) / vn;
        }
    }

    // Conic -> dilated covariance.
    let k_mat = Matrix2::new(p.conic[0], p.conic[1], p.conic[1], p.conic[2]);
    let d_k = Matrix2::new(g.conic[0], 0.5 * g.conic[1], 0.5 * g.conic[1], g.conic[2]);
    let d_cov = -(k_mat * d_k * k_mat);

    let pc = Vector3::from(p.cam);
    let j = jacobian(cam, &pc);
    let t = j * w_mat;
    let sigma = world_covariance(&attrs.log_scales[i], &attrs.rotations[i]);
    let d_sigma = t.transpose() * d_cov * t;
    let d_t = 2.0 * d_cov * t * sigma;
    let d_j = d_t * w_mat.transpose();

    let (x, y, z) = (pc[0], pc[1], pc[2]);
    let (fx, fy) = (cam.fx, cam.fy);
    let mut d_pc = j.transpose() * Vector2::from(g.mean);
    d_pc[0] += d_j[(0, 2)] * (-fx / (z * z));
    d_pc[1] += d_j[(1, 2)] * (-fy / (z * z));
    d_pc[2] += d_j[(0, 0)] * (-fx / (z * z))
        + d_j[(0, 2)] * (2.0 * fx * x / (z * z * z))
        + d_j[(1, 1)] * (-fy / (z * z))
        + d_j[(1, 2)] * (2.0 * fy * y / (z * z * z));
    let d_world = w_mat.transpose() * d_pc;
    for k in 0..3 {
        position[k] += d_world[k];
    }

    // Σ = M Mᵀ with M = R S.
    let r = quat_to_matrix(&attrs.rotations[i]);
    let s = Vector3::from(attrs.log_scales[i].map(f64::exp));
    let m = r * Matrix3::from_diagonal(&s);
    let d_m = 2.0 * d_sigma * m;
    let d_r = d_m * Matrix3::from_diagonal(&s);
    let rt_dm = r.transpose() * d_m;
    let log_scale = std::array::from_fn(|k| rt_dm[(k, k)] * s[k]);
    let rotation = quat_to_matrix_vjp(&attrs.rotations[i], &d_r);

    PointGrad { position, log_scale, rotation, opacity_logit, sh }
}

/// sRGB transfer function applied to a linear value in `[0, 1]`.
pub fn linear_to_srgb(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.003_130_8 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

pub fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.040_45 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

/// Writes a linear RGB buffer as an 8-bit sRGB PNG.
pub fn save_png(path: &Path, rgb: &[f64], width: usize, height: usize) -> Result<()> {
    let bytes: Vec<u8> = rgb.iter().map(|&v| (linear_to_srgb(v) * 255.0).round() as u8).collect();
    let img = image::RgbImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::InvalidInput(format!("buffer does not match {width}x{height} RGB")))?;
    img.save(path)?;
    Ok(())
}

/// Writes a single-channel buffer in `[0, 1]` as an 8-bit grayscale PNG.
pub fn save_gray_png(path: &Path, values: &[f64], width: usize, height: usize) -> Result<()> {
    let bytes: Vec<u8> = values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = image::GrayImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::InvalidInput(format!("buffer does not match {width}x{height}")))?;
    img.save(path)?;
    Ok(())
}

/// Loads an 8-bit sRGB PNG into a linear RGB buffer.
pub fn load_png(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let lut: Vec<f64> = (0..256).map(|b| srgb_to_linear(b as f64 / 255.0)).collect();
    Ok((img.into_raw().into_iter().map(|b| lut[b as usize]).collect(), w as usize, h as usize))
}

pub fn load_gray_png(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok((img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect(), w as usize, h as usize))
}

const F32_MAGIC: &[u8; 4] = b"F32I";

/// Lossless dump: magic, width, height and channels as u32, then
/// little-endian f32 samples.
pub fn save_f32(path: &Path, data: &[f64], width: usize, height: usize, channels: usize) -> Result<()> {
    if data.len() != width * height * channels {
        return Err(Error::InvalidInput("f32 dump size mismatch".into()));
    }
    let mut out = Vec::with_capacity(16 + data.len() * 4);
    out.extend_from_slice(F32_MAGIC);
    for v in [width, height, channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_f32(path: &Path) -> Result<(Vec<f32>, usize, usize, usize)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 || &bytes[..4] != F32_MAGIC {
        return Err(Error::Format("not an f32 image dump".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (w, h, c) = (word(0), word(1), word(2));
    if bytes.len() != 16 + w * h * c * 4 {
        return Err(Error::Format("f32 dump length does not match its header".into()));
    }
    let data = bytes[16..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    Ok((data, w, h, c))
}
