//! Synthetic multi-view dynamic scenes and their on-disk layout.
//!
//! Images are produced by analytic ray casting against the primitives, which
//! shares no code with the splatting renderer. Layout:
//!
//! ```text
//! scene/manifest.json
//! scene/cameras.json
//! scene/cam{i}/frame{t:04}.png   8-bit sRGB
//! scene/cam{i}/mask{t:04}.png    8-bit, 0 or 255
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::ViewRole;
use crate::render::{load_gray_png, load_png, save_gray_png, save_png, Camera};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
}

/// Centre position at a frame; linear interpolation between keys, clamped
/// outside them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub frame: f64,
    pub position: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub color: [f64; 3],
    pub keyframes: Vec<Keyframe>,
    /// First frame at which the primitive is visible; always visible if `None`.
    #[serde(default)]
    pub appears_at: Option<usize>,
}

impl Primitive {
    pub fn position(&self, frame: f64) -> [f64; 3] {
        let keys = &self.keyframes;
        if keys.is_empty() {
            return [0.0; 3];
        }
        if frame <= keys[0].frame {
            return keys[0].position;
        }
        for pair in keys.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if frame <= b.frame {
                let s = if b.frame > a.frame { (frame - a.frame) / (b.frame - a.frame) } else { 1.0 };
                return std::array::from_fn(|k| a.position[k] + s * (b.position[k] - a.position[k]));
            }
        }
        keys[keys.len() - 1].position
    }

    pub fn visible_at(&self, frame: usize) -> bool {
        self.appears_at.is_none_or(|t0| frame >= t0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigSpec {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub distance: f64,
    pub reference_azimuth_deg: f64,
    pub reference_elevation_deg: f64,
    pub anchor_azimuths_deg: Vec<f64>,
    pub anchor_elevation_deg: f64,
    pub holdout_azimuths_deg: Vec<f64>,
    pub holdout_elevation_deg: f64,
}

impl Default for RigSpec {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            focal: 175.0,
            distance: 2.5,
            reference_azimuth_deg: 0.0,
            reference_elevation_deg: 0.0,
            anchor_azimuths_deg: vec![30.0, 90.0, 150.0, 210.0, 270.0, 330.0],
            anchor_elevation_deg: 20.0,
            holdout_azimuths_deg: vec![15.0, 120.0, 240.0],
            holdout_elevation_deg: -10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub name: String,
    pub frames: usize,
    pub fps: f64,
    pub primitives: Vec<Primitive>,
    #[serde(default)]
    pub rig: RigSpec,
    /// Direction towards the light.
    pub light_dir: [f64; 3],
    pub ambient: f64,
    /// Supersampling factor per axis for RGB.
    pub supersample: usize,
    /// Standard deviation of additive RGB noise, drawn from the scene seed.
    #[serde(default)]
    pub noise_std: f64,
}

impl SceneSpec {
    /// A slowly drifting sphere that sprouts a smaller sphere facing the
    /// reference camera halfway through the clip.
    pub fn sudden_appearance() -> Self {
        let frames = 14;
        let drift = |x: f64, y: f64| vec![
            Keyframe { frame: 0.0, position: [-0.08 + x, y, 0.0] },
            Keyframe { frame: (frames - 1) as f64, position: [0.08 + x, 0.04 + y, 0.0] },
        ];
        let mut bump = drift(0.0, 0.0);
        for k in &mut bump {
            k.position[2] -= 0.5;
            k.position[1] += 0.05;
        }
        Self {
            name: "sudden-appearance-sphere".into(),
            frames,
            fps: 10.0,
            primitives: vec![
                Primitive { shape: Shape::Sphere { radius: 0.5 }, color: [0.85, 0.6, 0.25], keyframes: drift(0.0, 0.0), appears_at: None },
                Primitive { shape: Shape::Sphere { radius: 0.16 }, color: [0.15, 0.3, 0.9], keyframes: bump, appears_at: Some(7) },
            ],
            rig: RigSpec::default(),
            light_dir: [0.3, 0.8, 0.5],
            ambient: 0.35,
            supersample: 3,
            noise_std: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::InvalidInput("scene needs at least one frame".into()));
        }
        if self.primitives.is_empty() {
            return Err(Error::InvalidInput("scene needs at least one primitive".into()));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some(t0) = p.appears_at {
                if t0 >= self.frames {
                    return Err(Error::InvalidInput(format!("primitive {i} appears at frame {t0} beyond the clip")));
                }
            }
        }
        if self.supersample == 0 {
            return Err(Error::InvalidInput("supersample must be at least 1".into()));
        }
        Ok(())
    }

    /// Normalized timestamp of a frame.
    pub fn time_of(&self, frame: usize) -> f64 {
        normalized_time(frame, self.frames)
    }
}

pub fn normalized_time(frame: usize, frames: usize) -> f64 {
    if frames <= 1 {
        0.0
    } else {
        frame as f64 / (frames - 1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraEntry {
    pub name: String,
    pub role: ViewRole,
    pub camera: Camera,
}

fn orbit_camera(rig: &RigSpec, azimuth_deg: f64, elevation_deg: f64) -> Result<Camera> {
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    let eye = [rig.distance * el.cos() * az.sin(), rig.distance * el.sin(), -rig.distance * el.cos() * az.cos()];
    Camera::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], rig.focal, rig.width, rig.height)
}

/// Reference camera first, then anchors, then held-out cameras.
pub fn build_rig(rig: &RigSpec) -> Result<Vec<CameraEntry>> {
    let mut cams = vec![CameraEntry {
        name: "reference".into(),
        role: ViewRole::Reference,
        camera: orbit_camera(rig, rig.reference_azimuth_deg, rig.reference_elevation_deg)?,
    }];
    for &az in &rig.anchor_azimuths_deg {
        cams.push(CameraEntry {
            name: format!("anchor_{az:.0}"),
            role: ViewRole::Anchor,
            camera: orbit_camera(rig, az, rig.anchor_elevation_deg)?,
        });
    }
    for &az in &rig.holdout_azimuths_deg {
        cams.push(CameraEntry {
            name: format!("holdout_{az:.0}"),
            role: ViewRole::Holdout,
            camera: orbit_camera(rig, az, rig.holdout_elevation_deg)?,
        });
    }
    Ok(cams)
}

/// One image with its foreground mask, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub rgb: Vec<f64>,
    pub mask: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub seed: u64,
    pub cameras: Vec<CameraEntry>,
    /// `views[camera][frame]`.
    pub views: Vec<Vec<View>>,
}

impl Dataset {
    pub fn frames(&self) -> usize {
        self.spec.frames
    }

    pub fn indices_with_role(&self, role: ViewRole) -> Vec<usize> {
        self.cameras.iter().enumerate().filter(|(_, c)| c.role == role).map(|(i, _)| i).collect()
    }

    /// Reference and anchor cameras.
    pub fn training_cameras(&self) -> Vec<usize> {
        self.cameras.iter().enumerate().filter(|(_, c)| c.role != ViewRole::Holdout).map(|(i, _)| i).collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    t: f64,
    normal: [f64; 3],
    primitive: usize,
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn intersect(shape: &Shape, center: &[f64; 3], origin: &[f64; 3], dir: &[f64; 3]) -> Option<(f64, [f64; 3])> {
    let o: [f64; 3] = std::array::from_fn(|k| origin[k] - center[k]);
    match shape {
        Shape::Sphere { radius } => {
            let b = dot(&o, dir);
            let c = dot(&o, &o) - radius * radius;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let t = -b - disc.sqrt();
            if t <= 1e-9 {
                return None;
            }
            let p: [f64; 3] = std::array::from_fn(|k| (o[k] + t * dir[k]) / radius);
            Some((t, p))
        }
        Shape::Box { half_extents } => {
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            let mut axis = 0;
            for k in 0..3 {
                if dir[k].abs() < 1e-15 {
                    if o[k].abs() > half_extents[k] {
                        return None;
                    }
                    continue;
                }
                let a = (-half_extents[k] - o[k]) / dir[k];
                let b = (half_extents[k] - o[k]) / dir[k];
                let (near, far) = if a < b { (a, b) } else { (b, a) };
                if near > t0 {
                    t0 = near;
                    axis = k;
                }
                t1 = t1.min(far);
            }
            if t0 > t1 || t0 <= 1e-9 {
                return None;
            }
            let mut n = [0.0; 3];
            n[axis] = -dir[axis].signum();
            Some((t0, n))
        }
    }
}

fn cast(spec: &SceneSpec, frame: usize, origin: &[f64; 3], dir: &[f64; 3]) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (i, p) in spec.primitives.iter().enumerate() {
        if !p.visible_at(frame) {
            continue;
        }
        let c = p.position(frame as f64);
        if let Some((t, normal)) = intersect(&p.shape, &c, origin, dir) {
            if best.is_none_or(|b| t < b.t) {
                best = Some(Hit { t, normal, primitive: i });
            }
        }
    }
    best
}

fn shade(spec: &SceneSpec, hit: &Hit, light: &[f64; 3]) -> [f64; 3] {
    let lambert = dot(&hit.normal, light).max(0.0);
    let k = spec.ambient + (1.0 - spec.ambient) * lambert;
    spec.primitives[hit.primitive].color.map(|c| c * k)
}

fn pixel_ray(cam: &Camera, u: f64, v: f64) -> ([f64; 3], [f64; 3]) {
    let d_cam = [(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0];
    let r = &cam.rotation;
    let d: [f64; 3] = std::array::from_fn(|k| r[0][k] * d_cam[0] + r[1][k] * d_cam[1] + r[2][k] * d_cam[2]);
    let n = dot(&d, &d).sqrt();
    (cam.center(), d.map(|x| x / n))
}

/// Renders one view analytically. The mask tests the ray through the pixel
/// centre; RGB averages a regular `supersample²` grid.
pub fn render_view(spec: &SceneSpec, cam: &Camera, frame: usize) -> View {
    let (w, h) = (cam.width, cam.height);
    let ln = dot(&spec.light_dir, &spec.light_dir).sqrt();
    let light = spec.light_dir.map(|x| x / ln);
    let ss = spec.supersample;
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut rgb = vec![0.0; w * 3];
            let mut mask = vec![0.0; w];
            for x in 0..w {
                let (o, d) = pixel_ray(cam, x as f64 + 0.5, y as f64 + 0.5);
                mask[x] = if cast(spec, frame, &o, &d).is_some() { 1.0 } else { 0.0 };
                let mut acc = [0.0; 3];
                for sy in 0..ss {
                    for sx in 0..ss {
                        let u = x as f64 + (sx as f64 + 0.5) / ss as f64;
                        let v = y as f64 + (sy as f64 + 0.5) / ss as f64;
                        let (o, d) = pixel_ray(cam, u, v);
                        if let Some(hit) = cast(spec, frame, &o, &d) {
                            let c = shade(spec, &hit, &light);
                            for k in 0..3 {
                                acc[k] += c[k];
                            }
                        }
                    }
                }
                let n = (ss * ss) as f64;
                for k in 0..3 {
                    rgb[x * 3 + k] = acc[k] / n;
                }
            }
            (rgb, mask)
        })
        .collect();
    let mut view = View { rgb: Vec::with_capacity(w * h * 3), mask: Vec::with_capacity(w * h) };
    for (r, m) in rows {
        view.rgb.extend(r);
        view.mask.extend(m);
    }
    view
}

/// Generates every (camera, frame) view of `spec`.
pub fn gen_scene(spec: &SceneSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let cameras = build_rig(&spec.rig)?;
    let mut views: Vec<Vec<View>> = cameras
        .iter()
        .map(|c| (0..spec.frames).map(|t| render_view(spec, &c.camera, t)).collect())
        .collect();
    if spec.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in views.iter_mut().flatten() {
            for x in &mut v.rgb {
                *x = (*x + spec.noise_std * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0);
            }
        }
    }
    Ok(Dataset { spec: spec.clone(), seed, cameras, views })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    name: String,
    frames: usize,
    fps: f64,
    width: usize,
    height: usize,
    seed: u64,
    cameras: usize,
    spec: SceneSpec,
}

pub fn frame_path(dir: &Path, camera: usize, frame: usize) -> std::path::PathBuf {
    dir.join(format!("cam{camera}")).join(format!("frame{frame:04}.png"))
}

pub fn mask_path(dir: &Path, camera: usize, frame: usize) -> std::path::PathBuf {
    dir.join(format!("cam{camera}")).join(format!("mask{frame:04}.png"))
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest {
        name: ds.spec.name.clone(),
        frames: ds.spec.frames,
        fps: ds.spec.fps,
        width: ds.spec.rig.width,
        height: ds.spec.rig.height,
        seed: ds.seed,
        cameras: ds.cameras.len(),
        spec: ds.spec.clone(),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    std::fs::write(dir.join("cameras.json"), serde_json::to_string_pretty(&ds.cameras)?)?;
    for (ci, cam) in ds.cameras.iter().enumerate() {
        std::fs::create_dir_all(dir.join(format!("cam{ci}")))?;
        let (w, h) = (cam.camera.width, cam.camera.height);
        for (t, v) in ds.views[ci].iter().enumerate() {
            save_png(&frame_path(dir, ci, t), &v.rgb, w, h)?;
            save_gray_png(&mask_path(dir, ci, t), &v.mask, w, h)?;
        }
    }
    Ok(())
}

pub fn load_cameras(path: &Path) -> Result<Vec<CameraEntry>> {
    let cams: Vec<CameraEntry> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    for c in &cams {
        c.camera.validate()?;
    }
    Ok(cams)
}

/// Loads a dataset; PNG pixels are decoded back to linear values and masks
/// are binarized.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let cameras = load_cameras(&dir.join("cameras.json"))?;
    if cameras.is_empty() {
        return Err(Error::InvalidInput("dataset has no cameras".into()));
    }
    let mut views = Vec::with_capacity(cameras.len());
    for (ci, cam) in cameras.iter().enumerate() {
        let mut per_frame = Vec::with_capacity(manifest.frames);
        for t in 0..manifest.frames {
            let (rgb, w, h) = load_png(&frame_path(dir, ci, t))?;
            let (mask, mw, mh) = load_gray_png(&mask_path(dir, ci, t))?;
            if (w, h) != (cam.camera.width, cam.camera.height) || (mw, mh) != (w, h) {
                return Err(Error::InvalidInput(format!("camera {ci} frame {t}: image size mismatch")));
            }
            let mask = mask.into_iter().map(|m| if m >= 0.5 { 1.0 } else { 0.0 }).collect();
            per_frame.push(View { rgb, mask });
        }
        views.push(per_frame);
    }
    Ok(Dataset { spec: manifest.spec, seed: manifest.seed, cameras, views })
}
