//! Two-stage optimization: a static fit of the canonical cloud on frame 0,
//! then the dynamic fit over sub-clips with per-frame density control.

use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::deform::{AttributeGrads, DeformConfig, DeformationNet, FrameAttributes};
use crate::density::{DensityConfig, DensityLedger, DensityRow};
use crate::error::{Error, Result};
use crate::gaussian::{Gaussian, GaussianCloud, Lineage, IDENTITY_QUAT};
use crate::loss::{cal, frame_loss, LossBreakdown, LossWeights, ViewSample};
use crate::model::{Carry, FramePass, Model};
use crate::optim::{Adam, ExpDecay};
use crate::rectifier::{FeatureRow, RectifiedFrame, RectifierConfig, RectifierGrads, TemporalRectifier};
use crate::render::{render, render_backward, RenderSettings};
use crate::scene::Dataset;

/// Which rectification mechanisms are switched off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    #[default]
    None,
    Temporal,
    Spatial,
    Both,
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "temporal" => Ok(Self::Temporal),
            "spatial" => Ok(Self::Spatial),
            "both" => Ok(Self::Both),
            other => Err(Error::Config(format!("unknown ablation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub static_steps: usize,
    pub dynamic_steps: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub lr_position: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub lr_opacity: f64,
    pub lr_sh: f64,
    pub lr_deform: f64,
    pub lr_rectifier: f64,
    /// Sub-clip length `T_s`.
    pub clip_len: usize,
    /// Anchor views rendered per frame in a dynamic step; 0 means all.
    pub anchors_per_frame: usize,
    pub init_points: usize,
    pub init_opacity: f64,
    /// Half-width of the cube sampled for the initial visual hull.
    pub init_extent: f64,
    /// Rectifier on.
    pub temporal: bool,
    /// Per-frame densify/prune during the dynamic stage.
    pub spatial: bool,
    pub static_densify_until: usize,
    pub densify_until: usize,
    pub log_every: usize,
    pub weights: LossWeights,
    pub render: RenderSettings,
    pub static_density: DensityConfig,
    pub density: DensityConfig,
    pub deform: DeformConfig,
    pub rectifier: RectifierConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            static_steps: 2000,
            dynamic_steps: 10_000,
            lr_init: 1.6e-4,
            lr_final: 1.6e-6,
            lr_position: 1.0,
            lr_scale: 5.0,
            lr_rotation: 5.0,
            lr_opacity: 300.0,
            lr_sh: 16.0,
            lr_deform: 1.0,
            lr_rectifier: 0.1,
            clip_len: 4,
            anchors_per_frame: 0,
            init_points: 2000,
            init_opacity: 0.1,
            init_extent: 1.0,
            temporal: true,
            spatial: true,
            static_densify_until: 1500,
            densify_until: 7000,
            log_every: 100,
            weights: LossWeights::default(),
            render: RenderSettings::default(),
            static_density: DensityConfig::default(),
            density: DensityConfig::default(),
            deform: DeformConfig::default(),
            rectifier: RectifierConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Parses a TOML document of `key = value` lines; nested settings use
    /// tables or dotted keys (`density.lambda = 0.05`).
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        match ablation {
            Ablation::None => {}
            Ablation::Temporal => self.temporal = false,
            Ablation::Spatial => self.spatial = false,
            Ablation::Both => {
                self.temporal = false;
                self.spatial = false;
            }
        }
        self
    }

    pub fn total_steps(&self) -> usize {
        self.static_steps + self.dynamic_steps
    }

    pub fn schedule(&self) -> ExpDecay {
        ExpDecay { init: self.lr_init, end: self.lr_final, total_steps: self.total_steps().max(1) }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr_init > 0.0 && self.lr_final > 0.0) {
            return bad(format!("learning rates must be positive: {} {}", self.lr_init, self.lr_final));
        }
        if self.clip_len == 0 {
            return bad("clip_len must be at least 1".into());
        }
        if self.init_points == 0 {
            return bad("init_points must be at least 1".into());
        }
        if !(self.init_opacity > 0.0 && self.init_opacity < 1.0) {
            return bad(format!("init_opacity {} outside (0, 1)", self.init_opacity));
        }
        for d in [&self.static_density, &self.density] {
            if !(d.lambda > 0.0 && d.lambda < 1.0) {
                return bad(format!("lambda {} outside (0, 1)", d.lambda));
            }
            if d.interval == 0 {
                return bad("density interval must be at least 1".into());
            }
        }
        if self.rectifier.buffer_len == 0 {
            return bad("rectifier buffer_len must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressRow {
    pub stage: String,
    pub step: usize,
    pub lr: f64,
    pub photometric: f64,
    pub rec: f64,
    pub mask: f64,
    pub total: f64,
    pub points: usize,
    pub min_count: usize,
    pub max_count: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub progress: Vec<ProgressRow>,
    pub density: Vec<DensityRow>,
    pub steps: usize,
    pub render: RenderSettings,
    pub seed: u64,
}

impl TrainOutcome {
    pub fn provenance(&self) -> checkpoint::Provenance {
        checkpoint::Provenance { render: self.render, step: self.steps, seed: self.seed, density_log: self.density.clone() }
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::to_bytes(&self.model, &self.provenance())
    }
}

/// Samples points inside the frame-0 visual hull of the training masks.
pub fn init_from_masks(ds: &Dataset, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<GaussianCloud> {
    let cams = ds.training_cameras();
    if cams.is_empty() {
        return Err(Error::InvalidInput("dataset has no training cameras".into()));
    }
    let reference = ds.indices_with_role(crate::loss::ViewRole::Reference).first().copied().unwrap_or(cams[0]);
    let inside = |p: &[f64; 3], cam: usize| -> Option<usize> {
        let c = &ds.cameras[cam].camera;
        let q = c.to_camera(p);
        if q[2] <= 1e-6 {
            return None;
        }
        let uv = c.project_point(&q);
        if uv[0] < 0.0 || uv[1] < 0.0 || uv[0] >= c.width as f64 || uv[1] >= c.height as f64 {
            return None;
        }
        let idx = uv[1] as usize * c.width + uv[0] as usize;
        (ds.views[cam][0].mask[idx] >= 0.5).then_some(idx)
    };
    let e = cfg.init_extent;
    let mut kept = Vec::with_capacity(cfg.init_points);
    let budget = cfg.init_points.saturating_mul(2000);
    let mut tries = 0usize;
    while kept.len() < cfg.init_points && tries < budget {
        tries += 1;
        let p: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-e..e));
        if cams.iter().all(|&c| inside(&p, c).is_some()) {
            kept.push(p);
        }
    }
    if kept.is_empty() {
        return Err(Error::InvalidInput("no sample fell inside every training mask".into()));
    }
    let volume = (2.0 * e).powi(3) * kept.len() as f64 / tries as f64;
    let spacing = (volume / kept.len() as f64).cbrt();
    let scale = (0.5 * spacing).max(1e-4);
    let points = kept
        .iter()
        .map(|p| {
            let rgb = inside(p, reference)
                .map(|i| std::array::from_fn(|k| ds.views[reference][0].rgb[i * 3 + k].clamp(0.02, 0.98)))
                .unwrap_or([0.5; 3]);
            Gaussian::new(*p, [scale; 3], IDENTITY_QUAT, cfg.init_opacity, rgb)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GaussianCloud::from_points(points))
}

/// Adam state for the canonical attribute table, one block per field.
#[derive(Debug, Clone)]
struct CanonicalOptim {
    position: Adam,
    scale: Adam,
    rotation: Adam,
    opacity: Adam,
    sh: Adam,
}

fn step_field<const K: usize>(
    adam: &mut Adam,
    lr: f64,
    points: &mut [Gaussian],
    grads: &[[f64; K]],
    get: impl Fn(&Gaussian) -> [f64; K],
    set: impl Fn(&mut Gaussian, [f64; K]),
) {
    let mut flat: Vec<f64> = points.iter().flat_map(&get).collect();
    let g: Vec<f64> = grads.iter().flatten().copied().collect();
    adam.step(&mut flat, &g, lr);
    for (p, chunk) in points.iter_mut().zip(flat.chunks_exact(K)) {
        set(p, chunk.try_into().expect("row width"));
    }
}

impl CanonicalOptim {
    fn new(n: usize) -> Self {
        Self {
            position: Adam::new(n * 3),
            scale: Adam::new(n * 3),
            rotation: Adam::new(n * 4),
            opacity: Adam::new(n),
            sh: Adam::new(n * 12),
        }
    }

    fn remap(&mut self, sources: &[Option<usize>]) {
        let rows = self.opacity.len();
        let sources: Vec<Option<usize>> = sources.iter().map(|s| s.filter(|&i| i < rows)).collect();
        for (adam, stride) in [
            (&mut self.position, 3),
            (&mut self.scale, 3),
            (&mut self.rotation, 4),
            (&mut self.opacity, 1),
            (&mut self.sh, 12),
        ] {
            adam.remap_rows(stride, &sources);
        }
    }

    fn step(&mut self, cloud: &mut GaussianCloud, g: &AttributeGrads, lr: f64, cfg: &TrainConfig) {
        let pts = &mut cloud.points;
        step_field(&mut self.position, lr * cfg.lr_position, pts, &g.positions, |p| p.position, |p, v| p.position = v);
        step_field(&mut self.scale, lr * cfg.lr_scale, pts, &g.log_scales, |p| p.log_scale, |p, v| p.log_scale = v);
        step_field(&mut self.rotation, lr * cfg.lr_rotation, pts, &g.rotations, |p| p.rotation, |p, v| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            p.rotation = if n > 1e-12 { v.map(|x| x / n) } else { IDENTITY_QUAT };
        });
        let og: Vec<[f64; 1]> = g.opacity_logits.iter().map(|&x| [x]).collect();
        step_field(&mut self.opacity, lr * cfg.lr_opacity, pts, &og, |p| [p.opacity_logit], |p, v| p.opacity_logit = v[0]);
        step_field(&mut self.sh, lr * cfg.lr_sh, pts, &g.sh, |p| p.sh, |p, v| p.sh = v);
    }
}

/// Adds `rows` (aligned with `members`) into the canonical gradient table.
fn scatter(into: &mut AttributeGrads, members: &[usize], rows: &AttributeGrads) {
    for (r, &i) in members.iter().enumerate() {
        for k in 0..3 {
            into.positions[i][k] += rows.positions[r][k];
            into.log_scales[i][k] += rows.log_scales[r][k];
        }
        for k in 0..4 {
            into.rotations[i][k] += rows.rotations[r][k];
        }
        into.opacity_logits[i] += rows.opacity_logits[r];
        for k in 0..12 {
            into.sh[i][k] += rows.sh[r][k];
        }
    }
}

/// Loss and attribute gradients of one frame over `cams`. Views render and
/// differentiate in parallel and are reduced in camera order.
struct FrameEval {
    loss: LossBreakdown,
    grads: AttributeGrads,
    /// Per view: screen-space mean gradients and visibility.
    screen: Vec<(Vec<[f64; 2]>, Vec<bool>)>,
}

fn evaluate_frame(
    ds: &Dataset,
    cfg: &TrainConfig,
    attrs: &FrameAttributes,
    frame: usize,
    cams: &[usize],
    scale: f64,
) -> Result<FrameEval> {
    let renders = cams
        .par_iter()
        .map(|&c| render(attrs, &ds.cameras[c].camera, &cfg.render))
        .collect::<Result<Vec<_>>>()?;
    let samples: Vec<ViewSample<'_>> = cams
        .iter()
        .zip(&renders)
        .map(|(&c, (out, _))| ViewSample {
            role: ds.cameras[c].role,
            rgb: &out.rgb,
            alpha: &out.alpha,
            target_rgb: &ds.views[c][frame].rgb,
            target_mask: &ds.views[c][frame].mask,
        })
        .collect();
    let (loss, view_grads) = frame_loss(&samples, &cfg.weights, scale);
    let backs = renders
        .par_iter()
        .zip(&view_grads)
        .map(|((_, rec), (d_rgb, d_alpha))| render_backward(attrs, rec, d_rgb, d_alpha))
        .collect::<Result<Vec<_>>>()?;
    let mut grads = AttributeGrads::zeros(attrs.len());
    let mut screen = Vec::with_capacity(backs.len());
    for (b, (out, _)) in backs.into_iter().zip(&renders) {
        grads.add_assign(&b.attrs);
        screen.push((b.mean2d, out.radii.iter().map(|&r| r > 0.0).collect()));
    }
    Ok(FrameEval { loss, grads, screen })
}

fn in_window(step: usize, cfg: &DensityConfig, until: usize) -> bool {
    step >= cfg.warmup && step < until && (step + 1) % cfg.interval == 0
}

pub struct Trainer<'a> {
    ds: &'a Dataset,
    cfg: TrainConfig,
    seed: u64,
    rng: ChaCha8Rng,
    pub model: Model,
    canon: CanonicalOptim,
    deform_opt: Adam,
    rect_opt: [Adam; 3],
    step: usize,
    progress: Vec<ProgressRow>,
    density: Vec<DensityRow>,
    reference: Vec<usize>,
    anchors: Vec<usize>,
    /// Latest correlated feature and rectified attributes of each frame,
    /// used to warm the temporal state at a sub-clip start.
    feature_cache: Vec<Option<FeatureRow>>,
    history_cache: Vec<Option<RectifiedFrame>>,
}

impl<'a> Trainer<'a> {
    pub fn new(ds: &'a Dataset, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if ds.frames() == 0 || ds.views.iter().any(|v| v.len() != ds.frames()) {
            return Err(Error::InvalidInput("dataset must hold every (camera, frame) view".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cloud = init_from_masks(ds, &cfg, &mut rng)?;
        let deform = DeformationNet::new(cfg.deform.clone(), seed.wrapping_mul(0x9E37_79B9).wrapping_add(11));
        let rectifier = TemporalRectifier::new(cfg.rectifier.clone(), seed.wrapping_mul(0x9E37_79B9).wrapping_add(23));
        let model = Model::new(cloud, deform, rectifier, ds.frames(), cfg.temporal)?;
        let canon = CanonicalOptim::new(model.cloud.len());
        let deform_opt = Adam::new(model.deform.params.len());
        let r = &model.rectifier;
        let rect_opt =
            [Adam::new(r.ssm.params.len()), Adam::new(r.scale_head.params.len()), Adam::new(r.rotation_head.params.len())];
        let reference = ds.indices_with_role(crate::loss::ViewRole::Reference);
        let anchors = ds.indices_with_role(crate::loss::ViewRole::Anchor);
        if reference.is_empty() && anchors.is_empty() {
            return Err(Error::InvalidInput("dataset has no training cameras".into()));
        }
        let frames = ds.frames();
        Ok(Self {
            ds,
            cfg,
            seed,
            rng,
            model,
            canon,
            deform_opt,
            rect_opt,
            step: 0,
            progress: Vec::new(),
            density: Vec::new(),
            reference,
            anchors,
            feature_cache: vec![None; frames],
            history_cache: vec![None; frames],
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn lr(&self) -> f64 {
        self.cfg.schedule().at(self.step)
    }

    fn log(&mut self, stage: &str, loss: &LossBreakdown, lr: f64) {
        let counts = self.model.counts();
        let row = ProgressRow {
            stage: stage.into(),
            step: self.step,
            lr,
            photometric: loss.photometric,
            rec: loss.rec,
            mask: loss.mask,
            total: loss.total,
            points: self.model.cloud.len(),
            min_count: counts.iter().copied().min().unwrap_or(0),
            max_count: counts.iter().copied().max().unwrap_or(0),
        };
        if self.cfg.log_every > 0 && self.step % self.cfg.log_every == 0 {
            log::info!(
                "{stage} step {} lr {:.3e} loss {:.5} points {} counts {}..{}",
                row.step,
                row.lr,
                row.total,
                row.points,
                row.min_count,
                row.max_count
            );
        }
        self.progress.push(row);
    }

    fn diverged(&self, loss: f64, dump: Option<&Path>) -> Error {
        if let Some(path) = dump {
            let prov = checkpoint::Provenance {
                render: self.cfg.render,
                step: self.step,
                seed: self.seed,
                density_log: self.density.clone(),
            };
            if let Err(e) = checkpoint::save(path, &self.model, &prov) {
                log::error!("state dump to {} failed: {e}", path.display());
            }
        }
        Error::Diverged { step: self.step, loss }
    }

    /// Fits the canonical cloud to frame 0 with one training view per step.
    /// Density control runs on frame 0 alone; its membership is then copied
    /// to every frame.
    pub fn train_static(&mut self, dump: Option<&Path>) -> Result<()> {
        let mut ledger = DensityLedger::new(&self.model.cloud, 1)?;
        let cams: Vec<usize> = self.reference.iter().chain(&self.anchors).copied().collect();
        for local in 0..self.cfg.static_steps {
            let lr = self.lr();
            let cam = cams[self.rng.gen_range(0..cams.len())];
            let members = ledger.member_indices(0, &self.model.cloud)?;
            let attrs = FrameAttributes::from_cloud(&self.model.cloud.subset(&members), 0);
            let eval = evaluate_frame(self.ds, &self.cfg, &attrs, 0, &[cam], 1.0)?;
            if !eval.loss.total.is_finite() {
                return Err(self.diverged(eval.loss.total, dump));
            }
            for (g, vis) in &eval.screen {
                ledger.accumulate_visible(0, &attrs.lineages, g, vis)?;
            }
            let mut grads = AttributeGrads::zeros(self.model.cloud.len());
            scatter(&mut grads, &members, &eval.grads);
            self.canon.step(&mut self.model.cloud, &grads, lr, &self.cfg);
            self.log("static", &eval.loss, lr);
            if in_window(local, &self.cfg.static_density, self.cfg.static_densify_until) {
                self.static_density_cycle(&mut ledger)?;
            }
            self.step += 1;
        }
        // Frame-0 membership order may differ from canonical order after
        // densification; restart every frame from the canonical order.
        self.model.ledger = DensityLedger::new(&self.model.cloud, self.ds.frames())?;
        Ok(())
    }

    fn static_density_cycle(&mut self, ledger: &mut DensityLedger) -> Result<()> {
        let cfg = self.cfg.static_density.clone();
        let cloud = &mut self.model.cloud;
        let attrs_of = |ledger: &DensityLedger, cloud: &GaussianCloud| -> Result<FrameAttributes> {
            Ok(FrameAttributes::from_cloud(&cloud.subset(&ledger.member_indices(0, cloud)?), 0))
        };
        let attrs = attrs_of(ledger, cloud)?;
        let tau = ledger.densify_threshold(0, cfg.lambda)?;
        let d = ledger.densify(cloud, &attrs, tau, &cfg, &mut self.rng)?;
        self.canon.remap(&d.sources);
        let attrs = attrs_of(ledger, cloud)?;
        let pruned = match ledger.prune(cloud, &attrs, &cfg, None) {
            Ok(p) => {
                self.canon.remap(&p.sources);
                p.removed.len()
            }
            Err(Error::EmptyPopulation(_)) => {
                log::warn!("static prune would empty frame 0; skipped");
                0
            }
            Err(e) => return Err(e),
        };
        ledger.reset_stats();
        self.density.push(DensityRow {
            step: self.step,
            frame: 0,
            count: ledger.membership(0).len(),
            tau,
            densified: d.added(),
            pruned,
        });
        Ok(())
    }

    fn frame_views(&mut self) -> Vec<usize> {
        let mut cams = self.reference.clone();
        let k = self.cfg.anchors_per_frame;
        if k == 0 || k >= self.anchors.len() {
            cams.extend(&self.anchors);
        } else {
            let mut pick = sample_indices(&mut self.rng, self.anchors.len(), k).into_vec();
            pick.sort_unstable();
            cams.extend(pick.into_iter().map(|i| self.anchors[i]));
        }
        cams
    }

    /// Temporal state just before `frame`, rebuilt from the caches.
    fn warm_carry(&self, frame: usize) -> Result<Carry> {
        let mut carry = Carry::new(&self.model);
        let t = self.model.rectifier.config.buffer_len;
        for f in frame.saturating_sub(t)..frame {
            if let Some(row) = &self.feature_cache[f] {
                carry.buffer.push(f, row)?;
            }
        }
        carry.previous = frame.checked_sub(1).and_then(|f| self.history_cache[f].clone());
        Ok(carry)
    }

    fn remember(&mut self, pass: &FramePass) {
        self.feature_cache[pass.frame] = pass.f_hat;
        self.history_cache[pass.frame] = Some(RectifiedFrame::from_attributes(&pass.attrs));
    }

    /// One dynamic step over a random sub-clip; returns the clip's mean loss.
    fn dynamic_step(&mut self, local: usize, dump: Option<&Path>) -> Result<()> {
        let frames = self.ds.frames();
        let clip = self.cfg.clip_len.min(frames);
        let start = self.rng.gen_range(0..=frames - clip);
        let lr = self.lr();
        let accumulate = self.cfg.spatial && local < self.cfg.densify_until;
        let mut carry = self.warm_carry(start)?;
        let mut canon = AttributeGrads::zeros(self.model.cloud.len());
        let mut deform_g = vec![0.0; self.model.deform.params.len()];
        let mut rect_g = RectifierGrads::zeros(&self.model.rectifier);
        let mut losses = Vec::with_capacity(clip);
        let mut mean = LossBreakdown::default();
        for frame in start..start + clip {
            let pass = self.model.forward_frame(frame, self.model.time_of(frame), &carry)?;
            let cams = self.frame_views();
            let eval = evaluate_frame(self.ds, &self.cfg, &pass.attrs, frame, &cams, 1.0 / clip as f64)?;
            losses.push(eval.loss.total);
            mean.add_scaled(&eval.loss, 1.0 / clip as f64);
            if accumulate {
                for (g, vis) in &eval.screen {
                    self.model.ledger.accumulate_visible(frame, &pass.attrs.lineages, g, vis)?;
                }
            }
            let fg = self.model.backward_frame(&pass, &eval.grads)?;
            scatter(&mut canon, &pass.members, &fg.canonical);
            deform_g.iter_mut().zip(&fg.deform).for_each(|(a, b)| *a += b);
            if let Some(r) = &fg.rectifier {
                rect_g.add_assign(r);
            }
            carry.advance(&pass)?;
            self.remember(&pass);
        }
        let total = cal(&losses)?;
        if !total.is_finite() {
            return Err(self.diverged(total, dump));
        }
        self.canon.step(&mut self.model.cloud, &canon, lr, &self.cfg);
        self.deform_opt.step(&mut self.model.deform.params, &deform_g, lr * self.cfg.lr_deform);
        if self.model.temporal {
            let r = &mut self.model.rectifier;
            let lr_r = lr * self.cfg.lr_rectifier;
            self.rect_opt[0].step(&mut r.ssm.params, &rect_g.ssm, lr_r);
            self.rect_opt[1].step(&mut r.scale_head.params, &rect_g.scale_head, lr_r);
            self.rect_opt[2].step(&mut r.rotation_head.params, &rect_g.rotation_head, lr_r);
        }
        self.log("dynamic", &mean, lr);
        Ok(())
    }

    /// Replays every frame in order, densifying then pruning each frame's
    /// members, and refreshes the temporal caches.
    fn dynamic_density_cycle(&mut self) -> Result<()> {
        let cfg = self.cfg.density.clone();
        let mut carry = Carry::new(&self.model);
        for frame in 0..self.ds.frames() {
            let t = self.model.time_of(frame);
            let pass = self.model.forward_frame(frame, t, &carry)?;
            let tau = self.model.ledger.densify_threshold(frame, cfg.lambda)?;
            let m = &mut self.model;
            let d = m.ledger.densify(&mut m.cloud, &pass.attrs, tau, &cfg, &mut self.rng)?;
            self.canon.remap(&d.sources);
            let pass = self.model.forward_frame(frame, t, &carry)?;
            let m = &mut self.model;
            let pruned = match m.ledger.prune(&mut m.cloud, &pass.attrs, &cfg, None) {
                Ok(p) => {
                    self.canon.remap(&p.sources);
                    p.removed.len()
                }
                Err(Error::EmptyPopulation(f)) => {
                    log::warn!("prune would empty frame {f}; skipped");
                    0
                }
                Err(e) => return Err(e),
            };
            let pass = self.model.forward_frame(frame, t, &carry)?;
            carry.advance(&pass)?;
            self.remember(&pass);
            self.density.push(DensityRow {
                step: self.step,
                frame,
                count: self.model.ledger.membership(frame).len(),
                tau,
                densified: d.added(),
                pruned,
            });
        }
        self.model.ledger.reset_stats();
        Ok(())
    }

    pub fn train_dynamic(&mut self, dump: Option<&Path>) -> Result<()> {
        for local in 0..self.cfg.dynamic_steps {
            self.dynamic_step(local, dump)?;
            if self.cfg.spatial && in_window(local, &self.cfg.density, self.cfg.densify_until) {
                self.dynamic_density_cycle()?;
            }
            self.step += 1;
        }
        Ok(())
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            model: self.model,
            progress: self.progress,
            density: self.density,
            steps: self.step,
            render: self.cfg.render,
            seed: self.seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Runs both stages. On divergence the current state is written to `dump`.
pub fn train(ds: &Dataset, cfg: &TrainConfig, seed: u64, dump: Option<&Path>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(ds, cfg.clone(), seed)?;
    trainer.train_static(dump)?;
    trainer.train_dynamic(dump)?;
    Ok(trainer.finish())
}

/// Population variance of the per-frame point counts.
pub fn count_variance(counts: &[usize]) -> f64 {
    if counts.is_empty() {
        return 0.0;
    }
    let n = counts.len() as f64;
    let mean = counts.iter().map(|&c| c as f64).sum::<f64>() / n;
    counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / n
}

/// Lineages present in `frame` but in no earlier frame.
pub fn new_lineages(model: &Model, frame: usize) -> Vec<Lineage> {
    let earlier: std::collections::BTreeSet<Lineage> =
        (0..frame).flat_map(|f| model.ledger.membership(f).iter().copied()).collect();
    model.ledger.membership(frame).iter().copied().filter(|l| !earlier.contains(l)).collect()
}
