//! Per-frame adaptive densification and pruning.
//!
//! All frames share one canonical cloud. Each frame owns a membership list of
//! lineages, so densifying or pruning frame `t` only edits that list; new
//! canonical points are appended, and canonical points no frame references
//! any more are garbage-collected. Every structure that is keyed by point
//! order is re-aligned through lineages, never by position.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::deform::FrameAttributes;
use crate::error::{Error, Result};
use crate::gaussian::{quat_to_matrix, sigmoid, GaussianCloud, Lineage};
use crate::rectifier::RectifiedFrame;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DensityConfig {
    /// Fraction of each frame's points densified per cycle.
    pub lambda: f64,
    /// Activated max scale at or above which a selected point is split.
    pub split_threshold: f64,
    pub split_factor: f64,
    pub opacity_min: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Optimizer steps between cycles.
    pub interval: usize,
    /// Steps before the first cycle.
    pub warmup: usize,
    /// Densification stops adding points to a frame beyond this size.
    pub max_points_per_frame: usize,
    /// Optional bound on the projected radius in pixels. Disabled when `None`.
    pub screen_radius_max: Option<f64>,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self {
            lambda: 0.025,
            split_threshold: 0.01,
            split_factor: 1.6,
            opacity_min: 0.01,
            scale_min: 0.001,
            scale_max: 0.1,
            interval: 100,
            warmup: 500,
            max_points_per_frame: 50_000,
            screen_radius_max: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GradStat {
    pub sum: f64,
    pub count: u32,
}

impl GradStat {
    pub fn average(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }
}

/// Outcome of one densification pass over a frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DensifyReport {
    pub frame: usize,
    pub tau: f64,
    pub cloned: Vec<(Lineage, Lineage)>,
    pub split: Vec<(Lineage, [Lineage; 2])>,
    /// `sources[new_index]` is the old canonical index, `None` for new points.
    pub sources: Vec<Option<usize>>,
}

impl DensifyReport {
    pub fn added(&self) -> usize {
        self.cloned.len() + self.split.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PruneReport {
    pub frame: usize,
    pub removed: Vec<Lineage>,
    pub sources: Vec<Option<usize>>,
}

/// One frame's outcome in one density cycle.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DensityRow {
    pub step: usize,
    pub frame: usize,
    pub count: usize,
    pub tau: f64,
    pub densified: usize,
    pub pruned: usize,
}

/// Per-frame membership, gradient statistics and split/clone genealogy.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityLedger {
    frames: Vec<Vec<Lineage>>,
    stats: Vec<BTreeMap<Lineage, GradStat>>,
    parents: BTreeMap<Lineage, Lineage>,
}

/// Number of points in the top `lambda` fraction of `n`.
pub fn top_count(n: usize, lambda: f64) -> usize {
    let raw = lambda * n as f64;
    let snapped = if (raw - raw.round()).abs() < 1e-9 { raw.round() } else { raw.ceil() };
    (snapped as usize).clamp(1, n.max(1))
}

/// Exact keep predicate on one point: opacity floor and world-space scale band
/// on the largest activated scale component.
pub fn keep_point(opacity: f64, max_scale: f64, cfg: &DensityConfig) -> bool {
    opacity >= cfg.opacity_min && cfg.scale_min <= max_scale && max_scale <= cfg.scale_max
}

fn max_activated(log_scale: &[f64; 3]) -> f64 {
    log_scale.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)).exp()
}

impl DensityLedger {
    /// Every frame starts with every point of `cloud`.
    pub fn new(cloud: &GaussianCloud, num_frames: usize) -> Result<Self> {
        if num_frames == 0 {
            return Err(Error::InvalidInput("ledger needs at least one frame".into()));
        }
        let all = cloud.lineages();
        Ok(Self {
            frames: vec![all; num_frames],
            stats: vec![BTreeMap::new(); num_frames],
            parents: BTreeMap::new(),
        })
    }

    /// Restores a ledger from saved membership and genealogy.
    pub fn from_parts(frames: Vec<Vec<Lineage>>, parents: BTreeMap<Lineage, Lineage>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::InvalidInput("ledger needs at least one frame".into()));
        }
        let n = frames.len();
        Ok(Self { frames, stats: vec![BTreeMap::new(); n], parents })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn membership(&self, frame: usize) -> &[Lineage] {
        &self.frames[frame]
    }

    pub fn counts(&self) -> Vec<usize> {
        self.frames.iter().map(Vec::len).collect()
    }

    /// Parent of every densified lineage.
    pub fn parents(&self) -> &BTreeMap<Lineage, Lineage> {
        &self.parents
    }

    /// Children of `lineage`, in creation order.
    pub fn children(&self, lineage: Lineage) -> Vec<Lineage> {
        self.parents.iter().filter(|(_, &p)| p == lineage).map(|(&c, _)| c).collect()
    }

    /// Follows parent links up to the canonical ancestor.
    pub fn root_of(&self, mut lineage: Lineage) -> Lineage {
        while let Some(&p) = self.parents.get(&lineage) {
            lineage = p;
        }
        lineage
    }

    /// Lineages referenced by at least one frame.
    pub fn live(&self) -> BTreeSet<Lineage> {
        self.frames.iter().flatten().copied().collect()
    }

    /// Canonical indices of the frame's members, in membership order.
    pub fn member_indices(&self, frame: usize, cloud: &GaussianCloud) -> Result<Vec<usize>> {
        let index = cloud.lineage_index();
        self.frames[frame]
            .iter()
            .map(|l| {
                index.get(l).copied().ok_or_else(|| {
                    Error::Correspondence(format!("frame {frame} references missing lineage {l}"))
                })
            })
            .collect()
    }

    fn check_aligned(&self, frame: usize, lineages: &[Lineage]) -> Result<()> {
        if frame >= self.frames.len() {
            return Err(Error::InvalidInput(format!("frame {frame} out of range")));
        }
        if self.frames[frame] != lineages {
            return Err(Error::Correspondence(format!(
                "frame {frame}: {} input rows do not match its {} members",
                lineages.len(),
                self.frames[frame].len()
            )));
        }
        Ok(())
    }

    /// Adds the norm of each member's screen-space mean gradient.
    pub fn accumulate(&mut self, frame: usize, lineages: &[Lineage], grads: &[[f64; 2]]) -> Result<()> {
        self.accumulate_where(frame, lineages, grads, None)
    }

    /// Like [`Self::accumulate`], skipping members with `visible[i] == false`
    /// so that views which do not see a point leave its average untouched.
    pub fn accumulate_visible(
        &mut self,
        frame: usize,
        lineages: &[Lineage],
        grads: &[[f64; 2]],
        visible: &[bool],
    ) -> Result<()> {
        self.accumulate_where(frame, lineages, grads, Some(visible))
    }

    fn accumulate_where(
        &mut self,
        frame: usize,
        lineages: &[Lineage],
        grads: &[[f64; 2]],
        visible: Option<&[bool]>,
    ) -> Result<()> {
        self.check_aligned(frame, lineages)?;
        if grads.len() != lineages.len() || visible.is_some_and(|v| v.len() != lineages.len()) {
            return Err(Error::Correspondence(format!(
                "frame {frame}: {} gradients for {} members",
                grads.len(),
                lineages.len()
            )));
        }
        let stats = &mut self.stats[frame];
        for (i, (&l, g)) in lineages.iter().zip(grads).enumerate() {
            if visible.is_some_and(|v| !v[i]) {
                continue;
            }
            let e = stats.entry(l).or_default();
            e.sum += (g[0] * g[0] + g[1] * g[1]).sqrt();
            e.count += 1;
        }
        Ok(())
    }

    pub fn stat(&self, frame: usize, lineage: Lineage) -> GradStat {
        self.stats[frame].get(&lineage).copied().unwrap_or_default()
    }

    pub fn average(&self, frame: usize, lineage: Lineage) -> f64 {
        self.stat(frame, lineage).average()
    }

    pub fn reset_stats(&mut self) {
        self.stats.iter_mut().for_each(BTreeMap::clear);
    }

    /// The `⌈λn⌉`-th largest averaged gradient among the frame's members.
    pub fn densify_threshold(&self, frame: usize, lambda: f64) -> Result<f64> {
        let members = &self.frames[frame];
        if members.is_empty() {
            return Err(Error::EmptyPopulation(frame));
        }
        if !(lambda > 0.0 && lambda < 1.0) {
            return Err(Error::InvalidInput(format!("lambda {lambda} outside (0, 1)")));
        }
        let mut avgs: Vec<f64> = members.iter().map(|&l| self.average(frame, l)).collect();
        avgs.sort_by(|a, b| b.total_cmp(a));
        Ok(avgs[top_count(members.len(), lambda) - 1])
    }

    /// Members with `G ≥ τ`. Points that never received gradient are excluded.
    pub fn select(&self, frame: usize, tau: f64) -> Vec<Lineage> {
        self.frames[frame]
            .iter()
            .copied()
            .filter(|&l| {
                let g = self.average(frame, l);
                g > 0.0 && g >= tau
            })
            .collect()
    }

    /// Clones or splits the selected members of `attrs.frame_index`.
    ///
    /// `attrs` holds the frame's rectified attributes in membership order;
    /// the split/clone choice uses its scales while new canonical points are
    /// derived from the parent's canonical attributes.
    pub fn densify(
        &mut self,
        cloud: &mut GaussianCloud,
        attrs: &FrameAttributes,
        tau: f64,
        cfg: &DensityConfig,
        rng: &mut impl Rng,
    ) -> Result<DensifyReport> {
        let frame = attrs.frame_index;
        self.check_aligned(frame, &attrs.lineages)?;
        let selected: BTreeSet<Lineage> = self.select(frame, tau).into_iter().collect();
        let mut report = DensifyReport { frame, tau, ..Default::default() };
        if selected.is_empty() {
            report.sources = (0..cloud.len()).map(Some).collect();
            return Ok(report);
        }
        let index = cloud.lineage_index();
        let mut budget = cfg.max_points_per_frame.saturating_sub(self.frames[frame].len());
        let mut members = Vec::with_capacity(self.frames[frame].len() + selected.len());
        for (row, &l) in attrs.lineages.iter().enumerate() {
            if !selected.contains(&l) || budget == 0 {
                members.push(l);
                continue;
            }
            budget -= 1;
            let parent = cloud.points[index[&l]].clone();
            if max_activated(&attrs.log_scales[row]) < cfg.split_threshold {
                let child = cloud.push_fresh(parent);
                self.parents.insert(child, l);
                members.extend([l, child]);
                report.cloned.push((l, child));
            } else {
                let rot = quat_to_matrix(&parent.rotation);
                let scale = parent.scale();
                let shrink = cfg.split_factor.ln();
                let mut kids = [0; 2];
                for kid in &mut kids {
                    let z: [f64; 3] = std::array::from_fn(|k| rng.sample::<f64, _>(StandardNormal) * scale[k]);
                    let offset = rot * nalgebra::Vector3::from(z);
                    let mut p = parent.clone();
                    for k in 0..3 {
                        p.position[k] += offset[k];
                        p.log_scale[k] -= shrink;
                    }
                    *kid = cloud.push_fresh(p);
                    self.parents.insert(*kid, l);
                }
                members.extend(kids);
                report.split.push((l, kids));
            }
        }
        self.stats[frame].retain(|l, _| !selected.contains(l));
        self.frames[frame] = members;
        report.sources = self.collect_garbage(cloud);
        Ok(report)
    }

    /// Drops members of `attrs.frame_index` that fail the keep predicate.
    /// `screen_radii`, when given, is aligned with `attrs` and checked against
    /// `cfg.screen_radius_max`.
    pub fn prune(
        &mut self,
        cloud: &mut GaussianCloud,
        attrs: &FrameAttributes,
        cfg: &DensityConfig,
        screen_radii: Option<&[f64]>,
    ) -> Result<PruneReport> {
        let frame = attrs.frame_index;
        self.check_aligned(frame, &attrs.lineages)?;
        let mut kept = Vec::with_capacity(attrs.len());
        let mut removed = Vec::new();
        for i in 0..attrs.len() {
            let mut keep = keep_point(sigmoid(attrs.opacity_logits[i]), max_activated(&attrs.log_scales[i]), cfg);
            if let (Some(r), Some(max)) = (screen_radii, cfg.screen_radius_max) {
                keep &= r[i] <= max;
            }
            if keep {
                kept.push(attrs.lineages[i]);
            } else {
                removed.push(attrs.lineages[i]);
            }
        }
        if kept.is_empty() {
            return Err(Error::EmptyPopulation(frame));
        }
        for l in &removed {
            self.stats[frame].remove(l);
        }
        self.frames[frame] = kept;
        let sources = self.collect_garbage(cloud);
        Ok(PruneReport { frame, removed, sources })
    }

    /// Removes canonical points no frame references. Returns `sources` in the
    /// format of [`DensifyReport::sources`], relative to the cloud before any
    /// points were appended by the caller's pass.
    fn collect_garbage(&mut self, cloud: &mut GaussianCloud) -> Vec<Option<usize>> {
        let live = self.live();
        let mut sources = Vec::with_capacity(cloud.len());
        let mut old = 0usize;
        let old_len = cloud.len();
        cloud.points.retain(|p| {
            let keep = live.contains(&p.lineage);
            if keep {
                sources.push(Some(old));
            }
            old += 1;
            keep
        });
        debug_assert_eq!(old, old_len);
        sources
    }

    /// Full walk of every cross-reference: memberships point at live
    /// canonical points, every canonical point is referenced, lineages are
    /// unique, and every genealogy chain ends at a canonical ancestor.
    pub fn check(&self, cloud: &GaussianCloud) -> Result<()> {
        let index = cloud.lineage_index();
        if index.len() != cloud.len() {
            return Err(Error::Correspondence("duplicate lineage in cloud".into()));
        }
        let live = self.live();
        for (t, members) in self.frames.iter().enumerate() {
            let unique: BTreeSet<_> = members.iter().collect();
            if unique.len() != members.len() {
                return Err(Error::Correspondence(format!("frame {t} lists a lineage twice")));
            }
            if let Some(l) = members.iter().find(|l| !index.contains_key(l)) {
                return Err(Error::Correspondence(format!("frame {t} references dangling lineage {l}")));
            }
            if let Some(l) = self.stats[t].keys().find(|l| !unique.contains(l)) {
                return Err(Error::Correspondence(format!("frame {t} keeps statistics for non-member {l}")));
            }
        }
        if let Some(p) = cloud.points.iter().find(|p| !live.contains(&p.lineage)) {
            return Err(Error::Correspondence(format!("canonical lineage {} belongs to no frame", p.lineage)));
        }
        for &l in &live {
            let mut cur = l;
            let mut steps = 0;
            while let Some(&p) = self.parents.get(&cur) {
                if p >= cur || steps > self.parents.len() {
                    return Err(Error::Correspondence(format!("genealogy of {l} is not acyclic")));
                }
                cur = p;
                steps += 1;
            }
        }
        Ok(())
    }
}

/// Re-indexes the previous frame's rectified history to the lineages of
/// `attrs`. Lineages missing from `previous` inherit the nearest ancestor's
/// row; points with no ancestor in `previous` cold-start from their own
/// attributes. A lineage unknown to the ledger is a hard error.
pub fn align_correspondence(
    ledger: &DensityLedger,
    previous: &RectifiedFrame,
    attrs: &FrameAttributes,
) -> Result<RectifiedFrame> {
    let rows: BTreeMap<Lineage, usize> = previous.lineages.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let members: BTreeSet<Lineage> = ledger.frames[attrs.frame_index].iter().copied().collect();
    let mut out = RectifiedFrame {
        frame_index: previous.frame_index,
        lineages: attrs.lineages.clone(),
        log_scales: Vec::with_capacity(attrs.len()),
        rotations: Vec::with_capacity(attrs.len()),
    };
    for (i, &l) in attrs.lineages.iter().enumerate() {
        if !members.contains(&l) {
            return Err(Error::Correspondence(format!(
                "lineage {l} is not a member of frame {}",
                attrs.frame_index
            )));
        }
        let mut cur = Some(l);
        let mut found = None;
        while let Some(c) = cur {
            if let Some(&r) = rows.get(&c) {
                found = Some(r);
                break;
            }
            cur = ledger.parents.get(&c).copied();
        }
        match found {
            Some(r) => {
                out.log_scales.push(previous.log_scales[r]);
                out.rotations.push(previous.rotations[r]);
            }
            None => {
                out.log_scales.push(attrs.log_scales[i]);
                out.rotations.push(attrs.rotations[i]);
            }
        }
    }
    Ok(out)
}
