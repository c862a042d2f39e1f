//! Temporal correlation and scale/rotation rectification.
//!
//! Each frame is summarized by one pooled attribute row. The row for the
//! current frame is appended to the buffered history of previously
//! correlated rows, the selective SSM runs over that window, and its last
//! output drives two gated heads that emit per-point residuals:
//!
//! ```text
//! Δs_t = W(F̂_t ⊕ s_t ⊕ ŝ_{t-1}),   ŝ_t = s_t + Δs_t          (log-scale space)
//! Δr_t = W(F̂_t ⊕ r_t ⊕ r̂_{t-1}),   r̂_t = normalize(r_t + Δr_t)
//! ```
//!
//! `W` projects the three inputs to a shared width, mixes them with a
//! per-channel softmax gate computed from the concatenated inputs, and
//! applies a zero-initialized linear output layer.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::deform::{AttributeGrads, FrameAttributes};
use crate::error::{Error, Result};
use crate::gaussian::{normalize_quaternion, normalize_quaternion_vjp, sigmoid, Lineage, Quat};
use crate::nn::{Dense, ParamLayout};
use crate::ssm::{SelectiveSsm, SsmConfig, SsmRecord};

/// Pooled attribute channels: position 3, log-scale 3, rotation 4, opacity 1.
pub const FEATURE_WIDTH: usize = 11;

pub type FeatureRow = [f64; FEATURE_WIDTH];

/// Fixed-capacity FIFO of per-frame feature rows, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalBuffer {
    capacity: usize,
    entries: VecDeque<(usize, FeatureRow)>,
}

impl TemporalBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, entries: VecDeque::with_capacity(capacity + 1) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Appends a row, evicting the oldest when the buffer is over capacity.
    pub fn push(&mut self, frame_index: usize, row: &[f64]) -> Result<()> {
        let row: FeatureRow = row.try_into().map_err(|_| {
            Error::Contract(format!("feature row has {} channels, expected {FEATURE_WIDTH}", row.len()))
        })?;
        if let Some(&(last, _)) = self.entries.back() {
            if frame_index <= last {
                return Err(Error::Contract(format!(
                    "buffer frames must increase: pushed {frame_index} after {last}"
                )));
            }
        }
        if self.capacity == 0 {
            return Ok(());
        }
        self.entries.push_back((frame_index, row));
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    pub fn rows(&self) -> impl Iterator<Item = &FeatureRow> + '_ {
        self.entries.iter().map(|(_, r)| r)
    }

    pub fn frames(&self) -> Vec<usize> {
        self.entries.iter().map(|(f, _)| *f).collect()
    }
}

/// Mean of `[position, log-scale, rotation, opacity]` over the frame's members.
pub fn pool_features(attrs: &FrameAttributes) -> FeatureRow {
    let mut row = [0.0; FEATURE_WIDTH];
    let members = &attrs.membership;
    if members.is_empty() {
        return row;
    }
    for &i in members {
        row[0..3].iter_mut().zip(&attrs.positions[i]).for_each(|(r, v)| *r += v);
        row[3..6].iter_mut().zip(&attrs.log_scales[i]).for_each(|(r, v)| *r += v);
        row[6..10].iter_mut().zip(&attrs.rotations[i]).for_each(|(r, v)| *r += v);
        row[10] += sigmoid(attrs.opacity_logits[i]);
    }
    let inv = 1.0 / members.len() as f64;
    row.iter_mut().for_each(|v| *v *= inv);
    row
}

/// Accumulates the gradient of [`pool_features`] into `grads`.
pub fn pool_features_vjp(attrs: &FrameAttributes, upstream: &FeatureRow, grads: &mut AttributeGrads) {
    let members = &attrs.membership;
    if members.is_empty() {
        return;
    }
    let inv = 1.0 / members.len() as f64;
    for &i in members {
        for k in 0..3 {
            grads.positions[i][k] += upstream[k] * inv;
            grads.log_scales[i][k] += upstream[3 + k] * inv;
        }
        for k in 0..4 {
            grads.rotations[i][k] += upstream[6 + k] * inv;
        }
        let o = sigmoid(attrs.opacity_logits[i]);
        grads.opacity_logits[i] += upstream[10] * inv * o * (1.0 - o);
    }
}

/// Gated fusion head regressing a `width`-channel residual per point.
#[derive(Debug, Clone, PartialEq)]
pub struct RectifierHead {
    pub width: usize,
    pub hidden: usize,
    pub layout: ParamLayout,
    pub params: Vec<f64>,
    pub proj_feature: Dense,
    pub proj_current: Dense,
    pub proj_previous: Dense,
    pub gate: Dense,
    pub out: Dense,
}

#[derive(Debug, Clone)]
pub struct HeadRecord {
    points: usize,
    feature: FeatureRow,
    inputs: Vec<f64>,
    current: Vec<f64>,
    previous: Vec<f64>,
    u_feature: Vec<f64>,
    u_current: Vec<f64>,
    u_previous: Vec<f64>,
    gates: Vec<f64>,
    fused: Vec<f64>,
}

impl RectifierHead {
    pub fn new(name: &str, width: usize, hidden: usize, seed: u64) -> Self {
        let mut layout = ParamLayout::default();
        let proj_feature = layout.push(&format!("{name}.proj_feature"), FEATURE_WIDTH, hidden);
        let proj_current = layout.push(&format!("{name}.proj_current"), width, hidden);
        let proj_previous = layout.push(&format!("{name}.proj_previous"), width, hidden);
        let gate = layout.push(&format!("{name}.gate"), FEATURE_WIDTH + 2 * width, 3 * hidden);
        let out = layout.push(&format!("{name}.out"), hidden, width);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for d in [proj_feature, proj_current, proj_previous, gate] {
            d.init_uniform(&mut params, 1.0, &mut rng);
        }
        Self { width, hidden, layout, params, proj_feature, proj_current, proj_previous, gate, out }
    }

    /// Computes residuals for `points` rows of `current`/`previous`
    /// (`points x width` each).
    pub fn forward(&self, feature: &FeatureRow, current: &[f64], previous: &[f64]) -> (Vec<f64>, HeadRecord) {
        let (k, h) = (self.width, self.hidden);
        let n = current.len() / k;
        assert_eq!(previous.len(), n * k);
        let p = &self.params;
        let mut u_feature = vec![0.0; h];
        self.proj_feature.forward(p, feature, &mut u_feature);
        let mut u_current = vec![0.0; n * h];
        self.proj_current.forward_batch(p, current, n, &mut u_current);
        let mut u_previous = vec![0.0; n * h];
        self.proj_previous.forward_batch(p, previous, n, &mut u_previous);

        let z_len = FEATURE_WIDTH + 2 * k;
        let mut inputs = vec![0.0; n * z_len];
        for i in 0..n {
            let row = &mut inputs[i * z_len..(i + 1) * z_len];
            row[..FEATURE_WIDTH].copy_from_slice(feature);
            row[FEATURE_WIDTH..FEATURE_WIDTH + k].copy_from_slice(&current[i * k..(i + 1) * k]);
            row[FEATURE_WIDTH + k..].copy_from_slice(&previous[i * k..(i + 1) * k]);
        }
        let mut gates = vec![0.0; n * 3 * h];
        self.gate.forward_batch(p, &inputs, n, &mut gates);
        let mut fused = vec![0.0; n * h];
        for i in 0..n {
            let g = &mut gates[i * 3 * h..(i + 1) * 3 * h];
            for c in 0..h {
                let (l0, l1, l2) = (g[c], g[h + c], g[2 * h + c]);
                let m = l0.max(l1).max(l2);
                let (e0, e1, e2) = ((l0 - m).exp(), (l1 - m).exp(), (l2 - m).exp());
                let s = e0 + e1 + e2;
                g[c] = e0 / s;
                g[h + c] = e1 / s;
                g[2 * h + c] = e2 / s;
                fused[i * h + c] =
                    g[c] * u_feature[c] + g[h + c] * u_current[i * h + c] + g[2 * h + c] * u_previous[i * h + c];
            }
        }
        let mut delta = vec![0.0; n * k];
        self.out.forward_batch(p, &fused, n, &mut delta);
        let record = HeadRecord {
            points: n,
            feature: *feature,
            inputs,
            current: current.to_vec(),
            previous: previous.to_vec(),
            u_feature,
            u_current,
            u_previous,
            gates,
            fused,
        };
        (delta, record)
    }

    /// Returns `(parameter grads, d feature, d current, d previous)`.
    pub fn backward(&self, rec: &HeadRecord, d_delta: &[f64]) -> (Vec<f64>, FeatureRow, Vec<f64>, Vec<f64>) {
        let (k, h, n) = (self.width, self.hidden, rec.points);
        let p = &self.params;
        let mut grads = vec![0.0; p.len()];
        let mut d_fused = vec![0.0; n * h];
        self.out.backward_batch(p, &rec.fused, d_delta, n, &mut grads, Some(&mut d_fused));

        let mut d_u_feature = vec![0.0; h];
        let mut d_u_current = vec![0.0; n * h];
        let mut d_u_previous = vec![0.0; n * h];
        let mut d_logits = vec![0.0; n * 3 * h];
        for i in 0..n {
            let g = &rec.gates[i * 3 * h..(i + 1) * 3 * h];
            for c in 0..h {
                let df = d_fused[i * h + c];
                let u = [rec.u_feature[c], rec.u_current[i * h + c], rec.u_previous[i * h + c]];
                let gc = [g[c], g[h + c], g[2 * h + c]];
                d_u_feature[c] += gc[0] * df;
                d_u_current[i * h + c] = gc[1] * df;
                d_u_previous[i * h + c] = gc[2] * df;
                let dg = [u[0] * df, u[1] * df, u[2] * df];
                let mean = gc[0] * dg[0] + gc[1] * dg[1] + gc[2] * dg[2];
                for j in 0..3 {
                    d_logits[i * 3 * h + j * h + c] = gc[j] * (dg[j] - mean);
                }
            }
        }
        let z_len = FEATURE_WIDTH + 2 * k;
        let mut d_inputs = vec![0.0; n * z_len];
        self.gate.backward_batch(p, &rec.inputs, &d_logits, n, &mut grads, Some(&mut d_inputs));

        let mut d_feature = [0.0; FEATURE_WIDTH];
        self.proj_feature.backward(p, &rec.feature, &d_u_feature, &mut grads, Some(&mut d_feature));
        let mut d_current = vec![0.0; n * k];
        self.proj_current.backward_batch(p, &rec.current, &d_u_current, n, &mut grads, Some(&mut d_current));
        let mut d_previous = vec![0.0; n * k];
        self.proj_previous.backward_batch(p, &rec.previous, &d_u_previous, n, &mut grads, Some(&mut d_previous));
        for i in 0..n {
            let row = &d_inputs[i * z_len..(i + 1) * z_len];
            d_feature.iter_mut().zip(&row[..FEATURE_WIDTH]).for_each(|(a, b)| *a += b);
            d_current[i * k..(i + 1) * k]
                .iter_mut()
                .zip(&row[FEATURE_WIDTH..FEATURE_WIDTH + k])
                .for_each(|(a, b)| *a += b);
            d_previous[i * k..(i + 1) * k]
                .iter_mut()
                .zip(&row[FEATURE_WIDTH + k..])
                .for_each(|(a, b)| *a += b);
        }
        (grads, d_feature, d_current, d_previous)
    }
}

/// Rectified scales and rotations of one frame, keyed by lineage so the next
/// frame can look up its history.
#[derive(Debug, Clone, PartialEq)]
pub struct RectifiedFrame {
    pub frame_index: usize,
    pub lineages: Vec<Lineage>,
    pub log_scales: Vec<[f64; 3]>,
    pub rotations: Vec<Quat>,
}

impl RectifiedFrame {
    pub fn from_attributes(attrs: &FrameAttributes) -> Self {
        Self {
            frame_index: attrs.frame_index,
            lineages: attrs.lineages.clone(),
            log_scales: attrs.log_scales.clone(),
            rotations: attrs.rotations.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RectifierConfig {
    /// Temporal buffer length `T`.
    pub buffer_len: usize,
    /// Width of the fusion heads.
    pub hidden: usize,
    pub ssm: SsmConfig,
}

impl Default for RectifierConfig {
    fn default() -> Self {
        Self { buffer_len: 10, hidden: 32, ssm: SsmConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalRectifier {
    pub config: RectifierConfig,
    pub ssm: SelectiveSsm,
    pub scale_head: RectifierHead,
    pub rotation_head: RectifierHead,
}

/// Saved state from [`TemporalRectifier::correlate`].
#[derive(Debug, Clone)]
pub struct CorrelateRecord {
    ssm: SsmRecord,
}

/// Saved state from [`TemporalRectifier::rectify`].
#[derive(Debug, Clone)]
pub struct RectifyRecord {
    scale: HeadRecord,
    rotation: HeadRecord,
    /// `r_t + Δr_t` before normalization.
    raw_rotations: Vec<Quat>,
}

/// Gradients of the rectifier parameters, one vector per block.
#[derive(Debug, Clone, PartialEq)]
pub struct RectifierGrads {
    pub ssm: Vec<f64>,
    pub scale_head: Vec<f64>,
    pub rotation_head: Vec<f64>,
}

impl RectifierGrads {
    pub fn zeros(r: &TemporalRectifier) -> Self {
        Self {
            ssm: vec![0.0; r.ssm.params.len()],
            scale_head: vec![0.0; r.scale_head.params.len()],
            rotation_head: vec![0.0; r.rotation_head.params.len()],
        }
    }

    pub fn add_assign(&mut self, other: &RectifierGrads) {
        for (a, b) in [
            (&mut self.ssm, &other.ssm),
            (&mut self.scale_head, &other.scale_head),
            (&mut self.rotation_head, &other.rotation_head),
        ] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

/// `normalize(r + Δr)`; an exactly zero residual returns `r` untouched.
pub fn apply_rotation_residual(r: &Quat, delta: &Quat) -> Result<Quat> {
    if delta.iter().all(|&d| d == 0.0) {
        return Ok(*r);
    }
    normalize_quaternion([r[0] + delta[0], r[1] + delta[1], r[2] + delta[2], r[3] + delta[3]])
}

impl TemporalRectifier {
    pub fn new(config: RectifierConfig, seed: u64) -> Self {
        let ssm = SelectiveSsm::new(config.ssm.clone(), seed);
        let scale_head = RectifierHead::new("scale", 3, config.hidden, seed.wrapping_add(1));
        let rotation_head = RectifierHead::new("rotation", 4, config.hidden, seed.wrapping_add(2));
        Self { config, ssm, scale_head, rotation_head }
    }

    pub fn new_buffer(&self) -> TemporalBuffer {
        TemporalBuffer::new(self.config.buffer_len)
    }

    /// Correlates the current pooled row with the buffered history and
    /// returns the SSM output at the final position.
    pub fn correlate(
        &self,
        buffer: &TemporalBuffer,
        current: &FeatureRow,
        frame_index: usize,
    ) -> Result<(FeatureRow, CorrelateRecord)> {
        if current.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { frame: frame_index, what: "pooled feature row".into() });
        }
        let mut seq = Vec::with_capacity((buffer.len() + 1) * FEATURE_WIDTH);
        for row in buffer.rows() {
            seq.extend_from_slice(row);
        }
        seq.extend_from_slice(current);
        let (ys, ssm) = self.ssm.forward(&seq)?;
        let out: FeatureRow = ys[ys.len() - FEATURE_WIDTH..].try_into().expect("row width");
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { frame: frame_index, what: "correlated feature".into() });
        }
        Ok((out, CorrelateRecord { ssm }))
    }

    /// Gradient of the correlated row with respect to SSM parameters and to
    /// the current (last) input row. History rows are treated as constants.
    pub fn correlate_backward(&self, record: &CorrelateRecord, upstream: &FeatureRow) -> Result<(Vec<f64>, FeatureRow)> {
        let len = record.ssm.len;
        let mut dys = vec![0.0; len * FEATURE_WIDTH];
        dys[(len - 1) * FEATURE_WIDTH..].copy_from_slice(upstream);
        let (grads, dxs) = self.ssm.backward(&record.ssm, &dys)?;
        let dx: FeatureRow = dxs[(len - 1) * FEATURE_WIDTH..].try_into().expect("row width");
        Ok((grads, dx))
    }

    /// Rectifies the scales and rotations of `attrs` in place. `previous`
    /// must cover exactly the same lineages in the same order; `None` means
    /// cold start, where the frame's own attributes serve as history.
    pub fn rectify(
        &self,
        feature: &FeatureRow,
        attrs: &mut FrameAttributes,
        previous: Option<&RectifiedFrame>,
    ) -> Result<RectifyRecord> {
        let n = attrs.len();
        if let Some(prev) = previous {
            if prev.lineages != attrs.lineages {
                return Err(Error::Correspondence(format!(
                    "history of frame {} covers {} points that do not match the {} points of frame {}",
                    prev.frame_index,
                    prev.lineages.len(),
                    n,
                    attrs.frame_index
                )));
            }
        }
        let cur_s: Vec<f64> = attrs.log_scales.iter().flatten().copied().collect();
        let cur_r: Vec<f64> = attrs.rotations.iter().flatten().copied().collect();
        let (prev_s, prev_r) = match previous {
            Some(p) => (
                p.log_scales.iter().flatten().copied().collect(),
                p.rotations.iter().flatten().copied().collect(),
            ),
            None => (cur_s.clone(), cur_r.clone()),
        };
        let (ds, scale) = self.scale_head.forward(feature, &cur_s, &prev_s);
        let (dr, rotation) = self.rotation_head.forward(feature, &cur_r, &prev_r);
        let mut raw_rotations = Vec::with_capacity(n);
        for i in 0..n {
            for k in 0..3 {
                attrs.log_scales[i][k] += ds[i * 3 + k];
            }
            let r = attrs.rotations[i];
            let delta: Quat = dr[i * 4..i * 4 + 4].try_into().expect("quat");
            raw_rotations.push([r[0] + delta[0], r[1] + delta[1], r[2] + delta[2], r[3] + delta[3]]);
            attrs.rotations[i] = apply_rotation_residual(&r, &delta)?;
        }
        Ok(RectifyRecord { scale, rotation, raw_rotations })
    }

    /// Backpropagates gradients on rectified log-scales and rotations.
    /// Returns head gradients, the gradient on the correlated feature, and
    /// gradients on the pre-rectification log-scales and rotations.
    pub fn rectify_backward(
        &self,
        record: &RectifyRecord,
        d_log_scales: &[[f64; 3]],
        d_rotations: &[Quat],
    ) -> (Vec<f64>, Vec<f64>, FeatureRow, Vec<[f64; 3]>, Vec<Quat>) {
        let n = d_log_scales.len();
        let d_ds: Vec<f64> = d_log_scales.iter().flatten().copied().collect();
        let mut d_raw = vec![0.0; n * 4];
        for i in 0..n {
            let g = normalize_quaternion_vjp(&record.raw_rotations[i], &d_rotations[i]);
            d_raw[i * 4..i * 4 + 4].copy_from_slice(&g);
        }
        let (g_scale, df_s, dcur_s, _) = self.scale_head.backward(&record.scale, &d_ds);
        let (g_rot, df_r, dcur_r, _) = self.rotation_head.backward(&record.rotation, &d_raw);
        let mut d_feature = df_s;
        d_feature.iter_mut().zip(&df_r).for_each(|(a, b)| *a += b);
        let d_scales = (0..n)
            .map(|i| std::array::from_fn(|k| d_log_scales[i][k] + dcur_s[i * 3 + k]))
            .collect();
        let d_rots = (0..n).map(|i| std::array::from_fn(|k| d_raw[i * 4 + k] + dcur_r[i * 4 + k])).collect();
        (g_scale, g_rot, d_feature, d_scales, d_rots)
    }
}

/// Saved state of [`TemporalRectifier::process_frame`].
#[derive(Debug, Clone)]
pub struct FrameRecord {
    correlate: CorrelateRecord,
    rectify: RectifyRecord,
}

impl TemporalRectifier {
    /// Pools `attrs`, correlates the row with `buffer` and rectifies `attrs`
    /// in place. Returns the correlated row, which the caller pushes into the
    /// buffer once the frame is done.
    pub fn process_frame(
        &self,
        buffer: &TemporalBuffer,
        attrs: &mut FrameAttributes,
        previous: Option<&RectifiedFrame>,
    ) -> Result<(FeatureRow, FrameRecord)> {
        let pooled = pool_features(attrs);
        let (f_hat, correlate) = self.correlate(buffer, &pooled, attrs.frame_index)?;
        let rectify = self.rectify(&f_hat, attrs, previous)?;
        Ok((f_hat, FrameRecord { correlate, rectify }))
    }

    /// Maps gradients on the rectified attributes to rectifier parameters and
    /// to the attributes before rectification.
    pub fn process_frame_backward(
        &self,
        attrs: &FrameAttributes,
        record: &FrameRecord,
        upstream: &AttributeGrads,
    ) -> Result<(RectifierGrads, AttributeGrads)> {
        if upstream.len() != attrs.len() {
            return Err(Error::Contract(format!(
                "rectifier backward: {} gradient rows for {} points",
                upstream.len(),
                attrs.len()
            )));
        }
        let (scale_head, rotation_head, d_feature, d_scales, d_rots) =
            self.rectify_backward(&record.rectify, &upstream.log_scales, &upstream.rotations);
        let (ssm, d_pooled) = self.correlate_backward(&record.correlate, &d_feature)?;
        let mut grads = upstream.clone();
        grads.log_scales = d_scales;
        grads.rotations = d_rots;
        pool_features_vjp(attrs, &d_pooled, &mut grads);
        Ok((RectifierGrads { ssm, scale_head, rotation_head }, grads))
    }
}
