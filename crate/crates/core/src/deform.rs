//! Time-conditioned deformation field over canonical Gaussians.
//!
//! A sinusoidal encoding of `(x, y, z, t)` feeds a ReLU trunk and four
//! linear heads producing position, log-scale, rotation and (optionally)
//! opacity offsets. Heads start at zero, so a fresh network is the identity
//! on attributes for every timestamp.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gaussian::{
    normalize_quaternion, normalize_quaternion_vjp, quat_mul, quat_mul_vjp, GaussianCloud, Lineage, Quat,
    SH_COEFFS,
};
use crate::nn::{relu_backward_in_place, relu_in_place, Dense, ParamLayout};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DeformConfig {
    /// Width of every trunk layer.
    pub hidden: usize,
    /// Number of hidden trunk layers. Zero feeds the encoding straight into the heads.
    pub trunk_layers: usize,
    pub freq_xyz: usize,
    pub freq_t: usize,
    /// Enables the opacity head; off by default so opacity stays canonical.
    pub deform_opacity: bool,
}

impl Default for DeformConfig {
    fn default() -> Self {
        Self { hidden: 64, trunk_layers: 2, freq_xyz: 6, freq_t: 4, deform_opacity: false }
    }
}

impl DeformConfig {
    pub fn encoding_len(&self) -> usize {
        3 + 6 * self.freq_xyz + 1 + 2 * self.freq_t
    }
}

/// Per-frame attribute table aligned with the canonical cloud's order.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameAttributes {
    pub frame_index: usize,
    pub positions: Vec<[f64; 3]>,
    pub log_scales: Vec<[f64; 3]>,
    pub rotations: Vec<Quat>,
    pub opacity_logits: Vec<f64>,
    pub sh: Vec<[f64; SH_COEFFS]>,
    pub lineages: Vec<Lineage>,
    /// Indices (into the arrays above) of the points active in this frame.
    pub membership: Vec<usize>,
}

impl FrameAttributes {
    /// Canonical attributes of `cloud` with every point active.
    pub fn from_cloud(cloud: &GaussianCloud, frame_index: usize) -> Self {
        let pts = &cloud.points;
        Self {
            frame_index,
            positions: pts.iter().map(|p| p.position).collect(),
            log_scales: pts.iter().map(|p| p.log_scale).collect(),
            rotations: pts.iter().map(|p| p.rotation).collect(),
            opacity_logits: pts.iter().map(|p| p.opacity_logit).collect(),
            sh: pts.iter().map(|p| p.sh).collect(),
            lineages: pts.iter().map(|p| p.lineage).collect(),
            membership: (0..pts.len()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn scales(&self) -> Vec<[f64; 3]> {
        self.log_scales.iter().map(|s| s.map(f64::exp)).collect()
    }

    pub fn opacities(&self) -> Vec<f64> {
        self.opacity_logits.iter().map(|&o| crate::gaussian::sigmoid(o)).collect()
    }
}

/// Gradients with respect to a per-point attribute table.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeGrads {
    pub positions: Vec<[f64; 3]>,
    pub log_scales: Vec<[f64; 3]>,
    pub rotations: Vec<Quat>,
    pub opacity_logits: Vec<f64>,
    pub sh: Vec<[f64; SH_COEFFS]>,
}

impl AttributeGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            positions: vec![[0.0; 3]; n],
            log_scales: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
            opacity_logits: vec![0.0; n],
            sh: vec![[0.0; SH_COEFFS]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn add_assign(&mut self, other: &AttributeGrads) {
        fn add<const N: usize>(a: &mut [[f64; N]], b: &[[f64; N]]) {
            for (x, y) in a.iter_mut().zip(b) {
                for k in 0..N {
                    x[k] += y[k];
                }
            }
        }
        add(&mut self.positions, &other.positions);
        add(&mut self.log_scales, &other.log_scales);
        add(&mut self.rotations, &other.rotations);
        add(&mut self.sh, &other.sh);
        for (x, y) in self.opacity_logits.iter_mut().zip(&other.opacity_logits) {
            *x += y;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for v in self.positions.iter_mut().chain(self.log_scales.iter_mut()) {
            v.iter_mut().for_each(|x| *x *= k);
        }
        for v in &mut self.rotations {
            v.iter_mut().for_each(|x| *x *= k);
        }
        for v in &mut self.sh {
            v.iter_mut().for_each(|x| *x *= k);
        }
        self.opacity_logits.iter_mut().for_each(|x| *x *= k);
    }
}

/// Activations saved by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct DeformRecord {
    pub t: f64,
    pub points: usize,
    encoding: Vec<f64>,
    /// Post-ReLU output of each trunk layer.
    trunk: Vec<Vec<f64>>,
    /// Raw rotation head output, 4 per point.
    rot_head: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeformationNet {
    pub config: DeformConfig,
    pub layout: ParamLayout,
    pub params: Vec<f64>,
}

const HEAD_NAMES: [&str; 4] = ["head.position", "head.log_scale", "head.rotation", "head.opacity"];

impl DeformationNet {
    /// Random trunk, zero heads.
    pub fn new(config: DeformConfig, seed: u64) -> Self {
        let mut layout = ParamLayout::default();
        let mut width = config.encoding_len();
        for i in 0..config.trunk_layers {
            layout.push(&format!("trunk.{i}"), width, config.hidden);
            width = config.hidden;
        }
        for (name, out) in HEAD_NAMES.iter().zip([3, 3, 4, 1]) {
            layout.push(name, width, out);
        }
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for d in &layout.layers[..config.trunk_layers] {
            d.init_uniform(&mut params, 2f64.sqrt() * 3f64.sqrt(), &mut rng);
        }
        Self { config, layout, params }
    }

    pub fn from_params(config: DeformConfig, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::new(config, 0);
        if params.len() != net.params.len() {
            return Err(Error::Format(format!(
                "deformation parameter count {} does not match layout {}",
                params.len(),
                net.params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    fn trunk(&self) -> &[Dense] {
        &self.layout.layers[..self.config.trunk_layers]
    }

    fn head(&self, i: usize) -> Dense {
        self.layout.layers[self.config.trunk_layers + i]
    }

    pub fn head_position(&self) -> Dense {
        self.head(0)
    }

    /// Writes the sinusoidal encoding of `(x, t)` into `out`.
    pub fn encode(&self, x: &[f64; 3], t: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.config.encoding_len());
        out[..3].copy_from_slice(x);
        let mut j = 3;
        for k in 0..self.config.freq_xyz {
            let w = (1u64 << k) as f64 * std::f64::consts::PI;
            for xi in x {
                let (s, c) = (w * xi).sin_cos();
                out[j] = s;
                out[j + 1] = c;
                j += 2;
            }
        }
        out[j] = t;
        j += 1;
        for k in 0..self.config.freq_t {
            let w = (1u64 << k) as f64 * std::f64::consts::PI;
            let (s, c) = (w * t).sin_cos();
            out[j] = s;
            out[j + 1] = c;
            j += 2;
        }
    }

    /// Gradient of `dot(upstream, encode(x, t))` with respect to `x`.
    fn encode_vjp_position(&self, x: &[f64; 3], upstream: &[f64]) -> [f64; 3] {
        let mut g = [upstream[0], upstream[1], upstream[2]];
        let mut j = 3;
        for k in 0..self.config.freq_xyz {
            let w = (1u64 << k) as f64 * std::f64::consts::PI;
            for (i, xi) in x.iter().enumerate() {
                let (s, c) = (w * xi).sin_cos();
                g[i] += upstream[j] * w * c - upstream[j + 1] * w * s;
                j += 2;
            }
        }
        g
    }

    pub fn deform(&self, cloud: &GaussianCloud, t: f64, frame_index: usize) -> Result<FrameAttributes> {
        self.deform_with_record(cloud, t, frame_index).map(|(attrs, _)| attrs)
    }

    /// Forward pass keeping the activations needed by [`Self::deform_backward`].
    pub fn deform_with_record(
        &self,
        cloud: &GaussianCloud,
        t: f64,
        frame_index: usize,
    ) -> Result<(FrameAttributes, DeformRecord)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::TimeOutOfRange(t));
        }
        let n = cloud.len();
        let enc_len = self.config.encoding_len();
        let mut encoding = vec![0.0; n * enc_len];
        for (p, row) in cloud.points.iter().zip(encoding.chunks_mut(enc_len)) {
            self.encode(&p.position, t, row);
        }
        let mut trunk = Vec::with_capacity(self.config.trunk_layers);
        for d in self.trunk() {
            let input = trunk.last().unwrap_or(&encoding);
            let mut out = vec![0.0; n * d.outputs];
            d.forward_batch(&self.params, input, n, &mut out);
            relu_in_place(&mut out);
            trunk.push(out);
        }
        let features = trunk.last().unwrap_or(&encoding);
        let mut heads: [Vec<f64>; 4] = Default::default();
        for (i, h) in heads.iter_mut().enumerate() {
            let d = self.head(i);
            *h = vec![0.0; n * d.outputs];
            d.forward_batch(&self.params, features, n, h);
        }

        let mut attrs = FrameAttributes::from_cloud(cloud, frame_index);
        for (i, p) in cloud.points.iter().enumerate() {
            for k in 0..3 {
                attrs.positions[i][k] = p.position[k] + heads[0][i * 3 + k];
                attrs.log_scales[i][k] = p.log_scale[k] + heads[1][i * 3 + k];
            }
            let r = &heads[2][i * 4..i * 4 + 4];
            if r[1] != 0.0 || r[2] != 0.0 || r[3] != 0.0 {
                let delta = normalize_quaternion([1.0, 0.5 * r[1], 0.5 * r[2], 0.5 * r[3]])?;
                attrs.rotations[i] = normalize_quaternion(quat_mul(&p.rotation, &delta))?;
            }
            if self.config.deform_opacity {
                attrs.opacity_logits[i] = p.opacity_logit + heads[3][i];
            }
        }
        let record = DeformRecord { t, points: n, encoding, trunk, rot_head: std::mem::take(&mut heads[2]) };
        Ok((attrs, record))
    }

    /// Backpropagates `upstream` (gradients on the deformed attributes) to the
    /// network parameters and the canonical attributes.
    pub fn deform_backward(
        &self,
        cloud: &GaussianCloud,
        record: &DeformRecord,
        upstream: &AttributeGrads,
    ) -> Result<(Vec<f64>, AttributeGrads)> {
        let n = cloud.len();
        if record.points != n || upstream.len() != n {
            return Err(Error::Contract(format!(
                "deform backward: record has {} points, cloud {}, upstream {}",
                record.points,
                n,
                upstream.len()
            )));
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut canon = AttributeGrads::zeros(n);
        let mut d_heads: [Vec<f64>; 4] =
            [vec![0.0; n * 3], vec![0.0; n * 3], vec![0.0; n * 4], vec![0.0; n]];

        for (i, p) in cloud.points.iter().enumerate() {
            for k in 0..3 {
                canon.positions[i][k] = upstream.positions[i][k];
                d_heads[0][i * 3 + k] = upstream.positions[i][k];
                canon.log_scales[i][k] = upstream.log_scales[i][k];
                d_heads[1][i * 3 + k] = upstream.log_scales[i][k];
            }
            let r = &record.rot_head[i * 4..i * 4 + 4];
            let u = [1.0, 0.5 * r[1], 0.5 * r[2], 0.5 * r[3]];
            let delta = normalize_quaternion(u)?;
            let raw = quat_mul(&p.rotation, &delta);
            let g_raw = normalize_quaternion_vjp(&raw, &upstream.rotations[i]);
            let (g_canon, g_delta) = quat_mul_vjp(&p.rotation, &delta, &g_raw);
            let g_u = normalize_quaternion_vjp(&u, &g_delta);
            canon.rotations[i] = g_canon;
            for k in 1..4 {
                d_heads[2][i * 4 + k] = 0.5 * g_u[k];
            }
            canon.opacity_logits[i] = upstream.opacity_logits[i];
            if self.config.deform_opacity {
                d_heads[3][i] = upstream.opacity_logits[i];
            }
            canon.sh[i] = upstream.sh[i];
        }

        let features = record.trunk.last().unwrap_or(&record.encoding);
        let width = self.head(0).inputs;
        let mut d_features = vec![0.0; n * width];
        let mut scratch = vec![0.0; n * width];
        for (i, dh) in d_heads.iter().enumerate() {
            let d = self.head(i);
            d.backward_batch(&self.params, features, dh, n, &mut grads, Some(&mut scratch));
            for (a, b) in d_features.iter_mut().zip(&scratch) {
                *a += b;
            }
        }
        let mut d_out = d_features;
        for (li, d) in self.trunk().iter().enumerate().rev() {
            relu_backward_in_place(&record.trunk[li], &mut d_out);
            let input = if li == 0 { &record.encoding } else { &record.trunk[li - 1] };
            let mut d_in = vec![0.0; n * d.inputs];
            d.backward_batch(&self.params, input, &d_out, n, &mut grads, Some(&mut d_in));
            d_out = d_in;
        }
        let enc_len = self.config.encoding_len();
        for (i, p) in cloud.points.iter().enumerate() {
            let g = self.encode_vjp_position(&p.position, &d_out[i * enc_len..(i + 1) * enc_len]);
            for k in 0..3 {
                canon.positions[i][k] += g[k];
            }
        }
        Ok((grads, canon))
    }
}
