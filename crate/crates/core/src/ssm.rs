//! Selective state-space layer (diagonal, input-dependent step size and
//! projections) with a sequential recurrence and a log-depth associative scan.
//!
//! For channel `d` and state `n`:
//!
//! ```text
//! Δ_t   = softplus(W_Δ x_t + b_Δ)
//! B_t   = W_B x_t,   C_t = W_C x_t
//! Ā_t   = exp(Δ_t[d] · A[d,n]),   A = -exp(a_log)
//! h_t   = Ā_t ⊙ h_{t-1} + Δ_t[d] · B_t[n] · x_t[d]
//! y_t   = Σ_n C_t[n] h_t[d,n] + D[d] x_t[d]
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gaussian::sigmoid;
use crate::nn::{softplus, Dense, ParamLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanMode {
    Sequential,
    #[default]
    LogDepth,
}

/// Inclusive scan of `h_t = a_t ⊙ h_{t-1} + b_t` with `h_0 = 0`, stepping
/// through time. `a` and `b` are `len x width`, row-major.
pub fn scan_sequential(a: &[f64], b: &[f64], width: usize) -> Vec<f64> {
    assert_eq!(a.len(), b.len());
    let mut h = vec![0.0; b.len()];
    let len = if width == 0 { 0 } else { b.len() / width };
    for t in 0..len {
        let row = t * width;
        for j in 0..width {
            let prev = if t == 0 { 0.0 } else { h[row - width + j] };
            h[row + j] = a[row + j] * prev + b[row + j];
        }
    }
    h
}

/// Same recurrence via a Hillis–Steele parallel prefix over the associative
/// operator `(a1, b1) • (a2, b2) = (a1 a2, a2 b1 + b2)`: `⌈log2 len⌉` sweeps,
/// each independent across time steps.
pub fn scan_log_depth(a: &[f64], b: &[f64], width: usize) -> Vec<f64> {
    assert_eq!(a.len(), b.len());
    let len = if width == 0 { 0 } else { b.len() / width };
    let mut ca = a.to_vec();
    let mut cb = b.to_vec();
    let mut na = ca.clone();
    let mut nb = cb.clone();
    let mut offset = 1;
    while offset < len {
        for t in 0..len {
            let row = t * width;
            if t < offset {
                na[row..row + width].copy_from_slice(&ca[row..row + width]);
                nb[row..row + width].copy_from_slice(&cb[row..row + width]);
            } else {
                let src = (t - offset) * width;
                for j in 0..width {
                    na[row + j] = ca[src + j] * ca[row + j];
                    nb[row + j] = ca[row + j] * cb[src + j] + cb[row + j];
                }
            }
        }
        std::mem::swap(&mut ca, &mut na);
        std::mem::swap(&mut cb, &mut nb);
        offset *= 2;
    }
    cb
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SsmConfig {
    pub channels: usize,
    pub state: usize,
    pub scan: ScanMode,
}

impl Default for SsmConfig {
    fn default() -> Self {
        Self { channels: crate::rectifier::FEATURE_WIDTH, state: 16, scan: ScanMode::LogDepth }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectiveSsm {
    pub config: SsmConfig,
    pub layout: ParamLayout,
    pub params: Vec<f64>,
    delta: Dense,
    proj_b: Dense,
    proj_c: Dense,
    a_log: Dense,
    skip: Dense,
}

/// Everything the backward pass needs from a forward evaluation.
#[derive(Debug, Clone)]
pub struct SsmRecord {
    pub len: usize,
    xs: Vec<f64>,
    pre_delta: Vec<f64>,
    delta: Vec<f64>,
    bs: Vec<f64>,
    cs: Vec<f64>,
    abar: Vec<f64>,
    hs: Vec<f64>,
}

impl SelectiveSsm {
    pub fn new(config: SsmConfig, seed: u64) -> Self {
        let (d, n) = (config.channels, config.state);
        let mut layout = ParamLayout::default();
        let delta = layout.push("ssm.delta", d, d);
        let proj_b = layout.push_matrix("ssm.b", n, d);
        let proj_c = layout.push_matrix("ssm.c", n, d);
        let a_log = layout.push_matrix("ssm.a_log", d, n);
        let skip = layout.push_matrix("ssm.d", d, 1);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        delta.init_uniform(&mut params, 0.1, &mut rng);
        proj_b.init_uniform(&mut params, 1.0, &mut rng);
        proj_c.init_uniform(&mut params, 1.0, &mut rng);
        // Step sizes start log-uniform in [1e-3, 1e-1].
        for b in delta.bias_mut(&mut params) {
            let dt = (rng.gen_range(0.001f64.ln()..0.1f64.ln())).exp();
            *b = dt + (-(-dt).exp_m1()).ln();
        }
        let a = a_log.weight_mut(&mut params);
        for ch in 0..d {
            for s in 0..n {
                a[ch * n + s] = ((s + 1) as f64).ln();
            }
        }
        skip.weight_mut(&mut params).iter_mut().for_each(|v| *v = 1.0);
        Self { config, layout, params, delta, proj_b, proj_c, a_log, skip }
    }

    pub fn with_params(config: SsmConfig, params: Vec<f64>) -> Result<Self> {
        let mut ssm = Self::new(config, 0);
        if params.len() != ssm.params.len() {
            return Err(Error::Format(format!(
                "ssm parameter count {} does not match layout {}",
                params.len(),
                ssm.params.len()
            )));
        }
        ssm.params = params;
        Ok(ssm)
    }

    pub fn a_log_block(&self) -> Dense {
        self.a_log
    }

    /// Discretized decay `Ā = exp(Δ A)` for a given step size, exposed for tests.
    pub fn decay(&self, channel: usize, state: usize, step: f64) -> f64 {
        let a = -self.a_log.weight(&self.params)[channel * self.config.state + state].exp();
        (step * a).exp()
    }

    /// Runs the layer over `xs` (`len x channels`) and returns every output row.
    pub fn forward(&self, xs: &[f64]) -> Result<(Vec<f64>, SsmRecord)> {
        let (d, n) = (self.config.channels, self.config.state);
        if d == 0 || xs.len() % d != 0 {
            return Err(Error::Contract(format!("ssm input length {} not a multiple of {d}", xs.len())));
        }
        let len = xs.len() / d;
        let p = &self.params;
        let mut pre_delta = vec![0.0; len * d];
        self.delta.forward_batch(p, xs, len, &mut pre_delta);
        let delta: Vec<f64> = pre_delta.iter().map(|&z| softplus(z)).collect();
        let mut bs = vec![0.0; len * n];
        self.proj_b.forward_batch(p, xs, len, &mut bs);
        let mut cs = vec![0.0; len * n];
        self.proj_c.forward_batch(p, xs, len, &mut cs);
        let a_log = self.a_log.weight(p);

        let width = d * n;
        let mut abar = vec![0.0; len * width];
        let mut bbar = vec![0.0; len * width];
        for t in 0..len {
            for ch in 0..d {
                let dt = delta[t * d + ch];
                let x = xs[t * d + ch];
                for s in 0..n {
                    let idx = t * width + ch * n + s;
                    abar[idx] = (-dt * a_log[ch * n + s].exp()).exp();
                    bbar[idx] = dt * bs[t * n + s] * x;
                }
            }
        }
        let hs = match self.config.scan {
            ScanMode::Sequential => scan_sequential(&abar, &bbar, width),
            ScanMode::LogDepth => scan_log_depth(&abar, &bbar, width),
        };
        let skip = self.skip.weight(p);
        let mut ys = vec![0.0; len * d];
        for t in 0..len {
            for ch in 0..d {
                let h = &hs[t * width + ch * n..t * width + (ch + 1) * n];
                let c = &cs[t * n..(t + 1) * n];
                ys[t * d + ch] =
                    h.iter().zip(c).map(|(a, b)| a * b).sum::<f64>() + skip[ch] * xs[t * d + ch];
            }
        }
        let record = SsmRecord { len, xs: xs.to_vec(), pre_delta, delta, bs, cs, abar, hs };
        Ok((ys, record))
    }

    /// Backpropagates output gradients `dys` (`len x channels`) to parameters
    /// and inputs.
    pub fn backward(&self, record: &SsmRecord, dys: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (d, n) = (self.config.channels, self.config.state);
        let len = record.len;
        if dys.len() != len * d {
            return Err(Error::Contract(format!("ssm backward: expected {} grads, got {}", len * d, dys.len())));
        }
        let p = &self.params;
        let width = d * n;
        let mut grads = vec![0.0; p.len()];
        let mut dxs = vec![0.0; len * d];
        let mut d_delta = vec![0.0; len * d];
        let mut d_bs = vec![0.0; len * n];
        let mut d_cs = vec![0.0; len * n];
        let a_log = self.a_log.weight(p).to_vec();
        let skip = self.skip.weight(p).to_vec();
        let mut g_a_log = vec![0.0; d * n];
        let mut g_skip = vec![0.0; d];

        let mut dh = vec![0.0; width];
        for t in (0..len).rev() {
            for ch in 0..d {
                let dy = dys[t * d + ch];
                let x = record.xs[t * d + ch];
                g_skip[ch] += dy * x;
                dxs[t * d + ch] += dy * skip[ch];
                let dt = record.delta[t * d + ch];
                for s in 0..n {
                    let j = ch * n + s;
                    let idx = t * width + j;
                    d_cs[t * n + s] += dy * record.hs[idx];
                    // dh_t = C_t dy_t + Ā_{t+1} dh_{t+1}; `dh` holds the carried term.
                    let carried = if t + 1 < len { record.abar[idx + width] * dh[j] } else { 0.0 };
                    let g = dy * record.cs[t * n + s] + carried;
                    dh[j] = g;
                    let h_prev = if t == 0 { 0.0 } else { record.hs[idx - width] };
                    let a_val = -a_log[j].exp();
                    let abar = record.abar[idx];
                    // Ā = exp(Δ A)
                    let d_abar = g * h_prev;
                    d_delta[t * d + ch] += d_abar * abar * a_val;
                    g_a_log[j] += d_abar * abar * dt * a_val;
                    // B̄x = Δ B x
                    let b = record.bs[t * n + s];
                    d_delta[t * d + ch] += g * b * x;
                    d_bs[t * n + s] += g * dt * x;
                    dxs[t * d + ch] += g * dt * b;
                }
            }
        }
        let d_pre: Vec<f64> =
            d_delta.iter().zip(&record.pre_delta).map(|(g, &z)| g * sigmoid(z)).collect();
        let mut scratch = vec![0.0; len * d];
        self.delta.backward_batch(p, &record.xs, &d_pre, len, &mut grads, Some(&mut scratch));
        add(&mut dxs, &scratch);
        self.proj_b.backward_batch(p, &record.xs, &d_bs, len, &mut grads, Some(&mut scratch));
        add(&mut dxs, &scratch);
        self.proj_c.backward_batch(p, &record.xs, &d_cs, len, &mut grads, Some(&mut scratch));
        add(&mut dxs, &scratch);
        add(self.a_log.weight_mut(&mut grads), &g_a_log);
        add(self.skip.weight_mut(&mut grads), &g_skip);
        Ok((grads, dxs))
    }
}

fn add(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}
