//! Adam over flat parameter blocks and the exponential learning-rate decay.

/// First/second-moment state for one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub steps: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-15, m: vec![0.0; len], v: vec![0.0; len], steps: 0 }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        let step_size = lr / bc1;
        let bc2_sqrt = bc2.sqrt();
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let denom = self.v[i].sqrt() / bc2_sqrt + self.eps;
            params[i] -= step_size * self.m[i] / denom;
        }
    }

    /// Re-indexes per-row moments after the rows of the block were
    /// reordered. `sources[new_row]` names the old row or `None` for a fresh
    /// row, which starts from zero moments.
    pub fn remap_rows(&mut self, stride: usize, sources: &[Option<usize>]) {
        let remap = |old: &[f64]| {
            let mut out = vec![0.0; sources.len() * stride];
            for (new_row, src) in sources.iter().enumerate() {
                if let Some(s) = src {
                    out[new_row * stride..(new_row + 1) * stride]
                        .copy_from_slice(&old[s * stride..(s + 1) * stride]);
                }
            }
            out
        };
        self.m = remap(&self.m);
        self.v = remap(&self.v);
    }
}

/// Log-linear decay between two learning rates.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExpDecay {
    pub init: f64,
    pub end: f64,
    pub total_steps: usize,
}

impl Default for ExpDecay {
    fn default() -> Self {
        Self { init: 1.6e-4, end: 1.6e-6, total_steps: 10_000 }
    }
}

impl ExpDecay {
    pub fn at(&self, step: usize) -> f64 {
        if step == 0 {
            return self.init;
        }
        if step >= self.total_steps {
            return self.end;
        }
        let s = step as f64 / self.total_steps as f64;
        (self.init.ln() * (1.0 - s) + self.end.ln() * s).exp()
    }
}
