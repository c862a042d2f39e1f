//! Dense layers over flat parameter vectors.
//!
//! Every network in the crate keeps its parameters in one `Vec<f64>` and
//! describes it with a [`ParamLayout`]. Gradients use the same layout, which
//! keeps the optimizer, serialization and finite-difference checks generic.

use rand::Rng;

/// One affine layer `y = W x + b`, `W` stored row-major as `outputs x inputs`.
/// Without a bias it doubles as a plain parameter matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub offset: usize,
    pub has_bias: bool,
}

impl Dense {
    pub fn weight_len(&self) -> usize {
        self.inputs * self.outputs
    }

    pub fn bias_len(&self) -> usize {
        if self.has_bias {
            self.outputs
        } else {
            0
        }
    }

    pub fn len(&self) -> usize {
        self.weight_len() + self.bias_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn weight<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset..self.offset + self.weight_len()]
    }

    pub fn bias<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        let start = self.offset + self.weight_len();
        &params[start..start + self.bias_len()]
    }

    pub fn weight_mut<'a>(&self, params: &'a mut [f64]) -> &'a mut [f64] {
        &mut params[self.offset..self.offset + self.weight_len()]
    }

    pub fn bias_mut<'a>(&self, params: &'a mut [f64]) -> &'a mut [f64] {
        let start = self.offset + self.weight_len();
        &mut params[start..start + self.bias_len()]
    }

    /// Single-vector forward pass.
    pub fn forward(&self, params: &[f64], x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.inputs);
        debug_assert_eq!(y.len(), self.outputs);
        let w = self.weight(params);
        let b = self.bias(params);
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &w[o * self.inputs..(o + 1) * self.inputs];
            let bias = if self.has_bias { b[o] } else { 0.0 };
            *yo = bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// Single-vector backward pass; accumulates into `grads` and, when given,
    /// writes (not accumulates) the input gradient.
    pub fn backward(&self, params: &[f64], x: &[f64], dy: &[f64], grads: &mut [f64], dx: Option<&mut [f64]>) {
        let n_in = self.inputs;
        {
            let gw = self.weight_mut(grads);
            for (o, &g) in dy.iter().enumerate() {
                if g != 0.0 {
                    for (gwi, xi) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
                        *gwi += g * xi;
                    }
                }
            }
        }
        for (gb, g) in self.bias_mut(grads).iter_mut().zip(dy) {
            *gb += g;
        }
        if let Some(dx) = dx {
            let w = self.weight(params);
            dx.iter_mut().for_each(|v| *v = 0.0);
            for (o, &g) in dy.iter().enumerate() {
                if g != 0.0 {
                    for (dxi, wi) in dx.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                        *dxi += g * wi;
                    }
                }
            }
        }
    }

    /// Batched forward: `x` is `rows x inputs`, `y` is `rows x outputs`.
    pub fn forward_batch(&self, params: &[f64], x: &[f64], rows: usize, y: &mut [f64]) {
        assert_eq!(x.len(), rows * self.inputs);
        assert_eq!(y.len(), rows * self.outputs);
        if self.has_bias {
            let b = self.bias(params);
            for r in 0..rows {
                y[r * self.outputs..(r + 1) * self.outputs].copy_from_slice(b);
            }
        } else {
            y.iter_mut().for_each(|v| *v = 0.0);
        }
        if rows == 0 || self.inputs == 0 {
            return;
        }
        let w = self.weight(params);
        // y (rows x out) += x (rows x in) * W^T (in x out)
        unsafe {
            matrixmultiply::dgemm(
                rows,
                self.inputs,
                self.outputs,
                1.0,
                x.as_ptr(),
                self.inputs as isize,
                1,
                w.as_ptr(),
                1,
                self.inputs as isize,
                1.0,
                y.as_mut_ptr(),
                self.outputs as isize,
                1,
            );
        }
    }

    /// Batched backward. Parameter gradients accumulate; `dx` is overwritten.
    pub fn backward_batch(
        &self,
        params: &[f64],
        x: &[f64],
        dy: &[f64],
        rows: usize,
        grads: &mut [f64],
        dx: Option<&mut [f64]>,
    ) {
        assert_eq!(x.len(), rows * self.inputs);
        assert_eq!(dy.len(), rows * self.outputs);
        if rows == 0 {
            if let Some(dx) = dx {
                dx.iter_mut().for_each(|v| *v = 0.0);
            }
            return;
        }
        {
            let gw = self.weight_mut(grads);
            // dW (out x in) += dy^T (out x rows) * x (rows x in)
            unsafe {
                matrixmultiply::dgemm(
                    self.outputs,
                    rows,
                    self.inputs,
                    1.0,
                    dy.as_ptr(),
                    1,
                    self.outputs as isize,
                    x.as_ptr(),
                    self.inputs as isize,
                    1,
                    1.0,
                    gw.as_mut_ptr(),
                    self.inputs as isize,
                    1,
                );
            }
        }
        if self.has_bias {
            let gb = self.bias_mut(grads);
            for r in 0..rows {
                for (g, d) in gb.iter_mut().zip(&dy[r * self.outputs..(r + 1) * self.outputs]) {
                    *g += d;
                }
            }
        }
        if let Some(dx) = dx {
            assert_eq!(dx.len(), rows * self.inputs);
            let w = self.weight(params);
            // dx (rows x in) = dy (rows x out) * W (out x in)
            unsafe {
                matrixmultiply::dgemm(
                    rows,
                    self.outputs,
                    self.inputs,
                    1.0,
                    dy.as_ptr(),
                    self.outputs as isize,
                    1,
                    w.as_ptr(),
                    self.inputs as isize,
                    1,
                    0.0,
                    dx.as_mut_ptr(),
                    self.inputs as isize,
                    1,
                );
            }
        }
    }

    /// Uniform fan-in initialization of the weights, zero bias.
    pub fn init_uniform(&self, params: &mut [f64], gain: f64, rng: &mut impl Rng) {
        let bound = gain * (1.0 / self.inputs.max(1) as f64).sqrt();
        for w in self.weight_mut(params) {
            *w = rng.gen_range(-bound..bound);
        }
        self.bias_mut(params).iter_mut().for_each(|b| *b = 0.0);
    }
}

/// Ordered list of named dense layers packed into one parameter vector.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParamLayout {
    pub names: Vec<String>,
    pub layers: Vec<Dense>,
    pub total: usize,
}

impl ParamLayout {
    pub fn push(&mut self, name: &str, inputs: usize, outputs: usize) -> Dense {
        self.push_block(name, inputs, outputs, true)
    }

    /// A `rows x cols` parameter matrix without bias.
    pub fn push_matrix(&mut self, name: &str, rows: usize, cols: usize) -> Dense {
        self.push_block(name, cols, rows, false)
    }

    fn push_block(&mut self, name: &str, inputs: usize, outputs: usize, has_bias: bool) -> Dense {
        let dense = Dense { inputs, outputs, offset: self.total, has_bias };
        self.total += dense.len();
        self.names.push(name.to_owned());
        self.layers.push(dense);
        dense
    }

    /// `(outputs, inputs, has_bias)` for every layer, in order.
    pub fn manifest(&self) -> Vec<(u32, u32, bool)> {
        self.layers.iter().map(|d| (d.outputs as u32, d.inputs as u32, d.has_bias)).collect()
    }

    pub fn find(&self, name: &str) -> Option<Dense> {
        self.names.iter().position(|n| n == name).map(|i| self.layers[i])
    }
}

pub fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Masks `grad` by the ReLU derivative evaluated from the post-activation.
pub fn relu_backward_in_place(activated: &[f64], grad: &mut [f64]) {
    for (g, a) in grad.iter_mut().zip(activated) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}
