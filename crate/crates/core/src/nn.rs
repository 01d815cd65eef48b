//! Small dense networks with explicit backpropagation.
//!
//! Batches are row-major `(batch, features)` matrices. Gradients are stored in
//! the same structs as the parameters they belong to, so optimizers and
//! finite-difference checks can walk both through [`ParamSet`].

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: &mut Array2<f64>) {
        match self {
            Activation::Identity => {}
            Activation::Relu => x.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => x.mapv_inplace(f64::tanh),
        }
    }

    /// Multiply `grad` in place by the derivative, given the activation output.
    fn backprop(self, output: &Array2<f64>, grad: &mut Array2<f64>) {
        match self {
            Activation::Identity => {}
            Activation::Relu => grad.zip_mut_with(output, |g, &y| {
                if y <= 0.0 {
                    *g = 0.0
                }
            }),
            Activation::Tanh => grad.zip_mut_with(output, |g, &y| *g *= 1.0 - y * y),
        }
    }
}

/// Anything holding a fixed list of `f64` tensors.
pub trait ParamSet {
    fn param_slices(&self) -> Vec<&[f64]>;
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    fn flat_params(&self) -> Vec<f64> {
        self.param_slices().concat()
    }

    /// Panics if `flat` has the wrong length.
    fn set_flat_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let mut offset = 0;
        for s in self.param_slices_mut() {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        }
    }

    fn fill_zero(&mut self) {
        for s in self.param_slices_mut() {
            s.fill(0.0);
        }
    }

    fn all_finite(&self) -> bool {
        self.param_slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `(inputs, outputs)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    /// Uniform fan-in initialization (He for ReLU, LeCun otherwise), zero bias.
    pub fn new<R: Rng + ?Sized>(
        inputs: usize,
        outputs: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let gain = if activation == Activation::Relu { 6.0 } else { 3.0 };
        Self::with_scale(inputs, outputs, activation, (gain / inputs as f64).sqrt(), rng)
    }

    pub fn with_scale<R: Rng + ?Sized>(
        inputs: usize,
        outputs: usize,
        activation: Activation,
        limit: f64,
        rng: &mut R,
    ) -> Self {
        let weight = Array2::from_shape_simple_fn((inputs, outputs), || rng.gen_range(-limit..=limit));
        Dense {
            weight,
            bias: Array1::zeros(outputs),
            activation,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Dense {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
            activation: self.activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        self.activation.apply(&mut y);
        y
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    /// `output` is this layer's forward output for `input`.
    pub fn backward(
        &self,
        input: ArrayView2<f64>,
        output: &Array2<f64>,
        mut grad_out: Array2<f64>,
        grad: &mut Dense,
    ) -> Array2<f64> {
        self.activation.backprop(output, &mut grad_out);
        grad.weight += &input.t().dot(&grad_out);
        grad.bias += &grad_out.sum_axis(Axis(0));
        grad_out.dot(&self.weight.t())
    }
}

impl ParamSet for Dense {
    fn param_slices(&self) -> Vec<&[f64]> {
        vec![
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Per-layer outputs from a forward pass; `outputs[0]` is the input.
pub struct Trace {
    pub outputs: Vec<Array2<f64>>,
}

impl Trace {
    pub fn output(&self) -> &Array2<f64> {
        self.outputs.last().expect("non-empty trace")
    }
}

impl Mlp {
    /// `sizes = [in, h1, ..., out]`; `hidden` applies between layers, `last` on the output.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        last: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least one layer");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { last } else { hidden };
                Dense::new(sizes[i], sizes[i + 1], act, rng)
            })
            .collect();
        Mlp { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("layers").outputs()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = self.layers[0].forward(x);
        for layer in &self.layers[1..] {
            h = layer.forward(h.view());
        }
        h
    }

    pub fn forward_trace(&self, x: Array2<f64>) -> Trace {
        let mut outputs = Vec::with_capacity(self.layers.len() + 1);
        outputs.push(x);
        for layer in &self.layers {
            let y = layer.forward(outputs.last().unwrap().view());
            outputs.push(y);
        }
        Trace { outputs }
    }

    /// Accumulates into `grad` and returns the gradient with respect to the input.
    pub fn backward(&self, trace: &Trace, grad_out: Array2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let mut g = grad_out;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            g = layer.backward(
                trace.outputs[i].view(),
                &trace.outputs[i + 1],
                g,
                &mut grad.layers[i],
            );
        }
        g
    }

    pub fn shapes(&self, prefix: &str) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), vec![l.inputs(), l.outputs()]));
            out.push((format!("{prefix}.{i}.bias"), vec![l.outputs()]));
        }
        out
    }
}

impl ParamSet for Mlp {
    fn param_slices(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.param_slices()).collect()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.param_slices_mut()).collect()
    }
}

/// SGD with classical momentum: `v = mu * v - lr * g; p += v`.
#[derive(Clone, Debug, Default)]
pub struct Momentum {
    velocity: Vec<Vec<f64>>,
}

impl Momentum {
    pub fn step<P: ParamSet + ?Sized, G: ParamSet + ?Sized>(
        &mut self,
        params: &mut P,
        grads: &G,
        learning_rate: f64,
        momentum: f64,
    ) {
        let grads = grads.param_slices();
        let mut params = params.param_slices_mut();
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            for ((p, g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *v = momentum * *v - learning_rate * g;
                *p += *v;
            }
        }
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }
}

/// Convert observations into a `(batch, cells)` matrix.
pub fn stack_rows<'a, I>(rows: I, dim: usize) -> Array2<f64>
where
    I: IntoIterator<Item = &'a [f32]>,
{
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        assert_eq!(r.len(), dim, "row width");
        data.extend(r.iter().map(|&v| v as f64));
        n += 1;
    }
    Array2::from_shape_vec((n, dim), data).expect("shape")
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
