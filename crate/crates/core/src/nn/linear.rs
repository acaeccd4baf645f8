use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis, Ix1, Ix2};
use rand::Rng;

use super::{join, leaky_relu, leaky_relu_backward, Module, Param, Visitor};

/// Fully connected layer `y = x Wᵀ + b` with `W` shaped `(out, in)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        let w = Array2::from_shape_fn((outputs, inputs), |_| rng.random_range(-bound..bound));
        let b = Array1::from_shape_fn(outputs, |_| rng.random_range(-bound..bound));
        Self { weight: Param::new(w.into_dyn()), bias: Param::new(b.into_dyn()) }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    fn w(&self) -> ArrayView2<'_, f64> {
        self.weight.value.view().into_dimensionality::<Ix2>().expect("linear weight is 2-D")
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut y = Array2::zeros((x.nrows(), self.outputs()));
        general_mat_mul(1.0, &x, &self.w().t(), 0.0, &mut y);
        let b = self.bias.value.view().into_dimensionality::<Ix1>().expect("bias is 1-D");
        y += &b;
        y
    }

    /// `x` is the input that produced the output whose gradient is `gy`.
    pub fn backward(&mut self, x: ArrayView2<'_, f64>, gy: ArrayView2<'_, f64>) -> Array2<f64> {
        {
            let mut gw = self.weight.grad.view_mut().into_dimensionality::<Ix2>().expect("2-D");
            general_mat_mul(1.0, &gy.t(), &x, 1.0, &mut gw);
        }
        {
            let mut gb = self.bias.grad.view_mut().into_dimensionality::<Ix1>().expect("1-D");
            gb += &gy.sum_axis(Axis(0));
        }
        let mut gx = Array2::zeros((gy.nrows(), self.inputs()));
        general_mat_mul(1.0, &gy, &self.w(), 0.0, &mut gx);
        gx
    }
}

impl Module for Linear {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        v.param(&join(prefix, "weight"), &mut self.weight);
        v.param(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Stack of linear layers with leaky-ReLU between them; the activation after
/// the last layer is optional.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activate_last: bool,
    pub slope: f64,
}

#[derive(Debug)]
pub struct MlpCache {
    /// Input of every layer, then the final output.
    acts: Vec<Array2<f64>>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(widths: &[usize], activate_last: bool, slope: f64, rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        let layers = widths.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect();
        Self { layers, activate_last, slope }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map(Linear::outputs).unwrap_or(0)
    }

    fn activated(&self, i: usize) -> bool {
        i + 1 < self.layers.len() || self.activate_last
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(h.view());
            if self.activated(i) {
                h = leaky_relu(h, self.slope);
            }
        }
        h
    }

    pub fn forward_t(&self, x: Array2<f64>) -> (Array2<f64>, MlpCache) {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x);
        for (i, layer) in self.layers.iter().enumerate() {
            let mut h = layer.forward(acts[i].view());
            if self.activated(i) {
                h = leaky_relu(h, self.slope);
            }
            acts.push(h);
        }
        let out = acts.last().cloned().expect("non-empty");
        (out, MlpCache { acts })
    }

    pub fn backward(&mut self, cache: &MlpCache, gy: Array2<f64>) -> Array2<f64> {
        let mut g = gy;
        for i in (0..self.layers.len()).rev() {
            if self.activated(i) {
                g = leaky_relu_backward(&cache.acts[i + 1], g, self.slope);
            }
            g = self.layers[i].backward(cache.acts[i].view(), g.view());
        }
        g
    }
}

impl Module for Mlp {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit(&join(prefix, &i.to_string()), v);
        }
    }
}
