use ndarray::{Array1, Array4, ArrayD};

use super::{join, Mode, Module, Param, Visitor};

/// Batch normalization over the `(N, H, W)` axes of an NCHW tensor.
///
/// Running statistics follow the usual exponential update with the unbiased
/// batch variance; eval mode normalizes with them and is a fixed affine map.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: ArrayD<f64>,
    pub running_var: ArrayD<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug)]
pub struct BnCache {
    xhat: Array4<f64>,
    inv_std: Array1<f64>,
    train: bool,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self::with_eps(channels, 1e-5)
    }

    pub fn with_eps(channels: usize, eps: f64) -> Self {
        Self {
            gamma: Param::new(ArrayD::ones(vec![channels])),
            beta: Param::new(ArrayD::zeros(vec![channels])),
            running_mean: ArrayD::zeros(vec![channels]),
            running_var: ArrayD::ones(vec![channels]),
            momentum: 0.1,
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let c = self.channels();
        let inv_std: Vec<f64> = (0..c).map(|i| 1.0 / (self.running_var[i] + self.eps).sqrt()).collect();
        let mean: Vec<f64> = (0..c).map(|i| self.running_mean[i]).collect();
        self.affine(x, &mean, &inv_std)
    }

    fn affine(&self, x: &Array4<f64>, mean: &[f64], inv_std: &[f64]) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let mut y = x.as_standard_layout().into_owned();
        let ys = y.as_slice_mut().expect("standard layout");
        for ni in 0..n {
            for ci in 0..c {
                let (g, b) = (self.gamma.value[ci], self.beta.value[ci]);
                let scale = g * inv_std[ci];
                for v in &mut ys[(ni * c + ci) * h * w..][..h * w] {
                    *v = (*v - mean[ci]) * scale + b;
                }
            }
        }
        y
    }

    pub fn forward_t(&mut self, x: &Array4<f64>, mode: Mode) -> (Array4<f64>, BnCache) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels(), "batch-norm channel mismatch");
        let (mean, inv_std) = if mode.is_train() {
            let xs = x.as_standard_layout();
            let xs = xs.as_slice().expect("standard layout");
            let m = (n * h * w) as f64;
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let mut s = 0.0;
                for ni in 0..n {
                    s += xs[(ni * c + ci) * h * w..][..h * w].iter().sum::<f64>();
                }
                mean[ci] = s / m;
                let mut q = 0.0;
                for ni in 0..n {
                    q += xs[(ni * c + ci) * h * w..][..h * w].iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
                }
                var[ci] = q / m;
            }
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            for ci in 0..c {
                self.running_mean[ci] = (1.0 - self.momentum) * self.running_mean[ci] + self.momentum * mean[ci];
                self.running_var[ci] = (1.0 - self.momentum) * self.running_var[ci] + self.momentum * var[ci] * unbias;
            }
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
            (mean, inv_std)
        } else {
            let mean: Vec<f64> = self.running_mean.iter().copied().collect();
            let inv_std = self.running_var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
            (mean, inv_std)
        };
        let mut xhat = x.as_standard_layout().into_owned();
        {
            let hs = xhat.as_slice_mut().expect("standard layout");
            for ni in 0..n {
                for ci in 0..c {
                    for v in &mut hs[(ni * c + ci) * h * w..][..h * w] {
                        *v = (*v - mean[ci]) * inv_std[ci];
                    }
                }
            }
        }
        let y = self.affine(&xhat, &vec![0.0; c], &vec![1.0; c]);
        (y, BnCache { xhat, inv_std: Array1::from(inv_std), train: mode.is_train() })
    }

    pub fn backward(&mut self, cache: &BnCache, gy: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = gy.dim();
        let gys = gy.as_standard_layout();
        let gys = gys.as_slice().expect("standard layout");
        let mut gx = Array4::zeros((n, c, h, w));
        let gxs = gx.as_slice_mut().expect("fresh array");
        let m = (n * h * w) as f64;
        let xs = cache.xhat.as_slice().expect("standard layout");
        for ci in 0..c {
            let (mut sum_g, mut sum_gx) = (0.0, 0.0);
            for ni in 0..n {
                let off = (ni * c + ci) * h * w;
                for p in 0..h * w {
                    sum_g += gys[off + p];
                    sum_gx += gys[off + p] * xs[off + p];
                }
            }
            self.gamma.grad[ci] += sum_gx;
            self.beta.grad[ci] += sum_g;
            let scale = self.gamma.value[ci] * cache.inv_std[ci];
            for ni in 0..n {
                let off = (ni * c + ci) * h * w;
                for p in 0..h * w {
                    gxs[off + p] = if cache.train { scale / m * (m * gys[off + p] - sum_g - xs[off + p] * sum_gx) } else { scale * gys[off + p] };
                }
            }
        }
        gx
    }
}

impl Module for BatchNorm2d {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        v.param(&join(prefix, "weight"), &mut self.gamma);
        v.param(&join(prefix, "bias"), &mut self.beta);
        v.buffer(&join(prefix, "running_mean"), &mut self.running_mean);
        v.buffer(&join(prefix, "running_var"), &mut self.running_var);
    }
}
