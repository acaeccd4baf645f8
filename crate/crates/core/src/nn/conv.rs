use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayViewMut2, Ix1};
use rand::Rng;

use super::{join, Module, Param, Visitor};

/// Kernel size, stride and zero padding of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvGeom {
    pub fn square(k: usize, stride: usize, pad: usize) -> Self {
        Self { kh: k, kw: k, stride, ph: pad, pw: pad }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let ho = (h + 2 * self.ph - self.kh) / self.stride + 1;
        let wo = (w + 2 * self.pw - self.kw) / self.stride + 1;
        (ho, wo)
    }

    /// Output size of the transposed convolution with the same geometry.
    pub fn transposed_output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let ho = (h - 1) * self.stride + self.kh - 2 * self.ph;
        let wo = (w - 1) * self.stride + self.kw - 2 * self.pw;
        (ho, wo)
    }
}

#[inline]
fn source_index(o: usize, k: usize, stride: usize, pad: usize, limit: usize) -> Option<usize> {
    let i = (o * stride + k) as isize - pad as isize;
    (i >= 0 && (i as usize) < limit).then_some(i as usize)
}

/// Unfolds an NCHW tensor into a `(N·Ho·Wo, C·kh·kw)` patch matrix.
pub fn im2col(x: &Array4<f64>, g: &ConvGeom) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = g.output_hw(h, w);
    let k = c * g.kh * g.kw;
    let mut cols = Array2::<f64>::zeros((n * ho * wo, k));
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let out = cols.as_slice_mut().expect("fresh array");
    for ni in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &mut out[((ni * ho + oy) * wo + ox) * k..][..k];
                for ci in 0..c {
                    let plane = &xs[(ni * c + ci) * h * w..][..h * w];
                    for ky in 0..g.kh {
                        let Some(iy) = source_index(oy, ky, g.stride, g.ph, h) else { continue };
                        let base = (ci * g.kh + ky) * g.kw;
                        for kx in 0..g.kw {
                            if let Some(ix) = source_index(ox, kx, g.stride, g.pw, w) {
                                row[base + kx] = plane[iy * w + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch rows back into an NCHW tensor,
/// summing overlapping contributions.
pub fn col2im(cols: &Array2<f64>, dims: (usize, usize, usize, usize), g: &ConvGeom) -> Array4<f64> {
    let (n, c, h, w) = dims;
    let (ho, wo) = g.output_hw(h, w);
    let k = c * g.kh * g.kw;
    assert_eq!(cols.dim(), (n * ho * wo, k), "patch matrix does not match geometry");
    let mut x = Array4::<f64>::zeros(dims);
    let cs = cols.as_standard_layout();
    let cs = cs.as_slice().expect("standard layout");
    let xs = x.as_slice_mut().expect("fresh array");
    for ni in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &cs[((ni * ho + oy) * wo + ox) * k..][..k];
                for ci in 0..c {
                    let plane = &mut xs[(ni * c + ci) * h * w..][..h * w];
                    for ky in 0..g.kh {
                        let Some(iy) = source_index(oy, ky, g.stride, g.ph, h) else { continue };
                        let base = (ci * g.kh + ky) * g.kw;
                        for kx in 0..g.kw {
                            if let Some(ix) = source_index(ox, kx, g.stride, g.pw, w) {
                                plane[iy * w + ix] += row[base + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `(N, C, H, W)` → `(N·H·W, C)`.
pub fn nchw_to_rows(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let mut out = Array2::zeros((n * h * w, c));
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let os = out.as_slice_mut().expect("fresh array");
    for ni in 0..n {
        for ci in 0..c {
            let plane = &xs[(ni * c + ci) * h * w..][..h * w];
            for (p, v) in plane.iter().enumerate() {
                os[(ni * h * w + p) * c + ci] = *v;
            }
        }
    }
    out
}

/// `(N·H·W, C)` → `(N, C, H, W)`, optionally adding a per-channel bias.
pub fn rows_to_nchw(m: &Array2<f64>, n: usize, h: usize, w: usize, bias: Option<&[f64]>) -> Array4<f64> {
    let c = m.ncols();
    assert_eq!(m.nrows(), n * h * w);
    let mut out = Array4::zeros((n, c, h, w));
    let ms = m.as_standard_layout();
    let ms = ms.as_slice().expect("standard layout");
    let os = out.as_slice_mut().expect("fresh array");
    for ni in 0..n {
        for ci in 0..c {
            let b = bias.map_or(0.0, |b| b[ci]);
            let plane = &mut os[(ni * c + ci) * h * w..][..h * w];
            for (p, v) in plane.iter_mut().enumerate() {
                *v = ms[(ni * h * w + p) * c + ci] + b;
            }
        }
    }
    out
}

fn channel_sums(x: &Array4<f64>) -> Array1<f64> {
    let (n, c, h, w) = x.dim();
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let mut s = Array1::zeros(c);
    for ni in 0..n {
        for ci in 0..c {
            s[ci] += xs[(ni * c + ci) * h * w..][..h * w].iter().sum::<f64>();
        }
    }
    s
}

fn uniform<R: Rng + ?Sized>(shape: (usize, usize, usize, usize), fan_in: usize, rng: &mut R) -> (Array4<f64>, Array1<f64>) {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let w = Array4::from_shape_fn(shape, |_| rng.random_range(-bound..bound));
    let b = Array1::from_shape_fn(shape.0, |_| rng.random_range(-bound..bound));
    (w, b)
}

/// 2-D convolution, weight shaped `(out, in, kh, kw)`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub geom: ConvGeom,
}

#[derive(Debug)]
pub struct Conv2dCache {
    cols: Array2<f64>,
    in_dims: (usize, usize, usize, usize),
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, geom: ConvGeom, bias: bool, rng: &mut R) -> Self {
        let (w, b) = uniform((cout, cin, geom.kh, geom.kw), cin * geom.kh * geom.kw, rng);
        Self { weight: Param::new(w.into_dyn()), bias: bias.then(|| Param::new(b.into_dyn())), geom }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    fn w_mat(&self) -> ArrayView2<'_, f64> {
        let k = self.weight.value.len() / self.out_channels();
        self.weight.value.view().into_shape_with_order((self.out_channels(), k)).expect("contiguous weight")
    }

    fn bias_slice(&self) -> Option<Vec<f64>> {
        self.bias.as_ref().map(|b| b.value.iter().copied().collect())
    }

    fn apply(&self, cols: &Array2<f64>, n: usize, ho: usize, wo: usize) -> Array4<f64> {
        let mut out = Array2::zeros((cols.nrows(), self.out_channels()));
        general_mat_mul(1.0, cols, &self.w_mat().t(), 0.0, &mut out);
        rows_to_nchw(&out, n, ho, wo, self.bias_slice().as_deref())
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        self.forward_t(x).0
    }

    pub fn forward_t(&self, x: &Array4<f64>) -> (Array4<f64>, Conv2dCache) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels(), "conv input channel mismatch");
        let (ho, wo) = self.geom.output_hw(h, w);
        let cols = im2col(x, &self.geom);
        let y = self.apply(&cols, n, ho, wo);
        (y, Conv2dCache { cols, in_dims: (n, c, h, w) })
    }

    pub fn backward(&mut self, cache: &Conv2dCache, gy: &Array4<f64>) -> Array4<f64> {
        let gy_rows = nchw_to_rows(gy);
        let cout = self.out_channels();
        let k = self.weight.value.len() / cout;
        {
            let mut gw: ArrayViewMut2<'_, f64> = self.weight.grad.view_mut().into_shape_with_order((cout, k)).expect("contiguous grad");
            general_mat_mul(1.0, &gy_rows.t(), &cache.cols, 1.0, &mut gw);
        }
        if let Some(b) = &mut self.bias {
            let mut gb = b.grad.view_mut().into_dimensionality::<Ix1>().expect("1-D");
            gb += &channel_sums(gy);
        }
        let mut gcols = Array2::zeros((gy_rows.nrows(), k));
        general_mat_mul(1.0, &gy_rows, &self.w_mat(), 0.0, &mut gcols);
        col2im(&gcols, cache.in_dims, &self.geom)
    }
}

impl Module for Conv2d {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        v.param(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            v.param(&join(prefix, "bias"), b);
        }
    }
}

/// Transposed 2-D convolution, weight shaped `(in, out, kh, kw)`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: Param,
    pub bias: Param,
    pub geom: ConvGeom,
}

#[derive(Debug)]
pub struct ConvTranspose2dCache {
    x_rows: Array2<f64>,
    in_dims: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl ConvTranspose2d {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, geom: ConvGeom, rng: &mut R) -> Self {
        let (w, _) = uniform((cin, cout, geom.kh, geom.kw), cout * geom.kh * geom.kw, rng);
        let bound = 1.0 / ((cout * geom.kh * geom.kw) as f64).sqrt();
        let b = Array1::from_shape_fn(cout, |_| rng.random_range(-bound..bound));
        Self { weight: Param::new(w.into_dyn()), bias: Param::new(b.into_dyn()), geom }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    fn w_mat(&self) -> ArrayView2<'_, f64> {
        let cin = self.in_channels();
        self.weight.value.view().into_shape_with_order((cin, self.weight.value.len() / cin)).expect("contiguous weight")
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        self.forward_t(x).0
    }

    pub fn forward_t(&self, x: &Array4<f64>) -> (Array4<f64>, ConvTranspose2dCache) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels(), "transposed conv input channel mismatch");
        let (ho, wo) = self.geom.transposed_output_hw(h, w);
        let cout = self.out_channels();
        let x_rows = nchw_to_rows(x);
        let mut cols = Array2::zeros((n * h * w, self.weight.value.len() / c));
        general_mat_mul(1.0, &x_rows, &self.w_mat(), 0.0, &mut cols);
        let mut y = col2im(&cols, (n, cout, ho, wo), &self.geom);
        let b: Vec<f64> = self.bias.value.iter().copied().collect();
        for ((_, ci, _, _), v) in y.indexed_iter_mut() {
            *v += b[ci];
        }
        (y, ConvTranspose2dCache { x_rows, in_dims: (n, c, h, w), out_hw: (ho, wo) })
    }

    pub fn backward(&mut self, cache: &ConvTranspose2dCache, gy: &Array4<f64>) -> Array4<f64> {
        let (n, cin, h, w) = cache.in_dims;
        assert_eq!((gy.dim().2, gy.dim().3), cache.out_hw);
        let gcols = im2col(gy, &self.geom);
        let k = gcols.ncols();
        {
            let mut gw = self.weight.grad.view_mut().into_shape_with_order((cin, k)).expect("contiguous grad");
            general_mat_mul(1.0, &cache.x_rows.t(), &gcols, 1.0, &mut gw);
        }
        {
            let mut gb = self.bias.grad.view_mut().into_dimensionality::<Ix1>().expect("1-D");
            gb += &channel_sums(gy);
        }
        let mut gx = Array2::zeros((n * h * w, cin));
        general_mat_mul(1.0, &gcols, &self.w_mat().t(), 0.0, &mut gx);
        rows_to_nchw(&gx, n, h, w, None)
    }
}

impl Module for ConvTranspose2d {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        v.param(&join(prefix, "weight"), &mut self.weight);
        v.param(&join(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &Array4<f64>, c: &Conv2d) -> Array4<f64> {
        let (n, cin, h, w) = x.dim();
        let g = c.geom;
        let (ho, wo) = g.output_hw(h, w);
        let cout = c.out_channels();
        let mut y = Array4::zeros((n, cout, ho, wo));
        for ni in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = c.bias.as_ref().map_or(0.0, |b| b.value[co]);
                        for ci in 0..cin {
                            for ky in 0..g.kh {
                                for kx in 0..g.kw {
                                    let iy = (oy * g.stride + ky) as isize - g.ph as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pw as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        s += x[[ni, ci, iy as usize, ix as usize]] * c.weight.value[[co, ci, ky, kx]];
                                    }
                                }
                            }
                        }
                        y[[ni, co, oy, ox]] = s;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::new(3, 5, ConvGeom { kh: 3, kw: 2, stride: 2, ph: 1, pw: 0 }, true, &mut rng);
        let x = Array4::from_shape_fn((2, 3, 7, 6), |_| rng.random_range(-1.0..1.0));
        let fast = conv.forward(&x);
        let slow = naive_conv(&x, &conv);
        assert_eq!(fast.dim(), slow.dim());
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stride_two_halves_spatial_size() {
        let g = ConvGeom::square(4, 2, 1);
        let mut hw = 128;
        let mut trace = vec![];
        for _ in 0..6 {
            hw = g.output_hw(hw, hw).0;
            trace.push(hw);
        }
        assert_eq!(trace, vec![64, 32, 16, 8, 4, 2]);
        assert_eq!(g.transposed_output_hw(2, 2), (4, 4));
    }

    // <conv(x), y> == <x, conv_transpose(y)> with shared weights
    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = ConvGeom::square(4, 2, 1);
        let conv = Conv2d::new(3, 4, g, false, &mut rng);
        let mut tconv = ConvTranspose2d::new(4, 3, g, &mut rng);
        tconv.weight.value = conv.weight.value.clone();
        tconv.bias.value.fill(0.0);
        let x = Array4::from_shape_fn((1, 3, 8, 8), |_| rng.random_range(-1.0..1.0));
        let y = Array4::from_shape_fn((1, 4, 4, 4), |_| rng.random_range(-1.0..1.0));
        let lhs: f64 = (&conv.forward(&x) * &y).sum();
        let rhs: f64 = (&x * &tconv.forward(&y)).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    fn check_grads<F>(x: &Array4<f64>, gx: &Array4<f64>, f: F)
    where
        F: Fn(&Array4<f64>) -> f64,
    {
        let h = 1e-6;
        for idx in [[0, 0, 0, 0], [0, 1, 2, 3], [1, 2, 3, 1]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - gx[idx]).abs() < 1e-6, "{fd} vs {}", gx[idx]);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut conv = Conv2d::new(3, 2, ConvGeom::square(4, 2, 1), true, &mut rng);
        let x = Array4::from_shape_fn((2, 3, 8, 8), |_| rng.random_range(-1.0..1.0));
        let (y, cache) = conv.forward_t(&x);
        let gx = conv.backward(&cache, &y);
        let c2 = conv.clone();
        check_grads(&x, &gx, |x| c2.forward(x).iter().map(|v| 0.5 * v * v).sum());
        // weight gradient at one entry
        let analytic = conv.weight.grad[[1, 2, 3, 0]];
        let h = 1e-6;
        let mut cp = c2.clone();
        cp.weight.value[[1, 2, 3, 0]] += h;
        let mut cm = c2.clone();
        cm.weight.value[[1, 2, 3, 0]] -= h;
        let loss = |c: &Conv2d| c.forward(&x).iter().map(|v| 0.5 * v * v).sum::<f64>();
        assert!(((loss(&cp) - loss(&cm)) / (2.0 * h) - analytic).abs() < 1e-6);
    }

    #[test]
    fn transposed_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = ConvTranspose2d::new(3, 2, ConvGeom::square(4, 2, 1), &mut rng);
        let x = Array4::from_shape_fn((2, 3, 4, 4), |_| rng.random_range(-1.0..1.0));
        let (y, cache) = t.forward_t(&x);
        assert_eq!(y.dim(), (2, 2, 8, 8));
        let gx = t.backward(&cache, &y);
        let t2 = t.clone();
        check_grads(&x, &gx, |x| t2.forward(x).iter().map(|v| 0.5 * v * v).sum());
        let analytic = t.bias.grad[1];
        let h = 1e-6;
        let mut tp = t2.clone();
        tp.bias.value[1] += h;
        let mut tm = t2.clone();
        tm.bias.value[1] -= h;
        let loss = |c: &ConvTranspose2d| c.forward(&x).iter().map(|v| 0.5 * v * v).sum::<f64>();
        assert!(((loss(&tp) - loss(&tm)) / (2.0 * h) - analytic).abs() < 1e-6);
    }
}
