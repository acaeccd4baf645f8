//! Image-quality metrics and the per-variant report.
//!
//! Pixel metrics take `(C, H, W)` arrays in `[0, 255]`. SSIM runs on ITU-R
//! 601 luma with uniform 8×8 windows at stride 1.

use std::path::Path;

use image::imageops::FilterType;
use image::RgbImage;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{s, Array2, Array3, Array4, ArrayD, ArrayView3, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use safetensors::tensor::Dtype;
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::csi_ingest::Split;
use crate::dataset_windows::{in_bounds_centers, sample_window, Dataset};
use crate::models::{to_rgb, TrainedModel};
use crate::nn::pool::{avg_pool2d, global_avg_pool, max_pool2d};
use crate::nn::{BatchNorm2d, Conv2d, ConvGeom, Param};
use crate::{Error, Result};

/// Reported PSNR for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

fn mse(a: ArrayView3<'_, f64>, b: ArrayView3<'_, f64>) -> f64 {
    assert_eq!(a.dim(), b.dim(), "image shapes differ");
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

pub fn rmse(a: ArrayView3<'_, f64>, b: ArrayView3<'_, f64>) -> f64 {
    mse(a, b).sqrt()
}

/// `20 log10(max) − 10 log10(MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: ArrayView3<'_, f64>, b: ArrayView3<'_, f64>, max_val: f64) -> f64 {
    let m = mse(a, b);
    if m == 0.0 {
        return PSNR_CAP_DB;
    }
    (20.0 * max_val.log10() - 10.0 * m.log10()).min(PSNR_CAP_DB)
}

/// ITU-R 601 luma of a `(3, H, W)` image; single-channel input passes through.
pub fn luma(img: ArrayView3<'_, f64>) -> Array2<f64> {
    match img.dim().0 {
        1 => img.index_axis(Axis(0), 0).to_owned(),
        3 => &img.index_axis(Axis(0), 0) * 0.299 + &img.index_axis(Axis(0), 1) * 0.587 + &img.index_axis(Axis(0), 2) * 0.114,
        c => panic!("expected 1 or 3 channels, got {c}"),
    }
}

/// Summed-area table with a zero top row and left column.
fn integral(x: &Array2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    let mut t = Array2::zeros((h + 1, w + 1));
    for y in 0..h {
        let mut row = 0.0;
        for xx in 0..w {
            row += x[[y, xx]];
            t[[y + 1, xx + 1]] = t[[y, xx + 1]] + row;
        }
    }
    t
}

fn box_sum(t: &Array2<f64>, y: usize, x: usize, k: usize) -> f64 {
    t[[y + k, x + k]] - t[[y, x + k]] - t[[y + k, x]] + t[[y, x]]
}

/// Mean local SSIM over every 8×8 luma window.
pub fn ssim(a: ArrayView3<'_, f64>, b: ArrayView3<'_, f64>) -> Result<f64> {
    assert_eq!(a.dim(), b.dim(), "image shapes differ");
    let (_, h, w) = a.dim();
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(Error::Input(format!("image {h}x{w} is smaller than the {k}x{k} SSIM window")));
    }
    let (ya, yb) = (luma(a), luma(b));
    let ta = integral(&ya);
    let tb = integral(&yb);
    let taa = integral(&(&ya * &ya));
    let tbb = integral(&(&yb * &yb));
    let tab = integral(&(&ya * &yb));
    let n = (k * k) as f64;
    let mut total = 0.0;
    for y in 0..=h - k {
        for x in 0..=w - k {
            let ma = box_sum(&ta, y, x, k) / n;
            let mb = box_sum(&tb, y, x, k) / n;
            let va = (box_sum(&taa, y, x, k) / n - ma * ma).max(0.0);
            let vb = (box_sum(&tbb, y, x, k) / n - mb * mb).max(0.0);
            let cov = box_sum(&tab, y, x, k) / n - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
    }
    Ok(total / ((h - k + 1) * (w - k + 1)) as f64)
}

/// Features of one image set from one extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub features: Array2<f64>,
    pub extractor_id: String,
}

impl FeatureSet {
    /// At least `K + 1` samples are needed for a full-rank covariance.
    pub fn is_well_conditioned(&self) -> bool {
        self.features.nrows() > self.features.ncols()
    }

    fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let (n, k) = self.features.dim();
        let mean = self.features.mean_axis(Axis(0)).expect("non-empty features");
        let centered = &self.features - &mean;
        let cov = centered.t().dot(&centered) / (n.max(2) - 1) as f64;
        (DVector::from_iterator(k, mean.iter().copied()), DMatrix::from_fn(k, k, |i, j| 0.5 * (cov[[i, j]] + cov[[j, i]])))
    }
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Regularization added to both covariances when the plain computation
/// fails to produce a finite value.
pub const FID_EPS: f64 = 1e-6;

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid(real: &FeatureSet, fake: &FeatureSet) -> Result<f64> {
    if real.extractor_id != fake.extractor_id || real.features.ncols() != fake.features.ncols() {
        return Err(Error::Input(format!(
            "feature sets differ: {} ({} features) vs {} ({} features)",
            real.extractor_id,
            real.features.ncols(),
            fake.extractor_id,
            fake.features.ncols()
        )));
    }
    if real.features.nrows() < 2 || fake.features.nrows() < 2 {
        return Err(Error::Covariance("at least two samples per set are needed".into()));
    }
    if real.features.iter().chain(fake.features.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Covariance("features contain non-finite values".into()));
    }
    if !real.is_well_conditioned() || !fake.is_well_conditioned() {
        log::warn!("FID on fewer samples than features + 1; the covariance is singular and the value is unstable");
    }
    let (mr, sr) = real.moments();
    let (mf, sf) = fake.moments();
    let k = sr.nrows();
    let compute = |eps: f64| {
        let sr = &sr + DMatrix::identity(k, k) * eps;
        let sf = &sf + DMatrix::identity(k, k) * eps;
        let root = sym_sqrt(&sr);
        let inner = &root * &sf * &root;
        let inner = (&inner + inner.transpose()) * 0.5;
        let tr_cross = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum::<f64>();
        (&mr - &mf).norm_squared() + sr.trace() + sf.trace() - 2.0 * tr_cross
    };
    let mut value = compute(0.0);
    if !value.is_finite() {
        value = compute(FID_EPS);
    }
    if !value.is_finite() {
        return Err(Error::Covariance(format!("matrix square root failed; condition numbers {:.3e} and {:.3e}", condition_number(&sr), condition_number(&sf))));
    }
    Ok(value.max(0.0))
}

/// A fixed image-to-feature map used for FID.
pub trait FeatureExtractor: Sync {
    fn id(&self) -> &str;

    /// Square input side; images are resized bilinearly to it.
    fn input_size(&self) -> usize;

    /// Features of one `(3, S, S)` image in `[0, 1]` at the input size.
    fn features(&self, img01: &Array3<f64>) -> Vec<f64>;

    fn extract(&self, images: &[RgbImage]) -> FeatureSet {
        let s = self.input_size() as u32;
        let rows: Vec<Vec<f64>> = images
            .par_iter()
            .map(|img| {
                let r = if img.dimensions() == (s, s) { img.clone() } else { image::imageops::resize(img, s, s, FilterType::Triangle) };
                let arr = Array3::from_shape_fn((3, s as usize, s as usize), |(c, y, x)| r.get_pixel(x as u32, y as u32)[c] as f64 / 255.0);
                self.features(&arr)
            })
            .collect();
        let k = rows.first().map_or(0, Vec::len);
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        FeatureSet { features: Array2::from_shape_vec((images.len(), k), flat).expect("equal feature widths"), extractor_id: self.id().to_string() }
    }
}

/// Two random strided convolutions with ReLU and global average pooling,
/// fixed by a seed. Cheap stand-in for desk-scale runs; its FID values are
/// not comparable with anything else.
pub struct TinyRandomConv {
    convs: Vec<Conv2d>,
}

impl TinyRandomConv {
    pub const ID: &'static str = "tiny-random-conv";
    pub const FEATURES: usize = 16;

    pub fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0x7_1d);
        let g = ConvGeom::square(3, 2, 1);
        Self { convs: vec![Conv2d::new(3, 8, g, true, &mut rng), Conv2d::new(8, Self::FEATURES, g, true, &mut rng)] }
    }
}

impl Default for TinyRandomConv {
    fn default() -> Self {
        Self::new()
    }
}

impl FeatureExtractor for TinyRandomConv {
    fn id(&self) -> &str {
        Self::ID
    }

    fn input_size(&self) -> usize {
        32
    }

    fn features(&self, img01: &Array3<f64>) -> Vec<f64> {
        let mut x = img01.clone().insert_axis(Axis(0));
        for c in &self.convs {
            x = c.forward(&x).mapv(|v| v.max(0.0));
        }
        global_avg_pool(&x).row(0).to_vec()
    }
}

/// Convolution without bias, batch norm (eps 1e-3) and ReLU.
struct BasicConv {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl BasicConv {
    fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        self.bn.forward(&self.conv.forward(x)).mapv(|v| v.max(0.0))
    }
}

fn read_tensor(st: &SafeTensors<'_>, name: &str) -> Result<ArrayD<f64>> {
    let t = st.tensor(name).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
    let vals: Vec<f64> = match t.dtype() {
        Dtype::F64 => t.data().chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
        Dtype::F32 => t.data().chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect(),
        d => return Err(Error::Checkpoint(format!("{name}: unsupported dtype {d:?}"))),
    };
    ArrayD::from_shape_vec(IxDyn(t.shape()), vals).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
}

/// Tensor lookup by name; the expected shape is passed so synthetic
/// sources can build tensors, and is checked by the loader either way.
type TensorSource<'a> = dyn Fn(&str, &[usize]) -> Result<ArrayD<f64>> + 'a;

struct Loader<'a> {
    fetch: &'a TensorSource<'a>,
}

impl Loader<'_> {
    fn basic(&self, name: &str, cin: usize, cout: usize, k: (usize, usize), stride: usize, pad: (usize, usize)) -> Result<BasicConv> {
        let get = |key: String, shape: &[usize]| -> Result<ArrayD<f64>> {
            let t = (self.fetch)(&key, shape)?;
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!("{key} has shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(t)
        };
        let weight = get(format!("{name}.conv.weight"), &[cout, cin, k.0, k.1])?;
        let mut bn = BatchNorm2d::with_eps(cout, 1e-3);
        bn.gamma = Param::new(get(format!("{name}.bn.weight"), &[cout])?);
        bn.beta = Param::new(get(format!("{name}.bn.bias"), &[cout])?);
        bn.running_mean = get(format!("{name}.bn.running_mean"), &[cout])?;
        bn.running_var = get(format!("{name}.bn.running_var"), &[cout])?;
        let geom = ConvGeom { kh: k.0, kw: k.1, stride, ph: pad.0, pw: pad.1 };
        Ok(BasicConv { conv: Conv2d { weight: Param::new(weight), bias: None, geom }, bn })
    }

    fn sq(&self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Result<BasicConv> {
        self.basic(name, cin, cout, (k, k), stride, (pad, pad))
    }
}

fn cat(parts: &[Array4<f64>]) -> Array4<f64> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(1), &views).expect("matching spatial sizes")
}

struct BlockA {
    b1: BasicConv,
    b5: [BasicConv; 2],
    b3: [BasicConv; 3],
    pool: BasicConv,
}

struct BlockB {
    b3: BasicConv,
    b3d: [BasicConv; 3],
}

struct BlockC {
    b1: BasicConv,
    b7: [BasicConv; 3],
    b7d: [BasicConv; 5],
    pool: BasicConv,
}

struct BlockD {
    b3: [BasicConv; 2],
    b7: [BasicConv; 4],
}

struct BlockE {
    b1: BasicConv,
    b3_1: BasicConv,
    b3_2a: BasicConv,
    b3_2b: BasicConv,
    d1: BasicConv,
    d2: BasicConv,
    d3a: BasicConv,
    d3b: BasicConv,
    pool: BasicConv,
    max_pool: bool,
}

fn chain(convs: &[BasicConv], x: &Array4<f64>) -> Array4<f64> {
    convs.iter().fold(x.clone(), |h, c| c.forward(&h))
}

impl BlockA {
    fn load(l: &Loader<'_>, n: &str, cin: usize, pool: usize) -> Result<Self> {
        Ok(Self {
            b1: l.sq(&format!("{n}.branch1x1"), cin, 64, 1, 1, 0)?,
            b5: [l.sq(&format!("{n}.branch5x5_1"), cin, 48, 1, 1, 0)?, l.sq(&format!("{n}.branch5x5_2"), 48, 64, 5, 1, 2)?],
            b3: [
                l.sq(&format!("{n}.branch3x3dbl_1"), cin, 64, 1, 1, 0)?,
                l.sq(&format!("{n}.branch3x3dbl_2"), 64, 96, 3, 1, 1)?,
                l.sq(&format!("{n}.branch3x3dbl_3"), 96, 96, 3, 1, 1)?,
            ],
            pool: l.sq(&format!("{n}.branch_pool"), cin, pool, 1, 1, 0)?,
        })
    }

    fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        cat(&[self.b1.forward(x), chain(&self.b5, x), chain(&self.b3, x), self.pool.forward(&avg_pool2d(x, 3, 1, 1))])
    }
}

impl BlockB {
    fn load(l: &Loader<'_>, n: &str, cin: usize) -> Result<Self> {
        Ok(Self {
            b3: l.sq(&format!("{n}.branch3x3"), cin, 384, 3, 2, 0)?,
            b3d: [
                l.sq(&format!("{n}.branch3x3dbl_1"), cin, 64, 1, 1, 0)?,
                l.sq(&format!("{n}.branch3x3dbl_2"), 64, 96, 3, 1, 1)?,
                l.sq(&format!("{n}.branch3x3dbl_3"), 96, 96, 3, 2, 0)?,
            ],
        })
    }

    fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        cat(&[self.b3.forward(x), chain(&self.b3d, x), max_pool2d(x, 3, 2, 0)])
    }
}

impl BlockC {
    fn load(l: &Loader<'_>, n: &str, cin: usize, c7: usize) -> Result<Self> {
        let row = |name: &str, a: usize, b: usize| l.basic(&format!("{n}.{name}"), a, b, (1, 7), 1, (0, 3));
        let col = |name: &str, a: usize, b: usize| l.basic(&format!("{n}.{name}"), a, b, (7, 1), 1, (3, 0));
        Ok(Self {
            b1: l.sq(&format!("{n}.branch1x1"), cin, 192, 1, 1, 0)?,
            b7: [l.sq(&format!("{n}.branch7x7_1"), cin, c7, 1, 1, 0)?, row("branch7x7_2", c7, c7)?, col("branch7x7_3", c7, 192)?],
            b7d: [
                l.sq(&format!("{n}.branch7x7dbl_1"), cin, c7, 1, 1, 0)?,
                col("branch7x7dbl_2", c7, c7)?,
                row("branch7x7dbl_3", c7, c7)?,
                col("branch7x7dbl_4", c7, c7)?,
                row("branch7x7dbl_5", c7, 192)?,
            ],
            pool: l.sq(&format!("{n}.branch_pool"), cin, 192, 1, 1, 0)?,
        })
    }

    fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        cat(&[self.b1.forward(x), chain(&self.b7, x), chain(&self.b7d, x), self.pool.forward(&avg_pool2d(x, 3, 1, 1))])
    }
}

impl BlockD {
    fn load(l: &Loader<'_>, n: &str, cin: usize) -> Result<Self> {
        Ok(Self {
            b3: [l.sq(&format!("{n}.branch3x3_1"), cin, 192, 1, 1, 0)?, l.sq(&format!("{n}.branch3x3_2"), 192, 320, 3, 2, 0)?],
            b7: [
                l.sq(&format!("{n}.branch7x7x3_1"), cin, 192, 1, 1, 0)?,
                l.basic(&format!("{n}.branch7x7x3_2"), 192, 192, (1, 7), 1, (0, 3))?,
                l.basic(&format!("{n}.branch7x7x3_3"), 192, 192, (7, 1), 1, (3, 0))?,
                l.sq(&format!("{n}.branch7x7x3_4"), 192, 192, 3, 2, 0)?,
            ],
        })
    }

    fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        cat(&[chain(&self.b3, x), chain(&self.b7, x), max_pool2d(x, 3, 2, 0)])
    }
}

impl BlockE {
    fn load(l: &Loader<'_>, n: &str, cin: usize, max_pool: bool) -> Result<Self> {
        let f = |s: &str| format!("{n}.{s}");
        Ok(Self {
            b1: l.sq(&f("branch1x1"), cin, 320, 1, 1, 0)?,
            b3_1: l.sq(&f("branch3x3_1"), cin, 384, 1, 1, 0)?,
            b3_2a: l.basic(&f("branch3x3_2a"), 384, 384, (1, 3), 1, (0, 1))?,
            b3_2b: l.basic(&f("branch3x3_2b"), 384, 384, (3, 1), 1, (1, 0))?,
            d1: l.sq(&f("branch3x3dbl_1"), cin, 448, 1, 1, 0)?,
            d2: l.sq(&f("branch3x3dbl_2"), 448, 384, 3, 1, 1)?,
            d3a: l.basic(&f("branch3x3dbl_3a"), 384, 384, (1, 3), 1, (0, 1))?,
            d3b: l.basic(&f("branch3x3dbl_3b"), 384, 384, (3, 1), 1, (1, 0))?,
            pool: l.sq(&f("branch_pool"), cin, 192, 1, 1, 0)?,
            max_pool,
        })
    }

    fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let b3 = self.b3_1.forward(x);
        let d = self.d2.forward(&self.d1.forward(x));
        let pooled = if self.max_pool { max_pool2d(x, 3, 1, 1) } else { avg_pool2d(x, 3, 1, 1) };
        cat(&[self.b1.forward(x), self.b3_2a.forward(&b3), self.b3_2b.forward(&b3), self.d3a.forward(&d), self.d3b.forward(&d), self.pool.forward(&pooled)])
    }
}

/// Inception v3 up to the 2048-d pool features, in the layout used for FID
/// (padding-excluding average pools, max pool in the last block). Weights
/// come from a safetensors file with torchvision-style tensor names.
pub struct InceptionV3 {
    stem: Vec<BasicConv>,
    stem2: Vec<BasicConv>,
    a: Vec<BlockA>,
    b: BlockB,
    c: Vec<BlockC>,
    d: BlockD,
    e: Vec<BlockE>,
}

impl InceptionV3 {
    pub const ID: &'static str = "inception-v3-pool3";

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_source(&|name: &str, _: &[usize]| read_tensor(&st, name))
    }

    fn from_source(fetch: &TensorSource<'_>) -> Result<Self> {
        let l = Loader { fetch };
        Ok(Self {
            stem: vec![l.sq("Conv2d_1a_3x3", 3, 32, 3, 2, 0)?, l.sq("Conv2d_2a_3x3", 32, 32, 3, 1, 0)?, l.sq("Conv2d_2b_3x3", 32, 64, 3, 1, 1)?],
            stem2: vec![l.sq("Conv2d_3b_1x1", 64, 80, 1, 1, 0)?, l.sq("Conv2d_4a_3x3", 80, 192, 3, 1, 0)?],
            a: vec![BlockA::load(&l, "Mixed_5b", 192, 32)?, BlockA::load(&l, "Mixed_5c", 256, 64)?, BlockA::load(&l, "Mixed_5d", 288, 64)?],
            b: BlockB::load(&l, "Mixed_6a", 288)?,
            c: vec![
                BlockC::load(&l, "Mixed_6b", 768, 128)?,
                BlockC::load(&l, "Mixed_6c", 768, 160)?,
                BlockC::load(&l, "Mixed_6d", 768, 160)?,
                BlockC::load(&l, "Mixed_6e", 768, 192)?,
            ],
            d: BlockD::load(&l, "Mixed_7a", 768)?,
            e: vec![BlockE::load(&l, "Mixed_7b", 1280, false)?, BlockE::load(&l, "Mixed_7c", 2048, true)?],
        })
    }

    fn forward(&self, x: &Array4<f64>) -> Array2<f64> {
        let mut h = max_pool2d(&chain(&self.stem, x), 3, 2, 0);
        h = max_pool2d(&chain(&self.stem2, &h), 3, 2, 0);
        for a in &self.a {
            h = a.forward(&h);
        }
        h = self.b.forward(&h);
        for c in &self.c {
            h = c.forward(&h);
        }
        h = self.d.forward(&h);
        for e in &self.e {
            h = e.forward(&h);
        }
        global_avg_pool(&h)
    }
}

impl FeatureExtractor for InceptionV3 {
    fn id(&self) -> &str {
        Self::ID
    }

    fn input_size(&self) -> usize {
        299
    }

    fn features(&self, img01: &Array3<f64>) -> Vec<f64> {
        let x = img01.mapv(|v| 2.0 * v - 1.0).insert_axis(Axis(0));
        self.forward(&x).row(0).to_vec()
    }
}

/// Resolves `tiny-random-conv`, `inception-v3-pool3:<weights>` or a bare
/// path to Inception weights.
pub fn extractor_from_spec(spec: &str) -> Result<Box<dyn FeatureExtractor>> {
    if spec == TinyRandomConv::ID {
        return Ok(Box::new(TinyRandomConv::new()));
    }
    let path = spec.strip_prefix("inception-v3-pool3:").unwrap_or(spec);
    if path == InceptionV3::ID {
        return Err(Error::Config("inception-v3-pool3 needs a weights file: use inception-v3-pool3:<path>".into()));
    }
    Ok(Box::new(InceptionV3::load(Path::new(path))?))
}

/// Metrics of one run on the test split; pixel metrics are per-image means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
    pub fid: Option<f64>,
    pub n_images: usize,
}

/// Per-image pixel metrics of a set of reconstructions.
pub fn image_metrics(recon: &[RgbImage], truth: &[RgbImage], fid_extractor: Option<&dyn FeatureExtractor>) -> Result<RunMetrics> {
    assert_eq!(recon.len(), truth.len(), "reconstruction and ground-truth counts differ");
    if recon.is_empty() {
        return Err(Error::Degenerate("no images to evaluate".into()));
    }
    let per: Vec<Result<(f64, f64, f64)>> = recon
        .par_iter()
        .zip(truth.par_iter())
        .map(|(r, t)| {
            let a = rgb_to_array(r);
            let b = rgb_to_array(t);
            Ok((psnr(a.view(), b.view(), 255.0), ssim(a.view(), b.view())?, rmse(a.view(), b.view())))
        })
        .collect();
    let per = per.into_iter().collect::<Result<Vec<_>>>()?;
    let n = per.len() as f64;
    let fid = fid_extractor.map(|ex| fid(&ex.extract(truth), &ex.extract(recon))).transpose()?;
    Ok(RunMetrics {
        psnr: per.iter().map(|p| p.0).sum::<f64>() / n,
        ssim: per.iter().map(|p| p.1).sum::<f64>() / n,
        rmse: per.iter().map(|p| p.2).sum::<f64>() / n,
        fid,
        n_images: per.len(),
    })
}

/// `(3, H, W)` in `[0, 255]`.
pub fn rgb_to_array(img: &RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    let raw = img.as_raw();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| raw[(y * w as usize + x) * 3 + c] as f64)
}

/// Reconstructions for the given window centers, which must be in bounds
/// for the model's window length.
pub fn reconstruct_centers(model: &mut TrainedModel, dataset: &Dataset, centers: &[usize], batch_size: usize) -> Result<Vec<RgbImage>> {
    let l = model.model.config.window_len;
    let mut out = Vec::with_capacity(centers.len());
    for chunk in centers.chunks(batch_size.max(1)) {
        let mut windows = Array3::zeros((chunk.len(), dataset.amplitudes.nrows(), l));
        let mut t = Vec::with_capacity(chunk.len());
        for (i, &c) in chunk.iter().enumerate() {
            let w = sample_window(c, l, dataset.amplitudes.view()).map_err(|e| Error::Input(format!("window at packet {} is out of bounds", e.center)))?;
            windows.slice_mut(s![i, .., ..]).assign(&w.values);
            t.push(w.t);
        }
        let pred = model.predict01(&windows, &t);
        out.extend(pred.outer_iter().map(to_rgb));
    }
    Ok(out)
}

/// Reconstructions, ground truth and centers for every in-bounds sample of
/// `split`.
pub fn reconstruct_split(model: &mut TrainedModel, dataset: &Dataset, split: Split, batch_size: usize) -> Result<(Vec<RgbImage>, Vec<RgbImage>, Vec<usize>)> {
    let centers = in_bounds_centers(dataset, split, model.model.config.window_len);
    let recon = reconstruct_centers(model, dataset, &centers, batch_size)?;
    let truth = centers.iter().map(|&c| dataset.frames.rgb(dataset.pairs[c].frame_index)).collect();
    Ok((recon, truth, centers))
}

/// Mean ± sample std of one metric across runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    #[serde(deserialize_with = "nan_from_null")]
    pub mean: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub std: f64,
}

// JSON has no NaN; serde_json writes it as null
fn nan_from_null<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n.max(1) as f64;
        let std = if n > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: String,
    pub psnr: Stat,
    pub ssim: Stat,
    pub rmse: Stat,
    pub fid: Option<Stat>,
    pub n_runs: usize,
    /// Set when only one run contributed, so the stds are placeholders.
    pub single_run: bool,
    pub failed: bool,
    pub runs: Vec<RunMetrics>,
}

impl ReportRow {
    pub fn from_runs(variant: &str, runs: Vec<RunMetrics>) -> Self {
        let col = |f: fn(&RunMetrics) -> f64| Stat::of(&runs.iter().map(f).collect::<Vec<_>>());
        let fids: Option<Vec<f64>> = runs.iter().map(|r| r.fid).collect();
        Self {
            variant: variant.to_string(),
            psnr: col(|r| r.psnr),
            ssim: col(|r| r.ssim),
            rmse: col(|r| r.rmse),
            fid: fids.filter(|f| !f.is_empty()).map(|f| Stat::of(&f)),
            n_runs: runs.len(),
            single_run: runs.len() == 1,
            failed: runs.is_empty(),
            runs,
        }
    }

    pub fn failed(variant: &str) -> Self {
        let nan = Stat { mean: f64::NAN, std: f64::NAN };
        Self { variant: variant.to_string(), psnr: nan, ssim: nan, rmse: nan, fid: None, n_runs: 0, single_run: false, failed: true, runs: Vec::new() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
    pub fid_extractor: Option<String>,
}

impl MetricsReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["variant", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std", "rmse_mean", "rmse_std", "fid_mean", "fid_std", "n_runs", "status"])?;
        for r in &self.rows {
            let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
            let status = if r.failed {
                "failed"
            } else if r.single_run {
                "single_run"
            } else {
                "ok"
            };
            w.write_record([
                r.variant.clone(),
                r.psnr.mean.to_string(),
                r.psnr.std.to_string(),
                r.ssim.mean.to_string(),
                r.ssim.std.to_string(),
                r.rmse.mean.to_string(),
                r.rmse.std.to_string(),
                opt(r.fid.map(|f| f.mean)),
                opt(r.fid.map(|f| f.std)),
                r.n_runs.to_string(),
                status.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Evaluates the best checkpoint of every run on the test split.
pub fn evaluate_variant(variant: &str, models: &mut [TrainedModel], dataset: &Dataset, fid_extractor: Option<&dyn FeatureExtractor>) -> Result<ReportRow> {
    if models.is_empty() {
        return Err(Error::Input("no checkpoints to evaluate".into()));
    }
    let mut runs = Vec::with_capacity(models.len());
    for m in models.iter_mut() {
        let (recon, truth, _) = reconstruct_split(m, dataset, Split::Test, 64)?;
        runs.push(image_metrics(&recon, &truth, fid_extractor)?);
    }
    Ok(ReportRow::from_runs(variant, runs))
}

/// Random `(3, S, S)` 8-bit image, for tests and demos.
pub fn random_rgb<R: Rng + ?Sized>(size: u32, rng: &mut R) -> RgbImage {
    RgbImage::from_fn(size, size, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal, StandardNormal};

    fn rand_img(rng: &mut ChaCha8Rng, s: usize) -> Array3<f64> {
        Array3::from_shape_fn((3, s, s), |_| rng.random_range(0.0..255.0))
    }

    #[test]
    fn pixel_metric_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_img(&mut rng, 16);
        assert_eq!(rmse(a.view(), a.view()), 0.0);
        assert_eq!(psnr(a.view(), a.view(), 255.0), PSNR_CAP_DB);
        let b = &a + 8.0;
        assert!((rmse(a.view(), b.view()) - 8.0).abs() < 1e-12);
        let c = &a + 1.0;
        assert!((psnr(a.view(), c.view(), 255.0) - 48.1308).abs() < 1e-4);
        assert!((ssim(a.view(), a.view()).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(Array3::zeros((3, 7, 9)).view(), Array3::zeros((3, 7, 9)).view()).is_err());
    }

    #[test]
    fn ssim_constant_offset_closed_form() {
        let (mu, c) = (100.0, 20.0);
        let a = Array3::from_elem((3, 12, 12), mu);
        let b = Array3::from_elem((3, 12, 12), mu + c);
        let expected = (2.0 * mu * (mu + c) + SSIM_C1) / (mu * mu + (mu + c) * (mu + c) + SSIM_C1);
        assert!((ssim(a.view(), b.view()).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn fid_gaussian_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 20000;
        let k = 4;
        let delta = [0.5, -1.0, 0.0, 2.0];
        let a = Array2::from_shape_fn((n, k), |_| StandardNormal.sample(&mut rng));
        let b = Array2::from_shape_fn((n, k), |(_, j)| {
            delta[j] + {
                let v: f64 = StandardNormal.sample(&mut rng);
                v
            }
        });
        let fa = FeatureSet { features: a.clone(), extractor_id: "x".into() };
        let fb = FeatureSet { features: b, extractor_id: "x".into() };
        let d = fid(&fa, &fb).unwrap();
        let expected: f64 = delta.iter().map(|v| v * v).sum();
        assert!((d - expected).abs() < 0.05 * expected, "{d} vs {expected}");
        assert!(fid(&fa, &fa).unwrap() <= 1e-6);
        let other = FeatureSet { features: a, extractor_id: "y".into() };
        assert!(fid(&fa, &other).is_err());
    }

    #[test]
    fn fid_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mk = |rng: &mut ChaCha8Rng, s: f64| FeatureSet {
            features: Array2::from_shape_fn((50, 5), |_| Normal::new(0.0, s).unwrap().sample(rng)),
            extractor_id: "x".into(),
        };
        let a = mk(&mut rng, 1.0);
        let b = mk(&mut rng, 2.0);
        assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() < 1e-8);
    }

    #[test]
    fn report_std_and_single_run_flag() {
        let run = |p: f64| RunMetrics { psnr: p, ssim: 0.5, rmse: 3.0, fid: None, n_images: 4 };
        let one = ReportRow::from_runs("C", vec![run(20.0)]);
        assert!(one.single_run && one.psnr.std == 0.0);
        let three = ReportRow::from_runs("C", vec![run(1.0), run(2.0), run(3.0)]);
        assert!((three.psnr.std - 1.0).abs() < 1e-12);
        assert!(three.fid.is_none());
    }

    #[test]
    fn failed_row_survives_json() {
        let row = ReportRow::failed("UW");
        let back: ReportRow = serde_json::from_str(&serde_json::to_string(&row).unwrap()).unwrap();
        assert!(back.failed && back.psnr.mean.is_nan() && back.rmse.std.is_nan());
    }

    #[test]
    fn safetensors_reads_f32_and_checks_shapes() {
        use safetensors::tensor::TensorView;
        let vals: Vec<u8> = [1.5f32, -2.0, 0.25].iter().flat_map(|v| v.to_le_bytes()).collect();
        let view = TensorView::new(Dtype::F32, vec![3], &vals).unwrap();
        let bytes = safetensors::serialize([("x", view)], None).unwrap();
        let st = SafeTensors::deserialize(&bytes).unwrap();
        assert_eq!(read_tensor(&st, "x").unwrap().into_raw_vec_and_offset().0, vec![1.5, -2.0, 0.25]);
        assert!(read_tensor(&st, "y").is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.safetensors");
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(InceptionV3::load(&path), Err(Error::Checkpoint(_))));
        let wrong = |_: &str, shape: &[usize]| Ok(ArrayD::zeros(IxDyn(&shape[..shape.len().saturating_sub(1)])));
        assert!(matches!(InceptionV3::from_source(&wrong), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn inception_random_weights_give_pool_features() {
        let rng = std::cell::RefCell::new(ChaCha8Rng::seed_from_u64(9));
        let source = |name: &str, shape: &[usize]| {
            let mut rng = rng.borrow_mut();
            let fan_in: usize = shape.iter().skip(1).product();
            Ok(if name.ends_with("running_var") || name.ends_with("bn.weight") {
                ArrayD::from_elem(IxDyn(shape), 1.0)
            } else if name.ends_with("conv.weight") {
                let sd = (2.0 / fan_in as f64).sqrt();
                ArrayD::from_shape_fn(IxDyn(shape), |_| sd * rng.sample::<f64, _>(StandardNormal))
            } else {
                ArrayD::zeros(IxDyn(shape))
            })
        };
        let net = InceptionV3::from_source(&source).unwrap();
        // Smallest input that survives every stride.
        let x = Array4::from_shape_fn((1, 3, 75, 75), |(_, c, y, x)| ((c * 7 + y * 3 + x) % 11) as f64 / 5.0 - 1.0);
        let f = net.forward(&x);
        assert_eq!(f.dim(), (1, 2048));
        assert!(f.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!(f.iter().any(|v| *v > 0.0));
    }

    #[test]
    fn tiny_extractor_is_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let imgs: Vec<RgbImage> = (0..3).map(|_| random_rgb(20, &mut rng)).collect();
        let a = TinyRandomConv::new().extract(&imgs);
        let b = TinyRandomConv::new().extract(&imgs);
        assert_eq!(a, b);
        assert_eq!(a.features.dim(), (3, TinyRandomConv::FEATURES));
    }
}
