//! Image encoder, image decoder and CSI encoder, plus checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::RgbImage;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::csi_ingest::N_SUBCARRIERS;
use crate::dataset_windows::{Batch, CsiScaling, NormStats};
use crate::latent_core::{mopoe_objective, LatentDecoder, LossBreakdown, Modality, ModalitySet, NoiseSource, PosteriorBatch};
use crate::nn::{
    join, leaky_relu, leaky_relu_backward, BatchNorm2d, BnCache, Conv2d, Conv2dCache, ConvGeom, ConvTranspose2d, ConvTranspose2dCache, Mlp, MlpCache, Mode,
    Module, Param, Visitor,
};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Aggregation {
    #[serde(rename = "UW")]
    Uniform,
    #[serde(rename = "GW")]
    Gaussian,
    #[serde(rename = "C")]
    Concat,
}

/// The four CSI-encoder configurations compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "UW")]
    Uw,
    #[serde(rename = "GW")]
    Gw,
    #[serde(rename = "C")]
    C,
    #[serde(rename = "C+T")]
    Ct,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Uw, Variant::Gw, Variant::C, Variant::Ct];

    pub fn aggregation(self) -> Aggregation {
        match self {
            Variant::Uw => Aggregation::Uniform,
            Variant::Gw => Aggregation::Gaussian,
            Variant::C | Variant::Ct => Aggregation::Concat,
        }
    }

    pub fn temporal(self) -> bool {
        self == Variant::Ct
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Uw => "UW",
            Variant::Gw => "GW",
            Variant::C => "C",
            Variant::Ct => "C+T",
        }
    }

    /// Name safe for file paths.
    pub fn slug(self) -> &'static str {
        match self {
            Variant::Ct => "CT",
            v => v.label(),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "UW" => Ok(Variant::Uw),
            "GW" => Ok(Variant::Gw),
            "C" => Ok(Variant::C),
            "C+T" | "CT" | "C_T" => Ok(Variant::Ct),
            _ => Err(Error::Config(format!("unknown variant {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub embed_width: usize,
    pub window_len: usize,
    pub frequencies: usize,
    pub aggregation: Aggregation,
    pub temporal: bool,
    pub conv_channels: Vec<usize>,
    pub image_size: usize,
    pub head_hidden: usize,
    pub slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            embed_width: 64,
            window_len: 151,
            frequencies: 6,
            aggregation: Aggregation::Concat,
            temporal: true,
            conv_channels: vec![16, 32, 64, 128, 256, 512],
            image_size: 128,
            head_hidden: 256,
            slope: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn with_variant(mut self, v: Variant) -> Self {
        self.aggregation = v.aggregation();
        self.temporal = v.temporal();
        self
    }

    pub fn variant(&self) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.aggregation() == self.aggregation && v.temporal() == self.temporal)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.latent_dim == 0 || self.embed_width == 0 || self.head_hidden == 0 {
            return err("latent_dim, embed_width and head_hidden must be positive".into());
        }
        if self.window_len.is_multiple_of(2) {
            return err(format!("window length must be odd, got {}", self.window_len));
        }
        let n = self.conv_channels.len();
        if n == 0 || self.conv_channels.windows(2).any(|w| w[0] >= w[1]) || self.conv_channels[0] == 0 {
            return err(format!("conv_channels must be non-empty and strictly increasing, got {:?}", self.conv_channels));
        }
        if n >= usize::BITS as usize || self.image_size == 0 || !self.image_size.is_multiple_of(1 << n) {
            return err(format!("image size {} is not divisible by 2^{n}", self.image_size));
        }
        if !(self.slope.is_finite() && self.slope >= 0.0) {
            return err(format!("invalid leaky-ReLU slope {}", self.slope));
        }
        Ok(())
    }

    /// Side of the smallest feature map.
    pub fn bottleneck_size(&self) -> usize {
        self.image_size >> self.conv_channels.len()
    }

    fn temporal_width(&self) -> usize {
        if self.temporal {
            2 * self.frequencies
        } else {
            0
        }
    }

    /// Width of the aggregated CSI features.
    pub fn aggregate_width(&self) -> usize {
        match self.aggregation {
            Aggregation::Uniform | Aggregation::Gaussian => self.embed_width,
            Aggregation::Concat => self.window_len * self.embed_width,
        }
    }

    /// Input width of the CSI posterior head.
    pub fn csi_head_inputs(&self) -> usize {
        self.aggregate_width() + self.temporal_width()
    }
}

/// Normalized weights `w_i ∝ exp(−(i − L/2)² / (2 (L/2)²))` for `i < L`.
pub fn gaussian_weights(len: usize) -> Vec<f64> {
    let c = len as f64 / 2.0;
    let raw: Vec<f64> = (0..len).map(|i| (-(i as f64 - c).powi(2) / (2.0 * c * c)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// `[sin(2^k π t / 3L), cos(2^k π t / 3L)]` for `k < F`.
pub fn temporal_encode(t: f64, frequencies: usize, window_len: usize) -> Vec<f64> {
    let base = std::f64::consts::PI * t / (3.0 * window_len as f64);
    (0..frequencies)
        .flat_map(|k| {
            let a = base * 2f64.powi(k as i32);
            [a.sin(), a.cos()]
        })
        .collect()
}

fn temporal_block(t: &[f64], frequencies: usize, window_len: usize) -> Array2<f64> {
    let mut out = Array2::zeros((t.len(), 2 * frequencies));
    for (i, &ti) in t.iter().enumerate() {
        for (j, v) in temporal_encode(ti, frequencies, window_len).into_iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    out
}

fn concat_cols(a: Array2<f64>, b: Option<Array2<f64>>) -> Array2<f64> {
    match b {
        Some(b) if b.ncols() > 0 => ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("row counts agree"),
        _ => a,
    }
}

fn split_head(out: &Array2<f64>, d: usize) -> PosteriorBatch {
    PosteriorBatch::from_raw(out.slice(s![.., ..d]).to_owned(), out.slice(s![.., d..]).to_owned())
}

fn join_head_grad(g_mu: &Array2<f64>, g_lv: &Array2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(1), &[g_mu.view(), g_lv.view()]).expect("matching rows")
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv2d,
    bn: BatchNorm2d,
}

struct ConvBlockCache {
    conv: Conv2dCache,
    bn: BnCache,
    out: Array4<f64>,
}

impl ConvBlock {
    fn forward(&mut self, x: &Array4<f64>, mode: Mode, slope: f64) -> (Array4<f64>, ConvBlockCache) {
        let (h, conv) = self.conv.forward_t(x);
        let (h, bn) = self.bn.forward_t(&h, mode);
        let out = leaky_relu(h, slope);
        (out.clone(), ConvBlockCache { conv, bn, out })
    }

    fn backward(&mut self, cache: ConvBlockCache, gy: Array4<f64>, slope: f64) -> Array4<f64> {
        let g = leaky_relu_backward(&cache.out, gy, slope);
        let g = self.bn.backward(&cache.bn, &g);
        self.conv.backward(&cache.conv, &g)
    }
}

impl Module for ConvBlock {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        self.conv.visit(&join(prefix, "conv"), v);
        self.bn.visit(&join(prefix, "bn"), v);
    }
}

#[derive(Clone, Debug)]
struct DeconvBlock {
    conv: ConvTranspose2d,
    bn: BatchNorm2d,
}

struct DeconvBlockCache {
    conv: ConvTranspose2dCache,
    bn: BnCache,
    out: Array4<f64>,
}

impl DeconvBlock {
    fn forward(&mut self, x: &Array4<f64>, mode: Mode, slope: f64) -> (Array4<f64>, DeconvBlockCache) {
        let (h, conv) = self.conv.forward_t(x);
        let (h, bn) = self.bn.forward_t(&h, mode);
        let out = leaky_relu(h, slope);
        (out.clone(), DeconvBlockCache { conv, bn, out })
    }

    fn backward(&mut self, cache: DeconvBlockCache, gy: Array4<f64>, slope: f64) -> Array4<f64> {
        let g = leaky_relu_backward(&cache.out, gy, slope);
        let g = self.bn.backward(&cache.bn, &g);
        self.conv.backward(&cache.conv, &g)
    }
}

impl Module for DeconvBlock {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        self.conv.visit(&join(prefix, "conv"), v);
        self.bn.visit(&join(prefix, "bn"), v);
    }
}

fn geom() -> ConvGeom {
    ConvGeom::square(4, 2, 1)
}

/// Strided conv blocks, flatten, optional temporal features, MLP head.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    blocks: Vec<ConvBlock>,
    head: Mlp,
    latent_dim: usize,
    frequencies: usize,
    window_len: usize,
    temporal: bool,
    slope: f64,
}

pub struct ImageEncoderCache {
    blocks: Vec<ConvBlockCache>,
    head: MlpCache,
    flat_dims: (usize, usize, usize, usize),
}

impl ImageEncoder {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut cin = 3;
        let blocks = cfg
            .conv_channels
            .iter()
            .map(|&c| {
                let b = ConvBlock { conv: Conv2d::new(cin, c, geom(), false, rng), bn: BatchNorm2d::new(c) };
                cin = c;
                b
            })
            .collect();
        let s = cfg.bottleneck_size();
        let flat = cin * s * s + cfg.temporal_width();
        Self {
            blocks,
            head: Mlp::new(&[flat, cfg.head_hidden, 2 * cfg.latent_dim], false, cfg.slope, rng),
            latent_dim: cfg.latent_dim,
            frequencies: cfg.frequencies,
            window_len: cfg.window_len,
            temporal: cfg.temporal,
            slope: cfg.slope,
        }
    }

    /// Feature maps after every block, for shape probes.
    pub fn trace_shapes(&self, images: &Array4<f64>) -> Vec<(usize, usize, usize, usize)> {
        let mut h = images.clone();
        let mut out = Vec::new();
        for b in &self.blocks {
            h = leaky_relu(b.bn.forward(&b.conv.forward(&h)), self.slope);
            out.push(h.dim());
        }
        out
    }

    pub fn forward_t(&mut self, images: &Array4<f64>, t: &[f64], mode: Mode) -> (PosteriorBatch, ImageEncoderCache) {
        let mut h = images.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &mut self.blocks {
            let (y, c) = b.forward(&h, mode, self.slope);
            caches.push(c);
            h = y;
        }
        let dims = h.dim();
        let flat = h.into_shape_with_order((dims.0, dims.1 * dims.2 * dims.3)).expect("contiguous");
        let tb = self.temporal.then(|| temporal_block(t, self.frequencies, self.window_len));
        let (out, head) = self.head.forward_t(concat_cols(flat, tb));
        (split_head(&out, self.latent_dim), ImageEncoderCache { blocks: caches, head, flat_dims: dims })
    }

    pub fn backward(&mut self, cache: ImageEncoderCache, g_mu: &Array2<f64>, g_lv: &Array2<f64>) {
        let g = self.head.backward(&cache.head, join_head_grad(g_mu, g_lv));
        let (n, c, h, w) = cache.flat_dims;
        let mut g = g.slice(s![.., ..c * h * w]).to_owned().into_shape_with_order((n, c, h, w)).expect("contiguous");
        for (b, bc) in self.blocks.iter_mut().zip(cache.blocks).rev() {
            g = b.backward(bc, g, self.slope);
        }
    }
}

impl Module for ImageEncoder {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), v);
        }
        self.head.visit(&join(prefix, "head"), v);
    }
}

/// MLP to the bottleneck map, transposed-conv blocks back to the first
/// encoder width, then a linear transposed conv to RGB.
#[derive(Clone, Debug)]
pub struct ImageDecoder {
    fc: Mlp,
    blocks: Vec<DeconvBlock>,
    out: ConvTranspose2d,
    bottleneck: (usize, usize),
    slope: f64,
}

pub struct ImageDecoderCache {
    fc: MlpCache,
    blocks: Vec<DeconvBlockCache>,
    out: ConvTranspose2dCache,
}

impl ImageDecoder {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let chans = &cfg.conv_channels;
        let last = *chans.last().expect("validated");
        let s = cfg.bottleneck_size();
        let fc = Mlp::new(&[cfg.latent_dim, cfg.head_hidden, last * s * s], true, cfg.slope, rng);
        let blocks = chans.windows(2).rev().map(|w| DeconvBlock { conv: ConvTranspose2d::new(w[1], w[0], geom(), rng), bn: BatchNorm2d::new(w[0]) }).collect();
        Self { fc, blocks, out: ConvTranspose2d::new(chans[0], 3, geom(), rng), bottleneck: (last, s), slope: cfg.slope }
    }

    pub fn forward(&mut self, z: &Array2<f64>, mode: Mode) -> Array4<f64> {
        self.forward_t(z, mode).0
    }

    pub fn forward_t(&mut self, z: &Array2<f64>, mode: Mode) -> (Array4<f64>, ImageDecoderCache) {
        let (h, fc) = self.fc.forward_t(z.to_owned());
        let (c, s) = self.bottleneck;
        let mut x = h.into_shape_with_order((z.nrows(), c, s, s)).expect("contiguous");
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &mut self.blocks {
            let (y, cache) = b.forward(&x, mode, self.slope);
            caches.push(cache);
            x = y;
        }
        let (y, out) = self.out.forward_t(&x);
        (y, ImageDecoderCache { fc, blocks: caches, out })
    }

    pub fn backward(&mut self, cache: ImageDecoderCache, gy: &Array4<f64>) -> Array2<f64> {
        let mut g = self.out.backward(&cache.out, gy);
        for (b, bc) in self.blocks.iter_mut().zip(cache.blocks).rev() {
            g = b.backward(bc, g, self.slope);
        }
        let n = g.dim().0;
        let flat = g.into_shape_with_order((n, self.fc.outputs())).expect("contiguous");
        self.fc.backward(&cache.fc, flat)
    }

    /// Binds a mode so the decoder can be driven by the objective.
    pub fn with_mode(&mut self, mode: Mode) -> DecoderRun<'_> {
        DecoderRun { decoder: self, mode, backprop: true }
    }
}

impl Module for ImageDecoder {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        self.fc.visit(&join(prefix, "fc"), v);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), v);
        }
        self.out.visit(&join(prefix, "out"), v);
    }
}

pub struct DecoderRun<'a> {
    decoder: &'a mut ImageDecoder,
    mode: Mode,
    backprop: bool,
}

impl LatentDecoder for DecoderRun<'_> {
    fn decode(&mut self, z: &Array2<f64>) -> Array4<f64> {
        self.decoder.forward(z, self.mode)
    }

    fn decode_backward(&mut self, z: &Array2<f64>, grad: &mut dyn FnMut(&Array4<f64>) -> Array4<f64>) -> (Array4<f64>, Array2<f64>) {
        if !self.backprop {
            let out = self.decoder.forward(z, self.mode);
            grad(&out);
            return (out, Array2::zeros(z.dim()));
        }
        let (out, cache) = self.decoder.forward_t(z, self.mode);
        let g = grad(&out);
        let gz = self.decoder.backward(cache, &g);
        (out, gz)
    }
}

/// Per-packet embedding MLP, aggregation, optional temporal features, head.
#[derive(Clone, Debug)]
pub struct CsiEncoder {
    embed: Mlp,
    head: Mlp,
    aggregation: Aggregation,
    weights: Vec<f64>,
    latent_dim: usize,
    window_len: usize,
    frequencies: usize,
    temporal: bool,
}

pub struct CsiEncoderCache {
    embed: MlpCache,
    head: MlpCache,
    n: usize,
}

impl CsiEncoder {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        Self {
            embed: Mlp::new(&[N_SUBCARRIERS, cfg.embed_width, cfg.embed_width], true, cfg.slope, rng),
            head: Mlp::new(&[cfg.csi_head_inputs(), cfg.head_hidden, 2 * cfg.latent_dim], false, cfg.slope, rng),
            aggregation: cfg.aggregation,
            weights: gaussian_weights(cfg.window_len),
            latent_dim: cfg.latent_dim,
            window_len: cfg.window_len,
            frequencies: cfg.frequencies,
            temporal: cfg.temporal,
        }
    }

    pub fn head_inputs(&self) -> usize {
        self.head.inputs()
    }

    /// `(N, 52, L)` windows to `(N·L, 52)` rows, packet-major within a sample.
    fn columns(windows: &Array3<f64>) -> Array2<f64> {
        let (n, k, l) = windows.dim();
        windows.view().permuted_axes([0, 2, 1]).as_standard_layout().into_owned().into_shape_with_order((n * l, k)).expect("contiguous")
    }

    /// Per-column embedding of one `52 × L` window, `L × H`.
    pub fn embed(&self, window: &Array2<f64>) -> Array2<f64> {
        self.embed.forward(window.t())
    }

    /// Aggregates `L × H` features of one sample.
    pub fn aggregate(&self, features: &Array2<f64>) -> Array1<f64> {
        self.aggregate_rows(features.view().insert_axis(Axis(0)).to_owned().into_shape_with_order((features.nrows(), features.ncols())).expect("view"), 1)
            .row(0)
            .to_owned()
    }

    /// `(N·L, H)` features to `(N, width)`.
    fn aggregate_rows(&self, feats: Array2<f64>, n: usize) -> Array2<f64> {
        let l = feats.nrows() / n;
        let hdim = feats.ncols();
        let f3 = feats.into_shape_with_order((n, l, hdim)).expect("contiguous");
        match self.aggregation {
            Aggregation::Uniform => f3.mean_axis(Axis(1)).expect("non-empty window"),
            Aggregation::Gaussian => {
                let w = Array1::from(self.weights.clone());
                let mut out = Array2::zeros((n, hdim));
                for i in 0..n {
                    out.row_mut(i).assign(&w.dot(&f3.slice(s![i, .., ..])));
                }
                out
            }
            Aggregation::Concat => f3.into_shape_with_order((n, l * hdim)).expect("contiguous"),
        }
    }

    fn aggregate_backward(&self, g: &Array2<f64>, n: usize, hdim: usize) -> Array2<f64> {
        let l = self.window_len;
        let mut out = Array3::zeros((n, l, hdim));
        match self.aggregation {
            Aggregation::Uniform => {
                for i in 0..n {
                    let row = g.row(i).mapv(|v| v / l as f64);
                    out.slice_mut(s![i, .., ..]).assign(&row.broadcast((l, hdim)).expect("broadcast"));
                }
            }
            Aggregation::Gaussian => {
                for i in 0..n {
                    for j in 0..l {
                        out.slice_mut(s![i, j, ..]).assign(&g.row(i).mapv(|v| v * self.weights[j]));
                    }
                }
            }
            Aggregation::Concat => {
                out.assign(&g.slice(s![.., ..l * hdim]).to_owned().into_shape_with_order((n, l, hdim)).expect("contiguous"));
            }
        }
        out.into_shape_with_order((n * l, hdim)).expect("contiguous")
    }

    pub fn forward_t(&mut self, windows: &Array3<f64>, t: &[f64]) -> (PosteriorBatch, CsiEncoderCache) {
        let (n, k, l) = windows.dim();
        assert_eq!((k, l), (N_SUBCARRIERS, self.window_len), "window shape does not match the model");
        let (feats, embed) = self.embed.forward_t(Self::columns(windows));
        let agg = self.aggregate_rows(feats, n);
        let tb = self.temporal.then(|| temporal_block(t, self.frequencies, self.window_len));
        let (out, head) = self.head.forward_t(concat_cols(agg, tb));
        (split_head(&out, self.latent_dim), CsiEncoderCache { embed, head, n })
    }

    pub fn forward(&mut self, windows: &Array3<f64>, t: &[f64]) -> PosteriorBatch {
        self.forward_t(windows, t).0
    }

    pub fn backward(&mut self, cache: CsiEncoderCache, g_mu: &Array2<f64>, g_lv: &Array2<f64>) {
        let g = self.head.backward(&cache.head, join_head_grad(g_mu, g_lv));
        let hdim = self.embed.outputs();
        let g_feats = self.aggregate_backward(&g, cache.n, hdim);
        self.embed.backward(&cache.embed, g_feats);
    }
}

impl Module for CsiEncoder {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        self.embed.visit(&join(prefix, "embed"), v);
        self.head.visit(&join(prefix, "head"), v);
    }
}

/// The full two-modality model.
#[derive(Clone, Debug)]
pub struct MopoeVae {
    pub config: ModelConfig,
    pub image_encoder: ImageEncoder,
    pub csi_encoder: CsiEncoder,
    pub decoder: ImageDecoder,
}

impl MopoeVae {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image_encoder = ImageEncoder::new(&config, &mut rng);
        let csi_encoder = CsiEncoder::new(&config, &mut rng);
        let decoder = ImageDecoder::new(&config, &mut rng);
        Ok(Self { config, image_encoder, csi_encoder, decoder })
    }

    /// One forward/backward pass of the batch-mean objective over all three
    /// subsets in training mode. Gradients accumulate into the parameters.
    pub fn train_pass(&mut self, batch: &Batch, beta: f64, noise: &mut dyn NoiseSource) -> LossBreakdown {
        let (qi, ci) = self.image_encoder.forward_t(&batch.images, &batch.t, Mode::Train);
        let (qw, cw) = self.csi_encoder.forward_t(&batch.windows, &batch.t);
        let post = BTreeMap::from([(Modality::Image, qi), (Modality::Wifi, qw)]);
        let out = mopoe_objective(&post, &ModalitySet::IW.subsets(), &mut self.decoder.with_mode(Mode::Train), &batch.images, beta, noise);
        let (gmi, gli) = &out.grads[&Modality::Image];
        self.image_encoder.backward(ci, gmi, gli);
        let (gmw, glw) = &out.grads[&Modality::Wifi];
        self.csi_encoder.backward(cw, gmw, glw);
        out.loss
    }

    /// Batch-mean objective in eval mode, no parameter gradients.
    pub fn eval_loss(&mut self, batch: &Batch, beta: f64, noise: &mut dyn NoiseSource) -> LossBreakdown {
        let (qi, _) = self.image_encoder.forward_t(&batch.images, &batch.t, Mode::Eval);
        let qw = self.csi_encoder.forward(&batch.windows, &batch.t);
        let post = BTreeMap::from([(Modality::Image, qi), (Modality::Wifi, qw)]);
        let mut run = DecoderRun { decoder: &mut self.decoder, mode: Mode::Eval, backprop: false };
        mopoe_objective(&post, &ModalitySet::IW.subsets(), &mut run, &batch.images, beta, noise).loss
    }

    /// Decodes the CSI posterior mean, in normalized pixel space.
    pub fn predict_normalized(&mut self, windows: &Array3<f64>, t: &[f64]) -> Array4<f64> {
        let qw = self.csi_encoder.forward(windows, t);
        self.decoder.forward(&qw.mu, Mode::Eval)
    }
}

impl Module for MopoeVae {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        self.image_encoder.visit(&join(prefix, "image_encoder"), v);
        self.csi_encoder.visit(&join(prefix, "csi_encoder"), v);
        self.decoder.visit(&join(prefix, "decoder"), v);
    }
}

const CHECKPOINT_FORMAT: &str = "csi-mopoe-v1";
const CHECKPOINT_META_KEY: &str = "csi_mopoe";

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    format: String,
    config: ModelConfig,
    norm_stats: NormStats,
    csi_scaling: Option<CsiScaling>,
    seed: u64,
}

/// A model ready for inference, with the statistics it was trained on.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: MopoeVae,
    pub norm: NormStats,
    pub csi_scaling: Option<CsiScaling>,
    pub seed: u64,
}

impl TrainedModel {
    /// Denormalized `[0, 1]` predictions, clipped, `(N, 3, S, S)`.
    pub fn predict01(&mut self, windows: &Array3<f64>, t: &[f64]) -> Array4<f64> {
        let mut w = windows.clone();
        if let Some(sc) = &self.csi_scaling {
            for mut win in w.outer_iter_mut() {
                let mut owned = win.to_owned();
                sc.apply(&mut owned);
                win.assign(&owned);
            }
        }
        let y = self.model.predict_normalized(&w, t);
        let mut out = y;
        for mut img in out.outer_iter_mut() {
            let d = self.norm.denormalize(img.view());
            img.assign(&d.mapv(|v| v.clamp(0.0, 1.0)));
        }
        out
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        struct Collect(Vec<(String, ArrayD<f64>)>);
        impl Visitor for Collect {
            fn param(&mut self, name: &str, p: &mut Param) {
                self.0.push((name.to_string(), p.value.clone()));
            }
            fn buffer(&mut self, name: &str, b: &mut ArrayD<f64>) {
                self.0.push((name.to_string(), b.clone()));
            }
        }
        let mut c = Collect(Vec::new());
        self.model.visit("", &mut c);
        let bytes: Vec<(String, Vec<usize>, Vec<u8>)> =
            c.0.into_iter()
                .map(|(n, a)| {
                    let shape = a.shape().to_vec();
                    let data = a.as_standard_layout().iter().flat_map(|v| v.to_le_bytes()).collect();
                    (n, shape, data)
                })
                .collect();
        let views = bytes
            .iter()
            .map(|(n, shape, data)| TensorView::new(Dtype::F64, shape.clone(), data).map(|v| (n.clone(), v)))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        // one entry: a map with several keys serializes in hash order
        let meta = CheckpointMeta {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.model.config.clone(),
            norm_stats: self.norm.clone(),
            csi_scaling: self.csi_scaling.clone(),
            seed: self.seed,
        };
        let meta = HashMap::from([(CHECKPOINT_META_KEY.to_string(), serde_json::to_string(&meta)?)]);
        safetensors::serialize_to_file(views, Some(meta), path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let meta = meta.metadata().clone().unwrap_or_default();
        let raw = meta.get(CHECKPOINT_META_KEY).ok_or_else(|| Error::Checkpoint(format!("checkpoint metadata lacks {CHECKPOINT_META_KEY:?}")))?;
        let CheckpointMeta { format, config, norm_stats: norm, csi_scaling, seed } = serde_json::from_str(raw)?;
        if format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported checkpoint format {format:?}")));
        }
        let tensors = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut model = MopoeVae::new(config, 0)?;

        struct Assign<'a> {
            tensors: &'a SafeTensors<'a>,
            error: Option<Error>,
            seen: usize,
        }
        impl Assign<'_> {
            fn load(&mut self, name: &str, target: &mut ArrayD<f64>) {
                if self.error.is_some() {
                    return;
                }
                let t = match self.tensors.tensor(name) {
                    Ok(t) => t,
                    Err(e) => {
                        self.error = Some(Error::Checkpoint(format!("tensor {name}: {e}")));
                        return;
                    }
                };
                if t.dtype() != Dtype::F64 || t.shape() != target.shape() {
                    self.error = Some(Error::Checkpoint(format!("tensor {name}: expected f64 {:?}, found {:?} {:?}", target.shape(), t.dtype(), t.shape())));
                    return;
                }
                let vals: Vec<f64> = t.data().chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                *target = ArrayD::from_shape_vec(IxDyn(t.shape()), vals).expect("shape checked");
                self.seen += 1;
            }
        }
        impl Visitor for Assign<'_> {
            fn param(&mut self, name: &str, p: &mut Param) {
                self.load(name, &mut p.value);
            }
            fn buffer(&mut self, name: &str, b: &mut ArrayD<f64>) {
                self.load(name, b);
            }
        }
        let mut a = Assign { tensors: &tensors, error: None, seen: 0 };
        model.visit("", &mut a);
        if let Some(e) = a.error {
            return Err(e);
        }
        if a.seen != tensors.len() {
            return Err(Error::Checkpoint(format!("checkpoint holds {} tensors, the model expects {}", tensors.len(), a.seen)));
        }
        Ok(Self { model, norm, csi_scaling, seed })
    }

    pub fn check_compatible(&self, config: &ModelConfig) -> Result<()> {
        if &self.model.config != config {
            return Err(Error::Config("checkpoint configuration does not match the requested model".into()));
        }
        Ok(())
    }
}

/// `[0, 1]` CHW image to 8-bit RGB with rounding.
pub fn to_rgb(img01: ndarray::ArrayView3<'_, f64>) -> RgbImage {
    let (_, h, w) = img01.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (img01[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Reconstructs the image for one window from the CSI posterior mean.
pub fn infer_image(window: &Array2<f64>, t: f64, model: &mut TrainedModel) -> Result<RgbImage> {
    let cfg = &model.model.config;
    if window.dim() != (N_SUBCARRIERS, cfg.window_len) {
        return Err(Error::Config(format!("window is {:?}, the model expects ({N_SUBCARRIERS}, {})", window.dim(), cfg.window_len)));
    }
    let batch = window.clone().insert_axis(Axis(0));
    let out = model.predict01(&batch, &[t]);
    Ok(to_rgb(out.slice(s![0, .., .., ..])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent_core::SeededNoise;

    fn small_config(v: Variant) -> ModelConfig {
        ModelConfig {
            latent_dim: 6,
            embed_width: 5,
            window_len: 7,
            frequencies: 2,
            conv_channels: vec![4, 8, 12],
            image_size: 16,
            head_hidden: 10,
            ..ModelConfig::default()
        }
        .with_variant(v)
    }

    fn random_batch(cfg: &ModelConfig, n: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = cfg.image_size;
        Batch {
            windows: Array3::from_shape_fn((n, 52, cfg.window_len), |_| rng.random_range(0.0..2.0)),
            t: (0..n).map(|i| 100.0 + i as f64).collect(),
            images: Array4::from_shape_fn((n, 3, s, s), |_| rng.random_range(-1.5..1.5)),
            centers: (0..n).collect(),
        }
    }

    #[test]
    fn gaussian_weight_examples() {
        let c = 75.5f64;
        let raw0 = (-(0.0 - c).powi(2) / (2.0 * c * c)).exp();
        assert!((raw0 - (-0.5f64).exp()).abs() < 1e-15);
        assert!((raw0 - 0.6065).abs() < 1e-4);
        let w = gaussian_weights(151);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // the center packet carries near-maximal weight
        let peak = w.iter().cloned().fold(f64::MIN, f64::max);
        assert!(w[75] / peak > 0.9999);
    }

    #[test]
    fn temporal_examples() {
        assert_eq!(temporal_encode(0.0, 3, 11), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let l = 151;
        let e = temporal_encode(3.0 * l as f64, 1, l);
        assert!(e[0].abs() < 1e-12 && (e[1] + 1.0).abs() < 1e-12);
        let e = temporal_encode(1.5 * l as f64, 2, l);
        for (a, b) in e.iter().zip([1.0, 0.0, 0.0, -1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(temporal_encode(5.0, 0, 3).is_empty());
        // period of frequency k is 6L / 2^k
        for k in 0..4usize {
            let period = 6.0 * l as f64 / 2f64.powi(k as i32);
            let a = temporal_encode(17.3, k + 1, l);
            let b = temporal_encode(17.3 + period, k + 1, l);
            assert!((a[2 * k] - b[2 * k]).abs() < 1e-9 && (a[2 * k + 1] - b[2 * k + 1]).abs() < 1e-9);
        }
    }

    #[test]
    fn default_shapes() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.csi_head_inputs(), 151 * 64 + 12);
        assert_eq!(cfg.bottleneck_size(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = ImageEncoder::new(&cfg, &mut rng);
        let sizes: Vec<usize> = enc.trace_shapes(&Array4::zeros((1, 3, 128, 128))).iter().map(|d| d.2).collect();
        assert_eq!(sizes, vec![64, 32, 16, 8, 4, 2]);
        let csi = CsiEncoder::new(&cfg, &mut rng);
        assert_eq!(csi.head_inputs(), 9664 + 12);
        assert_eq!(csi.embed(&Array2::zeros((52, 151))).dim(), (151, 64));
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = small_config(Variant::C);
        c.window_len = 8;
        assert!(c.validate().is_err());
        let mut c = small_config(Variant::C);
        c.conv_channels = vec![8, 8];
        assert!(c.validate().is_err());
        let mut c = small_config(Variant::C);
        c.image_size = 20;
        assert!(c.validate().is_err());
    }

    #[test]
    fn embedding_is_per_column() {
        let cfg = small_config(Variant::C);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = CsiEncoder::new(&cfg, &mut rng);
        let w = Array2::from_shape_fn((52, 7), |_| rng.random_range(0.0..1.0));
        let mut swapped = w.clone();
        swapped.column_mut(1).assign(&w.column(4));
        swapped.column_mut(4).assign(&w.column(1));
        let a = enc.embed(&w);
        let b = enc.embed(&swapped);
        assert_eq!(a.row(1), b.row(4));
        assert_eq!(a.row(4), b.row(1));
        assert_eq!(a.row(0), b.row(0));
        let z = enc.embed(&Array2::zeros((52, 7)));
        let first = enc.embed.forward(Array2::zeros((1, 52)).view());
        for r in z.outer_iter() {
            assert_eq!(r, first.row(0));
        }
    }

    #[test]
    fn aggregation_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let feats = Array2::from_shape_fn((7, 5), |_| rng.random_range(-1.0..1.0));
        let rev = Array2::from_shape_fn((7, 5), |(i, j)| feats[[6 - i, j]]);
        let mut rolled = feats.clone();
        for i in 0..7 {
            rolled.row_mut(i).assign(&feats.row((i + 3) % 7));
        }
        let enc = |v| CsiEncoder::new(&small_config(v), &mut ChaCha8Rng::seed_from_u64(0));
        let uw = enc(Variant::Uw);
        assert!((&uw.aggregate(&feats) - &uw.aggregate(&rolled)).iter().all(|d| d.abs() < 1e-12));
        let constant = Array2::from_elem((7, 5), 0.25);
        assert!(uw.aggregate(&constant).iter().all(|v| (v - 0.25).abs() < 1e-15));
        let gw = enc(Variant::Gw);
        let w = gaussian_weights(7);
        let manual: Vec<f64> = (0..5).map(|j| (0..7).map(|i| w[i] * feats[[i, j]]).sum()).collect();
        assert!(gw.aggregate(&feats).iter().zip(&manual).all(|(a, b)| (a - b).abs() < 1e-12));
        let c = enc(Variant::C);
        let flat = c.aggregate(&feats);
        assert_eq!(flat.len(), 35);
        for k in 0..7 {
            assert_eq!(flat.slice(s![5 * k..5 * (k + 1)]), feats.row(k));
        }
        assert_ne!(c.aggregate(&feats), c.aggregate(&rev));
    }

    #[test]
    fn gw_reflection_symmetry() {
        let w = gaussian_weights(151);
        // weights are symmetric about L/2, so i and L - i carry equal weight
        for i in 1..151 {
            assert!((w[i] - w[151 - i]).abs() < 1e-15);
        }
    }

    #[test]
    fn permutation_behaviour_of_posteriors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Array3::from_shape_fn((1, 52, 7), |_| rng.random_range(0.0..2.0));
        let mut swapped = w.clone();
        for k in 0..52 {
            swapped[[0, k, 2]] = w[[0, k, 5]];
            swapped[[0, k, 5]] = w[[0, k, 2]];
        }
        let mut uw = CsiEncoder::new(&small_config(Variant::Uw), &mut ChaCha8Rng::seed_from_u64(4));
        let d = &uw.forward(&w, &[3.0]).mu - &uw.forward(&swapped, &[3.0]).mu;
        assert!(d.iter().all(|v| v.abs() < 1e-12));
        let mut c = CsiEncoder::new(&small_config(Variant::C), &mut ChaCha8Rng::seed_from_u64(4));
        let d = &c.forward(&w, &[3.0]).mu - &c.forward(&swapped, &[3.0]).mu;
        assert!(d.iter().any(|v| v.abs() > 0.0));
    }

    #[test]
    fn end_to_end_shapes_for_every_variant() {
        for v in Variant::ALL {
            let cfg = small_config(v);
            let mut m = MopoeVae::new(cfg.clone(), 5).unwrap();
            let b = random_batch(&cfg, 3, 1);
            let (qw, _) = m.csi_encoder.forward_t(&b.windows, &b.t);
            assert_eq!(qw.mu.dim(), (3, 6));
            let (qi, _) = m.image_encoder.forward_t(&b.images, &b.t, Mode::Eval);
            assert!(qi.log_var.iter().all(|v| (-10.0..=10.0).contains(v)));
            let z = qi.sample(&Array2::from_elem((3, 6), 0.3));
            assert_eq!(m.decoder.forward(&z, Mode::Eval).dim(), b.images.dim());
            let zero = m.decoder.forward(&Array2::zeros((1, 6)), Mode::Eval);
            assert!(zero.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn one_step_reaches_every_parameter() {
        struct Dead(Vec<String>);
        impl Visitor for Dead {
            fn param(&mut self, name: &str, p: &mut Param) {
                if !p.has_nonzero_grad() {
                    self.0.push(name.to_string());
                }
            }
        }
        for v in Variant::ALL {
            let cfg = small_config(v);
            let mut m = MopoeVae::new(cfg.clone(), 9).unwrap();
            let b = random_batch(&cfg, 4, 2);
            m.train_pass(&b, 1.0, &mut SeededNoise::new(0));
            let mut dead = Dead(Vec::new());
            m.visit("", &mut dead);
            assert!(dead.0.is_empty(), "{v}: no gradient for {:?}", dead.0);
        }
    }

    /// Finite-difference check of the whole train pass on a few weights.
    #[test]
    fn train_pass_gradients_match_finite_differences() {
        let cfg = small_config(Variant::Ct);
        let base = MopoeVae::new(cfg.clone(), 11).unwrap();
        let b = random_batch(&cfg, 3, 4);
        let mut m = base.clone();
        m.train_pass(&b, 0.5, &mut SeededNoise::new(1));
        struct Grab(Vec<(String, ArrayD<f64>)>);
        impl Visitor for Grab {
            fn param(&mut self, name: &str, p: &mut Param) {
                self.0.push((name.into(), p.grad.clone()));
            }
        }
        let mut grads = Grab(Vec::new());
        m.visit("", &mut grads);
        let loss_with = |name: &str, idx: usize, delta: f64| {
            struct Bump<'a>(&'a str, usize, f64);
            impl Visitor for Bump<'_> {
                fn param(&mut self, name: &str, p: &mut Param) {
                    if name == self.0 {
                        p.value.as_slice_mut().unwrap()[self.1] += self.2;
                    }
                }
            }
            let mut mm = base.clone();
            mm.visit("", &mut Bump(name, idx, delta));
            mm.train_pass(&b, 0.5, &mut SeededNoise::new(1)).total
        };
        let h = 1e-5;
        for (name, g) in &grads.0 {
            if name.contains(".bn.") {
                continue;
            }
            let idx = g.len() / 2;
            let fd = (loss_with(name, idx, h) - loss_with(name, idx, -h)) / (2.0 * h);
            let an = g.as_slice().unwrap()[idx];
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-3), "{name}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let cfg = small_config(Variant::Gw);
        let mut model = MopoeVae::new(cfg.clone(), 3).unwrap();
        let b = random_batch(&cfg, 2, 5);
        model.train_pass(&b, 1.0, &mut SeededNoise::new(0));
        let mut tm = TrainedModel { model, norm: NormStats { mean: [0.4, 0.5, 0.6], std: [0.2, 0.25, 0.3] }, csi_scaling: None, seed: 42 };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        tm.save(&path).unwrap();
        let mut back = TrainedModel::load(&path).unwrap();
        assert_eq!(back.seed, 42);
        assert_eq!(back.norm, tm.norm);
        let w = b.windows.slice(s![0, .., ..]).to_owned();
        let a = infer_image(&w, 9.0, &mut tm).unwrap();
        let c = infer_image(&w, 9.0, &mut back).unwrap();
        assert_eq!(a, c);
        let pa = tm.predict01(&b.windows, &b.t);
        let pc = back.predict01(&b.windows, &b.t);
        assert!(pa.iter().zip(pc.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(pa.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(back.check_compatible(&small_config(Variant::C)).is_err());
        assert!(infer_image(&Array2::zeros((52, 9)), 0.0, &mut back).is_err());
    }
}
