//! On-disk dataset layout and model-ready samples.
//!
//! A dataset directory holds:
//!
//! * `pairs.csv` with `packet_index,frame_index,split`, one row per packet;
//! * `norm_stats.json` with per-channel mean/std of the training frames;
//! * `amplitudes.bin`, the `52 × N` amplitude matrix;
//! * `frames.bin`, every frame already resized to `S × S`, 8-bit RGB;
//! * `stats.json`, counts describing how the dataset was built.
//!
//! Both binary files start with an 8-byte magic followed by little-endian
//! `u64` dimensions and the row-major payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::RgbImage;
use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::csi_ingest::{Split, N_SUBCARRIERS};
use crate::{Error, Result};

const AMP_MAGIC: &[u8; 8] = b"CSIAMP\x00\x01";
const FRAME_MAGIC: &[u8; 8] = b"CSIFRM\x00\x01";

/// Per-channel statistics of the training images in `[0, 1]` scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormStats {
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|s| *s <= 0.0 || !s.is_finite()) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Degenerate(format!("invalid normalization statistics {self:?}")));
        }
        Ok(())
    }

    /// `(x - mean) / std` per channel on a `(3, H, W)` image in `[0, 1]`.
    pub fn normalize(&self, img01: &Array3<f64>) -> Array3<f64> {
        let mut out = img01.clone();
        for c in 0..3 {
            out.slice_mut(s![c, .., ..]).mapv_inplace(|v| (v - self.mean[c]) / self.std[c]);
        }
        out
    }

    /// Inverse of [`normalize`](Self::normalize), back to `[0, 1]` scale.
    pub fn denormalize(&self, img: ArrayView3<'_, f64>) -> Array3<f64> {
        let mut out = img.to_owned();
        for c in 0..3 {
            out.slice_mut(s![c, .., ..]).mapv_inplace(|v| v * self.std[c] + self.mean[c]);
        }
        out
    }
}

/// Two-pass mean and population std over every pixel of every image.
pub fn compute_norm_stats<I>(images: I) -> Result<NormStats>
where
    I: IntoIterator<Item = Array3<f64>>,
    I::IntoIter: Clone,
{
    let iter = images.into_iter();
    let mut sum = [0.0; 3];
    let mut count = 0usize;
    for img in iter.clone() {
        for (c, acc) in sum.iter_mut().enumerate() {
            *acc += img.slice(s![c, .., ..]).sum();
        }
        count += img.len() / 3;
    }
    if count == 0 {
        return Err(Error::Degenerate("no training images for normalization statistics".into()));
    }
    let mean = sum.map(|s| s / count as f64);
    let mut sq = [0.0; 3];
    for img in iter {
        for c in 0..3 {
            sq[c] += img.slice(s![c, .., ..]).iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
        }
    }
    let std = sq.map(|q| (q / count as f64).sqrt());
    if let Some(c) = std.iter().position(|s| *s == 0.0) {
        return Err(Error::Degenerate(format!("channel {c} has zero variance over the training images")));
    }
    Ok(NormStats { mean, std })
}

/// Frames stored resized, as 8-bit HWC RGB.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameStore {
    data: Vec<u8>,
    n: usize,
    height: usize,
    width: usize,
}

impl FrameStore {
    pub fn new(data: Vec<u8>, n: usize, height: usize, width: usize) -> Result<Self> {
        if data.len() != n * height * width * 3 {
            return Err(Error::Input(format!("frame buffer of {} bytes does not match {n}x{height}x{width}x3", data.len())));
        }
        Ok(Self { data, n, height, width })
    }

    pub fn from_images(images: &[RgbImage]) -> Self {
        let (w, h) = images.first().map_or((0, 0), |i| i.dimensions());
        let mut data = Vec::with_capacity(images.len() * (w * h * 3) as usize);
        for img in images {
            assert_eq!(img.dimensions(), (w, h), "frames must share one size");
            data.extend_from_slice(img.as_raw());
        }
        Self { data, n: images.len(), height: h as usize, width: w as usize }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn raw(&self, i: usize) -> &[u8] {
        let len = self.height * self.width * 3;
        &self.data[i * len..(i + 1) * len]
    }

    pub fn rgb(&self, i: usize) -> RgbImage {
        RgbImage::from_raw(self.width as u32, self.height as u32, self.raw(i).to_vec()).expect("sized buffer")
    }

    /// Frame `i` as a `(3, H, W)` array in `[0, 255]`.
    pub fn image255(&self, i: usize) -> Array3<f64> {
        let raw = self.raw(i);
        let (h, w) = (self.height, self.width);
        Array3::from_shape_fn((3, h, w), |(c, y, x)| raw[(y * w + x) * 3 + c] as f64)
    }

    /// Frame `i` as a `(3, H, W)` array in `[0, 1]`.
    pub fn image01(&self, i: usize) -> Array3<f64> {
        self.image255(i).mapv(|v| v / 255.0)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        let io = |e| Error::io(path, e);
        w.write_all(FRAME_MAGIC).map_err(io)?;
        for d in [self.n, self.height, self.width] {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        w.write_all(&self.data).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        let dims = read_header(&mut r, FRAME_MAGIC, 3, path)?;
        let mut data = vec![0u8; dims[0] * dims[1] * dims[2] * 3];
        r.read_exact(&mut data).map_err(|e| Error::io(path, e))?;
        Self::new(data, dims[0], dims[1], dims[2])
    }
}

fn read_header<R: Read>(r: &mut R, magic: &[u8; 8], ndims: usize, path: &Path) -> Result<Vec<usize>> {
    let mut m = [0u8; 8];
    r.read_exact(&mut m).map_err(|e| Error::io(path, e))?;
    if &m != magic {
        return Err(Error::Input(format!("{}: unexpected file magic", path.display())));
    }
    (0..ndims)
        .map(|_| {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
            Ok(u64::from_le_bytes(b) as usize)
        })
        .collect()
}

/// Stacks per-packet amplitude vectors into the `52 × N` matrix.
pub fn amplitude_matrix(per_packet: &[Vec<f64>]) -> Array2<f64> {
    let n = per_packet.len();
    Array2::from_shape_fn((N_SUBCARRIERS, n), |(k, i)| per_packet[i][k])
}

pub fn write_amplitudes(path: &Path, amps: &Array2<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let io = |e| Error::io(path, e);
    w.write_all(AMP_MAGIC).map_err(io)?;
    for d in [amps.nrows(), amps.ncols()] {
        w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
    }
    for v in amps.as_standard_layout().iter() {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_amplitudes(path: &Path) -> Result<Array2<f64>> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let dims = read_header(&mut r, AMP_MAGIC, 2, path)?;
    let mut bytes = vec![0u8; dims[0] * dims[1] * 8];
    r.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
    let vals: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Array2::from_shape_vec((dims[0], dims[1]), vals).map_err(|e| Error::Input(e.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRow {
    pub packet_index: usize,
    pub frame_index: usize,
    pub split: Split,
}

/// Contents of `stats.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n_packets: usize,
    pub n_frames: usize,
    pub image_size: usize,
    pub skipped_lines: usize,
    pub non_monotone_timestamps: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub subcarriers: Vec<usize>,
    pub source: String,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    /// `52 × N` subcarrier amplitudes, one column per packet.
    pub amplitudes: Array2<f64>,
    pub frames: FrameStore,
    /// One row per packet, ordered by packet index.
    pub pairs: Vec<PairRow>,
    pub norm: NormStats,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(amplitudes: Array2<f64>, frames: FrameStore, pairs: Vec<PairRow>, norm: NormStats, meta: DatasetMeta) -> Result<Self> {
        let ds = Self { amplitudes, frames, pairs, norm, meta };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        if self.amplitudes.nrows() != N_SUBCARRIERS {
            return Err(Error::Input(format!("amplitude matrix has {} rows, expected {N_SUBCARRIERS}", self.amplitudes.nrows())));
        }
        if self.pairs.len() != self.amplitudes.ncols() {
            return Err(Error::Input(format!("{} pairs for {} packets", self.pairs.len(), self.amplitudes.ncols())));
        }
        for (i, p) in self.pairs.iter().enumerate() {
            if p.packet_index != i || p.frame_index >= self.frames.len() {
                return Err(Error::Input(format!("pair row {i} is out of range: {p:?}")));
            }
        }
        let (h, w) = self.frames.size();
        if h != w {
            return Err(Error::Input(format!("frames must be square, got {h}x{w}")));
        }
        self.norm.validate()
    }

    pub fn n_packets(&self) -> usize {
        self.amplitudes.ncols()
    }

    pub fn image_size(&self) -> usize {
        self.frames.size().0
    }

    /// Packet indices assigned to `split`, in time order.
    pub fn split_centers(&self, split: Split) -> Vec<usize> {
        self.pairs.iter().filter(|p| p.split == split).map(|p| p.packet_index).collect()
    }

    /// Normalized target image for packet `center`.
    pub fn target_image(&self, center: usize, stats: &NormStats) -> Array3<f64> {
        stats.normalize(&self.frames.image01(self.pairs[center].frame_index))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut w = csv::Writer::from_path(dir.join("pairs.csv"))?;
        for p in &self.pairs {
            w.serialize(p)?;
        }
        w.flush().map_err(|e| Error::io(dir.join("pairs.csv"), e))?;
        write_json(&dir.join("norm_stats.json"), &self.norm)?;
        write_json(&dir.join("stats.json"), &self.meta)?;
        write_amplitudes(&dir.join("amplitudes.bin"), &self.amplitudes)?;
        self.frames.write(&dir.join("frames.bin"))
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let mut pairs = Vec::new();
        for row in csv::Reader::from_path(dir.join("pairs.csv"))?.deserialize() {
            pairs.push(row?);
        }
        let norm = read_json(&dir.join("norm_stats.json"))?;
        let meta = read_json(&dir.join("stats.json"))?;
        let amplitudes = read_amplitudes(&dir.join("amplitudes.bin"))?;
        let frames = FrameStore::read(&dir.join("frames.bin"))?;
        Self::new(amplitudes, frames, pairs, norm, meta)
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(f), value)?;
    Ok(())
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

/// `52 × L` amplitudes around a center packet.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrogramWindow {
    pub values: Array2<f64>,
    pub center_index: usize,
    pub t: f64,
}

/// Returned for centers whose window would leave the recorded sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SkipSample {
    pub center: usize,
}

pub fn sample_window(center: usize, window_len: usize, amplitudes: ArrayView2<'_, f64>) -> Result<SpectrogramWindow, SkipSample> {
    assert!(window_len % 2 == 1, "window length must be odd");
    let half = (window_len - 1) / 2;
    let n = amplitudes.ncols();
    if center < half || center + half >= n {
        return Err(SkipSample { center });
    }
    Ok(SpectrogramWindow { values: amplitudes.slice(s![.., center - half..=center + half]).to_owned(), center_index: center, t: center as f64 })
}

#[derive(Clone, Debug)]
pub struct PairedSample {
    pub window: SpectrogramWindow,
    /// Normalized `(3, S, S)` target.
    pub image: Array3<f64>,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Order {
    Sequential,
    Shuffled(u64),
}

/// Yields every in-bounds sample of a split once, in time order or in a
/// seeded permutation.
pub struct SplitIter<'a> {
    dataset: &'a Dataset,
    stats: &'a NormStats,
    split: Split,
    window_len: usize,
    centers: Vec<usize>,
    pos: usize,
}

impl<'a> SplitIter<'a> {
    pub fn stats(&self) -> &'a NormStats {
        self.stats
    }

    pub fn centers(&self) -> &[usize] {
        &self.centers
    }
}

impl Iterator for SplitIter<'_> {
    type Item = PairedSample;

    fn next(&mut self) -> Option<PairedSample> {
        let &center = self.centers.get(self.pos)?;
        self.pos += 1;
        let window = sample_window(center, self.window_len, self.dataset.amplitudes.view()).expect("centers are pre-filtered");
        Some(PairedSample { window, image: self.dataset.target_image(center, self.stats), split: self.split })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.centers.len() - self.pos;
        (left, Some(left))
    }
}

impl ExactSizeIterator for SplitIter<'_> {}

/// Centers of `split` whose full window fits in the sequence.
pub fn in_bounds_centers(dataset: &Dataset, split: Split, window_len: usize) -> Vec<usize> {
    let half = (window_len - 1) / 2;
    let n = dataset.n_packets();
    dataset.split_centers(split).into_iter().filter(|&c| c >= half && c + half < n).collect()
}

pub fn iterate_split<'a>(dataset: &'a Dataset, split: Split, window_len: usize, stats: &'a NormStats, order: Order) -> SplitIter<'a> {
    let mut centers = in_bounds_centers(dataset, split, window_len);
    if let Order::Shuffled(seed) = order {
        centers.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    SplitIter { dataset, stats, split, window_len, centers, pos: 0 }
}

/// Per-subcarrier standardization of amplitudes, fitted on training centers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsiScaling {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl CsiScaling {
    pub fn fit(dataset: &Dataset, split: Split) -> Result<Self> {
        let cols = dataset.split_centers(split);
        if cols.is_empty() {
            return Err(Error::Degenerate(format!("no {split} packets to fit CSI scaling")));
        }
        let n = cols.len() as f64;
        let mut mean = vec![0.0; N_SUBCARRIERS];
        let mut std = vec![0.0; N_SUBCARRIERS];
        for k in 0..N_SUBCARRIERS {
            let row = dataset.amplitudes.row(k);
            mean[k] = cols.iter().map(|&c| row[c]).sum::<f64>() / n;
            std[k] = (cols.iter().map(|&c| (row[c] - mean[k]).powi(2)).sum::<f64>() / n).sqrt().max(1e-8);
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, window: &mut Array2<f64>) {
        for (k, mut row) in window.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|v| (v - self.mean[k]) / self.std[k]);
        }
    }
}

/// A stack of samples ready for the networks.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `(N, 52, L)`
    pub windows: Array3<f64>,
    pub t: Vec<f64>,
    /// `(N, 3, S, S)`
    pub images: Array4<f64>,
    pub centers: Vec<usize>,
}

impl Batch {
    pub fn from_samples(samples: &[PairedSample], scaling: Option<&CsiScaling>) -> Self {
        assert!(!samples.is_empty(), "empty batch");
        let (k, l) = samples[0].window.values.dim();
        let (c, h, w) = samples[0].image.dim();
        let n = samples.len();
        let mut windows = Array3::zeros((n, k, l));
        let mut images = Array4::zeros((n, c, h, w));
        for (i, s) in samples.iter().enumerate() {
            let mut win = s.window.values.clone();
            if let Some(sc) = scaling {
                sc.apply(&mut win);
            }
            windows.slice_mut(s![i, .., ..]).assign(&win);
            images.slice_mut(s![i, .., .., ..]).assign(&s.image);
        }
        Self { windows, t: samples.iter().map(|s| s.window.t).collect(), images, centers: samples.iter().map(|s| s.window.center_index).collect() }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Rescales an 8-bit frame to `size × size` (bilinear), maps it to `[0, 1]`
/// and normalizes it per channel.
pub fn preprocess_image(pixels: &RgbImage, size: u32, stats: &NormStats) -> Array3<f64> {
    let resized = crate::csi_ingest::resize_frame(pixels, size);
    let store = FrameStore::from_images(std::slice::from_ref(&resized));
    stats.normalize(&store.image01(0))
}
