//! Orchestration: synthetic recordings, the aggregation ablation, grids and
//! reconstruction videos.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Cursor, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use log::{error, info};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::csi_ingest::{ingest, write_csi_log, CsiPacket, IngestOptions, Split, N_SUBCARRIERS};
use crate::dataset_windows::{in_bounds_centers, read_json, write_json, Dataset};
use crate::metrics_eval::{evaluate_variant, psnr, reconstruct_centers, rgb_to_array, ssim, FeatureExtractor, MetricsReport, ReportRow};
use crate::models::{TrainedModel, Variant};
use crate::training::{train_protocol, TrainConfig};
use crate::{Error, Result};

/// One sinusoid of the 1-D position signal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionComponent {
    pub amplitude: f64,
    pub period_s: f64,
    pub phase: f64,
}

/// A square sliding across a fixed background, observed by a camera and by
/// CSI whose per-subcarrier amplitudes are smooth functions of its position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_packets: usize,
    pub image_size: u32,
    pub packet_rate_hz: f64,
    pub frame_rate_hz: f64,
    /// Position is `0.5 + Σ a·sin(2πt/T + φ)`, clamped to `[0, 1]`.
    pub motion: Vec<MotionComponent>,
    /// Standard deviation of the additive amplitude noise.
    pub noise: f64,
    /// Square side as a fraction of the image side.
    pub square_frac: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_packets: 2000,
            image_size: 32,
            packet_rate_hz: 100.0,
            frame_rate_hz: 30.0,
            motion: vec![MotionComponent { amplitude: 0.3, period_s: 3.7, phase: 0.0 }, MotionComponent { amplitude: 0.15, period_s: 1.3, phase: 1.0 }],
            noise: 0.05,
            square_frac: 0.3,
        }
    }
}

const START_US: i64 = 1_000_000;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_packets < 10 {
            return Err(Error::Config(format!("synthetic recordings need at least 10 packets, got {}", self.n_packets)));
        }
        if self.image_size < 8 {
            return Err(Error::Config(format!("image_size {} is below 8", self.image_size)));
        }
        if !(self.packet_rate_hz > 0.0 && self.frame_rate_hz > 0.0) {
            return Err(Error::Config("sampling rates must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise {} must be a finite non-negative number", self.noise)));
        }
        if !(self.square_frac > 0.0 && self.square_frac < 1.0) {
            return Err(Error::Config(format!("square_frac {} must lie in (0, 1)", self.square_frac)));
        }
        if self.motion.iter().any(|m| m.period_s <= 0.0 || !m.period_s.is_finite() || !m.amplitude.is_finite()) {
            return Err(Error::Config("motion components need finite amplitudes and positive periods".into()));
        }
        Ok(())
    }

    pub fn position(&self, t_s: f64) -> f64 {
        let p = 0.5 + self.motion.iter().map(|m| m.amplitude * (2.0 * PI * t_s / m.period_s + m.phase).sin()).sum::<f64>();
        p.clamp(0.0, 1.0)
    }

    fn packet_us(&self, i: usize) -> i64 {
        START_US + (i as f64 * 1e6 / self.packet_rate_hz).round() as i64
    }

    fn frame_us(&self, j: usize) -> i64 {
        START_US + (j as f64 * 1e6 / self.frame_rate_hz).round() as i64
    }

    fn n_frames(&self) -> usize {
        let last = self.packet_us(self.n_packets - 1) - START_US;
        (last as f64 * 1e-6 * self.frame_rate_hz).ceil() as usize + 1
    }
}

/// Per-subcarrier phase rate; subcarrier 0 stays on the rising quarter
/// period over `p ∈ [0, 1]`, which makes the map from position invertible.
pub fn subcarrier_rate(k: usize) -> f64 {
    PI * (0.5 + k as f64 / N_SUBCARRIERS as f64)
}

/// Noise-free amplitude of subcarrier `k` at position `p`.
pub fn synthetic_amplitude(k: usize, p: f64) -> f64 {
    1.0 + 0.5 * (2.0 * PI * k as f64 / N_SUBCARRIERS as f64 + subcarrier_rate(k) * p).sin()
}

/// Position recovered from a noise-free amplitude column.
pub fn invert_position(column: &[f64]) -> f64 {
    ((2.0 * (column[0] - 1.0)).clamp(-1.0, 1.0).asin() / subcarrier_rate(0)).clamp(0.0, 1.0)
}

fn background(size: u32) -> RgbImage {
    let s = size as f64;
    RgbImage::from_fn(size, size, |x, y| Rgb([(40.0 + 120.0 * y as f64 / s) as u8, (60.0 + 80.0 * x as f64 / s) as u8, 140]))
}

/// The square at position `p` with anti-aliased horizontal edges.
pub fn render_square(spec: &SyntheticSpec, p: f64) -> RgbImage {
    let size = spec.image_size;
    let s = size as f64;
    let side = (spec.square_frac * s).round().max(1.0);
    let x0 = p * (s - side);
    let y0 = ((s - side) / 2.0).floor() as u32;
    let mut img = background(size);
    let color = [230.0, 200.0, 40.0];
    for x in 0..size {
        let cover = ((x as f64 + 1.0).min(x0 + side) - (x as f64).max(x0)).clamp(0.0, 1.0);
        if cover == 0.0 {
            continue;
        }
        for y in y0..y0 + side as u32 {
            let px = img.get_pixel_mut(x, y);
            for c in 0..3 {
                px[c] = (cover * color[c] + (1.0 - cover) * px[c] as f64).round() as u8;
            }
        }
    }
    img
}

/// An in-memory recording with its ground-truth trajectory.
#[derive(Clone, Debug)]
pub struct SyntheticRecording {
    pub packets: Vec<CsiPacket>,
    pub packet_positions: Vec<f64>,
    pub frames: Vec<(i64, RgbImage)>,
    pub frame_positions: Vec<f64>,
}

pub fn generate_recording(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticRecording> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut packets = Vec::with_capacity(spec.n_packets);
    let mut packet_positions = Vec::with_capacity(spec.n_packets);
    for i in 0..spec.n_packets {
        let ts = spec.packet_us(i);
        let p = spec.position((ts - START_US) as f64 * 1e-6);
        let csi = (0..N_SUBCARRIERS)
            .map(|k| {
                let a = synthetic_amplitude(k, p) + if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                // carrier phase carries no information, as on real hardware
                Complex64::from_polar(a, rng.random_range(-PI..PI))
            })
            .collect();
        packets.push(CsiPacket { timestamp_us: ts, csi, seq_no: Some(i as u64), rssi: Some(-40) });
        packet_positions.push(p);
    }
    let mut frames = Vec::new();
    let mut frame_positions = Vec::new();
    for j in 0..spec.n_frames() {
        let ts = spec.frame_us(j);
        let p = spec.position((ts - START_US) as f64 * 1e-6);
        frames.push((ts, render_square(spec, p)));
        frame_positions.push(p);
    }
    Ok(SyntheticRecording { packets, packet_positions, frames, frame_positions })
}

/// Writes `csi.log`, `manifest.csv` and `frames/*.png` under `dir` and
/// returns the log and manifest paths.
pub fn write_recording(rec: &SyntheticRecording, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let frames_dir = dir.join("frames");
    std::fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let log_path = dir.join("csi.log");
    let f = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut w = BufWriter::new(f);
    write_csi_log(&mut w, &rec.packets).and_then(|_| w.flush()).map_err(|e| Error::io(&log_path, e))?;

    let manifest = dir.join("manifest.csv");
    let mut m = csv::Writer::from_path(&manifest)?;
    m.write_record(["filename", "timestamp_us"])?;
    for (j, (ts, img)) in rec.frames.iter().enumerate() {
        let name = format!("frames/frame_{j:05}.png");
        let path = dir.join(&name);
        img.save(&path).map_err(|e| Error::Image { path: path.clone(), message: e.to_string() })?;
        m.write_record([name, ts.to_string()])?;
    }
    m.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok((log_path, manifest))
}

/// Generates a recording under `dir/raw`, ingests it and writes the dataset
/// to `dir` in the ingest layout.
pub fn make_synthetic(spec: &SyntheticSpec, seed: u64, dir: &Path) -> Result<Dataset> {
    let rec = generate_recording(spec, seed)?;
    let (log, manifest) = write_recording(&rec, &dir.join("raw"))?;
    let mut opts = IngestOptions::new(log, manifest);
    // the log already holds the 52 selected subcarriers
    opts.subcarriers = (0..N_SUBCARRIERS).collect();
    opts.image_size = spec.image_size;
    let mut ds = ingest(&opts)?;
    ds.meta.source = "synthetic".into();
    ds.write(dir)?;
    write_json(&dir.join("synthetic.json"), &(spec, seed))?;
    Ok(ds)
}

/// Mean 8-bit training image over all training pairs.
pub fn mean_train_image(ds: &Dataset) -> Result<RgbImage> {
    let rows: Vec<usize> = ds.pairs.iter().filter(|p| p.split == Split::Train).map(|p| p.frame_index).collect();
    if rows.is_empty() {
        return Err(Error::Degenerate("no training pairs".into()));
    }
    let mut acc = rgb_to_array(&ds.frames.rgb(rows[0])) * 0.0;
    for &f in &rows {
        acc += &rgb_to_array(&ds.frames.rgb(f));
    }
    acc /= rows.len() as f64;
    let (_, h, w) = acc.dim();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| Rgb(std::array::from_fn(|c| acc[[c, y as usize, x as usize]].round().clamp(0.0, 255.0) as u8))))
}

/// PSNR of predicting the mean training image for every in-bounds test
/// sample, averaged per image.
pub fn mean_image_baseline_psnr(ds: &Dataset, window_len: usize) -> Result<f64> {
    let mean = rgb_to_array(&mean_train_image(ds)?);
    let centers = in_bounds_centers(ds, Split::Test, window_len);
    if centers.is_empty() {
        return Err(Error::Degenerate(format!("no test sample fits a window of {window_len}")));
    }
    let total: f64 = centers.iter().map(|&c| psnr(mean.view(), rgb_to_array(&ds.frames.rgb(ds.pairs[c].frame_index)).view(), 255.0)).sum();
    Ok(total / centers.len() as f64)
}

/// An ablation over aggregation variants sharing one training config.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationPlan {
    pub variants: Vec<Variant>,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
}

impl AblationPlan {
    pub fn new(train: TrainConfig, out_dir: impl Into<PathBuf>) -> Self {
        Self { variants: Variant::ALL.to_vec(), train, out_dir: out_dir.into() }
    }

    /// The shared config with only the aggregation and temporal flags changed.
    pub fn config_for(&self, v: Variant) -> TrainConfig {
        let mut c = self.train.clone();
        c.model = c.model.with_variant(v);
        c
    }

    pub fn variant_dir(&self, v: Variant) -> PathBuf {
        self.out_dir.join(v.slug())
    }
}

/// Result of one variant, persisted as `variant.json` in its directory so
/// separately run variants can be merged.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VariantResult {
    pub row: ReportRow,
    pub best_checkpoint: Option<PathBuf>,
}

/// Trains and evaluates one variant of the plan. All runs aborting yields a
/// failed row rather than an error.
pub fn run_variant(plan: &AblationPlan, v: Variant, ds: &Dataset, fid: Option<&dyn FeatureExtractor>) -> Result<VariantResult> {
    let dir = plan.variant_dir(v);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let config = plan.config_for(v);
    info!("variant {v}: training {} run(s)", config.runs);
    let result = match train_protocol(&config, ds, Some(&dir)) {
        Ok(outcome) => {
            let best_checkpoint = outcome.best_run().record.checkpoint.clone();
            let mut models: Vec<TrainedModel> = outcome.runs.into_iter().map(|r| r.model).collect();
            let row = evaluate_variant(v.label(), &mut models, ds, fid)?;
            VariantResult { row, best_checkpoint }
        }
        Err(e @ (Error::AllRunsAborted(_) | Error::NonFinite { .. })) => {
            error!("variant {v} failed: {e}");
            VariantResult { row: ReportRow::failed(v.label()), best_checkpoint: None }
        }
        Err(e) => return Err(e),
    };
    write_json(&dir.join("variant.json"), &result)?;
    Ok(result)
}

/// Reads every variant's `variant.json`, writes `report.csv`, `report.json`
/// and `grid.png` under the plan's output directory.
pub fn collect_ablation(plan: &AblationPlan, ds: &Dataset, fid: Option<&dyn FeatureExtractor>) -> Result<MetricsReport> {
    let mut report = MetricsReport { rows: Vec::new(), fid_extractor: fid.map(|f| f.id().to_string()) };
    let mut columns = Vec::new();
    for &v in &plan.variants {
        let res: VariantResult = read_json(&plan.variant_dir(v).join("variant.json"))?;
        let model = res.best_checkpoint.as_deref().map(TrainedModel::load).transpose()?;
        columns.push(model);
        report.rows.push(res.row);
    }
    report.write_csv(&plan.out_dir.join("report.csv"))?;
    write_json(&plan.out_dir.join("report.json"), &report)?;
    let grid = reconstruction_grid(ds, plan.train.window_len(), &mut columns)?;
    let path = plan.out_dir.join("grid.png");
    grid.save(&path).map_err(|e| Error::Image { path, message: e.to_string() })?;
    Ok(report)
}

/// Runs every variant in order, then merges the results.
pub fn run_ablation(plan: &AblationPlan, ds: &Dataset, fid: Option<&dyn FeatureExtractor>) -> Result<MetricsReport> {
    std::fs::create_dir_all(&plan.out_dir).map_err(|e| Error::io(&plan.out_dir, e))?;
    write_json(&plan.out_dir.join("plan.json"), plan)?;
    for &v in &plan.variants {
        run_variant(plan, v, ds, fid)?;
    }
    collect_ablation(plan, ds, fid)
}

/// First, median and last in-bounds test centers.
pub fn grid_centers(ds: &Dataset, window_len: usize) -> Vec<usize> {
    let c = in_bounds_centers(ds, Split::Test, window_len);
    match c.len() {
        0 => Vec::new(),
        n => {
            let mut v = vec![c[0], c[n / 2], c[n - 1]];
            v.dedup();
            v
        }
    }
}

const GRID_PAD: u32 = 2;

/// One row per grid center: ground truth, then one tile per column. Missing
/// models leave a grey tile.
pub fn reconstruction_grid(ds: &Dataset, window_len: usize, columns: &mut [Option<TrainedModel>]) -> Result<RgbImage> {
    let centers = grid_centers(ds, window_len);
    let s = ds.image_size() as u32;
    let step = s + GRID_PAD;
    let cols = 1 + columns.len() as u32;
    let mut grid = RgbImage::from_pixel(GRID_PAD + cols * step, GRID_PAD + centers.len() as u32 * step, Rgb([255, 255, 255]));
    let mut tiles: Vec<Vec<RgbImage>> = vec![centers.iter().map(|&c| ds.frames.rgb(ds.pairs[c].frame_index)).collect()];
    for m in columns.iter_mut() {
        tiles.push(match m {
            Some(m) => reconstruct_centers(m, ds, &centers, centers.len().max(1))?,
            None => vec![RgbImage::from_pixel(s, s, Rgb([128, 128, 128])); centers.len()],
        });
    }
    for (ci, col) in tiles.iter().enumerate() {
        for (ri, tile) in col.iter().enumerate() {
            image::imageops::replace(&mut grid, tile, (GRID_PAD + ci as u32 * step) as i64, (GRID_PAD + ri as u32 * step) as i64);
        }
    }
    Ok(grid)
}

/// Per-frame output of a video export.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSummary {
    pub frames: usize,
    pub one_minus_ssim: Vec<f64>,
}

/// Writes a side-by-side (ground truth | reconstruction) animated PNG and a
/// CSV of per-frame `1 − SSIM`.
pub fn write_video(truth: &[RgbImage], recon: &[RgbImage], centers: &[usize], fps: u16, video: &Path, curve_csv: &Path) -> Result<VideoSummary> {
    assert_eq!(truth.len(), recon.len(), "frame counts differ");
    assert_eq!(truth.len(), centers.len(), "center count differs from frame count");
    if truth.is_empty() {
        return Err(Error::Input("video range is empty".into()));
    }
    if fps == 0 {
        return Err(Error::Config("fps must be positive".into()));
    }
    let (w, h) = truth[0].dimensions();
    let png_err = |e: png::EncodingError| Error::Image { path: video.to_path_buf(), message: e.to_string() };
    let file = File::create(video).map_err(|e| Error::io(video, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), 2 * w, h);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_animated(truth.len() as u32, 0).map_err(png_err)?;
    enc.set_frame_delay(1, fps).map_err(png_err)?;
    let mut writer = enc.write_header().map_err(png_err)?;

    let mut curve = Vec::with_capacity(truth.len());
    let mut csv = csv::Writer::from_path(curve_csv)?;
    csv.write_record(["frame", "packet_index", "one_minus_ssim"])?;
    for (i, (t, r)) in truth.iter().zip(recon).enumerate() {
        let mut frame = RgbImage::new(2 * w, h);
        image::imageops::replace(&mut frame, t, 0, 0);
        image::imageops::replace(&mut frame, r, w as i64, 0);
        writer.write_image_data(frame.as_raw()).map_err(png_err)?;
        let v = 1.0 - ssim(rgb_to_array(t).view(), rgb_to_array(r).view())?;
        csv.write_record([i.to_string(), centers[i].to_string(), v.to_string()])?;
        curve.push(v);
    }
    writer.finish().map_err(png_err)?;
    csv.flush().map_err(|e| Error::io(curve_csv, e))?;
    Ok(VideoSummary { frames: curve.len(), one_minus_ssim: curve })
}

/// Exports samples `range` (indices into the split's in-bounds centers).
pub fn export_video(
    model: &mut TrainedModel,
    ds: &Dataset,
    split: Split,
    range: Range<usize>,
    fps: u16,
    video: &Path,
    curve_csv: &Path,
) -> Result<VideoSummary> {
    let all = in_bounds_centers(ds, split, model.model.config.window_len);
    if range.start >= range.end || range.end > all.len() {
        return Err(Error::Input(format!("sample range {range:?} is outside the {} {split} samples", all.len())));
    }
    let centers = &all[range];
    let recon = reconstruct_centers(model, ds, centers, 64)?;
    let truth: Vec<RgbImage> = centers.iter().map(|&c| ds.frames.rgb(ds.pairs[c].frame_index)).collect();
    write_video(&truth, &recon, centers, fps, video, curve_csv)
}

/// Decodes every frame of an animated PNG written by [`write_video`].
pub fn read_video(path: &Path) -> Result<Vec<RgbImage>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let dec_err = |e: png::DecodingError| Error::Image { path: path.to_path_buf(), message: e.to_string() };
    let mut reader = png::Decoder::new(Cursor::new(bytes)).read_info().map_err(dec_err)?;
    let n = reader.info().animation_control.map_or(1, |a| a.num_frames) as usize;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let mut frames = Vec::with_capacity(n);
    for _ in 0..n {
        let info = reader.next_frame(&mut buf).map_err(dec_err)?;
        let img = RgbImage::from_raw(info.width, info.height, buf[..info.buffer_size()].to_vec())
            .ok_or_else(|| Error::Image { path: path.to_path_buf(), message: "frame buffer size mismatch".into() })?;
        frames.push(img);
    }
    Ok(frames)
}
