//! Parsing of CSI packet logs and image manifests, trimming, nearest-timestamp
//! pairing and the contiguous train/val/test split.
//!
//! CSI log format, one record per line:
//!
//! ```text
//! seq_no,timestamp_us,rssi,"[i0,r0,i1,r1,...]"
//! ```
//!
//! The bracketed list interleaves imaginary and real parts per subcarrier as
//! emitted by common ESP32 CSI dumps. `seq_no` and `rssi` may be empty.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::FilterType;
use image::RgbImage;
use log::{info, warn};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset_windows::{compute_norm_stats, Dataset, DatasetMeta, FrameStore, PairRow};
use crate::{Error, Result};

pub const N_SUBCARRIERS: usize = 52;

/// Buffer positions of the 52 L-LTF data and pilot subcarriers in a 64-entry
/// ESP32 LLTF block (buffer order 0..31, -32..-1), listed from subcarrier -26
/// up to +26 with DC and guard bands removed.
pub fn default_lltf_indices() -> Vec<usize> {
    (38..64).chain(1..27).collect()
}

/// Reads a subcarrier index list (integers separated by commas or
/// whitespace). The literal `default` selects [`default_lltf_indices`].
pub fn load_subcarrier_indices(spec: &str) -> Result<Vec<usize>> {
    if spec == "default" {
        return Ok(default_lltf_indices());
    }
    let text = std::fs::read_to_string(spec).map_err(|e| Error::io(spec, e))?;
    let idx = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| Error::Input(format!("bad subcarrier index {s:?} in {spec}"))))
        .collect::<Result<Vec<_>>>()?;
    validate_indices(&idx)?;
    Ok(idx)
}

fn validate_indices(idx: &[usize]) -> Result<()> {
    if idx.len() != N_SUBCARRIERS {
        return Err(Error::Input(format!("expected {N_SUBCARRIERS} subcarrier indices, got {}", idx.len())));
    }
    Ok(())
}

pub trait Timestamped {
    fn timestamp_us(&self) -> i64;
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsiPacket {
    pub timestamp_us: i64,
    pub csi: Vec<Complex64>,
    pub seq_no: Option<u64>,
    pub rssi: Option<i32>,
}

impl Timestamped for CsiPacket {
    fn timestamp_us(&self) -> i64 {
        self.timestamp_us
    }
}

/// Per-subcarrier magnitude `sqrt(re² + im²)`.
pub fn amplitude(csi: &[Complex64]) -> Vec<f64> {
    csi.iter().map(|z| (z.re * z.re + z.im * z.im).sqrt()).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkippedLine {
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct ParsedLog {
    pub packets: Vec<CsiPacket>,
    pub skipped: Vec<SkippedLine>,
    /// Number of packets whose timestamp is smaller than their predecessor's.
    pub non_monotone: usize,
}

pub fn parse_csi_log(path: &Path, subcarrier_indices: &[usize]) -> Result<ParsedLog> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let parsed = parse_csi_reader(BufReader::new(file), subcarrier_indices).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    if !parsed.skipped.is_empty() {
        warn!("{}: skipped {} malformed record(s)", path.display(), parsed.skipped.len());
    }
    Ok(parsed)
}

pub fn parse_csi_reader<R: BufRead>(reader: R, subcarrier_indices: &[usize]) -> Result<ParsedLog> {
    validate_indices(subcarrier_indices)?;
    let needed = subcarrier_indices.iter().max().map_or(0, |m| m + 1);
    let mut out = ParsedLog::default();
    let mut last_ts: Option<i64> = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io("<csi log>", e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match parse_record(line, subcarrier_indices, needed) {
            Ok(p) => {
                if last_ts.is_some_and(|t| p.timestamp_us < t) {
                    warn!("line {line_no}: timestamp {} goes backwards", p.timestamp_us);
                    out.non_monotone += 1;
                }
                last_ts = Some(p.timestamp_us);
                out.packets.push(p);
            }
            Err(_) if out.packets.is_empty() && out.skipped.is_empty() && looks_like_header(line) => {}
            Err(reason) => {
                warn!("line {line_no}: skipping record: {reason}");
                out.skipped.push(SkippedLine { line: line_no, reason });
            }
        }
    }
    Ok(out)
}

fn looks_like_header(line: &str) -> bool {
    let first = line.split(',').next().unwrap_or("");
    first.parse::<f64>().is_err() && line.to_ascii_lowercase().contains("timestamp")
}

fn parse_record(line: &str, indices: &[usize], needed: usize) -> Result<CsiPacket, String> {
    let mut head = line.splitn(4, ',');
    let (Some(seq), Some(ts), Some(rssi), Some(rest)) = (head.next(), head.next(), head.next(), head.next()) else {
        return Err("expected 4 fields".into());
    };
    let seq_no = opt_field::<u64>(seq, "seq_no")?;
    let rssi = opt_field::<i32>(rssi, "rssi")?;
    let timestamp_us = ts.trim().parse::<i64>().map_err(|_| format!("bad timestamp {ts:?}"))?;
    let body = rest
        .trim()
        .strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .map(str::trim)
        .and_then(|s| s.strip_prefix('['))
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| "CSI field is not a quoted [..] list".to_string())?;
    let values = body.split(',').map(|v| v.trim().parse::<f64>().map_err(|_| format!("bad CSI value {v:?}"))).collect::<Result<Vec<f64>, String>>()?;
    if values.len() % 2 != 0 {
        return Err(format!("odd number of CSI values ({})", values.len()));
    }
    if values.len() / 2 < needed {
        return Err(format!("{} complex entries, need at least {needed}", values.len() / 2));
    }
    let csi = indices.iter().map(|&k| Complex64::new(values[2 * k + 1], values[2 * k])).collect();
    Ok(CsiPacket { timestamp_us, csi, seq_no, rssi })
}

fn opt_field<T: FromStr>(s: &str, name: &str) -> Result<Option<T>, String> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| format!("bad {name} {s:?}"))
}

/// Writes packets in the canonical log format, storing only the selected
/// subcarriers (so re-parsing uses the identity index list `0..52`).
pub fn write_csi_log<W: Write>(mut w: W, packets: &[CsiPacket]) -> std::io::Result<()> {
    for p in packets {
        let seq = p.seq_no.map(|s| s.to_string()).unwrap_or_default();
        let rssi = p.rssi.map(|s| s.to_string()).unwrap_or_default();
        let body: Vec<String> = p.csi.iter().flat_map(|z| [z.im.to_string(), z.re.to_string()]).collect();
        writeln!(w, "{seq},{},{rssi},\"[{}]\"", p.timestamp_us, body.join(","))?;
    }
    Ok(())
}

/// A manifest row: image path and capture time. Pixels are decoded on demand
/// because a full recording does not fit in memory at native resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameEntry {
    pub timestamp_us: i64,
    pub path: PathBuf,
}

impl Timestamped for FrameEntry {
    fn timestamp_us(&self) -> i64 {
        self.timestamp_us
    }
}

#[derive(Clone, Debug)]
pub struct ImageFrame {
    pub timestamp_us: i64,
    pub pixels: RgbImage,
}

impl Timestamped for ImageFrame {
    fn timestamp_us(&self) -> i64 {
        self.timestamp_us
    }
}

/// Reads a `filename,timestamp_us` manifest (header optional). Filenames are
/// resolved relative to the manifest's directory. Output is sorted by time.
pub fn load_frames(manifest_path: &Path) -> Result<Vec<FrameEntry>> {
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut rdr =
        csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).flexible(true).from_path(manifest_path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(manifest_path, io),
            other => Error::Input(format!("{}: {other:?}", manifest_path.display())),
        })?;
    let mut frames = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() < 2 {
            return Err(Error::Input(format!("{}: row {} needs filename,timestamp_us", manifest_path.display(), i + 1)));
        }
        let ts = match rec[1].parse::<i64>() {
            Ok(t) => t,
            Err(_) if i == 0 => continue,
            Err(_) => return Err(Error::Input(format!("{}: bad timestamp {:?} in row {}", manifest_path.display(), &rec[1], i + 1))),
        };
        let path = base.join(&rec[0]);
        if !path.is_file() {
            return Err(Error::Input(format!("missing image file {}", &rec[0])));
        }
        frames.push(FrameEntry { timestamp_us: ts, path });
    }
    frames.sort_by_key(|f| f.timestamp_us);
    Ok(frames)
}

pub fn decode_frame(entry: &FrameEntry) -> Result<ImageFrame> {
    let img = image::open(&entry.path).map_err(|e| Error::Image { path: entry.path.clone(), message: e.to_string() })?;
    Ok(ImageFrame { timestamp_us: entry.timestamp_us, pixels: img.to_rgb8() })
}

/// Keeps the packets and frames whose timestamps fall in `[start_us, end_us]`.
pub fn trim_sequence<P: Timestamped, F: Timestamped>(packets: Vec<P>, frames: Vec<F>, start_us: i64, end_us: i64) -> Result<(Vec<P>, Vec<F>)> {
    if start_us >= end_us {
        return Err(Error::Input(format!("trim interval [{start_us}, {end_us}] is empty")));
    }
    let keep = |t: i64| (start_us..=end_us).contains(&t);
    let packets: Vec<P> = packets.into_iter().filter(|p| keep(p.timestamp_us())).collect();
    let frames: Vec<F> = frames.into_iter().filter(|f| keep(f.timestamp_us())).collect();
    if packets.is_empty() || frames.is_empty() {
        return Err(Error::Input(format!("trim interval [{start_us}, {end_us}] leaves {} packets and {} frames", packets.len(), frames.len())));
    }
    Ok((packets, frames))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketImagePair {
    pub packet_index: usize,
    pub frame_index: usize,
    pub abs_dt_us: u64,
}

/// Index of the frame closest in time to `t`; ties go to the earlier frame.
/// `frames` must be sorted ascending.
pub fn nearest_frame(frame_ts: &[i64], t: i64) -> usize {
    let right = frame_ts.partition_point(|&f| f < t);
    let chosen = if right == 0 {
        0
    } else if right == frame_ts.len() || t.abs_diff(frame_ts[right - 1]) <= t.abs_diff(frame_ts[right]) {
        right - 1
    } else {
        right
    };
    // duplicated timestamps resolve to the first frame carrying them
    frame_ts.partition_point(|&f| f < frame_ts[chosen])
}

/// One pair per packet, matched to the nearest frame in time.
pub fn pair_nearest<P: Timestamped, F: Timestamped>(packets: &[P], frames: &[F]) -> Vec<PacketImagePair> {
    let frame_ts: Vec<i64> = frames.iter().map(Timestamped::timestamp_us).collect();
    if frame_ts.is_empty() {
        return Vec::new();
    }
    packets
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let t = p.timestamp_us();
            let f = nearest_frame(&frame_ts, t);
            PacketImagePair { packet_index: i, frame_index: f, abs_dt_us: t.abs_diff(frame_ts[f]) }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Input(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitAssignment {
    pub splits: Vec<Split>,
    pub ratios: (u32, u32, u32),
}

impl SplitAssignment {
    pub fn counts(&self) -> (usize, usize, usize) {
        let c = |s| self.splits.iter().filter(|x| **x == s).count();
        (c(Split::Train), c(Split::Val), c(Split::Test))
    }
}

/// Contiguous split in pair order: the first `a/(a+b+c)` of the pairs go to
/// train, the next `b/(a+b+c)` to val, and the remainder to test.
pub fn split_contiguous(n_pairs: usize, ratios: (u32, u32, u32)) -> Result<SplitAssignment> {
    if n_pairs < 10 {
        return Err(Error::Input(format!("need at least 10 pairs to split, got {n_pairs}")));
    }
    let total = (ratios.0 + ratios.1 + ratios.2) as usize;
    if total == 0 {
        return Err(Error::Config("split ratios sum to zero".into()));
    }
    let n_train = n_pairs * ratios.0 as usize / total;
    let n_val = n_pairs * ratios.1 as usize / total;
    let splits = (0..n_pairs)
        .map(|i| match i {
            i if i < n_train => Split::Train,
            i if i < n_train + n_val => Split::Val,
            _ => Split::Test,
        })
        .collect();
    Ok(SplitAssignment { splits, ratios })
}

#[derive(Clone, Debug)]
pub struct IngestOptions {
    pub csi_log: PathBuf,
    pub manifest: PathBuf,
    pub trim_start_us: Option<i64>,
    pub trim_end_us: Option<i64>,
    pub subcarriers: Vec<usize>,
    pub image_size: u32,
    pub ratios: (u32, u32, u32),
}

impl IngestOptions {
    pub fn new(csi_log: impl Into<PathBuf>, manifest: impl Into<PathBuf>) -> Self {
        Self {
            csi_log: csi_log.into(),
            manifest: manifest.into(),
            trim_start_us: None,
            trim_end_us: None,
            subcarriers: default_lltf_indices(),
            image_size: 128,
            ratios: (8, 1, 1),
        }
    }
}

pub fn resize_frame(pixels: &RgbImage, size: u32) -> RgbImage {
    if pixels.dimensions() == (size, size) {
        return pixels.clone();
    }
    image::imageops::resize(pixels, size, size, FilterType::Triangle)
}

/// Full ingest: parse, trim, pair, split, resize frames, compute
/// normalization statistics on the training frames, and build the dataset.
pub fn ingest(opts: &IngestOptions) -> Result<Dataset> {
    let log = parse_csi_log(&opts.csi_log, &opts.subcarriers)?;
    let entries = load_frames(&opts.manifest)?;
    info!("parsed {} packets ({} skipped), {} frames", log.packets.len(), log.skipped.len(), entries.len());

    let start = opts.trim_start_us.unwrap_or(i64::MIN);
    let end = opts.trim_end_us.unwrap_or(i64::MAX);
    let (packets, entries) = trim_sequence(log.packets, entries, start, end)?;

    let pairs = pair_nearest(&packets, &entries);
    let assignment = split_contiguous(pairs.len(), opts.ratios)?;

    // order-preserving parallel decode; the pool size decides determinism of
    // scheduling only, never of the result
    let size = opts.image_size;
    let first_dims = decode_frame(&entries[0])?.pixels.dimensions();
    let resized: Vec<RgbImage> = entries
        .par_iter()
        .map(|e| {
            let f = decode_frame(e)?;
            if f.pixels.dimensions() != first_dims {
                return Err(Error::Image {
                    path: e.path.clone(),
                    message: format!("dimensions {:?} differ from first frame {:?}", f.pixels.dimensions(), first_dims),
                });
            }
            Ok(resize_frame(&f.pixels, size))
        })
        .collect::<Result<_>>()?;
    let frames = FrameStore::from_images(&resized);

    let amplitudes = packets.iter().map(|p| amplitude(&p.csi)).collect::<Vec<_>>();
    let rows: Vec<PairRow> =
        pairs.iter().zip(&assignment.splits).map(|(p, s)| PairRow { packet_index: p.packet_index, frame_index: p.frame_index, split: *s }).collect();

    let mut train_frames: Vec<usize> = rows.iter().filter(|r| r.split == Split::Train).map(|r| r.frame_index).collect();
    train_frames.sort_unstable();
    train_frames.dedup();
    let norm = compute_norm_stats(train_frames.iter().map(|&i| frames.image01(i)))?;

    let (n_train, n_val, n_test) = assignment.counts();
    let meta = DatasetMeta {
        n_packets: packets.len(),
        n_frames: frames.len(),
        image_size: size as usize,
        skipped_lines: log.skipped.len(),
        non_monotone_timestamps: log.non_monotone,
        n_train,
        n_val,
        n_test,
        subcarriers: opts.subcarriers.clone(),
        source: "ingest".into(),
    };
    Dataset::new(crate::dataset_windows::amplitude_matrix(&amplitudes), frames, rows, norm, meta)
}
