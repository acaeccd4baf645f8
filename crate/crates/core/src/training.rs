//! Optimization of the objective, multi-run selection and grid search.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::csi_ingest::Split;
use crate::dataset_windows::{in_bounds_centers, iterate_split, Batch, CsiScaling, Dataset, Order, PairedSample};
use crate::latent_core::{LossBreakdown, ModalitySet, SeededNoise, SubsetTerms};
use crate::models::{ModelConfig, MopoeVae, TrainedModel, Variant};
use crate::nn::{clip_grad_norm, Adam, AdamConfig, Module};
use crate::{Error, Result};

/// Seed of the reparametrization noise used for every validation pass.
pub const VALIDATION_NOISE_SEED: u64 = 0x0005_eed0_f7a1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub runs: usize,
    pub seed: u64,
    /// Global gradient-norm clip; off by default.
    pub clip_grad_norm: Option<f64>,
    /// Per-subcarrier standardization of CSI amplitudes; off by default.
    pub standardize_csi: bool,
    /// Holds the window length `L` along with the network sizes.
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 32, beta: 1.0, lr: 1e-3, epochs: 50, runs: 10, seed: 0, clip_grad_norm: None, standardize_csi: false, model: ModelConfig::default() }
    }
}

impl TrainConfig {
    pub fn window_len(&self) -> usize {
        self.model.window_len
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.runs == 0 {
            return Err(Error::Config("batch_size, epochs and runs must be positive".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) || !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("beta {} and lr {} must be finite and non-negative", self.beta, self.lr)));
        }
        self.model.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub run_id: usize,
    pub seed: u64,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub checkpoint: Option<PathBuf>,
}

impl RunRecord {
    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train.total).collect()
    }

    pub fn val_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val.total).collect()
    }

    pub fn best_val_loss(&self) -> f64 {
        self.epochs[self.best_epoch].val.total
    }
}

/// A finished run and the model from its best epoch.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub record: RunRecord,
    pub model: TrainedModel,
}

/// Running, sample-weighted average of loss breakdowns.
struct LossMeter {
    beta: f64,
    sums: BTreeMap<ModalitySet, SubsetTerms>,
    total: f64,
    count: usize,
}

impl LossMeter {
    fn new(beta: f64) -> Self {
        Self { beta, sums: BTreeMap::new(), total: 0.0, count: 0 }
    }

    fn add(&mut self, l: &LossBreakdown, n: usize) {
        for (s, t) in &l.per_subset {
            let e = self.sums.entry(*s).or_default();
            e.recon_nll += t.recon_nll * n as f64;
            e.kl += t.kl * n as f64;
        }
        self.total += l.total * n as f64;
        self.count += n;
    }

    fn finish(self) -> LossBreakdown {
        let n = self.count.max(1) as f64;
        let per_subset = self.sums.into_iter().map(|(s, t)| (s, SubsetTerms { recon_nll: t.recon_nll / n, kl: t.kl / n })).collect();
        LossBreakdown { per_subset, total: self.total / n, beta: self.beta }
    }
}

fn check_finite(l: &LossBreakdown, epoch: usize, batch: usize) -> Result<()> {
    let ok = l.total.is_finite() && l.per_subset.values().all(|t| t.recon_nll.is_finite() && t.kl.is_finite());
    if ok {
        return Ok(());
    }
    let detail = l.per_subset.iter().map(|(s, t)| format!("{s}: recon={} kl={}", t.recon_nll, t.kl)).collect::<Vec<_>>().join(", ");
    Err(Error::NonFinite { epoch, batch, detail: format!("total={} ({detail})", l.total) })
}

fn batches(samples: Vec<PairedSample>, size: usize, scaling: Option<&CsiScaling>) -> Vec<Batch> {
    samples.chunks(size).map(|c| Batch::from_samples(c, scaling)).collect()
}

/// Batch-mean objective over a split in eval mode with the fixed validation
/// noise seed.
pub fn evaluate_loss(model: &mut MopoeVae, dataset: &Dataset, split: Split, config: &TrainConfig, scaling: Option<&CsiScaling>) -> LossBreakdown {
    let mut noise = SeededNoise::new(VALIDATION_NOISE_SEED);
    let mut meter = LossMeter::new(config.beta);
    let samples: Vec<PairedSample> = iterate_split(dataset, split, config.window_len(), &dataset.norm, Order::Sequential).collect();
    for b in batches(samples, config.batch_size, scaling) {
        let l = model.eval_loss(&b, config.beta, &mut noise);
        meter.add(&l, b.len());
    }
    meter.finish()
}

fn epoch_seed(run_seed: u64, epoch: usize) -> u64 {
    run_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(epoch as u64 + 1)
}

/// Trains one model from `run_seed`, keeping the epoch with the lowest
/// validation loss. Writes `metrics.csv` and `best.safetensors` into
/// `out_dir` when given.
pub fn train_one_run(config: &TrainConfig, dataset: &Dataset, run_id: usize, run_seed: u64, out_dir: Option<&Path>) -> Result<RunOutcome> {
    config.validate()?;
    let l = config.window_len();
    for split in [Split::Train, Split::Val] {
        if in_bounds_centers(dataset, split, l).is_empty() {
            return Err(Error::Degenerate(format!("the {split} split has no complete windows of length {l}")));
        }
    }
    if dataset.image_size() != config.model.image_size {
        return Err(Error::Config(format!("dataset images are {0}x{0}, the model expects {1}x{1}", dataset.image_size(), config.model.image_size)));
    }
    let scaling = if config.standardize_csi { Some(CsiScaling::fit(dataset, Split::Train)?) } else { None };
    let mut model = MopoeVae::new(config.model.clone(), run_seed)?;
    let mut opt = Adam::new(AdamConfig { lr: config.lr, ..AdamConfig::default() });
    let mut noise = SeededNoise::new(run_seed ^ 0xa5a5_a5a5);
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, MopoeVae)> = None;

    for epoch in 0..config.epochs {
        let samples: Vec<PairedSample> = iterate_split(dataset, Split::Train, l, &dataset.norm, Order::Shuffled(epoch_seed(run_seed, epoch))).collect();
        let mut meter = LossMeter::new(config.beta);
        for (bi, b) in batches(samples, config.batch_size, scaling.as_ref()).iter().enumerate() {
            model.zero_grad();
            let loss = model.train_pass(b, config.beta, &mut noise);
            check_finite(&loss, epoch, bi)?;
            if let Some(max) = config.clip_grad_norm {
                clip_grad_norm(&mut model, max);
            }
            opt.step(&mut model);
            meter.add(&loss, b.len());
        }
        let train = meter.finish();
        let val = evaluate_loss(&mut model, dataset, Split::Val, config, scaling.as_ref());
        check_finite(&val, epoch, usize::MAX)?;
        log::info!("run {run_id} epoch {epoch}: train {:.4} val {:.4}", train.total, val.total);
        if best.as_ref().is_none_or(|(_, v, _)| val.total < *v) {
            best = Some((epoch, val.total, model.clone()));
        }
        epochs.push(EpochLog { epoch, train, val });
    }

    let (best_epoch, _, best_model) = best.expect("at least one epoch");
    let mut trained = TrainedModel { model: best_model, norm: dataset.norm.clone(), csi_scaling: scaling, seed: run_seed };
    let mut record = RunRecord { run_id, seed: run_seed, epochs, best_epoch, checkpoint: None };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_metrics_csv(&dir.join("metrics.csv"), &record)?;
        let ckpt = dir.join("best.safetensors");
        trained.save(&ckpt)?;
        record.checkpoint = Some(ckpt);
    }
    Ok(RunOutcome { record, model: trained })
}

pub fn write_metrics_csv(path: &Path, record: &RunRecord) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "val_loss", "train_recon", "train_kl", "val_recon", "val_kl"])?;
    for e in &record.epochs {
        w.write_record([
            e.epoch.to_string(),
            e.train.total.to_string(),
            e.val.total.to_string(),
            e.train.mean_recon().to_string(),
            e.train.mean_kl().to_string(),
            e.val.mean_recon().to_string(),
            e.val.mean_kl().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Index of the lowest loss; ties go to the earlier entry.
pub fn select_best(val_losses: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in val_losses.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        if best.is_none_or(|b| *v < val_losses[b]) {
            best = Some(i);
        }
    }
    best
}

pub struct ProtocolOutcome {
    /// Position of the selected run within `runs`.
    pub best: usize,
    pub runs: Vec<RunOutcome>,
    /// `(run_id, error)` for every aborted run.
    pub aborted: Vec<(usize, Error)>,
}

impl ProtocolOutcome {
    pub fn best_run(&self) -> &RunOutcome {
        &self.runs[self.best]
    }
}

/// Runs `config.runs` independent runs with seeds `seed + i` and selects the
/// one with the lowest best-epoch validation loss.
pub fn train_protocol(config: &TrainConfig, dataset: &Dataset, out_dir: Option<&Path>) -> Result<ProtocolOutcome> {
    config.validate()?;
    let mut runs = Vec::new();
    let mut aborted = Vec::new();
    for i in 0..config.runs {
        let dir = out_dir.map(|d| d.join(format!("run_{i:02}")));
        match train_one_run(config, dataset, i, config.seed.wrapping_add(i as u64), dir.as_deref()) {
            Ok(r) => runs.push(r),
            Err(e @ Error::NonFinite { .. }) => {
                log::warn!("run {i} aborted: {e}");
                aborted.push((i, e));
            }
            Err(e) => return Err(e),
        }
    }
    let losses: Vec<f64> = runs.iter().map(|r| r.record.best_val_loss()).collect();
    let best = select_best(&losses).ok_or(Error::AllRunsAborted(config.runs))?;
    Ok(ProtocolOutcome { best, runs, aborted })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub batch_size: Vec<usize>,
    pub window_len: Vec<usize>,
    pub beta: Vec<f64>,
}

impl Default for Grid {
    fn default() -> Self {
        Self { batch_size: vec![16, 32, 64, 128, 256, 512], window_len: vec![51, 101, 151, 201, 251, 301], beta: vec![1.0, 2.0, 4.0, 6.0] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    /// Sweep each axis with the others held at the base values.
    Coord,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub batch_size: usize,
    pub window_len: usize,
    pub beta: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best: TrainConfig,
    pub evaluations: Vec<Evaluation>,
}

fn with_point(base: &TrainConfig, b: usize, l: usize, beta: f64) -> TrainConfig {
    let mut c = base.clone();
    c.batch_size = b;
    c.model.window_len = l;
    c.beta = beta;
    c
}

fn argmin_by<T: Copy>(points: &[(T, f64)]) -> T {
    let losses: Vec<f64> = points.iter().map(|p| p.1).collect();
    points[select_best(&losses).unwrap_or(0)].0
}

/// Searches batch size, window length and β. `evaluate` returns the
/// validation loss of a configuration; failed evaluations count as `+∞`.
pub fn grid_search<F>(base: &TrainConfig, grid: &Grid, mode: SearchMode, mut evaluate: F) -> Result<SearchOutcome>
where
    F: FnMut(&TrainConfig) -> Result<f64>,
{
    if grid.batch_size.is_empty() || grid.window_len.is_empty() || grid.beta.is_empty() {
        return Err(Error::Config("every grid axis needs at least one value".into()));
    }
    let mut evaluations = Vec::new();
    let mut run = |c: TrainConfig, evaluations: &mut Vec<Evaluation>| -> Result<f64> {
        let loss = match evaluate(&c) {
            Ok(v) if v.is_finite() => v,
            Ok(_) | Err(Error::NonFinite { .. }) | Err(Error::Degenerate(_)) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        evaluations.push(Evaluation { batch_size: c.batch_size, window_len: c.window_len(), beta: c.beta, val_loss: loss });
        Ok(loss)
    };
    let (b0, l0, beta0) = (base.batch_size, base.window_len(), base.beta);
    let best = match mode {
        SearchMode::Coord => {
            let mut bs = Vec::new();
            for &b in &grid.batch_size {
                bs.push((b, run(with_point(base, b, l0, beta0), &mut evaluations)?));
            }
            let mut ls = Vec::new();
            for &l in &grid.window_len {
                ls.push((l, run(with_point(base, b0, l, beta0), &mut evaluations)?));
            }
            let mut betas = Vec::new();
            for &beta in &grid.beta {
                betas.push((beta, run(with_point(base, b0, l0, beta), &mut evaluations)?));
            }
            with_point(base, argmin_by(&bs), argmin_by(&ls), argmin_by(&betas))
        }
        SearchMode::Full => {
            let mut all = Vec::new();
            for &b in &grid.batch_size {
                for &l in &grid.window_len {
                    for &beta in &grid.beta {
                        all.push(((b, l, beta), run(with_point(base, b, l, beta), &mut evaluations)?));
                    }
                }
            }
            let (b, l, beta) = argmin_by(&all);
            with_point(base, b, l, beta)
        }
    };
    Ok(SearchOutcome { best, evaluations })
}

/// Evaluator for [`grid_search`]: one short C+T run, scored by its best
/// validation loss.
pub fn validation_evaluator(dataset: &Dataset, epochs: usize) -> impl FnMut(&TrainConfig) -> Result<f64> + '_ {
    move |c: &TrainConfig| {
        let mut c = c.clone();
        c.epochs = epochs;
        c.model = c.model.with_variant(Variant::Ct);
        let run = train_one_run(&c, dataset, 0, c.seed, None)?;
        Ok(run.record.best_val_loss())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_ties_go_to_lower_index() {
        assert_eq!(select_best(&[2.0, 1.5, 1.5]), Some(1));
        assert_eq!(select_best(&[3.0]), Some(0));
        assert_eq!(select_best(&[]), None);
        assert_eq!(select_best(&[f64::NAN, 4.0]), Some(1));
    }

    #[test]
    fn coordinate_search_counts_and_singletons() {
        let base = TrainConfig::default();
        let out = grid_search(&base, &Grid::default(), SearchMode::Coord, |_| Ok(1.0)).unwrap();
        assert_eq!(out.evaluations.len(), 16);
        let full = grid_search(&base, &Grid::default(), SearchMode::Full, |_| Ok(1.0)).unwrap();
        assert_eq!(full.evaluations.len(), 144);
        let single = Grid { batch_size: vec![32], window_len: vec![151], beta: vec![1.0] };
        let out = grid_search(&base, &single, SearchMode::Coord, |c| Ok(c.beta)).unwrap();
        assert_eq!(out.best, base);
    }

    #[test]
    fn coordinate_search_combines_axis_minima() {
        let base = TrainConfig::default();
        let target = |c: &TrainConfig| ((c.batch_size as f64).log2() - 6.0).powi(2) + ((c.window_len() as f64 - 201.0) / 50.0).powi(2) + (c.beta - 2.0).powi(2);
        let out = grid_search(&base, &Grid::default(), SearchMode::Coord, |c| Ok(target(c))).unwrap();
        assert_eq!((out.best.batch_size, out.best.window_len(), out.best.beta), (64, 201, 2.0));
        // non-batch-size axes keep the base value during the batch sweep
        assert!(out.evaluations[..6].iter().all(|e| e.window_len == 151 && e.beta == 1.0));
        let full = grid_search(&base, &Grid::default(), SearchMode::Full, |c| Ok(target(c))).unwrap();
        assert_eq!(full.best, out.best);
    }

    #[test]
    fn failed_points_are_skipped() {
        let base = TrainConfig::default();
        let grid = Grid { batch_size: vec![16, 32], window_len: vec![151], beta: vec![1.0] };
        let out = grid_search(&base, &grid, SearchMode::Coord, |c| {
            if c.batch_size == 16 {
                Err(Error::NonFinite { epoch: 0, batch: 0, detail: String::new() })
            } else {
                Ok(5.0)
            }
        })
        .unwrap();
        assert_eq!(out.best.batch_size, 32);
    }
}
