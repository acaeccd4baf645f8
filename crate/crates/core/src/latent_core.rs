//! Diagonal-Gaussian posteriors, product-of-experts fusion and the
//! multi-subset objective.
//!
//! Single-sample functions operate on [`GaussianPosterior`]; the training
//! path uses the batched [`PosteriorBatch`] and [`mopoe_objective`], which
//! also returns gradients with respect to every unimodal posterior.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

fn clamp_lv(v: f64) -> f64 {
    v.clamp(LOG_VAR_MIN, LOG_VAR_MAX)
}

/// Gradient mask for a clamped log-variance: entries sitting on a bound
/// receive no gradient.
fn lv_active(v: f64) -> f64 {
    if v <= LOG_VAR_MIN || v >= LOG_VAR_MAX {
        0.0
    } else {
        1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    mu: Vec<f64>,
    log_var: Vec<f64>,
}

impl GaussianPosterior {
    /// Builds a posterior, clamping `log_var` into `[-10, 10]`.
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mu.len() != log_var.len() || mu.is_empty() {
            return Err(Error::Input(format!("posterior needs equal non-zero lengths, got {} and {}", mu.len(), log_var.len())));
        }
        if mu.iter().chain(&log_var).any(|v| !v.is_finite()) {
            return Err(Error::Input("posterior parameters must be finite".into()));
        }
        Ok(Self { mu, log_var: log_var.into_iter().map(clamp_lv).collect() })
    }

    pub fn standard(dim: usize) -> Self {
        Self { mu: vec![0.0; dim], log_var: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    pub fn var(&self) -> Vec<f64> {
        self.log_var.iter().map(|v| v.exp()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    Image,
    Wifi,
}

impl Modality {
    fn bit(self) -> u8 {
        match self {
            Modality::Image => 1,
            Modality::Wifi => 2,
        }
    }
}

/// A non-empty subset of `{I, W}`.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ModalitySet(u8);

impl ModalitySet {
    pub const I: Self = Self(1);
    pub const W: Self = Self(2);
    pub const IW: Self = Self(3);

    pub fn from_modalities(ms: &[Modality]) -> Option<Self> {
        let bits = ms.iter().fold(0, |acc, m| acc | m.bit());
        (bits != 0).then_some(Self(bits))
    }

    pub fn contains(self, m: Modality) -> bool {
        self.0 & m.bit() != 0
    }

    pub fn modalities(self) -> Vec<Modality> {
        [Modality::Image, Modality::Wifi].into_iter().filter(|m| self.contains(m.to_owned())).collect()
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Every non-empty subset, singletons first.
    pub fn subsets(self) -> Vec<ModalitySet> {
        let mut out: Vec<ModalitySet> = (1..=3u8).filter(|b| b & !self.0 == 0).map(ModalitySet).collect();
        out.sort_by_key(|s| (s.len(), s.0));
        out
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            1 => f.write_str("I"),
            2 => f.write_str("W"),
            3 => f.write_str("I+W"),
            _ => f.write_str("{}"),
        }
    }
}

impl fmt::Debug for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{self}}}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubsetPosterior {
    pub subset: ModalitySet,
    pub posterior: GaussianPosterior,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub z: Vec<f64>,
    pub eps: Vec<f64>,
}

/// Source of standard-normal noise for the reparametrization.
pub trait NoiseSource {
    fn fill(&mut self, out: &mut [f64]);

    fn sample(&mut self, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        self.fill(&mut v);
        v
    }
}

pub struct SeededNoise(ChaCha8Rng);

impl SeededNoise {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }
}

impl NoiseSource for SeededNoise {
    fn fill(&mut self, out: &mut [f64]) {
        for v in out {
            *v = StandardNormal.sample(&mut self.0);
        }
    }
}

/// Replays fixed vectors in order, cycling when exhausted.
pub struct FixedNoise {
    draws: Vec<Vec<f64>>,
    next: usize,
}

impl FixedNoise {
    pub fn new(draws: Vec<Vec<f64>>) -> Self {
        assert!(!draws.is_empty(), "fixed noise needs at least one draw");
        Self { draws, next: 0 }
    }

    pub fn zeros() -> Self {
        Self::new(vec![Vec::new()])
    }
}

impl NoiseSource for FixedNoise {
    fn fill(&mut self, out: &mut [f64]) {
        let d = &self.draws[self.next % self.draws.len()];
        self.next += 1;
        for (i, v) in out.iter_mut().enumerate() {
            *v = if d.is_empty() { 0.0 } else { d[i % d.len()] };
        }
    }
}

/// `½ Σ (μ² + σ² − log σ² − 1)`.
pub fn kl_standard_normal(q: &GaussianPosterior) -> f64 {
    0.5 * q.mu.iter().zip(&q.log_var).map(|(m, lv)| m * m + lv.exp() - lv - 1.0).sum::<f64>()
}

pub fn reparameterize(q: &GaussianPosterior, eps: &[f64]) -> LatentSample {
    assert_eq!(eps.len(), q.dim(), "noise length must match the latent dimension");
    let z = q.mu.iter().zip(&q.log_var).zip(eps).map(|((m, lv), e)| m + (0.5 * lv).exp() * e).collect();
    LatentSample { z, eps: eps.to_vec() }
}

/// Precision-weighted product of diagonal Gaussians.
pub fn poe_combine(experts: &[&GaussianPosterior]) -> GaussianPosterior {
    assert!(!experts.is_empty(), "product of experts needs at least one expert");
    if experts.len() == 1 {
        return experts[0].clone();
    }
    let d = experts[0].dim();
    assert!(experts.iter().all(|e| e.dim() == d), "experts must share a dimension");
    let mut mu = vec![0.0; d];
    let mut log_var = vec![0.0; d];
    for i in 0..d {
        let (mut prec, mut wsum) = (0.0, 0.0);
        for e in experts {
            let p = (-e.log_var[i]).exp();
            prec += p;
            wsum += e.mu[i] * p;
        }
        mu[i] = wsum / prec;
        log_var[i] = clamp_lv(-prec.ln());
    }
    GaussianPosterior { mu, log_var }
}

pub fn powerset_posteriors(unimodal: &BTreeMap<Modality, GaussianPosterior>, present: ModalitySet) -> Vec<SubsetPosterior> {
    present
        .subsets()
        .into_iter()
        .map(|subset| {
            let experts: Vec<&GaussianPosterior> = subset.modalities().iter().map(|m| &unimodal[m]).collect();
            SubsetPosterior { subset, posterior: poe_combine(&experts) }
        })
        .collect()
}

/// `½ Σ (x − x̂)²` over every pixel and channel.
pub fn recon_nll(decoded: &Array3<f64>, target: &Array3<f64>) -> f64 {
    assert_eq!(decoded.dim(), target.dim(), "image shapes differ");
    0.5 * decoded.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SubsetTerms {
    pub recon_nll: f64,
    pub kl: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub per_subset: BTreeMap<ModalitySet, SubsetTerms>,
    pub total: f64,
    pub beta: f64,
}

impl LossBreakdown {
    fn from_terms(per_subset: BTreeMap<ModalitySet, SubsetTerms>, beta: f64) -> Self {
        let total = per_subset.values().map(|t| t.recon_nll + beta * t.kl).sum::<f64>() / per_subset.len() as f64;
        Self { per_subset, total, beta }
    }

    pub fn mean_recon(&self) -> f64 {
        self.per_subset.values().map(|t| t.recon_nll).sum::<f64>() / self.per_subset.len() as f64
    }

    pub fn mean_kl(&self) -> f64 {
        self.per_subset.values().map(|t| t.kl).sum::<f64>() / self.per_subset.len() as f64
    }
}

/// Single-example objective: one reparametrized draw per subset, image-only
/// reconstruction, uniform mean across subsets.
pub fn mopoe_loss<F>(subsets: &[SubsetPosterior], mut decode: F, target: &Array3<f64>, beta: f64, noise: &mut dyn NoiseSource) -> LossBreakdown
where
    F: FnMut(&[f64]) -> Array3<f64>,
{
    assert!(!subsets.is_empty(), "objective needs at least one subset");
    assert!(beta >= 0.0, "beta must be non-negative");
    let mut terms = BTreeMap::new();
    for s in subsets {
        let eps = noise.sample(s.posterior.dim());
        let z = reparameterize(&s.posterior, &eps);
        let recon = recon_nll(&decode(&z.z), target);
        terms.insert(s.subset, SubsetTerms { recon_nll: recon, kl: kl_standard_normal(&s.posterior) });
    }
    LossBreakdown::from_terms(terms, beta)
}

/// A batch of diagonal Gaussians, `(N, D)` each.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorBatch {
    pub mu: Array2<f64>,
    pub log_var: Array2<f64>,
}

impl PosteriorBatch {
    /// Clamps the raw log-variance head output.
    pub fn from_raw(mu: Array2<f64>, raw_log_var: Array2<f64>) -> Self {
        assert_eq!(mu.dim(), raw_log_var.dim());
        Self { mu, log_var: raw_log_var.mapv(clamp_lv) }
    }

    pub fn len(&self) -> usize {
        self.mu.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.mu.ncols()
    }

    pub fn row(&self, i: usize) -> GaussianPosterior {
        GaussianPosterior { mu: self.mu.row(i).to_vec(), log_var: self.log_var.row(i).to_vec() }
    }

    /// Zeroes gradient entries whose log-variance sits on a clamp bound.
    pub fn mask_log_var_grad(&self, grad: &mut Array2<f64>) {
        grad.zip_mut_with(&self.log_var, |g, lv| *g *= lv_active(*lv));
    }

    pub fn kl(&self) -> Array1<f64> {
        let mut out = Array1::zeros(self.len());
        for (i, (m, lv)) in self.mu.outer_iter().zip(self.log_var.outer_iter()).enumerate() {
            out[i] = 0.5 * m.iter().zip(lv).map(|(m, lv)| m * m + lv.exp() - lv - 1.0).sum::<f64>();
        }
        out
    }

    pub fn sample(&self, eps: &Array2<f64>) -> Array2<f64> {
        &self.mu + &(self.log_var.mapv(|v| (0.5 * v).exp()) * eps)
    }
}

struct PoeCache {
    weights: Vec<Array2<f64>>,
}

fn poe_batch(experts: &[&PosteriorBatch]) -> (PosteriorBatch, PoeCache) {
    let precisions: Vec<Array2<f64>> = experts.iter().map(|e| e.log_var.mapv(|v| (-v).exp())).collect();
    let mut total = precisions[0].clone();
    for p in &precisions[1..] {
        total += p;
    }
    let weights: Vec<Array2<f64>> = precisions.iter().map(|p| p / &total).collect();
    let mut mu = Array2::zeros(total.dim());
    for (w, e) in weights.iter().zip(experts) {
        mu += &(w * &e.mu);
    }
    let log_var = total.mapv(|p| clamp_lv(-p.ln()));
    (PosteriorBatch { mu, log_var }, PoeCache { weights })
}

/// Maps gradients on the fused posterior back to each expert.
fn poe_batch_backward(
    experts: &[&PosteriorBatch],
    fused: &PosteriorBatch,
    cache: &PoeCache,
    g_mu: &Array2<f64>,
    g_lv: &Array2<f64>,
) -> Vec<(Array2<f64>, Array2<f64>)> {
    let mut g_lv = g_lv.clone();
    fused.mask_log_var_grad(&mut g_lv);
    experts
        .iter()
        .zip(&cache.weights)
        .map(|(e, w)| {
            let gm = w * g_mu;
            let gl = w * &(g_mu * &(&fused.mu - &e.mu) + &g_lv);
            (gm, gl)
        })
        .collect()
}

/// A decoder that can be driven by the objective.
pub trait LatentDecoder {
    /// Decodes `z` `(N, D)` into images `(N, C, H, W)` without recording.
    fn decode(&mut self, z: &Array2<f64>) -> Array4<f64>;

    /// Decodes `z`, asks `grad` for the loss gradient with respect to the
    /// output, backpropagates it into the decoder's parameters and returns
    /// the output and the gradient with respect to `z`.
    fn decode_backward(&mut self, z: &Array2<f64>, grad: &mut dyn FnMut(&Array4<f64>) -> Array4<f64>) -> (Array4<f64>, Array2<f64>);
}

pub struct ObjectiveOutput {
    /// Terms averaged over the batch.
    pub loss: LossBreakdown,
    /// Gradient of the batch-mean loss with respect to each unimodal
    /// posterior's mean and clamped log-variance.
    pub grads: BTreeMap<Modality, (Array2<f64>, Array2<f64>)>,
}

/// Batch-mean objective over `subsets`, with gradients.
///
/// Noise is drawn per subset in the order given, one `(N, D)` block each.
pub fn mopoe_objective(
    unimodal: &BTreeMap<Modality, PosteriorBatch>,
    subsets: &[ModalitySet],
    decoder: &mut dyn LatentDecoder,
    target: &Array4<f64>,
    beta: f64,
    noise: &mut dyn NoiseSource,
) -> ObjectiveOutput {
    assert!(!subsets.is_empty(), "objective needs at least one subset");
    let first = unimodal.values().next().expect("at least one posterior");
    let (n, d) = first.mu.dim();
    let scale = 1.0 / (n as f64 * subsets.len() as f64);
    let mut grads: BTreeMap<Modality, (Array2<f64>, Array2<f64>)> = unimodal.keys().map(|m| (*m, (Array2::zeros((n, d)), Array2::zeros((n, d))))).collect();
    let mut terms = BTreeMap::new();

    for &subset in subsets {
        let mods = subset.modalities();
        let experts: Vec<&PosteriorBatch> = mods.iter().map(|m| &unimodal[m]).collect();
        let (fused, cache) = if experts.len() == 1 {
            (experts[0].clone(), None)
        } else {
            let (f, c) = poe_batch(&experts);
            (f, Some(c))
        };
        let eps = Array2::from_shape_vec((n, d), noise.sample(n * d)).expect("noise block");
        let z = fused.sample(&eps);
        let mut recon_sum = 0.0;
        let (_, gz) = decoder.decode_backward(&z, &mut |out: &Array4<f64>| {
            let diff = out - target;
            recon_sum = 0.5 * diff.iter().map(|v| v * v).sum::<f64>();
            diff * scale
        });
        let kl = fused.kl();
        terms.insert(subset, SubsetTerms { recon_nll: recon_sum / n as f64, kl: kl.mean().unwrap_or(0.0) });

        let std = fused.log_var.mapv(|v| (0.5 * v).exp());
        let g_mu = &gz + &(&fused.mu * (beta * scale));
        let g_lv = &gz * &(0.5 * &std * &eps) + &(fused.log_var.mapv(|v| 0.5 * (v.exp() - 1.0)) * (beta * scale));
        match cache {
            None => {
                let g = grads.get_mut(&mods[0]).expect("present modality");
                g.0 += &g_mu;
                g.1 += &g_lv;
            }
            Some(c) => {
                for (m, (gm, gl)) in mods.iter().zip(poe_batch_backward(&experts, &fused, &c, &g_mu, &g_lv)) {
                    let g = grads.get_mut(m).expect("present modality");
                    g.0 += &gm;
                    g.1 += &gl;
                }
            }
        }
    }
    for (m, g) in grads.iter_mut() {
        unimodal[m].mask_log_var_grad(&mut g.1);
    }
    ObjectiveOutput { loss: LossBreakdown::from_terms(terms, beta), grads }
}

/// Per-sample sum of squared errors over `(N, C, H, W)`.
pub fn per_sample_sse(a: &Array4<f64>, b: &Array4<f64>) -> Array1<f64> {
    let diff = a - b;
    diff.mapv(|v| v * v).sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn gp(mu: &[f64], lv: &[f64]) -> GaussianPosterior {
        GaussianPosterior::new(mu.to_vec(), lv.to_vec()).unwrap()
    }

    #[test]
    fn clamps_log_var_and_rejects_non_finite() {
        let q = gp(&[0.0, 0.0], &[-20.0, 30.0]);
        assert_eq!(q.log_var(), &[-10.0, 10.0]);
        assert!(GaussianPosterior::new(vec![f64::NAN], vec![0.0]).is_err());
        assert!(GaussianPosterior::new(vec![0.0], vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_standard_normal(&GaussianPosterior::standard(7)), 0.0);
        assert!((kl_standard_normal(&gp(&[1.0], &[0.0])) - 0.5).abs() < 1e-15);
        let q = gp(&[0.0], &[2f64.ln()]);
        let closed = kl_standard_normal(&q);
        assert!((closed - 0.5 * (2.0 - 2f64.ln() - 1.0)).abs() < 1e-12);
        // Monte-Carlo oracle E_q[log q(z) - log p(z)]
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let s2: f64 = 2.0;
        let mut acc = 0.0;
        for _ in 0..n {
            let e: f64 = StandardNormal.sample(&mut rng);
            let z = s2.sqrt() * e;
            let log_q = -0.5 * (z * z / s2) - 0.5 * s2.ln();
            let log_p = -0.5 * z * z;
            acc += log_q - log_p;
        }
        assert!((acc / n as f64 - closed).abs() < 1e-2);
    }

    #[test]
    fn reparameterize_examples() {
        let q = gp(&[0.3, -1.0], &[0.4, 1.0]);
        assert_eq!(reparameterize(&q, &[0.0, 0.0]).z, vec![0.3, -1.0]);
        let q = gp(&[0.0], &[4f64.ln()]);
        assert!((reparameterize(&q, &[1.5]).z[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn reparameterize_moments() {
        let q = gp(&[0.7], &[0.5]);
        let mut noise = SeededNoise::new(3);
        let n = 100_000;
        let zs: Vec<f64> = (0..n).map(|_| reparameterize(&q, &noise.sample(1)).z[0]).collect();
        let mean = zs.iter().sum::<f64>() / n as f64;
        let var = zs.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let s2 = 0.5f64.exp();
        assert!((mean - 0.7).abs() < 3.0 * (s2 / n as f64).sqrt());
        assert!((var - s2).abs() < 3.0 * s2 * (2.0 / (n - 1) as f64).sqrt());
    }

    /// Multiplies densities on a grid, renormalizes and returns the moments.
    fn numeric_product(experts: &[(f64, f64)]) -> (f64, f64) {
        let (lo, hi, steps) = (-12.0, 12.0, 200_001);
        let dx = (hi - lo) / (steps - 1) as f64;
        let (mut z0, mut z1, mut z2) = (0.0, 0.0, 0.0);
        for i in 0..steps {
            let x = lo + i as f64 * dx;
            let dens: f64 = experts.iter().map(|(m, v)| (-(x - m).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()).product();
            z0 += dens;
            z1 += dens * x;
            z2 += dens * x * x;
        }
        let mean = z1 / z0;
        (mean, z2 / z0 - mean * mean)
    }

    #[test]
    fn poe_examples() {
        let q = gp(&[0.2, 0.1], &[0.3, -0.4]);
        assert_eq!(poe_combine(&[&q]), q);
        for (a, b) in [((0.0, 1.0), (0.0, 1.0)), ((1.0, 1.0), (-1.0, 1.0)), ((0.5, 0.3), (-2.0, 2.5))] {
            let p = poe_combine(&[&gp(&[a.0], &[f64::ln(a.1)]), &gp(&[b.0], &[f64::ln(b.1)])]);
            let (m, v) = numeric_product(&[a, b]);
            assert!((p.mu()[0] - m).abs() < 1e-6, "{} vs {m}", p.mu()[0]);
            assert!((p.var()[0] - v).abs() < 1e-6, "{} vs {v}", p.var()[0]);
        }
        let p = poe_combine(&[&gp(&[1.0], &[0.0]), &gp(&[-1.0], &[0.0])]);
        assert!(p.mu()[0].abs() < 1e-15 && (p.var()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn powerset_examples() {
        let qi = gp(&[1.0, 2.0], &[0.1, 0.2]);
        let qw = gp(&[-1.0, 0.5], &[0.3, -0.2]);
        let map = BTreeMap::from([(Modality::Image, qi.clone()), (Modality::Wifi, qw.clone())]);
        let all = powerset_posteriors(&map, ModalitySet::IW);
        assert_eq!(all.iter().map(|s| s.subset).collect::<Vec<_>>(), vec![ModalitySet::I, ModalitySet::W, ModalitySet::IW]);
        assert_eq!(all[2].posterior, poe_combine(&[&qi, &qw]));
        let w = powerset_posteriors(&map, ModalitySet::W);
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].posterior, qw);
    }

    #[test]
    fn recon_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Array3::from_shape_fn((3, 128, 128), |_| rng.random_range(-2.0..2.0));
        assert_eq!(recon_nll(&a, &a), 0.0);
        let mut b = a.clone();
        b[[1, 7, 9]] += 1.0;
        assert!((recon_nll(&b, &a) - 0.5).abs() < 1e-12);
        let c = Array3::from_shape_fn((3, 128, 128), |_| rng.random_range(-2.0..2.0));
        let mut sse = 0.0;
        for ch in 0..3 {
            for y in 0..128 {
                for x in 0..128 {
                    sse += (a[[ch, y, x]] - c[[ch, y, x]]).powi(2);
                }
            }
        }
        let mse = sse / (3.0 * 128.0 * 128.0);
        assert!((recon_nll(&a, &c) - 0.5 * mse * 3.0 * 128.0 * 128.0).abs() < 1e-8);
    }

    #[test]
    fn mopoe_loss_examples() {
        let target = Array3::from_elem((1, 2, 2), 0.5);
        let qi = gp(&[0.5, -0.5], &[0.2, 0.1]);
        let qw = gp(&[1.0, 0.0], &[-0.3, 0.4]);
        let decode = |z: &[f64]| Array3::from_elem((1, 2, 2), z[0]);

        let single = [SubsetPosterior { subset: ModalitySet::W, posterior: qw.clone() }];
        let l = mopoe_loss(&single, decode, &target, 0.0, &mut FixedNoise::new(vec![vec![0.3, -0.2]]));
        let z = reparameterize(&qw, &[0.3, -0.2]);
        assert!((l.total - recon_nll(&decode(&z.z), &target)).abs() < 1e-15);

        let map = BTreeMap::from([(Modality::Image, qi), (Modality::Wifi, qw)]);
        let subs = powerset_posteriors(&map, ModalitySet::IW);
        let perfect = mopoe_loss(&subs, |_| target.clone(), &target, 1.0, &mut SeededNoise::new(1));
        let mean_kl = subs.iter().map(|s| kl_standard_normal(&s.posterior)).sum::<f64>() / 3.0;
        assert!((perfect.total - mean_kl).abs() < 1e-12);

        let draws = vec![vec![0.1, 0.2], vec![-0.4, 1.0], vec![0.9, -0.7]];
        let l = mopoe_loss(&subs, decode, &target, 2.5, &mut FixedNoise::new(draws.clone()));
        let mut hand = 0.0;
        for (s, e) in subs.iter().zip(&draws) {
            let z = reparameterize(&s.posterior, e);
            hand += recon_nll(&decode(&z.z), &target) + 2.5 * kl_standard_normal(&s.posterior);
            let t = l.per_subset[&s.subset];
            assert!((t.recon_nll + 2.5 * t.kl - (recon_nll(&decode(&z.z), &target) + 2.5 * kl_standard_normal(&s.posterior))).abs() < 1e-12);
        }
        assert!((l.total - hand / 3.0).abs() < 1e-9);
    }

    /// `x̂ = tanh(A z + b)` reshaped to `(N, 1, 2, 2)`; frozen.
    struct TinyDecoder {
        a: Array2<f64>,
        b: Array1<f64>,
    }

    impl LatentDecoder for TinyDecoder {
        fn decode(&mut self, z: &Array2<f64>) -> Array4<f64> {
            let pre = z.dot(&self.a.t()) + &self.b;
            pre.mapv(f64::tanh).into_shape_with_order((z.nrows(), 1, 2, 2)).unwrap()
        }

        fn decode_backward(&mut self, z: &Array2<f64>, grad: &mut dyn FnMut(&Array4<f64>) -> Array4<f64>) -> (Array4<f64>, Array2<f64>) {
            let out = self.decode(z);
            let g = grad(&out);
            let n = z.nrows();
            let y = out.clone().into_shape_with_order((n, 4)).unwrap();
            let g = g.into_shape_with_order((n, 4)).unwrap();
            let gpre = g * y.mapv(|v| 1.0 - v * v);
            (out, gpre.dot(&self.a))
        }
    }

    #[test]
    fn objective_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (n, d) = (3, 3);
        let mut dec =
            TinyDecoder { a: Array2::from_shape_fn((4, d), |_| rng.random_range(-0.8..0.8)), b: Array1::from_shape_fn(4, |_| rng.random_range(-0.2..0.2)) };
        let target = Array4::from_shape_fn((n, 1, 2, 2), |_| rng.random_range(-0.5..0.5));
        let mk = |rng: &mut ChaCha8Rng| {
            PosteriorBatch::from_raw(
                Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0)),
                Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0)),
            )
        };
        let post = BTreeMap::from([(Modality::Image, mk(&mut rng)), (Modality::Wifi, mk(&mut rng))]);
        let subsets = ModalitySet::IW.subsets();
        let beta = 0.7;
        let eval =
            |post: &BTreeMap<Modality, PosteriorBatch>, dec: &mut TinyDecoder| mopoe_objective(post, &subsets, dec, &target, beta, &mut SeededNoise::new(4));
        let out = eval(&post, &mut dec);
        let h = 1e-4;
        for m in [Modality::Image, Modality::Wifi] {
            for which in 0..2 {
                for i in 0..n {
                    for j in 0..d {
                        let bump = |delta: f64| {
                            let mut p = post.clone();
                            let e = p.get_mut(&m).unwrap();
                            if which == 0 {
                                e.mu[[i, j]] += delta
                            } else {
                                e.log_var[[i, j]] += delta
                            }
                            p
                        };
                        let fd = (eval(&bump(h), &mut dec).loss.total - eval(&bump(-h), &mut dec).loss.total) / (2.0 * h);
                        let an = if which == 0 { out.grads[&m].0[[i, j]] } else { out.grads[&m].1[[i, j]] };
                        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                        assert!(rel < 1e-4 || (fd - an).abs() < 1e-9, "{m:?} {which} [{i},{j}]: fd {fd} vs {an}");
                    }
                }
            }
        }
    }

    #[test]
    fn clamped_entries_get_no_gradient() {
        let p = PosteriorBatch::from_raw(Array2::zeros((1, 2)), Array2::from_shape_vec((1, 2), vec![-50.0, 0.3]).unwrap());
        let mut g = Array2::ones((1, 2));
        p.mask_log_var_grad(&mut g);
        assert_eq!(g, Array2::from_shape_vec((1, 2), vec![0.0, 1.0]).unwrap());
    }

    #[test]
    fn batch_matches_single_sample_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mk = |rng: &mut ChaCha8Rng| {
            PosteriorBatch::from_raw(
                Array2::from_shape_fn((2, 3), |_| rng.random_range(-1.0..1.0)),
                Array2::from_shape_fn((2, 3), |_| rng.random_range(-1.0..1.0)),
            )
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        let (f, _) = poe_batch(&[&a, &b]);
        for i in 0..2 {
            let single = poe_combine(&[&a.row(i), &b.row(i)]);
            let row = f.row(i);
            for j in 0..3 {
                assert!((row.mu()[j] - single.mu()[j]).abs() < 1e-14);
                assert!((row.log_var()[j] - single.log_var()[j]).abs() < 1e-14);
            }
            assert!((f.kl()[i] - kl_standard_normal(&f.row(i))).abs() < 1e-14);
        }
    }

    fn arb_post(d: usize) -> impl Strategy<Value = GaussianPosterior> {
        (prop::collection::vec(-5.0..5.0f64, d), prop::collection::vec(-9.0..9.0f64, d)).prop_map(|(m, l)| GaussianPosterior::new(m, l).unwrap())
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(q in arb_post(6)) {
            prop_assert!(kl_standard_normal(&q) >= 0.0);
        }

        #[test]
        fn poe_variance_dominance(a in arb_post(4), b in arb_post(4), c in arb_post(4)) {
            let p = poe_combine(&[&a, &b, &c]);
            for i in 0..4 {
                let min = a.var()[i].min(b.var()[i]).min(c.var()[i]);
                prop_assert!(p.var()[i] <= min * (1.0 + 1e-12));
            }
        }

        #[test]
        fn poe_broad_expert_is_absorbed(a in arb_post(4), b in arb_post(4)) {
            let broad = GaussianPosterior { mu: vec![3.0; 4], log_var: vec![1e12f64.ln(); 4] };
            let p = poe_combine(&[&a, &b]);
            let q = poe_combine(&[&a, &b, &broad]);
            for i in 0..4 {
                let scale = p.mu()[i].abs().max(p.var()[i].sqrt());
                prop_assert!((p.mu()[i] - q.mu()[i]).abs() <= 1e-6 * scale);
                prop_assert!((p.var()[i] - q.var()[i]).abs() <= 1e-6 * p.var()[i]);
            }
        }

        #[test]
        fn poe_commutative_and_associative(a in arb_post(3), b in arb_post(3), c in arb_post(3)) {
            let flat = poe_combine(&[&a, &b, &c]);
            let perm = poe_combine(&[&c, &a, &b]);
            let ab = poe_combine(&[&a, &b]);
            let grouped = poe_combine(&[&ab, &c]);
            for other in [&perm, &grouped] {
                for i in 0..3 {
                    prop_assert!((flat.mu()[i] - other.mu()[i]).abs() <= 1e-9 * (1.0 + flat.mu()[i].abs()));
                    prop_assert!((flat.log_var()[i] - other.log_var()[i]).abs() <= 1e-9);
                }
            }
        }
    }
}
