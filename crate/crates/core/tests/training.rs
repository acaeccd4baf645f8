use csi_mopoe::csi_ingest::Split;
use csi_mopoe::dataset_windows::{in_bounds_centers, Dataset};
use csi_mopoe::harness::{make_synthetic, SyntheticSpec};
use csi_mopoe::models::{ModelConfig, MopoeVae, Variant};
use csi_mopoe::nn::{Module, Param, Visitor};
use csi_mopoe::training::{train_one_run, train_protocol, TrainConfig};
use csi_mopoe::Error;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        latent_dim: 8,
        embed_width: 16,
        window_len: 11,
        frequencies: 2,
        conv_channels: vec![8, 16],
        image_size: 16,
        head_hidden: 32,
        ..ModelConfig::default()
    }
}

fn tiny_config(epochs: usize) -> TrainConfig {
    TrainConfig { batch_size: 16, epochs, runs: 1, seed: 7, model: tiny_model(), ..TrainConfig::default() }
}

fn dataset(n_packets: usize) -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec { n_packets, image_size: 16, ..SyntheticSpec::default() };
    let ds = make_synthetic(&spec, 5, dir.path()).unwrap();
    (dir, ds)
}

fn params(m: &mut MopoeVae) -> Vec<(String, Vec<u64>)> {
    struct Collect(Vec<(String, Vec<u64>)>);
    impl Visitor for Collect {
        fn param(&mut self, name: &str, p: &mut Param) {
            self.0.push((name.to_string(), p.value.iter().map(|v| v.to_bits()).collect()));
        }
    }
    let mut c = Collect(Vec::new());
    m.visit("", &mut c);
    c.0
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn same_seed_reproduces_loss_curves() {
    let (_d, ds) = dataset(300);
    let cfg = tiny_config(3);
    let a = train_one_run(&cfg, &ds, 0, 11, None).unwrap();
    let b = train_one_run(&cfg, &ds, 0, 11, None).unwrap();
    let c = train_one_run(&cfg, &ds, 0, 12, None).unwrap();
    assert_eq!(bits(&a.record.train_losses()), bits(&b.record.train_losses()));
    assert_eq!(bits(&a.record.val_losses()), bits(&b.record.val_losses()));
    assert_ne!(bits(&a.record.train_losses()), bits(&c.record.train_losses()));
}

#[test]
fn training_reduces_loss() {
    // 250 packets leave 200 training pairs
    let (_d, ds) = dataset(250);
    assert_eq!(ds.split_centers(Split::Train).len(), 200);
    let cfg = tiny_config(20);
    let run = train_one_run(&cfg, &ds, 0, 3, None).unwrap();
    let losses = run.record.train_losses();
    assert!(losses[19] < losses[0], "{losses:?}");
}

#[test]
fn beta_zero_memorizes_ten_samples() {
    let (_d, mut ds) = dataset(120);
    let l = 11;
    // ten training centers, the rest validation / test
    for p in ds.pairs.iter_mut() {
        p.split = match p.packet_index {
            i if (5..15).contains(&i) => Split::Train,
            i if i < 60 => Split::Val,
            _ => Split::Test,
        };
    }
    assert_eq!(in_bounds_centers(&ds, Split::Train, l).len(), 10);
    let cfg = TrainConfig { batch_size: 10, epochs: 400, beta: 0.0, lr: 3e-3, ..tiny_config(0) };
    let run = train_one_run(&cfg, &ds, 0, 1, None).unwrap();
    let first = run.record.epochs[0].train.mean_recon();
    let last = run.record.epochs.last().unwrap().train.mean_recon();
    assert!(last < 0.01 * first, "recon {first} -> {last}");
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let (_d, ds) = dataset(200);
    let cfg = TrainConfig { lr: 0.0, ..tiny_config(2) };
    let mut run = train_one_run(&cfg, &ds, 0, 21, None).unwrap();
    let mut fresh = MopoeVae::new(cfg.model.clone(), 21).unwrap();
    assert_eq!(params(&mut run.model.model), params(&mut fresh));
}

#[test]
fn non_finite_input_aborts_run_and_protocol() {
    let (_d, mut ds) = dataset(200);
    ds.amplitudes.column_mut(40).fill(f64::NAN);
    let cfg = TrainConfig { runs: 2, ..tiny_config(2) };
    assert!(matches!(train_one_run(&cfg, &ds, 0, 1, None), Err(Error::NonFinite { epoch: 0, .. })));
    assert!(matches!(train_protocol(&cfg, &ds, None), Err(Error::AllRunsAborted(2))));
}

#[test]
fn protocol_picks_lowest_validation_loss() {
    let (_d, ds) = dataset(200);
    let out = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { runs: 3, ..tiny_config(2) };
    let outcome = train_protocol(&cfg, &ds, Some(out.path())).unwrap();
    assert_eq!(outcome.runs.len(), 3);
    let best: Vec<f64> = outcome.runs.iter().map(|r| r.record.best_val_loss()).collect();
    let min = best.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(best[outcome.best], min);
    for (i, r) in outcome.runs.iter().enumerate() {
        assert_eq!(r.record.seed, cfg.seed + i as u64);
        let dir = out.path().join(format!("run_{i:02}"));
        let rows = std::fs::read_to_string(dir.join("metrics.csv")).unwrap().lines().count();
        assert_eq!(rows, 1 + cfg.epochs);
        assert!(dir.join("best.safetensors").is_file());
        let vals = r.record.val_losses();
        assert_eq!(vals[r.record.best_epoch], r.record.best_val_loss());
        assert!(vals.iter().all(|v| *v >= r.record.best_val_loss()));
    }
}

#[test]
fn logged_totals_are_recon_plus_weighted_kl() {
    let (_d, ds) = dataset(200);
    for v in Variant::ALL {
        let cfg = TrainConfig { beta: 2.5, model: tiny_model().with_variant(v), ..tiny_config(2) };
        let run = train_one_run(&cfg, &ds, 0, 4, None).unwrap();
        for e in &run.record.epochs {
            for l in [&e.train, &e.val] {
                assert_eq!(l.per_subset.len(), 3);
                let recomposed = l.mean_recon() + cfg.beta * l.mean_kl();
                assert!((l.total - recomposed).abs() <= 1e-6 * l.total.abs().max(1.0), "{} vs {recomposed}", l.total);
            }
        }
    }
}

#[test]
fn mismatched_image_size_is_a_config_error() {
    let (_d, ds) = dataset(200);
    let mut cfg = tiny_config(1);
    cfg.model.image_size = 32;
    assert!(matches!(train_one_run(&cfg, &ds, 0, 1, None), Err(Error::Config(_))));
}
