use std::fs;
use std::path::Path;

use c3lr::cluster::ClusterConfig;
use c3lr::datakit::{AugmentationPolicy, Image, ImageSample, ImageShape, PretrainBatch, Split, SplitData};
use c3lr::encoder::{Checkpoint, EmbeddingMatrix, Encoder, EncoderConfig, EncoderError, Mode};
use c3lr::loss::{c3lr_loss, c3lr_loss_with_grad, BatchLayout};
use c3lr::pretrainer::{
    cluster_batch, latest_checkpoint, lr_at, pretrain, pretrain_step, PretrainConfig, PretrainError, TrainState,
    LOSS_HEADER,
};
use c3lr::rerank::RerankConfig;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOY_SHAPE: ImageShape = ImageShape::new(1, 1, 5);

/// `z = W x` with `W` 2 x 5, stored row-major.
#[derive(Debug, Clone)]
struct Linear {
    w: Vec<f64>,
}

impl Encoder for Linear {
    type Scalar = f64;
    type Tape = Vec<Vec<f64>>;

    fn kind(&self) -> &'static str {
        "linear"
    }
    fn input_shape(&self) -> ImageShape {
        TOY_SHAPE
    }
    fn embed_dim(&self) -> usize {
        2
    }
    fn params(&self) -> &[f64] {
        &self.w
    }
    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.w
    }
    fn forward(&self, images: &[&Image], _mode: Mode) -> Result<(EmbeddingMatrix, Self::Tape), EncoderError> {
        let xs: Vec<Vec<f64>> = images.iter().map(|i| i.pixels().iter().map(|&p| p as f64).collect()).collect();
        let z = Array2::from_shape_fn((xs.len(), 2), |(r, e)| (0..5).map(|d| self.w[e * 5 + d] * xs[r][d]).sum());
        Ok((z, xs))
    }
    fn backward(&self, xs: &Self::Tape, grad: &EmbeddingMatrix) -> Vec<f64> {
        let mut g = vec![0.0; 10];
        for (r, x) in xs.iter().enumerate() {
            for e in 0..2 {
                for d in 0..5 {
                    g[e * 5 + d] += grad[[r, e]] * x[d];
                }
            }
        }
        g
    }
    fn commit(&mut self, _tape: &Self::Tape) {}
    fn save_tensors(&self, _prefix: &str, _ckpt: &mut Checkpoint) {}
    fn load_tensors(&mut self, _prefix: &str, _ckpt: &Checkpoint) -> Result<(), EncoderError> {
        Ok(())
    }
}

fn toy_batch(rng: &mut ChaCha8Rng, l: usize, q: usize) -> PretrainBatch {
    let mut img = || Image::new(TOY_SHAPE, (0..5).map(|_| rng.random_range(0.0f32..1.0)).collect());
    let originals: Vec<Image> = (0..l).map(|_| img()).collect();
    let views: Vec<Image> = (0..l * q).map(|_| img()).collect();
    PretrainBatch::from_parts(originals, views, q, (0..l as u64).collect())
}

fn toy_config() -> PretrainConfig {
    PretrainConfig {
        originals: 4,
        views_per_original: 2,
        rerank: RerankConfig { k1: 4, k2: 2, lambda: 0.3 },
        lr: 0.01,
        ..Default::default()
    }
}

#[test]
fn step_equals_hand_computed_adam_update() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let cfg = toy_config();
    let w0: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut state = TrainState::new(Linear { w: w0.clone() });
    let (mut m, mut v, mut w) = (vec![0.0f64; 10], vec![0.0f64; 10], w0);
    for t in 1..=3 {
        let batch = toy_batch(&mut rng, 4, 2);
        // Expected update from the pieces.
        let (assign, _) = cluster_batch(&state.encoder, &batch, &cfg, state.step).unwrap();
        let (z, xs) = state.encoder.forward(&batch.images(), Mode::Train).unwrap();
        let (breakdown, gz) = c3lr_loss_with_grad(&z, BatchLayout::from(&batch), &assign).unwrap();
        let standalone = c3lr_loss(&z, BatchLayout::from(&batch), &assign).unwrap();
        let mut g = vec![0.0; 10];
        for r in 0..xs.len() {
            for e in 0..2 {
                for d in 0..5 {
                    g[e * 5 + d] += gz[[r, e]] * xs[r][d];
                }
            }
        }
        let lr = 0.01;
        for i in 0..10 {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            let mh = m[i] / (1.0 - 0.9f64.powi(t));
            let vh = v[i] / (1.0 - 0.999f64.powi(t));
            w[i] -= lr * mh / (vh.sqrt() + 1e-8);
        }

        let report = pretrain_step(&mut state, &batch, &cfg).unwrap();
        assert_eq!(report.step, t as u64);
        assert_eq!(report.lr, lr);
        assert_eq!(report.loss, breakdown);
        assert!((report.loss.total - standalone.total).abs() < 1e-15);
        for i in 0..10 {
            assert!((state.encoder.w[i] - w[i]).abs() <= 1e-12, "param {i}: {} vs {}", state.encoder.w[i], w[i]);
        }
    }
}

#[test]
fn steps_are_deterministic() {
    let cfg = toy_config();
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut state = TrainState::new(Linear {
            w: (0..10).map(|i| (i as f64 - 4.5) / 5.0).collect(),
        });
        let mut totals = Vec::new();
        for _ in 0..5 {
            let batch = toy_batch(&mut rng, 4, 2);
            totals.push(pretrain_step(&mut state, &batch, &cfg).unwrap().loss.total.to_bits());
        }
        (state.encoder.w.iter().map(|w| w.to_bits()).collect::<Vec<_>>(), totals)
    };
    assert_eq!(run(), run());
}

#[test]
fn non_finite_embeddings_abort_with_artifacts() {
    let cfg = toy_config();
    let mut w = vec![0.1; 10];
    w[3] = f64::NAN;
    let mut state = TrainState::new(Linear { w });
    let batch = toy_batch(&mut ChaCha8Rng::seed_from_u64(0), 4, 2);
    match pretrain_step(&mut state, &batch, &cfg) {
        Err(PretrainError::NonFinite { step, stage, artifacts, .. }) => {
            assert_eq!((step, stage), (0, "embedding"));
            assert_eq!(artifacts.embeddings.nrows(), 12);
        }
        other => panic!("expected a non-finite error, got {other:?}"),
    }
    assert_eq!(state.step, 0);
}

#[test]
fn artifacts_round_trip_through_npz() {
    let cfg = toy_config();
    let state = TrainState::new(Linear {
        w: (0..10).map(|i| i as f64 / 10.0).collect(),
    });
    let batch = toy_batch(&mut ChaCha8Rng::seed_from_u64(8), 4, 2);
    let (_, art) = cluster_batch(&state.encoder, &batch, &cfg, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.npz");
    art.write_npz(&path).unwrap();
    let mut npz = ndarray_npy::NpzReader::new(fs::File::open(&path).unwrap()).unwrap();
    let r: Array2<f64> = npz.by_name("R").unwrap();
    assert_eq!(&r, art.reranked.as_ref().unwrap());
}

proptest! {
    #[test]
    fn lr_is_non_increasing(a in 0u64..200_000, b in 0u64..200_000, decay in 0.05f64..=1.0, every in 1u64..50_000) {
        let cfg = PretrainConfig { lr_decay: decay, decay_every: every, ..Default::default() };
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(lr_at(hi, &cfg) <= lr_at(lo, &cfg));
    }
}

const IMG: ImageShape = ImageShape::new(1, 8, 8);

fn tiny_split(classes: usize, per_class: usize, seed: u64) -> SplitData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for c in 0..classes {
        let base: Vec<f32> = (0..IMG.len()).map(|_| rng.random_range(0.0..1.0)).collect();
        for j in 0..per_class {
            let px = base.iter().map(|&b| (b + rng.random_range(-0.1f32..0.1)).clamp(0.0, 1.0)).collect();
            samples.push(ImageSample {
                image: Image::new(IMG, px),
                class_id: c,
                sample_id: (c * per_class + j) as u64,
            });
        }
    }
    SplitData::from_samples(Split::Train, IMG, (0..classes).map(|c| format!("c{c}")).collect(), samples)
}

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        blocks: 3,
        channels: 4,
        ..EncoderConfig::conv4(IMG)
    }
}

fn tiny_run(total_steps: u64) -> PretrainConfig {
    PretrainConfig {
        originals: 6,
        views_per_original: 2,
        total_steps,
        rerank: RerankConfig { k1: 6, k2: 3, lambda: 0.3 },
        cluster: Some(ClusterConfig::for_views(2)),
        checkpoint_every: 2,
        val_every: 3,
        seed: 42,
        validation: c3lr::episodic::EvalConfig {
            episodes: 3,
            runs: 1,
            queries_per_class: 2,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn run(dir: &Path, total: u64, train: &SplitData, val: &SplitData) -> c3lr::pretrainer::PretrainOutcome {
    pretrain(
        &tiny_run(total),
        &tiny_encoder(),
        train,
        Some(val),
        &AugmentationPolicy::omniglot(),
        dir,
    )
    .unwrap()
}

fn param_bits(o: &c3lr::pretrainer::PretrainOutcome) -> Vec<u32> {
    o.state.encoder.params().iter().map(|p| p.to_bits()).collect()
}

#[test]
fn zero_steps_writes_the_initial_checkpoint_and_an_empty_log() {
    let (train, val) = (tiny_split(8, 6, 1), tiny_split(6, 4, 2));
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), 0, &train, &val);
    assert_eq!(out.state.step, 0);
    assert!(out.final_checkpoint.is_file());
    assert_eq!(fs::read_to_string(dir.path().join("loss.csv")).unwrap(), format!("{LOSS_HEADER}\n"));
    let ckpt = Checkpoint::load(&out.final_checkpoint).unwrap();
    assert_eq!(ckpt.meta["step"], 0);
}

#[test]
fn log_rows_are_monotone_and_finite() {
    let (train, val) = (tiny_split(8, 6, 1), tiny_split(6, 4, 2));
    let dir = tempfile::tempdir().unwrap();
    run(dir.path(), 7, &train, &val);
    let text = fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(LOSS_HEADER));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 7);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[0], (i + 1) as f64);
        assert!(r.iter().all(|v| v.is_finite()));
        assert!((r[4] - (r[2] + r[3])).abs() <= 1e-12 * r[4].abs().max(1.0));
        assert!((0.0..=1.0).contains(&r[6]));
    }
    assert!(rows.windows(2).all(|w| w[1][1] <= w[0][1]));
    let val_rows = fs::read_to_string(dir.path().join("val.csv")).unwrap();
    assert_eq!(val_rows.lines().count(), 1 + 2);
    let timing = fs::read_to_string(dir.path().join("timing.csv")).unwrap();
    assert_eq!(timing.lines().count(), 8);
    let (step, _) = latest_checkpoint(&dir.path().join("checkpoints")).unwrap().unwrap();
    assert_eq!(step, 7);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (train, val) = (tiny_split(8, 6, 1), tiny_split(6, 4, 2));
    let whole = tempfile::tempdir().unwrap();
    let a = run(whole.path(), 6, &train, &val);

    let parts = tempfile::tempdir().unwrap();
    run(parts.path(), 5, &train, &val);
    // Simulate a kill after step 5: no final checkpoint, a torn log line.
    fs::remove_file(parts.path().join("checkpoints/final.ckpt")).unwrap();
    let mut log = fs::read_to_string(parts.path().join("loss.csv")).unwrap();
    log.push_str("6,0.001,1.2");
    fs::write(parts.path().join("loss.csv"), log).unwrap();
    let b = run(parts.path(), 6, &train, &val);
    assert_eq!(b.resumed_from, Some(4));

    assert_eq!(param_bits(&a), param_bits(&b));
    assert_eq!(a.state.adam, b.state.adam);
    for f in ["loss.csv", "val.csv"] {
        assert_eq!(
            fs::read(whole.path().join(f)).unwrap(),
            fs::read(parts.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let stats = |o: &c3lr::pretrainer::PretrainOutcome| -> Vec<u32> {
        o.state
            .encoder
            .running_stats()
            .flat_map(|(m, v)| m.iter().chain(v).map(|x| x.to_bits()).collect::<Vec<_>>())
            .collect()
    };
    assert_eq!(stats(&a), stats(&b));
}

#[test]
fn checkpoint_restores_state_bit_exactly() {
    let (train, val) = (tiny_split(8, 6, 1), tiny_split(6, 4, 2));
    let dir = tempfile::tempdir().unwrap();
    let a = run(dir.path(), 3, &train, &val);
    let ckpt = Checkpoint::load(&a.final_checkpoint).unwrap();
    let restored = c3lr::pretrainer::load_conv4_state(&ckpt).unwrap();
    assert_eq!(restored.step, 3);
    assert_eq!(restored.adam, a.state.adam);
    assert_eq!(
        restored.encoder.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>(),
        param_bits(&a)
    );
    assert_eq!(
        Checkpoint::load(&a.final_checkpoint).unwrap().to_bytes(),
        restored.to_checkpoint(&tiny_run(3)).to_bytes()
    );
}

#[test]
fn mismatched_encoder_is_rejected_on_resume() {
    let (train, val) = (tiny_split(8, 6, 1), tiny_split(6, 4, 2));
    let dir = tempfile::tempdir().unwrap();
    run(dir.path(), 1, &train, &val);
    let other = EncoderConfig {
        channels: 3,
        ..tiny_encoder()
    };
    let err = pretrain(&tiny_run(2), &other, &train, None, &AugmentationPolicy::omniglot(), dir.path()).unwrap_err();
    assert!(matches!(err, PretrainError::Config(_) | PretrainError::Encoder(_)), "{err}");
}
