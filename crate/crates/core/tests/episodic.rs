use c3lr::datakit::{Image, ImageSample, ImageShape, Split, SplitData};
use c3lr::encoder::{Checkpoint, EmbeddingMatrix, Encoder, EncoderError, Mode};
use c3lr::episodic::{
    argmax, evaluate, evaluate_embeddings, finetune_head, init_head, mean_and_ci, nearest_prototype,
    prototypes_from_embeddings, EvalConfig, FinetuneConfig,
};
use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SHAPE: ImageShape = ImageShape::new(1, 2, 2);

/// Reads the class back from the pixel value and emits its one-hot vector.
struct OneHot {
    classes: usize,
}

impl Encoder for OneHot {
    type Scalar = f64;
    type Tape = ();

    fn kind(&self) -> &'static str {
        "onehot"
    }
    fn input_shape(&self) -> ImageShape {
        SHAPE
    }
    fn embed_dim(&self) -> usize {
        self.classes
    }
    fn params(&self) -> &[f64] {
        &[]
    }
    fn params_mut(&mut self) -> &mut [f64] {
        &mut []
    }
    fn forward(&self, images: &[&Image], _mode: Mode) -> Result<(EmbeddingMatrix, ()), EncoderError> {
        let mut e = Array2::zeros((images.len(), self.classes));
        for (r, img) in images.iter().enumerate() {
            let c = (img.pixels()[0] as f64 * (self.classes - 1) as f64).round() as usize;
            e[[r, c]] = 1.0;
        }
        Ok((e, ()))
    }
    fn backward(&self, _tape: &(), _grad: &EmbeddingMatrix) -> Vec<f64> {
        Vec::new()
    }
    fn commit(&mut self, _tape: &()) {}
    fn save_tensors(&self, _prefix: &str, _ckpt: &mut Checkpoint) {}
    fn load_tensors(&mut self, _prefix: &str, _ckpt: &Checkpoint) -> Result<(), EncoderError> {
        Ok(())
    }
}

fn labelled_split(classes: usize, per_class: usize) -> SplitData {
    let mut samples = Vec::new();
    for c in 0..classes {
        for j in 0..per_class {
            samples.push(ImageSample {
                image: Image::filled(SHAPE, c as f32 / (classes - 1) as f32),
                class_id: c,
                sample_id: (c * per_class + j) as u64,
            });
        }
    }
    let names = (0..classes).map(|c| format!("c{c}")).collect();
    SplitData::from_samples(Split::Test, SHAPE, names, samples)
}

fn small_config(seed: u64) -> EvalConfig {
    EvalConfig {
        episodes: 40,
        runs: 2,
        seed,
        ..Default::default()
    }
}

#[test]
fn one_shot_prototype_is_the_support_embedding() {
    let s = array![[0.3, -1.0], [4.0, 2.5]];
    let c = prototypes_from_embeddings(s.view(), &[1, 0], 2).unwrap();
    assert_eq!(c, array![[4.0, 2.5], [0.3, -1.0]]);
}

#[test]
fn prototypes_ignore_support_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = Array2::from_shape_fn((12, 5), |_| rng.random_range(-1.0..1.0));
    let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
    let base = prototypes_from_embeddings(s.view(), &labels, 3).unwrap();
    let perm = [7, 2, 9, 0, 11, 4, 1, 8, 3, 10, 5, 6];
    let sp = Array2::from_shape_fn((12, 5), |(r, c)| s[[perm[r], c]]);
    let lp: Vec<usize> = perm.iter().map(|&p| labels[p]).collect();
    let got = prototypes_from_embeddings(sp.view(), &lp, 3).unwrap();
    for (a, b) in base.iter().zip(got.iter()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn initialized_head_agrees_with_nearest_prototype() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let n = rng.random_range(2..=6);
        let e = rng.random_range(1..=8);
        let protos = Array2::from_shape_fn((n, e), |_| rng.random_range(-2.0..2.0));
        let z = ndarray::Array1::from_shape_fn(e, |_| rng.random_range(-2.0..2.0));
        let head = init_head(&protos);
        assert_eq!(head.predict(z.view()), nearest_prototype(&protos, z.view()));
    }
}

#[test]
fn argmax_prefers_lowest_index_on_ties() {
    assert_eq!(argmax(array![1.0, 3.0, 3.0, 0.0].view()), 1);
    assert_eq!(argmax(array![2.0, 2.0].view()), 0);
}

#[test]
fn finetuning_separates_a_separable_support_set() {
    // Identical prototypes give a head that cannot separate anything; training
    // on the support set must fix that.
    let support = array![[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9]];
    let labels = [0, 0, 1, 1];
    let head = init_head(&array![[0.5, 0.5], [0.5, 0.5]]);
    let cfg = FinetuneConfig {
        epochs: 50,
        lr: 0.1,
        ..Default::default()
    };
    let (tuned, history) = finetune_head(&head, support.view(), &labels, &cfg);
    let correct = support
        .outer_iter()
        .zip(labels)
        .filter(|(z, y)| tuned.predict(*z) == *y)
        .count();
    assert_eq!(correct, 4);
    assert_eq!(history.len(), 50);
    assert!(history.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{history:?}");
}

#[test]
fn finetuning_loss_does_not_increase_at_default_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let support = Array2::from_shape_fn((5, 16), |_| rng.random_range(0.0..1.0));
    let labels: Vec<usize> = (0..5).collect();
    let protos = prototypes_from_embeddings(support.view(), &labels, 5).unwrap();
    let (_, history) = finetune_head(&init_head(&protos), support.view(), &labels, &FinetuneConfig::default());
    assert_eq!(history.len(), 15);
    assert!(history.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{history:?}");
}

#[test]
fn oracle_encoder_is_perfect() {
    let split = labelled_split(12, 20);
    let report = evaluate(&OneHot { classes: 12 }, &split, &small_config(0)).unwrap();
    assert_eq!(report.mean, 1.0);
    assert_eq!(report.ci95, 0.0);
    assert_eq!(report.num_episodes(), 80);
}

#[test]
fn accuracies_lie_on_the_query_grid() {
    let split = labelled_split(10, 20);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let table = Array2::from_shape_fn((split.len(), 6), |_| rng.random_range(0.0..1.0));
    let cfg = small_config(4);
    let report = evaluate_embeddings(&table, &split, &cfg).unwrap();
    let grid = (cfg.n_way * cfg.queries_per_class) as f64;
    for run in &report.runs {
        for &a in &run.accuracies {
            assert!((a * grid - (a * grid).round()).abs() < 1e-9, "{a}");
            assert!((0.0..=1.0).contains(&a));
        }
    }
}

#[test]
fn evaluation_is_deterministic_per_seed() {
    let split = labelled_split(10, 20);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let table = Array2::from_shape_fn((split.len(), 6), |_| rng.random_range(0.0..1.0));
    let a = evaluate_embeddings(&table, &split, &small_config(7)).unwrap();
    let b = evaluate_embeddings(&table, &split, &small_config(7)).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let c = evaluate_embeddings(&table, &split, &small_config(8)).unwrap();
    assert_ne!(a.runs[0].accuracies, c.runs[0].accuracies);
    assert_eq!(a.runs[1].accuracies, c.runs[0].accuracies, "run r uses seed + r");
}

#[test]
fn interval_narrows_with_more_episodes() {
    let split = labelled_split(10, 20);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let table = Array2::from_shape_fn((split.len(), 4), |_| rng.random_range(0.0..1.0));
    let cfg = |runs| EvalConfig {
        episodes: 600,
        runs,
        ..Default::default()
    };
    let one = evaluate_embeddings(&table, &split, &cfg(1)).unwrap();
    let three = evaluate_embeddings(&table, &split, &cfg(3)).unwrap();
    assert!(one.ci95 > 0.0);
    assert!(three.ci95 < one.ci95);
}

#[test]
fn table_mismatch_is_rejected() {
    let split = labelled_split(6, 20);
    let table = Array2::zeros((3, 2));
    assert!(evaluate_embeddings(&table, &split, &small_config(0)).is_err());
}

proptest! {
    #[test]
    fn interval_matches_its_formula(values in prop::collection::vec(0.0f64..1.0, 2..200)) {
        let (m, s, c) = mean_and_ci(&values);
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        prop_assert!((m - mean).abs() < 1e-12);
        prop_assert!((s - var.sqrt()).abs() < 1e-12);
        prop_assert!((c - 1.96 * var.sqrt() / n.sqrt()).abs() < 1e-12);
    }
}
