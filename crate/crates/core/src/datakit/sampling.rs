use rand::seq::index;
use rand::Rng;

use super::{AugmentationPolicy, DataError, Image, ImageSample, SplitData};

/// `L` originals followed by `L * Q` augmented views.
///
/// Views are stored origin-major: view `i * Q + q` is the `q`-th augmentation
/// of original `i`. Class labels are deliberately absent.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainBatch {
    pub originals: Vec<Image>,
    pub views: Vec<Image>,
    pub origin_index: Vec<usize>,
    pub source_ids: Vec<u64>,
    pub views_per_original: usize,
}

impl PretrainBatch {
    /// Assembles a batch from originals and an origin-major view list.
    pub fn from_parts(originals: Vec<Image>, views: Vec<Image>, views_per_original: usize, source_ids: Vec<u64>) -> Self {
        assert!(views_per_original > 0, "at least one view per original");
        assert_eq!(views.len(), originals.len() * views_per_original);
        assert_eq!(source_ids.len(), originals.len());
        let origin_index = (0..views.len()).map(|v| v / views_per_original).collect();
        Self {
            originals,
            views,
            origin_index,
            source_ids,
            views_per_original,
        }
    }

    pub fn num_originals(&self) -> usize {
        self.originals.len()
    }

    /// `B = (Q + 1) L`.
    pub fn len(&self) -> usize {
        self.originals.len() + self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.originals.is_empty()
    }

    /// Images in embedding row order.
    pub fn images(&self) -> Vec<&Image> {
        self.originals.iter().chain(self.views.iter()).collect()
    }

    /// Row of view `(i, q)` in the embedding matrix.
    pub fn view_row(&self, original: usize, q: usize) -> usize {
        self.originals.len() + original * self.views_per_original + q
    }
}

pub fn sample_pretrain_batch<R: Rng + ?Sized>(
    samples: &[ImageSample],
    originals: usize,
    views_per_original: usize,
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> Result<PretrainBatch, DataError> {
    if views_per_original == 0 {
        return Err(DataError::NoViews);
    }
    if originals == 0 {
        return Err(DataError::InvalidRequest("batch needs at least one original".into()));
    }
    if originals > samples.len() {
        return Err(DataError::PoolTooSmall {
            requested: originals,
            available: samples.len(),
        });
    }
    let picked = index::sample(rng, samples.len(), originals).into_vec();
    let mut origs = Vec::with_capacity(originals);
    let mut ids = Vec::with_capacity(originals);
    let mut views = Vec::with_capacity(originals * views_per_original);
    for &i in &picked {
        let img = &samples[i].image;
        for _ in 0..views_per_original {
            let t = policy.sample(img.shape(), rng);
            views.push(t.apply(img));
        }
        origs.push(img.clone());
        ids.push(samples[i].sample_id);
    }
    Ok(PretrainBatch::from_parts(origs, views, views_per_original, ids))
}

/// A member of an episode: index into the split plus its episode-local label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeItem {
    pub index: usize,
    pub sample_id: u64,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub queries_per_class: usize,
    /// Class-major: `k_shot` items of label 0, then label 1, ...
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
    /// Split-level class index behind each episode label.
    pub classes: Vec<usize>,
}

pub fn sample_episode<R: Rng + ?Sized>(
    split: &SplitData,
    n_way: usize,
    k_shot: usize,
    queries_per_class: usize,
    rng: &mut R,
) -> Result<Episode, DataError> {
    if n_way == 0 || k_shot == 0 || queries_per_class == 0 {
        return Err(DataError::InvalidRequest(format!(
            "n_way, k_shot and queries must be positive (got {n_way}, {k_shot}, {queries_per_class})"
        )));
    }
    let classes = split.classes();
    if classes.len() < n_way {
        return Err(DataError::TooFewClasses {
            needed: n_way,
            available: classes.len(),
        });
    }
    let per_class = k_shot + queries_per_class;
    let eligible: Vec<usize> = (0..classes.len()).filter(|&c| classes[c].len() >= per_class).collect();
    if eligible.len() < n_way {
        return Err(DataError::TooFewSamples {
            needed: per_class,
            available: eligible.len(),
            requested: n_way,
        });
    }
    let chosen: Vec<usize> = index::sample(rng, eligible.len(), n_way)
        .into_iter()
        .map(|i| eligible[i])
        .collect();

    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * queries_per_class);
    for (label, &class) in chosen.iter().enumerate() {
        let members = &classes[class];
        let picks = index::sample(rng, members.len(), per_class).into_vec();
        for (j, &p) in picks.iter().enumerate() {
            let idx = members[p];
            let item = EpisodeItem {
                index: idx,
                sample_id: split.samples[idx].sample_id,
                label,
            };
            if j < k_shot {
                support.push(item);
            } else {
                query.push(item);
            }
        }
    }
    Ok(Episode {
        n_way,
        k_shot,
        queries_per_class,
        support,
        query,
        classes: chosen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::{ImageShape, Split};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_split(classes: usize, per_class: usize) -> SplitData {
        let shape = ImageShape::new(1, 4, 4);
        let mut samples = Vec::new();
        for c in 0..classes {
            for k in 0..per_class {
                let v = ((c * per_class + k) % 17) as f32 / 16.0;
                samples.push(ImageSample {
                    image: Image::filled(shape, v),
                    class_id: c,
                    sample_id: (c * per_class + k) as u64,
                });
            }
        }
        let names = (0..classes).map(|c| format!("c{c}")).collect();
        SplitData::from_samples(Split::Train, shape, names, samples)
    }

    #[test]
    fn batch_counts() {
        let split = toy_split(10, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_pretrain_batch(&split.samples, 2, 2, &AugmentationPolicy::omniglot(), &mut rng).unwrap();
        assert_eq!((b.originals.len(), b.views.len(), b.len()), (2, 4, 6));
        assert_eq!(b.origin_index, vec![0, 0, 1, 1]);
        let b = sample_pretrain_batch(&split.samples, 50, 3, &AugmentationPolicy::omniglot(), &mut rng).unwrap();
        assert_eq!(b.len(), 200);
        assert_eq!(b.view_row(1, 2), 50 + 5);
    }

    #[test]
    fn batch_errors() {
        let split = toy_split(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = AugmentationPolicy::omniglot();
        assert!(matches!(
            sample_pretrain_batch(&split.samples, 5, 1, &p, &mut rng),
            Err(DataError::PoolTooSmall { .. })
        ));
        assert!(matches!(
            sample_pretrain_batch(&split.samples, 2, 0, &p, &mut rng),
            Err(DataError::NoViews)
        ));
    }

    #[test]
    fn batch_is_seed_deterministic() {
        let split = toy_split(10, 5);
        let p = AugmentationPolicy::omniglot();
        let a = sample_pretrain_batch(&split.samples, 4, 3, &p, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_pretrain_batch(&split.samples, 4, 3, &p, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn episode_shapes_and_disjointness() {
        let split = toy_split(12, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for k in [1, 5] {
            let ep = sample_episode(&split, 5, k, 15, &mut rng).unwrap();
            assert_eq!(ep.support.len(), 5 * k);
            assert_eq!(ep.query.len(), 75);
            for label in 0..5 {
                assert_eq!(ep.support.iter().filter(|i| i.label == label).count(), k);
                assert_eq!(ep.query.iter().filter(|i| i.label == label).count(), 15);
            }
            let s: std::collections::HashSet<u64> = ep.support.iter().map(|i| i.sample_id).collect();
            assert!(ep.query.iter().all(|i| !s.contains(&i.sample_id)));
        }
    }

    #[test]
    fn episode_errors() {
        let split = toy_split(3, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(matches!(
            sample_episode(&split, 5, 1, 15, &mut rng),
            Err(DataError::TooFewClasses { .. })
        ));
        let split = toy_split(6, 10);
        assert!(matches!(
            sample_episode(&split, 5, 1, 15, &mut rng),
            Err(DataError::TooFewSamples { .. })
        ));
    }
}
