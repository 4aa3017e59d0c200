//! Seeded shuffling into minibatches, with optional inverse-frequency
//! sample weights for imbalanced classes.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::data::ClassId;
use crate::error::{GzslError, Result};

/// One minibatch: indices into the caller's sample arrays, plus per-sample
/// loss weights when class weighting is on.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub weights: Option<Vec<f64>>,
}

/// Per-sample weights proportional to the inverse frequency of the sample's
/// class, normalized so the mean weight over all samples is 1.
pub fn inverse_frequency_weights(labels: &[ClassId]) -> Vec<f64> {
    let mut counts: BTreeMap<ClassId, usize> = BTreeMap::new();
    for &label in labels {
        *counts.entry(label).or_insert(0) += 1;
    }
    let distinct = counts.len() as f64;
    let n = labels.len() as f64;
    // raw weight 1/count_c scaled by n / C gives mean 1 over samples
    labels
        .iter()
        .map(|label| n / (distinct * counts[label] as f64))
        .collect()
}

/// Shuffles all samples with a seeded RNG and cuts them into batches; the
/// final short batch is emitted. Every sample appears exactly once.
pub fn make_batches(
    labels: &[ClassId],
    batch_size: usize,
    seed: u64,
    class_weights: bool,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(GzslError::arg("batch size must be at least 1"));
    }
    let weights = class_weights.then(|| inverse_frequency_weights(labels));
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    Ok(order
        .chunks(batch_size)
        .map(|chunk| Batch {
            indices: chunk.to_vec(),
            weights: weights
                .as_ref()
                .map(|w| chunk.iter().map(|&i| w[i]).collect()),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn batch_sizes_follow_the_remainder_rule() {
        let labels = vec![1; 10];
        let batches = make_batches(&labels, 4, 0, false).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.indices.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn same_seed_gives_identical_order() {
        let labels: Vec<ClassId> = (0..50).map(|i| (i % 3) as ClassId).collect();
        let a = make_batches(&labels, 7, 123, false).unwrap();
        let b = make_batches(&labels, 7, 123, false).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.indices, y.indices);
        }
        let c = make_batches(&labels, 7, 124, false).unwrap();
        assert_ne!(
            a.iter().flat_map(|b| b.indices.clone()).collect::<Vec<_>>(),
            c.iter().flat_map(|b| b.indices.clone()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn weight_ratio_matches_inverse_counts() {
        // wall 120298, cobot 16159, human 25137
        let mut labels = Vec::new();
        labels.extend(std::iter::repeat_n(2u32, 120_298));
        labels.extend(std::iter::repeat_n(3u32, 16_159));
        labels.extend(std::iter::repeat_n(4u32, 25_137));
        let w = inverse_frequency_weights(&labels);
        let wall = w[0];
        let cobot = w[120_298];
        assert!((wall / cobot - 16_159.0 / 120_298.0).abs() < 1e-12);
        assert!((wall / cobot - 0.1343).abs() < 1e-4);
        let mean: f64 = w.iter().sum::<f64>() / w.len() as f64;
        assert!((mean - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_batch_size_is_rejected() {
        assert!(make_batches(&[1, 2], 0, 0, false).is_err());
    }

    proptest! {
        #[test]
        fn every_sample_appears_exactly_once(
            n in 1usize..200,
            batch_size in 1usize..32,
            seed in 0u64..1000,
        ) {
            let labels: Vec<ClassId> = (0..n).map(|i| (i % 4) as ClassId).collect();
            let batches = make_batches(&labels, batch_size, seed, true).unwrap();
            let mut hit = vec![0usize; n];
            for b in &batches {
                prop_assert!(b.indices.len() <= batch_size);
                for &i in &b.indices {
                    hit[i] += 1;
                }
            }
            prop_assert!(hit.iter().all(|&h| h == 1));
        }
    }
}
