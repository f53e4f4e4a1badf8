//! Class-balanced resampling and pooled batch construction.
//!
//! Class imbalance is combatted by resampling with replacement: each draw
//! picks a class uniformly among classes that are present, then an example
//! uniformly within that class. Batches pool a fixed number of draws from
//! each source domain's stream.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Batch, DomainDataset};
use crate::error::{Error, Result};
use crate::rng::{derive_rng, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResampleMode {
    /// Uniform over present classes, then uniform within the class.
    #[default]
    UniformClass,
    /// Weighted over the pooled examples with weight `1 / count(class)`.
    InverseFrequency,
}

/// Infinite, seeded stream of example indices into one dataset.
#[derive(Debug, Clone)]
pub struct BalancedStream {
    per_class: Vec<Vec<usize>>,
    present: Vec<usize>,
    mode: ResampleMode,
    cumulative: Vec<f64>,
    rng: ChaCha8Rng,
}

impl BalancedStream {
    pub fn new(dataset: &DomainDataset, mode: ResampleMode, seed: u64) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let num_classes = dataset.class_counts.len();
        let mut per_class = vec![Vec::new(); num_classes];
        for (i, ex) in dataset.examples.iter().enumerate() {
            per_class[ex.label].push(i);
        }
        let present: Vec<usize> = (0..num_classes)
            .filter(|&c| !per_class[c].is_empty())
            .collect();
        // inverse-frequency weights over examples, as a cumulative table
        let mut cumulative = Vec::with_capacity(dataset.len());
        let mut acc = 0.0;
        for ex in &dataset.examples {
            acc += 1.0 / dataset.class_counts[ex.label] as f64;
            cumulative.push(acc);
        }
        Ok(Self {
            per_class,
            present,
            mode,
            cumulative,
            rng: derive_rng(&[seed, tag("stream"), dataset.domain_id as u64]),
        })
    }

    /// Next example index.
    pub fn next_index(&mut self) -> usize {
        match self.mode {
            ResampleMode::UniformClass => {
                let class = self.present[self.rng.random_range(0..self.present.len())];
                let within = &self.per_class[class];
                within[self.rng.random_range(0..within.len())]
            }
            ResampleMode::InverseFrequency => {
                let total = *self.cumulative.last().unwrap();
                let u: f64 = self.rng.random_range(0.0..total);
                self.cumulative.partition_point(|&c| c <= u)
            }
        }
    }
}

/// Draw `per_domain` examples from each source stream (in stream order) and
/// stack them into one batch.
pub fn pooled_batch(
    streams: &mut [(usize, BalancedStream)],
    datasets: &[DomainDataset],
    per_domain: usize,
) -> Result<Batch> {
    if streams.is_empty() {
        return Err(Error::invalid("need at least one source stream"));
    }
    if per_domain == 0 {
        return Err(Error::invalid("per_domain must be positive"));
    }
    let mut picked = Vec::with_capacity(streams.len() * per_domain);
    for (dataset_idx, stream) in streams.iter_mut() {
        let ds = &datasets[*dataset_idx];
        for _ in 0..per_domain {
            picked.push(&ds.examples[stream.next_index()]);
        }
    }
    Batch::from_examples(picked.into_iter())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabeledExample;
    use ndarray::Array3;

    fn dataset_with_counts(domain_id: usize, counts: &[usize]) -> DomainDataset {
        let mut examples = Vec::new();
        for (label, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                examples.push(LabeledExample {
                    image: Array3::zeros((1, 2, 2)),
                    label,
                    domain_id,
                });
            }
        }
        DomainDataset::from_examples(domain_id, format!("d{domain_id}"), examples).unwrap()
    }

    #[test]
    fn heavy_imbalance_resamples_to_uniform() {
        let ds = dataset_with_counts(0, &[100, 1, 1, 1, 1]);
        let mut stream = BalancedStream::new(&ds, ResampleMode::UniformClass, 0).unwrap();
        let mut freq = [0usize; 5];
        let draws = 50_000;
        for _ in 0..draws {
            freq[ds.examples[stream.next_index()].label] += 1;
        }
        for (c, &f) in freq.iter().enumerate() {
            let rate = f as f64 / draws as f64;
            assert!(
                (rate - 0.2).abs() < 0.02,
                "class {c} rate {rate} outside 0.2 +/- 0.02"
            );
        }
    }

    #[test]
    fn inverse_frequency_matches_uniform_marginal() {
        let ds = dataset_with_counts(0, &[50, 5, 1, 0, 4]);
        let mut stream = BalancedStream::new(&ds, ResampleMode::InverseFrequency, 3).unwrap();
        let mut freq = [0usize; 5];
        let draws = 40_000;
        for _ in 0..draws {
            freq[ds.examples[stream.next_index()].label] += 1;
        }
        assert_eq!(freq[3], 0);
        for &c in &[0usize, 1, 2, 4] {
            let rate = freq[c] as f64 / draws as f64;
            assert!((rate - 0.25).abs() < 0.02, "class {c} rate {rate}");
        }
    }

    #[test]
    fn single_class_and_zero_count_classes() {
        let ds = dataset_with_counts(0, &[0, 7, 0, 0, 0]);
        let mut stream = BalancedStream::new(&ds, ResampleMode::UniformClass, 1).unwrap();
        for _ in 0..200 {
            assert_eq!(ds.examples[stream.next_index()].label, 1);
        }
    }

    #[test]
    fn streams_are_seed_deterministic() {
        let ds = dataset_with_counts(0, &[3, 3, 3, 3, 3]);
        let mut a = BalancedStream::new(&ds, ResampleMode::UniformClass, 9).unwrap();
        let mut b = BalancedStream::new(&ds, ResampleMode::UniformClass, 9).unwrap();
        let sa: Vec<usize> = (0..100).map(|_| a.next_index()).collect();
        let sb: Vec<usize> = (0..100).map(|_| b.next_index()).collect();
        assert_eq!(sa, sb);
    }

    #[test]
    fn pooled_batch_contract() {
        let datasets = vec![
            dataset_with_counts(0, &[5, 5, 5, 5, 5]),
            dataset_with_counts(1, &[5, 5, 5, 5, 5]),
            dataset_with_counts(2, &[5, 5, 5, 5, 5]),
        ];
        let mut streams: Vec<(usize, BalancedStream)> = datasets
            .iter()
            .enumerate()
            .map(|(i, d)| {
                (
                    i,
                    BalancedStream::new(d, ResampleMode::UniformClass, 4).unwrap(),
                )
            })
            .collect();
        let batch = pooled_batch(&mut streams, &datasets, 22).unwrap();
        assert_eq!(batch.len(), 66);
        for d in 0..3 {
            assert_eq!(batch.domains.iter().filter(|&&x| x == d).count(), 22);
        }

        // one domain, small batch
        let mut one = vec![(
            0usize,
            BalancedStream::new(&datasets[0], ResampleMode::UniformClass, 4).unwrap(),
        )];
        let small = pooled_batch(&mut one, &datasets, 5).unwrap();
        assert_eq!(small.len(), 5);

        // errors
        assert!(pooled_batch(&mut [], &datasets, 5).is_err());
        let mut streams2: Vec<(usize, BalancedStream)> = vec![(
            0,
            BalancedStream::new(&datasets[0], ResampleMode::UniformClass, 4).unwrap(),
        )];
        assert!(pooled_batch(&mut streams2, &datasets, 0).is_err());
    }

    #[test]
    fn empty_dataset_rejected() {
        let ds = DomainDataset {
            domain_id: 0,
            name: "empty".into(),
            examples: vec![],
            class_counts: vec![0; 5],
            paths: vec![],
        };
        assert!(BalancedStream::new(&ds, ResampleMode::UniformClass, 0).is_err());
    }
}
