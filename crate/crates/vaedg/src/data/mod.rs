//! Datasets: labeled multi-domain examples, synthetic generation with
//! controllable domain shift, manifest ingestion, and batch construction.

pub mod manifest;
pub mod sampler;
pub mod synth;

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of classes used throughout: the five severity grades.
pub const NUM_CLASSES: usize = 5;

/// One observation: an image in `[0, 1]`, its class label, and the domain it
/// came from.
#[derive(Debug, Clone)]
pub struct LabeledExample {
    /// `[C, H, W]` pixel tensor.
    pub image: Array3<f64>,
    pub label: usize,
    pub domain_id: usize,
}

/// All examples of one domain, with per-class counts. Counts may contain
/// zeros: a domain may lack a class entirely.
#[derive(Debug, Clone)]
pub struct DomainDataset {
    pub domain_id: usize,
    pub name: String,
    pub examples: Vec<LabeledExample>,
    pub class_counts: Vec<usize>,
    /// Source file per example when loaded from or written to a manifest;
    /// empty for in-memory synthetic data.
    pub paths: Vec<String>,
}

impl DomainDataset {
    pub fn from_examples(
        domain_id: usize,
        name: impl Into<String>,
        examples: Vec<LabeledExample>,
    ) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut class_counts = vec![0usize; NUM_CLASSES];
        for ex in &examples {
            if ex.label >= NUM_CLASSES {
                return Err(Error::invalid(format!(
                    "label {} out of range for {NUM_CLASSES} classes",
                    ex.label
                )));
            }
            if ex.domain_id != domain_id {
                return Err(Error::invalid(format!(
                    "example tagged domain {} in dataset {domain_id}",
                    ex.domain_id
                )));
            }
            class_counts[ex.label] += 1;
        }
        Ok(Self {
            domain_id,
            name: name.into(),
            examples,
            class_counts,
            paths: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// A training batch assembled from one or more domains.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, C, H, W]`.
    pub x: Array4<f64>,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
}

impl Batch {
    /// Stack the given examples in order.
    pub fn from_examples<'a>(
        examples: impl ExactSizeIterator<Item = &'a LabeledExample>,
    ) -> Result<Self> {
        let n = examples.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut x: Option<Array4<f64>> = None;
        let mut labels = Vec::with_capacity(n);
        let mut domains = Vec::with_capacity(n);
        for (i, ex) in examples.enumerate() {
            let (c, h, w) = ex.image.dim();
            let buf = x.get_or_insert_with(|| Array4::zeros((n, c, h, w)));
            if buf.dim().1 != c || buf.dim().2 != h || buf.dim().3 != w {
                return Err(Error::shape(
                    format!("{:?}", (buf.dim().1, buf.dim().2, buf.dim().3)),
                    format!("{:?}", ex.image.dim()),
                ));
            }
            buf.index_axis_mut(ndarray::Axis(0), i).assign(&ex.image);
            labels.push(ex.label);
            domains.push(ex.domain_id);
        }
        Ok(Self {
            x: x.unwrap(),
            labels,
            domains,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Serializable dataset summary, used in records and exports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub domain_id: usize,
    pub name: String,
    pub size: usize,
    pub class_counts: Vec<usize>,
}

impl From<&DomainDataset> for DatasetSummary {
    fn from(d: &DomainDataset) -> Self {
        Self {
            domain_id: d.domain_id,
            name: d.name.clone(),
            size: d.len(),
            class_counts: d.class_counts.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(label: usize, domain_id: usize) -> LabeledExample {
        LabeledExample {
            image: Array3::zeros((1, 2, 2)),
            label,
            domain_id,
        }
    }

    #[test]
    fn class_counts_track_examples() {
        let d = DomainDataset::from_examples(0, "d0", vec![ex(0, 0), ex(2, 0), ex(4, 0), ex(2, 0)])
            .unwrap();
        assert_eq!(d.class_counts, vec![1, 0, 2, 0, 1]);
    }

    #[test]
    fn rejects_empty_and_mismatched() {
        assert!(matches!(
            DomainDataset::from_examples(0, "d0", vec![]),
            Err(Error::EmptyDataset)
        ));
        assert!(DomainDataset::from_examples(0, "d0", vec![ex(0, 1)]).is_err());
        assert!(DomainDataset::from_examples(0, "d0", vec![ex(9, 0)]).is_err());
    }

    #[test]
    fn batch_stacks_in_order() {
        let examples = vec![ex(1, 0), ex(3, 2)];
        let batch = Batch::from_examples(examples.iter()).unwrap();
        assert_eq!(batch.x.dim(), (2, 1, 2, 2));
        assert_eq!(batch.labels, vec![1, 3]);
        assert_eq!(batch.domains, vec![0, 2]);
    }
}
