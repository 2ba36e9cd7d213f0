use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean embedding of one class and the number of samples behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassFeature {
    pub mean: Vec<f64>,
    pub count: usize,
}

/// Per-class mean embeddings. Classes nobody observed are absent rather
/// than zero-filled.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    feature_dim: usize,
    classes: Vec<Option<ClassFeature>>,
}

impl FeatureBank {
    pub fn empty(num_classes: usize, feature_dim: usize) -> Self {
        Self {
            feature_dim,
            classes: vec![None; num_classes],
        }
    }

    pub fn from_classes(feature_dim: usize, classes: Vec<Option<ClassFeature>>) -> Result<Self> {
        for c in classes.iter().flatten() {
            if c.mean.len() != feature_dim {
                return Err(Error::Shape(format!(
                    "class mean has {} features, bank expects {feature_dim}",
                    c.mean.len()
                )));
            }
            if c.count == 0 || c.mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::Shape("present classes need a positive count and finite mean".into()));
            }
        }
        Ok(Self { feature_dim, classes })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class(&self, j: usize) -> Option<&ClassFeature> {
        self.classes.get(j).and_then(Option::as_ref)
    }

    pub fn classes(&self) -> &[Option<ClassFeature>] {
        &self.classes
    }

    pub fn present_classes(&self) -> Vec<usize> {
        (0..self.classes.len()).filter(|&j| self.classes[j].is_some()).collect()
    }
}

/// Running per-class sums used to build a [`FeatureBank`] batch by batch.
#[derive(Debug, Clone)]
pub struct FeatureAccumulator {
    feature_dim: usize,
    sums: Vec<Vec<f64>>,
    counts: Vec<usize>,
}

impl FeatureAccumulator {
    pub fn new(num_classes: usize, feature_dim: usize) -> Self {
        Self {
            feature_dim,
            sums: vec![vec![0.0; feature_dim]; num_classes],
            counts: vec![0; num_classes],
        }
    }

    pub fn add(&mut self, embeddings: &Tensor, labels: &[usize]) -> Result<()> {
        if embeddings.shape() != [labels.len(), self.feature_dim] {
            return Err(Error::Shape(format!(
                "embeddings {:?} for {} labels of width {}",
                embeddings.shape(),
                labels.len(),
                self.feature_dim
            )));
        }
        for (i, &l) in labels.iter().enumerate() {
            let classes = self.counts.len();
            let sum = self.sums.get_mut(l).ok_or(Error::Label { label: l, classes })?;
            for (s, v) in sum.iter_mut().zip(embeddings.row(i)) {
                *s += v;
            }
            self.counts[l] += 1;
        }
        Ok(())
    }

    pub fn finish(self) -> FeatureBank {
        let classes = self
            .sums
            .into_iter()
            .zip(self.counts)
            .map(|(sum, count)| {
                (count > 0).then(|| ClassFeature {
                    mean: sum.iter().map(|s| s / count as f64).collect(),
                    count,
                })
            })
            .collect();
        FeatureBank {
            feature_dim: self.feature_dim,
            classes,
        }
    }
}

/// Global bank: for each class, the unweighted mean of the local means over
/// the banks where that class is present. Counts are summed.
pub fn aggregate_feature_banks(banks: &[FeatureBank]) -> Result<FeatureBank> {
    let first = banks
        .first()
        .ok_or_else(|| Error::Aggregation("no feature banks to aggregate".into()))?;
    let (nc, fd) = (first.num_classes(), first.feature_dim());
    if banks.iter().any(|b| b.num_classes() != nc || b.feature_dim() != fd) {
        return Err(Error::Aggregation("feature banks differ in shape".into()));
    }
    let classes = (0..nc)
        .map(|j| {
            let present: Vec<&ClassFeature> = banks.iter().filter_map(|b| b.class(j)).collect();
            if present.is_empty() {
                return None;
            }
            let inv = 1.0 / present.len() as f64;
            let mut mean = vec![0.0; fd];
            for c in &present {
                for (m, v) in mean.iter_mut().zip(&c.mean) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m *= inv);
            Some(ClassFeature {
                mean,
                count: present.iter().map(|c| c.count).sum(),
            })
        })
        .collect();
    Ok(FeatureBank { feature_dim: fd, classes })
}
