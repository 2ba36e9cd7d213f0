use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Homogeneity, completeness and their harmonic mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VScore {
    pub homogeneity: f64,
    pub completeness: f64,
    pub v: f64,
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Entropy-based cluster agreement (natural logs). A labeling with a single
/// class is perfectly homogeneous; a single cluster is perfectly complete.
pub fn homogeneity_completeness_v(labels: &[usize], clusters: &[usize]) -> Result<VScore> {
    if labels.len() != clusters.len() {
        return Err(Error::Metric(format!(
            "{} labels but {} cluster assignments",
            labels.len(),
            clusters.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Metric("v-score of zero samples".into()));
    }
    let n = labels.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut by_class: BTreeMap<usize, usize> = BTreeMap::new();
    let mut by_cluster: BTreeMap<usize, usize> = BTreeMap::new();
    for (&c, &k) in labels.iter().zip(clusters) {
        *joint.entry((c, k)).or_default() += 1;
        *by_class.entry(c).or_default() += 1;
        *by_cluster.entry(k).or_default() += 1;
    }
    let h_class = entropy(by_class.values().copied(), n);
    let h_cluster = entropy(by_cluster.values().copied(), n);
    let mut h_class_given_cluster = 0.0;
    let mut h_cluster_given_class = 0.0;
    for (&(c, k), &nck) in &joint {
        let p = nck as f64 / n;
        h_class_given_cluster -= p * (nck as f64 / by_cluster[&k] as f64).ln();
        h_cluster_given_class -= p * (nck as f64 / by_class[&c] as f64).ln();
    }
    let homogeneity = if h_class == 0.0 {
        1.0
    } else {
        1.0 - h_class_given_cluster / h_class
    };
    let completeness = if h_cluster == 0.0 {
        1.0
    } else {
        1.0 - h_cluster_given_class / h_cluster
    };
    let v = if homogeneity + completeness == 0.0 {
        0.0
    } else {
        2.0 * homogeneity * completeness / (homogeneity + completeness)
    };
    Ok(VScore {
        homogeneity,
        completeness,
        v,
    })
}

pub fn v_score(labels: &[usize], clusters: &[usize]) -> Result<f64> {
    Ok(homogeneity_completeness_v(labels, clusters)?.v)
}
