//! Label-skewed client partitioning.
//!
//! For each class the (shuffled) sample indices are split among clients by
//! proportions drawn from `Dir(gamma * 1_N)`. Small `gamma` concentrates a
//! class on few clients; large `gamma` approaches an even split.

use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::rng::{Purpose, RngStream};

/// Redraws allowed when a draw leaves some client without samples.
pub const PARTITION_RETRIES: u64 = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    client_indices: Vec<Vec<usize>>,
    gamma: f64,
    seed: u64,
}

impl PartitionPlan {
    pub fn client_indices(&self) -> &[Vec<usize>] {
        &self.client_indices
    }

    pub fn n_clients(&self) -> usize {
        self.client_indices.len()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Per-client class histograms.
    pub fn class_histograms(&self, labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
        self.client_indices
            .iter()
            .map(|idx| {
                let mut h = vec![0; num_classes];
                for &i in idx {
                    h[labels[i]] += 1;
                }
                h
            })
            .collect()
    }
}

pub fn dirichlet_partition(labels: &[usize], n_clients: usize, gamma: f64, seed: u64) -> Result<PartitionPlan> {
    if n_clients == 0 {
        return Err(Error::config("n_clients", "need at least one client"));
    }
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::config("gamma", format!("must be positive, got {gamma}")));
    }
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let gamma_dist = Gamma::new(gamma, 1.0).map_err(|e| Error::config("gamma", e.to_string()))?;
    let root = RngStream::new(seed).for_purpose(Purpose::Partition);

    for attempt in 0..=PARTITION_RETRIES {
        let arng = root.derive(attempt);
        let mut clients: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
        for (c, members) in by_class.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let mut rng = arng.derive(c as u64);
            let mut shuffled = members.clone();
            rng.shuffle(&mut shuffled);
            let mut props: Vec<f64> = (0..n_clients).map(|_| gamma_dist.sample(&mut rng)).collect();
            let total: f64 = props.iter().sum();
            if total > 0.0 && total.is_finite() {
                props.iter_mut().for_each(|p| *p /= total);
            } else {
                // every draw underflowed: give the class to one client
                props.iter_mut().for_each(|p| *p = 0.0);
                props[rng.below(n_clients as u64) as usize] = 1.0;
            }
            let n = shuffled.len();
            let mut start = 0;
            let mut cum = 0.0;
            for (client, p) in props.iter().enumerate() {
                cum += p;
                let end = if client + 1 == n_clients {
                    n
                } else {
                    ((cum * n as f64).floor() as usize).clamp(start, n)
                };
                clients[client].extend_from_slice(&shuffled[start..end]);
                start = end;
            }
        }
        if clients.iter().all(|c| !c.is_empty()) {
            for c in &mut clients {
                c.sort_unstable();
            }
            return Ok(PartitionPlan {
                client_indices: clients,
                gamma,
                seed,
            });
        }
    }
    Err(Error::Partition(format!(
        "some of {n_clients} clients stayed empty after {PARTITION_RETRIES} redraws \
         ({} samples, gamma {gamma})",
        labels.len()
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize, classes: usize) -> Vec<usize> {
        (0..n).map(|i| i % classes).collect()
    }

    fn assert_cover(plan: &PartitionPlan, n: usize) {
        let mut all: Vec<usize> = plan.client_indices().iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
        assert!(plan.client_indices().iter().all(|c| !c.is_empty()));
    }

    #[test]
    fn single_client_gets_everything() {
        let l = labels(50, 5);
        let plan = dirichlet_partition(&l, 1, 0.5, 3).unwrap();
        assert_eq!(plan.client_indices(), &[(0..50).collect::<Vec<_>>()]);
    }

    #[test]
    fn cover_and_determinism() {
        let l = labels(600, 10);
        let a = dirichlet_partition(&l, 5, 0.5, 11).unwrap();
        assert_cover(&a, 600);
        assert_eq!(a, dirichlet_partition(&l, 5, 0.5, 11).unwrap());
        assert_ne!(a, dirichlet_partition(&l, 5, 0.5, 12).unwrap());
    }

    #[test]
    fn small_gamma_skews_and_large_gamma_evens() {
        let l = labels(6000, 10);
        let skewed = dirichlet_partition(&l, 5, 0.5, 1).unwrap();
        let hist = skewed.class_histograms(&l, 10);
        assert!(hist.iter().any(|h| {
            let max = *h.iter().max().unwrap() as f64;
            let min = *h.iter().min().unwrap() as f64;
            max > 2.0 * min
        }));

        let even = dirichlet_partition(&l, 5, 1000.0, 1).unwrap();
        for h in even.class_histograms(&l, 10) {
            for &count in &h {
                let share = count as f64 / 600.0;
                assert!((share - 0.2).abs() / 0.2 < 0.4, "share {share}");
            }
        }
    }

    #[test]
    fn impossible_partition_errors() {
        let l = labels(3, 3);
        assert!(matches!(dirichlet_partition(&l, 10, 1.0, 0), Err(Error::Partition(_))));
        assert!(dirichlet_partition(&l, 0, 1.0, 0).unwrap_err().is_config());
        assert!(dirichlet_partition(&l, 2, 0.0, 0).unwrap_err().is_config());
    }
}
