use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;

/// Disjoint per-client sample index lists covering the whole dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub alpha: f64,
    pub seed: u64,
    pub clients: Vec<Vec<usize>>,
}

impl PartitionPlan {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    /// Audit file: `{"alpha": .., "seed": .., "clients": {"0": [..], ..}}`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        #[derive(Serialize)]
        struct Audit<'a> {
            alpha: f64,
            seed: u64,
            clients: BTreeMap<usize, &'a Vec<usize>>,
        }
        let audit = Audit { alpha: self.alpha, seed: self.seed, clients: self.clients.iter().enumerate().collect() };
        std::fs::write(path, serde_json::to_string_pretty(&audit)?)?;
        Ok(())
    }
}

/// Splits `weights.len()` into integer counts summing to `total`: floors
/// first, then one extra unit to the largest fractional remainders (ties to
/// the lower index).
pub(crate) fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn dirichlet(alpha: f64, m: usize, rng: &mut SimRng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    let draws: Vec<f64> = (0..m).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.into_iter().map(|d| d / sum).collect()
    } else {
        vec![1.0 / m as f64; m]
    }
}

/// Label-skewed partition: every class is spread over the clients by a
/// proportion vector drawn from `Dirichlet(alpha * 1_m)`.
pub fn dirichlet_partition(labels: &[usize], m: usize, alpha: f64, seed: u64) -> Result<PartitionPlan> {
    if m == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("dirichlet alpha must be positive, got {alpha}")));
    }
    if labels.len() < m {
        return Err(Error::invalid(format!("{} samples cannot cover {m} clients", labels.len())));
    }
    let classes = labels.iter().max().map_or(0, |&l| l + 1);
    let mut rng = SimRng::seed_from_u64(seed);
    let mut clients: Vec<Vec<usize>> = vec![Vec::new(); m];
    for class in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let props = dirichlet(alpha, m, &mut rng);
        let counts = largest_remainder(&props, idx.len());
        let mut start = 0;
        for (client, &count) in counts.iter().enumerate() {
            clients[client].extend_from_slice(&idx[start..start + count]);
            start += count;
        }
    }
    // repair: every empty client takes one sample from the largest client
    while let Some(empty) = clients.iter().position(|c| c.is_empty()) {
        let donor = (0..m).max_by(|&a, &b| clients[a].len().cmp(&clients[b].len()).then(b.cmp(&a))).unwrap();
        let moved = clients[donor].pop().expect("donor is non-empty");
        clients[empty].push(moved);
    }
    clients.iter_mut().for_each(|c| c.sort_unstable());
    Ok(PartitionPlan { alpha, seed, clients })
}

/// Population standard deviation of each client's per-class sample counts.
pub fn label_count_std(plan: &PartitionPlan, labels: &[usize], classes: usize) -> Vec<f64> {
    plan.clients
        .iter()
        .map(|idx| {
            let mut counts = vec![0.0f64; classes];
            for &i in idx {
                counts[labels[i]] += 1.0;
            }
            let mean = counts.iter().sum::<f64>() / classes as f64;
            (counts.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / classes as f64).sqrt()
        })
        .collect()
}

pub fn mean_label_count_std(plan: &PartitionPlan, labels: &[usize], classes: usize) -> f64 {
    let v = label_count_std(plan, labels, classes);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Seeded shuffle of `indices` into (train, test) with `train_frac` of the
/// samples (at least one) in train. Both halves come back sorted.
pub fn split_train_test(indices: &[usize], train_frac: f64, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    let mut shuffled = indices.to_vec();
    shuffled.shuffle(rng);
    let n_train = ((indices.len() as f64 * train_frac).round() as usize).clamp(1.min(indices.len()), indices.len());
    let mut train = shuffled[..n_train].to_vec();
    let mut test = shuffled[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}
