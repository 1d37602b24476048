use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::datasets::{ScenarioKind, Split};
use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub sse: f64,
    /// SSE after every assignment step of the winning restart.
    pub sse_trace: Vec<f64>,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    centroids
        .iter()
        .enumerate()
        .map(|(j, c)| (j, dist2(x, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

fn plus_plus(data: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![data[rng.below(data.len())].clone()];
    let mut d2: Vec<f64> = data.iter().map(|x| dist2(x, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.uniform() * total;
            let mut idx = d2.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        } else {
            rng.below(data.len())
        };
        centroids.push(data[pick].clone());
        for (d, x) in d2.iter_mut().zip(data) {
            *d = d.min(dist2(x, centroids.last().expect("just pushed")));
        }
    }
    centroids
}

fn lloyd(data: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iter: usize) -> KMeansResult {
    let k = centroids.len();
    let dim = data[0].len();
    let mut assignments = vec![usize::MAX; data.len()];
    let mut trace: Vec<f64> = Vec::new();
    for _ in 0..max_iter {
        let mut changed = false;
        let mut cost = vec![0.0; data.len()];
        for (i, x) in data.iter().enumerate() {
            let (j, d) = nearest(x, &centroids);
            cost[i] = d;
            if assignments[i] != j {
                assignments[i] = j;
                changed = true;
            }
        }
        // Empty clusters take the point farthest from its centroid.
        let mut sizes = vec![0usize; k];
        assignments.iter().for_each(|&a| sizes[a] += 1);
        for j in 0..k {
            if sizes[j] == 0 {
                let far = (0..data.len())
                    .filter(|&i| sizes[assignments[i]] > 1)
                    .max_by(|&a, &b| cost[a].total_cmp(&cost[b]))
                    .expect("M >= k leaves a cluster with two points");
                sizes[assignments[far]] -= 1;
                assignments[far] = j;
                sizes[j] = 1;
                cost[far] = 0.0;
                centroids[j] = data[far].clone();
                changed = true;
            }
        }
        let sse: f64 = cost.iter().sum();
        if let Some(&prev) = trace.last() {
            assert!(
                sse <= prev * (1.0 + 1e-12) + 1e-12,
                "k-means SSE increased from {prev} to {sse}"
            );
        }
        trace.push(sse);
        let mut sums = vec![vec![0.0; dim]; k];
        for (x, &a) in data.iter().zip(&assignments) {
            sums[a].iter_mut().zip(x).for_each(|(s, v)| *s += v);
        }
        for (j, s) in sums.into_iter().enumerate() {
            centroids[j] = s.into_iter().map(|v| v / sizes[j] as f64).collect();
        }
        if !changed {
            break;
        }
    }
    let sse = data
        .iter()
        .zip(&assignments)
        .map(|(x, &a)| dist2(x, &centroids[a]))
        .sum();
    KMeansResult {
        assignments,
        centroids,
        sse,
        sse_trace: trace,
    }
}

/// Lloyd's algorithm from k-means++ seeds, best of `restarts` by SSE.
pub fn kmeans(data: &[Vec<f64>], k: usize, seed: u64, restarts: usize) -> Result<KMeansResult> {
    if k == 0 || data.len() < k {
        return Err(Error::Contract(format!("k-means needs 1 <= k <= M, got k={k}, M={}", data.len())));
    }
    let dim = data[0].len();
    if data.iter().any(|x| x.len() != dim) {
        return Err(Error::Contract("k-means rows have different widths".into()));
    }
    let mut rng = Rng::labeled(seed, "kmeans");
    let mut best: Option<KMeansResult> = None;
    for _ in 0..restarts.max(1) {
        let init = plus_plus(data, k, &mut rng);
        let run = lloyd(data, init, 300);
        if best.as_ref().is_none_or(|b| run.sse < b.sse) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub k: usize,
    pub assignments: Vec<usize>,
    /// Mean over non-empty clusters of majority share, percent.
    pub avg_cluster_purity: f64,
    /// `None` for empty clusters.
    pub per_cluster: Vec<Option<f64>>,
    pub empty_clusters: usize,
    pub split: Option<Split>,
}

/// Averaged cluster purity of `assignments` against latent digits, after
/// mapping digits to the task's instance classes.
pub fn cluster_purity(assignments: &[usize], digits: &[u8], task: ScenarioKind, k: usize) -> Result<ClusterReport> {
    if assignments.len() != digits.len() {
        return Err(Error::Contract(format!(
            "{} assignments for {} labels",
            assignments.len(),
            digits.len()
        )));
    }
    if let Some(&bad) = assignments.iter().find(|&&a| a >= k) {
        return Err(Error::Contract(format!("assignment {bad} outside 0..{k}")));
    }
    let mut counts: Vec<HashMap<u8, usize>> = vec![HashMap::new(); k];
    for (&a, &d) in assignments.iter().zip(digits) {
        *counts[a].entry(task.instance_class(d)).or_default() += 1;
    }
    let per_cluster: Vec<Option<f64>> = counts
        .iter()
        .map(|c| {
            let size: usize = c.values().sum();
            (size > 0).then(|| 100.0 * *c.values().max().expect("non-empty") as f64 / size as f64)
        })
        .collect();
    let present: Vec<f64> = per_cluster.iter().flatten().copied().collect();
    Ok(ClusterReport {
        k,
        assignments: assignments.to_vec(),
        avg_cluster_purity: present.iter().sum::<f64>() / present.len().max(1) as f64,
        empty_clusters: k - present.len(),
        per_cluster,
        split: None,
    })
}
