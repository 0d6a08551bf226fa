use ndarray::ArrayView2;
use serde::Serialize;

use crate::error::{Error, Result};

/// One agglomeration step. Clusters live in slots named after their
/// smallest original point index; merging `a < b` keeps slot `a`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct WardMerge {
    pub a: usize,
    pub b: usize,
    /// Increase in the within-cluster sum of squares, times two.
    pub cost: f64,
    pub size: usize,
}

/// All `N - 1` Ward merges of `points` (squared Euclidean geometry).
///
/// Cluster dissimilarities are maintained with the Lance–Williams update
///
/// ```text
/// D(k, a∪b) = [(n_a + n_k) D(k, a) + (n_b + n_k) D(k, b) - n_k D(a, b)] / (n_a + n_b + n_k)
/// ```
///
/// starting from `D(i, j) = ||x_i - x_j||²`. Ties pick the lexicographically
/// smallest slot pair.
pub fn ward_linkage(points: ArrayView2<'_, f64>) -> Result<Vec<WardMerge>> {
    let n = points.nrows();
    if n == 0 {
        return Err(Error::InvalidInput("cannot cluster zero points".into()));
    }
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = points
                .row(i)
                .iter()
                .zip(points.row(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut size = vec![1usize; n];
    let mut active: Vec<usize> = (0..n).collect();
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    while active.len() > 1 {
        let mut best = (f64::INFINITY, usize::MAX, usize::MAX);
        for (ia, &a) in active.iter().enumerate() {
            for &b in &active[ia + 1..] {
                let d = dist[a * n + b];
                if d < best.0 {
                    best = (d, a, b);
                }
            }
        }
        let (d_ab, a, b) = best;
        if a == usize::MAX {
            return Err(Error::InvalidInput("non-finite distances in Ward linkage".into()));
        }
        let (na, nb) = (size[a] as f64, size[b] as f64);
        for &k in &active {
            if k == a || k == b {
                continue;
            }
            let nk = size[k] as f64;
            let updated = ((na + nk) * dist[k * n + a] + (nb + nk) * dist[k * n + b] - nk * d_ab) / (na + nb + nk);
            dist[k * n + a] = updated;
            dist[a * n + k] = updated;
        }
        size[a] += size[b];
        active.retain(|&k| k != b);
        merges.push(WardMerge {
            a,
            b,
            cost: d_ab,
            size: size[a],
        });
    }
    Ok(merges)
}

/// Flat labels after stopping at `num_clusters` clusters. Labels are
/// numbered by first appearance in point order.
pub fn cut_merges(n: usize, merges: &[WardMerge], num_clusters: usize) -> Result<Vec<usize>> {
    if num_clusters == 0 || num_clusters > n {
        return Err(Error::InvalidInput(format!(
            "num_clusters = {num_clusters} must lie in [1, {n}]"
        )));
    }
    let mut slot: Vec<usize> = (0..n).collect();
    for m in &merges[..n - num_clusters] {
        for s in slot.iter_mut() {
            if *s == m.b {
                *s = m.a;
            }
        }
    }
    let mut seen: Vec<usize> = Vec::new();
    Ok(slot
        .into_iter()
        .map(|s| match seen.iter().position(|&t| t == s) {
            Some(p) => p,
            None => {
                seen.push(s);
                seen.len() - 1
            }
        })
        .collect())
}

/// Ward agglomerative clustering cut at `num_clusters`.
pub fn ward_cluster(points: ArrayView2<'_, f64>, num_clusters: usize) -> Result<Vec<usize>> {
    let n = points.nrows();
    if num_clusters == 0 || num_clusters > n {
        return Err(Error::InvalidInput(format!(
            "num_clusters = {num_clusters} must lie in [1, {n}]"
        )));
    }
    let merges = ward_linkage(points)?;
    cut_merges(n, &merges, num_clusters)
}
