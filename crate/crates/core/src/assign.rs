//! Discrete assignment extraction and matching metrics.
//!
//! Relaxed solver outputs are rounded to permutations with an `O(n^3)`
//! shortest-augmenting-path assignment solver (maximising total score).
//! A factorial-time brute-force twin exists for cross-checking on small
//! instances, alongside the accuracy and soft-similarity metrics used by the
//! evaluation harness.

use crate::error::{Error, Result};

fn validate_scores(scores: &[f64], n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Input("assignment needs at least one row".into()));
    }
    if scores.len() != n * n {
        return Err(Error::Input(format!(
            "expected {} scores for a {n}x{n} problem, got {}",
            n * n,
            scores.len()
        )));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("assignment scores must be finite".into()));
    }
    Ok(())
}

/// Maximum-score perfect assignment on an `n x n` score matrix (row-major
/// flat). Returns `perm` with `perm[i] = j` meaning row `i` takes column `j`.
/// Ties resolve toward lower column indices, so an all-constant matrix yields
/// the identity.
pub fn hungarian(scores: &[f64], n: usize) -> Result<Vec<usize>> {
    validate_scores(scores, n)?;
    // shortest augmenting path with potentials, on negated scores (1-based
    // arrays, index 0 is the virtual unmatched column)
    let cost = |i: usize, j: usize| -scores[(i - 1) * n + (j - 1)];
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0usize; n];
    for j in 1..=n {
        perm[p[j] - 1] = j - 1;
    }
    Ok(perm)
}

/// Exhaustive maximum-score assignment; lexicographically first permutation
/// among ties. Factorial time, intended as a test oracle for small `n`.
pub fn brute_force_assignment(scores: &[f64], n: usize) -> Result<(Vec<usize>, f64)> {
    validate_scores(scores, n)?;
    if n > 10 {
        return Err(Error::Input(format!("brute force capped at n = 10, got {n}")));
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut current = Vec::with_capacity(n);
    let mut taken = vec![false; n];
    fn recurse(
        scores: &[f64],
        n: usize,
        current: &mut Vec<usize>,
        taken: &mut [bool],
        acc: f64,
        best: &mut Option<(Vec<usize>, f64)>,
    ) {
        let i = current.len();
        if i == n {
            if best.as_ref().map_or(true, |(_, s)| acc > *s) {
                *best = Some((current.clone(), acc));
            }
            return;
        }
        for j in 0..n {
            if !taken[j] {
                taken[j] = true;
                current.push(j);
                recurse(scores, n, current, taken, acc + scores[i * n + j], best);
                current.pop();
                taken[j] = false;
            }
        }
    }
    recurse(scores, n, &mut current, &mut taken, 0.0, &mut best);
    Ok(best.expect("n >= 1 guarantees at least one permutation"))
}

/// Total score of an assignment.
pub fn assignment_score(scores: &[f64], n: usize, perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| scores[i * n + j]).sum()
}

/// Fraction of the first `n_inliers` rows whose assigned column matches the
/// ground truth.
pub fn matching_accuracy(perm: &[usize], gt: &[usize], n_inliers: usize) -> Result<f64> {
    if n_inliers == 0 || n_inliers > gt.len() || n_inliers > perm.len() {
        return Err(Error::Input(format!(
            "inlier count {n_inliers} out of range for {} predictions and {} labels",
            perm.len(),
            gt.len()
        )));
    }
    let hits = perm
        .iter()
        .zip(gt)
        .take(n_inliers)
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / n_inliers as f64)
}

/// Soft similarity `tr(Q R)` between two `n x n` score matrices (row-major
/// flat): the assignment-weighted total response.
pub fn graph_similarity(q: &[f64], r: &[f64], n: usize) -> Result<f64> {
    if q.len() != n * n || r.len() != n * n {
        return Err(Error::Input(format!(
            "similarity needs two {n}x{n} matrices, got {} and {}",
            q.len(),
            r.len()
        )));
    }
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += q[i * n + j] * r[j * n + i];
        }
    }
    Ok(acc)
}
