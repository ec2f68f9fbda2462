//! Sparse affinity matrices over the association space of two graphs.
//!
//! For graphs with `n1` and `n2` nodes the affinity matrix `M` acts on
//! assignment vectors of length `n1 * n2` (row-major over `(i, j)` pairs).
//! Its diagonal holds node-to-node (unary) affinities; off-diagonal entries
//! exist only where `(i, i')` is an edge of graph 1 and `(j, j')` an edge of
//! graph 2, and take the value `exp(-(d1_ii' - d2_jj')^2 / sigma^2)` for edge
//! lengths `d`. Entries are stored once per symmetric pair (canonical
//! `i < i'`) and the symmetry is materialised during the matrix-vector
//! product, which therefore costs `O(K^2 n1 n2)` for degree bound `K`.

use ndarray::{Array2, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};
use std::sync::{Arc, OnceLock};

use crate::error::{Error, Result};
use crate::graph::Graph;

/// How node-to-node affinities are derived from features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnaryMode {
    /// Raw feature distance `||F1_i - F2_j||`.
    Norm,
    /// Gaussian similarity `exp(-||F1_i - F2_j||^2 / sigma^2)`.
    Gaussian,
}

/// Per-association-node view of the pairwise entries: for each flat index `r`
/// the list of `(partner, entry)` pairs touching it, in global entry order.
#[derive(Debug)]
pub struct Incidence {
    offsets: Vec<u32>,
    partner: Vec<u32>,
    entry: Vec<u32>,
}

impl Incidence {
    #[inline]
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let lo = self.offsets[r] as usize;
        let hi = self.offsets[r + 1] as usize;
        self.partner[lo..hi]
            .iter()
            .zip(&self.entry[lo..hi])
            .map(|(&p, &e)| (p as usize, e as usize))
    }
}

/// Index structure of the pairwise block, shared between an affinity matrix,
/// its feature-updated successors and the autodiff tape.
///
/// Entry `e` couples flat association nodes `row_a[e] = i * n2 + j` and
/// `row_b[e] = i' * n2 + j'` with `i < i'`; the symmetric mirror is implied.
#[derive(Debug)]
pub struct PairwisePattern {
    pub n1: usize,
    pub n2: usize,
    pub row_a: Vec<u32>,
    pub row_b: Vec<u32>,
    incidence: OnceLock<Incidence>,
}

impl PairwisePattern {
    pub fn len(&self) -> usize {
        self.row_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row_a.is_empty()
    }

    /// Lazily built incidence lists; per-row order equals global entry order,
    /// so masked and full matvecs accumulate in the same sequence bit-for-bit.
    pub fn incidence(&self) -> &Incidence {
        self.incidence.get_or_init(|| {
            let n = self.n1 * self.n2;
            let mut counts = vec![0u32; n + 1];
            for e in 0..self.len() {
                counts[self.row_a[e] as usize + 1] += 1;
                counts[self.row_b[e] as usize + 1] += 1;
            }
            for r in 0..n {
                counts[r + 1] += counts[r];
            }
            let total = counts[n] as usize;
            let mut partner = vec![0u32; total];
            let mut entry = vec![0u32; total];
            let mut cursor = counts.clone();
            for e in 0..self.len() {
                let (a, b) = (self.row_a[e] as usize, self.row_b[e] as usize);
                let ca = cursor[a] as usize;
                partner[ca] = self.row_b[e];
                entry[ca] = e as u32;
                cursor[a] += 1;
                let cb = cursor[b] as usize;
                partner[cb] = self.row_a[e];
                entry[cb] = e as u32;
                cursor[b] += 1;
            }
            Incidence { offsets: counts, partner, entry }
        })
    }
}

/// Sparse affinity matrix: dense unary diagonal plus patterned pairwise block.
/// `real1`/`real2` mark how many rows/columns correspond to real (non-padding)
/// nodes; unary entries outside that range are forced to zero.
#[derive(Debug, Clone)]
pub struct AffinityMatrix {
    pub unary: Array2<f64>,
    pub pattern: Arc<PairwisePattern>,
    pub values: Vec<f64>,
    /// Squared edge-length differences per entry (geometric constructions only).
    pub delta_sq: Arc<Vec<f64>>,
    pub sigma: f64,
    pub real1: usize,
    pub real2: usize,
}

impl AffinityMatrix {
    pub fn n1(&self) -> usize {
        self.pattern.n1
    }

    pub fn n2(&self) -> usize {
        self.pattern.n2
    }

    /// Flat dimension of the association space.
    pub fn dim(&self) -> usize {
        self.pattern.n1 * self.pattern.n2
    }

    /// Mark rows `>= real1` / columns `>= real2` as padding: their unary
    /// affinities are zeroed so dummy nodes carry no attraction.
    pub fn set_real_counts(&mut self, real1: usize, real2: usize) {
        self.real1 = real1.min(self.n1());
        self.real2 = real2.min(self.n2());
        zero_padding(&mut self.unary, self.real1, self.real2);
    }

    /// `M z` with the stored symmetry materialised.
    pub fn matvec(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim() {
            return Err(Error::Input(format!(
                "matvec expects length {}, got {}",
                self.dim(),
                z.len()
            )));
        }
        let mut out = vec![0.0; z.len()];
        pattern_matvec(
            &self.pattern,
            self.unary.as_slice().expect("contiguous"),
            &self.values,
            z,
            &mut out,
        );
        Ok(out)
    }

    /// Dense `n1 n2 x n1 n2` materialisation; reference oracle for tests and
    /// small diagnostics only.
    pub fn to_dense(&self) -> Array2<f64> {
        let n = self.dim();
        let mut dense = Array2::zeros((n, n));
        for (r, &u) in self.unary.iter().enumerate() {
            dense[(r, r)] = u;
        }
        for e in 0..self.pattern.len() {
            let (a, b) = (self.pattern.row_a[e] as usize, self.pattern.row_b[e] as usize);
            dense[(a, b)] += self.values[e];
            dense[(b, a)] += self.values[e];
        }
        dense
    }
}

fn zero_padding(unary: &mut Array2<f64>, real1: usize, real2: usize) {
    let (n1, n2) = unary.dim();
    for i in 0..n1 {
        for j in 0..n2 {
            if i >= real1 || j >= real2 {
                unary[(i, j)] = 0.0;
            }
        }
    }
}

/// Shared matvec kernel: `out = diag(unary) z + pairwise z`, accumulating the
/// unary term first and then the stored entries in order. The autodiff tape
/// reuses this exact routine so traced and plain forward passes agree
/// bit-for-bit.
pub fn pattern_matvec(
    pattern: &PairwisePattern,
    unary_flat: &[f64],
    values: &[f64],
    z: &[f64],
    out: &mut [f64],
) {
    for ((o, &u), &zv) in out.iter_mut().zip(unary_flat).zip(z) {
        *o = u * zv;
    }
    for e in 0..pattern.len() {
        let a = pattern.row_a[e] as usize;
        let b = pattern.row_b[e] as usize;
        let v = values[e];
        out[a] += v * z[b];
        out[b] += v * z[a];
    }
}

/// Matvec restricted to the given flat rows, using the incidence lists. Row
/// accumulation order matches [`pattern_matvec`], so a full-row mask is
/// bit-identical to the dense product.
pub fn pattern_matvec_rows(
    pattern: &PairwisePattern,
    unary_flat: &[f64],
    values: &[f64],
    z: &[f64],
    rows: &[u32],
    out: &mut Vec<f64>,
) {
    let inc = pattern.incidence();
    out.clear();
    out.reserve(rows.len());
    for &r in rows {
        let r = r as usize;
        let mut acc = unary_flat[r] * z[r];
        for (p, e) in inc.row(r) {
            acc += values[e] * z[p];
        }
        out.push(acc);
    }
}

fn feature_norm(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Pairwise feature distances `||F1_i - F2_j||` as an `n1 x n2` matrix.
pub fn feature_distances(f1: ArrayView2<'_, f64>, f2: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if f1.ncols() != f2.ncols() {
        return Err(Error::Input(format!(
            "feature dims differ: {} vs {}",
            f1.ncols(),
            f2.ncols()
        )));
    }
    if f1.iter().chain(f2.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Input("features must be finite".into()));
    }
    let mut d = Array2::zeros((f1.nrows(), f2.nrows()));
    for i in 0..f1.nrows() {
        for j in 0..f2.nrows() {
            d[(i, j)] = feature_norm(f1.row(i), f2.row(j));
        }
    }
    Ok(d)
}

/// Pattern plus squared edge-length differences for an edge-product sparsity
/// structure. Entry order: graph-1 edges in canonical order, and for each,
/// both orientations of every graph-2 edge.
pub fn pattern_and_deltas(
    f1: ArrayView2<'_, f64>,
    f2: ArrayView2<'_, f64>,
    edges1: &[(usize, usize)],
    edges2: &[(usize, usize)],
    n1: usize,
    n2: usize,
) -> Result<(Arc<PairwisePattern>, Arc<Vec<f64>>)> {
    let len1: Vec<f64> = edges1
        .iter()
        .map(|&(a, b)| feature_norm(f1.row(a), f1.row(b)))
        .collect();
    let len2: Vec<f64> = edges2
        .iter()
        .map(|&(a, b)| feature_norm(f2.row(a), f2.row(b)))
        .collect();
    let count = 2 * edges1.len() * edges2.len();
    let mut row_a = Vec::with_capacity(count);
    let mut row_b = Vec::with_capacity(count);
    let mut delta_sq = Vec::with_capacity(count);
    for (e1, &(i, i2)) in edges1.iter().enumerate() {
        for (e2, &(j, j2)) in edges2.iter().enumerate() {
            let d = len1[e1] - len2[e2];
            for &(ja, jb) in &[(j, j2), (j2, j)] {
                row_a.push((i * n2 + ja) as u32);
                row_b.push((i2 * n2 + jb) as u32);
                delta_sq.push(d * d);
            }
        }
    }
    let pattern = PairwisePattern {
        n1,
        n2,
        row_a,
        row_b,
        incidence: OnceLock::new(),
    };
    Ok((Arc::new(pattern), Arc::new(delta_sq)))
}

/// Geometric affinity matrix from node features and graph topologies.
pub fn build_affinity(
    f1: ArrayView2<'_, f64>,
    f2: ArrayView2<'_, f64>,
    g1: &Graph,
    g2: &Graph,
    sigma: f64,
    mode: UnaryMode,
) -> Result<AffinityMatrix> {
    if f1.nrows() != g1.n() || f2.nrows() != g2.n() {
        return Err(Error::Input(format!(
            "feature rows ({}, {}) do not match node counts ({}, {})",
            f1.nrows(),
            f2.nrows(),
            g1.n(),
            g2.n()
        )));
    }
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    let dists = feature_distances(f1, f2)?;
    let unary = match mode {
        UnaryMode::Norm => dists,
        UnaryMode::Gaussian => dists.mapv(|d| (-(d * d) / (sigma * sigma)).exp()),
    };
    let (pattern, delta_sq) = pattern_and_deltas(f1, f2, &g1.edges, &g2.edges, g1.n(), g2.n())?;
    let values = delta_sq.iter().map(|&d2| (-d2 / (sigma * sigma)).exp()).collect();
    Ok(AffinityMatrix {
        unary,
        real1: pattern.n1,
        real2: pattern.n2,
        pattern,
        values,
        delta_sq,
        sigma,
    })
}

/// Koopman-Beckmann affinity `A1 (x) A2` for binary symmetric adjacencies:
/// pairwise entries of value one on the edge product, zero unary diagonal.
pub fn koopman_beckmann(a1: ArrayView2<'_, f64>, a2: ArrayView2<'_, f64>) -> Result<AffinityMatrix> {
    let edges1 = adjacency_edges(a1)?;
    let edges2 = adjacency_edges(a2)?;
    let (n1, n2) = (a1.nrows(), a2.nrows());
    let count = 2 * edges1.len() * edges2.len();
    let mut row_a = Vec::with_capacity(count);
    let mut row_b = Vec::with_capacity(count);
    for &(i, i2) in &edges1 {
        for &(j, j2) in &edges2 {
            for &(ja, jb) in &[(j, j2), (j2, j)] {
                row_a.push((i * n2 + ja) as u32);
                row_b.push((i2 * n2 + jb) as u32);
            }
        }
    }
    let pattern = PairwisePattern {
        n1,
        n2,
        row_a,
        row_b,
        incidence: OnceLock::new(),
    };
    Ok(AffinityMatrix {
        unary: Array2::zeros((n1, n2)),
        real1: n1,
        real2: n2,
        pattern: Arc::new(pattern),
        values: vec![1.0; count],
        delta_sq: Arc::new(vec![0.0; count]),
        sigma: 1.0,
    })
}

fn adjacency_edges(a: ArrayView2<'_, f64>) -> Result<Vec<(usize, usize)>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Input("adjacency must be square".into()));
    }
    let mut edges = Vec::new();
    for i in 0..n {
        if a[(i, i)] != 0.0 {
            return Err(Error::Input(format!("adjacency has a self-loop at {i}")));
        }
        for j in (i + 1)..n {
            let v = a[(i, j)];
            if v != a[(j, i)] {
                return Err(Error::Input("adjacency must be symmetric".into()));
            }
            if v != 0.0 && v != 1.0 {
                return Err(Error::Input(format!("adjacency entries must be 0/1, got {v}")));
            }
            if v == 1.0 {
                edges.push((i, j));
            }
        }
    }
    Ok(edges)
}

/// Feature-driven refresh of an affinity matrix on the same sparsity pattern:
/// pairwise entries `exp(-sum_c w_c (V_c[a] - V_c[b])^2)`, unary entries
/// `exp(sum_c u_c V_c[i,j])` with padding rows/columns re-zeroed.
pub fn update_affinity(
    v: ArrayView3<'_, f64>,
    w: &[f64],
    u: &[f64],
    base: &AffinityMatrix,
) -> Result<AffinityMatrix> {
    let (c, n1, n2) = v.dim();
    if n1 != base.n1() || n2 != base.n2() {
        return Err(Error::Input(format!(
            "feature tensor is {n1}x{n2}, affinity is {}x{}",
            base.n1(),
            base.n2()
        )));
    }
    if w.len() != c || u.len() != c {
        return Err(Error::Input(format!(
            "expected {c} channel weights, got {} and {}",
            w.len(),
            u.len()
        )));
    }
    let vs = v.as_slice().ok_or_else(|| Error::Input("feature tensor must be contiguous".into()))?;
    let plane = n1 * n2;
    let pattern = &base.pattern;
    let mut values = vec![0.0; pattern.len()];
    for e in 0..pattern.len() {
        let (a, b) = (pattern.row_a[e] as usize, pattern.row_b[e] as usize);
        let mut acc = 0.0;
        for (ch, &wc) in w.iter().enumerate() {
            let d = vs[ch * plane + a] - vs[ch * plane + b];
            acc += wc * d * d;
        }
        values[e] = crate::solvers::safe_exp(-acc);
    }
    let mut unary = Array2::zeros((n1, n2));
    {
        let uf = unary.as_slice_mut().expect("contiguous");
        for r in 0..plane {
            let mut acc = 0.0;
            for (ch, &uc) in u.iter().enumerate() {
                acc += uc * vs[ch * plane + r];
            }
            uf[r] = crate::solvers::safe_exp(acc);
        }
    }
    zero_padding(&mut unary, base.real1, base.real2);
    Ok(AffinityMatrix {
        unary,
        pattern: Arc::clone(pattern),
        values,
        delta_sq: Arc::new(Vec::new()),
        sigma: base.sigma,
        real1: base.real1,
        real2: base.real2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_reference, make_pair, rotate, GenConfig};
    use ndarray::{array, Array1, Array3};
    use proptest::prelude::*;

    fn gen_cfg(n_in: usize, k: usize, seed: u64) -> GenConfig {
        GenConfig { n_in, n_out: 0, sigma: 0.1, dim: 2, k, seed, rotation_max: 0.0 }
    }

    fn two_point_graph(len: f64) -> Graph {
        Graph::new(array![[0.0, 0.0], [len, 0.0]], vec![(0, 1)], 2).unwrap()
    }

    #[test]
    fn pairwise_kernel_value_at_sigma_gap() {
        // edge lengths differ by exactly sigma => weight e^{-1}
        let g1 = two_point_graph(1.0);
        let g2 = two_point_graph(1.5);
        let m = build_affinity(g1.points.view(), g2.points.view(), &g1, &g2, 0.5, UnaryMode::Gaussian).unwrap();
        assert_eq!(m.pattern.len(), 2);
        for &v in &m.values {
            assert!((v - (-1.0f64).exp()).abs() < 1e-15);
        }
    }

    #[test]
    fn unary_modes() {
        let g1 = two_point_graph(1.0);
        let g2 = two_point_graph(1.0);
        let m = build_affinity(g1.points.view(), g2.points.view(), &g1, &g2, 1.0, UnaryMode::Norm).unwrap();
        assert_eq!(m.unary[(0, 0)], 0.0); // identical features => zero distance
        assert!((m.unary[(0, 1)] - 1.0).abs() < 1e-15);
        let g = build_affinity(g1.points.view(), g2.points.view(), &g1, &g2, 1.0, UnaryMode::Gaussian).unwrap();
        assert_eq!(g.unary[(0, 0)], 1.0);
        assert!((g.unary[(0, 1)] - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn koopman_beckmann_single_edge() {
        let a = array![[0.0, 1.0], [1.0, 0.0]];
        let m = koopman_beckmann(a.view(), a.view()).unwrap();
        assert_eq!(m.pattern.len(), 2);
        assert!(m.values.iter().all(|&v| v == 1.0));
        assert!(m.unary.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn koopman_beckmann_equals_kronecker() {
        let mut rng_seed = 3u64;
        for _ in 0..5 {
            rng_seed = rng_seed.wrapping_mul(6364136223846793005).wrapping_add(1);
            let n = 5;
            let mut a1 = Array2::zeros((n, n));
            let mut a2 = Array2::zeros((n, n));
            let mut bits = rng_seed;
            for i in 0..n {
                for j in (i + 1)..n {
                    if bits & 1 == 1 {
                        a1[(i, j)] = 1.0;
                        a1[(j, i)] = 1.0;
                    }
                    if bits & 2 == 2 {
                        a2[(i, j)] = 1.0;
                        a2[(j, i)] = 1.0;
                    }
                    bits = bits.rotate_right(2) ^ 0x9e3779b9;
                }
            }
            let m = koopman_beckmann(a1.view(), a2.view()).unwrap();
            let dense = m.to_dense();
            // oracle: dense Kronecker product, row-major association indexing
            for i in 0..n {
                for j in 0..n {
                    for i2 in 0..n {
                        for j2 in 0..n {
                            let want = a1[(i, i2)] * a2[(j, j2)];
                            assert_eq!(dense[(i * n + j, i2 * n + j2)], want);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn koopman_beckmann_rejects_bad_adjacency() {
        let asym = array![[0.0, 1.0], [0.0, 0.0]];
        assert!(koopman_beckmann(asym.view(), asym.view()).is_err());
        let loops = array![[1.0, 0.0], [0.0, 0.0]];
        assert!(koopman_beckmann(loops.view(), loops.view()).is_err());
        let vals = array![[0.0, 0.5], [0.5, 0.0]];
        assert!(koopman_beckmann(vals.view(), vals.view()).is_err());
    }

    #[test]
    fn pairwise_is_rotation_invariant() {
        let pair = make_pair(&gen_cfg(12, 3, 5)).unwrap();
        let rotated = rotate(&pair.query, 0.9).unwrap();
        let m = build_affinity(
            pair.reference.points.view(),
            pair.query.points.view(),
            &pair.reference,
            &pair.query,
            1.0,
            UnaryMode::Gaussian,
        )
        .unwrap();
        let mr = build_affinity(
            pair.reference.points.view(),
            rotated.points.view(),
            &pair.reference,
            &rotated,
            1.0,
            UnaryMode::Gaussian,
        )
        .unwrap();
        for (a, b) in m.values.iter().zip(&mr.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matvec_matches_dense_oracle() {
        let pair = make_pair(&GenConfig { n_in: 6, n_out: 2, sigma: 0.2, dim: 2, k: 2, seed: 9, rotation_max: 0.0 }).unwrap();
        let m = build_affinity(
            pair.reference.points.view(),
            pair.query.points.view(),
            &pair.reference,
            &pair.query,
            0.8,
            UnaryMode::Gaussian,
        )
        .unwrap();
        let n = m.dim();
        let z: Vec<f64> = (0..n).map(|i| 0.3 + 0.01 * i as f64).collect();
        let got = m.matvec(&z).unwrap();
        let dense = m.to_dense();
        let want = dense.dot(&Array1::from_vec(z.clone()));
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn matvec_rows_is_bit_identical_to_full() {
        let pair = make_pair(&gen_cfg(10, 3, 21)).unwrap();
        let m = build_affinity(
            pair.reference.points.view(),
            pair.query.points.view(),
            &pair.reference,
            &pair.query,
            1.0,
            UnaryMode::Gaussian,
        )
        .unwrap();
        let n = m.dim();
        let z: Vec<f64> = (0..n).map(|i| (i as f64 * 0.71).sin().abs() + 0.1).collect();
        let full = m.matvec(&z).unwrap();
        let rows: Vec<u32> = (0..n as u32).collect();
        let mut partial = Vec::new();
        pattern_matvec_rows(
            &m.pattern,
            m.unary.as_slice().unwrap(),
            &m.values,
            &z,
            &rows,
            &mut partial,
        );
        for (a, b) in full.iter().zip(&partial) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn matvec_length_mismatch_errors() {
        let g = generate_reference(&gen_cfg(5, 2, 1)).unwrap();
        let m = build_affinity(g.points.view(), g.points.view(), &g, &g, 1.0, UnaryMode::Gaussian).unwrap();
        assert!(m.matvec(&vec![1.0; 7]).is_err());
    }

    #[test]
    fn unary_only_matvec_uses_diagonal() {
        let g = Graph::new(array![[0.0, 0.0], [1.0, 0.0]], vec![], 2).unwrap();
        let m = build_affinity(g.points.view(), g.points.view(), &g, &g, 1.0, UnaryMode::Gaussian).unwrap();
        assert!(m.pattern.is_empty());
        let z = vec![1.0, 2.0, 3.0, 4.0];
        let got = m.matvec(&z).unwrap();
        for (r, g) in got.iter().enumerate() {
            let u = m.unary.as_slice().unwrap()[r];
            assert_eq!(*g, u * z[r]);
        }
    }

    #[test]
    fn padding_zeroes_unary() {
        let pair = make_pair(&gen_cfg(6, 2, 2)).unwrap();
        let mut m = build_affinity(
            pair.reference.points.view(),
            pair.query.points.view(),
            &pair.reference,
            &pair.query,
            1.0,
            UnaryMode::Gaussian,
        )
        .unwrap();
        m.set_real_counts(4, 5);
        for i in 0..m.n1() {
            for j in 0..m.n2() {
                if i >= 4 || j >= 5 {
                    assert_eq!(m.unary[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn update_affinity_constants() {
        let pair = make_pair(&gen_cfg(8, 3, 4)).unwrap();
        let base = build_affinity(
            pair.reference.points.view(),
            pair.query.points.view(),
            &pair.reference,
            &pair.query,
            1.0,
            UnaryMode::Gaussian,
        )
        .unwrap();
        let (n1, n2) = (base.n1(), base.n2());
        let c = 3;
        let mut v = Array3::zeros((c, n1, n2));
        for (idx, val) in v.iter_mut().enumerate() {
            *val = ((idx % 17) as f64) * 0.05;
        }
        // w = 0 => all pairwise entries 1
        let m0 = update_affinity(v.view(), &[0.0; 3], &[0.0; 3], &base).unwrap();
        assert!(m0.values.iter().all(|&x| x == 1.0));
        // V constant across (i, j) => pairwise 1 regardless of w
        let vc = Array3::from_elem((c, n1, n2), 0.37);
        let mc = update_affinity(vc.view(), &[0.5, 1.0, 2.0], &[0.0; 3], &base).unwrap();
        assert!(mc.values.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn update_affinity_scalar_oracle() {
        let pair = make_pair(&gen_cfg(7, 2, 10)).unwrap();
        let base = build_affinity(
            pair.reference.points.view(),
            pair.query.points.view(),
            &pair.reference,
            &pair.query,
            1.0,
            UnaryMode::Gaussian,
        )
        .unwrap();
        let (n1, n2) = (base.n1(), base.n2());
        let c = 2;
        let mut v = Array3::zeros((c, n1, n2));
        for (idx, val) in v.iter_mut().enumerate() {
            *val = ((idx * 31 % 13) as f64) * 0.08 - 0.3;
        }
        let w = [0.7, 0.2];
        let u = [0.4, -0.6];
        let m = update_affinity(v.view(), &w, &u, &base).unwrap();
        for e in 0..base.pattern.len() {
            let (a, b) = (base.pattern.row_a[e] as usize, base.pattern.row_b[e] as usize);
            let (ia, ja) = (a / n2, a % n2);
            let (ib, jb) = (b / n2, b % n2);
            let mut acc = 0.0;
            for ch in 0..c {
                let d = v[(ch, ia, ja)] - v[(ch, ib, jb)];
                acc += w[ch] * d * d;
            }
            assert!((m.values[e] - (-acc).exp()).abs() < 1e-14);
        }
        for i in 0..n1 {
            for j in 0..n2 {
                let acc: f64 = (0..c).map(|ch| u[ch] * v[(ch, i, j)]).sum();
                assert!((m.unary[(i, j)] - acc.exp()).abs() < 1e-14);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn matvec_dense_agreement(seed in 0u64..1000, n in 4usize..8, k in 1usize..3) {
            prop_assume!(k < n);
            let cfg = GenConfig { n_in: n, n_out: 1, sigma: 0.15, dim: 2, k, seed, rotation_max: 0.0 };
            let pair = make_pair(&cfg).unwrap();
            let m = build_affinity(
                pair.reference.points.view(),
                pair.query.points.view(),
                &pair.reference,
                &pair.query,
                0.9,
                UnaryMode::Gaussian,
            ).unwrap();
            let dim = m.dim();
            let z: Vec<f64> = (0..dim).map(|i| ((i as f64) * 0.37).cos() + 1.5).collect();
            let got = m.matvec(&z).unwrap();
            let want = m.to_dense().dot(&Array1::from_vec(z));
            for (g, w) in got.iter().zip(want.iter()) {
                prop_assert!((g - w).abs() < 1e-12);
            }
        }
    }
}
