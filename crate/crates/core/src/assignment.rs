//! Assignment-space machinery: Sinkhorn normalization, Hungarian
//! discretization, dummy-keypoint padding, the quadratic-assignment score and
//! matching accuracy.

use crate::attention::PointFeatureSet;
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{GlamError, Result};

/// Label given to padding keypoints.
pub const DUMMY_LABEL: &str = "~dummy";

/// Marks padded rows (set A) and padded columns (set B).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DummyMask {
    pub rows: Vec<bool>,
    pub cols: Vec<bool>,
}

impl DummyMask {
    pub fn none(n_rows: usize, n_cols: usize) -> Self {
        Self {
            rows: vec![false; n_rows],
            cols: vec![false; n_cols],
        }
    }

    /// True when nothing is masked.
    pub fn is_empty(&self) -> bool {
        !self.rows.iter().chain(&self.cols).any(|&d| d)
    }

    pub fn is_masked(&self, i: usize, j: usize) -> bool {
        self.rows.get(i).copied().unwrap_or(false) || self.cols.get(j).copied().unwrap_or(false)
    }

    /// 1 for cells that count, 0 for masked cells.
    pub fn weights(&self) -> Tensor {
        Tensor::from_fn(self.rows.len(), self.cols.len(), |i, j| {
            if self.is_masked(i, j) {
                0.0
            } else {
                1.0
            }
        })
    }
}

/// Matrix of match scores, optionally masked.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftAssignment {
    pub scores: Tensor,
    pub mask: Option<DummyMask>,
}

/// A bijection from rows to columns.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Permutation {
    assign: Vec<usize>,
}

impl Permutation {
    pub fn new(assign: Vec<usize>) -> Result<Self> {
        let n = assign.len();
        let mut seen = vec![false; n];
        for &c in &assign {
            if c >= n || std::mem::replace(&mut seen[c], true) {
                return Err(GlamError::contract(format!(
                    "{assign:?} is not a permutation"
                )));
            }
        }
        Ok(Self { assign })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            assign: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.assign.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assign.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.assign
    }

    pub fn column_of(&self, row: usize) -> usize {
        self.assign[row]
    }

    /// Sum of `scores[i][assign[i]]` in row order.
    pub fn total(&self, scores: &Tensor) -> f64 {
        self.assign
            .iter()
            .enumerate()
            .map(|(i, &j)| scores.get(i, j))
            .sum()
    }

    pub fn to_matrix(&self) -> Tensor {
        let n = self.len();
        Tensor::from_fn(n, n, |i, j| if self.assign[i] == j { 1.0 } else { 0.0 })
    }
}

/// Ground-truth correspondences: `pairs[i]` is the B index matched to A's
/// keypoint `i`, if any. No B index appears twice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartialMatching {
    pairs: Vec<Option<usize>>,
    n_cols: usize,
}

impl PartialMatching {
    pub fn new(pairs: Vec<Option<usize>>, n_cols: usize) -> Result<Self> {
        let mut seen = vec![false; n_cols];
        for &j in pairs.iter().flatten() {
            if j >= n_cols || std::mem::replace(&mut seen[j], true) {
                return Err(GlamError::contract(format!(
                    "ground truth {pairs:?} is not a partial bijection onto {n_cols} columns"
                )));
            }
        }
        Ok(Self { pairs, n_cols })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            pairs: (0..n).map(Some).collect(),
            n_cols: n,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.pairs.len()
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn pairs(&self) -> &[Option<usize>] {
        &self.pairs
    }

    pub fn matched_count(&self) -> usize {
        self.pairs.iter().flatten().count()
    }

    pub fn to_matrix(&self) -> Tensor {
        Tensor::from_fn(self.pairs.len(), self.n_cols, |i, j| {
            if self.pairs[i] == Some(j) {
                1.0
            } else {
                0.0
            }
        })
    }
}

fn check_positive(m: &Tensor) -> Result<()> {
    if !m.is_matrix() {
        return Err(GlamError::contract("sinkhorn input must be a matrix"));
    }
    if let Some(v) = m.values().iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(GlamError::contract(format!(
            "sinkhorn input must be strictly positive and finite, found {v}"
        )));
    }
    Ok(())
}

fn normalize_rows(m: &mut Tensor) {
    let c = m.cols();
    for row in m.values_mut().chunks_mut(c) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
}

fn normalize_cols(m: &mut Tensor) {
    let (r, c) = (m.rows(), m.cols());
    let mut sums = vec![0.0; c];
    for i in 0..r {
        for (s, v) in sums.iter_mut().zip(m.row(i)) {
            *s += v;
        }
    }
    for row in m.values_mut().chunks_mut(c) {
        row.iter_mut().zip(&sums).for_each(|(v, s)| *v /= s);
    }
}

/// `iters` rounds of row then column normalization, followed by one final
/// row normalization so every row sums to one.
pub fn sinkhorn_normalize(m: &Tensor, iters: usize) -> Result<Tensor> {
    check_positive(m)?;
    let mut out = m.clone();
    for _ in 0..iters {
        normalize_rows(&mut out);
        normalize_cols(&mut out);
    }
    normalize_rows(&mut out);
    Ok(out)
}

/// Runs Sinkhorn rounds until no entry moves by more than `tol` in a round
/// (or `max_iters` rounds pass). Returns the matrix and the rounds used.
pub fn sinkhorn_until_converged(m: &Tensor, tol: f64, max_iters: usize) -> Result<(Tensor, usize)> {
    check_positive(m)?;
    let mut out = m.clone();
    normalize_rows(&mut out);
    for round in 1..=max_iters {
        let prev = out.clone();
        normalize_cols(&mut out);
        normalize_rows(&mut out);
        if out.max_abs_diff(&prev) <= tol {
            return Ok((out, round));
        }
    }
    Ok((out, max_iters))
}

/// Sinkhorn normalization recorded on a tape, with the same iteration order
/// as [`sinkhorn_normalize`]. The input must already be strictly positive.
pub fn sinkhorn_on_tape(tape: &mut Tape, m: Var, iters: usize) -> Result<Var> {
    let mut x = m;
    for _ in 0..iters {
        x = tape.row_normalize(x)?;
        x = tape.col_normalize(x)?;
    }
    Ok(tape.row_normalize(x)?)
}

/// Maximum-score linear assignment.
///
/// Solves the equivalent minimization over `max(scores) - scores` with the
/// O(n³) shortest-augmenting-path method, then picks, among all optimal
/// assignments, the lexicographically smallest one (lowest row first, lowest
/// column first).
pub fn hungarian(scores: &Tensor) -> Result<Permutation> {
    if !scores.is_matrix() || scores.rows() != scores.cols() {
        return Err(GlamError::contract(format!(
            "hungarian needs a square matrix, got {:?}",
            scores.shape()
        )));
    }
    if !scores.is_finite() {
        return Err(GlamError::contract("hungarian needs finite scores"));
    }
    let n = scores.rows();
    if n == 0 {
        return Ok(Permutation { assign: vec![] });
    }
    let max = scores
        .values()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let min = scores
        .values()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let cost = |i: usize, j: usize| max - scores.get(i, j);

    // Potentials and matching, 1-based with column 0 as the virtual root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
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

    // Every optimal assignment is a perfect matching on zero-reduced-cost
    // cells of the optimal dual. Pick the lexicographically smallest one.
    let tol = 1e-12 * (1.0 + (max - min)) * n as f64;
    let tight: Vec<Vec<bool>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| cost(i, j) - u[i + 1] - v[j + 1] <= tol)
                .collect()
        })
        .collect();
    let mut assign = vec![usize::MAX; n];
    let mut col_used = vec![false; n];
    for i in 0..n {
        let mut fixed = false;
        for j in 0..n {
            if col_used[j] || !tight[i][j] {
                continue;
            }
            col_used[j] = true;
            if completes(&tight, i + 1, &col_used) {
                assign[i] = j;
                fixed = true;
                break;
            }
            col_used[j] = false;
        }
        if !fixed {
            // Rounding left the tight graph without a perfect matching; fall
            // back to the augmenting-path solution.
            let mut fallback = vec![0; n];
            for j in 1..=n {
                fallback[p[j] - 1] = j - 1;
            }
            return Ok(Permutation { assign: fallback });
        }
    }
    Ok(Permutation { assign })
}

/// Whether rows `from..n` can be perfectly matched to unused columns along
/// tight cells (Kuhn's augmenting paths).
fn completes(tight: &[Vec<bool>], from: usize, col_used: &[bool]) -> bool {
    let n = tight.len();
    let mut owner: Vec<Option<usize>> = vec![None; n];

    fn augment(
        r: usize,
        tight: &[Vec<bool>],
        col_used: &[bool],
        owner: &mut [Option<usize>],
        seen: &mut [bool],
    ) -> bool {
        for c in 0..tight.len() {
            if col_used[c] || !tight[r][c] || seen[c] {
                continue;
            }
            seen[c] = true;
            if owner[c].is_none_or(|o| augment(o, tight, col_used, owner, seen)) {
                owner[c] = Some(r);
                return true;
            }
        }
        false
    }

    (from..n).all(|r| {
        let mut seen = vec![false; n];
        augment(r, tight, col_used, &mut owner, &mut seen)
    })
}

/// Result of [`pad_to_common_size`].
#[derive(Debug, Clone, PartialEq)]
pub struct Padded {
    pub a: PointFeatureSet,
    pub b: PointFeatureSet,
    pub gt: Option<PartialMatching>,
    pub mask: DummyMask,
}

fn pad_set(set: &PointFeatureSet, n: usize) -> PointFeatureSet {
    let extra = n - set.len();
    if extra == 0 {
        return set.clone();
    }
    let d = set.feat_dim();
    let mut features = set.features.values().to_vec();
    features.extend(std::iter::repeat_n(0.0, extra * d));
    let mut positions = set.positions.values().to_vec();
    for _ in 0..extra {
        positions.extend_from_slice(&[0.5, 0.5]);
    }
    let labels = set.labels.as_ref().map(|l| {
        let mut l = l.clone();
        l.extend(std::iter::repeat_n(DUMMY_LABEL.to_string(), extra));
        l
    });
    PointFeatureSet {
        features: Tensor::matrix(n, d, features).expect("padded feature shape"),
        positions: Tensor::matrix(n, 2, positions).expect("padded position shape"),
        labels,
    }
}

/// Appends dummy keypoints (zero features, centroid positions) to the
/// smaller set so both have the same size.
pub fn pad_to_common_size(
    a: &PointFeatureSet,
    b: &PointFeatureSet,
    gt: Option<&PartialMatching>,
) -> Result<Padded> {
    if a.feat_dim() != b.feat_dim() {
        return Err(GlamError::contract(format!(
            "feature dimensions differ: {} vs {}",
            a.feat_dim(),
            b.feat_dim()
        )));
    }
    if let Some(g) = gt {
        if g.n_rows() != a.len() || g.n_cols() != b.len() {
            return Err(GlamError::contract(format!(
                "ground truth is {}x{}, sets have {} and {} keypoints",
                g.n_rows(),
                g.n_cols(),
                a.len(),
                b.len()
            )));
        }
    }
    let n = a.len().max(b.len());
    let mask = DummyMask {
        rows: (0..n).map(|i| i >= a.len()).collect(),
        cols: (0..n).map(|j| j >= b.len()).collect(),
    };
    let gt = gt.map(|g| {
        let mut pairs = g.pairs().to_vec();
        pairs.resize(n, None);
        PartialMatching { pairs, n_cols: n }
    });
    Ok(Padded {
        a: pad_set(a, n),
        b: pad_set(b, n),
        gt,
        mask,
    })
}

/// Quadratic-assignment objective `Σ c_ia X_ia + Σ d_{ia,jb} X_ia X_jb`
/// evaluated at a discrete assignment. `pairwise(i, a, j, b)` returns
/// `d_{ia,jb}`.
pub fn qap_score(
    x: &Permutation,
    unary: &Tensor,
    pairwise: impl Fn(usize, usize, usize, usize) -> f64,
) -> Result<f64> {
    let n = x.len();
    if unary.rows() != n || unary.cols() != n {
        return Err(GlamError::contract(format!(
            "unary is {:?}, assignment has {n} rows",
            unary.shape()
        )));
    }
    let linear = x.total(unary);
    let mut quadratic = 0.0;
    for (i, &a) in x.as_slice().iter().enumerate() {
        for (j, &b) in x.as_slice().iter().enumerate() {
            quadratic += pairwise(i, a, j, b);
        }
    }
    Ok(linear + quadratic)
}

/// Fraction of non-dummy ground-truth matches reproduced by `pred`.
/// Returns 1 when there is nothing to match.
pub fn matching_accuracy(
    pred: &Permutation,
    gt: &PartialMatching,
    mask: Option<&DummyMask>,
) -> Result<f64> {
    if pred.len() != gt.n_rows() {
        return Err(GlamError::contract(format!(
            "prediction has {} rows, ground truth {}",
            pred.len(),
            gt.n_rows()
        )));
    }
    let (mut total, mut correct) = (0usize, 0usize);
    for (i, pair) in gt.pairs().iter().enumerate() {
        let Some(j) = *pair else { continue };
        if mask.is_some_and(|m| m.is_masked(i, j)) {
            continue;
        }
        total += 1;
        if pred.column_of(i) == j {
            correct += 1;
        }
    }
    Ok(if total == 0 {
        1.0
    } else {
        correct as f64 / total as f64
    })
}
