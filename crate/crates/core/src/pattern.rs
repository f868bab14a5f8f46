//! Learnt graph patterns: head-averaged last-layer self-attention, averaged
//! per category over a shared keypoint-label universe.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::attention::ForwardTrace;
use crate::diffcore::Tensor;
use crate::error::{GlamError, Result};
use crate::synthdata::CategoryInfo;

/// Which view of a pair to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Image {
    A,
    B,
}

/// Category-level weighted adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct LearntPattern {
    pub adjacency: Tensor,
    /// Number of samples contributing to each cell.
    pub counts: Tensor,
    pub labels: Vec<String>,
}

impl LearntPattern {
    pub fn size(&self) -> usize {
        self.labels.len()
    }

    /// Cells no sample covered.
    pub fn uncovered(&self) -> Vec<(usize, usize)> {
        let n = self.size();
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.counts.get(i, j) == 0.0)
            .collect()
    }
}

/// Average over heads of the last layer's self-attention for one image.
pub fn extract_sample_adjacency(trace: &ForwardTrace, image: Image) -> Result<Tensor> {
    let last = trace.self_attn.last().ok_or_else(|| {
        GlamError::contract("trace has no self-attention (self-attention disabled?)")
    })?;
    let heads = match image {
        Image::A => &last.a,
        Image::B => &last.b,
    };
    let first = heads
        .first()
        .ok_or_else(|| GlamError::contract("trace has no self-attention heads"))?;
    let mut acc = first.clone();
    for h in &heads[1..] {
        acc.values_mut()
            .iter_mut()
            .zip(h.values())
            .for_each(|(a, b)| *a += b);
    }
    let k = heads.len() as f64;
    acc.values_mut().iter_mut().for_each(|v| *v /= k);
    Ok(acc)
}

/// One per-image adjacency with the label of each row; `None` marks a
/// padding row to skip.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleAdjacency {
    pub matrix: Tensor,
    pub labels: Vec<Option<String>>,
}

/// Scatters every sample into the `labels` universe and averages each cell
/// over the samples that cover it.
pub fn aggregate_category(labels: &[String], samples: &[SampleAdjacency]) -> Result<LearntPattern> {
    let n = labels.len();
    let index: HashMap<&str, usize> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let mut sum = Tensor::zeros(n, n);
    let mut counts = Tensor::zeros(n, n);
    for s in samples {
        let m = s.labels.len();
        if s.matrix.rows() != m || s.matrix.cols() != m {
            return Err(GlamError::contract(format!(
                "adjacency {:?} does not match {m} labels",
                s.matrix.shape()
            )));
        }
        let slots: Vec<Option<usize>> = s
            .labels
            .iter()
            .map(|l| match l {
                None => Ok(None),
                Some(l) => index
                    .get(l.as_str())
                    .copied()
                    .map(Some)
                    .ok_or_else(|| GlamError::UnknownLabel(l.clone())),
            })
            .collect::<Result<_>>()?;
        for (i, si) in slots.iter().enumerate() {
            let Some(si) = *si else { continue };
            for (j, sj) in slots.iter().enumerate() {
                let Some(sj) = *sj else { continue };
                sum.set(si, sj, sum.get(si, sj) + s.matrix.get(i, j));
                counts.set(si, sj, counts.get(si, sj) + 1.0);
            }
        }
    }
    let adjacency = Tensor::from_fn(n, n, |i, j| {
        let c = counts.get(i, j);
        if c > 0.0 {
            sum.get(i, j) / c
        } else {
            0.0
        }
    });
    Ok(LearntPattern {
        adjacency,
        counts,
        labels: labels.to_vec(),
    })
}

/// Keeps the `ceil(keep_fraction · E)` heaviest undirected edges among the
/// `E` covered off-diagonal pairs, where an edge weighs the larger of its two
/// directed cells. Edges tied with the weakest survivor are kept as well.
/// The diagonal is left untouched.
pub fn filter_top_edges(pattern: &LearntPattern, keep_fraction: f64) -> Result<LearntPattern> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(GlamError::contract(format!(
            "keep_fraction must lie in (0, 1], got {keep_fraction}"
        )));
    }
    let n = pattern.size();
    let a = &pattern.adjacency;
    let mut edges: Vec<(usize, usize, f64)> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if pattern.counts.get(i, j) > 0.0 || pattern.counts.get(j, i) > 0.0 {
                edges.push((i, j, a.get(i, j).max(a.get(j, i))));
            }
        }
    }
    let mut out = pattern.clone();
    if edges.is_empty() {
        return Ok(out);
    }
    let keep = ((keep_fraction * edges.len() as f64) - 1e-9)
        .ceil()
        .max(1.0) as usize;
    let mut weights: Vec<f64> = edges.iter().map(|e| e.2).collect();
    weights.sort_by(|x, y| y.total_cmp(x));
    let cut = weights[keep.min(weights.len()) - 1];
    for &(i, j, w) in &edges {
        if w < cut {
            out.adjacency.set(i, j, 0.0);
            out.adjacency.set(j, i, 0.0);
        }
    }
    Ok(out)
}

/// Graymap intensity for each cell: the largest value is 0 (darkest), zero
/// is 255, and a constant matrix is uniformly 128.
pub fn heatmap_intensities(pattern: &LearntPattern) -> Vec<u8> {
    let v = pattern.adjacency.values();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    if v.is_empty() || max == min || max <= 0.0 {
        return vec![128; v.len()];
    }
    v.iter()
        .map(|x| (255.0 * (1.0 - (x / max).clamp(0.0, 1.0))).round() as u8)
        .collect()
}

pub fn heatmap_csv(pattern: &LearntPattern) -> String {
    let mut out = pattern.labels.join(",");
    out.push('\n');
    for i in 0..pattern.size() {
        let row: Vec<String> = pattern
            .adjacency
            .row(i)
            .iter()
            .map(|v| format!("{v:?}"))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Parses [`heatmap_csv`] output back into labels and a matrix.
pub fn parse_heatmap_csv(text: &str, origin: &str) -> Result<(Vec<String>, Tensor)> {
    let perr = |line: usize, message: String| GlamError::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    let mut lines = text.lines();
    let labels: Vec<String> = lines
        .next()
        .ok_or_else(|| perr(1, "missing header".into()))?
        .split(',')
        .map(str::to_string)
        .collect();
    let n = labels.len();
    let mut values = Vec::with_capacity(n * n);
    for i in 0..n {
        let line = lines
            .next()
            .ok_or_else(|| perr(i + 2, "missing row".into()))?;
        let row: Vec<&str> = line.split(',').collect();
        if row.len() != n {
            return Err(perr(i + 2, format!("{} fields, expected {n}", row.len())));
        }
        for f in row {
            values.push(
                f.parse()
                    .map_err(|_| perr(i + 2, format!("invalid number `{f}`")))?,
            );
        }
    }
    Ok((labels, Tensor::matrix(n, n, values)?))
}

pub fn heatmap_pgm(pattern: &LearntPattern) -> String {
    let n = pattern.size();
    let mut out = format!("P2\n{n} {n}\n255\n");
    for row in heatmap_intensities(pattern).chunks(n.max(1)) {
        let cells: Vec<String> = row.iter().map(u8::to_string).collect();
        let _ = writeln!(out, "{}", cells.join(" "));
    }
    out
}

/// Writes `<base>.csv` and `<base>.pgm`; returns both paths.
pub fn export_heatmap(pattern: &LearntPattern, base: &Path) -> Result<(PathBuf, PathBuf)> {
    let csv = base.with_extension("csv");
    let pgm = base.with_extension("pgm");
    std::fs::write(&csv, heatmap_csv(pattern)).map_err(|e| GlamError::io(&csv, e))?;
    std::fs::write(&pgm, heatmap_pgm(pattern)).map_err(|e| GlamError::io(&pgm, e))?;
    Ok((csv, pgm))
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    let tiny = |s: f64, v: &[f64]| {
        s <= 1e-20 * v.iter().map(|a| a * a).sum::<f64>().max(f64::MIN_POSITIVE)
    };
    if tiny(sxx, x) || tiny(syy, y) {
        return Err(GlamError::contract(
            "correlation undefined for zero-variance input",
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn upper_pairs(m: &Tensor, order: &[usize]) -> Vec<f64> {
    let n = order.len();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (order[i], order[j]);
            out.push(m.get(a, b).max(m.get(b, a)));
        }
    }
    out
}

fn check_universe(pattern: &LearntPattern, category: &CategoryInfo) -> Result<()> {
    if pattern.labels != category.labels {
        return Err(GlamError::contract(format!(
            "pattern labels {:?} differ from category `{}` labels",
            pattern.labels, category.name
        )));
    }
    if pattern.size() < 3 {
        return Err(GlamError::contract(
            "need at least three keypoints to correlate edges",
        ));
    }
    Ok(())
}

/// Pearson correlation between the symmetrized off-diagonal pattern weights
/// and the planted adjacency.
pub fn pattern_recovery_score(pattern: &LearntPattern, category: &CategoryInfo) -> Result<f64> {
    check_universe(pattern, category)?;
    let id: Vec<usize> = (0..pattern.size()).collect();
    pearson(
        &upper_pairs(&pattern.adjacency, &id),
        &upper_pairs(&category.planted_adjacency, &id),
    )
}

/// Recovery scores with the pattern's labels randomly permuted, `trials`
/// times. Scores for degenerate permutations are skipped.
pub fn permutation_null(
    pattern: &LearntPattern,
    category: &CategoryInfo,
    trials: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    check_universe(pattern, category)?;
    let n = pattern.size();
    let id: Vec<usize> = (0..n).collect();
    let planted = upper_pairs(&category.planted_adjacency, &id);
    let mut order = id.clone();
    let mut out = Vec::with_capacity(trials);
    for _ in 0..trials {
        order.shuffle(rng);
        if let Ok(r) = pearson(&upper_pairs(&pattern.adjacency, &order), &planted) {
            out.push(r);
        }
    }
    Ok(out)
}

/// Empirical `q`-quantile (nearest rank) of `values`.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Some(v[rank - 1])
}
