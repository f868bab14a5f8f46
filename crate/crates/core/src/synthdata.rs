//! Synthetic keypoint-correspondence data with planted relational structure,
//! and a plain-text dataset format.
//!
//! Each category has a template: one prototype feature vector and position
//! per keypoint role, plus a planted adjacency linking every keypoint to its
//! nearest prototype neighbours. A sample is two independently perturbed
//! views of one template: a random similarity transform and jitter on the
//! positions, additive noise on the features, an optional smooth
//! "illumination" field that nearby keypoints of a view share, and
//! independent keypoint dropout.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::assignment::PartialMatching;
use crate::attention::PointFeatureSet;
use crate::diffcore::Tensor;
use crate::error::{GlamError, Result};

/// Nearest neighbours per keypoint in the planted adjacency.
pub const PLANTED_NEIGHBORS: usize = 3;

const MAX_PROTOTYPE_TRIES: usize = 10_000;
const MAX_SAMPLE_TRIES: usize = 1_000;
const MIN_POSITION_GAP: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryTemplate {
    pub name: String,
    pub seed: u64,
    pub prototype_features: Tensor,
    pub prototype_positions: Tensor,
    /// Symmetric 0/1 matrix with zero diagonal.
    pub planted_adjacency: Tensor,
    pub labels: Vec<String>,
}

impl CategoryTemplate {
    pub fn n_keypoints(&self) -> usize {
        self.labels.len()
    }

    pub fn feat_dim(&self) -> usize {
        self.prototype_features.cols()
    }

    pub fn info(&self) -> CategoryInfo {
        CategoryInfo {
            name: self.name.clone(),
            labels: self.labels.clone(),
            planted_adjacency: self.planted_adjacency.clone(),
        }
    }
}

/// Default minimum distance between prototype features: half their norm.
pub fn default_margin(d: usize) -> f64 {
    0.5 * (d as f64).sqrt()
}

/// Template with [`default_margin`] and a name derived from the seed.
pub fn make_template(n: usize, d: usize, seed: u64) -> Result<CategoryTemplate> {
    make_template_with(format!("category{seed}"), n, d, seed, default_margin(d))
}

/// Prototype features lie on the sphere of radius `sqrt(d)` and are
/// rejection-sampled to be at least `margin` apart.
pub fn make_template_with(
    name: impl Into<String>,
    n: usize,
    d: usize,
    seed: u64,
    margin: f64,
) -> Result<CategoryTemplate> {
    if n < 2 || d == 0 {
        return Err(GlamError::contract(format!(
            "template needs n ≥ 2 keypoints and d ≥ 1, got n = {n}, d = {d}"
        )));
    }
    let name = name.into();
    if name.is_empty() || name.contains(char::is_whitespace) {
        return Err(GlamError::contract(format!(
            "invalid category name {name:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = (d as f64).sqrt();

    let mut feats: Vec<Vec<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        let mut placed = false;
        for _ in 0..MAX_PROTOTYPE_TRIES {
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            v.iter_mut().for_each(|x| *x *= radius / norm);
            if feats.iter().all(|f| distance(f, &v) >= margin) {
                feats.push(v);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(GlamError::contract(format!(
                "could not place prototype {k} of {n} at margin {margin} in {d} dimensions"
            )));
        }
    }

    let mut positions: Vec<[f64; 2]> = Vec::with_capacity(n);
    while positions.len() < n {
        let p = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
        if positions
            .iter()
            .all(|q| distance(q, &p) >= MIN_POSITION_GAP)
        {
            positions.push(p);
        }
    }

    let k = PLANTED_NEIGHBORS.min(n - 1);
    let mut adj = Tensor::zeros(n, n);
    for i in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| {
            distance(&positions[i], &positions[a])
                .total_cmp(&distance(&positions[i], &positions[b]))
                .then(a.cmp(&b))
        });
        for &j in &others[..k] {
            adj.set(i, j, 1.0);
            adj.set(j, i, 1.0);
        }
    }

    Ok(CategoryTemplate {
        name,
        seed,
        prototype_features: Tensor::matrix(n, d, feats.concat())?,
        prototype_positions: Tensor::matrix(n, 2, positions.iter().flatten().copied().collect())?,
        planted_adjacency: adj,
        labels: (0..n).map(|i| format!("kp{i}")).collect(),
    })
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    /// Standard deviation of additive per-entry feature noise.
    pub feature_noise_sigma: f64,
    /// Standard deviation of position jitter, in template units.
    pub position_noise_sigma: f64,
    /// Rotations are drawn from `[-rotation_range, rotation_range]` radians.
    pub rotation_range: f64,
    /// Scale factors are drawn from `[min, max]`.
    pub scale_range: (f64, f64),
    /// Translations are drawn from `[-translation_range, translation_range]`.
    pub translation_range: f64,
    /// Per-keypoint, per-view probability of being occluded.
    pub dropout_prob: f64,
    pub pairs_per_category: usize,
    /// Per-entry scale of a smooth, per-view feature offset field; nearby
    /// keypoints receive similar offsets.
    pub illumination: f64,
    /// Randomize keypoint order within each view.
    pub shuffle: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            feature_noise_sigma: 0.5,
            position_noise_sigma: 0.02,
            rotation_range: std::f64::consts::FRAC_PI_6,
            scale_range: (0.8, 1.2),
            translation_range: 0.1,
            dropout_prob: 0.0,
            pairs_per_category: 100,
            illumination: 0.0,
            shuffle: true,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let sigmas = [
            self.feature_noise_sigma,
            self.position_noise_sigma,
            self.rotation_range,
            self.translation_range,
            self.illumination,
        ];
        if sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(GlamError::Config(
                "noise levels and ranges must be finite and ≥ 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(GlamError::Config(format!(
                "dropout_prob must lie in [0, 1), got {}",
                self.dropout_prob
            )));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(GlamError::Config(format!(
                "invalid scale range ({lo}, {hi})"
            )));
        }
        Ok(())
    }
}

/// A pair of keypoint sets and the ground truth linking them.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSample {
    pub category: usize,
    pub a: PointFeatureSet,
    pub b: PointFeatureSet,
    pub gt: PartialMatching,
}

/// Template-level metadata kept alongside generated samples.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryInfo {
    pub name: String,
    pub labels: Vec<String>,
    pub planted_adjacency: Tensor,
}

fn mix_seed(parts: [u64; 3]) -> u64 {
    // splitmix64 over the parts
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

struct View {
    /// Template keypoint ids, in output order.
    ids: Vec<usize>,
    set: PointFeatureSet,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn render_view(
    template: &CategoryTemplate,
    cfg: &GenConfig,
    keep: &[usize],
    rng: &mut ChaCha8Rng,
) -> View {
    let d = template.feat_dim();
    let theta = rng.gen_range(-cfg.rotation_range..=cfg.rotation_range);
    let scale = rng.gen_range(cfg.scale_range.0..=cfg.scale_range.1);
    let shift = [
        rng.gen_range(-cfg.translation_range..=cfg.translation_range),
        rng.gen_range(-cfg.translation_range..=cfg.translation_range),
    ];
    let field = (cfg.illumination > 0.0).then(|| IlluminationField::draw(d, cfg.illumination, rng));

    let mut ids = keep.to_vec();
    if cfg.shuffle {
        ids.shuffle(rng);
    }

    let (sin, cos) = theta.sin_cos();
    let mut pos: Vec<[f64; 2]> = ids
        .iter()
        .map(|&k| {
            let x = template.prototype_positions.get(k, 0) + cfg.position_noise_sigma * normal(rng)
                - 0.5;
            let y = template.prototype_positions.get(k, 1) + cfg.position_noise_sigma * normal(rng)
                - 0.5;
            [
                scale * (cos * x - sin * y) + 0.5 + shift[0],
                scale * (sin * x + cos * y) + 0.5 + shift[1],
            ]
        })
        .collect();
    normalize_positions(&mut pos);

    let n = ids.len();
    let mut feats = Vec::with_capacity(n * d);
    for (&k, p) in ids.iter().zip(&pos) {
        let mut f: Vec<f64> = (0..d)
            .map(|j| template.prototype_features.get(k, j) + cfg.feature_noise_sigma * normal(rng))
            .collect();
        if let Some(field) = &field {
            field.add_at(*p, &mut f);
        }
        rescale_to_prototype_norm(&mut f);
        feats.extend(f);
    }
    let set = PointFeatureSet {
        features: Tensor::matrix(n, d, feats).expect("feature shape"),
        positions: Tensor::matrix(n, 2, pos.into_iter().flatten().collect())
            .expect("position shape"),
        labels: Some(ids.iter().map(|&k| template.labels[k].clone()).collect()),
    };
    View { ids, set }
}

const ILLUMINATION_BUMPS: usize = 4;
const ILLUMINATION_WIDTH: f64 = 0.2;

/// A sum of Gaussian bumps over the unit canvas, each carrying a random
/// feature-space offset, so keypoints close together in a view receive
/// similar offsets.
struct IlluminationField {
    centers: Vec<[f64; 2]>,
    offsets: Vec<Vec<f64>>,
}

impl IlluminationField {
    fn draw(d: usize, strength: f64, rng: &mut ChaCha8Rng) -> Self {
        let centers = (0..ILLUMINATION_BUMPS)
            .map(|_| [rng.gen(), rng.gen()])
            .collect();
        let offsets = (0..ILLUMINATION_BUMPS)
            .map(|_| (0..d).map(|_| strength * normal(rng)).collect())
            .collect();
        Self { centers, offsets }
    }

    fn add_at(&self, p: [f64; 2], f: &mut [f64]) {
        for (c, o) in self.centers.iter().zip(&self.offsets) {
            let r2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
            let w = (-r2 / (2.0 * ILLUMINATION_WIDTH * ILLUMINATION_WIDTH)).exp();
            f.iter_mut().zip(o).for_each(|(v, ov)| *v += w * ov);
        }
    }
}

/// Rescales a descriptor to norm `sqrt(d)`, the norm of every prototype, so
/// noise changes direction but not magnitude.
fn rescale_to_prototype_norm(f: &mut [f64]) {
    let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        let k = (f.len() as f64).sqrt() / norm;
        f.iter_mut().for_each(|v| *v *= k);
    }
}

/// Uniformly rescales and shifts points into `[0, 1]²`, preserving shape.
fn normalize_positions(pos: &mut [[f64; 2]]) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in pos.iter() {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    for p in pos.iter_mut() {
        for a in 0..2 {
            p[a] = if extent > 0.0 {
                ((p[a] - lo[a]) / extent).clamp(0.0, 1.0)
            } else {
                0.5
            };
        }
    }
}

/// Draws pair `index` of a template. The result depends only on
/// `(cfg, template.seed, index)`.
pub fn sample_pair(
    template: &CategoryTemplate,
    category: usize,
    cfg: &GenConfig,
    index: u64,
) -> Result<CorrespondenceSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed([cfg.seed, template.seed, index]));
    let n = template.n_keypoints();
    for _ in 0..MAX_SAMPLE_TRIES {
        let keep_a: Vec<usize> = (0..n).filter(|_| !rng.gen_bool(cfg.dropout_prob)).collect();
        let keep_b: Vec<usize> = (0..n).filter(|_| !rng.gen_bool(cfg.dropout_prob)).collect();
        let common = keep_a.iter().filter(|k| keep_b.contains(k)).count();
        if common < 2 {
            continue;
        }
        let va = render_view(template, cfg, &keep_a, &mut rng);
        let vb = render_view(template, cfg, &keep_b, &mut rng);
        let pairs = va
            .ids
            .iter()
            .map(|k| vb.ids.iter().position(|x| x == k))
            .collect();
        return Ok(CorrespondenceSample {
            category,
            gt: PartialMatching::new(pairs, vb.ids.len())?,
            a: va.set,
            b: vb.set,
        });
    }
    Err(GlamError::contract(format!(
        "no pair with two shared keypoints after {MAX_SAMPLE_TRIES} draws (dropout {})",
        cfg.dropout_prob
    )))
}

/// `cfg.pairs_per_category` pairs from each template, category by category.
pub fn generate_dataset(templates: &[CategoryTemplate], cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let feat_dim = templates.first().map_or(0, CategoryTemplate::feat_dim);
    if templates.iter().any(|t| t.feat_dim() != feat_dim) {
        return Err(GlamError::contract(
            "templates disagree on feature dimension",
        ));
    }
    let mut samples = Vec::with_capacity(templates.len() * cfg.pairs_per_category);
    for (c, t) in templates.iter().enumerate() {
        for i in 0..cfg.pairs_per_category {
            samples.push(sample_pair(t, c, cfg, i as u64)?);
        }
    }
    Ok(Dataset {
        feat_dim,
        categories: templates.iter().map(CategoryTemplate::info).collect(),
        samples,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub feat_dim: usize,
    pub categories: Vec<CategoryInfo>,
    pub samples: Vec<CorrespondenceSample>,
}

pub const DATASET_MAGIC: &str = "GLAM-DATASET";
pub const DATASET_VERSION: u32 = 1;

fn write_set(out: &mut String, tag: &str, set: &PointFeatureSet) {
    let _ = writeln!(out, "set {tag} {}", set.len());
    for i in 0..set.len() {
        let label = set.labels.as_ref().map_or("-", |l| l[i].as_str());
        let _ = write!(out, "{label}");
        for v in set.positions.row(i).iter().chain(set.features.row(i)) {
            let _ = write!(out, " {v:?}");
        }
        out.push('\n');
    }
}

impl Dataset {
    /// Text encoding; doubles are written in shortest round-trip form.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{DATASET_MAGIC} {DATASET_VERSION}");
        let _ = writeln!(
            out,
            "feat_dim {} categories {} samples {}",
            self.feat_dim,
            self.categories.len(),
            self.samples.len()
        );
        for c in &self.categories {
            let _ = writeln!(out, "category {} {}", c.name, c.labels.len());
            let _ = writeln!(out, "labels {}", c.labels.join(" "));
            let _ = writeln!(out, "adjacency");
            for i in 0..c.labels.len() {
                let row: Vec<String> = c
                    .planted_adjacency
                    .row(i)
                    .iter()
                    .map(|v| format!("{v:?}"))
                    .collect();
                let _ = writeln!(out, "{}", row.join(" "));
            }
        }
        for (k, s) in self.samples.iter().enumerate() {
            let _ = writeln!(out, "sample {k} category {}", s.category);
            write_set(&mut out, "A", &s.a);
            write_set(&mut out, "B", &s.b);
            let gt: Vec<String> =
                s.gt.pairs()
                    .iter()
                    .map(|p| p.map_or("-1".to_string(), |j| j.to_string()))
                    .collect();
            let _ = writeln!(out, "gt {}", gt.join(" "));
            let _ = writeln!(out, "end");
        }
        out
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        Parser::new(text, origin).dataset()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| GlamError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GlamError::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }
}

struct Parser<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    origin: &'a str,
    line: usize,
    record: String,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str, origin: &'a str) -> Self {
        Self {
            lines: text.lines().enumerate(),
            origin,
            line: 0,
            record: "header".into(),
        }
    }

    fn err(&self, message: impl std::fmt::Display) -> GlamError {
        GlamError::Parse {
            path: self.origin.to_string(),
            line: self.line,
            message: format!("{}: {message}", self.record),
        }
    }

    fn next_tokens(&mut self) -> Result<Vec<&'a str>> {
        match self.lines.next() {
            Some((i, l)) => {
                self.line = i + 1;
                Ok(l.split_whitespace().collect())
            }
            None => {
                self.line += 1;
                Err(self.err("unexpected end of file"))
            }
        }
    }

    fn keyword(&self, toks: &[&str], idx: usize, word: &str) -> Result<()> {
        match toks.get(idx) {
            Some(t) if *t == word => Ok(()),
            Some(t) => Err(self.err(format!("expected `{word}`, found `{t}`"))),
            None => Err(self.err(format!("expected `{word}`, found end of line"))),
        }
    }

    fn num<T: std::str::FromStr>(&self, toks: &[&str], idx: usize, what: &str) -> Result<T> {
        let t = toks
            .get(idx)
            .ok_or_else(|| self.err(format!("missing {what}")))?;
        t.parse()
            .map_err(|_| self.err(format!("invalid {what} `{t}`")))
    }

    fn dataset(mut self) -> Result<Dataset> {
        let t = self.next_tokens()?;
        self.keyword(&t, 0, DATASET_MAGIC)?;
        let version: u32 = self.num(&t, 1, "version")?;
        if version != DATASET_VERSION {
            return Err(self.err(format!("unsupported version {version}")));
        }
        let t = self.next_tokens()?;
        self.keyword(&t, 0, "feat_dim")?;
        let feat_dim: usize = self.num(&t, 1, "feat_dim")?;
        self.keyword(&t, 2, "categories")?;
        let n_cat: usize = self.num(&t, 3, "category count")?;
        self.keyword(&t, 4, "samples")?;
        let n_samples: usize = self.num(&t, 5, "sample count")?;

        let mut categories = Vec::with_capacity(n_cat);
        for c in 0..n_cat {
            self.record = format!("category {c}");
            categories.push(self.category()?);
        }
        let mut samples = Vec::with_capacity(n_samples);
        for k in 0..n_samples {
            self.record = format!("sample {k}");
            samples.push(self.sample(k, feat_dim, n_cat)?);
        }
        self.record = "trailer".into();
        if let Some((i, l)) = self.lines.by_ref().find(|(_, l)| !l.trim().is_empty()) {
            self.line = i + 1;
            return Err(self.err(format!("unexpected content `{}`", l.trim())));
        }
        Ok(Dataset {
            feat_dim,
            categories,
            samples,
        })
    }

    fn category(&mut self) -> Result<CategoryInfo> {
        let t = self.next_tokens()?;
        self.keyword(&t, 0, "category")?;
        let name = t
            .get(1)
            .ok_or_else(|| self.err("missing category name"))?
            .to_string();
        let n: usize = self.num(&t, 2, "keypoint count")?;
        let t = self.next_tokens()?;
        self.keyword(&t, 0, "labels")?;
        if t.len() != n + 1 {
            return Err(self.err(format!("expected {n} labels, found {}", t.len() - 1)));
        }
        let labels = t[1..].iter().map(|s| s.to_string()).collect();
        let t = self.next_tokens()?;
        self.keyword(&t, 0, "adjacency")?;
        let mut values = Vec::with_capacity(n * n);
        for _ in 0..n {
            let t = self.next_tokens()?;
            if t.len() != n {
                return Err(self.err(format!(
                    "adjacency row has {} entries, expected {n}",
                    t.len()
                )));
            }
            for i in 0..n {
                values.push(self.num(&t, i, "adjacency entry")?);
            }
        }
        Ok(CategoryInfo {
            name,
            labels,
            planted_adjacency: Tensor::matrix(n, n, values)?,
        })
    }

    fn set(&mut self, tag: &str, d: usize) -> Result<PointFeatureSet> {
        let t = self.next_tokens()?;
        self.keyword(&t, 0, "set")?;
        self.keyword(&t, 1, tag)?;
        let n: usize = self.num(&t, 2, "keypoint count")?;
        let mut labels = Vec::with_capacity(n);
        let mut pos = Vec::with_capacity(2 * n);
        let mut feats = Vec::with_capacity(d * n);
        for _ in 0..n {
            let t = self.next_tokens()?;
            if t.len() != 3 + d {
                return Err(self.err(format!(
                    "keypoint line in set {tag} has {} fields, expected {}",
                    t.len(),
                    3 + d
                )));
            }
            labels.push(t[0].to_string());
            for i in 1..3 {
                pos.push(self.num(&t, i, "position")?);
            }
            for i in 3..3 + d {
                feats.push(self.num(&t, i, "feature")?);
            }
        }
        let labels = if labels.iter().all(|l| l == "-") {
            None
        } else {
            Some(labels)
        };
        PointFeatureSet::new(
            Tensor::matrix(n, d, feats)?,
            Tensor::matrix(n, 2, pos)?,
            labels,
        )
        .map_err(|e| self.err(e))
    }

    fn sample(&mut self, k: usize, d: usize, n_cat: usize) -> Result<CorrespondenceSample> {
        let t = self.next_tokens()?;
        self.keyword(&t, 0, "sample")?;
        let idx: usize = self.num(&t, 1, "sample index")?;
        if idx != k {
            return Err(self.err(format!("sample index {idx} out of order")));
        }
        self.keyword(&t, 2, "category")?;
        let category: usize = self.num(&t, 3, "category index")?;
        if category >= n_cat {
            return Err(self.err(format!("category {category} out of range")));
        }
        let a = self.set("A", d)?;
        let b = self.set("B", d)?;
        let t = self.next_tokens()?;
        self.keyword(&t, 0, "gt")?;
        if t.len() != a.len() + 1 {
            return Err(self.err(format!(
                "gt has {} entries, expected {}",
                t.len() - 1,
                a.len()
            )));
        }
        let mut pairs = Vec::with_capacity(a.len());
        for i in 1..t.len() {
            let v: i64 = self.num(&t, i, "gt entry")?;
            pairs.push(if v < 0 { None } else { Some(v as usize) });
        }
        let gt = PartialMatching::new(pairs, b.len()).map_err(|e| self.err(e))?;
        let t = self.next_tokens()?;
        self.keyword(&t, 0, "end")?;
        Ok(CorrespondenceSample { category, a, b, gt })
    }
}
