//! End-to-end finite-difference verification of the network gradients.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::assignment::{pad_to_common_size, PartialMatching};
use crate::attention::{forward, GlamParameters, NetworkConfig, PointFeatureSet};
use crate::diffcore::Tensor;
use crate::error::Result;
use crate::training::{loss_and_gradients, weighted_bce_loss, PreparedSample};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckConfig {
    pub n_points: usize,
    pub network: NetworkConfig,
    pub pos_weight: f64,
    pub seed: u64,
    /// Central-difference step.
    pub step: f64,
    /// Largest acceptable relative error.
    pub tolerance: f64,
    /// Denominator floor for the relative error, so entries with vanishing
    /// gradients are judged on absolute error.
    pub floor: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            n_points: 4,
            network: NetworkConfig {
                n_layers: 1,
                n_self_heads: 2,
                n_cross_heads: 2,
                feat_dim: 8,
                self_dim: 8,
                cross_dim: 8,
                sinkhorn_iters: 2,
                use_sal: true,
                use_cal: true,
            },
            pos_weight: 5.0,
            seed: 0,
            step: 1e-5,
            tolerance: 1e-3,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub worst_rel_err: f64,
    pub worst_entry: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.worst_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() < self.tolerance
    }

    pub fn failures(&self) -> Vec<&ParamCheck> {
        self.params
            .iter()
            .filter(|p| !(p.worst_rel_err < self.tolerance))
            .collect()
    }

    /// Worst error per group (`encoder`, `layer0.sal`, ...).
    pub fn by_group(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for p in &self.params {
            let group = match p.name.split('.').collect::<Vec<_>>().as_slice() {
                [first, second, ..] if first.starts_with("layer") => format!("{first}.{second}"),
                [first, ..] => first.to_string(),
                [] => String::new(),
            };
            let e = out.entry(group).or_insert(0.0f64);
            *e = e.max(p.worst_rel_err);
        }
        out
    }
}

/// A random pair: B is a noisy permutation of A.
pub fn random_instance(
    n: usize,
    d: usize,
    rng: &mut impl Rng,
) -> Result<(PointFeatureSet, PointFeatureSet, PartialMatching)> {
    let feats = Tensor::from_fn(n, d, |_, _| StandardNormal.sample(rng));
    let pos = Tensor::from_fn(n, 2, |_, _| rng.gen::<f64>());
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let a = PointFeatureSet::new(feats.clone(), pos.clone(), None)?;
    let b_feats = Tensor::from_fn(n, d, |i, j| {
        let noise: f64 = StandardNormal.sample(rng);
        feats.get(order[i], j) + 0.3 * noise
    });
    let b_pos = Tensor::from_fn(n, 2, |i, j| pos.get(order[i], j));
    let b = PointFeatureSet::new(b_feats, b_pos, None)?;
    // A's keypoint order[i] sits at B row i.
    let mut pairs = vec![None; n];
    for (i, &k) in order.iter().enumerate() {
        pairs[k] = Some(i);
    }
    Ok((a, b, PartialMatching::new(pairs, n)?))
}

fn loss_only(
    params: &GlamParameters,
    config: &NetworkConfig,
    s: &PreparedSample,
    w: f64,
) -> Result<f64> {
    let trace = forward(params, config, &s.a, &s.b)?;
    weighted_bce_loss(&trace.assignment.scores, &s.gt_matrix, Some(&s.mask), w)
}

/// Compares recorded adjoints with central differences for every scalar of
/// every parameter.
pub fn check_gradients(
    params: &GlamParameters,
    config: &NetworkConfig,
    sample: &PreparedSample,
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport> {
    let (_, grads) = loss_and_gradients(params, config, sample, cfg.pos_weight)?;
    let mut probe = params.clone();
    let mut out = Vec::new();
    for (name, t) in params.iter() {
        let analytic = &grads[name];
        let mut worst = ParamCheck {
            name: name.to_string(),
            worst_rel_err: 0.0,
            worst_entry: 0,
        };
        for e in 0..t.len() {
            let orig = t.values()[e];
            probe.get_mut(name).expect("same names").values_mut()[e] = orig + cfg.step;
            let plus = loss_only(&probe, config, sample, cfg.pos_weight)?;
            probe.get_mut(name).expect("same names").values_mut()[e] = orig - cfg.step;
            let minus = loss_only(&probe, config, sample, cfg.pos_weight)?;
            probe.get_mut(name).expect("same names").values_mut()[e] = orig;
            let fd = (plus - minus) / (2.0 * cfg.step);
            let an = analytic[e];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(cfg.floor);
            if !(err <= worst.worst_rel_err) {
                worst.worst_rel_err = err;
                worst.worst_entry = e;
            }
        }
        out.push(worst);
    }
    Ok(GradcheckReport {
        params: out,
        tolerance: cfg.tolerance,
    })
}

/// Builds a random instance and parameters from `cfg.seed` and checks them.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    cfg.network.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = GlamParameters::init(&cfg.network, rng.gen())?;
    let (a, b, gt) = random_instance(cfg.n_points, cfg.network.feat_dim, &mut rng)?;
    let padded = pad_to_common_size(&a, &b, Some(&gt))?;
    let gt = padded.gt.expect("ground truth given");
    let sample = PreparedSample {
        gt_matrix: gt.to_matrix(),
        a: padded.a,
        b: padded.b,
        gt,
        mask: padded.mask,
    };
    check_gradients(&params, &cfg.network, &sample, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_check_passes() {
        let r = run_gradcheck(&GradcheckConfig::default()).unwrap();
        assert!(r.passed(), "worst {}: {:?}", r.worst(), r.failures());
        let groups = r.by_group();
        assert!(groups.contains_key("encoder"));
        assert!(groups.contains_key("layer0.sal"));
        assert!(groups.contains_key("layer0.cal"));
    }

    #[test]
    fn impossible_tolerance_fails() {
        let cfg = GradcheckConfig {
            tolerance: 1e-12,
            ..GradcheckConfig::default()
        };
        assert!(!run_gradcheck(&cfg).unwrap().passed());
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = GradcheckConfig {
            seed: 4,
            ..GradcheckConfig::default()
        };
        assert_eq!(run_gradcheck(&cfg).unwrap(), run_gradcheck(&cfg).unwrap());
    }
}
