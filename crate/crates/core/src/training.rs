//! Weighted cross-entropy loss, optimizers, the training loop and
//! evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{
    hungarian, matching_accuracy, pad_to_common_size, DummyMask, PartialMatching,
};
use crate::attention::{
    forward_on_tape, BoundParams, Glam, GlamParameters, NetworkConfig, PointFeatureSet,
};
use crate::diffcore::{Tape, Tensor, Var, LOG_FLOOR};
use crate::error::{GlamError, Result};
use crate::synthdata::CorrespondenceSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    PlainGradient,
    AdaptiveMoment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the positive (matched) entries in the loss.
    pub pos_weight: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pos_weight: 5.0,
            learning_rate: 1e-3,
            epochs: 20,
            seed: 0,
            optimizer: OptimizerKind::AdaptiveMoment,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pos_weight > 0.0) {
            return Err(GlamError::Config(format!(
                "pos_weight must be positive, got {}",
                self.pos_weight
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(GlamError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Statistics of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,accuracy,seconds\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{}", e.epoch, e.loss, e.accuracy, e.seconds);
        }
        out
    }
}

/// `-Σ [w·g·ln x + (1-g)·ln(1-x)]` over unmasked cells, with both log
/// arguments floored at [`LOG_FLOOR`].
pub fn weighted_bce_loss(x: &Tensor, gt: &Tensor, mask: Option<&DummyMask>, w: f64) -> Result<f64> {
    if x.shape() != gt.shape() || !x.is_matrix() {
        return Err(GlamError::contract(format!(
            "loss needs matching matrices, got {:?} and {:?}",
            x.shape(),
            gt.shape()
        )));
    }
    let mut total = 0.0;
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            if mask.is_some_and(|m| m.is_masked(i, j)) {
                continue;
            }
            let (p, g) = (x.get(i, j), gt.get(i, j));
            total -= w * g * p.max(LOG_FLOOR).ln() + (1.0 - g) * (1.0 - p).max(LOG_FLOOR).ln();
        }
    }
    Ok(total)
}

/// [`weighted_bce_loss`] recorded on a tape.
pub fn weighted_bce_on_tape(
    tape: &mut Tape,
    x: Var,
    gt: &Tensor,
    mask: Option<&DummyMask>,
    w: f64,
) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    if shape != gt.shape() {
        return Err(GlamError::contract(format!(
            "loss needs matching matrices, got {shape:?} and {:?}",
            gt.shape()
        )));
    }
    let keep = mask.map_or_else(
        || Tensor::filled(gt.rows(), gt.cols(), 1.0),
        DummyMask::weights,
    );
    let pos: Vec<f64> = gt
        .values()
        .iter()
        .zip(keep.values())
        .map(|(g, k)| w * g * k)
        .collect();
    let neg: Vec<f64> = gt
        .values()
        .iter()
        .zip(keep.values())
        .map(|(g, k)| (1.0 - g) * k)
        .collect();
    let pos = tape.constant(Tensor::new(shape.clone(), pos)?);
    let neg = tape.constant(Tensor::new(shape, neg)?);
    let log_x = tape.log(x);
    let neg_x = tape.scale(x, -1.0);
    let one_minus = tape.add_scalar(neg_x, 1.0);
    let log_1mx = tape.log(one_minus);
    let a = tape.mul(pos, log_x)?;
    let b = tape.mul(neg, log_1mx)?;
    let s = tape.add(a, b)?;
    let total = tape.sum(s);
    Ok(tape.scale(total, -1.0))
}

/// Gradient of the loss for every parameter, keyed by parameter name.
pub type Gradients = BTreeMap<String, Vec<f64>>;

/// A sample padded to a common size, ready for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub a: PointFeatureSet,
    pub b: PointFeatureSet,
    pub gt: PartialMatching,
    pub gt_matrix: Tensor,
    pub mask: DummyMask,
}

impl PreparedSample {
    pub fn new(sample: &CorrespondenceSample) -> Result<Self> {
        let padded = pad_to_common_size(&sample.a, &sample.b, Some(&sample.gt))?;
        let gt = padded.gt.expect("ground truth was supplied");
        Ok(Self {
            gt_matrix: gt.to_matrix(),
            a: padded.a,
            b: padded.b,
            gt,
            mask: padded.mask,
        })
    }
}

/// Loss and parameter gradients for one sample.
pub fn loss_and_gradients(
    params: &GlamParameters,
    config: &NetworkConfig,
    sample: &PreparedSample,
    pos_weight: f64,
) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, true);
    let trace = forward_on_tape(&mut tape, &bound, config, &sample.a, &sample.b)?;
    let loss = weighted_bce_on_tape(
        &mut tape,
        trace.assignment,
        &sample.gt_matrix,
        Some(&sample.mask),
        pos_weight,
    )?;
    tape.backward(loss)?;
    let grads = bound
        .iter()
        .map(|(name, v)| {
            let g = tape
                .grad(v)
                .map_or_else(|| vec![0.0; tape.value(v).len()], <[f64]>::to_vec);
            (name.to_string(), g)
        })
        .collect();
    Ok((tape.value(loss).item(), grads))
}

/// Parameter update rule with per-parameter state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            kind: config.optimizer,
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one update. Every parameter must have a gradient.
    pub fn step(&mut self, params: &mut GlamParameters, grads: &Gradients) -> Result<()> {
        for name in params.names() {
            let g = grads.get(name).ok_or_else(|| {
                GlamError::contract(format!("no gradient for parameter `{name}`"))
            })?;
            if g.len() != params.get(name)?.len() {
                return Err(GlamError::contract(format!(
                    "gradient for `{name}` has {} entries, parameter has {}",
                    g.len(),
                    params.get(name)?.len()
                )));
            }
        }
        self.steps += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::PlainGradient => {
                for (name, t) in params.iter_mut() {
                    for (p, g) in t.values_mut().iter_mut().zip(&grads[name]) {
                        *p -= lr * g;
                    }
                }
            }
            OptimizerKind::AdaptiveMoment => {
                let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
                let c1 = 1.0 - b1.powi(self.steps);
                let c2 = 1.0 - b2.powi(self.steps);
                for (name, t) in params.iter_mut() {
                    let (m, v) = self
                        .moments
                        .entry(name.to_string())
                        .or_insert_with(|| (vec![0.0; t.len()], vec![0.0; t.len()]));
                    for (((p, g), mi), vi) in t
                        .values_mut()
                        .iter_mut()
                        .zip(&grads[name])
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *mi = b1 * *mi + (1.0 - b1) * g;
                        *vi = b2 * *vi + (1.0 - b2) * g * g;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        *p -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Anything that produces a soft assignment for a pair of equal-size sets.
pub trait Matcher {
    fn soft_assignment(&self, a: &PointFeatureSet, b: &PointFeatureSet) -> Result<Tensor>;
}

impl Matcher for Glam {
    fn soft_assignment(&self, a: &PointFeatureSet, b: &PointFeatureSet) -> Result<Tensor> {
        Ok(self.forward(a, b)?.assignment.scores)
    }
}

/// Hungarian-discretized accuracy on one sample.
pub fn sample_accuracy(matcher: &impl Matcher, sample: &CorrespondenceSample) -> Result<f64> {
    let prepared = PreparedSample::new(sample)?;
    prepared_accuracy(matcher, &prepared)
}

fn prepared_accuracy(matcher: &impl Matcher, s: &PreparedSample) -> Result<f64> {
    let x = matcher.soft_assignment(&s.a, &s.b)?;
    let pred = hungarian(&x)?;
    matching_accuracy(&pred, &s.gt, Some(&s.mask))
}

/// Mean Hungarian-discretized matching accuracy over `samples`.
pub fn evaluate(matcher: &impl Matcher, samples: &[CorrespondenceSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(GlamError::contract("cannot evaluate on an empty set"));
    }
    let mut total = 0.0;
    for s in samples {
        total += sample_accuracy(matcher, s)?;
    }
    Ok(total / samples.len() as f64)
}

/// Trains with one sample per update, visiting the training set in a
/// seeded random order each epoch.
pub fn train(
    params: GlamParameters,
    net_config: &NetworkConfig,
    train_set: &[CorrespondenceSample],
    val_set: &[CorrespondenceSample],
    config: &TrainConfig,
) -> Result<(GlamParameters, TrainReport)> {
    train_with_observer(params, net_config, train_set, val_set, config, |_| {})
}

/// [`train`] calling `observer` after each epoch.
pub fn train_with_observer(
    mut params: GlamParameters,
    net_config: &NetworkConfig,
    train_set: &[CorrespondenceSample],
    val_set: &[CorrespondenceSample],
    config: &TrainConfig,
    mut observer: impl FnMut(&EpochStats),
) -> Result<(GlamParameters, TrainReport)> {
    net_config.validate()?;
    config.validate()?;
    params.validate_against(net_config)?;
    if config.epochs == 0 {
        return Ok((params, TrainReport::default()));
    }
    if train_set.is_empty() || val_set.is_empty() {
        return Err(GlamError::contract(
            "training and validation sets must be non-empty",
        ));
    }
    let train: Vec<PreparedSample> = train_set
        .iter()
        .map(PreparedSample::new)
        .collect::<Result<_>>()?;
    let val: Vec<PreparedSample> = val_set
        .iter()
        .map(PreparedSample::new)
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = Optimizer::new(config);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport::default();
    for epoch in 0..config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for &idx in &order {
            let (loss, grads) =
                loss_and_gradients(&params, net_config, &train[idx], config.pos_weight)?;
            if !loss.is_finite() || grads.values().flatten().any(|g| !g.is_finite()) {
                return Err(GlamError::Divergence {
                    epoch,
                    sample: idx,
                    loss,
                });
            }
            loss_sum += loss;
            optimizer.step(&mut params, &grads)?;
        }
        let glam = Glam {
            config: net_config.clone(),
            params,
        };
        let mut acc = 0.0;
        for s in &val {
            acc += prepared_accuracy(&glam, s)?;
        }
        params = glam.params;
        let stats = EpochStats {
            epoch,
            loss: loss_sum / train.len() as f64,
            accuracy: acc / val.len() as f64,
            seconds: start.elapsed().as_secs_f64(),
        };
        observer(&stats);
        report.epochs.push(stats);
    }
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn loss_examples() {
        let id = Tensor::identity(3);
        assert_eq!(weighted_bce_loss(&id, &id, None, 5.0).unwrap(), 0.0);
        let half = Tensor::from_rows(&[[0.5]]);
        let one = Tensor::from_rows(&[[1.0]]);
        let zero = Tensor::from_rows(&[[0.0]]);
        let pos = weighted_bce_loss(&half, &one, None, 5.0).unwrap();
        assert!((pos - 5.0 * 2f64.ln()).abs() < 1e-12);
        assert!((pos - 3.465736).abs() < 1e-6);
        let neg = weighted_bce_loss(&half, &zero, None, 5.0).unwrap();
        assert!((neg - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_ignores_masked_cells() {
        let x = Tensor::from_rows(&[[0.9, 0.1], [0.3, 0.7]]);
        let gt = Tensor::identity(2);
        let mask = DummyMask {
            rows: vec![false, true],
            cols: vec![false, false],
        };
        let masked = weighted_bce_loss(&x, &gt, Some(&mask), 2.0).unwrap();
        let expected = -(2.0 * 0.9f64.ln() + 0.9f64.ln());
        assert!((masked - expected).abs() < 1e-12);
    }

    #[test]
    fn tape_loss_matches_plain_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn(4, 4, |_, _| rng.gen_range(0.05..0.95));
        let gt = Tensor::identity(4);
        let mask = DummyMask {
            rows: vec![false, false, false, true],
            cols: vec![false; 4],
        };
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let l = weighted_bce_on_tape(&mut tape, xv, &gt, Some(&mask), 5.0).unwrap();
        let plain = weighted_bce_loss(&x, &gt, Some(&mask), 5.0).unwrap();
        assert!((tape.value(l).item() - plain).abs() < 1e-12);
        tape.backward(l).unwrap();
        let grad = tape.grad(xv).unwrap().to_vec();
        let h = 1e-6;
        for e in 0..16 {
            let mut p = x.clone();
            p.values_mut()[e] += h;
            let mut m = x.clone();
            m.values_mut()[e] -= h;
            let fd = (weighted_bce_loss(&p, &gt, Some(&mask), 5.0).unwrap()
                - weighted_bce_loss(&m, &gt, Some(&mask), 5.0).unwrap())
                / (2.0 * h);
            let denom = fd.abs().max(grad[e].abs()).max(1e-12);
            assert!(
                (fd - grad[e]).abs() / denom < 1e-6 || (fd - grad[e]).abs() < 1e-10,
                "entry {e}: {fd} vs {}",
                grad[e]
            );
        }
    }

    fn scalar_params(v: f64) -> GlamParameters {
        let mut p = GlamParameters::from_tensors(BTreeMap::new());
        p.insert("w", Tensor::scalar(v));
        p
    }

    #[test]
    fn plain_step_arithmetic() {
        let cfg = TrainConfig {
            optimizer: OptimizerKind::PlainGradient,
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let mut p = scalar_params(1.0);
        let mut opt = Optimizer::new(&cfg);
        opt.step(&mut p, &Gradients::from([("w".to_string(), vec![1.0])]))
            .unwrap();
        assert!((p.get("w").unwrap().item() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradients_leave_parameters() {
        for optimizer in [OptimizerKind::PlainGradient, OptimizerKind::AdaptiveMoment] {
            let cfg = TrainConfig {
                optimizer,
                ..TrainConfig::default()
            };
            let mut p = scalar_params(1.5);
            Optimizer::new(&cfg)
                .step(&mut p, &Gradients::from([("w".to_string(), vec![0.0])]))
                .unwrap();
            assert_eq!(p.get("w").unwrap().item(), 1.5);
        }
    }

    #[test]
    fn adaptive_first_step_moves_by_learning_rate() {
        let cfg = TrainConfig::default();
        let mut p = scalar_params(1.0);
        Optimizer::new(&cfg)
            .step(&mut p, &Gradients::from([("w".to_string(), vec![1.0])]))
            .unwrap();
        // m̂ = 1, v̂ = 1 after bias correction, so the step is lr / (1 + eps).
        let expected = 1.0 - 1e-3 / (1.0 + 1e-8);
        assert!((p.get("w").unwrap().item() - expected).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = scalar_params(1.0);
        let err = Optimizer::new(&TrainConfig::default())
            .step(&mut p, &Gradients::new())
            .unwrap_err();
        assert!(err.to_string().contains("`w`"));
    }

    #[test]
    fn report_csv_has_header() {
        let r = TrainReport {
            epochs: vec![EpochStats {
                epoch: 0,
                loss: 1.5,
                accuracy: 0.25,
                seconds: 0.5,
            }],
        };
        assert_eq!(r.to_csv(), "epoch,loss,accuracy,seconds\n0,1.5,0.25,0.5\n");
    }

    #[test]
    fn invalid_train_config() {
        let c = TrainConfig {
            pos_weight: 0.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            learning_rate: -1.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
