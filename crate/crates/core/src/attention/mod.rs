//! The joint graph-learning and matching network.
//!
//! Keypoint features are augmented with a learnt positional embedding, then
//! passed through `n_layers` rounds of a self-attention layer (one set at a
//! time; its attention matrices act as learnt graph adjacencies) and a
//! cross-attention layer (queries from one set, keys and values from the
//! other; attention is sigmoid + Sinkhorn normalized). The positional
//! embedding is re-added after every layer. The soft assignment is the
//! average of the last layer's cross-attention matrices over heads and both
//! directions.

mod params;

pub use params::{
    encoder_bias, encoder_weight, expected_shapes, head_name, mixer_name, Checkpoint,
    GlamParameters, LayerKind, Projection, CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::assignment::{sinkhorn_on_tape, SoftAssignment};
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{GlamError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub n_layers: usize,
    pub n_self_heads: usize,
    pub n_cross_heads: usize,
    pub feat_dim: usize,
    pub self_dim: usize,
    pub cross_dim: usize,
    pub sinkhorn_iters: usize,
    pub use_sal: bool,
    pub use_cal: bool,
}

impl NetworkConfig {
    /// Laptop-sized defaults: d = 64, four heads, three layers.
    pub fn desk() -> Self {
        Self {
            n_layers: 3,
            n_self_heads: 4,
            n_cross_heads: 4,
            feat_dim: 64,
            self_dim: 64,
            cross_dim: 64,
            sinkhorn_iters: 5,
            use_sal: true,
            use_cal: true,
        }
    }

    /// The full-size setting: d = 1024, eight heads, three layers.
    pub fn paper_scale() -> Self {
        Self {
            n_layers: 3,
            n_self_heads: 8,
            n_cross_heads: 8,
            feat_dim: 1024,
            self_dim: 1024,
            cross_dim: 1024,
            sinkhorn_iters: 5,
            use_sal: true,
            use_cal: true,
        }
    }

    /// Hidden width of the positional encoder MLP (2 -> d/4 -> d).
    pub fn encoder_hidden(&self) -> usize {
        (self.feat_dim / 4).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_self_heads", self.n_self_heads),
            ("n_cross_heads", self.n_cross_heads),
            ("feat_dim", self.feat_dim),
            ("self_dim", self.self_dim),
            ("cross_dim", self.cross_dim),
            ("sinkhorn_iters", self.sinkhorn_iters),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(GlamError::Config(format!("{name} must be at least 1")));
        }
        if !self.use_sal && !self.use_cal {
            return Err(GlamError::Config(
                "at least one of the self- and cross-attention layers must be enabled".into(),
            ));
        }
        Ok(())
    }
}

/// Keypoints of one image: features (n×d), positions (n×2) and optional
/// semantic labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointFeatureSet {
    pub features: Tensor,
    pub positions: Tensor,
    pub labels: Option<Vec<String>>,
}

impl PointFeatureSet {
    pub fn new(features: Tensor, positions: Tensor, labels: Option<Vec<String>>) -> Result<Self> {
        if !features.is_matrix() || !positions.is_matrix() || positions.cols() != 2 {
            return Err(GlamError::contract(format!(
                "features {:?} / positions {:?} are not n×d / n×2",
                features.shape(),
                positions.shape()
            )));
        }
        let n = features.rows();
        if n == 0 || positions.rows() != n {
            return Err(GlamError::contract(format!(
                "need n ≥ 1 keypoints with matching rows, got {n} features and {} positions",
                positions.rows()
            )));
        }
        if labels.as_ref().is_some_and(|l| l.len() != n) {
            return Err(GlamError::contract("one label per keypoint required"));
        }
        Ok(Self {
            features,
            positions,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feat_dim(&self) -> usize {
        self.features.cols()
    }

    /// Reorders keypoints: row `i` of the result is row `order[i]` of `self`.
    pub fn reordered(&self, order: &[usize]) -> Self {
        let d = self.feat_dim();
        let n = order.len();
        Self {
            features: Tensor::from_fn(n, d, |i, j| self.features.get(order[i], j)),
            positions: Tensor::from_fn(n, 2, |i, j| self.positions.get(order[i], j)),
            labels: self
                .labels
                .as_ref()
                .map(|l| order.iter().map(|&k| l[k].clone()).collect()),
        }
    }
}

/// Per-head attention matrices of one layer for both images.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMatrices {
    pub a: Vec<Tensor>,
    pub b: Vec<Tensor>,
}

/// Everything a forward pass exposes.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub assignment: SoftAssignment,
    /// Self-attention matrices of every layer (empty without self-attention).
    pub self_attn: Vec<HeadMatrices>,
    /// Cross-attention matrices of the last layer.
    pub cross_attn: Option<HeadMatrices>,
}

/// Parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    /// Records every parameter on `tape`; `trainable` decides whether
    /// `backward` will accumulate gradients for them.
    pub fn bind(tape: &mut Tape, params: &GlamParameters, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.to_string(), v)
            })
            .collect();
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| GlamError::Parameter {
                name: name.to_string(),
                message: "missing".into(),
            })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Output of one attention layer on a tape.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub features_a: Var,
    pub features_b: Var,
    pub attn_a: Vec<Var>,
    pub attn_b: Vec<Var>,
}

/// Forward pass recorded on a tape.
#[derive(Debug, Clone)]
pub struct TapeTrace {
    pub assignment: Var,
    pub self_attn: Vec<(Vec<Var>, Vec<Var>)>,
    pub cross_attn: Option<(Vec<Var>, Vec<Var>)>,
}

/// ρ(P): 2 -> hidden -> d MLP with a ReLU between the two affine maps.
pub fn encode_positions_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    positions: Var,
) -> Result<Var> {
    let h = tape.matmul(positions, bound.var(&encoder_weight(0))?)?;
    let h = tape.add_row_broadcast(h, bound.var(&encoder_bias(0))?)?;
    let h = tape.relu(h);
    let out = tape.matmul(h, bound.var(&encoder_weight(1))?)?;
    Ok(tape.add_row_broadcast(out, bound.var(&encoder_bias(1))?)?)
}

struct HeadWeights {
    q: Var,
    k: Var,
    v: Var,
}

fn head_weights(
    bound: &BoundParams,
    layer: usize,
    kind: LayerKind,
    head: usize,
) -> Result<HeadWeights> {
    Ok(HeadWeights {
        q: bound.var(&head_name(layer, kind, head, Projection::Query))?,
        k: bound.var(&head_name(layer, kind, head, Projection::Key))?,
        v: bound.var(&head_name(layer, kind, head, Projection::Value))?,
    })
}

/// Multi-head attention of `queries` over `context`, heads mixed and added
/// residually to `queries` under a ReLU. Returns the updated features and
/// the per-head attention matrices.
fn attend(
    tape: &mut Tape,
    bound: &BoundParams,
    config: &NetworkConfig,
    layer: usize,
    kind: LayerKind,
    queries: Var,
    context: Var,
) -> Result<(Var, Vec<Var>)> {
    let (n_heads, head_dim) = match kind {
        LayerKind::SelfAttention => (config.n_self_heads, config.self_dim),
        LayerKind::CrossAttention => (config.n_cross_heads, config.cross_dim),
    };
    let inv_sqrt = 1.0 / (head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut attn = Vec::with_capacity(n_heads);
    for i in 0..n_heads {
        let w = head_weights(bound, layer, kind, i)?;
        let q = tape.matmul(queries, w.q)?;
        let k = tape.matmul(context, w.k)?;
        let v = tape.matmul(context, w.v)?;
        let kt = tape.transpose(k)?;
        let logits = tape.matmul(q, kt)?;
        let logits = tape.scale(logits, inv_sqrt);
        let m = match kind {
            LayerKind::SelfAttention => tape.row_softmax(logits)?,
            LayerKind::CrossAttention => {
                let s = tape.sigmoid(logits);
                sinkhorn_on_tape(tape, s, config.sinkhorn_iters)?
            }
        };
        heads.push(tape.matmul(m, v)?);
        attn.push(m);
    }
    let cat = tape.concat_cols(&heads)?;
    let update = tape.matmul(cat, bound.var(&mixer_name(layer, kind))?)?;
    let sum = tape.add(queries, update)?;
    Ok((tape.relu(sum), attn))
}

/// Self-attention layer applied to both sets with shared weights. The
/// positional re-add is left to the caller.
pub fn self_attention_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    config: &NetworkConfig,
    layer: usize,
    fa: Var,
    fb: Var,
) -> Result<LayerOutput> {
    let (features_a, attn_a) =
        attend(tape, bound, config, layer, LayerKind::SelfAttention, fa, fa)?;
    let (features_b, attn_b) =
        attend(tape, bound, config, layer, LayerKind::SelfAttention, fb, fb)?;
    Ok(LayerOutput {
        features_a,
        features_b,
        attn_a,
        attn_b,
    })
}

/// Cross-attention layer: A attends over B and, with the same weights, B
/// over A. Both directions read the layer's input features. The positional
/// re-add is left to the caller.
pub fn cross_attention_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    config: &NetworkConfig,
    layer: usize,
    fa: Var,
    fb: Var,
) -> Result<LayerOutput> {
    let (features_a, attn_a) = attend(
        tape,
        bound,
        config,
        layer,
        LayerKind::CrossAttention,
        fa,
        fb,
    )?;
    let (features_b, attn_b) = attend(
        tape,
        bound,
        config,
        layer,
        LayerKind::CrossAttention,
        fb,
        fa,
    )?;
    Ok(LayerOutput {
        features_a,
        features_b,
        attn_a,
        attn_b,
    })
}

fn check_inputs(config: &NetworkConfig, a: &PointFeatureSet, b: &PointFeatureSet) -> Result<()> {
    config.validate()?;
    if a.len() != b.len() {
        return Err(GlamError::contract(format!(
            "sets must be padded to a common size first ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    for (name, set) in [("A", a), ("B", b)] {
        if set.feat_dim() != config.feat_dim {
            return Err(GlamError::contract(format!(
                "set {name} has {}-dim features, network expects {}",
                set.feat_dim(),
                config.feat_dim
            )));
        }
    }
    Ok(())
}

/// The full network on a tape. Both sets must already have equal size.
pub fn forward_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    config: &NetworkConfig,
    a: &PointFeatureSet,
    b: &PointFeatureSet,
) -> Result<TapeTrace> {
    check_inputs(config, a, b)?;
    let pos_a = tape.constant(a.positions.clone());
    let pos_b = tape.constant(b.positions.clone());
    let emb_a = encode_positions_on_tape(tape, bound, pos_a)?;
    let emb_b = encode_positions_on_tape(tape, bound, pos_b)?;
    let raw_a = tape.constant(a.features.clone());
    let raw_b = tape.constant(b.features.clone());
    let mut fa = tape.add(raw_a, emb_a)?;
    let mut fb = tape.add(raw_b, emb_b)?;

    let mut self_attn = Vec::new();
    let mut cross_attn = None;
    for t in 0..config.n_layers {
        if config.use_sal {
            let out = self_attention_on_tape(tape, bound, config, t, fa, fb)?;
            fa = tape.add(out.features_a, emb_a)?;
            fb = tape.add(out.features_b, emb_b)?;
            self_attn.push((out.attn_a, out.attn_b));
        }
        if config.use_cal {
            let out = cross_attention_on_tape(tape, bound, config, t, fa, fb)?;
            fa = tape.add(out.features_a, emb_a)?;
            fb = tape.add(out.features_b, emb_b)?;
            cross_attn = Some((out.attn_a, out.attn_b));
        }
    }

    let assignment = match &cross_attn {
        Some((heads_a, heads_b)) => {
            let mut acc: Option<Var> = None;
            for (ma, mb) in heads_a.iter().zip(heads_b) {
                let mbt = tape.transpose(*mb)?;
                let pair = tape.add(*ma, mbt)?;
                acc = Some(match acc {
                    None => pair,
                    Some(prev) => tape.add(prev, pair)?,
                });
            }
            let total = acc.expect("at least one cross head");
            tape.scale(total, 1.0 / (2.0 * config.n_cross_heads as f64))
        }
        None => {
            // Without cross-attention there is no attention-averaged output;
            // score by row-softmaxed scaled feature similarity instead.
            let fbt = tape.transpose(fb)?;
            let sim = tape.matmul(fa, fbt)?;
            let sim = tape.scale(sim, 1.0 / (config.feat_dim as f64).sqrt());
            tape.row_softmax(sim)?
        }
    };
    Ok(TapeTrace {
        assignment,
        self_attn,
        cross_attn,
    })
}

fn collect(tape: &Tape, vars: &[Var]) -> Vec<Tensor> {
    vars.iter().map(|v| tape.value(*v).clone()).collect()
}

/// Runs the network without recording gradients.
pub fn forward(
    params: &GlamParameters,
    config: &NetworkConfig,
    a: &PointFeatureSet,
    b: &PointFeatureSet,
) -> Result<ForwardTrace> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, false);
    let tr = forward_on_tape(&mut tape, &bound, config, a, b)?;
    Ok(ForwardTrace {
        assignment: SoftAssignment {
            scores: tape.value(tr.assignment).clone(),
            mask: None,
        },
        self_attn: tr
            .self_attn
            .iter()
            .map(|(a, b)| HeadMatrices {
                a: collect(&tape, a),
                b: collect(&tape, b),
            })
            .collect(),
        cross_attn: tr.cross_attn.as_ref().map(|(a, b)| HeadMatrices {
            a: collect(&tape, a),
            b: collect(&tape, b),
        }),
    })
}

/// ρ(P) on plain tensors.
pub fn encode_positions(params: &GlamParameters, positions: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, false);
    let p = tape.constant(positions.clone());
    let out = encode_positions_on_tape(&mut tape, &bound, p)?;
    Ok(tape.value(out).clone())
}

/// Updated features of both sets plus per-head attention, on plain tensors.
pub type LayerResult = (Tensor, Tensor, Vec<Tensor>, Vec<Tensor>);

fn run_layer(
    params: &GlamParameters,
    config: &NetworkConfig,
    fa: &Tensor,
    fb: &Tensor,
    f: impl FnOnce(&mut Tape, &BoundParams, Var, Var) -> Result<LayerOutput>,
) -> Result<LayerResult> {
    for (name, t) in [("A", fa), ("B", fb)] {
        if t.cols() != config.feat_dim {
            return Err(GlamError::contract(format!(
                "features {name} have {} columns, expected {}",
                t.cols(),
                config.feat_dim
            )));
        }
    }
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, false);
    let a = tape.constant(fa.clone());
    let b = tape.constant(fb.clone());
    let out = f(&mut tape, &bound, a, b)?;
    Ok((
        tape.value(out.features_a).clone(),
        tape.value(out.features_b).clone(),
        collect(&tape, &out.attn_a),
        collect(&tape, &out.attn_b),
    ))
}

/// One self-attention layer on plain tensors.
pub fn self_attention_layer(
    params: &GlamParameters,
    config: &NetworkConfig,
    layer: usize,
    fa: &Tensor,
    fb: &Tensor,
) -> Result<LayerResult> {
    run_layer(params, config, fa, fb, |t, b, a, c| {
        self_attention_on_tape(t, b, config, layer, a, c)
    })
}

/// One cross-attention layer on plain tensors with an explicit Sinkhorn
/// iteration count.
pub fn cross_attention_layer(
    params: &GlamParameters,
    config: &NetworkConfig,
    layer: usize,
    fa: &Tensor,
    fb: &Tensor,
    sinkhorn_iters: usize,
) -> Result<LayerResult> {
    let cfg = NetworkConfig {
        sinkhorn_iters,
        ..config.clone()
    };
    run_layer(params, &cfg, fa, fb, |t, b, a, c| {
        cross_attention_on_tape(t, b, &cfg, layer, a, c)
    })
}

/// A configured network with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Glam {
    pub config: NetworkConfig,
    pub params: GlamParameters,
}

impl Glam {
    pub fn new(config: NetworkConfig, params: GlamParameters) -> Result<Self> {
        config.validate()?;
        params.validate_against(&config)?;
        Ok(Self { config, params })
    }

    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        let params = GlamParameters::init(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn forward(&self, a: &PointFeatureSet, b: &PointFeatureSet) -> Result<ForwardTrace> {
        forward(&self.params, &self.config, a, b)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            params: self.params.clone(),
        }
    }
}
