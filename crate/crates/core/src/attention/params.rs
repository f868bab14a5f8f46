use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::NetworkConfig;
use crate::diffcore::Tensor;
use crate::error::{GlamError, Result};

/// Which attention layer a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    SelfAttention,
    CrossAttention,
}

impl LayerKind {
    fn tag(self) -> &'static str {
        match self {
            LayerKind::SelfAttention => "sal",
            LayerKind::CrossAttention => "cal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projection {
    Query,
    Key,
    Value,
}

impl Projection {
    pub const ALL: [Projection; 3] = [Projection::Query, Projection::Key, Projection::Value];

    fn tag(self) -> &'static str {
        match self {
            Projection::Query => "Q",
            Projection::Key => "K",
            Projection::Value => "V",
        }
    }
}

pub fn head_name(layer: usize, kind: LayerKind, head: usize, proj: Projection) -> String {
    format!("layer{layer}.{}.head{head}.{}", kind.tag(), proj.tag())
}

pub fn mixer_name(layer: usize, kind: LayerKind) -> String {
    format!("layer{layer}.{}.mixer", kind.tag())
}

pub fn encoder_weight(idx: usize) -> String {
    format!("encoder.{idx}.weight")
}

pub fn encoder_bias(idx: usize) -> String {
    format!("encoder.{idx}.bias")
}

/// Every learnable tensor of the network, keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct GlamParameters {
    tensors: BTreeMap<String, Tensor>,
}

/// Names and shapes a configuration requires, in a fixed order.
pub fn expected_shapes(config: &NetworkConfig) -> Vec<(String, [usize; 2])> {
    let d = config.feat_dim;
    let h = config.encoder_hidden();
    let mut out = vec![
        (encoder_weight(0), [2, h]),
        (encoder_bias(0), [1, h]),
        (encoder_weight(1), [h, d]),
        (encoder_bias(1), [1, d]),
    ];
    for t in 0..config.n_layers {
        if config.use_sal {
            for i in 0..config.n_self_heads {
                for p in Projection::ALL {
                    out.push((
                        head_name(t, LayerKind::SelfAttention, i, p),
                        [d, config.self_dim],
                    ));
                }
            }
            out.push((
                mixer_name(t, LayerKind::SelfAttention),
                [config.self_dim * config.n_self_heads, d],
            ));
        }
        if config.use_cal {
            for i in 0..config.n_cross_heads {
                for p in Projection::ALL {
                    out.push((
                        head_name(t, LayerKind::CrossAttention, i, p),
                        [d, config.cross_dim],
                    ));
                }
            }
            out.push((
                mixer_name(t, LayerKind::CrossAttention),
                [config.cross_dim * config.n_cross_heads, d],
            ));
        }
    }
    out
}

impl GlamParameters {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization, where fan_in
    /// is the input width of the layer the tensor belongs to.
    pub fn init(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, [r, c]) in expected_shapes(config) {
            let fan_in = if name.ends_with(".bias") {
                if name == encoder_bias(0) {
                    2
                } else {
                    config.encoder_hidden()
                }
            } else {
                r
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            let t = Tensor::from_fn(r, c, |_, _| rng.gen_range(-bound..bound));
            tensors.insert(name, t);
        }
        Ok(Self { tensors })
    }

    /// Builds a parameter set from explicit tensors (e.g. a loaded file).
    pub fn from_tensors(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| GlamError::Parameter {
            name: name.to_string(),
            message: "missing".into(),
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Checks names and shapes against a configuration, naming the first
    /// offending parameter.
    pub fn validate_against(&self, config: &NetworkConfig) -> Result<()> {
        let expected = expected_shapes(config);
        for (name, shape) in &expected {
            let t = self.get(name)?;
            if t.shape() != shape {
                return Err(GlamError::Parameter {
                    name: name.clone(),
                    message: format!("shape {:?}, configuration expects {:?}", t.shape(), shape),
                });
            }
            if !t.is_finite() {
                return Err(GlamError::Parameter {
                    name: name.clone(),
                    message: "non-finite entries".into(),
                });
            }
        }
        if let Some(extra) = self
            .tensors
            .keys()
            .find(|k| !expected.iter().any(|(n, _)| n == *k))
        {
            return Err(GlamError::Parameter {
                name: extra.clone(),
                message: "not used by this configuration".into(),
            });
        }
        Ok(())
    }
}

pub const CHECKPOINT_FORMAT: &str = "glam-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: NetworkConfig,
    params: Vec<ParamEntry>,
}

/// A parameter set with the configuration it was built for.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub params: GlamParameters,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(name, t)| ParamEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    values: t.values().to_vec(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("checkpoint serializes")
    }

    /// Parses a checkpoint. Shapes are checked against the stored values but
    /// not against the configuration; see [`GlamParameters::validate_against`].
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text).map_err(|e| GlamError::Parse {
            path: origin.to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(GlamError::Parse {
                path: origin.to_string(),
                line: 1,
                message: format!(
                    "unsupported checkpoint {} v{} (expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION})",
                    file.format, file.version
                ),
            });
        }
        let mut tensors = BTreeMap::new();
        for e in file.params {
            let t = Tensor::new(e.shape, e.values).map_err(|err| GlamError::Parameter {
                name: e.name.clone(),
                message: err.to_string(),
            })?;
            tensors.insert(e.name, t);
        }
        Ok(Self {
            config: file.config,
            params: GlamParameters { tensors },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| GlamError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GlamError::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }
}
