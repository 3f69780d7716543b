//! Linear-attention routing model: a per-node linear encoder and a decoder of
//! stacked aggregate/broadcast attention modules over two representative rows.

mod decoder;
mod rollout;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use decoder::{
    build_decoder_inputs, decode_step_cvrp, decode_step_tsp, decoder_logits, encode, encode_batch, encode_graph,
    linear_attention_module, node_features, quadratic_decoder_logits, stacked_features, DecoderInputs, DecoderState, StepGroup,
};
pub use rollout::{
    construct, full_cvrp, full_tsp, rollout, rollout_batch, Action, Construction, DecodeMode, RolloutOutput, StepNll,
};

use crate::instances::{InstanceError, ProblemKind};
use crate::rng::seeded;
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{AdamState, AttentionLayerParams, ParamId, ParamStore, TensorError};

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ProblemKind,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_hidden: usize,
}

impl ModelConfig {
    /// d = 128, six modules, eight heads, feed-forward width 512.
    pub fn paper(kind: ProblemKind) -> Self {
        Self { kind, d: 128, layers: 6, heads: 8, ff_hidden: 512 }
    }

    /// Reduced size used for single-core desk runs.
    pub fn desk(kind: ProblemKind) -> Self {
        Self { kind, d: 32, layers: 2, heads: 4, ff_hidden: 64 }
    }

    pub fn input_width(&self) -> usize {
        match self.kind {
            ProblemKind::Tsp => 2,
            ProblemKind::Cvrp => 3,
        }
    }

    /// Logits per decoder row: one for the TSP, (via depot, direct) for the CVRP.
    pub fn actions_per_node(&self) -> usize {
        match self.kind {
            ProblemKind::Tsp => 1,
            ProblemKind::Cvrp => 2,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d == 0 || self.layers == 0 || self.heads == 0 || self.ff_hidden == 0 {
            return Err(ModelError::InvalidConfig("all dimensions must be positive".into()));
        }
        if self.d % self.heads != 0 {
            return Err(ModelError::InvalidConfig(format!("d={} is not divisible by heads={}", self.d, self.heads)));
        }
        Ok(())
    }
}

/// Parameter handles, one aggregate and one broadcast layer per module.
#[derive(Clone, Debug)]
pub struct ModelIds {
    pub enc_w: ParamId,
    pub enc_b: ParamId,
    pub w1: ParamId,
    pub w2: ParamId,
    /// CVRP only: biases of the capacity-fused projections.
    pub b1: Option<ParamId>,
    pub b2: Option<ParamId>,
    pub modules: Vec<(AttentionLayerParams, AttentionLayerParams)>,
    pub w_out: ParamId,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub ids: ModelIds,
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("decoder state has no available node")]
    EmptyAvailable,
    #[error("model is configured for {model} but got a {input} input")]
    KindMismatch { model: ProblemKind, input: ProblemKind },
    #[error("forced action {0} is not allowed in the current state")]
    InvalidAction(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Instance(#[from] InstanceError),
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut p = ParamStore::new();
        let d = config.d;
        let win = config.input_width();
        let enc_w = p.add_uniform("enc.w", win, d, &mut rng);
        let enc_b = p.add_uniform_shape("enc.b", win, 1, d, &mut rng);
        let (w1, w2, b1, b2) = match config.kind {
            ProblemKind::Tsp => (p.add_uniform("rep.w1", d, d, &mut rng), p.add_uniform("rep.w2", d, d, &mut rng), None, None),
            ProblemKind::Cvrp => {
                let w1 = p.add_uniform("rep.w1", d + 1, d, &mut rng);
                let b1 = p.add_uniform_shape("rep.b1", d + 1, 1, d, &mut rng);
                let w2 = p.add_uniform("rep.w2", d + 1, d, &mut rng);
                let b2 = p.add_uniform_shape("rep.b2", d + 1, 1, d, &mut rng);
                (w1, w2, Some(b1), Some(b2))
            }
        };
        let modules = (0..config.layers)
            .map(|l| {
                let agg = AttentionLayerParams::init(&mut p, &format!("dec{l}.agg"), d, config.ff_hidden, &mut rng);
                let bc = AttentionLayerParams::init(&mut p, &format!("dec{l}.bc"), d, config.ff_hidden, &mut rng);
                (agg, bc)
            })
            .collect();
        let w_out = p.add_uniform("out.w", d, config.actions_per_node(), &mut rng);
        Ok(Self { config, params: p, ids: ModelIds { enc_w, enc_b, w1, w2, b1, b2, modules, w_out } })
    }

    pub fn check_kind(&self, kind: ProblemKind) -> Result<(), ModelError> {
        if kind != self.config.kind {
            return Err(ModelError::KindMismatch { model: self.config.kind, input: kind });
        }
        Ok(())
    }

    /// Checkpoint with the model config under `"model"` merged into `extra`.
    pub fn to_checkpoint(&self, extra: serde_json::Value, adam: Option<AdamState>) -> Checkpoint {
        let mut meta = match extra {
            serde_json::Value::Object(m) => m,
            _ => serde_json::Map::new(),
        };
        meta.insert("model".into(), serde_json::to_value(self.config).expect("config serializes"));
        Checkpoint { metadata: serde_json::Value::Object(meta), params: self.params.clone(), adam }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        let config: ModelConfig = ck
            .metadata
            .get("model")
            .cloned()
            .ok_or_else(|| TensorError::Checkpoint("metadata has no model config".into()))
            .and_then(|v| serde_json::from_value(v).map_err(|e| TensorError::Checkpoint(e.to_string())))?;
        let mut model = Self::new(config, 0)?;
        model.params.copy_from(&ck.params)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>, extra: serde_json::Value, adam: Option<AdamState>) -> Result<(), ModelError> {
        Ok(self.to_checkpoint(extra, adam).save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Checkpoint), ModelError> {
        let ck = Checkpoint::load(path)?;
        Ok((Self::from_checkpoint(&ck)?, ck))
    }
}
