//! Whole-model assembly: configuration, the parameter bundle, checkpoint
//! serialization, the molecule-to-representation forward pass, and the
//! optimizer seam.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ama::{ama_forward, AmaConfig, AmaError, AmaParams, AmaVars};
use crate::autodiff::{Gradients, Tape, TapeError, Tensor, Var};
use crate::encoders::{gin_encode, EncoderError, GinParams, GinVars, SeqFeaturizer};
use crate::smiles::MolGraph;

/// Bumped whenever the serialized layout changes incompatibly.
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unsupported checkpoint format version {got} (this build reads {want})")]
    Version { got: u32, want: u32 },
    #[error("checkpoint does not parse: {0}")]
    Decode(#[from] serde_json::Error),
    #[error("cannot access '{path}': {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Ama(#[from] AmaError),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Dimension settings for the whole encoder stack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Node and molecule representation width.
    pub d_g: usize,
    pub gin_layers: usize,
    /// Raw sequence feature width (hash bucket count).
    pub hash_dim: usize,
    /// Reduced sequence width after PCA.
    pub d_a: usize,
    pub ama: AmaConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_g: 64,
            gin_layers: 3,
            hash_dim: 2048,
            d_a: 32,
            ama: AmaConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.ama.validate(self.d_g)?;
        if self.d_a == 0 || self.hash_dim == 0 || self.gin_layers == 0 {
            return Err(ModelError::Encoder(EncoderError::NoComponents));
        }
        Ok(())
    }
}

/// Every trainable tensor in the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub gin: GinParams,
    pub ama: AmaParams,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> ModelParams {
        ModelParams {
            gin: GinParams::init(cfg.d_g, cfg.gin_layers, rng),
            ama: AmaParams::init(cfg.d_g, cfg.d_a, rng),
        }
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        ModelVars {
            gin: self.gin.register(tape, trainable),
            ama: self.ama.register(tape, trainable),
        }
    }

    /// Registration order; stays aligned with `ModelVars::vars`.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.gin.tensors_mut();
        out.extend(self.ama.tensors_mut());
        out
    }
}

#[derive(Debug, Clone)]
pub struct ModelVars {
    pub gin: GinVars,
    pub ama: AmaVars,
}

impl ModelVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = self.gin.vars();
        out.extend(self.ama.vars());
        out
    }
}

/// Molecule representation as a (1, d_g) row: GIN node matrix fused with
/// the frozen sequence vector. The sequence vector enters the tape as a
/// constant, so no gradient ever reaches the featurizer.
pub fn embed(
    tape: &mut Tape,
    mol: &MolGraph,
    featurizer: &SeqFeaturizer,
    vars: &ModelVars,
    cfg: &ModelConfig,
) -> Result<Var, ModelError> {
    let a_vec = featurizer.encode(mol.source())?;
    embed_with_sequence(tape, mol, &a_vec, vars, cfg)
}

/// Same forward with a caller-supplied sequence vector. Rationale search
/// uses this with token-multiset features for fragments; the training
/// loop uses it with cached per-molecule vectors.
pub fn embed_with_sequence(
    tape: &mut Tape,
    mol: &MolGraph,
    a_vec: &[f64],
    vars: &ModelVars,
    cfg: &ModelConfig,
) -> Result<Var, ModelError> {
    let g = gin_encode(tape, mol, &vars.gin)?;
    let a = tape.constant(Tensor::row(a_vec.to_vec()));
    Ok(ama_forward(tape, g, a, &vars.ama, &cfg.ama)?)
}

/// Serialized model: parameters, frozen featurizer state, and the config
/// that shaped them. JSON keeps every f64 bit-exact through the shortest
/// round-trip representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params: ModelParams,
    pub featurizer: SeqFeaturizer,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ModelParams, featurizer: SeqFeaturizer) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config,
            params,
            featurizer,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Checkpoint, ModelError> {
        // Version first, so a layout change reports itself instead of a
        // field soup of decode errors.
        #[derive(Deserialize)]
        struct Header {
            format_version: u32,
        }
        let header: Header = serde_json::from_str(text)?;
        if header.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(ModelError::Version {
                got: header.format_version,
                want: CHECKPOINT_FORMAT_VERSION,
            });
        }
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_json()).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Checkpoint, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Checkpoint::from_json(&text)
    }
}

/// Update rule seam. Implementations see aligned (tensor, gradient)
/// pairs; a `None` gradient means the loss never reached that tensor and
/// it must be left alone.
pub trait Optimizer {
    fn step(&mut self, pairs: &mut [(&mut Tensor, Option<&Tensor>)]);
}

/// Plain stochastic gradient descent with a fixed learning rate.
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, pairs: &mut [(&mut Tensor, Option<&Tensor>)]) {
        for (tensor, grad) in pairs {
            if let Some(g) = grad {
                for (t, gv) in tensor.data_mut().iter_mut().zip(g.data()) {
                    *t -= self.lr * gv;
                }
            }
        }
    }
}

/// One optimizer step over all model parameters.
pub fn apply_gradients(
    opt: &mut dyn Optimizer,
    params: &mut ModelParams,
    vars: &ModelVars,
    grads: &Gradients,
) {
    let var_list = vars.vars();
    let mut pairs: Vec<(&mut Tensor, Option<&Tensor>)> = params
        .tensors_mut()
        .into_iter()
        .zip(var_list.iter().map(|v| grads.get(*v)))
        .collect();
    opt.step(&mut pairs);
}
