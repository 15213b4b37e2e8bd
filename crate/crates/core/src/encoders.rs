//! Dual-modality encoders.
//!
//! The graph side runs a GIN over atom features and returns the node
//! matrix; it lives on the autodiff tape and trains. The sequence side
//! hashes token n-grams into a fixed-width vector and reduces it with
//! PCA; it is frozen and never receives gradients.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, TapeError, Tensor, Var};
use crate::smiles::{tokenize, MolGraph, ParseError, D_ATOM};

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("pca needs more samples than components ({samples} <= {components})")]
    TooFewSamples { samples: usize, components: usize },
    #[error("pca needs at least one output component")]
    NoComponents,
    #[error("sequence featurizer has no fitted pca state")]
    Unfitted,
    #[error("no external feature row for '{0}'")]
    MissingExternal(String),
    #[error("external feature rows disagree in width ({got} vs {want})")]
    ExternalWidth { got: usize, want: usize },
    #[error("token encoding needs hashed features, not an external table")]
    ExternalTokens,
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Uniform(-s, s) with s = sqrt(6 / (fan_in + fan_out)).
pub(crate) fn glorot_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-s..s)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

// ── GIN ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GinLayerParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    /// Learnable self-weight: the layer mixes (1 + eps) * h_v with the
    /// neighbor sum before the MLP.
    pub eps: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GinParams {
    /// Input projection from atom-feature width to the hidden width. No
    /// bias; the first layer MLP provides one.
    pub proj: Tensor,
    pub layers: Vec<GinLayerParams>,
}

impl GinParams {
    pub fn init(d_g: usize, layers: usize, rng: &mut impl Rng) -> GinParams {
        GinParams {
            proj: glorot_uniform(D_ATOM, d_g, rng),
            layers: (0..layers)
                .map(|_| GinLayerParams {
                    w1: glorot_uniform(d_g, d_g, rng),
                    b1: Tensor::zeros(vec![1, d_g]),
                    w2: glorot_uniform(d_g, d_g, rng),
                    b2: Tensor::zeros(vec![1, d_g]),
                    eps: Tensor::scalar(0.0),
                })
                .collect(),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.proj.shape()[1]
    }

    /// Puts every tensor on the tape. Trainable registration records
    /// gradients; frozen registration is for evaluation-only forwards.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> GinVars {
        let mut reg = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        GinVars {
            proj: reg(&self.proj),
            layers: self
                .layers
                .iter()
                .map(|l| GinLayerVars {
                    w1: reg(&l.w1),
                    b1: reg(&l.b1),
                    w2: reg(&l.w2),
                    b2: reg(&l.b2),
                    eps: reg(&l.eps),
                })
                .collect(),
        }
    }

    /// Tensors in registration order. Must stay aligned with
    /// `GinVars::vars`; the optimizer pairs them up by position.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.proj];
        for l in &mut self.layers {
            out.extend([&mut l.w1, &mut l.b1, &mut l.w2, &mut l.b2, &mut l.eps]);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct GinLayerVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub eps: Var,
}

#[derive(Debug, Clone)]
pub struct GinVars {
    pub proj: Var,
    pub layers: Vec<GinLayerVars>,
}

impl GinVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.proj];
        for l in &self.layers {
            out.extend([l.w1, l.b1, l.w2, l.b2, l.eps]);
        }
        out
    }
}

/// Dense symmetric 0/1 adjacency. Bond multiplicity does not enter the
/// neighbor sum; the parser already rejects duplicate bonds.
pub fn adjacency_matrix(mol: &MolGraph) -> Tensor {
    let n = mol.atom_count();
    let mut a = Tensor::zeros(vec![n, n]);
    for b in mol.bonds() {
        a.data_mut()[b.a * n + b.b] = 1.0;
        a.data_mut()[b.b * n + b.a] = 1.0;
    }
    a
}

/// GIN forward from explicit feature and adjacency tensors already on the
/// tape. Layer rule: h <- MLP((1 + eps) * h + A * h).
pub fn gin_node_matrix(
    tape: &mut Tape,
    feats: Var,
    adj: Var,
    p: &GinVars,
) -> Result<Var, TapeError> {
    let n = tape.value(feats).shape()[0];
    // Column of ones tiles a (1, d) bias down to (n, d) via matmul.
    let ones = tape.constant(Tensor::new(vec![n, 1], vec![1.0; n])?);
    let mut h = tape.matmul(feats, p.proj)?;
    for layer in &p.layers {
        let self_scaled = tape.scale_by(layer.eps, h)?;
        let neighbor_sum = tape.matmul(adj, h)?;
        let mixed = tape.add(h, self_scaled)?;
        let pre = tape.add(mixed, neighbor_sum)?;

        let z1 = tape.matmul(pre, layer.w1)?;
        let b1 = tape.matmul(ones, layer.b1)?;
        let s1 = tape.add(z1, b1)?;
        let a1 = tape.relu(s1)?;
        let z2 = tape.matmul(a1, layer.w2)?;
        let b2 = tape.matmul(ones, layer.b2)?;
        h = tape.add(z2, b2)?;
    }
    Ok(h)
}

/// Node matrix for a molecule, shape (atom count, hidden width).
pub fn gin_encode(tape: &mut Tape, mol: &MolGraph, p: &GinVars) -> Result<Var, TapeError> {
    let feats = tape.constant(mol.atom_feature_matrix());
    let adj = tape.constant(adjacency_matrix(mol));
    gin_node_matrix(tape, feats, adj, p)
}

// ── sequence featurizer ─────────────────────────────────────────────────

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
/// Folded into the FNV-1a offset basis so the bucketing is keyed to this
/// featurizer. The constant is the ascii bytes of "molproto".
const HASH_SEED: u64 = 0x6d6f_6c70_726f_746f;

fn fnv_step(h: u64, byte: u8) -> u64 {
    (h ^ byte as u64).wrapping_mul(FNV_PRIME)
}

/// Frozen sequence encoder: token n-grams (orders 1..=max_order) hashed
/// into `hash_dim` counting buckets, L2-normalized, then centered and
/// projected by a fitted PCA. An external feature table, when present,
/// replaces the hashing for whole molecules keyed by their exact source
/// string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqFeaturizer {
    hash_dim: usize,
    max_order: usize,
    pca: Option<PcaState>,
    external: Option<BTreeMap<String, Vec<f64>>>,
}

impl SeqFeaturizer {
    pub fn new(hash_dim: usize) -> SeqFeaturizer {
        SeqFeaturizer {
            hash_dim,
            max_order: 3,
            pca: None,
            external: None,
        }
    }

    /// Featurizer backed by an external table instead of hashing. The raw
    /// width is taken from the rows, which must agree.
    pub fn with_external(map: BTreeMap<String, Vec<f64>>) -> Result<SeqFeaturizer, EncoderError> {
        let want = match map.values().next() {
            Some(row) => row.len(),
            None => return Err(EncoderError::MissingExternal("<empty table>".into())),
        };
        for row in map.values() {
            if row.len() != want {
                return Err(EncoderError::ExternalWidth { got: row.len(), want });
            }
        }
        Ok(SeqFeaturizer {
            hash_dim: want,
            max_order: 3,
            pca: None,
            external: Some(map),
        })
    }

    pub fn hash_dim(&self) -> usize {
        self.hash_dim
    }

    pub fn is_fitted(&self) -> bool {
        self.pca.is_some()
    }

    pub fn out_dim(&self) -> Option<usize> {
        self.pca.as_ref().map(|p| p.components.len())
    }

    pub fn pca(&self) -> Option<&PcaState> {
        self.pca.as_ref()
    }

    /// Hashed n-gram counts, L2-normalized. Deterministic across runs and
    /// platforms; no randomness and no tape involvement anywhere below.
    pub fn raw_features(&self, tokens: &[String]) -> Vec<f64> {
        let mut v = vec![0.0; self.hash_dim];
        for order in 1..=self.max_order {
            if tokens.len() < order {
                break;
            }
            for gram in tokens.windows(order) {
                let mut h = FNV_OFFSET ^ HASH_SEED;
                for (i, tok) in gram.iter().enumerate() {
                    if i > 0 {
                        // Unit separator keeps ("ab","c") distinct from ("a","bc").
                        h = fnv_step(h, 0x1f);
                    }
                    for &b in tok.as_bytes() {
                        h = fnv_step(h, b);
                    }
                }
                v[(h % self.hash_dim as u64) as usize] += 1.0;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in &mut v {
                *x /= norm;
            }
        }
        v
    }

    /// Raw vector for a whole molecule: the external table row when one is
    /// configured (used verbatim), hashed tokens otherwise.
    pub fn raw_for(&self, smiles: &str) -> Result<Vec<f64>, EncoderError> {
        if let Some(map) = &self.external {
            return map
                .get(smiles)
                .cloned()
                .ok_or_else(|| EncoderError::MissingExternal(smiles.to_string()));
        }
        Ok(self.raw_features(&tokenize(smiles)?))
    }

    /// Fits the PCA on the raw vectors of the given molecules.
    pub fn fit<'a>(
        &mut self,
        smiles: impl IntoIterator<Item = &'a str>,
        out_dim: usize,
    ) -> Result<(), EncoderError> {
        let samples = smiles
            .into_iter()
            .map(|s| self.raw_for(s))
            .collect::<Result<Vec<_>, _>>()?;
        self.pca = Some(PcaState::fit(&samples, out_dim)?);
        Ok(())
    }

    pub fn encode(&self, smiles: &str) -> Result<Vec<f64>, EncoderError> {
        let raw = self.raw_for(smiles)?;
        Ok(self.pca.as_ref().ok_or(EncoderError::Unfitted)?.project(&raw))
    }

    /// Encode from an explicit token list; rationale scoring uses this for
    /// fragments that have no source string of their own. Only meaningful
    /// on the hashing path: an external table is keyed by whole-molecule
    /// strings and its pca expects table-width inputs, so fragments are
    /// refused rather than silently projected through the wrong basis.
    pub fn encode_tokens(&self, tokens: &[String]) -> Result<Vec<f64>, EncoderError> {
        if self.external.is_some() {
            return Err(EncoderError::ExternalTokens);
        }
        let raw = self.raw_features(tokens);
        Ok(self.pca.as_ref().ok_or(EncoderError::Unfitted)?.project(&raw))
    }
}

// ── PCA ─────────────────────────────────────────────────────────────────

const PCA_TOL: f64 = 1e-10;
const PCA_MAX_ITERS: usize = 1000;

/// Principal components of the training features: column means plus the
/// top eigenvectors of the sample covariance, found by power iteration
/// with deflation. Components are rows, orthonormal, sign-fixed so each
/// one's largest-magnitude coordinate is positive. Rank-deficient inputs
/// pad the tail with zero rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaState {
    mean: Vec<f64>,
    components: Vec<Vec<f64>>,
    explained: Vec<f64>,
}

fn dot_slice(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for u in basis {
        let c = dot_slice(v, u);
        for (x, &ui) in v.iter_mut().zip(u) {
            *x -= c * ui;
        }
    }
}

impl PcaState {
    pub fn fit(samples: &[Vec<f64>], out_dim: usize) -> Result<PcaState, EncoderError> {
        if out_dim == 0 {
            return Err(EncoderError::NoComponents);
        }
        let n = samples.len();
        if n <= out_dim {
            return Err(EncoderError::TooFewSamples { samples: n, components: out_dim });
        }
        let d = samples[0].len();
        debug_assert!(samples.iter().all(|s| s.len() == d));

        let mut mean = vec![0.0; d];
        for s in samples {
            for (m, &x) in mean.iter_mut().zip(s) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let centered: Vec<Vec<f64>> = samples
            .iter()
            .map(|s| s.iter().zip(&mean).map(|(&x, &m)| x - m).collect())
            .collect();

        // Covariance-vector product without materializing the d x d
        // matrix: C v = Xc^T (Xc v) / (n - 1).
        let matvec = |v: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; d];
            for row in &centered {
                let coeff = dot_slice(row, v);
                for (o, &r) in out.iter_mut().zip(row) {
                    *o += coeff * r;
                }
            }
            for o in &mut out {
                *o /= (n - 1) as f64;
            }
            out
        };

        let total_var: f64 = (0..d)
            .map(|j| centered.iter().map(|r| r[j] * r[j]).sum::<f64>() / (n - 1) as f64)
            .sum();
        // Below this the remaining operator is numerically zero and the
        // data has no variance left to explain.
        let floor = total_var * 1e-12;

        let mut components: Vec<Vec<f64>> = Vec::new();
        let mut explained: Vec<f64> = Vec::new();
        let mut exhausted = total_var == 0.0;
        for k in 0..out_dim {
            if exhausted {
                break;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(0x9ca0_5eed ^ k as u64);
            let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            project_out(&mut v, &components);
            let mut norm = dot_slice(&v, &v).sqrt();
            if norm == 0.0 {
                break;
            }
            for x in &mut v {
                *x /= norm;
            }

            for _ in 0..PCA_MAX_ITERS {
                let mut w = matvec(&v);
                // Re-orthogonalizing every step both deflates the found
                // eigenpairs and stops drift back into their span.
                project_out(&mut w, &components);
                norm = dot_slice(&w, &w).sqrt();
                if norm <= floor {
                    exhausted = true;
                    break;
                }
                for x in &mut w {
                    *x /= norm;
                }
                let drift: f64 = v
                    .iter()
                    .zip(&w)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                v = w;
                if drift < PCA_TOL {
                    break;
                }
            }
            if exhausted {
                break;
            }

            let lambda = dot_slice(&v, &matvec(&v));
            let top = (0..d)
                .max_by(|&a, &b| v[a].abs().partial_cmp(&v[b].abs()).unwrap())
                .unwrap();
            if v[top] < 0.0 {
                for x in &mut v {
                    *x = -*x;
                }
            }
            components.push(v);
            explained.push(lambda.max(0.0));
        }

        if components.len() < out_dim {
            log::warn!(
                "pca rank deficient: {} of {} components carry variance, padding with zeros",
                components.len(),
                out_dim
            );
            while components.len() < out_dim {
                components.push(vec![0.0; d]);
                explained.push(0.0);
            }
        }

        Ok(PcaState { mean, components, explained })
    }

    pub fn project(&self, raw: &[f64]) -> Vec<f64> {
        let centered: Vec<f64> = raw.iter().zip(&self.mean).map(|(&x, &m)| x - m).collect();
        self.components.iter().map(|c| dot_slice(c, &centered)).collect()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.components
    }

    pub fn explained(&self) -> &[f64] {
        &self.explained
    }
}
