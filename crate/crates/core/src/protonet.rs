//! Inverse-distance-weighted prototypes and similarity prediction.
//!
//! A class prototype is a weighted sum of its support embeddings. Each
//! embedding's weight is the reciprocal of its summed L2 distance to the
//! other supports, normalized across the class; outliers far from their
//! classmates therefore contribute less. Prediction softmaxes the dot
//! products against the two prototypes. Everything here stays on the tape
//! so the episode loss trains the whole encoder stack.

use thiserror::Error;

use crate::autodiff::{Tape, TapeError, Tensor, Var};

/// Distances below this are treated as this when inverted, so coincident
/// support embeddings get equal (large, finite) raw weights.
const DISTANCE_FLOOR: f64 = 1e-9;
/// Guard against a literally zero weight sum; raw weights are positive so
/// this never binds in practice.
const SUM_FLOOR: f64 = 1e-300;

#[derive(Debug, Error, PartialEq)]
pub enum ProtoError {
    #[error("prototype needs at least one support embedding")]
    NoEmbeddings,
    #[error("episode loss needs at least one query")]
    NoQueries,
    #[error("probabilities and labels differ in length ({probs} vs {labels})")]
    LengthMismatch { probs: usize, labels: usize },
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Class prototypes as (1, d) rows on the tape.
#[derive(Debug, Clone, Copy)]
pub struct Prototypes {
    pub positive: Var,
    pub negative: Var,
}

/// Normalized support weights as a (1, K) row. For a single support the
/// weight is identically 1 whatever the embedding, hence a constant.
pub fn prototype_weights(tape: &mut Tape, embeddings: &[Var]) -> Result<Var, ProtoError> {
    if embeddings.is_empty() {
        return Err(ProtoError::NoEmbeddings);
    }
    let k = embeddings.len();
    if k == 1 {
        return Ok(tape.constant(Tensor::new(vec![1, 1], vec![1.0])?));
    }

    let mut raw: Vec<Var> = Vec::with_capacity(k);
    for (i, &zi) in embeddings.iter().enumerate() {
        // Summed L2 distance to every support; the j = i term is exactly
        // zero and contributes no gradient either.
        let mut dist: Option<Var> = None;
        for (j, &zj) in embeddings.iter().enumerate() {
            if i == j {
                continue;
            }
            let diff = tape.sub(zi, zj)?;
            let sq = tape.dot(diff, diff)?;
            let d = tape.sqrt(sq)?;
            dist = Some(match dist {
                Some(acc) => tape.add(acc, d)?,
                None => d,
            });
        }
        let dist = dist.expect("k >= 2 leaves at least one term");
        raw.push(tape.recip(dist, DISTANCE_FLOOR)?);
    }

    let mut sum = raw[0];
    for &w in &raw[1..] {
        sum = tape.add(sum, w)?;
    }
    let inv_sum = tape.recip(sum, SUM_FLOOR)?;

    let mut row = tape.reshape(raw[0], vec![1, 1])?;
    for &w in &raw[1..] {
        let cell = tape.reshape(w, vec![1, 1])?;
        row = tape.concat_cols(row, cell)?;
    }
    Ok(tape.scale_by(inv_sum, row)?)
}

/// Weighted sum of the support embeddings, shape (1, d). A single support
/// is its own prototype.
pub fn prototype(tape: &mut Tape, embeddings: &[Var]) -> Result<Var, ProtoError> {
    if embeddings.is_empty() {
        return Err(ProtoError::NoEmbeddings);
    }
    if embeddings.len() == 1 {
        return Ok(embeddings[0]);
    }
    let weights = prototype_weights(tape, embeddings)?;
    let mut stack = embeddings[0];
    for &z in &embeddings[1..] {
        stack = tape.concat_rows(stack, z)?;
    }
    Ok(tape.matmul(weights, stack)?)
}

/// Class probabilities [p_positive, p_negative] as a (1, 2) row: softmax
/// over the two prototype dot products, max-subtracted inside the op.
pub fn class_scores(tape: &mut Tape, z: Var, protos: &Prototypes) -> Result<Var, TapeError> {
    let s_pos = tape.dot(z, protos.positive)?;
    let s_neg = tape.dot(z, protos.negative)?;
    let c_pos = tape.reshape(s_pos, vec![1, 1])?;
    let c_neg = tape.reshape(s_neg, vec![1, 1])?;
    let row = tape.concat_cols(c_pos, c_neg)?;
    tape.softmax_rows(row)
}

/// Positive-class probability as a scalar.
pub fn predict(tape: &mut Tape, z: Var, protos: &Prototypes) -> Result<Var, TapeError> {
    let probs = class_scores(tape, z, protos)?;
    let pick = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 0.0])?);
    let p = tape.matmul(probs, pick)?;
    tape.reshape(p, vec![])
}

/// Mean binary cross-entropy over the queries. `probs[i]` is the (1, 2)
/// class row for query i. The log op clamps its argument at 1e-12, which
/// bounds the loss even for saturated probabilities.
pub fn episode_loss(tape: &mut Tape, probs: &[Var], labels: &[u8]) -> Result<Var, ProtoError> {
    if probs.is_empty() {
        return Err(ProtoError::NoQueries);
    }
    if probs.len() != labels.len() {
        return Err(ProtoError::LengthMismatch { probs: probs.len(), labels: labels.len() });
    }
    let mut acc: Option<Var> = None;
    for (&p, &y) in probs.iter().zip(labels) {
        let lp = tape.log(p)?;
        let mask = tape.constant(Tensor::new(
            vec![1, 2],
            vec![y as f64, 1.0 - y as f64],
        )?);
        let term = tape.dot(lp, mask)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(tape.scale(acc.expect("nonempty"), -1.0 / probs.len() as f64)?)
}
