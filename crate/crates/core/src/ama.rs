//! Adaptive multi-level attention fusion.
//!
//! Both fusion levels first rescale each modality by a schedule weight
//! beta that depends only on (level, modality) and the config, then gate
//! the graph representation with a sigmoid attention map. The local level
//! runs multi-head self-attention over node rows; the global level runs a
//! single affine map over the pooled molecule vector.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, TapeError, Tensor, Var};
use crate::encoders::glorot_uniform;
use rand::Rng;

#[derive(Debug, Error, PartialEq)]
pub enum AmaError {
    #[error("beta_min {min} must be below beta_max {max}")]
    BetaRange { min: f64, max: f64 },
    #[error("head count {heads} must be >= 1 and divide the node width {d_g}")]
    HeadSplit { heads: usize, d_g: usize },
    #[error("global fusion needs at least one node row")]
    NoNodes,
    #[error(transparent)]
    Tape(#[from] TapeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Local,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Graph,
    Sequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmaConfig {
    pub beta_min: f64,
    pub beta_max: f64,
    /// Scaling factor k in the beta schedule. k = 0 collapses every beta
    /// to its anchor; k = 1 reaches the interval endpoints.
    pub k: f64,
    pub heads: usize,
}

impl Default for AmaConfig {
    fn default() -> Self {
        AmaConfig { beta_min: 0.9, beta_max: 1.1, k: 2.0, heads: 2 }
    }
}

impl AmaConfig {
    pub fn beta_mid(&self) -> f64 {
        (self.beta_min + self.beta_max) / 2.0
    }

    pub fn validate(&self, d_g: usize) -> Result<(), AmaError> {
        if !(self.beta_min < self.beta_max) {
            return Err(AmaError::BetaRange { min: self.beta_min, max: self.beta_max });
        }
        if self.heads == 0 || d_g % self.heads != 0 {
            return Err(AmaError::HeadSplit { heads: self.heads, d_g });
        }
        Ok(())
    }
}

/// Schedule weight for one (level, modality) pair. Local graph and global
/// sequence interpolate up from beta_min; the other two pull down from
/// beta_mid. Depends on the config alone, never on data.
pub fn beta(level: Level, modality: Modality, cfg: &AmaConfig) -> f64 {
    match (level, modality) {
        (Level::Local, Modality::Graph) | (Level::Global, Modality::Sequence) => {
            cfg.beta_min + (cfg.beta_max - cfg.beta_min) * cfg.k
        }
        (Level::Global, Modality::Graph) | (Level::Local, Modality::Sequence) => {
            cfg.beta_mid() - (cfg.beta_mid() - cfg.beta_min) * cfg.k
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmaParams {
    /// Local attention projections, each (d_g + d_a) x d_g.
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    /// Output projection after head concat, d_g x d_g.
    pub wo: Tensor,
    /// Global affine map, (d_g + d_a) x d_g plus a (1, d_g) bias.
    pub gw: Tensor,
    pub gb: Tensor,
}

impl AmaParams {
    pub fn init(d_g: usize, d_a: usize, rng: &mut impl Rng) -> AmaParams {
        let din = d_g + d_a;
        AmaParams {
            wq: glorot_uniform(din, d_g, rng),
            wk: glorot_uniform(din, d_g, rng),
            wv: glorot_uniform(din, d_g, rng),
            wo: glorot_uniform(d_g, d_g, rng),
            gw: glorot_uniform(din, d_g, rng),
            gb: Tensor::zeros(vec![1, d_g]),
        }
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> AmaVars {
        let mut reg = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        AmaVars {
            wq: reg(&self.wq),
            wk: reg(&self.wk),
            wv: reg(&self.wv),
            wo: reg(&self.wo),
            gw: reg(&self.gw),
            gb: reg(&self.gb),
        }
    }

    /// Registration order; must stay aligned with `AmaVars::vars`.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.gw,
            &mut self.gb,
        ]
    }
}

#[derive(Debug, Clone)]
pub struct AmaVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub gw: Var,
    pub gb: Var,
}

impl AmaVars {
    pub fn vars(&self) -> Vec<Var> {
        vec![self.wq, self.wk, self.wv, self.wo, self.gw, self.gb]
    }
}

/// 0/1 selector picking one head's column block; multiplying by it slices
/// columns [head * w, (head + 1) * w) without a dedicated slice op.
fn head_selector(tape: &mut Tape, d_g: usize, head: usize, w: usize) -> Var {
    let mut sel = Tensor::zeros(vec![d_g, w]);
    for j in 0..w {
        sel.data_mut()[(head * w + j) * w + j] = 1.0;
    }
    tape.constant(sel)
}

/// Local fusion: rows [g_j * beta(graph) ; a * beta(sequence)] feed
/// multi-head self-attention; the projected, sigmoid-gated result
/// multiplies the node matrix elementwise.
pub fn local_fuse(
    tape: &mut Tape,
    g: Var,
    a: Var,
    params: &AmaVars,
    cfg: &AmaConfig,
) -> Result<Var, AmaError> {
    let n = tape.value(g).shape()[0];
    let d_g = tape.value(g).shape()[1];
    if cfg.heads == 0 || d_g % cfg.heads != 0 {
        return Err(AmaError::HeadSplit { heads: cfg.heads, d_g });
    }
    let head_w = d_g / cfg.heads;

    let g_scaled = tape.scale(g, beta(Level::Local, Modality::Graph, cfg))?;
    let ones = tape.constant(Tensor::new(vec![n, 1], vec![1.0; n])?);
    let a_tiled = tape.matmul(ones, a)?;
    let a_scaled = tape.scale(a_tiled, beta(Level::Local, Modality::Sequence, cfg))?;
    let f = tape.concat_cols(g_scaled, a_scaled)?;

    let q = tape.matmul(f, params.wq)?;
    let k = tape.matmul(f, params.wk)?;
    let v = tape.matmul(f, params.wv)?;

    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let sel = head_selector(tape, d_g, h, head_w);
        let qh = tape.matmul(q, sel)?;
        let kh = tape.matmul(k, sel)?;
        let vh = tape.matmul(v, sel)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, 1.0 / (head_w as f64).sqrt())?;
        let attn = tape.softmax_rows(scaled)?;
        heads.push(tape.matmul(attn, vh)?);
    }
    let mut cat = heads[0];
    for &h in &heads[1..] {
        cat = tape.concat_cols(cat, h)?;
    }

    let projected = tape.matmul(cat, params.wo)?;
    let gate = tape.sigmoid(projected)?;
    Ok(tape.mul(gate, g)?)
}

/// Global fusion: the mean node vector and the sequence vector are beta-
/// scaled, concatenated, mapped by one affine layer, and the sigmoid of
/// that gates the mean vector.
pub fn global_fuse(
    tape: &mut Tape,
    nodes: Var,
    a: Var,
    params: &AmaVars,
    cfg: &AmaConfig,
) -> Result<Var, AmaError> {
    if tape.value(nodes).shape()[0] == 0 {
        return Err(AmaError::NoNodes);
    }
    let pooled = tape.mean_rows(nodes)?;
    let g_scaled = tape.scale(pooled, beta(Level::Global, Modality::Graph, cfg))?;
    let a_scaled = tape.scale(a, beta(Level::Global, Modality::Sequence, cfg))?;
    let f = tape.concat_cols(g_scaled, a_scaled)?;
    let affine = tape.matmul(f, params.gw)?;
    let z = tape.add(affine, params.gb)?;
    let gate = tape.sigmoid(z)?;
    Ok(tape.mul(gate, pooled)?)
}

/// Full fusion: local gating of the node matrix, then global pooling and
/// gating. Returns the molecule representation as a (1, d_g) row.
pub fn ama_forward(
    tape: &mut Tape,
    g: Var,
    a: Var,
    params: &AmaVars,
    cfg: &AmaConfig,
) -> Result<Var, AmaError> {
    let local = local_fuse(tape, g, a, params, cfg)?;
    global_fuse(tape, local, a, params, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_params(d_g: usize, d_a: usize) -> AmaParams {
        let din = d_g + d_a;
        AmaParams {
            wq: Tensor::zeros(vec![din, d_g]),
            wk: Tensor::zeros(vec![din, d_g]),
            wv: Tensor::zeros(vec![din, d_g]),
            wo: Tensor::zeros(vec![d_g, d_g]),
            gw: Tensor::zeros(vec![din, d_g]),
            gb: Tensor::zeros(vec![1, d_g]),
        }
    }

    fn random_inputs(n: usize, d_g: usize, d_a: usize, seed: u64) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Entries bounded away from zero so strict gating inequalities hold.
        let mut draw = |_: usize| {
            let mag = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        };
        let g = Tensor::new(vec![n, d_g], (0..n * d_g).map(&mut draw).collect()).unwrap();
        let a = Tensor::new(vec![1, d_a], (0..d_a).map(&mut draw).collect()).unwrap();
        (g, a)
    }

    #[test]
    fn beta_schedule_hits_the_documented_values() {
        let cfg = AmaConfig::default();
        let cases = [
            (Level::Local, Modality::Graph, 1.3),
            (Level::Global, Modality::Graph, 0.8),
            (Level::Local, Modality::Sequence, 0.8),
            (Level::Global, Modality::Sequence, 1.3),
        ];
        for (level, modality, want) in cases {
            assert!((beta(level, modality, &cfg) - want).abs() < 1e-12);
        }

        let flat = AmaConfig { k: 0.0, ..AmaConfig::default() };
        assert_eq!(beta(Level::Local, Modality::Graph, &flat), 0.9);
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let cfg = AmaConfig { heads: 4, ..AmaConfig::default() };
        assert_eq!(cfg.validate(6), Err(AmaError::HeadSplit { heads: 4, d_g: 6 }));
        assert!(cfg.validate(8).is_ok());
        let swapped = AmaConfig { beta_min: 1.1, beta_max: 0.9, ..AmaConfig::default() };
        assert!(matches!(swapped.validate(8), Err(AmaError::BetaRange { .. })));
    }

    #[test]
    fn zero_params_gate_at_exactly_one_half() {
        let (g, a) = random_inputs(5, 4, 2, 20);
        let params = zero_params(4, 2);
        let cfg = AmaConfig::default();
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false);
        let gv = tape.constant(g.clone());
        let av = tape.constant(a);

        let local = local_fuse(&mut tape, gv, av, &vars, &cfg).unwrap();
        let want: Vec<f64> = g.data().iter().map(|x| 0.5 * x).collect();
        assert_eq!(tape.value(local).data(), &want[..]);

        // Global gate is also 0.5, so the full output is a quarter of the mean.
        let z = global_fuse(&mut tape, local, av, &vars, &cfg).unwrap();
        for j in 0..4 {
            let mean_j: f64 = (0..5).map(|i| want[i * 4 + j]).sum::<f64>() / 5.0;
            assert_eq!(tape.value(z).data()[j], 0.5 * mean_j);
        }
    }

    #[test]
    fn gating_keeps_outputs_strictly_inside_the_input_envelope() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = AmaParams::init(4, 2, &mut rng);
        let cfg = AmaConfig::default();
        let (g, a) = random_inputs(6, 4, 2, 22);
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false);
        let gv = tape.constant(g.clone());
        let av = tape.constant(a);
        let local = local_fuse(&mut tape, gv, av, &vars, &cfg).unwrap();
        for (out, inp) in tape.value(local).data().iter().zip(g.data()) {
            assert!(out.abs() < inp.abs(), "gate left (0,1): {out} vs {inp}");
            assert!(out * inp > 0.0, "gating flipped a sign");
        }
    }

    #[test]
    fn single_node_matches_hand_computation() {
        // One row: each head's softmax is the scalar 1, so attention
        // passes V through and the output is sigmoid(V * Wo) gating g.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let params = AmaParams::init(4, 2, &mut rng);
        let cfg = AmaConfig::default();
        let (g, a) = random_inputs(1, 4, 2, 24);

        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false);
        let gv = tape.constant(g.clone());
        let av = tape.constant(a.clone());
        let local = local_fuse(&mut tape, gv, av, &vars, &cfg).unwrap();

        let mut f = vec![0.0; 6];
        for j in 0..4 {
            f[j] = g.data()[j] * 1.3;
        }
        for j in 0..2 {
            f[4 + j] = a.data()[j] * 0.8;
        }
        let v: Vec<f64> = (0..4).map(|j| hand_v(&f, &params, j)).collect();
        for j in 0..4 {
            let proj: f64 = (0..4).map(|i| v[i] * params.wo.data()[i * 4 + j]).sum();
            let gate = 1.0 / (1.0 + (-proj).exp());
            let want = gate * g.data()[j];
            let got = tape.value(local).data()[j];
            assert!((got - want).abs() < 1e-12, "col {j}: {got} vs {want}");
        }
    }

    fn hand_v(f: &[f64], params: &AmaParams, j: usize) -> f64 {
        (0..6).map(|i| f[i] * params.wv.data()[i * 4 + j]).sum()
    }

    #[test]
    fn duplicated_rows_leave_global_fusion_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let params = AmaParams::init(4, 2, &mut rng);
        let cfg = AmaConfig::default();
        let (nodes, a) = random_inputs(5, 4, 2, 26);
        let mut doubled_rows = nodes.data().to_vec();
        doubled_rows.extend_from_slice(nodes.data());
        let doubled = Tensor::new(vec![10, 4], doubled_rows).unwrap();

        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false);
        let av = tape.constant(a);
        let n1 = tape.constant(nodes);
        let n2 = tape.constant(doubled);
        let z1 = global_fuse(&mut tape, n1, av, &vars, &cfg).unwrap();
        let z2 = global_fuse(&mut tape, n2, av, &vars, &cfg).unwrap();
        for (x, y) in tape.value(z1).data().iter().zip(tape.value(z2).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_node_matrix_is_rejected() {
        let params = zero_params(4, 2);
        let cfg = AmaConfig::default();
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false);
        let nodes = tape.constant(Tensor::zeros(vec![0, 4]));
        let a = tape.constant(Tensor::zeros(vec![1, 2]));
        assert_eq!(
            global_fuse(&mut tape, nodes, a, &vars, &cfg),
            Err(AmaError::NoNodes)
        );
    }

    #[test]
    fn forward_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let params = AmaParams::init(8, 4, &mut rng);
        let cfg = AmaConfig::default();
        let (g, a) = random_inputs(5, 8, 4, 28);

        let loss_of = |p: &AmaParams| -> f64 {
            let mut tape = Tape::new();
            let vars = p.register(&mut tape, false);
            let gv = tape.constant(g.clone());
            let av = tape.constant(a.clone());
            let z = ama_forward(&mut tape, gv, av, &vars, &cfg).unwrap();
            let loss = tape.sum(z).unwrap();
            tape.value(loss).item()
        };

        let mut tape = Tape::new();
        let vars = params.register(&mut tape, true);
        let gv = tape.constant(g.clone());
        let av = tape.constant(a.clone());
        let z = ama_forward(&mut tape, gv, av, &vars, &cfg).unwrap();
        let loss = tape.sum(z).unwrap();
        let grads = tape.backward(loss).unwrap();

        let step = 1e-5;
        let mut probe = params.clone();
        let mut worst: f64 = 0.0;
        for (ti, var) in vars.vars().iter().enumerate() {
            let analytic = grads.get(*var).unwrap().data().to_vec();
            for i in 0..analytic.len() {
                let orig = probe.tensors_mut()[ti].data()[i];
                probe.tensors_mut()[ti].data_mut()[i] = orig + step;
                let hi = loss_of(&probe);
                probe.tensors_mut()[ti].data_mut()[i] = orig - step;
                let lo = loss_of(&probe);
                probe.tensors_mut()[ti].data_mut()[i] = orig;
                let numeric = (hi - lo) / (2.0 * step);
                let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn degenerate_beta_interval_makes_k_irrelevant() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let params = AmaParams::init(4, 2, &mut rng);
        let (g, a) = random_inputs(4, 4, 2, 30);
        // validate() rejects min == max, but the forward math is total;
        // the schedule collapses and k cancels.
        let cfg_a = AmaConfig { beta_min: 0.95, beta_max: 0.95, k: 2.0, heads: 2 };
        let cfg_b = AmaConfig { beta_min: 0.95, beta_max: 0.95, k: 4.0, heads: 2 };

        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false);
        let gv = tape.constant(g);
        let av = tape.constant(a);
        let za = ama_forward(&mut tape, gv, av, &vars, &cfg_a).unwrap();
        let zb = ama_forward(&mut tape, gv, av, &vars, &cfg_b).unwrap();
        assert_eq!(tape.value(za).data(), tape.value(zb).data());
        assert_eq!(tape.value(za).shape(), &[1, 4]);
    }

    #[test]
    fn node_permutation_leaves_the_molecule_vector_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let params = AmaParams::init(6, 3, &mut rng);
        let cfg = AmaConfig { heads: 3, ..AmaConfig::default() };
        let (g, a) = random_inputs(7, 6, 3, 32);

        let mut perm: Vec<usize> = (0..7).collect();
        for i in (1..7).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let mut pg = Tensor::zeros(vec![7, 6]);
        for i in 0..7 {
            for j in 0..6 {
                pg.data_mut()[perm[i] * 6 + j] = g.data()[i * 6 + j];
            }
        }

        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false);
        let av = tape.constant(a);
        let g1 = tape.constant(g);
        let g2 = tape.constant(pg);

        let l1 = local_fuse(&mut tape, g1, av, &vars, &cfg).unwrap();
        let l2 = local_fuse(&mut tape, g2, av, &vars, &cfg).unwrap();
        for i in 0..7 {
            for j in 0..6 {
                let base = tape.value(l1).data()[i * 6 + j];
                let moved = tape.value(l2).data()[perm[i] * 6 + j];
                assert!((base - moved).abs() < 1e-9);
            }
        }

        let z1 = global_fuse(&mut tape, l1, av, &vars, &cfg).unwrap();
        let z2 = global_fuse(&mut tape, l2, av, &vars, &cfg).unwrap();
        for (x, y) in tape.value(z1).data().iter().zip(tape.value(z2).data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}
