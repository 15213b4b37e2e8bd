//! Rationale extraction: searches the connected subgraphs of a positive
//! molecule for small fragments the trained model still scores highly.
//!
//! The search is PUCT-guided tree search over deletion moves. States are
//! memoized by atom mask, so the "tree" is really a DAG and identical
//! fragments reached along different paths share one score. Nothing here
//! draws randomness: selection ties break toward the lowest action index
//! and the scorer is a deterministic forward pass, so a search is exactly
//! reproducible.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::autodiff::{Tape, TapeError, Tensor};
use crate::encoders::EncoderError;
use crate::model::{embed, embed_with_sequence, Checkpoint, ModelError};
use crate::protonet::{predict, prototype, ProtoError, Prototypes};
use crate::smiles::{
    apply_deletion, candidate_deletions, extract_subgraph, tokenize, Atom, DeletionAction,
    MolGraph, ParseError, SubgraphError, SubgraphState,
};

#[derive(Debug, Error)]
pub enum MctsError {
    #[error("size window requires max_atoms >= min_atoms >= 1, got max_atoms={max_atoms}, min_atoms={min_atoms}")]
    SizeWindow { max_atoms: usize, min_atoms: usize },
    #[error("iterations must be at least 1")]
    ZeroIterations,
    #[error("exploration constant must be positive, got {0}")]
    Exploration(f64),
    #[error("score threshold {0} must lie in (0, 1)")]
    Threshold(f64),
    #[error("cannot score an empty subgraph")]
    EmptyState,
    #[error("node has no legal actions")]
    Terminal,
    #[error("support set needs at least one molecule of each class")]
    SupportClass,
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Subgraph(#[from] SubgraphError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Proto(#[from] ProtoError),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    /// Largest rationale size; descent stops at the first state at or
    /// under this.
    pub max_atoms: usize,
    /// Smallest rationale size admitted to the vocabulary.
    pub min_atoms: usize,
    /// Score threshold for vocabulary admission.
    pub threshold: f64,
    /// PUCT exploration constant.
    pub c_puct: f64,
    pub iterations: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            max_atoms: 20,
            min_atoms: 5,
            threshold: 0.5,
            c_puct: 2.0,
            iterations: 500,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), MctsError> {
        if self.min_atoms == 0 || self.max_atoms < self.min_atoms {
            return Err(MctsError::SizeWindow {
                max_atoms: self.max_atoms,
                min_atoms: self.min_atoms,
            });
        }
        if self.iterations == 0 {
            return Err(MctsError::ZeroIterations);
        }
        if self.c_puct <= 0.0 {
            return Err(MctsError::Exploration(self.c_puct));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(MctsError::Threshold(self.threshold));
        }
        Ok(())
    }
}

/// Scoring seam: positive-class probability for a subgraph state. The
/// model-backed implementation is [`RationaleScorer`]; tests substitute
/// synthetic reward surfaces.
pub trait SubgraphScorer {
    fn score(&self, state: &SubgraphState<'_>) -> Result<f64, MctsError>;
}

/// Model-backed scorer: a trained checkpoint plus class prototypes built
/// once from a designated support set of the property's task.
pub struct RationaleScorer<'a> {
    checkpoint: &'a Checkpoint,
    proto_pos: Vec<f64>,
    proto_neg: Vec<f64>,
}

impl<'a> RationaleScorer<'a> {
    pub fn new(
        checkpoint: &'a Checkpoint,
        support: &[(&MolGraph, u8)],
    ) -> Result<RationaleScorer<'a>, MctsError> {
        let mut tape = Tape::new();
        let vars = checkpoint.params.register(&mut tape, false);
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for &(mol, y) in support {
            let z = embed(&mut tape, mol, &checkpoint.featurizer, &vars, &checkpoint.config)?;
            if y == 1 {
                pos.push(z);
            } else {
                neg.push(z);
            }
        }
        if pos.is_empty() || neg.is_empty() {
            return Err(MctsError::SupportClass);
        }
        let p = prototype(&mut tape, &pos)?;
        let n = prototype(&mut tape, &neg)?;
        let proto_pos = tape.value(p).data().to_vec();
        let proto_neg = tape.value(n).data().to_vec();
        Ok(RationaleScorer { checkpoint, proto_pos, proto_neg })
    }
}

/// Token a fragment atom contributes to the sequence features. Charge and
/// bracket hydrogens reproduce the bracket spelling; plain atoms use the
/// bare (lowercased when aromatic) symbol.
fn atom_token(atom: &Atom) -> String {
    let mut sym = atom.element.symbol().to_string();
    if atom.aromatic {
        sym.make_ascii_lowercase();
    }
    if atom.charge == 0 && atom.explicit_h == 0 {
        return sym;
    }
    let mut t = String::from("[");
    t.push_str(&sym);
    match atom.explicit_h {
        0 => {}
        1 => t.push('H'),
        n => {
            t.push('H');
            t.push_str(&n.to_string());
        }
    }
    if atom.charge > 0 {
        t.push('+');
        if atom.charge > 1 {
            t.push_str(&atom.charge.to_string());
        }
    } else if atom.charge < 0 {
        t.push('-');
        if atom.charge < -1 {
            t.push_str(&(-atom.charge).to_string());
        }
    }
    t.push(']');
    t
}

fn bond_token(order: u8, aromatic: bool) -> &'static str {
    if aromatic {
        ":"
    } else {
        match order {
            3 => "#",
            2 => "=",
            _ => "-",
        }
    }
}

/// Token multiset for a proper fragment: atom tokens in parent atom
/// order, then bond symbols in parent bond order. Fragments have no
/// SMILES string of their own, so this stands in for one; the identity
/// state instead reuses the source tokens so the full molecule scores
/// exactly like an ordinary prediction.
fn fragment_tokens(state: &SubgraphState<'_>) -> Vec<String> {
    let parent = state.parent();
    let mut tokens: Vec<String> = state
        .atom_indices()
        .into_iter()
        .map(|i| atom_token(&parent.atoms()[i]))
        .collect();
    for bond in parent.bonds() {
        if state.contains_atom(bond.a) && state.contains_atom(bond.b) {
            tokens.push(bond_token(bond.order, bond.aromatic).to_string());
        }
    }
    tokens
}

impl SubgraphScorer for RationaleScorer<'_> {
    fn score(&self, state: &SubgraphState<'_>) -> Result<f64, MctsError> {
        if state.atom_count() == 0 {
            return Err(MctsError::EmptyState);
        }
        let tokens = if state.atom_count() == state.parent().atom_count() {
            tokenize(state.parent().source())?
        } else {
            fragment_tokens(state)
        };
        let a_vec = self.checkpoint.featurizer.encode_tokens(&tokens)?;
        let graph = extract_subgraph(state);

        let mut tape = Tape::new();
        let vars = self.checkpoint.params.register(&mut tape, false);
        let z = embed_with_sequence(&mut tape, &graph, &a_vec, &vars, &self.checkpoint.config)?;
        let protos = Prototypes {
            positive: tape.constant(Tensor::row(self.proto_pos.clone())),
            negative: tape.constant(Tensor::row(self.proto_neg.clone())),
        };
        let p = predict(&mut tape, z, &protos)?;
        Ok(tape.value(p).item())
    }
}

// ── search tree ─────────────────────────────────────────────────────────

/// Per-action bookkeeping on one node.
#[derive(Debug, Clone)]
pub struct ActionStats {
    pub action: DeletionAction,
    /// N: completed rollouts that chose this action here.
    pub visits: u64,
    /// W: sum of leaf rewards propagated through this action.
    pub total_value: f64,
    /// R: the child state's predicted score, fixed at expansion.
    pub prior_score: f64,
    /// Index into the node list once the child has been descended into.
    pub child: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct SearchNode<'m> {
    pub state: SubgraphState<'m>,
    pub actions: Vec<ActionStats>,
}

/// One recorded rollout: the (node, action index) edges walked from the
/// root, and the leaf reward that was backed up along them.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutTrace {
    pub path: Vec<(usize, usize)>,
    pub reward: f64,
}

#[derive(Debug, Clone)]
pub struct RationaleEntry {
    pub source: String,
    /// Kept atom indices of the source molecule, ascending.
    pub atoms: Vec<usize>,
    pub subgraph: MolGraph,
    pub score: f64,
}

impl RationaleEntry {
    /// Report line: source, kept atom indices, score to 4 decimals,
    /// tab-separated.
    pub fn report_line(&self) -> String {
        let atoms = self
            .atoms
            .iter()
            .map(|a| a.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!("{}\t{}\t{:.4}", self.source, atoms, self.score)
    }
}

#[derive(Debug)]
pub struct SearchOutcome<'m> {
    /// Qualifying rationales, best score first; ties order by atom list.
    pub rationales: Vec<RationaleEntry>,
    /// Every materialized node; index 0 is the root.
    pub nodes: Vec<SearchNode<'m>>,
    /// One trace per rollout, in order.
    pub traces: Vec<RolloutTrace>,
}

/// PUCT selection: argmax over Q + c_puct * R * sqrt(sum_b N_b) / (1 + N),
/// with Q read as 0 for unvisited actions and ties broken toward the
/// lowest action index.
pub fn select_action(node: &SearchNode<'_>, cfg: &SearchConfig) -> Result<usize, MctsError> {
    if node.actions.is_empty() {
        return Err(MctsError::Terminal);
    }
    let total: u64 = node.actions.iter().map(|a| a.visits).sum();
    let sqrt_total = (total as f64).sqrt();
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, a) in node.actions.iter().enumerate() {
        let q = if a.visits > 0 { a.total_value / a.visits as f64 } else { 0.0 };
        let u = cfg.c_puct * a.prior_score * sqrt_total / (1.0 + a.visits as f64);
        if q + u > best_score {
            best_score = q + u;
            best = i;
        }
    }
    Ok(best)
}

struct Search<'m, 's> {
    nodes: Vec<SearchNode<'m>>,
    node_index: BTreeMap<Vec<u64>, usize>,
    /// Every state scored so far, by mask key. States land here when a
    /// leaf is evaluated or when expansion prices a child; the vocabulary
    /// is read off this cache at the end.
    scored: BTreeMap<Vec<u64>, (SubgraphState<'m>, f64)>,
    scorer: &'s dyn SubgraphScorer,
    max_atoms: usize,
}

impl<'m> Search<'m, '_> {
    fn score_state(&mut self, state: &SubgraphState<'m>) -> Result<f64, MctsError> {
        let key = state.mask_key();
        if let Some((_, r)) = self.scored.get(&key) {
            return Ok(*r);
        }
        let r = self.scorer.score(state)?;
        self.scored.insert(key, (state.clone(), r));
        Ok(r)
    }

    /// Node for `state`, creating it on first sight. Interior nodes
    /// (above the leaf size) expand immediately: every legal action is
    /// enumerated and its child state scored to seed R.
    fn node_for(&mut self, state: SubgraphState<'m>) -> Result<usize, MctsError> {
        let key = state.mask_key();
        if let Some(&idx) = self.node_index.get(&key) {
            return Ok(idx);
        }
        let mut actions = Vec::new();
        if state.atom_count() > self.max_atoms {
            for action in candidate_deletions(&state) {
                let child_state = apply_deletion(&state, &action)?;
                let prior_score = self.score_state(&child_state)?;
                actions.push(ActionStats {
                    action,
                    visits: 0,
                    total_value: 0.0,
                    prior_score,
                    child: None,
                });
            }
        }
        let idx = self.nodes.len();
        self.nodes.push(SearchNode { state, actions });
        self.node_index.insert(key, idx);
        Ok(idx)
    }

    /// Child node behind edge `a` of node `n`, materializing it lazily.
    fn child(&mut self, n: usize, a: usize) -> Result<usize, MctsError> {
        if let Some(c) = self.nodes[n].actions[a].child {
            return Ok(c);
        }
        let next_state = apply_deletion(&self.nodes[n].state, &self.nodes[n].actions[a].action)?;
        let c = self.node_for(next_state)?;
        self.nodes[n].actions[a].child = Some(c);
        Ok(c)
    }
}

/// Runs `iterations` rollouts from the whole molecule. Each rollout
/// descends by [`select_action`] until the state is at or under the leaf
/// size (or has no legal move), scores that leaf, and backs the reward up
/// the walked edges. Every state the search scored whose size sits in
/// [min_atoms, max_atoms] and whose score clears the threshold enters the
/// vocabulary, deduplicated by atom set.
pub fn run_search<'m>(
    mol: &'m MolGraph,
    scorer: &dyn SubgraphScorer,
    cfg: &SearchConfig,
) -> Result<SearchOutcome<'m>, MctsError> {
    cfg.validate()?;
    if mol.atom_count() < cfg.min_atoms {
        log::warn!(
            "molecule '{}' has {} atoms, below the {}-atom rationale minimum",
            mol.source(),
            mol.atom_count(),
            cfg.min_atoms
        );
        return Ok(SearchOutcome { rationales: Vec::new(), nodes: Vec::new(), traces: Vec::new() });
    }

    let mut search = Search {
        nodes: Vec::new(),
        node_index: BTreeMap::new(),
        scored: BTreeMap::new(),
        scorer,
        max_atoms: cfg.max_atoms,
    };
    let root = search.node_for(SubgraphState::full(mol))?;

    let mut traces = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let mut path: Vec<(usize, usize)> = Vec::new();
        let mut current = root;
        while search.nodes[current].state.atom_count() > cfg.max_atoms
            && !search.nodes[current].actions.is_empty()
        {
            let a = select_action(&search.nodes[current], cfg)?;
            path.push((current, a));
            current = search.child(current, a)?;
        }
        let leaf_state = search.nodes[current].state.clone();
        let reward = search.score_state(&leaf_state)?;
        for &(n, a) in &path {
            let edge = &mut search.nodes[n].actions[a];
            edge.visits += 1;
            edge.total_value += reward;
        }
        traces.push(RolloutTrace { path, reward });
    }

    let mut rationales: Vec<RationaleEntry> = search
        .scored
        .values()
        .filter(|(state, r)| {
            let n = state.atom_count();
            n >= cfg.min_atoms && n <= cfg.max_atoms && *r >= cfg.threshold
        })
        .map(|(state, r)| RationaleEntry {
            source: mol.source().to_string(),
            atoms: state.atom_indices(),
            subgraph: extract_subgraph(state),
            score: *r,
        })
        .collect();
    rationales.sort_by(|x, y| {
        y.score.total_cmp(&x.score).then_with(|| x.atoms.cmp(&y.atoms))
    });

    Ok(SearchOutcome { rationales, nodes: search.nodes, traces })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ama::AmaConfig;
    use crate::encoders::SeqFeaturizer;
    use crate::model::{ModelConfig, ModelParams};
    use crate::smiles::parse_smiles;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Reward is a fixed constant everywhere.
    struct Constant(f64);

    impl SubgraphScorer for Constant {
        fn score(&self, _state: &SubgraphState<'_>) -> Result<f64, MctsError> {
            Ok(self.0)
        }
    }

    /// Reward favors small fragments containing a marked atom.
    struct MarkedAtom {
        atom: usize,
    }

    impl SubgraphScorer for MarkedAtom {
        fn score(&self, state: &SubgraphState<'_>) -> Result<f64, MctsError> {
            let n = state.atom_count() as f64;
            let total = state.parent().atom_count() as f64;
            if state.contains_atom(self.atom) {
                Ok(0.5 + 0.5 * (1.0 - n / total).min(0.98))
            } else {
                Ok(0.1)
            }
        }
    }

    fn tiny_checkpoint() -> Checkpoint {
        let cfg = ModelConfig {
            d_g: 8,
            gin_layers: 2,
            hash_dim: 64,
            d_a: 3,
            ama: AmaConfig::default(),
        };
        let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(70));
        let mut featurizer = SeqFeaturizer::new(cfg.hash_dim);
        let corpus = ["CCO", "CCN", "CCC", "CCCC", "c1ccccc1", "CC(=O)O", "CCS", "CC(C)O"];
        featurizer.fit(corpus.iter().copied(), cfg.d_a).unwrap();
        Checkpoint::new(cfg, params, featurizer)
    }

    fn scorer_fixture(ckpt: &Checkpoint) -> RationaleScorer<'_> {
        let pos1 = parse_smiles("CC(=O)O").unwrap();
        let pos2 = parse_smiles("CCO").unwrap();
        let neg1 = parse_smiles("CCC").unwrap();
        let neg2 = parse_smiles("CCS").unwrap();
        let support =
            vec![(&pos1, 1u8), (&pos2, 1u8), (&neg1, 0u8), (&neg2, 0u8)];
        // leaked graphs keep the borrow checker simple inside tests
        let support: Vec<(&'static MolGraph, u8)> = support
            .into_iter()
            .map(|(m, y)| (Box::leak(Box::new(m.clone())) as &MolGraph, y))
            .collect();
        RationaleScorer::new(ckpt, &support).unwrap()
    }

    #[test]
    fn identity_state_scores_like_an_ordinary_prediction() {
        let ckpt = tiny_checkpoint();
        let scorer = scorer_fixture(&ckpt);
        let mol = parse_smiles("CC(C)CC(=O)O").unwrap();
        let via_search = scorer.score(&SubgraphState::full(&mol)).unwrap();

        // ordinary prediction path: encode the source string directly
        let mut tape = Tape::new();
        let vars = ckpt.params.register(&mut tape, false);
        let z = embed(&mut tape, &mol, &ckpt.featurizer, &vars, &ckpt.config).unwrap();
        let protos = Prototypes {
            positive: tape.constant(Tensor::row(scorer.proto_pos.clone())),
            negative: tape.constant(Tensor::row(scorer.proto_neg.clone())),
        };
        let direct = predict(&mut tape, z, &protos).unwrap();
        assert_eq!(via_search, tape.value(direct).item());
    }

    #[test]
    fn scores_are_probabilities_and_deterministic() {
        let ckpt = tiny_checkpoint();
        let scorer = scorer_fixture(&ckpt);
        let mol = parse_smiles("CC(C)CC1CCC1CO").unwrap();
        let mut states = vec![SubgraphState::full(&mol)];
        // random deletion walks gather a pile of distinct states
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for _ in 0..100 {
            let from = states[rng.gen_range(0..states.len())].clone();
            let actions = candidate_deletions(&from);
            if actions.is_empty() {
                continue;
            }
            let next = apply_deletion(&from, &actions[rng.gen_range(0..actions.len())]).unwrap();
            states.push(next);
        }
        for state in &states {
            let r = scorer.score(state).unwrap();
            assert!((0.0..=1.0).contains(&r), "score {r} outside [0,1]");
            assert_eq!(r, scorer.score(state).unwrap());
        }
    }

    #[test]
    fn empty_support_class_is_rejected() {
        let ckpt = tiny_checkpoint();
        let pos = parse_smiles("CCO").unwrap();
        let support = vec![(&pos, 1u8)];
        assert!(matches!(
            RationaleScorer::new(&ckpt, &support),
            Err(MctsError::SupportClass)
        ));
    }

    fn stats(action: DeletionAction, visits: u64, w: f64, r: f64) -> ActionStats {
        ActionStats { action, visits, total_value: w, prior_score: r, child: None }
    }

    fn two_action_node(mol: &MolGraph) -> SearchNode<'_> {
        let state = SubgraphState::full(mol);
        let mut actions = candidate_deletions(&state);
        assert!(actions.len() >= 2);
        let b = actions.pop().unwrap();
        let a = actions.remove(0);
        SearchNode {
            state,
            actions: vec![stats(a, 1, 0.9, 0.9), stats(b, 0, 0.0, 0.8)],
        }
    }

    #[test]
    fn selection_prefers_zero_index_when_all_statistics_are_zero() {
        let mol = parse_smiles("CCCC").unwrap();
        let state = SubgraphState::full(&mol);
        let actions = candidate_deletions(&state)
            .into_iter()
            .map(|a| stats(a, 0, 0.0, 0.7))
            .collect();
        let node = SearchNode { state, actions };
        assert_eq!(select_action(&node, &SearchConfig::default()).unwrap(), 0);
    }

    #[test]
    fn selection_hand_example_and_exploration_flip() {
        // visited: Q=0.9, U = 2*0.9*sqrt(1)/2 = 0.9, total 1.8
        // fresh:   Q=0,   U = 2*0.8*sqrt(1)/1 = 1.6
        let mol = parse_smiles("CCCC").unwrap();
        let node = two_action_node(&mol);
        let cfg = SearchConfig { c_puct: 2.0, ..SearchConfig::default() };
        assert_eq!(select_action(&node, &cfg).unwrap(), 0);

        // raising c_puct weights the priors until the fresh action wins
        let cfg = SearchConfig { c_puct: 9.0, ..SearchConfig::default() };
        assert_eq!(select_action(&node, &cfg).unwrap(), 1);
    }

    #[test]
    fn terminal_node_is_a_selection_error() {
        let mol = parse_smiles("CCCC").unwrap();
        let node = SearchNode { state: SubgraphState::full(&mol), actions: vec![] };
        assert!(matches!(
            select_action(&node, &SearchConfig::default()),
            Err(MctsError::Terminal)
        ));
    }

    #[test]
    fn config_validation_guards_every_field() {
        let ok = SearchConfig::default();
        assert!(ok.validate().is_ok());
        let bad = SearchConfig { min_atoms: 0, ..ok.clone() };
        assert!(matches!(bad.validate(), Err(MctsError::SizeWindow { .. })));
        let bad = SearchConfig { max_atoms: 3, min_atoms: 5, ..ok.clone() };
        assert!(matches!(bad.validate(), Err(MctsError::SizeWindow { .. })));
        let bad = SearchConfig { iterations: 0, ..ok.clone() };
        assert!(matches!(bad.validate(), Err(MctsError::ZeroIterations)));
        let bad = SearchConfig { c_puct: 0.0, ..ok.clone() };
        assert!(matches!(bad.validate(), Err(MctsError::Exploration(_))));
        let bad = SearchConfig { threshold: 1.0, ..ok };
        assert!(matches!(bad.validate(), Err(MctsError::Threshold(_))));
    }

    #[test]
    fn first_rollout_marks_every_edge_on_its_path_once() {
        // C5 chain with leaf size 2: the first rollout walks lowest-index
        // edges down to a 2-atom leaf, traversing three edges.
        let mol = parse_smiles("CCCCC").unwrap();
        let cfg = SearchConfig {
            max_atoms: 2,
            min_atoms: 1,
            iterations: 1,
            ..SearchConfig::default()
        };
        let out = run_search(&mol, &Constant(0.75), &cfg).unwrap();
        assert_eq!(out.traces.len(), 1);
        let trace = &out.traces[0];
        assert_eq!(trace.reward, 0.75);
        assert!(!trace.path.is_empty());
        for &(n, a) in &trace.path {
            assert_eq!(out.nodes[n].actions[a].visits, 1);
            assert_eq!(out.nodes[n].actions[a].total_value, 0.75);
        }
        // edges off the path stay untouched
        for (n, node) in out.nodes.iter().enumerate() {
            for (a, edge) in node.actions.iter().enumerate() {
                if !trace.path.contains(&(n, a)) {
                    assert_eq!(edge.visits, 0);
                    assert_eq!(edge.total_value, 0.0);
                }
            }
        }
    }

    #[test]
    fn whole_molecule_enters_vocabulary_when_already_small_enough() {
        let mol = parse_smiles("CCO").unwrap();
        let cfg = SearchConfig { min_atoms: 1, iterations: 5, ..SearchConfig::default() };
        let out = run_search(&mol, &Constant(0.9), &cfg).unwrap();
        assert_eq!(out.rationales.len(), 1);
        assert_eq!(out.rationales[0].atoms, vec![0, 1, 2]);
        assert_eq!(out.rationales[0].score, 0.9);
        assert_eq!(out.rationales[0].subgraph.atom_count(), 3);
        // root is an immediate leaf: no edges, empty paths
        assert!(out.traces.iter().all(|t| t.path.is_empty()));
    }

    #[test]
    fn molecule_below_minimum_size_yields_nothing() {
        let mol = parse_smiles("CC").unwrap();
        let cfg = SearchConfig { min_atoms: 5, ..SearchConfig::default() };
        let out = run_search(&mol, &Constant(0.9), &cfg).unwrap();
        assert!(out.rationales.is_empty());
        assert!(out.nodes.is_empty());
        assert!(out.traces.is_empty());
    }

    #[test]
    fn bookkeeping_matches_replayed_traces_exactly() {
        let mol = parse_smiles("CC(C)CC1CCC1CO").unwrap();
        let cfg = SearchConfig {
            max_atoms: 5,
            min_atoms: 2,
            iterations: 200,
            ..SearchConfig::default()
        };
        let out = run_search(&mol, &MarkedAtom { atom: 4 }, &cfg).unwrap();

        // replay: recompute expected N and W per edge from the traces
        let mut expect: BTreeMap<(usize, usize), (u64, f64)> = BTreeMap::new();
        for trace in &out.traces {
            for &(n, a) in &trace.path {
                let e = expect.entry((n, a)).or_insert((0, 0.0));
                e.0 += 1;
                e.1 += trace.reward;
            }
        }
        for (n, node) in out.nodes.iter().enumerate() {
            let through: u64 = node.actions.iter().map(|a| a.visits).sum();
            let walked = out
                .traces
                .iter()
                .filter(|t| t.path.iter().any(|&(pn, _)| pn == n))
                .count() as u64;
            assert_eq!(through, walked, "rollouts through node {n}");
            for (a, edge) in node.actions.iter().enumerate() {
                let (en, ew) = expect.get(&(n, a)).copied().unwrap_or((0, 0.0));
                assert_eq!(edge.visits, en);
                assert_eq!(edge.total_value, ew, "W at node {n} action {a}");
            }
        }
    }

    #[test]
    fn constant_rewards_spread_visits_evenly() {
        // C8 chain with leaf size 7: every root action leads straight to
        // a leaf, so root visits must round-robin within a count of 1.
        let mol = parse_smiles("CCCCCCCC").unwrap();
        let cfg = SearchConfig {
            max_atoms: 7,
            min_atoms: 1,
            c_puct: 10.0,
            iterations: 500,
            ..SearchConfig::default()
        };
        let out = run_search(&mol, &Constant(0.6), &cfg).unwrap();
        let root = &out.nodes[0];
        assert!(root.actions.len() > 1);
        let min = root.actions.iter().map(|a| a.visits).min().unwrap();
        let max = root.actions.iter().map(|a| a.visits).max().unwrap();
        assert_eq!(
            root.actions.iter().map(|a| a.visits).sum::<u64>(),
            cfg.iterations as u64
        );
        assert!(max - min <= 1, "visits spread {min}..{max}");
    }

    #[test]
    fn vocabulary_deduplicates_across_paths_and_sorts_by_score() {
        let mol = parse_smiles("CCCCC").unwrap();
        let cfg = SearchConfig {
            max_atoms: 4,
            min_atoms: 2,
            threshold: 0.2,
            iterations: 300,
            ..SearchConfig::default()
        };
        let out = run_search(&mol, &MarkedAtom { atom: 2 }, &cfg).unwrap();
        assert!(!out.rationales.is_empty());
        for pair in out.rationales.windows(2) {
            assert!(
                pair[0].score > pair[1].score
                    || (pair[0].score == pair[1].score && pair[0].atoms < pair[1].atoms)
            );
        }
        // atom sets are unique
        let mut seen: Vec<&[usize]> = Vec::new();
        for r in &out.rationales {
            assert!(!seen.contains(&r.atoms.as_slice()), "duplicate {:?}", r.atoms);
            seen.push(&r.atoms);
        }
        // every entry respects the window, the threshold, and really is a
        // connected subgraph of the source
        for r in &out.rationales {
            assert!(r.atoms.len() >= cfg.min_atoms && r.atoms.len() <= cfg.max_atoms);
            assert!(r.score >= cfg.threshold);
            assert_eq!(r.subgraph.atom_count(), r.atoms.len());
            assert_eq!(r.source, "CCCCC");
        }
    }

    #[test]
    fn report_line_format() {
        let mol = parse_smiles("CCO").unwrap();
        let entry = RationaleEntry {
            source: "CCO".to_string(),
            atoms: vec![0, 2],
            subgraph: mol,
            score: 0.87654,
        };
        assert_eq!(entry.report_line(), "CCO\t0,2\t0.8765");
    }

    #[test]
    fn fragment_tokens_follow_parent_order() {
        let mol = parse_smiles("OC(=O)c1ccccc1").unwrap();
        let state = SubgraphState::full(&mol);
        // peel the benzene ring's exclusive atoms off
        let ring = candidate_deletions(&state)
            .into_iter()
            .find(|a| matches!(a, DeletionAction::Ring { .. }))
            .unwrap();
        let next = apply_deletion(&state, &ring).unwrap();
        let tokens = fragment_tokens(&next);
        // O, C, O, junction c stay; bonds: O-C, C=O, C-c
        assert_eq!(tokens, vec!["O", "C", "O", "c", "-", "=", "-"]);
    }

    #[test]
    fn atom_tokens_reconstruct_bracket_spelling() {
        let mol = parse_smiles("[NH3+]CC[O-]").unwrap();
        let atoms = mol.atoms();
        assert_eq!(atom_token(&atoms[0]), "[NH3+]");
        assert_eq!(atom_token(&atoms[1]), "C");
        assert_eq!(atom_token(&atoms[3]), "[O-]");
    }
}
