//! Connected-subgraph states over a parent molecule and the peripheral
//! deletion moves between them.
//!
//! A state keeps the parent's atom indices; deletions remove either the
//! smaller side of a non-aromatic acyclic bond or the exclusive atoms of a
//! peripheral ring. Every reachable state stays connected and non-empty,
//! which is what lets the search treat states as nodes.

use super::{Atom, Bond, MolGraph};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SubgraphError {
    #[error("action is not a legal deletion for this state")]
    IllegalAction,
}

/// Masked view of a parent molecule. Atom and bond indices are parent
/// indices throughout.
#[derive(Debug, Clone)]
pub struct SubgraphState<'m> {
    parent: &'m MolGraph,
    atom_mask: Vec<bool>,
    bond_mask: Vec<bool>,
}

/// One legal deletion. `removed` lists the atoms that leave, ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeletionAction {
    /// delete a bridge bond and the smaller side it cuts off
    Bond { bond: usize, removed: Vec<usize> },
    /// delete a peripheral ring's exclusive atoms
    Ring { ring_atoms: Vec<usize>, removed: Vec<usize> },
}

impl DeletionAction {
    pub fn removed_atoms(&self) -> &[usize] {
        match self {
            DeletionAction::Bond { removed, .. } => removed,
            DeletionAction::Ring { removed, .. } => removed,
        }
    }
}

impl<'m> SubgraphState<'m> {
    /// Identity subgraph covering the whole molecule.
    pub fn full(parent: &'m MolGraph) -> Self {
        SubgraphState {
            parent,
            atom_mask: vec![true; parent.atom_count()],
            bond_mask: vec![true; parent.bond_count()],
        }
    }

    pub fn parent(&self) -> &'m MolGraph {
        self.parent
    }

    pub fn atom_count(&self) -> usize {
        self.atom_mask.iter().filter(|&&m| m).count()
    }

    pub fn contains_atom(&self, atom: usize) -> bool {
        self.atom_mask[atom]
    }

    /// Kept atoms in ascending parent order.
    pub fn atom_indices(&self) -> Vec<usize> {
        (0..self.atom_mask.len()).filter(|&i| self.atom_mask[i]).collect()
    }

    /// Bit-packed atom mask; stable identity key for memoization and
    /// vocabulary deduplication.
    pub fn mask_key(&self) -> Vec<u64> {
        let mut key = vec![0u64; (self.atom_mask.len() + 63) / 64];
        for (i, &m) in self.atom_mask.iter().enumerate() {
            if m {
                key[i / 64] |= 1 << (i % 64);
            }
        }
        key
    }

    fn masked_neighbors(&self, atom: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.parent
            .neighbors(atom)
            .iter()
            .copied()
            .filter(move |&(u, bi)| self.atom_mask[u] && self.bond_mask[bi])
    }

    /// Flood fill from `start`, optionally pretending one bond is absent.
    fn component(&self, start: usize, skip_bond: Option<usize>) -> Vec<bool> {
        let mut seen = vec![false; self.atom_mask.len()];
        let mut queue = vec![start];
        seen[start] = true;
        while let Some(v) = queue.pop() {
            for (u, bi) in self.masked_neighbors(v) {
                if Some(bi) != skip_bond && !seen[u] {
                    seen[u] = true;
                    queue.push(u);
                }
            }
        }
        seen
    }

    fn lowest_atom(&self) -> usize {
        self.atom_mask.iter().position(|&m| m).expect("state is non-empty")
    }
}

/// All legal deletions from `state`, deterministically ordered: bond
/// deletions by bond index, then ring deletions by their sorted atom lists.
pub fn candidate_deletions(state: &SubgraphState<'_>) -> Vec<DeletionAction> {
    let mut actions = Vec::new();
    let parent = state.parent;
    let total: usize = state.atom_count();

    for (bi, bond) in parent.bonds().iter().enumerate() {
        if !state.bond_mask[bi] || bond.aromatic {
            continue;
        }
        // a deletable bond must split the state in two; cycle bonds never do
        let side_a = state.component(bond.a, Some(bi));
        if side_a[bond.b] {
            continue;
        }
        let count_a = side_a.iter().filter(|&&s| s).count();
        let count_b = total - count_a;
        let anchor = state.lowest_atom();
        let remove_a = match count_a.cmp(&count_b) {
            std::cmp::Ordering::Less => true,
            std::cmp::Ordering::Greater => false,
            std::cmp::Ordering::Equal => !side_a[anchor],
        };
        let removed: Vec<usize> = (0..side_a.len())
            .filter(|&i| state.atom_mask[i] && side_a[i] == remove_a)
            .collect();
        if removed.len() == total {
            continue;
        }
        actions.push(DeletionAction::Bond { bond: bi, removed });
    }

    let mut ring_actions: Vec<DeletionAction> = Vec::new();
    for ring in enumerate_rings(state) {
        let ring_set: BTreeSet<usize> = ring.atoms.iter().copied().collect();
        // junction atoms touch masked-in bonds outside the ring's bond set
        let mut exclusive: Vec<usize> = Vec::new();
        for &a in &ring.atoms {
            let outside = state
                .masked_neighbors(a)
                .any(|(_, bi)| !ring.bonds.contains(&bi));
            if !outside {
                exclusive.push(a);
            }
        }
        if exclusive.is_empty() || exclusive.len() == total {
            continue;
        }
        // removal must leave one connected piece
        let mut probe = state.clone();
        for &a in &exclusive {
            probe.atom_mask[a] = false;
        }
        for (bi, bond) in parent.bonds().iter().enumerate() {
            if probe.bond_mask[bi] && (!probe.atom_mask[bond.a] || !probe.atom_mask[bond.b]) {
                probe.bond_mask[bi] = false;
            }
        }
        let start = probe.lowest_atom();
        let seen = probe.component(start, None);
        let reached = seen.iter().filter(|&&s| s).count();
        if reached != total - exclusive.len() {
            continue;
        }
        let mut ring_atoms: Vec<usize> = ring_set.into_iter().collect();
        ring_atoms.sort_unstable();
        ring_actions.push(DeletionAction::Ring { ring_atoms, removed: exclusive });
    }
    ring_actions.sort_by(|x, y| match (x, y) {
        (
            DeletionAction::Ring { ring_atoms: a, .. },
            DeletionAction::Ring { ring_atoms: b, .. },
        ) => a.len().cmp(&b.len()).then_with(|| a.cmp(b)),
        _ => unreachable!("only ring actions collected here"),
    });
    ring_actions.dedup();
    actions.extend(ring_actions);
    actions
}

struct RingCandidate {
    atoms: Vec<usize>,
    bonds: BTreeSet<usize>,
}

/// Simple cycles of the masked subgraph, deduplicated by bond set. Molecular
/// graphs at this scale keep the enumeration small.
fn enumerate_rings(state: &SubgraphState<'_>) -> Vec<RingCandidate> {
    let n = state.atom_mask.len();
    let mut out: Vec<RingCandidate> = Vec::new();
    let mut seen_bondsets: BTreeSet<Vec<usize>> = BTreeSet::new();

    // depth-first path extension; cycles are anchored at their smallest atom
    // so each is found a bounded number of times
    for start in 0..n {
        if !state.atom_mask[start] {
            continue;
        }
        let mut path = vec![start];
        let mut path_bonds: Vec<usize> = Vec::new();
        let mut on_path = vec![false; n];
        on_path[start] = true;
        extend_cycle(state, start, &mut path, &mut path_bonds, &mut on_path, &mut |atoms, bonds| {
            let mut key: Vec<usize> = bonds.to_vec();
            key.sort_unstable();
            if seen_bondsets.insert(key.clone()) {
                out.push(RingCandidate {
                    atoms: atoms.to_vec(),
                    bonds: key.into_iter().collect(),
                });
            }
        });
    }
    out
}

fn extend_cycle(
    state: &SubgraphState<'_>,
    start: usize,
    path: &mut Vec<usize>,
    path_bonds: &mut Vec<usize>,
    on_path: &mut [bool],
    emit: &mut impl FnMut(&[usize], &[usize]),
) {
    let here = *path.last().unwrap();
    for (next, bi) in state.masked_neighbors(here) {
        if next < start {
            continue;
        }
        if next == start && path.len() >= 3 && Some(&bi) != path_bonds.first() {
            path_bonds.push(bi);
            emit(path, path_bonds);
            path_bonds.pop();
            continue;
        }
        if on_path[next] {
            continue;
        }
        path.push(next);
        path_bonds.push(bi);
        on_path[next] = true;
        extend_cycle(state, start, path, path_bonds, on_path, emit);
        on_path[next] = false;
        path_bonds.pop();
        path.pop();
    }
}

/// Applies one action produced by [`candidate_deletions`] for this state.
pub fn apply_deletion<'m>(
    state: &SubgraphState<'m>,
    action: &DeletionAction,
) -> Result<SubgraphState<'m>, SubgraphError> {
    if !candidate_deletions(state).iter().any(|a| a == action) {
        return Err(SubgraphError::IllegalAction);
    }
    let mut next = state.clone();
    for &a in action.removed_atoms() {
        next.atom_mask[a] = false;
    }
    for (bi, bond) in state.parent.bonds().iter().enumerate() {
        if next.bond_mask[bi] && (!next.atom_mask[bond.a] || !next.atom_mask[bond.b]) {
            next.bond_mask[bi] = false;
        }
    }
    Ok(next)
}

/// Standalone graph for the masked atoms, reindexed in parent order. Ring
/// flags are recomputed for the extracted graph; the source string carries
/// over as provenance.
pub fn extract_subgraph(state: &SubgraphState<'_>) -> MolGraph {
    let kept = state.atom_indices();
    let mut remap = vec![usize::MAX; state.atom_mask.len()];
    for (new_idx, &old) in kept.iter().enumerate() {
        remap[old] = new_idx;
    }
    let atoms: Vec<Atom> = kept.iter().map(|&i| state.parent.atoms()[i].clone()).collect();
    let bonds: Vec<Bond> = state
        .parent
        .bonds()
        .iter()
        .enumerate()
        .filter(|&(bi, _)| state.bond_mask[bi])
        .map(|(_, b)| Bond {
            a: remap[b.a],
            b: remap[b.b],
            order: b.order,
            aromatic: b.aromatic,
            in_ring: false,
        })
        .collect();
    MolGraph::assemble(state.parent.source().to_string(), atoms, bonds)
}
