//! SMILES subset parser and molecular graphs.
//!
//! The grammar covers organic-subset atoms (B, C, N, O, P, S, F, Cl, Br, I),
//! aromatic lowercase (b, c, n, o, p, s), bracket atoms with explicit H
//! counts and formal charges, bonds `- = # :`, branches, and ring closures
//! (digits and `%nn`). Disconnected inputs (`.`), stereochemistry, isotopes,
//! and wildcards are rejected with the character offset of the offending
//! token. Aromaticity is taken from the notation, never perceived.
//!
//! Ring membership is structural: an atom or bond is `in_ring` exactly when
//! it lies on some simple cycle of the graph.

mod parser;
mod subgraph;

pub use parser::{parse_smiles, tokenize};
pub use subgraph::{
    apply_deletion, candidate_deletions, extract_subgraph, DeletionAction, SubgraphError,
    SubgraphState,
};

use crate::autodiff::Tensor;
use thiserror::Error;

/// Width of one atom-feature row: 16 element slots, 6 degree slots,
/// aromatic flag, ring flag, 5 charge slots, 5 explicit-H slots.
pub const D_ATOM: usize = 34;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("offset {offset}: {message}")]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
}

impl ParseError {
    fn new(offset: usize, message: impl Into<String>) -> Self {
        ParseError { offset, message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Element {
    H,
    Li,
    B,
    C,
    N,
    O,
    F,
    Na,
    Mg,
    Al,
    Si,
    P,
    S,
    Cl,
    K,
    Ca,
    Mn,
    Fe,
    Co,
    Cu,
    Zn,
    As,
    Se,
    Br,
    Sn,
    I,
}

impl Element {
    pub fn symbol(self) -> &'static str {
        use Element::*;
        match self {
            H => "H",
            Li => "Li",
            B => "B",
            C => "C",
            N => "N",
            O => "O",
            F => "F",
            Na => "Na",
            Mg => "Mg",
            Al => "Al",
            Si => "Si",
            P => "P",
            S => "S",
            Cl => "Cl",
            K => "K",
            Ca => "Ca",
            Mn => "Mn",
            Fe => "Fe",
            Co => "Co",
            Cu => "Cu",
            Zn => "Zn",
            As => "As",
            Se => "Se",
            Br => "Br",
            Sn => "Sn",
            I => "I",
        }
    }

    pub fn from_symbol(s: &str) -> Option<Element> {
        use Element::*;
        let e = match s {
            "H" => H,
            "Li" => Li,
            "B" => B,
            "C" => C,
            "N" => N,
            "O" => O,
            "F" => F,
            "Na" => Na,
            "Mg" => Mg,
            "Al" => Al,
            "Si" => Si,
            "P" => P,
            "S" => S,
            "Cl" => Cl,
            "K" => K,
            "Ca" => Ca,
            "Mn" => Mn,
            "Fe" => Fe,
            "Co" => Co,
            "Cu" => Cu,
            "Zn" => Zn,
            "As" => As,
            "Se" => Se,
            "Br" => Br,
            "Sn" => Sn,
            "I" => I,
            _ => return None,
        };
        Some(e)
    }

    /// One-hot slot in the 16-wide element table; uncommon elements share
    /// the final "other" slot.
    pub fn feature_slot(self) -> usize {
        use Element::*;
        match self {
            B => 0,
            C => 1,
            N => 2,
            O => 3,
            P => 4,
            S => 5,
            F => 6,
            Cl => 7,
            Br => 8,
            I => 9,
            H => 10,
            Si => 11,
            Se => 12,
            Na => 13,
            K => 14,
            _ => 15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Atom {
    pub element: Element,
    pub aromatic: bool,
    pub charge: i32,
    pub explicit_h: u8,
    pub in_ring: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    /// 1, 2, or 3; aromatic bonds carry order 1 with the flag set
    pub order: u8,
    pub aromatic: bool,
    pub in_ring: bool,
}

/// Connected molecular graph. Atom indices are positions in `atoms` and are
/// stable for the lifetime of the graph; rationale reports refer to them.
#[derive(Debug, Clone)]
pub struct MolGraph {
    source: String,
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
    adj: Vec<Vec<(usize, usize)>>,
}

impl MolGraph {
    pub(crate) fn assemble(source: String, atoms: Vec<Atom>, bonds: Vec<Bond>) -> MolGraph {
        let mut mol = MolGraph { source, atoms, bonds, adj: Vec::new() };
        mol.rebuild_adjacency();
        mol.mark_rings();
        mol
    }

    fn rebuild_adjacency(&mut self) {
        self.adj = vec![Vec::new(); self.atoms.len()];
        for (bi, bond) in self.bonds.iter().enumerate() {
            self.adj[bond.a].push((bond.b, bi));
            self.adj[bond.b].push((bond.a, bi));
        }
    }

    /// Sets in_ring on atoms and bonds from bridge structure: a bond is on a
    /// cycle exactly when it is not a bridge.
    fn mark_rings(&mut self) {
        let bridges = self.find_bridges();
        for (bi, bond) in self.bonds.iter_mut().enumerate() {
            bond.in_ring = !bridges[bi];
        }
        for atom in &mut self.atoms {
            atom.in_ring = false;
        }
        for bond in &self.bonds {
            if bond.in_ring {
                self.atoms[bond.a].in_ring = true;
                self.atoms[bond.b].in_ring = true;
            }
        }
    }

    /// Iterative lowlink bridge finding; recursion would overflow on long
    /// chain inputs.
    fn find_bridges(&self) -> Vec<bool> {
        let n = self.atoms.len();
        let mut bridge = vec![false; self.bonds.len()];
        let mut disc = vec![usize::MAX; n];
        let mut low = vec![0usize; n];
        let mut timer = 0usize;
        // stack frames: (vertex, incoming bond, next adjacency slot)
        let mut stack: Vec<(usize, usize, usize)> = Vec::new();
        for root in 0..n {
            if disc[root] != usize::MAX {
                continue;
            }
            disc[root] = timer;
            low[root] = timer;
            timer += 1;
            stack.push((root, usize::MAX, 0));
            while let Some(&mut (v, in_bond, ref mut slot)) = stack.last_mut() {
                if *slot < self.adj[v].len() {
                    let (u, bi) = self.adj[v][*slot];
                    *slot += 1;
                    if bi == in_bond {
                        continue;
                    }
                    if disc[u] == usize::MAX {
                        disc[u] = timer;
                        low[u] = timer;
                        timer += 1;
                        stack.push((u, bi, 0));
                    } else {
                        low[v] = low[v].min(disc[u]);
                    }
                } else {
                    stack.pop();
                    if let Some(&mut (p, _, _)) = stack.last_mut() {
                        low[p] = low[p].min(low[v]);
                        if low[v] > disc[p] {
                            bridge[in_bond] = true;
                        }
                    }
                }
            }
        }
        bridge
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn bond_count(&self) -> usize {
        self.bonds.len()
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    /// (neighbor atom, bond index) pairs for one atom.
    pub fn neighbors(&self, atom: usize) -> &[(usize, usize)] {
        &self.adj[atom]
    }

    pub fn degree(&self, atom: usize) -> usize {
        self.adj[atom].len()
    }

    /// One feature row per atom: element one-hot (16, last slot "other"),
    /// degree one-hot (0..5, clamped), aromatic flag, ring flag, charge
    /// one-hot (clamped to [-2, 2]), explicit-H one-hot (0..4, clamped).
    pub fn atom_feature_matrix(&self) -> Tensor {
        let n = self.atoms.len();
        let mut data = vec![0.0; n * D_ATOM];
        for (i, atom) in self.atoms.iter().enumerate() {
            let row = &mut data[i * D_ATOM..(i + 1) * D_ATOM];
            row[atom.element.feature_slot()] = 1.0;
            row[16 + self.degree(i).min(5)] = 1.0;
            if atom.aromatic {
                row[22] = 1.0;
            }
            if atom.in_ring {
                row[23] = 1.0;
            }
            let charge = atom.charge.clamp(-2, 2);
            row[24 + (charge + 2) as usize] = 1.0;
            row[29 + (atom.explicit_h as usize).min(4)] = 1.0;
        }
        Tensor::new(vec![n, D_ATOM], data).expect("feature buffer sized to shape")
    }
}
