//! Character-level SMILES reader. Single pass, no backtracking; every
//! rejection carries the byte offset it tripped on.

use super::{Atom, Bond, Element, MolGraph, ParseError};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BondSym {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondSym {
    fn order(self) -> u8 {
        match self {
            BondSym::Single | BondSym::Aromatic => 1,
            BondSym::Double => 2,
            BondSym::Triple => 3,
        }
    }

    fn aromatic(self) -> bool {
        self == BondSym::Aromatic
    }
}

/// What the previous significant token was; legality of the next token
/// depends only on this.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Prev {
    Start,
    Atom,
    Bond,
    Open,
    Close,
    Ring,
}

struct Parser<'t> {
    text: &'t [u8],
    pos: usize,
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
    /// adjacency membership for duplicate-bond rejection
    seen_pairs: HashMap<(usize, usize), ()>,
    /// attachment point for the next atom
    head: Option<usize>,
    branch_stack: Vec<(usize, usize)>,
    pending: Option<(BondSym, usize)>,
    open_rings: HashMap<u16, (usize, Option<BondSym>, usize)>,
    prev: Prev,
    tokens: Vec<String>,
}

/// Parses one SMILES string into a connected molecular graph.
pub fn parse_smiles(text: &str) -> Result<MolGraph, ParseError> {
    let (mol, _) = parse_full(text)?;
    Ok(mol)
}

/// Validates `text` against the grammar and returns its surface tokens:
/// bracket atoms whole, two-letter elements whole, bonds, ring closures,
/// and parentheses each as one token.
pub fn tokenize(text: &str) -> Result<Vec<String>, ParseError> {
    let (_, tokens) = parse_full(text)?;
    Ok(tokens)
}

fn parse_full(text: &str) -> Result<(MolGraph, Vec<String>), ParseError> {
    let mut p = Parser {
        text: text.as_bytes(),
        pos: 0,
        atoms: Vec::new(),
        bonds: Vec::new(),
        seen_pairs: HashMap::new(),
        head: None,
        branch_stack: Vec::new(),
        pending: None,
        open_rings: HashMap::new(),
        prev: Prev::Start,
        tokens: Vec::new(),
    };
    p.run()?;
    let mol = MolGraph::assemble(text.to_string(), p.atoms, p.bonds);
    Ok((mol, p.tokens))
}

impl<'t> Parser<'t> {
    fn err(&self, offset: usize, message: impl Into<String>) -> ParseError {
        ParseError::new(offset, message)
    }

    fn run(&mut self) -> Result<(), ParseError> {
        while self.pos < self.text.len() {
            let at = self.pos;
            let c = self.text[at];
            match c {
                b'A'..=b'Z' => self.bare_atom(at)?,
                b'b' | b'c' | b'n' | b'o' | b'p' | b's' => {
                    self.pos += 1;
                    let sym = (c as char).to_string();
                    let element = Element::from_symbol(&sym.to_uppercase()).unwrap();
                    self.push_atom(at, Atom {
                        element,
                        aromatic: true,
                        charge: 0,
                        explicit_h: 0,
                        in_ring: false,
                    })?;
                    self.tokens.push(sym);
                }
                b'[' => self.bracket_atom(at)?,
                b'-' => self.bond(at, BondSym::Single)?,
                b'=' => self.bond(at, BondSym::Double)?,
                b'#' => self.bond(at, BondSym::Triple)?,
                b':' => self.bond(at, BondSym::Aromatic)?,
                b'0'..=b'9' => {
                    self.pos += 1;
                    self.ring_closure(at, (c - b'0') as u16, (c as char).to_string())?;
                }
                b'%' => {
                    let d1 = self.text.get(at + 1).copied();
                    let d2 = self.text.get(at + 2).copied();
                    match (d1, d2) {
                        (Some(x @ b'0'..=b'9'), Some(y @ b'0'..=b'9')) => {
                            self.pos += 3;
                            let num = (x - b'0') as u16 * 10 + (y - b'0') as u16;
                            let token = format!("%{}{}", x as char, y as char);
                            self.ring_closure(at, num, token)?;
                        }
                        _ => return Err(self.err(at, "'%' must be followed by two digits")),
                    }
                }
                b'(' => {
                    match self.prev {
                        Prev::Atom | Prev::Ring | Prev::Close => {}
                        Prev::Bond => return Err(self.err(at, "bond symbol before a branch")),
                        _ => return Err(self.err(at, "branch must follow an atom")),
                    }
                    self.branch_stack.push((self.head.expect("atom precedes branch"), at));
                    self.pos += 1;
                    self.prev = Prev::Open;
                    self.tokens.push("(".to_string());
                }
                b')' => {
                    match self.prev {
                        Prev::Atom | Prev::Ring | Prev::Close => {}
                        Prev::Open => return Err(self.err(at, "empty branch")),
                        Prev::Bond => return Err(self.err(at, "dangling bond before ')'")),
                        Prev::Start => return Err(self.err(at, "unbalanced parenthesis")),
                    }
                    let (restore, _) = self
                        .branch_stack
                        .pop()
                        .ok_or_else(|| self.err(at, "unbalanced parenthesis"))?;
                    self.head = Some(restore);
                    self.pos += 1;
                    self.prev = Prev::Close;
                    self.tokens.push(")".to_string());
                }
                b'.' => return Err(self.err(at, "disconnected structures are not supported")),
                b'/' | b'\\' | b'@' => {
                    return Err(self.err(at, "stereochemistry is not supported"))
                }
                b'*' => return Err(self.err(at, "wildcard atoms are not supported")),
                _ => {
                    return Err(self.err(at, format!("unexpected character '{}'", c as char)))
                }
            }
        }

        if let Some((_, offset)) = self.pending {
            return Err(self.err(offset, "dangling bond at end of input"));
        }
        if let Some(&(_, offset)) = self.branch_stack.last() {
            return Err(self.err(offset, "unbalanced parenthesis"));
        }
        if let Some((&num, &(_, _, offset))) =
            self.open_rings.iter().min_by_key(|(_, &(_, _, o))| o)
        {
            return Err(self.err(offset, format!("unmatched ring-closure digit {num}")));
        }
        if self.atoms.is_empty() {
            return Err(self.err(0, "no atoms in input"));
        }
        Ok(())
    }

    fn bare_atom(&mut self, at: usize) -> Result<(), ParseError> {
        // the only two-letter organic-subset symbols outside brackets
        let two = self.text.get(at + 1).map(|&n| (self.text[at], n));
        let (sym, len) = match two {
            Some((b'C', b'l')) => ("Cl", 2),
            Some((b'B', b'r')) => ("Br", 2),
            _ => {
                let s = self.text[at] as char;
                (match s {
                    'B' => "B",
                    'C' => "C",
                    'N' => "N",
                    'O' => "O",
                    'P' => "P",
                    'S' => "S",
                    'F' => "F",
                    'I' => "I",
                    _ => return Err(self.err(at, format!("unknown atom symbol '{s}'"))),
                }, 1)
            }
        };
        self.pos += len;
        let element = Element::from_symbol(sym).unwrap();
        self.push_atom(at, Atom { element, aromatic: false, charge: 0, explicit_h: 0, in_ring: false })?;
        self.tokens.push(sym.to_string());
        Ok(())
    }

    fn bracket_atom(&mut self, open: usize) -> Result<(), ParseError> {
        let mut i = open + 1;
        let text = self.text;
        let peek = |i: usize| text.get(i).copied();

        if matches!(peek(i), Some(b'0'..=b'9')) {
            return Err(self.err(i, "isotope labels are not supported"));
        }

        let (element, aromatic) = match peek(i) {
            Some(c @ b'A'..=b'Z') => {
                let two = peek(i + 1)
                    .filter(|n| n.is_ascii_lowercase())
                    .map(|n| format!("{}{}", c as char, n as char))
                    .and_then(|s| Element::from_symbol(&s).map(|e| (e, 2)));
                match two {
                    Some((e, len)) => {
                        i += len;
                        (e, false)
                    }
                    None => {
                        let s = (c as char).to_string();
                        let e = Element::from_symbol(&s)
                            .ok_or_else(|| self.err(i, format!("unknown atom symbol '{s}'")))?;
                        i += 1;
                        (e, false)
                    }
                }
            }
            Some(c @ (b'b' | b'c' | b'n' | b'o' | b'p' | b's')) => {
                let e = Element::from_symbol(&(c as char).to_uppercase().to_string()).unwrap();
                i += 1;
                (e, true)
            }
            Some(c) => {
                return Err(self.err(i, format!("unexpected character '{}' in bracket atom", c as char)))
            }
            None => return Err(self.err(open, "unterminated bracket atom")),
        };

        let mut explicit_h: u8 = 0;
        if peek(i) == Some(b'H') {
            i += 1;
            explicit_h = 1;
            if let Some(d @ b'0'..=b'9') = peek(i) {
                explicit_h = d - b'0';
                i += 1;
            }
        }

        let mut charge: i32 = 0;
        if let Some(sign @ (b'+' | b'-')) = peek(i) {
            let unit = if sign == b'+' { 1 } else { -1 };
            i += 1;
            if let Some(d @ b'1'..=b'9') = peek(i) {
                charge = unit * (d - b'0') as i32;
                i += 1;
                if let Some(d2 @ b'0'..=b'9') = peek(i) {
                    charge = unit * ((d - b'0') as i32 * 10 + (d2 - b'0') as i32);
                    i += 1;
                }
            } else {
                charge = unit;
                while peek(i) == Some(sign) {
                    charge += unit;
                    i += 1;
                }
            }
        }

        match peek(i) {
            Some(b']') => i += 1,
            Some(c) => {
                return Err(self.err(i, format!("unexpected character '{}' in bracket atom", c as char)))
            }
            None => return Err(self.err(open, "unterminated bracket atom")),
        }

        let token = std::str::from_utf8(&text[open..i]).expect("ascii").to_string();
        self.pos = i;
        self.push_atom(open, Atom { element, aromatic, charge, explicit_h, in_ring: false })?;
        self.tokens.push(token);
        Ok(())
    }

    fn bond(&mut self, at: usize, sym: BondSym) -> Result<(), ParseError> {
        match self.prev {
            Prev::Atom | Prev::Ring | Prev::Close | Prev::Open => {}
            Prev::Bond => return Err(self.err(at, "two bond symbols in a row")),
            Prev::Start => return Err(self.err(at, "bond symbol with nothing to bond")),
        }
        if self.head.is_none() {
            return Err(self.err(at, "bond symbol with nothing to bond"));
        }
        self.pending = Some((sym, at));
        self.pos += 1;
        self.prev = Prev::Bond;
        self.tokens.push(((self.text[at]) as char).to_string());
        Ok(())
    }

    fn push_atom(&mut self, at: usize, atom: Atom) -> Result<(), ParseError> {
        let idx = self.atoms.len();
        self.atoms.push(atom);
        if let Some(prev_idx) = self.head {
            let sym = self.pending.take().map(|(s, _)| s);
            self.add_bond(at, prev_idx, idx, sym)?;
        } else if let Some((_, offset)) = self.pending.take() {
            return Err(self.err(offset, "bond symbol with nothing to bond"));
        }
        self.head = Some(idx);
        self.prev = Prev::Atom;
        Ok(())
    }

    fn ring_closure(&mut self, at: usize, num: u16, token: String) -> Result<(), ParseError> {
        match self.prev {
            Prev::Atom | Prev::Ring | Prev::Bond => {}
            _ => return Err(self.err(at, "ring closure must follow an atom")),
        }
        let here = match self.head {
            Some(h) => h,
            None => return Err(self.err(at, "ring closure before any atom")),
        };
        let pending = self.pending.take().map(|(s, _)| s);
        match self.open_rings.remove(&num) {
            Some((other, opened_sym, _)) => {
                let sym = match (opened_sym, pending) {
                    (Some(a), Some(b)) if a != b => {
                        return Err(self.err(at, "conflicting bond orders on ring closure"))
                    }
                    (a, b) => a.or(b),
                };
                self.add_bond(at, other, here, sym)?;
            }
            None => {
                self.open_rings.insert(num, (here, pending, at));
            }
        }
        self.prev = Prev::Ring;
        self.tokens.push(token);
        Ok(())
    }

    fn add_bond(
        &mut self,
        at: usize,
        a: usize,
        b: usize,
        sym: Option<BondSym>,
    ) -> Result<(), ParseError> {
        if a == b {
            return Err(self.err(at, "ring closure bonds an atom to itself"));
        }
        let key = (a.min(b), a.max(b));
        if self.seen_pairs.insert(key, ()).is_some() {
            return Err(self.err(at, "duplicate bond between the same atoms"));
        }
        let (order, aromatic) = match sym {
            Some(s) => (s.order(), s.aromatic()),
            // unannotated bond between two aromatic atoms reads as aromatic
            None => {
                let arom = self.atoms[a].aromatic && self.atoms[b].aromatic;
                (1, arom)
            }
        };
        self.bonds.push(Bond { a, b, order, aromatic, in_ring: false });
        Ok(())
    }
}
