//! SMILES grammar parsing into a molecular graph.
//!
//! Grammar-level validity only: valences are not checked. Hydrogen counts for
//! organic-subset atoms are filled in from default valences so that atom
//! invariants match the usual ECFP convention.

use std::collections::BTreeMap;

use super::ChemError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Quadruple,
    Aromatic,
}

impl BondOrder {
    pub fn code(self) -> u64 {
        match self {
            BondOrder::Single => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
            BondOrder::Quadruple => 4,
            BondOrder::Aromatic => 5,
        }
    }

    fn valence_x2(self) -> u32 {
        match self {
            BondOrder::Single => 2,
            BondOrder::Double => 4,
            BondOrder::Triple => 6,
            BondOrder::Quadruple => 8,
            BondOrder::Aromatic => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Atom {
    pub element: &'static str,
    pub aromatic: bool,
    pub charge: i8,
    /// Bracket atoms: the written count. Organic-subset atoms: implicit count.
    pub hydrogens: u8,
}

impl Atom {
    pub fn atomic_number(&self) -> u8 {
        element_number(self.element).unwrap_or(0)
    }

    pub fn is_heavy(&self) -> bool {
        self.element != "H"
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub order: BondOrder,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MolecularGraph {
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
}

impl MolecularGraph {
    /// Builds a graph from explicit parts, enforcing endpoint and duplicate rules.
    pub fn from_parts(atoms: Vec<Atom>, bonds: Vec<Bond>) -> Result<Self, ChemError> {
        let mut g = MolecularGraph {
            atoms,
            bonds: Vec::with_capacity(bonds.len()),
        };
        for b in bonds {
            g.add_bond(b.a, b.b, b.order, 0)?;
        }
        Ok(g)
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Number of independent cycles (bonds − atoms + connected components).
    pub fn ring_count(&self) -> usize {
        let n = self.atoms.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        let mut components = n;
        for b in &self.bonds {
            let (ra, rb) = (find(&mut parent, b.a), find(&mut parent, b.b));
            if ra != rb {
                parent[ra] = rb;
                components -= 1;
            }
        }
        self.bonds.len() + components - n
    }

    /// Neighbor lists: (neighbor index, bond order) per atom.
    pub fn adjacency(&self) -> Vec<Vec<(usize, BondOrder, usize)>> {
        let mut adj = vec![Vec::new(); self.atoms.len()];
        for (i, b) in self.bonds.iter().enumerate() {
            adj[b.a].push((b.b, b.order, i));
            adj[b.b].push((b.a, b.order, i));
        }
        adj
    }

    /// Relabels atoms with `perm[old] = new` and rewrites bonds in the given order.
    pub fn permuted(&self, perm: &[usize], bond_order: &[usize], swap_ends: bool) -> Self {
        let mut atoms = vec![self.atoms[0].clone(); self.atoms.len()];
        for (old, &new) in perm.iter().enumerate() {
            atoms[new] = self.atoms[old].clone();
        }
        let bonds = bond_order
            .iter()
            .map(|&i| {
                let b = self.bonds[i];
                let (a, c) = (perm[b.a], perm[b.b]);
                let (a, c) = if swap_ends { (c, a) } else { (a, c) };
                Bond {
                    a,
                    b: c,
                    order: b.order,
                }
            })
            .collect();
        MolecularGraph { atoms, bonds }
    }

    fn add_bond(
        &mut self,
        a: usize,
        b: usize,
        order: BondOrder,
        pos: usize,
    ) -> Result<(), ChemError> {
        let n = self.atoms.len();
        if a >= n || b >= n {
            return Err(ChemError::Syntax {
                pos,
                msg: format!("bond endpoint out of range ({a}, {b})"),
            });
        }
        if a == b {
            return Err(ChemError::Syntax {
                pos,
                msg: "atom bonded to itself".into(),
            });
        }
        if self
            .bonds
            .iter()
            .any(|x| (x.a == a && x.b == b) || (x.a == b && x.b == a))
        {
            return Err(ChemError::Syntax {
                pos,
                msg: format!("duplicate bond between atoms {a} and {b}"),
            });
        }
        self.bonds.push(Bond { a, b, order });
        Ok(())
    }
}

const ELEMENTS: [&str; 118] = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl",
    "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As",
    "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In",
    "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb",
    "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl",
    "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk",
    "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds", "Rg", "Cn", "Nh",
    "Fl", "Mc", "Lv", "Ts", "Og",
];

pub fn element_number(symbol: &str) -> Option<u8> {
    ELEMENTS
        .iter()
        .position(|&e| e == symbol)
        .map(|i| i as u8 + 1)
}

fn intern(symbol: &str) -> Option<&'static str> {
    ELEMENTS.iter().find(|&&e| e == symbol).copied()
}

// Organic subset, longest symbols first for maximal munch.
const ORGANIC: [&str; 10] = ["Cl", "Br", "B", "C", "N", "O", "P", "S", "F", "I"];
const AROMATIC_ORGANIC: [&str; 6] = ["b", "c", "n", "o", "p", "s"];
const AROMATIC_BRACKET: [&str; 8] = ["se", "as", "b", "c", "n", "o", "p", "s"];

fn default_valences(element: &str) -> &'static [u32] {
    match element {
        "B" => &[3],
        "C" => &[4],
        "N" => &[3, 5],
        "O" => &[2],
        "P" => &[3, 5],
        "S" => &[2, 4, 6],
        "F" | "Cl" | "Br" | "I" => &[1],
        _ => &[],
    }
}

struct Parser<'a> {
    text: &'a [u8],
    pos: usize,
    graph: MolecularGraph,
    implicit_h: Vec<bool>,
    branch_stack: Vec<usize>,
    prev: Option<usize>,
    pending_bond: Option<(BondOrder, usize)>,
    rings: BTreeMap<u32, (usize, Option<BondOrder>, usize)>,
}

/// Parses a SMILES string into atoms and bonds.
pub fn parse_graph(smiles: &str) -> Result<MolecularGraph, ChemError> {
    let mut p = Parser {
        text: smiles.as_bytes(),
        pos: 0,
        graph: MolecularGraph::default(),
        implicit_h: Vec::new(),
        branch_stack: Vec::new(),
        prev: None,
        pending_bond: None,
        rings: BTreeMap::new(),
    };
    p.run()?;
    p.finish()
}

/// True iff `parse_graph` succeeds.
pub fn validate(smiles: &str) -> bool {
    parse_graph(smiles).is_ok()
}

impl Parser<'_> {
    fn syntax(&self, msg: impl Into<String>) -> ChemError {
        ChemError::Syntax {
            pos: self.pos,
            msg: msg.into(),
        }
    }

    fn peek(&self) -> Option<u8> {
        self.text.get(self.pos).copied()
    }

    fn run(&mut self) -> Result<(), ChemError> {
        if self.text.is_empty() {
            return Err(ChemError::EmptySmiles);
        }
        while let Some(c) = self.peek() {
            match c {
                b'(' => {
                    let Some(prev) = self.prev else {
                        return Err(self.syntax("branch opened before any atom"));
                    };
                    if self.pending_bond.is_some() {
                        return Err(self.syntax("bond symbol before branch"));
                    }
                    self.branch_stack.push(prev);
                    self.pos += 1;
                    if self.peek() == Some(b')') {
                        return Err(self.syntax("empty branch"));
                    }
                }
                b')' => {
                    if self.pending_bond.is_some() {
                        return Err(self.syntax("dangling bond symbol"));
                    }
                    let Some(top) = self.branch_stack.pop() else {
                        return Err(self.syntax("unbalanced ')'"));
                    };
                    self.prev = Some(top);
                    self.pos += 1;
                }
                b'-' | b'=' | b'#' | b'$' | b':' | b'/' | b'\\' => {
                    if self.prev.is_none() {
                        return Err(self.syntax("bond symbol before any atom"));
                    }
                    if self.pending_bond.is_some() {
                        return Err(self.syntax("consecutive bond symbols"));
                    }
                    let order = match c {
                        b'=' => BondOrder::Double,
                        b'#' => BondOrder::Triple,
                        b'$' => BondOrder::Quadruple,
                        b':' => BondOrder::Aromatic,
                        _ => BondOrder::Single,
                    };
                    self.pending_bond = Some((order, self.pos));
                    self.pos += 1;
                }
                b'.' => {
                    if self.pending_bond.is_some() || self.prev.is_none() {
                        return Err(self.syntax("misplaced '.'"));
                    }
                    self.prev = None;
                    self.pos += 1;
                    if matches!(self.peek(), None | Some(b')')) {
                        return Err(self.syntax("'.' must be followed by an atom"));
                    }
                }
                b'0'..=b'9' | b'%' => self.ring_closure()?,
                b'[' => self.bracket_atom()?,
                _ => self.organic_atom()?,
            }
        }
        Ok(())
    }

    fn finish(mut self) -> Result<MolecularGraph, ChemError> {
        if self.pending_bond.is_some() {
            return Err(self.syntax("dangling bond symbol at end"));
        }
        if !self.branch_stack.is_empty() {
            return Err(self.syntax("unbalanced '('"));
        }
        if let Some((&digit, _)) = self.rings.iter().next() {
            return Err(ChemError::UnclosedRing { digit });
        }
        if self.graph.atoms.is_empty() {
            return Err(ChemError::EmptySmiles);
        }
        self.fill_implicit_hydrogens();
        Ok(self.graph)
    }

    fn fill_implicit_hydrogens(&mut self) {
        let mut used_x2 = vec![0u32; self.graph.atoms.len()];
        for b in &self.graph.bonds {
            used_x2[b.a] += b.order.valence_x2();
            used_x2[b.b] += b.order.valence_x2();
        }
        for (i, atom) in self.graph.atoms.iter_mut().enumerate() {
            if !self.implicit_h[i] {
                continue;
            }
            // Round aromatic half-bonds up.
            let used = used_x2[i].div_ceil(2);
            let target = default_valences(atom.element)
                .iter()
                .copied()
                .find(|&v| v >= used);
            atom.hydrogens = target.map_or(0, |v| (v - used) as u8);
        }
    }

    fn add_atom(&mut self, atom: Atom, implicit_h: bool) -> Result<(), ChemError> {
        let idx = self.graph.atoms.len();
        self.graph.atoms.push(atom);
        self.implicit_h.push(implicit_h);
        if let Some(prev) = self.prev {
            let order = match self.pending_bond.take() {
                Some((order, _)) => order,
                None => self.default_bond(prev, idx),
            };
            self.graph.add_bond(prev, idx, order, self.pos)?;
        }
        self.prev = Some(idx);
        Ok(())
    }

    fn default_bond(&self, a: usize, b: usize) -> BondOrder {
        if self.graph.atoms[a].aromatic && self.graph.atoms[b].aromatic {
            BondOrder::Aromatic
        } else {
            BondOrder::Single
        }
    }

    fn organic_atom(&mut self) -> Result<(), ChemError> {
        let rest = &self.text[self.pos..];
        for sym in ORGANIC {
            if rest.starts_with(sym.as_bytes()) {
                self.pos += sym.len();
                let atom = Atom {
                    element: intern(sym).expect("organic symbols are elements"),
                    aromatic: false,
                    charge: 0,
                    hydrogens: 0,
                };
                return self.add_atom(atom, true);
            }
        }
        for sym in AROMATIC_ORGANIC {
            if rest.starts_with(sym.as_bytes()) {
                self.pos += 1;
                let upper = sym.to_ascii_uppercase();
                let atom = Atom {
                    element: intern(&upper).expect("aromatic symbols are elements"),
                    aromatic: true,
                    charge: 0,
                    hydrogens: 0,
                };
                return self.add_atom(atom, true);
            }
        }
        Err(self.syntax(format!("unexpected character '{}'", rest[0] as char)))
    }

    fn bracket_atom(&mut self) -> Result<(), ChemError> {
        let start = self.pos;
        let close = self.text[start..]
            .iter()
            .position(|&c| c == b']')
            .map(|i| start + i)
            .ok_or_else(|| ChemError::BadBracketAtom {
                pos: start,
                msg: "missing ']'".into(),
            })?;
        let body = &self.text[start + 1..close];
        let atom = parse_bracket_body(body)
            .map_err(|msg| ChemError::BadBracketAtom { pos: start, msg })?;
        self.pos = close + 1;
        self.add_atom(atom, false)
    }

    fn ring_closure(&mut self) -> Result<(), ChemError> {
        let Some(prev) = self.prev else {
            return Err(self.syntax("ring closure before any atom"));
        };
        let at = self.pos;
        let digit = if self.text[self.pos] == b'%' {
            let d = self.text.get(self.pos + 1..self.pos + 3);
            match d {
                Some(&[a, b]) if a.is_ascii_digit() && b.is_ascii_digit() => {
                    self.pos += 3;
                    u32::from(a - b'0') * 10 + u32::from(b - b'0')
                }
                _ => return Err(self.syntax("'%' must be followed by two digits")),
            }
        } else {
            self.pos += 1;
            u32::from(self.text[at] - b'0')
        };
        let bond = self.pending_bond.take().map(|(o, _)| o);
        match self.rings.remove(&digit) {
            None => {
                self.rings.insert(digit, (prev, bond, at));
            }
            Some((open_atom, open_bond, _)) => {
                let order = match (open_bond, bond) {
                    (Some(a), Some(b)) if a != b => {
                        return Err(ChemError::Syntax {
                            pos: at,
                            msg: format!("ring {digit} bond symbols disagree"),
                        })
                    }
                    (Some(a), _) | (None, Some(a)) => a,
                    (None, None) => self.default_bond(open_atom, prev),
                };
                self.graph.add_bond(open_atom, prev, order, at)?;
            }
        }
        Ok(())
    }
}

fn parse_bracket_body(body: &[u8]) -> Result<Atom, String> {
    let mut i = 0;
    while i < body.len() && body[i].is_ascii_digit() {
        i += 1; // isotope
    }
    let rest = &body[i..];
    let (element, aromatic, used) = bracket_symbol(rest).ok_or("unknown element symbol")?;
    i += used;

    while i < body.len() && body[i] == b'@' {
        i += 1; // chirality is ignored
    }
    let mut hydrogens = 0u8;
    if i < body.len() && body[i] == b'H' {
        i += 1;
        hydrogens = 1;
        if i < body.len() && body[i].is_ascii_digit() {
            hydrogens = body[i] - b'0';
            i += 1;
        }
    }
    let mut charge: i8 = 0;
    if i < body.len() && (body[i] == b'+' || body[i] == b'-') {
        let sign = body[i];
        let unit: i8 = if sign == b'+' { 1 } else { -1 };
        i += 1;
        if i < body.len() && body[i].is_ascii_digit() {
            let mut mag: i8 = 0;
            while i < body.len() && body[i].is_ascii_digit() {
                mag = mag
                    .checked_mul(10)
                    .and_then(|m| m.checked_add((body[i] - b'0') as i8))
                    .ok_or("charge out of range")?;
                i += 1;
            }
            charge = unit * mag;
        } else {
            charge = unit;
            while i < body.len() && body[i] == sign {
                charge = charge.checked_add(unit).ok_or("charge out of range")?;
                i += 1;
            }
        }
    }
    if i < body.len() && body[i] == b':' {
        i += 1;
        let digits = body[i..].iter().take_while(|c| c.is_ascii_digit()).count();
        if digits == 0 {
            return Err("atom class needs digits".into());
        }
        i += digits;
    }
    if i != body.len() {
        return Err(format!("unexpected '{}' in bracket atom", body[i] as char));
    }
    Ok(Atom {
        element,
        aromatic,
        charge,
        hydrogens,
    })
}

fn bracket_symbol(rest: &[u8]) -> Option<(&'static str, bool, usize)> {
    for sym in AROMATIC_BRACKET {
        if rest.starts_with(sym.as_bytes()) {
            let mut upper = sym.to_string();
            upper[..1].make_ascii_uppercase();
            return intern(&upper).map(|e| (e, true, sym.len()));
        }
    }
    let first = *rest.first()?;
    if !first.is_ascii_uppercase() {
        return None;
    }
    if let Some(&second) = rest.get(1) {
        if second.is_ascii_lowercase() {
            let two = std::str::from_utf8(&rest[..2]).ok()?;
            if let Some(e) = intern(two) {
                return Some((e, false, 2));
            }
        }
    }
    let one = std::str::from_utf8(&rest[..1]).ok()?;
    intern(one).map(|e| (e, false, 1))
}
