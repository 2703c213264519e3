//! Molecular structures parsed from SMILES and the featurized graphs the
//! network consumes.
//!
//! Supported grammar: organic-subset atoms `C N O S P F Cl Br I`, aromatic
//! `c n o s p`, bracket atoms with isotope / chirality / H-count / charge /
//! class, bonds `- = # : / \`, branches, ring closures `0-9` and `%nn`, and
//! `.` for disconnected parts. Aromaticity is read from the notation only.

mod features;
mod parse;

pub use features::{featurize, validate_scope, FeaturizeError, MolGraph, RejectReason, ScopeDecision};
pub use features::{EDGE_FEATURES, NODE_FEATURES};
pub use parse::{parse_smiles, ParseError, ParseErrorKind};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Element {
    H,
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
    Fe,
    Cu,
    Zn,
    Ge,
    As,
    Se,
    Br,
    Sn,
    I,
}

const ELEMENT_TABLE: &[(Element, &str, u8, f64)] = &[
    (Element::H, "H", 1, 1.008),
    (Element::B, "B", 5, 10.81),
    (Element::C, "C", 6, 12.011),
    (Element::N, "N", 7, 14.007),
    (Element::O, "O", 8, 15.999),
    (Element::F, "F", 9, 18.998),
    (Element::Na, "Na", 11, 22.990),
    (Element::Mg, "Mg", 12, 24.305),
    (Element::Al, "Al", 13, 26.982),
    (Element::Si, "Si", 14, 28.085),
    (Element::P, "P", 15, 30.974),
    (Element::S, "S", 16, 32.06),
    (Element::Cl, "Cl", 17, 35.45),
    (Element::K, "K", 19, 39.098),
    (Element::Ca, "Ca", 20, 40.078),
    (Element::Fe, "Fe", 26, 55.845),
    (Element::Cu, "Cu", 29, 63.546),
    (Element::Zn, "Zn", 30, 65.38),
    (Element::Ge, "Ge", 32, 72.630),
    (Element::As, "As", 33, 74.922),
    (Element::Se, "Se", 34, 78.971),
    (Element::Br, "Br", 35, 79.904),
    (Element::Sn, "Sn", 50, 118.71),
    (Element::I, "I", 53, 126.90),
];

/// Elements a molecule may contain to be inside the model's domain, in
/// node-feature order.
pub const ALLOWED_ELEMENTS: [Element; 9] =
    [Element::C, Element::N, Element::O, Element::Cl, Element::S, Element::F, Element::Br, Element::I, Element::P];

impl Element {
    fn entry(self) -> &'static (Element, &'static str, u8, f64) {
        ELEMENT_TABLE.iter().find(|e| e.0 == self).expect("element in table")
    }

    pub fn symbol(self) -> &'static str {
        self.entry().1
    }

    pub fn atomic_number(self) -> u8 {
        self.entry().2
    }

    /// Standard atomic weight in g/mol.
    pub fn atomic_weight(self) -> f64 {
        self.entry().3
    }

    pub fn from_symbol(symbol: &str) -> Option<Self> {
        ELEMENT_TABLE.iter().find(|e| e.1 == symbol).map(|e| e.0)
    }

    pub fn is_allowed(self) -> bool {
        ALLOWED_ELEMENTS.contains(&self)
    }

    /// Standard valences in ascending order; empty when the element has no
    /// implicit-hydrogen convention here.
    pub fn standard_valences(self) -> &'static [u8] {
        match self {
            Element::B => &[3],
            Element::C => &[4],
            Element::N => &[3],
            Element::O => &[2],
            Element::S => &[2, 4, 6],
            Element::P => &[3, 5],
            Element::F | Element::Cl | Element::Br | Element::I => &[1],
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    /// Contribution to the valence sum, aromatic counted as one.
    fn valence_units(self) -> u32 {
        match self {
            BondOrder::Single | BondOrder::Aromatic => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
        }
    }
}

/// Double-bond configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BondStereo {
    None,
    Z,
    E,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub element: Element,
    pub aromatic: bool,
    /// Hydrogen count written inside brackets; `None` for organic-subset atoms.
    pub explicit_h: Option<u8>,
    pub formal_charge: i8,
    pub isotope: Option<u16>,
}

impl Atom {
    pub fn is_bracket(&self) -> bool {
        self.explicit_h.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bond {
    pub atoms: (usize, usize),
    pub order: BondOrder,
    pub stereo: BondStereo,
}

impl Bond {
    pub fn other(&self, atom: usize) -> usize {
        if self.atoms.0 == atom {
            self.atoms.1
        } else {
            self.atoms.0
        }
    }

    pub fn touches(&self, atom: usize) -> bool {
        self.atoms.0 == atom || self.atoms.1 == atom
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Chirality {
    /// `@`
    Anticlockwise,
    /// `@@`
    Clockwise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TetraCenter {
    pub atom: usize,
    pub parity: Chirality,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Molecule {
    pub atoms: Vec<Atom>,
    pub bonds: Vec<Bond>,
    pub tetra_centers: Vec<TetraCenter>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("valence of atom {atom} ({element}) exceeds its largest standard valence: bond sum {bond_sum}")]
pub struct ValenceError {
    pub atom: usize,
    pub element: &'static str,
    pub bond_sum: u32,
}

impl Molecule {
    /// Bond indices incident to each atom.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.atoms.len()];
        for (k, b) in self.bonds.iter().enumerate() {
            adj[b.atoms.0].push(k);
            adj[b.atoms.1].push(k);
        }
        adj
    }

    pub fn bond_between(&self, a: usize, b: usize) -> Option<usize> {
        self.bonds.iter().position(|bd| (bd.atoms.0 == a && bd.atoms.1 == b) || (bd.atoms.0 == b && bd.atoms.1 == a))
    }

    /// Sum of bond valence units per atom (aromatic bonds count 1).
    fn bond_sums(&self) -> Vec<u32> {
        let mut sums = vec![0; self.atoms.len()];
        for b in &self.bonds {
            let u = b.order.valence_units();
            sums[b.atoms.0] += u;
            sums[b.atoms.1] += u;
        }
        sums
    }

    /// Number of carbon atoms, aromatic or aliphatic.
    pub fn carbon_count(&self) -> usize {
        self.atoms.iter().filter(|a| a.element == Element::C).count()
    }

    /// Total hydrogens per atom: implicit for organic-subset atoms, the
    /// bracket count otherwise.
    ///
    /// An aliphatic atom takes the smallest standard valence at least its
    /// bond-order sum. An aromatic atom counts each aromatic bond as one,
    /// takes the smallest standard valence at least that sum, and reserves
    /// one further unit for the pi system.
    pub fn implicit_hydrogens(&self) -> Result<Vec<u8>, ValenceError> {
        let sums = self.bond_sums();
        self.atoms
            .iter()
            .enumerate()
            .map(|(i, atom)| {
                let sum = sums[i];
                let valences = atom.element.standard_valences();
                let max = valences.last().copied().map_or(0, u32::from);
                let overflow = ValenceError { atom: i, element: atom.element.symbol(), bond_sum: sum };
                if let Some(h) = atom.explicit_h {
                    if !valences.is_empty() && atom.formal_charge == 0 && sum + h as u32 > max {
                        return Err(overflow);
                    }
                    return Ok(h);
                }
                let pi = u32::from(atom.aromatic);
                let Some(&v) = valences.iter().find(|&&v| v as u32 >= sum) else {
                    return Err(overflow);
                };
                Ok((v as u32).saturating_sub(sum + pi) as u8)
            })
            .collect()
    }

    /// Ring flags for atoms and bonds: a bond lies on a cycle iff it is not
    /// a bridge; an atom does iff it touches a ring bond.
    pub fn ring_membership(&self) -> RingInfo {
        let n = self.atoms.len();
        let adj = self.adjacency();
        let mut disc = vec![usize::MAX; n];
        let mut low = vec![0usize; n];
        let mut is_bridge = vec![false; self.bonds.len()];
        let mut timer = 0;
        for root in 0..n {
            if disc[root] != usize::MAX {
                continue;
            }
            // Iterative DFS: (vertex, parent bond, next adjacency slot).
            let mut stack: Vec<(usize, Option<usize>, usize)> = vec![(root, None, 0)];
            disc[root] = timer;
            low[root] = timer;
            timer += 1;
            while let Some(&mut (v, parent, ref mut slot)) = stack.last_mut() {
                if *slot < adj[v].len() {
                    let k = adj[v][*slot];
                    *slot += 1;
                    if Some(k) == parent {
                        continue;
                    }
                    let w = self.bonds[k].other(v);
                    if disc[w] == usize::MAX {
                        disc[w] = timer;
                        low[w] = timer;
                        timer += 1;
                        stack.push((w, Some(k), 0));
                    } else {
                        low[v] = low[v].min(disc[w]);
                    }
                } else {
                    stack.pop();
                    if let (Some(k), Some(&(u, _, _))) = (parent, stack.last()) {
                        low[u] = low[u].min(low[v]);
                        if low[v] > disc[u] {
                            is_bridge[k] = true;
                        }
                    }
                }
            }
        }
        let bond_in_ring: Vec<bool> = is_bridge.iter().map(|b| !b).collect();
        let mut atom_in_ring = vec![false; n];
        for (k, b) in self.bonds.iter().enumerate() {
            if bond_in_ring[k] {
                atom_in_ring[b.atoms.0] = true;
                atom_in_ring[b.atoms.1] = true;
            }
        }
        RingInfo { atom_in_ring, bond_in_ring }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RingInfo {
    pub atom_in_ring: Vec<bool>,
    pub bond_in_ring: Vec<bool>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn h(smiles: &str) -> Vec<u8> {
        parse_smiles(smiles).unwrap().implicit_hydrogens().unwrap()
    }

    #[test]
    fn hydrogen_counts() {
        assert_eq!(h("C"), vec![4]);
        assert_eq!(h("CCO"), vec![3, 2, 1]);
        // pyridine: the nitrogen is the fourth atom
        assert_eq!(h("c1ccncc1"), vec![1, 1, 1, 0, 1, 1]);
        assert_eq!(h("c1ccccc1"), vec![1; 6]);
        assert_eq!(h("c1ccoc1"), vec![1, 1, 1, 0, 1]);
        assert_eq!(h("c1ccsc1"), vec![1, 1, 1, 0, 1]);
        assert_eq!(h("c1cc[nH]c1"), vec![1, 1, 1, 1, 1]);
        // naphthalene fusion carbons carry no hydrogen
        assert_eq!(h("c1ccc2ccccc2c1"), vec![1, 1, 1, 0, 1, 1, 1, 1, 0, 1]);
        assert_eq!(h("C#N"), vec![1, 0]);
        assert_eq!(h("CS(=O)(=O)C"), vec![3, 0, 0, 0, 3]);
        assert_eq!(h("CS(C)=O"), vec![3, 0, 3, 0]);
        assert_eq!(h("OP(O)(O)=O"), vec![1, 0, 1, 1, 0]);
        assert_eq!(h("ClC(Cl)(Cl)Cl"), vec![0, 0, 0, 0, 0]);
    }

    #[test]
    fn ring_flags() {
        let m = parse_smiles("C1CC1").unwrap();
        let r = m.ring_membership();
        assert!(r.atom_in_ring.iter().all(|&x| x));
        assert!(r.bond_in_ring.iter().all(|&x| x));

        let m = parse_smiles("CCO").unwrap();
        let r = m.ring_membership();
        assert!(r.atom_in_ring.iter().all(|&x| !x));
        assert!(r.bond_in_ring.iter().all(|&x| !x));
    }

    /// Brute force: a bond is on a cycle iff its endpoints stay connected
    /// after deleting it.
    fn brute_ring_bonds(m: &Molecule) -> Vec<bool> {
        (0..m.bonds.len())
            .map(|skip| {
                let (a, b) = m.bonds[skip].atoms;
                let mut seen = vec![false; m.atoms.len()];
                let mut stack = vec![a];
                seen[a] = true;
                while let Some(v) = stack.pop() {
                    for (k, bd) in m.bonds.iter().enumerate() {
                        if k != skip && bd.touches(v) {
                            let w = bd.other(v);
                            if !seen[w] {
                                seen[w] = true;
                                stack.push(w);
                            }
                        }
                    }
                }
                seen[b]
            })
            .collect()
    }

    #[test]
    fn ring_flags_match_brute_force() {
        let m = parse_smiles("C1CC1CC").unwrap();
        let r = m.ring_membership();
        assert_eq!(r.bond_in_ring, brute_ring_bonds(&m));
        assert_eq!(r.atom_in_ring, vec![true, true, true, false, false]);
        for s in ["c1ccc2ccccc2c1", "C1CC2CCC1C2", "C1CC1C1CC1", "CC(C)C1CCC(C)CC1O", "C1CCC2(CC1)CCCC2", "c1ccccc1-c1ccccc1", "CC.C1CC1"] {
            let m = parse_smiles(s).unwrap();
            assert_eq!(m.ring_membership().bond_in_ring, brute_ring_bonds(&m), "{s}");
        }
    }

    #[test]
    fn element_table() {
        assert_eq!(Element::from_symbol("Cl"), Some(Element::Cl));
        assert_eq!(Element::Br.atomic_number(), 35);
        assert!(Element::S.is_allowed());
        assert!(!Element::Si.is_allowed());
        assert_eq!(ALLOWED_ELEMENTS.len(), 9);
    }
}
