use std::collections::HashMap;

use super::{Atom, Bond, BondOrder, BondStereo, Chirality, Element, Molecule, TetraCenter};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{kind} at offset {offset}")]
pub struct ParseError {
    pub kind: ParseErrorKind,
    /// Byte offset into the SMILES string.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseErrorKind {
    #[error("empty SMILES")]
    Empty,
    #[error("non-ASCII input")]
    NonAscii,
    #[error("unbalanced parenthesis")]
    UnbalancedParenthesis,
    #[error("ring closure {0} never closed")]
    UnclosedRing(u32),
    #[error("unknown atom symbol '{0}'")]
    UnknownAtom(String),
    #[error("valence overflow on atom {0}")]
    ValenceOverflow(usize),
    #[error("bond symbol not followed by an atom")]
    DanglingBond,
    #[error("malformed bracket atom")]
    MalformedBracket,
    #[error("unexpected character '{0}'")]
    UnexpectedChar(char),
    #[error("duplicate bond between atoms {0} and {1}")]
    DuplicateBond(usize, usize),
    #[error("ring closure bonds an atom to itself")]
    SelfBond,
    #[error("conflicting bond symbols on ring closure")]
    RingBondConflict,
    #[error("aromatic bond between non-aromatic atoms")]
    AromaticBondMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BondSymbol {
    Single,
    Double,
    Triple,
    Aromatic,
    Up,
    Down,
}

impl BondSymbol {
    fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            b'-' => Self::Single,
            b'=' => Self::Double,
            b'#' => Self::Triple,
            b':' => Self::Aromatic,
            b'/' => Self::Up,
            b'\\' => Self::Down,
            _ => return None,
        })
    }

    fn order(self) -> BondOrder {
        match self {
            Self::Single | Self::Up | Self::Down => BondOrder::Single,
            Self::Double => BondOrder::Double,
            Self::Triple => BondOrder::Triple,
            Self::Aromatic => BondOrder::Aromatic,
        }
    }

    fn is_directional(self) -> bool {
        matches!(self, Self::Up | Self::Down)
    }
}

/// `/` or `\` on a single bond, as written starting at atom `from`.
#[derive(Debug, Clone, Copy)]
struct Direction {
    from: usize,
    up: bool,
}

struct RingOpening {
    atom: usize,
    symbol: Option<BondSymbol>,
    offset: usize,
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
    mol: Molecule,
    atom_offsets: Vec<usize>,
    prev: Option<usize>,
    branches: Vec<(usize, usize)>,
    pending: Option<(BondSymbol, usize)>,
    rings: HashMap<u32, RingOpening>,
    directions: Vec<(usize, Direction)>,
}

/// Parses a SMILES string into a [`Molecule`].
///
/// Directional single bonds are resolved into Z/E labels on the double bond
/// they flank; aromatic bonds that end up outside every ring become single
/// bonds; hydrogen counts are validated against standard valences.
pub fn parse_smiles(text: &str) -> Result<Molecule, ParseError> {
    if text.is_empty() {
        return Err(ParseError { kind: ParseErrorKind::Empty, offset: 0 });
    }
    if let Some(offset) = text.bytes().position(|b| !b.is_ascii()) {
        return Err(ParseError { kind: ParseErrorKind::NonAscii, offset });
    }
    let mut p = Parser {
        bytes: text.as_bytes(),
        pos: 0,
        mol: Molecule::default(),
        atom_offsets: Vec::new(),
        prev: None,
        branches: Vec::new(),
        pending: None,
        rings: HashMap::new(),
        directions: Vec::new(),
    };
    p.run()?;
    p.finish()
}

impl Parser<'_> {
    fn err<T>(&self, kind: ParseErrorKind, offset: usize) -> Result<T, ParseError> {
        Err(ParseError { kind, offset })
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn run(&mut self) -> Result<(), ParseError> {
        while let Some(c) = self.peek() {
            let start = self.pos;
            match c {
                b'(' => {
                    let Some(prev) = self.prev else {
                        return self.err(ParseErrorKind::UnbalancedParenthesis, start);
                    };
                    if self.pending.is_some() {
                        return self.err(ParseErrorKind::DanglingBond, start);
                    }
                    self.branches.push((prev, start));
                    self.pos += 1;
                }
                b')' => {
                    if self.pending.is_some() {
                        return self.err(ParseErrorKind::DanglingBond, start);
                    }
                    let Some((atom, _)) = self.branches.pop() else {
                        return self.err(ParseErrorKind::UnbalancedParenthesis, start);
                    };
                    self.prev = Some(atom);
                    self.pos += 1;
                }
                b'.' => {
                    if self.pending.is_some() {
                        return self.err(ParseErrorKind::DanglingBond, start);
                    }
                    self.prev = None;
                    self.pos += 1;
                }
                b'0'..=b'9' | b'%' => {
                    let number = self.ring_number()?;
                    self.ring_closure(number, start)?;
                }
                b'[' => {
                    let atom = self.bracket_atom()?;
                    self.add_atom(atom, start)?;
                }
                _ => {
                    if let Some(sym) = BondSymbol::from_byte(c) {
                        if self.pending.is_some() || self.prev.is_none() {
                            return self.err(ParseErrorKind::DanglingBond, start);
                        }
                        self.pending = Some((sym, start));
                        self.pos += 1;
                    } else {
                        let atom = self.organic_atom()?;
                        self.add_atom(atom, start)?;
                    }
                }
            }
        }
        if let Some((_, offset)) = self.pending {
            return self.err(ParseErrorKind::DanglingBond, offset);
        }
        if let Some(&(_, offset)) = self.branches.last() {
            return self.err(ParseErrorKind::UnbalancedParenthesis, offset);
        }
        if let Some((&n, open)) = self.rings.iter().min_by_key(|(_, o)| o.offset) {
            return self.err(ParseErrorKind::UnclosedRing(n), open.offset);
        }
        Ok(())
    }

    fn ring_number(&mut self) -> Result<u32, ParseError> {
        let start = self.pos;
        if self.peek() == Some(b'%') {
            let digits = self.bytes.get(self.pos + 1..self.pos + 3);
            match digits {
                Some(d) if d.iter().all(u8::is_ascii_digit) => {
                    self.pos += 3;
                    Ok(u32::from(d[0] - b'0') * 10 + u32::from(d[1] - b'0'))
                }
                _ => self.err(ParseErrorKind::UnexpectedChar('%'), start),
            }
        } else {
            let d = self.bytes[self.pos] - b'0';
            self.pos += 1;
            Ok(u32::from(d))
        }
    }

    fn ring_closure(&mut self, number: u32, offset: usize) -> Result<(), ParseError> {
        let Some(current) = self.prev else {
            return self.err(ParseErrorKind::UnexpectedChar(self.bytes[offset] as char), offset);
        };
        let symbol = self.pending.take().map(|(s, _)| s);
        match self.rings.remove(&number) {
            None => {
                self.rings.insert(number, RingOpening { atom: current, symbol, offset });
                Ok(())
            }
            Some(open) => {
                if open.atom == current {
                    return self.err(ParseErrorKind::SelfBond, offset);
                }
                let chosen = match (open.symbol, symbol) {
                    (Some(a), Some(b)) if a.order() != b.order() => {
                        return self.err(ParseErrorKind::RingBondConflict, offset);
                    }
                    (Some(a), _) => Some(a),
                    (None, b) => b,
                };
                let bond = self.bond(open.atom, current, chosen, offset)?;
                if let Some(s) = open.symbol.filter(|s| s.is_directional()) {
                    self.directions.push((bond, Direction { from: open.atom, up: s == BondSymbol::Up }));
                } else if let Some(s) = symbol.filter(|s| s.is_directional()) {
                    self.directions.push((bond, Direction { from: current, up: s == BondSymbol::Up }));
                }
                Ok(())
            }
        }
    }

    fn bond(&mut self, a: usize, b: usize, symbol: Option<BondSymbol>, offset: usize) -> Result<usize, ParseError> {
        if self.mol.bond_between(a, b).is_some() {
            return self.err(ParseErrorKind::DuplicateBond(a.min(b), a.max(b)), offset);
        }
        let both_aromatic = self.mol.atoms[a].aromatic && self.mol.atoms[b].aromatic;
        let order = match symbol {
            Some(s) => s.order(),
            None if both_aromatic => BondOrder::Aromatic,
            None => BondOrder::Single,
        };
        if order == BondOrder::Aromatic && !both_aromatic {
            return self.err(ParseErrorKind::AromaticBondMismatch, offset);
        }
        self.mol.bonds.push(Bond { atoms: (a, b), order, stereo: BondStereo::None });
        Ok(self.mol.bonds.len() - 1)
    }

    fn add_atom(&mut self, atom: Atom, offset: usize) -> Result<(), ParseError> {
        self.mol.atoms.push(atom);
        self.atom_offsets.push(offset);
        let idx = self.mol.atoms.len() - 1;
        if let Some(prev) = self.prev {
            let pending = self.pending.take();
            let symbol = pending.map(|(s, _)| s);
            let bond_offset = pending.map_or(offset, |(_, o)| o);
            let bond = self.bond(prev, idx, symbol, bond_offset)?;
            if let Some(s) = symbol.filter(|s| s.is_directional()) {
                self.directions.push((bond, Direction { from: prev, up: s == BondSymbol::Up }));
            }
        } else if let Some((_, o)) = self.pending {
            return self.err(ParseErrorKind::DanglingBond, o);
        }
        self.prev = Some(idx);
        Ok(())
    }

    fn organic_atom(&mut self) -> Result<Atom, ParseError> {
        let start = self.pos;
        let c = self.bytes[self.pos];
        let next = self.bytes.get(self.pos + 1).copied();
        let (element, aromatic, width) = match (c, next) {
            (b'C', Some(b'l')) => (Element::Cl, false, 2),
            (b'B', Some(b'r')) => (Element::Br, false, 2),
            (b'C', _) => (Element::C, false, 1),
            (b'N', _) => (Element::N, false, 1),
            (b'O', _) => (Element::O, false, 1),
            (b'S', _) => (Element::S, false, 1),
            (b'P', _) => (Element::P, false, 1),
            (b'F', _) => (Element::F, false, 1),
            (b'I', _) => (Element::I, false, 1),
            (b'c', _) => (Element::C, true, 1),
            (b'n', _) => (Element::N, true, 1),
            (b'o', _) => (Element::O, true, 1),
            (b's', _) => (Element::S, true, 1),
            (b'p', _) => (Element::P, true, 1),
            (c, _) if c.is_ascii_alphabetic() || c == b'*' => {
                let end = if next.is_some_and(|n| n.is_ascii_lowercase()) && c.is_ascii_uppercase() { start + 2 } else { start + 1 };
                let sym = String::from_utf8_lossy(&self.bytes[start..end]).into_owned();
                return self.err(ParseErrorKind::UnknownAtom(sym), start);
            }
            (c, _) => return self.err(ParseErrorKind::UnexpectedChar(c as char), start),
        };
        self.pos += width;
        Ok(Atom { element, aromatic, explicit_h: None, formal_charge: 0, isotope: None })
    }

    fn take_number(&mut self) -> Option<u32> {
        let start = self.pos;
        while self.peek().is_some_and(|b| b.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == start {
            return None;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).ok()?.parse().ok()
    }

    fn bracket_atom(&mut self) -> Result<Atom, ParseError> {
        let open = self.pos;
        self.pos += 1;
        let malformed = ParseError { kind: ParseErrorKind::MalformedBracket, offset: open };

        let isotope = match self.take_number() {
            Some(n) => Some(u16::try_from(n).map_err(|_| malformed.clone())?),
            None => None,
        };

        let sym_start = self.pos;
        let Some(first) = self.peek() else {
            return Err(malformed);
        };
        let (element, aromatic) = if first.is_ascii_lowercase() {
            let two = self.bytes.get(self.pos..self.pos + 2);
            match two {
                Some(b"se") => {
                    self.pos += 2;
                    (Element::Se, true)
                }
                Some(b"as") => {
                    self.pos += 2;
                    (Element::As, true)
                }
                _ => {
                    self.pos += 1;
                    let e = match first {
                        b'c' => Element::C,
                        b'n' => Element::N,
                        b'o' => Element::O,
                        b's' => Element::S,
                        b'p' => Element::P,
                        b'b' => Element::B,
                        _ => {
                            return self.err(ParseErrorKind::UnknownAtom((first as char).to_string()), sym_start);
                        }
                    };
                    (e, true)
                }
            }
        } else if first.is_ascii_uppercase() {
            let two = self
                .bytes
                .get(self.pos + 1)
                .filter(|b| b.is_ascii_lowercase())
                .and_then(|_| std::str::from_utf8(&self.bytes[self.pos..self.pos + 2]).ok())
                .and_then(Element::from_symbol);
            if let Some(e) = two {
                self.pos += 2;
                (e, false)
            } else {
                let one = std::str::from_utf8(&self.bytes[self.pos..self.pos + 1]).ok().and_then(Element::from_symbol);
                match one {
                    Some(e) => {
                        self.pos += 1;
                        (e, false)
                    }
                    None => {
                        let end =
                            if self.bytes.get(self.pos + 1).is_some_and(|b| b.is_ascii_lowercase()) { self.pos + 2 } else { self.pos + 1 };
                        let sym = String::from_utf8_lossy(&self.bytes[self.pos..end]).into_owned();
                        return self.err(ParseErrorKind::UnknownAtom(sym), sym_start);
                    }
                }
            }
        } else {
            return Err(malformed);
        };

        if self.peek() == Some(b'@') {
            self.pos += 1;
            let parity = if self.peek() == Some(b'@') {
                self.pos += 1;
                Chirality::Clockwise
            } else {
                Chirality::Anticlockwise
            };
            // Only tetrahedral classes are recorded; @TH1 style suffixes are skipped.
            if self.bytes.get(self.pos..self.pos + 2) == Some(b"TH") {
                self.pos += 2;
                self.take_number();
            }
            self.mol.tetra_centers.push(TetraCenter { atom: self.mol.atoms.len(), parity });
        }

        let mut h = 0u8;
        if self.peek() == Some(b'H') {
            self.pos += 1;
            h = match self.take_number() {
                Some(n) => u8::try_from(n).map_err(|_| malformed.clone())?,
                None => 1,
            };
        }

        let mut charge: i32 = 0;
        if let Some(sign @ (b'+' | b'-')) = self.peek() {
            let unit = if sign == b'+' { 1 } else { -1 };
            self.pos += 1;
            if let Some(n) = self.take_number() {
                charge = unit * i32::try_from(n).map_err(|_| malformed.clone())?;
            } else {
                charge = unit;
                while self.peek() == Some(sign) {
                    self.pos += 1;
                    charge += unit;
                }
            }
        }
        if self.peek() == Some(b':') {
            self.pos += 1;
            if self.take_number().is_none() {
                return Err(malformed);
            }
        }
        if self.peek() != Some(b']') {
            return Err(malformed);
        }
        self.pos += 1;
        Ok(Atom { element, aromatic, explicit_h: Some(h), formal_charge: i8::try_from(charge).map_err(|_| malformed.clone())?, isotope })
    }

    fn finish(mut self) -> Result<Molecule, ParseError> {
        // Aromatic bonds outside every ring (e.g. the biphenyl link written
        // without '-') are single bonds.
        let ring = self.mol.ring_membership();
        for (k, b) in self.mol.bonds.iter_mut().enumerate() {
            if b.order == BondOrder::Aromatic && !ring.bond_in_ring[k] {
                b.order = BondOrder::Single;
            }
        }
        self.resolve_double_bond_stereo();
        if let Err(e) = self.mol.implicit_hydrogens() {
            return Err(ParseError { kind: ParseErrorKind::ValenceOverflow(e.atom), offset: self.atom_offsets[e.atom] });
        }
        Ok(self.mol)
    }

    fn resolve_double_bond_stereo(&mut self) {
        let marks: HashMap<usize, Direction> = self.directions.iter().copied().collect();
        let adj = self.mol.adjacency();
        let stereo: Vec<(usize, BondStereo)> = self
            .mol
            .bonds
            .iter()
            .enumerate()
            .filter(|(_, b)| b.order == BondOrder::Double)
            .filter_map(|(k, b)| {
                let (a, c) = b.atoms;
                let side_a = self.reference_side(a, k, &adj, &marks)?;
                let side_c = self.reference_side(c, k, &adj, &marks)?;
                Some((k, if side_a == side_c { BondStereo::Z } else { BondStereo::E }))
            })
            .collect();
        for (k, s) in stereo {
            self.mol.bonds[k].stereo = s;
        }
    }

    /// Side (`true` = up) of the highest-priority substituent of `atom`
    /// relative to the double bond `db`, or `None` without a directional mark.
    ///
    /// Priority is atomic number; when the marked substituent is outranked
    /// by the other one, the other one sits on the opposite side.
    fn reference_side(&self, atom: usize, db: usize, adj: &[Vec<usize>], marks: &HashMap<usize, Direction>) -> Option<bool> {
        let subs: Vec<usize> = adj[atom].iter().copied().filter(|&k| k != db).collect();
        let (marked_bond, dir) = subs.iter().find_map(|&k| marks.get(&k).map(|d| (k, *d)))?;
        let marked_atom = self.mol.bonds[marked_bond].other(atom);
        // written towards the substituent: substituent is on the written side;
        // written from the substituent: the double-bond atom is on it, so the
        // substituent is on the other.
        let marked_up = if dir.from == atom { dir.up } else { !dir.up };
        let other = subs.iter().map(|&k| self.mol.bonds[k].other(atom)).find(|&n| n != marked_atom);
        let z = |i: usize| self.mol.atoms[i].element.atomic_number();
        match other {
            Some(o) if z(o) > z(marked_atom) => Some(!marked_up),
            _ => Some(marked_up),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kind(s: &str) -> ParseErrorKind {
        parse_smiles(s).unwrap_err().kind
    }

    #[test]
    fn chain_and_ring() {
        let m = parse_smiles("CCO").unwrap();
        assert_eq!(m.atoms.len(), 3);
        assert_eq!(m.bonds.len(), 2);
        assert_eq!(m.atoms[2].element, Element::O);
        assert!(m.bonds.iter().all(|b| b.order == BondOrder::Single));

        let m = parse_smiles("c1ccccc1").unwrap();
        assert_eq!(m.atoms.len(), 6);
        assert!(m.atoms.iter().all(|a| a.aromatic && a.element == Element::C));
        assert_eq!(m.bonds.len(), 6);
        assert!(m.bonds.iter().all(|b| b.order == BondOrder::Aromatic));
    }

    #[test]
    fn double_bond_stereo() {
        let bond = |s: &str| {
            let m = parse_smiles(s).unwrap();
            m.bonds.iter().find(|b| b.order == BondOrder::Double).unwrap().stereo
        };
        assert_eq!(bond("F/C=C/F"), BondStereo::E);
        assert_eq!(bond("F\\C=C\\F"), BondStereo::E);
        assert_eq!(bond("F/C=C\\F"), BondStereo::Z);
        assert_eq!(bond("C(/F)=C/F"), BondStereo::Z);
        assert_eq!(bond("FC=CF"), BondStereo::None);
        // trans-2-butene and cis-2-butene
        assert_eq!(bond("C/C=C/C"), BondStereo::E);
        assert_eq!(bond("C/C=C\\C"), BondStereo::Z);
        // the marked methyl is outranked by Cl on the same carbon
        assert_eq!(bond("C/C(Cl)=C/C"), BondStereo::Z);
        let m = parse_smiles("F/C=C/F").unwrap();
        assert_eq!(m.atoms.len(), 4);
    }

    #[test]
    fn bracket_atoms() {
        let m = parse_smiles("[NH4+]").unwrap();
        assert_eq!(m.atoms[0].explicit_h, Some(4));
        assert_eq!(m.atoms[0].formal_charge, 1);
        let m = parse_smiles("[13CH4]").unwrap();
        assert_eq!(m.atoms[0].isotope, Some(13));
        let m = parse_smiles("C[C@@H](O)CC").unwrap();
        assert_eq!(m.tetra_centers, vec![TetraCenter { atom: 1, parity: Chirality::Clockwise }]);
        let m = parse_smiles("[O-][N+](=O)C").unwrap();
        assert_eq!(m.atoms[0].formal_charge, -1);
        let m = parse_smiles("[Fe++]").unwrap();
        assert_eq!(m.atoms[0].formal_charge, 2);
        let m = parse_smiles("[Na+].[Cl-]").unwrap();
        assert!(m.bonds.is_empty());
    }

    #[test]
    fn ring_closures() {
        let m = parse_smiles("C%12CC%12").unwrap();
        assert_eq!(m.bonds.len(), 3);
        let m = parse_smiles("C1CC=1").unwrap();
        assert_eq!(m.bonds[2].order, BondOrder::Double);
        let m = parse_smiles("c1ccccc1-c1ccccc1").unwrap();
        assert_eq!(m.bonds.len(), 13);
        let m = parse_smiles("c1ccccc1c1ccccc1").unwrap();
        let link = m.bond_between(5, 6).unwrap();
        assert_eq!(m.bonds[link].order, BondOrder::Single);
    }

    #[test]
    fn errors_carry_offsets() {
        assert_eq!(kind("CC(O"), ParseErrorKind::UnbalancedParenthesis);
        assert_eq!(kind("CC)O"), ParseErrorKind::UnbalancedParenthesis);
        assert_eq!(kind("C1CC"), ParseErrorKind::UnclosedRing(1));
        assert_eq!(kind("CXC"), ParseErrorKind::UnknownAtom("X".into()));
        assert_eq!(kind("C[Xx]"), ParseErrorKind::UnknownAtom("Xx".into()));
        assert_eq!(kind("CC="), ParseErrorKind::DanglingBond);
        assert_eq!(kind("=CC"), ParseErrorKind::DanglingBond);
        assert_eq!(kind("C(=)C"), ParseErrorKind::DanglingBond);
        assert_eq!(kind("C11"), ParseErrorKind::SelfBond);
        assert_eq!(kind("C12CC12"), ParseErrorKind::DuplicateBond(0, 2));
        assert_eq!(kind(""), ParseErrorKind::Empty);
        assert_eq!(kind("CC[C"), ParseErrorKind::MalformedBracket);
        assert_eq!(kind("C:C"), ParseErrorKind::AromaticBondMismatch);
        assert_eq!(kind("C=1CC#1"), ParseErrorKind::RingBondConflict);

        let e = parse_smiles("CC(C)(C)(C)C").unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::ValenceOverflow(1));
        assert_eq!(e.offset, 1);
        let e = parse_smiles("CCCX").unwrap_err();
        assert_eq!(e.offset, 3);
        assert_eq!(parse_smiles("FC(F)(F)F=O").unwrap_err().kind, ParseErrorKind::ValenceOverflow(4));
    }
}
