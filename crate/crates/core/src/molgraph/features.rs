use super::{BondOrder, BondStereo, Element, Molecule, ValenceError, ALLOWED_ELEMENTS};
use crate::tensor::Matrix;

pub const NODE_FEATURES: usize = 24;
pub const EDGE_FEATURES: usize = 9;

const DEGREE_OFFSET: usize = 9;
const H_OFFSET: usize = 14;
const HYBRID_OFFSET: usize = 18;
const AROMATIC_SLOT: usize = 22;
const RING_SLOT: usize = 23;

const EDGE_CONJUGATED: usize = 4;
const EDGE_RING: usize = 5;
const EDGE_STEREO_OFFSET: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hybridization {
    Sp,
    Sp2,
    Sp3,
    Other,
}

impl Hybridization {
    fn slot(self) -> usize {
        match self {
            Self::Sp => 0,
            Self::Sp2 => 1,
            Self::Sp3 => 2,
            Self::Other => 3,
        }
    }

    fn is_unsaturated(self) -> bool {
        matches!(self, Self::Sp | Self::Sp2)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RejectReason {
    NoCarbon,
    DisallowedElement(&'static str),
    FormalCharge,
    Radical,
    Isotope,
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::NoCarbon => write!(f, "no carbon atom"),
            Self::DisallowedElement(e) => write!(f, "element {e} outside C,N,O,Cl,S,F,Br,I,P"),
            Self::FormalCharge => write!(f, "formal charge"),
            Self::Radical => write!(f, "unpaired electrons"),
            Self::Isotope => write!(f, "isotope label"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScopeDecision {
    Accept,
    Reject(Vec<RejectReason>),
}

impl ScopeDecision {
    pub fn is_accept(&self) -> bool {
        matches!(self, Self::Accept)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FeaturizeError {
    #[error("molecule outside the model domain: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join(", "))]
    OutOfScope(Vec<RejectReason>),
    #[error(transparent)]
    Valence(#[from] ValenceError),
}

/// Decides whether a molecule is inside the model's chemical domain.
/// All violated rules are reported.
pub fn validate_scope(m: &Molecule) -> ScopeDecision {
    let mut reasons = Vec::new();
    if m.carbon_count() == 0 {
        reasons.push(RejectReason::NoCarbon);
    }
    let mut disallowed: Vec<&'static str> = m.atoms.iter().filter(|a| !a.element.is_allowed()).map(|a| a.element.symbol()).collect();
    disallowed.sort_unstable();
    disallowed.dedup();
    reasons.extend(disallowed.into_iter().map(RejectReason::DisallowedElement));
    if m.atoms.iter().any(|a| a.formal_charge != 0) {
        reasons.push(RejectReason::FormalCharge);
    }
    if has_radical(m) {
        reasons.push(RejectReason::Radical);
    }
    if m.atoms.iter().any(|a| a.isotope.is_some()) {
        reasons.push(RejectReason::Isotope);
    }
    if reasons.is_empty() {
        ScopeDecision::Accept
    } else {
        ScopeDecision::Reject(reasons)
    }
}

/// A neutral bracket atom whose bonds plus hydrogens (plus one for an
/// aromatic pi contribution) fall short of its smallest standard valence.
fn has_radical(m: &Molecule) -> bool {
    let sums = m.bond_sums();
    m.atoms.iter().enumerate().any(|(i, a)| {
        let (Some(h), Some(&min)) = (a.explicit_h, a.element.standard_valences().first()) else {
            return false;
        };
        a.formal_charge == 0 && sums[i] + u32::from(h) + u32::from(a.aromatic) < u32::from(min)
    })
}

/// Featurized molecular graph.
#[derive(Debug, Clone, PartialEq)]
pub struct MolGraph {
    /// `N × 24` one-hot node features.
    pub node_features: Matrix,
    /// Directed edges; each bond appears as `(i, j)` and `(j, i)`.
    pub edges: Vec<(usize, usize)>,
    /// One 9-wide row per directed edge, identical for both directions.
    pub edge_features: Matrix,
    pub h_donors: usize,
    pub h_acceptors: usize,
    pub mol_weight: f64,
}

impl MolGraph {
    pub fn heavy_atom_count(&self) -> usize {
        self.node_features.rows()
    }

    /// Same graph with atom `i` moved to position `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.heavy_atom_count();
        assert_eq!(perm.len(), n, "permutation length");
        let mut nodes = Matrix::zeros(n, NODE_FEATURES);
        for (i, &p) in perm.iter().enumerate() {
            nodes.row_mut(p).copy_from_slice(self.node_features.row(i));
        }
        Self {
            node_features: nodes,
            edges: self.edges.iter().map(|&(i, j)| (perm[i], perm[j])).collect(),
            edge_features: self.edge_features.clone(),
            h_donors: self.h_donors,
            h_acceptors: self.h_acceptors,
            mol_weight: self.mol_weight,
        }
    }
}

fn hybridization(m: &Molecule, hydrogens: &[u8]) -> Vec<Hybridization> {
    let adj = m.adjacency();
    m.atoms
        .iter()
        .enumerate()
        .map(|(i, atom)| {
            let count = |o: BondOrder| adj[i].iter().filter(|&&k| m.bonds[k].order == o).count();
            let (double, triple, aromatic) = (count(BondOrder::Double), count(BondOrder::Triple), count(BondOrder::Aromatic));
            let valence: u32 = adj[i].iter().map(|&k| m.bonds[k].order.valence_units()).sum::<u32>() + u32::from(hydrogens[i]);
            let hypervalent = !atom.aromatic
                && match atom.element {
                    Element::S => valence > 2,
                    Element::P => valence > 3,
                    _ => false,
                };
            if hypervalent {
                Hybridization::Other
            } else if triple > 0 || double >= 2 {
                Hybridization::Sp
            } else if atom.aromatic || aromatic > 0 || double > 0 {
                Hybridization::Sp2
            } else {
                Hybridization::Sp3
            }
        })
        .collect()
}

/// Builds the initial graph.
///
/// Node row: `[0..9)` element (C,N,O,Cl,S,F,Br,I,P), `[9..14)` heavy-atom
/// degree (0,1,2,3,>=4), `[14..18)` hydrogens (0,1,2,>=3), `[18..22)`
/// hybridization (SP,SP2,SP3,OTHER), `[22]` aromatic, `[23]` in ring.
/// Edge row: `[0..4)` order (single,double,triple,aromatic), `[4]`
/// conjugated, `[5]` in ring, `[6..9)` stereo (none,Z,E).
pub fn featurize(m: &Molecule) -> Result<MolGraph, FeaturizeError> {
    if let ScopeDecision::Reject(reasons) = validate_scope(m) {
        return Err(FeaturizeError::OutOfScope(reasons));
    }
    let hydrogens = m.implicit_hydrogens()?;
    let ring = m.ring_membership();
    let hybrid = hybridization(m, &hydrogens);
    let adj = m.adjacency();
    let n = m.atoms.len();

    let mut nodes = Matrix::zeros(n, NODE_FEATURES);
    for (i, atom) in m.atoms.iter().enumerate() {
        let row = nodes.row_mut(i);
        let e = ALLOWED_ELEMENTS.iter().position(|&x| x == atom.element).expect("scope validated");
        row[e] = 1.0;
        row[DEGREE_OFFSET + adj[i].len().min(4)] = 1.0;
        row[H_OFFSET + usize::from(hydrogens[i]).min(3)] = 1.0;
        row[HYBRID_OFFSET + hybrid[i].slot()] = 1.0;
        row[AROMATIC_SLOT] = f64::from(u8::from(atom.aromatic));
        row[RING_SLOT] = f64::from(u8::from(ring.atom_in_ring[i]));
    }

    let mut edges = Vec::with_capacity(2 * m.bonds.len());
    let mut edge_features = Matrix::zeros(2 * m.bonds.len(), EDGE_FEATURES);
    for (k, bond) in m.bonds.iter().enumerate() {
        let (a, b) = bond.atoms;
        let mut f = [0.0; EDGE_FEATURES];
        f[match bond.order {
            BondOrder::Single => 0,
            BondOrder::Double => 1,
            BondOrder::Triple => 2,
            BondOrder::Aromatic => 3,
        }] = 1.0;
        f[EDGE_CONJUGATED] = f64::from(u8::from(hybrid[a].is_unsaturated() && hybrid[b].is_unsaturated()));
        f[EDGE_RING] = f64::from(u8::from(ring.bond_in_ring[k]));
        f[EDGE_STEREO_OFFSET
            + match bond.stereo {
                BondStereo::None => 0,
                BondStereo::Z => 1,
                BondStereo::E => 2,
            }] = 1.0;
        for (slot, (i, j)) in [(a, b), (b, a)].into_iter().enumerate() {
            edges.push((i, j));
            edge_features.row_mut(2 * k + slot).copy_from_slice(&f);
        }
    }

    let is_polar = |e: Element| matches!(e, Element::N | Element::O);
    let h_acceptors = m.atoms.iter().filter(|a| is_polar(a.element)).count();
    let h_donors = m.atoms.iter().zip(&hydrogens).filter(|(a, &h)| is_polar(a.element) && h > 0).count();
    let mol_weight =
        m.atoms.iter().zip(&hydrogens).map(|(a, &h)| a.element.atomic_weight() + f64::from(h) * Element::H.atomic_weight()).sum();

    Ok(MolGraph { node_features: nodes, edges, edge_features, h_donors, h_acceptors, mol_weight })
}
