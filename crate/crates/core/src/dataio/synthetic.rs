//! Antoine-generated datasets with known ground truth, for tests and demos.
//!
//! Parameters are a fixed function of the molecular graph, so a network
//! that reads the graph can in principle recover them exactly.

use serde::Serialize;

use super::{Quality, Split, VpDataset, VpPoint};
use crate::antoine::{AntoineParams, PA_PER_KPA};
use crate::model::graph_from_smiles;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticComponent {
    pub id: String,
    pub smiles: String,
    pub params: AntoineParams,
    pub holdout: bool,
}

/// `A = 13.5 + 0.1·n`, `B = 2000 + 220·n + 800·donors + 150·acceptors`,
/// `C = −30 − 6·n` with `n` heavy atoms.
pub fn synthetic_params(heavy: usize, donors: usize, acceptors: usize) -> AntoineParams {
    let n = heavy as f64;
    AntoineParams::new(13.5 + 0.1 * n, 2000.0 + 220.0 * n + 800.0 * donors as f64 + 150.0 * acceptors as f64, -30.0 - 6.0 * n)
}

/// Twenty members of three homologous series (n-alkanes C5–C11,
/// 1-alkanols C5–C10, 2-alkanones C5–C11); four interior members are
/// flagged as hold-outs.
pub fn homologous_series() -> Vec<SyntheticComponent> {
    let mut out = Vec::new();
    let mut push = |id: String, smiles: String, holdout: bool| {
        let g = graph_from_smiles(&smiles).expect("series SMILES are valid");
        let params = synthetic_params(g.heavy_atom_count(), g.h_donors, g.h_acceptors);
        out.push(SyntheticComponent { id, smiles, params, holdout });
    };
    for n in 5..=11 {
        push(format!("alkane_c{n:02}"), "C".repeat(n), n == 8);
    }
    for n in 5..=10 {
        push(format!("alkanol_c{n:02}"), format!("{}O", "C".repeat(n)), n == 7);
    }
    for n in 5..=11 {
        push(format!("alkanone_c{n:02}"), format!("CC(=O){}", "C".repeat(n - 2)), n == 6 || n == 9);
    }
    out
}

/// Temperatures spanning 1–100 kPa on the component's curve, clipped to
/// `[250, 600]` K and evenly spaced.
pub fn temperature_grid(p: &AntoineParams, count: usize) -> Vec<f64> {
    let lo = p.boiling_temperature(PA_PER_KPA).expect("in range").clamp(250.0, 600.0);
    let hi = p.boiling_temperature(100.0 * PA_PER_KPA).expect("in range").clamp(250.0, 600.0);
    if count == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..count).map(|k| lo + (hi - lo) * k as f64 / (count - 1) as f64).collect()
}

/// Noise-free dataset: hold-outs labeled `valid`, the rest `train`.
/// Line numbers are those of the equivalent CSV file.
pub fn synthetic_dataset(points_per_component: usize) -> (VpDataset, Vec<SyntheticComponent>) {
    let comps = homologous_series();
    let mut ds = VpDataset::default();
    for c in &comps {
        for t in temperature_grid(&c.params, points_per_component) {
            ds.points.push(VpPoint {
                component_id: c.id.clone(),
                smiles: c.smiles.clone(),
                temperature_k: t,
                pressure_pa: c.params.vapor_pressure_pa(t).expect("positive denominator"),
                quality: Quality::Ok,
                stereo_ok: None,
                source: None,
                line: ds.points.len() + 2,
            });
        }
        ds.splits.insert(c.id.clone(), if c.holdout { Split::Valid } else { Split::Train });
    }
    (ds, comps)
}

/// Adds one point at `factor ×` the true pressure to every component with
/// at least `min_points` points, midway between its two central
/// temperatures. Returns the contaminated set and the injected points.
pub fn contaminate(ds: &VpDataset, factor: f64, min_points: usize) -> (VpDataset, Vec<VpPoint>) {
    let mut out = ds.clone();
    let mut injected = Vec::new();
    for idx in ds.components().values() {
        if idx.len() < min_points {
            continue;
        }
        let mut pts: Vec<&VpPoint> = idx.iter().map(|&i| &ds.points[i]).collect();
        pts.sort_by(|a, b| a.temperature_k.total_cmp(&b.temperature_k));
        let mid = pts.len() / 2;
        let (a, b) = (pts[mid - 1], pts[mid]);
        let t = 0.5 * (a.temperature_k + b.temperature_k);
        // geometric midpoint of the neighbours approximates the curve
        let p = (a.pressure_pa * b.pressure_pa).sqrt() * factor;
        let point = VpPoint { temperature_k: t, pressure_pa: p, line: 0, ..a.clone() };
        injected.push(point.clone());
        out.points.push(point);
    }
    for (k, p) in out.points.iter_mut().enumerate() {
        p.line = k + 2;
    }
    let n = ds.points.len();
    for (k, p) in injected.iter_mut().enumerate() {
        p.line = n + k + 2;
    }
    (out, injected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::antoine::ParamRanges;

    #[test]
    fn series_shape() {
        let comps = homologous_series();
        assert_eq!(comps.len(), 20);
        assert_eq!(comps.iter().filter(|c| c.holdout).count(), 4);
        let r = ParamRanges::default();
        for c in &comps {
            assert!(r.contains_open(&c.params), "{c:?}");
            let m = crate::molgraph::parse_smiles(&c.smiles).unwrap();
            assert!(m.carbon_count() >= 5);
        }
    }

    #[test]
    fn dataset_points_lie_on_their_curves() {
        let (ds, comps) = synthetic_dataset(10);
        assert_eq!(ds.len(), 200);
        for c in &comps {
            let pts: Vec<&VpPoint> = ds.points.iter().filter(|p| p.component_id == c.id).collect();
            assert_eq!(pts.len(), 10);
            for p in pts {
                assert!((250.0..=600.0).contains(&p.temperature_k));
                assert!((900.0..=100_001.0).contains(&p.pressure_pa), "{p:?}");
                let ln = c.params.ln_vapor_pressure(p.temperature_k).unwrap();
                assert!((ln - (p.pressure_pa / PA_PER_KPA).ln()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn contamination_adds_one_point_per_eligible_component() {
        let (ds, _) = synthetic_dataset(9);
        let (dirty, injected) = contaminate(&ds, 2.0, 5);
        assert_eq!(injected.len(), 20);
        assert_eq!(dirty.len(), 200);
        let (few, _) = synthetic_dataset(4);
        assert!(contaminate(&few, 2.0, 5).1.is_empty());
    }
}
