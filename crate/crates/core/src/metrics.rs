//! Error scores on `ln(p/kPa)` and percentage deviations, plus the binned
//! tables and hexbin grid behind the evaluation figures.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::antoine::{AntoineParams, PA_PER_KPA};
use crate::dataio::VpDataset;
use crate::model::{graph_from_smiles, GrappaModel, ModelError};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("experimental pressure must be positive, got {0}")]
    NonPositive(f64),
    #[error("nothing to evaluate")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// `|pred − exp| / exp · 100`
pub fn ape_i(pred: f64, exp: f64) -> Result<f64> {
    if !(exp > 0.0) {
        return Err(MetricError::NonPositive(exp));
    }
    Ok((pred - exp).abs() / exp * 100.0)
}

/// Mean of one component's point errors.
pub fn ape_c(apes: &[f64]) -> Result<f64> {
    if apes.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(apes.iter().sum::<f64>() / apes.len() as f64)
}

/// Median; even-length samples average the two central values.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.5)
}

/// Linear-interpolation quantile of an ascending sample.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let h = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
    Some(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Box-plot summary with Tukey whiskers (furthest samples within 1.5·IQR).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoxStats {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub whisker_lo: f64,
    pub whisker_hi: f64,
}

impl BoxStats {
    pub fn of(values: &[f64]) -> Option<Self> {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q1 = quantile_sorted(&v, 0.25)?;
        let q3 = quantile_sorted(&v, 0.75)?;
        let iqr = q3 - q1;
        let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        Some(Self {
            n: v.len(),
            min: v[0],
            q1,
            median: quantile_sorted(&v, 0.5)?,
            q3,
            max: v[v.len() - 1],
            whisker_lo: *v.iter().find(|&&x| x >= lo_fence).expect("q1 lies inside"),
            whisker_hi: *v.iter().rev().find(|&&x| x <= hi_fence).expect("q3 lies inside"),
        })
    }
}

/// One evaluated measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub component_id: String,
    #[serde(rename = "temperature_K")]
    pub temperature_k: f64,
    #[serde(rename = "p_exp_Pa")]
    pub p_exp_pa: f64,
    pub ln_p_exp: f64,
    pub ln_p_pred: f64,
    pub mol_weight: f64,
}

impl EvalPoint {
    pub fn p_pred_pa(&self) -> f64 {
        self.ln_p_pred.exp() * PA_PER_KPA
    }

    /// Point APE computed from the log residual, exact for any magnitude.
    pub fn ape(&self) -> f64 {
        ((self.ln_p_pred - self.ln_p_exp).exp() - 1.0).abs() * 100.0
    }
}

/// Inference-mode predictions for every point of `ds`; one forward pass
/// per component.
pub fn predict_dataset(model: &GrappaModel, ds: &VpDataset) -> Result<(Vec<EvalPoint>, BTreeMap<String, AntoineParams>)> {
    let comps = ds.components();
    let mut graphs = Vec::with_capacity(comps.len());
    for idx in comps.values() {
        graphs.push(graph_from_smiles(&ds.points[idx[0]].smiles)?);
    }
    let refs: Vec<_> = graphs.iter().collect();
    let params = if refs.is_empty() { Vec::new() } else { model.predict_graphs(&refs)? };
    let mut out = Vec::with_capacity(ds.len());
    let mut by_id = BTreeMap::new();
    for ((id, idx), (g, p)) in comps.iter().zip(graphs.iter().zip(&params)) {
        by_id.insert(id.to_string(), *p);
        for &i in idx {
            let pt = &ds.points[i];
            out.push(EvalPoint {
                component_id: id.to_string(),
                temperature_k: pt.temperature_k,
                p_exp_pa: pt.pressure_pa,
                ln_p_exp: (pt.pressure_pa / PA_PER_KPA).ln(),
                ln_p_pred: p.ln_vapor_pressure_floored(pt.temperature_k),
                mol_weight: g.mol_weight,
            });
        }
    }
    Ok((out, by_id))
}

/// MAPE_C over components with at least `min_k` points.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentFilterScore {
    pub min_k: usize,
    pub components: usize,
    pub mape_c: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentScore {
    pub component_id: String,
    pub k: usize,
    pub ape_c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub points: usize,
    pub components: usize,
    /// On `ln(p/kPa)`.
    pub mae: f64,
    pub mse: f64,
    pub mape_i: f64,
    pub mape_c: Vec<ComponentFilterScore>,
}

pub const DEFAULT_K_FILTERS: [usize; 3] = [1, 2, 5];

/// Per-component mean APE and point count, ordered by id.
pub fn component_scores(points: &[EvalPoint]) -> Vec<ComponentScore> {
    let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for p in points {
        groups.entry(&p.component_id).or_default().push(p.ape());
    }
    groups
        .into_iter()
        .map(|(id, apes)| ComponentScore {
            component_id: id.to_string(),
            k: apes.len(),
            ape_c: apes.iter().sum::<f64>() / apes.len() as f64,
        })
        .collect()
}

pub fn summarize(points: &[EvalPoint], k_filters: &[usize]) -> Result<EvalReport> {
    if points.is_empty() {
        return Err(MetricError::Empty);
    }
    let n = points.len() as f64;
    let resid: Vec<f64> = points.iter().map(|p| p.ln_p_pred - p.ln_p_exp).collect();
    let apes: Vec<f64> = points.iter().map(EvalPoint::ape).collect();
    let comps = component_scores(points);
    let mape_c = k_filters
        .iter()
        .map(|&min_k| {
            let sel: Vec<f64> = comps.iter().filter(|c| c.k >= min_k).map(|c| c.ape_c).collect();
            ComponentFilterScore { min_k, components: sel.len(), mape_c: median(&sel) }
        })
        .collect();
    Ok(EvalReport {
        points: points.len(),
        components: comps.len(),
        mae: resid.iter().map(|r| r.abs()).sum::<f64>() / n,
        mse: resid.iter().map(|r| r * r).sum::<f64>() / n,
        mape_i: median(&apes).expect("non-empty"),
        mape_c,
    })
}

/// Median APE of points given as `(pred_ln_p, exp_ln_p)`.
pub fn mape_i_from_ln(pred: &[f64], exp: &[f64]) -> Option<f64> {
    let apes: Vec<f64> = pred.iter().zip(exp).map(|(p, e)| ((p - e).exp() - 1.0).abs() * 100.0).collect();
    median(&apes)
}

/// Bin edges; each list is ascending and bins are `[e_k, e_{k+1})`, the
/// last one closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BinSpec {
    #[serde(rename = "pressure_edges_Pa")]
    pub pressure_edges_pa: Vec<f64>,
    #[serde(rename = "temperature_edges_K")]
    pub temperature_edges_k: Vec<f64>,
    pub mol_weight_edges: Vec<f64>,
    pub min_points: Vec<usize>,
    #[serde(rename = "hex_temperature_K")]
    pub hex_temperature_k: f64,
    pub hex_ln_p: f64,
    /// Display clip for per-cell MAPE_i, percent.
    pub hex_clip: f64,
}

impl Default for BinSpec {
    fn default() -> Self {
        Self {
            pressure_edges_pa: (0..=7).map(|k| 10f64.powi(k)).collect(),
            temperature_edges_k: (0..=7).map(|k| 250.0 + 50.0 * k as f64).collect(),
            mol_weight_edges: vec![0.0, 100.0, 150.0, 200.0, 250.0, 300.0, 400.0, 1000.0],
            min_points: vec![1, 2, 3, 5, 10, 20],
            hex_temperature_k: 25.0,
            hex_ln_p: 1.0,
            hex_clip: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinRow {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    /// Share of all binned samples in this bin.
    pub percent: f64,
    pub stats: Option<BoxStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MinPointsRow {
    pub min_k: usize,
    pub components: usize,
    pub stats: Option<BoxStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HexCell {
    #[serde(rename = "T_center")]
    pub t_center: f64,
    pub lnp_center: f64,
    #[serde(rename = "MAPE_i")]
    pub mape_i: f64,
    /// `mape_i` clipped for display.
    #[serde(rename = "MAPE_i_clipped")]
    pub mape_i_clipped: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinnedReport {
    pub pressure: Vec<BinRow>,
    pub temperature: Vec<BinRow>,
    pub mol_weight: Vec<BinRow>,
    pub min_points: Vec<MinPointsRow>,
    pub hexbin: Vec<HexCell>,
}

/// Index of the bin holding `x`, `None` outside the edges.
pub fn bin_index(edges: &[f64], x: f64) -> Option<usize> {
    if edges.len() < 2 || x < edges[0] || x > edges[edges.len() - 1] {
        return None;
    }
    let k = edges.partition_point(|&e| e <= x);
    Some(k.saturating_sub(1).min(edges.len() - 2))
}

fn bin_rows(edges: &[f64], samples: impl Iterator<Item = (f64, f64)>) -> Vec<BinRow> {
    let nbins = edges.len().saturating_sub(1);
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); nbins];
    for (key, value) in samples {
        if let Some(b) = bin_index(edges, key) {
            buckets[b].push(value);
        }
    }
    let total: usize = buckets.iter().map(Vec::len).sum();
    buckets
        .iter()
        .enumerate()
        .map(|(b, v)| BinRow {
            lo: edges[b],
            hi: edges[b + 1],
            n: v.len(),
            percent: if total == 0 { 0.0 } else { 100.0 * v.len() as f64 / total as f64 },
            stats: BoxStats::of(v),
        })
        .collect()
}

/// Rectangular bins in `(T, ln p)` keyed by cell centre.
pub fn hexbin(points: &[EvalPoint], t_size: f64, lnp_size: f64, clip: f64) -> Vec<HexCell> {
    let mut cells: BTreeMap<(i64, i64), Vec<f64>> = BTreeMap::new();
    for p in points {
        let key = ((p.temperature_k / t_size).floor() as i64, (p.ln_p_exp / lnp_size).floor() as i64);
        cells.entry(key).or_default().push(p.ape());
    }
    cells
        .into_iter()
        .map(|((i, j), apes)| {
            let m = median(&apes).expect("non-empty cell");
            HexCell {
                t_center: (i as f64 + 0.5) * t_size,
                lnp_center: (j as f64 + 0.5) * lnp_size,
                mape_i: m,
                mape_i_clipped: m.min(clip),
                count: apes.len(),
            }
        })
        .collect()
}

pub fn binned_reports(points: &[EvalPoint], spec: &BinSpec) -> BinnedReport {
    let comps = component_scores(points);
    BinnedReport {
        pressure: bin_rows(&spec.pressure_edges_pa, points.iter().map(|p| (p.p_exp_pa, p.ape()))),
        temperature: bin_rows(&spec.temperature_edges_k, points.iter().map(|p| (p.temperature_k, p.ape()))),
        mol_weight: bin_rows(&spec.mol_weight_edges, points.iter().map(|p| (p.mol_weight, p.ape()))),
        min_points: spec
            .min_points
            .iter()
            .map(|&m| {
                let sel: Vec<f64> = comps.iter().filter(|c| c.k >= m).map(|c| c.ape_c).collect();
                MinPointsRow { min_k: m, components: sel.len(), stats: BoxStats::of(&sel) }
            })
            .collect(),
        hexbin: hexbin(points, spec.hex_temperature_k, spec.hex_ln_p, spec.hex_clip),
    }
}

pub fn write_hexbin_csv(cells: &[HexCell], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["T_center", "lnp_center", "MAPE_i", "count"])?;
    for c in cells {
        w.write_record([c.t_center.to_string(), c.lnp_center.to_string(), c.mape_i.to_string(), c.count.to_string()])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Box tables flattened to CSV: `table, lo, hi, n, percent, q1, median, q3, whisker_lo, whisker_hi`.
pub fn write_bins_csv(report: &BinnedReport, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["table", "lo", "hi", "n", "percent", "min", "q1", "median", "q3", "max", "whisker_lo", "whisker_hi"])?;
    let stats_fields = |s: &Option<BoxStats>| -> Vec<String> {
        match s {
            Some(s) => [s.min, s.q1, s.median, s.q3, s.max, s.whisker_lo, s.whisker_hi].iter().map(f64::to_string).collect(),
            None => vec![String::new(); 7],
        }
    };
    for (name, rows) in [("pressure_Pa", &report.pressure), ("temperature_K", &report.temperature), ("mol_weight", &report.mol_weight)] {
        for r in rows {
            let mut rec = vec![name.to_string(), r.lo.to_string(), r.hi.to_string(), r.n.to_string(), r.percent.to_string()];
            rec.extend(stats_fields(&r.stats));
            w.write_record(&rec)?;
        }
    }
    for r in &report.min_points {
        let mut rec = vec!["min_points".to_string(), r.min_k.to_string(), String::new(), r.components.to_string(), String::new()];
        rec.extend(stats_fields(&r.stats));
        w.write_record(&rec)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoilingPoint {
    pub component_id: String,
    #[serde(rename = "pressure_Pa")]
    pub pressure_pa: f64,
    #[serde(rename = "T_exp_K")]
    pub t_exp: f64,
    #[serde(rename = "T_pred_K")]
    pub t_pred: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoilingReport {
    pub components: Vec<BoilingPoint>,
    /// Over components with a prediction.
    #[serde(rename = "mae_K")]
    pub mae_k: Option<f64>,
    pub mean_relative_percent: Option<f64>,
}

/// Normal-boiling-point check: per component with at least two points in
/// `ds`, average the points with `p ∈ [99, 102]` kPa and compare the
/// measured temperature with the one implied by `params` at the mean
/// pressure.
pub fn boiling_point_eval(ds: &VpDataset, params: &BTreeMap<String, AntoineParams>) -> BoilingReport {
    let mut rows = Vec::new();
    for (id, idx) in ds.components() {
        if idx.len() < 2 {
            continue;
        }
        let near: Vec<_> = idx.iter().map(|&i| &ds.points[i]).filter(|p| (99_000.0..=102_000.0).contains(&p.pressure_pa)).collect();
        if near.is_empty() {
            continue;
        }
        let k = near.len() as f64;
        let p = near.iter().map(|p| p.pressure_pa).sum::<f64>() / k;
        let t = near.iter().map(|p| p.temperature_k).sum::<f64>() / k;
        let t_pred = params.get(id).and_then(|a| a.boiling_temperature(p).ok());
        rows.push(BoilingPoint { component_id: id.to_string(), pressure_pa: p, t_exp: t, t_pred });
    }
    let errs: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.t_pred.map(|tp| (tp - r.t_exp, r.t_exp))).collect();
    let n = errs.len() as f64;
    BoilingReport {
        mae_k: (!errs.is_empty()).then(|| errs.iter().map(|(e, _)| e.abs()).sum::<f64>() / n),
        mean_relative_percent: (!errs.is_empty()).then(|| errs.iter().map(|(e, t)| 100.0 * e.abs() / t).sum::<f64>() / n),
        components: rows,
    }
}
