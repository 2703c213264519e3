//! Vapor-pressure datasets: loading, curation, component-wise splitting.

mod fit;
pub mod synthetic;

pub use fit::{robust_antoine_fit, FitError, FitOptions, FitResult};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::molgraph::{featurize, parse_smiles, validate_scope, FeaturizeError, Molecule, ScopeDecision};

pub const REQUIRED_COLUMNS: [&str; 5] = ["component_id", "smiles", "temperature_K", "pressure_Pa", "quality"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("missing required columns: {}", .0.join(", "))]
    MissingColumns(Vec<String>),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("split ratios {0:?} must be non-negative and sum to 1")]
    Ratios([f64; 3]),
    #[error("component {component}: {message}")]
    Component { component: String, message: String },
    #[error("split file line {line}: {message}")]
    SplitFile { line: usize, message: String },
    #[error("unknown data format '{0}' (expected csv or jsonl)")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    #[default]
    Ok,
    Poor,
}

impl std::str::FromStr for Quality {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ok" => Ok(Self::Ok),
            "poor" => Ok(Self::Poor),
            other => Err(format!("quality must be ok or poor, got '{other}'")),
        }
    }
}

/// One measured `(T, p)` pair of a pure component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VpPoint {
    pub component_id: String,
    pub smiles: String,
    #[serde(rename = "temperature_K")]
    pub temperature_k: f64,
    #[serde(rename = "pressure_Pa")]
    pub pressure_pa: f64,
    #[serde(default)]
    pub quality: Quality,
    /// Curator's verdict on whether the SMILES carries the right isomer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stereo_ok: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    /// Line in the originating file, 0 when unknown.
    #[serde(skip)]
    pub line: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
    #[default]
    Unassigned,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Valid => "valid",
            Self::Test => "test",
            Self::Unassigned => "unassigned",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "train" => Ok(Self::Train),
            "valid" => Ok(Self::Valid),
            "test" => Ok(Self::Test),
            "unassigned" => Ok(Self::Unassigned),
            other => Err(format!("unknown split '{other}'")),
        }
    }
}

/// Points plus a split label per component.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VpDataset {
    pub points: Vec<VpPoint>,
    pub splits: BTreeMap<String, Split>,
}

impl VpDataset {
    pub fn new(points: Vec<VpPoint>) -> Self {
        Self { points, splits: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Point indices per component, ordered by id.
    pub fn components(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut out: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, p) in self.points.iter().enumerate() {
            out.entry(p.component_id.as_str()).or_default().push(i);
        }
        out
    }

    pub fn component_ids(&self) -> Vec<String> {
        self.components().keys().map(|k| k.to_string()).collect()
    }

    pub fn split_of(&self, component: &str) -> Split {
        self.splits.get(component).copied().unwrap_or_default()
    }

    /// Points whose component carries `split`.
    pub fn subset(&self, split: Split) -> VpDataset {
        self.filter_components(|c| self.split_of(c) == split)
    }

    pub fn filter_components(&self, keep: impl Fn(&str) -> bool) -> VpDataset {
        let points: Vec<VpPoint> = self.points.iter().filter(|p| keep(&p.component_id)).cloned().collect();
        let ids: BTreeSet<&str> = points.iter().map(|p| p.component_id.as_str()).collect();
        let splits = self.splits.iter().filter(|(k, _)| ids.contains(k.as_str())).map(|(k, v)| (k.clone(), *v)).collect();
        VpDataset { points, splits }
    }

    pub fn smiles_of(&self, component: &str) -> Option<&str> {
        self.points.iter().find(|p| p.component_id == component).map(|p| p.smiles.as_str())
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(REQUIRED_COLUMNS.iter().chain(&["stereo_ok", "source"]))?;
        for p in &self.points {
            let quality = match p.quality {
                Quality::Ok => "ok",
                Quality::Poor => "poor",
            };
            w.write_record([
                p.component_id.clone(),
                p.smiles.clone(),
                format!("{}", p.temperature_k),
                format!("{}", p.pressure_pa),
                quality.to_string(),
                p.stereo_ok.map(|b| b.to_string()).unwrap_or_default(),
                p.source.clone().unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(io_err(path))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Jsonl,
}

impl Format {
    /// Guesses from the file extension; CSV otherwise.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("ndjson") => Self::Jsonl,
            _ => Self::Csv,
        }
    }
}

impl std::str::FromStr for Format {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "jsonl" => Ok(Self::Jsonl),
            other => Err(DataError::Format(other.into())),
        }
    }
}

/// A row that could not become a [`VpPoint`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RejectedRow {
    pub line: usize,
    pub reason: String,
}

pub fn load(path: &Path, format: Format) -> Result<(VpDataset, Vec<RejectedRow>)> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    load_str(&text, format)
}

pub fn load_str(text: &str, format: Format) -> Result<(VpDataset, Vec<RejectedRow>)> {
    let (points, mut rejects) = match format {
        Format::Csv => parse_csv(text)?,
        Format::Jsonl => parse_jsonl(text),
    };
    // one SMILES per component
    let mut first: HashMap<String, String> = HashMap::new();
    let mut kept = Vec::with_capacity(points.len());
    for p in points {
        match first.get(&p.component_id) {
            Some(s) if *s != p.smiles => rejects
                .push(RejectedRow { line: p.line, reason: format!("SMILES differs from earlier rows of component '{}'", p.component_id) }),
            _ => {
                first.entry(p.component_id.clone()).or_insert_with(|| p.smiles.clone());
                kept.push(p);
            }
        }
    }
    rejects.sort_by_key(|r| r.line);
    Ok((VpDataset::new(kept), rejects))
}

fn check_point(p: &VpPoint) -> std::result::Result<(), String> {
    if p.component_id.trim().is_empty() {
        return Err("empty component_id".into());
    }
    if p.smiles.trim().is_empty() {
        return Err("empty smiles".into());
    }
    if !(p.temperature_k.is_finite() && p.temperature_k > 0.0) {
        return Err(format!("temperature must be positive, got {}", p.temperature_k));
    }
    if !(p.pressure_pa.is_finite() && p.pressure_pa > 0.0) {
        return Err(format!("pressure must be positive, got {}", p.pressure_pa));
    }
    Ok(())
}

fn parse_csv(text: &str) -> Result<(Vec<VpPoint>, Vec<RejectedRow>)> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let missing: Vec<String> = REQUIRED_COLUMNS.iter().filter(|c| col(c).is_none()).map(|c| c.to_string()).collect();
    if !missing.is_empty() {
        return Err(DataError::MissingColumns(missing));
    }
    let idx: Vec<usize> = REQUIRED_COLUMNS.iter().map(|c| col(c).expect("checked")).collect();
    let (stereo_col, source_col) = (col("stereo_ok"), col("source"));
    let mut points = Vec::new();
    let mut rejects = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        let parsed = (|| -> std::result::Result<VpPoint, String> {
            if idx.iter().any(|&i| rec.get(i).is_none()) {
                return Err("row has fewer fields than the header".into());
            }
            let num = |i: usize, what: &str| field(i).parse::<f64>().map_err(|_| format!("{what} is not a number: '{}'", field(i)));
            let stereo_ok = match stereo_col.map(field).unwrap_or("") {
                "" => None,
                s => Some(s.to_ascii_lowercase().parse::<bool>().map_err(|_| format!("stereo_ok must be true or false, got '{s}'"))?),
            };
            let p = VpPoint {
                component_id: field(idx[0]).to_string(),
                smiles: field(idx[1]).to_string(),
                temperature_k: num(idx[2], "temperature_K")?,
                pressure_pa: num(idx[3], "pressure_Pa")?,
                quality: field(idx[4]).parse()?,
                stereo_ok,
                source: source_col.map(field).filter(|s| !s.is_empty()).map(String::from),
                line,
            };
            check_point(&p)?;
            Ok(p)
        })();
        match parsed {
            Ok(p) => points.push(p),
            Err(reason) => rejects.push(RejectedRow { line, reason }),
        }
    }
    Ok((points, rejects))
}

fn parse_jsonl(text: &str) -> (Vec<VpPoint>, Vec<RejectedRow>) {
    let mut points = Vec::new();
    let mut rejects = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<VpPoint>(raw).map_err(|e| e.to_string()).and_then(|mut p| {
            p.line = line;
            check_point(&p).map(|_| p)
        });
        match parsed {
            Ok(p) => points.push(p),
            Err(reason) => rejects.push(RejectedRow { line, reason }),
        }
    }
    (points, rejects)
}

/// Number of carbon atoms, aromatic or aliphatic.
pub fn carbon_count(m: &Molecule) -> usize {
    m.carbon_count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurationConfig {
    pub t_min: f64,
    pub t_max: f64,
    pub p_min: f64,
    pub p_max: f64,
    /// Components with fewer points skip the outlier pass.
    pub min_points_for_fit: usize,
    /// Largest tolerated `|p − p_fit| / p_fit`.
    pub max_rel_deviation: f64,
    /// Per-source fits whose pressures differ by more than this ratio are
    /// reported as conflicting.
    pub conflict_ratio: f64,
    pub fit: FitOptions,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            t_min: 250.0,
            t_max: 600.0,
            p_min: 1.0,
            p_max: 1e7,
            min_points_for_fit: 5,
            max_rel_deviation: 0.5,
            conflict_ratio: 1.5,
            fit: FitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Scope,
    Quality,
    Temperature,
    Pressure,
    Stereo,
    Outlier,
    FitFailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Drop,
    SkipOutlierPass,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditEntry {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub row: Option<usize>,
    pub component_id: String,
    pub rule: Rule,
    pub action: Action,
    #[serde(rename = "temperature_K", skip_serializing_if = "Option::is_none")]
    pub temperature_k: Option<f64>,
    #[serde(rename = "pressure_Pa", skip_serializing_if = "Option::is_none")]
    pub pressure_pa: Option<f64>,
    pub detail: String,
}

impl AuditEntry {
    fn point(p: &VpPoint, rule: Rule, detail: String) -> Self {
        Self {
            row: (p.line > 0).then_some(p.line),
            component_id: p.component_id.clone(),
            rule,
            action: Action::Drop,
            temperature_k: Some(p.temperature_k),
            pressure_pa: Some(p.pressure_pa),
            detail,
        }
    }
}

/// Two sources of one component whose fitted curves disagree.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Conflict {
    pub component_id: String,
    pub sources: [String; 2],
    /// Largest `max(p₁/p₂, p₂/p₁)` over the component's temperatures.
    pub max_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Curated {
    pub dataset: VpDataset,
    pub audit: Vec<AuditEntry>,
    pub conflicts: Vec<Conflict>,
}

impl Curated {
    pub fn write_audit_jsonl(&self, mut out: impl Write) -> Result<()> {
        for e in &self.audit {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n").map_err(|e| DataError::Io { path: PathBuf::from("<audit>"), source: e })?;
        }
        Ok(())
    }
}

fn scope_verdict(smiles: &str) -> std::result::Result<(), String> {
    let m = parse_smiles(smiles).map_err(|e| format!("unparsable SMILES: {e}"))?;
    if let ScopeDecision::Reject(reasons) = validate_scope(&m) {
        return Err(reasons.iter().map(ToString::to_string).collect::<Vec<_>>().join(", "));
    }
    featurize(&m).map(|_| ()).map_err(|e: FeaturizeError| e.to_string())
}

fn fit_points(points: &[&VpPoint], opt: &FitOptions) -> std::result::Result<FitResult, FitError> {
    let tp: Vec<(f64, f64)> = points.iter().map(|p| (p.temperature_k, p.pressure_pa)).collect();
    robust_antoine_fit(&tp, opt)
}

/// Applies the point rules, then robust-fit outlier removal on every
/// component with enough points, repeated until nothing more is dropped.
pub fn curate(ds: &VpDataset, cfg: &CurationConfig) -> Curated {
    let mut audit = Vec::new();
    let mut verdicts: HashMap<&str, std::result::Result<(), String>> = HashMap::new();
    let mut kept: Vec<VpPoint> = Vec::new();
    for p in &ds.points {
        let verdict = verdicts.entry(p.smiles.as_str()).or_insert_with(|| scope_verdict(&p.smiles));
        let failure = if let Err(why) = verdict {
            Some((Rule::Scope, why.clone()))
        } else if p.quality == Quality::Poor {
            Some((Rule::Quality, "marked poor".to_string()))
        } else if p.stereo_ok == Some(false) {
            Some((Rule::Stereo, "isomer not represented by the SMILES".to_string()))
        } else if !(cfg.t_min..=cfg.t_max).contains(&p.temperature_k) {
            Some((Rule::Temperature, format!("T outside [{}, {}] K", cfg.t_min, cfg.t_max)))
        } else if !(cfg.p_min..=cfg.p_max).contains(&p.pressure_pa) {
            Some((Rule::Pressure, format!("p outside [{}, {}] Pa", cfg.p_min, cfg.p_max)))
        } else {
            None
        };
        match failure {
            Some((rule, detail)) => audit.push(AuditEntry::point(p, rule, detail)),
            None => kept.push(p.clone()),
        }
    }

    let mut drop = vec![false; kept.len()];
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in kept.iter().enumerate() {
        groups.entry(p.component_id.as_str()).or_default().push(i);
    }
    for (component, mut members) in groups {
        while members.len() >= cfg.min_points_for_fit {
            let pts: Vec<&VpPoint> = members.iter().map(|&i| &kept[i]).collect();
            let fit = match fit_points(&pts, &cfg.fit) {
                Ok(f) if f.converged => f,
                other => {
                    let detail = match other {
                        Ok(f) => format!("robust fit did not converge in {} iterations", f.iterations),
                        Err(e) => e.to_string(),
                    };
                    audit.push(AuditEntry {
                        row: None,
                        component_id: component.to_string(),
                        rule: Rule::FitFailed,
                        action: Action::SkipOutlierPass,
                        temperature_k: None,
                        pressure_pa: None,
                        detail,
                    });
                    break;
                }
            };
            let dev = fit.relative_deviations();
            let before = members.len();
            let mut survivors = Vec::with_capacity(before);
            for (&i, &d) in members.iter().zip(&dev) {
                if d > cfg.max_rel_deviation {
                    drop[i] = true;
                    let detail = format!("{:.1}% from fit A={:.6} B={:.4} C={:.4}", 100.0 * d, fit.params.a, fit.params.b, fit.params.c);
                    audit.push(AuditEntry::point(&kept[i], Rule::Outlier, detail));
                } else {
                    survivors.push(i);
                }
            }
            if survivors.len() == before {
                break;
            }
            members = survivors;
        }
    }
    let points: Vec<VpPoint> = kept.into_iter().zip(drop).filter(|(_, d)| !d).map(|(p, _)| p).collect();
    let mut dataset = VpDataset::new(points);
    let ids: BTreeSet<String> = dataset.points.iter().map(|p| p.component_id.clone()).collect();
    dataset.splits = ds.splits.iter().filter(|(k, _)| ids.contains(*k)).map(|(k, v)| (k.clone(), *v)).collect();
    let conflicts = find_conflicts(&dataset, cfg);
    Curated { dataset, audit, conflicts }
}

fn find_conflicts(ds: &VpDataset, cfg: &CurationConfig) -> Vec<Conflict> {
    let mut out = Vec::new();
    for (component, idx) in ds.components() {
        let mut by_source: BTreeMap<&str, Vec<&VpPoint>> = BTreeMap::new();
        for &i in &idx {
            if let Some(s) = &ds.points[i].source {
                by_source.entry(s.as_str()).or_default().push(&ds.points[i]);
            }
        }
        let fits: Vec<(&str, FitResult)> =
            by_source.into_iter().filter_map(|(s, pts)| fit_points(&pts, &cfg.fit).ok().map(|f| (s, f))).collect();
        for (a, (sa, fa)) in fits.iter().enumerate() {
            for (sb, fb) in &fits[a + 1..] {
                let worst = idx
                    .iter()
                    .filter_map(|&i| {
                        let t = ds.points[i].temperature_k;
                        let pa = fa.params.vapor_pressure_pa(t).ok()?;
                        let pb = fb.params.vapor_pressure_pa(t).ok()?;
                        Some((pa / pb).max(pb / pa))
                    })
                    .fold(1.0, f64::max);
                if worst > cfg.conflict_ratio {
                    out.push(Conflict { component_id: component.to_string(), sources: [sa.to_string(), sb.to_string()], max_ratio: worst });
                }
            }
        }
    }
    out
}

/// Labels every component. Components with fewer than five carbons go to
/// training; the rest are shuffled with `seed` and cut by `ratios`
/// (largest-remainder rounding).
pub fn split(ds: &VpDataset, seed: u64, ratios: [f64; 3]) -> Result<VpDataset> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::Ratios(ratios));
    }
    let mut small = Vec::new();
    let mut rest = Vec::new();
    for id in ds.component_ids() {
        let smiles = ds.smiles_of(&id).expect("component has points");
        let m = parse_smiles(smiles).map_err(|e| DataError::Component { component: id.clone(), message: e.to_string() })?;
        if carbon_count(&m) < 5 {
            small.push(id);
        } else {
            rest.push(id);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rest.shuffle(&mut rng);
    let counts = largest_remainder(rest.len(), ratios);
    let mut out = ds.clone();
    out.splits.clear();
    for id in small {
        out.splits.insert(id, Split::Train);
    }
    let labels = [Split::Train, Split::Valid, Split::Test];
    let mut it = rest.into_iter();
    for (label, n) in labels.iter().zip(counts) {
        for id in it.by_ref().take(n) {
            out.splits.insert(id, *label);
        }
    }
    Ok(out)
}

fn largest_remainder(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    for k in 0..3 {
        counts[k] = exact[k].floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = n - counts.iter().sum::<usize>();
    for k in order {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    counts
}

pub fn write_split_csv(ds: &VpDataset, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["component_id", "split"])?;
    for id in ds.component_ids() {
        w.write_record([id.as_str(), &ds.split_of(&id).to_string()])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Reads `component_id,split` rows into a label map.
pub fn read_split_csv(text: &str) -> Result<BTreeMap<String, Split>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let (Some(id), Some(s)) = (rec.get(0), rec.get(1)) else {
            return Err(DataError::SplitFile { line, message: "expected component_id,split".into() });
        };
        let split = s.parse().map_err(|message| DataError::SplitFile { line, message })?;
        out.insert(id.trim().to_string(), split);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::antoine::AntoineParams;

    const HEADER: &str = "component_id,smiles,temperature_K,pressure_Pa,quality\n";

    fn point(id: &str, smiles: &str, t: f64, p: f64) -> VpPoint {
        VpPoint {
            component_id: id.into(),
            smiles: smiles.into(),
            temperature_k: t,
            pressure_pa: p,
            quality: Quality::Ok,
            stereo_ok: None,
            source: None,
            line: 0,
        }
    }

    fn curve(id: &str, smiles: &str, params: AntoineParams, temps: &[f64]) -> Vec<VpPoint> {
        temps.iter().map(|&t| point(id, smiles, t, params.vapor_pressure_pa(t).unwrap())).collect()
    }

    #[test]
    fn load_empty_and_single_row() {
        let (ds, rej) = load_str(HEADER, Format::Csv).unwrap();
        assert!(ds.is_empty() && rej.is_empty());
        let (ds, rej) = load_str(&format!("{HEADER}c1,CCO,300,8000,ok\n"), Format::Csv).unwrap();
        assert_eq!(ds.len(), 1);
        assert!(rej.is_empty());
        assert_eq!(ds.points[0].line, 2);
        assert_eq!(ds.points[0].pressure_pa, 8000.0);
    }

    #[test]
    fn load_rejects_bad_rows_with_line_numbers() {
        let text = format!("{HEADER}c1,CCO,300,8000,ok\nc1,CCO,310,-5,ok\nc2,CC,abc,1,ok\nc1,CCC,320,9000,ok\nc3,C,300,1,meh\n");
        let (ds, rej) = load_str(&text, Format::Csv).unwrap();
        assert_eq!(ds.len(), 1);
        let lines: Vec<usize> = rej.iter().map(|r| r.line).collect();
        assert_eq!(lines, vec![3, 4, 5, 6]);
        assert!(rej[0].reason.contains("pressure"));
    }

    #[test]
    fn load_reports_missing_columns() {
        let err = load_str("component_id,smiles,temperature_K\n", Format::Csv).unwrap_err();
        match err {
            DataError::MissingColumns(c) => assert_eq!(c, vec!["pressure_Pa", "quality"]),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let text = "{\"component_id\":\"a\",\"smiles\":\"CCO\",\"temperature_K\":300,\"pressure_Pa\":1000,\"quality\":\"ok\"}\n\n{\"component_id\":\"a\"}\n";
        let (ds, rej) = load_str(text, Format::Jsonl).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(rej.len(), 1);
        assert_eq!(rej[0].line, 3);
    }

    #[test]
    fn csv_write_then_load_is_identity() {
        let mut pts = curve("x", "CCCCCO", AntoineParams::new(14.0, 4000.0, -80.0), &[350.0, 370.0]);
        pts[1].source = Some("lab".into());
        pts[0].stereo_ok = Some(true);
        let ds = VpDataset::new(pts);
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let (back, rej) = load_str(std::str::from_utf8(&buf).unwrap(), Format::Csv).unwrap();
        assert!(rej.is_empty());
        for (a, b) in back.points.iter().zip(&ds.points) {
            assert_eq!((a.temperature_k, a.pressure_pa, &a.source, a.stereo_ok), (b.temperature_k, b.pressure_pa, &b.source, b.stereo_ok));
        }
    }

    #[test]
    fn point_rules() {
        let pts = vec![
            point("a", "CCCCC", 200.0, 1000.0),
            point("a", "CCCCC", 300.0, 0.5),
            point("a", "CCCCC", 300.0, 2e7),
            point("a", "CCCCC", 300.0, 1000.0),
            VpPoint { quality: Quality::Poor, ..point("a", "CCCCC", 310.0, 1000.0) },
            VpPoint { stereo_ok: Some(false), ..point("a", "CCCCC", 320.0, 1000.0) },
            point("b", "[Na+].[Cl-]", 300.0, 1000.0),
        ];
        let c = curate(&VpDataset::new(pts), &CurationConfig::default());
        let rules: Vec<Rule> = c.audit.iter().map(|e| e.rule).collect();
        assert_eq!(rules, vec![Rule::Temperature, Rule::Pressure, Rule::Pressure, Rule::Quality, Rule::Stereo, Rule::Scope]);
        assert_eq!(c.dataset.len(), 1);
    }

    #[test]
    fn injected_outlier_is_the_only_drop() {
        let truth = AntoineParams::new(10.0, 2000.0, -50.0);
        let temps: Vec<f64> = (0..9).map(|k| 260.0 + 15.0 * k as f64).collect();
        let mut pts = curve("c", "CCCCCC", truth, &temps);
        let mut bad = point("c", "CCCCCC", 327.5, 2.0 * truth.vapor_pressure_pa(327.5).unwrap());
        bad.line = 99;
        pts.push(bad);
        let c = curate(&VpDataset::new(pts), &CurationConfig::default());
        assert_eq!(c.dataset.len(), 9);
        assert_eq!(c.audit.len(), 1);
        assert_eq!((c.audit[0].rule, c.audit[0].row), (Rule::Outlier, Some(99)));
    }

    #[test]
    fn small_components_skip_the_outlier_pass() {
        let truth = AntoineParams::new(10.0, 2000.0, -50.0);
        let mut pts = curve("c", "CCCCCC", truth, &[260.0, 280.0, 300.0]);
        pts.push(point("c", "CCCCCC", 290.0, 5.0 * truth.vapor_pressure_pa(290.0).unwrap()));
        let c = curate(&VpDataset::new(pts), &CurationConfig::default());
        assert_eq!(c.dataset.len(), 4);
        assert!(c.audit.is_empty());
    }

    #[test]
    fn curation_is_idempotent() {
        let truth = AntoineParams::new(12.0, 3000.0, -60.0);
        let temps: Vec<f64> = (0..8).map(|k| 300.0 + 20.0 * k as f64).collect();
        let mut pts = curve("c", "CCCCCCC", truth, &temps);
        pts[2].pressure_pa *= 3.0;
        pts[5].pressure_pa *= 0.45;
        pts.push(point("d", "CCO", 240.0, 1000.0));
        let cfg = CurationConfig::default();
        let once = curate(&VpDataset::new(pts), &cfg);
        let twice = curate(&once.dataset, &cfg);
        assert_eq!(once.dataset, twice.dataset);
        assert!(twice.audit.is_empty());
    }

    #[test]
    fn conflicting_sources_are_reported() {
        let temps = [300.0, 320.0, 340.0, 360.0];
        let mut pts = curve("c", "CCCCCC", AntoineParams::new(12.0, 3000.0, -60.0), &temps);
        pts.iter_mut().for_each(|p| p.source = Some("s1".into()));
        let mut other = curve("c", "CCCCCC", AntoineParams::new(13.0, 3000.0, -60.0), &temps);
        other.iter_mut().for_each(|p| p.source = Some("s2".into()));
        pts.extend(other);
        let cfg = CurationConfig { min_points_for_fit: 100, ..CurationConfig::default() };
        let c = curate(&VpDataset::new(pts), &cfg);
        assert_eq!(c.conflicts.len(), 1);
        assert!((c.conflicts[0].max_ratio - 1f64.exp()).abs() < 1e-3);
    }

    #[test]
    fn carbon_counts() {
        for (s, n) in [("CCO", 2), ("c1ccccc1", 6), ("O=C(O)C", 2)] {
            assert_eq!(carbon_count(&parse_smiles(s).unwrap()), n);
        }
    }

    fn split_fixture() -> VpDataset {
        let mut pts = Vec::new();
        for s in ["C", "CC", "CCC", "CCCC"] {
            pts.push(point(s, s, 300.0, 1000.0));
        }
        for n in 5..25 {
            let s = "C".repeat(n);
            pts.push(point(&format!("n{n:02}"), &s, 300.0, 1000.0));
        }
        VpDataset::new(pts)
    }

    #[test]
    fn split_rules() {
        let ds = split_fixture();
        for seed in [0, 1, 99] {
            let s = split(&ds, seed, [0.8, 0.1, 0.1]).unwrap();
            for small in ["C", "CC", "CCC", "CCCC"] {
                assert_eq!(s.split_of(small), Split::Train);
            }
            assert_eq!(s.splits.len(), 24);
            let count = |l: Split| s.splits.iter().filter(|(k, v)| k.starts_with('n') && **v == l).count();
            assert_eq!((count(Split::Train), count(Split::Valid), count(Split::Test)), (16, 2, 2));
        }
        assert_eq!(split(&ds, 5, [0.8, 0.1, 0.1]).unwrap(), split(&ds, 5, [0.8, 0.1, 0.1]).unwrap());
        assert_ne!(split(&ds, 5, [0.8, 0.1, 0.1]).unwrap().splits, split(&ds, 6, [0.8, 0.1, 0.1]).unwrap().splits);
        assert!(matches!(split(&ds, 0, [0.8, 0.1, 0.2]), Err(DataError::Ratios(_))));
    }

    #[test]
    fn split_file_round_trip() {
        let s = split(&split_fixture(), 3, [0.8, 0.1, 0.1]).unwrap();
        let mut buf = Vec::new();
        write_split_csv(&s, &mut buf).unwrap();
        assert_eq!(read_split_csv(std::str::from_utf8(&buf).unwrap()).unwrap(), s.splits);
        assert!(read_split_csv("component_id,split\na,nowhere\n").is_err());
    }

    #[test]
    fn largest_remainder_sums_to_n() {
        for n in 0..50 {
            let c = largest_remainder(n, [0.8, 0.1, 0.1]);
            assert_eq!(c.iter().sum::<usize>(), n);
            for (k, r) in [0.8, 0.1, 0.1].iter().enumerate() {
                assert!((c[k] as f64 - r * n as f64).abs() <= 1.0);
            }
        }
    }
}
