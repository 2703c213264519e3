//! The full network: SMILES → graph → GATv2 stack → readout → bounded
//! Antoine head, plus JSON checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::antoine::{head_forward, params_row, AntoineError, AntoineParams, BnMode, HeadParams, HeadVars, ParamRanges};
use crate::gnn::{attention_scores, encode, GatLayer, GatLayerVars};
use crate::molgraph::{featurize, parse_smiles, FeaturizeError, MolGraph, ParseError, NODE_FEATURES};
use crate::pooling::{interaction_pool, sum_pool, InteractionPoolParams, InteractionPoolVars, PoolingKind};
use crate::tensor::{BatchStats, Matrix, Tape, TensorError, Var};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Featurize(#[from] FeaturizeError),
    #[error(transparent)]
    Antoine(#[from] AntoineError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Affine rescaling of the donor and acceptor counts before the head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountScaling {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Arch {
    pub gat_layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub pooling: PoolingKind,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub param_ranges: ParamRanges,
    /// Raw counts when `None`.
    pub standardize_counts: Option<CountScaling>,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            gat_layers: 4,
            heads: 2,
            embed_dim: 32,
            pooling: PoolingKind::Interaction,
            hidden_layers: 3,
            hidden_width: 16,
            param_ranges: ParamRanges::default(),
            standardize_counts: None,
        }
    }
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Arch(m.into()));
        if self.gat_layers < 2 {
            return bad("at least 2 GAT layers are required");
        }
        if self.heads == 0 || self.embed_dim == 0 || self.hidden_width == 0 {
            return bad("heads, embed_dim and hidden_width must be positive");
        }
        for r in [self.param_ranges.a, self.param_ranges.b, self.param_ranges.c] {
            if !(r.lo < r.hi) || !r.lo.is_finite() || !r.hi.is_finite() {
                return bad("parameter ranges need finite lo < hi");
            }
        }
        if let Some(s) = self.standardize_counts {
            if s.std.iter().any(|&v| !(v > 0.0)) {
                return bad("count scaling std must be positive");
            }
        }
        Ok(())
    }

    pub fn head_input(&self) -> usize {
        self.embed_dim + 2
    }
}

/// Everything returned by one batched forward pass.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    /// `B × 3` scaled parameters, one row per graph.
    pub params: Var,
    pub raw: Var,
    pub batch_stats: Vec<BatchStats>,
}

#[derive(Debug, Clone)]
pub struct ModelVars {
    pub gat: Vec<GatLayerVars>,
    pub pool: Option<InteractionPoolVars>,
    pub head: HeadVars,
}

/// One row of the parameter accounting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: (usize, usize),
    pub count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Prediction {
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(rename = "temperature_K", skip_serializing_if = "Option::is_none")]
    pub temperature_k: Option<f64>,
    #[serde(rename = "ln_p_kPa", skip_serializing_if = "Option::is_none")]
    pub ln_p_kpa: Option<f64>,
    #[serde(rename = "p_Pa", skip_serializing_if = "Option::is_none")]
    pub p_pa: Option<f64>,
    #[serde(rename = "boiling_temperature_K", skip_serializing_if = "Option::is_none")]
    pub boiling_temperature_k: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrappaModel {
    pub arch: Arch,
    pub gat: Vec<GatLayer>,
    pub pool: Option<InteractionPoolParams>,
    pub head: HeadParams,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    shape: [usize; 2],
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    arch: Arch,
    tensors: BTreeMap<String, TensorRecord>,
}

/// Parses and featurizes one SMILES string.
pub fn graph_from_smiles(smiles: &str) -> Result<MolGraph> {
    Ok(featurize(&parse_smiles(smiles)?)?)
}

impl GrappaModel {
    /// Randomly initialised model; the same `seed` gives the same weights.
    pub fn new(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gat = (0..arch.gat_layers)
            .map(|l| {
                let input = if l == 0 { NODE_FEATURES } else { arch.embed_dim };
                GatLayer::init(input, arch.embed_dim, arch.heads, &mut rng)
            })
            .collect();
        let pool = match arch.pooling {
            PoolingKind::Sum => None,
            PoolingKind::Interaction => Some(InteractionPoolParams::init(arch.embed_dim, &mut rng)),
        };
        let head = HeadParams::init(arch.head_input(), arch.hidden_width, arch.hidden_layers, &mut rng);
        Ok(Self { arch, gat, pool, head })
    }

    /// All-zero weights with the shapes `arch` implies.
    pub fn zeros(arch: Arch) -> Result<Self> {
        arch.validate()?;
        let gat = (0..arch.gat_layers)
            .map(|l| {
                let input = if l == 0 { NODE_FEATURES } else { arch.embed_dim };
                GatLayer::zeros(input, arch.embed_dim, arch.heads)
            })
            .collect();
        let pool = (arch.pooling == PoolingKind::Interaction).then(|| InteractionPoolParams::zeros(arch.embed_dim));
        let head = HeadParams::zeros(arch.head_input(), arch.hidden_width, arch.hidden_layers);
        Ok(Self { arch, gat, pool, head })
    }

    pub fn visit(&self, f: &mut dyn FnMut(String, &Matrix)) {
        for (l, layer) in self.gat.iter().enumerate() {
            layer.visit(&format!("gat.{l}"), f);
        }
        if let Some(p) = &self.pool {
            p.visit(f);
        }
        self.head.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Matrix)) {
        for (l, layer) in self.gat.iter_mut().enumerate() {
            layer.visit_mut(&format!("gat.{l}"), f);
        }
        if let Some(p) = &mut self.pool {
            p.visit_mut(f);
        }
        self.head.visit_mut(f);
    }

    /// Trainable tensors in checkpoint order.
    pub fn parameter_table(&self) -> Vec<ParamEntry> {
        let mut out = Vec::new();
        self.visit(&mut |name, m| out.push(ParamEntry { name, shape: m.shape(), count: m.len() }));
        out
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.parameter_table().iter().map(|e| e.count).sum()
    }

    /// Markdown accounting table grouped by component.
    pub fn parameter_table_markdown(&self) -> String {
        let table = self.parameter_table();
        let group = |name: &str| -> &'static str {
            if name.starts_with("gat.") {
                "message passing"
            } else if name.starts_with("pool.") {
                "pooling"
            } else {
                "head"
            }
        };
        let mut s = String::from("| tensor | shape | parameters |\n|---|---|---:|\n");
        let mut subtotals: Vec<(&str, usize)> = Vec::new();
        for e in &table {
            s += &format!("| `{}` | {} × {} | {} |\n", e.name, e.shape.0, e.shape.1, e.count);
            let g = group(&e.name);
            match subtotals.iter_mut().find(|(k, _)| *k == g) {
                Some((_, n)) => *n += e.count,
                None => subtotals.push((g, e.count)),
            }
        }
        s += "\n| component | parameters |\n|---|---:|\n";
        for (g, n) in &subtotals {
            s += &format!("| {g} | {n} |\n");
        }
        s += &format!("| **total** | **{}** |\n", self.trainable_parameter_count());
        s
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<ModelVars> {
        let gat = self
            .gat
            .iter()
            .enumerate()
            .map(|(l, layer)| layer.bind(tape, &format!("gat.{l}")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let pool = self.pool.as_ref().map(|p| p.bind(tape)).transpose()?;
        let head = self.head.bind(tape)?;
        Ok(ModelVars { gat, pool, head })
    }

    fn counts(&self, g: &MolGraph) -> [f64; 2] {
        let raw = [g.h_donors as f64, g.h_acceptors as f64];
        match self.arch.standardize_counts {
            None => raw,
            Some(s) => [(raw[0] - s.mean[0]) / s.std[0], (raw[1] - s.mean[1]) / s.std[1]],
        }
    }

    /// Molecule embedding `1 × d` for one graph.
    pub fn embed(&self, tape: &mut Tape, vars: &ModelVars, graph: &MolGraph) -> Result<Var> {
        let (x, _) = encode(tape, graph, &vars.gat)?;
        Ok(match (&self.arch.pooling, &vars.pool) {
            (PoolingKind::Interaction, Some(p)) => interaction_pool(tape, x, p)?.0,
            (PoolingKind::Interaction, None) => return Err(ModelError::Arch("interaction pooling without parameters".into())),
            (PoolingKind::Sum, _) => sum_pool(tape, x)?,
        })
    }

    /// Forward pass over a batch; `Train` mode needs at least two graphs.
    pub fn forward(&self, tape: &mut Tape, vars: &ModelVars, graphs: &[&MolGraph], mode: BnMode) -> Result<BatchOutput> {
        if graphs.is_empty() {
            return Err(ModelError::Tensor(TensorError::Invalid("empty batch".into())));
        }
        let mut rows = Vec::with_capacity(graphs.len());
        let mut counts = Vec::with_capacity(graphs.len() * 2);
        for g in graphs {
            rows.push(self.embed(tape, vars, g)?);
            counts.extend(self.counts(g));
        }
        let h = tape.concat_rows(&rows)?;
        let c = tape.constant(Matrix::from_vec(graphs.len(), 2, counts)?)?;
        let input = tape.concat_cols(&[h, c])?;
        let out = head_forward(tape, input, &self.head, &vars.head, &self.arch.param_ranges, mode)?;
        Ok(BatchOutput { params: out.params, raw: out.raw, batch_stats: out.batch_stats })
    }

    /// Inference-mode parameters for each graph.
    pub fn predict_graphs(&self, graphs: &[&MolGraph]) -> Result<Vec<AntoineParams>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape)?;
        let out = self.forward(&mut tape, &vars, graphs, BnMode::Infer)?;
        let m = tape.value(out.params);
        Ok((0..graphs.len()).map(|i| params_row(m, i)).collect())
    }

    pub fn predict_params(&self, smiles: &str) -> Result<AntoineParams> {
        let g = graph_from_smiles(smiles)?;
        Ok(self.predict_graphs(&[&g])?[0])
    }

    /// Antoine parameters plus optional vapor pressure at `temperature_k`
    /// and boiling temperature at `pressure_pa`.
    pub fn predict(&self, smiles: &str, temperature_k: Option<f64>, pressure_pa: Option<f64>) -> Result<Prediction> {
        let p = self.predict_params(smiles)?;
        let ln_p = temperature_k.map(|t| p.ln_vapor_pressure(t)).transpose()?;
        let boiling = pressure_pa.map(|pa| p.boiling_temperature(pa)).transpose()?;
        Ok(Prediction {
            a: p.a,
            b: p.b,
            c: p.c,
            temperature_k,
            ln_p_kpa: ln_p,
            p_pa: ln_p.map(|l| l.exp() * crate::antoine::PA_PER_KPA),
            boiling_temperature_k: boiling,
        })
    }

    /// Per-atom attention scores from the last message-passing layer.
    pub fn attention(&self, smiles: &str) -> Result<Vec<f64>> {
        let g = graph_from_smiles(smiles)?;
        Ok(attention_scores(&g, &self.gat)?)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut tensors = BTreeMap::new();
        self.visit(&mut |name, m| {
            tensors.insert(name, TensorRecord { shape: [m.rows(), m.cols()], values: m.as_slice().to_vec() });
        });
        self.head.visit_buffers(&mut |name, v| {
            tensors.insert(name, TensorRecord { shape: [1, v.len()], values: v.to_vec() });
        });
        let ck = Checkpoint { format_version: CHECKPOINT_FORMAT_VERSION, arch: self.arch.clone(), tensors };
        Ok(serde_json::to_string_pretty(&ck)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported format_version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                ck.format_version
            )));
        }
        let mut model = Self::zeros(ck.arch)?;
        let mut tensors = ck.tensors;
        let mut problem: Option<String> = None;
        let mut take = |name: &str, shape: (usize, usize)| -> Option<Vec<f64>> {
            let rec = match tensors.remove(name) {
                Some(r) => r,
                None => {
                    problem.get_or_insert(format!("missing tensor '{name}'"));
                    return None;
                }
            };
            if (rec.shape[0], rec.shape[1]) != shape || rec.values.len() != shape.0 * shape.1 {
                problem.get_or_insert(format!("tensor '{name}' has shape {:?}, expected [{}, {}]", rec.shape, shape.0, shape.1));
                return None;
            }
            Some(rec.values)
        };
        model.visit_mut(&mut |name, m| {
            if let Some(v) = take(&name, m.shape()) {
                m.as_mut_slice().copy_from_slice(&v);
            }
        });
        model.head.visit_buffers_mut(&mut |name, buf| {
            if let Some(v) = take(&name, (1, buf.len())) {
                buf.copy_from_slice(&v);
            }
        });
        if let Some(p) = problem {
            return Err(ModelError::Checkpoint(p));
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(ModelError::Checkpoint(format!("unexpected tensor '{extra}'")));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn final_architecture_parameter_count() {
        let m = GrappaModel::new(Arch::default(), 0).unwrap();
        let table = m.parameter_table();
        let sum = |p: &str| table.iter().filter(|e| e.name.starts_with(p)).map(|e| e.count).sum::<usize>();
        // per layer: heads·(in·d + d + 9·d + d) + d
        let layer = |input: usize| 2 * (input * 32 + 32 + 9 * 32 + 32) + 32;
        assert_eq!(sum("gat."), layer(24) + 3 * layer(32));
        assert_eq!(sum("pool."), 3 * 32 * 32);
        assert_eq!(sum("head."), (34 * 16 + 16 + 32) + 2 * (16 * 16 + 16 + 32) + (16 * 3 + 3));
        assert_eq!(m.trainable_parameter_count(), 14_947);
    }

    #[test]
    fn sum_pooling_has_no_pool_tensors() {
        let arch = Arch { pooling: PoolingKind::Sum, ..Arch::default() };
        let m = GrappaModel::new(arch, 0).unwrap();
        assert!(m.parameter_table().iter().all(|e| !e.name.starts_with("pool.")));
    }

    #[test]
    fn builder_rejects_shallow_stack() {
        let arch = Arch { gat_layers: 1, ..Arch::default() };
        assert!(matches!(GrappaModel::new(arch, 0), Err(ModelError::Arch(_))));
    }

    #[test]
    fn prediction_is_deterministic_and_order_free() {
        let m = GrappaModel::new(Arch::default(), 7).unwrap();
        let a = m.predict_params("CCO").unwrap();
        let b = m.predict_params("CCO").unwrap();
        assert_eq!(a, b);
        let c = m.predict_params("OCC").unwrap();
        assert!((a.a - c.a).abs() < 1e-9 && (a.b - c.b).abs() < 1e-9 && (a.c - c.c).abs() < 1e-9);
        assert!(m.arch.param_ranges.contains_open(&a));
    }

    #[test]
    fn predict_reports_pressure_and_boiling_point() {
        let m = GrappaModel::new(Arch::default(), 3).unwrap();
        let p = m.predict("CCCCCC", Some(400.0), Some(101_325.0)).unwrap();
        let params = AntoineParams::new(p.a, p.b, p.c);
        assert_eq!(p.ln_p_kpa, params.ln_vapor_pressure(400.0).ok());
        let tb = p.boiling_temperature_k.unwrap();
        assert!((params.vapor_pressure_pa(tb).unwrap() - 101_325.0).abs() < 1e-6);
    }

    #[test]
    fn out_of_scope_smiles_is_rejected() {
        let m = GrappaModel::new(Arch::default(), 0).unwrap();
        assert!(matches!(m.predict_params("[Na+].[Cl-]"), Err(ModelError::Featurize(_))));
        assert!(matches!(m.predict_params("C(("), Err(ModelError::Parse(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut m = GrappaModel::new(Arch::default(), 11).unwrap();
        m.head.hidden[1].running_mean[3] = 0.123_456_789_012_345_6;
        m.head.hidden[2].running_var[0] = 2.0 / 3.0;
        let back = GrappaModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn checkpoint_rejects_damage() {
        let m = GrappaModel::new(Arch::default(), 1).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        v["format_version"] = 99.into();
        assert!(matches!(GrappaModel::from_json(&v.to_string()), Err(ModelError::Checkpoint(_))));
        let mut v: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        v["tensors"].as_object_mut().unwrap().remove("pool.Wq");
        assert!(matches!(GrappaModel::from_json(&v.to_string()), Err(ModelError::Checkpoint(_))));
    }

    #[test]
    fn training_mode_batch_needs_two_graphs() {
        let m = GrappaModel::new(Arch::default(), 0).unwrap();
        let g = graph_from_smiles("CCO").unwrap();
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape).unwrap();
        assert!(m.forward(&mut tape, &vars, &[&g], BnMode::Train).is_err());
        let out = m.forward(&mut tape, &vars, &[&g, &g], BnMode::Train).unwrap();
        assert_eq!(tape.shape(out.params), (2, 3));
        assert_eq!(out.batch_stats.len(), 3);
    }
}
