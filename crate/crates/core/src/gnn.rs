//! GATv2 message passing with edge features and head averaging.
//!
//! For a target atom `i` with neighbourhood `N(i) ∪ {i}` each head computes
//!
//! ```text
//! s_ij   = aᵀ LeakyReLU(Θv x_i + Θv x_j + Θe e_ij)
//! α_ij   = softmax_j(s_ij)
//! x'_i   = Σ_j α_ij Θv x_j
//! ```
//!
//! and the layer output is the mean over heads plus a shared output bias.
//! `Θv` is a single affine map used for both ends of the edge. Self loops
//! carry an all-zero edge feature vector.

use rand::Rng;

use crate::molgraph::{MolGraph, EDGE_FEATURES};
use crate::tensor::{Matrix, Result, Tape, TensorError, Var};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct GatHead {
    /// `in_dim × out_dim`
    pub theta_v: Matrix,
    /// `1 × out_dim`
    pub theta_v_bias: Matrix,
    /// `EDGE_FEATURES × out_dim`
    pub theta_e: Matrix,
    /// `out_dim × 1`
    pub att: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub heads: Vec<GatHead>,
    /// `1 × out_dim`, added after head averaging.
    pub bias: Matrix,
}

pub(crate) fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

impl GatLayer {
    pub fn zeros(in_dim: usize, out_dim: usize, heads: usize) -> Self {
        let head = GatHead {
            theta_v: Matrix::zeros(in_dim, out_dim),
            theta_v_bias: Matrix::zeros(1, out_dim),
            theta_e: Matrix::zeros(EDGE_FEATURES, out_dim),
            att: Matrix::zeros(out_dim, 1),
        };
        Self { in_dim, out_dim, heads: vec![head; heads], bias: Matrix::zeros(1, out_dim) }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(in_dim: usize, out_dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let heads = (0..heads)
            .map(|_| GatHead {
                theta_v: glorot(rng, in_dim, out_dim),
                theta_v_bias: Matrix::zeros(1, out_dim),
                theta_e: glorot(rng, EDGE_FEATURES, out_dim),
                att: glorot(rng, out_dim, 1),
            })
            .collect();
        Self { in_dim, out_dim, heads, bias: Matrix::zeros(1, out_dim) }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Matrix)) {
        for (h, head) in self.heads.iter().enumerate() {
            f(format!("{prefix}.{h}.theta_v"), &head.theta_v);
            f(format!("{prefix}.{h}.theta_v_bias"), &head.theta_v_bias);
            f(format!("{prefix}.{h}.theta_e"), &head.theta_e);
            f(format!("{prefix}.{h}.att"), &head.att);
        }
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        for (h, head) in self.heads.iter_mut().enumerate() {
            f(format!("{prefix}.{h}.theta_v"), &mut head.theta_v);
            f(format!("{prefix}.{h}.theta_v_bias"), &mut head.theta_v_bias);
            f(format!("{prefix}.{h}.theta_e"), &mut head.theta_e);
            f(format!("{prefix}.{h}.att"), &mut head.att);
        }
        f(format!("{prefix}.bias"), &mut self.bias);
    }

    /// Registers every weight as a named trainable leaf.
    pub fn bind(&self, tape: &mut Tape, prefix: &str) -> Result<GatLayerVars> {
        let heads = self
            .heads
            .iter()
            .enumerate()
            .map(|(h, head)| {
                Ok(GatHeadVars {
                    theta_v: tape.param(format!("{prefix}.{h}.theta_v"), &head.theta_v)?,
                    theta_v_bias: tape.param(format!("{prefix}.{h}.theta_v_bias"), &head.theta_v_bias)?,
                    theta_e: tape.param(format!("{prefix}.{h}.theta_e"), &head.theta_e)?,
                    att: tape.param(format!("{prefix}.{h}.att"), &head.att)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(GatLayerVars { in_dim: self.in_dim, out_dim: self.out_dim, heads, bias: tape.param(format!("{prefix}.bias"), &self.bias)? })
    }
}

#[derive(Debug, Clone)]
pub struct GatHeadVars {
    pub theta_v: Var,
    pub theta_v_bias: Var,
    pub theta_e: Var,
    pub att: Var,
}

#[derive(Debug, Clone)]
pub struct GatLayerVars {
    pub in_dim: usize,
    pub out_dim: usize,
    pub heads: Vec<GatHeadVars>,
    pub bias: Var,
}

/// Directed edge list of a molecule with one self loop per atom appended.
#[derive(Debug, Clone)]
pub struct EdgeIndex {
    pub nodes: usize,
    /// Aggregating atom `i` of each edge.
    pub target: Vec<usize>,
    /// Neighbour `j` whose message is aggregated.
    pub source: Vec<usize>,
    /// `edges × EDGE_FEATURES`; zero rows for self loops.
    pub features: Matrix,
}

impl EdgeIndex {
    pub fn with_self_loops(graph: &MolGraph) -> Self {
        let n = graph.heavy_atom_count();
        let m = graph.edges.len();
        let mut target = Vec::with_capacity(m + n);
        let mut source = Vec::with_capacity(m + n);
        let mut features = Matrix::zeros(m + n, EDGE_FEATURES);
        for (k, &(i, j)) in graph.edges.iter().enumerate() {
            target.push(i);
            source.push(j);
            features.row_mut(k).copy_from_slice(graph.edge_features.row(k));
        }
        for i in 0..n {
            target.push(i);
            source.push(i);
        }
        Self { nodes: n, target, source, features }
    }

    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }
}

/// Output of one layer: the new embeddings and, per head, the `edges × 1`
/// attention column aligned with [`EdgeIndex`].
#[derive(Debug, Clone)]
pub struct GatOutput {
    pub embeddings: Var,
    pub attention: Vec<Var>,
}

pub fn gat_forward(tape: &mut Tape, x: Var, edges: &EdgeIndex, layer: &GatLayerVars) -> Result<GatOutput> {
    let (rows, cols) = tape.shape(x);
    if rows != edges.nodes || cols != layer.in_dim {
        return Err(TensorError::ShapeMismatch { op: "gat_forward", left: (rows, cols), right: (edges.nodes, layer.in_dim) });
    }
    if layer.heads.is_empty() {
        return Err(TensorError::Invalid("GAT layer without heads".into()));
    }
    let edge_feat = tape.constant(edges.features.clone())?;
    let mut attention = Vec::with_capacity(layer.heads.len());
    let mut summed: Option<Var> = None;
    for head in &layer.heads {
        let lin = tape.matmul(x, head.theta_v)?;
        let h = tape.add_row(lin, head.theta_v_bias)?;
        let h_target = tape.gather_rows(h, &edges.target)?;
        let h_source = tape.gather_rows(h, &edges.source)?;
        let e = tape.matmul(edge_feat, head.theta_e)?;
        let pair = tape.add(h_target, h_source)?;
        let pre = tape.add(pair, e)?;
        let act = tape.leaky_relu(pre, LEAKY_SLOPE)?;
        let scores = tape.matmul(act, head.att)?;
        let alpha = tape.segment_softmax(scores, &edges.target)?;
        let messages = tape.mul_col(h_source, alpha)?;
        let out = tape.scatter_add_rows(messages, &edges.target, edges.nodes)?;
        summed = Some(match summed {
            Some(s) => tape.add(s, out)?,
            None => out,
        });
        attention.push(alpha);
    }
    let mean = tape.scale(summed.expect("at least one head"), 1.0 / layer.heads.len() as f64)?;
    let embeddings = tape.add_row(mean, layer.bias)?;
    Ok(GatOutput { embeddings, attention })
}

/// Runs the layers in order, starting from the node features.
pub fn encode(tape: &mut Tape, graph: &MolGraph, layers: &[GatLayerVars]) -> Result<(Var, Vec<GatOutput>)> {
    for pair in layers.windows(2) {
        if pair[0].out_dim != pair[1].in_dim {
            return Err(TensorError::Invalid(format!("layer output {} does not feed layer input {}", pair[0].out_dim, pair[1].in_dim)));
        }
    }
    let edges = EdgeIndex::with_self_loops(graph);
    let mut x = tape.constant(graph.node_features.clone())?;
    let mut outputs = Vec::with_capacity(layers.len());
    for layer in layers {
        let out = gat_forward(tape, x, &edges, layer)?;
        x = out.embeddings;
        outputs.push(out);
    }
    Ok((x, outputs))
}

/// Per-atom interpretability score: mean attention an atom receives as a
/// message source in the last layer (heads averaged, self loop included),
/// min-max normalized over the molecule. Equal scores map to 1.
pub fn attention_scores(graph: &MolGraph, layers: &[GatLayer]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = layers.iter().enumerate().map(|(l, layer)| layer.bind(&mut tape, &format!("gat.{l}"))).collect::<Result<Vec<_>>>()?;
    let (_, outputs) = encode(&mut tape, graph, &vars)?;
    let last = outputs.last().ok_or_else(|| TensorError::Invalid("attention scores need at least one layer".into()))?;
    let edges = EdgeIndex::with_self_loops(graph);
    let heads = last.attention.len() as f64;
    let mut total = vec![0.0; edges.nodes];
    let mut count = vec![0usize; edges.nodes];
    for (k, &j) in edges.source.iter().enumerate() {
        let mean_alpha: f64 = last.attention.iter().map(|&a| tape.value(a).get(k, 0)).sum::<f64>() / heads;
        total[j] += mean_alpha;
        count[j] += 1;
    }
    let raw: Vec<f64> = total.iter().zip(&count).map(|(t, &c)| t / c as f64).collect();
    Ok(min_max_normalize(&raw))
}

pub(crate) fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
        return vec![1.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}
