//! Antoine-equation arithmetic and the bounded prediction head.
//!
//! `ln(p / kPa) = A − B / (C + T / K)`

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{BatchStats, Matrix, Result as TensorResult, Tape, Var};

pub const PA_PER_KPA: f64 = 1000.0;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AntoineError {
    #[error("C + T = {0} K is not positive; the Antoine equation is undefined there")]
    Domain(f64),
    #[error("ln(p/kPa) = {ln_p} is not below A = {a}; no boiling temperature exists")]
    NoSolution { ln_p: f64, a: f64 },
    #[error("pressure must be positive, got {0} Pa")]
    NonPositivePressure(f64),
}

/// Closed interval used to squash one raw head output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub fn contains_open(&self, v: f64) -> bool {
        v > self.lo && v < self.hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamRanges {
    pub a: Range,
    pub b: Range,
    pub c: Range,
}

impl Default for ParamRanges {
    fn default() -> Self {
        Self { a: Range { lo: 5.0, hi: 20.0 }, b: Range { lo: 1500.0, hi: 6000.0 }, c: Range { lo: -300.0, hi: 0.0 } }
    }
}

impl ParamRanges {
    fn as_array(&self) -> [Range; 3] {
        [self.a, self.b, self.c]
    }

    /// `lo + (hi − lo) · σ(raw)` per component.
    pub fn scale(&self, raw: [f64; 3]) -> AntoineParams {
        let r = self.as_array();
        let s = |k: usize| r[k].lo + (r[k].hi - r[k].lo) * crate::tensor::sigmoid(raw[k]);
        AntoineParams { a: s(0), b: s(1), c: s(2) }
    }

    pub fn contains_open(&self, p: &AntoineParams) -> bool {
        self.a.contains_open(p.a) && self.b.contains_open(p.b) && self.c.contains_open(p.c)
    }

    /// Clamps each parameter into its closed interval.
    pub fn clamp(&self, p: AntoineParams) -> AntoineParams {
        AntoineParams { a: p.a.clamp(self.a.lo, self.a.hi), b: p.b.clamp(self.b.lo, self.b.hi), c: p.c.clamp(self.c.lo, self.c.hi) }
    }
}

/// `A` dimensionless, `B` and `C` in kelvin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AntoineParams {
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
    #[serde(rename = "C")]
    pub c: f64,
}

impl AntoineParams {
    pub fn new(a: f64, b: f64, c: f64) -> Self {
        Self { a, b, c }
    }

    /// `ln(p / kPa)` at temperature `t` in kelvin.
    pub fn ln_vapor_pressure(&self, t: f64) -> Result<f64, AntoineError> {
        let den = self.c + t;
        if den <= 0.0 {
            return Err(AntoineError::Domain(den));
        }
        Ok(self.a - self.b / den)
    }

    /// `ln(p / kPa)` with `C + T` floored at
    /// [`ANTOINE_DENOMINATOR_FLOOR`](crate::tensor::ANTOINE_DENOMINATOR_FLOOR),
    /// matching the value the training graph computes.
    pub fn ln_vapor_pressure_floored(&self, t: f64) -> f64 {
        self.a - self.b / (self.c + t).max(crate::tensor::ANTOINE_DENOMINATOR_FLOOR)
    }

    /// Vapor pressure in pascal.
    pub fn vapor_pressure_pa(&self, t: f64) -> Result<f64, AntoineError> {
        Ok(self.ln_vapor_pressure(t)?.exp() * PA_PER_KPA)
    }

    /// Temperature in kelvin at which the vapor pressure equals `pressure_pa`.
    pub fn boiling_temperature(&self, pressure_pa: f64) -> Result<f64, AntoineError> {
        if pressure_pa <= 0.0 {
            return Err(AntoineError::NonPositivePressure(pressure_pa));
        }
        let ln_p = (pressure_pa / PA_PER_KPA).ln();
        if ln_p >= self.a {
            return Err(AntoineError::NoSolution { ln_p, a: self.a });
        }
        Ok(self.b / (self.a - ln_p) - self.c)
    }
}

/// One `linear → batch norm → ELU` block of the head.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer {
    pub weight: Matrix,
    pub bias: Matrix,
    pub bn_weight: Matrix,
    pub bn_bias: Matrix,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

/// Feed-forward head from `[h, donors, acceptors]` to three raw outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub hidden: Vec<HiddenLayer>,
    pub out_weight: Matrix,
    pub out_bias: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

fn linear_init(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> (Matrix, Matrix) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(-bound..bound)).collect::<Vec<_>>();
    let w = Matrix::from_vec(fan_in, fan_out, draw(fan_in * fan_out)).expect("sized");
    let b = Matrix::from_vec(1, fan_out, draw(fan_out)).expect("sized");
    (w, b)
}

impl HeadParams {
    pub fn zeros(input: usize, width: usize, layers: usize) -> Self {
        let hidden = (0..layers)
            .map(|l| HiddenLayer {
                weight: Matrix::zeros(if l == 0 { input } else { width }, width),
                bias: Matrix::zeros(1, width),
                bn_weight: Matrix::filled(1, width, 1.0),
                bn_bias: Matrix::zeros(1, width),
                running_mean: vec![0.0; width],
                running_var: vec![1.0; width],
            })
            .collect();
        let last = if layers == 0 { input } else { width };
        Self { hidden, out_weight: Matrix::zeros(last, 3), out_bias: Matrix::zeros(1, 3) }
    }

    /// Uniform `±1/√fan_in` linear weights; batch norm starts at identity.
    pub fn init(input: usize, width: usize, layers: usize, rng: &mut impl Rng) -> Self {
        let mut head = Self::zeros(input, width, layers);
        for (l, layer) in head.hidden.iter_mut().enumerate() {
            let fan_in = if l == 0 { input } else { width };
            (layer.weight, layer.bias) = linear_init(rng, fan_in, width);
        }
        let last = if layers == 0 { input } else { width };
        (head.out_weight, head.out_bias) = linear_init(rng, last, 3);
        head
    }

    pub fn visit(&self, f: &mut dyn FnMut(String, &Matrix)) {
        for (i, l) in self.hidden.iter().enumerate() {
            f(format!("head.{i}.lin.weight"), &l.weight);
            f(format!("head.{i}.lin.bias"), &l.bias);
            f(format!("head.{i}.bn.weight"), &l.bn_weight);
            f(format!("head.{i}.bn.bias"), &l.bn_bias);
        }
        f("head.out.lin.weight".into(), &self.out_weight);
        f("head.out.lin.bias".into(), &self.out_bias);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Matrix)) {
        for (i, l) in self.hidden.iter_mut().enumerate() {
            f(format!("head.{i}.lin.weight"), &mut l.weight);
            f(format!("head.{i}.lin.bias"), &mut l.bias);
            f(format!("head.{i}.bn.weight"), &mut l.bn_weight);
            f(format!("head.{i}.bn.bias"), &mut l.bn_bias);
        }
        f("head.out.lin.weight".into(), &mut self.out_weight);
        f("head.out.lin.bias".into(), &mut self.out_bias);
    }

    /// Running statistics, which are state but not trainable.
    pub fn visit_buffers(&self, f: &mut dyn FnMut(String, &[f64])) {
        for (i, l) in self.hidden.iter().enumerate() {
            f(format!("head.{i}.bn.running_mean"), &l.running_mean);
            f(format!("head.{i}.bn.running_var"), &l.running_var);
        }
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(String, &mut Vec<f64>)) {
        for (i, l) in self.hidden.iter_mut().enumerate() {
            f(format!("head.{i}.bn.running_mean"), &mut l.running_mean);
            f(format!("head.{i}.bn.running_var"), &mut l.running_var);
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> TensorResult<HeadVars> {
        let hidden = self
            .hidden
            .iter()
            .enumerate()
            .map(|(i, l)| {
                Ok(HiddenVars {
                    weight: tape.param(format!("head.{i}.lin.weight"), &l.weight)?,
                    bias: tape.param(format!("head.{i}.lin.bias"), &l.bias)?,
                    bn_weight: tape.param(format!("head.{i}.bn.weight"), &l.bn_weight)?,
                    bn_bias: tape.param(format!("head.{i}.bn.bias"), &l.bn_bias)?,
                })
            })
            .collect::<TensorResult<_>>()?;
        Ok(HeadVars {
            hidden,
            out_weight: tape.param("head.out.lin.weight", &self.out_weight)?,
            out_bias: tape.param("head.out.lin.bias", &self.out_bias)?,
        })
    }

    /// Folds observed batch statistics into the running estimates
    /// (unbiased variance, momentum [`BN_MOMENTUM`]).
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        for (layer, s) in self.hidden.iter_mut().zip(stats) {
            let n = s.rows as f64;
            let correction = if s.rows > 1 { n / (n - 1.0) } else { 1.0 };
            for c in 0..layer.running_mean.len() {
                layer.running_mean[c] = (1.0 - BN_MOMENTUM) * layer.running_mean[c] + BN_MOMENTUM * s.mean[c];
                layer.running_var[c] = (1.0 - BN_MOMENTUM) * layer.running_var[c] + BN_MOMENTUM * s.var[c] * correction;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct HiddenVars {
    pub weight: Var,
    pub bias: Var,
    pub bn_weight: Var,
    pub bn_bias: Var,
}

#[derive(Debug, Clone)]
pub struct HeadVars {
    pub hidden: Vec<HiddenVars>,
    pub out_weight: Var,
    pub out_bias: Var,
}

#[derive(Debug, Clone)]
pub struct HeadOutput {
    /// `B × 3` pre-sigmoid outputs.
    pub raw: Var,
    /// `B × 3` scaled `(A, B, C)`.
    pub params: Var,
    /// One entry per hidden layer in training mode, empty otherwise.
    pub batch_stats: Vec<BatchStats>,
}

/// Runs the head on a `B × (d + 2)` input.
pub fn head_forward(
    tape: &mut Tape,
    input: Var,
    head: &HeadParams,
    vars: &HeadVars,
    ranges: &ParamRanges,
    mode: BnMode,
) -> TensorResult<HeadOutput> {
    let mut x = input;
    let mut batch_stats = Vec::new();
    for (layer, v) in head.hidden.iter().zip(&vars.hidden) {
        let lin = tape.matmul(x, v.weight)?;
        let lin = tape.add_row(lin, v.bias)?;
        let normed = match mode {
            BnMode::Train => {
                let (y, stats) = tape.batch_norm(lin, v.bn_weight, v.bn_bias, BN_EPS)?;
                batch_stats.push(stats);
                y
            }
            BnMode::Infer => {
                let inv: Vec<f64> = layer.running_var.iter().map(|s| 1.0 / (s + BN_EPS).sqrt()).collect();
                let shift: Vec<f64> = layer.running_mean.iter().zip(&inv).map(|(m, i)| -m * i).collect();
                let xhat = tape.col_affine(lin, &inv, &shift)?;
                let scaled = tape.mul_row(xhat, v.bn_weight)?;
                tape.add_row(scaled, v.bn_bias)?
            }
        };
        x = tape.elu(normed)?;
    }
    let out = tape.matmul(x, vars.out_weight)?;
    let raw = tape.add_row(out, vars.out_bias)?;
    let s = tape.sigmoid(raw)?;
    let r = ranges.as_array();
    let scale: Vec<f64> = r.iter().map(|r| r.hi - r.lo).collect();
    let shift: Vec<f64> = r.iter().map(|r| r.lo).collect();
    let params = tape.col_affine(s, &scale, &shift)?;
    Ok(HeadOutput { raw, params, batch_stats })
}

/// Reads row `i` of a `B × 3` parameter matrix.
pub fn params_row(m: &Matrix, i: usize) -> AntoineParams {
    AntoineParams::new(m.get(i, 0), m.get(i, 1), m.get(i, 2))
}
