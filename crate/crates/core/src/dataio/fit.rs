//! Robust Antoine regression: Levenberg–Marquardt on `ln p` with Huber
//! weights, box-constrained to the parameter ranges, multi-start.

use serde::Serialize;
use thiserror::Error;

use crate::antoine::{AntoineParams, ParamRanges, PA_PER_KPA};
use crate::tensor::huber;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("robust fit needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("temperature spread {0} K is below 1 K")]
    NarrowSpread(f64),
    #[error("non-positive or non-finite point (T = {t}, p = {p})")]
    BadPoint { t: f64, p: f64 },
    #[error("no admissible start: the lowest temperature leaves no valid C")]
    NoAdmissibleStart,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub delta: f64,
    pub lambda0: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub max_iter: usize,
    pub ranges: ParamRanges,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { delta: 0.5, lambda0: 1e-3, lambda_up: 10.0, lambda_down: 10.0, max_iter: 200, ranges: ParamRanges::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    pub params: AntoineParams,
    /// `Σ ρ(ln p_i − ln p̂_i)` at `params`.
    pub cost: f64,
    /// `ln p_i − ln p̂_i` in `ln(kPa)`.
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Cost after the start and after each accepted step.
    pub cost_history: Vec<f64>,
}

impl FitResult {
    /// `|p_exp − p_fit| / p_fit` for each point.
    pub fn relative_deviations(&self) -> Vec<f64> {
        self.residuals.iter().map(|r| (r.exp() - 1.0).abs()).collect()
    }
}

/// Smallest admissible `C` keeping `C + T ≥ 1 K` for every point.
fn c_floor(ranges: &ParamRanges, t_min: f64) -> f64 {
    ranges.c.lo.max(1.0 - t_min)
}

fn clamp(p: [f64; 3], ranges: &ParamRanges, c_lo: f64) -> [f64; 3] {
    [p[0].clamp(ranges.a.lo, ranges.a.hi), p[1].clamp(ranges.b.lo, ranges.b.hi), p[2].clamp(c_lo, ranges.c.hi)]
}

fn residuals(p: [f64; 3], t: &[f64], y: &[f64]) -> Vec<f64> {
    t.iter().zip(y).map(|(&t, &y)| y - (p[0] - p[1] / (p[2] + t))).collect()
}

fn cost(r: &[f64], delta: f64) -> f64 {
    r.iter().map(|&r| huber(r, delta)).sum()
}

/// Solves the 3×3 system `m x = b` by Gaussian elimination with partial
/// pivoting; `None` when singular.
fn solve3(mut m: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..3 {
            let f = m[row][col] / m[col][col];
            for k in col..3 {
                m[row][k] -= f * m[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let s: f64 = (row + 1..3).map(|k| m[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / m[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Least squares for `A, B` with `C` held fixed (the model is linear then).
fn linear_start(c: f64, t: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = t.len() as f64;
    let u: Vec<f64> = t.iter().map(|&t| -1.0 / (c + t)).collect();
    let (su, sy) = (u.iter().sum::<f64>(), y.iter().sum::<f64>());
    let suu: f64 = u.iter().map(|u| u * u).sum();
    let suy: f64 = u.iter().zip(y).map(|(u, y)| u * y).sum();
    let det = n * suu - su * su;
    if det.abs() < 1e-300 {
        return None;
    }
    let b = (n * suy - su * sy) / det;
    let a = (sy - b * su) / n;
    Some((a, b))
}

/// Damped Gauss–Newton step with variables pinned at a bound (and pushed
/// outward) removed from the system.
fn projected_step(jtj: &[[f64; 3]; 3], jtr: &[f64; 3], lambda: f64, p: [f64; 3], bounds: &[(f64, f64); 3]) -> Option<[f64; 3]> {
    let mut free = [true; 3];
    for _ in 0..3 {
        let mut m = [[0.0; 3]; 3];
        let mut rhs = [0.0; 3];
        for a in 0..3 {
            if !free[a] {
                m[a][a] = 1.0;
                continue;
            }
            rhs[a] = jtr[a];
            for b in 0..3 {
                if free[b] {
                    m[a][b] = jtj[a][b];
                }
            }
            m[a][a] += lambda * jtj[a][a].max(1e-12);
        }
        let step = solve3(m, rhs)?;
        let mut changed = false;
        for k in 0..3 {
            let (lo, hi) = bounds[k];
            let pinned = (p[k] <= lo && step[k] < 0.0) || (p[k] >= hi && step[k] > 0.0);
            if free[k] && pinned {
                free[k] = false;
                changed = true;
            }
        }
        if !changed {
            return Some(step);
        }
    }
    Some([0.0; 3])
}

fn lm(start: [f64; 3], t: &[f64], y: &[f64], opt: &FitOptions, c_lo: f64) -> FitResult {
    let bounds = [(opt.ranges.a.lo, opt.ranges.a.hi), (opt.ranges.b.lo, opt.ranges.b.hi), (c_lo, opt.ranges.c.hi)];
    let mut p = clamp(start, &opt.ranges, c_lo);
    let mut r = residuals(p, t, y);
    let mut f = cost(&r, opt.delta);
    let mut history = vec![f];
    let mut lambda = opt.lambda0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opt.max_iter {
        iterations += 1;
        let mut jtj = [[0.0; 3]; 3];
        let mut jtr = [0.0; 3];
        for (&ti, &ri) in t.iter().zip(&r) {
            let den = p[2] + ti;
            let j = [1.0, -1.0 / den, p[1] / (den * den)];
            let w = if ri.abs() <= opt.delta { 1.0 } else { opt.delta / ri.abs() };
            for a in 0..3 {
                jtr[a] += w * j[a] * ri;
                for b in 0..3 {
                    jtj[a][b] += w * j[a] * j[b];
                }
            }
        }
        let mut accepted = false;
        while lambda < 1e16 {
            let Some(step) = projected_step(&jtj, &jtr, lambda, p, &bounds) else {
                lambda *= opt.lambda_up;
                continue;
            };
            let cand = clamp([p[0] + step[0], p[1] + step[1], p[2] + step[2]], &opt.ranges, c_lo);
            let rc = residuals(cand, t, y);
            let fc = cost(&rc, opt.delta);
            if fc.is_finite() && fc < f {
                let moved = (0..3).map(|k| (cand[k] - p[k]).abs() / p[k].abs().max(1.0)).fold(0.0, f64::max);
                let gain = f - fc;
                p = cand;
                r = rc;
                f = fc;
                history.push(f);
                lambda /= opt.lambda_down;
                accepted = true;
                if gain <= 1e-14 * (1.0 + f) || moved < 1e-12 {
                    converged = true;
                }
                break;
            }
            lambda *= opt.lambda_up;
        }
        if !accepted {
            // No descent direction is left inside the box.
            converged = true;
        }
        if converged {
            break;
        }
    }
    FitResult { params: AntoineParams::new(p[0], p[1], p[2]), cost: f, residuals: r, iterations, converged, cost_history: history }
}

/// Fits `ln(p/kPa) = A − B/(C+T)` to `(T [K], p [Pa])` points.
pub fn robust_antoine_fit(points: &[(f64, f64)], opt: &FitOptions) -> Result<FitResult, FitError> {
    if points.len() < 3 {
        return Err(FitError::TooFewPoints(points.len()));
    }
    for &(t, p) in points {
        if !(t > 0.0 && p > 0.0 && t.is_finite() && p.is_finite()) {
            return Err(FitError::BadPoint { t, p });
        }
    }
    let t: Vec<f64> = points.iter().map(|p| p.0).collect();
    let y: Vec<f64> = points.iter().map(|p| (p.1 / PA_PER_KPA).ln()).collect();
    let t_min = t.iter().copied().fold(f64::INFINITY, f64::min);
    let t_max = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if t_max - t_min < 1.0 {
        return Err(FitError::NarrowSpread(t_max - t_min));
    }
    let c_lo = c_floor(&opt.ranges, t_min);
    if c_lo > opt.ranges.c.hi {
        return Err(FitError::NoAdmissibleStart);
    }
    let mid = 0.5 * (opt.ranges.a.lo + opt.ranges.a.hi);
    let mid_b = 0.5 * (opt.ranges.b.lo + opt.ranges.b.hi);
    let best = (0..5)
        .map(|k| {
            let frac = k as f64 / 4.0;
            let c = opt.ranges.c.hi + frac * (c_lo - opt.ranges.c.hi) * 0.8;
            let (a, b) = linear_start(c, &t, &y).unwrap_or((mid, mid_b));
            lm([a, b, c], &t, &y, opt, c_lo)
        })
        .min_by(|x, y| x.cost.total_cmp(&y.cost))
        .expect("five starts");
    Ok(best)
}
