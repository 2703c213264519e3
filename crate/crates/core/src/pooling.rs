//! Graph readout: node embeddings `N × d` to one `1 × d` molecule vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::gnn::glorot;
use crate::tensor::{Matrix, Result, Tape, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingKind {
    Sum,
    Interaction,
}

impl std::fmt::Display for PoolingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sum => "sum",
            Self::Interaction => "interaction",
        })
    }
}

impl std::str::FromStr for PoolingKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sum" => Ok(Self::Sum),
            "interaction" => Ok(Self::Interaction),
            other => Err(format!("unknown pooling '{other}' (expected sum or interaction)")),
        }
    }
}

/// Query, key and value projections, each `d × d` without bias.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionPoolParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
}

#[derive(Debug, Clone, Copy)]
pub struct InteractionPoolVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

impl InteractionPoolParams {
    pub fn zeros(dim: usize) -> Self {
        Self { wq: Matrix::zeros(dim, dim), wk: Matrix::zeros(dim, dim), wv: Matrix::zeros(dim, dim) }
    }

    pub fn init(dim: usize, rng: &mut impl Rng) -> Self {
        Self { wq: glorot(rng, dim, dim), wk: glorot(rng, dim, dim), wv: glorot(rng, dim, dim) }
    }

    pub fn visit(&self, f: &mut dyn FnMut(String, &Matrix)) {
        f("pool.Wq".into(), &self.wq);
        f("pool.Wk".into(), &self.wk);
        f("pool.Wv".into(), &self.wv);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Matrix)) {
        f("pool.Wq".into(), &mut self.wq);
        f("pool.Wk".into(), &mut self.wk);
        f("pool.Wv".into(), &mut self.wv);
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<InteractionPoolVars> {
        Ok(InteractionPoolVars {
            wq: tape.param("pool.Wq", &self.wq)?,
            wk: tape.param("pool.Wk", &self.wk)?,
            wv: tape.param("pool.Wv", &self.wv)?,
        })
    }
}

fn non_empty(tape: &Tape, x: Var) -> Result<()> {
    if tape.shape(x).0 == 0 {
        return Err(TensorError::Invalid("pooling over an empty graph".into()));
    }
    Ok(())
}

/// `h = Σ_i x_i`
pub fn sum_pool(tape: &mut Tape, x: Var) -> Result<Var> {
    non_empty(tape, x)?;
    tape.row_sum(x)
}

/// Self-attention readout: `Z = softmax(Q Kᵀ / √d) V`, `h = Σ_i z_i`.
/// Returns `h` and the `N × N` attention-weight matrix.
pub fn interaction_pool(tape: &mut Tape, x: Var, p: &InteractionPoolVars) -> Result<(Var, Var)> {
    non_empty(tape, x)?;
    let d = tape.shape(p.wq).1 as f64;
    let q = tape.matmul(x, p.wq)?;
    let k = tape.matmul(x, p.wk)?;
    let v = tape.matmul(x, p.wv)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.scale(logits, 1.0 / d.sqrt())?;
    let weights = tape.softmax_rows(scaled)?;
    let z = tape.matmul(weights, v)?;
    Ok((tape.row_sum(z)?, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn interaction(x: &Matrix, p: &InteractionPoolParams) -> (Matrix, Matrix) {
        let mut t = Tape::new();
        let xv = t.constant(x.clone()).unwrap();
        let vars = p.bind(&mut t).unwrap();
        let (h, w) = interaction_pool(&mut t, xv, &vars).unwrap();
        (t.value(h).clone(), t.value(w).clone())
    }

    fn sum(x: &Matrix) -> Matrix {
        let mut t = Tape::new();
        let xv = t.constant(x.clone()).unwrap();
        let h = sum_pool(&mut t, xv).unwrap();
        t.value(h).clone()
    }

    fn permute_rows(x: &Matrix, perm: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for (i, &p) in perm.iter().enumerate() {
            out.row_mut(p).copy_from_slice(x.row(i));
        }
        out
    }

    #[test]
    fn sum_pool_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 1, 32);
        assert_eq!(sum(&x), x);
        assert!(sum(&Matrix::filled(5, 32, 1.0)).as_slice().iter().all(|&v| v == 5.0));
        let mut t = Tape::new();
        let empty = t.constant(Matrix::zeros(0, 32)).unwrap();
        assert!(sum_pool(&mut t, empty).is_err());
    }

    #[test]
    fn single_row_interaction_is_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 1, 32);
        let p = InteractionPoolParams::init(32, &mut rng);
        let (h, w) = interaction(&x, &p);
        assert_eq!(w.as_slice(), &[1.0]);
        let expect = x.matmul(&p.wv).unwrap();
        for (a, b) in h.as_slice().iter().zip(expect.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_attention_collapses_to_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 6, 32);
        let mut p = InteractionPoolParams::zeros(32);
        p.wv = Matrix::identity(32);
        let (h, _) = interaction(&x, &p);
        for (a, b) in h.as_slice().iter().zip(sum(&x).as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Naive re-implementation with explicit loops.
    #[test]
    fn interaction_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 4, 32);
        let p = InteractionPoolParams::init(32, &mut rng);
        let (n, d) = (4, 32);
        let proj = |w: &Matrix| -> Vec<Vec<f64>> {
            (0..n).map(|i| (0..d).map(|c| (0..d).map(|r| x.get(i, r) * w.get(r, c)).sum()).collect()).collect()
        };
        let (q, k, v) = (proj(&p.wq), proj(&p.wk), proj(&p.wv));
        let mut h = vec![0.0; d];
        for i in 0..n {
            let logits: Vec<f64> = (0..n).map(|j| (0..d).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (d as f64).sqrt()).collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for j in 0..n {
                let a = (logits[j] - m).exp() / z;
                for c in 0..d {
                    h[c] += a * v[j][c];
                }
            }
        }
        let (got, w) = interaction(&x, &p);
        for (a, b) in got.as_slice().iter().zip(&h) {
            assert!((a - b).abs() < 1e-10);
        }
        for r in 0..n {
            assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn both_poolings_are_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = InteractionPoolParams::init(32, &mut rng);
        for n in [2, 5, 9] {
            let x = random(&mut rng, n, 32);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.reverse();
            perm.swap(0, n / 2);
            let xp = permute_rows(&x, &perm);
            let (a, _) = interaction(&x, &p);
            let (b, _) = interaction(&xp, &p);
            for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
                assert!((u - v).abs() < 1e-9);
            }
            for (u, v) in sum(&x).as_slice().iter().zip(sum(&xp).as_slice()) {
                assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn interaction_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&mut rng, 3, 32);
        let p = InteractionPoolParams::init(32, &mut rng);
        let target: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |x: &Matrix, p: &InteractionPoolParams| {
            let mut t = Tape::new();
            let xv = t.param("x", x).unwrap();
            let vars = p.bind(&mut t).unwrap();
            let (h, _) = interaction_pool(&mut t, xv, &vars).unwrap();
            let l = t.mse_loss(h, &target).unwrap();
            (t, l)
        };
        let (t, l) = loss(&x, &p);
        let g = t.backward(l).unwrap();
        let eps = 1e-6;
        for (name, var) in t.params() {
            let grad = g.get_or_zeros(&t, *var);
            for k in (0..grad.len()).step_by(7) {
                let eval = |delta: f64| {
                    let (mut x2, mut p2) = (x.clone(), p.clone());
                    if name == "x" {
                        x2.as_mut_slice()[k] += delta;
                    } else {
                        p2.visit_mut(&mut |n, m| {
                            if &n == name {
                                m.as_mut_slice()[k] += delta;
                            }
                        });
                    }
                    let (t2, l2) = loss(&x2, &p2);
                    t2.value(l2).get(0, 0)
                };
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let a = grad.as_slice()[k];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
                assert!(rel < 1e-4, "{name}[{k}]: {a} vs {numeric}");
            }
        }
    }
}
