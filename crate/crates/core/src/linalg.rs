//! Dense symmetric positive-definite linear algebra.
//!
//! Everything here works on row-major `ndarray` matrices. Factorizations
//! retry with a jitter schedule so that nearly singular kernel matrices
//! (colliding inducing points, coincident features) still factor.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{IgnError, Result};

/// Jitter values tried in order until a factorization succeeds.
pub const DEFAULT_JITTER_SCHEDULE: [f64; 5] = [0.0, 1e-10, 1e-8, 1e-6, 1e-4];

/// Lower Cholesky factor of `K + jitter_used * I`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    lower: Array2<f64>,
    jitter_used: f64,
}

impl CholeskyFactor {
    pub fn lower(&self) -> &Array2<f64> {
        &self.lower
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// Solves `(K + jI) X = B`.
    pub fn solve(&self, b: &ArrayView2<f64>) -> Result<Array2<f64>> {
        let n = self.dim();
        if b.nrows() != n {
            return Err(IgnError::Dimension {
                op: "solve",
                left: (n, n),
                right: b.dim(),
            });
        }
        let mut x = b.to_owned();
        self.forward_in_place(&mut x);
        self.backward_in_place(&mut x);
        Ok(x)
    }

    /// Solves `L Y = B` in place.
    pub fn forward_in_place(&self, x: &mut Array2<f64>) {
        let l = &self.lower;
        let n = l.nrows();
        for i in 0..n {
            for j in 0..i {
                let lij = l[[i, j]];
                if lij != 0.0 {
                    let (done, mut rest) = x.view_mut().split_at(Axis(0), i);
                    let src = done.row(j);
                    rest.row_mut(0).scaled_add(-lij, &src);
                }
            }
            let d = l[[i, i]];
            x.row_mut(i).mapv_inplace(|v| v / d);
        }
    }

    /// Solves `Lᵀ X = Y` in place.
    pub fn backward_in_place(&self, x: &mut Array2<f64>) {
        let l = &self.lower;
        let n = l.nrows();
        for i in (0..n).rev() {
            for j in (i + 1)..n {
                let lji = l[[j, i]];
                if lji != 0.0 {
                    let (mut head, tail) = x.view_mut().split_at(Axis(0), j);
                    head.row_mut(i).scaled_add(-lji, &tail.row(0));
                }
            }
            let d = l[[i, i]];
            x.row_mut(i).mapv_inplace(|v| v / d);
        }
    }

    /// `log|K + jI| = 2 Σ log L_ii`.
    pub fn logdet(&self) -> f64 {
        2.0 * self.lower.diag().iter().map(|v| v.ln()).sum::<f64>()
    }

    /// Explicit inverse of `K + jI`. Only used where a full inverse is
    /// unavoidable (log-determinant adjoints on small matrices).
    pub fn inverse(&self) -> Array2<f64> {
        let n = self.dim();
        let mut x = Array2::eye(n);
        self.forward_in_place(&mut x);
        self.backward_in_place(&mut x);
        symmetrize(&x)
    }

    /// Reconstructs `L Lᵀ`.
    pub fn reconstruct(&self) -> Array2<f64> {
        self.lower.dot(&self.lower.t())
    }
}

/// `(A + Aᵀ) / 2`.
pub fn symmetrize(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    out += &a.t();
    out.mapv_inplace(|v| 0.5 * v);
    out
}

fn try_factor(k: &Array2<f64>, jitter: f64) -> Option<Array2<f64>> {
    let n = k.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = k[[j, j]] + jitter;
        {
            let row_j = l.row(j);
            for p in 0..j {
                d -= row_j[p] * row_j[p];
            }
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l[[j, j]] = djj;
        for i in (j + 1)..n {
            let mut s = k[[i, j]];
            let (ri, rj) = (l.row(i), l.row(j));
            for p in 0..j {
                s -= ri[p] * rj[p];
            }
            l[[i, j]] = s / djj;
        }
    }
    Some(l)
}

/// Cholesky factorization with jitter escalation.
///
/// `k` is symmetrized first. Each jitter in `schedule` is tried in order and
/// the first success is returned.
pub fn cholesky(k: &ArrayView2<f64>, schedule: &[f64]) -> Result<CholeskyFactor> {
    let (r, c) = k.dim();
    if r != c {
        return Err(IgnError::Dimension {
            op: "cholesky",
            left: (r, c),
            right: (c, r),
        });
    }
    if schedule.is_empty() {
        return Err(IgnError::contract("empty jitter schedule"));
    }
    let sym = symmetrize(&k.to_owned());
    let mut last = schedule[0];
    for &j in schedule {
        last = j;
        if let Some(lower) = try_factor(&sym, j) {
            return Ok(CholeskyFactor {
                lower,
                jitter_used: j,
            });
        }
    }
    Err(IgnError::NotPositiveDefinite { jitter: last })
}

/// Jitter schedule whose smallest entry is at least `floor`.
pub fn schedule_with_floor(floor: f64) -> Vec<f64> {
    let mut s: Vec<f64> = DEFAULT_JITTER_SCHEDULE
        .iter()
        .map(|&j| j.max(floor))
        .collect();
    s.dedup();
    if floor > 0.0 && *s.last().unwrap() < floor * 100.0 {
        s.push(floor * 100.0);
    }
    s
}
