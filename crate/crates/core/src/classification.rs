//! Probit classification with a Laplace-approximated marginal likelihood,
//! plus the one-vs-all multiclass reduction.
//!
//! The latent prior for a batch is the GP conditioned on the inducing
//! pseudo-labels: mean `a = K_XZ K_ZZ⁻¹ r`, covariance
//! `K = K_XX − K_XZ K_ZZ⁻¹ K_ZX`. Newton's method runs on the centered
//! latent `h = f − a` (zero prior mean), starting from `h = 0`.
//!
//! `W` below is the positive curvature `−∇∇ log p(y|f)`, so `K⁻¹ + W` is
//! positive definite. The log-determinant uses `|I + W^½ K W^½|`, and the
//! quadratic term is written as `2αᵀ(f̂ − a) − αᵀKα` with `α = K⁻¹(f̂ − a)`
//! held fixed, which has the same value and gradients while never
//! inverting `K`.

use std::f64::consts::{PI, SQRT_2};

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::autodiff::{Tape, Var};
use crate::error::{IgnError, Result};
use crate::linalg::{self, DEFAULT_JITTER_SCHEDULE};
use crate::model::{embed, IgnParameters, ParamVars};
use crate::regression::{condition_on_inducing, predict, CovarianceMode};

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

// Below this, Φ and φ/Φ come from the asymptotic tail series.
const TAIL_SWITCH: f64 = -20.0;

/// `S(z) − 1` where `Φ(z) ≈ φ(z)/(−z) · S(z)` for large negative `z`.
fn tail_series_minus_one(z: f64) -> f64 {
    let u = 1.0 / (z * z);
    // −u + 3u² − 15u³ + 105u⁴ − 945u⁵ + 10395u⁶
    u * (-1.0 + u * (3.0 + u * (-15.0 + u * (105.0 + u * (-945.0 + u * 10395.0)))))
}

/// `log Φ(x)`.
pub fn log_normal_cdf(x: f64) -> f64 {
    if x < TAIL_SWITCH {
        let s = 1.0 + tail_series_minus_one(x);
        -0.5 * x * x - 0.5 * (2.0 * PI).ln() - (-x).ln() + s.ln()
    } else if x > 0.0 {
        (-0.5 * erfc(x / SQRT_2)).ln_1p()
    } else {
        normal_cdf(x).ln()
    }
}

/// Per-point log-likelihood and its first two derivatives in `f`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbitStats {
    /// `log Φ(y f)`.
    pub logp: f64,
    /// `y φ(f) / Φ(y f)`.
    pub d1: f64,
    /// `−φ(f)²/Φ(yf)² − y f φ(f)/Φ(yf)`; always ≤ 0.
    pub d2: f64,
}

/// Probit likelihood statistics for a label `y ∈ {−1, +1}`.
pub fn probit_stats(y: f64, f: f64) -> Result<ProbitStats> {
    if y != 1.0 && y != -1.0 {
        return Err(IgnError::contract(format!("probit label must be ±1, got {y}")));
    }
    if !f.is_finite() {
        return Err(IgnError::numerical("latent value is not finite"));
    }
    let z = y * f;
    let (ratio, ratio_plus_z) = if z < TAIL_SWITCH {
        let t = tail_series_minus_one(z);
        let s = 1.0 + t;
        (-z / s, z * t / s)
    } else {
        let r = normal_pdf(z) / normal_cdf(z);
        (r, r + z)
    };
    Ok(ProbitStats {
        logp: log_normal_cdf(z),
        d1: y * ratio,
        d2: -ratio * ratio_plus_z,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonConfig {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        NewtonConfig {
            max_iter: 50,
            tol: 1e-8,
        }
    }
}

const MAX_HALVINGS: usize = 10;

/// Mode of the Laplace objective and the quantities the marginal needs.
#[derive(Debug, Clone)]
pub struct LaplaceState {
    pub f_hat: Array1<f64>,
    /// `W⁺ = −∇∇ log p(y|f̂)`, diagonal.
    pub w: Array1<f64>,
    pub k: Array2<f64>,
    pub a: Array1<f64>,
    /// `K⁻¹(f̂ − a)`; equals `∇ log p(y|f̂)` at the mode.
    pub alpha: Array1<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// `log p(y|f) − ½(f−a)ᵀK⁻¹(f−a)` after each accepted iterate, starting at `f = a`.
    pub objective_trace: Vec<f64>,
}

impl LaplaceState {
    /// `‖∇ log p(y|f̂) − K⁻¹(f̂ − a)‖∞`.
    pub fn stationarity(&self, y: &Array1<f64>) -> Result<f64> {
        let mut worst = 0.0f64;
        for i in 0..y.len() {
            let s = probit_stats(y[i], self.f_hat[i])?;
            worst = worst.max((s.d1 - self.alpha[i]).abs());
        }
        Ok(worst)
    }
}

fn log_lik(y: &Array1<f64>, f: &Array1<f64>) -> Result<f64> {
    let mut acc = 0.0;
    for i in 0..y.len() {
        acc += probit_stats(y[i], f[i])?.logp;
    }
    Ok(acc)
}

/// Newton iteration for the Laplace mode with step-halving.
pub fn newton_mode(
    a: &Array1<f64>,
    k: &Array2<f64>,
    y: &Array1<f64>,
    config: &NewtonConfig,
) -> Result<LaplaceState> {
    let n = a.len();
    if k.dim() != (n, n) || y.len() != n {
        return Err(IgnError::Dimension {
            op: "newton_mode",
            left: k.dim(),
            right: (a.len(), y.len()),
        });
    }
    let mut alpha = Array1::<f64>::zeros(n);
    let mut h = Array1::<f64>::zeros(n);
    let mut psi = log_lik(y, a)?;
    let mut trace = vec![psi];
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..config.max_iter {
        iterations += 1;
        let f = a + &h;
        let mut grad = Array1::zeros(n);
        let mut w = Array1::zeros(n);
        for i in 0..n {
            let s = probit_stats(y[i], f[i])?;
            grad[i] = s.d1;
            w[i] = -s.d2;
        }
        let sw = w.mapv(f64::sqrt);
        let mut bmat = k * &sw.view().insert_axis(Axis(1)) * &sw.view().insert_axis(Axis(0));
        bmat.diag_mut().mapv_inplace(|v| v + 1.0);
        let factor = linalg::cholesky(&bmat.view(), &DEFAULT_JITTER_SCHEDULE)?;
        // α⁺ = b − W^½ B⁻¹ W^½ K b with b = W h + ∇log p.
        let bvec = &w * &h + &grad;
        let c = &sw * &k.dot(&bvec);
        let solved = factor.solve(&c.view().insert_axis(Axis(1)))?;
        let full = &bvec - &(&sw * &solved.column(0));

        let step = &full - &alpha;
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand = &alpha + &(&step * scale);
            let cand_h = k.dot(&cand);
            let cand_psi = log_lik(y, &(a + &cand_h))? - 0.5 * cand.dot(&cand_h);
            if cand_psi.is_finite() && cand_psi >= psi - 1e-12 * psi.abs().max(1.0) {
                accepted = Some((cand, cand_h, cand_psi));
                break;
            }
            scale *= 0.5;
        }
        let Some((new_alpha, new_h, new_psi)) = accepted else {
            break;
        };
        let delta = new_h
            .iter()
            .zip(h.iter())
            .fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
        alpha = new_alpha;
        h = new_h;
        psi = new_psi.max(psi);
        trace.push(new_psi);
        if delta < config.tol {
            converged = true;
            break;
        }
    }

    let f_hat = a + &h;
    let mut w = Array1::zeros(n);
    for i in 0..n {
        w[i] = -probit_stats(y[i], f_hat[i])?.d2;
    }
    Ok(LaplaceState {
        f_hat,
        w,
        k: k.clone(),
        a: a.clone(),
        alpha,
        converged,
        iterations,
        objective_trace: trace,
    })
}

/// Taped Laplace log marginal and the converged state behind it.
#[derive(Debug)]
pub struct LaplaceOutput {
    pub log_marginal: Var,
    pub state: LaplaceState,
}

/// Records `log p(y|f̂) − ½ log|I + W^½KW^½| − ½ (f̂−a)ᵀK⁻¹(f̂−a)` given a
/// latent prior `(a, K)` already on the tape. `f̂` and `W` are constants.
pub fn laplace_from_prior(
    tape: &mut Tape,
    a: Var,
    k: Var,
    y: &Array1<f64>,
    config: &NewtonConfig,
) -> Result<LaplaceOutput> {
    let a_val = tape.value(a).column(0).to_owned();
    let k_val = tape.value(k).clone();
    let state = newton_mode(&a_val, &k_val, y, config)?;
    if !state.converged {
        return Err(IgnError::NewtonNonConvergence {
            iterations: state.iterations,
        });
    }
    let loglik = log_lik(y, &state.f_hat)?;

    let sw = state.w.mapv(f64::sqrt);
    let outer = sw.view().insert_axis(Axis(1)).dot(&sw.view().insert_axis(Axis(0)));
    let outer = tape.constant(outer);
    let scaled = tape.mul(k, outer)?;
    let one = tape.scalar_constant(1.0);
    let bmat = tape.add_scaled_identity(scaled, one)?;
    let logdet = tape.logdet(bmat)?;

    let f_hat = tape.constant(state.f_hat.clone().insert_axis(Axis(1)));
    let alpha_col = tape.constant(state.alpha.clone().insert_axis(Axis(1)));
    let alpha_row = tape.constant(state.alpha.clone().insert_axis(Axis(0)));
    let centered = tape.sub(f_hat, a)?;
    let lin = tape.matmul(alpha_row, centered)?;
    let k_alpha = tape.matmul(k, alpha_col)?;
    let curv = tape.matmul(alpha_row, k_alpha)?;
    let lin2 = tape.scale_const(2.0, lin);
    let quad = tape.sub(lin2, curv)?;

    let half_logdet = tape.scale_const(-0.5, logdet);
    let half_quad = tape.scale_const(-0.5, quad);
    let penalty = tape.add(half_logdet, half_quad)?;
    let ll = tape.scalar_constant(loglik);
    let total = tape.add(ll, penalty)?;
    if !tape.scalar(total).is_finite() {
        return Err(IgnError::numerical("laplace log marginal"));
    }
    Ok(LaplaceOutput {
        log_marginal: total,
        state,
    })
}

/// Laplace-approximated log marginal likelihood of a labelled batch.
pub fn laplace_log_marginal(
    tape: &mut Tape,
    pv: &ParamVars,
    x: &Array2<f64>,
    y: &Array1<f64>,
    config: &NewtonConfig,
) -> Result<LaplaceOutput> {
    if x.nrows() == 0 || x.nrows() != y.len() {
        return Err(IgnError::Dimension {
            op: "laplace_log_marginal",
            left: x.dim(),
            right: (y.len(), 1),
        });
    }
    if let Some(bad) = y.iter().find(|&&v| v != 1.0 && v != -1.0) {
        return Err(IgnError::contract(format!("labels must be ±1, got {bad}")));
    }
    let xv = tape.constant(x.clone());
    let features = embed(tape, pv, xv)?;
    let cond = condition_on_inducing(tape, pv, features)?;
    laplace_from_prior(tape, cond.mean, cond.cov, y, config)
}

/// `Φ(μ / √(1 + σ²))` from the noise-free predictive distribution.
pub fn predict_proba(params: &IgnParameters, x_star: &Array2<f64>) -> Result<Array1<f64>> {
    let pred = predict(params, x_star, CovarianceMode::Diag, false)?;
    let var = pred.variance();
    Ok(pred
        .mean
        .iter()
        .zip(var.iter())
        .map(|(&mu, &s2)| probit_probability(mu, s2))
        .collect())
}

pub fn probit_probability(mu: f64, var: f64) -> f64 {
    normal_cdf(mu / (1.0 + var).sqrt())
}

/// Maps `{0, 1}` (or any label) to `±1` with `positive` → `+1`.
pub fn to_pm_one(labels: &[usize], positive: usize) -> Array1<f64> {
    labels
        .iter()
        .map(|&l| if l == positive { 1.0 } else { -1.0 })
        .collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// One binary model per class, predicting by the largest class probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneVsAll {
    pub heads: Vec<IgnParameters>,
}

impl OneVsAll {
    /// Trains `classes` heads; head `c` sees `+1` for class `c` and `−1`
    /// otherwise. Heads run on up to `jobs` threads; results are ordered by
    /// class regardless of scheduling.
    pub fn train<F>(labels: &[usize], classes: usize, jobs: usize, train_fn: F) -> Result<Self>
    where
        F: Fn(usize, &Array1<f64>) -> Result<IgnParameters> + Sync,
    {
        if classes < 2 {
            return Err(IgnError::contract("one-vs-all needs at least two classes"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(IgnError::contract(format!(
                "label {bad} outside 0..{classes}"
            )));
        }
        let run = |c: usize| {
            let y = to_pm_one(labels, c);
            train_fn(c, &y).map_err(|e| IgnError::ClassHead {
                class: c,
                source: Box::new(e),
            })
        };
        let results: Vec<Result<IgnParameters>> = if jobs > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build()
                .map_err(|e| IgnError::contract(e.to_string()))?;
            pool.install(|| (0..classes).into_par_iter().map(run).collect())
        } else {
            (0..classes).map(run).collect()
        };
        let heads = results.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(OneVsAll { heads })
    }

    /// `n × C` matrix of per-class probabilities.
    pub fn predict_proba(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((x.nrows(), self.heads.len()));
        for (c, head) in self.heads.iter().enumerate() {
            let p = predict_proba(head, x)?;
            out.column_mut(c).assign(&p);
        }
        Ok(out)
    }

    pub fn predict(&self, x: &Array2<f64>) -> Result<Vec<usize>> {
        let probs = self.predict_proba(x)?;
        Ok(probs
            .rows()
            .into_iter()
            .map(|r| argmax_lowest(&r.to_vec()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Trapezoid quadrature of φ over [x − 1.5, x] with 10 000 panels. For
    /// x ≤ −10 the mass below the window is below e⁻¹⁶ relative.
    fn quad_cdf(x: f64) -> f64 {
        let lo = x - 1.5;
        let n = 10_000;
        let h = (x - lo) / n as f64;
        let mut acc = 0.5 * (normal_pdf(lo) + normal_pdf(x));
        for i in 1..n {
            acc += normal_pdf(lo + i as f64 * h);
        }
        acc * h
    }

    #[test]
    fn probit_at_zero() {
        let s = probit_stats(1.0, 0.0).unwrap();
        assert!((s.logp - 0.5f64.ln()).abs() < 1e-15);
        assert!((s.d1 - 0.7978845608028654).abs() < 1e-12);
        let n = probit_stats(-1.0, 0.0).unwrap();
        assert!((n.d1 + 0.7978845608028654).abs() < 1e-12);
        assert_eq!(n.logp, s.logp);
    }

    #[test]
    fn probit_far_tail_matches_quadrature() {
        // Φ(−10) via quadrature of φ on [−22, −10].
        let s = probit_stats(1.0, -10.0).unwrap();
        let q = quad_cdf(-10.0);
        assert!(s.logp.is_finite());
        assert!((s.logp - q.ln()).abs() < 1e-6, "{} vs {}", s.logp, q.ln());
        assert!((s.d1 - normal_pdf(-10.0) / q).abs() / s.d1 < 1e-6);
    }

    #[test]
    fn probit_rejects_bad_label() {
        assert!(matches!(probit_stats(0.0, 1.0), Err(IgnError::Contract(_))));
    }

    #[test]
    fn probit_tail_is_continuous_and_concave() {
        for &z in &[-35.0, -30.0, -25.0, -20.0001, -19.9999, -10.0, -1.0, 0.0, 3.0, 10.0, 30.0] {
            for y in [1.0, -1.0] {
                let s = probit_stats(y, y * z).unwrap();
                assert!(s.logp.is_finite() && s.d1.is_finite() && s.d2.is_finite());
                assert!(s.d2 <= 0.0, "d2 {} at z {z}", s.d2);
            }
        }
        let below = probit_stats(1.0, -20.0 - 1e-9).unwrap();
        let above = probit_stats(1.0, -20.0 + 1e-9).unwrap();
        assert!((below.logp - above.logp).abs() < 1e-7);
        assert!((below.d1 - above.d1).abs() / above.d1 < 1e-9);
        assert!((below.d2 - above.d2).abs() / above.d2.abs() < 1e-6);
    }

    #[test]
    fn newton_one_dimensional_mode_matches_grid() {
        // Oracle: grid search of log Φ(f) − f²/2 on [−5, 5] with step 1e-5.
        let mut best = (f64::NEG_INFINITY, 0.0);
        let steps = 1_000_000;
        for i in 0..=steps {
            let f = -5.0 + 10.0 * i as f64 / steps as f64;
            let v = log_normal_cdf(f) - 0.5 * f * f;
            if v > best.0 {
                best = (v, f);
            }
        }
        let st = newton_mode(&array![0.0], &array![[1.0]], &array![1.0], &NewtonConfig::default()).unwrap();
        assert!(st.converged);
        assert!((st.f_hat[0] - best.1).abs() < 1e-4, "{} vs {}", st.f_hat[0], best.1);
        assert!((st.f_hat[0] - 0.50605).abs() < 1e-4);
        assert!(st.stationarity(&array![1.0]).unwrap() < 1e-6);
    }

    #[test]
    fn saturated_prior_mean_is_mode() {
        let a = Array1::from_elem(3, 10.0);
        let st = newton_mode(&a, &Array2::eye(3), &Array1::ones(3), &NewtonConfig::default()).unwrap();
        assert!(st.f_hat.iter().all(|&f| (f - 10.0).abs() < 1e-10));
    }

    #[test]
    fn label_flip_negates_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
        let m = Array2::from_shape_fn((4, 4), |_| rng.random_range(-1.0..1.0));
        let mut k = m.dot(&m.t());
        k.diag_mut().mapv_inplace(|v| v + 0.5);
        let y = array![1.0, -1.0, -1.0, 1.0];
        let s1 = newton_mode(&a, &k, &y, &NewtonConfig::default()).unwrap();
        let s2 = newton_mode(&(-&a), &k, &(-&y), &NewtonConfig::default()).unwrap();
        for (p, q) in s1.f_hat.iter().zip(s2.f_hat.iter()) {
            assert_eq!(*p, -*q);
        }
    }

    #[test]
    fn newton_objective_non_decreasing_and_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let n = rng.random_range(1..7);
            let a = Array1::from_shape_fn(n, |_| rng.random_range(-4.0..4.0));
            let m = Array2::from_shape_fn((n, n), |_| rng.random_range(-2.0..2.0));
            let mut k = m.dot(&m.t());
            k.diag_mut().mapv_inplace(|v| v + 0.1);
            let y = Array1::from_shape_fn(n, |_| if rng.random_bool(0.5) { 1.0 } else { -1.0 });
            let st = newton_mode(&a, &k, &y, &NewtonConfig::default()).unwrap();
            assert!(st.converged);
            for w in st.objective_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-12 * w[0].abs().max(1.0));
            }
            assert!(st.stationarity(&y).unwrap() < 1e-6);
            assert!(st.w.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn single_point_laplace_close_to_half() {
        let mut tape = Tape::new();
        let a = tape.constant(array![[0.0]]);
        let k = tape.constant(array![[1.0]]);
        let out = laplace_from_prior(&mut tape, a, k, &array![1.0], &NewtonConfig::default()).unwrap();
        let v = tape.scalar(out.log_marginal);
        assert!((v - 0.5f64.ln()).abs() < 0.05, "{v}");
    }

    #[test]
    fn label_flip_leaves_marginal_unchanged_at_zero_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Array2::from_shape_fn((3, 3), |_| rng.random_range(-1.0..1.0));
        let mut kv = m.dot(&m.t());
        kv.diag_mut().mapv_inplace(|v| v + 0.3);
        let y = array![1.0, 1.0, -1.0];
        let mut vals = vec![];
        for yy in [y.clone(), -&y] {
            let mut tape = Tape::new();
            let a = tape.constant(Array2::zeros((3, 1)));
            let k = tape.constant(kv.clone());
            let out = laplace_from_prior(&mut tape, a, k, &yy, &NewtonConfig::default()).unwrap();
            vals.push(tape.scalar(out.log_marginal));
        }
        assert!((vals[0] - vals[1]).abs() < 1e-12);
    }

    /// Laplace objective with explicit `K⁻¹`, at fixed `f̂` and `W`.
    fn explicit_laplace(a: &Array1<f64>, k: &Array2<f64>, f_hat: &Array1<f64>, w: &Array1<f64>, y: &Array1<f64>) -> f64 {
        let n = a.len();
        let kinv = linalg::cholesky(&k.view(), &[0.0]).unwrap().inverse();
        let d = f_hat - a;
        let mut b = Array2::<f64>::eye(n);
        for i in 0..n {
            for j in 0..n {
                b[[i, j]] += w[i].sqrt() * k[[i, j]] * w[j].sqrt();
            }
        }
        let ld = linalg::cholesky(&b.view(), &[0.0]).unwrap().logdet();
        log_lik(y, f_hat).unwrap() - 0.5 * ld - 0.5 * d.dot(&kinv.dot(&d))
    }

    #[test]
    fn laplace_gradient_matches_fixed_mode_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 3;
        let a0 = Array2::from_shape_fn((n, 1), |_| rng.random_range(-1.0..1.0));
        let m = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
        let mut k0 = m.dot(&m.t());
        k0.diag_mut().mapv_inplace(|v| v + 0.5);
        let y = array![1.0, -1.0, 1.0];

        let mut tape = Tape::new();
        let a = tape.param(a0.clone());
        let k = tape.param(k0.clone());
        let out = laplace_from_prior(&mut tape, a, k, &y, &NewtonConfig::default()).unwrap();
        let g = tape.backward(out.log_marginal).unwrap();
        let (ga, gk) = (g.get(a), g.get(k));
        let st = &out.state;
        let base = explicit_laplace(&st.a, &st.k, &st.f_hat, &st.w, &y);
        assert!((base - tape.scalar(out.log_marginal)).abs() < 1e-9);

        let eps = 1e-6;
        for i in 0..n {
            let mut ap = st.a.clone();
            ap[i] += eps;
            let mut am = st.a.clone();
            am[i] -= eps;
            let fd = (explicit_laplace(&ap, &st.k, &st.f_hat, &st.w, &y)
                - explicit_laplace(&am, &st.k, &st.f_hat, &st.w, &y))
                / (2.0 * eps);
            assert!((fd - ga[[i, 0]]).abs() < 1e-6, "a[{i}]: {fd} vs {}", ga[[i, 0]]);
        }
        for i in 0..n {
            for j in 0..n {
                let mut kp = st.k.clone();
                kp[[i, j]] += eps;
                kp[[j, i]] = kp[[i, j]];
                let mut km = st.k.clone();
                km[[i, j]] -= eps;
                km[[j, i]] = km[[i, j]];
                let fd = (explicit_laplace(&st.a, &kp, &st.f_hat, &st.w, &y)
                    - explicit_laplace(&st.a, &km, &st.f_hat, &st.w, &y))
                    / (2.0 * eps);
                let ad = if i == j { gk[[i, i]] } else { gk[[i, j]] + gk[[j, i]] };
                assert!((fd - ad).abs() < 1e-6, "K[{i},{j}]: {fd} vs {ad}");
            }
        }
    }

    #[test]
    fn predictive_probability_cases() {
        assert_eq!(probit_probability(0.0, 3.7), 0.5);
        assert!((probit_probability(1.0, 0.0) - 0.8413447460685429).abs() < 1e-12);
        assert!((probit_probability(1.0, 3.0) - 0.6914624612740131).abs() < 1e-12);
    }

    #[test]
    fn negated_head_flips_probability() {
        let mut c = ModelConfig::new(2);
        c.hidden = vec![4];
        c.feature_dim = 2;
        c.num_inducing = 3;
        let mut p = IgnParameters::init(&c, 4).unwrap();
        p.head.w = array![[0.8], [-0.3]];
        p.head.b = 0.2;
        let x = array![[0.1, 0.2], [-1.0, 0.5], [2.0, -1.0]];
        let pos = predict_proba(&p, &x).unwrap();
        p.head.w.mapv_inplace(|v| -v);
        p.head.b = -p.head.b;
        let neg = predict_proba(&p, &x).unwrap();
        for (a, b) in pos.iter().zip(neg.iter()) {
            assert!((a + b - 1.0).abs() < 1e-10);
            assert!(*a > 0.0 && *a < 1.0);
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_lowest(&[0.3, 0.3, 0.3]), 0);
        assert_eq!(argmax_lowest(&[0.1, 0.7, 0.7]), 1);
        assert_eq!(argmax_lowest(&[0.1, 0.2, 0.9]), 2);
    }

    #[test]
    fn identical_heads_predict_class_zero() {
        let mut c = ModelConfig::new(2);
        c.hidden = vec![];
        c.feature_dim = 2;
        c.num_inducing = 2;
        let p = IgnParameters::init(&c, 1).unwrap();
        let ova = OneVsAll {
            heads: vec![p.clone(), p.clone(), p],
        };
        let x = array![[0.0, 1.0], [3.0, -2.0]];
        assert_eq!(ova.predict(&x).unwrap(), vec![0, 0]);
    }

    #[test]
    fn two_heads_reduce_to_larger_probability() {
        let mut c = ModelConfig::new(2);
        c.hidden = vec![];
        c.feature_dim = 2;
        c.num_inducing = 2;
        let mut p0 = IgnParameters::init(&c, 1).unwrap();
        p0.head.w = array![[1.0], [0.0]];
        let mut p1 = p0.clone();
        p1.head.w = array![[-1.0], [0.0]];
        let ova = OneVsAll {
            heads: vec![p0.clone(), p1],
        };
        let x = array![[0.5, 0.0], [-0.5, 0.0], [0.0, 0.0]];
        let p = predict_proba(&p0, &x).unwrap();
        let pred = ova.predict(&x).unwrap();
        for i in 0..3 {
            let want = if p[i] >= 1.0 - p[i] { 0 } else { 1 };
            assert_eq!(pred[i], want);
        }
    }

    #[test]
    fn one_vs_all_reports_failing_class() {
        let labels = vec![0, 1, 2, 1];
        let err = OneVsAll::train(&labels, 3, 1, |c, _| {
            if c == 1 {
                Err(IgnError::numerical("boom"))
            } else {
                let mut cfg = ModelConfig::new(1);
                cfg.hidden = vec![];
                cfg.feature_dim = 1;
                cfg.num_inducing = 1;
                IgnParameters::init(&cfg, 0)
            }
        })
        .unwrap_err();
        assert!(matches!(err, IgnError::ClassHead { class: 1, .. }));
        assert!(OneVsAll::train(&[0, 5], 3, 1, |_, _| unreachable!()).is_err());
        assert!(OneVsAll::train(&[0], 1, 1, |_, _| unreachable!()).is_err());
    }
}
