//! Regression objective and predictive distribution.
//!
//! Given embedded inputs, the model conditions a zero-mean GP on the
//! pseudo-labels `r` observed at the inducing points:
//!
//! ```text
//! ŷ       = K_XZ K_ZZ⁻¹ r
//! K_{X|Z} = K_XX + σ²I − K_XZ K_ZZ⁻¹ K_ZX
//! NLL     = ½ (y−ŷ)ᵀ K_{X|Z}⁻¹ (y−ŷ) + ½ log|K_{X|Z}| + (b/2) log 2π
//! ```
//!
//! Each mini-batch is treated as a complete dataset for the objective.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{IgnError, Result};
use crate::kernels::{kernel_block_vars, kernel_matrix_var, KernelBlockVars, KernelBlocks};
use crate::model::{embed, pseudo_labels, IgnParameters, ParamVars};

/// Predictive variances in `[−VARIANCE_CLAMP, 0)` are read as zero.
pub const VARIANCE_CLAMP: f64 = 1e-8;

/// GP conditioned on the inducing pseudo-labels, restricted to a batch.
#[derive(Debug, Clone, Copy)]
pub struct Conditional {
    /// `b × 1` mean `K_XZ K_ZZ⁻¹ r`.
    pub mean: Var,
    /// `b × b` covariance `K_XX − K_XZ K_ZZ⁻¹ K_ZX` (no observation noise).
    pub cov: Var,
    pub blocks: KernelBlockVars,
}

/// Records the conditional of the batch given `(Z, r)` on the tape.
pub fn condition_on_inducing(tape: &mut Tape, pv: &ParamVars, features: Var) -> Result<Conditional> {
    let blocks = kernel_block_vars(tape, pv.kernel, pv.log_gamma, features, pv.z)?;
    let r = pseudo_labels(tape, pv, pv.z)?;
    let (mean, cov) = condition_blocks(tape, &blocks, r)?;
    Ok(Conditional { mean, cov, blocks })
}

fn condition_blocks(tape: &mut Tape, blocks: &KernelBlockVars, r: Var) -> Result<(Var, Var)> {
    let alpha = tape.chol_solve(blocks.kzz, r)?;
    let mean = tape.matmul(blocks.kxz, alpha)?;
    let kzx = tape.transpose(blocks.kxz);
    let v = tape.chol_solve(blocks.kzz, kzx)?;
    let explained = tape.matmul(blocks.kxz, v)?;
    let cov = tape.sub(blocks.kxx, explained)?;
    Ok((mean, cov))
}

/// `K_XZ K_ZZ⁻¹ r` for precomputed blocks.
pub fn predictive_mean(blocks: &KernelBlocks, r: &Array1<f64>) -> Result<Array1<f64>> {
    let mut tape = Tape::new();
    let kzz = tape.constant(blocks.kzz.clone());
    let kxz = tape.constant(blocks.kxz.clone());
    if r.len() != blocks.kzz.nrows() {
        return Err(IgnError::Dimension {
            op: "predictive_mean",
            left: blocks.kzz.dim(),
            right: (r.len(), 1),
        });
    }
    let rv = tape.constant(r.clone().insert_axis(Axis(1)));
    let alpha = tape.chol_solve(kzz, rv)?;
    let mean = tape.matmul(kxz, alpha)?;
    Ok(tape.value(mean).column(0).to_owned())
}

/// `K_XX − K_XZ K_ZZ⁻¹ K_ZX`, plus `σ²I` when `include_noise`.
pub fn posterior_kernel(blocks: &KernelBlocks, sigma_eps: f64, include_noise: bool) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let vars = KernelBlockVars {
        kxx: tape.constant(blocks.kxx.clone()),
        kxz: tape.constant(blocks.kxz.clone()),
        kzz: tape.constant(blocks.kzz.clone()),
    };
    let r = tape.constant(Array2::zeros((blocks.kzz.nrows(), 1)));
    let (_, cov) = condition_blocks(&mut tape, &vars, r)?;
    let mut out = tape.value(cov).clone();
    if include_noise {
        let s2 = sigma_eps * sigma_eps;
        out.diag_mut().mapv_inplace(|v| v + s2);
    }
    Ok(out)
}

fn check_finite(tape: &Tape, v: Var, term: &str) -> Result<()> {
    if tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(IgnError::numerical(term))
    }
}

/// Records the per-batch negative log-likelihood.
pub fn nll_loss(tape: &mut Tape, pv: &ParamVars, x: &Array2<f64>, y: &Array1<f64>) -> Result<Var> {
    let b = x.nrows();
    if b == 0 {
        return Err(IgnError::contract("nll_loss needs a non-empty batch"));
    }
    if y.len() != b {
        return Err(IgnError::Dimension {
            op: "nll_loss",
            left: x.dim(),
            right: (y.len(), 1),
        });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(IgnError::contract("targets must be finite"));
    }
    let xv = tape.constant(x.clone());
    let features = embed(tape, pv, xv)?;
    check_finite(tape, features, "features")?;
    let cond = condition_on_inducing(tape, pv, features)?;

    let two_log_sigma = tape.scale_const(2.0, pv.log_sigma_eps);
    let sigma2 = tape.exp(two_log_sigma);
    let kpost = tape.add_scaled_identity(cond.cov, sigma2)?;
    check_finite(tape, kpost, "posterior kernel")?;

    let yv = tape.constant(y.clone().insert_axis(Axis(1)));
    let resid = tape.sub(yv, cond.mean)?;
    check_finite(tape, resid, "residual")?;

    let quad = tape.quad_form(kpost, resid)?;
    check_finite(tape, quad, "quadratic term")?;
    let logdet = tape.logdet(kpost)?;
    check_finite(tape, logdet, "log-determinant term")?;

    let data_fit = tape.scale_const(0.5, quad);
    let complexity = tape.scale_const(0.5, logdet);
    let sum = tape.add(data_fit, complexity)?;
    let constant = tape.scalar_constant(0.5 * b as f64 * (2.0 * PI).ln());
    let loss = tape.add(sum, constant)?;
    check_finite(tape, loss, "nll")?;
    Ok(loss)
}

/// Scalar NLL value without keeping the tape.
pub fn nll_value(params: &IgnParameters, x: &Array2<f64>, y: &Array1<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let pv = params.bind_constant(&mut tape);
    let l = nll_loss(&mut tape, &pv, x, y)?;
    Ok(tape.scalar(l))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceMode {
    Diag,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Covariance {
    Diag(Array1<f64>),
    Full(Array2<f64>),
}

/// Mean and (co)variance of the predictive distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    pub mean: Array1<f64>,
    pub cov: Covariance,
    pub includes_noise: bool,
}

impl PredictiveDistribution {
    pub fn variance(&self) -> Array1<f64> {
        match &self.cov {
            Covariance::Diag(v) => v.clone(),
            Covariance::Full(c) => c.diag().to_owned(),
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

fn clamp_variance(v: f64) -> Result<f64> {
    if v >= 0.0 {
        Ok(v)
    } else if v >= -VARIANCE_CLAMP {
        Ok(0.0)
    } else if v.is_nan() {
        Err(IgnError::numerical("predictive variance is NaN"))
    } else {
        Err(IgnError::numerical(format!("predictive variance {v:e} is negative")))
    }
}

/// Predictive distribution at `x_star`.
///
/// `Diag` mode never forms `K_X*X*` and costs `O(p·m²)`.
pub fn predict(
    params: &IgnParameters,
    x_star: &Array2<f64>,
    want: CovarianceMode,
    include_noise: bool,
) -> Result<PredictiveDistribution> {
    if x_star.nrows() == 0 {
        return Err(IgnError::contract("predict needs at least one input"));
    }
    let mut tape = Tape::new();
    let pv = params.bind_constant(&mut tape);
    let xv = tape.constant(x_star.clone());
    let features = embed(&mut tape, &pv, xv)?;
    let noise = if include_noise {
        params.noise.variance()
    } else {
        0.0
    };
    match want {
        CovarianceMode::Full => {
            let cond = condition_on_inducing(&mut tape, &pv, features)?;
            let mean = tape.value(cond.mean).column(0).to_owned();
            let mut cov = tape.value(cond.cov).clone();
            for i in 0..cov.nrows() {
                cov[[i, i]] = clamp_variance(cov[[i, i]])? + noise;
            }
            Ok(PredictiveDistribution {
                mean,
                cov: Covariance::Full(cov),
                includes_noise: include_noise,
            })
        }
        CovarianceMode::Diag => {
            let kxz = kernel_matrix_var(&mut tape, pv.kernel, pv.log_gamma, features, pv.z)?;
            let kzz = kernel_matrix_var(&mut tape, pv.kernel, pv.log_gamma, pv.z, pv.z)?;
            let r = pseudo_labels(&mut tape, &pv, pv.z)?;
            let alpha = tape.chol_solve(kzz, r)?;
            let mean = tape.matmul(kxz, alpha)?;
            let kzx = tape.transpose(kxz);
            let v = tape.chol_solve(kzz, kzx)?;
            let kxz_val = tape.value(kxz);
            let v_val = tape.value(v);
            let feats = tape.value(features);
            let mut var = Array1::zeros(x_star.nrows());
            for i in 0..x_star.nrows() {
                let prior = params
                    .kernel
                    .self_similarity(feats.row(i).as_slice().expect("row-major"));
                let explained = kxz_val.row(i).dot(&v_val.column(i));
                var[i] = clamp_variance(prior - explained)? + noise;
            }
            Ok(PredictiveDistribution {
                mean: tape.value(mean).column(0).to_owned(),
                cov: Covariance::Diag(var),
                includes_noise: include_noise,
            })
        }
    }
}
