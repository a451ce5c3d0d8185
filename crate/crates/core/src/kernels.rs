//! Base kernels on feature-space vectors and the kernel blocks between
//! embedded inputs and inducing points.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{IgnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    /// `exp(−γ‖a−b‖²)`.
    Rbf,
    /// `aᵀb`.
    DotProduct,
}

impl std::str::FromStr for KernelKind {
    type Err = IgnError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rbf" => Ok(KernelKind::Rbf),
            "dot" | "dot-product" | "dotproduct" | "linear" => Ok(KernelKind::DotProduct),
            other => Err(IgnError::Schema(format!("unknown kernel '{other}'"))),
        }
    }
}

/// Kernel family plus its bandwidth, stored in log space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub log_gamma: f64,
    pub trainable: bool,
}

impl KernelSpec {
    pub fn rbf(gamma: f64) -> Self {
        KernelSpec {
            kind: KernelKind::Rbf,
            log_gamma: gamma.ln(),
            trainable: true,
        }
    }

    pub fn dot_product() -> Self {
        KernelSpec {
            kind: KernelKind::DotProduct,
            log_gamma: 0.0,
            trainable: false,
        }
    }

    pub fn gamma(&self) -> f64 {
        self.log_gamma.exp()
    }

    /// `k(a, a)` for a single feature vector.
    pub fn self_similarity(&self, a: &[f64]) -> f64 {
        match self.kind {
            KernelKind::Rbf => 1.0,
            KernelKind::DotProduct => a.iter().map(|v| v * v).sum(),
        }
    }
}

/// Records `k(A, B)` on the tape. `log_gamma` is ignored for the dot product.
pub fn kernel_matrix_var(
    tape: &mut Tape,
    kind: KernelKind,
    log_gamma: Var,
    a: Var,
    b: Var,
) -> Result<Var> {
    let (da, db) = (tape.shape(a).1, tape.shape(b).1);
    if da != db {
        return Err(IgnError::Dimension {
            op: "kernel_matrix",
            left: tape.shape(a),
            right: tape.shape(b),
        });
    }
    match kind {
        KernelKind::Rbf => {
            let d = tape.sq_dist(a, b)?;
            let gamma = tape.exp(log_gamma);
            let scaled = tape.scale(gamma, d)?;
            let neg = tape.scale_const(-1.0, scaled);
            Ok(tape.exp(neg))
        }
        KernelKind::DotProduct => {
            let bt = tape.transpose(b);
            tape.matmul(a, bt)
        }
    }
}

/// `k(A, B)` evaluated directly. Bitwise identical to the taped version.
pub fn kernel_matrix(spec: &KernelSpec, a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let lg = tape.scalar_constant(spec.log_gamma);
    let av = tape.constant(a.clone());
    let out = if a == b {
        kernel_matrix_var(&mut tape, spec.kind, lg, av, av)?
    } else {
        let bv = tape.constant(b.clone());
        kernel_matrix_var(&mut tape, spec.kind, lg, av, bv)?
    };
    Ok(tape.value(out).clone())
}

/// The three stored blocks; `K_ZX` is `kxz.t()`.
#[derive(Debug, Clone)]
pub struct KernelBlocks {
    pub kxx: Array2<f64>,
    pub kxz: Array2<f64>,
    pub kzz: Array2<f64>,
}

/// Tape handles for the kernel blocks.
#[derive(Debug, Clone, Copy)]
pub struct KernelBlockVars {
    pub kxx: Var,
    pub kxz: Var,
    pub kzz: Var,
}

pub fn kernel_block_vars(
    tape: &mut Tape,
    kind: KernelKind,
    log_gamma: Var,
    features: Var,
    z: Var,
) -> Result<KernelBlockVars> {
    if tape.shape(features).0 == 0 || tape.shape(z).0 == 0 {
        return Err(IgnError::contract("kernel blocks need b >= 1 and m >= 1"));
    }
    let kxz = kernel_matrix_var(tape, kind, log_gamma, features, z)?;
    let kxx = kernel_matrix_var(tape, kind, log_gamma, features, features)?;
    let kzz = kernel_matrix_var(tape, kind, log_gamma, z, z)?;
    Ok(KernelBlockVars { kxx, kxz, kzz })
}

pub fn kernel_blocks(spec: &KernelSpec, features: &Array2<f64>, z: &Array2<f64>) -> Result<KernelBlocks> {
    let mut tape = Tape::new();
    let lg = tape.scalar_constant(spec.log_gamma);
    let f = tape.constant(features.clone());
    let zv = tape.constant(z.clone());
    let v = kernel_block_vars(&mut tape, spec.kind, lg, f, zv)?;
    Ok(KernelBlocks {
        kxx: tape.value(v.kxx).clone(),
        kxz: tape.value(v.kxz).clone(),
        kzz: tape.value(v.kzz).clone(),
    })
}
