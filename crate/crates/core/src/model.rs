//! Learnable parts of an inducing Gaussian process network: the feature
//! map, the inducing set in feature space, the affine pseudo-label head,
//! the observation noise and the kernel bandwidth.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{IgnError, Result};
use crate::kernels::{KernelKind, KernelSpec};
use crate::rng::{sub_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `in × out`.
    pub weight: Array2<f64>,
    /// `1 × out`.
    pub bias: Array2<f64>,
    pub activation: Activation,
}

/// MLP `g: R^p → R^d`. The last layer is linear and produces the features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub layers: Vec<DenseLayer>,
}

impl FeatureMap {
    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(IgnError::contract("feature map needs at least one layer"));
        }
        for pair in self.layers.windows(2) {
            if pair[0].weight.ncols() != pair[1].weight.nrows() {
                return Err(IgnError::Dimension {
                    op: "feature_map",
                    left: pair[0].weight.dim(),
                    right: pair[1].weight.dim(),
                });
            }
        }
        for l in &self.layers {
            if l.bias.dim() != (1, l.weight.ncols()) {
                return Err(IgnError::Dimension {
                    op: "feature_map bias",
                    left: l.weight.dim(),
                    right: l.bias.dim(),
                });
            }
        }
        if self.layers.last().unwrap().activation != Activation::Identity {
            return Err(IgnError::contract("feature layer must be linear"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InducingSet {
    /// `m × d`.
    pub z: Array2<f64>,
}

impl InducingSet {
    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }
}

/// `r(z) = wᵀz + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelHead {
    /// `d × 1`.
    pub w: Array2<f64>,
    pub b: f64,
    pub use_bias: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub log_sigma_eps: f64,
}

impl NoiseModel {
    pub fn sigma(&self) -> f64 {
        self.log_sigma_eps.exp()
    }

    pub fn variance(&self) -> f64 {
        (2.0 * self.log_sigma_eps).exp()
    }
}

/// Shape and initialization choices for a fresh model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub num_inducing: usize,
    pub kernel: KernelKind,
    pub gamma: f64,
    pub train_gamma: bool,
    pub head_bias: bool,
    pub init_sigma_eps: f64,
}

impl ModelConfig {
    /// Three hidden ReLU layers of 128 units, 64 features, 512 inducing points, RBF γ = 1.
    pub fn new(input_dim: usize) -> Self {
        ModelConfig {
            input_dim,
            hidden: vec![128, 128, 128],
            feature_dim: 64,
            num_inducing: 512,
            kernel: KernelKind::Rbf,
            gamma: 1.0,
            train_gamma: true,
            head_bias: true,
            init_sigma_eps: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.num_inducing == 0 {
            return Err(IgnError::contract(
                "input_dim, feature_dim and num_inducing must be positive",
            ));
        }
        if self.hidden.contains(&0) {
            return Err(IgnError::contract("hidden widths must be positive"));
        }
        if !(self.gamma > 0.0) || !(self.init_sigma_eps > 0.0) {
            return Err(IgnError::contract("gamma and init_sigma_eps must be positive"));
        }
        Ok(())
    }
}

/// Parameter groups that can be frozen independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGroup {
    FeatureMap,
    Inducing,
    Head,
    Noise,
    Kernel,
}

/// Which groups receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trainable {
    pub feature_map: bool,
    pub inducing: bool,
    pub head: bool,
    pub noise: bool,
    pub kernel: bool,
}

impl Default for Trainable {
    fn default() -> Self {
        Trainable {
            feature_map: true,
            inducing: true,
            head: true,
            noise: true,
            kernel: true,
        }
    }
}

impl Trainable {
    pub fn allows(&self, g: ParamGroup) -> bool {
        match g {
            ParamGroup::FeatureMap => self.feature_map,
            ParamGroup::Inducing => self.inducing,
            ParamGroup::Head => self.head,
            ParamGroup::Noise => self.noise,
            ParamGroup::Kernel => self.kernel,
        }
    }
}

/// Full parameter set θ = {θ_g, Z, θ_r, σ_ε} plus the kernel bandwidth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IgnParameters {
    pub feature_map: FeatureMap,
    pub inducing: InducingSet,
    pub head: PseudoLabelHead,
    pub noise: NoiseModel,
    pub kernel: KernelSpec,
}

/// Tape handles for one bound copy of the parameters.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub layers: Vec<(Var, Var)>,
    pub z: Var,
    pub w: Var,
    pub b: Var,
    pub log_sigma_eps: Var,
    pub log_gamma: Var,
    pub kernel: KernelKind,
    activations: Vec<Activation>,
}

impl ParamVars {
    /// Handles in flattening order.
    pub fn vars(&self) -> Vec<Var> {
        let mut v = Vec::with_capacity(2 * self.layers.len() + 5);
        for &(w, b) in &self.layers {
            v.push(w);
            v.push(b);
        }
        v.extend([self.z, self.w, self.b, self.log_sigma_eps, self.log_gamma]);
        v
    }
}

fn he_init(rng: &mut ChaCha20Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
    Array2::from_shape_simple_fn((fan_in, fan_out), || normal.sample(rng))
}

impl IgnParameters {
    /// Deterministic initialization: He-normal weights, zero biases, standard
    /// normal `Z`, zero head, σ_ε from the config and `log γ = ln gamma`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = sub_rng(seed, Stream::Init, 0);
        let mut dims = vec![config.input_dim];
        dims.extend(&config.hidden);
        dims.push(config.feature_dim);
        let n_layers = dims.len() - 1;
        let layers = (0..n_layers)
            .map(|i| DenseLayer {
                weight: he_init(&mut rng, dims[i], dims[i + 1]),
                bias: Array2::zeros((1, dims[i + 1])),
                activation: if i + 1 == n_layers {
                    Activation::Identity
                } else {
                    Activation::Relu
                },
            })
            .collect();
        let z = Array2::from_shape_simple_fn((config.num_inducing, config.feature_dim), || {
            StandardNormal.sample(&mut rng)
        });
        let kernel = match config.kernel {
            KernelKind::Rbf => KernelSpec {
                kind: KernelKind::Rbf,
                log_gamma: config.gamma.ln(),
                trainable: config.train_gamma,
            },
            KernelKind::DotProduct => KernelSpec::dot_product(),
        };
        Ok(IgnParameters {
            feature_map: FeatureMap { layers },
            inducing: InducingSet { z },
            head: PseudoLabelHead {
                w: Array2::zeros((config.feature_dim, 1)),
                b: 0.0,
                use_bias: config.head_bias,
            },
            noise: NoiseModel {
                log_sigma_eps: config.init_sigma_eps.ln(),
            },
            kernel,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.feature_map.validate()?;
        let d = self.feature_map.output_dim();
        if self.inducing.is_empty() {
            return Err(IgnError::contract("inducing set must be non-empty"));
        }
        if self.inducing.z.ncols() != d {
            return Err(IgnError::Dimension {
                op: "inducing set",
                left: self.inducing.z.dim(),
                right: (self.inducing.len(), d),
            });
        }
        if self.head.w.dim() != (d, 1) {
            return Err(IgnError::Dimension {
                op: "pseudo-label head",
                left: self.head.w.dim(),
                right: (d, 1),
            });
        }
        if self.inducing.z.iter().any(|v| !v.is_finite()) {
            return Err(IgnError::numerical("inducing points"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.feature_map.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_map.output_dim()
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing.len()
    }

    /// Group of each tensor, in flattening order.
    pub fn groups(&self) -> Vec<ParamGroup> {
        let mut g = vec![ParamGroup::FeatureMap; 2 * self.feature_map.layers.len()];
        g.extend([
            ParamGroup::Inducing,
            ParamGroup::Head,
            ParamGroup::Head,
            ParamGroup::Noise,
            ParamGroup::Kernel,
        ]);
        g
    }

    /// Copies of every tensor in flattening order; scalars as 1×1.
    pub fn tensors(&self) -> Vec<Array2<f64>> {
        let mut t = Vec::new();
        for l in &self.feature_map.layers {
            t.push(l.weight.clone());
            t.push(l.bias.clone());
        }
        t.push(self.inducing.z.clone());
        t.push(self.head.w.clone());
        t.push(Array2::from_elem((1, 1), self.head.b));
        t.push(Array2::from_elem((1, 1), self.noise.log_sigma_eps));
        t.push(Array2::from_elem((1, 1), self.kernel.log_gamma));
        t
    }

    /// Whether each tensor receives gradients under `trainable`.
    pub fn trainable_mask(&self, trainable: &Trainable) -> Vec<bool> {
        let mut mask: Vec<bool> = self.groups().iter().map(|g| trainable.allows(*g)).collect();
        let n = mask.len();
        mask[n - 3] = mask[n - 3] && self.head.use_bias;
        mask[n - 1] = mask[n - 1] && self.kernel.trainable && self.kernel.kind == KernelKind::Rbf;
        mask
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for t in self.tensors() {
            out.extend(t.iter());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten); shapes come from `self`.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self> {
        let n = self.num_scalars();
        if flat.len() != n {
            return Err(IgnError::Dimension {
                op: "unflatten",
                left: (flat.len(), 1),
                right: (n, 1),
            });
        }
        let mut out = self.clone();
        let mut pos = 0;
        let mut take = |shape: (usize, usize)| {
            let len = shape.0 * shape.1;
            let a = Array2::from_shape_vec(shape, flat[pos..pos + len].to_vec()).unwrap();
            pos += len;
            a
        };
        for l in &mut out.feature_map.layers {
            l.weight = take(l.weight.dim());
            l.bias = take(l.bias.dim());
        }
        out.inducing.z = take(out.inducing.z.dim());
        out.head.w = take(out.head.w.dim());
        out.head.b = take((1, 1))[[0, 0]];
        out.noise.log_sigma_eps = take((1, 1))[[0, 0]];
        out.kernel.log_gamma = take((1, 1))[[0, 0]];
        Ok(out)
    }

    /// Places every tensor on the tape; frozen groups become constants.
    pub fn bind(&self, tape: &mut Tape, trainable: &Trainable) -> ParamVars {
        let mask = self.trainable_mask(trainable);
        let tensors = self.tensors();
        let vars: Vec<Var> = tensors
            .into_iter()
            .zip(mask)
            .map(|(t, req)| tape.leaf(t, req))
            .collect();
        let nl = self.feature_map.layers.len();
        ParamVars {
            layers: (0..nl).map(|i| (vars[2 * i], vars[2 * i + 1])).collect(),
            z: vars[2 * nl],
            w: vars[2 * nl + 1],
            b: vars[2 * nl + 2],
            log_sigma_eps: vars[2 * nl + 3],
            log_gamma: vars[2 * nl + 4],
            kernel: self.kernel.kind,
            activations: self.feature_map.layers.iter().map(|l| l.activation).collect(),
        }
    }

    /// Binds every tensor as a constant.
    pub fn bind_constant(&self, tape: &mut Tape) -> ParamVars {
        self.bind(
            tape,
            &Trainable {
                feature_map: false,
                inducing: false,
                head: false,
                noise: false,
                kernel: false,
            },
        )
    }

    /// `g(X)` evaluated without recording gradients.
    pub fn embed(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let pv = self.bind_constant(&mut tape);
        let xv = tape.constant(x.clone());
        let h = embed(&mut tape, &pv, xv)?;
        Ok(tape.value(h).clone())
    }

    /// `r_i = wᵀz_i + b` at the current inducing points.
    pub fn pseudo_labels(&self) -> Array1<f64> {
        let r = self.inducing.z.dot(&self.head.w);
        r.column(0).mapv(|v| v + self.head.b)
    }

    /// Replaces `Z` with embeddings of `m` training rows chosen without
    /// replacement (with replacement when `m > n`).
    pub fn init_z_from_data(&mut self, x_train: &Array2<f64>, seed: u64) -> Result<()> {
        let n = x_train.nrows();
        let m = self.num_inducing();
        if n == 0 {
            return Err(IgnError::contract("cannot initialize Z from an empty training set"));
        }
        let mut rng = sub_rng(seed, Stream::Init, 1);
        let idx: Vec<usize> = if m <= n {
            rand::seq::index::sample(&mut rng, n, m).into_vec()
        } else {
            (0..m).map(|_| rng.random_range(0..n)).collect()
        };
        let rows = x_train.select(ndarray::Axis(0), &idx);
        self.inducing.z = self.embed(&rows)?;
        Ok(())
    }
}

/// Records `g(X)` on the tape.
pub fn embed(tape: &mut Tape, pv: &ParamVars, x: Var) -> Result<Var> {
    let mut h = x;
    for (&(w, b), act) in pv.layers.iter().zip(&pv.activations) {
        let lin = tape.matmul(h, w).map_err(|e| match e {
            IgnError::Dimension { left, right, .. } => IgnError::Dimension {
                op: "embed",
                left,
                right,
            },
            e => e,
        })?;
        let pre = tape.add_row_broadcast(lin, b)?;
        h = match act {
            Activation::Relu => tape.relu(pre),
            Activation::Identity => pre,
        };
    }
    Ok(h)
}

/// Records `r = Z w + b` as an m×1 column.
pub fn pseudo_labels(tape: &mut Tape, pv: &ParamVars, z: Var) -> Result<Var> {
    let zw = tape.matmul(z, pv.w)?;
    let m = tape.shape(z).0;
    let ones = tape.constant(Array2::ones((m, 1)));
    let bias = tape.scale(pv.b, ones)?;
    tape.add(zw, bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny_params(input: usize, hidden: Vec<usize>, d: usize, m: usize) -> IgnParameters {
        let mut c = ModelConfig::new(input);
        c.hidden = hidden;
        c.feature_dim = d;
        c.num_inducing = m;
        IgnParameters::init(&c, 3).unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut p = tiny_params(2, vec![], 2, 1);
        p.feature_map.layers[0].weight = Array2::eye(2);
        let x = array![[1.5, -2.0], [0.0, 3.0]];
        assert_eq!(p.embed(&x).unwrap(), x);
    }

    #[test]
    fn relu_layer_clamps() {
        let mut p = tiny_params(2, vec![2], 2, 1);
        p.feature_map.layers[0].weight = Array2::eye(2);
        p.feature_map.layers[1].weight = Array2::eye(2);
        let x = array![[-1.0, 2.0]];
        assert_eq!(p.embed(&x).unwrap(), array![[0.0, 2.0]]);
    }

    #[test]
    fn default_network_shapes() {
        let c = ModelConfig::new(4);
        let p = IgnParameters::init(&c, 0).unwrap();
        assert_eq!(p.feature_map.layers.len(), 4);
        let x = Array2::from_shape_fn((5, 4), |(i, j)| (i as f64 - 2.0) * 0.3 + j as f64 * 0.1);
        let h = p.embed(&x).unwrap();
        assert_eq!(h.dim(), (5, 64));
        assert!(h.iter().all(|v| v.is_finite()));
        assert_eq!(p.inducing.z.dim(), (512, 64));
    }

    #[test]
    fn embed_rejects_wrong_width() {
        let p = tiny_params(3, vec![4], 2, 2);
        let err = p.embed(&Array2::zeros((2, 5))).unwrap_err();
        assert!(matches!(err, IgnError::Dimension { op: "embed", .. }));
    }

    #[test]
    fn pseudo_label_cases() {
        let mut p = tiny_params(2, vec![], 2, 2);
        p.head.b = 1.25;
        assert_eq!(p.pseudo_labels(), array![1.25, 1.25]);

        p.head.w = array![[1.0], [0.0]];
        p.head.b = 0.0;
        p.inducing.z = array![[3.0, 9.0], [-1.0, 4.0]];
        assert_eq!(p.pseudo_labels(), array![3.0, -1.0]);

        let mut tape = Tape::new();
        let pv = p.bind_constant(&mut tape);
        let r = pseudo_labels(&mut tape, &pv, pv.z).unwrap();
        assert_eq!(tape.value(r), &array![[3.0], [-1.0]]);
    }

    #[test]
    fn pseudo_labels_match_row_loop() {
        let mut p = tiny_params(2, vec![3], 3, 5);
        p.head.w = array![[0.4], [-1.1], [2.0]];
        p.head.b = -0.3;
        let r = p.pseudo_labels();
        for i in 0..5 {
            let mut acc = p.head.b;
            for k in 0..3 {
                acc += p.head.w[[k, 0]] * p.inducing.z[[i, k]];
            }
            assert!((r[i] - acc).abs() < 1e-14);
        }
    }

    #[test]
    fn init_is_deterministic_and_round_trips() {
        let c = ModelConfig::new(3);
        let a = IgnParameters::init(&c, 42).unwrap();
        let b = IgnParameters::init(&c, 42).unwrap();
        assert_eq!(a, b);
        let other = IgnParameters::init(&c, 43).unwrap();
        assert_ne!(a, other);
        let flat = a.flatten();
        assert_eq!(a.unflatten(&flat).unwrap(), a);
        assert!(a.unflatten(&flat[1..]).is_err());
        assert_eq!(a.noise.sigma(), 0.5);
        assert_eq!(a.kernel.log_gamma, 0.0);
        assert!(a.head.w.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_is_batch_consistent() {
        let p = tiny_params(3, vec![8, 8], 4, 2);
        let x = Array2::from_shape_fn((6, 3), |(i, j)| ((i * 3 + j) as f64).sin());
        let all = p.embed(&x).unwrap();
        for i in 0..6 {
            let row = x.slice(ndarray::s![i..i + 1, ..]).to_owned();
            let single = p.embed(&row).unwrap();
            assert_eq!(single.row(0), all.row(i));
        }
    }

    #[test]
    fn frozen_groups_bind_as_constants() {
        let p = tiny_params(2, vec![3], 2, 2);
        let mut tape = Tape::new();
        let t = Trainable {
            feature_map: false,
            ..Trainable::default()
        };
        let pv = p.bind(&mut tape, &t);
        assert!(!tape.requires_grad(pv.layers[0].0));
        assert!(tape.requires_grad(pv.z));
        assert!(tape.requires_grad(pv.log_gamma));
    }

    #[test]
    fn bad_config_rejected() {
        let mut c = ModelConfig::new(2);
        c.num_inducing = 0;
        assert!(IgnParameters::init(&c, 0).is_err());
    }
}
