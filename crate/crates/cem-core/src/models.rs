//! Energy models and their exact brute-force oracles.
//!
//! Both model families share an MLP [`Encoder`] g: ℝⁿ → ℝᵐ. The parametric
//! model scores (input, class) pairs as `f(x, y) = g(x)ᵀ w_y`, i.e. the y-th
//! logit; the non-parametric model scores (input, input) pairs as
//! `f(x, x') = g(x)ᵀ g(x')`. Plain dot products: no feature normalization,
//! no temperature.
//!
//! [`GridDomain`] is a finite discretization of the input space on which
//! partition functions and model expectations are exact sums — the oracle
//! stance used by the verification suite.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::error::{CemError, Result};
use crate::rng;
use crate::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

/// Named trainable tensor.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone)]
pub struct DenseLayer {
    /// `[fan_in, fan_out]`
    pub weight: Param,
    /// `[fan_out]`
    pub bias: Param,
}

/// MLP encoder g: ℝⁿ → ℝᵐ. Hidden layers use `activation`; the output layer
/// is linear. An empty layer list is the identity map (m = n), which is what
/// the hand-computable fixtures use.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub input_dim: usize,
    pub feature_dim: usize,
    pub layers: Vec<DenseLayer>,
    pub activation: Activation,
}

impl Encoder {
    /// Identity encoder: features are the raw inputs.
    pub fn identity(dim: usize) -> Self {
        Encoder {
            input_dim: dim,
            feature_dim: dim,
            layers: Vec::new(),
            activation: Activation::Tanh,
        }
    }

    /// MLP with the given hidden widths, weights drawn from N(0, 1/fan_in),
    /// zero biases.
    pub fn mlp(
        input_dim: usize,
        hidden: &[usize],
        feature_dim: usize,
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut layers = Vec::new();
        let mut fan_in = input_dim;
        for (i, &width) in hidden.iter().chain(std::iter::once(&feature_dim)).enumerate() {
            let std = 1.0 / (fan_in as f64).sqrt();
            let values: Vec<f64> = (0..fan_in * width).map(|_| rng::normal(rng) * std).collect();
            layers.push(DenseLayer {
                weight: Param {
                    name: format!("enc.l{i}.w"),
                    tensor: Tensor::new(vec![fan_in, width], values).unwrap(),
                },
                bias: Param {
                    name: format!("enc.l{i}.b"),
                    tensor: Tensor::zeros(vec![width]),
                },
            });
            fan_in = width;
        }
        Encoder {
            input_dim,
            feature_dim,
            layers,
            activation,
        }
    }

    /// Default trainable encoder: one hidden layer of width 64, tanh,
    /// 16 features.
    pub fn default_mlp(input_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Encoder::mlp(input_dim, &[64], 16, Activation::Tanh, rng)
    }

    /// Push parameter leaves onto `tape`; gradients flow into them iff
    /// `track`.
    pub fn bind(&self, tape: &mut Tape, track: bool) -> BoundEncoder {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                (
                    tape.leaf(l.weight.tensor.clone(), track),
                    tape.leaf(l.bias.tensor.clone(), track),
                )
            })
            .collect();
        BoundEncoder {
            layers,
            activation: self.activation,
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// Encoder parameters already on a tape; reusable across several forward
/// calls so gradients from all of them accumulate into the same leaves.
pub struct BoundEncoder {
    layers: Vec<(Var, Var)>,
    activation: Activation,
}

impl BoundEncoder {
    /// `x`: `[N, n]` batch or `[n]` single input.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len().saturating_sub(1);
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            let z = tape.add(z, b)?;
            h = if i == last {
                z
            } else {
                match self.activation {
                    Activation::Tanh => tape.tanh(z),
                    Activation::Relu => tape.relu(z),
                }
            };
        }
        Ok(h)
    }

    /// Parameter vars in the same order as [`Encoder::params`].
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

// ── Parametric model ─────────────────────────────────────────────────────

/// Joint energy over (input, class): `f(x, y) = g(x)ᵀ w_y = h(x)[y]`, where
/// `W = [w_1 … w_K]` holds the parametric cluster centers of the K classes.
#[derive(Debug, Clone)]
pub struct PCemModel {
    pub encoder: Encoder,
    /// `[m, K]`
    pub class_weights: Param,
}

impl PCemModel {
    pub fn new(encoder: Encoder, class_weights: Tensor) -> Result<Self> {
        if class_weights.shape.len() != 2 || class_weights.shape[0] != encoder.feature_dim {
            return Err(CemError::contract(format!(
                "class weights {:?} incompatible with feature dim {}",
                class_weights.shape, encoder.feature_dim
            )));
        }
        Ok(PCemModel {
            encoder,
            class_weights: Param {
                name: "w".to_string(),
                tensor: class_weights,
            },
        })
    }

    pub fn random(
        input_dim: usize,
        hidden: &[usize],
        feature_dim: usize,
        n_classes: usize,
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let encoder = Encoder::mlp(input_dim, hidden, feature_dim, activation, rng);
        let std = 1.0 / (feature_dim as f64).sqrt();
        let values = (0..feature_dim * n_classes)
            .map(|_| rng::normal(rng) * std)
            .collect();
        PCemModel::new(encoder, Tensor::new(vec![feature_dim, n_classes], values).unwrap()).unwrap()
    }

    pub fn n_classes(&self) -> usize {
        self.class_weights.tensor.shape[1]
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim
    }

    pub fn bind(&self, tape: &mut Tape, track: bool) -> BoundPcem {
        let enc = self.encoder.bind(tape, track);
        let w = tape.leaf(self.class_weights.tensor.clone(), track);
        BoundPcem { enc, w }
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut ps = self.encoder.params();
        ps.push(&self.class_weights);
        ps
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = self.encoder.params_mut();
        ps.push(&mut self.class_weights);
        ps
    }

    /// `f(x, y)` for a single input.
    pub fn energy(&self, x: &[f64], y: usize) -> Result<f64> {
        let logits = self.logit_values(x)?;
        if y >= logits.len() {
            return Err(CemError::contract(format!(
                "class index {y} out of range for {} classes",
                logits.len()
            )));
        }
        Ok(logits[y])
    }

    /// Logit vector `h(x)` for a single input.
    pub fn logit_values(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(CemError::contract(format!(
                "input dim {} != model dim {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(Tensor::vector(x.to_vec()));
        let logits = bound.logits(&mut tape, xv)?;
        Ok(tape.values(logits).to_vec())
    }

    /// Softmax class probabilities `p(·|x)`; entries sum to one.
    pub fn cond_label_prob(&self, x: &[f64]) -> Result<Vec<f64>> {
        let logits = self.logit_values(x)?;
        let lse = crate::autodiff::logsumexp_slice(&logits);
        Ok(logits.iter().map(|&l| (l - lse).exp()).collect())
    }

    /// Unnormalized log marginal `log Σ_k exp f(x, k)`.
    pub fn marginal_score(&self, x: &[f64]) -> Result<f64> {
        let logits = self.logit_values(x)?;
        Ok(crate::autodiff::logsumexp_slice(&logits))
    }

    /// Logits for a whole batch in one pass: `[N, K]`.
    pub fn batch_logits(&self, xs: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(xs.clone());
        let logits = bound.logits(&mut tape, x)?;
        Ok(tape.tensor(logits).clone())
    }

    /// Logits for every grid point in one batched pass: `[G, K]`.
    pub fn grid_logits(&self, grid: &GridDomain) -> Result<Tensor> {
        self.batch_logits(&grid.points)
    }

    /// Exact partition function over the grid:
    /// `Z = Σ_{x∈grid} Σ_k exp f(x,k) · cell_weight`, computed in log space
    /// so extreme energies cannot overflow the sum.
    pub fn exact_partition(&self, grid: &GridDomain) -> Result<Partition> {
        let logits = self.grid_logits(grid)?;
        let log_z = crate::autodiff::logsumexp_slice(&logits.values) + grid.cell_weight.ln();
        Ok(Partition {
            z: log_z.exp(),
            log_z,
        })
    }

    /// Exact joint probability table over (grid point, class).
    pub fn exact_joint_grid(&self, grid: &GridDomain) -> Result<JointTable> {
        let logits = self.grid_logits(grid)?;
        let partition = self.exact_partition(grid)?;
        let ln_cw = grid.cell_weight.ln();
        let probs: Vec<f64> = logits
            .values
            .iter()
            .map(|&f| (f + ln_cw - partition.log_z).exp())
            .collect();
        Ok(JointTable {
            probs: Tensor::new(logits.shape.clone(), probs)?,
            partition,
        })
    }
}

/// Partition function reported both ways; `z` may overflow to infinity for
/// extreme energies while `log_z` stays usable.
#[derive(Debug, Clone, Copy)]
pub struct Partition {
    pub z: f64,
    pub log_z: f64,
}

/// Normalized joint table `p(x, k)` over a grid.
#[derive(Debug, Clone)]
pub struct JointTable {
    /// `[G, K]`
    pub probs: Tensor,
    pub partition: Partition,
}

impl JointTable {
    /// Marginal `p(x)` per grid point.
    pub fn marginal(&self) -> Vec<f64> {
        (0..self.probs.shape[0])
            .map(|g| self.probs.row(g).iter().sum())
            .collect()
    }
}

/// Parameter leaves of a P-CEM on a tape.
pub struct BoundPcem {
    pub enc: BoundEncoder,
    pub w: Var,
}

impl BoundPcem {
    /// Logits `h(x) = g(x)ᵀ W`: `[N, K]` for batch input, `[K]` for single.
    pub fn logits(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = self.enc.forward(tape, x)?;
        tape.matmul(g, self.w)
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut vs = self.enc.vars();
        vs.push(self.w);
        vs
    }
}

// ── Non-parametric model ─────────────────────────────────────────────────

/// Pairwise energy over inputs: `f(x, x') = g(x)ᵀ g(x')`, symmetric by
/// construction.
#[derive(Debug, Clone)]
pub struct NPCemModel {
    pub encoder: Encoder,
}

impl NPCemModel {
    pub fn new(encoder: Encoder) -> Self {
        NPCemModel { encoder }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim
    }

    pub fn bind(&self, tape: &mut Tape, track: bool) -> BoundEncoder {
        self.encoder.bind(tape, track)
    }

    pub fn params(&self) -> Vec<&Param> {
        self.encoder.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.encoder.params_mut()
    }

    /// `f(x, x')` for a single pair.
    pub fn energy(&self, x: &[f64], x2: &[f64]) -> Result<f64> {
        if x.len() != self.input_dim() || x2.len() != self.input_dim() {
            return Err(CemError::ShapeMismatch {
                op: "energy_npcem",
                lhs: vec![x.len()],
                rhs: vec![x2.len()],
            });
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let a = tape.constant(Tensor::vector(x.to_vec()));
        let b = tape.constant(Tensor::vector(x2.to_vec()));
        let ga = bound.forward(&mut tape, a)?;
        let gb = bound.forward(&mut tape, b)?;
        let d = tape.dot(ga, gb)?;
        Ok(tape.item(d))
    }

    /// Feature matrix for a batch: `[N, m]`.
    pub fn feature_values(&self, xs: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(xs.clone());
        let g = bound.forward(&mut tape, x)?;
        Ok(tape.tensor(g).clone())
    }
}

// ── Sampler-facing traits ────────────────────────────────────────────────

/// Anything producing class-style logits `[N, K]` from a batch `[N, n]`,
/// parameters held constant. Supervised sampling rules need only this.
pub trait LogitEnergy: Send + Sync {
    fn input_dim(&self) -> usize;
    fn n_classes(&self) -> usize;
    fn logits_on(&self, tape: &mut Tape, x: Var) -> Result<Var>;
}

impl LogitEnergy for PCemModel {
    fn input_dim(&self) -> usize {
        self.encoder.input_dim
    }

    fn n_classes(&self) -> usize {
        PCemModel::n_classes(self)
    }

    fn logits_on(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let bound = self.bind(tape, false);
        bound.logits(tape, x)
    }
}

/// Closed-form fixture whose marginal score is `−‖x‖²/2` (K = 1), so Langevin
/// dynamics on it targets the standard normal.
#[derive(Debug, Clone, Copy)]
pub struct QuadraticEnergy {
    pub dim: usize,
}

impl LogitEnergy for QuadraticEnergy {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn n_classes(&self) -> usize {
        1
    }

    fn logits_on(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let batched = tape.shape(x).len() == 2;
        let n = tape.tensor(x).n_rows();
        let sq = tape.square(x);
        let ones = tape.constant(Tensor::vector(vec![1.0; self.dim]));
        let rows = tape.matmul(sq, ones)?;
        let scaled = tape.scale(rows, -0.5);
        if batched {
            tape.reshape(scaled, vec![n, 1])
        } else {
            tape.reshape(scaled, vec![1])
        }
    }
}

/// Anything producing encoder features from a batch, parameters constant.
/// Unsupervised sampling rules need this.
pub trait FeatureMap: Send + Sync {
    fn input_dim(&self) -> usize;
    fn feature_dim(&self) -> usize;
    fn features_on(&self, tape: &mut Tape, x: Var) -> Result<Var>;
}

impl FeatureMap for NPCemModel {
    fn input_dim(&self) -> usize {
        self.encoder.input_dim
    }

    fn feature_dim(&self) -> usize {
        self.encoder.feature_dim
    }

    fn features_on(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let bound = self.bind(tape, false);
        bound.forward(tape, x)
    }
}

// ── Grid domain ──────────────────────────────────────────────────────────

/// Metadata of an axis-aligned regular lattice, kept so sample histograms
/// can bin in O(1).
#[derive(Debug, Clone)]
pub struct RegularGrid {
    pub lo: f64,
    pub hi: f64,
    pub per_axis: usize,
    pub dim: usize,
}

impl RegularGrid {
    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.per_axis - 1) as f64
    }

    /// Index of the lattice point nearest to `x` (clamped onto the grid).
    pub fn bin(&self, x: &[f64]) -> usize {
        let step = self.step();
        let mut idx = 0usize;
        for &c in x.iter().take(self.dim) {
            let i = ((c - self.lo) / step).round().clamp(0.0, (self.per_axis - 1) as f64) as usize;
            idx = idx * self.per_axis + i;
        }
        idx
    }
}

/// Finite stand-in for the input space: a list of points with a quadrature
/// weight per point.
#[derive(Debug, Clone)]
pub struct GridDomain {
    /// `[G, dim]`
    pub points: Tensor,
    pub cell_weight: f64,
    pub regular: Option<RegularGrid>,
}

impl GridDomain {
    pub fn new(points: Tensor, cell_weight: f64) -> Result<Self> {
        if points.n_rows() == 0 {
            return Err(CemError::contract("grid must be non-empty"));
        }
        if cell_weight <= 0.0 {
            return Err(CemError::contract("cell_weight must be positive"));
        }
        Ok(GridDomain {
            points,
            cell_weight,
            regular: None,
        })
    }

    /// Regular lattice with `per_axis` points per axis over `[lo, hi]^dim`;
    /// cell weight is the lattice spacing to the power `dim`. The first axis
    /// varies slowest, matching [`RegularGrid::bin`].
    pub fn regular(lo: f64, hi: f64, per_axis: usize, dim: usize) -> Self {
        assert!(per_axis >= 2 && dim >= 1);
        let step = (hi - lo) / (per_axis - 1) as f64;
        let count = per_axis.pow(dim as u32);
        let mut values = Vec::with_capacity(count * dim);
        for flat in 0..count {
            let mut rem = flat;
            let mut coords = vec![0.0; dim];
            for d in (0..dim).rev() {
                coords[d] = lo + (rem % per_axis) as f64 * step;
                rem /= per_axis;
            }
            values.extend(coords);
        }
        GridDomain {
            points: Tensor::new(vec![count, dim], values).unwrap(),
            cell_weight: step.powi(dim as i32),
            regular: Some(RegularGrid {
                lo,
                hi,
                per_axis,
                dim,
            }),
        }
    }

    /// Default oracle grid: 41×41 over `[−3, 3]²`.
    pub fn default_2d() -> Self {
        GridDomain::regular(-3.0, 3.0, 41, 2)
    }

    pub fn len(&self) -> usize {
        self.points.n_rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, i: usize) -> &[f64] {
        self.points.row(i)
    }
}

/// Either model family, as stored in checkpoints and driven by the CLI.
#[derive(Debug, Clone)]
pub enum Model {
    Pcem(PCemModel),
    Npcem(NPCemModel),
}

impl Model {
    pub fn params(&self) -> Vec<&Param> {
        match self {
            Model::Pcem(m) => m.params(),
            Model::Npcem(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Model::Pcem(m) => m.params_mut(),
            Model::Npcem(m) => m.params_mut(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Model::Pcem(m) => m.input_dim(),
            Model::Npcem(m) => m.input_dim(),
        }
    }

    pub fn as_pcem(&self) -> Result<&PCemModel> {
        match self {
            Model::Pcem(m) => Ok(m),
            Model::Npcem(_) => Err(CemError::contract(
                "operation requires a parametric model checkpoint",
            )),
        }
    }

    pub fn as_npcem(&self) -> Result<&NPCemModel> {
        match self {
            Model::Npcem(m) => Ok(m),
            Model::Pcem(_) => Err(CemError::contract(
                "operation requires a non-parametric model checkpoint",
            )),
        }
    }
}

// ── Fixtures ─────────────────────────────────────────────────────────────

/// Canonical hand-computable fixture: identity encoder on ℝ², W = I₂, so the
/// logits of `x` are `x` itself.
pub fn fixture_lin() -> PCemModel {
    PCemModel::new(
        Encoder::identity(2),
        Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
    )
    .unwrap()
}

/// Identity-encoder fixture with a single class weight `e₁`, for the K = 1
/// edge cases.
pub fn fixture_lin_single_class() -> PCemModel {
    PCemModel::new(
        Encoder::identity(2),
        Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap(),
    )
    .unwrap()
}

/// Identity-encoder non-parametric fixture on ℝ².
pub fn fixture_np_identity() -> NPCemModel {
    NPCemModel::new(Encoder::identity(2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{finite_diff_grad, max_rel_err};
    use approx::assert_relative_eq;

    #[test]
    fn fixture_energy_examples() {
        let m = fixture_lin();
        assert_eq!(m.energy(&[1.0, 0.0], 0).unwrap(), 1.0);
        assert_eq!(m.energy(&[1.0, 0.0], 1).unwrap(), 0.0);
        assert_eq!(m.energy(&[0.0, 0.0], 0).unwrap(), 0.0);
        assert_eq!(m.energy(&[0.0, 0.0], 1).unwrap(), 0.0);
    }

    #[test]
    fn energy_rejects_class_out_of_range() {
        let m = fixture_lin();
        assert!(m.energy(&[1.0, 0.0], 2).is_err());
    }

    #[test]
    fn npcem_energy_examples() {
        let m = fixture_np_identity();
        assert_eq!(m.energy(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(m.energy(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(m.energy(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        assert!(m.energy(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn npcem_symmetry_on_random_inputs() {
        let mut rng = rng::stream(11, 0);
        let enc = Encoder::mlp(3, &[8], 4, Activation::Tanh, &mut rng);
        let m = NPCemModel::new(enc);
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| rng::normal(&mut rng)).collect();
            let y: Vec<f64> = (0..3).map(|_| rng::normal(&mut rng)).collect();
            let fxy = m.energy(&x, &y).unwrap();
            let fyx = m.energy(&y, &x).unwrap();
            assert!((fxy - fyx).abs() <= 1e-12);
        }
    }

    #[test]
    fn cond_label_prob_examples() {
        let m = fixture_lin();
        let p = m.cond_label_prob(&[1.0, 0.0]).unwrap();
        assert_relative_eq!(p[0], 0.73106, epsilon = 1e-5);
        assert_relative_eq!(p[1], 0.26894, epsilon = 1e-5);
        assert_eq!(m.cond_label_prob(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = m.cond_label_prob(&[0.7, 0.7]).unwrap();
        assert_relative_eq!(p[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(p[1], 0.5, epsilon = 1e-15);
        let sum: f64 = m.cond_label_prob(&[0.3, -1.1]).unwrap().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn marginal_score_examples() {
        let m = fixture_lin();
        assert_relative_eq!(m.marginal_score(&[1.0, 0.0]).unwrap(), 1.31326, epsilon = 1e-5);
        assert_relative_eq!(
            m.marginal_score(&[0.0, 0.0]).unwrap(),
            2f64.ln(),
            epsilon = 1e-15
        );
        let single = fixture_lin_single_class();
        assert_eq!(single.marginal_score(&[1.0, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn exact_partition_hand_sum() {
        let m = fixture_lin();
        let grid = GridDomain::new(
            Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            1.0,
        )
        .unwrap();
        let p = m.exact_partition(&grid).unwrap();
        // e^1 + e^0 + e^0 + e^1 = 2e + 2
        assert_relative_eq!(p.z, 2.0 * 1f64.exp() + 2.0, epsilon = 1e-12);
        assert_relative_eq!(p.z, 7.43656, epsilon = 1e-5);

        let origin = GridDomain::new(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap(), 1.0).unwrap();
        assert_relative_eq!(m.exact_partition(&origin).unwrap().z, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn partition_positive_for_random_models() {
        let mut rng = rng::stream(5, 0);
        let grid = GridDomain::regular(-2.0, 2.0, 7, 2);
        for _ in 0..5 {
            let m = PCemModel::random(2, &[6], 4, 3, Activation::Tanh, &mut rng);
            assert!(m.exact_partition(&grid).unwrap().z > 0.0);
        }
    }

    #[test]
    fn exact_joint_entries_and_normalization() {
        let m = fixture_lin();
        let grid = GridDomain::new(
            Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            1.0,
        )
        .unwrap();
        let table = m.exact_joint_grid(&grid).unwrap();
        let z = 2.0 * 1f64.exp() + 2.0;
        assert_relative_eq!(table.probs.values[0], 1f64.exp() / z, epsilon = 1e-12);
        assert_relative_eq!(table.probs.values[0], 0.36553, epsilon = 1e-5);
        assert_relative_eq!(table.probs.values[1], 1.0 / z, epsilon = 1e-12);
        assert_relative_eq!(table.probs.values[1], 0.13447, epsilon = 1e-5);
        let total: f64 = table.probs.values.iter().sum();
        assert!((total - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn joint_marginal_matches_marginal_score() {
        let mut rng = rng::stream(9, 0);
        let m = PCemModel::random(2, &[6], 4, 3, Activation::Tanh, &mut rng);
        let grid = GridDomain::regular(-2.0, 2.0, 9, 2);
        let table = m.exact_joint_grid(&grid).unwrap();
        let marg = table.marginal();
        for (i, &p) in marg.iter().enumerate() {
            let ms = m.marginal_score(grid.point(i)).unwrap();
            let expected = (ms + grid.cell_weight.ln() - table.partition.log_z).exp();
            assert!((p - expected).abs() <= 1e-10, "point {i}: {p} vs {expected}");
        }
    }

    #[test]
    fn logit_identity_holds_for_random_models() {
        let mut rng = rng::stream(21, 0);
        for _ in 0..10 {
            let m = PCemModel::random(3, &[8], 5, 4, Activation::Relu, &mut rng);
            let x: Vec<f64> = (0..3).map(|_| rng::normal(&mut rng)).collect();
            let logits = m.logit_values(&x).unwrap();
            for (y, &l) in logits.iter().enumerate() {
                assert!((m.energy(&x, y).unwrap() - l).abs() <= 1e-12);
            }
            // p(y | x) == exp(f(x, y) − marginal_score(x))
            let probs = m.cond_label_prob(&x).unwrap();
            let ms = m.marginal_score(&x).unwrap();
            for (y, &p) in probs.iter().enumerate() {
                assert!((p - (logits[y] - ms).exp()).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn encoder_is_deterministic() {
        let mut rng = rng::stream(3, 0);
        let m = NPCemModel::new(Encoder::mlp(2, &[8], 4, Activation::Tanh, &mut rng));
        let a = m
            .feature_values(&Tensor::matrix(1, 2, vec![0.3, -0.7]).unwrap())
            .unwrap();
        let b = m
            .feature_values(&Tensor::matrix(1, 2, vec![0.3, -0.7]).unwrap())
            .unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.shape, vec![1, 4]);
    }

    #[test]
    fn energy_gradients_match_finite_differences() {
        let mut rng = rng::stream(31, 0);
        let m = PCemModel::random(2, &[6], 4, 3, Activation::Tanh, &mut rng);
        let x0 = Tensor::vector(vec![0.4, -0.2]);

        // Gradient w.r.t. the input.
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, false);
        let x = tape.leaf(x0.clone(), true);
        let logits = bound.logits(&mut tape, x).unwrap();
        let lse = tape.logsumexp(logits).unwrap();
        tape.backward(lse).unwrap();
        let gx = tape.grad(x).unwrap().to_vec();

        let fd = finite_diff_grad(|p: &Tensor| m.marginal_score(&p.values), &x0, 1e-5).unwrap();
        assert!(max_rel_err(&gx, &fd.values) <= 1e-6, "{gx:?} vs {fd:?}");

        // Gradient w.r.t. the first-layer weights.
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, true);
        let x = tape.constant(x0.clone());
        let logits = bound.logits(&mut tape, x).unwrap();
        let lse = tape.logsumexp(logits).unwrap();
        tape.backward(lse).unwrap();
        let w0 = bound.vars()[0];
        let gw = tape.grad(w0).unwrap().to_vec();

        let fd_w = finite_diff_grad(
            |w: &Tensor| {
                let mut pert = m.clone();
                pert.encoder.layers[0].weight.tensor = w.clone();
                pert.marginal_score(&x0.values)
            },
            &m.encoder.layers[0].weight.tensor,
            1e-5,
        )
        .unwrap();
        assert!(max_rel_err(&gw, &fd_w.values) <= 1e-6);
    }

    #[test]
    fn quadratic_energy_logits_and_gradient() {
        let q = QuadraticEnergy { dim: 2 };
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 2, vec![2.0, 0.0, 1.0, 1.0]).unwrap(), true);
        let logits = q.logits_on(&mut tape, x).unwrap();
        assert_eq!(tape.shape(logits), &[2, 1]);
        assert_eq!(tape.values(logits), &[-2.0, -1.0]);
        let lse = tape.logsumexp(logits).unwrap();
        let s = tape.sum(lse);
        tape.backward(s).unwrap();
        // d(−‖x‖²/2)/dx = −x per row.
        assert_eq!(tape.grad(x).unwrap(), &[-2.0, 0.0, -1.0, -1.0]);
    }

    #[test]
    fn regular_grid_binning_roundtrip() {
        let grid = GridDomain::regular(-3.0, 3.0, 41, 2);
        assert_eq!(grid.len(), 1681);
        assert_relative_eq!(grid.cell_weight, (6.0 / 40.0) * (6.0 / 40.0), epsilon = 1e-15);
        let reg = grid.regular.as_ref().unwrap();
        for i in [0usize, 17, 40, 41, 1000, 1680] {
            assert_eq!(reg.bin(grid.point(i)), i);
        }
        // Out-of-range samples clamp to edge cells.
        assert_eq!(reg.bin(&[-10.0, -10.0]), 0);
        assert_eq!(reg.bin(&[10.0, 10.0]), 1680);
    }

    #[test]
    fn models_are_send_and_sync() {
        fn check<T: Send + Sync>() {}
        check::<PCemModel>();
        check::<NPCemModel>();
        check::<GridDomain>();
    }
}
