//! Chain-based sampling and attack update rules.
//!
//! Every rule is one gradient step on the current batch followed by ℓ₂-ball
//! projection about each chain's own seed:
//!
//! ```text
//! x ← Π_{‖x − x₀‖₂ ≤ β} [ x + α·g + η·ε ],   ε ~ N(0, I)
//! ```
//!
//! where the drift `g` depends on the rule. Supervised rules combine the
//! marginal term `∇ₓ logsumexp_k f(x,k)` with an attractive or repulsive
//! class term `∇ₓ f(x,y)`; unsupervised rules replace classes with negative
//! samples. A single noise scale η multiplies a standard normal draw; the
//! theoretically exact Langevin setting is `η = √(2α)`, and `anneal`
//! geometrically decays η per step. Projection is skipped when β is
//! infinite. Raw (un-normalized) gradients are the default; the
//! `normalize_grad` flag gives attacks fixed per-step geometry where the
//! training loop needs it.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset2D;
use crate::error::{CemError, Result};
use crate::models::{FeatureMap, LogitEnergy};
use crate::rng;
use crate::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Pgd,
    Langevin,
    Ta,
    Cs,
    Rcs,
    UnsupLangevin,
    UnsupPgd,
    Maxent,
}

impl Rule {
    pub fn is_supervised(self) -> bool {
        matches!(self, Rule::Pgd | Rule::Langevin | Rule::Ta | Rule::Cs | Rule::Rcs)
    }

    /// Rules whose class term needs labels/targets.
    pub fn needs_labels(self) -> bool {
        matches!(self, Rule::Pgd | Rule::Ta | Rule::Cs | Rule::Rcs)
    }
}

/// Full chain configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub rule: Rule,
    /// Step size α ≥ 0.
    pub alpha: f64,
    /// ℓ₂ projection radius β > 0; infinity disables projection.
    pub beta: f64,
    /// Noise scale η ≥ 0.
    pub eta: f64,
    /// Chain length K ≥ 0.
    pub k_steps: usize,
    /// Multiplicative per-step decay of η; 1.0 = off.
    pub anneal: f64,
    /// Normalize the drift to unit ℓ₂ norm per chain before scaling by α.
    pub normalize_grad: bool,
}

impl SamplerConfig {
    pub fn new(rule: Rule, alpha: f64, beta: f64, eta: f64, k_steps: usize) -> Self {
        SamplerConfig {
            rule,
            alpha,
            beta,
            eta,
            k_steps,
            anneal: 1.0,
            normalize_grad: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.eta < 0.0 || self.beta <= 0.0 || self.anneal < 0.0 {
            return Err(CemError::contract(format!(
                "sampler config out of range: alpha={}, beta={}, eta={}, anneal={}",
                self.alpha, self.beta, self.eta, self.anneal
            )));
        }
        Ok(())
    }

    /// η for a given 0-based step under geometric annealing.
    pub fn eta_at(&self, step: usize) -> f64 {
        self.eta * self.anneal.powi(step as i32)
    }
}

/// Per-step knobs shared by all step functions.
#[derive(Debug, Clone, Copy)]
pub struct StepParams {
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub normalize_grad: bool,
}

impl StepParams {
    pub fn drift_only(alpha: f64) -> Self {
        StepParams {
            alpha,
            beta: f64::INFINITY,
            eta: 0.0,
            normalize_grad: false,
        }
    }
}

/// Seed distribution for chain initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedMode {
    /// Draw actual data points (the attack setting).
    DataPoint,
    /// Normal with the mean and covariance of the reference set.
    FittedNormal,
    /// Per-class fitted normals; seeds carry their intended class.
    ClasswiseNormal,
    /// Standard normal.
    StandardNormal,
}

/// A batch of chains: current states, the per-chain projection anchors, and
/// the intended class per seed when classwise seeding was used.
#[derive(Debug, Clone)]
pub struct Chain {
    /// `[N, d]`
    pub state: Tensor,
    /// `[N, d]`, the seeds x₀.
    pub origin: Tensor,
    pub step_index: usize,
    pub labels: Option<Vec<usize>>,
}

impl Chain {
    pub fn from_seeds(seeds: Tensor) -> Self {
        Chain {
            origin: seeds.clone(),
            state: seeds,
            step_index: 0,
            labels: None,
        }
    }

    pub fn n_chains(&self) -> usize {
        self.state.n_rows()
    }

    pub fn dim(&self) -> usize {
        self.state.shape[1]
    }
}

/// Negative pool for the unsupervised rules. `Data` entries are constants;
/// `ChainStates` uses the batch's own current states as the pool, with
/// gradient flowing through both sides of the similarity (the coupling the
/// batch-entropy rule is built on).
#[derive(Clone, Copy)]
pub enum NegativePool<'a> {
    Data(&'a Tensor),
    ChainStates,
}

/// Rule-specific inputs for [`run_chain`].
#[derive(Clone, Copy, Default)]
pub struct ChainInputs<'a> {
    /// Labels for PGD, targets for TA/CS/RCS.
    pub labels: Option<&'a [usize]>,
    /// Positive per anchor for unsupervised PGD: `[N, d]`.
    pub positives: Option<&'a Tensor>,
    /// Negative pool for the unsupervised rules.
    pub negatives: Option<NegativePool<'a>>,
}

/// Model handle for [`run_chain`]; supervised rules need logits, unsupervised
/// rules need features.
#[derive(Clone, Copy)]
pub enum SamplerModel<'a> {
    Logit(&'a dyn LogitEnergy),
    Feature(&'a dyn FeatureMap),
}

// ── Drift computations ───────────────────────────────────────────────────

/// One-hot rows for a label vector.
fn one_hot(labels: &[usize], k: usize) -> Result<Tensor> {
    let mut values = vec![0.0; labels.len() * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(CemError::contract(format!(
                "label {y} out of range for {k} classes"
            )));
        }
        values[i * k + y] = 1.0;
    }
    Tensor::new(vec![labels.len(), k], values)
}

/// ∇ₓ of `c_lse · Σᵢ logsumexp_k f(xᵢ,k) + c_pick · Σᵢ f(xᵢ,yᵢ)`.
pub fn supervised_drift(
    model: &dyn LogitEnergy,
    state: &Tensor,
    labels: Option<&[usize]>,
    c_lse: f64,
    c_pick: f64,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.leaf(state.clone(), true);
    let logits = model.logits_on(&mut tape, x)?;
    let mut total: Option<crate::Var> = None;
    if c_lse != 0.0 {
        let lse = tape.logsumexp(logits)?;
        let s = tape.sum(lse);
        let s = tape.scale(s, c_lse);
        total = Some(s);
    }
    if c_pick != 0.0 {
        let labels = labels.ok_or_else(|| CemError::contract("rule requires labels"))?;
        if labels.len() != state.n_rows() {
            return Err(CemError::contract(format!(
                "{} labels for {} chains",
                labels.len(),
                state.n_rows()
            )));
        }
        let onehot = tape.constant(one_hot(labels, model.n_classes())?);
        let picked = tape.mul(logits, onehot)?;
        let s = tape.sum(picked);
        let s = tape.scale(s, c_pick);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let root = match total {
        Some(t) => t,
        // α = 0 still needs a well-formed pass; the gradient is zero.
        None => return Ok(Tensor::zeros(state.shape.clone())),
    };
    tape.backward(root)?;
    Tensor::new(
        state.shape.clone(),
        tape.grad(x).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; state.numel()]),
    )
}

/// ∇ₓ of `Σᵢ logsumexp_j f(xᵢ, neg_j) + c_pos · Σᵢ f(xᵢ, posᵢ)`.
///
/// With `NegativePool::ChainStates` the pool is the batch itself and the
/// gradient couples all members.
pub fn unsupervised_drift(
    model: &dyn FeatureMap,
    state: &Tensor,
    positives: Option<&Tensor>,
    negatives: NegativePool<'_>,
    c_lse: f64,
    c_pos: f64,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.leaf(state.clone(), true);
    let g = model.features_on(&mut tape, x)?;
    let mut total: Option<crate::Var> = None;
    if c_lse != 0.0 {
        let gn = match negatives {
            NegativePool::Data(pool) => {
                if pool.shape[1] != state.shape[1] {
                    return Err(CemError::ShapeMismatch {
                        op: "negative_pool",
                        lhs: state.shape.clone(),
                        rhs: pool.shape.clone(),
                    });
                }
                let p = tape.constant(pool.clone());
                model.features_on(&mut tape, p)?
            }
            NegativePool::ChainStates => g,
        };
        let gn_t = tape.transpose(gn)?;
        let sim = tape.matmul(g, gn_t)?;
        let lse = tape.logsumexp(sim)?;
        let s = tape.sum(lse);
        let s = tape.scale(s, c_lse);
        total = Some(s);
    }
    if c_pos != 0.0 {
        let pos = positives.ok_or_else(|| CemError::contract("rule requires positives"))?;
        if pos.shape != state.shape {
            return Err(CemError::ShapeMismatch {
                op: "positives",
                lhs: state.shape.clone(),
                rhs: pos.shape.clone(),
            });
        }
        let p = tape.constant(pos.clone());
        let gp = model.features_on(&mut tape, p)?;
        let prod = tape.mul(g, gp)?;
        let s = tape.sum(prod);
        let s = tape.scale(s, c_pos);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let root = match total {
        Some(t) => t,
        None => return Ok(Tensor::zeros(state.shape.clone())),
    };
    tape.backward(root)?;
    Tensor::new(
        state.shape.clone(),
        tape.grad(x).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; state.numel()]),
    )
}

// ── Step application ─────────────────────────────────────────────────────

/// `x += α·g (+ η·ε)`, then project; `g` may be pre-negated by the caller.
fn apply_update(
    chain: &mut Chain,
    drift: &Tensor,
    params: &StepParams,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if drift.values.iter().any(|v| !v.is_finite()) {
        return Err(CemError::ChainDiverged {
            step: chain.step_index,
        });
    }
    let (n, d) = (chain.n_chains(), chain.dim());
    for i in 0..n {
        let row = &mut chain.state.values[i * d..(i + 1) * d];
        let g = &drift.values[i * d..(i + 1) * d];
        let scale = if params.normalize_grad {
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                params.alpha / norm
            } else {
                0.0
            }
        } else {
            params.alpha
        };
        for (c, &gc) in row.iter_mut().zip(g) {
            *c += scale * gc;
        }
    }
    if params.eta != 0.0 {
        for v in chain.state.values.iter_mut() {
            *v += params.eta * rng::normal(rng);
        }
    }
    project_chain(chain, params.beta);
    chain.step_index += 1;
    Ok(())
}

/// ℓ₂-ball projection of each state onto `‖x − x₀‖ ≤ β`.
pub fn project_chain(chain: &mut Chain, beta: f64) {
    if !beta.is_finite() {
        return;
    }
    let (n, d) = (chain.n_chains(), chain.dim());
    for i in 0..n {
        let row = &mut chain.state.values[i * d..(i + 1) * d];
        let origin = &chain.origin.values[i * d..(i + 1) * d];
        let dist2: f64 = row
            .iter()
            .zip(origin)
            .map(|(&x, &o)| (x - o) * (x - o))
            .sum();
        let dist = dist2.sqrt();
        if dist > beta {
            let f = beta / dist;
            for (x, &o) in row.iter_mut().zip(origin) {
                *x = o + (*x - o) * f;
            }
        }
    }
}

/// Attack step: ascend the marginal, repel from the labeled class.
pub fn pgd_step(
    model: &dyn LogitEnergy,
    chain: &mut Chain,
    labels: &[usize],
    params: &StepParams,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let drift = supervised_drift(model, &chain.state, Some(labels), 1.0, -1.0)?;
    apply_update(chain, &drift, params, rng)
}

/// Marginal ascent with diffusion noise.
pub fn langevin_step_pcem(
    model: &dyn LogitEnergy,
    chain: &mut Chain,
    params: &StepParams,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let drift = supervised_drift(model, &chain.state, None, 1.0, 0.0)?;
    apply_update(chain, &drift, params, rng)
}

/// Targeted attack: ascend the target class, descend the marginal.
pub fn ta_step(
    model: &dyn LogitEnergy,
    chain: &mut Chain,
    targets: &[usize],
    params: &StepParams,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let drift = supervised_drift(model, &chain.state, Some(targets), -1.0, 1.0)?;
    apply_update(chain, &drift, params, rng)
}

/// Conditional sampling: ascend the target class only.
pub fn cs_step(
    model: &dyn LogitEnergy,
    chain: &mut Chain,
    targets: &[usize],
    params: &StepParams,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let drift = supervised_drift(model, &chain.state, Some(targets), 0.0, 1.0)?;
    apply_update(chain, &drift, params, rng)
}

/// Reinforced conditional sampling: ascend both the target class and the
/// marginal.
pub fn rcs_step(
    model: &dyn LogitEnergy,
    chain: &mut Chain,
    targets: &[usize],
    params: &StepParams,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let drift = supervised_drift(model, &chain.state, Some(targets), 1.0, 1.0)?;
    apply_update(chain, &drift, params, rng)
}

/// Unsupervised Langevin: ascend `logsumexp` similarity to the negative pool.
pub fn unsup_langevin_step(
    model: &dyn FeatureMap,
    chain: &mut Chain,
    negatives: NegativePool<'_>,
    params: &StepParams,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let drift = unsupervised_drift(model, &chain.state, None, negatives, 1.0, 0.0)?;
    apply_update(chain, &drift, params, rng)
}

/// Unsupervised attack: ascend the pool term, repel from the positive.
pub fn unsup_pgd_step(
    model: &dyn FeatureMap,
    chain: &mut Chain,
    positives: &Tensor,
    negatives: NegativePool<'_>,
    params: &StepParams,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let drift = unsupervised_drift(model, &chain.state, Some(positives), negatives, 1.0, -1.0)?;
    apply_update(chain, &drift, params, rng)
}

/// Joint batch-entropy ascent: descend `Σᵢ logsumexp_j f(xᵢ, xⱼ)` with the
/// gradient coupling every batch member (each state appears as anchor in its
/// own row and as a negative in every row). The batch is one transaction.
pub fn maxent_step(
    model: &dyn FeatureMap,
    chain: &mut Chain,
    params: &StepParams,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let drift = unsupervised_drift(
        model,
        &chain.state,
        None,
        NegativePool::ChainStates,
        -1.0,
        0.0,
    )?;
    apply_update(chain, &drift, params, rng)
}

// ── Seeding ──────────────────────────────────────────────────────────────

/// Mean and population covariance of a point set.
fn moments(points: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (points.n_rows(), points.shape[1]);
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(points.row(i)) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        let row = points.row(i);
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += (row[a] - mean[a]) * (row[b] - mean[b]);
            }
        }
    }
    for c in cov.iter_mut() {
        *c /= n as f64;
    }
    (mean, cov)
}

/// In-place lower Cholesky; returns false if the matrix is not positive
/// definite.
fn cholesky(a: &mut [f64], d: usize) -> bool {
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= a[i * d + k] * a[j * d + k];
            }
            if i == j {
                if s <= 0.0 {
                    return false;
                }
                a[i * d + i] = s.sqrt();
            } else {
                a[i * d + j] = s / a[j * d + j];
            }
        }
        for j in (i + 1)..d {
            a[i * d + j] = 0.0;
        }
    }
    true
}

fn fitted_sampler(points: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = points.shape[1];
    let (mean, cov) = moments(points);
    let mut chol = cov.clone();
    if !cholesky(&mut chol, d) {
        eprintln!("warning: singular seed covariance; regularizing with +1e-6·I");
        chol.copy_from_slice(&cov);
        for i in 0..d {
            chol[i * d + i] += 1e-6;
        }
        if !cholesky(&mut chol, d) {
            return Err(CemError::contract(
                "seed covariance not positive definite even after regularization",
            ));
        }
    }
    Ok((mean, chol))
}

fn draw_normal(mean: &[f64], chol: &[f64], d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let z: Vec<f64> = (0..d).map(|_| rng::normal(rng)).collect();
    (0..d)
        .map(|i| {
            let mut v = mean[i];
            for (k, &zk) in z.iter().enumerate().take(i + 1) {
                v += chol[i * d + k] * zk;
            }
            v
        })
        .collect()
}

/// Draw `n` seeds per the mode. `FittedNormal` needs a reference set of at
/// least two points; `ClasswiseNormal` additionally needs labels and records
/// the intended class per seed (round-robin over classes).
pub fn init_seeds(
    mode: SeedMode,
    reference: Option<&Dataset2D>,
    n: usize,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Chain> {
    use rand::Rng;
    let mut labels = None;
    let mut values = Vec::with_capacity(n * dim);
    match mode {
        SeedMode::StandardNormal => {
            for _ in 0..n * dim {
                values.push(rng::normal(rng));
            }
        }
        SeedMode::DataPoint => {
            let ds = reference
                .ok_or_else(|| CemError::contract("data_point seeding needs a reference set"))?;
            let mut picked = Vec::with_capacity(n);
            for _ in 0..n {
                let i = rng.random_range(0..ds.len());
                values.extend_from_slice(ds.point(i));
                picked.push(i);
            }
            labels = ds
                .labels
                .as_ref()
                .map(|ls| picked.iter().map(|&i| ls[i]).collect());
        }
        SeedMode::FittedNormal => {
            let ds = reference
                .ok_or_else(|| CemError::contract("fitted_normal seeding needs a reference set"))?;
            if ds.len() < 2 {
                return Err(CemError::contract(
                    "fitted_normal seeding needs at least 2 reference points",
                ));
            }
            let (mean, chol) = fitted_sampler(&ds.points)?;
            for _ in 0..n {
                values.extend(draw_normal(&mean, &chol, dim, rng));
            }
        }
        SeedMode::ClasswiseNormal => {
            let ds = reference.ok_or_else(|| {
                CemError::contract("classwise_normal seeding needs a reference set")
            })?;
            let ls = ds
                .labels
                .as_ref()
                .ok_or_else(|| CemError::contract("classwise_normal seeding needs labels"))?;
            let k = ds.n_classes();
            let mut per_class = Vec::with_capacity(k);
            for class in 0..k {
                let idx: Vec<usize> = (0..ds.len()).filter(|&i| ls[i] == class).collect();
                if idx.len() < 2 {
                    return Err(CemError::contract(format!(
                        "class {class} has fewer than 2 reference points"
                    )));
                }
                per_class.push(fitted_sampler(&ds.gather(&idx))?);
            }
            let mut seed_labels = Vec::with_capacity(n);
            for i in 0..n {
                let class = i % k;
                let (mean, chol) = &per_class[class];
                values.extend(draw_normal(mean, chol, dim, rng));
                seed_labels.push(class);
            }
            labels = Some(seed_labels);
        }
    }
    let seeds = Tensor::new(vec![n, dim], values)?;
    Ok(Chain {
        origin: seeds.clone(),
        state: seeds,
        step_index: 0,
        labels,
    })
}

// ── Chain protocol ───────────────────────────────────────────────────────

/// Opt-in trajectory capture with a configurable stride.
pub struct TrajectoryRecorder {
    pub stride: usize,
    /// (step_index, chain_id, coordinates)
    pub rows: Vec<(usize, usize, Vec<f64>)>,
}

impl TrajectoryRecorder {
    pub fn new(stride: usize) -> Self {
        TrajectoryRecorder {
            stride: stride.max(1),
            rows: Vec::new(),
        }
    }

    fn record(&mut self, chain: &Chain, step: usize, final_step: bool) {
        if step.is_multiple_of(self.stride) || final_step {
            for i in 0..chain.n_chains() {
                self.rows.push((step, i, chain.state.row(i).to_vec()));
            }
        }
    }
}

/// Run `k_steps` of the configured rule with per-step projection and η
/// annealing. `k_steps = 0` returns the seeds unchanged and consumes no
/// randomness.
pub fn run_chain(
    model: SamplerModel<'_>,
    cfg: &SamplerConfig,
    mut chain: Chain,
    inputs: ChainInputs<'_>,
    rng: &mut ChaCha8Rng,
    mut recorder: Option<&mut TrajectoryRecorder>,
) -> Result<Chain> {
    cfg.validate()?;
    if cfg.rule.needs_labels() {
        let labels = inputs
            .labels
            .or(chain.labels.as_deref())
            .ok_or_else(|| CemError::contract(format!("{:?} requires labels/targets", cfg.rule)))?;
        if labels.len() != chain.n_chains() {
            return Err(CemError::contract("label count != chain count"));
        }
    }
    match (cfg.rule.is_supervised(), &model) {
        (true, SamplerModel::Logit(_)) | (false, SamplerModel::Feature(_)) => {}
        _ => {
            return Err(CemError::contract(format!(
                "rule {:?} incompatible with the given model kind",
                cfg.rule
            )))
        }
    }

    if let Some(rec) = recorder.as_deref_mut() {
        rec.record(&chain, 0, cfg.k_steps == 0);
    }
    for step in 0..cfg.k_steps {
        let params = StepParams {
            alpha: cfg.alpha,
            beta: cfg.beta,
            eta: cfg.eta_at(step),
            normalize_grad: cfg.normalize_grad,
        };
        let labels = inputs.labels.or(chain.labels.as_deref()).map(|l| l.to_vec());
        match (cfg.rule, model) {
            (Rule::Pgd, SamplerModel::Logit(m)) => {
                pgd_step(m, &mut chain, labels.as_deref().unwrap(), &params, rng)?
            }
            (Rule::Langevin, SamplerModel::Logit(m)) => {
                langevin_step_pcem(m, &mut chain, &params, rng)?
            }
            (Rule::Ta, SamplerModel::Logit(m)) => {
                ta_step(m, &mut chain, labels.as_deref().unwrap(), &params, rng)?
            }
            (Rule::Cs, SamplerModel::Logit(m)) => {
                cs_step(m, &mut chain, labels.as_deref().unwrap(), &params, rng)?
            }
            (Rule::Rcs, SamplerModel::Logit(m)) => {
                rcs_step(m, &mut chain, labels.as_deref().unwrap(), &params, rng)?
            }
            (Rule::UnsupLangevin, SamplerModel::Feature(m)) => {
                let negatives = inputs
                    .negatives
                    .ok_or_else(|| CemError::contract("unsup_langevin requires negatives"))?;
                unsup_langevin_step(m, &mut chain, negatives, &params, rng)?
            }
            (Rule::UnsupPgd, SamplerModel::Feature(m)) => {
                let positives = inputs
                    .positives
                    .ok_or_else(|| CemError::contract("unsup_pgd requires positives"))?;
                let negatives = inputs
                    .negatives
                    .ok_or_else(|| CemError::contract("unsup_pgd requires negatives"))?;
                unsup_pgd_step(m, &mut chain, positives, negatives, &params, rng)?
            }
            (Rule::Maxent, SamplerModel::Feature(m)) => maxent_step(m, &mut chain, &params, rng)?,
            _ => unreachable!("validated above"),
        }
        if let Some(rec) = recorder.as_deref_mut() {
            rec.record(&chain, step + 1, step + 1 == cfg.k_steps);
        }
    }
    Ok(chain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{
        fixture_lin, fixture_lin_single_class, fixture_np_identity, QuadraticEnergy,
    };
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const P1: f64 = 0.7310585786300049; // softmax(1,0)[0]
    const P2: f64 = 0.2689414213699951;

    fn single_chain(x: &[f64]) -> Chain {
        Chain::from_seeds(Tensor::new(vec![1, x.len()], x.to_vec()).unwrap())
    }

    fn params(alpha: f64) -> StepParams {
        StepParams::drift_only(alpha)
    }

    fn rng() -> ChaCha8Rng {
        rng::stream(99, rng::purpose::SAMPLER)
    }

    #[test]
    fn pgd_step_fixture_example() {
        let m = fixture_lin();
        let mut c = single_chain(&[1.0, 0.0]);
        pgd_step(&m, &mut c, &[0], &params(0.1), &mut rng()).unwrap();
        assert_relative_eq!(c.state.values[0], 1.0 + 0.1 * (P1 - 1.0), epsilon = 1e-14);
        assert_relative_eq!(c.state.values[1], 0.1 * P2, epsilon = 1e-14);
        assert_relative_eq!(c.state.values[0], 0.97311, epsilon = 1e-5);
        assert_relative_eq!(c.state.values[1], 0.02689, epsilon = 1e-5);
    }

    #[test]
    fn pgd_null_cases_leave_state_unchanged() {
        let m = fixture_lin();
        let mut c = single_chain(&[1.0, 0.0]);
        pgd_step(&m, &mut c, &[0], &params(0.0), &mut rng()).unwrap();
        assert_eq!(c.state.values, vec![1.0, 0.0]);

        // One class: the marginal drift cancels the repulsive term exactly.
        let single = fixture_lin_single_class();
        let mut c = single_chain(&[1.0, 0.0]);
        pgd_step(&single, &mut c, &[0], &params(0.1), &mut rng()).unwrap();
        assert_eq!(c.state.values, vec![1.0, 0.0]);
    }

    #[test]
    fn langevin_step_fixture_examples() {
        let m = fixture_lin();
        let mut c = single_chain(&[1.0, 0.0]);
        langevin_step_pcem(&m, &mut c, &params(0.1), &mut rng()).unwrap();
        assert_relative_eq!(c.state.values[0], 1.0 + 0.1 * P1, epsilon = 1e-14);
        assert_relative_eq!(c.state.values[1], 0.1 * P2, epsilon = 1e-14);

        let mut c = single_chain(&[0.0, 0.0]);
        langevin_step_pcem(&m, &mut c, &params(0.1), &mut rng()).unwrap();
        assert_relative_eq!(c.state.values[0], 0.05, epsilon = 1e-14);
        assert_relative_eq!(c.state.values[1], 0.05, epsilon = 1e-14);

        let mut c = single_chain(&[1.0, 0.0]);
        langevin_step_pcem(&m, &mut c, &params(0.0), &mut rng()).unwrap();
        assert_eq!(c.state.values, vec![1.0, 0.0]);
    }

    #[test]
    fn ta_step_fixture_examples() {
        let m = fixture_lin();
        let mut c = single_chain(&[1.0, 0.0]);
        ta_step(&m, &mut c, &[0], &params(0.1), &mut rng()).unwrap();
        assert_relative_eq!(c.state.values[0], 1.0 + 0.1 * (1.0 - P1), epsilon = 1e-14);
        assert_relative_eq!(c.state.values[1], -0.1 * P2, epsilon = 1e-14);
        assert_relative_eq!(c.state.values[0], 1.02689, epsilon = 1e-5);
        assert_relative_eq!(c.state.values[1], -0.02689, epsilon = 1e-5);

        let single = fixture_lin_single_class();
        let mut c = single_chain(&[1.0, 0.0]);
        ta_step(&single, &mut c, &[0], &params(0.1), &mut rng()).unwrap();
        assert_eq!(c.state.values, vec![1.0, 0.0]);

        let mut c = single_chain(&[1.0, 0.0]);
        ta_step(&m, &mut c, &[0], &params(0.0), &mut rng()).unwrap();
        assert_eq!(c.state.values, vec![1.0, 0.0]);
    }

    #[test]
    fn cs_step_fixture_examples() {
        let m = fixture_lin();
        let mut c = single_chain(&[1.0, 0.0]);
        cs_step(&m, &mut c, &[0], &params(0.1), &mut rng()).unwrap();
        assert_relative_eq!(c.state.values[0], 1.1, epsilon = 1e-14);
        assert_relative_eq!(c.state.values[1], 0.0, epsilon = 1e-14);

        let mut c = single_chain(&[1.0, 0.0]);
        cs_step(&m, &mut c, &[1], &params(0.1), &mut rng()).unwrap();
        assert_relative_eq!(c.state.values[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(c.state.values[1], 0.1, epsilon = 1e-14);

        let mut c = single_chain(&[1.0, 0.0]);
        cs_step(&m, &mut c, &[0], &params(0.0), &mut rng()).unwrap();
        assert_eq!(c.state.values, vec![1.0, 0.0]);
    }

    #[test]
    fn rcs_step_fixture_examples_and_linearity() {
        let m = fixture_lin();
        let mut c = single_chain(&[1.0, 0.0]);
        rcs_step(&m, &mut c, &[0], &params(0.1), &mut rng()).unwrap();
        assert_relative_eq!(c.state.values[0], 1.0 + 0.1 * (1.0 + P1), epsilon = 1e-14);
        assert_relative_eq!(c.state.values[1], 0.1 * P2, epsilon = 1e-14);
        assert_relative_eq!(c.state.values[0], 1.17311, epsilon = 1e-5);

        // rcs − cs == langevin drift, coordinatewise, to float associativity.
        let x = [0.3, -0.8];
        let rcs_d = supervised_drift(&m, &single_chain(&x).state, Some(&[1]), 1.0, 1.0).unwrap();
        let cs_d = supervised_drift(&m, &single_chain(&x).state, Some(&[1]), 0.0, 1.0).unwrap();
        let lang_d = supervised_drift(&m, &single_chain(&x).state, None, 1.0, 0.0).unwrap();
        for i in 0..2 {
            assert!((rcs_d.values[i] - cs_d.values[i] - lang_d.values[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn unsup_langevin_examples() {
        let m = fixture_np_identity();
        let negatives = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut c = single_chain(&[1.0, 0.0]);
        unsup_langevin_step(
            &m,
            &mut c,
            NegativePool::Data(&negatives),
            &params(0.1),
            &mut rng(),
        )
        .unwrap();
        assert_relative_eq!(c.state.values[0], 1.0 + 0.1 * P1, epsilon = 1e-14);
        assert_relative_eq!(c.state.values[1], 0.1 * P2, epsilon = 1e-14);

        // Self-negative: the pool is the chain state itself, so the objective
        // is ‖x‖² and the gradient is 2x.
        let mut c = single_chain(&[1.0, 0.0]);
        unsup_langevin_step(&m, &mut c, NegativePool::ChainStates, &params(0.1), &mut rng())
            .unwrap();
        assert_relative_eq!(c.state.values[0], 1.2, epsilon = 1e-14);
        assert_relative_eq!(c.state.values[1], 0.0, epsilon = 1e-14);

        let mut c = single_chain(&[1.0, 0.0]);
        unsup_langevin_step(
            &m,
            &mut c,
            NegativePool::Data(&negatives),
            &params(0.0),
            &mut rng(),
        )
        .unwrap();
        assert_eq!(c.state.values, vec![1.0, 0.0]);
    }

    #[test]
    fn unsup_pgd_examples() {
        let m = fixture_np_identity();
        let negatives = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let positive = Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap();
        let mut c = single_chain(&[1.0, 0.0]);
        unsup_pgd_step(
            &m,
            &mut c,
            &positive,
            NegativePool::Data(&negatives),
            &params(0.1),
            &mut rng(),
        )
        .unwrap();
        assert_relative_eq!(c.state.values[0], 1.0 + 0.1 * P1, epsilon = 1e-14);
        assert_relative_eq!(c.state.values[1], 0.1 * P2 - 0.1, epsilon = 1e-14);
        assert_relative_eq!(c.state.values[0], 1.07311, epsilon = 1e-5);
        assert_relative_eq!(c.state.values[1], -0.07311, epsilon = 1e-5);

        // Single negative equal to the positive: drift and repulsion cancel.
        let only = Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap();
        let mut c = single_chain(&[1.0, 0.0]);
        unsup_pgd_step(
            &m,
            &mut c,
            &positive,
            NegativePool::Data(&only),
            &params(0.1),
            &mut rng(),
        )
        .unwrap();
        assert_eq!(c.state.values, vec![1.0, 0.0]);

        let mut c = single_chain(&[1.0, 0.0]);
        unsup_pgd_step(
            &m,
            &mut c,
            &positive,
            NegativePool::Data(&negatives),
            &params(0.0),
            &mut rng(),
        )
        .unwrap();
        assert_eq!(c.state.values, vec![1.0, 0.0]);
    }

    #[test]
    fn maxent_examples() {
        let m = fixture_np_identity();
        let mut c = Chain::from_seeds(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        maxent_step(&m, &mut c, &params(0.1), &mut rng()).unwrap();
        // ∇_{x₁} S = p₁·2x₁ + p₂·x₂ + p₂·x₂ (anchor row plus the negative
        // appearances in both rows).
        let gx1 = [2.0 * P1, 2.0 * P2];
        assert_relative_eq!(c.state.values[0], 1.0 - 0.1 * gx1[0], epsilon = 1e-14);
        assert_relative_eq!(c.state.values[1], -0.1 * gx1[1], epsilon = 1e-14);
        assert_relative_eq!(c.state.values[0], 0.85379, epsilon = 1e-5);
        assert_relative_eq!(c.state.values[1], -0.05379, epsilon = 1e-5);
        // Symmetry: the second member mirrors the first.
        assert_relative_eq!(c.state.values[2], -0.1 * gx1[1], epsilon = 1e-14);
        assert_relative_eq!(c.state.values[3], 1.0 - 0.1 * gx1[0], epsilon = 1e-14);

        // Batch of one: S = ‖x‖², update is x − 2αx.
        let mut c = single_chain(&[1.0, 0.0]);
        maxent_step(&m, &mut c, &params(0.1), &mut rng()).unwrap();
        assert_relative_eq!(c.state.values[0], 0.8, epsilon = 1e-14);
        assert_relative_eq!(c.state.values[1], 0.0, epsilon = 1e-14);

        let mut c = single_chain(&[1.0, 0.0]);
        maxent_step(&m, &mut c, &params(0.0), &mut rng()).unwrap();
        assert_eq!(c.state.values, vec![1.0, 0.0]);
    }

    #[test]
    fn maxent_descends_the_batch_energy_sum() {
        // Small-step property: S = Σᵢ lse_j f(xᵢ,xⱼ) does not increase.
        let mut r = rng::stream(13, 0);
        let enc = crate::models::Encoder::mlp(2, &[8], 4, crate::models::Activation::Tanh, &mut r);
        let m = crate::models::NPCemModel::new(enc);
        let objective = |m: &crate::models::NPCemModel, xs: &Tensor| -> f64 {
            let g = m.feature_values(xs).unwrap();
            let n = g.n_rows();
            let mut total = 0.0;
            for i in 0..n {
                let sims: Vec<f64> = (0..n)
                    .map(|j| g.row(i).iter().zip(g.row(j)).map(|(a, b)| a * b).sum())
                    .collect();
                total += crate::autodiff::logsumexp_slice(&sims);
            }
            total
        };
        for trial in 0..10 {
            let vals: Vec<f64> = (0..8).map(|_| rng::normal(&mut r)).collect();
            let mut c = Chain::from_seeds(Tensor::matrix(4, 2, vals).unwrap());
            let before = objective(&m, &c.state);
            maxent_step(&m, &mut c, &params(1e-3), &mut rng()).unwrap();
            let after = objective(&m, &c.state);
            assert!(after <= before + 1e-12, "trial {trial}: {before} -> {after}");
        }
    }

    #[test]
    fn projection_keeps_chains_in_ball() {
        let m = fixture_lin();
        let mut c = single_chain(&[1.0, 0.0]);
        let p = StepParams {
            alpha: 5.0,
            beta: 0.25,
            eta: 0.0,
            normalize_grad: false,
        };
        for _ in 0..4 {
            cs_step(&m, &mut c, &[0], &p, &mut rng()).unwrap();
            let dx = c.state.values[0] - c.origin.values[0];
            let dy = c.state.values[1] - c.origin.values[1];
            assert!((dx * dx + dy * dy).sqrt() <= 0.25 + 1e-12);
        }
    }

    #[test]
    fn normalized_gradient_steps_have_fixed_length() {
        let m = fixture_lin();
        let mut c = single_chain(&[0.4, -0.2]);
        let before = c.state.values.clone();
        let p = StepParams {
            alpha: 0.3,
            beta: f64::INFINITY,
            eta: 0.0,
            normalize_grad: true,
        };
        pgd_step(&m, &mut c, &[0], &p, &mut rng()).unwrap();
        let d = ((c.state.values[0] - before[0]).powi(2)
            + (c.state.values[1] - before[1]).powi(2))
        .sqrt();
        assert_relative_eq!(d, 0.3, epsilon = 1e-12);
    }

    #[test]
    fn chain_aborts_on_non_finite_gradient() {
        let q = QuadraticEnergy { dim: 2 };
        let mut c = single_chain(&[1e200, 0.0]);
        let err = langevin_step_pcem(&q, &mut c, &params(0.1), &mut rng()).unwrap_err();
        assert!(matches!(err, CemError::ChainDiverged { step: 0 }));
    }

    #[test]
    fn init_seeds_standard_normal_reproducible() {
        let a = init_seeds(SeedMode::StandardNormal, None, 16, 2, &mut rng::stream(3, 1)).unwrap();
        let b = init_seeds(SeedMode::StandardNormal, None, 16, 2, &mut rng::stream(3, 1)).unwrap();
        assert_eq!(a.state.values, b.state.values);
        assert_eq!(a.state.shape, vec![16, 2]);
    }

    #[test]
    fn init_seeds_fitted_normal_moments() {
        // Two-point reference {(0,0), (2,0)}: mean (1,0), population variance
        // (1, 0); the singular direction exercises the +1e-6·I fallback.
        let ds = Dataset2D {
            points: Tensor::matrix(2, 2, vec![0.0, 0.0, 2.0, 0.0]).unwrap(),
            labels: None,
            spec: None,
        };
        let mut r = rng::stream(17, 1);
        let chain = init_seeds(SeedMode::FittedNormal, Some(&ds), 10_000, 2, &mut r).unwrap();
        let n = chain.n_chains() as f64;
        let mean_x: f64 = (0..chain.n_chains()).map(|i| chain.state.row(i)[0]).sum::<f64>() / n;
        let mean_y: f64 = (0..chain.n_chains()).map(|i| chain.state.row(i)[1]).sum::<f64>() / n;
        let var_x: f64 = (0..chain.n_chains())
            .map(|i| (chain.state.row(i)[0] - mean_x).powi(2))
            .sum::<f64>()
            / n;
        let var_y: f64 = (0..chain.n_chains())
            .map(|i| (chain.state.row(i)[1] - mean_y).powi(2))
            .sum::<f64>()
            / n;
        assert!((mean_x - 1.0).abs() < 0.05 && mean_y.abs() < 0.05);
        assert!((var_x - 1.0).abs() < 0.05, "var_x = {var_x}");
        assert!(var_y < 1e-4, "var_y = {var_y}");
    }

    #[test]
    fn init_seeds_classwise_concentrates_per_class() {
        let mut r = rng::stream(19, 0);
        let ds = crate::data::make_gaussian_mixture(2, 3.0, 0.2, 200, &mut r);
        let chain = init_seeds(SeedMode::ClasswiseNormal, Some(&ds), 400, 2, &mut r).unwrap();
        let labels = chain.labels.as_ref().unwrap();
        let centers = crate::data::mixture_centers(2, 3.0);
        for class in 0..2 {
            let idx: Vec<usize> = (0..400).filter(|&i| labels[i] == class).collect();
            let n = idx.len() as f64;
            let mx: f64 = idx.iter().map(|&i| chain.state.row(i)[0]).sum::<f64>() / n;
            let my: f64 = idx.iter().map(|&i| chain.state.row(i)[1]).sum::<f64>() / n;
            let c = centers[class];
            assert!((mx - c[0]).abs() < 0.1 && (my - c[1]).abs() < 0.1);
        }
    }

    #[test]
    fn run_chain_zero_steps_returns_seeds() {
        let m = fixture_lin();
        let cfg = SamplerConfig::new(Rule::Rcs, 1.0, 6.0, 0.01, 0);
        let seeds = single_chain(&[1.0, 0.0]);
        let out = run_chain(
            SamplerModel::Logit(&m),
            &cfg,
            seeds,
            ChainInputs {
                labels: Some(&[0]),
                ..Default::default()
            },
            &mut rng(),
            None,
        )
        .unwrap();
        assert_eq!(out.state.values, vec![1.0, 0.0]);
        assert_eq!(out.step_index, 0);
    }

    #[test]
    fn run_chain_cs_three_steps() {
        let m = fixture_lin();
        let cfg = SamplerConfig::new(Rule::Cs, 0.1, f64::INFINITY, 0.0, 3);
        let out = run_chain(
            SamplerModel::Logit(&m),
            &cfg,
            single_chain(&[1.0, 0.0]),
            ChainInputs {
                labels: Some(&[0]),
                ..Default::default()
            },
            &mut rng(),
            None,
        )
        .unwrap();
        assert_relative_eq!(out.state.values[0], 1.3, epsilon = 1e-12);
        assert_relative_eq!(out.state.values[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn run_chain_supervised_config_from_sampling_table() {
        // α=1, β=6, η=0.01, K=20 runs to completion on the linear fixture.
        let m = fixture_lin();
        let cfg = SamplerConfig::new(Rule::Rcs, 1.0, 6.0, 0.01, 20);
        let out = run_chain(
            SamplerModel::Logit(&m),
            &cfg,
            single_chain(&[1.0, 0.0]),
            ChainInputs {
                labels: Some(&[0]),
                ..Default::default()
            },
            &mut rng(),
            None,
        )
        .unwrap();
        assert_eq!(out.step_index, 20);
        assert!(out.state.values.iter().all(|v| v.is_finite()));
        let dx = out.state.values[0] - out.origin.values[0];
        let dy = out.state.values[1] - out.origin.values[1];
        assert!((dx * dx + dy * dy).sqrt() <= 6.0 + 1e-12);
    }

    #[test]
    fn run_chain_rejects_rule_model_mismatch() {
        let m = fixture_np_identity();
        let cfg = SamplerConfig::new(Rule::Cs, 0.1, f64::INFINITY, 0.0, 1);
        let err = run_chain(
            SamplerModel::Feature(&m),
            &cfg,
            single_chain(&[1.0, 0.0]),
            ChainInputs {
                labels: Some(&[0]),
                ..Default::default()
            },
            &mut rng(),
            None,
        )
        .unwrap_err();
        assert!(err.to_string().contains("incompatible"));
    }

    #[test]
    fn eta_annealing_schedule() {
        let mut cfg = SamplerConfig::new(Rule::Langevin, 0.1, f64::INFINITY, 0.8, 5);
        cfg.anneal = 0.5;
        assert_relative_eq!(cfg.eta_at(0), 0.8, epsilon = 1e-15);
        assert_relative_eq!(cfg.eta_at(1), 0.4, epsilon = 1e-15);
        assert_relative_eq!(cfg.eta_at(3), 0.1, epsilon = 1e-15);
    }

    #[test]
    fn trajectory_recorder_stride() {
        let m = fixture_lin();
        let mut cfg = SamplerConfig::new(Rule::Cs, 0.1, f64::INFINITY, 0.0, 5);
        cfg.anneal = 1.0;
        let mut rec = TrajectoryRecorder::new(2);
        run_chain(
            SamplerModel::Logit(&m),
            &cfg,
            single_chain(&[1.0, 0.0]),
            ChainInputs {
                labels: Some(&[0]),
                ..Default::default()
            },
            &mut rng(),
            Some(&mut rec),
        )
        .unwrap();
        let steps: Vec<usize> = rec.rows.iter().map(|r| r.0).collect();
        assert_eq!(steps, vec![0, 2, 4, 5]); // stride hits plus the final state
    }

    proptest! {
        #[test]
        fn projection_invariant_under_random_updates(
            seed in 0u64..500,
            beta in 0.1..2.0f64,
            alpha in 0.0..3.0f64,
        ) {
            let m = fixture_lin();
            let mut r = rng::stream(seed, rng::purpose::SAMPLER);
            let mut c = Chain::from_seeds(Tensor::matrix(3, 2, vec![
                rng::normal(&mut r), rng::normal(&mut r),
                rng::normal(&mut r), rng::normal(&mut r),
                rng::normal(&mut r), rng::normal(&mut r),
            ]).unwrap());
            let p = StepParams { alpha, beta, eta: 0.05, normalize_grad: false };
            for _ in 0..3 {
                pgd_step(&m, &mut c, &[0, 1, 0], &p, &mut r).unwrap();
                for i in 0..3 {
                    let s = c.state.row(i);
                    let o = c.origin.row(i);
                    let d = ((s[0]-o[0]).powi(2) + (s[1]-o[1]).powi(2)).sqrt();
                    prop_assert!(d <= beta + 1e-12);
                }
            }
        }
    }
}
