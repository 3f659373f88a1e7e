//! Training losses and likelihood-gradient estimators, supervised and
//! unsupervised.
//!
//! Everything differentiable is built on a [`Tape`]; the `build_*` functions
//! assemble a loss on a caller-supplied tape (so several terms can share one
//! set of parameter leaves), while the plain functions evaluate values or
//! full gradient estimates directly.
//!
//! The likelihood-gradient estimators ([`pcem_grad_terms`],
//! [`npcem_ll_grad`]) compute positive and negative phases with the phase
//! weights held as constants; the verification suite compares them against
//! the log-softmax routes, which differentiate the same weights implicitly.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::logsumexp_slice;
use crate::data::{augment_batch, batches, AugmentationOp, Dataset2D};
use crate::error::{CemError, Result};
use crate::models::{BoundEncoder, BoundPcem, Model, NPCemModel, PCemModel, Param};
use crate::rng;
use crate::samplers::{
    run_chain, Chain, ChainInputs, NegativePool, Rule, SamplerConfig, SamplerModel,
};
use crate::{Tape, Tensor, Var};

// ── Batch types ──────────────────────────────────────────────────────────

/// Labeled inputs `(x, y)`.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    /// `[N, n]`
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.n_rows() != labels.len() || labels.is_empty() {
            return Err(CemError::contract(format!(
                "{} labels for {} inputs",
                labels.len(),
                inputs.n_rows()
            )));
        }
        Ok(LabeledBatch { inputs, labels })
    }

    pub fn from_dataset(ds: &Dataset2D) -> Result<Self> {
        let labels = ds
            .labels
            .clone()
            .ok_or_else(|| CemError::contract("dataset has no labels"))?;
        LabeledBatch::new(ds.points.clone(), labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Anchor / positive / negatives triple for the contrastive losses.
///
/// Negatives come in two layouts. `PerAnchor` is the explicit `[N, K, n]`
/// form with the positive stored at index 0 of each anchor's list (enforced
/// on construction). `Shared` is the in-batch form: one `[K, n]` pool with
/// anchor i's positive at pool row i (so K = N).
#[derive(Debug, Clone)]
pub struct PairBatch {
    /// `[N, n]`
    pub anchors: Tensor,
    /// `[N, n]`
    pub positives: Tensor,
    pub negatives: Negatives,
}

#[derive(Debug, Clone)]
pub enum Negatives {
    PerAnchor(Tensor),
    Shared(Tensor),
}

impl PairBatch {
    /// Explicit layout; `extra_negatives` is `[N, K-1, n]` and the positive
    /// is placed at index 0 of each list.
    pub fn per_anchor(anchors: Tensor, positives: Tensor, extra_negatives: Tensor) -> Result<Self> {
        let (n, dim) = (anchors.n_rows(), anchors.shape[1]);
        if positives.shape != anchors.shape {
            return Err(CemError::ShapeMismatch {
                op: "pair_batch",
                lhs: anchors.shape.clone(),
                rhs: positives.shape.clone(),
            });
        }
        if extra_negatives.shape.len() != 3
            || extra_negatives.shape[0] != n
            || extra_negatives.shape[2] != dim
        {
            return Err(CemError::ShapeMismatch {
                op: "pair_batch_negatives",
                lhs: anchors.shape.clone(),
                rhs: extra_negatives.shape.clone(),
            });
        }
        let k_extra = extra_negatives.shape[1];
        let k = k_extra + 1;
        let mut values = Vec::with_capacity(n * k * dim);
        for i in 0..n {
            values.extend_from_slice(positives.row(i));
            let base = i * k_extra * dim;
            values.extend_from_slice(&extra_negatives.values[base..base + k_extra * dim]);
        }
        Ok(PairBatch {
            anchors,
            positives,
            negatives: Negatives::PerAnchor(Tensor::new(vec![n, k, dim], values)?),
        })
    }

    /// In-batch layout: the positives double as the shared negative pool.
    pub fn in_batch(anchors: Tensor, positives: Tensor) -> Result<Self> {
        if positives.shape != anchors.shape {
            return Err(CemError::ShapeMismatch {
                op: "pair_batch",
                lhs: anchors.shape.clone(),
                rhs: positives.shape.clone(),
            });
        }
        let pool = positives.clone();
        Ok(PairBatch {
            anchors,
            positives,
            negatives: Negatives::Shared(pool),
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.n_rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn k_neg(&self) -> usize {
        match &self.negatives {
            Negatives::PerAnchor(t) => t.shape[1],
            Negatives::Shared(t) => t.n_rows(),
        }
    }
}

/// Per-parameter gradients keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct GradEstimate {
    pub grads: BTreeMap<String, Tensor>,
}

impl GradEstimate {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    fn zip_with(&self, other: &GradEstimate, f: impl Fn(f64, f64) -> f64) -> GradEstimate {
        let mut out = BTreeMap::new();
        for (name, a) in &self.grads {
            let b = other.grads.get(name).expect("mismatched gradient keys");
            let values = a.values.iter().zip(&b.values).map(|(&x, &y)| f(x, y)).collect();
            out.insert(name.clone(), Tensor::new(a.shape.clone(), values).unwrap());
        }
        GradEstimate { grads: out }
    }

    pub fn sub(&self, other: &GradEstimate) -> GradEstimate {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &GradEstimate) -> GradEstimate {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn neg(&self) -> GradEstimate {
        let mut out = self.clone();
        for t in out.grads.values_mut() {
            for v in t.values.iter_mut() {
                *v = -*v;
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|t| t.values.iter())
            .fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &GradEstimate) -> f64 {
        self.grads
            .iter()
            .map(|(name, a)| {
                let b = &other.grads[name];
                crate::autodiff::gradcheck::max_abs_err(&a.values, &b.values)
            })
            .fold(0.0, f64::max)
    }

    /// Max over parameters of `|a−b| / max(1, |a|, |b|)` per coordinate.
    pub fn max_rel_diff(&self, other: &GradEstimate) -> f64 {
        self.grads
            .iter()
            .map(|(name, a)| {
                let b = &other.grads[name];
                crate::autodiff::gradcheck::max_rel_err(&a.values, &b.values)
            })
            .fold(0.0, f64::max)
    }
}

/// Read accumulated gradients for named parameter leaves off a tape; missing
/// gradients read as zeros.
pub fn extract_grads(tape: &Tape, params: &[&Param], vars: &[Var]) -> GradEstimate {
    let mut grads = BTreeMap::new();
    for (p, &v) in params.iter().zip(vars) {
        let values = tape
            .grad(v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; p.tensor.numel()]);
        grads.insert(
            p.name.clone(),
            Tensor::new(p.tensor.shape.clone(), values).unwrap(),
        );
    }
    GradEstimate { grads }
}

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

// ── Supervised losses ────────────────────────────────────────────────────

/// Mean cross entropy `−(1/N) Σᵢ log p(yᵢ | xᵢ)` on a tape.
pub fn build_ce(tape: &mut Tape, bound: &BoundPcem, x: Var, labels: &[usize], k: usize) -> Result<Var> {
    let logits = bound.logits(tape, x)?;
    let lp = tape.log_softmax(logits)?;
    let onehot = tape.constant(one_hot(labels, k)?);
    let picked = tape.mul(lp, onehot)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0 / labels.len() as f64))
}

fn ce_loss_at(model: &PCemModel, inputs: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let x = tape.constant(inputs.clone());
    let loss = build_ce(&mut tape, &bound, x, labels, model.n_classes())?;
    Ok(tape.item(loss))
}

/// Mean cross entropy at the natural inputs.
pub fn ce_loss(model: &PCemModel, batch: &LabeledBatch) -> Result<f64> {
    ce_loss_at(model, &batch.inputs, &batch.labels)
}

/// Result of the robust loss: the loss value and the adversarial inputs the
/// inner chain produced (treated as constants by the outer gradient).
#[derive(Debug, Clone)]
pub struct RobustCe {
    pub loss: f64,
    pub adversarial: Tensor,
}

/// Inner maximization then cross entropy: runs the PGD chain from each data
/// point inside the β-ball and evaluates the CE loss at the endpoints.
pub fn robust_ce_loss(
    model: &PCemModel,
    batch: &LabeledBatch,
    attack: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RobustCe> {
    let adversarial = pgd_attack(model, &batch.inputs, &batch.labels, attack, rng)?;
    let loss = ce_loss_at(model, &adversarial, &batch.labels)?;
    Ok(RobustCe { loss, adversarial })
}

/// PGD chain seeded at the data points themselves.
pub fn pgd_attack(
    model: &PCemModel,
    inputs: &Tensor,
    labels: &[usize],
    attack: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if attack.rule != Rule::Pgd {
        return Err(CemError::contract(
            "the robust loss takes a pgd attack configuration",
        ));
    }
    let chain = Chain {
        state: inputs.clone(),
        origin: inputs.clone(),
        step_index: 0,
        labels: Some(labels.to_vec()),
    };
    let out = run_chain(
        SamplerModel::Logit(model),
        attack,
        chain,
        ChainInputs {
            labels: Some(labels),
            ..Default::default()
        },
        rng,
        None,
    )?;
    Ok(out.state)
}

/// `KL(p(·|x̂) ‖ p(·|x))`, mean over the batch.
pub fn build_trades_kl(tape: &mut Tape, bound: &BoundPcem, x_nat: Var, x_adv: Var) -> Result<Var> {
    let n = tape.tensor(x_nat).n_rows();
    let logits_nat = bound.logits(tape, x_nat)?;
    let logits_adv = bound.logits(tape, x_adv)?;
    let lp_nat = tape.log_softmax(logits_nat)?;
    let lp_adv = tape.log_softmax(logits_adv)?;
    let p_adv = tape.exp(lp_adv);
    let diff = tape.sub(lp_adv, lp_nat)?;
    let terms = tape.mul(p_adv, diff)?;
    let s = tape.sum(terms);
    Ok(tape.scale(s, 1.0 / n as f64))
}

pub fn trades_kl(model: &PCemModel, x: &Tensor, x_adv: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let xn = tape.constant(x.clone());
    let xa = tape.constant(x_adv.clone());
    let kl = build_trades_kl(&mut tape, &bound, xn, xa)?;
    Ok(tape.item(kl))
}

/// Consistency regularizer: mean of `(f(x,y) − f(x̂,y))²`.
pub fn build_cr(
    tape: &mut Tape,
    bound: &BoundPcem,
    x_nat: Var,
    x_adv: Var,
    labels: &[usize],
    k: usize,
) -> Result<Var> {
    let logits_nat = bound.logits(tape, x_nat)?;
    let logits_adv = bound.logits(tape, x_adv)?;
    let onehot = tape.constant(one_hot(labels, k)?);
    let picked_nat = tape.mul(logits_nat, onehot)?;
    let picked_adv = tape.mul(logits_adv, onehot)?;
    let diff = tape.sub(picked_nat, picked_adv)?;
    let sq = tape.square(diff);
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / labels.len() as f64))
}

pub fn cr_loss(model: &PCemModel, batch: &LabeledBatch, x_adv: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let xn = tape.constant(batch.inputs.clone());
    let xa = tape.constant(x_adv.clone());
    let loss = build_cr(&mut tape, &bound, xn, xa, &batch.labels, model.n_classes())?;
    Ok(tape.item(loss))
}

// ── Contrastive losses ───────────────────────────────────────────────────

/// In-batch InfoNCE on a tape: mean over anchors of
/// `logsumexp_j f(aᵢ, poolⱼ) − f(aᵢ, poolᵢ)`.
pub fn build_infonce_shared(
    tape: &mut Tape,
    enc: &BoundEncoder,
    anchors: Var,
    pool: Var,
) -> Result<Var> {
    let n = tape.tensor(anchors).n_rows();
    let ga = enc.forward(tape, anchors)?;
    let gp = enc.forward(tape, pool)?;
    let gp_t = tape.transpose(gp)?;
    let sim = tape.matmul(ga, gp_t)?;
    let lse = tape.logsumexp(sim)?;
    let s_lse = tape.sum(lse);
    let prod = tape.mul(ga, gp)?;
    let s_pos = tape.sum(prod);
    let diff = tape.sub(s_lse, s_pos)?;
    Ok(tape.scale(diff, 1.0 / n as f64))
}

/// Per-anchor InfoNCE on a tape; anchor rows may be overridden (adversarial
/// anchors) by passing `anchors`.
fn build_infonce_per_anchor(
    tape: &mut Tape,
    enc: &BoundEncoder,
    anchors: &Tensor,
    negatives: &Tensor,
) -> Result<Var> {
    let (n, k, dim) = (negatives.shape[0], negatives.shape[1], negatives.shape[2]);
    let mut total: Option<Var> = None;
    let e0 = tape.constant({
        let mut v = vec![0.0; k];
        v[0] = 1.0;
        Tensor::vector(v)
    });
    for i in 0..n {
        let a = tape.constant(Tensor::vector(anchors.row(i).to_vec()));
        let ga = enc.forward(tape, a)?;
        let negs = tape.constant(Tensor::new(
            vec![k, dim],
            negatives.values[i * k * dim..(i + 1) * k * dim].to_vec(),
        )?);
        let gn = enc.forward(tape, negs)?;
        let sims = tape.matmul(gn, ga)?; // [k]
        let lse = tape.logsumexp(sims)?;
        let pos = tape.dot(sims, e0)?;
        let li = tape.sub(lse, pos)?;
        total = Some(match total {
            Some(t) => tape.add(t, li)?,
            None => li,
        });
    }
    Ok(tape.scale(total.expect("non-empty batch"), 1.0 / n as f64))
}

fn infonce_at(model: &NPCemModel, anchors: &Tensor, batch: &PairBatch) -> Result<f64> {
    let mut tape = Tape::new();
    let enc = model.bind(&mut tape, false);
    match &batch.negatives {
        Negatives::Shared(pool) => {
            let a = tape.constant(anchors.clone());
            let p = tape.constant(pool.clone());
            let loss = build_infonce_shared(&mut tape, &enc, a, p)?;
            Ok(tape.item(loss))
        }
        Negatives::PerAnchor(negs) => {
            let loss = build_infonce_per_anchor(&mut tape, &enc, anchors, negs)?;
            Ok(tape.item(loss))
        }
    }
}

/// Instance-wise K-class cross entropy:
/// `−mean log[exp f(x,x′) / Σⱼ exp f(x, x̂′ⱼ)]`. The positive is one of the
/// negatives, so the loss is non-negative.
pub fn infonce_loss(model: &NPCemModel, batch: &PairBatch) -> Result<f64> {
    infonce_at(model, &batch.anchors, batch)
}

/// InfoNCE with each anchor replaced by its adversarial counterpart.
pub fn adv_infonce_loss(model: &NPCemModel, adv_anchors: &Tensor, batch: &PairBatch) -> Result<f64> {
    if adv_anchors.shape != batch.anchors.shape {
        return Err(CemError::ShapeMismatch {
            op: "adv_infonce",
            lhs: adv_anchors.shape.clone(),
            rhs: batch.anchors.shape.clone(),
        });
    }
    infonce_at(model, adv_anchors, batch)
}

/// Unsupervised PGD chain seeded at the anchors: the UAT inner maximization.
pub fn unsup_attack(
    model: &NPCemModel,
    anchors: &Tensor,
    positives: &Tensor,
    pool: &Tensor,
    attack: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if attack.rule != Rule::UnsupPgd {
        return Err(CemError::contract(
            "the unsupervised robust loss takes an unsup_pgd attack configuration",
        ));
    }
    let chain = Chain {
        state: anchors.clone(),
        origin: anchors.clone(),
        step_index: 0,
        labels: None,
    };
    let out = run_chain(
        SamplerModel::Feature(model),
        attack,
        chain,
        ChainInputs {
            positives: Some(positives),
            negatives: Some(NegativePool::Data(pool)),
            ..Default::default()
        },
        rng,
        None,
    )?;
    Ok(out.state)
}

/// Unsupervised consistency regularizer: mean of `(f(x,x′) − f(x̂,x′))²`.
pub fn build_ucr(
    tape: &mut Tape,
    enc: &BoundEncoder,
    x_nat: Var,
    x_pos: Var,
    x_adv: Var,
) -> Result<Var> {
    let n = tape.tensor(x_nat).n_rows();
    let m = tape.shape(x_nat)[1];
    let _ = m;
    let g_nat = enc.forward(tape, x_nat)?;
    let g_pos = enc.forward(tape, x_pos)?;
    let g_adv = enc.forward(tape, x_adv)?;
    let ones = {
        let fdim = tape.shape(g_nat)[1];
        tape.constant(Tensor::vector(vec![1.0; fdim]))
    };
    let prod_nat = tape.mul(g_nat, g_pos)?;
    let f_nat = tape.matmul(prod_nat, ones)?; // [N]
    let prod_adv = tape.mul(g_adv, g_pos)?;
    let f_adv = tape.matmul(prod_adv, ones)?;
    let diff = tape.sub(f_nat, f_adv)?;
    let sq = tape.square(diff);
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / n as f64))
}

pub fn ucr_loss(model: &NPCemModel, x: &Tensor, x_pos: &Tensor, x_adv: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let enc = model.bind(&mut tape, false);
    let xn = tape.constant(x.clone());
    let xp = tape.constant(x_pos.clone());
    let xa = tape.constant(x_adv.clone());
    let loss = build_ucr(&mut tape, &enc, xn, xp, xa)?;
    Ok(tape.item(loss))
}

// ── Exact-expectation contrastive objective (oracle-scale) ──────────────

const FULL_BATCH_LIMIT: usize = 512;

/// Full-set InfoNCE loss with the denominator summed over the whole finite
/// set: `(1/M) Σᵢ [ logsumexp_j f(xᵢ, x′ⱼ) − ln M − f(xᵢ, x′ᵢ) ]`.
pub fn build_full_batch_infonce(
    tape: &mut Tape,
    enc: &BoundEncoder,
    xs: Var,
    positives: Var,
) -> Result<Var> {
    let m = tape.tensor(xs).n_rows();
    let base = build_infonce_shared(tape, enc, xs, positives)?;
    let ln_m = tape.scalar_const((m as f64).ln());
    tape.sub(base, ln_m)
}

/// Oracle-scale only: refuses datasets beyond a few hundred points.
pub fn full_batch_infonce_loss(model: &NPCemModel, xs: &Tensor, positives: &Tensor) -> Result<f64> {
    check_oracle_scale(xs)?;
    let mut tape = Tape::new();
    let enc = model.bind(&mut tape, false);
    let x = tape.constant(xs.clone());
    let p = tape.constant(positives.clone());
    let loss = build_full_batch_infonce(&mut tape, &enc, x, p)?;
    Ok(tape.item(loss))
}

/// Gradient of [`full_batch_infonce_loss`] with respect to the encoder
/// parameters, with exact sums over the finite set.
pub fn full_batch_infonce_grad(
    model: &NPCemModel,
    xs: &Tensor,
    positives: &Tensor,
) -> Result<GradEstimate> {
    check_oracle_scale(xs)?;
    let mut tape = Tape::new();
    let enc = model.bind(&mut tape, true);
    let vars = enc.vars();
    let x = tape.constant(xs.clone());
    let p = tape.constant(positives.clone());
    let loss = build_full_batch_infonce(&mut tape, &enc, x, p)?;
    tape.backward(loss)?;
    Ok(extract_grads(&tape, &model.params(), &vars))
}

fn check_oracle_scale(xs: &Tensor) -> Result<()> {
    if xs.n_rows() > FULL_BATCH_LIMIT {
        return Err(CemError::contract(format!(
            "full-batch objective is an oracle-scale operation (≤ {FULL_BATCH_LIMIT} points, got {})",
            xs.n_rows()
        )));
    }
    Ok(())
}

// ── Likelihood-gradient estimators ───────────────────────────────────────

/// How the inner label expectation of the negative phase is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Exact expectation over `p(ŷ|x̂)` — the default; removes Monte-Carlo
    /// noise from the identity tests.
    ModelSoft,
    /// Draw `ŷ ~ p(ŷ|x̂)`.
    ModelSample,
}

/// The three gradient views of the joint-likelihood estimator.
#[derive(Debug, Clone)]
pub struct PcemGradTerms {
    /// Positive phase minus negative phase, computed directly.
    pub direct: GradEstimate,
    /// `E[∇f(x,y) − ∇f(x̂,y)]`
    pub consistency: GradEstimate,
    /// `E[∇f(x̂,y) − ∇f(x̂,ŷ)]`
    pub contrastive: GradEstimate,
}

/// Gradient of `(1/N) Σᵢ Σₖ wᵢₖ f(zᵢ, k)` w.r.t. θ with constant weights.
fn weighted_phase_grad(model: &PCemModel, inputs: &Tensor, weights: &Tensor) -> Result<GradEstimate> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let vars = bound.vars();
    let x = tape.constant(inputs.clone());
    let logits = bound.logits(&mut tape, x)?;
    let w = tape.constant(weights.clone());
    let picked = tape.mul(logits, w)?;
    let s = tape.sum(picked);
    let root = tape.scale(s, 1.0 / inputs.n_rows() as f64);
    tape.backward(root)?;
    Ok(extract_grads(&tape, &model.params(), &vars))
}

/// Softmax label weights `p(·|x̂)` per row, as constants.
fn soft_label_weights(model: &PCemModel, inputs: &Tensor) -> Result<Tensor> {
    let logits = model.batch_logits(inputs)?;
    let k = logits.shape[1];
    let mut values = Vec::with_capacity(logits.numel());
    for i in 0..logits.n_rows() {
        let row = logits.row(i);
        let lse = logsumexp_slice(row);
        values.extend(row.iter().map(|&l| (l - lse).exp()));
    }
    Tensor::new(vec![logits.n_rows(), k], values)
}

fn sampled_label_weights(
    model: &PCemModel,
    inputs: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    use rand::Rng;
    let soft = soft_label_weights(model, inputs)?;
    let k = soft.shape[1];
    let mut values = vec![0.0; soft.numel()];
    for i in 0..soft.n_rows() {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = k - 1;
        for (j, &p) in soft.row(i).iter().enumerate() {
            acc += p;
            if u <= acc {
                chosen = j;
                break;
            }
        }
        values[i * k + chosen] = 1.0;
    }
    Tensor::new(soft.shape.clone(), values)
}

/// Joint-likelihood gradient of the parametric model: positive phase at the
/// data pairs minus negative phase at the adversarial inputs with
/// model-predicted labels. Returns the direct estimate together with its
/// consistency/contrastive decomposition (which telescopes back to it).
pub fn pcem_grad_terms(
    model: &PCemModel,
    batch: &LabeledBatch,
    negatives: &Tensor,
    mode: LabelMode,
    rng: &mut ChaCha8Rng,
) -> Result<PcemGradTerms> {
    if negatives.shape != batch.inputs.shape {
        return Err(CemError::ShapeMismatch {
            op: "pcem_ll_grad",
            lhs: batch.inputs.shape.clone(),
            rhs: negatives.shape.clone(),
        });
    }
    let k = model.n_classes();
    let data_onehot = one_hot(&batch.labels, k)?;
    let neg_weights = match mode {
        LabelMode::ModelSoft => soft_label_weights(model, negatives)?,
        LabelMode::ModelSample => sampled_label_weights(model, negatives, rng)?,
    };
    let positive = weighted_phase_grad(model, &batch.inputs, &data_onehot)?;
    let mid = weighted_phase_grad(model, negatives, &data_onehot)?;
    let negative = weighted_phase_grad(model, negatives, &neg_weights)?;
    Ok(PcemGradTerms {
        direct: positive.sub(&negative),
        consistency: positive.sub(&mid),
        contrastive: mid.sub(&negative),
    })
}

/// Direct joint-likelihood gradient (ascent direction).
pub fn pcem_ll_grad(
    model: &PCemModel,
    batch: &LabeledBatch,
    negatives: &Tensor,
    mode: LabelMode,
    rng: &mut ChaCha8Rng,
) -> Result<GradEstimate> {
    Ok(pcem_grad_terms(model, batch, negatives, mode, rng)?.direct)
}

/// Self-normalized importance weights of the non-parametric negative phase:
/// `w(x̂, x′ⱼ) = exp f(x̂, x′ⱼ) / mean_j′ exp f(x̂, x′ⱼ′)`, one row per
/// anchor. Rows are non-negative and average to one.
pub fn npcem_importance_weights(
    model: &NPCemModel,
    anchors: &Tensor,
    pool: &Tensor,
) -> Result<Tensor> {
    let ga = model.feature_values(anchors)?;
    let gp = model.feature_values(pool)?;
    let (a, p) = (ga.n_rows(), gp.n_rows());
    let mut values = Vec::with_capacity(a * p);
    for i in 0..a {
        let sims: Vec<f64> = (0..p)
            .map(|j| ga.row(i).iter().zip(gp.row(j)).map(|(x, y)| x * y).sum())
            .collect();
        let lse = logsumexp_slice(&sims);
        // softmax · P has mean exactly one over the pool.
        values.extend(sims.iter().map(|&s| (s - lse).exp() * p as f64));
    }
    Tensor::new(vec![a, p], values)
}

/// Likelihood gradient of the non-parametric model: positive phase at the
/// data pairs minus an importance-reweighted negative phase over a finite
/// pool. Both phases hold their weights constant.
pub fn npcem_ll_grad(
    model: &NPCemModel,
    xs: &Tensor,
    positives: &Tensor,
    neg_anchors: &Tensor,
    pool: &Tensor,
) -> Result<GradEstimate> {
    // Positive phase: (1/N) Σ ∇f(xᵢ, x′ᵢ).
    let positive = {
        let mut tape = Tape::new();
        let enc = model.bind(&mut tape, true);
        let vars = enc.vars();
        let x = tape.constant(xs.clone());
        let p = tape.constant(positives.clone());
        let gx = enc.forward(&mut tape, x)?;
        let gp = enc.forward(&mut tape, p)?;
        let prod = tape.mul(gx, gp)?;
        let s = tape.sum(prod);
        let root = tape.scale(s, 1.0 / xs.n_rows() as f64);
        tape.backward(root)?;
        extract_grads(&tape, &model.params(), &vars)
    };
    // Negative phase: (1/A) Σₐ (1/P) Σⱼ w(x̂ₐ, x′ⱼ) ∇f(x̂ₐ, x′ⱼ) with the
    // weights held constant.
    let negative = {
        let weights = npcem_importance_weights(model, neg_anchors, pool)?;
        let p_count = pool.n_rows() as f64;
        let mut tape = Tape::new();
        let enc = model.bind(&mut tape, true);
        let vars = enc.vars();
        let a = tape.constant(neg_anchors.clone());
        let p = tape.constant(pool.clone());
        let ga = enc.forward(&mut tape, a)?;
        let gp = enc.forward(&mut tape, p)?;
        let gp_t = tape.transpose(gp)?;
        let sim = tape.matmul(ga, gp_t)?; // [A, P]
        let w = tape.constant(weights);
        let weighted = tape.mul(sim, w)?;
        let s = tape.sum(weighted);
        let root = tape.scale(s, 1.0 / (neg_anchors.n_rows() as f64 * p_count));
        tape.backward(root)?;
        extract_grads(&tape, &model.params(), &vars)
    };
    Ok(positive.sub(&negative))
}

/// Exact maximum-likelihood ascent of the joint grid-normalized likelihood
/// `(1/N) Σᵢ f(xᵢ, yᵢ) − log Z(θ)` with `log Z` summed exactly over
/// (grid × classes). Oracle-scale trainer used where the partition function
/// must be exact rather than estimated. Returns the per-iteration joint
/// log-likelihood.
pub fn train_exact_ml(
    model: &mut PCemModel,
    batch: &LabeledBatch,
    grid: &crate::models::GridDomain,
    iters: usize,
    lr: f64,
    momentum: f64,
) -> Result<Vec<f64>> {
    let k = model.n_classes();
    let data_onehot = one_hot(&batch.labels, k)?;
    let mut opt = Sgd::new(&model.params(), lr, momentum);
    let mut history = Vec::with_capacity(iters);
    for _ in 0..iters {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let vars = bound.vars();

        let x = tape.constant(batch.inputs.clone());
        let logits = bound.logits(&mut tape, x)?;
        let oh = tape.constant(data_onehot.clone());
        let picked = tape.mul(logits, oh)?;
        let s = tape.sum(picked);
        let data_term = tape.scale(s, 1.0 / batch.len() as f64);

        let gx = tape.constant(grid.points.clone());
        let glogits = bound.logits(&mut tape, gx)?;
        let flat = tape.reshape(glogits, vec![grid.len() * k])?;
        let lse = tape.logsumexp(flat)?;
        let ln_cw = tape.scalar_const(grid.cell_weight.ln());
        let log_z = tape.add(lse, ln_cw)?;

        let ll = tape.sub(data_term, log_z)?;
        let value = tape.item(ll);
        if !value.is_finite() {
            return Err(CemError::TrainingDiverged {
                epoch: history.len(),
            });
        }
        // Ascend the likelihood: feed the negated gradient to the SGD step.
        tape.backward(ll)?;
        let grads = extract_grads(&tape, &model.params(), &vars).neg();
        opt.step(&mut model.params_mut(), &grads);
        history.push(value);
    }
    Ok(history)
}

// ── Training ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Ce,
    At,
    AtTrades,
    AtCr,
    Infonce,
    Uat,
    UatUcr,
}

impl Objective {
    pub fn is_supervised(self) -> bool {
        matches!(self, Objective::Ce | Objective::At | Objective::AtTrades | Objective::AtCr)
    }

    pub fn needs_attack(self) -> bool {
        matches!(
            self,
            Objective::At | Objective::AtTrades | Objective::AtCr | Objective::Uat | Objective::UatUcr
        )
    }
}

impl std::str::FromStr for Objective {
    type Err = CemError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "ce" => Objective::Ce,
            "at" => Objective::At,
            "at+trades" => Objective::AtTrades,
            "at+cr" => Objective::AtCr,
            "infonce" => Objective::Infonce,
            "uat" => Objective::Uat,
            "uat+ucr" => Objective::UatUcr,
            other => {
                return Err(CemError::contract(format!(
                    "unknown objective {other:?} (expected ce, at, at+trades, at+cr, infonce, uat, uat+ucr)"
                )))
            }
        })
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Objective::Ce => "ce",
            Objective::At => "at",
            Objective::AtTrades => "at+trades",
            Objective::AtCr => "at+cr",
            Objective::Infonce => "infonce",
            Objective::Uat => "uat",
            Objective::UatUcr => "uat+ucr",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Weight of the consistency regularizer (TRADES / CR / UCR terms).
    pub lambda: f64,
    pub attack: Option<SamplerConfig>,
    pub seed: u64,
    /// Augmentation set for the unsupervised objectives.
    pub augmentations: Vec<AugmentationOp>,
}

impl TrainConfig {
    pub fn new(objective: Objective, epochs: usize, lr: f64, seed: u64) -> Self {
        TrainConfig {
            objective,
            epochs,
            lr,
            momentum: 0.0,
            batch_size: 64,
            lambda: 1.0,
            attack: None,
            seed,
            augmentations: crate::data::default_augmentations(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean primary loss over the epoch's batches.
    pub loss: f64,
    /// Mean regularizer value (zero when no regularizer is active).
    pub reg: f64,
    pub natural_acc: f64,
    pub robust_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochMetrics>,
}

struct Sgd {
    velocity: Vec<Tensor>,
    lr: f64,
    momentum: f64,
}

impl Sgd {
    fn new(params: &[&Param], lr: f64, momentum: f64) -> Self {
        Sgd {
            velocity: params
                .iter()
                .map(|p| Tensor::zeros(p.tensor.shape.clone()))
                .collect(),
            lr,
            momentum,
        }
    }

    fn step(&mut self, params: &mut [&mut Param], grads: &GradEstimate) {
        for (i, p) in params.iter_mut().enumerate() {
            let g = &grads.grads[&p.name];
            let v = &mut self.velocity[i];
            for ((vj, &gj), wj) in v
                .values
                .iter_mut()
                .zip(&g.values)
                .zip(p.tensor.values.iter_mut())
            {
                *vj = self.momentum * *vj + gj;
                *wj -= self.lr * *vj;
            }
        }
    }
}

/// Classification accuracy of the parametric model.
pub fn pcem_accuracy(model: &PCemModel, inputs: &Tensor, labels: &[usize]) -> Result<f64> {
    let logits = model.batch_logits(inputs)?;
    let mut correct = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if pred == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Instance-discrimination accuracy: anchor i should be most similar to pool
/// row i.
pub fn contrastive_accuracy(model: &NPCemModel, anchors: &Tensor, pool: &Tensor) -> Result<f64> {
    let ga = model.feature_values(anchors)?;
    let gp = model.feature_values(pool)?;
    let n = ga.n_rows();
    let mut correct = 0usize;
    for i in 0..n {
        let mut best = 0usize;
        let mut best_sim = f64::NEG_INFINITY;
        for j in 0..gp.n_rows() {
            let sim: f64 = ga.row(i).iter().zip(gp.row(j)).map(|(a, b)| a * b).sum();
            if sim > best_sim {
                best_sim = sim;
                best = j;
            }
        }
        if best == i {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}

/// Epoch loop with plain SGD (optional momentum). Deterministic given the
/// config seed: shuffling, attack noise, augmentation draws and label
/// sampling each use their own stream, so a disabled component never shifts
/// another one's draws. On divergence the model is restored to its last
/// finite epoch and an error is returned.
pub fn train(model: &mut Model, data: &Dataset2D, cfg: &TrainConfig) -> Result<TrainLog> {
    if cfg.objective.is_supervised() {
        let pcem = match model {
            Model::Pcem(m) => m,
            Model::Npcem(_) => {
                return Err(CemError::contract(
                    "supervised objectives require a parametric model",
                ))
            }
        };
        train_supervised(pcem, data, cfg)
    } else {
        let npcem = match model {
            Model::Npcem(m) => m,
            Model::Pcem(_) => {
                return Err(CemError::contract(
                    "unsupervised objectives require a non-parametric model",
                ))
            }
        };
        train_unsupervised(npcem, data, cfg)
    }
}

fn validate_attack(cfg: &TrainConfig, expected: Rule) -> Result<Option<SamplerConfig>> {
    if !cfg.objective.needs_attack() {
        return Ok(None);
    }
    let attack = cfg
        .attack
        .clone()
        .ok_or_else(|| CemError::contract(format!("objective {} needs an attack", cfg.objective)))?;
    if attack.rule != expected {
        return Err(CemError::contract(format!(
            "objective {} expects a {expected:?} attack, got {:?}",
            cfg.objective, attack.rule
        )));
    }
    Ok(Some(attack))
}

fn train_supervised(model: &mut PCemModel, data: &Dataset2D, cfg: &TrainConfig) -> Result<TrainLog> {
    let full = LabeledBatch::from_dataset(data)?;
    let k = model.n_classes();
    let attack = validate_attack(cfg, Rule::Pgd)?;
    let mut shuffle_rng = rng::stream(cfg.seed, rng::purpose::SHUFFLE);
    let mut attack_rng = rng::stream(cfg.seed, rng::purpose::ATTACK);
    let mut opt = Sgd::new(&model.params(), cfg.lr, cfg.momentum);
    let mut log = TrainLog::default();
    let mut last_good = model.clone();

    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut epoch_reg = 0.0;
        let mut count = 0usize;
        for idx in batches(full.len(), cfg.batch_size, true, &mut shuffle_rng) {
            let inputs = data.gather(&idx);
            let labels = data.gather_labels(&idx).unwrap();
            let adversarial = match &attack {
                Some(a) => pgd_attack(model, &inputs, &labels, a, &mut attack_rng)?,
                None => inputs.clone(),
            };

            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let vars = bound.vars();
            let (loss_var, reg_value) = match cfg.objective {
                Objective::Ce => {
                    let x = tape.constant(inputs.clone());
                    (build_ce(&mut tape, &bound, x, &labels, k)?, 0.0)
                }
                Objective::At => {
                    let xa = tape.constant(adversarial.clone());
                    (build_ce(&mut tape, &bound, xa, &labels, k)?, 0.0)
                }
                Objective::AtTrades | Objective::AtCr => {
                    let xa = tape.constant(adversarial.clone());
                    let at = build_ce(&mut tape, &bound, xa, &labels, k)?;
                    if cfg.lambda == 0.0 {
                        (at, 0.0)
                    } else {
                        let xn = tape.constant(inputs.clone());
                        let reg = if cfg.objective == Objective::AtTrades {
                            build_trades_kl(&mut tape, &bound, xn, xa)?
                        } else {
                            build_cr(&mut tape, &bound, xn, xa, &labels, k)?
                        };
                        let reg_val = tape.item(reg);
                        let scaled = tape.scale(reg, cfg.lambda);
                        (tape.add(at, scaled)?, reg_val)
                    }
                }
                _ => unreachable!("supervised objectives only"),
            };
            let loss = tape.item(loss_var);
            if !loss.is_finite() {
                *model = last_good;
                return Err(CemError::TrainingDiverged { epoch });
            }
            tape.backward(loss_var)?;
            let grads = extract_grads(&tape, &model.params(), &vars);
            opt.step(&mut model.params_mut(), &grads);
            epoch_loss += loss * idx.len() as f64;
            epoch_reg += reg_value * idx.len() as f64;
            count += idx.len();
        }

        let natural_acc = pcem_accuracy(model, &full.inputs, &full.labels)?;
        let robust_acc = match &attack {
            Some(a) => {
                let adv = pgd_attack(model, &full.inputs, &full.labels, a, &mut attack_rng)?;
                pcem_accuracy(model, &adv, &full.labels)?
            }
            None => natural_acc,
        };
        log.epochs.push(EpochMetrics {
            epoch,
            loss: epoch_loss / count as f64,
            reg: epoch_reg / count as f64,
            natural_acc,
            robust_acc,
        });
        last_good = model.clone();
    }
    Ok(log)
}

fn train_unsupervised(
    model: &mut NPCemModel,
    data: &Dataset2D,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    let attack = validate_attack(cfg, Rule::UnsupPgd)?;
    let mut shuffle_rng = rng::stream(cfg.seed, rng::purpose::SHUFFLE);
    let mut attack_rng = rng::stream(cfg.seed, rng::purpose::ATTACK);
    let mut augment_rng = rng::stream(cfg.seed, rng::purpose::AUGMENT);
    let mut opt = Sgd::new(&model.params(), cfg.lr, cfg.momentum);
    let mut log = TrainLog::default();
    let mut last_good = model.clone();

    // Fixed deterministic eval pairs for the accuracy columns.
    let mut eval_rng = rng::stream(cfg.seed, rng::purpose::INIT);
    let eval_n = data.len().min(256);
    let eval_idx: Vec<usize> = (0..eval_n).collect();
    let eval_anchors = data.gather(&eval_idx);
    let eval_pool = augment_batch(&eval_anchors, &cfg.augmentations, &mut eval_rng);

    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut epoch_reg = 0.0;
        let mut count = 0usize;
        for idx in batches(data.len(), cfg.batch_size, true, &mut shuffle_rng) {
            if idx.len() < 2 {
                continue; // a singleton batch has no informative negatives
            }
            let anchors = data.gather(&idx);
            let positives = augment_batch(&anchors, &cfg.augmentations, &mut augment_rng);
            let adv_anchors = match &attack {
                Some(a) => unsup_attack(model, &anchors, &positives, &positives, a, &mut attack_rng)?,
                None => anchors.clone(),
            };

            let mut tape = Tape::new();
            let enc = model.bind(&mut tape, true);
            let vars = enc.vars();
            let pool = tape.constant(positives.clone());
            let (loss_var, reg_value) = match cfg.objective {
                Objective::Infonce => {
                    let a = tape.constant(anchors.clone());
                    (build_infonce_shared(&mut tape, &enc, a, pool)?, 0.0)
                }
                Objective::Uat | Objective::UatUcr => {
                    let a = tape.constant(adv_anchors.clone());
                    let base = build_infonce_shared(&mut tape, &enc, a, pool)?;
                    if cfg.objective == Objective::Uat || cfg.lambda == 0.0 {
                        (base, 0.0)
                    } else {
                        let xn = tape.constant(anchors.clone());
                        let xp = tape.constant(positives.clone());
                        let xa = tape.constant(adv_anchors.clone());
                        let reg = build_ucr(&mut tape, &enc, xn, xp, xa)?;
                        let reg_val = tape.item(reg);
                        let scaled = tape.scale(reg, cfg.lambda);
                        (tape.add(base, scaled)?, reg_val)
                    }
                }
                _ => unreachable!("unsupervised objectives only"),
            };
            let loss = tape.item(loss_var);
            if !loss.is_finite() {
                *model = last_good;
                return Err(CemError::TrainingDiverged { epoch });
            }
            tape.backward(loss_var)?;
            let grads = extract_grads(&tape, &model.params(), &vars);
            opt.step(&mut model.params_mut(), &grads);
            epoch_loss += loss * idx.len() as f64;
            epoch_reg += reg_value * idx.len() as f64;
            count += idx.len();
        }

        let natural_acc = contrastive_accuracy(model, &eval_anchors, &eval_pool)?;
        let robust_acc = match &attack {
            Some(a) => {
                let adv = unsup_attack(
                    model,
                    &eval_anchors,
                    &eval_pool,
                    &eval_pool,
                    a,
                    &mut attack_rng,
                )?;
                contrastive_accuracy(model, &adv, &eval_pool)?
            }
            None => natural_acc,
        };
        log.epochs.push(EpochMetrics {
            epoch,
            loss: epoch_loss / count.max(1) as f64,
            reg: epoch_reg / count.max(1) as f64,
            natural_acc,
            robust_acc,
        });
        last_good = model.clone();
    }
    Ok(log)
}
