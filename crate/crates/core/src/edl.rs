//! Evidential uncertainty over next-token distributions.
//!
//! Logits `z` are split into a direction `softmax(z)` on the simplex and a
//! scalar magnitude produced by a linear head, `exp(head(z))` (the odds of a
//! sigmoid). Evidence is `magnitude * direction`, the Dirichlet concentration
//! is `evidence + 1`, and its strength is `magnitude + K`.
//!
//! Each quantity comes in two forms: plain functions over [`DirichletParams`]
//! and tape builders (the `*_on_tape` functions) that the trainer
//! differentiates through.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{digamma, lgamma_unchecked, trigamma_unchecked};
use crate::tape::{kernels, Tape, Var};

/// Upper bound on the evidence magnitude.
pub const MAGNITUDE_CAP: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct DirichletParams {
    alpha: Vec<f64>,
    strength: f64,
}

impl DirichletParams {
    /// Concentrations must be finite and at least 1 (non-negative evidence).
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() < 2 {
            return Err(Error::Domain("a Dirichlet needs at least two classes".into()));
        }
        if let Some(a) = alpha.iter().find(|a| !a.is_finite() || **a < 1.0) {
            return Err(Error::Domain(alloc::format!("concentration {a} is below 1 or not finite")));
        }
        let strength = alpha.iter().sum();
        Ok(Self { alpha, strength })
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn strength(&self) -> f64 {
        self.strength
    }

    pub fn k(&self) -> usize {
        self.alpha.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoupledEvidence {
    pub direction: Vec<f64>,
    pub magnitude: f64,
}

/// Linear map from a logit vector to one scalar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdlHead {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl EdlHead {
    pub fn zeros(k: usize) -> Self {
        Self { weights: alloc::vec![0.0; k], bias: 0.0 }
    }

    pub fn apply(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.weights.len() {
            return Err(Error::Shape(alloc::format!(
                "EDL head over {} logits given {}",
                self.weights.len(),
                z.len()
            )));
        }
        Ok(kernels::dot(&self.weights, z) + self.bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyReport {
    pub per_position: Vec<f64>,
    pub aggregate: f64,
}

fn check_logits(z: &[f64]) -> Result<()> {
    if z.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("logits".into()))
    }
}

/// `α_i = max(z_i, 0) + 1`.
pub fn vanilla_relu_evidence(z: &[f64]) -> Result<DirichletParams> {
    check_logits(z)?;
    DirichletParams::new(z.iter().map(|&x| x.max(0.0) + 1.0).collect())
}

pub fn decouple_evidence(z: &[f64], head: &EdlHead) -> Result<DecoupledEvidence> {
    check_logits(z)?;
    let mut direction = z.to_vec();
    kernels::softmax_in_place(&mut direction);
    let h = head.apply(z)?;
    let magnitude = magnitude_from_head(h);
    Ok(DecoupledEvidence { direction, magnitude })
}

/// `σ(h) / (1 − σ(h))`, evaluated as `exp(h)` and capped at [`MAGNITUDE_CAP`].
pub fn magnitude_from_head(h: f64) -> f64 {
    if h > libm::log(MAGNITUDE_CAP) {
        MAGNITUDE_CAP
    } else {
        libm::exp(h)
    }
}

pub fn to_dirichlet(ev: &DecoupledEvidence) -> DirichletParams {
    let k = ev.direction.len();
    let alpha = ev.direction.iter().map(|d| ev.magnitude * d + 1.0).collect();
    DirichletParams { alpha, strength: ev.magnitude + k as f64 }
}

/// Expected negative log-probability of `target` under `Dir(α)`:
/// `ψ(S) − ψ(α_target)`.
pub fn bayes_risk_loss(params: &DirichletParams, target: usize) -> Result<f64> {
    let a = *params
        .alpha
        .get(target)
        .ok_or_else(|| Error::Domain(alloc::format!("target {target} out of {} classes", params.k())))?;
    Ok(digamma(params.strength)? - digamma(a)?)
}

/// Partial derivatives of the Bayes risk with respect to each `α_k`.
pub fn bayes_risk_grad(params: &DirichletParams, target: usize) -> Vec<f64> {
    let ts = trigamma_unchecked(params.strength);
    params
        .alpha
        .iter()
        .enumerate()
        .map(|(k, &a)| if k == target { ts - trigamma_unchecked(a) } else { ts })
        .collect()
}

/// `KL[Dir(α) ‖ Dir(1, …, 1)]`.
pub fn edl_kl_regularizer(params: &DirichletParams) -> f64 {
    let k = params.k() as f64;
    let s = params.strength;
    let psi_s = crate::special::digamma_unchecked(s);
    let mut acc = lgamma_unchecked(s) - lgamma_unchecked(k);
    for &a in &params.alpha {
        acc -= lgamma_unchecked(a);
        acc += (a - 1.0) * (crate::special::digamma_unchecked(a) - psi_s);
    }
    acc
}

pub fn sequence_bayes_risk(params: &[DirichletParams], targets: &[usize]) -> Result<f64> {
    if params.len() != targets.len() {
        return Err(Error::Shape(alloc::format!(
            "{} positions but {} targets",
            params.len(),
            targets.len()
        )));
    }
    if params.is_empty() {
        return Err(Error::Shape("empty answer sequence".into()));
    }
    params.iter().zip(targets).map(|(p, &t)| bayes_risk_loss(p, t)).sum()
}

/// `u_i = K / S_i`, aggregated by the mean over positions.
pub fn uncertainty(params: &[DirichletParams]) -> Result<UncertaintyReport> {
    if params.is_empty() {
        return Err(Error::Shape("uncertainty over zero positions".into()));
    }
    let per_position: Vec<f64> = params.iter().map(|p| p.k() as f64 / p.strength).collect();
    let aggregate = per_position.iter().sum::<f64>() / per_position.len() as f64;
    Ok(UncertaintyReport { per_position, aggregate })
}

/// How concentrations are derived from logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceMode {
    /// Softmax direction scaled by a learned magnitude.
    #[default]
    Decoupled,
    /// `ReLU(z) + 1`, strength summed over all classes.
    Relu,
    /// Softmax direction with the raw summed magnitude `Σ exp(z)`, i.e.
    /// `α = exp(z) + 1` with no learned head.
    ExpSum,
}

/// Concentrations and strengths for a block of positions.
#[derive(Debug, Clone, Copy)]
pub struct EdlVars {
    /// `n x K`
    pub alpha: Var,
    /// `n x 1`
    pub strength: Var,
    /// `n x 1`; `None` unless the mode has a learned magnitude.
    pub magnitude: Option<Var>,
}

/// Build `α` and `S` for each row of `logits` (`n x K`). `head_w` is `K x 1`
/// and `head_b` is `1 x 1`.
pub fn alpha_on_tape(
    tape: &mut Tape,
    logits: Var,
    head_w: Var,
    head_b: Var,
    mode: EvidenceMode,
) -> Result<EdlVars> {
    let k = tape.dims(logits).1 as f64;
    match mode {
        EvidenceMode::Decoupled => {
            let direction = tape.softmax(logits)?;
            let h = tape.matmul(logits, head_w)?;
            let h = tape.add_row(h, head_b)?;
            let magnitude = tape.capped_exp(h, MAGNITUDE_CAP);
            let evidence = tape.mul_col(direction, magnitude)?;
            let alpha = tape.add_const(evidence, 1.0);
            let strength = tape.add_const(magnitude, k);
            Ok(EdlVars { alpha, strength, magnitude: Some(magnitude) })
        }
        EvidenceMode::Relu => {
            let e = tape.relu(logits);
            let alpha = tape.add_const(e, 1.0);
            let strength = tape.sum_rows(alpha);
            Ok(EdlVars { alpha, strength, magnitude: None })
        }
        EvidenceMode::ExpSum => {
            let e = tape.exp(logits);
            let alpha = tape.add_const(e, 1.0);
            let strength = tape.sum_rows(alpha);
            Ok(EdlVars { alpha, strength, magnitude: None })
        }
    }
}

/// `Σ_rows ψ(S_j) − ψ(α_{j, t_j})`.
pub fn bayes_risk_on_tape(tape: &mut Tape, vars: &EdlVars, targets: &[usize]) -> Result<Var> {
    let picked = tape.pick_per_row(vars.alpha, targets)?;
    let psi_s = tape.digamma(vars.strength)?;
    let psi_t = tape.digamma(picked)?;
    let diff = tape.sub(psi_s, psi_t)?;
    Ok(tape.sum(diff))
}

/// `Σ_rows KL[Dir(α_j) ‖ Dir(1)]`, using
/// `Σ_k (α_k − 1)(ψ(α_k) − ψ(S)) = Σ_k (α_k − 1)ψ(α_k) − (S − K)ψ(S)`.
pub fn kl_on_tape(tape: &mut Tape, vars: &EdlVars) -> Result<Var> {
    let (n, k) = tape.dims(vars.alpha);
    let lg_alpha = tape.lgamma(vars.alpha)?;
    let lg_alpha_sum = tape.sum_rows(lg_alpha);
    let lg_s = tape.lgamma(vars.strength)?;
    let psi_alpha = tape.digamma(vars.alpha)?;
    let excess = tape.add_const(vars.alpha, -1.0);
    let weighted = tape.mul(excess, psi_alpha)?;
    let weighted = tape.sum_rows(weighted);
    let psi_s = tape.digamma(vars.strength)?;
    let s_minus_k = tape.add_const(vars.strength, -(k as f64));
    let tail = tape.mul(s_minus_k, psi_s)?;
    let per_row = tape.sub(lg_s, lg_alpha_sum)?;
    let per_row = tape.add(per_row, weighted)?;
    let per_row = tape.sub(per_row, tail)?;
    let total = tape.sum(per_row);
    Ok(tape.add_const(total, -(n as f64) * lgamma_unchecked(k as f64)))
}

/// [`kl_on_tape`] applied to `α̃ = y + (1 − y) ⊙ α`, the concentrations with
/// the target-class evidence removed, so that only evidence on wrong classes
/// is pulled toward zero.
pub fn misleading_kl_on_tape(tape: &mut Tape, vars: &EdlVars, targets: &[usize]) -> Result<Var> {
    let (n, k) = tape.dims(vars.alpha);
    if targets.len() != n || targets.iter().any(|&t| t >= k) {
        return Err(Error::Shape(alloc::format!("{} targets for {n}x{k} concentrations", targets.len())));
    }
    let mut keep = alloc::vec![1.0; n * k];
    let mut onehot = alloc::vec![0.0; n * k];
    for (r, &t) in targets.iter().enumerate() {
        keep[r * k + t] = 0.0;
        onehot[r * k + t] = 1.0;
    }
    let keep = tape.constant(n, k, keep)?;
    let onehot = tape.constant(n, k, onehot)?;
    let kept = tape.mul(vars.alpha, keep)?;
    let alpha = tape.add(kept, onehot)?;
    let strength = tape.sum_rows(alpha);
    kl_on_tape(tape, &EdlVars { alpha, strength, magnitude: None })
}

/// Mean over rows of `K / S_j`.
pub fn uncertainty_on_tape(tape: &mut Tape, vars: &EdlVars) -> Var {
    let k = tape.dims(vars.alpha).1 as f64;
    let inv = tape.recip(vars.strength);
    let u = tape.mean(inv);
    tape.scale(u, k)
}
