use serde::{Deserialize, Serialize};

use super::{neg_log_sigmoid, sigmoid, ImplicitRewardMode};
use crate::error::{Error, Result};
use crate::policy::{PromptId, Response, SparseGrad, TabularPolicy};
use crate::prefdata::PreferenceInstance;
use crate::weight::WeightVector;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: SparseGrad,
}

fn check_shapes(theta: &TabularPolicy, other: &TabularPolicy) -> Result<()> {
    if theta.same_shape(other) {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(
            "trainable and frozen policies have different shapes".into(),
        ))
    }
}

fn check_objective(inst: &PreferenceInstance, i: usize) -> Result<()> {
    if i < inst.p.len() {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(format!(
            "objective {i} out of range for {} labels",
            inst.p.len()
        )))
    }
}

/// `log pi(y) - log pi_frozen(y)`, its gradient scaled by `scale` appended.
fn log_ratio_with_grad(
    theta: &TabularPolicy,
    frozen: &TabularPolicy,
    prompt: PromptId,
    y: &Response,
    scale: f64,
    grad: &mut SparseGrad,
) -> Result<f64> {
    Ok(theta.log_prob_with_grad(prompt, y, scale, grad)? - frozen.log_prob_seq(prompt, y)?)
}

/// Log-ratio margin `Delta(y_pos) - Delta(y_neg)` with the two path gradients.
struct PairTerms {
    margin: f64,
    g_pos: SparseGrad,
    g_neg: SparseGrad,
}

impl PairTerms {
    fn new(
        theta: &TabularPolicy,
        frozen: &TabularPolicy,
        prompt: PromptId,
        y_pos: &Response,
        y_neg: &Response,
    ) -> Result<Self> {
        let mut g_pos = SparseGrad::new();
        let mut g_neg = SparseGrad::new();
        let d_pos = log_ratio_with_grad(theta, frozen, prompt, y_pos, 1.0, &mut g_pos)?;
        let d_neg = log_ratio_with_grad(theta, frozen, prompt, y_neg, 1.0, &mut g_neg)?;
        Ok(Self {
            margin: d_pos - d_neg,
            g_pos,
            g_neg,
        })
    }

    /// `-log sigmoid(coef * margin + offset)` and its derivative w.r.t. the margin.
    fn logsig(&self, coef: f64, offset: f64) -> (f64, f64) {
        let z = coef * self.margin + offset;
        // d(-log sigmoid z)/dz = -sigmoid(-z)
        (neg_log_sigmoid(z), -sigmoid(-z) * coef)
    }

    fn grad(&self, d_margin: f64) -> SparseGrad {
        let mut grad = SparseGrad::new();
        grad.extend_scaled(&self.g_pos, d_margin);
        grad.extend_scaled(&self.g_neg, -d_margin);
        grad
    }
}

/// Per-objective DPO loss `-log sigmoid(p_i beta [Delta(y_b) - Delta(y_a)])`.
pub fn dpo_loss(
    theta: &TabularPolicy,
    reference: &TabularPolicy,
    inst: &PreferenceInstance,
    objective: usize,
    beta: f64,
) -> Result<LossGrad> {
    check_shapes(theta, reference)?;
    check_objective(inst, objective)?;
    let p = inst.p[objective] as f64;
    let terms = PairTerms::new(theta, reference, inst.prompt, &inst.y_b, &inst.y_a)?;
    let (loss, d_margin) = terms.logsig(p * beta, 0.0);
    Ok(LossGrad {
        loss,
        grad: terms.grad(d_margin),
    })
}

/// Loss-weighted DPO: `sum_i w_i L_i`. Zero-weight terms are skipped so a
/// simplex vertex reproduces [`dpo_loss`] exactly.
pub fn dpo_lw_loss(
    theta: &TabularPolicy,
    reference: &TabularPolicy,
    inst: &PreferenceInstance,
    w: &WeightVector,
    beta: f64,
) -> Result<LossGrad> {
    if w.len() != inst.p.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} weights for {} objectives",
            w.len(),
            inst.p.len()
        )));
    }
    check_shapes(theta, reference)?;
    let terms = PairTerms::new(theta, reference, inst.prompt, &inst.y_b, &inst.y_a)?;
    // All objectives share the same log-ratio margin, so the weighted sum
    // collapses to one scalar coefficient on its gradient.
    let mut loss = 0.0;
    let mut d_margin = 0.0;
    let mut any = false;
    for (i, &wi) in w.as_slice().iter().enumerate() {
        if wi == 0.0 {
            continue;
        }
        any = true;
        let (l, d) = terms.logsig(inst.p[i] as f64 * beta, 0.0);
        loss += wi * l;
        d_margin += wi * d;
    }
    if !any {
        return Err(Error::InvalidWeight("all weights are zero".into()));
    }
    Ok(LossGrad {
        loss,
        grad: terms.grad(d_margin),
    })
}

/// Implicit reward of `y` under a DPO-trained policy.
pub fn implicit_reward(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    prompt: PromptId,
    y: &Response,
    beta: f64,
    mode: ImplicitRewardMode,
) -> Result<f64> {
    let lp = policy.log_prob_seq(prompt, y)?;
    Ok(match mode {
        ImplicitRewardMode::DpoRatio => beta * (lp - reference.log_prob_seq(prompt, y)?),
        ImplicitRewardMode::PolicyLogprob => beta * lp,
    })
}

/// Fixed part of the MODPO margin: `sum_{j != k} w_j [r_j(y_b) - r_j(y_a)]`.
fn modpo_margin(
    reference: &TabularPolicy,
    proxies: &[&TabularPolicy],
    inst: &PreferenceInstance,
    w: &WeightVector,
    k: usize,
    beta: f64,
    mode: ImplicitRewardMode,
) -> Result<f64> {
    let mut margin = 0.0;
    for (j, proxy) in proxies.iter().enumerate() {
        if j == k || w.get(j) == 0.0 {
            continue;
        }
        let rb = implicit_reward(proxy, reference, inst.prompt, &inst.y_b, beta, mode)?;
        let ra = implicit_reward(proxy, reference, inst.prompt, &inst.y_a, beta, mode)?;
        margin += w.get(j) * (rb - ra);
    }
    Ok(margin)
}

/// MODPO loss for objective `k`. `proxies` has one entry per objective; the
/// entry at `k` is ignored.
///
/// With `s = p_k`, the loss is
/// `-log sigmoid(s * [(beta / w_k) (Delta(y_b) - Delta(y_a)) - (1 / w_k) sum_{j != k} w_j (r_j(y_b) - r_j(y_a))])`,
/// i.e. the combined log-ratio and the proxy margin are both oriented from the
/// objective-`k` winner to the loser.
#[allow(clippy::too_many_arguments)]
pub fn modpo_loss(
    theta: &TabularPolicy,
    reference: &TabularPolicy,
    proxies: &[&TabularPolicy],
    inst: &PreferenceInstance,
    w: &WeightVector,
    k: usize,
    beta: f64,
    mode: ImplicitRewardMode,
) -> Result<LossGrad> {
    let margin = modpo_margin(reference, proxies, inst, w, k, beta, mode)?;
    modpo_with_margin(theta, reference, inst, w, k, beta, margin)
}

fn modpo_with_margin(
    theta: &TabularPolicy,
    reference: &TabularPolicy,
    inst: &PreferenceInstance,
    w: &WeightVector,
    k: usize,
    beta: f64,
    margin: f64,
) -> Result<LossGrad> {
    check_shapes(theta, reference)?;
    check_objective(inst, k)?;
    if w.len() != inst.p.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} weights for {} objectives",
            w.len(),
            inst.p.len()
        )));
    }
    let wk = w.get(k);
    if wk == 0.0 {
        return Err(Error::DegenerateWeight(k));
    }
    let s = inst.p[k] as f64;
    let terms = PairTerms::new(theta, reference, inst.prompt, &inst.y_b, &inst.y_a)?;
    let (loss, d_margin) = terms.logsig(s * (beta / wk), -s * (margin / wk));
    Ok(LossGrad {
        loss,
        grad: terms.grad(d_margin),
    })
}

/// A re-alignment preference `y_c > y_l` with its label for the policy being
/// trained (`+1` when `y_c` is preferred).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealignPair {
    pub prompt: PromptId,
    pub y_c: Response,
    pub y_l: Response,
    pub p: i8,
}

/// DPO against an anchor policy plus a per-token NLL penalty on `y_c`:
/// `-log sigmoid(p beta [Delta(y_c) - Delta(y_l)]) + alpha * (-log pi(y_c) / L)`.
pub fn nll_dpo_loss(
    theta: &TabularPolicy,
    anchor: &TabularPolicy,
    pair: &RealignPair,
    beta: f64,
    alpha: f64,
) -> Result<LossGrad> {
    check_shapes(theta, anchor)?;
    if pair.y_c == pair.y_l {
        return Err(Error::DegeneratePair);
    }
    let p = pair.p as f64;
    let terms = PairTerms::new(theta, anchor, pair.prompt, &pair.y_c, &pair.y_l)?;
    let (mut loss, d_margin) = terms.logsig(p * beta, 0.0);
    let mut grad = terms.grad(d_margin);
    if alpha != 0.0 {
        // log pi(y_c) = Delta(y_c) + log pi_anchor(y_c); its gradient is g_pos.
        let len = pair.y_c.len() as f64;
        let lp = theta.log_prob_seq(pair.prompt, &pair.y_c)?;
        loss += alpha * (-lp / len);
        grad.extend_scaled(&terms.g_pos, -alpha / len);
    }
    Ok(LossGrad { loss, grad })
}

/// A dataset-level objective: the training loss is the mean of
/// [`PairObjective::example`] over a batch.
pub trait PairObjective: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn example(&self, theta: &TabularPolicy, index: usize) -> Result<LossGrad>;
}

pub struct DpoObjective<'a> {
    pub reference: &'a TabularPolicy,
    pub data: &'a [PreferenceInstance],
    pub objective: usize,
    pub beta: f64,
}

impl PairObjective for DpoObjective<'_> {
    fn len(&self) -> usize {
        self.data.len()
    }

    fn example(&self, theta: &TabularPolicy, index: usize) -> Result<LossGrad> {
        dpo_loss(theta, self.reference, &self.data[index], self.objective, self.beta)
    }
}

pub struct LwObjective<'a> {
    pub reference: &'a TabularPolicy,
    pub data: &'a [PreferenceInstance],
    pub weight: WeightVector,
    pub beta: f64,
}

impl PairObjective for LwObjective<'_> {
    fn len(&self) -> usize {
        self.data.len()
    }

    fn example(&self, theta: &TabularPolicy, index: usize) -> Result<LossGrad> {
        dpo_lw_loss(theta, self.reference, &self.data[index], &self.weight, self.beta)
    }
}

/// MODPO over a dataset; proxy margins are computed once up front.
pub struct ModpoObjective<'a> {
    reference: &'a TabularPolicy,
    data: &'a [PreferenceInstance],
    weight: WeightVector,
    k: usize,
    beta: f64,
    margins: Vec<f64>,
}

impl<'a> ModpoObjective<'a> {
    pub fn new(
        reference: &'a TabularPolicy,
        proxies: &[&TabularPolicy],
        data: &'a [PreferenceInstance],
        weight: WeightVector,
        k: usize,
        beta: f64,
        mode: ImplicitRewardMode,
    ) -> Result<Self> {
        if weight.get(k) == 0.0 {
            return Err(Error::DegenerateWeight(k));
        }
        if proxies.len() != weight.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} proxies for {} objectives",
                proxies.len(),
                weight.len()
            )));
        }
        let margins = data
            .iter()
            .map(|inst| modpo_margin(reference, proxies, inst, &weight, k, beta, mode))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            reference,
            data,
            weight,
            k,
            beta,
            margins,
        })
    }
}

impl PairObjective for ModpoObjective<'_> {
    fn len(&self) -> usize {
        self.data.len()
    }

    fn example(&self, theta: &TabularPolicy, index: usize) -> Result<LossGrad> {
        modpo_with_margin(
            theta,
            self.reference,
            &self.data[index],
            &self.weight,
            self.k,
            self.beta,
            self.margins[index],
        )
    }
}

pub struct NllDpoObjective<'a> {
    pub anchor: &'a TabularPolicy,
    pub pairs: &'a [RealignPair],
    pub beta: f64,
    pub alpha: f64,
}

impl PairObjective for NllDpoObjective<'_> {
    fn len(&self) -> usize {
        self.pairs.len()
    }

    fn example(&self, theta: &TabularPolicy, index: usize) -> Result<LossGrad> {
        nll_dpo_loss(theta, self.anchor, &self.pairs[index], self.beta, self.alpha)
    }
}
