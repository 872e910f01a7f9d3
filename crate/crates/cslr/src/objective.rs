//! Composite training objective, optimizer, and learning-rate schedule.
//!
//! The loss couples five terms: CTC on the convolutional head, CTC on
//! the recurrent head, a distillation term pulling the convolutional
//! head's softened distribution toward the recurrent head's (teacher
//! held constant), and the two lifting regularizers. The total is
//! assembled with a fixed association order so it is reproducible to
//! the bit:
//!
//! `total = ((λ₁·conv + λ₂·seq) + λ₃·dist) + (λ₄·cu + λ₅·cp)`
//!
//! The optimizer is classic Adam: weight decay is an L2 term added to
//! the gradient before the moment updates, with bias-corrected moments.
//! The learning rate follows a milestone schedule — multiply by
//! `factor` once per milestone the epoch has passed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::FwdCtx;
use crate::params::ParamStore;
use crate::temporal::TlpCosts;
use crate::tensor::graph::Var;
use crate::tensor::{Element, Tensor};

/// Loss term weights and the distillation temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the convolutional-head CTC term.
    pub lambda1: f64,
    /// Weight of the recurrent-head CTC term.
    pub lambda2: f64,
    /// Weight of the distillation term.
    pub lambda3: f64,
    /// Weight of the lifting detail-energy regularizer.
    pub lambda4: f64,
    /// Weight of the lifting peakiness regularizer.
    pub lambda5: f64,
    /// Softmax temperature used on both heads inside the distillation
    /// term.
    pub distill_temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 25.0,
            lambda4: 0.001,
            lambda5: 0.001,
            distill_temperature: 8.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ls = [self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5];
        if ls.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        if !(self.distill_temperature > 0.0) || !self.distill_temperature.is_finite() {
            return Err(Error::Config("distill_temperature must be finite and > 0".into()));
        }
        Ok(())
    }
}

/// The five loss terms and their weighted total, as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub conv_ctc: Var,
    pub seq_ctc: Var,
    pub dist: Var,
    pub cu: Var,
    pub cp: Var,
    pub total: Var,
}

/// KL divergence from the softened teacher distribution to the softened
/// student distribution — `mean over positions of
/// KL(softmax(teacher/τ) ‖ softmax(student/τ))` — with the teacher
/// detached so no gradient reaches it.
pub fn distill_loss<E: Element>(
    ctx: &mut FwdCtx<E>,
    student: Var,
    teacher: Var,
    tau: f64,
) -> Result<Var> {
    let ss = ctx.graph.shape(student).to_vec();
    let st = ctx.graph.shape(teacher).to_vec();
    if ss != st {
        return Err(Error::BadShape {
            op: "distill_loss",
            shape: st,
            detail: format!("teacher shape differs from student {ss:?}"),
        });
    }
    if ss.len() < 2 {
        return Err(Error::BadShape {
            op: "distill_loss",
            shape: ss,
            detail: "expected at least (time, vocabulary) logits".into(),
        });
    }
    let axis = ss.len() - 1;
    let teacher = ctx.graph.detach(teacher);
    let t_scaled = ctx.graph.mul_scalar(teacher, 1.0 / tau);
    let s_scaled = ctx.graph.mul_scalar(student, 1.0 / tau);
    let lt = ctx.graph.log_softmax(t_scaled, axis)?;
    let ls = ctx.graph.log_softmax(s_scaled, axis)?;
    let pt = ctx.graph.exp(lt);
    let gap = ctx.graph.sub(lt, ls)?;
    let terms = ctx.graph.mul(pt, gap)?;
    let per_pos = ctx.graph.sum_axes(terms, &[axis], false)?;
    Ok(ctx.graph.mean_all(per_pos))
}

/// Sums per-stage lifting costs into the two scalars the objective
/// consumes.
pub fn sum_tlp_costs<E: Element>(ctx: &mut FwdCtx<E>, costs: &[TlpCosts]) -> Result<(Var, Var)> {
    if costs.is_empty() {
        let zero = ctx.graph.constant(Tensor::scalar(E::of(0.0)));
        return Ok((zero, zero));
    }
    let mut cu = costs[0].cu;
    let mut cp = costs[0].cp;
    for c in &costs[1..] {
        cu = ctx.graph.add(cu, c.cu)?;
        cp = ctx.graph.add(cp, c.cp)?;
    }
    Ok((cu, cp))
}

/// Assembles the composite objective for one sample. Both logit heads
/// are `(T', V+1)` with the blank on the last index; `targets` is the
/// gloss label sequence.
pub fn composite_loss<E: Element>(
    ctx: &mut FwdCtx<E>,
    conv_logits: Var,
    seq_logits: Var,
    targets: &[usize],
    cu: Var,
    cp: Var,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    w.validate()?;
    let shape = ctx.graph.shape(conv_logits).to_vec();
    if shape.len() != 2 {
        return Err(Error::BadShape {
            op: "composite_loss",
            shape,
            detail: "expected (time, vocabulary+blank) logits".into(),
        });
    }
    let blank = shape[1] - 1;

    let conv_lp = ctx.graph.log_softmax(conv_logits, 1)?;
    let conv_ctc = ctx.graph.ctc_loss(conv_lp, targets, blank)?;
    let seq_lp = ctx.graph.log_softmax(seq_logits, 1)?;
    let seq_ctc = ctx.graph.ctc_loss(seq_lp, targets, blank)?;
    let dist = distill_loss(ctx, conv_logits, seq_logits, w.distill_temperature)?;

    Ok(weighted_total(ctx, conv_ctc, seq_ctc, dist, cu, cp, w)?)
}

/// Applies the weights to already-computed terms with the documented
/// association order.
pub fn weighted_total<E: Element>(
    ctx: &mut FwdCtx<E>,
    conv_ctc: Var,
    seq_ctc: Var,
    dist: Var,
    cu: Var,
    cp: Var,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let a = ctx.graph.mul_scalar(conv_ctc, w.lambda1);
    let b = ctx.graph.mul_scalar(seq_ctc, w.lambda2);
    let ab = ctx.graph.add(a, b)?;
    let c = ctx.graph.mul_scalar(dist, w.lambda3);
    let abc = ctx.graph.add(ab, c)?;
    let d = ctx.graph.mul_scalar(cu, w.lambda4);
    let e = ctx.graph.mul_scalar(cp, w.lambda5);
    let de = ctx.graph.add(d, e)?;
    let total = ctx.graph.add(abc, de)?;
    Ok(LossBreakdown { conv_ctc, seq_ctc, dist, cu, cp, total })
}

/// Adam hyperparameters. `weight_decay` is classic L2: added to the
/// gradient before the moment updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "Adam eps must be > 0; lr and weight_decay must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Optimizer state: one pair of moment tensors per store entry (slots
/// for non-trainable entries stay zero and are never applied), plus the
/// step counter.
#[derive(Debug)]
pub struct OptimState<E: Element> {
    pub m: Vec<Tensor<E>>,
    pub v: Vec<Tensor<E>>,
    pub step: u64,
}

impl<E: Element> OptimState<E> {
    pub fn new(store: &ParamStore<E>) -> Self {
        let m = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        let v = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        OptimState { m, v, step: 0 }
    }

    /// Validates that the moment slots line up with `store` (used after
    /// loading a checkpoint).
    pub fn matches(&self, store: &ParamStore<E>) -> Result<()> {
        if self.m.len() != store.len() || self.v.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer holds {} moment slots for {} parameters",
                self.m.len(),
                store.len()
            )));
        }
        for (i, p) in store.iter().enumerate() {
            if self.m[i].shape() != p.value.shape() || self.v[i].shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "optimizer moment shape mismatch on {}",
                    p.name
                )));
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam step over every trainable parameter. A
/// missing gradient is treated as zero (weight decay still applies).
/// Per-element arithmetic runs in f64 regardless of the storage dtype.
pub fn adam_step<E: Element>(
    store: &mut ParamStore<E>,
    state: &mut OptimState<E>,
    hp: &AdamParams,
) -> Result<()> {
    hp.validate()?;
    state.matches(store)?;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for i in 0..store.len() {
        if !store.entry(i).trainable {
            continue;
        }
        let n = store.entry(i).value.numel();
        for k in 0..n {
            let p = store.entry(i).value.data()[k].as_f64();
            let g_raw = match &store.entry(i).grad {
                Some(g) => g.data()[k].as_f64(),
                None => 0.0,
            };
            let g = g_raw + hp.weight_decay * p;
            let m = hp.beta1 * state.m[i].data()[k].as_f64() + (1.0 - hp.beta1) * g;
            let v = hp.beta2 * state.v[i].data()[k].as_f64() + (1.0 - hp.beta2) * g * g;
            state.m[i].data_mut()[k] = E::of(m);
            state.v[i].data_mut()[k] = E::of(v);
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            let next = p - hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
            store.entry_mut(i).value.data_mut()[k] = E::of(next);
        }
    }
    Ok(())
}

/// Scales every gradient so their joint L2 norm does not exceed
/// `max_norm`. No-op when the norm is already within bounds.
pub fn clip_global_norm<E: Element>(store: &mut ParamStore<E>, max_norm: f64) -> Result<()> {
    if !(max_norm > 0.0) {
        return Err(Error::Config("clip norm must be > 0".into()));
    }
    let mut sq = 0.0;
    for p in store.iter() {
        if let Some(g) = &p.grad {
            for v in g.data() {
                let x = v.as_f64();
                sq += x * x;
            }
        }
    }
    let norm = sq.sqrt();
    if norm <= max_norm {
        return Ok(());
    }
    let scale = max_norm / norm;
    for i in 0..store.len() {
        if let Some(g) = &mut store.entry_mut(i).grad {
            for v in g.data_mut() {
                *v = E::of(v.as_f64() * scale);
            }
        }
    }
    Ok(())
}

/// Milestone learning-rate schedule:
/// `lr = base_lr * factor^(number of milestones <= epoch)`.
pub fn lr_schedule(epoch: usize, base_lr: f64, milestones: &[usize], factor: f64) -> Result<f64> {
    if milestones.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(
            "lr milestones must be strictly increasing".into(),
        ));
    }
    let passed = milestones.iter().filter(|&&m| m <= epoch).count() as i32;
    Ok(base_lr * factor.powi(passed))
}
