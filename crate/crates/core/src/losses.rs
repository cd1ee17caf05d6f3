//! Task objectives (time-weighted anticipation loss, enhancement loss,
//! uncertainty weighting) and the four robustness terms with their MSE
//! distances.
//!
//! Tape functions come in two flavours: `*_term` builds one video's
//! contribution (a sum, not yet divided by the batch size) and the batch
//! functions average those terms.

use serde::{Deserialize, Serialize};

use crate::data::{FeatureSequence, VideoLabel};
use crate::error::{Error, Result};
use crate::model::{forward_with, ForwardOptions, LatentView, ModelParams};
use crate::numerics::{Tape, Tensor, Var};

/// Probabilities are clamped into `[PROB_EPS, 1 − PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

pub fn clamp_probability(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Weight of frame `t` (1-based) of a positive video:
/// `exp(−½·max((τ − t)/f, 0))`.
pub fn frame_weight(t: usize, tau: usize, fps: u32) -> f64 {
    let lead = (tau as f64 - t as f64) / fps as f64;
    (-0.5 * lead.max(0.0)).exp()
}

fn require_batch(op: &'static str, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Domain {
            op,
            reason: "batch size must be at least 1".into(),
        });
    }
    Ok(())
}

/// `−Σ_t w_t log p_t` for a positive video, `−Σ_t log(1 − p_t)` otherwise.
/// `p` is `[T, 1]` (or any shape with `T` elements).
pub fn anticipation_term(tape: &mut Tape, p: Var, label: &VideoLabel) -> Result<Var> {
    let pc = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let shape = tape.value(p).shape().to_vec();
    let logs = if label.accident {
        let frames = tape.value(p).len();
        let w: Vec<f64> = (1..=frames).map(|t| frame_weight(t, label.tau, label.fps)).collect();
        let w = tape.constant(Tensor::new(shape, w)?);
        let lp = tape.log(pc)?;
        tape.mul(lp, w)?
    } else {
        let neg = tape.scale(pc, -1.0);
        let q = tape.add_scalar(neg, 1.0);
        tape.log(q)?
    };
    let s = tape.sum(logs);
    Ok(tape.scale(s, -1.0))
}

/// Binary cross-entropy of the auxiliary prediction.
pub fn enhancement_term(tape: &mut Tape, p_e: Var, label: &VideoLabel) -> Result<Var> {
    let pc = tape.clamp(p_e, PROB_EPS, 1.0 - PROB_EPS);
    let l = if label.accident {
        tape.log(pc)?
    } else {
        let neg = tape.scale(pc, -1.0);
        let q = tape.add_scalar(neg, 1.0);
        tape.log(q)?
    };
    let s = tape.sum(l);
    Ok(tape.scale(s, -1.0))
}

fn batch_mean(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / terms.len() as f64))
}

pub fn anticipation_loss(tape: &mut Tape, ps: &[Var], labels: &[VideoLabel]) -> Result<Var> {
    require_batch("anticipation_loss", ps.len())?;
    let terms = ps
        .iter()
        .zip(labels)
        .map(|(&p, l)| anticipation_term(tape, p, l))
        .collect::<Result<Vec<_>>>()?;
    batch_mean(tape, &terms)
}

pub fn enhancement_loss(tape: &mut Tape, p_es: &[Var], labels: &[VideoLabel]) -> Result<Var> {
    require_batch("enhancement_loss", p_es.len())?;
    let terms = p_es
        .iter()
        .zip(labels)
        .map(|(&p, l)| enhancement_term(tape, p, l))
        .collect::<Result<Vec<_>>>()?;
    batch_mean(tape, &terms)
}

/// Handles for the uncertainty-weighted combination.
#[derive(Clone, Copy, Debug)]
pub struct TaskWeights {
    pub rho1: Var,
    pub rho2: Var,
    pub mu1: f64,
    pub mu2: f64,
}

/// `μ₁/(2ρ₁²)·L_a + μ₂/(2ρ₂²)·L_e + log(ρ₁ρ₂)`, scaled by `share`.
///
/// With `share = 1/B` and per-video `l_a`, `l_e` terms, summing over the
/// batch reproduces the batch objective.
pub fn task_loss_scaled(tape: &mut Tape, l_a: Var, l_e: Var, w: &TaskWeights, share: f64) -> Result<Var> {
    for (name, rho) in [("rho1", w.rho1), ("rho2", w.rho2)] {
        let v = tape.value(rho).item();
        if !(v > 0.0) {
            return Err(Error::Domain {
                op: "task_loss",
                reason: format!("{name} must be positive, got {v}"),
            });
        }
    }
    let log1 = tape.log(w.rho1)?;
    let log2 = tape.log(w.rho2)?;
    let m1 = tape.scale(log1, -2.0);
    let inv1 = tape.exp(m1);
    let m2 = tape.scale(log2, -2.0);
    let inv2 = tape.exp(m2);
    let a = tape.mul(inv1, l_a)?;
    let a = tape.scale(a, 0.5 * w.mu1 * share);
    let e = tape.mul(inv2, l_e)?;
    let e = tape.scale(e, 0.5 * w.mu2 * share);
    let logs = tape.add(log1, log2)?;
    let logs = tape.scale(logs, share);
    let ae = tape.add(a, e)?;
    tape.add(ae, logs)
}

pub fn task_loss(tape: &mut Tape, l_a: Var, l_e: Var, w: &TaskWeights) -> Result<Var> {
    task_loss_scaled(tape, l_a, l_e, w, 1.0)
}

/// Plain-value form of the uncertainty-weighted task loss.
pub fn task_loss_value(l_a: f64, l_e: f64, rho1: f64, rho2: f64, mu1: f64, mu2: f64) -> Result<f64> {
    if !(rho1 > 0.0 && rho2 > 0.0) {
        return Err(Error::Domain {
            op: "task_loss",
            reason: format!("uncertainty coefficients must be positive, got {rho1}, {rho2}"),
        });
    }
    Ok(mu1 / (2.0 * rho1 * rho1) * l_a + mu2 / (2.0 * rho2 * rho2) * l_e + (rho1 * rho2).ln())
}

/// Mean squared difference of two same-shaped tensors on the tape.
pub fn mse(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (la, lb) = (tape.value(a).len(), tape.value(b).len());
    if la != lb {
        return Err(Error::Shape {
            op: "mse",
            lhs: vec![la],
            rhs: vec![lb],
        });
    }
    let diff = tape.sub(a, b)?;
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

fn mse_values(op: &'static str, a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape {
            op,
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Output distance between two frame-probability vectors.
pub fn d_out(p_a: &[f64], p_b: &[f64]) -> Result<f64> {
    mse_values("d_out", p_a, p_b)
}

/// Latent distance between two flattened second-layer state sequences.
pub fn d_feat(v_a: &LatentView, v_b: &LatentView) -> Result<f64> {
    if (v_a.frames, v_a.hidden) != (v_b.frames, v_b.hidden) {
        return Err(Error::Shape {
            op: "d_feat",
            lhs: vec![v_a.frames, v_a.hidden],
            rhs: vec![v_b.frames, v_b.hidden],
        });
    }
    mse_values("d_feat", &v_a.values, &v_b.values)
}

/// The four robustness terms, in ablation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Term {
    /// Output consistency with the frozen reference.
    Cps,
    /// Output stability under perturbation.
    Spd,
    /// Latent consistency with the frozen reference.
    Clm,
    /// Latent stability under perturbation.
    Sld,
}

impl Term {
    pub const ALL: [Term; 4] = [Term::Cps, Term::Spd, Term::Clm, Term::Sld];

    pub fn name(self) -> &'static str {
        match self {
            Term::Cps => "cps",
            Term::Spd => "spd",
            Term::Clm => "clm",
            Term::Sld => "sld",
        }
    }

    pub fn parse(s: &str) -> Option<Term> {
        Term::ALL
            .into_iter()
            .find(|t| t.name() == s.trim().to_ascii_lowercase())
    }

    /// Terms that compare against the perturbed input.
    pub fn needs_perturbation(self) -> bool {
        matches!(self, Term::Spd | Term::Sld)
    }
}

/// Regularization strengths and per-term switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_c_out: f64,
    pub lambda_s_out: f64,
    pub lambda_c_feat: f64,
    pub lambda_s_feat: f64,
    pub use_cps: bool,
    pub use_spd: bool,
    pub use_clm: bool,
    pub use_sld: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_c_out: 50.0,
            lambda_s_out: 50.0,
            lambda_c_feat: 0.01,
            lambda_s_feat: 0.01,
            use_cps: true,
            use_spd: true,
            use_clm: true,
            use_sld: true,
        }
    }
}

impl LossWeights {
    /// Every λ zero.
    pub fn zero() -> Self {
        LossWeights {
            lambda_c_out: 0.0,
            lambda_s_out: 0.0,
            lambda_c_feat: 0.0,
            lambda_s_feat: 0.0,
            ..Self::default()
        }
    }

    /// Default strengths with only `terms` switched on.
    pub fn only(terms: &[Term]) -> Self {
        let mut w = Self::default();
        for t in Term::ALL {
            w.set_enabled(t, terms.contains(&t));
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        for t in Term::ALL {
            let l = self.lambda(t);
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::config(
                    Self::lambda_field(t),
                    format!("must be finite and >= 0, got {l}"),
                ));
            }
        }
        Ok(())
    }

    pub fn lambda_field(t: Term) -> &'static str {
        match t {
            Term::Cps => "lambda_c_out",
            Term::Spd => "lambda_s_out",
            Term::Clm => "lambda_c_feat",
            Term::Sld => "lambda_s_feat",
        }
    }

    pub fn lambda(&self, t: Term) -> f64 {
        match t {
            Term::Cps => self.lambda_c_out,
            Term::Spd => self.lambda_s_out,
            Term::Clm => self.lambda_c_feat,
            Term::Sld => self.lambda_s_feat,
        }
    }

    pub fn enabled(&self, t: Term) -> bool {
        match t {
            Term::Cps => self.use_cps,
            Term::Spd => self.use_spd,
            Term::Clm => self.use_clm,
            Term::Sld => self.use_sld,
        }
    }

    pub fn set_enabled(&mut self, t: Term, on: bool) {
        match t {
            Term::Cps => self.use_cps = on,
            Term::Spd => self.use_spd = on,
            Term::Clm => self.use_clm = on,
            Term::Sld => self.use_sld = on,
        }
    }

    /// λ of an enabled term, zero for a disabled one.
    pub fn effective(&self, t: Term) -> f64 {
        if self.enabled(t) {
            self.lambda(t)
        } else {
            0.0
        }
    }

    /// Terms that contribute to the objective at all.
    pub fn active(&self) -> Vec<Term> {
        Term::ALL.into_iter().filter(|&t| self.effective(t) > 0.0).collect()
    }

    pub fn needs_perturbation(&self) -> bool {
        self.active().iter().any(|t| t.needs_perturbation())
    }
}

/// Values of the four robustness terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RobustnessLosses {
    pub cps: f64,
    pub spd: f64,
    pub clm: f64,
    pub sld: f64,
}

impl RobustnessLosses {
    pub fn get(&self, t: Term) -> f64 {
        match t {
            Term::Cps => self.cps,
            Term::Spd => self.spd,
            Term::Clm => self.clm,
            Term::Sld => self.sld,
        }
    }

    pub fn set(&mut self, t: Term, v: f64) {
        match t {
            Term::Cps => self.cps = v,
            Term::Spd => self.spd = v,
            Term::Clm => self.clm = v,
            Term::Sld => self.sld = v,
        }
    }
}

/// Every scalar of one optimization step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_a: f64,
    pub l_e: f64,
    pub l_task: f64,
    pub l_cps: f64,
    pub l_spd: f64,
    pub l_clm: f64,
    pub l_sld: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn robustness(&self) -> RobustnessLosses {
        RobustnessLosses {
            cps: self.l_cps,
            spd: self.l_spd,
            clm: self.l_clm,
            sld: self.l_sld,
        }
    }

    pub fn all_finite(&self) -> bool {
        [
            self.l_a,
            self.l_e,
            self.l_task,
            self.l_cps,
            self.l_spd,
            self.l_clm,
            self.l_sld,
            self.l_total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// `L_task + Σ λ·L_term` over enabled terms.
pub fn total_loss(l_task: f64, r: &RobustnessLosses, w: &LossWeights) -> f64 {
    Term::ALL
        .into_iter()
        .fold(l_task, |acc, t| acc + w.effective(t) * r.get(t))
}

/// Batch means of the four robustness terms, recomputed from plain forward
/// passes. `deltas[i]` is `(obj, ctx)` offsets for `xs[i]`.
pub fn robustness_losses(
    theta: &ModelParams,
    theta_star: &ModelParams,
    xs: &[&FeatureSequence],
    deltas: &[(Vec<f64>, Vec<f64>)],
) -> Result<RobustnessLosses> {
    require_batch("robustness_losses", xs.len())?;
    theta.ensure_compatible(theta_star)?;
    if deltas.len() != xs.len() {
        return Err(Error::Shape {
            op: "robustness_losses",
            lhs: vec![xs.len()],
            rhs: vec![deltas.len()],
        });
    }
    let opts = ForwardOptions::frames_only();
    let mut acc = RobustnessLosses::default();
    for (x, (d_obj, d_ctx)) in xs.iter().zip(deltas) {
        if d_obj.len() != x.obj().len() || d_ctx.len() != x.ctx().len() {
            return Err(Error::Shape {
                op: "robustness_losses",
                lhs: vec![x.obj().len(), x.ctx().len()],
                rhs: vec![d_obj.len(), d_ctx.len()],
            });
        }
        let clean = forward_with(x, theta, opts)?;
        let reference = forward_with(x, theta_star, opts)?;
        let pert = forward_with(&x.perturbed(d_obj, d_ctx), theta, opts)?;
        let (hc, hr, hp) = (
            LatentView::from_trace(&clean),
            LatentView::from_trace(&reference),
            LatentView::from_trace(&pert),
        );
        acc.cps += d_out(&clean.p, &reference.p)?;
        acc.spd += d_out(&clean.p, &pert.p)?;
        acc.clm += d_feat(&hc, &hr)?;
        acc.sld += d_feat(&hc, &hp)?;
    }
    let b = xs.len() as f64;
    Ok(RobustnessLosses {
        cps: acc.cps / b,
        spd: acc.spd / b,
        clm: acc.clm / b,
        sld: acc.sld / b,
    })
}
