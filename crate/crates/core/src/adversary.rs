//! Projected gradient ascent over additive input perturbations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::FeatureSequence;
use crate::error::{Error, Result};
use crate::losses::{d_feat, d_out, mse, RobustnessLosses};
use crate::model::{bind, forward_on_tape, forward_with, ForwardOptions, InputVars, LatentView, ModelParams};
use crate::numerics::{Tape, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[default]
    L2,
    Linf,
}

impl NormKind {
    pub fn norm(self, v: &[f64]) -> f64 {
        match self {
            NormKind::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            NormKind::Linf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PgdMode {
    /// Every sample gets its own perturbation.
    #[default]
    PerSample,
    /// One perturbation for the whole batch, stepped with the mean gradient.
    SharedBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PgdConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub iterations: usize,
    pub norm: NormKind,
    pub mode: PgdMode,
}

impl Default for PgdConfig {
    fn default() -> Self {
        PgdConfig {
            epsilon: 0.01,
            alpha: 0.002,
            iterations: 20,
            norm: NormKind::L2,
            mode: PgdMode::PerSample,
        }
    }
}

impl PgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(
                "epsilon",
                format!("must be finite and >= 0, got {}", self.epsilon),
            ));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(
                "alpha",
                format!("must be finite and > 0, got {}", self.alpha),
            ));
        }
        if self.iterations == 0 {
            return Err(Error::config("iterations", "must be >= 1"));
        }
        Ok(())
    }
}

/// Additive offsets for one feature sequence: object values first, then
/// context values, in storage order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub delta: Vec<f64>,
    pub obj_len: usize,
    pub norm: NormKind,
    pub epsilon: f64,
}

impl Perturbation {
    pub fn zeros(x: &FeatureSequence, norm: NormKind, epsilon: f64) -> Self {
        Perturbation {
            delta: vec![0.0; x.len()],
            obj_len: x.obj().len(),
            norm,
            epsilon,
        }
    }

    pub fn obj(&self) -> &[f64] {
        &self.delta[..self.obj_len]
    }

    pub fn ctx(&self) -> &[f64] {
        &self.delta[self.obj_len..]
    }

    pub fn magnitude(&self) -> f64 {
        self.norm.norm(&self.delta)
    }

    pub fn apply(&self, x: &FeatureSequence) -> FeatureSequence {
        x.perturbed(self.obj(), self.ctx())
    }

    pub fn split(&self) -> (Vec<f64>, Vec<f64>) {
        (self.obj().to_vec(), self.ctx().to_vec())
    }
}

/// Euclidean-nearest point of the `ε`-ball. Inputs inside the ball are
/// returned unchanged, and outputs always satisfy `‖·‖ ≤ ε` as computed, so
/// projecting twice is the identity.
pub fn project_values(delta: &[f64], epsilon: f64, norm: NormKind) -> Vec<f64> {
    match norm {
        NormKind::Linf => delta.iter().map(|x| x.clamp(-epsilon, epsilon)).collect(),
        NormKind::L2 => {
            let n = NormKind::L2.norm(delta);
            if n <= epsilon {
                return delta.to_vec();
            }
            if epsilon == 0.0 {
                return vec![0.0; delta.len()];
            }
            let mut s = epsilon / n;
            loop {
                let out: Vec<f64> = delta.iter().map(|x| x * s).collect();
                if NormKind::L2.norm(&out) <= epsilon {
                    return out;
                }
                s *= 1.0 - f64::EPSILON;
            }
        }
    }
}

pub fn project(delta: &[f64], obj_len: usize, epsilon: f64, norm: NormKind) -> Perturbation {
    Perturbation {
        delta: project_values(delta, epsilon, norm),
        obj_len,
        norm,
        epsilon,
    }
}

/// `δ + α·g`.
pub fn pgd_step(delta: &[f64], grad: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if delta.len() != grad.len() {
        return Err(Error::Shape {
            op: "pgd_step",
            lhs: vec![delta.len()],
            rhs: vec![grad.len()],
        });
    }
    Ok(delta.iter().zip(grad).map(|(d, g)| d + alpha * g).collect())
}

/// `δ + α·mean_i g_i` for a perturbation shared across the batch.
pub fn pgd_step_shared(delta: &[f64], grads: &[Vec<f64>], alpha: f64) -> Result<Vec<f64>> {
    if grads.is_empty() {
        return Err(Error::Domain {
            op: "pgd_step",
            reason: "no gradients".into(),
        });
    }
    let mut mean = vec![0.0; delta.len()];
    for g in grads {
        if g.len() != delta.len() {
            return Err(Error::Shape {
                op: "pgd_step",
                lhs: vec![delta.len()],
                rhs: vec![g.len()],
            });
        }
        for (m, v) in mean.iter_mut().zip(g) {
            *m += v;
        }
    }
    let inv = 1.0 / grads.len() as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    pgd_step(delta, &mean, alpha)
}

/// A function of one sample's perturbation to be maximized.
pub trait PerturbationObjective: Sync {
    fn batch_len(&self) -> usize;
    /// Number of perturbed values for sample `i`.
    fn dim(&self, i: usize) -> usize;
    /// Split point between object and context values of sample `i`.
    fn obj_len(&self, i: usize) -> usize {
        self.dim(i)
    }
    fn value_and_grad(&self, i: usize, delta: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// Random start on the ball surface (L2) or inside the box (Linf).
///
/// The stability distances are squared, so `δ = 0` is a stationary point of
/// the objective and plain ascent from zero never moves.
pub fn random_start(dim: usize, epsilon: f64, norm: NormKind, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if epsilon == 0.0 {
        return vec![0.0; dim];
    }
    match norm {
        NormKind::L2 => random_on_sphere(dim, epsilon, rng),
        NormKind::Linf => {
            let u = Uniform::new_inclusive(-epsilon, epsilon).expect("epsilon > 0");
            (0..dim).map(|_| u.sample(rng)).collect()
        }
    }
}

/// A uniformly random direction scaled to norm `radius`.
pub fn random_on_sphere(dim: usize, radius: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = NormKind::L2.norm(&v);
        if n > 1e-12 {
            return project_values(
                &v.iter().map(|x| x * radius / n).collect::<Vec<_>>(),
                radius,
                NormKind::L2,
            );
        }
    }
}

pub(crate) fn sample_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64 + 1);
    rng
}

/// Objective value after each iteration, for diagnostics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PgdTrace {
    /// `values[i][p]`: objective of sample `i` at the projected iterate `p`
    /// (index 0 is the start).
    pub values: Vec<Vec<f64>>,
}

/// Runs PGD on `objective` and returns the final projected perturbations.
pub fn maximize<O: PerturbationObjective>(
    objective: &O,
    cfg: &PgdConfig,
    seed: u64,
) -> Result<(Vec<Perturbation>, PgdTrace)> {
    cfg.validate()?;
    let b = objective.batch_len();
    if cfg.epsilon == 0.0 {
        let zeros = (0..b)
            .map(|i| project(&vec![0.0; objective.dim(i)], objective.obj_len(i), 0.0, cfg.norm))
            .collect();
        return Ok((zeros, PgdTrace::default()));
    }
    match cfg.mode {
        PgdMode::PerSample => {
            let results = (0..b)
                .into_par_iter()
                .map(|i| {
                    let mut rng = sample_rng(seed, i);
                    let mut delta = random_start(objective.dim(i), cfg.epsilon, cfg.norm, &mut rng);
                    let mut values = Vec::with_capacity(cfg.iterations + 1);
                    for _ in 0..cfg.iterations {
                        let (v, g) = objective.value_and_grad(i, &delta)?;
                        values.push(v);
                        delta = project_values(&pgd_step(&delta, &g, cfg.alpha)?, cfg.epsilon, cfg.norm);
                    }
                    values.push(objective.value_and_grad(i, &delta)?.0);
                    Ok((project(&delta, objective.obj_len(i), cfg.epsilon, cfg.norm), values))
                })
                .collect::<Result<Vec<_>>>()?;
            let (deltas, values) = results.into_iter().unzip();
            Ok((deltas, PgdTrace { values }))
        }
        PgdMode::SharedBatch => {
            let dim = objective.dim(0);
            if let Some(i) = (0..b).find(|&i| objective.dim(i) != dim) {
                return Err(Error::Shape {
                    op: "find_worst_case",
                    lhs: vec![dim],
                    rhs: vec![objective.dim(i)],
                });
            }
            let mut rng = sample_rng(seed, 0);
            let mut delta = random_start(dim, cfg.epsilon, cfg.norm, &mut rng);
            let mut values = vec![Vec::with_capacity(cfg.iterations + 1); b];
            for _ in 0..cfg.iterations {
                let evals = (0..b)
                    .into_par_iter()
                    .map(|i| objective.value_and_grad(i, &delta))
                    .collect::<Result<Vec<_>>>()?;
                let mut grads = Vec::with_capacity(b);
                for (i, (v, g)) in evals.into_iter().enumerate() {
                    values[i].push(v);
                    grads.push(g);
                }
                delta = project_values(&pgd_step_shared(&delta, &grads, cfg.alpha)?, cfg.epsilon, cfg.norm);
            }
            for (i, vals) in values.iter_mut().enumerate() {
                vals.push(objective.value_and_grad(i, &delta)?.0);
            }
            let p = project(&delta, objective.obj_len(0), cfg.epsilon, cfg.norm);
            Ok((vec![p; b], PgdTrace { values }))
        }
    }
}

/// Clean and reference quantities a perturbation search compares against.
#[derive(Clone, Debug)]
pub struct Anchor {
    pub p_clean: Vec<f64>,
    pub h_clean: LatentView,
    pub consistency: RobustnessLosses,
}

impl Anchor {
    pub fn new(x: &FeatureSequence, theta: &ModelParams, theta_star: &ModelParams) -> Result<Self> {
        let reference = forward_with(x, theta_star, ForwardOptions::frames_only())?;
        Self::with_reference(x, theta, &reference.p, &reference.h2)
    }

    /// Same as [`Anchor::new`] with the reference outputs already computed.
    pub fn with_reference(x: &FeatureSequence, theta: &ModelParams, p_ref: &[f64], h_ref: &Tensor) -> Result<Self> {
        let clean = forward_with(x, theta, ForwardOptions::frames_only())?;
        let h_clean = LatentView::from_trace(&clean);
        let consistency = RobustnessLosses {
            cps: d_out(&clean.p, p_ref)?,
            clm: d_feat(&h_clean, &LatentView::from_matrix(h_ref))?,
            ..Default::default()
        };
        Ok(Anchor {
            p_clean: clean.p,
            h_clean,
            consistency,
        })
    }
}

/// Sum of the four robustness terms of one video as a function of its
/// perturbation, with `θ` held fixed.
pub struct SecureObjective<'a> {
    pub xs: Vec<&'a FeatureSequence>,
    pub theta: &'a ModelParams,
    pub anchors: Vec<Anchor>,
}

impl<'a> SecureObjective<'a> {
    pub fn new(xs: Vec<&'a FeatureSequence>, theta: &'a ModelParams, theta_star: &ModelParams) -> Result<Self> {
        theta.ensure_compatible(theta_star)?;
        let anchors = xs
            .par_iter()
            .map(|x| Anchor::new(x, theta, theta_star))
            .collect::<Result<Vec<_>>>()?;
        Ok(SecureObjective { xs, theta, anchors })
    }

    /// Output and latent self-distances at `delta`, with their gradient.
    pub fn stability(&self, i: usize, delta: &[f64], want_grad: bool) -> Result<(f64, f64, Vec<f64>)> {
        let x = self.xs[i];
        let (t, n, d) = (x.frames(), x.objects(), x.dim());
        let obj_len = x.obj().len();
        let mut tape = Tape::new();
        let bp = bind(&mut tape, self.theta, |_| false);
        let base = InputVars::constant(&mut tape, x)?;
        let mk = |tape: &mut Tape, v: Vec<f64>, r: usize, c: usize| -> Result<_> {
            let t = Tensor::matrix(r, c, v)?;
            Ok(if want_grad { tape.leaf(t) } else { tape.constant(t) })
        };
        let d_obj = mk(&mut tape, delta[..obj_len].to_vec(), t * n, d)?;
        let d_ctx = mk(&mut tape, delta[obj_len..].to_vec(), t, d)?;
        let input = InputVars {
            obj: tape.add(base.obj, d_obj)?,
            ctx: tape.add(base.ctx, d_ctx)?,
            objects: n,
        };
        let fv = forward_on_tape(&mut tape, &bp, &self.theta.dims, &input, ForwardOptions::frames_only())?;
        let a = &self.anchors[i];
        let pc = tape.constant(Tensor::matrix(t, 1, a.p_clean.clone())?);
        let hc = tape.constant(a.h_clean.unflatten());
        let spd = mse(&mut tape, fv.p, pc)?;
        let sld = mse(&mut tape, fv.h2, hc)?;
        let (spd_v, sld_v) = (tape.value(spd).item(), tape.value(sld).item());
        if !want_grad {
            return Ok((spd_v, sld_v, Vec::new()));
        }
        let total = tape.add(spd, sld)?;
        tape.backward(total)?;
        let mut g = Vec::with_capacity(delta.len());
        for v in [d_obj, d_ctx] {
            match tape.grad(v) {
                Some(gt) => g.extend_from_slice(gt.data()),
                None => g.extend(std::iter::repeat_n(0.0, tape.value(v).len())),
            }
        }
        Ok((spd_v, sld_v, g))
    }
}

impl PerturbationObjective for SecureObjective<'_> {
    fn batch_len(&self) -> usize {
        self.xs.len()
    }

    fn dim(&self, i: usize) -> usize {
        self.xs[i].len()
    }

    fn obj_len(&self, i: usize) -> usize {
        self.xs[i].obj().len()
    }

    fn value_and_grad(&self, i: usize, delta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (spd, sld, g) = self.stability(i, delta, true)?;
        let c = &self.anchors[i].consistency;
        Ok((c.cps + c.clm + spd + sld, g))
    }
}

/// Worst-case perturbation of each input under `θ`, with the consistency
/// terms anchored at `θ*`. Deterministic per `(inputs, cfg, seed)`.
pub fn find_worst_case(
    xs: &[&FeatureSequence],
    theta: &ModelParams,
    theta_star: &ModelParams,
    cfg: &PgdConfig,
    seed: u64,
) -> Result<Vec<Perturbation>> {
    let objective = SecureObjective::new(xs.to_vec(), theta, theta_star)?;
    Ok(maximize(&objective, cfg, seed)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_examples() {
        let d = [0.012, 0.016];
        let p = project_values(&d, 0.01, NormKind::L2);
        assert!((p[0] - 0.006).abs() < 1e-15 && (p[1] - 0.008).abs() < 1e-15);
        let inside = [0.001, -0.002];
        assert_eq!(project_values(&inside, 0.01, NormKind::L2), inside.to_vec());
        assert_eq!(
            project_values(&[0.03, -0.005], 0.01, NormKind::Linf),
            vec![0.01, -0.005]
        );
    }

    #[test]
    fn step_examples() {
        assert_eq!(pgd_step(&[0.0, 0.0], &[1.0, -2.0], 0.002).unwrap(), vec![0.002, -0.004]);
        assert_eq!(pgd_step(&[0.1, 0.2], &[0.0, 0.0], 0.002).unwrap(), vec![0.1, 0.2]);
        let s = pgd_step_shared(&[0.0, 0.0], &[vec![1.0, 0.0], vec![3.0, 0.0]], 0.002).unwrap();
        assert!((s[0] - 0.004).abs() < 1e-18 && s[1] == 0.0);
        assert!(pgd_step(&[0.0], &[1.0, 2.0], 0.1).is_err());
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = PgdConfig {
            alpha: 0.0,
            ..PgdConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig { field, .. }) if field == "alpha"));
        let bad = PgdConfig {
            iterations: 0,
            ..PgdConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig { field, .. }) if field == "iterations"));
    }
}
