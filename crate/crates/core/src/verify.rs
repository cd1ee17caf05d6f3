//! The finite-difference suite: every tape primitive, and every loss term
//! differentiated with respect to randomly chosen model coordinates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{FeatureSequence, VideoLabel};
use crate::error::Result;
use crate::losses::{anticipation_term, enhancement_term, mse, task_loss, TaskWeights};
use crate::model::{bind, forward_on_tape, init_params, ForwardOptions, InputVars, ModelDims, ModelParams, Param};
use crate::numerics::gradcheck::primitive_cases;
use crate::numerics::{finite_diff_check, finite_diff_check_coords, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LossCase {
    Anticipation,
    Enhancement,
    Task,
    Cps,
    Spd,
    Clm,
    Sld,
    Total,
}

impl LossCase {
    pub const ALL: [LossCase; 8] = [
        LossCase::Anticipation,
        LossCase::Enhancement,
        LossCase::Task,
        LossCase::Cps,
        LossCase::Spd,
        LossCase::Clm,
        LossCase::Sld,
        LossCase::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossCase::Anticipation => "anticipation",
            LossCase::Enhancement => "enhancement",
            LossCase::Task => "task",
            LossCase::Cps => "cps",
            LossCase::Spd => "spd",
            LossCase::Clm => "clm",
            LossCase::Sld => "sld",
            LossCase::Total => "total",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub seed: u64,
    pub checks: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub cases: Vec<CaseResult>,
    pub passed: bool,
}

impl SuiteReport {
    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.cases.iter().filter(|c| !c.passed)
    }
}

/// A small model, two videos and a fixed perturbation.
pub struct Fixture {
    pub theta: ModelParams,
    pub theta_star: ModelParams,
    pub videos: Vec<(FeatureSequence, VideoLabel)>,
    pub delta: (Vec<f64>, Vec<f64>),
}

impl Fixture {
    pub fn new(seed: u64) -> Result<Self> {
        let dims = ModelDims {
            d: 4,
            hidden: 6,
            heads: 2,
        };
        let (t, n) = (6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = init_params(dims, seed)?;
        // Keep ρ away from 1 so the log terms are not at a stationary point.
        theta.get_mut(Param::Rho1).data_mut()[0] = rng.random_range(0.5..2.0);
        theta.get_mut(Param::Rho2).data_mut()[0] = rng.random_range(0.5..2.0);
        let mut theta_star = theta.clone();
        for &p in Param::ALL.iter().filter(|p| !p.is_rho()) {
            for v in theta_star.get_mut(p).data_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
        let mut video = |id: &str| -> Result<FeatureSequence> {
            let obj = (0..t * n * dims.d).map(|_| rng.random_range(-1.5..1.5)).collect();
            let ctx = (0..t * dims.d).map(|_| rng.random_range(-1.5..1.5)).collect();
            FeatureSequence::new(id, t, n, dims.d, obj, ctx)
        };
        let videos = vec![
            (video("pos")?, VideoLabel::positive(4, 10)),
            (video("neg")?, VideoLabel::negative(10)),
        ];
        let delta = (
            (0..t * n * dims.d).map(|_| rng.random_range(-0.3..0.3)).collect(),
            (0..t * dims.d).map(|_| rng.random_range(-0.3..0.3)).collect(),
        );
        Ok(Fixture {
            theta,
            theta_star,
            videos,
            delta,
        })
    }

    /// Builds `case` for video `v`, with parameter `p` bound to `x`.
    pub fn loss(&self, tape: &mut Tape, case: LossCase, v: usize, p: Param, x: Var) -> Result<Var> {
        let (feat, label) = &self.videos[v];
        let dims = self.theta.dims;
        let mut bp = bind(tape, &self.theta, |_| false);
        bp.set(p, x);
        let input = InputVars::constant(tape, feat)?;
        let fv = forward_on_tape(tape, &bp, &dims, &input, ForwardOptions::default())?;
        let mut reference = || -> Result<(Var, Var)> {
            let bs = bind(tape, &self.theta_star, |_| false);
            let r = forward_on_tape(tape, &bs, &dims, &input, ForwardOptions::frames_only())?;
            Ok((r.p, r.h2))
        };
        let perturbed = |tape: &mut Tape| -> Result<(Var, Var)> {
            let (t, n, d) = (feat.frames(), feat.objects(), feat.dim());
            let d_obj = tape.constant(Tensor::matrix(t * n, d, self.delta.0.clone())?);
            let d_ctx = tape.constant(Tensor::matrix(t, d, self.delta.1.clone())?);
            let xp = InputVars {
                obj: tape.add(input.obj, d_obj)?,
                ctx: tape.add(input.ctx, d_ctx)?,
                objects: n,
            };
            let r = forward_on_tape(tape, &bp, &dims, &xp, ForwardOptions::frames_only())?;
            Ok((r.p, r.h2))
        };
        let task = |tape: &mut Tape| -> Result<Var> {
            let a = anticipation_term(tape, fv.p, label)?;
            let e = enhancement_term(tape, fv.p_e.expect("aux head"), label)?;
            let w = TaskWeights {
                rho1: bp.get(Param::Rho1),
                rho2: bp.get(Param::Rho2),
                mu1: self.theta.mu1,
                mu2: self.theta.mu2,
            };
            task_loss(tape, a, e, &w)
        };
        match case {
            LossCase::Anticipation => anticipation_term(tape, fv.p, label),
            LossCase::Enhancement => enhancement_term(tape, fv.p_e.expect("aux head"), label),
            LossCase::Task => task(tape),
            LossCase::Cps => {
                let (rp, _) = reference()?;
                mse(tape, fv.p, rp)
            }
            LossCase::Clm => {
                let (_, rh) = reference()?;
                mse(tape, fv.h2, rh)
            }
            LossCase::Spd => {
                let (pp, _) = perturbed(tape)?;
                mse(tape, fv.p, pp)
            }
            LossCase::Sld => {
                let (_, ph) = perturbed(tape)?;
                mse(tape, fv.h2, ph)
            }
            LossCase::Total => {
                let (rp, rh) = reference()?;
                let (pp, ph) = perturbed(tape)?;
                let mut total = task(tape)?;
                for (a, b, lambda) in [(fv.p, rp, 50.0), (fv.p, pp, 50.0), (fv.h2, rh, 0.01), (fv.h2, ph, 0.01)] {
                    let m = mse(tape, a, b)?;
                    let s = tape.scale(m, lambda);
                    total = tape.add(total, s)?;
                }
                Ok(total)
            }
        }
    }
}

/// Parameters that influence `case` at all.
fn relevant(case: LossCase, p: Param) -> bool {
    let aux = matches!(
        p,
        Param::AuxWq
            | Param::AuxWk
            | Param::AuxWv
            | Param::AuxWo
            | Param::AuxW1
            | Param::AuxB1
            | Param::AuxW2
            | Param::AuxB2
    );
    let head = matches!(p, Param::HeadW1 | Param::HeadB1 | Param::HeadW2 | Param::HeadB2);
    match case {
        LossCase::Anticipation => !aux && !p.is_rho(),
        LossCase::Enhancement => !head && !p.is_rho(),
        LossCase::Task | LossCase::Total => true,
        LossCase::Cps | LossCase::Spd => !aux && !p.is_rho(),
        LossCase::Clm | LossCase::Sld => !aux && !head && !p.is_rho(),
    }
}

/// Draws `count` distinct `(parameter, flat index)` coordinates relevant to
/// `case`.
pub fn sample_coordinates(
    params: &ModelParams,
    case: LossCase,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(Param, usize)> {
    let pool: Vec<(Param, usize)> = params
        .iter()
        .filter(|(p, _)| relevant(case, *p))
        .flat_map(|(p, t)| (0..t.len()).map(move |i| (p, i)))
        .collect();
    rand::seq::index::sample(rng, pool.len(), count.min(pool.len()))
        .into_iter()
        .map(|k| pool[k])
        .collect()
}

/// Checks one loss case on `coords` random coordinates for one seed.
pub fn check_loss_case(case: LossCase, seed: u64, coords: usize, tolerance: f64) -> Result<CaseResult> {
    let fx = Fixture::new(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xFD);
    let v = usize::from(seed % 2 == 1 && !matches!(case, LossCase::Total));
    let mut max_rel_err: f64 = 0.0;
    let mut passed = true;
    let picks = sample_coordinates(&fx.theta, case, coords, &mut rng);
    for &(p, idx) in &picks {
        let report = finite_diff_check_coords(
            |tape, x| fx.loss(tape, case, v, p, x),
            fx.theta.get(p),
            &[idx],
            FD_STEP,
            tolerance,
        )?;
        max_rel_err = max_rel_err.max(report.max_rel_err);
        passed &= report.passed;
    }
    Ok(CaseResult {
        name: format!("loss/{}", case.name()),
        seed,
        checks: picks.len(),
        max_rel_err,
        passed,
    })
}

/// Checks every tape primitive at `points` random inputs.
pub fn check_primitives(seed: u64, points: usize, tolerance: f64) -> Result<Vec<CaseResult>> {
    primitive_cases()
        .into_iter()
        .enumerate()
        .map(|(k, (name, f, (lo, hi)))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000) + k as u64);
            let mut max_rel_err: f64 = 0.0;
            let mut passed = true;
            for _ in 0..points {
                let x = Tensor::matrix(3, 3, (0..9).map(|_| rng.random_range(lo..hi)).collect())?;
                let r = finite_diff_check(f, &x, FD_STEP, tolerance)?;
                max_rel_err = max_rel_err.max(r.max_rel_err);
                passed &= r.passed;
            }
            Ok(CaseResult {
                name: format!("op/{name}"),
                seed,
                checks: points * 9,
                max_rel_err,
                passed,
            })
        })
        .collect()
}

/// Primitives at a few points, then every loss on `coords` coordinates, for
/// each seed.
pub fn gradcheck_suite(seeds: &[u64], coords: usize, tolerance: f64) -> Result<SuiteReport> {
    let mut cases = Vec::new();
    for &seed in seeds {
        cases.extend(check_primitives(seed, 4, tolerance)?);
        for case in LossCase::ALL {
            cases.push(check_loss_case(case, seed, coords, tolerance)?);
        }
    }
    let passed = cases.iter().all(|c| c.passed);
    Ok(SuiteReport {
        tolerance,
        cases,
        passed,
    })
}
