//! Empirical estimates of the four divergence bounds. Every value is a
//! maximum over the inputs and perturbations actually tried, so it is a lower
//! bound on the corresponding supremum.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{maximize, random_start, sample_rng, NormKind, PgdConfig, SecureObjective};
use crate::data::{Dataset, FeatureSequence};
use crate::error::{Error, Result};
use crate::model::ModelParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificationResult {
    pub epsilon: f64,
    pub norm: NormKind,
    pub gamma1_hat: f64,
    pub gamma2_hat: f64,
    pub beta1_hat: f64,
    pub beta2_hat: f64,
    /// Stability maxima from the PGD perturbations alone.
    pub gamma2_pgd: f64,
    pub beta2_pgd: f64,
    /// Stability maxima from the random probes alone.
    pub gamma2_random: f64,
    pub beta2_random: f64,
    pub videos: usize,
    pub random_probes: usize,
    pub pgd_iterations: usize,
}

impl CertificationResult {
    pub const CSV_HEADER: &'static str = "epsilon,norm,gamma1_hat,gamma2_hat,beta1_hat,beta2_hat,\
gamma2_pgd,beta2_pgd,gamma2_random,beta2_random,videos,random_probes,pgd_iterations";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epsilon,
            match self.norm {
                NormKind::L2 => "l2",
                NormKind::Linf => "linf",
            },
            self.gamma1_hat,
            self.gamma2_hat,
            self.beta1_hat,
            self.beta2_hat,
            self.gamma2_pgd,
            self.beta2_pgd,
            self.gamma2_random,
            self.beta2_random,
            self.videos,
            self.random_probes,
            self.pgd_iterations
        )
    }
}

pub fn certification_csv(results: &[CertificationResult]) -> String {
    let mut s = String::from(CertificationResult::CSV_HEADER);
    s.push('\n');
    for r in results {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// Per-video stability maxima at one radius.
#[derive(Clone, Copy, Default)]
struct Probe {
    spd_pgd: f64,
    sld_pgd: f64,
    spd_rand: f64,
    sld_rand: f64,
}

fn fmax(it: impl Iterator<Item = f64>) -> f64 {
    it.fold(0.0, f64::max)
}

/// Certifies at each radius in `epsilons`. Random probe directions are drawn
/// once per video and rescaled to each radius; each reported stability
/// maximum also covers every smaller radius in the sweep, so the estimates are
/// non-decreasing in `ε`.
pub fn certify_secure_sweep(
    theta: &ModelParams,
    theta_star: &ModelParams,
    dataset: &Dataset,
    epsilons: &[f64],
    pgd: &PgdConfig,
    probes: usize,
    seed: u64,
) -> Result<Vec<CertificationResult>> {
    theta.ensure_compatible(theta_star)?;
    for &e in epsilons {
        if !(e >= 0.0 && e.is_finite()) {
            return Err(Error::config("epsilon", format!("must be finite and >= 0, got {e}")));
        }
    }
    let xs: Vec<&FeatureSequence> = dataset.videos().iter().map(|v| &v.features).collect();
    let objective = SecureObjective::new(xs.clone(), theta, theta_star)?;
    let gamma1_hat = fmax(objective.anchors.iter().map(|a| a.consistency.cps));
    let beta1_hat = fmax(objective.anchors.iter().map(|a| a.consistency.clm));

    // Unit-radius probe directions, one set per video.
    let directions: Vec<Vec<Vec<f64>>> = xs
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut rng = sample_rng(seed ^ 0xCE57, i);
            (0..probes)
                .map(|_| random_start(x.len(), 1.0, pgd.norm, &mut rng))
                .collect()
        })
        .collect();

    let mut order: Vec<usize> = (0..epsilons.len()).collect();
    order.sort_by(|&a, &b| epsilons[a].total_cmp(&epsilons[b]));
    let mut running = vec![Probe::default(); xs.len()];
    let mut results = vec![None; epsilons.len()];
    for k in order {
        let eps = epsilons[k];
        if eps > 0.0 {
            let cfg = PgdConfig {
                epsilon: eps,
                ..pgd.clone()
            };
            let (deltas, _) = maximize(&objective, &cfg, seed)?;
            let current = (0..xs.len())
                .into_par_iter()
                .map(|i| {
                    let (spd_pgd, sld_pgd, _) = objective.stability(i, &deltas[i].delta, false)?;
                    let mut p = Probe {
                        spd_pgd,
                        sld_pgd,
                        ..Probe::default()
                    };
                    for u in &directions[i] {
                        let d: Vec<f64> = u.iter().map(|v| v * eps).collect();
                        let (s, l, _) = objective.stability(i, &d, false)?;
                        p.spd_rand = p.spd_rand.max(s);
                        p.sld_rand = p.sld_rand.max(l);
                    }
                    Ok(p)
                })
                .collect::<Result<Vec<_>>>()?;
            for (r, c) in running.iter_mut().zip(current) {
                r.spd_pgd = r.spd_pgd.max(c.spd_pgd);
                r.sld_pgd = r.sld_pgd.max(c.sld_pgd);
                r.spd_rand = r.spd_rand.max(c.spd_rand);
                r.sld_rand = r.sld_rand.max(c.sld_rand);
            }
        }
        let gamma2_pgd = fmax(running.iter().map(|p| p.spd_pgd));
        let beta2_pgd = fmax(running.iter().map(|p| p.sld_pgd));
        let gamma2_random = fmax(running.iter().map(|p| p.spd_rand));
        let beta2_random = fmax(running.iter().map(|p| p.sld_rand));
        results[k] = Some(CertificationResult {
            epsilon: eps,
            norm: pgd.norm,
            gamma1_hat,
            gamma2_hat: fmax(running.iter().map(|p| p.spd_pgd.max(p.spd_rand))),
            beta1_hat,
            beta2_hat: fmax(running.iter().map(|p| p.sld_pgd.max(p.sld_rand))),
            gamma2_pgd,
            beta2_pgd,
            gamma2_random,
            beta2_random,
            videos: xs.len(),
            random_probes: probes,
            pgd_iterations: pgd.iterations,
        });
    }
    Ok(results.into_iter().map(|r| r.expect("every radius visited")).collect())
}

pub fn certify_secure(
    theta: &ModelParams,
    theta_star: &ModelParams,
    dataset: &Dataset,
    epsilon: f64,
    pgd: &PgdConfig,
    probes: usize,
    seed: u64,
) -> Result<CertificationResult> {
    Ok(certify_secure_sweep(theta, theta_star, dataset, &[epsilon], pgd, probes, seed)?.remove(0))
}
