//! Clean, input-noise and parameter-noise evaluation.

use std::fmt;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureSequence};
use crate::error::{Error, Result};
use crate::evalsuite::metrics::{evaluate_predictions, MetricResult};
use crate::model::{predict, ModelParams, Param};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "sigma", rename_all = "lowercase")]
pub enum Condition {
    Clean,
    Ip(f64),
    Lp(f64),
}

impl Condition {
    pub fn sigma(self) -> f64 {
        match self {
            Condition::Clean => 0.0,
            Condition::Ip(s) | Condition::Lp(s) => s,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Clean => f.write_str("Clean"),
            Condition::Ip(s) => write!(f, "IP ({s})"),
            Condition::Lp(s) => write!(f, "LP ({s})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub model: String,
    pub condition: Condition,
    pub seeds: usize,
    pub ap_mean: f64,
    pub ap_std: f64,
    pub mtta_mean: f64,
    pub mtta_std: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub const CSV_HEADER: &'static str = "model,condition,sigma,seeds,ap_mean,ap_std,mtta_mean,mtta_std";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let kind = match r.condition {
                Condition::Clean => "clean",
                Condition::Ip(_) => "ip",
                Condition::Lp(_) => "lp",
            };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.model,
                kind,
                r.condition.sigma(),
                r.seeds,
                r.ap_mean,
                r.ap_std,
                r.mtta_mean,
                r.mtta_std
            );
        }
        s
    }

    pub fn row(&self, model: &str, condition: Condition) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.model == model && r.condition == condition)
    }

    pub fn has_clean_row(&self) -> bool {
        self.rows.iter().any(|r| r.condition == Condition::Clean)
    }

    /// Side-by-side table with one column pair per model, in the order the
    /// models first appear.
    pub fn comparison_markdown(&self) -> String {
        let mut models: Vec<&str> = Vec::new();
        let mut conditions: Vec<Condition> = Vec::new();
        for r in &self.rows {
            if !models.contains(&r.model.as_str()) {
                models.push(&r.model);
            }
            if !conditions.contains(&r.condition) {
                conditions.push(r.condition);
            }
        }
        let mut s = String::from("| Condition |");
        for m in &models {
            let _ = write!(s, " {m} AP | {m} mTTA (s) |");
        }
        s.push_str("\n|---|");
        s.push_str(&"---|---|".repeat(models.len()));
        s.push('\n');
        for c in conditions {
            let _ = write!(s, "| {c} |");
            for m in &models {
                match self.row(m, c) {
                    Some(r) => {
                        let _ = write!(
                            s,
                            " {:.4} ± {:.4} | {:.3} ± {:.3} |",
                            r.ap_mean, r.ap_std, r.mtta_mean, r.mtta_std
                        );
                    }
                    None => s.push_str(" - | - |"),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

pub fn predict_all(params: &ModelParams, videos: &[&FeatureSequence]) -> Result<Vec<Vec<f64>>> {
    videos.par_iter().map(|x| predict(x, params)).collect()
}

/// AP/mTTA of `params` on the unmodified dataset.
pub fn evaluate(params: &ModelParams, dataset: &Dataset) -> Result<MetricResult> {
    let xs: Vec<&FeatureSequence> = dataset.videos().iter().map(|v| &v.features).collect();
    evaluate_predictions(&predict_all(params, &xs)?, &dataset.labels())
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::config("sigma", format!("must be finite and >= 0, got {sigma}")));
    }
    Ok(())
}

fn noise(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("sigma checked")
}

fn row(model: &str, condition: Condition, metrics: &[MetricResult]) -> BenchRow {
    let aps: Vec<f64> = metrics.iter().map(|m| m.ap).collect();
    let mttas: Vec<f64> = metrics.iter().map(|m| m.mtta_seconds).collect();
    let (ap_mean, ap_std) = mean_std(&aps);
    let (mtta_mean, mtta_std) = mean_std(&mttas);
    BenchRow {
        model: model.into(),
        condition,
        seeds: metrics.len(),
        ap_mean,
        ap_std,
        mtta_mean,
        mtta_std,
    }
}

pub fn clean_row(model: &str, params: &ModelParams, dataset: &Dataset) -> Result<BenchRow> {
    Ok(row(model, Condition::Clean, &[evaluate(params, dataset)?]))
}

/// Metrics with i.i.d. `N(0, σ²)` noise added to every feature value, one
/// evaluation per seed.
pub fn input_perturb_metrics(
    params: &ModelParams,
    dataset: &Dataset,
    sigma: f64,
    seeds: &[u64],
) -> Result<Vec<MetricResult>> {
    check_sigma(sigma)?;
    let labels = dataset.labels();
    seeds
        .iter()
        .map(|&seed| {
            if sigma == 0.0 {
                return evaluate(params, dataset);
            }
            let preds = dataset
                .videos()
                .par_iter()
                .enumerate()
                .map(|(i, v)| predict(&input_noise(&v.features, sigma, seed, i)?, params))
                .collect::<Result<Vec<_>>>()?;
            evaluate_predictions(&preds, &labels)
        })
        .collect()
}

/// `x` plus the input noise that video `index` receives under `seed`.
pub fn input_noise(x: &FeatureSequence, sigma: f64, seed: u64, index: usize) -> Result<FeatureSequence> {
    check_sigma(sigma)?;
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let dist = noise(sigma);
    Ok(x.map_values(|a| a + dist.sample(&mut rng)))
}

pub fn input_perturb_eval(
    model: &str,
    params: &ModelParams,
    dataset: &Dataset,
    sigma: f64,
    seeds: &[u64],
) -> Result<BenchRow> {
    let m = input_perturb_metrics(params, dataset, sigma, seeds)?;
    Ok(row(model, Condition::Ip(sigma), &m))
}

/// A copy of `params` with `N(0, σ²)` noise on every second-layer GRU weight
/// and bias.
pub fn perturb_gru2(params: &ModelParams, sigma: f64, seed: u64) -> Result<ModelParams> {
    check_sigma(sigma)?;
    let mut out = params.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = noise(sigma);
    for p in Param::ALL.iter().copied().filter(|p| p.is_gru2()) {
        out.get_mut(p)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += dist.sample(&mut rng));
    }
    Ok(out)
}

pub fn latent_perturb_metrics(
    params: &ModelParams,
    dataset: &Dataset,
    sigma: f64,
    seeds: &[u64],
) -> Result<Vec<MetricResult>> {
    check_sigma(sigma)?;
    let before = params.checksum();
    let out = seeds
        .iter()
        .map(|&seed| evaluate(&perturb_gru2(params, sigma, seed)?, dataset))
        .collect::<Result<Vec<_>>>()?;
    if params.checksum() != before {
        return Err(Error::Domain {
            op: "latent_perturb_eval",
            reason: "parameters changed during evaluation".into(),
        });
    }
    Ok(out)
}

pub fn latent_perturb_eval(
    model: &str,
    params: &ModelParams,
    dataset: &Dataset,
    sigma: f64,
    seeds: &[u64],
) -> Result<BenchRow> {
    let m = latent_perturb_metrics(params, dataset, sigma, seeds)?;
    Ok(row(model, Condition::Lp(sigma), &m))
}

/// Clean row followed by one row per IP and LP level.
pub fn bench(
    model: &str,
    params: &ModelParams,
    dataset: &Dataset,
    ip_sigmas: &[f64],
    lp_sigmas: &[f64],
    seeds: &[u64],
) -> Result<BenchReport> {
    let mut rows = vec![clean_row(model, params, dataset)?];
    for &s in ip_sigmas {
        rows.push(input_perturb_eval(model, params, dataset, s, seeds)?);
    }
    for &s in lp_sigmas {
        rows.push(latent_perturb_eval(model, params, dataset, s, seeds)?);
    }
    Ok(BenchReport { rows })
}
