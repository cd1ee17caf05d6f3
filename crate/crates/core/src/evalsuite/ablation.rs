//! Cumulative loss-term sweep evaluated under input noise.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evalsuite::bench::{input_perturb_eval, BenchRow};
use crate::losses::Term;
use crate::model::ModelParams;
use crate::trainer::{secure_finetune, TrainConfig};

/// Task loss alone, then each robustness term added in turn.
pub fn cumulative_configs() -> Vec<Vec<Term>> {
    (0..=Term::ALL.len()).map(|k| Term::ALL[..k].to_vec()).collect()
}

pub fn term_label(terms: &[Term]) -> String {
    let mut s = String::from("L_task");
    for t in terms {
        let _ = write!(s, " + L_{}", t.name());
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub terms: Vec<Term>,
    pub label: String,
    pub bench: BenchRow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub sigma: f64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,cps,spd,clm,sld,sigma,seeds,ap_mean,ap_std,mtta_mean,mtta_std\n");
        for (i, r) in self.rows.iter().enumerate() {
            let on = |t: Term| u8::from(r.terms.contains(&t));
            let b = &r.bench;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                i + 1,
                on(Term::Cps),
                on(Term::Spd),
                on(Term::Clm),
                on(Term::Sld),
                self.sigma,
                b.seeds,
                b.ap_mean,
                b.ap_std,
                b.mtta_mean,
                b.mtta_std
            );
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| L_cps | L_spd | L_clm | L_sld | AP | mTTA (s) |\n|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let mark = |t: Term| if r.terms.contains(&t) { "✓" } else { "" };
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {:.4} | {:.3} |",
                mark(Term::Cps),
                mark(Term::Spd),
                mark(Term::Clm),
                mark(Term::Sld),
                r.bench.ap_mean,
                r.bench.mtta_mean
            );
        }
        s
    }
}

/// One fine-tune from `baseline` per term set, each evaluated on `test` under
/// `IP(sigma)`. The first set must be empty; that row evaluates `baseline`
/// itself.
pub fn ablation_run(
    baseline: &ModelParams,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    configs: &[Vec<Term>],
    sigma: f64,
    seeds: &[u64],
) -> Result<AblationTable> {
    match configs.first() {
        None => return Err(Error::config("ablation", "no configurations given")),
        Some(first) if !first.is_empty() => {
            return Err(Error::config(
                "ablation",
                "the first configuration must be task-loss only",
            ))
        }
        _ => {}
    }
    let mut rows = Vec::with_capacity(configs.len());
    for terms in configs {
        let label = term_label(terms);
        let bench = if terms.is_empty() {
            input_perturb_eval(&label, baseline, test, sigma, seeds)?
        } else {
            let mut c = cfg.clone();
            for t in Term::ALL {
                c.weights.set_enabled(t, terms.contains(&t));
            }
            let (theta, _) = secure_finetune(baseline, train, &c)?;
            input_perturb_eval(&label, &theta, test, sigma, seeds)?
        };
        rows.push(AblationRow {
            terms: terms.clone(),
            label,
            bench,
        });
    }
    Ok(AblationTable { sigma, rows })
}
