//! Video-level average precision and mean time-to-accident.
//!
//! A positive video counts as detected at threshold `q` when some frame at or
//! before its accident frame reaches `q`; a negative video raises a false
//! alarm when any frame reaches `q`. Thresholds are the distinct positive
//! probabilities observed anywhere in the predictions.

use serde::{Deserialize, Serialize};

use crate::data::VideoLabel;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    /// Mean lead time in seconds over the detected positives; `None` when
    /// nothing is detected.
    pub tta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub ap: f64,
    pub mtta_seconds: f64,
    /// One row per threshold, ascending.
    pub table: Vec<ThresholdRow>,
    /// `(recall, precision)` points the area is taken over, starting at
    /// `(0, 1)`.
    pub curve: Vec<(f64, f64)>,
}

fn check_inputs(predictions: &[Vec<f64>], labels: &[VideoLabel], op: &'static str) -> Result<()> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape {
            op,
            lhs: vec![predictions.len()],
            rhs: vec![labels.len()],
        });
    }
    for (p, l) in predictions.iter().zip(labels) {
        if l.accident && (l.tau == 0 || l.tau > p.len()) {
            return Err(Error::Domain {
                op,
                reason: format!("accident frame {} outside a {}-frame prediction", l.tau, p.len()),
            });
        }
        if l.fps == 0 {
            return Err(Error::Domain {
                op,
                reason: "fps must be positive".into(),
            });
        }
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("{op}: prediction"),
            });
        }
    }
    if !labels.iter().any(|l| l.accident) {
        return Err(Error::Domain {
            op,
            reason: "no positive video".into(),
        });
    }
    Ok(())
}

/// Distinct observed probabilities above zero, ascending.
pub fn thresholds(predictions: &[Vec<f64>]) -> Vec<f64> {
    let mut q: Vec<f64> = predictions.iter().flatten().copied().filter(|&x| x > 0.0).collect();
    q.sort_by(f64::total_cmp);
    q.dedup();
    q
}

/// Index of the last threshold `<= v`, if any.
fn upper_index(q: &[f64], v: f64) -> Option<usize> {
    q.partition_point(|&x| x <= v).checked_sub(1)
}

fn sweep(predictions: &[Vec<f64>], labels: &[VideoLabel]) -> Vec<ThresholdRow> {
    let q = thresholds(predictions);
    let m = q.len();
    let mut tp_diff = vec![0i64; m + 1];
    let mut fp_diff = vec![0i64; m + 1];
    // Lead times are summed in whole frames per frame rate, so every
    // threshold's mean is formed from exact integers.
    let mut lead_diff: Vec<(u32, Vec<i64>)> = Vec::new();
    let positives = labels.iter().filter(|l| l.accident).count();

    for (p, l) in predictions.iter().zip(labels) {
        if l.accident {
            // Record-breaking prefix maxima up to tau: thresholds in
            // (previous record, record] first fire at that frame.
            let mut lo = 0usize;
            let mut best = f64::NEG_INFINITY;
            for (k, &v) in p[..l.tau].iter().enumerate() {
                if v > best {
                    best = v;
                    if let Some(hi) = upper_index(&q, v) {
                        if hi + 1 > lo {
                            let lead = (l.tau - (k + 1)) as i64;
                            let slot = match lead_diff.iter().position(|(f, _)| *f == l.fps) {
                                Some(j) => j,
                                None => {
                                    lead_diff.push((l.fps, vec![0; m + 1]));
                                    lead_diff.len() - 1
                                }
                            };
                            tp_diff[lo] += 1;
                            tp_diff[hi + 1] -= 1;
                            lead_diff[slot].1[lo] += lead;
                            lead_diff[slot].1[hi + 1] -= lead;
                            lo = hi + 1;
                        }
                    }
                }
            }
        } else {
            let peak = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if let Some(hi) = upper_index(&q, peak) {
                fp_diff[0] += 1;
                fp_diff[hi + 1] -= 1;
            }
        }
    }

    let mut rows = Vec::with_capacity(m);
    let (mut tp, mut fp) = (0i64, 0i64);
    let mut leads = vec![0i64; lead_diff.len()];
    for (i, &threshold) in q.iter().enumerate() {
        tp += tp_diff[i];
        fp += fp_diff[i];
        for (acc, (_, d)) in leads.iter_mut().zip(&lead_diff) {
            *acc += d[i];
        }
        let tta: f64 = leads
            .iter()
            .zip(&lead_diff)
            .map(|(&n, (f, _))| n as f64 / f64::from(*f))
            .sum();
        let (tp_u, fp_u) = (tp as usize, fp as usize);
        rows.push(ThresholdRow {
            threshold,
            tp: tp_u,
            fp: fp_u,
            fn_: positives - tp_u,
            precision: if tp_u + fp_u == 0 {
                1.0
            } else {
                tp_u as f64 / (tp_u + fp_u) as f64
            },
            recall: tp_u as f64 / positives as f64,
            tta: (tp_u > 0).then(|| tta / tp_u as f64),
        });
    }
    rows
}

/// Area under `(recall, precision)` points by the trapezoid rule, after
/// adding `(0, 1)` and sorting by recall (ties by descending precision).
pub fn pr_area(points: &[(f64, f64)]) -> (f64, Vec<(f64, f64)>) {
    let mut curve = Vec::with_capacity(points.len() + 1);
    curve.push((0.0, 1.0));
    curve.extend_from_slice(points);
    curve.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let area = curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum();
    (area, curve)
}

fn mean_tta(rows: &[ThresholdRow]) -> f64 {
    let ttas: Vec<f64> = rows.iter().filter_map(|r| r.tta).collect();
    if ttas.is_empty() {
        0.0
    } else {
        ttas.iter().sum::<f64>() / ttas.len() as f64
    }
}

/// AP together with mTTA and the full threshold table.
pub fn evaluate_predictions(predictions: &[Vec<f64>], labels: &[VideoLabel]) -> Result<MetricResult> {
    check_inputs(predictions, labels, "average_precision")?;
    if labels.iter().all(|l| l.accident) {
        return Err(Error::Domain {
            op: "average_precision",
            reason: "no negative video".into(),
        });
    }
    let table = sweep(predictions, labels);
    let points: Vec<(f64, f64)> = table.iter().map(|r| (r.recall, r.precision)).collect();
    let (ap, curve) = pr_area(&points);
    Ok(MetricResult {
        ap,
        mtta_seconds: mean_tta(&table),
        table,
        curve,
    })
}

pub fn average_precision(predictions: &[Vec<f64>], labels: &[VideoLabel]) -> Result<MetricResult> {
    evaluate_predictions(predictions, labels)
}

/// Mean over thresholds (with at least one detection) of the mean lead time.
pub fn mtta(predictions: &[Vec<f64>], labels: &[VideoLabel]) -> Result<f64> {
    check_inputs(predictions, labels, "mtta")?;
    Ok(mean_tta(&sweep(predictions, labels)))
}
