use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::retrieval::ScoreMode;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision/recall over a threshold sweep. Precision is 1.0 at
/// thresholds where nothing is predicted positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub positives: usize,
    pub negatives: usize,
    pub empty_prediction_precision: f64,
}

/// `steps + 1` evenly spaced thresholds over the score range of `mode`:
/// [0, pi] for angles, [0, 1] for cosine similarity.
pub fn threshold_sweep(mode: ScoreMode, steps: usize) -> Vec<f64> {
    let hi = match mode {
        ScoreMode::Angle => PI,
        ScoreMode::Cosine => 1.0,
    };
    let steps = steps.max(1);
    (0..=steps).map(|i| hi * i as f64 / steps as f64).collect()
}

/// Predict positive when `score >= t`. `scored` holds (score, is_positive).
pub fn pr_curve(scored: &[(f64, bool)], thresholds: &[f64]) -> Result<PrCurve> {
    let positives = scored.iter().filter(|s| s.1).count();
    if positives == 0 {
        return Err(Error::invalid("precision-recall needs at least one positive pair"));
    }
    let mut sorted: Vec<(f64, bool)> = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    // prefix counts of true positives by descending score
    let mut tp_prefix = Vec::with_capacity(sorted.len() + 1);
    tp_prefix.push(0usize);
    for s in &sorted {
        tp_prefix.push(tp_prefix.last().unwrap() + usize::from(s.1));
    }
    let points = thresholds
        .iter()
        .map(|&t| {
            let predicted = sorted.partition_point(|s| s.0 >= t);
            let tp = tp_prefix[predicted];
            PrPoint {
                threshold: t,
                precision: if predicted == 0 { 1.0 } else { tp as f64 / predicted as f64 },
                recall: tp as f64 / positives as f64,
            }
        })
        .collect();
    Ok(PrCurve {
        points,
        positives,
        negatives: scored.len() - positives,
        empty_prediction_precision: 1.0,
    })
}

/// Trapezoidal area under precision as a function of recall, over the
/// sampled points.
pub fn pr_area(curve: &PrCurve) -> f64 {
    let mut pts: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.recall, p.precision)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    pts.windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// CSV rows `curve,threshold,precision,recall`.
pub fn write_pr_csv<W: Write>(w: &mut W, curves: &[(String, PrCurve)]) -> std::io::Result<()> {
    writeln!(w, "curve,threshold,precision,recall")?;
    for (name, curve) in curves {
        for p in &curve.points {
            writeln!(w, "{name},{},{},{}", p.threshold, p.precision, p.recall)?;
        }
    }
    Ok(())
}
