//! Deterministic numerical properties of the similarity, head and score
//! computations.

#![allow(dead_code)]

use protogrid_core::data::RasterSample;
use protogrid_core::explain::prototype_scores;
use protogrid_core::head::{classify, softmax};
use protogrid_core::model::ProtoNet;
use protogrid_core::prototype::log_ratio;

/// `ln((D+1)/(D+eps))` decreases strictly in `D` and peaks at `ln(1/eps)`.
pub fn similarity_shape(eps: f64) -> Result<(), String> {
    let peak = log_ratio(0.0, eps);
    if (peak - (1.0 / eps).ln()).abs() > 1e-9 {
        return Err(format!("peak {peak} differs from ln(1/eps) = {}", (1.0 / eps).ln()));
    }
    let mut prev = peak;
    for i in 1..=2000 {
        let d = 1e-6 * 1.01f64.powi(i);
        let s = log_ratio(d, eps);
        if !(s < prev) {
            return Err(format!("not strictly decreasing at D = {d:e}: {s} >= {prev}"));
        }
        if !(s > 0.0) {
            return Err(format!("similarity {s} not positive at D = {d:e}"));
        }
        prev = s;
    }
    Ok(())
}

/// Class probabilities of every sample sum to one within `1e-6`.
pub fn simplex(net: &ProtoNet<f64>, samples: &[RasterSample]) -> Result<(), String> {
    for s in samples {
        let m = net.forward(&[s]).map_err(|e| e.to_string())?.similarity.max;
        let p = classify(&m, &net.head).map_err(|e| e.to_string())?;
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || p.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(format!("sample {}: probabilities {p:?} sum to {sum}", s.id));
        }
        let logits = net.logits(&[s]).map_err(|e| e.to_string())?;
        let q = softmax(&logits);
        if p.iter().zip(&q).any(|(a, b)| (a - b).abs() > 1e-12) {
            return Err(format!("sample {}: classify and softmax(logits) disagree", s.id));
        }
    }
    Ok(())
}

/// Prototype scores for each class sum to that class's logit within `1e-5`.
pub fn scores_sum_to_logits(net: &ProtoNet<f64>, samples: &[RasterSample]) -> Result<(), String> {
    for s in samples {
        for k in 0..net.classes() {
            let ps = prototype_scores(net, s, k).map_err(|e| e.to_string())?;
            let sum: f64 = ps.scores.iter().sum();
            if (sum - ps.logits[k]).abs() > 1e-5 {
                return Err(format!("sample {} class {k}: scores sum {sum}, logit {}", s.id, ps.logits[k]));
            }
        }
    }
    Ok(())
}
