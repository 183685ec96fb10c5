//! Drift of generated chunks away from the reference frame.
//!
//! For each chunk the per-position mean and standard deviation over its
//! frames are compared with the reference, whose standard deviation is zero:
//! `drift = rms(mean − reference) + rms(sd)`.

use std::fmt::Write as _;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// One drift value per chunk. Chunks are `[frames · tokens, channels]` and
/// the reference `[tokens, channels]`.
pub fn drift_report(chunks: &[Tensor], reference: &Tensor) -> Result<Vec<f64>> {
    let r = reference.data();
    let n = r.len();
    chunks
        .iter()
        .map(|c| {
            let x = c.data();
            if n == 0 || x.is_empty() || x.len() % n != 0 {
                return Err(Error::Config(format!(
                    "chunk of {} values is not a whole number of {n}-value frames",
                    x.len()
                )));
            }
            let frames = (x.len() / n) as f64;
            let mut mean = vec![0.0; n];
            for (i, v) in x.iter().enumerate() {
                mean[i % n] += v / frames;
            }
            let mut var = vec![0.0; n];
            for (i, v) in x.iter().enumerate() {
                var[i % n] += (v - mean[i % n]).powi(2) / frames;
            }
            let mean_rms = (mean.iter().zip(r).map(|(m, r)| (m - r).powi(2)).sum::<f64>() / n as f64).sqrt();
            let sd_rms = (var.iter().sum::<f64>() / n as f64).sqrt();
            Ok(mean_rms + sd_rms)
        })
        .collect()
}

/// `chunk,drift` CSV.
pub fn drift_csv(curve: &[f64]) -> String {
    let mut s = String::from("chunk,drift\n");
    for (i, d) in curve.iter().enumerate() {
        let _ = writeln!(s, "{},{d:.6}", i + 1);
    }
    s
}

pub fn mean_drift(curve: &[f64]) -> f64 {
    curve.iter().sum::<f64>() / curve.len().max(1) as f64
}
