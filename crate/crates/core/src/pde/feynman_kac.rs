use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use super::spec::PdeSpec;
use crate::error::{LabError, Result};
use crate::rng::{path_stream, REDUCE_CHUNK};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeEstimate {
    pub t: f64,
    pub x: f64,
    pub mean: f64,
    pub stderr: f64,
}

/// Monte Carlo estimate of
///
/// ```text
/// E[ exp(int_t^T k) g(X_T) + int_t^T exp(int_t^u k) f du | X_t = x ]
/// ```
///
/// with `dX = b dt + sqrt(a) dW` simulated by Euler on the time step of `spec`
/// and left-rectangle quadrature. Every probe reuses the same path streams.
pub fn feynman_kac_mc(spec: &PdeSpec, probes: &[(f64, f64)], n_paths: usize, seed: u64) -> Result<Vec<ProbeEstimate>> {
    if !spec.kind.is_linear() {
        return Err(LabError::NotApplicable("Feynman-Kac representation needs a linear kind".into()));
    }
    if n_paths < 2 {
        return Err(LabError::Config("at least two paths are needed for a standard error".into()));
    }
    let dt_spec = spec.dt();
    probes
        .iter()
        .map(|&(t, x)| {
            if !(0.0..=spec.horizon).contains(&t) {
                return Err(LabError::Extrapolation(format!("probe time {t} outside [0, {}]", spec.horizon)));
            }
            let steps = ((spec.horizon - t) / dt_spec).round() as usize;
            let dt = if steps == 0 { 0.0 } else { (spec.horizon - t) / steps as f64 };
            let sqrt_dt = dt.sqrt();
            let n_chunks = n_paths.div_ceil(REDUCE_CHUNK);
            let partial: Vec<(f64, f64)> = (0..n_chunks)
                .into_par_iter()
                .map(|c| {
                    let (mut sum, mut sum_sq) = (0.0, 0.0);
                    for p in c * REDUCE_CHUNK..((c + 1) * REDUCE_CHUNK).min(n_paths) {
                        let mut rng = path_stream(seed, p);
                        let (mut state, mut log_disc, mut running) = (x, 0.0f64, 0.0f64);
                        for j in 0..steps {
                            let u = t + j as f64 * dt;
                            let c = (spec.local)(u, state);
                            running += log_disc.exp() * c.source * dt;
                            log_disc += c.potential * dt;
                            let z: f64 = rng.sample(StandardNormal);
                            state += c.drift * dt + c.diffusion.max(0.0).sqrt() * sqrt_dt * z;
                        }
                        let y = log_disc.exp() * (spec.terminal)(state) + running;
                        sum += y;
                        sum_sq += y * y;
                    }
                    (sum, sum_sq)
                })
                .collect();
            let (sum, sum_sq) = partial.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
            let n = n_paths as f64;
            let mean = sum / n;
            let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
            if !mean.is_finite() {
                return Err(LabError::NonFinite { path: 0, step: steps });
            }
            Ok(ProbeEstimate {
                t,
                x,
                mean,
                stderr: (var / n).sqrt(),
            })
        })
        .collect()
}
