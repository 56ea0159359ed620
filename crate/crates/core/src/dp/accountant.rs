//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism over
//! integer orders.

use serde::{Deserialize, Serialize};

use super::DpSpec;
use crate::error::{Error, Result};
use crate::stats::special::{ln_choose, log_sum_exp};

pub const MIN_ORDER: u32 = 2;
pub const MAX_ORDER: u32 = 64;
/// Search interval for [`calibrate_sigma`].
pub const SIGMA_RANGE: (f64, f64) = (0.3, 100.0);
pub const SIGMA_TOL: f64 = 1e-3;

/// RDP of one step at integer order `alpha`.
///
/// For `q = 1` this is `α / (2σ²)`. Otherwise it is `ln A_α / (α − 1)` with
/// `A_α = Σ_k C(α,k) q^k (1−q)^(α−k) exp((k² − k) / (2σ²))`.
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, alpha: u32) -> f64 {
    let a = alpha as f64;
    if q >= 1.0 {
        return a / (2.0 * sigma * sigma);
    }
    if q <= 0.0 {
        return 0.0;
    }
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let terms: Vec<f64> = (0..=alpha)
        .map(|k| {
            let k_f = k as f64;
            ln_choose(alpha as u64, k as u64) + k_f * lq + (a - k_f) * l1q + (k_f * k_f - k_f) / (2.0 * sigma * sigma)
        })
        .collect();
    (log_sum_exp(&terms) / (a - 1.0)).max(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdpEntry {
    pub order: u32,
    /// Composed RDP over all steps.
    pub rdp: f64,
    /// ε obtained from this order.
    pub epsilon: f64,
}

/// Spent budget of a DPSGD run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
    pub steps: u64,
    pub best_order: Option<u32>,
    pub accountant_trace: Vec<RdpEntry>,
}

impl PrivacyBudget {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// ε after `steps` compositions: `min_α (T·ρ(α) + ln(1/δ)/(α−1))`.
pub fn account_privacy(spec: &DpSpec, steps: u64) -> PrivacyBudget {
    if steps == 0 {
        return PrivacyBudget {
            epsilon: 0.0,
            delta: spec.delta,
            steps,
            best_order: None,
            accountant_trace: Vec::new(),
        };
    }
    let log_inv_delta = -spec.delta.ln();
    let trace: Vec<RdpEntry> = (MIN_ORDER..=MAX_ORDER)
        .map(|order| {
            let rdp = steps as f64 * rdp_subsampled_gaussian(spec.sample_rate_q, spec.noise_sigma, order);
            RdpEntry {
                order,
                rdp,
                epsilon: rdp + log_inv_delta / (order as f64 - 1.0),
            }
        })
        .collect();
    let best = trace
        .iter()
        .min_by(|a, b| a.epsilon.total_cmp(&b.epsilon))
        .expect("non-empty order range");
    PrivacyBudget {
        epsilon: best.epsilon.max(0.0),
        delta: spec.delta,
        steps,
        best_order: Some(best.order),
        accountant_trace: trace,
    }
}

/// Smallest σ (to within [`SIGMA_TOL`]) in [`SIGMA_RANGE`] whose ε over
/// `steps` stays at or below `spec.target_epsilon`.
pub fn calibrate_sigma(spec: &DpSpec, steps: u64) -> Result<f64> {
    if !(spec.target_epsilon > 0.0) {
        return Err(Error::Calibration("target epsilon must be positive".into()));
    }
    let (lo, hi) = SIGMA_RANGE;
    if steps == 0 {
        return Ok(lo);
    }
    let eps = |sigma: f64| {
        account_privacy(
            &DpSpec {
                noise_sigma: sigma,
                ..spec.clone()
            },
            steps,
        )
        .epsilon
    };
    if eps(hi) > spec.target_epsilon {
        return Err(Error::Calibration(format!(
            "epsilon {} unreachable within sigma <= {hi} over {steps} steps",
            spec.target_epsilon
        )));
    }
    if eps(lo) <= spec.target_epsilon {
        return Ok(lo);
    }
    let (mut lo, mut hi) = (lo, hi);
    while hi - lo > SIGMA_TOL {
        let mid = 0.5 * (lo + hi);
        if eps(mid) <= spec.target_epsilon {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}
