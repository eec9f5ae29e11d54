//! Raw and censoring-corrected switching rates of a two-state sequence.
//!
//! Dwells shorter than τ_min are invisible to the segmentation, so a Poisson
//! process with true rate ν is observed at ν̃ = ν·e^{−τ_min ν}. The inverse on
//! the branch ν·τ_min < 1 is ν = −W₀(−τ_min ν̃)/τ_min.

use std::f64::consts::E;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::{stats, Error, Result};

/// Observed rate of a process with true rate `nu` when dwells shorter than
/// `tau_min` go unseen.
pub fn censor_rate(nu: f64, tau_min: f64) -> f64 {
    nu * (-tau_min * nu).exp()
}

/// Principal branch of the Lambert W function on `[−1/e, ∞)`.
pub fn lambert_w0(x: f64) -> Option<f64> {
    let branch = -1.0 / E;
    if !(x >= branch) || !x.is_finite() {
        return None;
    }
    if x == 0.0 {
        return Some(0.0);
    }
    let mut w = if x < -0.3 {
        // Series around the branch point.
        let p = (2.0 * (E * x + 1.0)).max(0.0).sqrt();
        -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p * p * p
    } else if x < 3.0 {
        x / (1.0 + x).max(0.5)
    } else {
        let l = x.ln();
        l - l.ln()
    };
    for _ in 0..64 {
        let ew = w.exp();
        let f = w * ew - x;
        let wp1 = w + 1.0;
        if wp1.abs() < 1e-300 {
            break;
        }
        // Halley step.
        let dw = f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1));
        w -= dw;
        if dw.abs() <= 1e-15 * (1.0 + w.abs()) {
            break;
        }
    }
    Some(w)
}

/// True rate behind an observed rate, or `None` when `ν̃·τ_min·e > 1`.
pub fn correct_rate(raw: f64, tau_min: f64) -> Option<f64> {
    if tau_min <= 0.0 || raw <= 0.0 {
        return Some(raw);
    }
    let x = -tau_min * raw;
    if x < -1.0 / E {
        return None;
    }
    lambert_w0(x).map(|w| -w / tau_min)
}

/// Two-sided Garwood interval for a Poisson rate from `count` events over
/// `exposure`.
pub fn poisson_interval(count: u64, exposure: f64, level: f64) -> [f64; 2] {
    if !(exposure > 0.0) {
        return [0.0, f64::INFINITY];
    }
    let a = 1.0 - level;
    let lower = if count == 0 {
        0.0
    } else {
        ChiSquared::new(2.0 * count as f64).expect("positive dof").inverse_cdf(a / 2.0) / 2.0
    };
    let upper = ChiSquared::new(2.0 * count as f64 + 2.0).expect("positive dof").inverse_cdf(1.0 - a / 2.0) / 2.0;
    [lower / exposure, upper / exposure]
}

/// One direction of switching.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub transitions: u64,
    /// Total time spent in the source state, s.
    pub dwell: f64,
    #[serde(with = "crate::io::nonfinite")]
    pub raw: f64,
    #[serde(with = "crate::io::nonfinite::pair")]
    pub raw_ci: [f64; 2],
    /// Censoring-corrected rate; equals `raw` when uncorrectable.
    #[serde(with = "crate::io::nonfinite")]
    pub corrected: f64,
    #[serde(with = "crate::io::nonfinite::pair")]
    pub corrected_ci: [f64; 2],
    pub uncorrectable: bool,
}

impl RateEstimate {
    fn new(transitions: u64, dwell: f64, tau_min: f64, level: f64) -> Self {
        let raw = if dwell > 0.0 { transitions as f64 / dwell } else { f64::NAN };
        let raw_ci = poisson_interval(transitions, dwell, level);
        let (corrected, uncorrectable) = match correct_rate(raw, tau_min) {
            Some(v) => (v, false),
            None => (raw, true),
        };
        let corrected_ci = [
            correct_rate(raw_ci[0], tau_min).unwrap_or(f64::INFINITY),
            correct_rate(raw_ci[1], tau_min).unwrap_or(f64::INFINITY),
        ];
        Self {
            transitions,
            dwell,
            raw,
            raw_ci,
            corrected,
            corrected_ci,
            uncorrectable,
        }
    }
}

/// Rates over a sliding window centred on every timestamp. NaN where the
/// window holds no dwell time or the correction has no solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningRates {
    pub window: f64,
    pub nu_01_raw: Vec<f64>,
    pub nu_10_raw: Vec<f64>,
    pub nu_01: Vec<f64>,
    pub nu_10: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchingRates {
    pub tau_min: f64,
    /// Leaving the lower state (−1).
    pub nu_01: RateEstimate,
    /// Leaving the upper state (+1).
    pub nu_10: RateEstimate,
    pub running: Option<RunningRates>,
}

impl SwitchingRates {
    pub fn transitions(&self) -> u64 {
        self.nu_01.transitions + self.nu_10.transitions
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateOptions {
    /// Steps longer than this multiple of the median step are gaps.
    pub gap_factor: f64,
    pub confidence: f64,
}

impl Default for RateOptions {
    fn default() -> Self {
        Self {
            gap_factor: 100.0,
            confidence: 0.95,
        }
    }
}

/// Raw and corrected rates of a `±1` state sequence. `masked[k]` removes
/// step `k` from the running averages only.
pub fn switching_rates(
    states: &[i8],
    times: &[f64],
    tau_min: f64,
    masked: Option<&[bool]>,
    window: Option<f64>,
    opts: &RateOptions,
) -> Result<SwitchingRates> {
    let n = states.len();
    if times.len() != n {
        return Err(Error::data(format!("{n} states but {} timestamps", times.len())));
    }
    if n < 2 {
        return Err(Error::data("switching rates need at least two steps"));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::data("timestamps must be strictly increasing"));
    }
    if let Some(m) = masked {
        if m.len() != n {
            return Err(Error::data("mask length differs from the state sequence"));
        }
    }
    if !(tau_min >= 0.0) {
        return Err(Error::config("tau_min must be non-negative"));
    }
    let steps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    let gap = opts.gap_factor * stats::median(&steps);

    // Per-step contributions: dwell in each state and transitions out of it.
    let mut dwell = [vec![0.0; n - 1], vec![0.0; n - 1]];
    let mut jumps = [vec![0u32; n - 1], vec![0u32; n - 1]];
    let mut total_dwell = [0.0; 2];
    let mut total_jumps = [0u64; 2];
    for k in 0..n - 1 {
        if steps[k] > gap {
            continue;
        }
        let i = usize::from(states[k] > 0);
        dwell[i][k] = steps[k];
        total_dwell[i] += steps[k];
        if states[k + 1] != states[k] {
            jumps[i][k] = 1;
            total_jumps[i] += 1;
        }
    }

    let running = window.map(|w| {
        let keep = |k: usize| masked.map_or(true, |m| !m[k] && !m[k + 1]);
        let mut pre_d = [vec![0.0; n], vec![0.0; n]];
        let mut pre_j = [vec![0u64; n], vec![0u64; n]];
        for k in 0..n - 1 {
            for i in 0..2 {
                let ok = keep(k);
                pre_d[i][k + 1] = pre_d[i][k] + if ok { dwell[i][k] } else { 0.0 };
                pre_j[i][k + 1] = pre_j[i][k] + if ok { u64::from(jumps[i][k]) } else { 0 };
            }
        }
        let mut out = RunningRates {
            window: w,
            nu_01_raw: vec![f64::NAN; n],
            nu_10_raw: vec![f64::NAN; n],
            nu_01: vec![f64::NAN; n],
            nu_10: vec![f64::NAN; n],
        };
        // Steps k with t_k in [t_j − w/2, t_j + w/2).
        let (mut lo, mut hi) = (0usize, 0usize);
        for j in 0..n {
            while lo < n - 1 && times[lo] < times[j] - w / 2.0 {
                lo += 1;
            }
            while hi < n - 1 && times[hi] < times[j] + w / 2.0 {
                hi += 1;
            }
            let hi = hi.max(lo);
            for i in 0..2 {
                let d = pre_d[i][hi] - pre_d[i][lo];
                if d > 0.0 {
                    let raw = (pre_j[i][hi] - pre_j[i][lo]) as f64 / d;
                    let corr = correct_rate(raw, tau_min).unwrap_or(f64::NAN);
                    if i == 0 {
                        out.nu_01_raw[j] = raw;
                        out.nu_01[j] = corr;
                    } else {
                        out.nu_10_raw[j] = raw;
                        out.nu_10[j] = corr;
                    }
                }
            }
        }
        out
    });

    Ok(SwitchingRates {
        tau_min,
        nu_01: RateEstimate::new(total_jumps[0], total_dwell[0], tau_min, opts.confidence),
        nu_10: RateEstimate::new(total_jumps[1], total_dwell[1], tau_min, opts.confidence),
        running,
    })
}
