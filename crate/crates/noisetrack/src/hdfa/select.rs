//! Automatic choice of the likelihood threshold λ_ll and the minimum segment
//! length, plus the hyperparameter-spread uncertainty σ⁽²⁾.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::hmm::{fit_hmm2_with, GaussianHmm2, HmmScratch};
use super::segment::{scan, segment_series, sigma_floor};
use super::HdfaOptions;
use crate::{stats, Error, Result};

/// Range of per-block mean log₁₀-likelihoods from a pilot pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pilot {
    /// Best block likelihood; thresholds are expressed as depths below it.
    pub ceiling: f64,
    pub depth: f64,
}

/// Fit every `block`-long chunk separately and record the likelihood range.
pub fn pilot(values: &[f64], sigmas: &[f64], opts: &HdfaOptions) -> Pilot {
    let floor = sigma_floor(sigmas, opts);
    let centre = stats::median(values);
    let x: Vec<f64> = values.iter().map(|v| v - centre).collect();
    let size = opts.pilot_block.max(2);
    let mut scratch = HmmScratch::default();
    let mut lls = Vec::new();
    for chunk in x.chunks(size) {
        if chunk.len() >= 2 {
            let fit = fit_hmm2_with(chunk, GaussianHmm2::initial_guess(chunk, floor), floor, &opts.baum_welch, &mut scratch);
            lls.push(fit.mean_log10_likelihood);
        }
    }
    let hi = lls.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = lls.iter().copied().fold(f64::INFINITY, f64::min);
    let (ceiling, depth) = if hi.is_finite() && hi > lo {
        (hi, hi - lo)
    } else if hi.is_finite() {
        (hi, 1.0)
    } else {
        (0.0, 1.0)
    };
    Pilot { ceiling, depth }
}

impl Pilot {
    /// Thresholds sorted from most permissive to strictest, log-spaced in
    /// depth below the ceiling over `decades` decades.
    pub fn grid(&self, n: usize, decades: f64) -> Vec<f64> {
        let n = n.max(2);
        (0..n)
            .rev()
            .map(|k| self.ceiling - self.depth * 10f64.powf(-decades + decades * k as f64 / (n - 1) as f64))
            .collect()
    }

    /// Threshold whose depth is `m` times that of `lambda`.
    pub fn scale_depth(&self, lambda: f64, m: f64) -> f64 {
        self.ceiling - m * (self.ceiling - lambda)
    }
}

/// How the elbow of the `N_CP(λ)` curve is located.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElbowRule {
    /// Strict end of the plateau that precedes the steepest climb: the point
    /// where the count is most stable just before it starts rising fast.
    Plateau,
    /// Largest gap between the normalized curve and its chord.
    Kneedle,
    /// Largest discrete second difference.
    SecondDifference,
}

/// Smallest change in the log-count slope treated as real.
const PLATEAU_WIGGLE: f64 = 0.5;

/// Index of the elbow of a change-point curve sampled at equal steps from
/// permissive to strict, or `None` when the curve is flat. Counts are compared
/// on a `ln(1 + N)` scale because they span several decades between the
/// plateau and the strict end.
pub fn elbow(counts: &[f64], rule: ElbowRule) -> Option<usize> {
    let n = counts.len();
    let y: Vec<f64> = counts.iter().map(|c| c.ln_1p()).collect();
    let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if n < 3 || !(hi > lo) {
        return None;
    }
    let score = |k: usize| match rule {
        ElbowRule::Plateau => -(y[k + 1] - y[k - 1]).abs(),
        ElbowRule::Kneedle => k as f64 / (n - 1) as f64 - (y[k] - lo) / (hi - lo),
        ElbowRule::SecondDifference => y[k + 1] - 2.0 * y[k] + y[k - 1],
    };
    if rule == ElbowRule::Plateau {
        // Walk back from the steepest linear climb: first up to the steepest
        // point on the log scale, then down to the flattest point before the
        // slope rises again. Both legs ignore moves smaller than `wiggle(k)`,
        // which widens at small counts where ln(1 + N) is coarse. Ties keep
        // the strict side.
        let slope = |k: usize| -score(k);
        let wiggle = |k: usize| PLATEAU_WIGGLE.max(2.0 * (1.0 / (1.0 + counts[k + 1]) + 1.0 / (1.0 + counts[k - 1])).sqrt());
        let steepest = (0..n - 1).fold(0, |b, k| if counts[k + 1] - counts[k] > counts[b + 1] - counts[b] { k } else { b });
        let mut k = steepest.clamp(1, n - 2);
        let mut peak = k;
        while k > 1 && slope(k - 1) > slope(peak) - wiggle(k - 1) {
            k -= 1;
            if slope(k) > slope(peak) {
                peak = k;
            }
        }
        let (mut k, mut best) = (peak, peak);
        while k > 1 && slope(k - 1) < slope(best) + wiggle(k - 1) {
            k -= 1;
            if slope(k) < slope(best) {
                best = k;
            }
        }
        return Some(best);
    }
    let best = (1..n - 1).fold((0, f64::NEG_INFINITY), |(bi, bv), k| {
        let s = score(k);
        if s > bv {
            (k, s)
        } else {
            (bi, bv)
        }
    });
    (best.1 > 0.0).then_some(best.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub pilot: Pilot,
    /// Candidates from most permissive to strictest.
    pub grid: Vec<f64>,
    pub n_change_points: Vec<usize>,
    pub chosen: f64,
    pub index: usize,
    /// Set when the curve had no elbow.
    pub warning: Option<String>,
}

/// Count change points at `L_min = 2` across the threshold grid and pick the
/// elbow.
pub fn select_lambda(values: &[f64], sigmas: &[f64], opts: &HdfaOptions) -> Result<LambdaSelection> {
    if values.len() != sigmas.len() || values.is_empty() {
        return Err(Error::data("values and uncertainties must be non-empty and equal in length"));
    }
    let pilot = pilot(values, sigmas, opts);
    let grid = pilot.grid(opts.lambda_candidates, opts.lambda_decades);
    if opts.lambda_decades < 2.0 {
        warn!("threshold grid spans only {} decades", opts.lambda_decades);
    }
    let floor = sigma_floor(sigmas, opts);
    let centre = stats::median(values);
    let x: Vec<f64> = values.iter().map(|v| v - centre).collect();
    let n_cp: Vec<usize> = grid
        .par_iter()
        .map(|&lam| scan(&x, lam, 2, floor, opts).len() - 1)
        .collect();
    let y: Vec<f64> = n_cp.iter().map(|&c| c as f64).collect();
    let (index, warning) = match elbow(&y, opts.elbow) {
        Some(k) => (k, None),
        None => {
            let msg = "change-point curve has no elbow; using the most permissive threshold".to_string();
            warn!("{msg}");
            (0, Some(msg))
        }
    };
    Ok(LambdaSelection {
        pilot,
        chosen: grid[index],
        grid,
        n_change_points: n_cp,
        index,
        warning,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LminSelection {
    pub candidates: Vec<usize>,
    pub rmse: Vec<f64>,
    pub chosen: usize,
}

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

/// Smallest candidate whose reconstruction RMSE is within the tolerance of
/// the best one.
pub fn select_l_min(values: &[f64], sigmas: &[f64], lambda: f64, opts: &HdfaOptions) -> Result<LminSelection> {
    let limit = (values.len() / 2).max(2);
    let mut candidates: Vec<usize> = opts.l_min_candidates.iter().copied().filter(|&l| l >= 2 && l <= limit).collect();
    candidates.sort_unstable();
    candidates.dedup();
    if candidates.is_empty() {
        candidates.push(2);
    }
    let rmse: Vec<f64> = candidates
        .par_iter()
        .map(|&l| segment_series(values, sigmas, lambda, l, opts).map(|s| rmse(values, &s.reconstruction())))
        .collect::<Result<_>>()?;
    let best = rmse.iter().copied().fold(f64::INFINITY, f64::min);
    let k = rmse.iter().position(|&r| r <= best * (1.0 + opts.rmse_tolerance) + 1e-300).unwrap_or(0);
    Ok(LminSelection {
        chosen: candidates[k],
        candidates,
        rmse,
    })
}

/// Per-step standard deviations of `f_c` and `f_Δ` across the
/// hyperparameter grid. Threshold multipliers scale the depth below the pilot
/// ceiling; length multipliers are rounded and kept at least 2.
pub fn hyperparameter_spread(
    values: &[f64],
    sigmas: &[f64],
    lambda: f64,
    l_min: usize,
    pilot: &Pilot,
    opts: &HdfaOptions,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut combos: Vec<((u64, usize), usize)> = Vec::new();
    for &ml in &opts.spread_multipliers {
        for &mm in &opts.spread_multipliers {
            let lam = pilot.scale_depth(lambda, ml);
            let len = ((mm * l_min as f64).round() as usize).max(2);
            let key = (lam.to_bits(), len);
            match combos.iter_mut().find(|(k, _)| *k == key) {
                Some((_, count)) => *count += 1,
                None => combos.push((key, 1)),
            }
        }
    }
    let runs: Vec<(Vec<f64>, Vec<f64>)> = combos
        .par_iter()
        .map(|((lam, len), _)| {
            let p = segment_series(values, sigmas, f64::from_bits(*lam), *len, opts)?.per_step();
            Ok((p.f_c, p.f_delta))
        })
        .collect::<Result<_>>()?;
    let n = values.len();
    let mut sd_c = vec![0.0; n];
    let mut sd_d = vec![0.0; n];
    for k in 0..n {
        sd_c[k] = weighted_population_sd(runs.iter().zip(&combos).map(|((c, _), (_, m))| (c[k], *m)));
        sd_d[k] = weighted_population_sd(runs.iter().zip(&combos).map(|((_, d), (_, m))| (d[k], *m)));
    }
    Ok((sd_c, sd_d))
}

/// Population standard deviation with integer multiplicities (Welford).
fn weighted_population_sd(items: impl Iterator<Item = (f64, usize)>) -> f64 {
    let (mut count, mut mean, mut m2) = (0.0, 0.0, 0.0);
    for (x, m) in items {
        for _ in 0..m {
            count += 1.0;
            let d = x - mean;
            mean += d / count;
            m2 += d * (x - mean);
        }
    }
    if count > 0.0 {
        (m2 / count).sqrt()
    } else {
        0.0
    }
}
