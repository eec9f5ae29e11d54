//! Recursive extraction of nested telegraph levels.

use log::info;
use serde::{Deserialize, Serialize};

use super::rates::{switching_rates, RateEstimate, SwitchingRates};
use super::segment::{segment_series, Segmentation};
use super::select::{hyperparameter_spread, pilot, select_l_min, select_lambda, LambdaSelection, LminSelection};
use super::HdfaOptions;
use crate::{stats, Error, Result};

/// One level of the hierarchy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtnLevel {
    /// 1-based level index.
    pub level: usize,
    pub input: Vec<f64>,
    pub input_sigma: Vec<f64>,
    pub lambda_selection: Option<LambdaSelection>,
    pub l_min_selection: Option<LminSelection>,
    pub segmentation: Segmentation,
    pub f_c: Vec<f64>,
    pub f_delta: Vec<f64>,
    /// Total uncertainties, σ⁽¹⁾ and σ⁽²⁾ in quadrature.
    pub sigma_f_c: Vec<f64>,
    pub sigma_f_delta: Vec<f64>,
    pub sigma2_f_c: Vec<f64>,
    pub sigma2_f_delta: Vec<f64>,
    pub states: Vec<i8>,
    pub rates: SwitchingRates,
    /// Fraction of steps where `f_Δ < 2σ_{f_Δ}`.
    pub null_fraction: f64,
    /// False for the terminal level, which carries no resolved switching.
    pub active: bool,
    pub note: Option<String>,
}

impl RtnLevel {
    pub fn lambda_ll(&self) -> f64 {
        self.segmentation.lambda_ll
    }

    pub fn l_min(&self) -> usize {
        self.segmentation.l_min
    }

    /// `f_c + s·f_Δ/2` at every step.
    pub fn reconstruction(&self) -> Vec<f64> {
        (0..self.f_c.len())
            .map(|k| self.f_c[k] + f64::from(self.states[k]) * self.f_delta[k] / 2.0)
            .collect()
    }

    /// Time-weighted mean of `f_Δ` over steps that are not statistically null.
    pub fn mean_f_delta(&self) -> f64 {
        let kept: Vec<f64> = (0..self.f_delta.len())
            .filter(|&k| self.f_delta[k] >= 2.0 * self.sigma_f_delta[k])
            .map(|k| self.f_delta[k])
            .collect();
        stats::mean(&kept)
    }
}

/// Switching rates of one level's state sequence, with steps whose `f_Δ` is
/// below twice its uncertainty masked out of the running averages, and the
/// fraction of such steps. Dwells shorter than `L_min` steps are censored.
pub fn level_rates(
    level: usize,
    states: &[i8],
    f_delta: &[f64],
    sigma_f_delta: &[f64],
    times: &[f64],
    l_min: usize,
    opts: &HdfaOptions,
) -> Result<(SwitchingRates, f64)> {
    let n = states.len();
    let null: Vec<bool> = (0..n).map(|k| f_delta[k] < 2.0 * sigma_f_delta[k]).collect();
    let null_fraction = null.iter().filter(|b| **b).count() as f64 / n.max(1) as f64;
    let steps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    let tau_min = stats::median(&steps) * l_min as f64;
    let window = opts.rate_windows.get(level.saturating_sub(1)).or(opts.rate_windows.last()).copied();
    let rates = switching_rates(states, times, tau_min, Some(&null), window, &opts.rates)?;
    Ok((rates, null_fraction))
}

/// Segment, summarize and rate one series.
pub fn run_level(level: usize, values: &[f64], sigmas: &[f64], times: &[f64], opts: &HdfaOptions) -> Result<RtnLevel> {
    let n = values.len();
    if sigmas.len() != n || times.len() != n {
        return Err(Error::data("values, uncertainties and timestamps differ in length"));
    }
    let (lambda_selection, lambda) = match opts.lambda_ll {
        Some(l) => (None, l),
        None => {
            let s = select_lambda(values, sigmas, opts)?;
            let l = s.chosen;
            (Some(s), l)
        }
    };
    let (l_min_selection, l_min) = match opts.l_min {
        Some(l) => (None, l),
        None => {
            let s = select_l_min(values, sigmas, lambda, opts)?;
            let l = s.chosen;
            (Some(s), l)
        }
    };
    let segmentation = segment_series(values, sigmas, lambda, l_min, opts)?;
    let per = segmentation.per_step();
    let (sigma2_f_c, sigma2_f_delta) = if opts.spread {
        let p = lambda_selection.as_ref().map_or_else(|| pilot(values, sigmas, opts), |s| s.pilot);
        hyperparameter_spread(values, sigmas, lambda, l_min, &p, opts)?
    } else {
        (vec![0.0; n], vec![0.0; n])
    };
    let sigma_f_c: Vec<f64> = (0..n).map(|k| per.sigma_f_c[k].hypot(sigma2_f_c[k])).collect();
    let sigma_f_delta: Vec<f64> = (0..n).map(|k| per.sigma_f_delta[k].hypot(sigma2_f_delta[k])).collect();
    let (rates, null_fraction) = level_rates(level, &per.states, &per.f_delta, &sigma_f_delta, times, l_min, opts)?;

    let mut note = None;
    let transitions = rates.transitions();
    let active = if (transitions as usize) < opts.min_transitions {
        note = Some(format!("only {transitions} transitions detected"));
        false
    } else if null_fraction > opts.null_fraction_limit {
        note = Some(format!("f_delta indistinguishable from zero on {:.0}% of steps", 100.0 * null_fraction));
        false
    } else {
        true
    };
    Ok(RtnLevel {
        level,
        input: values.to_vec(),
        input_sigma: sigmas.to_vec(),
        lambda_selection,
        l_min_selection,
        segmentation,
        f_c: per.f_c,
        f_delta: per.f_delta,
        sigma_f_c,
        sigma_f_delta,
        sigma2_f_c,
        sigma2_f_delta,
        states: per.states,
        rates,
        null_fraction,
        active,
        note,
    })
}

/// Peel telegraph levels off `values` until one shows no resolvable
/// switching. The terminal level is included; the result is never empty.
pub fn run_hierarchy(values: &[f64], sigmas: &[f64], times: &[f64], opts: &HdfaOptions) -> Result<Vec<RtnLevel>> {
    if values.len() < 4 {
        return Err(Error::data(format!("a hierarchy needs at least 4 points, got {}", values.len())));
    }
    let mut levels: Vec<RtnLevel> = Vec::new();
    let (mut x, mut s) = (values.to_vec(), sigmas.to_vec());
    for level in 1..=opts.max_levels.max(1) {
        let l = run_level(level, &x, &s, times, opts)?;
        info!(
            "level {level}: {} segments, {} transitions, lambda {:.3}, L_min {}{}",
            l.segmentation.segments.len(),
            l.rates.transitions(),
            l.lambda_ll(),
            l.l_min(),
            if l.active { "" } else { " (terminal)" }
        );
        let active = l.active;
        x.clone_from(&l.f_c);
        s.clone_from(&l.sigma_f_c);
        levels.push(l);
        if !active {
            break;
        }
    }
    Ok(levels)
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Compact per-level record for reports; per-step arrays are left out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub level: usize,
    pub active: bool,
    pub note: Option<String>,
    #[serde(with = "crate::io::nonfinite")]
    pub lambda_ll: f64,
    pub l_min: usize,
    pub n_segments: usize,
    pub mean_f_delta: Option<f64>,
    /// Largest resolved segment amplitude and its uncertainty.
    pub max_f_delta: Option<(f64, f64)>,
    #[serde(with = "crate::io::nonfinite")]
    pub null_fraction: f64,
    pub tau_min: f64,
    pub nu_01: RateEstimate,
    pub nu_10: RateEstimate,
    pub lambda_grid: Vec<f64>,
    pub n_change_points: Vec<usize>,
    pub l_min_candidates: Vec<usize>,
    pub l_min_rmse: Vec<f64>,
}

impl From<&RtnLevel> for LevelSummary {
    fn from(l: &RtnLevel) -> Self {
        let max_f_delta = l
            .segmentation
            .segments
            .iter()
            .filter(|s| !s.summary.single_state && s.summary.f_delta >= 2.0 * s.summary.sigma_f_delta)
            .map(|s| (s.summary.f_delta, l.sigma_f_delta[s.start]))
            .max_by(|a, b| a.0.total_cmp(&b.0));
        Self {
            level: l.level,
            active: l.active,
            note: l.note.clone(),
            lambda_ll: l.lambda_ll(),
            l_min: l.l_min(),
            n_segments: l.segmentation.segments.len(),
            mean_f_delta: finite(l.mean_f_delta()),
            max_f_delta,
            null_fraction: l.null_fraction,
            tau_min: l.rates.tau_min,
            nu_01: l.rates.nu_01,
            nu_10: l.rates.nu_10,
            lambda_grid: l.lambda_selection.as_ref().map(|s| s.grid.clone()).unwrap_or_default(),
            n_change_points: l.lambda_selection.as_ref().map(|s| s.n_change_points.clone()).unwrap_or_default(),
            l_min_candidates: l.l_min_selection.as_ref().map(|s| s.candidates.clone()).unwrap_or_default(),
            l_min_rmse: l.l_min_selection.as_ref().map(|s| s.rmse.clone()).unwrap_or_default(),
        }
    }
}
