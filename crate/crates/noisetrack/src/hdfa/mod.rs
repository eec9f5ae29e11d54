//! Hierarchical discrete fluctuation auto-segmentation.
//!
//! A trace `f⁽¹⁾` is cut into segments, each well described by a two-state
//! Gaussian HMM. Every segment yields a centre `f_c` and a switching
//! amplitude `f_Δ`, so `f⁽ⁿ⁾ ≈ f_c⁽ⁿ⁾ + s⁽ⁿ⁾·f_Δ⁽ⁿ⁾/2`. The piecewise-constant
//! centre series becomes the next level's input, `f⁽ⁿ⁺¹⁾ = f_c⁽ⁿ⁾`, which peels
//! nested telegraph processes off one timescale at a time.
//!
//! Segmentation scans forward, appending one point at a time and refitting
//! the HMM; a segment closes when its mean log₁₀-likelihood per point drops
//! below λ_ll and it already holds at least `L_min` points. Refits are
//! warm-started, run at every point for short segments and then whenever the
//! segment has grown by `refit_growth`; in between the likelihood is extended
//! by the forward recursion under the last fitted model. Once the scan is
//! done, neighbours that fit one model are rejoined and every remaining
//! boundary is moved to the best split between its two sides.

pub mod hierarchy;
pub mod hmm;
pub mod rates;
pub mod segment;
pub mod select;

use serde::{Deserialize, Serialize};

pub use hierarchy::{level_rates, run_hierarchy, run_level, LevelSummary, RtnLevel};
pub use hmm::{fit_hmm2, viterbi, BaumWelchOptions, GaussianHmm2, HmmFit};
pub use rates::{correct_rate, switching_rates, RateEstimate, RateOptions, SwitchingRates};
pub use segment::{segment_series, summarize_segment, Segment, SegmentSummary, Segmentation};
pub use select::{elbow, hyperparameter_spread, select_l_min, select_lambda, ElbowRule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HdfaOptions {
    /// Fixed threshold; selected automatically when absent.
    pub lambda_ll: Option<f64>,
    /// Fixed minimum segment length; selected automatically when absent.
    pub l_min: Option<usize>,
    /// Lower bound of the HMM width floor, Hz. The floor is the larger of
    /// this and the median input uncertainty.
    pub min_sigma_floor: f64,
    pub baum_welch: BaumWelchOptions,
    /// Segments up to this length are refitted at every appended point.
    pub dense_refit_len: usize,
    /// Longer segments are refitted once they grow by this fraction.
    pub refit_growth: f64,
    /// When a refit fails the threshold and the newest point lies farther
    /// than this many widths from both states, a second start with one state
    /// on that point is tried.
    pub outlier_z: f64,
    /// Rejoin neighbouring segments whose union passes the threshold.
    pub merge_pass: bool,
    /// Re-place each boundary at the best split between its neighbours.
    pub refine_boundaries: bool,
    pub pilot_block: usize,
    pub lambda_candidates: usize,
    pub lambda_decades: f64,
    pub elbow: ElbowRule,
    pub l_min_candidates: Vec<usize>,
    pub rmse_tolerance: f64,
    /// Compute the hyperparameter-spread uncertainty.
    pub spread: bool,
    pub spread_multipliers: Vec<f64>,
    pub min_transitions: usize,
    pub null_fraction_limit: f64,
    pub max_levels: usize,
    /// Running-average window per level, s; the last entry repeats.
    pub rate_windows: Vec<f64>,
    pub rates: RateOptions,
}

impl Default for HdfaOptions {
    fn default() -> Self {
        Self {
            lambda_ll: None,
            l_min: None,
            min_sigma_floor: 10.0,
            baum_welch: BaumWelchOptions::default(),
            dense_refit_len: 8,
            refit_growth: 0.25,
            outlier_z: 3.0,
            merge_pass: true,
            refine_boundaries: true,
            pilot_block: 32,
            lambda_candidates: 40,
            lambda_decades: 2.0,
            elbow: ElbowRule::Plateau,
            l_min_candidates: vec![2, 3, 5, 8, 13, 21, 34],
            rmse_tolerance: 0.02,
            spread: true,
            spread_multipliers: (0..=10).map(|k| 0.9 + 0.02 * k as f64).collect(),
            min_transitions: 10,
            null_fraction_limit: 0.9,
            max_levels: 6,
            rate_windows: vec![200.0, 2000.0],
            rates: RateOptions::default(),
        }
    }
}
