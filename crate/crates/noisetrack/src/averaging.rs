//! Moving-window probability estimates from binary outcome streams.
//!
//! The Gaussian estimator weights repetition `i` around centre `r` by
//! `exp(−(i−r)²/2W_G²)`, truncated at `|i−r| ≤ ⌈4W_G⌉` and renormalized by the
//! realized weight sum, which also serves as the effective sample count.
//! Windows never cross a block boundary (e.g. a long pause between scripts).

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::emulator::{Outcomes, MISSING};
use crate::{stats, Error, Result};

/// Averaging window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Window {
    /// Gaussian kernel of standard deviation `width` repetitions.
    Gaussian { width: f64 },
    /// Uniform window over `[r − half_width, r + half_width]`.
    Fixed { half_width: usize },
}

impl Window {
    /// Truncation half-width in repetitions.
    pub fn reach(&self) -> usize {
        match *self {
            Window::Gaussian { width } => (4.0 * width).ceil() as usize,
            Window::Fixed { half_width } => half_width,
        }
    }

    /// Kernel weights for offsets `0..=reach`.
    pub fn weights(&self) -> Vec<f64> {
        match *self {
            Window::Gaussian { width } => (0..=self.reach())
                .map(|k| (-((k * k) as f64) / (2.0 * width * width)).exp())
                .collect(),
            Window::Fixed { half_width } => vec![1.0; half_width + 1],
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Window::Gaussian { width } if !(width > 0.0 && width.is_finite()) => {
                Err(Error::config(format!("Gaussian width must be positive, got {width}")))
            }
            _ => Ok(()),
        }
    }
}

/// Probability estimates for every repetition and circuit.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilitySeries {
    pub window: Window,
    n_circuits: usize,
    /// Row-major `[repetition][circuit]`.
    p: Vec<f64>,
    /// Realized weight sum, same layout as `p`.
    n_eff: Vec<f64>,
    /// True where the window was cut short by a block edge.
    pub edge: Vec<bool>,
}

impl ProbabilitySeries {
    pub fn from_parts(window: Window, n_circuits: usize, p: Vec<f64>, n_eff: Vec<f64>, edge: Vec<bool>) -> Result<Self> {
        let n = edge.len();
        if p.len() != n * n_circuits || n_eff.len() != n * n_circuits {
            return Err(Error::data("probability table dimensions are inconsistent"));
        }
        Ok(Self {
            window,
            n_circuits,
            p,
            n_eff,
            edge,
        })
    }

    pub fn len(&self) -> usize {
        self.edge.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edge.is_empty()
    }

    pub fn n_circuits(&self) -> usize {
        self.n_circuits
    }

    /// Probabilities of all circuits at repetition `r`.
    pub fn p(&self, r: usize) -> &[f64] {
        &self.p[r * self.n_circuits..(r + 1) * self.n_circuits]
    }

    pub fn n_eff(&self, r: usize) -> &[f64] {
        &self.n_eff[r * self.n_circuits..(r + 1) * self.n_circuits]
    }
}

fn check_blocks(n: usize, blocks: &[Range<usize>]) -> Result<()> {
    let mut next = 0;
    for b in blocks {
        if b.start != next || b.end <= b.start {
            return Err(Error::config("averaging blocks must tile the repetitions in order"));
        }
        next = b.end;
    }
    if next != n {
        return Err(Error::config("averaging blocks must cover every repetition"));
    }
    Ok(())
}

/// Split `0..n` wherever consecutive timestamps are more than `factor` times
/// the median step apart.
pub fn blocks_from_gaps(times: &[f64], factor: f64) -> Vec<Range<usize>> {
    let n = times.len();
    if n < 2 {
        return vec![0..n];
    }
    let steps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    let limit = factor * stats::median(&steps);
    let mut out = Vec::new();
    let mut start = 0;
    for (k, s) in steps.iter().enumerate() {
        if *s > limit {
            out.push(start..k + 1);
            start = k + 1;
        }
    }
    out.push(start..n);
    out
}

fn average(outcomes: &Outcomes, window: Window, blocks: &[Range<usize>]) -> Result<ProbabilitySeries> {
    window.validate()?;
    let n = outcomes.n_repetitions();
    let nc = outcomes.n_circuits();
    check_blocks(n, blocks)?;
    let reach = window.reach();
    let w = window.weights();
    let symmetric = matches!(window, Window::Fixed { .. });

    let mut p = vec![0.0; n * nc];
    let mut n_eff = vec![0.0; n * nc];
    let mut edge = vec![false; n];
    for block in blocks {
        for r in block.clone() {
            let (lo, hi) = if symmetric {
                let m = reach.min(r - block.start).min(block.end - 1 - r);
                (r - m, r + m)
            } else {
                (r.saturating_sub(reach).max(block.start), (r + reach).min(block.end - 1))
            };
            edge[r] = r - lo < reach || hi - r < reach;
            let acc_p = &mut p[r * nc..(r + 1) * nc];
            let acc_w = &mut n_eff[r * nc..(r + 1) * nc];
            for i in lo..=hi {
                let wi = w[i.abs_diff(r)];
                for (c, &b) in outcomes.row(i).iter().enumerate() {
                    if b != MISSING {
                        acc_p[c] += wi * f64::from(b);
                        acc_w[c] += wi;
                    }
                }
            }
            for c in 0..nc {
                if acc_w[c] <= 0.0 {
                    return Err(Error::data(format!(
                        "no outcomes for circuit {c} within the window around repetition {r}"
                    )));
                }
                acc_p[c] /= acc_w[c];
            }
        }
    }
    ProbabilitySeries::from_parts(window, nc, p, n_eff, edge)
}

/// Gaussian moving average of width `width` repetitions.
pub fn gaussian_average(outcomes: &Outcomes, width: f64, blocks: &[Range<usize>]) -> Result<ProbabilitySeries> {
    average(outcomes, Window::Gaussian { width }, blocks)
}

/// Uniform moving average over `2·half_width + 1` repetitions, shrinking
/// symmetrically at block edges.
pub fn fixed_window_average(outcomes: &Outcomes, half_width: usize, blocks: &[Range<usize>]) -> Result<ProbabilitySeries> {
    average(outcomes, Window::Fixed { half_width }, blocks)
}

/// Apply any window.
pub fn moving_average(outcomes: &Outcomes, window: Window, blocks: &[Range<usize>]) -> Result<ProbabilitySeries> {
    average(outcomes, window, blocks)
}

/// State-tracking quality of a fitted trace against ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingMetrics {
    /// Fraction of steps whose predicted state differs from the true one.
    pub inaccuracy: f64,
    /// Median |δf_fit − δf_true| over correctly classified steps (NaN if none).
    pub epsilon_correct: f64,
    pub n_correct: usize,
}

pub fn tracking_metrics(true_states: &[i8], predicted: &[i8], true_df: &[f64], fitted_df: &[f64]) -> Result<TrackingMetrics> {
    let n = true_states.len();
    if predicted.len() != n || true_df.len() != n || fitted_df.len() != n {
        return Err(Error::data("tracking metrics need equal-length series"));
    }
    if n == 0 {
        return Err(Error::data("tracking metrics need at least one step"));
    }
    let errors: Vec<f64> = (0..n)
        .filter(|&k| true_states[k] == predicted[k])
        .map(|k| (fitted_df[k] - true_df[k]).abs())
        .collect();
    Ok(TrackingMetrics {
        inaccuracy: (n - errors.len()) as f64 / n as f64,
        epsilon_correct: stats::median(&errors),
        n_correct: errors.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_circuit(bits: &[u8]) -> Outcomes {
        Outcomes::from_bits(bits.len(), 1, bits.to_vec()).unwrap()
    }

    #[test]
    fn isolated_one_under_gaussian_kernel() {
        let mut bits = vec![0u8; 41];
        bits[20] = 1;
        let o = single_circuit(&bits);
        let s = gaussian_average(&o, 2.0, &[0..41]).unwrap();
        // Oracle: direct kernel sum over k = −8..8.
        let norm: f64 = (-8i32..=8).map(|k| (-(f64::from(k * k)) / 8.0).exp()).sum();
        assert!((s.p(20)[0] - 1.0 / norm).abs() < 1e-15);
        assert!((s.n_eff(20)[0] - norm).abs() < 1e-12);
        assert!((norm - 5.013_168_393_599_853).abs() < 1e-12);
        assert!(!s.edge[20] && s.edge[0]);
    }

    #[test]
    fn fixed_window_cases() {
        let o = single_circuit(&[0, 1, 0]);
        let s = fixed_window_average(&o, 1, &[0..3]).unwrap();
        assert!((s.p(1)[0] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.n_eff(0)[0], 1.0);
        let s0 = fixed_window_average(&o, 0, &[0..3]).unwrap();
        assert_eq!((s0.p(0)[0], s0.p(1)[0]), (0.0, 1.0));
    }

    #[test]
    fn windows_respect_blocks() {
        let o = single_circuit(&[1, 1, 1, 0, 0, 0]);
        let s = gaussian_average(&o, 3.0, &[0..3, 3..6]).unwrap();
        assert!((0..3).all(|r| s.p(r)[0] == 1.0));
        assert!((3..6).all(|r| s.p(r)[0] == 0.0));
        assert!(gaussian_average(&o, 3.0, &[0..2, 3..6]).is_err());
    }

    #[test]
    fn missing_outcomes_are_skipped_and_empty_windows_fail() {
        let mut o = Outcomes::empty(5, 2);
        for r in 0..5 {
            o.set(r, 0, 1);
        }
        let err = gaussian_average(&o, 1.0, &[0..5]).unwrap_err();
        assert!(err.to_string().contains("circuit 1"), "{err}");
        o.set(2, 1, 0);
        let s = gaussian_average(&o, 1.0, &[0..5]).unwrap();
        assert_eq!(s.p(0)[1], 0.0);
        assert!(s.n_eff(0)[1] < s.n_eff(0)[0]);
    }

    #[test]
    fn gap_blocks() {
        let t = [0.0, 1.0, 2.0, 3.0, 500.0, 501.0];
        assert_eq!(blocks_from_gaps(&t, 100.0), vec![0..4, 4..6]);
        assert_eq!(blocks_from_gaps(&t[..4], 100.0), vec![0..4]);
    }

    #[test]
    fn metrics_extremes() {
        let s = [1i8, -1, 1, 1];
        let neg: Vec<i8> = s.iter().map(|x| -x).collect();
        let df = [1.0, -1.0, 1.0, 1.0];
        let m = tracking_metrics(&s, &s, &df, &[1.5, -1.0, 0.0, 1.0]).unwrap();
        assert_eq!(m.inaccuracy, 0.0);
        assert_eq!(m.epsilon_correct, 0.25);
        let m = tracking_metrics(&s, &neg, &df, &df).unwrap();
        assert_eq!(m.inaccuracy, 1.0);
        assert!(m.epsilon_correct.is_nan());
        assert!(tracking_metrics(&s, &s[..3], &df, &df).is_err());
    }
}
