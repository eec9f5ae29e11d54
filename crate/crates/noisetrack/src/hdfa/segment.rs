//! Sequential change-point scan with incremental HMM refits, and per-segment
//! summaries.

use serde::{Deserialize, Serialize};

use super::hmm::{fit_hmm2_with, viterbi, Forward, GaussianHmm2, HmmScratch};
use super::HdfaOptions;
use crate::{stats, Error, Result};

/// Constant-state run inside a segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub start: usize,
    pub end: usize,
    pub state: i8,
    /// Inverse-variance weighted mean and its standard error.
    pub mean: f64,
    pub std_err: f64,
}

/// Centre, spread and their fit-quality uncertainties for one segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSummary {
    pub f_c: f64,
    pub f_delta: f64,
    pub sigma_f_c: f64,
    pub sigma_f_delta: f64,
    pub blocks: Vec<Block>,
    /// Only one block: no switching was resolved inside the segment.
    pub single_state: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    /// Half-open index span `[start, end)`.
    pub start: usize,
    pub end: usize,
    pub model: GaussianHmm2,
    pub mean_log10_likelihood: f64,
    /// Hidden state per step, `+1` for the larger-mean state.
    pub states: Vec<i8>,
    pub summary: SegmentSummary,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Result of one segmentation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    pub lambda_ll: f64,
    pub l_min: usize,
    pub sigma_floor: f64,
    pub segments: Vec<Segment>,
}

impl Segmentation {
    pub fn n_change_points(&self) -> usize {
        self.segments.len().saturating_sub(1)
    }

    /// Per-step `f_c`, `f_Δ`, their σ⁽¹⁾ and the state.
    pub fn per_step(&self) -> PerStep {
        let n = self.segments.last().map_or(0, |s| s.end);
        let mut out = PerStep::with_len(n);
        for seg in &self.segments {
            for k in seg.start..seg.end {
                out.f_c[k] = seg.summary.f_c;
                out.f_delta[k] = seg.summary.f_delta;
                out.sigma_f_c[k] = seg.summary.sigma_f_c;
                out.sigma_f_delta[k] = seg.summary.sigma_f_delta;
                out.states[k] = seg.states[k - seg.start];
            }
        }
        out
    }

    /// Reconstruction `f_c + s·f_Δ/2` at every step.
    pub fn reconstruction(&self) -> Vec<f64> {
        let p = self.per_step();
        (0..p.f_c.len()).map(|k| p.f_c[k] + f64::from(p.states[k]) * p.f_delta[k] / 2.0).collect()
    }
}

/// Segment quantities expanded to every time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerStep {
    pub f_c: Vec<f64>,
    pub f_delta: Vec<f64>,
    pub sigma_f_c: Vec<f64>,
    pub sigma_f_delta: Vec<f64>,
    pub states: Vec<i8>,
}

impl PerStep {
    fn with_len(n: usize) -> Self {
        Self {
            f_c: vec![0.0; n],
            f_delta: vec![0.0; n],
            sigma_f_c: vec![0.0; n],
            sigma_f_delta: vec![0.0; n],
            states: vec![0; n],
        }
    }
}

/// Width floor ε_σ = max(10 Hz, median input σ).
pub fn sigma_floor(sigmas: &[f64], opts: &HdfaOptions) -> f64 {
    let med = stats::median(sigmas);
    let m = if med.is_finite() { med } else { 0.0 };
    opts.min_sigma_floor.max(m)
}

/// Segment ends found by the scan, as half-open spans over `x`.
pub(crate) fn scan(x: &[f64], lambda: f64, l_min: usize, floor: f64, opts: &HdfaOptions) -> Vec<(usize, usize)> {
    let n = x.len();
    let mut spans = Vec::new();
    let mut scratch = HmmScratch::default();
    let mut start = 0;
    while start < n {
        let mut model: Option<GaussianHmm2> = None;
        let mut fwd = Forward::new();
        let mut last_refit = 0usize;
        let mut end = n;
        let mut t = start + 1;
        while t < n {
            let len = t - start + 1;
            let seg = &x[start..=t];
            let scheduled = len <= opts.dense_refit_len || len as f64 >= last_refit as f64 * (1.0 + opts.refit_growth);
            if let (Some(m), false) = (model, scheduled) {
                // A warm refit can only raise the likelihood of the stale
                // model, so a pass under it is a pass after refitting too.
                fwd.push(&m, x[t]);
                if fwd.mean_log10() >= lambda || len - 1 < l_min {
                    t += 1;
                    continue;
                }
            }
            let from = model.unwrap_or_else(|| GaussianHmm2::initial_guess(seg, floor));
            let mut fit = fit_hmm2_with(seg, from, floor, &opts.baum_welch, &mut scratch);
            let outlier = model.is_some_and(|m| m.outlier_score(x[t]) > opts.outlier_z);
            if outlier && fit.mean_log10_likelihood < lambda {
                // Local refits cannot move a state onto a point far from
                // both; try a start that does.
                let split = GaussianHmm2::split_guess(&seg[..seg.len() - 1], x[t], floor);
                let alt = fit_hmm2_with(seg, split, floor, &opts.baum_welch, &mut scratch);
                if alt.log_likelihood > fit.log_likelihood {
                    fit = alt;
                }
            }
            last_refit = len;
            fwd = Forward::new();
            for &v in seg {
                fwd.push(&fit.model, v);
            }
            model = Some(fit.model);
            if fwd.mean_log10() < lambda && len - 1 >= l_min {
                end = t;
                break;
            }
            t += 1;
        }
        spans.push((start, end));
        start = end;
    }
    // A trailing stub shorter than L_min joins its predecessor.
    if spans.len() > 1 {
        let (s, e) = *spans.last().unwrap();
        if e - s < l_min {
            spans.pop();
            spans.last_mut().unwrap().1 = e;
        }
    }
    spans
}

/// Join neighbours whose union still fits one two-state model at `lambda`.
/// The scan judges short segments on few points, so a single outlier early in
/// a segment can end it; this undoes such cuts.
pub(crate) fn merge_spans(x: &[f64], spans: Vec<(usize, usize)>, lambda: f64, floor: f64, opts: &HdfaOptions) -> Vec<(usize, usize)> {
    let mut scratch = HmmScratch::default();
    let mut out: Vec<(usize, usize)> = Vec::with_capacity(spans.len());
    for (s, e) in spans {
        if let Some(last) = out.last_mut() {
            let union = &x[last.0..e];
            let fit = fit_hmm2_with(union, GaussianHmm2::initial_guess(union, floor), floor, &opts.baum_welch, &mut scratch);
            if fit.mean_log10_likelihood >= lambda {
                last.1 = e;
                continue;
            }
        }
        out.push((s, e));
    }
    out
}

/// Log density of `v` under the model's two states mixed at their stationary
/// weights.
fn mixture_log_density(m: &GaussianHmm2, v: f64) -> f64 {
    let (a, b) = (m.trans[0][1], m.trans[1][0]);
    let w0 = if a + b > 0.0 { b / (a + b) } else { 0.5 };
    let l = |j: usize| {
        let z = (v - m.means[j]) / m.sigmas[j];
        -0.5 * z * z - m.sigmas[j].ln()
    };
    let (l0, l1) = (w0.max(1e-300).ln() + l(0), (1.0 - w0).max(1e-300).ln() + l(1));
    let hi = l0.max(l1);
    hi + ((l0 - hi).exp() + (l1 - hi).exp()).ln()
}

/// Move every boundary to the split that best separates its two neighbours.
/// The scan closes a segment only once the whole segment's likelihood has
/// dropped, which lags a change by a number of points that grows with the
/// segment; here each side is fitted once and the boundary placed where the
/// summed per-point mixture likelihoods peak, keeping both sides at least
/// `l_min` long.
pub(crate) fn refine_boundaries(x: &[f64], mut spans: Vec<(usize, usize)>, l_min: usize, floor: f64, opts: &HdfaOptions) -> Vec<(usize, usize)> {
    let mut scratch = HmmScratch::default();
    let mut fit = |seg: &[f64]| fit_hmm2_with(seg, GaussianHmm2::initial_guess(seg, floor), floor, &opts.baum_welch, &mut scratch).model;
    for i in 1..spans.len() {
        let (a, b) = spans[i - 1];
        let c = spans[i].1;
        if b - a < 2 || c - b < 2 || c - a < 2 * l_min {
            continue;
        }
        let left = fit(&x[a..b]);
        let right = fit(&x[b..c]);
        let (mut run, mut best, mut best_at) = (0.0, f64::NEG_INFINITY, b);
        for k in a..c - l_min {
            run += mixture_log_density(&left, x[k]) - mixture_log_density(&right, x[k]);
            let split = k + 1;
            if split >= a + l_min && (run > best || (run == best && split.abs_diff(b) < best_at.abs_diff(b))) {
                best = run;
                best_at = split;
            }
        }
        spans[i - 1].1 = best_at;
        spans[i].0 = best_at;
    }
    spans
}

/// Split `values` into segments whose two-state fits stay above `lambda`
/// (mean log₁₀-likelihood per point), each at least `l_min` long.
pub fn segment_series(values: &[f64], sigmas: &[f64], lambda: f64, l_min: usize, opts: &HdfaOptions) -> Result<Segmentation> {
    if l_min < 2 {
        return Err(Error::config(format!("minimum segment length must be at least 2, got {l_min}")));
    }
    if values.len() != sigmas.len() {
        return Err(Error::data("values and uncertainties differ in length"));
    }
    if values.is_empty() {
        return Err(Error::data("cannot segment an empty series"));
    }
    let floor = sigma_floor(sigmas, opts);
    let centre = stats::median(values);
    let x: Vec<f64> = values.iter().map(|v| v - centre).collect();
    let mut spans = scan(&x, lambda, l_min, floor, opts);
    if opts.merge_pass {
        spans = merge_spans(&x, spans, lambda, floor, opts);
    }
    if opts.refine_boundaries {
        spans = refine_boundaries(&x, spans, l_min, floor, opts);
    }
    let segments = spans
        .into_iter()
        .map(|(s, e)| finalize(&x, &sigmas[s..e], s, e, centre, floor, opts))
        .collect();
    Ok(Segmentation {
        lambda_ll: lambda,
        l_min,
        sigma_floor: floor,
        segments,
    })
}

fn finalize(x: &[f64], sigmas: &[f64], start: usize, end: usize, centre: f64, floor: f64, opts: &HdfaOptions) -> Segment {
    let seg = &x[start..end];
    let (model, mll, states) = if seg.len() >= 2 {
        let fit = fit_hmm2_with(
            seg,
            GaussianHmm2::initial_guess(seg, floor),
            floor,
            &opts.baum_welch,
            &mut HmmScratch::default(),
        );
        let states = viterbi(&fit.model, seg).into_iter().map(|s| if s == 1 { 1 } else { -1 }).collect();
        (fit.model, fit.mean_log10_likelihood, states)
    } else {
        let m = GaussianHmm2::initial_guess(seg, floor);
        (m, m.log_likelihood(seg) / std::f64::consts::LN_10, vec![-1])
    };
    let raw: Vec<f64> = seg.iter().map(|v| v + centre).collect();
    let summary = summarize_segment(&raw, sigmas, &states);
    Segment {
        start,
        end,
        model: model.offset(centre),
        mean_log10_likelihood: mll,
        states,
        summary,
    }
}

/// Blocks of constant state with inverse-variance weighted means.
pub fn blocks(values: &[f64], sigmas: &[f64], states: &[i8]) -> Vec<Block> {
    let scale = values.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let tiny = 1e-12 * scale;
    let mut out = Vec::new();
    let mut s = 0;
    while s < values.len() {
        let mut e = s + 1;
        while e < values.len() && states[e] == states[s] {
            e += 1;
        }
        let (mut sw, mut swx) = (0.0, 0.0);
        for k in s..e {
            let w = 1.0 / sigmas[k].max(tiny).powi(2);
            sw += w;
            swx += w * values[k];
        }
        out.push(Block {
            start: s,
            end: e,
            state: states[s],
            mean: swx / sw,
            std_err: 1.0 / sw.sqrt(),
        });
        s = e;
    }
    out
}

/// Weighted mean, weighted standard deviation and the propagated error
/// `1/√Σw` of `x` under weights `1/σ²`.
fn weighted_stats(x: &[f64], sigma: &[f64]) -> (f64, f64, f64) {
    let w: Vec<f64> = sigma.iter().map(|s| 1.0 / (s * s)).collect();
    let sw: f64 = w.iter().sum();
    let mean = w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() / sw;
    let var = w.iter().zip(x).map(|(w, x)| w * (x - mean).powi(2)).sum::<f64>() / sw;
    (mean, var.sqrt(), 1.0 / sw.sqrt())
}

/// `f_c`, `f_Δ` and σ⁽¹⁾ from consecutive block pairs. σ⁽¹⁾ combines the
/// weighted spread of the pair statistics with their propagated block errors,
/// so a single pair still carries an uncertainty.
pub fn summarize_segment(values: &[f64], sigmas: &[f64], states: &[i8]) -> SegmentSummary {
    let blocks = blocks(values, sigmas, states);
    if blocks.len() == 1 {
        let b = blocks[0];
        return SegmentSummary {
            f_c: b.mean,
            f_delta: 0.0,
            sigma_f_c: b.std_err,
            sigma_f_delta: b.std_err,
            blocks,
            single_state: true,
        };
    }
    let pairs = blocks.windows(2);
    let mids: Vec<f64> = pairs.clone().map(|p| 0.5 * (p[0].mean + p[1].mean)).collect();
    let mid_sigma: Vec<f64> = pairs.clone().map(|p| 0.5 * (p[0].std_err + p[1].std_err)).collect();
    let diffs: Vec<f64> = pairs.clone().map(|p| (p[0].mean - p[1].mean).abs()).collect();
    let diff_sigma: Vec<f64> = pairs.map(|p| p[0].std_err + p[1].std_err).collect();
    let (f_c, wsd_c, prop_c) = weighted_stats(&mids, &mid_sigma);
    let (f_delta, wsd_d, prop_d) = weighted_stats(&diffs, &diff_sigma);
    SegmentSummary {
        f_c,
        f_delta,
        sigma_f_c: wsd_c.hypot(prop_c),
        sigma_f_delta: wsd_d.hypot(prop_d),
        blocks,
        single_state: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn steps(levels: &[(f64, usize)]) -> (Vec<f64>, Vec<i8>) {
        let mut x = Vec::new();
        let mut s = Vec::new();
        let hi = levels.iter().map(|l| l.0).fold(f64::NEG_INFINITY, f64::max);
        for &(v, n) in levels {
            x.extend(std::iter::repeat(v).take(n));
            s.extend(std::iter::repeat(if v == hi { 1 } else { -1 }).take(n));
        }
        (x, s)
    }

    #[test]
    fn four_equal_blocks() {
        let (x, s) = steps(&[(10e3, 5), (20e3, 5), (10e3, 5), (20e3, 5)]);
        let sig = vec![100.0; x.len()];
        let sum = summarize_segment(&x, &sig, &s);
        assert!((sum.f_c - 15e3).abs() < 1e-9);
        assert!((sum.f_delta - 10e3).abs() < 1e-9);
        assert_eq!(sum.blocks.len(), 4);
        assert!(!sum.single_state);
    }

    #[test]
    fn single_pair_carries_only_propagated_error() {
        let (x, s) = steps(&[(3.0, 4), (7.0, 4)]);
        let sig = vec![2.0; x.len()];
        let sum = summarize_segment(&x, &sig, &s);
        assert!((sum.f_c - 5.0).abs() < 1e-12);
        assert!((sum.f_delta - 4.0).abs() < 1e-12);
        // Block errors are 2/√4 = 1; the pair errors are 1 (midpoint) and 2 (difference).
        assert!((sum.sigma_f_c - 1.0).abs() < 1e-12);
        assert!((sum.sigma_f_delta - 2.0).abs() < 1e-12);
    }

    #[test]
    fn one_block_is_flagged_single_state() {
        let x = [4.0, 6.0, 5.0, 5.0];
        let sum = summarize_segment(&x, &[1.0; 4], &[1; 4]);
        assert!(sum.single_state);
        assert_eq!(sum.f_delta, 0.0);
        assert!((sum.f_c - 5.0).abs() < 1e-12);
        assert!((sum.sigma_f_delta - 0.5).abs() < 1e-12);
    }

    #[test]
    fn blocks_partition_and_alternate() {
        let s = [1, 1, -1, 1, 1, 1, -1, -1];
        let x = [1.0; 8];
        let b = blocks(&x, &[1.0; 8], &s);
        assert_eq!(b.first().unwrap().start, 0);
        assert_eq!(b.last().unwrap().end, 8);
        assert!(b.windows(2).all(|w| w[0].end == w[1].start && w[0].state != w[1].state));
    }

    #[test]
    fn l_min_below_two_is_rejected() {
        let opts = HdfaOptions::default();
        assert!(segment_series(&[1.0, 2.0, 3.0], &[1.0; 3], -3.0, 1, &opts).is_err());
        assert!(segment_series(&[], &[], -3.0, 2, &opts).is_err());
    }

    #[test]
    fn series_shorter_than_l_min_is_one_segment() {
        let x = [0.0, 500.0, -300.0, 800.0, 20.0];
        let seg = segment_series(&x, &[10.0; 5], 0.0, 8, &HdfaOptions::default()).unwrap();
        assert_eq!(seg.segments.len(), 1);
        assert_eq!((seg.segments[0].start, seg.segments[0].end), (0, 5));
    }

    #[test]
    fn segments_partition_the_series() {
        let x: Vec<f64> = (0..500).map(|k| ((k * 7919) % 997) as f64 * 10.0).collect();
        let seg = segment_series(&x, &vec![50.0; 500], -3.0, 3, &HdfaOptions::default()).unwrap();
        assert_eq!(seg.segments[0].start, 0);
        assert_eq!(seg.segments.last().unwrap().end, 500);
        assert!(seg.segments.windows(2).all(|w| w[0].end == w[1].start));
        let per = seg.per_step();
        assert!(per.states.iter().all(|&s| s == 1 || s == -1));
        assert!(per.f_delta.iter().all(|&d| d >= 0.0));
    }
}
