//! Welch power spectra of parameter traces and a `1/f^α` plus white-noise
//! model that accounts for the smoothing applied by the moving average.
//!
//! Densities are one-sided, in units² per Hz, and exclude the DC bin, so
//! `Σ P·Δf` approximates the variance of the trace.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::averaging::Window;
use crate::{stats, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsdEstimate {
    /// Positive, ascending bin frequencies, Hz.
    pub freqs: Vec<f64>,
    pub power: Vec<f64>,
    pub segment_length: usize,
    /// Taper and overlap, e.g. `hann/0.5`.
    pub window: String,
    /// Number of averaged segments.
    pub n_segments: usize,
}

impl PsdEstimate {
    /// `Σ P·Δf`, the variance the spectrum accounts for.
    pub fn integrated_power(&self) -> f64 {
        match self.freqs.first() {
            Some(&df) => self.power.iter().sum::<f64>() * df,
            None => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WelchOptions {
    pub segment_length: usize,
    /// Fractional overlap of consecutive segments.
    pub overlap: f64,
    /// Steps longer than this multiple of the median step split the trace.
    pub gap_factor: f64,
}

impl Default for WelchOptions {
    fn default() -> Self {
        Self {
            segment_length: 1 << 16,
            overlap: 0.5,
            gap_factor: 100.0,
        }
    }
}

fn hann(n: usize) -> Vec<f64> {
    // Periodic form, which tiles exactly at 50% overlap.
    (0..n).map(|k| 0.5 - 0.5 * (2.0 * PI * k as f64 / n as f64).cos()).collect()
}

/// Averaged Hann-tapered periodogram of one or more uniformly sampled pieces.
fn welch_pieces(pieces: &[&[f64]], dt: f64, opts: &WelchOptions) -> Result<PsdEstimate> {
    let n = opts.segment_length;
    if n < 4 {
        return Err(Error::config(format!("segment length must be at least 4, got {n}")));
    }
    if !(0.0..1.0).contains(&opts.overlap) {
        return Err(Error::config(format!("overlap must lie in [0, 1), got {}", opts.overlap)));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::config(format!("sample interval must be positive, got {dt}")));
    }
    let longest = pieces.iter().map(|p| p.len()).max().unwrap_or(0);
    if longest < n {
        return Err(Error::data(format!(
            "trace has {longest} uniform samples, fewer than the segment length {n}; use a smaller segment length"
        )));
    }
    let step = ((n as f64 * (1.0 - opts.overlap)).round() as usize).max(1);
    let taper = hann(n);
    let norm: f64 = taper.iter().map(|w| w * w).sum::<f64>() / dt;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let half = n / 2;
    let mut acc = vec![0.0; half];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut count = 0usize;
    for piece in pieces {
        let mut start = 0;
        while start + n <= piece.len() {
            let seg = &piece[start..start + n];
            let mean = stats::mean(seg);
            for k in 0..n {
                buf[k] = Complex::new((seg[k] - mean) * taper[k], 0.0);
            }
            fft.process(&mut buf);
            for k in 1..=half {
                let scale = if k == half && n % 2 == 0 { 1.0 } else { 2.0 };
                acc[k - 1] += scale * buf[k].norm_sqr() / norm;
            }
            count += 1;
            start += step;
        }
    }
    let df = 1.0 / (n as f64 * dt);
    Ok(PsdEstimate {
        freqs: (1..=half).map(|k| k as f64 * df).collect(),
        power: acc.iter().map(|p| p / count as f64).collect(),
        segment_length: n,
        window: format!("hann/{}", opts.overlap),
        n_segments: count,
    })
}

/// Welch estimate of a uniformly sampled trace.
pub fn welch_psd(values: &[f64], dt: f64, opts: &WelchOptions) -> Result<PsdEstimate> {
    welch_pieces(&[values], dt, opts)
}

/// Pieces of an irregular trace resampled by nearest neighbour onto the
/// median step; gaps longer than `gap_factor` steps start a new piece.
pub fn resample_uniform(times: &[f64], values: &[f64], gap_factor: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    if times.len() != values.len() || times.len() < 2 {
        return Err(Error::data("need at least two samples with matching timestamps"));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::data("timestamps must be strictly increasing"));
    }
    let steps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    let dt = stats::median(&steps);
    let mut pieces = Vec::new();
    let mut start = 0;
    for k in 0..=steps.len() {
        if k == steps.len() || steps[k] > gap_factor * dt {
            let (t, v) = (&times[start..=k], &values[start..=k]);
            let m = ((t[t.len() - 1] - t[0]) / dt).round() as usize + 1;
            let mut j = 0;
            let piece = (0..m)
                .map(|i| {
                    let target = t[0] + i as f64 * dt;
                    while j + 1 < t.len() && (t[j + 1] - target).abs() <= (t[j] - target).abs() {
                        j += 1;
                    }
                    v[j]
                })
                .collect();
            pieces.push(piece);
            start = k + 1;
        }
    }
    Ok((dt, pieces))
}

/// Welch estimate of a trace with timestamps.
pub fn welch_psd_irregular(times: &[f64], values: &[f64], opts: &WelchOptions) -> Result<PsdEstimate> {
    let (dt, pieces) = resample_uniform(times, values, opts.gap_factor)?;
    let refs: Vec<&[f64]> = pieces.iter().map(Vec::as_slice).collect();
    welch_pieces(&refs, dt, opts)
}

/// `|H(f)|²` of the normalized discrete Gaussian kernel of width `w_g`
/// samples; identity for `w_g ≤ 0`.
pub fn gaussian_transfer(freqs: &[f64], dt: f64, w_g: f64) -> Vec<f64> {
    if !(w_g > 0.0) {
        return vec![1.0; freqs.len()];
    }
    let w = Window::Gaussian { width: w_g }.weights();
    let total = w[0] + 2.0 * w[1..].iter().sum::<f64>();
    freqs
        .iter()
        .map(|f| {
            let h = w[0] + 2.0 * w.iter().enumerate().skip(1).map(|(k, wk)| wk * (2.0 * PI * f * k as f64 * dt).cos()).sum::<f64>();
            (h / total).powi(2)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsdModel {
    /// Coefficient of `f^{-α}`, units²·Hz^{α−1}.
    pub amplitude: f64,
    pub alpha: f64,
    /// White floor, units²/Hz.
    pub floor: f64,
    pub w_g: f64,
    /// Root-mean-square log-power residual over the fitted bins.
    pub rms_log_residual: f64,
    pub n_bins: usize,
    /// False when the optimizer stopped before converging; the parameters are
    /// the best found.
    pub converged: bool,
}

impl PsdModel {
    /// Model density at `f` before the averaging transfer function.
    pub fn intrinsic(&self, f: f64) -> f64 {
        self.amplitude * f.powf(-self.alpha) + self.floor
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PsdFitOptions {
    /// Lowest bins dropped to avoid taper leakage.
    pub skip_low_bins: usize,
    /// Bins above this fraction of Nyquist are dropped.
    pub max_nyquist_fraction: f64,
    /// Required ratio between the highest and lowest fitted frequency.
    pub min_decades: f64,
    pub max_iterations: usize,
}

impl Default for PsdFitOptions {
    fn default() -> Self {
        Self {
            skip_low_bins: 2,
            max_nyquist_fraction: 0.8,
            min_decades: 2.0,
            max_iterations: 200,
        }
    }
}

const ALPHA_MAX: f64 = 3.0;

/// Log-space residuals and Jacobian of `ln(H²·(e^a f^{-α} + e^c)) − ln P`
/// with parameters `(a, α, c)`.
fn residuals(p: &Vector3<f64>, lf: &[f64], lh: &[f64], lp: &[f64], jac: &mut Vec<[f64; 3]>) -> Vec<f64> {
    let mut r = Vec::with_capacity(lf.len());
    let mut rows = Vec::with_capacity(lf.len());
    for i in 0..lf.len() {
        let red = p[0] - p[1] * lf[i];
        // log-sum-exp of the two terms
        let m = red.max(p[2]);
        let (e1, e2) = ((red - m).exp(), (p[2] - m).exp());
        let s = e1 + e2;
        r.push(lh[i] + m + s.ln() - lp[i]);
        let w1 = e1 / s;
        rows.push([w1, -w1 * lf[i], 1.0 - w1]);
    }
    *jac = rows;
    r
}

/// Least-squares fit of `|H_G|²·(A/f^α + C)` to the spectrum in log power.
pub fn fit_psd_model(psd: &PsdEstimate, dt: f64, w_g: f64, opts: &PsdFitOptions) -> Result<PsdModel> {
    let nyquist = 0.5 / dt;
    let idx: Vec<usize> = (opts.skip_low_bins..psd.freqs.len())
        .filter(|&k| psd.freqs[k] <= opts.max_nyquist_fraction * nyquist && psd.power[k] > 0.0)
        .collect();
    if idx.len() < 4 {
        return Err(Error::data(format!("only {} usable spectral bins", idx.len())));
    }
    let (f_lo, f_hi) = (psd.freqs[idx[0]], psd.freqs[idx[idx.len() - 1]]);
    if (f_hi / f_lo).log10() < opts.min_decades {
        return Err(Error::data(format!(
            "fitted band spans {:.2} decades, fewer than {}",
            (f_hi / f_lo).log10(),
            opts.min_decades
        )));
    }
    let freqs: Vec<f64> = idx.iter().map(|&k| psd.freqs[k]).collect();
    let lf: Vec<f64> = freqs.iter().map(|f| f.ln()).collect();
    let lh: Vec<f64> = gaussian_transfer(&freqs, dt, w_g).iter().map(|h| h.max(1e-300).ln()).collect();
    let lp: Vec<f64> = idx.iter().map(|&k| psd.power[k].ln()).collect();

    // Starts: floor from the top decade, amplitude pinned at the lowest bin.
    let deflated: Vec<f64> = (0..lp.len()).map(|i| lp[i] - lh[i]).collect();
    let top: Vec<f64> = deflated.iter().zip(&freqs).filter(|(_, f)| **f >= f_hi / 10.0).map(|(v, _)| *v).collect();
    let c0 = stats::median(&top);
    let mut best: Option<(Vector3<f64>, f64, bool)> = None;
    for k in 0..=6 {
        let alpha0 = 0.25 + 0.4 * k as f64;
        let a0 = deflated[0] + alpha0 * lf[0];
        let (p, c, ok) = levenberg_marquardt(Vector3::new(a0, alpha0, c0), &lf, &lh, &lp, opts.max_iterations);
        if best.as_ref().is_none_or(|b| c < b.1) {
            best = Some((p, c, ok));
        }
    }
    let (p, c, converged) = best.expect("at least one start");
    Ok(PsdModel {
        amplitude: p[0].exp(),
        alpha: p[1],
        floor: p[2].exp(),
        w_g,
        rms_log_residual: (c / lf.len() as f64).sqrt(),
        n_bins: lf.len(),
        converged,
    })
}

fn clamp_alpha(mut p: Vector3<f64>) -> Vector3<f64> {
    p[1] = p[1].clamp(0.0, ALPHA_MAX);
    p
}

fn levenberg_marquardt(start: Vector3<f64>, lf: &[f64], lh: &[f64], lp: &[f64], max_iter: usize) -> (Vector3<f64>, f64, bool) {
    let mut p = clamp_alpha(start);
    let mut jac = Vec::new();
    let mut r = residuals(&p, lf, lh, lp, &mut jac);
    let mut cost: f64 = r.iter().map(|x| x * x).sum();
    let mut mu = 1e-3;
    for _ in 0..max_iter {
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for (row, ri) in jac.iter().zip(&r) {
            let g = Vector3::new(row[0], row[1], row[2]);
            jtj += g * g.transpose();
            jtr += g * *ri;
        }
        let mut improved = false;
        while mu < 1e12 {
            let mut a = jtj;
            for d in 0..3 {
                a[(d, d)] += mu * (jtj[(d, d)] + 1e-12);
            }
            let Some(step) = a.cholesky().map(|ch| ch.solve(&(-jtr))) else {
                mu *= 10.0;
                continue;
            };
            let trial = clamp_alpha(p + step);
            let mut tj = Vec::new();
            let tr = residuals(&trial, lf, lh, lp, &mut tj);
            let tc: f64 = tr.iter().map(|x| x * x).sum();
            if tc < cost {
                let rel = (cost - tc) / cost.max(1e-300);
                p = trial;
                r = tr;
                jac = tj;
                cost = tc;
                mu = (mu / 3.0).max(1e-12);
                improved = true;
                if rel < 1e-12 {
                    return (p, cost, true);
                }
                break;
            }
            mu *= 10.0;
        }
        if !improved {
            return (p, cost, true);
        }
    }
    (p, cost, false)
}
