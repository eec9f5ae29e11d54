//! Two-state Gaussian hidden Markov model: Baum–Welch, forward recursion and
//! Viterbi decoding. Emissions are handled in log space with a per-step shift
//! so widely separated points never underflow.

use std::f64::consts::LN_10;

use serde::{Deserialize, Serialize};

use crate::{stats, Error, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianHmm2 {
    /// State means; index 1 holds the larger mean after fitting.
    pub means: [f64; 2],
    pub sigmas: [f64; 2],
    /// Row-stochastic transition matrix, `trans[i][j] = P(j | i)`.
    pub trans: [[f64; 2]; 2],
    pub init: [f64; 2],
}

impl GaussianHmm2 {
    /// Means at the 25th/75th percentiles, widths at half the interquartile
    /// range, 0.9 stay probability.
    pub fn initial_guess(values: &[f64], sigma_floor: f64) -> Self {
        let q1 = stats::quantile(values, 0.25);
        let q3 = stats::quantile(values, 0.75);
        let s = (0.5 * (q3 - q1)).max(sigma_floor);
        Self {
            means: [q1, q3],
            sigmas: [s, s],
            trans: [[0.9, 0.1], [0.1, 0.9]],
            init: [0.5, 0.5],
        }
    }

    #[inline]
    fn log_emission(&self, x: f64) -> [f64; 2] {
        std::array::from_fn(|j| {
            let z = (x - self.means[j]) / self.sigmas[j];
            -0.5 * z * z - self.sigmas[j].ln() - LN_SQRT_2PI
        })
    }

    /// Emission densities scaled by `e^{−shift}`, returned with the shift.
    #[inline]
    fn scaled_emission(&self, x: f64) -> ([f64; 2], f64) {
        let l = self.log_emission(x);
        let m = l[0].max(l[1]);
        ([(l[0] - m).exp(), (l[1] - m).exp()], m)
    }

    /// One state on `rest`, the other on the single point `new`.
    pub fn split_guess(rest: &[f64], new: f64, sigma_floor: f64) -> Self {
        let centre = stats::median(rest);
        let spread = if rest.len() > 1 { stats::std_dev(rest) } else { 0.0 };
        let m = Self {
            means: [centre, new],
            sigmas: [spread.max(sigma_floor), sigma_floor],
            trans: [[0.9, 0.1], [0.1, 0.9]],
            init: [0.5, 0.5],
        };
        if new < centre {
            m.swapped()
        } else {
            m
        }
    }

    /// Largest standardized distance of `x` from the nearer state.
    pub fn outlier_score(&self, x: f64) -> f64 {
        let z0 = ((x - self.means[0]) / self.sigmas[0]).abs();
        let z1 = ((x - self.means[1]) / self.sigmas[1]).abs();
        z0.min(z1)
    }

    /// Same model with the states exchanged.
    fn swapped(&self) -> Self {
        Self {
            means: [self.means[1], self.means[0]],
            sigmas: [self.sigmas[1], self.sigmas[0]],
            trans: [[self.trans[1][1], self.trans[1][0]], [self.trans[0][1], self.trans[0][0]]],
            init: [self.init[1], self.init[0]],
        }
    }

    /// Shift both means by `c`.
    pub fn offset(&self, c: f64) -> Self {
        Self {
            means: [self.means[0] + c, self.means[1] + c],
            ..*self
        }
    }

    /// Natural-log likelihood of `values`.
    pub fn log_likelihood(&self, values: &[f64]) -> f64 {
        let mut fwd = Forward::new();
        for &x in values {
            fwd.push(self, x);
        }
        fwd.log_likelihood
    }
}

/// Scaled forward recursion that can be extended one point at a time.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    alpha: [f64; 2],
    pub log_likelihood: f64,
    pub len: usize,
}

impl Default for Forward {
    fn default() -> Self {
        Self::new()
    }
}

impl Forward {
    pub fn new() -> Self {
        Self {
            alpha: [0.0; 2],
            log_likelihood: 0.0,
            len: 0,
        }
    }

    pub fn push(&mut self, m: &GaussianHmm2, x: f64) {
        let (b, shift) = m.scaled_emission(x);
        let prior = if self.len == 0 {
            m.init
        } else {
            let a = self.alpha;
            [a[0] * m.trans[0][0] + a[1] * m.trans[1][0], a[0] * m.trans[0][1] + a[1] * m.trans[1][1]]
        };
        let raw = [prior[0] * b[0], prior[1] * b[1]];
        let c = raw[0] + raw[1];
        if c > 0.0 {
            self.alpha = [raw[0] / c, raw[1] / c];
            self.log_likelihood += c.ln() + shift;
        } else {
            self.alpha = [0.5, 0.5];
            self.log_likelihood = f64::NEG_INFINITY;
        }
        self.len += 1;
    }

    /// Mean per-point base-10 log-likelihood.
    pub fn mean_log10(&self) -> f64 {
        self.log_likelihood / (self.len as f64 * LN_10)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaumWelchOptions {
    /// Relative log-likelihood change that counts as converged.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Dirichlet pseudo-count added to every transition tally, so a state
    /// that has not yet switched inside a short segment keeps a finite exit
    /// probability.
    pub transition_pseudocount: f64,
}

impl Default for BaumWelchOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            max_iterations: 200,
            transition_pseudocount: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HmmFit {
    pub model: GaussianHmm2,
    /// Natural-log likelihood of the data under `model`.
    pub log_likelihood: f64,
    pub mean_log10_likelihood: f64,
    pub iterations: usize,
    /// At least one width sits on the floor.
    pub floored: bool,
}

/// Reusable buffers for Baum–Welch.
#[derive(Debug, Default)]
pub struct HmmScratch {
    alpha: Vec<[f64; 2]>,
    scale: Vec<f64>,
    emis: Vec<[f64; 2]>,
    gamma: Vec<[f64; 2]>,
}

/// Fit a two-state Gaussian HMM by Baum–Welch starting from `start`.
pub fn fit_hmm2(values: &[f64], start: GaussianHmm2, sigma_floor: f64, opts: &BaumWelchOptions) -> Result<HmmFit> {
    if values.len() < 2 {
        return Err(Error::data("an HMM fit needs at least 2 points"));
    }
    if !(sigma_floor > 0.0) {
        return Err(Error::config("the HMM width floor must be positive"));
    }
    Ok(fit_hmm2_with(values, start, sigma_floor, opts, &mut HmmScratch::default()))
}

pub(crate) fn fit_hmm2_with(
    values: &[f64],
    start: GaussianHmm2,
    sigma_floor: f64,
    opts: &BaumWelchOptions,
    s: &mut HmmScratch,
) -> HmmFit {
    let n = values.len();
    s.alpha.resize(n, [0.0; 2]);
    s.scale.resize(n, 0.0);
    s.emis.resize(n, [0.0; 2]);
    let mut m = start;
    for j in 0..2 {
        m.sigmas[j] = m.sigmas[j].max(sigma_floor);
    }
    let mut prev_ll = f64::NEG_INFINITY;
    let mut ll = f64::NEG_INFINITY;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        iterations += 1;
        ll = forward_pass(&m, values, s);
        if iterations > 1 && (ll - prev_ll).abs() <= opts.tolerance * ll.abs().max(1e-300) {
            break;
        }
        prev_ll = ll;
        m = reestimate(&m, values, sigma_floor, opts.transition_pseudocount, s);
    }
    if iterations == opts.max_iterations {
        ll = forward_pass(&m, values, s);
    }
    if m.means[0] > m.means[1] {
        m = m.swapped();
    }
    HmmFit {
        model: m,
        log_likelihood: ll,
        mean_log10_likelihood: ll / (n as f64 * LN_10),
        iterations,
        floored: m.sigmas.iter().any(|&x| x <= sigma_floor * (1.0 + 1e-12)),
    }
}

/// Scaled forward pass filling `s.alpha`, `s.scale` and `s.emis`; returns the
/// log-likelihood.
fn forward_pass(m: &GaussianHmm2, values: &[f64], s: &mut HmmScratch) -> f64 {
    let mut ll = 0.0;
    let mut prev = [0.0; 2];
    for (t, &x) in values.iter().enumerate() {
        let (b, shift) = m.scaled_emission(x);
        s.emis[t] = b;
        let prior = if t == 0 {
            m.init
        } else {
            [prev[0] * m.trans[0][0] + prev[1] * m.trans[1][0], prev[0] * m.trans[0][1] + prev[1] * m.trans[1][1]]
        };
        let raw = [prior[0] * b[0], prior[1] * b[1]];
        let c = (raw[0] + raw[1]).max(f64::MIN_POSITIVE);
        prev = [raw[0] / c, raw[1] / c];
        s.alpha[t] = prev;
        s.scale[t] = c;
        ll += c.ln() + shift;
    }
    ll
}

/// One M-step from the forward quantities already in `s`.
fn reestimate(m: &GaussianHmm2, values: &[f64], sigma_floor: f64, prior: f64, s: &mut HmmScratch) -> GaussianHmm2 {
    let n = values.len();
    s.gamma.resize(n, [0.0; 2]);
    let mut beta = [1.0, 1.0];
    let mut xi = [[0.0; 2]; 2];
    for t in (0..n).rev() {
        let a = s.alpha[t];
        let g = [a[0] * beta[0], a[1] * beta[1]];
        let gn = g[0] + g[1];
        s.gamma[t] = if gn > 0.0 { [g[0] / gn, g[1] / gn] } else { [0.5, 0.5] };
        if t == 0 {
            break;
        }
        // ξ_{t−1}(i, j) ∝ α_{t−1}(i) a_ij b_j(x_t) β_t(j).
        let ap = s.alpha[t - 1];
        let b = s.emis[t];
        let mut local = [[0.0; 2]; 2];
        let mut norm = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                local[i][j] = ap[i] * m.trans[i][j] * b[j] * beta[j];
                norm += local[i][j];
            }
        }
        if norm > 0.0 {
            for i in 0..2 {
                for j in 0..2 {
                    xi[i][j] += local[i][j] / norm;
                }
            }
        }
        let c = s.scale[t];
        beta = [
            (m.trans[0][0] * b[0] * beta[0] + m.trans[0][1] * b[1] * beta[1]) / c,
            (m.trans[1][0] * b[0] * beta[0] + m.trans[1][1] * b[1] * beta[1]) / c,
        ];
        let bm = beta[0].max(beta[1]);
        if bm > 1e200 || (bm > 0.0 && bm < 1e-200) {
            beta = [beta[0] / bm, beta[1] / bm];
        }
    }

    let mut out = *m;
    out.init = s.gamma[0];
    for i in 0..2 {
        let from = xi[i][0] + xi[i][1] + 2.0 * prior;
        if from > 0.0 {
            out.trans[i] = [(xi[i][0] + prior) / from, (xi[i][1] + prior) / from];
        }
    }
    let mut g_sum = [0.0; 2];
    let mut gx = [0.0; 2];
    for (g, &x) in s.gamma.iter().zip(values) {
        for j in 0..2 {
            g_sum[j] += g[j];
            gx[j] += g[j] * x;
        }
    }
    for j in 0..2 {
        if g_sum[j] > 1e-12 {
            let mu = gx[j] / g_sum[j];
            let var: f64 = s.gamma.iter().zip(values).map(|(g, x)| g[j] * (x - mu) * (x - mu)).sum::<f64>() / g_sum[j];
            out.means[j] = mu;
            out.sigmas[j] = var.sqrt().max(sigma_floor);
        }
    }
    out
}

/// Most likely hidden path; `0` is the lower-mean state. Ties go to state 0.
pub fn viterbi(m: &GaussianHmm2, values: &[f64]) -> Vec<u8> {
    let n = values.len();
    if n == 0 {
        return Vec::new();
    }
    let lt = m.trans.map(|row| row.map(|p| p.ln()));
    let mut back = vec![[0u8; 2]; n];
    let e = m.log_emission(values[0]);
    let mut delta = [m.init[0].ln() + e[0], m.init[1].ln() + e[1]];
    for t in 1..n {
        let e = m.log_emission(values[t]);
        let mut next = [0.0; 2];
        for j in 0..2 {
            let from0 = delta[0] + lt[0][j];
            let from1 = delta[1] + lt[1][j];
            let (v, arg) = if from1 > from0 { (from1, 1) } else { (from0, 0) };
            next[j] = v + e[j];
            back[t][j] = arg;
        }
        delta = next;
    }
    let mut path = vec![0u8; n];
    path[n - 1] = u8::from(delta[1] > delta[0]);
    for t in (1..n).rev() {
        path[t - 1] = back[t][path[t] as usize];
    }
    path
}
