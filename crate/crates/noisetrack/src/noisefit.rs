//! Per-slice regression of `(δf, Γ₁, Γφ)` and bootstrap standard errors.
//!
//! Every time slice is fitted by differential evolution (best/1/bin with
//! Latin-hypercube initialization) followed by a bounded Levenberg–Marquardt
//! polish. Uncertainties come from resampling: each replica redraws the
//! probabilities from a binomial with the slice's effective count, adds
//! residuals drawn with replacement from the slice's own fit, and refits.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::averaging::ProbabilitySeries;
use crate::emulator::{Basis, ExperimentPlan, NoiseParams};
use crate::rng::{self, Purpose};
use crate::{stats, Error, Result};

/// Consecutive slices fitted as one warm-started chain. Fixed so results do
/// not depend on the thread count.
const WARM_CHAIN: usize = 256;
/// Uniform-grid recurrences are re-anchored this often to bound drift.
const ANCHOR_EVERY: usize = 32;
/// Below this δf sensitivity the X/Y signal has decayed before it can encode
/// a phase; see [`SliceFit::low_sensitivity`].
const LOW_SENSITIVITY: f64 = 0.05;

/// Closed-form probabilities for every circuit of a repetition.
#[derive(Debug, Clone)]
pub struct ProbabilityModel {
    taus: Vec<f64>,
    bases: Vec<Basis>,
    /// `(τ₀, Δτ)` when the grid is uniform.
    uniform: Option<(f64, f64)>,
}

impl ProbabilityModel {
    pub fn new(plan: &ExperimentPlan) -> Self {
        Self::from_grid(plan.idle_times.clone(), plan.bases.clone())
    }

    pub fn from_grid(taus: Vec<f64>, bases: Vec<Basis>) -> Self {
        let uniform = if taus.len() >= 2 {
            let step = (taus[taus.len() - 1] - taus[0]) / (taus.len() - 1) as f64;
            let scale = taus[taus.len() - 1].abs().max(step);
            taus.iter()
                .enumerate()
                .all(|(k, t)| (t - taus[0] - k as f64 * step).abs() <= 1e-12 * scale)
                .then_some((taus[0], step))
        } else {
            None
        };
        Self { taus, bases, uniform }
    }

    pub fn n_circuits(&self) -> usize {
        self.taus.len() * self.bases.len()
    }

    pub fn taus(&self) -> &[f64] {
        &self.taus
    }

    pub fn bases(&self) -> &[Basis] {
        &self.bases
    }

    /// Largest unaliased detuning on this grid.
    pub fn aliasing_limit(&self) -> f64 {
        let step = self.taus.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        0.5 / step
    }

    /// Calls `f(k, τ, E, Z, cosφ, sinφ)` for every idle time, where
    /// `E = e^{−(Γ₁/2+Γφ)τ}`, `Z = e^{−Γ₁τ}` and `φ = 2πδfτ`.
    #[inline]
    fn for_each_tau(&self, theta: &[f64; 3], mut f: impl FnMut(usize, f64, f64, f64, f64, f64)) {
        let [df, g1, gp] = *theta;
        let a = 0.5 * g1 + gp;
        let omega = TAU * df;
        let direct = |tau: f64| {
            let (s, c) = (omega * tau).sin_cos();
            ((-a * tau).exp(), (-g1 * tau).exp(), c, s)
        };
        match self.uniform {
            Some((t0, step)) => {
                let re = (-a * step).exp();
                let rz = (-g1 * step).exp();
                let (sd, cd) = (omega * step).sin_cos();
                let (mut e, mut z, mut c, mut s) = (0.0, 0.0, 0.0, 0.0);
                for k in 0..self.taus.len() {
                    let tau = t0 + k as f64 * step;
                    if k % ANCHOR_EVERY == 0 {
                        (e, z, c, s) = direct(tau);
                    } else {
                        e *= re;
                        z *= rz;
                        (c, s) = (c * cd - s * sd, s * cd + c * sd);
                    }
                    f(k, tau, e, z, c, s);
                }
            }
            None => {
                for (k, &tau) in self.taus.iter().enumerate() {
                    let (e, z, c, s) = direct(tau);
                    f(k, tau, e, z, c, s);
                }
            }
        }
    }

    /// Model probabilities in circuit order.
    pub fn evaluate(&self, theta: &[f64; 3], out: &mut [f64]) {
        let nb = self.bases.len();
        self.for_each_tau(theta, |k, _, e, z, c, s| {
            for (j, b) in self.bases.iter().enumerate() {
                out[k * nb + j] = match b {
                    Basis::X => 0.5 * (1.0 - e * s),
                    Basis::Y => 0.5 * (1.0 - e * c),
                    Basis::Z => 1.0 - 0.5 * z,
                };
            }
        });
    }

    /// Model probabilities and their partial derivatives with respect to
    /// `(δf, Γ₁, Γφ)`.
    pub fn evaluate_with_jacobian(&self, theta: &[f64; 3], out: &mut [f64], jac: &mut [[f64; 3]]) {
        let nb = self.bases.len();
        self.for_each_tau(theta, |k, tau, e, z, c, s| {
            let te = tau * e;
            for (j, b) in self.bases.iter().enumerate() {
                let i = k * nb + j;
                match b {
                    Basis::X => {
                        out[i] = 0.5 * (1.0 - e * s);
                        jac[i] = [-PI * te * c, 0.25 * te * s, 0.5 * te * s];
                    }
                    Basis::Y => {
                        out[i] = 0.5 * (1.0 - e * c);
                        jac[i] = [PI * te * s, 0.25 * te * c, 0.5 * te * c];
                    }
                    Basis::Z => {
                        out[i] = 1.0 - 0.5 * z;
                        jac[i] = [0.0, 0.5 * tau * z, 0.0];
                    }
                }
            }
        });
    }

    /// Root-mean-square of `(τ/τ_max)·E(τ)` over the X/Y circuits: how much
    /// phase information survives the decay.
    pub fn delta_f_sensitivity(&self, theta: &[f64; 3]) -> f64 {
        let n_xy = self.bases.iter().filter(|b| **b != Basis::Z).count();
        let tau_max = self.taus.last().copied().unwrap_or(0.0);
        if n_xy == 0 || tau_max <= 0.0 {
            return 0.0;
        }
        let mut acc = 0.0;
        self.for_each_tau(theta, |_, tau, e, _, _, _| acc += (tau / tau_max * e).powi(2));
        (acc / self.taus.len() as f64).sqrt()
    }
}

/// Search box for the three parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub delta_f: [f64; 2],
    pub gamma_1: [f64; 2],
    pub gamma_phi: [f64; 2],
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            delta_f: [-200e3, 200e3],
            gamma_1: [0.0, 1e6],
            gamma_phi: [0.0, 1e6],
        }
    }
}

impl Bounds {
    fn lo(&self) -> [f64; 3] {
        [self.delta_f[0], self.gamma_1[0], self.gamma_phi[0]]
    }

    fn hi(&self) -> [f64; 3] {
        [self.delta_f[1], self.gamma_1[1], self.gamma_phi[1]]
    }

    fn clamp(&self, x: &mut [f64; 3]) {
        let (lo, hi) = (self.lo(), self.hi());
        for i in 0..3 {
            x[i] = x[i].clamp(lo[i], hi[i]);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Unweighted,
    /// Weight each circuit by its effective sample count.
    EffectiveCount,
}

/// How bootstrap replicas are refitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapRefit {
    /// Levenberg–Marquardt started from the slice's fitted parameters.
    Local,
    /// Full differential evolution plus polish for every replica.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub bounds: Bounds,
    pub population: usize,
    pub mutation: f64,
    pub crossover: f64,
    pub max_generations: usize,
    /// Relative spread of population costs at which evolution stops.
    pub tolerance: f64,
    pub seed: u64,
    pub n_bootstrap: usize,
    pub bootstrap_refit: BootstrapRefit,
    /// Seed each slice's population with the previous slice's solution.
    pub warm_start: bool,
    pub weighting: Weighting,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            bounds: Bounds::default(),
            population: 30,
            mutation: 0.7,
            crossover: 0.9,
            max_generations: 500,
            tolerance: 1e-8,
            seed: 0,
            n_bootstrap: 100,
            bootstrap_refit: BootstrapRefit::Local,
            warm_start: true,
            weighting: Weighting::Unweighted,
        }
    }
}

impl FitConfig {
    pub fn validate(&self, model: &ProbabilityModel) -> Result<()> {
        let b = &self.bounds;
        for (name, [lo, hi]) in [("delta_f", b.delta_f), ("gamma_1", b.gamma_1), ("gamma_phi", b.gamma_phi)] {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::config(format!("{name} bounds must be finite with lo < hi")));
            }
        }
        if b.gamma_1[0] < 0.0 || b.gamma_phi[0] < 0.0 {
            return Err(Error::config("decay-rate bounds must be non-negative"));
        }
        let alias = model.aliasing_limit();
        if b.delta_f[0].abs().max(b.delta_f[1].abs()) > alias {
            return Err(Error::config(format!(
                "delta_f bounds exceed the aliasing limit {alias:.0} Hz of the idle-time grid"
            )));
        }
        if self.population < 4 {
            return Err(Error::config("population must be at least 4"));
        }
        if !(0.0..=2.0).contains(&self.mutation) || !(0.0..=1.0).contains(&self.crossover) {
            return Err(Error::config("mutation must lie in [0, 2] and crossover in [0, 1]"));
        }
        if self.max_generations == 0 || !(self.tolerance >= 0.0) {
            return Err(Error::config("max_generations must be positive and tolerance non-negative"));
        }
        let per_tau = model.taus().len();
        if per_tau < 3 {
            return Err(Error::config(format!("need at least 3 idle times per basis, got {per_tau}")));
        }
        Ok(())
    }
}

/// Outcome of a differential-evolution run.
#[derive(Debug, Clone, Copy)]
pub struct DeResult {
    pub x: [f64; 3],
    pub cost: f64,
    pub generations: usize,
    pub converged: bool,
}

/// Minimize `f` over the box `[lo, hi]` with best/1/bin differential
/// evolution and immediate population updates.
pub fn differential_evolution(
    mut f: impl FnMut(&[f64; 3]) -> f64,
    lo: [f64; 3],
    hi: [f64; 3],
    config: &FitConfig,
    rng: &mut ChaCha8Rng,
    warm: Option<[f64; 3]>,
) -> DeResult {
    let np = config.population;
    let to_x = |u: &[f64; 3]| -> [f64; 3] { std::array::from_fn(|i| lo[i] + u[i] * (hi[i] - lo[i])) };

    // Latin hypercube: one point per stratum in every dimension.
    let mut pop = vec![[0.0; 3]; np];
    for d in 0..3 {
        let mut strata: Vec<usize> = (0..np).collect();
        for i in (1..np).rev() {
            strata.swap(i, rng.random_range(0..=i));
        }
        for (m, s) in strata.into_iter().enumerate() {
            pop[m][d] = (s as f64 + rng.random::<f64>()) / np as f64;
        }
    }
    if let Some(w) = warm {
        pop[0] = std::array::from_fn(|i| ((w[i] - lo[i]) / (hi[i] - lo[i])).clamp(0.0, 1.0));
    }
    let mut cost: Vec<f64> = pop.iter().map(|u| f(&to_x(u))).collect();
    let mut best = argmin(&cost);

    let converged = |cost: &[f64]| {
        let m = stats::mean(cost);
        let sd = cost.iter().map(|c| (c - m).powi(2)).sum::<f64>() / cost.len() as f64;
        sd.sqrt() <= config.tolerance * m.abs()
    };
    let mut generations = 0;
    let mut done = converged(&cost);
    while !done && generations < config.max_generations {
        generations += 1;
        for i in 0..np {
            let (r1, r2) = loop {
                let a = rng.random_range(0..np);
                let b = rng.random_range(0..np);
                if a != b && a != i && b != i {
                    break (a, b);
                }
            };
            let forced = rng.random_range(0..3);
            let mut trial = pop[i];
            for d in 0..3 {
                if d == forced || rng.random::<f64>() < config.crossover {
                    let v = pop[best][d] + config.mutation * (pop[r1][d] - pop[r2][d]);
                    trial[d] = if (0.0..=1.0).contains(&v) { v } else { rng.random() };
                }
            }
            let c = f(&to_x(&trial));
            if c <= cost[i] {
                pop[i] = trial;
                cost[i] = c;
                if c < cost[best] {
                    best = i;
                }
            }
        }
        done = converged(&cost);
    }
    DeResult {
        x: to_x(&pop[best]),
        cost: cost[best],
        generations,
        converged: done,
    }
}

fn argmin(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, &x)| if x < bv { (i, x) } else { (bi, bv) })
        .0
}

/// Scratch buffers for one slice.
struct Workspace {
    model_p: Vec<f64>,
    jac: Vec<[f64; 3]>,
}

impl Workspace {
    fn new(n: usize) -> Self {
        Self {
            model_p: vec![0.0; n],
            jac: vec![[0.0; 3]; n],
        }
    }
}

fn cost(model: &ProbabilityModel, obs: &[f64], w: &[f64], theta: &[f64; 3], buf: &mut [f64]) -> f64 {
    model.evaluate(theta, buf);
    obs.iter().zip(buf.iter()).zip(w).map(|((o, m), w)| w * (o - m).powi(2)).sum()
}

/// Bounded Levenberg–Marquardt with Marquardt diagonal scaling; parameters are
/// projected back into the box after each step.
fn levenberg_marquardt(
    model: &ProbabilityModel,
    obs: &[f64],
    w: &[f64],
    start: [f64; 3],
    bounds: &Bounds,
    ws: &mut Workspace,
) -> ([f64; 3], f64) {
    let mut x = start;
    bounds.clamp(&mut x);
    let mut lambda = 1e-3;
    let mut current = f64::NAN;
    for _ in 0..100 {
        model.evaluate_with_jacobian(&x, &mut ws.model_p, &mut ws.jac);
        let mut h = Matrix3::<f64>::zeros();
        let mut g = Vector3::<f64>::zeros();
        current = 0.0;
        for i in 0..obs.len() {
            let r = obs[i] - ws.model_p[i];
            current += w[i] * r * r;
            let j = Vector3::from(ws.jac[i]);
            g += j * (w[i] * r);
            h += j * j.transpose() * w[i];
        }
        let floor = 1e-12 * h.diagonal().max().max(1e-300);
        let mut improved = false;
        for _ in 0..12 {
            let mut a = h;
            for d in 0..3 {
                a[(d, d)] += lambda * h[(d, d)].max(floor);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&g)) else {
                lambda *= 4.0;
                continue;
            };
            let mut trial = [x[0] + step[0], x[1] + step[1], x[2] + step[2]];
            bounds.clamp(&mut trial);
            let c = cost(model, obs, w, &trial, &mut ws.model_p);
            if c < current {
                let gain = current - c;
                x = trial;
                lambda = (lambda / 3.0).max(1e-12);
                improved = gain > 1e-13 * current + 1e-300;
                current = c;
                break;
            }
            lambda *= 4.0;
        }
        if !improved {
            break;
        }
    }
    (x, current)
}

/// Result of fitting one time slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceFit {
    pub params: NoiseParams,
    /// Observed minus fitted probability per circuit.
    pub residuals: Vec<f64>,
    pub cost: f64,
    pub generations: usize,
    /// Evolution hit the generation cap before converging.
    pub degraded: bool,
    /// Decay wipes out the X/Y oscillation, so δf is poorly identified.
    pub low_sensitivity: bool,
}

fn slice_weights(config: &FitConfig, n_eff: &[f64]) -> Vec<f64> {
    match config.weighting {
        Weighting::Unweighted => vec![1.0; n_eff.len()],
        Weighting::EffectiveCount => n_eff.to_vec(),
    }
}

fn fit_with(
    model: &ProbabilityModel,
    p: &[f64],
    w: &[f64],
    config: &FitConfig,
    rng: &mut ChaCha8Rng,
    warm: Option<[f64; 3]>,
    ws: &mut Workspace,
) -> ([f64; 3], f64, DeResult) {
    let b = &config.bounds;
    let mut buf = vec![0.0; p.len()];
    let de = differential_evolution(|x| cost(model, p, w, x, &mut buf), b.lo(), b.hi(), config, rng, warm);
    let (x, c) = levenberg_marquardt(model, p, w, de.x, b, ws);
    if c <= de.cost {
        (x, c, de)
    } else {
        (de.x, de.cost, de)
    }
}

/// Fit the model to one slice of probabilities.
pub fn fit_slice(
    model: &ProbabilityModel,
    p: &[f64],
    n_eff: &[f64],
    config: &FitConfig,
    rng: &mut ChaCha8Rng,
    warm: Option<[f64; 3]>,
) -> Result<SliceFit> {
    let nc = model.n_circuits();
    if p.len() != nc || n_eff.len() != nc {
        return Err(Error::data(format!("slice has {} values, model expects {nc}", p.len())));
    }
    if n_eff.iter().any(|n| !(*n > 0.0)) {
        return Err(Error::data("effective sample counts must be positive"));
    }
    let w = slice_weights(config, n_eff);
    let mut ws = Workspace::new(nc);
    Ok(finish_slice(model, p, &w, config, rng, warm, &mut ws))
}

fn finish_slice(
    model: &ProbabilityModel,
    p: &[f64],
    w: &[f64],
    config: &FitConfig,
    rng: &mut ChaCha8Rng,
    warm: Option<[f64; 3]>,
    ws: &mut Workspace,
) -> SliceFit {
    let (x, c, de) = fit_with(model, p, w, config, rng, warm, ws);
    model.evaluate(&x, &mut ws.model_p);
    let residuals = p.iter().zip(&ws.model_p).map(|(o, m)| o - m).collect();
    SliceFit {
        params: NoiseParams::from_array(x),
        residuals,
        cost: c,
        generations: de.generations,
        degraded: !de.converged,
        low_sensitivity: model.delta_f_sensitivity(&x) < LOW_SENSITIVITY,
    }
}

/// Bootstrap standard errors of `(δf, Γ₁, Γφ)` for a fitted slice.
pub fn bootstrap_uncertainty(
    model: &ProbabilityModel,
    p: &[f64],
    n_eff: &[f64],
    fit: &SliceFit,
    config: &FitConfig,
    rng: &mut ChaCha8Rng,
) -> Result<[f64; 3]> {
    let w = slice_weights(config, n_eff);
    let mut ws = Workspace::new(model.n_circuits());
    bootstrap_with(model, p, n_eff, &w, fit, config, rng, &mut ws)
}

#[allow(clippy::too_many_arguments)]
fn bootstrap_with(
    model: &ProbabilityModel,
    p: &[f64],
    n_eff: &[f64],
    w: &[f64],
    fit: &SliceFit,
    config: &FitConfig,
    rng: &mut ChaCha8Rng,
    ws: &mut Workspace,
) -> Result<[f64; 3]> {
    if fit.residuals.is_empty() {
        return Err(Error::data("bootstrap needs a non-empty residual pool"));
    }
    if let Some(n) = n_eff.iter().find(|n| **n < 1.0) {
        return Err(Error::data(format!("effective sample count {n} is below 1")));
    }
    if config.n_bootstrap < 2 {
        return Ok([0.0; 3]);
    }
    let trials: Vec<u64> = n_eff.iter().map(|n| n.round() as u64).collect();
    let start = fit.params.as_array();
    let mut draws = vec![Vec::with_capacity(config.n_bootstrap); 3];
    let mut resampled = vec![0.0; p.len()];
    for _ in 0..config.n_bootstrap {
        for c in 0..p.len() {
            let k = Binomial::new(trials[c], p[c].clamp(0.0, 1.0))
                .expect("probability clamped to [0, 1]")
                .sample(rng);
            let eps = fit.residuals[rng.random_range(0..fit.residuals.len())];
            resampled[c] = (k as f64 / trials[c] as f64 + eps).clamp(0.0, 1.0);
        }
        let x = match config.bootstrap_refit {
            BootstrapRefit::Local => levenberg_marquardt(model, &resampled, w, start, &config.bounds, ws).0,
            BootstrapRefit::Global => fit_with(model, &resampled, w, config, rng, Some(start), ws).0,
        };
        for d in 0..3 {
            draws[d].push(x[d]);
        }
    }
    Ok(std::array::from_fn(|d| stats::std_dev(&draws[d])))
}

/// Per-slice quality flags.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitFlags {
    pub degraded: bool,
    pub low_sensitivity: bool,
    /// The averaging window was truncated at a block edge.
    pub edge: bool,
}

impl FitFlags {
    const NAMES: [&'static str; 3] = ["degraded", "low_sensitivity", "edge"];

    fn bits(&self) -> [bool; 3] {
        [self.degraded, self.low_sensitivity, self.edge]
    }

    /// Parse the `|`-joined form written by `Display`; `-` means none.
    pub fn parse(s: &str) -> Option<Self> {
        let mut f = Self::default();
        if s == "-" {
            return Some(f);
        }
        for part in s.split('|') {
            match part {
                "degraded" => f.degraded = true,
                "low_sensitivity" => f.low_sensitivity = true,
                "edge" => f.edge = true,
                _ => return None,
            }
        }
        Some(f)
    }
}

impl std::fmt::Display for FitFlags {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let set: Vec<&str> = Self::NAMES.iter().zip(self.bits()).filter(|(_, b)| *b).map(|(n, _)| *n).collect();
        if set.is_empty() {
            f.write_str("-")
        } else {
            f.write_str(&set.join("|"))
        }
    }
}

/// Fitted parameters at one repetition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub t: f64,
    pub delta_f: f64,
    pub sigma_delta_f: f64,
    pub gamma_1: f64,
    pub sigma_gamma_1: f64,
    pub gamma_phi: f64,
    pub sigma_gamma_phi: f64,
    pub residual_norm: f64,
    pub flags: FitFlags,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseTrace {
    pub points: Vec<TracePoint>,
}

impl NoiseTrace {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn column(&self, f: impl Fn(&TracePoint) -> f64) -> Vec<f64> {
        self.points.iter().map(f).collect()
    }

    pub fn times(&self) -> Vec<f64> {
        self.column(|p| p.t)
    }
}

/// Fit every slice of `series` and attach bootstrap errors.
pub fn fit_series(series: &ProbabilitySeries, model: &ProbabilityModel, times: &[f64], config: &FitConfig) -> Result<NoiseTrace> {
    config.validate(model)?;
    let n = series.len();
    let nc = model.n_circuits();
    if series.n_circuits() != nc {
        return Err(Error::data(format!(
            "series has {} circuits per repetition, plan expects {nc}",
            series.n_circuits()
        )));
    }
    if times.len() != n {
        return Err(Error::data(format!("{} timestamps for {n} repetitions", times.len())));
    }
    let chains: Vec<Result<Vec<TracePoint>>> = (0..n)
        .step_by(WARM_CHAIN)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|start| {
            let mut ws = Workspace::new(nc);
            let mut warm = None;
            let mut out = Vec::with_capacity(WARM_CHAIN);
            for r in start..(start + WARM_CHAIN).min(n) {
                let (p, n_eff) = (series.p(r), series.n_eff(r));
                let w = slice_weights(config, n_eff);
                let mut opt = rng::stream(config.seed, Purpose::Optimizer, r as u64);
                let fit = finish_slice(model, p, &w, config, &mut opt, warm, &mut ws);
                let mut boot = rng::stream(config.seed, Purpose::Bootstrap, r as u64);
                let sigma = bootstrap_with(model, p, n_eff, &w, &fit, config, &mut boot, &mut ws)
                    .map_err(|e| Error::data(format!("repetition {r}: {e}")))?;
                if config.warm_start {
                    warm = Some(fit.params.as_array());
                }
                out.push(TracePoint {
                    t: times[r],
                    delta_f: fit.params.delta_f,
                    sigma_delta_f: sigma[0],
                    gamma_1: fit.params.gamma_1,
                    sigma_gamma_1: sigma[1],
                    gamma_phi: fit.params.gamma_phi,
                    sigma_gamma_phi: sigma[2],
                    residual_norm: fit.cost.sqrt(),
                    flags: FitFlags {
                        degraded: fit.degraded,
                        low_sensitivity: fit.low_sensitivity,
                        edge: series.edge[r],
                    },
                });
            }
            Ok(out)
        })
        .collect();
    let mut points = Vec::with_capacity(n);
    for c in chains {
        points.extend(c?);
    }
    Ok(NoiseTrace { points })
}

/// Inverse-variance weighted mean and its standard error.
///
/// Points with zero uncertainty dominate: if any exist, their plain mean is
/// returned with zero error. If every sigma is zero the unweighted mean and
/// its sample standard error are returned.
pub fn weighted_mean(values: &[f64], sigmas: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() || values.len() != sigmas.len() {
        return Err(Error::data("weighted mean needs equal-length, non-empty inputs"));
    }
    if sigmas.iter().any(|s| !(*s >= 0.0)) {
        return Err(Error::data("uncertainties must be non-negative"));
    }
    let exact: Vec<f64> = values.iter().zip(sigmas).filter(|(_, s)| **s == 0.0).map(|(v, _)| *v).collect();
    if exact.len() == values.len() {
        let se = if values.len() > 1 {
            stats::std_dev(values) / (values.len() as f64).sqrt()
        } else {
            0.0
        };
        return Ok((stats::mean(values), se));
    }
    if !exact.is_empty() {
        return Ok((stats::mean(&exact), 0.0));
    }
    let (mut sw, mut swx) = (0.0, 0.0);
    for (v, s) in values.iter().zip(sigmas) {
        let w = 1.0 / (s * s);
        sw += w;
        swx += w * v;
    }
    Ok((swx / sw, 1.0 / sw.sqrt()))
}
