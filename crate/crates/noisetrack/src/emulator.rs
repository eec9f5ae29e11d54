//! Synthetic measurement streams drawn from the Markovian single-qubit noise
//! model.
//!
//! One repetition executes every `(τ, basis)` circuit once, in the order
//! τ₁X, τ₁Y, τ₁Z, τ₂X, … Each circuit returns `B = 1` when the qubit is found
//! in the state it was prepared in, with probability given by
//! [`closed_form_probability`] evaluated at the parameters of that repetition.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::{self, Purpose};
use crate::{Error, Result};

/// Measurement basis of the final readout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Basis {
    X,
    Y,
    Z,
}

impl Basis {
    pub const ALL: [Basis; 3] = [Basis::X, Basis::Y, Basis::Z];

    pub fn label(self) -> &'static str {
        match self {
            Basis::X => "X",
            Basis::Y => "Y",
            Basis::Z => "Z",
        }
    }

    pub fn parse(s: &str) -> Option<Basis> {
        match s.trim() {
            "X" | "x" => Some(Basis::X),
            "Y" | "y" => Some(Basis::Y),
            "Z" | "z" => Some(Basis::Z),
            _ => None,
        }
    }
}

impl std::fmt::Display for Basis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Noise parameters at one repetition. Rates are plain inverse times
/// (1 kHz = 10³ s⁻¹, no 2π).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    /// Qubit frequency detuning, Hz.
    pub delta_f: f64,
    /// Relaxation rate, s⁻¹.
    pub gamma_1: f64,
    /// Pure dephasing rate, s⁻¹.
    pub gamma_phi: f64,
}

impl NoiseParams {
    pub fn new(delta_f: f64, gamma_1: f64, gamma_phi: f64) -> Self {
        Self {
            delta_f,
            gamma_1,
            gamma_phi,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta_f.is_finite() && self.gamma_1.is_finite() && self.gamma_phi.is_finite()) {
            return Err(Error::config(format!("non-finite noise parameters {self:?}")));
        }
        if self.gamma_1 < 0.0 || self.gamma_phi < 0.0 {
            return Err(Error::config(format!("negative decay rate in {self:?}")));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.delta_f, self.gamma_1, self.gamma_phi]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

/// Probability of reading back the prepared state after idling for `tau`
/// seconds and measuring in `basis`.
pub fn closed_form_probability(params: &NoiseParams, tau: f64, basis: Basis) -> f64 {
    let p = match basis {
        Basis::X | Basis::Y => {
            let envelope = (-(0.5 * params.gamma_1 + params.gamma_phi) * tau).exp();
            let phase = TAU * params.delta_f * tau;
            let osc = if basis == Basis::X { phase.sin() } else { phase.cos() };
            0.5 * (1.0 - envelope * osc)
        }
        Basis::Z => 1.0 - 0.5 * (-params.gamma_1 * tau).exp(),
    };
    p.clamp(0.0, 1.0)
}

/// Wall-clock metadata reported for one experiment script.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptTiming {
    pub start: f64,
    pub duration: f64,
}

/// Layout and timing of the measurement campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    /// Idle durations τ₁ < τ₂ < … in seconds.
    pub idle_times: Vec<f64>,
    /// Bases measured for every idle time, in execution order.
    pub bases: Vec<Basis>,
    /// Repetitions per script (N_s).
    pub n_repetitions: usize,
    pub n_scripts: usize,
    /// Per-circuit overhead (gates, readout, reset), seconds.
    pub t_other: f64,
    /// Reported start time and duration of every script, if known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scripts: Option<Vec<ScriptTiming>>,
}

impl ExperimentPlan {
    /// Readout 5.913 µs plus reset 6.304 µs, rounded.
    pub const DEFAULT_T_OTHER: f64 = 12.3e-6;

    /// `n_tau` idle times spread uniformly over `[0, tau_max]`, all three bases.
    pub fn uniform(n_tau: usize, tau_max: f64, n_repetitions: usize, n_scripts: usize) -> Self {
        let idle_times = (0..n_tau)
            .map(|i| {
                if n_tau == 1 {
                    0.0
                } else {
                    tau_max * i as f64 / (n_tau - 1) as f64
                }
            })
            .collect();
        Self {
            idle_times,
            bases: Basis::ALL.to_vec(),
            n_repetitions,
            n_scripts,
            t_other: Self::DEFAULT_T_OTHER,
            scripts: None,
        }
    }

    /// The hardware campaign layout: 33 idle times up to 68.3 µs,
    /// 100 scripts of 20 000 repetitions.
    pub fn hardware_layout() -> Self {
        Self::uniform(33, 68.3e-6, 20_000, 100)
    }

    pub fn validate(&self) -> Result<()> {
        if self.idle_times.is_empty() {
            return Err(Error::config("plan has no idle times"));
        }
        if self.idle_times[0] < 0.0 || !self.idle_times.iter().all(|t| t.is_finite()) {
            return Err(Error::config("idle times must be finite and non-negative"));
        }
        if self.idle_times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("idle times must be strictly increasing"));
        }
        if self.bases.is_empty() {
            return Err(Error::config("plan has no measurement bases"));
        }
        for (i, b) in self.bases.iter().enumerate() {
            if self.bases[..i].contains(b) {
                return Err(Error::config(format!("basis {b} listed twice")));
            }
        }
        if self.n_repetitions == 0 || self.n_scripts == 0 {
            return Err(Error::config("plan needs at least one script and one repetition"));
        }
        if !(self.t_other >= 0.0) {
            return Err(Error::config("t_other must be non-negative"));
        }
        if !(self.sequence_duration() > 0.0) {
            return Err(Error::config("sequence duration must be positive"));
        }
        if let Some(s) = &self.scripts {
            if s.len() != self.n_scripts {
                return Err(Error::config(format!(
                    "{} script timings given for {} scripts",
                    s.len(),
                    self.n_scripts
                )));
            }
            if s.iter().any(|t| !(t.duration > 0.0) || !t.start.is_finite()) {
                return Err(Error::config("script durations must be positive"));
            }
        }
        Ok(())
    }

    /// Circuits per repetition, N_c.
    pub fn n_circuits(&self) -> usize {
        self.idle_times.len() * self.bases.len()
    }

    /// `(tau_index, basis)` of circuit `c` within a repetition.
    pub fn circuit(&self, c: usize) -> (usize, Basis) {
        let nb = self.bases.len();
        (c / nb, self.bases[c % nb])
    }

    /// Idle time of circuit `c`.
    pub fn circuit_tau(&self, c: usize) -> f64 {
        self.idle_times[c / self.bases.len()]
    }

    /// Duration of one repetition, δt = N_b·Σᵢ(τᵢ + t_other).
    pub fn sequence_duration(&self) -> f64 {
        self.bases.len() as f64 * self.idle_times.iter().map(|t| t + self.t_other).sum::<f64>()
    }

    pub fn total_repetitions(&self) -> usize {
        self.n_repetitions * self.n_scripts
    }

    /// Largest detuning that is not aliased on the idle-time grid.
    pub fn aliasing_limit(&self) -> f64 {
        let min_step = self
            .idle_times
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min);
        0.5 / min_step
    }
}

/// Repetition start times and whether they had to be synthesized.
#[derive(Debug, Clone, PartialEq)]
pub struct Timestamps {
    pub t: Vec<f64>,
    /// True when script metadata was missing and uniform spacing was used.
    pub uniform_fallback: bool,
}

/// Start time of every repetition relative to the first script.
///
/// With script metadata, repetition `k` of script `j` sits at
/// `(T_j − T_0) + k·D_j/N_s`. Without it, repetitions are spaced by the
/// nominal sequence duration and the fallback is flagged.
pub fn reconstruct_timestamps(plan: &ExperimentPlan) -> Timestamps {
    let ns = plan.n_repetitions;
    match plan.scripts.as_ref().filter(|s| s.len() == plan.n_scripts && !s.is_empty()) {
        Some(scripts) => {
            let t0 = scripts[0].start;
            let mut t = Vec::with_capacity(plan.total_repetitions());
            for s in scripts {
                let step = s.duration / ns as f64;
                t.extend((0..ns).map(|k| (s.start - t0) + k as f64 * step));
            }
            Timestamps {
                t,
                uniform_fallback: false,
            }
        }
        None => {
            log::debug!("script timing metadata missing; assuming uniform repetition spacing");
            let dt = plan.sequence_duration();
            Timestamps {
                t: (0..plan.total_repetitions()).map(|r| r as f64 * dt).collect(),
                uniform_fallback: true,
            }
        }
    }
}

/// How a telegraph process switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RtnMode {
    /// Flip with probability `q` between consecutive steps.
    SwitchProbability { q: f64 },
    /// Continuous-time Markov jumps: `nu_01` leaves the lower state (−1),
    /// `nu_10` leaves the upper state (+1). Units s⁻¹.
    PoissonRates { nu_01: f64, nu_10: f64 },
}

/// One two-state telegraph process contributing `s·amplitude/2 + centre_offset`
/// to the detuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RtnProcessSpec {
    pub mode: RtnMode,
    /// Peak-to-peak amplitude f_Δ, Hz.
    pub amplitude: f64,
    #[serde(default)]
    pub centre_offset: f64,
    pub seed: u64,
}

impl RtnProcessSpec {
    pub fn validate(&self) -> Result<()> {
        match self.mode {
            RtnMode::SwitchProbability { q } => {
                if !(0.0..=1.0).contains(&q) {
                    return Err(Error::config(format!("switch probability {q} outside [0, 1]")));
                }
            }
            RtnMode::PoissonRates { nu_01, nu_10 } => {
                if !(nu_01 >= 0.0 && nu_10 >= 0.0 && nu_01.is_finite() && nu_10.is_finite()) {
                    return Err(Error::config(format!(
                        "switching rates must be finite and non-negative, got {nu_01}, {nu_10}"
                    )));
                }
            }
        }
        if !self.amplitude.is_finite() || !self.centre_offset.is_finite() {
            return Err(Error::config("telegraph amplitude and offset must be finite"));
        }
        Ok(())
    }

    /// Switch times of the continuous-time process over `[0, t_end]`,
    /// together with the state at t = 0. Rate mode only.
    pub fn switch_times(&self, t_end: f64) -> Result<(i8, Vec<f64>)> {
        self.validate()?;
        let RtnMode::PoissonRates { nu_01, nu_10 } = self.mode else {
            return Err(Error::config("switch times require the Poisson-rate mode"));
        };
        let mut rng = rng::stream(self.seed, Purpose::Telegraph, 0);
        let total = nu_01 + nu_10;
        let p_up = if total > 0.0 { nu_01 / total } else { 0.0 };
        let initial: i8 = if rng.random::<f64>() < p_up { 1 } else { -1 };
        let mut state = initial;
        let mut t = 0.0;
        let mut switches = Vec::new();
        loop {
            let rate = if state < 0 { nu_01 } else { nu_10 };
            if rate <= 0.0 {
                break;
            }
            t += Exp::new(rate).expect("positive rate").sample(&mut rng);
            if t > t_end {
                break;
            }
            switches.push(t);
            state = -state;
        }
        Ok((initial, switches))
    }

    /// State at each of the given (non-decreasing) times. The probability
    /// mode treats every entry as one step and ignores the values.
    pub fn states_at(&self, times: &[f64]) -> Result<Vec<i8>> {
        self.validate()?;
        if times.is_empty() {
            return Ok(Vec::new());
        }
        match self.mode {
            RtnMode::SwitchProbability { q } => {
                let mut rng = rng::stream(self.seed, Purpose::Telegraph, 0);
                let mut s: i8 = if rng.random::<bool>() { 1 } else { -1 };
                let mut out = Vec::with_capacity(times.len());
                out.push(s);
                for _ in 1..times.len() {
                    if rng.random::<f64>() < q {
                        s = -s;
                    }
                    out.push(s);
                }
                Ok(out)
            }
            RtnMode::PoissonRates { .. } => {
                let t0 = times[0];
                let t_end = times[times.len() - 1] - t0;
                let (initial, switches) = self.switch_times(t_end)?;
                let mut out = Vec::with_capacity(times.len());
                let mut s = initial;
                let mut next = 0;
                for &t in times {
                    while next < switches.len() && switches[next] <= t - t0 {
                        s = -s;
                        next += 1;
                    }
                    out.push(s);
                }
                Ok(out)
            }
        }
    }
}

/// `n_steps` states spaced by `step` seconds (the spacing only matters in
/// rate mode).
pub fn generate_rtn_states(spec: &RtnProcessSpec, n_steps: usize, step: f64) -> Result<Vec<i8>> {
    if n_steps == 0 {
        return Err(Error::config("n_steps must be at least 1"));
    }
    let times: Vec<f64> = (0..n_steps).map(|k| k as f64 * step).collect();
    spec.states_at(&times)
}

/// Detuning built from nested telegraph processes on top of constant decay
/// rates: δf = centre + Σₙ (offsetₙ + sₙ·f_Δₙ/2).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtnHierarchy {
    pub centre: f64,
    pub gamma_1: f64,
    pub gamma_phi: f64,
    pub levels: Vec<RtnProcessSpec>,
}

impl RtnHierarchy {
    /// Composite detuning and per-level states at the given times.
    pub fn detuning(&self, times: &[f64]) -> Result<(Vec<f64>, Vec<Vec<i8>>)> {
        let states: Vec<Vec<i8>> = self
            .levels
            .iter()
            .map(|l| l.states_at(times))
            .collect::<Result<_>>()?;
        let df = (0..times.len())
            .map(|k| {
                self.centre
                    + self
                        .levels
                        .iter()
                        .zip(&states)
                        .map(|(l, s)| l.centre_offset + f64::from(s[k]) * l.amplitude / 2.0)
                        .sum::<f64>()
            })
            .collect();
        Ok((df, states))
    }
}

/// A parameter change taking effect at a given repetition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleStep {
    pub from_repetition: usize,
    pub params: NoiseParams,
}

/// Ground-truth noise parameters for every repetition. Parameters only
/// change between repetitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSchedule {
    Constant { params: NoiseParams },
    Piecewise { steps: Vec<ScheduleStep> },
    PerRepetition { params: Vec<NoiseParams> },
    Telegraph { hierarchy: RtnHierarchy },
}

/// Realized schedule: parameters per repetition and, for telegraph
/// schedules, the hidden states of every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub params: Vec<NoiseParams>,
    pub states: Vec<Vec<i8>>,
}

impl NoiseSchedule {
    /// Parameters at each repetition start time in `times`.
    pub fn realize(&self, times: &[f64]) -> Result<GroundTruth> {
        let n = times.len();
        let span = |a: usize, b: usize| {
            let ta = times.get(a).copied().unwrap_or(f64::NAN);
            let tb = times.get(b.saturating_sub(1)).copied().unwrap_or(f64::NAN);
            format!("repetitions {a}..{b} (t = {ta:.6} s to {tb:.6} s)")
        };
        let params = match self {
            NoiseSchedule::Constant { params } => {
                params.validate()?;
                vec![*params; n]
            }
            NoiseSchedule::Piecewise { steps } => {
                if steps.is_empty() {
                    return Err(Error::config(format!("empty schedule leaves {} uncovered", span(0, n))));
                }
                if steps[0].from_repetition > 0 {
                    return Err(Error::config(format!(
                        "schedule gap: {} not covered",
                        span(0, steps[0].from_repetition.min(n))
                    )));
                }
                if steps.windows(2).any(|w| w[1].from_repetition <= w[0].from_repetition) {
                    return Err(Error::config("schedule steps must have increasing start repetitions"));
                }
                let mut out = Vec::with_capacity(n);
                for (i, st) in steps.iter().enumerate() {
                    st.params.validate()?;
                    let end = steps.get(i + 1).map_or(n, |s| s.from_repetition.min(n));
                    while out.len() < end {
                        out.push(st.params);
                    }
                }
                out
            }
            NoiseSchedule::PerRepetition { params } => {
                if params.len() < n {
                    return Err(Error::config(format!(
                        "schedule gap: {} not covered",
                        span(params.len(), n)
                    )));
                }
                for p in params {
                    p.validate()?;
                }
                params[..n].to_vec()
            }
            NoiseSchedule::Telegraph { hierarchy } => {
                let (df, states) = hierarchy.detuning(times)?;
                let params: Vec<NoiseParams> = df
                    .into_iter()
                    .map(|d| NoiseParams::new(d, hierarchy.gamma_1, hierarchy.gamma_phi))
                    .collect();
                if let Some(p) = params.first() {
                    p.validate()?;
                }
                return Ok(GroundTruth { params, states });
            }
        };
        Ok(GroundTruth {
            params,
            states: Vec::new(),
        })
    }
}

/// Marker stored for a circuit execution that produced no record.
pub const MISSING: u8 = u8::MAX;

/// Dense outcome table: one row per repetition, one column per circuit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcomes {
    n_repetitions: usize,
    n_circuits: usize,
    bits: Vec<u8>,
}

impl Outcomes {
    /// Table with every entry marked [`MISSING`].
    pub fn empty(n_repetitions: usize, n_circuits: usize) -> Self {
        Self {
            n_repetitions,
            n_circuits,
            bits: vec![MISSING; n_repetitions * n_circuits],
        }
    }

    pub fn from_bits(n_repetitions: usize, n_circuits: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != n_repetitions * n_circuits {
            return Err(Error::data(format!(
                "outcome table of {} entries does not match {n_repetitions}×{n_circuits}",
                bits.len()
            )));
        }
        if let Some(b) = bits.iter().find(|&&b| b > 1 && b != MISSING) {
            return Err(Error::data(format!("outcome {b} is not a bit")));
        }
        Ok(Self {
            n_repetitions,
            n_circuits,
            bits,
        })
    }

    pub fn n_repetitions(&self) -> usize {
        self.n_repetitions
    }

    pub fn n_circuits(&self) -> usize {
        self.n_circuits
    }

    /// Outcome of circuit `c` in repetition `r`, or [`MISSING`].
    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.bits[r * self.n_circuits + c]
    }

    pub fn set(&mut self, r: usize, c: usize, bit: u8) {
        self.bits[r * self.n_circuits + c] = bit;
    }

    pub fn row(&self, r: usize) -> &[u8] {
        &self.bits[r * self.n_circuits..(r + 1) * self.n_circuits]
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.bits
    }

    pub fn missing_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == MISSING).count()
    }
}

/// One binary shot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementRecord {
    pub script: usize,
    pub repetition: usize,
    pub tau_index: usize,
    pub basis: Basis,
    pub outcome: u8,
    pub time: f64,
}

/// Output of [`emulate_experiment`].
#[derive(Debug, Clone)]
pub struct Emulation {
    pub plan: ExperimentPlan,
    pub times: Timestamps,
    pub outcomes: Outcomes,
    pub truth: GroundTruth,
}

impl Emulation {
    /// Records in execution order.
    pub fn records(&self) -> impl Iterator<Item = MeasurementRecord> + '_ {
        let nc = self.plan.n_circuits();
        let ns = self.plan.n_repetitions;
        (0..self.outcomes.n_repetitions()).flat_map(move |r| {
            (0..nc).map(move |c| {
                let (tau_index, basis) = self.plan.circuit(c);
                MeasurementRecord {
                    script: r / ns,
                    repetition: r,
                    tau_index,
                    basis,
                    outcome: self.outcomes.get(r, c),
                    time: self.times.t[r],
                }
            })
        })
    }
}

/// Draw one outcome per circuit execution.
///
/// Repetition `r` uses its own random stream, so any range of repetitions
/// can be generated independently and the result does not depend on the
/// number of worker threads.
pub fn emulate_experiment(plan: &ExperimentPlan, schedule: &NoiseSchedule, seed: u64) -> Result<Emulation> {
    plan.validate()?;
    let times = reconstruct_timestamps(plan);
    let truth = schedule.realize(&times.t)?;
    let nc = plan.n_circuits();
    let mut bits = vec![0u8; plan.total_repetitions() * nc];
    bits.par_chunks_mut(nc).enumerate().for_each(|(r, row)| {
        let mut rng = rng::stream(seed, Purpose::Outcomes, r as u64);
        let params = &truth.params[r];
        for (c, bit) in row.iter_mut().enumerate() {
            let (ti, basis) = plan.circuit(c);
            let p = closed_form_probability(params, plan.idle_times[ti], basis);
            *bit = u8::from(rng.random::<f64>() < p);
        }
    });
    let outcomes = Outcomes::from_bits(plan.total_repetitions(), nc, bits)?;
    Ok(Emulation {
        plan: plan.clone(),
        times,
        outcomes,
        truth,
    })
}
