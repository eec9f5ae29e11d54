//! Transmon charge dispersion and the charge-dipole defect model.
//!
//! Energies are stored as frequencies (E/h, Hz). The transmon Hamiltonian
//! `4E_C(n̂ − n_g)² − E_J cos φ̂` is diagonalized in the charge basis
//! `n ∈ [−N, N]`, where it is tridiagonal.

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{stats, Error, Result};

/// Planck constant, J·s (exact SI value).
pub const PLANCK: f64 = 6.626_070_15e-34;
/// Boltzmann constant, J/K (exact SI value).
pub const BOLTZMANN: f64 = 1.380_649e-23;
/// Elementary charge, C (exact SI value).
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;
/// One ångström, m.
pub const ANGSTROM: f64 = 1e-10;

/// Default charge-basis cutoff.
pub const DEFAULT_CUTOFF: usize = 40;
const MIN_CUTOFF: usize = 15;
/// Lowest eigenvalues may move by at most this much (Hz) when the cutoff
/// grows by five.
const CONVERGENCE_HZ: f64 = 1.0;

/// Qubit parameters. `e_c` and `e_j` are E/h in Hz; `alpha` is negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransmonSpec {
    pub f0: f64,
    pub alpha: f64,
    pub e_c: f64,
    pub e_j: f64,
    /// Charge offset in units of 2e.
    pub n_g: f64,
}

impl TransmonSpec {
    pub fn xi(&self) -> f64 {
        self.e_j / self.e_c
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.e_c > 0.0 && self.e_j > 0.0) {
            return Err(Error::config(format!("E_C and E_J must be positive, got {} and {}", self.e_c, self.e_j)));
        }
        if self.xi() <= 20.0 {
            warn!("E_J/E_C = {:.1} is outside the transmon regime", self.xi());
        }
        Ok(())
    }
}

/// Lowest levels of the transmon Hamiltonian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmonSpectrum {
    /// Lowest eigenvalues, Hz, ascending.
    pub energies: Vec<f64>,
    /// |⟨0|n̂|1⟩|.
    pub n01: f64,
    pub cutoff: usize,
}

impl TransmonSpectrum {
    pub fn f01(&self) -> f64 {
        self.energies[1] - self.energies[0]
    }

    pub fn anharmonicity(&self) -> f64 {
        self.energies[2] - 2.0 * self.energies[1] + self.energies[0]
    }
}

fn solve(e_c: f64, e_j: f64, n_g: f64, cutoff: usize, levels: usize) -> TransmonSpectrum {
    let dim = 2 * cutoff + 1;
    let charge = |i: usize| i as f64 - cutoff as f64;
    let h = DMatrix::from_fn(dim, dim, |i, j| {
        if i == j {
            4.0 * e_c * (charge(i) - n_g).powi(2)
        } else if i.abs_diff(j) == 1 {
            -e_j / 2.0
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(h);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_unstable_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let v0 = eig.eigenvectors.column(order[0]);
    let v1 = eig.eigenvectors.column(order[1]);
    let n01 = (0..dim).map(|i| v0[i] * charge(i) * v1[i]).sum::<f64>().abs();
    TransmonSpectrum {
        energies: order.iter().take(levels.min(dim)).map(|&k| eig.eigenvalues[k]).collect(),
        n01,
        cutoff,
    }
}

/// Diagonalize at the given cutoff and verify that the three lowest levels
/// are stable against five more charge states.
pub fn diagonalize_transmon(e_c: f64, e_j: f64, n_g: f64, cutoff: usize) -> Result<TransmonSpectrum> {
    if cutoff < MIN_CUTOFF {
        return Err(Error::config(format!("charge-basis cutoff must be at least {MIN_CUTOFF}, got {cutoff}")));
    }
    if !(e_c > 0.0) || !(e_j >= 0.0) {
        return Err(Error::config(format!("need E_C > 0 and E_J >= 0, got {e_c} and {e_j}")));
    }
    let spec = solve(e_c, e_j, n_g, cutoff, 4);
    let wider = solve(e_c, e_j, n_g, cutoff + 5, 4);
    let shift = spec.energies.iter().zip(&wider.energies).take(3).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if shift > CONVERGENCE_HZ {
        return Err(Error::numerical(format!(
            "levels moved by {shift:.3e} Hz between cutoffs {cutoff} and {}; try a cutoff of {}",
            cutoff + 5,
            2 * cutoff
        )));
    }
    Ok(spec)
}

/// Find `(E_C, E_J)` reproducing `f0` and `alpha` at `n_g = 0`.
pub fn calibrate_ec_ej(f0: f64, alpha: f64) -> Result<TransmonSpec> {
    calibrate_ec_ej_at(f0, alpha, 0.0)
}

/// Newton iteration on `(E_C, E_J)` with a finite-difference Jacobian,
/// started from the asymptotic transmon relations `E_C ≈ −α`,
/// `f0 ≈ √(8E_JE_C) − E_C`.
pub fn calibrate_ec_ej_at(f0: f64, alpha: f64, n_g: f64) -> Result<TransmonSpec> {
    if !(f0 > 0.0) || !(alpha < 0.0) {
        return Err(Error::config(format!("need f0 > 0 and alpha < 0, got {f0} and {alpha}")));
    }
    let residual = |p: [f64; 2]| {
        let s = solve(p[0], p[1], n_g, DEFAULT_CUTOFF, 3);
        [s.f01() - f0, s.anharmonicity() - alpha]
    };
    let e_c0 = -alpha;
    let mut p = [e_c0, (f0 + e_c0).powi(2) / (8.0 * e_c0)];
    let (lo, hi) = ([1e-3 * e_c0, 1e-3 * p[1]], [1e3 * e_c0, 1e3 * p[1]]);
    for _ in 0..60 {
        let r = residual(p);
        if r[0].abs().max(r[1].abs()) < 0.1 {
            let spec = TransmonSpec { f0, alpha, e_c: p[0], e_j: p[1], n_g };
            diagonalize_transmon(spec.e_c, spec.e_j, n_g, DEFAULT_CUTOFF)?;
            spec.validate()?;
            return Ok(spec);
        }
        let mut jac = [[0.0; 2]; 2];
        for k in 0..2 {
            let mut q = p;
            let step = 1e-6 * p[k];
            q[k] += step;
            let rq = residual(q);
            jac[0][k] = (rq[0] - r[0]) / step;
            jac[1][k] = (rq[1] - r[1]) / step;
        }
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        if det == 0.0 || !det.is_finite() {
            break;
        }
        let d = [
            (jac[1][1] * r[0] - jac[0][1] * r[1]) / det,
            (jac[0][0] * r[1] - jac[1][0] * r[0]) / det,
        ];
        // Halve the step until both energies stay positive.
        let mut t = 1.0;
        while t > 1e-6 && (p[0] - t * d[0] <= 0.0 || p[1] - t * d[1] <= 0.0) {
            t *= 0.5;
        }
        p = [p[0] - t * d[0], p[1] - t * d[1]];
        if p.iter().zip(lo.iter().zip(&hi)).any(|(v, (l, h))| v < l || v > h) {
            break;
        }
    }
    Err(Error::numerical(format!(
        "no (E_C, E_J) reproduces f0 = {f0} Hz, alpha = {alpha} Hz; searched E_C in [{:.3e}, {:.3e}] Hz",
        lo[0], hi[0]
    )))
}

/// Asymptotic peak-to-peak dispersion of the 0–1 transition,
/// `32√(2/π)·E_C·(ξ/2)^{3/4}·e^{−√(8ξ)}·[16(ξ/2)^{1/2} + 1]`, in Hz.
pub fn charge_dispersion_analytic(e_c: f64, xi: f64) -> f64 {
    let half = xi / 2.0;
    32.0 * (2.0 / std::f64::consts::PI).sqrt() * e_c * half.powf(0.75) * (-(8.0 * xi).sqrt()).exp() * (16.0 * half.sqrt() + 1.0)
}

/// `|f01(n_g = 0) − f01(n_g = 1/2)|`, the extremes of the cosine band, in Hz.
pub fn charge_dispersion_numerical(e_c: f64, e_j: f64) -> Result<f64> {
    let a = diagonalize_transmon(e_c, e_j, 0.0, DEFAULT_CUTOFF)?;
    let b = diagonalize_transmon(e_c, e_j, 0.5, DEFAULT_CUTOFF)?;
    Ok((a.f01() - b.f01()).abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChargeOffsetTrace {
    /// `|n_g mod 1/4|` per sample.
    pub n_g: Vec<f64>,
    /// Samples whose amplitude fell outside `[0, f_Δmax]` and was clipped.
    pub clipped: usize,
}

/// Invert `f_Δ = f_Δmax |cos 2πn_g|` sample by sample.
pub fn extract_charge_offset(f_delta: &[f64], f_delta_max: f64) -> Result<ChargeOffsetTrace> {
    if !(f_delta_max > 0.0) {
        return Err(Error::config(format!("f_delta_max must be positive, got {f_delta_max}")));
    }
    let mut clipped = 0;
    let n_g = f_delta
        .iter()
        .map(|&f| {
            let r = f / f_delta_max;
            if !(0.0..=1.0).contains(&r) {
                clipped += 1;
            }
            r.clamp(0.0, 1.0).acos() / (2.0 * std::f64::consts::PI)
        })
        .collect();
    if clipped > 0 {
        warn!("{clipped} amplitudes outside [0, f_delta_max] were clipped");
    }
    Ok(ChargeOffsetTrace { n_g, clipped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChargeJumpStatistics {
    /// Centre of the most populated histogram bin.
    pub estimate: f64,
    /// Bin width.
    pub uncertainty: f64,
    pub jumps: Vec<f64>,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Fewer than five transitions were available.
    pub low_statistics: bool,
}

const MIN_JUMPS: usize = 5;

/// Histogram of `|n_g(k) − n_g(k − 1)|` across the given transition indices
/// (index `k` is the first sample after a switch), binned by the
/// Freedman–Diaconis rule.
pub fn charge_jump_statistics(n_g: &[f64], transitions: &[usize]) -> Result<ChargeJumpStatistics> {
    let jumps: Vec<f64> = transitions
        .iter()
        .filter(|&&k| k >= 1 && k < n_g.len())
        .map(|&k| (n_g[k] - n_g[k - 1]).abs())
        .filter(|d| d.is_finite())
        .collect();
    if jumps.is_empty() {
        return Err(Error::data("no transitions fall inside the charge-offset trace"));
    }
    let low_statistics = jumps.len() < MIN_JUMPS;
    if low_statistics {
        warn!("only {} charge-offset jumps available", jumps.len());
    }
    let lo = jumps.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = jumps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let iqr = stats::quantile(&jumps, 0.75) - stats::quantile(&jumps, 0.25);
    let mut width = 2.0 * iqr / (jumps.len() as f64).cbrt();
    if !(width > 0.0) {
        width = if hi > lo { (hi - lo) / (jumps.len() as f64).sqrt().ceil() } else { 0.0 };
    }
    if width == 0.0 {
        return Ok(ChargeJumpStatistics {
            estimate: lo,
            uncertainty: 0.0,
            bin_edges: vec![lo, lo],
            counts: vec![jumps.len()],
            jumps,
            low_statistics,
        });
    }
    let bins = (((hi - lo) / width).floor() as usize + 1).min(100_000);
    let mut counts = vec![0usize; bins];
    for &d in &jumps {
        counts[(((d - lo) / width) as usize).min(bins - 1)] += 1;
    }
    let mode = (0..bins).fold(0, |b, k| if counts[k] > counts[b] { k } else { b });
    Ok(ChargeJumpStatistics {
        estimate: lo + (mode as f64 + 0.5) * width,
        uncertainty: width,
        bin_edges: (0..=bins).map(|k| lo + k as f64 * width).collect(),
        counts,
        jumps,
        low_statistics,
    })
}

/// `f_TLS = k_B T ln(ν₁→₀/ν₀→₁)/h` for a defect in thermal equilibrium, Hz.
pub fn tls_energy_from_rates(nu_10: f64, nu_01: f64, temperature: f64) -> Result<f64> {
    if !(nu_10 > 0.0 && nu_01 > 0.0) {
        return Err(Error::config(format!("rates must be positive, got {nu_10} and {nu_01}")));
    }
    if !(temperature > 0.0) {
        return Err(Error::config(format!("temperature must be positive, got {temperature}")));
    }
    let (down, up) = if nu_10 >= nu_01 {
        (nu_10, nu_01)
    } else {
        warn!("relaxation rate below excitation rate; swapping");
        (nu_01, nu_10)
    };
    Ok(BOLTZMANN * temperature * (down / up).ln() / PLANCK)
}

/// Charge-dipole defect parameters. Energies are E/h in Hz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TlsParams {
    pub epsilon: f64,
    pub delta: f64,
    pub f_tls: f64,
    /// Dipole component along the junction field, e·Å.
    pub d_parallel: f64,
    /// Junction thickness, m.
    pub x: f64,
    pub temperature: Option<f64>,
}

/// `(|δn_g|, f_Δ⁽²⁾)` produced by a defect coupled to the qubit.
pub fn tls_forward(tls: &TlsParams, qubit: &TransmonSpec, n01: f64) -> (f64, f64) {
    let coupling = tls.d_parallel * ANGSTROM / tls.x;
    let dn = coupling / 8.0 * (qubit.f0 / qubit.e_c).sqrt() * tls.epsilon / tls.f_tls;
    let fd = (coupling * n01 * tls.delta / tls.f_tls).powi(2) * qubit.e_c * qubit.f0
        / (2.0 * (qubit.f0 + qubit.alpha - tls.f_tls));
    (dn, fd)
}

/// Solve the charge-offset and frequency-shift relations together with
/// `ε² + Δ² = (hf_TLS)²` for `(ε, Δ, d_∥)`.
pub fn invert_tls_model(
    delta_n_g: f64,
    f_delta_2: f64,
    qubit: &TransmonSpec,
    n01: f64,
    f_tls: f64,
    x: f64,
) -> Result<TlsParams> {
    if !(delta_n_g > 0.0 && f_delta_2 > 0.0) {
        return Err(Error::config(format!("need |dn_g| > 0 and f_delta > 0, got {delta_n_g} and {f_delta_2}")));
    }
    if !(f_tls > 0.0 && x > 0.0 && n01 > 0.0) {
        return Err(Error::config("f_TLS, junction thickness and matrix element must be positive"));
    }
    let detuning = qubit.f0 + qubit.alpha - f_tls;
    if !(detuning > 0.0) {
        return Err(Error::data(format!(
            "f0 + alpha - f_TLS = {detuning:.4e} Hz; the dispersive shift needs a defect below the 1-2 transition"
        )));
    }
    // With u = d_∥/(e x): ε/hf = c1/u and (Δ/hf)² = c2/u², so u² = c1² + c2.
    let c1 = 8.0 * delta_n_g / (qubit.f0 / qubit.e_c).sqrt();
    let c2 = 2.0 * f_delta_2 * detuning / (n01 * n01 * qubit.e_c * qubit.f0);
    let u = (c1 * c1 + c2).sqrt();
    Ok(TlsParams {
        epsilon: f_tls * c1 / u,
        delta: f_tls * c2.sqrt() / u,
        f_tls,
        d_parallel: u * x / ANGSTROM,
        x,
        temperature: None,
    })
}

/// Observed level-2 quantities for one qubit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TlsObservation {
    pub delta_n_g: f64,
    pub f_delta_2: f64,
    pub nu_01: f64,
    pub nu_10: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    fn of(values: impl Iterator<Item = f64>) -> Self {
        values.fold(Range { min: f64::INFINITY, max: f64::NEG_INFINITY }, |r, v| Range {
            min: r.min.min(v),
            max: r.max.max(v),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TlsRanges {
    pub f_tls: Range,
    pub epsilon: Range,
    pub delta: Range,
    pub d_parallel: Range,
}

/// Sweep junction thickness and defect temperature over `steps × steps`
/// points (endpoints included) and report the extent of each parameter.
pub fn tls_parameter_ranges(
    obs: &TlsObservation,
    qubit: &TransmonSpec,
    n01: f64,
    x_range: (f64, f64),
    t_range: (f64, f64),
    steps: usize,
) -> Result<TlsRanges> {
    let steps = steps.max(2);
    let lerp = |(a, b): (f64, f64), k: usize| a + (b - a) * k as f64 / (steps - 1) as f64;
    let grid: Vec<(f64, f64)> = (0..steps).flat_map(|i| (0..steps).map(move |j| (i, j))).map(|(i, j)| (lerp(x_range, i), lerp(t_range, j))).collect();
    let fits: Vec<TlsParams> = grid
        .par_iter()
        .map(|&(x, t)| {
            let f = tls_energy_from_rates(obs.nu_10, obs.nu_01, t)?;
            let mut p = invert_tls_model(obs.delta_n_g, obs.f_delta_2, qubit, n01, f, x)?;
            p.temperature = Some(t);
            Ok(p)
        })
        .collect::<Result<_>>()?;
    Ok(TlsRanges {
        f_tls: Range::of(fits.iter().map(|p| p.f_tls)),
        epsilon: Range::of(fits.iter().map(|p| p.epsilon)),
        delta: Range::of(fits.iter().map(|p| p.delta)),
        d_parallel: Range::of(fits.iter().map(|p| p.d_parallel)),
    })
}
