//! Property tests for invariants that hold for any input.

use noisetrack::averaging::{gaussian_average, tracking_metrics};
use noisetrack::emulator::{closed_form_probability, Basis, NoiseParams, Outcomes};
use noisetrack::hdfa::rates::censor_rate;
use noisetrack::hdfa::{correct_rate, segment_series, viterbi, GaussianHmm2, HdfaOptions};
use noisetrack::physics::{
    charge_dispersion_analytic, charge_dispersion_numerical, diagonalize_transmon, invert_tls_model,
    tls_energy_from_rates, tls_forward, TlsParams, TransmonSpec,
};
use noisetrack::pipeline::PipelineConfig;
use noisetrack::spectral::{welch_psd, WelchOptions};
use proptest::prelude::*;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn probabilities_stay_in_the_unit_interval(
        df in -2e5..2e5f64, g1 in 0.0..1e6f64, gphi in 0.0..1e6f64, tau in 0.0..1e-4f64,
    ) {
        let p = NoiseParams::new(df, g1, gphi);
        for b in Basis::ALL {
            let v = closed_form_probability(&p, tau, b);
            prop_assert!((0.0..=1.0).contains(&v));
        }
        // Reversing the detuning mirrors X about 1/2 and leaves Y alone.
        let q = NoiseParams::new(-df, g1, gphi);
        let px = closed_form_probability(&p, tau, Basis::X) + closed_form_probability(&q, tau, Basis::X);
        prop_assert!((px - 1.0).abs() < 1e-12);
        let dy = closed_form_probability(&p, tau, Basis::Y) - closed_form_probability(&q, tau, Basis::Y);
        prop_assert!(dy.abs() < 1e-12);
    }

    #[test]
    fn gaussian_average_of_constant_outcomes_is_constant(
        bit in 0u8..2, n in 1usize..60, nc in 1usize..4, width in 0.3..6.0f64,
    ) {
        let o = Outcomes::from_bits(n, nc, vec![bit; n * nc]).unwrap();
        let s = gaussian_average(&o, width, &[0..n]).unwrap();
        for r in 0..n {
            prop_assert!(s.p(r).iter().all(|p| (p - f64::from(bit)).abs() < 1e-12));
        }
    }

    #[test]
    fn inaccuracy_counts_mismatches(states in prop::collection::vec(prop::bool::ANY, 1..200), flips in prop::collection::vec(prop::bool::ANY, 200)) {
        let truth: Vec<i8> = states.iter().map(|&s| if s { 1 } else { -1 }).collect();
        let pred: Vec<i8> = truth.iter().zip(&flips).map(|(&s, &f)| if f { -s } else { s }).collect();
        let zeros = vec![0.0; truth.len()];
        let m = tracking_metrics(&truth, &pred, &zeros, &zeros).unwrap();
        let wrong = flips[..truth.len()].iter().filter(|f| **f).count();
        prop_assert_eq!(m.n_correct, truth.len() - wrong);
        prop_assert!((m.inaccuracy - wrong as f64 / truth.len() as f64).abs() < 1e-15);
    }

    #[test]
    fn viterbi_is_offset_equivariant(
        xs in prop::collection::vec(-50i32..50, 2..300), shift in -10_000i32..10_000, sep in 5i32..40,
    ) {
        // Integer-valued data and offsets keep every likelihood comparison exact.
        let x: Vec<f64> = xs.iter().map(|&v| f64::from(v)).collect();
        let moved: Vec<f64> = x.iter().map(|v| v + f64::from(shift)).collect();
        let m = GaussianHmm2 {
            means: [-f64::from(sep), f64::from(sep)],
            sigmas: [8.0, 8.0],
            trans: [[0.9, 0.1], [0.1, 0.9]],
            init: [0.5, 0.5],
        };
        prop_assert_eq!(viterbi(&m, &x), viterbi(&m.offset(f64::from(shift)), &moved));
    }

    #[test]
    fn segmentation_is_offset_equivariant(
        seed in 0u64..1000, shift in -64i32..64,
    ) {
        let n = 400;
        let mut state = 0u64;
        let mut s = 1.0;
        let x: Vec<f64> = (0..n)
            .map(|k| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(seed * 2 + 1);
                if (state >> 33) % 10 == 0 {
                    s = -s;
                }
                let jitter = ((state >> 40) % 9) as f64 - 4.0;
                s * 20.0 + jitter + if k >= n / 2 { 40.0 } else { 0.0 }
            })
            .collect();
        let moved: Vec<f64> = x.iter().map(|v| v + 1024.0 * f64::from(shift)).collect();
        let sig = vec![3.0; n];
        let opts = HdfaOptions::default();
        let a = segment_series(&x, &sig, -1.0, 8, &opts).unwrap();
        let b = segment_series(&moved, &sig, -1.0, 8, &opts).unwrap();
        let spans = |s: &noisetrack::hdfa::Segmentation| s.segments.iter().map(|g| (g.start, g.end)).collect::<Vec<_>>();
        prop_assert_eq!(spans(&a), spans(&b));
        for (ga, gb) in a.segments.iter().zip(&b.segments) {
            prop_assert_eq!(&ga.states, &gb.states);
            prop_assert!((gb.summary.f_c - ga.summary.f_c - 1024.0 * f64::from(shift)).abs() < 1e-6);
            prop_assert!((gb.summary.f_delta - ga.summary.f_delta).abs() < 1e-6);
        }
    }

    #[test]
    fn welch_power_scales_quadratically(seed in 0u64..1000, gain in 0.01..100.0f64) {
        let mut state = seed.wrapping_add(1);
        let x: Vec<f64> = (0..1024)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state % 10_000) as f64 / 5000.0 - 1.0
            })
            .collect();
        let scaled: Vec<f64> = x.iter().map(|v| v * gain).collect();
        let opts = WelchOptions { segment_length: 128, ..WelchOptions::default() };
        let a = welch_psd(&x, 0.01, &opts).unwrap();
        let b = welch_psd(&scaled, 0.01, &opts).unwrap();
        for (pa, pb) in a.power.iter().zip(&b.power) {
            prop_assert!(close(pb / (gain * gain), *pa, 1e-9));
        }
    }

    #[test]
    fn censoring_inverts_on_the_lower_branch(nu in 1e-4..1e4f64, x in 0.0..1.0f64) {
        let tau = x / nu;
        let back = correct_rate(censor_rate(nu, tau), tau).unwrap();
        prop_assert!(close(back, nu, 1e-9));
    }

    #[test]
    fn tls_energy_is_linear_in_temperature_and_scale_free(
        down in 1e-3..10.0f64, ratio in 1.01..50.0f64, t in 0.005..0.2f64, k in 0.1..10.0f64,
    ) {
        let up = down / ratio;
        let e = tls_energy_from_rates(down, up, t).unwrap();
        prop_assert!(close(tls_energy_from_rates(down, up, 2.0 * t).unwrap(), 2.0 * e, 1e-12));
        prop_assert!(close(tls_energy_from_rates(k * down, k * up, t).unwrap(), e, 1e-12));
    }

    #[test]
    fn tls_inversion_undoes_the_forward_model(
        eps in 0.05e9..3e9f64, delta in 0.05e9..3e9f64, d in 0.01..1.0f64, x in 1e-9..3e-9f64, n01 in 0.5..2.0f64,
    ) {
        let qubit = TransmonSpec { f0: 5.03e9, alpha: -0.336e9, e_c: 0.288e9, e_j: 43.0 * 0.288e9, n_g: 0.0 };
        let tls = TlsParams { epsilon: eps, delta, f_tls: eps.hypot(delta), d_parallel: d, x, temperature: None };
        prop_assume!(tls.f_tls < qubit.f0 + qubit.alpha);
        let (dn, fd) = tls_forward(&tls, &qubit, n01);
        let back = invert_tls_model(dn, fd, &qubit, n01, tls.f_tls, x).unwrap();
        prop_assert!(close(back.epsilon, eps, 1e-9));
        prop_assert!(close(back.delta, delta, 1e-9));
        prop_assert!(close(back.d_parallel, d, 1e-9));
    }

    #[test]
    fn config_survives_a_toml_round_trip(seed in 0u64..(1 << 62), w_g in 0.5..8.0f64, fixed in prop::bool::ANY, levels in 1usize..6) {
        let mut c = PipelineConfig::default();
        c.seed = seed;
        c.average.w_g = w_g;
        c.average.fixed = fixed;
        c.hdfa.max_levels = levels;
        let back = PipelineConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back, c);
    }
}

proptest! {
    // Each case diagonalizes a few 41×41 matrices.
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn transmon_levels_are_periodic_and_even_in_charge_offset(
        e_c in 0.1e9..0.4e9f64, xi in 1.0..60.0f64, ng in 0.0..1.0f64,
    ) {
        let e_j = xi * e_c;
        let f = |n: f64| diagonalize_transmon(e_c, e_j, n, 20).unwrap().f01();
        let base = f(ng);
        prop_assert!(close(f(ng + 1.0), base, 1e-9));
        prop_assert!(close(f(-ng), base, 1e-9));
    }

    #[test]
    fn analytic_dispersion_tracks_the_numerical_one(e_c in 0.2e9..0.35e9f64, xi in 30.0..60.0f64) {
        let ratio = charge_dispersion_analytic(e_c, xi) / charge_dispersion_numerical(e_c, xi * e_c).unwrap();
        prop_assert!((0.7..=1.3).contains(&ratio), "ratio {ratio}");
    }
}
