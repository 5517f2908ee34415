//! Large-sample statistical validation: the simulation components are fed
//! known parameters at scales where estimator noise is far below the
//! asserted tolerances, and the injected values must come back out.

use hspsim_core::correlation::autocorrelation;
use hspsim_core::detector::{detect_snspd, detect_spad, GateClock, SnspdParams, SpadParams};
use hspsim_core::source::{generate_pair_stream, PairStatistics, SourceParams};
use hspsim_core::types::{s_to_ps, Arm, PhotonArrival, TagOrigin};

fn arrivals_at(times: &[i64]) -> Vec<PhotonArrival> {
    times
        .iter()
        .enumerate()
        .map(|(i, &t)| PhotonArrival { time_ps: t, arm: Arm::Signal, pair_id: i as u64 })
        .collect()
}

/// Thermal per-mode pair statistics must bunch the unheralded stream to
/// g2(0) = 2, and the Poisson reference statistics must leave it flat at
/// 1, as measured by the correlation estimator on ideal (lossless,
/// noiseless) detection of ~2e6 events. The mode duration is set far
/// above the coherence times so the uniform-in-mode placement does not
/// dilute the zero-delay bin.
#[test]
fn thermal_stream_bunches_to_two_and_poisson_stays_at_one() {
    let duration_s = 0.4;
    let bin_ps = 3_000;
    for (statistics, expected) in
        [(PairStatistics::Thermal, 2.0), (PairStatistics::Poisson, 1.0)]
    {
        let params = SourceParams {
            pair_generation_rate_hz: 5.0e6,
            mode_duration_s: Some(300.0e-9),
            statistics,
            ..SourceParams::default()
        };
        let pairs = generate_pair_stream(&params, duration_s, 97).unwrap();
        assert!(pairs.len() > 1_000_000, "only {} pairs", pairs.len());
        let mut times: Vec<i64> = pairs.iter().map(|p| p.arrival_time_ps(Arm::Signal)).collect();
        times.sort_unstable();
        let hist = autocorrelation(&times, bin_ps, 120, s_to_ps(duration_s)).unwrap();
        let g2 = hist.g2().unwrap();
        let center = g2[hist.index_of_delay(0).unwrap()];
        assert!(
            (center.value - expected).abs() < 0.05,
            "{statistics:?}: g2(0) = {} +- {}, expected {expected}",
            center.value,
            center.std_err
        );
        // Bins beyond the mode envelope (+-300 ns) sit at the accidental
        // level for both statistics.
        let edge = g2[0];
        assert!((edge.value - 1.0).abs() < 5.0 * edge.std_err, "edge bin {}", edge.value);
    }
}

/// With no light and afterpulsing disabled, the per-gate firing
/// probability is the injected dark probability: 1e9 gates at 1e-5 give
/// 1e4 +- 300 tags (three binomial sigma).
#[test]
fn spad_dark_floor_matches_injected_per_gate_probability() {
    let params = SpadParams {
        pde: 0.0,
        dark_count_probability_per_gate: 1.0e-5,
        afterpulse_probability: 0.0,
        jitter_fwhm_s: 0.0,
        deadtime_s: 0.0,
        ..SpadParams::default()
    };
    let tags = detect_spad(&params, &[], 1.0, 0, 1234).unwrap();
    let n = tags.len() as f64;
    assert!((n - 1.0e4).abs() < 300.0, "dark tags {n} outside 1e4 +- 300");
    assert!(tags.iter().all(|t| t.origin == TagOrigin::Dark));
}

/// A dark SNSPD is a homogeneous Poisson process: 100 Hz for 10 s gives
/// 1000 +- 95 tags (three sigma).
#[test]
fn snspd_dark_rate_is_poissonian() {
    let params = SnspdParams {
        efficiency: 1.0,
        dark_count_rate_hz: 100.0,
        deadtime_s: 0.0,
        jitter_fwhm_s: 0.0,
    };
    let tags = detect_snspd(&params, &[], 10.0, 0, 77).unwrap();
    let n = tags.len() as f64;
    assert!((n - 1000.0).abs() < 95.0, "dark tags {n} outside 1000 +- 95");
}

/// SNSPD detection is Bernoulli thinning: 1e6 arrivals at efficiency 0.8
/// keep 8e5 +- 1200 (three binomial sigma).
#[test]
fn snspd_efficiency_thins_binomially() {
    let times: Vec<i64> = (0..1_000_000i64).map(|i| i * 10_000).collect();
    let params = SnspdParams {
        efficiency: 0.8,
        dark_count_rate_hz: 0.0,
        deadtime_s: 0.0,
        jitter_fwhm_s: 0.0,
    };
    let tags = detect_snspd(&params, &arrivals_at(&times), 10.0, 0, 5).unwrap();
    let n = tags.len() as f64;
    assert!((n - 8.0e5).abs() < 1200.0, "tags {n} outside 8e5 +- 1200");
}

/// The delay between an afterpulse tag and the avalanche that charged its
/// trap is the trap-release exponential. Beyond a cutoff clearing the
/// discriminator-deadtime notch and the gate quantization, the mean
/// excess delay of an exponential equals its lifetime; 1e5+ afterpulses
/// pin it to well under the 5% tolerance.
#[test]
fn afterpulse_delays_recover_the_trap_lifetime() {
    let trap_lifetime_s = 1.0e-6;
    let params = SpadParams {
        pde: 0.0,
        dark_count_probability_per_gate: 0.01,
        afterpulse_probability: 0.1,
        trap_lifetime_s,
        max_afterpulse_generation: 1,
        deadtime_s: 10.0e-9,
        holdoff_s: 0.0,
        jitter_fwhm_s: 0.0,
        ..SpadParams::default()
    };
    let tags = detect_spad(&params, &[], 0.2, 0, 99).unwrap();
    let cutoff_ps = s_to_ps(params.deadtime_s) + 2_000;
    let excesses: Vec<f64> = tags
        .iter()
        .filter_map(|t| match t.origin {
            TagOrigin::Afterpulse { parent_time_ps } => {
                let d = t.time_ps - parent_time_ps;
                (d > cutoff_ps).then(|| (d - cutoff_ps) as f64)
            }
            _ => None,
        })
        .collect();
    assert!(excesses.len() > 100_000, "only {} afterpulses", excesses.len());
    let mean_ps = excesses.iter().sum::<f64>() / excesses.len() as f64;
    let tau_ps = trap_lifetime_s * 1e12;
    assert!(
        (mean_ps - tau_ps).abs() / tau_ps < 0.05,
        "fitted lifetime {mean_ps} ps vs injected {tau_ps} ps"
    );
}

/// Tag times scatter around the true avalanche times as a Gaussian of
/// the configured FWHM, recovered through the ground-truth pair links at
/// 2e5 samples to well under 5%.
#[test]
fn jitter_width_matches_configured_fwhm() {
    let jitter_fwhm_s = 100.0e-12;
    let params = SpadParams {
        pde: 1.0,
        dark_count_probability_per_gate: 0.0,
        afterpulse_probability: 0.0,
        deadtime_s: 10.0e-9,
        jitter_fwhm_s,
        ..SpadParams::default()
    };
    // One photon every 20 gates, landing mid-gate; every one is detected
    // and none falls in another's deadtime shadow.
    let times: Vec<i64> = (0..200_000i64).map(|i| i * 20_000 + 150).collect();
    let tags = detect_spad(&params, &arrivals_at(&times), 4.1e-3, 0, 11).unwrap();
    assert_eq!(tags.len(), times.len());
    let residuals: Vec<f64> = tags
        .iter()
        .map(|t| match t.origin {
            TagOrigin::Photon { pair_id } => (t.time_ps - times[pair_id as usize]) as f64,
            other => panic!("unexpected origin {other:?}"),
        })
        .collect();
    let mean = residuals.iter().sum::<f64>() / residuals.len() as f64;
    let var = residuals.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>()
        / (residuals.len() - 1) as f64;
    let fwhm_ps = (8.0 * (2.0f64).ln()).sqrt() * var.sqrt();
    let expected_ps = jitter_fwhm_s * 1e12;
    assert!(
        (fwhm_ps - expected_ps).abs() / expected_ps < 0.05,
        "fitted FWHM {fwhm_ps} ps vs configured {expected_ps} ps"
    );
    assert!(mean.abs() < 1.0, "jitter must be centered, mean {mean} ps");
}

/// Hold-off exclusion is exact: with hold-off H no two tags on the
/// channel are closer than H, even under heavy illumination plus darks
/// and afterpulses.
#[test]
fn holdoff_forbids_close_tag_pairs_exactly() {
    let holdoff_s = 1.0e-6;
    let params = SpadParams {
        pde: 0.9,
        dark_count_probability_per_gate: 1.0e-3,
        afterpulse_probability: 0.3,
        trap_lifetime_s: 0.5e-6,
        deadtime_s: 10.0e-9,
        holdoff_s,
        jitter_fwhm_s: 100.0e-12,
        ..SpadParams::default()
    };
    let times: Vec<i64> = (0..100_000i64).map(|i| i * 3_000 + 150).collect();
    let tags = detect_spad(&params, &arrivals_at(&times), 0.4e-3, 0, 13).unwrap();
    assert!(tags.len() > 300, "expected a busy stream, got {}", tags.len());
    let h_ps = s_to_ps(holdoff_s);
    // Jitter is applied after suppression, so allow its worst-case spread
    // when checking recorded times.
    let slack = 10 * 43; // ten sigma of 100 ps FWHM jitter, in ps
    for w in tags.windows(2) {
        assert!(
            w[1].time_ps - w[0].time_ps >= h_ps - slack,
            "tags {} and {} violate the hold-off",
            w[0].time_ps,
            w[1].time_ps
        );
    }
}

/// The marginal detected arm rate is PGR x coupling within five Poisson
/// sigma over >= 1e5 events.
#[test]
fn arm_rate_is_pgr_times_coupling() {
    let params = SourceParams {
        pair_generation_rate_hz: 1.0e6,
        coupling_signal: 0.44,
        ..SourceParams::default()
    };
    let duration_s = 0.5;
    let pairs = generate_pair_stream(&params, duration_s, 3).unwrap();
    let routed =
        hspsim_core::source::apply_channel(&pairs, Arm::Signal, params.coupling_signal, 3, 0)
            .unwrap();
    let expected = params.pair_generation_rate_hz * params.coupling_signal * duration_s;
    let n = routed.len() as f64;
    assert!(n > 1.0e5, "need >= 1e5 events, got {n}");
    assert!(
        (n - expected).abs() < 5.0 * expected.sqrt(),
        "routed {n} events, expected {expected}"
    );
}

/// Gating rejection is exact: photons that fall outside the gate window
/// never produce photon-origin tags, regardless of PDE.
#[test]
fn photons_between_gates_never_fire() {
    let params = SpadParams {
        pde: 1.0,
        dark_count_probability_per_gate: 1.0e-4,
        afterpulse_probability: 0.2,
        gate: GateClock { frequency_hz: 1.0e9, phase_offset_ps: 0, gate_width_ps: 300 },
        ..SpadParams::default()
    };
    // All photons at offset 600 ps into the 1000 ps period: outside the
    // [0, 300) gate acceptance.
    let times: Vec<i64> = (0..200_000i64).map(|i| i * 1_000 + 600).collect();
    let tags = detect_spad(&params, &arrivals_at(&times), 0.2e-3, 0, 17).unwrap();
    assert!(
        tags.iter().all(|t| !matches!(t.origin, TagOrigin::Photon { .. })),
        "a photon outside the gate produced a tag"
    );
}
