//! Temporary calibration scan; not part of the suite.

use hspsim_core::config::{
    AnalysisConfig, DetectorEntry, DetectorKind, Route, RunConfig, RunSection, SourceConfig,
    Topology,
};
use hspsim_core::correlation::CorrelationHistogram;
use hspsim_core::detector::{GateClock, SnspdParams, SpadParams};
use hspsim_core::io::read_json;
use hspsim_core::pipeline::{analyze, simulate};
use hspsim_core::source::{pgr_for_power, PairStatistics, SourceParams};

fn table_spad(gate_width_ps: i64) -> SpadParams {
    SpadParams {
        gate: GateClock { frequency_hz: 1.0e9, phase_offset_ps: 0, gate_width_ps },
        pde: 0.155,
        dark_count_probability_per_gate: 1.25e-5,
        afterpulse_probability: 0.10,
        trap_lifetime_s: 1.0e-6,
        extra_traps: vec![],
        max_afterpulse_generation: 1,
        deadtime_s: 10.0e-9,
        holdoff_s: 0.0,
        jitter_fwhm_s: 60.0e-12,
    }
}

fn snspd() -> SnspdParams {
    SnspdParams {
        efficiency: 0.85,
        dark_count_rate_hz: 100.0,
        deadtime_s: 0.0,
        jitter_fwhm_s: 40.0e-12,
    }
}

fn run(cfg: &RunConfig, tag: &str) -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let out = simulate(cfg, &dir.path().join(tag), false).unwrap();
    (dir, out.out_dir)
}

#[test]
fn scan_hbt_purity() {
    // Criteria 1 and 2: signal split onto two detectors; full analyze.
    for (label, seed, spad_gate) in [("snspd", 501u64, 0i64), ("spad150", 502, 150)] {
        let duration_s = 10.0;
        let mut detectors = vec![
            DetectorEntry { channel: 0, kind: DetectorKind::Snspd(snspd()) },
            DetectorEntry { channel: 1, kind: DetectorKind::Snspd(snspd()) },
        ];
        if spad_gate == 0 {
            detectors.push(DetectorEntry { channel: 2, kind: DetectorKind::Snspd(snspd()) });
        } else {
            detectors.push(DetectorEntry {
                channel: 2,
                kind: DetectorKind::Spad(table_spad(spad_gate)),
            });
        }
        let cfg = RunConfig {
            run: RunSection { duration_s, seed, chunk_modes: 1_000_000, out_dir: None },
            source: SourceConfig::Pairs(SourceParams {
                pair_generation_rate_hz: 7.5e6,
                mode_duration_s: Some(300.0e-9),
                coupling_signal: 0.44,
                coupling_idler: 0.44,
                statistics: PairStatistics::Thermal,
                ..SourceParams::default()
            }),
            detectors,
            topology: Topology {
                signal: vec![
                    Route { channel: 1, ratio: 0.5, transmission: 1.0 },
                    Route { channel: 2, ratio: 0.5, transmission: 1.0 },
                ],
                idler: vec![Route { channel: 0, ratio: 1.0, transmission: 1.0 }],
            },
            analysis: AnalysisConfig {
                herald_channel: 0,
                signal_channel: 1,
                hbt_channel: Some(2),
                bin_width_ps: 1000,
                half_bins: 150,
                coincidence_window_ps: None,
                heralded_window_ps: 3000,
                software_deadtime_s: if spad_gate == 0 { 0.0 } else { 5.0e-6 },
                software_deadtime_channels: if spad_gate == 0 { None } else { Some(vec![2]) },
                fit_min_counts: 10,
            },
            characterize: None,
            sweep: None,
        };
        let started = std::time::Instant::now();
        let (_dir, out) = run(&cfg, label);
        let sim_s = started.elapsed().as_secs_f64();
        let m = analyze(&cfg, &out).unwrap();
        let hist: CorrelationHistogram = read_json(&out.join("hbt_correlation.json")).unwrap();
        let center = hist.g2().unwrap()[hist.half_bins];
        eprintln!(
            "[hbt {label}] wall sim={sim_s:.1}s total={:.1}s center g2(0)={:.4}+-{:.4} \
             fit g2(0)={:?} purity={:?} herald={:.3e}/s eta={:.4}",
            started.elapsed().as_secs_f64(),
            center.value,
            center.std_err,
            m.g2_auto_zero.map(|e| (e.value, e.std_err)),
            m.purity.map(|e| (e.value, e.std_err)),
            m.herald_rate_hz.value,
            m.heralding_efficiency.value,
        );
    }
}

#[test]
fn scan_heralded_g2() {
    // Criterion 3: SPAD heralds, signal split on two SNSPDs.
    for (power, duration_s, seed) in [(470.0, 15.0, 431), (660.0, 8.0, 432)] {
        let pgr = pgr_for_power(7.5e6, 660.0, power).unwrap();
        let cfg = RunConfig {
            run: RunSection { duration_s, seed, chunk_modes: 1_000_000, out_dir: None },
            source: SourceConfig::Pairs(SourceParams {
                pair_generation_rate_hz: pgr,
                coherence_time_signal_s: Some(15.0e-9),
                coherence_time_idler_s: Some(13.3e-9),
                mode_duration_s: Some(150.0e-9),
                coupling_signal: 0.44,
                coupling_idler: 0.44,
                statistics: PairStatistics::Thermal,
                ..SourceParams::default()
            }),
            detectors: vec![
                DetectorEntry { channel: 0, kind: DetectorKind::Spad(table_spad(150)) },
                DetectorEntry { channel: 1, kind: DetectorKind::Snspd(snspd()) },
                DetectorEntry { channel: 2, kind: DetectorKind::Snspd(snspd()) },
            ],
            topology: Topology {
                signal: vec![
                    Route { channel: 1, ratio: 0.5, transmission: 1.0 },
                    Route { channel: 2, ratio: 0.5, transmission: 1.0 },
                ],
                idler: vec![Route { channel: 0, ratio: 1.0, transmission: 1.0 }],
            },
            analysis: AnalysisConfig {
                herald_channel: 0,
                signal_channel: 1,
                hbt_channel: Some(2),
                bin_width_ps: 1000,
                half_bins: 150,
                coincidence_window_ps: None,
                heralded_window_ps: 3000,
                software_deadtime_s: 5.0e-6,
                software_deadtime_channels: Some(vec![0]),
                fit_min_counts: 10,
            },
            characterize: None,
            sweep: None,
        };
        let (_dir, out) = run(&cfg, "g2h");
        let m = analyze(&cfg, &out).unwrap();
        let g = m.heralded_g2.unwrap();
        eprintln!(
            "[g2h p={power} seed={seed}] pgr={pgr:.3e} herald={:.3e}/s g2h={:.4}+-{:.4} triples={:?}",
            m.herald_rate_hz.value, g.value, g.std_err, m.triples
        );
    }
}

#[test]
fn scan_heralding_efficiency() {
    // Criterion 4: lossy demux paths; eta and heralded rate vs power.
    for power in [330.0, 470.0, 660.0] {
        let duration_s = 6.0;
        let pgr = pgr_for_power(7.5e6, 660.0, power).unwrap();
        let cfg = RunConfig {
            run: RunSection { duration_s, seed: 403, chunk_modes: 1_000_000, out_dir: None },
            source: SourceConfig::Pairs(SourceParams {
                pair_generation_rate_hz: pgr,
                coherence_time_signal_s: Some(15.0e-9),
                coherence_time_idler_s: Some(13.3e-9),
                mode_duration_s: Some(150.0e-9),
                coupling_signal: 0.44,
                coupling_idler: 0.44,
                statistics: PairStatistics::Thermal,
                ..SourceParams::default()
            }),
            detectors: vec![
                DetectorEntry { channel: 0, kind: DetectorKind::Spad(table_spad(300)) },
                DetectorEntry {
                    channel: 1,
                    kind: DetectorKind::Snspd(SnspdParams {
                        efficiency: 0.85,
                        dark_count_rate_hz: 100.0,
                        deadtime_s: 30.0e-9,
                        jitter_fwhm_s: 40.0e-12,
                    }),
                },
            ],
            topology: Topology {
                signal: vec![Route { channel: 1, ratio: 1.0, transmission: 0.125 }],
                idler: vec![Route { channel: 0, ratio: 1.0, transmission: 0.30 }],
            },
            analysis: AnalysisConfig {
                herald_channel: 0,
                signal_channel: 1,
                hbt_channel: None,
                bin_width_ps: 1000,
                half_bins: 150,
                coincidence_window_ps: None,
                heralded_window_ps: 3000,
                software_deadtime_s: 5.0e-6,
                software_deadtime_channels: Some(vec![0]),
                fit_min_counts: 10,
            },
            characterize: None,
            sweep: None,
        };
        let (_dir, out) = run(&cfg, "eta");
        let m = analyze(&cfg, &out).unwrap();
        eprintln!(
            "[eta p={power}] herald={:.4e}/s eta={:.4}+-{:.4} heralded={:.4e}+-{:.1e}/s window={:?}",
            m.herald_rate_hz.value,
            m.heralding_efficiency.value,
            m.heralding_efficiency.std_err,
            m.heralded_rate_hz.value,
            m.heralded_rate_hz.std_err,
            m.coincidence_window_ps,
        );
    }
}
