//! Photon-pair and pulsed-laser stream generation.
//!
//! The pair source models a continuously pumped nonlinear microresonator.
//! Emission is resolved into temporal modes: the time axis is divided into
//! slots of `mode_duration`, the pair count in each slot is drawn from a
//! thermal (Bose-Einstein) distribution with mean
//! `pair_generation_rate * mode_duration`, and each pair epoch is uniform
//! within its slot. Thermal per-mode counts reproduce the bunching of
//! single-mode chaotic light: the unheralded autocorrelation of either arm
//! approaches g2(0) = 2 once the analysis resolves the mode duration, while
//! a Poisson hook (for tests) collapses it to 1.
//!
//! The two photons of a pair leave the resonator with one-sided exponential
//! emission offsets whose decay constants are the arm coherence times
//! (1/(2*pi*bandwidth) unless overridden). Offsets are signed so that the
//! signal-minus-idler delay density is a two-sided asymmetric exponential:
//! decay tau_c_idler on the positive side and tau_c_signal on the negative
//! side, which is the shape the coincidence-window analysis integrates.
//!
//! Pair-count capacity is bounded; oversize requests return a resource
//! error suggesting chunked generation (see [`PairStreamGenerator`]).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_rng, salt};
use crate::types::{s_to_ps, Arm, PairEvent, PhotonArrival, PS_PER_S};

/// Largest number of expected pairs a single generation request may carry.
/// Beyond this the caller must chunk the run.
const MAX_EXPECTED_PAIRS: f64 = 1e12;

/// Coherence time of a Lorentzian line of the given FWHM bandwidth:
/// `tau_c = 1 / (2 * pi * bandwidth)`.
pub fn coherence_time_from_bandwidth(bandwidth_hz: f64) -> Result<f64> {
    if !bandwidth_hz.is_finite() || bandwidth_hz <= 0.0 {
        return Err(Error::Domain(format!(
            "bandwidth must be positive and finite, got {bandwidth_hz}"
        )));
    }
    Ok(1.0 / (2.0 * std::f64::consts::PI * bandwidth_hz))
}

/// Pair generation rate at `power` for a source whose rate scales with the
/// square of pump power, anchored at (`reference_power`, `reference_pgr_hz`).
pub fn pgr_for_power(reference_pgr_hz: f64, reference_power: f64, power: f64) -> Result<f64> {
    if !(reference_pgr_hz > 0.0) || !(reference_power > 0.0) || !(power > 0.0) {
        return Err(Error::Domain(format!(
            "power-law scaling needs positive inputs, got pgr={reference_pgr_hz}, \
             p_ref={reference_power}, p={power}"
        )));
    }
    let r = power / reference_power;
    Ok(reference_pgr_hz * r * r)
}

/// Per-mode photon-pair number statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairStatistics {
    /// Bose-Einstein (chaotic single-mode) counts; unheralded g2(0) -> 2.
    #[default]
    Thermal,
    /// Poissonian counts (coherent-state stand-in for tests);
    /// unheralded g2(0) -> 1.
    Poisson,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceParams {
    pub pair_generation_rate_hz: f64,
    pub bandwidth_signal_hz: f64,
    pub bandwidth_idler_hz: f64,
    /// Explicit coherence-time overrides (seconds). When absent they derive
    /// from the bandwidths; the linewidth-to-coherence-time convention is
    /// not unique, so measured setups may need these set directly.
    pub coherence_time_signal_s: Option<f64>,
    pub coherence_time_idler_s: Option<f64>,
    /// Temporal mode length in seconds. Defaults to twice the larger
    /// coherence time. Note that an analysis extrapolating the bunching
    /// peak resolves g2(0) = 2 only when the mode duration comfortably
    /// exceeds the emission offsets, so closed-loop configurations usually
    /// set this explicitly.
    pub mode_duration_s: Option<f64>,
    /// Source-to-detector transmission of each arm, applied by the router.
    pub coupling_signal: f64,
    pub coupling_idler: f64,
    pub statistics: PairStatistics,
}

impl Default for SourceParams {
    fn default() -> Self {
        SourceParams {
            pair_generation_rate_hz: 1.0e6,
            bandwidth_signal_hz: 52.8e6,
            bandwidth_idler_hz: 59.8e6,
            coherence_time_signal_s: None,
            coherence_time_idler_s: None,
            mode_duration_s: None,
            coupling_signal: 1.0,
            coupling_idler: 1.0,
            statistics: PairStatistics::Thermal,
        }
    }
}

impl SourceParams {
    pub fn tau_c_signal_s(&self) -> Result<f64> {
        match self.coherence_time_signal_s {
            Some(t) if t > 0.0 && t.is_finite() => Ok(t),
            Some(t) => Err(Error::Domain(format!("coherence time must be positive, got {t}"))),
            None => coherence_time_from_bandwidth(self.bandwidth_signal_hz),
        }
    }

    pub fn tau_c_idler_s(&self) -> Result<f64> {
        match self.coherence_time_idler_s {
            Some(t) if t > 0.0 && t.is_finite() => Ok(t),
            Some(t) => Err(Error::Domain(format!("coherence time must be positive, got {t}"))),
            None => coherence_time_from_bandwidth(self.bandwidth_idler_hz),
        }
    }

    /// Mode duration in seconds, defaulting to twice the larger coherence
    /// time. Emits a warning when the modes are shorter than a coherence
    /// time, because the bunching envelope is then under-resolved.
    pub fn mode_duration_s_resolved(&self) -> Result<f64> {
        let tau_max = self.tau_c_signal_s()?.max(self.tau_c_idler_s()?);
        let t = match self.mode_duration_s {
            Some(t) if t > 0.0 && t.is_finite() => t,
            Some(t) => {
                return Err(Error::Domain(format!("mode duration must be positive, got {t}")))
            }
            None => 2.0 * tau_max,
        };
        if t < tau_max {
            log::warn!(
                "mode duration {:.3e} s is below the larger coherence time {:.3e} s; \
                 thermal bunching will be under-resolved",
                t,
                tau_max
            );
        }
        Ok(t)
    }

    pub fn coupling(&self, arm: Arm) -> f64 {
        match arm {
            Arm::Signal => self.coupling_signal,
            Arm::Idler => self.coupling_idler,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pair_generation_rate_hz >= 0.0) || !self.pair_generation_rate_hz.is_finite() {
            return Err(Error::Domain(format!(
                "pair generation rate must be finite and non-negative, got {}",
                self.pair_generation_rate_hz
            )));
        }
        for (label, c) in [("signal", self.coupling_signal), ("idler", self.coupling_idler)] {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::Domain(format!(
                    "coupling_{label} must lie in [0, 1], got {c}"
                )));
            }
        }
        self.tau_c_signal_s()?;
        self.tau_c_idler_s()?;
        self.mode_duration_s_resolved()?;
        Ok(())
    }
}

/// Chunked deterministic pair-stream generator.
///
/// The run is partitioned into fixed ranges of `modes_per_chunk` temporal
/// modes; chunk `k` draws from a generator derived from
/// (seed, pair-source salt, k), so chunks can be produced in any order or
/// in parallel and always concatenate to the same stream. The partition
/// width is part of the stream definition: changing `modes_per_chunk`
/// produces a different (equally valid) realization.
pub struct PairStreamGenerator {
    params: SourceParams,
    seed: u64,
    mode_ps: i64,
    duration_ps: i64,
    total_modes: u64,
    modes_per_chunk: u64,
    mu_mode: f64,
    tau_s_ps: f64,
    tau_i_ps: f64,
}

impl PairStreamGenerator {
    pub fn new(
        params: &SourceParams,
        duration_s: f64,
        seed: u64,
        modes_per_chunk: u64,
    ) -> Result<Self> {
        params.validate()?;
        if !(duration_s >= 0.0) || !duration_s.is_finite() {
            return Err(Error::Domain(format!(
                "duration must be finite and non-negative, got {duration_s}"
            )));
        }
        if modes_per_chunk == 0 {
            return Err(Error::Config("modes_per_chunk must be positive".into()));
        }
        let expected_pairs = params.pair_generation_rate_hz * duration_s;
        if expected_pairs > MAX_EXPECTED_PAIRS {
            return Err(Error::Resource(format!(
                "run would generate ~{expected_pairs:.2e} pairs; split it into \
                 shorter chunked runs"
            )));
        }
        let mode_s = params.mode_duration_s_resolved()?;
        let mode_ps = s_to_ps(mode_s);
        if mode_ps < 1 {
            return Err(Error::Domain(format!(
                "mode duration {mode_s} s is below the 1 ps time resolution"
            )));
        }
        let duration_ps = s_to_ps(duration_s);
        let total_modes = duration_ps.div_euclid(mode_ps).max(0) as u64
            + if duration_ps.rem_euclid(mode_ps) > 0 { 1 } else { 0 };
        let mu_mode = params.pair_generation_rate_hz * (mode_ps as f64 / PS_PER_S);
        Ok(PairStreamGenerator {
            params: params.clone(),
            seed,
            mode_ps,
            duration_ps,
            total_modes,
            modes_per_chunk,
            mu_mode,
            tau_s_ps: params.tau_c_signal_s()? * PS_PER_S,
            tau_i_ps: params.tau_c_idler_s()? * PS_PER_S,
        })
    }

    pub fn num_chunks(&self) -> u64 {
        self.total_modes.div_ceil(self.modes_per_chunk)
    }

    pub fn mode_duration_ps(&self) -> i64 {
        self.mode_ps
    }

    /// Mean pairs per temporal mode.
    pub fn mu_mode(&self) -> f64 {
        self.mu_mode
    }

    /// Generate chunk `chunk_index` (pairs ordered by mode, not by time).
    pub fn chunk(&self, chunk_index: u64) -> Vec<PairEvent> {
        if chunk_index >= self.num_chunks() {
            return Vec::new();
        }
        let mode_start = chunk_index * self.modes_per_chunk;
        let n_modes = self.modes_per_chunk.min(self.total_modes - mode_start);
        let mut rng = derive_rng(self.seed, salt::PAIR_SOURCE, chunk_index);
        let mut out = Vec::with_capacity((self.mu_mode * n_modes as f64 * 1.1) as usize + 8);

        if self.mu_mode <= 0.0 {
            return out;
        }
        // Probability that a mode holds no pair, used to skip runs of empty
        // modes with a single geometric draw.
        let p_empty = match self.params.statistics {
            PairStatistics::Thermal => 1.0 / (1.0 + self.mu_mode),
            PairStatistics::Poisson => (-self.mu_mode).exp(),
        };
        let ln_p_empty = p_empty.ln();

        let mut m: u64 = 0;
        loop {
            // Number of consecutive empty modes before the next occupied one.
            let u = rng.random::<f64>().max(f64::MIN_POSITIVE);
            let skip = (u.ln() / ln_p_empty).floor();
            m = if skip >= (n_modes - m) as f64 { n_modes } else { m + skip as u64 };
            if m >= n_modes {
                break;
            }
            let n = self.sample_count_occupied(&mut rng);
            let mode_index = mode_start + m;
            let mode_t0 = mode_index as i64 * self.mode_ps;
            for _ in 0..n {
                let pair_time_ps = mode_t0 + rng.random_range(0..self.mode_ps);
                // Non-positive one-sided exponential emission offsets; see
                // the module docs for the sign convention.
                let signal_offset_ps = -sample_exp_ps(&mut rng, self.tau_s_ps);
                let idler_offset_ps = -sample_exp_ps(&mut rng, self.tau_i_ps);
                // The final mode may straddle the end of the run; keep the
                // stream on [0, duration) exactly.
                if pair_time_ps >= self.duration_ps {
                    continue;
                }
                out.push(PairEvent {
                    mode_index,
                    pair_time_ps,
                    signal_offset_ps,
                    idler_offset_ps,
                    pair_id: (chunk_index << 32) | (out.len() as u64),
                });
            }
            m += 1;
        }
        out
    }

    /// Draw a per-mode pair count conditioned on the mode being occupied.
    fn sample_count_occupied(&self, rng: &mut ChaCha8Rng) -> u64 {
        match self.params.statistics {
            PairStatistics::Thermal => {
                // P(n) ~ q^n for n >= 1, q = mu/(1+mu): shifted geometric.
                let q = self.mu_mode / (1.0 + self.mu_mode);
                let u = rng.random::<f64>().max(f64::MIN_POSITIVE);
                1 + (u.ln() / q.ln()).floor().min(1e6) as u64
            }
            PairStatistics::Poisson => {
                // Inverse-CDF scan over the Poisson pmf restricted to n >= 1.
                let p0 = (-self.mu_mode).exp();
                let target = p0 + rng.random::<f64>() * (1.0 - p0);
                let mut n = 0u64;
                let mut pmf = p0;
                let mut cdf = p0;
                while cdf <= target && n < 1_000_000 {
                    n += 1;
                    pmf *= self.mu_mode / n as f64;
                    cdf += pmf;
                }
                n.max(1)
            }
        }
    }
}

/// Exponential delay in integer picoseconds with mean `tau_ps`.
fn sample_exp_ps(rng: &mut ChaCha8Rng, tau_ps: f64) -> i64 {
    let u = rng.random::<f64>().max(f64::MIN_POSITIVE);
    (-tau_ps * u.ln()).round() as i64
}

/// Generate the full pair stream for `duration_s` as a single chunk.
///
/// `duration_s = 0` yields an empty stream. Large requests (expected pairs
/// beyond capacity) return a resource error; use [`PairStreamGenerator`]
/// with explicit chunking instead.
pub fn generate_pair_stream(
    params: &SourceParams,
    duration_s: f64,
    seed: u64,
) -> Result<Vec<PairEvent>> {
    let generator = PairStreamGenerator::new(params, duration_s, seed, u64::MAX)?;
    Ok(generator.chunk(0))
}

/// Bernoulli-thin one arm of a pair stream into time-sorted photon
/// arrivals. `transmission` is the total survival probability the caller
/// composed (coupling, filters, splitter ratio, ...). `chunk_index` selects
/// the random stream; callers thinning a chunked run must pass each
/// chunk's index so chunks stay independent.
pub fn apply_channel(
    pairs: &[PairEvent],
    arm: Arm,
    transmission: f64,
    seed: u64,
    chunk_index: u64,
) -> Result<Vec<PhotonArrival>> {
    if !(0.0..=1.0).contains(&transmission) {
        return Err(Error::Domain(format!(
            "transmission must lie in [0, 1], got {transmission}"
        )));
    }
    let mut rng = derive_rng(seed, salt::route(arm), chunk_index);
    let mut out = Vec::with_capacity((pairs.len() as f64 * transmission) as usize + 8);
    for p in pairs {
        if rng.random::<f64>() < transmission {
            out.push(PhotonArrival {
                time_ps: p.arrival_time_ps(arm),
                arm,
                pair_id: p.pair_id,
            });
        }
    }
    out.sort_by_key(|a| a.time_ps);
    Ok(out)
}

/// Pulsed attenuated-laser source used to characterize gated detectors.
///
/// Pulses are much shorter than a histogram bin and are modeled as
/// delta-like: every photon of a pulse arrives exactly at the pulse epoch.
/// `mean_photons_per_pulse` is defined at the detector input.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulsedLaserParams {
    pub rep_rate_hz: f64,
    pub mean_photons_per_pulse: f64,
    /// Epoch of pulse k is `k * period + pulse_phase_ps`.
    pub pulse_phase_ps: i64,
    pub arm: Arm,
}

impl PulsedLaserParams {
    pub fn period_ps(&self) -> Result<i64> {
        if !(self.rep_rate_hz > 0.0) || !self.rep_rate_hz.is_finite() {
            return Err(Error::Domain(format!(
                "repetition rate must be positive, got {}",
                self.rep_rate_hz
            )));
        }
        let p = (PS_PER_S / self.rep_rate_hz).round() as i64;
        if p < 1 {
            return Err(Error::Domain("laser period is below 1 ps".into()));
        }
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.period_ps()?;
        if !(self.mean_photons_per_pulse >= 0.0) || !self.mean_photons_per_pulse.is_finite() {
            return Err(Error::Domain(format!(
                "mean photons per pulse must be non-negative, got {}",
                self.mean_photons_per_pulse
            )));
        }
        if self.pulse_phase_ps < 0 {
            return Err(Error::Domain("pulse phase must be non-negative".into()));
        }
        Ok(())
    }
}

/// Generate the photon train of a pulsed attenuated laser over
/// `duration_s`; photon counts per pulse are Poissonian and the `pair_id`
/// of each arrival is its pulse index.
pub fn generate_pulse_train(
    params: &PulsedLaserParams,
    duration_s: f64,
    seed: u64,
) -> Result<Vec<PhotonArrival>> {
    params.validate()?;
    if !(duration_s >= 0.0) || !duration_s.is_finite() {
        return Err(Error::Domain(format!(
            "duration must be finite and non-negative, got {duration_s}"
        )));
    }
    let period = params.period_ps()?;
    let duration_ps = s_to_ps(duration_s);
    // Pulses k with `phase + k*period` inside the half-open run [0, duration).
    let n_pulses = if duration_ps > params.pulse_phase_ps {
        (duration_ps - params.pulse_phase_ps + period - 1).div_euclid(period) as u64
    } else {
        0
    };
    let expected = params.mean_photons_per_pulse * n_pulses as f64;
    if expected > MAX_EXPECTED_PAIRS {
        return Err(Error::Resource(format!(
            "pulse train would carry ~{expected:.2e} photons; chunk the run"
        )));
    }
    let mu = params.mean_photons_per_pulse;
    let mut rng = derive_rng(seed, salt::PULSED_SOURCE, 0);
    let mut out = Vec::with_capacity(expected as usize + 16);
    if mu == 0.0 {
        return Ok(out);
    }
    let p0 = (-mu).exp();
    let ln_p0 = p0.ln();
    let mut k: u64 = 0;
    loop {
        let u = rng.random::<f64>().max(f64::MIN_POSITIVE);
        let skip = (u.ln() / ln_p0).floor();
        k = if skip >= (n_pulses - k) as f64 { n_pulses } else { k + skip as u64 };
        if k >= n_pulses {
            break;
        }
        // Photon count for an occupied pulse: Poisson conditioned on >= 1.
        let target = p0 + rng.random::<f64>() * (1.0 - p0);
        let mut n = 0u64;
        let mut pmf = p0;
        let mut cdf = p0;
        while cdf <= target && n < 1_000_000 {
            n += 1;
            pmf *= mu / n as f64;
            cdf += pmf;
        }
        let t = params.pulse_phase_ps + k as i64 * period;
        for _ in 0..n.max(1) {
            out.push(PhotonArrival { time_ps: t, arm: params.arm, pair_id: k });
        }
        k += 1;
    }
    Ok(out)
}
