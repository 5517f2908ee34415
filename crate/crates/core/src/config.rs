//! TOML run configuration: one file describes the source, the detector
//! park, the optical wiring between them, and the analysis settings, so a
//! whole experiment is reproducible from the file plus its seed.
//!
//! Every physical quantity carries its unit in the key name (`*_s`,
//! `*_ps`, `*_hz`); unknown keys are rejected rather than ignored, so a
//! mistyped unit suffix fails the parse instead of silently falling back
//! to a default.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::{SnspdParams, SpadParams};
use crate::error::{Error, Result};
use crate::source::{PulsedLaserParams, SourceParams};
use crate::types::Arm;

/// Top-level run description, the unit of reproducibility.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub source: SourceConfig,
    #[serde(rename = "detector")]
    pub detectors: Vec<DetectorEntry>,
    #[serde(default)]
    pub topology: Topology,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub characterize: Option<CharacterizeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Simulated acquisition time in seconds of detector time.
    pub duration_s: f64,
    /// Root of all randomness; there is no wall-clock seeding.
    pub seed: u64,
    /// Temporal modes generated per chunk; bounds the working set and sets
    /// the parallelism grain without changing any result.
    #[serde(default = "default_chunk_modes")]
    pub chunk_modes: u64,
    /// Default output directory; command-line flags take precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

fn default_chunk_modes() -> u64 {
    4_000_000
}

/// What emits light: a photon-pair source or a pulsed attenuated laser
/// (the calibration source for detector characterization).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceConfig {
    Pairs(SourceParams),
    PulsedLaser(PulsedLaserParams),
}

/// One detector and the readout channel its tags appear on.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectorEntry {
    pub channel: u8,
    #[serde(flatten)]
    pub kind: DetectorKind,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DetectorKind {
    Spad(SpadParams),
    Snspd(SnspdParams),
}

/// One optical path from an arm to a detector channel.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Route {
    pub channel: u8,
    /// Splitter fraction of the arm's light sent down this path; the
    /// fractions of one arm must sum to 1.
    pub ratio: f64,
    /// Transmission of the path after the split (filters, fibers,
    /// connectors).
    #[serde(default = "default_transmission")]
    pub transmission: f64,
}

fn default_transmission() -> f64 {
    1.0
}

/// Which detector channels each source arm feeds. An arm with no routes
/// is simply discarded (all loss).
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    #[serde(default)]
    pub signal: Vec<Route>,
    #[serde(default)]
    pub idler: Vec<Route>,
}

impl Topology {
    pub fn routes(&self, arm: Arm) -> &[Route] {
        match arm {
            Arm::Signal => &self.signal,
            Arm::Idler => &self.idler,
        }
    }
}

/// Settings of the correlation analysis stage.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Channel whose detections announce partner photons.
    pub herald_channel: u8,
    /// Channel carrying the heralded photons.
    pub signal_channel: u8,
    /// Second detector on the heralded arm, when it is split for
    /// intensity-correlation measurements.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hbt_channel: Option<u8>,
    /// Delay histogram bin width.
    pub bin_width_ps: i64,
    /// Delay bins on each side of zero.
    pub half_bins: usize,
    /// Explicit coincidence window `[lo, hi]` around zero delay; when
    /// absent, the 1/e span of the fitted cross-correlation peak is used.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coincidence_window_ps: Option<(i64, i64)>,
    /// Full width of the window pairing heralds with photons for the
    /// heralded correlation.
    pub heralded_window_ps: i64,
    /// Minimum gap re-imposed per channel before analysis; 0 disables.
    pub software_deadtime_s: f64,
    /// Channels the software deadtime applies to; absent means every
    /// analyzed channel.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub software_deadtime_channels: Option<Vec<u8>>,
    /// Histogram bins need at least this many counts to enter fits.
    pub fit_min_counts: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            herald_channel: 0,
            signal_channel: 1,
            hbt_channel: None,
            bin_width_ps: 100,
            half_bins: 150,
            coincidence_window_ps: None,
            heralded_window_ps: 3000,
            software_deadtime_s: 0.0,
            software_deadtime_channels: None,
            fit_min_counts: 10,
        }
    }
}

/// Settings of the pulsed-laser detector characterization stage. The
/// laser itself is the run's source (`kind = "pulsed_laser"`).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CharacterizeConfig {
    /// Detector channel under test; must be a gated detector.
    pub channel: u8,
    /// Folded-histogram bin width; defaults to one gate period.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hist_bin_width_ps: Option<i64>,
    /// Laser-window half width in bins around the pulse bin.
    #[serde(default)]
    pub laser_half_width_bins: usize,
    /// Emulated hold-off times for the afterpulse curve.
    #[serde(default = "default_holdoff_sweep")]
    pub holdoff_sweep_s: Vec<f64>,
    /// Fraction of the period, ending just before the next pulse, used as
    /// the dark-count estimation window.
    #[serde(default = "default_far_window_fraction")]
    pub far_window_fraction: f64,
    /// Treat the record as a dark measurement: report the dark rate only.
    #[serde(default)]
    pub laser_off: bool,
}

fn default_holdoff_sweep() -> Vec<f64> {
    vec![0.0, 1.0e-7, 1.0e-6, 5.0e-6]
}

fn default_far_window_fraction() -> f64 {
    0.3
}

/// Pump-power ladder for rate sweeps: the pair generation rate scales as
/// the square of the pump power relative to the reference point, at which
/// the configured rate applies.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub pump_powers_uw: Vec<f64>,
    pub reference_power_uw: f64,
    /// Per-point acquisition times; defaults to the run duration for all.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub durations_s: Option<Vec<f64>>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Canonical serialized form; its digest identifies the run.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config serialize: {e}")))
    }

    pub fn declared_channels(&self) -> BTreeSet<u8> {
        self.detectors.iter().map(|d| d.channel).collect()
    }

    pub fn detector(&self, channel: u8) -> Option<&DetectorEntry> {
        self.detectors.iter().find(|d| d.channel == channel)
    }

    /// The gated-detector parameters of `channel`, or a configuration
    /// error naming what was found instead.
    pub fn spad_params(&self, channel: u8) -> Result<&SpadParams> {
        match self.detector(channel).map(|d| &d.kind) {
            Some(DetectorKind::Spad(p)) => Ok(p),
            Some(DetectorKind::Snspd(_)) => Err(Error::Config(format!(
                "channel {channel} is a free-running detector; this operation needs a gated one"
            ))),
            None => Err(Error::Config(format!("channel {channel} is not declared"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let run = &self.run;
        if !(run.duration_s >= 0.0) || !run.duration_s.is_finite() {
            return Err(Error::Config(format!(
                "run duration must be finite and non-negative, got {}",
                run.duration_s
            )));
        }
        if run.chunk_modes == 0 {
            return Err(Error::Config("chunk_modes must be at least 1".into()));
        }

        match &self.source {
            SourceConfig::Pairs(p) => p.validate()?,
            SourceConfig::PulsedLaser(p) => p.validate()?,
        }

        if self.detectors.is_empty() {
            return Err(Error::Config("at least one detector must be declared".into()));
        }
        let mut seen = BTreeSet::new();
        for entry in &self.detectors {
            if !seen.insert(entry.channel) {
                return Err(Error::Config(format!(
                    "channel {} is declared twice",
                    entry.channel
                )));
            }
            match &entry.kind {
                DetectorKind::Spad(p) => p.validate()?,
                DetectorKind::Snspd(p) => p.validate()?,
            }
        }

        for (arm, routes) in
            [(Arm::Signal, &self.topology.signal), (Arm::Idler, &self.topology.idler)]
        {
            if routes.is_empty() {
                continue;
            }
            let mut ratio_sum = 0.0;
            let mut arm_channels = BTreeSet::new();
            for route in routes {
                if !seen.contains(&route.channel) {
                    return Err(Error::Config(format!(
                        "{arm:?} arm routes to undeclared channel {}",
                        route.channel
                    )));
                }
                if !arm_channels.insert(route.channel) {
                    return Err(Error::Config(format!(
                        "{arm:?} arm routes to channel {} twice",
                        route.channel
                    )));
                }
                if !(route.ratio > 0.0 && route.ratio <= 1.0) || !route.ratio.is_finite() {
                    return Err(Error::Config(format!(
                        "splitter ratio must lie in (0, 1], got {}",
                        route.ratio
                    )));
                }
                if !(0.0..=1.0).contains(&route.transmission) || !route.transmission.is_finite() {
                    return Err(Error::Config(format!(
                        "transmission must lie in [0, 1], got {}",
                        route.transmission
                    )));
                }
                ratio_sum += route.ratio;
            }
            if (ratio_sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "{arm:?} arm splitter ratios sum to {ratio_sum}, must sum to 1"
                )));
            }
        }

        let analysis = &self.analysis;
        for (label, ch) in [
            ("herald_channel", analysis.herald_channel),
            ("signal_channel", analysis.signal_channel),
        ] {
            if !seen.contains(&ch) {
                return Err(Error::Config(format!("analysis {label} {ch} is not declared")));
            }
        }
        if analysis.herald_channel == analysis.signal_channel {
            return Err(Error::Config(
                "herald and signal channels must be different detectors".into(),
            ));
        }
        if let Some(hbt) = analysis.hbt_channel {
            if !seen.contains(&hbt) {
                return Err(Error::Config(format!("analysis hbt_channel {hbt} is not declared")));
            }
            if hbt == analysis.herald_channel || hbt == analysis.signal_channel {
                return Err(Error::Config(
                    "hbt_channel must be a third detector, distinct from herald and signal".into(),
                ));
            }
        }
        if analysis.bin_width_ps < 1 {
            return Err(Error::Config(format!(
                "analysis bin width must be at least 1 ps, got {}",
                analysis.bin_width_ps
            )));
        }
        if analysis.half_bins == 0 {
            return Err(Error::Config("analysis needs at least one bin on each side".into()));
        }
        if let Some((lo, hi)) = analysis.coincidence_window_ps {
            if lo >= hi {
                return Err(Error::Config(format!(
                    "coincidence window [{lo}, {hi}] ps is empty"
                )));
            }
        }
        if analysis.heralded_window_ps < 1 {
            return Err(Error::Config(format!(
                "heralded window must be at least 1 ps, got {}",
                analysis.heralded_window_ps
            )));
        }
        if !(analysis.software_deadtime_s >= 0.0) || !analysis.software_deadtime_s.is_finite() {
            return Err(Error::Config(format!(
                "software deadtime must be non-negative, got {}",
                analysis.software_deadtime_s
            )));
        }
        if let Some(channels) = &analysis.software_deadtime_channels {
            for &ch in channels {
                if !self.declared_channels().contains(&ch) {
                    return Err(Error::Config(format!(
                        "software deadtime channel {ch} is not declared"
                    )));
                }
            }
        }

        if let Some(c) = &self.characterize {
            self.spad_params(c.channel)?;
            if let Some(w) = c.hist_bin_width_ps {
                if w < 1 {
                    return Err(Error::Config(format!(
                        "characterize bin width must be at least 1 ps, got {w}"
                    )));
                }
            }
            if !(c.far_window_fraction > 0.0 && c.far_window_fraction < 1.0) {
                return Err(Error::Config(format!(
                    "far window fraction must lie in (0, 1), got {}",
                    c.far_window_fraction
                )));
            }
            for &h in &c.holdoff_sweep_s {
                if !(h >= 0.0) || !h.is_finite() {
                    return Err(Error::Config(format!(
                        "hold-off sweep values must be non-negative, got {h}"
                    )));
                }
            }
        }

        if let Some(s) = &self.sweep {
            if s.pump_powers_uw.is_empty() {
                return Err(Error::Config("sweep needs at least one pump power".into()));
            }
            for &p in &s.pump_powers_uw {
                if !(p > 0.0) || !p.is_finite() {
                    return Err(Error::Config(format!("pump powers must be positive, got {p}")));
                }
            }
            if !(s.reference_power_uw > 0.0) || !s.reference_power_uw.is_finite() {
                return Err(Error::Config(format!(
                    "reference power must be positive, got {}",
                    s.reference_power_uw
                )));
            }
            if let Some(d) = &s.durations_s {
                if d.len() != s.pump_powers_uw.len() {
                    return Err(Error::Config(format!(
                        "sweep lists {} durations for {} powers",
                        d.len(),
                        s.pump_powers_uw.len()
                    )));
                }
                for &t in d {
                    if !(t >= 0.0) || !t.is_finite() {
                        return Err(Error::Config(format!(
                            "sweep durations must be non-negative, got {t}"
                        )));
                    }
                }
            }
        }

        Ok(())
    }
}
