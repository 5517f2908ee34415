//! Gated-detector characterization with a pulsed attenuated laser.
//!
//! The measurement folds a detector's time tags by the laser period into a
//! histogram of counts per time bin. With the laser pulse parked in one
//! bin, the histogram separates three populations: laser counts in the
//! pulse bin, dark counts spread uniformly over the live gates, and
//! afterpulses decaying away from the pulse bin. From it the toolkit
//! estimates:
//!
//! * the dark count rate, either from a laser-off record or from a window
//!   of bins far enough behind the pulse that the afterpulse tail has
//!   died out;
//! * the photon detection efficiency two ways: a dark-compensated
//!   logarithmic form exact for Poissonian illumination,
//!   `pde = ln((1 - p_dark)/(1 - p_trigger)) / mu`, and a linear form
//!   that references the detected laser counts to the number of non-empty
//!   pulses, `pde = (C_L - darks_L) / ((1 - e^{-mu}) * N_pulses)`;
//! * the afterpulse probability as the count excess over laser plus dark
//!   counts, `(C_total - C_L - darks_total) / (C_L - darks_L)`.
//!
//! [`apply_software_deadtime`] re-imposes a longer hold-off on a recorded
//! tag stream, so a single low-hold-off acquisition can be re-analyzed for
//! a whole hold-off sweep without re-measuring.

use serde::{Deserialize, Serialize};

use crate::detector::GateClock;
use crate::error::{Error, Result};
use crate::types::{Estimate, TimeTag, PS_PER_S};

/// Counts of time tags folded by a fixed period.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodHistogram {
    pub period_ps: i64,
    pub bin_width_ps: i64,
    /// Wall-clock acquisition time the tags were collected over, seconds.
    pub integration_time_s: f64,
    pub counts: Vec<u64>,
}

impl PeriodHistogram {
    pub fn n_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn total_counts(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Sum of the closed bin range `[first, last]`.
    pub fn window_counts(&self, first: usize, last: usize) -> Result<u64> {
        if first > last || last >= self.counts.len() {
            return Err(Error::Precondition(format!(
                "bin window [{first}, {last}] exceeds the histogram ({} bins)",
                self.counts.len()
            )));
        }
        Ok(self.counts[first..=last].iter().sum())
    }

    /// Copy with the bins cyclically shifted so `start_bin` becomes bin 0;
    /// estimators that window "behind the pulse" use pulse-relative bins.
    pub fn rotated(&self, start_bin: usize) -> Result<PeriodHistogram> {
        if start_bin >= self.counts.len() {
            return Err(Error::Precondition(format!(
                "rotation start {start_bin} exceeds the histogram ({} bins)",
                self.counts.len()
            )));
        }
        let mut counts = Vec::with_capacity(self.counts.len());
        counts.extend_from_slice(&self.counts[start_bin..]);
        counts.extend_from_slice(&self.counts[..start_bin]);
        Ok(PeriodHistogram { counts, ..*self })
    }

    pub fn validate(&self) -> Result<()> {
        if self.bin_width_ps < 1
            || self.period_ps < 1
            || self.period_ps % self.bin_width_ps != 0
        {
            return Err(Error::Config(format!(
                "period {} ps must be a positive multiple of the bin width {} ps",
                self.period_ps, self.bin_width_ps
            )));
        }
        if self.counts.len() as i64 != self.period_ps / self.bin_width_ps {
            return Err(Error::Config(format!(
                "histogram holds {} bins but period/bin = {}",
                self.counts.len(),
                self.period_ps / self.bin_width_ps
            )));
        }
        if !(self.integration_time_s >= 0.0) || !self.integration_time_s.is_finite() {
            return Err(Error::Config(format!(
                "integration time must be finite and non-negative, got {}",
                self.integration_time_s
            )));
        }
        Ok(())
    }
}

/// Fold tag times by `period_ps` into bins of `bin_width_ps`.
/// `integration_time_s` is the acquisition duration the rates are
/// referenced to; it is carried, not inferred, so sparse records keep
/// honest rate denominators.
pub fn build_period_histogram(
    tags: &[TimeTag],
    period_ps: i64,
    bin_width_ps: i64,
    integration_time_s: f64,
) -> Result<PeriodHistogram> {
    if bin_width_ps < 1 || period_ps < 1 || period_ps % bin_width_ps != 0 {
        return Err(Error::Config(format!(
            "period {period_ps} ps must be a positive multiple of the bin width {bin_width_ps} ps"
        )));
    }
    if !(integration_time_s >= 0.0) || !integration_time_s.is_finite() {
        return Err(Error::Config(format!(
            "integration time must be finite and non-negative, got {integration_time_s}"
        )));
    }
    let n_bins = (period_ps / bin_width_ps) as usize;
    let mut counts = vec![0u64; n_bins];
    for tag in tags {
        let idx = (tag.time_ps.rem_euclid(period_ps) / bin_width_ps) as usize;
        counts[idx] += 1;
    }
    Ok(PeriodHistogram { period_ps, bin_width_ps, integration_time_s, counts })
}

/// What the characterization run illuminated the detector with: a pulsed
/// attenuated laser of known mean photon number per pulse.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PulsedSourceSpec {
    pub rep_rate_hz: f64,
    /// Mean photon number per pulse at the detector input.
    pub mean_photons_per_pulse: f64,
    /// Epoch of pulse k is `k * period + pulse_phase_ps`.
    pub pulse_phase_ps: i64,
    /// Half-width of the pulse bin window, in bins on each side of the
    /// pulse bin (0 = the single bin holding the pulse).
    pub laser_half_width_bins: usize,
}

impl PulsedSourceSpec {
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

    /// Number of pulses whose epoch lies in `[0, duration)`; matches the
    /// pulse-train generator exactly.
    pub fn n_pulses(&self, duration_s: f64) -> Result<u64> {
        let period = self.period_ps()?;
        let duration_ps = crate::types::s_to_ps(duration_s);
        Ok(if duration_ps > self.pulse_phase_ps {
            (duration_ps - self.pulse_phase_ps + period - 1).div_euclid(period) as u64
        } else {
            0
        })
    }

    /// Probability that a pulse carries at least one photon,
    /// `1 - e^{-mu}`.
    pub fn occupied_pulse_probability(&self) -> f64 {
        1.0 - (-self.mean_photons_per_pulse).exp()
    }

    /// Check the laser clock against the detector gating: the laser period
    /// must hold an integer number of gates, and the pulse should land in
    /// a live gate (warned, not fatal, so phase scans stay expressible).
    pub fn validate_against(&self, gate: &GateClock) -> Result<()> {
        if !(self.mean_photons_per_pulse >= 0.0) || !self.mean_photons_per_pulse.is_finite() {
            return Err(Error::Domain(format!(
                "mean photons per pulse must be non-negative, got {}",
                self.mean_photons_per_pulse
            )));
        }
        if self.pulse_phase_ps < 0 {
            return Err(Error::Domain("pulse phase must be non-negative".into()));
        }
        let laser_period = self.period_ps()?;
        let gate_period = gate.period_ps()?;
        if laser_period % gate_period != 0 {
            return Err(Error::Config(format!(
                "laser period {laser_period} ps is not a whole number of \
                 {gate_period} ps gates"
            )));
        }
        let in_gate = (self.pulse_phase_ps - gate.phase_offset_ps).rem_euclid(gate_period)
            < gate.gate_width_ps;
        if !in_gate {
            log::warn!(
                "laser pulse phase {} ps falls between detector gates; \
                 expect zero laser counts",
                self.pulse_phase_ps
            );
        }
        Ok(())
    }

    /// Histogram bin holding the pulse epoch.
    pub fn pulse_bin(&self, hist: &PeriodHistogram) -> Result<usize> {
        let period = self.period_ps()?;
        if hist.period_ps != period {
            return Err(Error::Precondition(format!(
                "histogram period {} ps does not match the laser period {period} ps",
                hist.period_ps
            )));
        }
        Ok((self.pulse_phase_ps.rem_euclid(period) / hist.bin_width_ps) as usize)
    }

    /// Closed bin range `[first, last]` of the laser window.
    pub fn laser_window(&self, hist: &PeriodHistogram) -> Result<(usize, usize)> {
        let center = self.pulse_bin(hist)?;
        let h = self.laser_half_width_bins;
        let first = center.saturating_sub(h);
        let last = (center + h).min(hist.n_bins() - 1);
        Ok((first, last))
    }
}

/// Mean-photon-number correction for multi-photon pulses: the probability
/// `1 - e^{-mu}` that a Poissonian pulse is non-empty.
pub fn occupied_pulse_probability(mean_photons: f64) -> f64 {
    1.0 - (-mean_photons).exp()
}

/// Dark count rate from a laser-off record: total counts over integration
/// time, afterpulses of dark counts included, exactly as a free-running
/// dark measurement reports it.
pub fn dark_rate_from_laser_off(hist: &PeriodHistogram) -> Result<Estimate> {
    hist.validate()?;
    if hist.integration_time_s <= 0.0 {
        return Err(Error::Estimation(
            "dark rate needs a positive integration time".into(),
        ));
    }
    let n = hist.total_counts() as f64;
    Ok(Estimate { value: n / hist.integration_time_s, std_err: n.sqrt() / hist.integration_time_s })
}

/// Dark count rate from the far tail of a laser-on histogram: the bins in
/// `window` (a closed range, chosen far enough behind the pulse that the
/// afterpulse tail is negligible) hold only dark counts, which are uniform
/// over the period, so their rate extrapolates to the whole record.
pub fn dark_rate_from_far_window(
    hist: &PeriodHistogram,
    window: (usize, usize),
) -> Result<Estimate> {
    hist.validate()?;
    if hist.integration_time_s <= 0.0 {
        return Err(Error::Estimation(
            "dark rate needs a positive integration time".into(),
        ));
    }
    let counts = hist.window_counts(window.0, window.1)? as f64;
    let window_fraction = (window.1 - window.0 + 1) as f64 / hist.n_bins() as f64;
    let live = hist.integration_time_s * window_fraction;
    Ok(Estimate { value: counts / live, std_err: counts.sqrt() / live })
}

/// Dark-compensated logarithmic detection efficiency,
/// `pde = ln((1 - p_dark)/(1 - p_trigger)) / mu`, exact for Poissonian
/// pulses of mean photon number `mu` when triggers per pulse saturate as
/// `p_trigger = 1 - (1 - p_dark) e^{-pde * mu}`.
///
/// `p_trigger` is the laser-window trigger probability per pulse and
/// `p_dark` the dark trigger probability in the same window. A noisy
/// record can push the raw value negative; that is reported (with a
/// warning), not clamped, so averages over repeated runs stay unbiased.
pub fn pde_logarithmic(p_trigger: f64, p_dark: f64, mean_photons: f64) -> Result<f64> {
    if !(mean_photons > 0.0) || !mean_photons.is_finite() {
        return Err(Error::Domain(format!(
            "mean photons per pulse must be positive, got {mean_photons}"
        )));
    }
    for (label, p) in [("p_trigger", p_trigger), ("p_dark", p_dark)] {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Domain(format!("{label} must lie in [0, 1), got {p}")));
        }
    }
    let pde = ((1.0 - p_dark) / (1.0 - p_trigger)).ln() / mean_photons;
    if pde < 0.0 {
        log::warn!(
            "logarithmic pde came out negative ({pde:.3e}): dark trigger probability \
             exceeds the laser-window trigger probability"
        );
    }
    Ok(pde)
}

/// Linear detection efficiency referenced to non-empty pulses:
/// `pde = (laser_counts - expected darks in the window) /
/// ((1 - e^{-mu}) * n_pulses)`.
///
/// `laser_window_live_s` is the accumulated wall time of the laser window
/// (number of pulses times window width), which converts the dark rate
/// into the expected dark count under the pulse.
pub fn pde_linear(
    laser_counts: u64,
    dark_rate: &Estimate,
    laser_window_live_s: f64,
    mean_photons: f64,
    n_pulses: u64,
) -> Result<Estimate> {
    if !(mean_photons > 0.0) || !mean_photons.is_finite() {
        return Err(Error::Domain(format!(
            "mean photons per pulse must be positive, got {mean_photons}"
        )));
    }
    if n_pulses == 0 {
        return Err(Error::Estimation("linear pde needs at least one pulse".into()));
    }
    if !(laser_window_live_s >= 0.0) || !laser_window_live_s.is_finite() {
        return Err(Error::Domain(format!(
            "laser window live time must be non-negative, got {laser_window_live_s}"
        )));
    }
    let denom = occupied_pulse_probability(mean_photons) * n_pulses as f64;
    let dark_in_window = dark_rate.value * laser_window_live_s;
    let value = (laser_counts as f64 - dark_in_window) / denom;
    if value < 0.0 {
        log::warn!(
            "linear pde came out negative ({value:.3e}): expected darks exceed \
             the laser-window counts"
        );
    }
    let var = laser_counts as f64 + (dark_rate.std_err * laser_window_live_s).powi(2);
    Ok(Estimate { value, std_err: var.sqrt() / denom })
}

/// Afterpulse probability per detected laser count: the excess of the
/// record over laser and dark counts, normalized to the dark-compensated
/// laser counts:
/// `(total - laser - dark_rate*T_dark) / (laser - dark_rate*t_laser)`.
///
/// `dark_exposure_s` is the live time accumulated by the counts in
/// `total - laser` (the record outside the laser window), so the dark
/// subtraction stays consistent when parts of the record are discarded.
pub fn afterpulse_probability(
    total_counts: u64,
    laser_counts: u64,
    dark_rate: &Estimate,
    dark_exposure_s: f64,
    laser_window_live_s: f64,
) -> Result<Estimate> {
    if laser_counts > total_counts {
        return Err(Error::Precondition(format!(
            "laser counts {laser_counts} exceed total counts {total_counts}"
        )));
    }
    let num = total_counts as f64 - laser_counts as f64 - dark_rate.value * dark_exposure_s;
    let den = laser_counts as f64 - dark_rate.value * laser_window_live_s;
    if den <= 0.0 {
        return Err(Error::Estimation(format!(
            "afterpulse probability undefined: dark-compensated laser counts {den:.3} <= 0"
        )));
    }
    let value = num / den;
    if value < 0.0 {
        log::warn!(
            "afterpulse probability came out negative ({value:.3e}); \
             record is consistent with zero afterpulsing"
        );
    }
    // Variance of the ratio with independent Poisson numerator counts
    // (total - laser and laser live in disjoint bins) and the dark-rate
    // uncertainty folded into both terms.
    let var_num = (total_counts - laser_counts) as f64
        + (dark_rate.std_err * dark_exposure_s).powi(2);
    let var_den = laser_counts as f64 + (dark_rate.std_err * laser_window_live_s).powi(2);
    let std_err = (var_num + value * value * var_den).sqrt() / den;
    Ok(Estimate { value, std_err })
}

/// Afterpulse probability from a folded histogram with an emulated
/// hold-off: the `holdoff_ps` worth of bins following the laser window
/// are discarded (cyclically), exactly as a detector holding off for
/// `holdoff_ps` after the pulse would never have recorded them. The dark
/// subtraction in the numerator uses the retained non-laser bins only, so
/// counts and exposure always refer to the same part of the record.
///
/// Sweeping `holdoff_ps` over one zero-hold-off acquisition reproduces a
/// whole family of hold-off measurements from a single record.
pub fn afterpulse_from_histogram(
    hist: &PeriodHistogram,
    spec: &PulsedSourceSpec,
    dark_rate: &Estimate,
    holdoff_ps: i64,
) -> Result<Estimate> {
    hist.validate()?;
    if holdoff_ps < 0 {
        return Err(Error::Domain(format!(
            "hold-off must be non-negative, got {holdoff_ps} ps"
        )));
    }
    let n_pulses = spec.n_pulses(hist.integration_time_s)?;
    if n_pulses == 0 {
        return Err(Error::Estimation(
            "afterpulse estimation needs at least one pulse".into(),
        ));
    }
    let (first, last) = spec.laser_window(hist)?;
    let window_bins = last - first + 1;
    let n_bins = hist.n_bins();
    // Round the hold-off up to whole bins: a partially covered bin cannot
    // be split, and hold-off semantics are "at least this long".
    let holdoff_bins = ((holdoff_ps + hist.bin_width_ps - 1) / hist.bin_width_ps) as usize;
    if window_bins + holdoff_bins >= n_bins {
        return Err(Error::Precondition(format!(
            "hold-off of {holdoff_bins} bins plus the {window_bins}-bin laser window \
             leaves no bins to estimate from ({n_bins} per period)"
        )));
    }
    let mut discarded = 0u64;
    for k in 0..holdoff_bins {
        discarded += hist.counts[(last + 1 + k) % n_bins];
    }
    let c_laser = hist.window_counts(first, last)?;
    let c_total = hist.total_counts() - discarded;
    let bin_s = hist.bin_width_ps as f64 / PS_PER_S;
    let dark_exposure_s = n_pulses as f64 * (n_bins - window_bins - holdoff_bins) as f64 * bin_s;
    let laser_window_live_s = n_pulses as f64 * window_bins as f64 * bin_s;
    afterpulse_probability(c_total, c_laser, dark_rate, dark_exposure_s, laser_window_live_s)
}

/// Afterpulse probability as a function of emulated hold-off, from one
/// histogram.
pub fn afterpulse_holdoff_sweep(
    hist: &PeriodHistogram,
    spec: &PulsedSourceSpec,
    dark_rate: &Estimate,
    holdoffs_ps: &[i64],
) -> Result<Vec<(i64, Estimate)>> {
    holdoffs_ps
        .iter()
        .map(|&h| afterpulse_from_histogram(hist, spec, dark_rate, h).map(|e| (h, e)))
        .collect()
}

/// Convert a dark count rate in Hz to a probability per detector gate.
pub fn dark_probability_per_gate(dark_rate: &Estimate, gate_frequency_hz: f64) -> Result<Estimate> {
    if !(gate_frequency_hz > 0.0) || !gate_frequency_hz.is_finite() {
        return Err(Error::Domain(format!(
            "gate frequency must be positive, got {gate_frequency_hz}"
        )));
    }
    Ok(Estimate {
        value: dark_rate.value / gate_frequency_hz,
        std_err: dark_rate.std_err / gate_frequency_hz,
    })
}

/// Everything the pulsed-laser characterization extracts from one
/// laser-on histogram plus a dark-rate estimate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GatedDetectorReport {
    pub n_pulses: u64,
    pub laser_counts: u64,
    pub total_counts: u64,
    /// Trigger probability per pulse inside the laser window.
    pub p_trigger: f64,
    /// Dark trigger probability per pulse inside the laser window.
    pub p_dark_window: f64,
    pub dark_rate_hz: Estimate,
    pub pde_logarithmic: Estimate,
    pub pde_linear: Estimate,
    pub afterpulse_probability: Estimate,
}

/// Run the full estimator chain on a laser-on histogram; the acquisition
/// time is taken from the histogram.
pub fn characterize_gated(
    hist_on: &PeriodHistogram,
    spec: &PulsedSourceSpec,
    dark_rate: &Estimate,
) -> Result<GatedDetectorReport> {
    hist_on.validate()?;
    let duration_s = hist_on.integration_time_s;
    let n_pulses = spec.n_pulses(duration_s)?;
    if n_pulses == 0 {
        return Err(Error::Estimation("characterization needs at least one pulse".into()));
    }
    let (first, last) = spec.laser_window(hist_on)?;
    let laser_counts = hist_on.window_counts(first, last)?;
    let total_counts = hist_on.total_counts();
    let window_bins = (last - first + 1) as f64;
    let laser_window_live_s =
        n_pulses as f64 * window_bins * hist_on.bin_width_ps as f64 / PS_PER_S;

    let p_trigger = laser_counts as f64 / n_pulses as f64;
    let p_dark_window = (dark_rate.value * laser_window_live_s / n_pulses as f64).min(1.0 - 1e-12);
    let mu = spec.mean_photons_per_pulse;

    let pde_log = pde_logarithmic(p_trigger.min(1.0 - 1e-12), p_dark_window.max(0.0), mu)?;
    // Error on the logarithmic form from the Poisson spread of the laser
    // counts and the dark-rate uncertainty.
    let sigma_pt = (laser_counts as f64).sqrt() / n_pulses as f64;
    let sigma_pd = dark_rate.std_err * laser_window_live_s / n_pulses as f64;
    let pde_log_err = ((sigma_pt / (1.0 - p_trigger)).powi(2)
        + (sigma_pd / (1.0 - p_dark_window)).powi(2))
    .sqrt()
        / mu;

    let pde_lin = pde_linear(laser_counts, dark_rate, laser_window_live_s, mu, n_pulses)?;
    let app = afterpulse_probability(
        total_counts,
        laser_counts,
        dark_rate,
        duration_s - laser_window_live_s,
        laser_window_live_s,
    )?;

    Ok(GatedDetectorReport {
        n_pulses,
        laser_counts,
        total_counts,
        p_trigger,
        p_dark_window,
        dark_rate_hz: *dark_rate,
        pde_logarithmic: Estimate { value: pde_log, std_err: pde_log_err },
        pde_linear: pde_lin,
        afterpulse_probability: app,
    })
}

/// Re-impose a minimum gap per channel on a time-ordered tag stream
/// (keep-first greedy), emulating a longer detector hold-off in software.
/// Tags of different channels never suppress each other.
pub fn apply_software_deadtime(tags: &[TimeTag], min_gap_ps: i64) -> Vec<TimeTag> {
    if min_gap_ps <= 0 {
        return tags.to_vec();
    }
    let mut last_kept: [Option<i64>; 256] = [None; 256];
    let mut out = Vec::with_capacity(tags.len());
    for tag in tags {
        match last_kept[tag.channel as usize] {
            Some(l) if tag.time_ps - l < min_gap_ps => {}
            _ => {
                last_kept[tag.channel as usize] = Some(tag.time_ps);
                out.push(tag.clone());
            }
        }
    }
    out
}
