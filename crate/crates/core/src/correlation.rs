//! Delay histograms and correlation functions on time-tag streams.
//!
//! Delays are binned symmetrically around zero: with bin width `w` the
//! signed delay `d` maps to bin index `sign(d) * floor((|d| + floor(w/2)) / w)`,
//! so the histogram always has an odd number of bins, bin `j` is centered
//! at `tau = j*w`, and the binning commutes with delay negation exactly.
//! Rounding is away from zero, which makes the center bin one tick
//! narrower than `w` for even `w`; per-bin normalization uses the exact
//! effective widths so a flat (uncorrelated) input normalizes to
//! `g2 = 1` in every bin, including the center.
//!
//! The accumulators are streaming: feed tags in global time order and each
//! new tag is paired against a bounded buffer of recent tags from the
//! other channel (or the same channel for the autocorrelation), so memory
//! stays proportional to the delay span, not the record length.
//!
//! Normalization references the accidental (uncorrelated) level
//! `n_left * n_right * w_bin / T`, giving the dimensionless second-order
//! correlation `g2(tau)`. The heralded zero-delay correlation uses the
//! standard three-detector estimator
//! `g2_h(0) = N_hab * N_h / (N_ha * N_hb)` with both arms gated by the
//! same coincidence window around each herald.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Estimate, TimeTag};

/// Signed-delay histogram with exact mirror symmetry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationHistogram {
    pub bin_width_ps: i64,
    /// Bins on each side of the center bin; total bins = 2*half_bins + 1.
    pub half_bins: usize,
    /// Pair counts, index 0 = most negative delay.
    pub counts: Vec<u64>,
    /// Tags consumed on the left (reference) channel.
    pub n_left: u64,
    /// Tags consumed on the right (delayed) channel.
    pub n_right: u64,
    /// Acquisition span the rates are referenced to.
    pub duration_ps: i64,
}

impl CorrelationHistogram {
    fn empty(bin_width_ps: i64, half_bins: usize, duration_ps: i64) -> Result<Self> {
        if bin_width_ps < 1 {
            return Err(Error::Config(format!(
                "bin width must be at least 1 ps, got {bin_width_ps}"
            )));
        }
        if half_bins == 0 {
            return Err(Error::Config("need at least one bin on each side of zero".into()));
        }
        if duration_ps < 1 {
            return Err(Error::Config(format!(
                "duration must be positive, got {duration_ps} ps"
            )));
        }
        Ok(CorrelationHistogram {
            bin_width_ps,
            half_bins,
            counts: vec![0; 2 * half_bins + 1],
            n_left: 0,
            n_right: 0,
            duration_ps,
        })
    }

    pub fn n_bins(&self) -> usize {
        2 * self.half_bins + 1
    }

    /// Largest |delay| the histogram covers.
    pub fn max_delay_ps(&self) -> i64 {
        let w = self.bin_width_ps;
        self.half_bins as i64 * w + (w + 1) / 2 - 1
    }

    /// Histogram index of a signed delay, or None beyond the span.
    pub fn index_of_delay(&self, delay_ps: i64) -> Option<usize> {
        let w = self.bin_width_ps;
        let j = (delay_ps.abs() + w / 2) / w * delay_ps.signum();
        if j.unsigned_abs() > self.half_bins as u64 {
            return None;
        }
        Some((j + self.half_bins as i64) as usize)
    }

    /// Center delay of bin `index`.
    pub fn tau_at(&self, index: usize) -> i64 {
        (index as i64 - self.half_bins as i64) * self.bin_width_ps
    }

    /// Exact width of a bin in delay ticks; away-from-zero rounding makes
    /// the center bin `2*ceil(w/2) - 1` wide, every other bin `w` wide.
    pub fn effective_width_ps(&self, index: usize) -> i64 {
        if index == self.half_bins {
            2 * ((self.bin_width_ps + 1) / 2) - 1
        } else {
            self.bin_width_ps
        }
    }

    /// Expected pair count in bin `index` for uncorrelated streams.
    pub fn accidental_level(&self, index: usize) -> f64 {
        self.n_left as f64 * self.n_right as f64 * self.effective_width_ps(index) as f64
            / self.duration_ps as f64
    }

    /// Normalized correlation per bin, with Poisson counting errors.
    pub fn g2(&self) -> Result<Vec<Estimate>> {
        if self.n_left == 0 || self.n_right == 0 {
            return Err(Error::Estimation(
                "cannot normalize a correlation without counts in both channels".into(),
            ));
        }
        Ok((0..self.n_bins())
            .map(|i| {
                let acc = self.accidental_level(i);
                Estimate {
                    value: self.counts[i] as f64 / acc,
                    std_err: (self.counts[i] as f64).sqrt() / acc,
                }
            })
            .collect())
    }

    /// Sum of counts in bins whose center lies in the open interval
    /// `(lo_ps, hi_ps)`.
    pub fn window_counts(&self, lo_ps: i64, hi_ps: i64) -> u64 {
        (0..self.n_bins())
            .filter(|&i| {
                let tau = self.tau_at(i);
                tau > lo_ps && tau < hi_ps
            })
            .map(|i| self.counts[i])
            .sum()
    }

    /// Expected accidental counts in the same open window.
    pub fn window_accidentals(&self, lo_ps: i64, hi_ps: i64) -> f64 {
        (0..self.n_bins())
            .filter(|&i| {
                let tau = self.tau_at(i);
                tau > lo_ps && tau < hi_ps
            })
            .map(|i| self.accidental_level(i))
            .sum()
    }
}

/// Streaming cross-correlator. Push tags of both channels in global time
/// order; the delay convention is `d = t_right - t_left`.
pub struct CorrelationAccumulator {
    hist: CorrelationHistogram,
    buf_left: VecDeque<i64>,
    buf_right: VecDeque<i64>,
    last_time_ps: i64,
}

impl CorrelationAccumulator {
    pub fn new(bin_width_ps: i64, half_bins: usize, duration_ps: i64) -> Result<Self> {
        Ok(CorrelationAccumulator {
            hist: CorrelationHistogram::empty(bin_width_ps, half_bins, duration_ps)?,
            buf_left: VecDeque::new(),
            buf_right: VecDeque::new(),
            last_time_ps: i64::MIN,
        })
    }

    fn check_order(&mut self, t: i64) -> Result<()> {
        if t < self.last_time_ps {
            return Err(Error::Precondition(format!(
                "correlation input regressed from {} to {t} ps",
                self.last_time_ps
            )));
        }
        self.last_time_ps = t;
        Ok(())
    }

    pub fn push_left(&mut self, t: i64) -> Result<()> {
        self.check_order(t)?;
        let horizon = t - self.hist.max_delay_ps();
        while self.buf_right.front().is_some_and(|&b| b < horizon) {
            self.buf_right.pop_front();
        }
        for &b in &self.buf_right {
            if let Some(idx) = self.hist.index_of_delay(b - t) {
                self.hist.counts[idx] += 1;
            }
        }
        self.buf_left.push_back(t);
        self.hist.n_left += 1;
        Ok(())
    }

    pub fn push_right(&mut self, t: i64) -> Result<()> {
        self.check_order(t)?;
        let horizon = t - self.hist.max_delay_ps();
        while self.buf_left.front().is_some_and(|&a| a < horizon) {
            self.buf_left.pop_front();
        }
        for &a in &self.buf_left {
            if let Some(idx) = self.hist.index_of_delay(t - a) {
                self.hist.counts[idx] += 1;
            }
        }
        self.buf_right.push_back(t);
        self.hist.n_right += 1;
        Ok(())
    }

    pub fn finish(self) -> CorrelationHistogram {
        self.hist
    }
}

/// Streaming autocorrelator over one channel. Every ordered pair of
/// distinct tags within the span contributes, so the histogram is
/// symmetric by construction and normalizes like the cross-correlation
/// with both channel counts equal.
pub struct AutocorrelationAccumulator {
    hist: CorrelationHistogram,
    buf: VecDeque<i64>,
    last_time_ps: i64,
}

impl AutocorrelationAccumulator {
    pub fn new(bin_width_ps: i64, half_bins: usize, duration_ps: i64) -> Result<Self> {
        Ok(AutocorrelationAccumulator {
            hist: CorrelationHistogram::empty(bin_width_ps, half_bins, duration_ps)?,
            buf: VecDeque::new(),
            last_time_ps: i64::MIN,
        })
    }

    pub fn push(&mut self, t: i64) -> Result<()> {
        if t < self.last_time_ps {
            return Err(Error::Precondition(format!(
                "correlation input regressed from {} to {t} ps",
                self.last_time_ps
            )));
        }
        self.last_time_ps = t;
        let horizon = t - self.hist.max_delay_ps();
        while self.buf.front().is_some_and(|&b| b < horizon) {
            self.buf.pop_front();
        }
        for &old in &self.buf {
            let d = t - old;
            if let Some(idx) = self.hist.index_of_delay(d) {
                self.hist.counts[idx] += 1;
            }
            if let Some(idx) = self.hist.index_of_delay(-d) {
                self.hist.counts[idx] += 1;
            }
        }
        self.buf.push_back(t);
        self.hist.n_left += 1;
        self.hist.n_right += 1;
        Ok(())
    }

    pub fn finish(self) -> CorrelationHistogram {
        self.hist
    }
}

/// Sorted times of one channel of a tag stream.
pub fn channel_times(tags: &[TimeTag], channel: u8) -> Vec<i64> {
    tags.iter().filter(|t| t.channel == channel).map(|t| t.time_ps).collect()
}

/// Count pairs with `lo_ps <= t_right - t_left <= hi_ps` (closed window)
/// between two sorted streams; every qualifying pair counts, so one left
/// tag can contribute several pairs.
pub fn count_window_pairs(
    times_left: &[i64],
    times_right: &[i64],
    lo_ps: i64,
    hi_ps: i64,
) -> Result<u64> {
    if lo_ps > hi_ps {
        return Err(Error::Config(format!(
            "coincidence window [{lo_ps}, {hi_ps}] ps is empty"
        )));
    }
    for times in [times_left, times_right] {
        if times.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Precondition("coincidence input is not time-ordered".into()));
        }
    }
    let mut start = 0usize;
    let mut total = 0u64;
    for &t in times_left {
        let lo = t.saturating_add(lo_ps);
        let hi = t.saturating_add(hi_ps);
        while start < times_right.len() && times_right[start] < lo {
            start += 1;
        }
        let mut j = start;
        while j < times_right.len() && times_right[j] <= hi {
            j += 1;
        }
        total += (j - start) as u64;
    }
    Ok(total)
}

/// Cross-correlate two sorted time streams; `d = t_right - t_left`.
pub fn cross_correlation(
    times_left: &[i64],
    times_right: &[i64],
    bin_width_ps: i64,
    half_bins: usize,
    duration_ps: i64,
) -> Result<CorrelationHistogram> {
    let mut acc = CorrelationAccumulator::new(bin_width_ps, half_bins, duration_ps)?;
    let (mut i, mut j) = (0usize, 0usize);
    while i < times_left.len() || j < times_right.len() {
        let take_left = match (times_left.get(i), times_right.get(j)) {
            (Some(&a), Some(&b)) => a <= b,
            (Some(_), None) => true,
            _ => false,
        };
        if take_left {
            acc.push_left(times_left[i])?;
            i += 1;
        } else {
            acc.push_right(times_right[j])?;
            j += 1;
        }
    }
    Ok(acc.finish())
}

/// Autocorrelate one sorted time stream.
pub fn autocorrelation(
    times: &[i64],
    bin_width_ps: i64,
    half_bins: usize,
    duration_ps: i64,
) -> Result<CorrelationHistogram> {
    let mut acc = AutocorrelationAccumulator::new(bin_width_ps, half_bins, duration_ps)?;
    for &t in times {
        acc.push(t)?;
    }
    Ok(acc.finish())
}

/// Coincidence bookkeeping for the three-detector heralded measurement.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripleCoincidenceCounts {
    /// Heralds.
    pub n_h: u64,
    /// Herald-arm-A coincidences (tags of A within the window, summed
    /// over heralds).
    pub n_ha: u64,
    /// Herald-arm-B coincidences.
    pub n_hb: u64,
    /// Triple coincidences: per herald, the product of A and B tags in
    /// the window, summed over heralds.
    pub n_hab: u64,
}

/// Count herald-gated singles and triples. All inputs are sorted times;
/// the window is closed, `[t_h - window/2, t_h + window/2]` with the half
/// width floored to whole picoseconds.
pub fn count_triples(
    heralds: &[i64],
    arm_a: &[i64],
    arm_b: &[i64],
    window_ps: i64,
) -> Result<TripleCoincidenceCounts> {
    if window_ps < 1 {
        return Err(Error::Config(format!(
            "coincidence window must be positive, got {window_ps} ps"
        )));
    }
    let half = window_ps / 2;
    let mut counts = TripleCoincidenceCounts { n_h: heralds.len() as u64, ..Default::default() };
    let (mut ia, mut ib) = (0usize, 0usize);
    for &h in heralds {
        let lo = h - half;
        let hi = h + half;
        while arm_a.get(ia).is_some_and(|&t| t < lo) {
            ia += 1;
        }
        while arm_b.get(ib).is_some_and(|&t| t < lo) {
            ib += 1;
        }
        let mut ka = 0u64;
        let mut j = ia;
        while arm_a.get(j).is_some_and(|&t| t <= hi) {
            ka += 1;
            j += 1;
        }
        let mut kb = 0u64;
        let mut j = ib;
        while arm_b.get(j).is_some_and(|&t| t <= hi) {
            kb += 1;
            j += 1;
        }
        counts.n_ha += ka;
        counts.n_hb += kb;
        counts.n_hab += ka * kb;
    }
    Ok(counts)
}

/// Heralded zero-delay correlation
/// `g2_h(0) = N_hab * N_h / (N_ha * N_hb)`, with the relative error taken
/// as the quadrature sum of the four counting errors.
pub fn heralded_g2(counts: &TripleCoincidenceCounts) -> Result<Estimate> {
    if counts.n_h == 0 || counts.n_ha == 0 || counts.n_hb == 0 {
        return Err(Error::Estimation(format!(
            "heralded g2 undefined: counts {counts:?} lack heralds or singles"
        )));
    }
    let value = counts.n_hab as f64 * counts.n_h as f64
        / (counts.n_ha as f64 * counts.n_hb as f64);
    let rel = [counts.n_hab, counts.n_h, counts.n_ha, counts.n_hb]
        .iter()
        .map(|&n| if n == 0 { 0.0 } else { 1.0 / n as f64 })
        .sum::<f64>()
        .sqrt();
    // With zero triples the point estimate is 0; give it the error a
    // single triple would carry so downstream separations stay finite.
    let std_err = if counts.n_hab == 0 {
        counts.n_h as f64 / (counts.n_ha as f64 * counts.n_hb as f64)
    } else {
        value * rel
    };
    Ok(Estimate { value, std_err })
}

/// Heralding efficiency of the signal arm: the coincidence rate divided
/// by the herald rate and the signal detector efficiency,
/// `eta_h = R_si / (R_i * eta_det)`.
pub fn heralding_efficiency(
    coincidence_rate_hz: &Estimate,
    herald_rate_hz: &Estimate,
    detector_efficiency: f64,
) -> Result<Estimate> {
    if !(detector_efficiency > 0.0 && detector_efficiency <= 1.0) {
        return Err(Error::Domain(format!(
            "detector efficiency must lie in (0, 1], got {detector_efficiency}"
        )));
    }
    if herald_rate_hz.value <= 0.0 {
        return Err(Error::Estimation("heralding efficiency needs a herald rate".into()));
    }
    let value = coincidence_rate_hz.value / (herald_rate_hz.value * detector_efficiency);
    let rel_c = if coincidence_rate_hz.value != 0.0 {
        coincidence_rate_hz.std_err / coincidence_rate_hz.value
    } else {
        0.0
    };
    let rel_h = herald_rate_hz.std_err / herald_rate_hz.value;
    Ok(Estimate { value, std_err: value.abs() * (rel_c * rel_c + rel_h * rel_h).sqrt() })
}

/// Heralded signal rate: the product of heralding efficiency and herald
/// rate, with relative errors added in quadrature.
pub fn heralded_rate(efficiency: &Estimate, herald_rate_hz: &Estimate) -> Estimate {
    let value = efficiency.value * herald_rate_hz.value;
    let rel_e = if efficiency.value != 0.0 { efficiency.std_err / efficiency.value } else { 0.0 };
    let rel_h = if herald_rate_hz.value != 0.0 {
        herald_rate_hz.std_err / herald_rate_hz.value
    } else {
        0.0
    };
    Estimate { value, std_err: value.abs() * (rel_e * rel_e + rel_h * rel_h).sqrt() }
}
