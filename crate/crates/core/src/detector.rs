//! Single-photon detector models: a sine-gated InGaAs/InP SPAD and a
//! free-running SNSPD.
//!
//! The SPAD is gated at `GateClock::frequency_hz` (1 GHz by default) and is
//! sensitive only inside a top-hat window of `gate_width_ps` per period.
//! Within a live gate:
//!
//! * a photon triggers an avalanche with probability `pde`;
//! * a dark avalanche occurs with probability
//!   `dark_count_probability_per_gate` (gates are skipped in runs with a
//!   single geometric draw, so long dark-dominated runs never iterate
//!   every gate);
//! * every avalanche may charge carrier traps; each charged trap releases
//!   after an exponential delay and the released carrier triggers an
//!   afterpulse avalanche at the release time if a gate is open, otherwise
//!   at the next gate opening.
//!
//! Two suppression mechanisms follow a detection, both non-paralyzable and
//! timed from the last recorded event:
//!
//! * the discriminator deadtime hides subsequent avalanches from the
//!   record, but the avalanches still happen and still charge traps;
//! * the hold-off disables the gates entirely, so suppressed candidates
//!   neither register nor charge traps.
//!
//! Afterpulse cascades (afterpulses of afterpulses) are truncated at
//! `max_afterpulse_generation`. Recorded times get Gaussian timing jitter
//! (`jitter_fwhm_s`), and the finished stream is re-sorted and passed
//! through an exact minimum-gap filter of `max(deadtime, holdoff)` so the
//! advertised gap holds on the jittered record as well.
//!
//! Detectors are streaming: feed time-ordered photon chunks with
//! [`Detector::process`], then call [`Detector::finish`] once. The pure
//! wrappers [`detect_spad`] / [`detect_snspd`] run a whole slice at once.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_rng, salt, salt::DetectorDraw};
use crate::types::{s_to_ps, PhotonArrival, TagOrigin, TimeTag, PS_PER_S};

/// Conversion from a Gaussian FWHM to its standard deviation.
fn fwhm_to_sigma(fwhm: f64) -> f64 {
    fwhm / (8.0 * std::f64::consts::LN_2).sqrt()
}

/// Exponential delay in integer picoseconds with mean `tau_ps`.
fn exp_ps(rng: &mut ChaCha8Rng, tau_ps: f64) -> i64 {
    let u = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let d = -tau_ps * u.ln();
    if d >= i64::MAX as f64 / 4.0 {
        i64::MAX / 4
    } else {
        d.round() as i64
    }
}

/// Periodic gate timing. Period is `round(1e12 / frequency_hz)` in integer
/// picoseconds; gate `k` is live on
/// `[phase + k*period, phase + k*period + width)`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateClock {
    pub frequency_hz: f64,
    pub phase_offset_ps: i64,
    pub gate_width_ps: i64,
}

impl Default for GateClock {
    fn default() -> Self {
        GateClock { frequency_hz: 1.0e9, phase_offset_ps: 0, gate_width_ps: 300 }
    }
}

impl GateClock {
    pub fn period_ps(&self) -> Result<i64> {
        if !(self.frequency_hz > 0.0) || !self.frequency_hz.is_finite() {
            return Err(Error::Domain(format!(
                "gate frequency must be positive, got {}",
                self.frequency_hz
            )));
        }
        let p = (PS_PER_S / self.frequency_hz).round() as i64;
        if p < 1 {
            return Err(Error::Domain(format!(
                "gate frequency {} Hz gives a period below 1 ps",
                self.frequency_hz
            )));
        }
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let period = self.period_ps()?;
        if self.gate_width_ps < 1 || self.gate_width_ps > period {
            return Err(Error::Domain(format!(
                "gate width must lie in [1, {period}] ps, got {} ps",
                self.gate_width_ps
            )));
        }
        Ok(())
    }
}

/// Integer gate arithmetic resolved from a validated [`GateClock`].
#[derive(Clone, Copy, Debug)]
struct Gating {
    period: i64,
    phase: i64,
    width: i64,
}

impl Gating {
    fn new(clock: &GateClock) -> Result<Self> {
        clock.validate()?;
        let period = clock.period_ps()?;
        Ok(Gating {
            period,
            phase: clock.phase_offset_ps.rem_euclid(period),
            width: clock.gate_width_ps,
        })
    }

    fn gate_index(&self, t: i64) -> i64 {
        (t - self.phase).div_euclid(self.period)
    }

    fn gate_open(&self, k: i64) -> i64 {
        self.phase.saturating_add(k.saturating_mul(self.period))
    }

    fn in_gate(&self, t: i64) -> bool {
        (t - self.phase).rem_euclid(self.period) < self.width
    }

    /// Earliest instant at or after `t` at which a gate is live.
    fn next_live(&self, t: i64) -> i64 {
        if self.in_gate(t) {
            t
        } else {
            self.gate_open(self.gate_index(t) + 1)
        }
    }
}

/// One carrier-trap population: charging probability per avalanche and
/// exponential release lifetime.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrapSpec {
    pub probability: f64,
    pub lifetime_s: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpadParams {
    pub gate: GateClock,
    /// Photon detection probability inside a live gate.
    pub pde: f64,
    /// Dark avalanche probability per live gate.
    pub dark_count_probability_per_gate: f64,
    /// Charging probability of the primary trap per avalanche.
    pub afterpulse_probability: f64,
    /// Release lifetime of the primary trap.
    pub trap_lifetime_s: f64,
    /// Additional trap populations for multi-exponential afterpulsing.
    pub extra_traps: Vec<TrapSpec>,
    /// Cascade cap: avalanches of this generation no longer charge traps
    /// (photons and darks are generation 0). Zero disables afterpulsing.
    pub max_afterpulse_generation: u32,
    /// Discriminator deadtime (suppressed avalanches still charge traps).
    pub deadtime_s: f64,
    /// Gate hold-off after each detection (suppressed candidates charge
    /// nothing).
    pub holdoff_s: f64,
    pub jitter_fwhm_s: f64,
}

impl Default for SpadParams {
    fn default() -> Self {
        SpadParams {
            gate: GateClock::default(),
            pde: 0.2,
            dark_count_probability_per_gate: 1.0e-6,
            afterpulse_probability: 0.1,
            trap_lifetime_s: 1.0e-6,
            extra_traps: Vec::new(),
            max_afterpulse_generation: 3,
            deadtime_s: 10.0e-9,
            holdoff_s: 0.0,
            jitter_fwhm_s: 100.0e-12,
        }
    }
}

impl SpadParams {
    pub fn validate(&self) -> Result<()> {
        self.gate.validate()?;
        if !(0.0..=1.0).contains(&self.pde) {
            return Err(Error::Domain(format!("pde must lie in [0, 1], got {}", self.pde)));
        }
        if !(0.0..1.0).contains(&self.dark_count_probability_per_gate) {
            return Err(Error::Domain(format!(
                "dark count probability per gate must lie in [0, 1), got {}",
                self.dark_count_probability_per_gate
            )));
        }
        for (p, tau) in self.trap_iter() {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Domain(format!(
                    "trap charging probability must lie in [0, 1], got {p}"
                )));
            }
            if p > 0.0 && !(tau > 0.0 && tau.is_finite()) {
                return Err(Error::Domain(format!(
                    "trap lifetime must be positive, got {tau}"
                )));
            }
        }
        if self.max_afterpulse_generation > 16 {
            return Err(Error::Domain(format!(
                "afterpulse generation cap {} is unreasonably deep (max 16)",
                self.max_afterpulse_generation
            )));
        }
        for (label, v) in [
            ("deadtime_s", self.deadtime_s),
            ("holdoff_s", self.holdoff_s),
            ("jitter_fwhm_s", self.jitter_fwhm_s),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Domain(format!(
                    "{label} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// All trap populations, primary first, as (probability, lifetime_s).
    fn trap_iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        std::iter::once((self.afterpulse_probability, self.trap_lifetime_s))
            .chain(self.extra_traps.iter().map(|t| (t.probability, t.lifetime_s)))
    }
}

/// A charged trap waiting to fire, keyed by the gate-mapped avalanche
/// candidate time. `seq` makes the ordering total and deterministic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct PendingRelease {
    time_ps: i64,
    seq: u64,
    generation: u32,
    parent_time_ps: i64,
}

/// Streaming detector interface shared by the SPAD and SNSPD models.
///
/// Feed strictly time-ordered photon chunks; every chunk call promises that
/// no later photon will precede `advance_to_ps`, letting the detector
/// finalize darks and afterpulses up to that watermark. `drain` hands out
/// tags that are already final (jittered, minimum gap enforced) so callers
/// can stream them to disk; `finish` drains the remainder.
pub trait Detector {
    fn process(&mut self, photons: &[PhotonArrival], advance_to_ps: i64) -> Result<()>;
    fn drain(&mut self, out: &mut Vec<TimeTag>);
    fn finish(&mut self, end_time_ps: i64) -> Result<Vec<TimeTag>>;
    fn channel(&self) -> u8;
}

/// Final stage between raw avalanche records and the tag stream: adds
/// timing jitter (one draw per record, in record order) and re-imposes
/// the minimum gap on the jittered record with a keep-first greedy pass.
///
/// Records are released once the detector cursor is far enough past them
/// that no future record can jitter in front of them, so the pending set
/// stays small and the emitted stream is identical to a whole-run sort.
struct TagFinalizer {
    sigma_ps: f64,
    min_gap_ps: i64,
    rng: ChaCha8Rng,
    normal: Option<Normal<f64>>,
    pending: Vec<TimeTag>,
    last_kept_ps: Option<i64>,
}

impl TagFinalizer {
    fn new(sigma_ps: f64, min_gap_ps: i64, rng: ChaCha8Rng) -> Result<Self> {
        let normal = if sigma_ps > 0.0 {
            Some(
                Normal::new(0.0, sigma_ps)
                    .map_err(|e| Error::Domain(format!("invalid jitter width: {e}")))?,
            )
        } else {
            None
        };
        Ok(TagFinalizer {
            sigma_ps,
            min_gap_ps,
            rng,
            normal,
            pending: Vec::new(),
            last_kept_ps: None,
        })
    }

    fn record(&mut self, mut tag: TimeTag) {
        if let Some(normal) = &self.normal {
            tag.time_ps += normal.sample(&mut self.rng).round() as i64;
        }
        self.pending.push(tag);
    }

    /// Everything before this time can no longer be displaced by a record
    /// with a pre-jitter time at or past the cursor.
    fn barrier_ps(&self, cursor_ps: i64) -> i64 {
        cursor_ps.saturating_sub((20.0 * self.sigma_ps).ceil() as i64 + 1)
    }

    fn drain_upto(&mut self, cursor_ps: i64, out: &mut Vec<TimeTag>) {
        self.pending.sort_by_key(|t| t.time_ps);
        let cut = self.pending.partition_point(|t| t.time_ps < self.barrier_ps(cursor_ps));
        for tag in self.pending.drain(..cut) {
            if let Some(last) = self.last_kept_ps {
                if tag.time_ps - last < self.min_gap_ps {
                    continue;
                }
            }
            self.last_kept_ps = Some(tag.time_ps);
            out.push(tag);
        }
    }

    fn finish(&mut self, out: &mut Vec<TimeTag>) {
        self.drain_upto(i64::MAX, out);
    }
}

pub struct SpadDetector {
    gating: Gating,
    pde: f64,
    p_dark: f64,
    traps: Vec<(f64, f64)>, // (probability, lifetime_ps)
    max_generation: u32,
    deadtime_ps: i64,
    holdoff_ps: i64,
    channel: u8,
    photon_rng: ChaCha8Rng,
    dark_rng: ChaCha8Rng,
    trap_rng: ChaCha8Rng,
    releases: BinaryHeap<Reverse<PendingRelease>>,
    release_seq: u64,
    /// Time of the next dark avalanche, already placed within its gate.
    next_dark_ps: Option<i64>,
    last_detection_ps: Option<i64>,
    cursor_ps: i64,
    finalizer: TagFinalizer,
}

impl SpadDetector {
    pub fn new(params: &SpadParams, channel: u8, seed: u64) -> Result<Self> {
        params.validate()?;
        let gating = Gating::new(&params.gate)?;
        let mut detector = SpadDetector {
            gating,
            pde: params.pde,
            p_dark: params.dark_count_probability_per_gate,
            traps: params
                .trap_iter()
                .filter(|&(p, _)| p > 0.0)
                .map(|(p, tau)| (p, tau * PS_PER_S))
                .collect(),
            max_generation: params.max_afterpulse_generation,
            deadtime_ps: s_to_ps(params.deadtime_s),
            holdoff_ps: s_to_ps(params.holdoff_s),
            channel,
            photon_rng: derive_rng(seed, salt::detector(channel, DetectorDraw::Photon), 0),
            dark_rng: derive_rng(seed, salt::detector(channel, DetectorDraw::Dark), 0),
            trap_rng: derive_rng(seed, salt::detector(channel, DetectorDraw::Trap), 0),
            releases: BinaryHeap::new(),
            release_seq: 0,
            next_dark_ps: None,
            last_detection_ps: None,
            cursor_ps: i64::MIN,
            finalizer: TagFinalizer::new(
                fwhm_to_sigma(params.jitter_fwhm_s * PS_PER_S),
                s_to_ps(params.deadtime_s).max(s_to_ps(params.holdoff_s)),
                derive_rng(seed, salt::detector(channel, DetectorDraw::Jitter), 0),
            )?,
        };
        detector.next_dark_ps = detector.draw_dark_after(-1);
        Ok(detector)
    }

    /// Draw the next dark avalanche strictly after gate `gate_index`,
    /// skipping empty gates geometrically. Dark generation starts at
    /// gate 0, i.e. on the non-negative time axis.
    fn draw_dark_after(&mut self, gate_index: i64) -> Option<i64> {
        if self.p_dark <= 0.0 {
            return None;
        }
        let u = self.dark_rng.random::<f64>().max(f64::MIN_POSITIVE);
        let skip = (u.ln() / (1.0 - self.p_dark).ln()).floor();
        if skip >= i64::MAX as f64 / 4.0 {
            return Some(i64::MAX / 4);
        }
        let gate = gate_index.saturating_add(1).saturating_add(skip as i64);
        let offset = self.dark_rng.random_range(0..self.gating.width);
        Some(self.gating.gate_open(gate).saturating_add(offset))
    }

    /// Handle one avalanche candidate at `t`. Hold-off silences it
    /// entirely; traps charge otherwise, even when the discriminator
    /// deadtime hides the event from the record.
    fn avalanche(&mut self, t: i64, generation: u32, origin: TagOrigin) {
        if let Some(last) = self.last_detection_ps {
            if t - last < self.holdoff_ps {
                return;
            }
        }
        if generation < self.max_generation {
            for k in 0..self.traps.len() {
                let (p, tau_ps) = self.traps[k];
                if self.trap_rng.random::<f64>() < p {
                    let release = t.saturating_add(exp_ps(&mut self.trap_rng, tau_ps));
                    self.release_seq += 1;
                    self.releases.push(Reverse(PendingRelease {
                        time_ps: self.gating.next_live(release),
                        seq: self.release_seq,
                        generation: generation + 1,
                        parent_time_ps: t,
                    }));
                }
            }
        }
        if let Some(last) = self.last_detection_ps {
            if t - last < self.deadtime_ps {
                return;
            }
        }
        self.finalizer.record(TimeTag { time_ps: t, channel: self.channel, origin });
        self.last_detection_ps = Some(t);
    }

    fn advance(&mut self, photons: &[PhotonArrival], advance_to_ps: i64) -> Result<()> {
        if advance_to_ps < self.cursor_ps {
            return Err(Error::Precondition(format!(
                "advance watermark {advance_to_ps} ps precedes the cursor {} ps",
                self.cursor_ps
            )));
        }
        let mut i = 0usize;
        let mut prev_photon = self.cursor_ps;
        loop {
            let candidates = [
                photons.get(i).map(|p| (p.time_ps, 0u8)),
                self.next_dark_ps.map(|t| (t, 1u8)),
                self.releases.peek().map(|r| (r.0.time_ps, 2u8)),
            ];
            let Some(&(t, class)) = candidates.iter().flatten().min_by_key(|&&(t, c)| (t, c))
            else {
                break;
            };
            if t >= advance_to_ps {
                break;
            }
            match class {
                0 => {
                    let p = photons[i];
                    i += 1;
                    if p.time_ps < prev_photon {
                        return Err(Error::Precondition(format!(
                            "photon stream is not time-ordered at {} ps",
                            p.time_ps
                        )));
                    }
                    prev_photon = p.time_ps;
                    if self.gating.in_gate(p.time_ps)
                        && self.photon_rng.random::<f64>() < self.pde
                    {
                        self.avalanche(p.time_ps, 0, TagOrigin::Photon { pair_id: p.pair_id });
                    }
                }
                1 => {
                    self.avalanche(t, 0, TagOrigin::Dark);
                    self.next_dark_ps = self.draw_dark_after(self.gating.gate_index(t));
                }
                _ => {
                    let r = self.releases.pop().expect("peeked release").0;
                    self.avalanche(
                        r.time_ps,
                        r.generation,
                        TagOrigin::Afterpulse { parent_time_ps: r.parent_time_ps },
                    );
                }
            }
        }
        if i < photons.len() {
            return Err(Error::Precondition(format!(
                "photon at {} ps lies at or beyond the advance watermark {advance_to_ps} ps",
                photons[i].time_ps
            )));
        }
        self.cursor_ps = advance_to_ps;
        Ok(())
    }
}

impl Detector for SpadDetector {
    fn process(&mut self, photons: &[PhotonArrival], advance_to_ps: i64) -> Result<()> {
        self.advance(photons, advance_to_ps)
    }

    fn drain(&mut self, out: &mut Vec<TimeTag>) {
        self.finalizer.drain_upto(self.cursor_ps, out);
    }

    fn finish(&mut self, end_time_ps: i64) -> Result<Vec<TimeTag>> {
        self.advance(&[], end_time_ps)?;
        let mut tags = Vec::new();
        self.finalizer.finish(&mut tags);
        Ok(tags)
    }

    fn channel(&self) -> u8 {
        self.channel
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnspdParams {
    pub efficiency: f64,
    pub dark_count_rate_hz: f64,
    /// Non-paralyzable deadtime after each recorded event.
    pub deadtime_s: f64,
    pub jitter_fwhm_s: f64,
}

impl Default for SnspdParams {
    fn default() -> Self {
        SnspdParams {
            efficiency: 0.8,
            dark_count_rate_hz: 100.0,
            deadtime_s: 50.0e-9,
            jitter_fwhm_s: 50.0e-12,
        }
    }
}

impl SnspdParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.efficiency) {
            return Err(Error::Domain(format!(
                "efficiency must lie in [0, 1], got {}",
                self.efficiency
            )));
        }
        if !(self.dark_count_rate_hz >= 0.0) || !self.dark_count_rate_hz.is_finite() {
            return Err(Error::Domain(format!(
                "dark count rate must be finite and non-negative, got {}",
                self.dark_count_rate_hz
            )));
        }
        for (label, v) in [("deadtime_s", self.deadtime_s), ("jitter_fwhm_s", self.jitter_fwhm_s)]
        {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Domain(format!(
                    "{label} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

pub struct SnspdDetector {
    efficiency: f64,
    dark_mean_gap_ps: Option<f64>,
    deadtime_ps: i64,
    channel: u8,
    photon_rng: ChaCha8Rng,
    dark_rng: ChaCha8Rng,
    next_dark_ps: Option<i64>,
    last_detection_ps: Option<i64>,
    cursor_ps: i64,
    finalizer: TagFinalizer,
}

impl SnspdDetector {
    pub fn new(params: &SnspdParams, channel: u8, seed: u64) -> Result<Self> {
        params.validate()?;
        let dark_mean_gap_ps = if params.dark_count_rate_hz > 0.0 {
            Some(PS_PER_S / params.dark_count_rate_hz)
        } else {
            None
        };
        let mut detector = SnspdDetector {
            efficiency: params.efficiency,
            dark_mean_gap_ps,
            deadtime_ps: s_to_ps(params.deadtime_s),
            channel,
            photon_rng: derive_rng(seed, salt::detector(channel, DetectorDraw::Photon), 0),
            dark_rng: derive_rng(seed, salt::detector(channel, DetectorDraw::Dark), 0),
            next_dark_ps: None,
            last_detection_ps: None,
            cursor_ps: i64::MIN,
            finalizer: TagFinalizer::new(
                fwhm_to_sigma(params.jitter_fwhm_s * PS_PER_S),
                s_to_ps(params.deadtime_s),
                derive_rng(seed, salt::detector(channel, DetectorDraw::Jitter), 0),
            )?,
        };
        detector.next_dark_ps = detector.draw_dark_after(0);
        Ok(detector)
    }

    /// Homogeneous Poisson dark process on the non-negative time axis.
    fn draw_dark_after(&mut self, t: i64) -> Option<i64> {
        let mean_gap = self.dark_mean_gap_ps?;
        Some(t.saturating_add(exp_ps(&mut self.dark_rng, mean_gap).max(1)))
    }

    fn hit(&mut self, t: i64, origin: TagOrigin) {
        if let Some(last) = self.last_detection_ps {
            if t - last < self.deadtime_ps {
                return;
            }
        }
        self.finalizer.record(TimeTag { time_ps: t, channel: self.channel, origin });
        self.last_detection_ps = Some(t);
    }

    fn advance(&mut self, photons: &[PhotonArrival], advance_to_ps: i64) -> Result<()> {
        if advance_to_ps < self.cursor_ps {
            return Err(Error::Precondition(format!(
                "advance watermark {advance_to_ps} ps precedes the cursor {} ps",
                self.cursor_ps
            )));
        }
        let mut i = 0usize;
        let mut prev_photon = self.cursor_ps;
        loop {
            let candidates = [
                photons.get(i).map(|p| (p.time_ps, 0u8)),
                self.next_dark_ps.map(|t| (t, 1u8)),
            ];
            let Some(&(t, class)) = candidates.iter().flatten().min_by_key(|&&(t, c)| (t, c))
            else {
                break;
            };
            if t >= advance_to_ps {
                break;
            }
            if class == 0 {
                let p = photons[i];
                i += 1;
                if p.time_ps < prev_photon {
                    return Err(Error::Precondition(format!(
                        "photon stream is not time-ordered at {} ps",
                        p.time_ps
                    )));
                }
                prev_photon = p.time_ps;
                if self.photon_rng.random::<f64>() < self.efficiency {
                    self.hit(p.time_ps, TagOrigin::Photon { pair_id: p.pair_id });
                }
            } else {
                self.hit(t, TagOrigin::Dark);
                self.next_dark_ps = self.draw_dark_after(t);
            }
        }
        if i < photons.len() {
            return Err(Error::Precondition(format!(
                "photon at {} ps lies at or beyond the advance watermark {advance_to_ps} ps",
                photons[i].time_ps
            )));
        }
        self.cursor_ps = advance_to_ps;
        Ok(())
    }
}

impl Detector for SnspdDetector {
    fn process(&mut self, photons: &[PhotonArrival], advance_to_ps: i64) -> Result<()> {
        self.advance(photons, advance_to_ps)
    }

    fn drain(&mut self, out: &mut Vec<TimeTag>) {
        self.finalizer.drain_upto(self.cursor_ps, out);
    }

    fn finish(&mut self, end_time_ps: i64) -> Result<Vec<TimeTag>> {
        self.advance(&[], end_time_ps)?;
        let mut tags = Vec::new();
        self.finalizer.finish(&mut tags);
        Ok(tags)
    }

    fn channel(&self) -> u8 {
        self.channel
    }
}

/// Run the SPAD model over a complete time-ordered photon slice covering
/// `[0, duration_s)`.
pub fn detect_spad(
    params: &SpadParams,
    photons: &[PhotonArrival],
    duration_s: f64,
    channel: u8,
    seed: u64,
) -> Result<Vec<TimeTag>> {
    let mut detector = SpadDetector::new(params, channel, seed)?;
    let end = s_to_ps(duration_s);
    detector.process(photons, end)?;
    detector.finish(end)
}

/// Run the SNSPD model over a complete time-ordered photon slice covering
/// `[0, duration_s)`.
pub fn detect_snspd(
    params: &SnspdParams,
    photons: &[PhotonArrival],
    duration_s: f64,
    channel: u8,
    seed: u64,
) -> Result<Vec<TimeTag>> {
    let mut detector = SnspdDetector::new(params, channel, seed)?;
    let end = s_to_ps(duration_s);
    detector.process(photons, end)?;
    detector.finish(end)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Arm;

    fn photon(t: i64, id: u64) -> PhotonArrival {
        PhotonArrival { time_ps: t, arm: Arm::Signal, pair_id: id }
    }

    /// SPAD with every stochastic mechanism off except what the test turns
    /// on; pde defaults to 1 so in-gate photons always fire.
    fn quiet_spad() -> SpadParams {
        SpadParams {
            pde: 1.0,
            dark_count_probability_per_gate: 0.0,
            afterpulse_probability: 0.0,
            jitter_fwhm_s: 0.0,
            ..SpadParams::default()
        }
    }

    #[test]
    fn gate_arithmetic_covers_window_edges_and_negative_times() {
        let clock = GateClock { frequency_hz: 1.0e9, phase_offset_ps: 200, gate_width_ps: 300 };
        let g = Gating::new(&clock).unwrap();
        assert!(g.in_gate(200) && g.in_gate(499));
        assert!(!g.in_gate(500) && !g.in_gate(1199) && !g.in_gate(0));
        assert!(g.in_gate(1200));
        assert_eq!(g.next_live(350), 350);
        assert_eq!(g.next_live(500), 1200);
        assert_eq!(g.next_live(1200), 1200);
        assert_eq!(g.gate_index(1250), 1);
        // Negative times fall in earlier gates without special cases:
        // gate -1 spans [-800, -500).
        assert!(g.in_gate(-800) && g.in_gate(-501));
        assert!(!g.in_gate(-500) && !g.in_gate(-801));
        assert_eq!(g.next_live(-400), 200, "after gate -1 closes the next gate opens at 200");
    }

    #[test]
    fn gate_clock_rejects_invalid_widths() {
        let too_wide =
            GateClock { frequency_hz: 1.0e9, phase_offset_ps: 0, gate_width_ps: 1001 };
        assert!(too_wide.validate().is_err());
        let zero = GateClock { frequency_hz: 1.0e9, phase_offset_ps: 0, gate_width_ps: 0 };
        assert!(zero.validate().is_err());
        assert!(GateClock::default().validate().is_ok());
    }

    #[test]
    fn photons_outside_gates_are_never_detected() {
        let params = quiet_spad();
        // Gate k spans [k ns, k ns + 300 ps); place photons well apart so
        // deadtime never interferes.
        let inside: Vec<_> = (0..200).map(|k| photon(k * 100_000 + 150, k as u64)).collect();
        let outside: Vec<_> = (0..200).map(|k| photon(k * 100_000 + 700, k as u64)).collect();
        let hits_in = detect_spad(&params, &inside, 2.0e-5, 0, 1).unwrap();
        let hits_out = detect_spad(&params, &outside, 2.0e-5, 0, 1).unwrap();
        assert_eq!(hits_in.len(), 200, "unit-pde in-gate photons must all register");
        assert_eq!(hits_out.len(), 0, "photons between gates must never register");
    }

    #[test]
    fn detection_efficiency_thins_in_gate_photons() {
        let params = SpadParams { pde: 0.35, ..quiet_spad() };
        let n = 100_000i64;
        let photons: Vec<_> = (0..n).map(|k| photon(k * 100_000 + 150, k as u64)).collect();
        let tags = detect_spad(&params, &photons, (n as f64) * 1e-7, 0, 7).unwrap();
        let expect = 0.35 * n as f64;
        let sigma = (n as f64 * 0.35 * 0.65).sqrt();
        assert!(
            (tags.len() as f64 - expect).abs() < 5.0 * sigma,
            "detected {} vs expected {expect}",
            tags.len()
        );
    }

    #[test]
    fn deadtime_enforces_the_minimum_gap_exactly() {
        let params = quiet_spad();
        // One photon per gate for 30 gates: only every 10th can register.
        let photons: Vec<_> = (0..30).map(|k| photon(k * 1000 + 100, k as u64)).collect();
        let tags = detect_spad(&params, &photons, 1.0e-6, 0, 3).unwrap();
        assert_eq!(tags.len(), 3);
        assert!(tags.windows(2).all(|w| w[1].time_ps - w[0].time_ps >= 10_000));
    }

    #[test]
    fn trap_charging_depends_on_suppression_kind() {
        // Photon A at 100 ps, photon B 5 ns later (within A's deadtime).
        // With no hold-off B's avalanche is hidden but still charges its
        // trap, so two afterpulses eventually fire. With a 6 ns hold-off B
        // is silenced before charging and only A's afterpulse remains.
        let base = SpadParams {
            afterpulse_probability: 1.0,
            trap_lifetime_s: 5.0e-6,
            max_afterpulse_generation: 1,
            ..quiet_spad()
        };
        let photons = vec![photon(100, 1), photon(5100, 2)];
        let free = detect_spad(&base, &photons, 1.0e-3, 0, 9).unwrap();
        let kinds: Vec<_> = free.iter().map(|t| t.origin).collect();
        assert_eq!(free.len(), 3, "A plus two afterpulses, got {kinds:?}");
        assert!(matches!(free[0].origin, TagOrigin::Photon { .. }));
        assert_eq!(
            free.iter().filter(|t| matches!(t.origin, TagOrigin::Afterpulse { .. })).count(),
            2
        );
        let held = SpadParams { holdoff_s: 6.0e-9, ..base };
        let tags = detect_spad(&held, &photons, 1.0e-3, 0, 9).unwrap();
        assert_eq!(
            tags.iter().filter(|t| matches!(t.origin, TagOrigin::Afterpulse { .. })).count(),
            1,
            "hold-off must stop the suppressed avalanche from charging traps"
        );
    }

    #[test]
    fn afterpulses_fire_only_in_live_gates_and_link_to_their_parent() {
        let params = SpadParams {
            afterpulse_probability: 1.0,
            trap_lifetime_s: 2.0e-7,
            max_afterpulse_generation: 1,
            ..quiet_spad()
        };
        // Photons 2 us apart so a 200 ns release never reaches the next
        // photon's deadtime window.
        let photons: Vec<_> =
            (0..2000).map(|k| photon(k * 2_000_000 + 150, k as u64)).collect();
        let tags = detect_spad(&params, &photons, 4.0e-3, 0, 17).unwrap();
        let g = Gating::new(&params.gate).unwrap();
        let mut afterpulses = 0;
        for t in &tags {
            if let TagOrigin::Afterpulse { parent_time_ps } = t.origin {
                afterpulses += 1;
                assert!(g.in_gate(t.time_ps), "afterpulse at {} ps is outside a gate", t.time_ps);
                assert!(t.time_ps > parent_time_ps);
                assert!((parent_time_ps - 150).rem_euclid(2_000_000) == 0);
            }
        }
        // Each photon charges its trap with probability 1; the afterpulse
        // is lost only when the release lands inside the parent's own
        // deadtime: P = 1 - e^{-10ns/200ns} ~ 4.9%, so the expected yield
        // is ~0.95 with sigma ~0.005.
        assert!(
            (0.92..0.99).contains(&(afterpulses as f64 / 2000.0)),
            "afterpulse yield {afterpulses}/2000 outside the plausible band"
        );
    }

    #[test]
    fn dark_counts_arrive_at_the_configured_per_gate_probability() {
        let params = SpadParams {
            pde: 1.0,
            dark_count_probability_per_gate: 1.0e-4,
            afterpulse_probability: 0.0,
            jitter_fwhm_s: 0.0,
            ..SpadParams::default()
        };
        // 10 ms at 1 GHz gating = 1e7 gates -> ~1000 darks.
        let tags = detect_spad(&params, &[], 10.0e-3, 0, 23).unwrap();
        let n = tags.len() as f64;
        assert!(
            (n - 1000.0).abs() < 100.0,
            "dark count {n} deviates from 1000 beyond ~3 sigma"
        );
        assert!(tags.iter().all(|t| matches!(t.origin, TagOrigin::Dark)));
        let g = Gating::new(&params.gate).unwrap();
        assert!(tags.iter().all(|t| g.in_gate(t.time_ps)));
    }

    #[test]
    fn jitter_spreads_recorded_times_with_the_requested_width() {
        let fwhm_ps = 200.0;
        let params = SpadParams { jitter_fwhm_s: fwhm_ps * 1e-12, ..quiet_spad() };
        let n = 20_000i64;
        let photons: Vec<_> = (0..n).map(|k| photon(k * 100_000 + 150, k as u64)).collect();
        let tags = detect_spad(&params, &photons, n as f64 * 1e-7, 0, 31).unwrap();
        assert_eq!(tags.len(), n as usize);
        // Residual = recorded - true arrival; pair ids index the photons.
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for t in &tags {
            let TagOrigin::Photon { pair_id } = t.origin else { panic!("photon expected") };
            let d = (t.time_ps - (pair_id as i64 * 100_000 + 150)) as f64;
            sum += d;
            sum2 += d * d;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        let sigma_expect = fwhm_to_sigma(fwhm_ps);
        assert!(mean.abs() < 5.0 * sigma_expect / (n as f64).sqrt());
        assert!(
            (var.sqrt() - sigma_expect).abs() / sigma_expect < 0.03,
            "jitter sigma {} vs expected {sigma_expect}",
            var.sqrt()
        );
    }

    #[test]
    fn spad_output_is_deterministic_and_seed_sensitive() {
        let params = SpadParams {
            pde: 0.3,
            dark_count_probability_per_gate: 1.0e-5,
            afterpulse_probability: 0.3,
            trap_lifetime_s: 1.0e-6,
            ..SpadParams::default()
        };
        let photons: Vec<_> = (0..5000).map(|k| photon(k * 10_000 + 150, k as u64)).collect();
        let a = detect_spad(&params, &photons, 5.0e-5, 0, 41).unwrap();
        let b = detect_spad(&params, &photons, 5.0e-5, 0, 41).unwrap();
        let c = detect_spad(&params, &photons, 5.0e-5, 0, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn chunked_processing_matches_one_shot_processing() {
        let params = SpadParams {
            pde: 0.5,
            dark_count_probability_per_gate: 1.0e-5,
            afterpulse_probability: 0.5,
            trap_lifetime_s: 3.0e-7,
            ..SpadParams::default()
        };
        let photons: Vec<_> = (0..20_000).map(|k| photon(k * 5_000 + 150, k as u64)).collect();
        let end = s_to_ps(1.0e-4);
        let one_shot = detect_spad(&params, &photons, 1.0e-4, 3, 55).unwrap();
        let mut chunked = SpadDetector::new(&params, 3, 55).unwrap();
        for (idx, chunk) in photons.chunks(777).enumerate() {
            let watermark = chunk.last().unwrap().time_ps + 1;
            let _ = idx;
            chunked.process(chunk, watermark).unwrap();
        }
        let tags = chunked.finish(end).unwrap();
        assert_eq!(one_shot, tags);
    }

    #[test]
    fn unordered_or_late_photons_are_rejected() {
        let params = quiet_spad();
        let mut detector = SpadDetector::new(&params, 0, 1).unwrap();
        let unordered = vec![photon(5000, 0), photon(100, 1)];
        assert!(matches!(
            detector.process(&unordered, 10_000),
            Err(Error::Precondition(_))
        ));
        let mut detector = SpadDetector::new(&params, 0, 1).unwrap();
        assert!(matches!(
            detector.process(&[photon(5000, 0)], 4000),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn snspd_counts_photons_and_darks_at_expected_rates() {
        let params = SnspdParams {
            efficiency: 0.8,
            dark_count_rate_hz: 1000.0,
            deadtime_s: 50.0e-9,
            jitter_fwhm_s: 0.0,
        };
        // 40k photons spread over 1 s, far apart relative to deadtime.
        let photons: Vec<_> = (0..40_000).map(|k| photon(k * 25_000_000, k as u64)).collect();
        let tags = detect_snspd(&params, &photons, 1.0, 1, 61).unwrap();
        let n_photon = tags
            .iter()
            .filter(|t| matches!(t.origin, TagOrigin::Photon { .. }))
            .count() as f64;
        let n_dark =
            tags.iter().filter(|t| matches!(t.origin, TagOrigin::Dark)).count() as f64;
        assert!((n_photon - 32_000.0).abs() < 5.0 * (40_000.0f64 * 0.8 * 0.2).sqrt());
        assert!((n_dark - 1000.0).abs() < 5.0 * 1000.0f64.sqrt());
        assert!(tags.windows(2).all(|w| w[1].time_ps - w[0].time_ps >= 50_000));
    }

    #[test]
    fn snspd_deadtime_drops_burst_photons() {
        let params = SnspdParams {
            efficiency: 1.0,
            dark_count_rate_hz: 0.0,
            deadtime_s: 50.0e-9,
            jitter_fwhm_s: 0.0,
        };
        // 10 photons 10 ns apart: only t=0, t=50ns, t=90ns->no (gap 40ns)...
        // greedy keep-first yields hits at 0 and 50 ns.
        let photons: Vec<_> = (0..10).map(|k| photon(k * 10_000, k as u64)).collect();
        let tags = detect_snspd(&params, &photons, 1.0e-6, 1, 5).unwrap();
        assert_eq!(
            tags.iter().map(|t| t.time_ps).collect::<Vec<_>>(),
            vec![0, 50_000]
        );
    }

    #[test]
    fn empty_input_and_zero_duration_yield_empty_records() {
        let tags = detect_spad(&quiet_spad(), &[], 0.0, 0, 1).unwrap();
        assert!(tags.is_empty());
        let snspd = SnspdParams { dark_count_rate_hz: 0.0, ..SnspdParams::default() };
        let tags = detect_snspd(&snspd, &[], 1.0e-3, 1, 1).unwrap();
        assert!(tags.is_empty());
    }
}
