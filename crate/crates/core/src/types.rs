//! Shared event records and unit conventions.
//!
//! All event times are absolute integer picoseconds measured from the start
//! of the run; delays and device times (gate widths, deadtimes, jitter) are
//! also picoseconds. Run durations and source-scale quantities enter as f64
//! seconds at the configuration boundary and are converted exactly once.

use serde::{Deserialize, Serialize};

pub const PS_PER_S: f64 = 1e12;

/// Convert seconds to integer picoseconds (round to nearest).
pub fn s_to_ps(seconds: f64) -> i64 {
    (seconds * PS_PER_S).round() as i64
}

/// Convert integer picoseconds to seconds.
pub fn ps_to_s(ps: i64) -> f64 {
    ps as f64 / PS_PER_S
}

/// The two output arms of the pair source.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Signal,
    Idler,
}

impl Arm {
    pub fn as_u8(self) -> u8 {
        match self {
            Arm::Signal => 0,
            Arm::Idler => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Arm> {
        match v {
            0 => Some(Arm::Signal),
            1 => Some(Arm::Idler),
            _ => None,
        }
    }
}

/// One generated photon pair.
///
/// `pair_time_ps` is the pair epoch inside its temporal mode; the per-arm
/// emission offsets are non-positive one-sided exponential draws, signed so
/// that the signal-minus-idler delay has an asymmetric two-sided exponential
/// density (idler-coherence decay on the positive side, signal-coherence
/// decay on the negative side).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairEvent {
    pub mode_index: u64,
    pub pair_time_ps: i64,
    pub signal_offset_ps: i64,
    pub idler_offset_ps: i64,
    /// Globally unique ground-truth identifier carried through to arrivals
    /// and photon-origin tags.
    pub pair_id: u64,
}

impl PairEvent {
    pub fn arrival_time_ps(&self, arm: Arm) -> i64 {
        match arm {
            Arm::Signal => self.pair_time_ps + self.signal_offset_ps,
            Arm::Idler => self.pair_time_ps + self.idler_offset_ps,
        }
    }
}

/// A photon reaching a detector input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhotonArrival {
    pub time_ps: i64,
    pub arm: Arm,
    /// Ground-truth link back to the generating pair (or laser pulse).
    pub pair_id: u64,
}

/// Simulation-truth label of a detector tag.
///
/// Estimators never look at this; it exists so tests can verify detector
/// physics against ground truth, and it is stripped on export unless
/// explicitly kept. Tags read back from a stripped export carry
/// [`TagOrigin::Unlabeled`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagOrigin {
    Photon { pair_id: u64 },
    Dark,
    /// An afterpulse; carries the time of the avalanche that charged the
    /// trap (which may itself have been suppressed by the discriminator
    /// deadtime and therefore have no tag of its own).
    Afterpulse { parent_time_ps: i64 },
    Unlabeled,
}

/// One detector output event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeTag {
    pub time_ps: i64,
    pub channel: u8,
    pub origin: TagOrigin,
}

impl TimeTag {
    pub fn new(time_ps: i64, channel: u8, origin: TagOrigin) -> Self {
        TimeTag { time_ps, channel, origin }
    }
}

/// A point estimate with its one-standard-deviation statistical error,
/// propagated from Poisson counting statistics unless documented otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_err: f64,
}

impl Estimate {
    pub fn new(value: f64, std_err: f64) -> Self {
        Estimate { value, std_err }
    }

    /// Standard score of the difference to another estimate, treating the
    /// two as independent.
    pub fn separation_sigma(&self, other: &Estimate) -> f64 {
        let var = self.std_err * self.std_err + other.std_err * other.std_err;
        if var == 0.0 {
            return f64::INFINITY;
        }
        (self.value - other.value) / var.sqrt()
    }
}

/// Check that a slice of tags is sorted by time (ties allowed).
pub fn is_time_sorted(tags: &[TimeTag]) -> bool {
    tags.windows(2).all(|w| w[0].time_ps <= w[1].time_ps)
}
