//! Closed-loop Monte Carlo model of a heralded single-photon source (HSPS)
//! read out by single-photon detectors, together with the timetag analysis
//! toolkit used to characterize such a system.
//!
//! The crate is organized as a pipeline:
//!
//! * [`source`] generates photon-pair streams (thermal per-mode statistics,
//!   asymmetric exponential signal-idler delays) and pulsed attenuated-laser
//!   photon trains, and routes photons through lossy channels.
//! * [`detector`] converts photon arrivals into timetags with models of a
//!   gated InGaAs/InP SPAD (top-hat gate train, per-gate dark counts,
//!   carrier-trap afterpulsing, discriminator deadtime, hold-off, Gaussian
//!   jitter) and of an SNSPD (free-running, Poissonian dark counts).
//! * [`characterization`] folds tag streams into per-period histograms and
//!   estimates detection efficiency, dark-count rate, and afterpulse
//!   probability, including post-processed hold-off sweeps.
//! * [`correlation`] builds auto/cross-correlation histograms with an exact
//!   streaming two-pointer counter, normalizes them to g2, fits the
//!   coherence peak, and derives heralding metrics and the heralded g2.
//! * [`config`] + [`pipeline`] tie the stages into reproducible, seeded,
//!   chunked runs driven by a TOML configuration, with binary tag files and
//!   a hashed output manifest ([`io`]).
//!
//! All event times are integer picoseconds; all randomness flows from a
//! single run seed through per-role derived streams ([`rng`]), so a run is
//! bit-reproducible regardless of chunking batch width or thread count.

pub mod characterization;
pub mod config;
pub mod correlation;
pub mod detector;
pub mod error;
pub mod fit;
pub mod io;
pub mod pipeline;
pub mod rng;
pub mod source;
pub mod types;

pub use error::{Error, Result};
pub use types::{Arm, Estimate, PairEvent, PhotonArrival, TagOrigin, TimeTag};
