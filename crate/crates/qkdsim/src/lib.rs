//! Simulator and analytics library for entanglement-based (BBM92) free-space
//! quantum key distribution links.
//!
//! The crate covers the full desk-scale loop for terrestrial and satellite
//! downlink scenarios:
//!
//! * [`model`] — closed-form pieces: the secure-key bound, channel
//!   attenuation, pair-rate normalization, noise yields, entropy helpers.
//! * [`link`] — the stationary forward model from a full link
//!   parameterization to singles/coincidence/QBER/SKR predictions.
//! * [`optim`] — pair-rate optimization and its tolerance bands.
//! * [`tags`] / [`sim`] — timestamp-stream formats and Monte Carlo synthesis
//!   with ground truth.
//! * [`sync`] — clock offset/drift recovery and coincidence pairing.
//! * [`key`] — sifting, QBER estimation, reconciliation accounting and
//!   Toeplitz privacy amplification.
//! * [`satpass`] — time-varying pass profiles and the dual-downlink model.
//!
//! Worker parallelism of grid evaluations is capped by the `QKDSIM_THREADS`
//! environment variable.

pub mod key;
pub mod link;
pub mod model;
pub mod optim;
pub mod satpass;
pub mod sim;
pub mod sync;
pub mod tags;

pub use key::{full_pipeline, KeyReport, PipelineOptions, SiftedKey};
pub use link::{predict, sweep, Arm, LinkModel, RatePrediction, SweepVariable, TotalLossRule};
pub use model::{
    binary_entropy, channel_attenuation_db, effective_noise_yield, pair_rate_per_window,
    secure_key_length, visibility_to_error, BasisStats, ChannelParams, DetectorParams,
    PhaseErrorMode, ProtocolParams, SourceParams,
};
pub use optim::{optimize_pair_rate, optimum_vs_loss, Optimum};
pub use satpass::{dual_predict, pass_skr, DualLinkModel, MuPolicy, PassProfile};
pub use sim::{apply_pass_profile, synthesize, TruthRecord};
pub use sync::{
    coarse_offset_search, correlation_histogram, find_coincidences, track_drift, ClockModel,
    CoincidencePair, CorrelationHistogram,
};
pub use tags::{ClockTruth, TagStream, TimeTag};

use std::sync::Once;

static POOL_INIT: Once = Once::new();

/// Builds the global worker pool once, honoring `QKDSIM_THREADS`.
pub(crate) fn init_thread_pool() {
    POOL_INIT.call_once(|| {
        if let Ok(v) = std::env::var("QKDSIM_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n >= 1 {
                    // fails harmlessly if a pool already exists
                    let _ = rayon::ThreadPoolBuilder::new()
                        .num_threads(n)
                        .build_global();
                }
            }
        }
    });
}
