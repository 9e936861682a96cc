//! Analytic forward model of one entanglement link.
//!
//! [`predict`] composes source brightness, per-arm transmission, detector
//! noise, dead-time saturation and timing jitter into singles, coincidence,
//! QBER and secure-key-rate figures for stationary conditions. The same
//! composition drives the pair-rate optimizer and the satellite-pass
//! evaluator, and the Monte Carlo synthesizer reproduces it event by event.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    effective_noise_yield, secure_key_length, BasisStats, ChannelParams, DetectorParams,
    ModelError, ProtocolParams, SourceParams, DETECTORS_PER_ARM,
};

#[derive(Debug, Error)]
pub enum LinkError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("sweep grid must be nonempty and strictly increasing")]
    BadGrid,
    #[error("basis split must be two positive fractions summing to 1, got ({0}, {1})")]
    BadBasisSplit(f64, f64),
    #[error("csv: {0}")]
    Io(#[from] std::io::Error),
}

/// One receiving arm: transmission channel plus detector module.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Arm {
    pub channel: ChannelParams,
    pub detector: DetectorParams,
}

impl Arm {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.channel.validate()?;
        self.detector.validate()
    }

    /// Total uncorrelated noise rate of the module in cps: darks plus
    /// background over all detector channels.
    pub fn noise_rate(&self) -> f64 {
        self.detector.dark_rate
            + self.channel.background_rate_per_detector * DETECTORS_PER_ARM as f64
    }
}

/// How a requested "total link loss" maps onto the two arms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TotalLossRule {
    /// Arm A keeps a fixed share (dB) of the total; the rest goes to arm B.
    /// Used for the source-local / free-space-remote topology.
    FixedArmA(f64),
    /// Both arms carry half of the total. Used for dual-downlink topologies.
    Symmetric,
}

/// Full parameterization of one link.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LinkModel {
    pub source: SourceParams,
    pub arm_a: Arm,
    pub arm_b: Arm,
    pub protocol: ProtocolParams,
    /// Target sifted-key share per basis `(p_z, p_x)`, `p_z + p_x = 1`.
    /// The per-photon basis-choice probability `q_z` follows from
    /// `q_z^2 : q_x^2 = p_z : p_x`.
    pub basis_split: (f64, f64),
    pub total_loss_rule: TotalLossRule,
}

/// Fixed dB share attributed to the source-local arm when quoting a total
/// link loss for the terrestrial topology.
pub const LOCAL_ARM_LOSS_DB: f64 = 4.8;

impl LinkModel {
    pub fn validate(&self) -> Result<(), LinkError> {
        self.source.validate()?;
        self.arm_a.validate()?;
        self.arm_b.validate()?;
        self.protocol.validate()?;
        let (pz, px) = self.basis_split;
        if !(pz > 0.0 && px > 0.0 && (pz + px - 1.0).abs() < 1e-9) {
            return Err(LinkError::BadBasisSplit(pz, px));
        }
        Ok(())
    }

    /// Pairs per coincidence window.
    pub fn mu(&self) -> f64 {
        self.source.pair_rate * self.protocol.coincidence_window
    }

    pub fn with_mu(mut self, mu: f64) -> Self {
        self.source.pair_rate = mu / self.protocol.coincidence_window;
        self
    }

    /// Total link loss in dB implied by the loss rule and current arms.
    pub fn total_loss_db(&self) -> f64 {
        match self.total_loss_rule {
            TotalLossRule::FixedArmA(a) => a + self.arm_b.channel.loss_db,
            TotalLossRule::Symmetric => self.arm_a.channel.loss_db + self.arm_b.channel.loss_db,
        }
    }

    /// Redistributes `total_db` over the arms according to the loss rule.
    pub fn with_total_loss(mut self, total_db: f64) -> Self {
        match self.total_loss_rule {
            TotalLossRule::FixedArmA(a) => {
                self.arm_b.channel.loss_db = (total_db - a).max(0.0);
            }
            TotalLossRule::Symmetric => {
                self.arm_a.channel.loss_db = total_db / 2.0;
                self.arm_b.channel.loss_db = total_db / 2.0;
            }
        }
        self
    }

    /// Per-photon probability of choosing the z basis.
    pub fn basis_choice_z(&self) -> f64 {
        let (pz, px) = self.basis_split;
        let rz = pz.sqrt();
        rz / (rz + px.sqrt())
    }

    /// Reference parameter set of a high-brightness terrestrial free-space
    /// link: fiber-coupled local arm, 38.72 dB remote arm, SPAD-class
    /// receivers with measured per-window noise yields.
    pub fn terrestrial_reference() -> Self {
        let protocol = ProtocolParams::default();
        LinkModel {
            source: SourceParams {
                pair_rate: 0.0402 / protocol.coincidence_window,
                heralding_eff_a: 0.3142,
                heralding_eff_b: 1.0,
                misalignment_error: 0.033,
                visibility: Some(0.934),
            },
            arm_a: Arm {
                channel: ChannelParams {
                    loss_db: 0.0,
                    background_rate_per_detector: 0.0,
                },
                detector: DetectorParams {
                    dark_rate: 0.0,
                    dead_time: 0.0,
                    afterpulse_prob: 0.0,
                    jitter_sigma: 150e-12,
                    noise_yield: Some(4.71e-4),
                },
            },
            arm_b: Arm {
                channel: ChannelParams {
                    loss_db: 38.72,
                    background_rate_per_detector: 450.0,
                },
                detector: DetectorParams {
                    dark_rate: 0.0,
                    dead_time: 0.0,
                    afterpulse_prob: 0.0,
                    jitter_sigma: 150e-12,
                    noise_yield: Some(2.2e-6),
                },
            },
            protocol,
            basis_split: (0.4, 0.6),
            total_loss_rule: TotalLossRule::FixedArmA(LOCAL_ARM_LOSS_DB),
        }
    }
}

/// Stationary rate prediction for one link condition.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RatePrediction {
    /// Observed singles at arm A, cps (after dead-time saturation).
    pub singles_a: f64,
    pub singles_b: f64,
    /// Correlated pair coincidences inside the window, cps.
    pub true_coinc: f64,
    /// Uncorrelated coincidences formed by the one-to-one matcher, cps.
    pub accidental_coinc: f64,
    /// `true_coinc + accidental_coinc`.
    pub coincidence_total: f64,
    pub sifted_rate_z: f64,
    pub sifted_rate_x: f64,
    pub qber_z: f64,
    pub qber_x: f64,
    /// Asymptotic secure key rate, bits per second.
    pub skr: f64,
    /// Fraction of correlated pairs whose time difference falls inside the
    /// window given the combined jitter.
    pub window_capture: f64,
}

fn saturate(rate: f64, dead_time: f64) -> f64 {
    // non-paralyzable dead time per detector; module rate split evenly
    if dead_time <= 0.0 || rate <= 0.0 {
        return rate;
    }
    let per = rate / DETECTORS_PER_ARM as f64;
    DETECTORS_PER_ARM as f64 * per / (1.0 + per * dead_time)
}

fn arm_noise_yield(link: &LinkModel, arm: &Arm, eta: f64) -> f64 {
    match arm.detector.noise_yield {
        Some(y) => y,
        None => effective_noise_yield(
            link.mu(),
            eta,
            arm.detector.afterpulse_prob,
            link.protocol.coincidence_window,
            arm.noise_rate(),
        )
        .unwrap_or(0.0),
    }
}

/// Forward model: singles, coincidences, QBER and SKR for one condition.
pub fn predict(link: &LinkModel) -> RatePrediction {
    let tau = link.protocol.coincidence_window;
    let pair_rate = link.source.pair_rate;
    let e_d = link.source.misalignment_error;

    let eta_a = link.source.heralding_eff_a * link.arm_a.channel.transmission();
    let eta_b = link.source.heralding_eff_b * link.arm_b.channel.transmission();

    let y0_a = arm_noise_yield(link, &link.arm_a, eta_a);
    let y0_b = arm_noise_yield(link, &link.arm_b, eta_b);

    let raw_a = pair_rate * eta_a + y0_a / tau;
    let raw_b = pair_rate * eta_b + y0_b / tau;
    let singles_a = saturate(raw_a, link.arm_a.detector.dead_time);
    let singles_b = saturate(raw_b, link.arm_b.detector.dead_time);
    let sat_a = if raw_a > 0.0 { singles_a / raw_a } else { 1.0 };
    let sat_b = if raw_b > 0.0 { singles_b / raw_b } else { 1.0 };

    // Pair time differences are Gaussian with the combined jitter of both
    // modules; only the fraction inside +-tau/2 produces a coincidence.
    let sigma_pair = (link.arm_a.detector.jitter_sigma.powi(2)
        + link.arm_b.detector.jitter_sigma.powi(2))
    .sqrt();
    let window_capture = if sigma_pair > 0.0 {
        libm::erf(tau / (2.0 * std::f64::consts::SQRT_2 * sigma_pair))
    } else {
        1.0
    };

    let true_coinc = window_capture * pair_rate * eta_a * eta_b * sat_a * sat_b;
    // One-to-one matching consumes the paired tags, so only the remainder of
    // each stream is available for uncorrelated coincidences.
    let accidental_coinc =
        (singles_a - true_coinc).max(0.0) * (singles_b - true_coinc).max(0.0) * tau;
    let coincidence_total = true_coinc + accidental_coinc;

    let qber = if coincidence_total > 0.0 {
        ((e_d * true_coinc + 0.5 * accidental_coinc) / coincidence_total).min(0.5)
    } else {
        0.5
    };

    let qz = link.basis_choice_z();
    let qx = 1.0 - qz;
    let sifted_rate_z = qz * qz * coincidence_total;
    let sifted_rate_x = qx * qx * coincidence_total;

    let stats = BasisStats {
        n_sift_z: sifted_rate_z,
        n_sift_x: sifted_rate_x,
        qber_z: qber,
        qber_x: qber,
        duration: 1.0,
    };
    let skr = secure_key_length(&stats, &link.protocol)
        .map(|k| k.rate_bps)
        .unwrap_or(0.0);

    RatePrediction {
        singles_a,
        singles_b,
        true_coinc,
        accidental_coinc,
        coincidence_total,
        sifted_rate_z,
        sifted_rate_x,
        qber_z: qber,
        qber_x: qber,
        skr,
        window_capture,
    }
}

/// Quantity swept by [`sweep`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    /// Total link loss in dB, distributed per the model's loss rule.
    LossDbTotal,
    /// Pair rate per coincidence window.
    PairRate,
}

/// Evaluates the model over an ordered grid of one variable.
pub fn sweep(
    link: &LinkModel,
    variable: SweepVariable,
    grid: &[f64],
) -> Result<Vec<(f64, RatePrediction)>, LinkError> {
    link.validate()?;
    if grid.is_empty() || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(LinkError::BadGrid);
    }
    crate::init_thread_pool();
    Ok(grid
        .par_iter()
        .map(|&v| {
            let m = match variable {
                SweepVariable::LossDbTotal => link.with_total_loss(v),
                SweepVariable::PairRate => link.with_mu(v),
            };
            (v, predict(&m))
        })
        .collect())
}

/// Writes a sweep as CSV with the stable column set.
pub fn write_sweep_csv<W: Write>(
    mut w: W,
    series: &[(f64, RatePrediction)],
) -> Result<(), LinkError> {
    writeln!(
        w,
        "variable,skr_bps,qber_z,qber_x,singles_a,singles_b,coinc_total"
    )?;
    for (v, p) in series {
        writeln!(
            w,
            "{v},{},{},{},{},{},{}",
            p.skr, p.qber_z, p.qber_x, p.singles_a, p.singles_b, p.coincidence_total
        )?;
    }
    Ok(())
}
