//! Closed-form quantities of the BBM92 key-rate pipeline.
//!
//! Everything in this module is a pure function of its inputs: the secure-key
//! bound, the channel-attenuation estimator, the pair-rate normalization, the
//! detector noise yield and the entropy helpers. Rates are in counts per
//! second, durations in seconds, and `mu` is always the dimensionless pair
//! rate per coincidence window (pairs per second is `mu / tau_cw`).

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of single-photon detectors per receiving module (two bases, two
/// outcomes).
pub const DETECTORS_PER_ARM: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("{name} must lie in [{lo}, {hi}], got {value}")]
    OutOfRange {
        name: &'static str,
        lo: f64,
        hi: f64,
        value: f64,
    },
    #[error("phase-error deviation requires nonzero sifted counts in both bases")]
    DegenerateSample,
    #[error("singles rate {rate} cps does not exceed the noise floor {noise} cps")]
    NegativeSignal { rate: f64, noise: f64 },
    #[error(
        "coincidence rate {observed} cps does not exceed the accidental level {accidental} cps; \
         attenuation is unbounded"
    )]
    AccidentalDominated { observed: f64, accidental: f64 },
}

fn check_range(name: &'static str, value: f64, lo: f64, hi: f64) -> Result<(), ModelError> {
    if !(value >= lo && value <= hi) {
        return Err(ModelError::OutOfRange {
            name,
            lo,
            hi,
            value,
        });
    }
    Ok(())
}

/// How the phase error rate entering the secure-key bound is derived from the
/// measured QBERs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PhaseErrorMode {
    /// Phase error of a basis equals the measured QBER of the same basis with
    /// no statistical penalty.
    #[default]
    SameBasisAsymptotic,
    /// Same-basis assignment plus a one-sided normal-quantile deviation.
    SameBasisWithDeviation,
    /// Phase error of one basis estimated from the other basis' QBER plus the
    /// deviation.
    CrossBasisWithDeviation,
}

/// Protocol constants entering the key-length bound.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProtocolParams {
    /// Coincidence window `tau_cw` in seconds. Two detections pair up when
    /// their corrected times differ by at most half this width.
    pub coincidence_window: f64,
    /// Error-correction inefficiency `f >= 1` relative to the Shannon limit.
    pub ec_efficiency: f64,
    /// Failure probability of the phase-error estimate.
    pub phase_error_failure_prob: f64,
    pub phase_error_mode: PhaseErrorMode,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        Self {
            coincidence_window: 1e-9,
            ec_efficiency: 1.2,
            phase_error_failure_prob: 1e-5,
            phase_error_mode: PhaseErrorMode::SameBasisAsymptotic,
        }
    }
}

impl ProtocolParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.coincidence_window <= 0.0 {
            return Err(ModelError::OutOfRange {
                name: "coincidence_window",
                lo: f64::MIN_POSITIVE,
                hi: f64::INFINITY,
                value: self.coincidence_window,
            });
        }
        check_range("ec_efficiency", self.ec_efficiency, 1.0, f64::INFINITY)?;
        if !(self.phase_error_failure_prob > 0.0 && self.phase_error_failure_prob < 1.0) {
            return Err(ModelError::OutOfRange {
                name: "phase_error_failure_prob",
                lo: 0.0,
                hi: 1.0,
                value: self.phase_error_failure_prob,
            });
        }
        Ok(())
    }
}

/// Sifted counts and error rates per measurement basis.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BasisStats {
    pub n_sift_z: f64,
    pub n_sift_x: f64,
    pub qber_z: f64,
    pub qber_x: f64,
    /// Accumulation time in seconds; used to convert key length to a rate.
    pub duration: f64,
}

impl BasisStats {
    pub fn validate(&self) -> Result<(), ModelError> {
        check_range("n_sift_z", self.n_sift_z, 0.0, f64::INFINITY)?;
        check_range("n_sift_x", self.n_sift_x, 0.0, f64::INFINITY)?;
        check_range("qber_z", self.qber_z, 0.0, 0.5)?;
        check_range("qber_x", self.qber_x, 0.0, 0.5)?;
        if self.duration <= 0.0 {
            return Err(ModelError::OutOfRange {
                name: "duration",
                lo: f64::MIN_POSITIVE,
                hi: f64::INFINITY,
                value: self.duration,
            });
        }
        Ok(())
    }
}

/// Phase-error rates entering the bound, together with the statistical
/// deviation that was applied on top of the base QBERs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PhaseErrorEstimate {
    pub e_ph_z: f64,
    pub e_ph_x: f64,
    /// Largest deviation applied to either basis (zero in asymptotic mode).
    pub deviation: f64,
}

/// Photon-pair source parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SourceParams {
    /// Generated pairs per second (`mu / tau_cw`).
    pub pair_rate: f64,
    /// Heralding efficiency of arm A, including local coupling and detection.
    pub heralding_eff_a: f64,
    /// Heralding efficiency of arm B before its transmission channel.
    pub heralding_eff_b: f64,
    /// Intrinsic polarization misalignment error rate `e_d`.
    pub misalignment_error: f64,
    /// Two-photon interference visibility, when known; `e_d = (1 - V) / 2`.
    pub visibility: Option<f64>,
}

impl SourceParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        check_range("pair_rate", self.pair_rate, 0.0, f64::INFINITY)?;
        if !(self.heralding_eff_a > 0.0 && self.heralding_eff_a <= 1.0) {
            return Err(ModelError::OutOfRange {
                name: "heralding_eff_a",
                lo: 0.0,
                hi: 1.0,
                value: self.heralding_eff_a,
            });
        }
        if !(self.heralding_eff_b > 0.0 && self.heralding_eff_b <= 1.0) {
            return Err(ModelError::OutOfRange {
                name: "heralding_eff_b",
                lo: 0.0,
                hi: 1.0,
                value: self.heralding_eff_b,
            });
        }
        check_range("misalignment_error", self.misalignment_error, 0.0, 0.5)?;
        if let Some(v) = self.visibility {
            check_range("visibility", v, 0.0, 1.0)?;
        }
        Ok(())
    }
}

/// Detector-side parameters of one receiving module.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DetectorParams {
    /// Dark-count rate of the whole module (all detectors summed), cps.
    pub dark_rate: f64,
    /// Non-paralyzable dead time per detector, seconds.
    pub dead_time: f64,
    /// Afterpulse probability per registered detection.
    pub afterpulse_prob: f64,
    /// Gaussian timing jitter (one sigma) of this module, seconds.
    pub jitter_sigma: f64,
    /// Fixed noise yield per coincidence window. When set it overrides the
    /// afterpulse/dark composition of [`effective_noise_yield`].
    pub noise_yield: Option<f64>,
}

impl DetectorParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        check_range("dark_rate", self.dark_rate, 0.0, f64::INFINITY)?;
        check_range("dead_time", self.dead_time, 0.0, f64::INFINITY)?;
        if !(self.afterpulse_prob >= 0.0 && self.afterpulse_prob < 1.0) {
            return Err(ModelError::OutOfRange {
                name: "afterpulse_prob",
                lo: 0.0,
                hi: 1.0,
                value: self.afterpulse_prob,
            });
        }
        check_range("jitter_sigma", self.jitter_sigma, 0.0, f64::INFINITY)?;
        if let Some(y) = self.noise_yield {
            check_range("noise_yield", y, 0.0, f64::INFINITY)?;
        }
        Ok(())
    }
}

/// Transmission-channel parameters of one arm.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ChannelParams {
    /// One-way attenuation of the arm in dB.
    pub loss_db: f64,
    /// Uncorrelated background rate per detector channel, cps.
    pub background_rate_per_detector: f64,
}

impl ChannelParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        check_range("loss_db", self.loss_db, 0.0, f64::INFINITY)?;
        check_range(
            "background_rate_per_detector",
            self.background_rate_per_detector,
            0.0,
            f64::INFINITY,
        )?;
        Ok(())
    }

    /// Linear transmission `10^(-loss/10)`.
    pub fn transmission(&self) -> f64 {
        10f64.powf(-self.loss_db / 10.0)
    }
}

/// Binary entropy in bits per symbol, with `H2(0) = H2(1) = 0` by continuity.
pub fn binary_entropy(p: f64) -> Result<f64, ModelError> {
    check_range("p", p, 0.0, 1.0)?;
    Ok(binary_entropy_unchecked(p))
}

pub(crate) fn binary_entropy_unchecked(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    -p * p.log2() - (1.0 - p) * (1.0 - p).log2()
}

/// One-sided standard-normal quantile `z` with `Phi(z) = 1 - eps`.
///
/// Acklam's rational approximation refined by one Halley step of the exact
/// CDF; accurate to well below 1e-9 over the full open interval.
pub fn one_sided_quantile(eps: f64) -> Result<f64, ModelError> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(ModelError::OutOfRange {
            name: "eps",
            lo: 0.0,
            hi: 1.0,
            value: eps,
        });
    }
    Ok(inverse_normal_cdf(1.0 - eps))
}

fn inverse_normal_cdf(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.38357751867269e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let mut x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };

    // Halley refinement against the exact CDF.
    let e = 0.5 * libm::erfc(-x / std::f64::consts::SQRT_2) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (x * x / 2.0).exp();
    x -= u / (1.0 + x * u / 2.0);
    x
}

/// Normal-quantile deviation applied to a QBER estimate of `base_qber`
/// obtained from sifted blocks of size `n_z` and `n_x`.
pub fn qber_deviation(
    base_qber: f64,
    n_z: f64,
    n_x: f64,
    eps: f64,
) -> Result<f64, ModelError> {
    check_range("base_qber", base_qber, 0.0, 0.5)?;
    if n_z <= 0.0 || n_x <= 0.0 {
        return Err(ModelError::DegenerateSample);
    }
    let z = one_sided_quantile(eps)?;
    Ok(z * (base_qber * (1.0 - base_qber) * (n_x + n_z) / (n_x * n_z)).sqrt())
}

/// Serfling-style sampling-without-replacement deviation for estimating the
/// phase error of an `n_key`-bit block from an `n_sample`-bit sample.
///
/// Provided as the pessimistic companion bound to [`qber_deviation`]; the two
/// bracket the finite-sample penalty from below and above.
pub fn serfling_deviation(n_key: f64, n_sample: f64, eps: f64) -> Result<f64, ModelError> {
    if n_key <= 0.0 || n_sample <= 0.0 {
        return Err(ModelError::DegenerateSample);
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(ModelError::OutOfRange {
            name: "eps",
            lo: 0.0,
            hi: 1.0,
            value: eps,
        });
    }
    let (n, k) = (n_key, n_sample);
    Ok(((n + k) * (k + 1.0) / (n * k * k) * (1.0 / eps).ln() / 2.0).sqrt())
}

/// Phase-error estimate from a single base QBER shared by both bases.
pub fn phase_error_estimate(
    base_qber: f64,
    n_z: f64,
    n_x: f64,
    eps: f64,
    mode: PhaseErrorMode,
) -> Result<PhaseErrorEstimate, ModelError> {
    check_range("base_qber", base_qber, 0.0, 0.5)?;
    let theta = match mode {
        PhaseErrorMode::SameBasisAsymptotic => 0.0,
        PhaseErrorMode::SameBasisWithDeviation | PhaseErrorMode::CrossBasisWithDeviation => {
            qber_deviation(base_qber, n_z, n_x, eps)?
        }
    };
    let e_ph = (base_qber + theta).min(0.5);
    Ok(PhaseErrorEstimate {
        e_ph_z: e_ph,
        e_ph_x: e_ph,
        deviation: theta,
    })
}

/// Per-basis phase-error assignment for a full [`BasisStats`] record.
pub fn phase_errors_for(
    stats: &BasisStats,
    protocol: &ProtocolParams,
) -> Result<PhaseErrorEstimate, ModelError> {
    let eps = protocol.phase_error_failure_prob;
    let (base_z, base_x) = match protocol.phase_error_mode {
        PhaseErrorMode::SameBasisAsymptotic | PhaseErrorMode::SameBasisWithDeviation => {
            (stats.qber_z, stats.qber_x)
        }
        PhaseErrorMode::CrossBasisWithDeviation => (stats.qber_x, stats.qber_z),
    };
    match protocol.phase_error_mode {
        PhaseErrorMode::SameBasisAsymptotic => Ok(PhaseErrorEstimate {
            e_ph_z: base_z,
            e_ph_x: base_x,
            deviation: 0.0,
        }),
        _ => {
            let th_z = qber_deviation(base_z, stats.n_sift_z, stats.n_sift_x, eps)?;
            let th_x = qber_deviation(base_x, stats.n_sift_z, stats.n_sift_x, eps)?;
            Ok(PhaseErrorEstimate {
                e_ph_z: (base_z + th_z).min(0.5),
                e_ph_x: (base_x + th_x).min(0.5),
                deviation: th_z.max(th_x),
            })
        }
    }
}

/// Result of the secure-key bound.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KeyLength {
    /// Extractable key in bits; never negative.
    pub bits: f64,
    /// `bits / duration`.
    pub rate_bps: f64,
    /// Set when sifted data was present but both basis terms were floored to
    /// zero.
    pub aborted: bool,
    pub phase: PhaseErrorEstimate,
}

/// Secure key length with explicit phase-error rates.
///
/// Each basis contributes `N_s [1 - H2(e_ph) - f H2(E)]`, floored at zero: a
/// basis that yields no key cannot subtract key from the other.
pub fn secure_key_length_with_phase(
    stats: &BasisStats,
    protocol: &ProtocolParams,
    phase: &PhaseErrorEstimate,
) -> Result<KeyLength, ModelError> {
    stats.validate()?;
    protocol.validate()?;
    let f = protocol.ec_efficiency;
    let term = |n: f64, e: f64, e_ph: f64| {
        (n * (1.0 - binary_entropy_unchecked(e_ph) - f * binary_entropy_unchecked(e))).max(0.0)
    };
    let bits_z = term(stats.n_sift_z, stats.qber_z, phase.e_ph_z);
    let bits_x = term(stats.n_sift_x, stats.qber_x, phase.e_ph_x);
    let bits = bits_z + bits_x;
    Ok(KeyLength {
        bits,
        rate_bps: bits / stats.duration,
        aborted: bits == 0.0 && (stats.n_sift_z + stats.n_sift_x) > 0.0,
        phase: *phase,
    })
}

/// Secure key length with the phase error derived from the protocol's
/// [`PhaseErrorMode`].
pub fn secure_key_length(
    stats: &BasisStats,
    protocol: &ProtocolParams,
) -> Result<KeyLength, ModelError> {
    stats.validate()?;
    protocol.validate()?;
    let phase = phase_errors_for(stats, protocol)?;
    secure_key_length_with_phase(stats, protocol, &phase)
}

/// Pair rate normalization result.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PairRate {
    /// Dimensionless pairs per coincidence window.
    pub mu: f64,
    /// Generated pairs per second, `mu / window`.
    pub pairs_per_second: f64,
}

/// Photon pair rate per coincidence window from an observed singles rate:
/// `mu = (R - Y0/tau) * tau / eta`.
pub fn pair_rate_per_window(
    r_singles: f64,
    noise_yield: f64,
    window: f64,
    heralding: f64,
) -> Result<PairRate, ModelError> {
    if window <= 0.0 {
        return Err(ModelError::OutOfRange {
            name: "window",
            lo: f64::MIN_POSITIVE,
            hi: f64::INFINITY,
            value: window,
        });
    }
    if !(heralding > 0.0 && heralding <= 1.0) {
        return Err(ModelError::OutOfRange {
            name: "heralding",
            lo: 0.0,
            hi: 1.0,
            value: heralding,
        });
    }
    check_range("r_singles", r_singles, 0.0, f64::INFINITY)?;
    check_range("noise_yield", noise_yield, 0.0, f64::INFINITY)?;
    if r_singles * window < noise_yield {
        return Err(ModelError::NegativeSignal {
            rate: r_singles,
            noise: noise_yield / window,
        });
    }
    let mu = (r_singles * window - noise_yield) / heralding;
    Ok(PairRate {
        mu,
        pairs_per_second: mu / window,
    })
}

/// One-arm channel attenuation from coincidence and singles rates:
/// `alpha = -10 log10((R_CC - R_A R_B tau) / R_A)`.
pub fn channel_attenuation_db(
    r_cc: f64,
    r_a: f64,
    r_b: f64,
    window: f64,
) -> Result<f64, ModelError> {
    if r_a <= 0.0 {
        return Err(ModelError::OutOfRange {
            name: "r_a",
            lo: f64::MIN_POSITIVE,
            hi: f64::INFINITY,
            value: r_a,
        });
    }
    if window <= 0.0 {
        return Err(ModelError::OutOfRange {
            name: "window",
            lo: f64::MIN_POSITIVE,
            hi: f64::INFINITY,
            value: window,
        });
    }
    check_range("r_b", r_b, 0.0, f64::INFINITY)?;
    let accidental = r_a * r_b * window;
    if r_cc <= accidental {
        return Err(ModelError::AccidentalDominated {
            observed: r_cc,
            accidental,
        });
    }
    Ok(-10.0 * ((r_cc - accidental) / r_a).log10())
}

/// Effective noise yield per coincidence window of one detector module:
/// `Y0 = mu * eta * P_a + tau * R_DC`.
///
/// The first term covers afterpulsing triggered by signal detections
/// (`mu * eta` is the per-window signal yield), the second covers dark and
/// background counts.
pub fn effective_noise_yield(
    mu: f64,
    overall_eff: f64,
    afterpulse: f64,
    window: f64,
    dark_rate: f64,
) -> Result<f64, ModelError> {
    check_range("mu", mu, 0.0, f64::INFINITY)?;
    check_range("overall_eff", overall_eff, 0.0, 1.0)?;
    if !(0.0..1.0).contains(&afterpulse) {
        return Err(ModelError::OutOfRange {
            name: "afterpulse",
            lo: 0.0,
            hi: 1.0,
            value: afterpulse,
        });
    }
    check_range("window", window, 0.0, f64::INFINITY)?;
    check_range("dark_rate", dark_rate, 0.0, f64::INFINITY)?;
    Ok(mu * overall_eff * afterpulse + window * dark_rate)
}

/// Misalignment error rate corresponding to a two-photon visibility:
/// `e = (1 - V) / 2`.
pub fn visibility_to_error(v: f64) -> Result<f64, ModelError> {
    check_range("v", v, 0.0, 1.0)?;
    Ok((1.0 - v) / 2.0)
}
