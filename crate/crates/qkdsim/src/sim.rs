//! Monte Carlo synthesis of two-party timestamp streams.
//!
//! Pair emissions form a homogeneous Poisson process at the configured pair
//! rate. Each photon independently survives its arm, picks a basis and
//! outcome, receives Gaussian timing jitter, and competes with dark,
//! background and afterpulse tags before dead-time censoring. Stream B is
//! finally recorded through its clock transform
//! `t -> t * (1 + drift) + offset`.
//!
//! Only emissions with at least one surviving photon are walked explicitly;
//! fully lost pairs are accounted for by an equivalent Poisson draw, which
//! keeps multi-second runs at megacount rates tractable. Every stochastic
//! ingredient here has a closed-form counterpart in [`crate::link::predict`],
//! and the two are held to agree within counting statistics.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::link::{Arm, LinkModel};
use crate::model::DETECTORS_PER_ARM;
use crate::tags::{ClockTruth, TagStream, TimeTag};

/// Mean of the exponential afterpulse delay, measured past the dead time.
pub const AFTERPULSE_MEAN_DELAY: f64 = 100e-9;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Link(#[from] crate::link::LinkError),
    #[error("duration must be >= 0, got {0}")]
    BadDuration(f64),
    #[error("profile does not cover [0, {duration}): {reason}")]
    Coverage { duration: f64, reason: String },
}

/// One piecewise-constant bin of a loss/background profile. The bin runs from
/// `t_start` to the next bin's start (the last bin extends to the end of the
/// run). `loss_db` replaces the remote-arm channel loss; a background entry
/// switches both arms to their mechanistic dark+background noise model.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProfileBin {
    pub t_start: f64,
    pub loss_db: f64,
    pub background_per_detector: Option<f64>,
}

/// Aggregate ground truth of one synthesis run.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct TruthRecord {
    /// All emitted pairs, including those lost in both arms.
    pub emitted_pairs: u64,
    /// Photon-A detections before dead-time censoring.
    pub detected_a: u64,
    pub detected_b: u64,
    /// Emissions with both photons detected (the true-coincidence budget).
    pub detected_both: u64,
    /// Both-detected emissions whose outcomes were flipped by misalignment.
    pub misalignment_flips: u64,
    pub noise_tags_a: u64,
    pub noise_tags_b: u64,
    /// Afterpulse tags that made it past dead-time censoring.
    pub afterpulses_a: u64,
    pub afterpulses_b: u64,
    pub censored_a: u64,
    pub censored_b: u64,
    pub duration: f64,
    pub seed: u64,
}

impl TruthRecord {
    /// Observed misalignment-error frequency among both-detected pairs.
    pub fn error_flag_rate(&self) -> f64 {
        if self.detected_both == 0 {
            0.0
        } else {
            self.misalignment_flips as f64 / self.detected_both as f64
        }
    }
}

/// Synthesizes both tag streams under stationary link conditions.
pub fn synthesize(
    link: &LinkModel,
    clocks: ClockTruth,
    duration: f64,
    seed: u64,
) -> Result<(TagStream, TagStream, TruthRecord), SimError> {
    let bins = [ProfileBin {
        t_start: 0.0,
        loss_db: link.arm_b.channel.loss_db,
        background_per_detector: None,
    }];
    synth_profile(link, &bins, clocks, duration, seed)
}

/// Synthesizes with a piecewise-constant remote-arm loss (and optionally
/// background) profile.
pub fn apply_pass_profile(
    link: &LinkModel,
    profile: &[ProfileBin],
    clocks: ClockTruth,
    duration: f64,
    seed: u64,
) -> Result<(TagStream, TagStream, TruthRecord), SimError> {
    if profile.is_empty() {
        return Err(SimError::Coverage {
            duration,
            reason: "empty profile".into(),
        });
    }
    if profile[0].t_start > 0.0 {
        return Err(SimError::Coverage {
            duration,
            reason: format!("first bin starts at {} s", profile[0].t_start),
        });
    }
    if profile.windows(2).any(|w| w[0].t_start >= w[1].t_start) {
        return Err(SimError::Coverage {
            duration,
            reason: "bin starts must increase strictly".into(),
        });
    }
    synth_profile(link, profile, clocks, duration, seed)
}

struct ArmState {
    raw: Vec<TimeTag>,
    jitter: Option<Normal<f64>>,
    dead_ps: i64,
    /// Mechanistic afterpulsing applies only when the arm has no fixed
    /// noise-yield override (the override already contains it).
    afterpulse_prob: f64,
}

impl ArmState {
    fn new(arm: &Arm) -> Self {
        let jitter = if arm.detector.jitter_sigma > 0.0 {
            Some(Normal::new(0.0, arm.detector.jitter_sigma).expect("valid sigma"))
        } else {
            None
        };
        ArmState {
            raw: Vec::new(),
            jitter,
            dead_ps: (arm.detector.dead_time * 1e12).round() as i64,
            afterpulse_prob: if arm.detector.noise_yield.is_none() {
                arm.detector.afterpulse_prob
            } else {
                0.0
            },
        }
    }

    fn push_signal(&mut self, t_s: f64, channel: u8, rng: &mut ChaCha8Rng) {
        let t = match &self.jitter {
            Some(n) => t_s + n.sample(rng),
            None => t_s,
        };
        self.raw.push(TimeTag {
            time_ps: (t * 1e12).round() as i64,
            channel,
        });
    }
}

/// Per-window noise yield converted to a module-level rate for one arm under
/// possibly overridden background.
fn arm_noise_rate(link: &LinkModel, arm: &Arm, eta: f64, bg_override: Option<f64>) -> f64 {
    let tau = link.protocol.coincidence_window;
    match (bg_override, arm.detector.noise_yield) {
        (Some(bg), _) => arm.detector.dark_rate + bg * DETECTORS_PER_ARM as f64,
        (None, Some(y)) => y / tau,
        (None, None) => {
            crate::model::effective_noise_yield(
                link.mu(),
                eta,
                0.0, // afterpulsing is generated mechanistically, not as rate
                tau,
                arm.noise_rate(),
            )
            .unwrap_or(0.0)
                / tau
        }
    }
}

fn synth_profile(
    link: &LinkModel,
    bins: &[ProfileBin],
    clocks: ClockTruth,
    duration: f64,
    seed: u64,
) -> Result<(TagStream, TagStream, TruthRecord), SimError> {
    link.validate()?;
    if duration.is_nan() || duration < 0.0 {
        return Err(SimError::BadDuration(duration));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut truth = TruthRecord {
        duration,
        seed,
        ..TruthRecord::default()
    };

    let mut state_a = ArmState::new(&link.arm_a);
    let mut state_b = ArmState::new(&link.arm_b);

    let q_z = link.basis_choice_z();
    let e_d = link.source.misalignment_error;
    let pair_rate = link.source.pair_rate;

    for (idx, bin) in bins.iter().enumerate() {
        let t0 = bin.t_start.max(0.0);
        let t1 = bins.get(idx + 1).map_or(duration, |b| b.t_start.min(duration));
        if t1 <= t0 {
            continue;
        }
        let mut arm_b_model = link.arm_b;
        arm_b_model.channel.loss_db = bin.loss_db;

        let p_a = link.source.heralding_eff_a * link.arm_a.channel.transmission();
        let p_b = link.source.heralding_eff_b * arm_b_model.channel.transmission();
        let p_any = p_a + p_b - p_a * p_b;

        // pairs detected on at least one side, walked explicitly
        if pair_rate > 0.0 && p_any > 0.0 {
            let exp = Exp::new(pair_rate * p_any).expect("positive rate");
            // pattern ranges: [0, p_only_a) A-only, [p_only_a, p_a_any) both,
            // [p_a_any, 1) B-only
            let p_only_a = p_a * (1.0 - p_b) / p_any;
            let p_a_any = p_a / p_any;
            let mut t = t0 + exp.sample(&mut rng);
            while t < t1 {
                truth.emitted_pairs += 1;
                let pattern = rng.gen::<f64>();
                let a_only = pattern < p_only_a;
                let b_only = pattern >= p_a_any;
                let both = !a_only && !b_only;

                let bits = rng.gen::<u64>();
                let outcome_a = bits & 1 == 1;
                if a_only || both {
                    let basis_a_z = rng.gen::<f64>() < q_z;
                    let ch = ((!basis_a_z as u8) << 1) | outcome_a as u8;
                    state_a.push_signal(t, ch, &mut rng);
                    truth.detected_a += 1;
                }
                if b_only || both {
                    let basis_b_z = rng.gen::<f64>() < q_z;
                    // anticorrelated source state; sifting flips this back
                    let mut outcome_b = !outcome_a;
                    if both {
                        truth.detected_b += 1;
                        truth.detected_both += 1;
                        if e_d > 0.0 && rng.gen::<f64>() < e_d {
                            outcome_b = !outcome_b;
                            truth.misalignment_flips += 1;
                        }
                    } else {
                        truth.detected_b += 1;
                    }
                    let ch = ((!basis_b_z as u8) << 1) | outcome_b as u8;
                    state_b.push_signal(t, ch, &mut rng);
                }
                t += exp.sample(&mut rng);
            }
            // pairs lost on both sides never materialize as tags; draw their
            // count so the emission total stays statistically exact
            let lost_mean = pair_rate * (1.0 - p_any) * (t1 - t0);
            if lost_mean > 0.0 {
                truth.emitted_pairs +=
                    Poisson::new(lost_mean).expect("positive mean").sample(&mut rng) as u64;
            }
        }

        // uncorrelated noise, uniform over detectors; the profile background
        // lands on the remote arm only
        let eta_a = link.source.heralding_eff_a * link.arm_a.channel.transmission();
        let eta_b = link.source.heralding_eff_b * arm_b_model.channel.transmission();
        let n_a = arm_noise_rate(link, &link.arm_a, eta_a, None);
        let n_b = arm_noise_rate(link, &arm_b_model, eta_b, bin.background_per_detector);
        truth.noise_tags_a += spawn_noise(&mut state_a.raw, n_a, t0, t1, &mut rng);
        truth.noise_tags_b += spawn_noise(&mut state_b.raw, n_b, t0, t1, &mut rng);
    }

    let (tags_a, censored_a, after_a) = finalize_arm(state_a, &mut rng, ClockTruth::default());
    let (tags_b, censored_b, after_b) = finalize_arm(state_b, &mut rng, clocks);
    truth.censored_a = censored_a;
    truth.censored_b = censored_b;
    truth.afterpulses_a = after_a;
    truth.afterpulses_b = after_b;

    let mut stream_a = TagStream::new("alice");
    stream_a.tags = tags_a;
    let mut stream_b = TagStream::new("bob");
    stream_b.tags = tags_b;
    stream_b.clock = clocks;
    Ok((stream_a, stream_b, truth))
}

fn spawn_noise(
    raw: &mut Vec<TimeTag>,
    rate: f64,
    t0: f64,
    t1: f64,
    rng: &mut ChaCha8Rng,
) -> u64 {
    if rate <= 0.0 || t1 <= t0 {
        return 0;
    }
    let exp = Exp::new(rate).expect("positive rate");
    let mut count = 0;
    let mut t = t0 + exp.sample(rng);
    while t < t1 {
        raw.push(TimeTag {
            time_ps: (t * 1e12).round() as i64,
            channel: (rng.gen::<u32>() % DETECTORS_PER_ARM as u32) as u8,
        });
        count += 1;
        t += exp.sample(rng);
    }
    count
}

/// Sorts, applies dead-time censoring with mechanistic afterpulses, and
/// records through the clock transform. Returns (tags, censored, afterpulses).
fn finalize_arm(
    state: ArmState,
    rng: &mut ChaCha8Rng,
    clocks: ClockTruth,
) -> (Vec<TimeTag>, u64, u64) {
    let ArmState {
        mut raw,
        dead_ps,
        afterpulse_prob,
        ..
    } = state;

    // clock transform first so censoring is exact on recorded times
    if clocks.offset_s != 0.0 || clocks.drift != 0.0 {
        let scale = 1.0 + clocks.drift;
        let offset_ps = clocks.offset_s * 1e12;
        for tag in &mut raw {
            tag.time_ps = (tag.time_ps as f64 * scale + offset_ps).round() as i64;
        }
    }
    raw.sort_unstable_by_key(|t| (t.time_ps, t.channel));

    if dead_ps == 0 && afterpulse_prob == 0.0 {
        return (raw, 0, 0);
    }

    let mut out = Vec::with_capacity(raw.len());
    let mut last = [i64::MIN / 2; DETECTORS_PER_ARM];
    let mut censored = 0u64;
    let mut afterpulses = 0u64;
    let delay = Exp::new(1.0 / AFTERPULSE_MEAN_DELAY).expect("positive rate");
    // afterpulse candidates pending insertion, min-heap on time
    let mut pending: BinaryHeap<Reverse<(i64, u8)>> = BinaryHeap::new();
    let mut next = raw.iter().copied().peekable();

    loop {
        let take_pending = match (next.peek(), pending.peek()) {
            (Some(tag), Some(Reverse((tp, _)))) => *tp <= tag.time_ps,
            (None, Some(_)) => true,
            (Some(_), None) => false,
            (None, None) => break,
        };
        let (tag, is_afterpulse) = if take_pending {
            let Reverse((time_ps, channel)) = pending.pop().expect("peeked");
            (TimeTag { time_ps, channel }, true)
        } else {
            (next.next().expect("peeked"), false)
        };
        let ch = (tag.channel & 0b11) as usize;
        if tag.time_ps - last[ch] < dead_ps {
            censored += 1;
            continue;
        }
        last[ch] = tag.time_ps;
        if is_afterpulse {
            afterpulses += 1;
        }
        out.push(tag);
        if afterpulse_prob > 0.0 && !is_afterpulse && rng.gen::<f64>() < afterpulse_prob {
            let dt = (dead_ps as f64 + delay.sample(rng) * 1e12).round() as i64;
            pending.push(Reverse((tag.time_ps + dt, tag.channel)));
        }
    }
    (out, censored, afterpulses)
}
