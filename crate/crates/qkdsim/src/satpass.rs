//! Satellite-pass scenarios: time-varying loss profiles, sky-noise
//! ingestion and the symmetric dual-downlink configuration where one
//! spaceborne source feeds two ground stations.

use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::link::{predict, Arm, LinkModel, RatePrediction, TotalLossRule};
use crate::model::{ChannelParams, DetectorParams, ProtocolParams, SourceParams};
use crate::optim::{optimize_pair_rate, OptimError, DEFAULT_MU_BOUNDS};
use crate::sim::ProfileBin;

#[derive(Debug, Error)]
pub enum PassError {
    #[error("profile line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("profile is empty")]
    Empty,
    #[error("profile times must increase strictly (line {line})")]
    NonMonotonic { line: usize },
    #[error(transparent)]
    Link(#[from] crate::link::LinkError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Time series of link conditions over one pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PassProfile {
    pub label: String,
    /// `(t_s, total_loss_db, background_cps_per_detector)` rows; each row is
    /// constant until the next row's time.
    pub rows: Vec<(f64, f64, f64)>,
}

impl PassProfile {
    pub fn validate(&self) -> Result<(), PassError> {
        if self.rows.is_empty() {
            return Err(PassError::Empty);
        }
        for (i, w) in self.rows.windows(2).enumerate() {
            if w[0].0 >= w[1].0 {
                return Err(PassError::NonMonotonic { line: i + 2 });
            }
        }
        if let Some((i, _)) = self
            .rows
            .iter()
            .enumerate()
            .find(|(_, r)| !r.1.is_finite() || r.2 < 0.0)
        {
            return Err(PassError::Format {
                line: i + 1,
                reason: "losses must be finite and backgrounds nonnegative".into(),
            });
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.rows.last().map(|r| r.0).unwrap_or(0.0)
    }

    /// Piecewise bins for the event synthesizer. The total loss is mapped to
    /// the remote arm through the model's loss rule.
    pub fn to_sim_bins(&self, link: &LinkModel) -> Vec<ProfileBin> {
        self.rows
            .iter()
            .map(|&(t, total, bg)| ProfileBin {
                t_start: t,
                loss_db: link.with_total_loss(total).arm_b.channel.loss_db,
                background_per_detector: Some(bg),
            })
            .collect()
    }

    /// Symmetric up-down ramp between two loss levels.
    pub fn triangular(
        lo_db: f64,
        hi_db: f64,
        duration: f64,
        bin: f64,
        background: f64,
    ) -> Self {
        let n = ((duration / bin).round() as usize).max(2);
        let rows = (0..n)
            .map(|i| {
                let t = i as f64 * bin;
                let phase = t / duration; // 0..1
                let frac = if phase < 0.5 {
                    phase * 2.0
                } else {
                    2.0 - phase * 2.0
                };
                (t, lo_db + (hi_db - lo_db) * frac, background)
            })
            .collect();
        PassProfile {
            label: format!("triangular {lo_db}-{hi_db} dB"),
            rows,
        }
    }

    /// Airmass-style profile for a pass peaking at `el_max_deg`: the loss
    /// interpolates between `hi_db` at the horizon-side extremes and `lo_db`
    /// at culmination with a `1/sin(elevation)` weight.
    pub fn elevation_sine(
        lo_db: f64,
        hi_db: f64,
        el_min_deg: f64,
        el_max_deg: f64,
        duration: f64,
        bin: f64,
        background: f64,
    ) -> Self {
        let n = ((duration / bin).round() as usize).max(2);
        let airmass = |el_deg: f64| 1.0 / el_deg.to_radians().sin();
        let am_lo = airmass(el_max_deg);
        let am_hi = airmass(el_min_deg);
        let rows = (0..n)
            .map(|i| {
                let t = i as f64 * bin;
                let el = el_min_deg
                    + (el_max_deg - el_min_deg) * (std::f64::consts::PI * t / duration).sin();
                let frac = (airmass(el) - am_lo) / (am_hi - am_lo);
                (t, lo_db + (hi_db - lo_db) * frac.clamp(0.0, 1.0), background)
            })
            .collect();
        PassProfile {
            label: format!("elevation {el_min_deg}-{el_max_deg} deg"),
            rows,
        }
    }

    /// Reads a profile CSV with header `t_s,loss_db,background_cps`.
    pub fn read_csv<R: Read>(r: R, label: impl Into<String>) -> Result<Self, PassError> {
        let mut lines = BufReader::new(r).lines().enumerate();
        match lines.next() {
            Some((_, Ok(h))) if h.trim() == "t_s,loss_db,background_cps" => {}
            Some((_, Ok(h))) => {
                return Err(PassError::Format {
                    line: 1,
                    reason: format!("expected header `t_s,loss_db,background_cps`, got `{h}`"),
                })
            }
            _ => return Err(PassError::Empty),
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let mut field = |name: &str| -> Result<f64, PassError> {
                parts
                    .next()
                    .ok_or_else(|| PassError::Format {
                        line: i + 1,
                        reason: format!("missing {name}"),
                    })?
                    .trim()
                    .parse()
                    .map_err(|e| PassError::Format {
                        line: i + 1,
                        reason: format!("bad {name}: {e}"),
                    })
            };
            let t = field("t_s")?;
            let loss = field("loss_db")?;
            let bg = field("background_cps")?;
            rows.push((t, loss, bg));
        }
        let profile = PassProfile {
            label: label.into(),
            rows,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), PassError> {
        writeln!(w, "t_s,loss_db,background_cps")?;
        for &(t, loss, bg) in &self.rows {
            writeln!(w, "{t},{loss},{bg}")?;
        }
        Ok(())
    }
}

/// Sky-background series `(t_s, counts_per_s)`.
pub fn load_noise_profile<R: Read>(r: R) -> Result<Vec<(f64, f64)>, PassError> {
    let mut lines = BufReader::new(r).lines().enumerate();
    match lines.next() {
        Some((_, Ok(h))) if h.trim() == "t_s,counts_per_s" => {}
        Some((_, Ok(h))) => {
            return Err(PassError::Format {
                line: 1,
                reason: format!("expected header `t_s,counts_per_s`, got `{h}`"),
            })
        }
        _ => return Err(PassError::Empty),
    }
    let mut rows: Vec<(f64, f64)> = Vec::new();
    for (i, line) in lines {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (t, c) = line.split_once(',').ok_or_else(|| PassError::Format {
            line: i + 1,
            reason: "expected `t_s,counts_per_s`".into(),
        })?;
        let t: f64 = t.trim().parse().map_err(|e| PassError::Format {
            line: i + 1,
            reason: format!("bad t_s: {e}"),
        })?;
        let c: f64 = c.trim().parse().map_err(|e| PassError::Format {
            line: i + 1,
            reason: format!("bad counts_per_s: {e}"),
        })?;
        if c < 0.0 {
            return Err(PassError::Format {
                line: i + 1,
                reason: format!("negative count rate {c}"),
            });
        }
        if let Some(&(prev, _)) = rows.last() {
            if t <= prev {
                return Err(PassError::NonMonotonic { line: i + 1 });
            }
        }
        rows.push((t, c));
    }
    if rows.is_empty() {
        return Err(PassError::Empty);
    }
    Ok(rows)
}

/// One source in orbit feeding two receiving arms.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DualLinkModel {
    pub link: LinkModel,
}

impl DualLinkModel {
    /// Symmetric dual downlink with SPAD-class ground stations, matching the
    /// published operating point of the Micius entangled-pair downlinks:
    /// 2.5 ns window, 3% afterpulsing, 1 kcps total uncorrelated noise split
    /// over the stations, 1.5% misalignment, 770 ps per-module jitter.
    pub fn micius() -> Self {
        let protocol = ProtocolParams {
            coincidence_window: 2.5e-9,
            ..ProtocolParams::default()
        };
        let arm = Arm {
            channel: ChannelParams {
                loss_db: 35.0,
                background_rate_per_detector: 0.0,
            },
            detector: DetectorParams {
                dark_rate: 500.0,
                dead_time: 0.0,
                afterpulse_prob: 0.03,
                jitter_sigma: 770e-12,
                noise_yield: None,
            },
        };
        DualLinkModel {
            link: LinkModel {
                source: SourceParams {
                    pair_rate: 0.0492 / protocol.coincidence_window,
                    heralding_eff_a: 1.0,
                    heralding_eff_b: 1.0,
                    misalignment_error: 0.015,
                    visibility: None,
                },
                arm_a: arm,
                arm_b: arm,
                protocol,
                basis_split: (0.4, 0.6),
                total_loss_rule: TotalLossRule::Symmetric,
            },
        }
    }

    /// Dual downlink with superconducting-nanowire receivers: 66.6 ps window,
    /// 25 ns dead time, fixed 3.3e-9 noise yield per window, 20 ps detector
    /// jitter combined with matching tagger jitter per module.
    pub fn snspd() -> Self {
        let mut model = Self::micius();
        model.link.protocol.coincidence_window = 66.6e-12;
        model.link.source.pair_rate = 0.0492 / 66.6e-12;
        let det = DetectorParams {
            dark_rate: 0.0,
            dead_time: 25e-9,
            afterpulse_prob: 0.0,
            jitter_sigma: 28.284271247e-12,
            noise_yield: Some(3.3e-9),
        };
        model.link.arm_a.detector = det;
        model.link.arm_b.detector = det;
        model.link = model.link.with_total_loss(70.0);
        model
    }

    pub fn with_total_loss(mut self, total_db: f64) -> Self {
        self.link = self.link.with_total_loss(total_db);
        self
    }

    pub fn with_mu(mut self, mu: f64) -> Self {
        self.link = self.link.with_mu(mu);
        self
    }
}

/// Rate prediction for a dual-downlink configuration; true coincidences form
/// between the two ground arms with the shared composition of
/// [`crate::link::predict`].
pub fn dual_predict(model: &DualLinkModel) -> RatePrediction {
    predict(&model.link)
}

/// Pair-rate policy over a pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MuPolicy {
    /// Hold the source at a fixed pair rate per window.
    Fixed(f64),
    /// Re-optimize the pair rate for every profile bin.
    TrackOptimum,
}

/// Per-bin outcome of a pass evaluation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PassBin {
    pub t_s: f64,
    pub loss_db: f64,
    pub mu_used: f64,
    pub skr_bps: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PassResult {
    pub bins: Vec<PassBin>,
    /// Key bits integrated over the pass.
    pub total_bits: f64,
}

/// Evaluates the analytic model per profile bin under a pair-rate policy and
/// integrates the key yield.
pub fn pass_skr(
    profile: &PassProfile,
    link: &LinkModel,
    policy: MuPolicy,
) -> Result<PassResult, PassError> {
    profile.validate()?;
    link.validate()?;
    let mut bins = Vec::with_capacity(profile.rows.len());
    let mut total_bits = 0.0;
    for (i, &(t, loss, bg)) in profile.rows.iter().enumerate() {
        let width = profile
            .rows
            .get(i + 1)
            .map(|r| r.0 - t)
            .unwrap_or_else(|| {
                profile
                    .rows
                    .get(i.wrapping_sub(1))
                    .map(|r| t - r.0)
                    .unwrap_or(1.0)
            });
        // sky background lands on the receiving arms: the remote arm always,
        // the other one too when both are ground stations; a profile
        // background supersedes any fixed noise-yield override
        let mut at_bin = link.with_total_loss(loss);
        if bg > 0.0 {
            at_bin.arm_b.channel.background_rate_per_detector = bg;
            at_bin.arm_b.detector.noise_yield = None;
            if matches!(link.total_loss_rule, TotalLossRule::Symmetric) {
                at_bin.arm_a.channel.background_rate_per_detector = bg;
                at_bin.arm_a.detector.noise_yield = None;
            }
        }
        let (mu_used, skr) = match policy {
            MuPolicy::Fixed(mu) => (mu, predict(&at_bin.with_mu(mu)).skr),
            MuPolicy::TrackOptimum => match optimize_pair_rate(&at_bin, DEFAULT_MU_BOUNDS) {
                Ok(opt) => (opt.mu_opt, opt.skr_max),
                Err(OptimError::NoKey { .. }) => (f64::NAN, 0.0),
                Err(OptimError::Link(e)) => return Err(e.into()),
                Err(_) => (f64::NAN, 0.0),
            },
        };
        total_bits += skr * width;
        bins.push(PassBin {
            t_s: t,
            loss_db: loss,
            mu_used,
            skr_bps: skr,
        });
    }
    Ok(PassResult { bins, total_bits })
}

/// CSV export of per-bin pass results.
pub fn write_pass_csv<W: Write>(mut w: W, result: &PassResult) -> Result<(), PassError> {
    writeln!(w, "t_s,loss_db,mu_used,skr_bps")?;
    for b in &result.bins {
        writeln!(w, "{},{},{},{}", b.t_s, b.loss_db, b.mu_used, b.skr_bps)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micius_point_is_positive_and_symmetric() {
        let model = DualLinkModel::micius().with_total_loss(70.0);
        let p = dual_predict(&model);
        assert!(p.skr > 0.0, "skr {}", p.skr);
        assert!(p.qber_z < 0.5);

        // swapping symmetric arms changes nothing
        let mut swapped = model;
        std::mem::swap(&mut swapped.link.arm_a, &mut swapped.link.arm_b);
        let q = dual_predict(&swapped);
        assert_eq!(p.skr.to_bits(), q.skr.to_bits());
        assert_eq!(p.qber_z.to_bits(), q.qber_z.to_bits());
        assert_eq!(p.singles_a.to_bits(), q.singles_b.to_bits());
    }

    #[test]
    fn opaque_arm_yields_nothing() {
        let mut model = DualLinkModel::micius();
        model.link.arm_b.channel.loss_db = 400.0;
        assert!(dual_predict(&model).skr < 1e-12);
    }

    #[test]
    fn noise_profile_parsing() {
        assert!(matches!(
            load_noise_profile(&b""[..]),
            Err(PassError::Empty)
        ));
        assert!(matches!(
            load_noise_profile(&b"t_s,counts_per_s\n"[..]),
            Err(PassError::Empty)
        ));
        let rows = load_noise_profile(&b"t_s,counts_per_s\n0,450\n1,450\n2,450\n"[..]).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|&(_, c)| c == 450.0));
        assert!(matches!(
            load_noise_profile(&b"t_s,counts_per_s\n0,450\n0,440\n"[..]),
            Err(PassError::NonMonotonic { .. })
        ));
        assert!(matches!(
            load_noise_profile(&b"t_s,counts_per_s\n0,-1\n"[..]),
            Err(PassError::Format { .. })
        ));
        // a U-shaped pass keeps its edge elevation without smoothing
        let u = load_noise_profile(&b"t_s,counts_per_s\n0,900\n1,300\n2,280\n3,920\n"[..]).unwrap();
        assert!(u[0].1 > 2.0 * u[1].1 && u[3].1 > 2.0 * u[2].1);
    }

    #[test]
    fn profile_csv_round_trip() {
        let p = PassProfile::triangular(60.0, 80.0, 100.0, 10.0, 450.0);
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let back = PassProfile::read_csv(&buf[..], "x").unwrap();
        assert_eq!(back.rows.len(), p.rows.len());
        assert!(back.validate().is_ok());
        let peak = back.rows.iter().map(|r| r.1).fold(f64::MIN, f64::max);
        assert!((peak - 80.0).abs() < 2.5);
    }

    #[test]
    fn flat_profile_policies_agree() {
        let model = DualLinkModel::micius();
        let opt = optimize_pair_rate(&model.link.with_total_loss(70.0), DEFAULT_MU_BOUNDS).unwrap();
        let profile = PassProfile {
            label: "flat".into(),
            rows: (0..10).map(|i| (i as f64, 70.0, 0.0)).collect(),
        };
        let fixed = pass_skr(&profile, &model.link, MuPolicy::Fixed(opt.mu_opt)).unwrap();
        let tracked = pass_skr(&profile, &model.link, MuPolicy::TrackOptimum).unwrap();
        let rel = (fixed.total_bits - tracked.total_bits).abs() / tracked.total_bits;
        assert!(rel < 1e-6, "rel {rel}");
    }

    #[test]
    fn tracking_beats_any_fixed_rate_per_bin() {
        let model = DualLinkModel::micius();
        let profile = PassProfile::triangular(60.0, 80.0, 60.0, 5.0, 0.0);
        let tracked = pass_skr(&profile, &model.link, MuPolicy::TrackOptimum).unwrap();
        for mu in [0.01, 0.0492, 0.065, 0.1] {
            let fixed = pass_skr(&profile, &model.link, MuPolicy::Fixed(mu)).unwrap();
            assert!(tracked.total_bits >= fixed.total_bits * (1.0 - 1e-9));
            for (tb, fb) in tracked.bins.iter().zip(&fixed.bins) {
                assert!(tb.skr_bps >= fb.skr_bps * (1.0 - 1e-9));
            }
        }
    }

    #[test]
    fn single_downlink_pass_prefers_tracking_over_extreme_optima() {
        let link = crate::link::LinkModel::terrestrial_reference();
        let profile = PassProfile::triangular(34.0, 50.0, 120.0, 5.0, 450.0);
        let lo_opt = optimize_pair_rate(&link.with_total_loss(34.0), DEFAULT_MU_BOUNDS).unwrap();
        let hi_opt = optimize_pair_rate(&link.with_total_loss(50.0), DEFAULT_MU_BOUNDS).unwrap();
        let tracked = pass_skr(&profile, &link, MuPolicy::TrackOptimum).unwrap();
        for opt in [lo_opt, hi_opt] {
            let fixed = pass_skr(&profile, &link, MuPolicy::Fixed(opt.mu_opt)).unwrap();
            assert!(
                tracked.total_bits > fixed.total_bits * 1.0001,
                "tracking should beat the {:.4} optimum: {} vs {}",
                opt.mu_opt,
                tracked.total_bits,
                fixed.total_bits
            );
        }
    }

    #[test]
    fn totals_are_additive_over_concatenation() {
        let model = DualLinkModel::micius();
        let full = PassProfile {
            label: "full".into(),
            rows: (0..20).map(|i| (i as f64, 60.0 + i as f64, 100.0)).collect(),
        };
        let first = PassProfile {
            label: "a".into(),
            rows: full.rows[..10].to_vec(),
        };
        let second = PassProfile {
            label: "b".into(),
            rows: full.rows[10..].to_vec(),
        };
        let t_full = pass_skr(&full, &model.link, MuPolicy::Fixed(0.05)).unwrap();
        let t_a = pass_skr(&first, &model.link, MuPolicy::Fixed(0.05)).unwrap();
        let t_b = pass_skr(&second, &model.link, MuPolicy::Fixed(0.05)).unwrap();
        let sum = t_a.total_bits + t_b.total_bits;
        assert!((t_full.total_bits - sum).abs() / sum < 1e-9);
    }

    #[test]
    fn pass_csv_header() {
        let model = DualLinkModel::micius();
        let profile = PassProfile {
            label: "flat".into(),
            rows: vec![(0.0, 70.0, 0.0), (1.0, 70.0, 0.0)],
        };
        let result = pass_skr(&profile, &model.link, MuPolicy::Fixed(0.05)).unwrap();
        let mut buf = Vec::new();
        write_pass_csv(&mut buf, &result).unwrap();
        assert!(String::from_utf8(buf)
            .unwrap()
            .starts_with("t_s,loss_db,mu_used,skr_bps\n"));
    }
}
