//! Scenario configuration: a strict JSON schema mapped onto the library's
//! link model. Unknown keys are rejected and every physical invariant is
//! checked with a JSON-path diagnostic before anything runs.

use serde::{Deserialize, Serialize};

use qkdsim::link::{Arm, LinkModel, TotalLossRule, LOCAL_ARM_LOSS_DB};
use qkdsim::model::{ChannelParams, DetectorParams, PhaseErrorMode, ProtocolParams, SourceParams};
use qkdsim::tags::ClockTruth;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    #[default]
    Single,
    Dual,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceCfg {
    pub pair_rate: f64,
    pub heralding_eff_a: f64,
    pub heralding_eff_b: f64,
    pub misalignment_error: f64,
    pub visibility: Option<f64>,
}

impl Default for SourceCfg {
    fn default() -> Self {
        let s = LinkModel::terrestrial_reference().source;
        Self {
            pair_rate: s.pair_rate,
            heralding_eff_a: s.heralding_eff_a,
            heralding_eff_b: s.heralding_eff_b,
            misalignment_error: s.misalignment_error,
            visibility: s.visibility,
        }
    }
}

/// One arm of the link. A partial object starts from an ideal lossless,
/// noiseless detector; omit the whole key to inherit the reference arm.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArmCfg {
    pub loss_db: f64,
    pub background_rate_per_detector: f64,
    pub dark_rate: f64,
    pub dead_time: f64,
    pub afterpulse_prob: f64,
    pub jitter_sigma: f64,
    pub noise_yield: Option<f64>,
}

impl ArmCfg {
    fn from_arm(arm: Arm) -> Self {
        Self {
            loss_db: arm.channel.loss_db,
            background_rate_per_detector: arm.channel.background_rate_per_detector,
            dark_rate: arm.detector.dark_rate,
            dead_time: arm.detector.dead_time,
            afterpulse_prob: arm.detector.afterpulse_prob,
            jitter_sigma: arm.detector.jitter_sigma,
            noise_yield: arm.detector.noise_yield,
        }
    }

    fn to_arm(&self) -> Arm {
        Arm {
            channel: ChannelParams {
                loss_db: self.loss_db,
                background_rate_per_detector: self.background_rate_per_detector,
            },
            detector: DetectorParams {
                dark_rate: self.dark_rate,
                dead_time: self.dead_time,
                afterpulse_prob: self.afterpulse_prob,
                jitter_sigma: self.jitter_sigma,
                noise_yield: self.noise_yield,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolCfg {
    pub coincidence_window: f64,
    pub ec_efficiency: f64,
    pub phase_error_failure_prob: f64,
    pub phase_error_mode: PhaseErrorMode,
}

impl Default for ProtocolCfg {
    fn default() -> Self {
        let p = ProtocolParams::default();
        Self {
            coincidence_window: p.coincidence_window,
            ec_efficiency: p.ec_efficiency,
            phase_error_failure_prob: p.phase_error_failure_prob,
            phase_error_mode: p.phase_error_mode,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ClocksCfg {
    pub offset_s: f64,
    pub drift: f64,
}

/// Top-level scenario document. Defaults reproduce the terrestrial reference
/// link, so a minimal `{}` document is valid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub source: SourceCfg,
    pub arm_a: ArmCfg,
    pub arm_b: ArmCfg,
    pub protocol: ProtocolCfg,
    pub basis_split: [f64; 2],
    pub clocks: ClocksCfg,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let link = LinkModel::terrestrial_reference();
        Self {
            scenario: Scenario::Single,
            source: SourceCfg::default(),
            arm_a: ArmCfg::from_arm(link.arm_a),
            arm_b: ArmCfg::from_arm(link.arm_b),
            protocol: ProtocolCfg::default(),
            basis_split: [link.basis_split.0, link.basis_split.1],
            clocks: ClocksCfg::default(),
            seed: 1,
        }
    }
}

impl ScenarioConfig {
    pub fn from_preset(name: &str) -> Option<Self> {
        let link = match name {
            "terrestrial" => LinkModel::terrestrial_reference(),
            "micius" => qkdsim::satpass::DualLinkModel::micius().link,
            "snspd" => qkdsim::satpass::DualLinkModel::snspd().link,
            _ => return None,
        };
        let scenario = match link.total_loss_rule {
            TotalLossRule::FixedArmA(_) => Scenario::Single,
            TotalLossRule::Symmetric => Scenario::Dual,
        };
        Some(Self {
            scenario,
            source: SourceCfg {
                pair_rate: link.source.pair_rate,
                heralding_eff_a: link.source.heralding_eff_a,
                heralding_eff_b: link.source.heralding_eff_b,
                misalignment_error: link.source.misalignment_error,
                visibility: link.source.visibility,
            },
            arm_a: ArmCfg::from_arm(link.arm_a),
            arm_b: ArmCfg::from_arm(link.arm_b),
            protocol: ProtocolCfg {
                coincidence_window: link.protocol.coincidence_window,
                ec_efficiency: link.protocol.ec_efficiency,
                phase_error_failure_prob: link.protocol.phase_error_failure_prob,
                phase_error_mode: link.protocol.phase_error_mode,
            },
            basis_split: [link.basis_split.0, link.basis_split.1],
            clocks: ClocksCfg::default(),
            seed: 1,
        })
    }

    /// Every violated invariant, labeled with its JSON path.
    pub fn diagnostics(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |path: &str, ok: bool, rule: &str| {
            if !ok {
                out.push(format!("{path}: {rule}"));
            }
        };

        let s = &self.source;
        check("source.pair_rate", s.pair_rate >= 0.0, "must be >= 0 pairs/s");
        check(
            "source.heralding_eff_a",
            s.heralding_eff_a > 0.0 && s.heralding_eff_a <= 1.0,
            "must lie in (0, 1]",
        );
        check(
            "source.heralding_eff_b",
            s.heralding_eff_b > 0.0 && s.heralding_eff_b <= 1.0,
            "must lie in (0, 1]",
        );
        check(
            "source.misalignment_error",
            (0.0..=0.5).contains(&s.misalignment_error),
            "must lie in [0, 0.5]",
        );
        if let Some(v) = s.visibility {
            check("source.visibility", (0.0..=1.0).contains(&v), "must lie in [0, 1]");
        }

        for (path, arm) in [("arm_a", &self.arm_a), ("arm_b", &self.arm_b)] {
            check(
                &format!("{path}.loss_db"),
                arm.loss_db >= 0.0,
                "must be >= 0 dB",
            );
            check(
                &format!("{path}.background_rate_per_detector"),
                arm.background_rate_per_detector >= 0.0,
                "must be >= 0 cps",
            );
            check(
                &format!("{path}.dark_rate"),
                arm.dark_rate >= 0.0,
                "must be >= 0 cps",
            );
            check(
                &format!("{path}.dead_time"),
                arm.dead_time >= 0.0,
                "must be >= 0 s",
            );
            check(
                &format!("{path}.afterpulse_prob"),
                (0.0..1.0).contains(&arm.afterpulse_prob),
                "must lie in [0, 1)",
            );
            check(
                &format!("{path}.jitter_sigma"),
                arm.jitter_sigma >= 0.0,
                "must be >= 0 s",
            );
            if let Some(y) = arm.noise_yield {
                check(
                    &format!("{path}.noise_yield"),
                    y >= 0.0,
                    "must be >= 0 per window",
                );
            }
        }

        let p = &self.protocol;
        check(
            "protocol.coincidence_window",
            p.coincidence_window > 0.0,
            "must be > 0 s (the coincidence window cannot vanish)",
        );
        check(
            "protocol.ec_efficiency",
            p.ec_efficiency >= 1.0,
            "must be >= 1",
        );
        check(
            "protocol.phase_error_failure_prob",
            p.phase_error_failure_prob > 0.0 && p.phase_error_failure_prob < 1.0,
            "must lie in (0, 1)",
        );

        let [pz, px] = self.basis_split;
        check(
            "basis_split",
            pz > 0.0 && px > 0.0 && (pz + px - 1.0).abs() < 1e-9,
            "must be two positive fractions summing to 1",
        );

        check(
            "clocks.drift",
            self.clocks.drift > -1.0,
            "must exceed -1",
        );
        out
    }

    pub fn to_link_model(&self) -> LinkModel {
        LinkModel {
            source: SourceParams {
                pair_rate: self.source.pair_rate,
                heralding_eff_a: self.source.heralding_eff_a,
                heralding_eff_b: self.source.heralding_eff_b,
                misalignment_error: self.source.misalignment_error,
                visibility: self.source.visibility,
            },
            arm_a: self.arm_a.to_arm(),
            arm_b: self.arm_b.to_arm(),
            protocol: ProtocolParams {
                coincidence_window: self.protocol.coincidence_window,
                ec_efficiency: self.protocol.ec_efficiency,
                phase_error_failure_prob: self.protocol.phase_error_failure_prob,
                phase_error_mode: self.protocol.phase_error_mode,
            },
            basis_split: (self.basis_split[0], self.basis_split[1]),
            total_loss_rule: match self.scenario {
                Scenario::Single => TotalLossRule::FixedArmA(LOCAL_ARM_LOSS_DB),
                Scenario::Dual => TotalLossRule::Symmetric,
            },
        }
    }

    pub fn clock_truth(&self) -> ClockTruth {
        ClockTruth {
            offset_s: self.clocks.offset_s,
            drift: self.clocks.drift,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_document_is_valid() {
        let cfg: ScenarioConfig = serde_json::from_str("{}").unwrap();
        assert!(cfg.diagnostics().is_empty());
        assert!(cfg.to_link_model().validate().is_ok());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<ScenarioConfig>(r#"{"sorce": {}}"#).unwrap_err();
        assert!(err.to_string().contains("unknown field"));
        let err =
            serde_json::from_str::<ScenarioConfig>(r#"{"arm_a": {"loss": 1.0}}"#).unwrap_err();
        assert!(err.to_string().contains("unknown field"));
    }

    #[test]
    fn diagnostics_carry_json_paths() {
        let mut cfg = ScenarioConfig::default();
        cfg.arm_b.loss_db = -3.0;
        cfg.protocol.coincidence_window = 0.0;
        let diags = cfg.diagnostics();
        assert!(diags.iter().any(|d| d.starts_with("arm_b.loss_db:")));
        assert!(diags
            .iter()
            .any(|d| d.starts_with("protocol.coincidence_window:")));
    }

    #[test]
    fn presets_round_trip() {
        for name in ["terrestrial", "micius", "snspd"] {
            let cfg = ScenarioConfig::from_preset(name).unwrap();
            assert!(cfg.diagnostics().is_empty(), "{name} preset invalid");
            let text = serde_json::to_string_pretty(&cfg).unwrap();
            let back: ScenarioConfig = serde_json::from_str(&text).unwrap();
            assert!(back.diagnostics().is_empty());
        }
        assert!(ScenarioConfig::from_preset("nope").is_none());
    }
}
