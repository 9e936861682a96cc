//! End-to-end key extraction over synthesized streams.

use qkdsim::key::{full_pipeline, PipelineOptions, QberEstimation};
use qkdsim::link::LinkModel;
use qkdsim::sim::synthesize;
use qkdsim::tags::ClockTruth;

fn light_link() -> LinkModel {
    let mut link = LinkModel::terrestrial_reference();
    link.source.pair_rate = 1e6;
    link.source.heralding_eff_a = 0.1;
    link.arm_b.channel.loss_db = 10.0;
    link.arm_a.detector.noise_yield = Some(0.0);
    link.arm_b.detector.noise_yield = Some(0.0);
    link
}

#[test]
fn reference_run_reproduces_the_measured_operating_point() {
    // 15 s at the reference condition: mu = 0.0402, 38.72 dB remote arm
    let link = LinkModel::terrestrial_reference();
    let clocks = ClockTruth {
        offset_s: 478.12e-6,
        drift: 0.0,
    };
    let (a, b, _) = synthesize(&link, clocks, 15.0, 1515).unwrap();
    let report = full_pipeline(&a, &b, &PipelineOptions::default()).unwrap();

    let rel_z = (report.stats.n_sift_z - 6062.0) / 6062.0;
    let rel_x = (report.stats.n_sift_x - 8973.0) / 8973.0;
    println!(
        "sifted z {} ({rel_z:+.1}%), x {} ({rel_x:+.1}%), qber ({:.4}, {:.4}), skr {:.1} bps",
        report.stats.n_sift_z,
        report.stats.n_sift_x,
        report.stats.qber_z,
        report.stats.qber_x,
        report.skr_bps
    );
    assert!(rel_z.abs() < 0.15, "sifted z off by {rel_z:+.2}");
    assert!(rel_x.abs() < 0.15, "sifted x off by {rel_x:+.2}");

    let rel_skr = (report.skr_bps - 300.865) / 300.865;
    assert!(rel_skr.abs() <= 0.25, "skr {} off by {rel_skr:+.2}", report.skr_bps);

    let offset_err = report.offset_ps - 478.12e6;
    assert!(offset_err.abs() < 1000.0, "offset error {offset_err} ps");
    assert!(!report.aborted);
    assert!(report.final_length > 0);
    assert!(report.leakage_bits > 0);
}

#[test]
fn clean_link_keeps_every_sifted_bit() {
    let mut link = light_link();
    link.source.heralding_eff_a = 1.0;
    link.arm_b.channel.loss_db = 0.0;
    link.source.misalignment_error = 0.0;
    // zero jitter and a rate sparse on the picosecond grid: matching is exact
    link.arm_a.detector.jitter_sigma = 0.0;
    link.arm_b.detector.jitter_sigma = 0.0;
    link.source.pair_rate = 1e5;
    let (a, b, _) = synthesize(&link, ClockTruth::default(), 0.3, 99).unwrap();
    let options = PipelineOptions {
        include_key: true,
        ..PipelineOptions::default()
    };
    let report = full_pipeline(&a, &b, &options).unwrap();
    assert_eq!(report.stats.qber_z, 0.0);
    assert_eq!(report.stats.qber_x, 0.0);
    assert_eq!(report.leakage_bits, 0);
    let sifted = report.stats.n_sift_z + report.stats.n_sift_x;
    assert_eq!(report.final_length, sifted as u64);
    let hex = report.final_key_hex.expect("key requested");
    assert_eq!(hex.len(), (report.final_length as usize).div_ceil(8) * 2);
}

#[test]
fn pipeline_is_deterministic_per_seed() {
    let link = light_link();
    let clocks = ClockTruth {
        offset_s: 1.2e-4,
        drift: 1e-6,
    };
    let (a, b, _) = synthesize(&link, clocks, 2.0, 777).unwrap();
    let options = PipelineOptions {
        include_key: true,
        qber_mode: QberEstimation::DisclosedSample {
            fraction: 0.1,
            seed: 5,
        },
        ..PipelineOptions::default()
    };
    let r1 = full_pipeline(&a, &b, &options).unwrap();
    let r2 = full_pipeline(&a, &b, &options).unwrap();
    assert_eq!(
        serde_json::to_string(&r1).unwrap(),
        serde_json::to_string(&r2).unwrap()
    );
}

#[test]
fn drift_is_compensated_end_to_end() {
    let link = light_link();
    let clocks = ClockTruth {
        offset_s: 478.12e-6,
        drift: 1e-6,
    };
    let (a, b, _) = synthesize(&link, clocks, 6.0, 333).unwrap();
    let report = full_pipeline(&a, &b, &PipelineOptions::default()).unwrap();
    let drift_rel = (report.drift - 1e-6).abs() / 1e-6;
    println!(
        "drift {:.3e} (rel {:.2}%), qber {:.4}, coincidences {}",
        report.drift,
        drift_rel * 100.0,
        report.stats.qber_z,
        report.coincidences
    );
    assert!(drift_rel < 0.05, "drift {} off by {drift_rel:.3}", report.drift);
    // with drift compensated, the QBER sits near the misalignment error
    assert!((report.stats.qber_z - 0.033).abs() < 0.01);
    assert!(report.skr_bps > 0.0);
}

#[test]
fn disclosed_sample_reduces_the_accounted_key() {
    let link = light_link();
    let (a, b, _) = synthesize(&link, ClockTruth::default(), 1.0, 2024).unwrap();
    let full = full_pipeline(&a, &b, &PipelineOptions::default()).unwrap();
    let sampled = full_pipeline(
        &a,
        &b,
        &PipelineOptions {
            qber_mode: QberEstimation::DisclosedSample {
                fraction: 0.1,
                seed: 1,
            },
            ..PipelineOptions::default()
        },
    )
    .unwrap();
    assert!(sampled.disclosed_bits > 0);
    let full_n = full.stats.n_sift_z + full.stats.n_sift_x;
    let sampled_n = sampled.stats.n_sift_z + sampled.stats.n_sift_x;
    assert!(
        (full_n - sampled_n - sampled.disclosed_bits as f64).abs() < 0.5,
        "disclosed bits must leave the accounted key"
    );
    assert!(sampled.final_length < full.final_length);
}

#[test]
fn sync_failure_carries_its_stage() {
    // two sparse unrelated streams: no correlation peak anywhere
    let mut link = light_link();
    link.source.pair_rate = 0.0;
    for arm in [&mut link.arm_a, &mut link.arm_b] {
        arm.detector.noise_yield = None;
        arm.detector.dark_rate = 20_000.0;
    }
    let (a, _, _) = synthesize(&link, ClockTruth::default(), 0.5, 1).unwrap();
    let (_, b, _) = synthesize(&link, ClockTruth::default(), 0.5, 2).unwrap();
    let err = full_pipeline(&a, &b, &PipelineOptions::default()).unwrap_err();
    assert_eq!(err.stage, "coarse-offset");
}
