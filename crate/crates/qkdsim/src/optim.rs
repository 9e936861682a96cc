//! Pair-rate optimization.
//!
//! SKR as a function of the pair rate is unimodal on a log axis: it climbs
//! linearly while correlated pairs dominate and collapses once accidentals
//! drive the QBER into the bound's cliff. A coarse log-grid scan brackets the
//! peak, golden-section search refines it, and bisection locates the 90%
//! tolerance band on each side.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::link::{predict, LinkError, LinkModel};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error("bounds must satisfy 0 < lo < hi, got ({0}, {1})")]
    BadBounds(f64, f64),
    #[error("no positive key rate anywhere in [{lo}, {hi}]; the loss is beyond reach")]
    NoKey { lo: f64, hi: f64 },
    #[error("loss grid must be nonempty and strictly increasing")]
    BadGrid,
    #[error("csv: {0}")]
    Io(#[from] std::io::Error),
}

/// Default search bounds for the pair rate per window. Above one pair per
/// window the accidental model stops being meaningful.
pub const DEFAULT_MU_BOUNDS: (f64, f64) = (1e-5, 1.0);

/// Relative convergence tolerance of the golden-section stage.
pub const MU_RELATIVE_TOL: f64 = 1e-4;

const BRACKET_POINTS: usize = 64;
const GOLDEN: f64 = 0.618_033_988_749_894_8;

/// Optimal operating point of one link condition.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Optimum {
    /// Pair rate per window maximizing the SKR.
    pub mu_opt: f64,
    /// Generated pairs per second at the optimum.
    pub pair_rate_opt: f64,
    pub skr_max: f64,
    /// Lowest pair rate still reaching 90% of `skr_max` (clamped to the
    /// search bounds when the plateau extends past them).
    pub band_lo: f64,
    pub band_hi: f64,
}

fn skr_at(link: &LinkModel, mu: f64) -> f64 {
    predict(&link.with_mu(mu)).skr
}

/// Finds the pair rate maximizing the SKR within `mu_bounds`.
pub fn optimize_pair_rate(
    link: &LinkModel,
    mu_bounds: (f64, f64),
) -> Result<Optimum, OptimError> {
    link.validate()?;
    let (lo, hi) = mu_bounds;
    if !(lo > 0.0 && lo < hi) {
        return Err(OptimError::BadBounds(lo, hi));
    }

    // bracketing scan on a log grid
    let (ln_lo, ln_hi) = (lo.ln(), hi.ln());
    let step = (ln_hi - ln_lo) / (BRACKET_POINTS - 1) as f64;
    let grid: Vec<(f64, f64)> = (0..BRACKET_POINTS)
        .map(|i| {
            let mu = (ln_lo + step * i as f64).exp();
            (mu, skr_at(link, mu))
        })
        .collect();
    let (best_idx, &(_, best_skr)) = grid
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .expect("nonempty grid");
    if best_skr <= 0.0 {
        return Err(OptimError::NoKey { lo, hi });
    }

    // golden-section on ln(mu) inside the bracketing interval
    let mut a = ln_lo + step * best_idx.saturating_sub(1) as f64;
    let mut b = (ln_lo + step * (best_idx + 1) as f64).min(ln_hi);
    let tol = MU_RELATIVE_TOL;
    let mut x1 = b - GOLDEN * (b - a);
    let mut x2 = a + GOLDEN * (b - a);
    let mut f1 = skr_at(link, x1.exp());
    let mut f2 = skr_at(link, x2.exp());
    while b - a > tol {
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + GOLDEN * (b - a);
            f2 = skr_at(link, x2.exp());
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - GOLDEN * (b - a);
            f1 = skr_at(link, x1.exp());
        }
    }
    let mut mu_opt = ((a + b) / 2.0).exp();
    let mut skr_max = skr_at(link, mu_opt);
    // plateau tie-break: prefer the smallest pair rate achieving the maximum
    for &(mu, skr) in &grid {
        if mu < mu_opt && skr >= skr_max * (1.0 - 1e-9) {
            mu_opt = mu;
            skr_max = skr;
            break;
        }
    }

    let threshold = 0.9 * skr_max;
    let band_lo = bisect_threshold(link, lo, mu_opt, threshold, skr_max, true);
    let band_hi = bisect_threshold(link, mu_opt, hi, threshold, skr_max, false);

    Ok(Optimum {
        mu_opt,
        pair_rate_opt: mu_opt / link.protocol.coincidence_window,
        skr_max,
        band_lo,
        band_hi,
    })
}

/// Bisects for SKR(mu) = threshold on one flank of the peak. `rising` marks
/// the flank where SKR increases with mu.
fn bisect_threshold(
    link: &LinkModel,
    lo: f64,
    hi: f64,
    threshold: f64,
    skr_max: f64,
    rising: bool,
) -> f64 {
    let (outer, inner) = if rising { (lo, hi) } else { (hi, lo) };
    if skr_at(link, outer) >= threshold {
        return outer; // plateau extends past the bound
    }
    let (mut below, mut above) = (outer.ln(), inner.ln());
    for _ in 0..200 {
        let mid = (below + above) / 2.0;
        let skr = skr_at(link, mid.exp());
        if skr < threshold {
            below = mid;
        } else {
            above = mid;
        }
        if (skr - threshold).abs() <= 5e-4 * skr_max && skr >= threshold {
            return mid.exp();
        }
    }
    above.exp()
}

/// Optimum per entry of an increasing loss grid. Entries where no positive
/// key exists are marked with `None`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptimumAtLoss {
    pub loss_db: f64,
    pub optimum: Option<Optimum>,
}

pub fn optimum_vs_loss(
    link: &LinkModel,
    loss_grid: &[f64],
    mu_bounds: (f64, f64),
) -> Result<Vec<OptimumAtLoss>, OptimError> {
    link.validate()?;
    if loss_grid.is_empty() || loss_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(OptimError::BadGrid);
    }
    crate::init_thread_pool();
    Ok(loss_grid
        .par_iter()
        .map(|&loss| {
            let at_loss = link.with_total_loss(loss);
            let optimum = match optimize_pair_rate(&at_loss, mu_bounds) {
                Ok(opt) => Some(opt),
                Err(OptimError::NoKey { .. }) => None,
                Err(_) => None,
            };
            OptimumAtLoss { loss_db: loss, optimum }
        })
        .collect())
}

/// CSV export; unreachable losses are written with `nan` fields.
pub fn write_optima_csv<W: Write>(mut w: W, series: &[OptimumAtLoss]) -> Result<(), OptimError> {
    writeln!(w, "loss_db,mu_opt,pair_rate_opt,skr_max,band_lo,band_hi")?;
    for row in series {
        match row.optimum {
            Some(o) => writeln!(
                w,
                "{},{},{},{},{},{}",
                row.loss_db, o.mu_opt, o.pair_rate_opt, o.skr_max, o.band_lo, o.band_hi
            )?,
            None => writeln!(w, "{},nan,nan,0,nan,nan", row.loss_db)?,
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::link::{LinkModel, SweepVariable};

    #[test]
    fn optimum_is_a_local_maximum_with_valid_band() {
        let link = LinkModel::terrestrial_reference();
        let opt = optimize_pair_rate(&link, DEFAULT_MU_BOUNDS).unwrap();
        assert!(opt.skr_max > 0.0);
        for eps in [-1e-3, 1e-3] {
            let skr = predict(&link.with_mu(opt.mu_opt * (1.0 + eps))).skr;
            assert!(skr <= opt.skr_max * (1.0 + 1e-9));
        }
        assert!(opt.band_lo <= opt.mu_opt && opt.mu_opt <= opt.band_hi);
        for edge in [opt.band_lo, opt.band_hi] {
            let skr = predict(&link.with_mu(edge)).skr;
            let ratio = skr / opt.skr_max;
            assert!((0.899..=0.901).contains(&ratio), "band edge at {ratio}");
        }
    }

    #[test]
    fn determinism_bit_identical() {
        let link = LinkModel::terrestrial_reference();
        let a = optimize_pair_rate(&link, DEFAULT_MU_BOUNDS).unwrap();
        let b = optimize_pair_rate(&link, DEFAULT_MU_BOUNDS).unwrap();
        assert_eq!(a.mu_opt.to_bits(), b.mu_opt.to_bits());
        assert_eq!(a.skr_max.to_bits(), b.skr_max.to_bits());
        assert_eq!(a.band_lo.to_bits(), b.band_lo.to_bits());
        assert_eq!(a.band_hi.to_bits(), b.band_hi.to_bits());
    }

    #[test]
    fn noiseless_monotone_link_pushes_mu_to_the_bound() {
        let mut link = LinkModel::terrestrial_reference();
        link.source.misalignment_error = 0.0;
        link.arm_a.detector.noise_yield = Some(0.0);
        link.arm_b.detector.noise_yield = Some(0.0);
        // in the low-mu regime SKR grows linearly, so the constraint binds
        let opt = optimize_pair_rate(&link, (1e-5, 1e-3)).unwrap();
        assert!(opt.mu_opt > 1e-3 * (1.0 - 3.0 * MU_RELATIVE_TOL));
        assert!((predict(&link.with_mu(opt.band_hi)).skr / opt.skr_max) >= 0.899);
    }

    #[test]
    fn no_key_error_beyond_reach() {
        let link = LinkModel::terrestrial_reference().with_total_loss(120.0);
        match optimize_pair_rate(&link, DEFAULT_MU_BOUNDS) {
            Err(OptimError::NoKey { .. }) => {}
            other => panic!("expected NoKey, got {other:?}"),
        }
    }

    #[test]
    fn single_downlink_optimum_shifts_down_with_loss() {
        let link = LinkModel::terrestrial_reference();
        let series =
            optimum_vs_loss(&link, &[40.0, 44.0, 47.0, 48.0, 50.0], DEFAULT_MU_BOUNDS).unwrap();
        let mus: Vec<f64> = series
            .iter()
            .map(|r| r.optimum.expect("key should exist").mu_opt)
            .collect();
        for w in mus.windows(2) {
            assert!(w[1] < w[0], "mu_opt not strictly decreasing: {mus:?}");
        }
    }

    #[test]
    fn one_point_grid_equals_direct_optimization() {
        let link = LinkModel::terrestrial_reference();
        let series = optimum_vs_loss(&link, &[46.0], DEFAULT_MU_BOUNDS).unwrap();
        let direct = optimize_pair_rate(&link.with_total_loss(46.0), DEFAULT_MU_BOUNDS).unwrap();
        let from_grid = series[0].optimum.unwrap();
        assert_eq!(from_grid.mu_opt.to_bits(), direct.mu_opt.to_bits());
    }

    #[test]
    fn grid_and_bounds_validation() {
        let link = LinkModel::terrestrial_reference();
        assert!(matches!(
            optimize_pair_rate(&link, (0.0, 1.0)),
            Err(OptimError::BadBounds(_, _))
        ));
        assert!(matches!(
            optimum_vs_loss(&link, &[], DEFAULT_MU_BOUNDS),
            Err(OptimError::BadGrid)
        ));
        assert!(matches!(
            optimum_vs_loss(&link, &[50.0, 40.0], DEFAULT_MU_BOUNDS),
            Err(OptimError::BadGrid)
        ));
    }

    #[test]
    fn unreachable_grid_point_is_marked_not_fatal() {
        let link = LinkModel::terrestrial_reference();
        let series = optimum_vs_loss(&link, &[45.0, 130.0], DEFAULT_MU_BOUNDS).unwrap();
        assert!(series[0].optimum.is_some());
        assert!(series[1].optimum.is_none());
        let mut buf = Vec::new();
        write_optima_csv(&mut buf, &series).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("loss_db,mu_opt,pair_rate_opt,skr_max,band_lo,band_hi\n"));
        assert!(text.lines().nth(2).unwrap().contains("nan"));
    }

    #[test]
    fn sweep_maximum_agrees_with_optimizer() {
        let link = LinkModel::terrestrial_reference().with_total_loss(43.5);
        let opt = optimize_pair_rate(&link, DEFAULT_MU_BOUNDS).unwrap();
        let grid: Vec<f64> = (0..300)
            .map(|i| 1e-4 * (1e4f64).powf(i as f64 / 299.0))
            .collect();
        let best = crate::link::sweep(&link, SweepVariable::PairRate, &grid)
            .unwrap()
            .into_iter()
            .map(|(_, p)| p.skr)
            .fold(0.0f64, f64::max);
        assert!(opt.skr_max >= best * (1.0 - 1e-6));
    }
}
