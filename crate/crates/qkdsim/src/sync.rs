//! Clock recovery and coincidence pairing between two tag streams.
//!
//! The relative offset between the parties is found by binned
//! cross-correlation: a coarse scan over the search window followed by
//! bin-halving refinement down to sub-nanosecond resolution. Drift is
//! tracked by repeating the fine estimate per time segment and fitting the
//! per-segment offsets. Coincidences are then paired one-to-one in corrected
//! time by a greedy nearest-difference merge.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tags::TagStream;

#[derive(Debug, Error)]
pub enum SyncError {
    #[error("{0} stream is empty")]
    EmptyStream(&'static str),
    #[error("streams do not overlap in time after applying the offset")]
    NoOverlap,
    #[error("no significant correlation peak (best significance {best_significance:.2}, need >= {threshold})")]
    NoSignificantPeak {
        best_significance: f64,
        threshold: f64,
    },
    #[error("{0}")]
    BadParams(String),
    #[error("csv: {0}")]
    Io(#[from] std::io::Error),
}

/// Peak significance below which a correlation result is rejected.
pub const SIGNIFICANCE_THRESHOLD: f64 = 6.0;

/// Default half-width of the coarse offset search.
pub const DEFAULT_SEARCH_WINDOW: f64 = 1e-3;

/// Default coarse correlation bin.
pub const DEFAULT_COARSE_BIN: f64 = 1e-6;

/// Refinement stops once bins are at or below this width.
pub const FINEST_BIN_PS: f64 = 200.0;

/// Default drift-tracking segment length.
pub const DEFAULT_SEGMENT: f64 = 1.0;

/// One affine piece of the recovered clock relation
/// `t_remote = t_local * (1 + slope) + offset`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ClockSegment {
    /// Remote-time start of this piece, ps.
    pub t_start_ps: i64,
    pub offset_ps: f64,
    pub slope: f64,
}

/// Recovered relative clock model between two streams.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClockModel {
    /// Time-ordered pieces; the first piece extends to minus infinity.
    pub segments: Vec<ClockSegment>,
    /// RMS of per-segment offset residuals about the fit, ps.
    pub residual_rms_ps: f64,
    /// Segments that produced no significant peak and were interpolated.
    pub gap_segments: usize,
}

impl ClockModel {
    pub fn identity() -> Self {
        Self::linear(0.0, 0.0)
    }

    /// Single affine relation valid for all times.
    pub fn linear(offset_ps: f64, slope: f64) -> Self {
        ClockModel {
            segments: vec![ClockSegment {
                t_start_ps: i64::MIN,
                offset_ps,
                slope,
            }],
            residual_rms_ps: 0.0,
            gap_segments: 0,
        }
    }

    fn segment_for_remote(&self, t_remote_ps: i64) -> &ClockSegment {
        let idx = self
            .segments
            .partition_point(|s| s.t_start_ps <= t_remote_ps)
            .saturating_sub(1);
        &self.segments[idx]
    }

    /// Maps a remote timestamp into the local timebase.
    pub fn to_local(&self, t_remote_ps: i64) -> i64 {
        let s = self.segment_for_remote(t_remote_ps);
        ((t_remote_ps as f64 - s.offset_ps) / (1.0 + s.slope)).round() as i64
    }

    /// Maps a local timestamp into the remote timebase.
    pub fn to_remote(&self, t_local_ps: i64) -> i64 {
        // segment boundaries live in remote time; convert the local instant
        // through each candidate and keep the consistent one
        for (i, s) in self.segments.iter().enumerate().rev() {
            let t_remote = (t_local_ps as f64 * (1.0 + s.slope) + s.offset_ps).round() as i64;
            if t_remote >= s.t_start_ps || i == 0 {
                return t_remote;
            }
        }
        unreachable!("first segment always matches")
    }

    /// Instantaneous offset `t_remote - t_local` at a given remote time, ps.
    pub fn offset_at(&self, t_remote_ps: i64) -> f64 {
        t_remote_ps as f64 - self.to_local(t_remote_ps) as f64
    }

    /// Mean slope across segments (single-segment models: the drift).
    pub fn drift(&self) -> f64 {
        self.segments.iter().map(|s| s.slope).sum::<f64>() / self.segments.len() as f64
    }
}

/// Result of the coarse offset search.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OffsetEstimate {
    pub offset_ps: f64,
    pub significance: f64,
}

fn times(stream: &TagStream) -> Vec<i64> {
    stream.tags.iter().map(|t| t.time_ps).collect()
}

/// Histogram of `t_b - t_a - offset` over `[-half_span, half_span]`.
/// Both inputs must be sorted; runs as a linear merge.
fn dt_histogram(
    a: &[i64],
    b: &[i64],
    offset_ps: f64,
    half_span_ps: f64,
    bin_ps: f64,
) -> (Vec<u64>, f64) {
    let n_side = (half_span_ps / bin_ps).ceil() as i64;
    let n_bins = (2 * n_side + 1) as usize;
    let mut counts = vec![0u64; n_bins];
    let origin = -(n_side as f64) * bin_ps - bin_ps / 2.0; // left edge of bin 0
    let mut lo = 0usize;
    for &tb in b {
        let target = tb as f64 - offset_ps;
        let left = target + origin;
        while lo < a.len() && (a[lo] as f64) < left {
            lo += 1;
        }
        let mut i = lo;
        while i < a.len() {
            let dt = target - a[i] as f64;
            if dt < -half_span_ps - bin_ps {
                break;
            }
            let idx = ((dt - origin) / bin_ps).floor() as i64;
            if (0..n_bins as i64).contains(&idx) {
                counts[idx as usize] += 1;
            }
            i += 1;
        }
    }
    (counts, origin)
}

fn peak_and_significance(counts: &[u64]) -> (usize, f64) {
    let peak_idx = counts
        .iter()
        .enumerate()
        .max_by_key(|(_, &c)| c)
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut sorted: Vec<u64> = counts.to_vec();
    sorted.sort_unstable();
    let median = sorted[sorted.len() / 2] as f64;
    // variance-stabilized Poisson excess; stays honest on near-empty floors
    let z = 2.0 * ((counts[peak_idx] as f64).sqrt() - median.sqrt());
    (peak_idx, z)
}

/// Centroid of the peak over a symmetric neighborhood, floor-subtracted.
fn peak_centroid(counts: &[u64], origin: f64, bin_ps: f64, peak_idx: usize) -> f64 {
    let mut sorted: Vec<u64> = counts.to_vec();
    sorted.sort_unstable();
    let floor = sorted[sorted.len() / 2] as f64;
    let w = 16usize;
    let lo = peak_idx.saturating_sub(w);
    let hi = (peak_idx + w + 1).min(counts.len());
    let mut mass = 0.0;
    let mut moment = 0.0;
    for (i, &count) in counts.iter().enumerate().take(hi).skip(lo) {
        let c = (count as f64 - floor).max(0.0);
        let center = origin + (i as f64 + 0.5) * bin_ps;
        mass += c;
        moment += c * center;
    }
    if mass > 0.0 {
        moment / mass
    } else {
        origin + (peak_idx as f64 + 0.5) * bin_ps
    }
}

/// Refines an offset candidate by halving the correlation bin until
/// [`FINEST_BIN_PS`]; returns the refined estimate and its significance at
/// the finest level. `span_floor_ps` keeps the window wide enough for peaks
/// smeared by uncompensated drift.
fn refine_offset(
    a: &[i64],
    b: &[i64],
    start_offset_ps: f64,
    start_bin_ps: f64,
    span_floor_ps: f64,
) -> OffsetEstimate {
    let mut offset = start_offset_ps;
    let mut bin = start_bin_ps;
    let mut significance = 0.0;
    let mut locked: Option<OffsetEstimate> = None;
    while bin > FINEST_BIN_PS {
        bin = (bin / 2.0).max(FINEST_BIN_PS);
        // span covers the previous level's quantization plus a wide pair peak
        let half_span = (3.0 * bin).max(span_floor_ps);
        let (counts, origin) = dt_histogram(a, b, offset, half_span, bin);
        let (peak_idx, z) = peak_and_significance(&counts);
        if z < SIGNIFICANCE_THRESHOLD {
            if let Some(best) = locked {
                // narrowing clipped a peak that was already significant
                // (e.g. smeared by uncompensated drift); keep the coarser lock
                return best;
            }
        }
        offset += peak_centroid(&counts, origin, bin, peak_idx);
        significance = z;
        if z >= SIGNIFICANCE_THRESHOLD {
            locked = Some(OffsetEstimate {
                offset_ps: offset,
                significance: z,
            });
        }
    }
    OffsetEstimate {
        offset_ps: offset,
        significance,
    }
}

/// Finds the relative offset `t_b - t_a` by binned cross-correlation.
///
/// `search_window` is the half-width of the scanned offset range and
/// `coarse_bin` the first-level bin; both in seconds. Candidate peaks from
/// the coarse level are refined by bin halving, and the best refined peak
/// must reach a significance of [`SIGNIFICANCE_THRESHOLD`] over the median.
pub fn coarse_offset_search(
    a: &TagStream,
    b: &TagStream,
    search_window: f64,
    coarse_bin: f64,
) -> Result<OffsetEstimate, SyncError> {
    if a.tags.is_empty() {
        return Err(SyncError::EmptyStream("local"));
    }
    if b.tags.is_empty() {
        return Err(SyncError::EmptyStream("remote"));
    }
    if !(search_window > 0.0 && coarse_bin > 0.0 && coarse_bin <= search_window) {
        return Err(SyncError::BadParams(format!(
            "need 0 < coarse_bin <= search_window, got ({coarse_bin}, {search_window})"
        )));
    }
    let ta = times(a);
    let tb = times(b);
    let half_ps = search_window * 1e12;
    let bin_ps = coarse_bin * 1e12;
    let (counts, origin) = dt_histogram(&ta, &tb, 0.0, half_ps, bin_ps);

    // refine several coarse candidates; a genuine peak sharpens dramatically
    // while statistical flukes regress to the floor
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_unstable_by(|&i, &j| counts[j].cmp(&counts[i]));
    let mut candidates = Vec::new();
    for idx in order {
        if candidates
            .iter()
            .all(|&c: &usize| c.abs_diff(idx) > 2)
        {
            candidates.push(idx);
        }
        if candidates.len() >= 6 {
            break;
        }
    }

    let mut best: Option<OffsetEstimate> = None;
    for idx in candidates {
        let guess = origin + (idx as f64 + 0.5) * bin_ps;
        let refined = refine_offset(&ta, &tb, guess, bin_ps, 8000.0);
        if best.is_none_or(|b| refined.significance > b.significance) {
            best = Some(refined);
        }
    }
    let best = best.expect("at least one candidate");
    if best.significance < SIGNIFICANCE_THRESHOLD {
        return Err(SyncError::NoSignificantPeak {
            best_significance: best.significance,
            threshold: SIGNIFICANCE_THRESHOLD,
        });
    }
    Ok(best)
}

/// Tracks the offset segment by segment and fits a (piecewise) linear drift.
///
/// A first sequential pass locks onto each segment's smeared peak at the
/// microsecond scale; subsequent passes re-estimate every segment against the
/// current fit with shrinking correlation windows, so the drift compensation
/// sharpens its own input. Segments without a significant peak are flagged as
/// gaps and bridged by the fit.
pub fn track_drift(
    a: &TagStream,
    b: &TagStream,
    initial_offset_ps: f64,
    segment_length: f64,
) -> Result<ClockModel, SyncError> {
    if a.tags.is_empty() {
        return Err(SyncError::EmptyStream("local"));
    }
    if b.tags.is_empty() {
        return Err(SyncError::EmptyStream("remote"));
    }
    if segment_length.is_nan() || segment_length <= 0.0 {
        return Err(SyncError::BadParams("segment_length must be > 0".into()));
    }
    let ta = times(a);
    let tb = times(b);
    let seg_ps = (segment_length * 1e12) as i64;
    let t_first = tb[0];
    let t_last = *tb.last().expect("nonempty");
    let n_segments = ((t_last - t_first) / seg_ps + 1).max(1) as usize;

    let mut segments: Vec<&[i64]> = Vec::with_capacity(n_segments);
    let mut start = 0usize;
    for k in 0..n_segments {
        let seg_end_time = t_first + (k as i64 + 1) * seg_ps;
        let mut end = start;
        while end < tb.len() && tb[end] < seg_end_time {
            end += 1;
        }
        segments.push(&tb[start..end]);
        start = end;
    }
    let midpoint = |seg: &[i64]| (seg[0] + seg[seg.len() - 1]) as f64 / 2.0;

    // sequential coarse lock; the per-segment peak may be smeared by the
    // uncompensated drift, so only the microsecond-scale centroid is taken
    let mut points: Vec<(f64, f64)> = Vec::new();
    let mut gaps = 0usize;
    let mut prediction = initial_offset_ps;
    for seg in &segments {
        if seg.len() < 10 {
            gaps += 1;
            continue;
        }
        let (counts, origin) = dt_histogram(&ta, seg, prediction, 50e6, 1e6);
        let (peak_idx, z) = peak_and_significance(&counts);
        if z < SIGNIFICANCE_THRESHOLD {
            gaps += 1;
            continue;
        }
        let est = prediction + peak_centroid(&counts, origin, 1e6, peak_idx);
        points.push((midpoint(seg), est));
        prediction = est;
    }
    if points.len() < 2 {
        return Err(SyncError::NoSignificantPeak {
            best_significance: 0.0,
            threshold: SIGNIFICANCE_THRESHOLD,
        });
    }
    let mut model = fit_piecewise(&points, gaps);

    // measure residuals against the model-corrected remote stream; each pass
    // removes the drift it just fitted, so the peak sharpens and the window
    // can shrink
    for half_span in [4e6f64, 1e5, 8e3] {
        let bin = (half_span / 64.0).max(FINEST_BIN_PS);
        let mut pts: Vec<(f64, f64)> = Vec::new();
        let mut pass_gaps = 0usize;
        for seg in &segments {
            if seg.len() < 10 {
                pass_gaps += 1;
                continue;
            }
            let corrected: Vec<i64> = seg.iter().map(|&t| model.to_local(t)).collect();
            let (counts, origin) = dt_histogram(&ta, &corrected, 0.0, half_span, bin);
            let (peak_idx, z) = peak_and_significance(&counts);
            if z < SIGNIFICANCE_THRESHOLD {
                pass_gaps += 1;
                continue;
            }
            let residual = peak_centroid(&counts, origin, bin, peak_idx);
            let mid = midpoint(seg);
            pts.push((mid, model.offset_at(mid as i64) + residual));
        }
        if pts.len() >= 2 {
            model = fit_piecewise(&pts, pass_gaps);
        }
    }
    Ok(model)
}

/// Least-squares line through (t, offset) points; returns (intercept, slope, sse).
fn fit_line(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let mean_t = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_o = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for &(t, o) in points {
        sxx += (t - mean_t) * (t - mean_t);
        sxy += (t - mean_t) * (o - mean_o);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = mean_o - slope * mean_t;
    let sse: f64 = points
        .iter()
        .map(|&(t, o)| {
            let r = o - (intercept + slope * t);
            r * r
        })
        .sum();
    (intercept, slope, sse)
}

/// The measured relation is `offset(t_remote) = t_remote - t_local`, with the
/// underlying transform `t_remote = t_local (1+s) + o`. Converting the fitted
/// line `offset = c + m t_remote` gives `s = m / (1 - m)` and `o = c / (1 - m)`.
fn line_to_segment(t_start_ps: i64, intercept: f64, slope_vs_remote: f64) -> ClockSegment {
    let m = slope_vs_remote;
    let s = m / (1.0 - m);
    ClockSegment {
        t_start_ps,
        offset_ps: intercept / (1.0 - m),
        slope: s,
    }
}

fn fit_piecewise(points: &[(f64, f64)], gaps: usize) -> ClockModel {
    let (c, m, sse) = fit_line(points);
    let rms = (sse / points.len() as f64).sqrt();

    // try one knee when a single line leaves structured residuals
    if points.len() >= 6 && rms > 1000.0 {
        let mut best: Option<(usize, f64)> = None;
        for split in 3..points.len() - 2 {
            let (_, _, s1) = fit_line(&points[..split]);
            let (_, _, s2) = fit_line(&points[split..]);
            let total = s1 + s2;
            if best.is_none_or(|(_, b)| total < b) {
                best = Some((split, total));
            }
        }
        if let Some((split, total)) = best {
            if total < 0.25 * sse {
                let (c1, m1, _) = fit_line(&points[..split]);
                let (c2, m2, _) = fit_line(&points[split..]);
                let knee = points[split].0 as i64;
                let rms2 = (total / points.len() as f64).sqrt();
                return ClockModel {
                    segments: vec![
                        line_to_segment(i64::MIN, c1, m1),
                        line_to_segment(knee, c2, m2),
                    ],
                    residual_rms_ps: rms2,
                    gap_segments: gaps,
                };
            }
        }
    }

    ClockModel {
        segments: vec![line_to_segment(i64::MIN, c, m)],
        residual_rms_ps: rms,
        gap_segments: gaps,
    }
}

/// One matched detection pair in corrected time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoincidencePair {
    pub index_a: usize,
    pub index_b: usize,
    /// Local-timebase time of the pair (the A-side tag).
    pub t_corrected_ps: i64,
    /// `corrected(t_b) - t_a`, ps.
    pub dt_ps: i64,
    pub channel_a: u8,
    pub channel_b: u8,
}

/// Greedy one-to-one pairing of tags whose corrected times differ by at most
/// `window / 2` (the window is the full coincidence width, matching the
/// accidental rate `R_A R_B window`).
///
/// Remote tags are processed in time order; each takes the nearest unused
/// local tag inside the window. Runs as a linear merge over the sorted
/// streams.
pub fn find_coincidences(
    a: &TagStream,
    b: &TagStream,
    clock: &ClockModel,
    window: f64,
) -> Vec<CoincidencePair> {
    let w2_ps = (window * 1e12).round() as i64; // compare 2|dt| <= w to keep halves exact
    let mut used = vec![false; a.tags.len()];
    let mut pairs = Vec::new();
    let mut lo = 0usize;
    for (ib, tag_b) in b.tags.iter().enumerate() {
        let t_corr = clock.to_local(tag_b.time_ps);
        while lo < a.tags.len() && 2 * (t_corr - a.tags[lo].time_ps) > w2_ps {
            lo += 1;
        }
        let mut best: Option<(i64, usize)> = None;
        let mut i = lo;
        while i < a.tags.len() {
            let dt = t_corr - a.tags[i].time_ps;
            if 2 * dt < -w2_ps {
                break;
            }
            if !used[i] {
                let abs = dt.abs();
                if best.is_none_or(|(b_abs, _)| abs < b_abs) {
                    best = Some((abs, i));
                }
            }
            i += 1;
        }
        if let Some((_, ia)) = best {
            used[ia] = true;
            pairs.push(CoincidencePair {
                index_a: ia,
                index_b: ib,
                t_corrected_ps: a.tags[ia].time_ps,
                dt_ps: t_corr - a.tags[ia].time_ps,
                channel_a: a.tags[ia].channel,
                channel_b: tag_b.channel,
            });
        }
    }
    pairs.sort_unstable_by_key(|p| p.t_corrected_ps);
    pairs
}

/// Correlation histogram of corrected time differences around zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationHistogram {
    pub bin_ps: f64,
    /// Left edge of the first bin, ps.
    pub origin_ps: f64,
    pub counts: Vec<u64>,
    pub peak_index: usize,
    /// Peak height over the median floor, in Poisson sigmas of the floor.
    pub significance: f64,
}

impl CorrelationHistogram {
    pub fn bin_center(&self, index: usize) -> f64 {
        self.origin_ps + (index as f64 + 0.5) * self.bin_ps
    }

    /// Gaussian width of the peak by floor-subtracted second moment.
    pub fn peak_sigma_ps(&self) -> Option<f64> {
        let mut sorted = self.counts.clone();
        sorted.sort_unstable();
        let floor = sorted[sorted.len() / 2] as f64;
        let mut mass = 0.0;
        let mut mean = 0.0;
        for (i, &c) in self.counts.iter().enumerate() {
            let w = (c as f64 - floor).max(0.0);
            mass += w;
            mean += w * self.bin_center(i);
        }
        if mass <= 0.0 {
            return None;
        }
        mean /= mass;
        let mut var = 0.0;
        for (i, &c) in self.counts.iter().enumerate() {
            let w = (c as f64 - floor).max(0.0);
            let d = self.bin_center(i) - mean;
            var += w * d * d;
        }
        Some((var / mass).sqrt())
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), SyncError> {
        writeln!(w, "bin_center_ps,count")?;
        for (i, &c) in self.counts.iter().enumerate() {
            writeln!(w, "{},{}", self.bin_center(i), c)?;
        }
        Ok(())
    }
}

pub fn correlation_histogram(
    a: &TagStream,
    b: &TagStream,
    clock: &ClockModel,
    span: f64,
    bin: f64,
) -> Result<CorrelationHistogram, SyncError> {
    if !(bin > 0.0 && span >= bin) {
        return Err(SyncError::BadParams(format!(
            "need bin > 0 and span >= bin, got ({bin}, {span})"
        )));
    }
    let ta = times(a);
    let tb: Vec<i64> = b.tags.iter().map(|t| clock.to_local(t.time_ps)).collect();
    let (counts, origin) = dt_histogram(&ta, &tb, 0.0, span * 1e12 / 2.0, bin * 1e12);
    let (peak_index, significance) = peak_and_significance(&counts);
    Ok(CorrelationHistogram {
        bin_ps: bin * 1e12,
        origin_ps: origin,
        counts,
        peak_index,
        significance,
    })
}

/// CSV export of a pair list.
pub fn write_pairs_csv<W: Write>(mut w: W, pairs: &[CoincidencePair]) -> Result<(), SyncError> {
    writeln!(w, "t_corrected_ps,channel_a,channel_b,dt_ps")?;
    for p in pairs {
        writeln!(
            w,
            "{},{},{},{}",
            p.t_corrected_ps, p.channel_a, p.channel_b, p.dt_ps
        )?;
    }
    Ok(())
}
