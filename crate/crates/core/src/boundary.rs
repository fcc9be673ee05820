//! Grain-boundary line analysis: probabilistic Hough extraction of boundary
//! segments, extension of segments across the full image frame, on-boundary
//! classification of defects, and the proportion statistics and significance
//! tests for defects on boundaries.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::defect::{Defect, Mask};
use crate::stats::{mean, sample_std, two_sided_p, Z95};

#[derive(Debug, Error)]
pub enum BoundaryError {
    #[error("zero-length segment cannot be extended")]
    DegenerateSegment,
    #[error("sample size must be at least 1")]
    EmptySample,
    #[error("proportion {0} outside [0, 1]")]
    BadProportion(f64),
    #[error("count {n} exceeds total {total}")]
    CountExceedsTotal { n: u64, total: u64 },
    #[error("no proportions to summarize")]
    EmptyInput,
}

/// Probabilistic Hough parameters. The vote threshold, minimum segment
/// length, and maximum bridged gap are in pixels/votes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoughParams {
    pub rho_resolution: f64,
    pub theta_resolution_deg: f64,
    pub vote_threshold: u32,
    pub min_segment_length: u32,
    pub max_gap: u32,
}

impl Default for HoughParams {
    fn default() -> HoughParams {
        HoughParams {
            rho_resolution: 1.0,
            theta_resolution_deg: 1.0,
            vote_threshold: 50,
            min_segment_length: 30,
            max_gap: 10,
        }
    }
}

/// A detected line segment with endpoints in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineSegment {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

impl LineSegment {
    pub fn length(&self) -> f64 {
        let dx = self.x2 as f64 - self.x1 as f64;
        let dy = self.y2 as f64 - self.y1 as f64;
        (dx * dx + dy * dy).sqrt()
    }
}

/// Probabilistic Hough line detection on a binary mask.
///
/// Foreground points are visited in a seeded random order, voting over all
/// θ bins of a (ρ, θ) accumulator. Once a point's best bin reaches the vote
/// threshold, the line is traced through the mask in both directions with
/// up to `max_gap` skipped pixels, consumed from the mask, and kept if it
/// spans at least the minimum length. Deterministic for a fixed seed.
pub fn detect_boundary_lines(mask: &Mask, params: &HoughParams, seed: u64) -> Vec<LineSegment> {
    let (w, h) = (mask.width as i64, mask.height as i64);
    let mut points: Vec<(i64, i64)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.get(x as u32, y as u32) {
                points.push((x, y));
            }
        }
    }
    if points.is_empty() {
        return Vec::new();
    }

    let n_theta = (180.0 / params.theta_resolution_deg).round().max(1.0) as usize;
    let diag = ((w * w + h * h) as f64).sqrt();
    let n_rho = (2.0 * diag / params.rho_resolution).ceil() as usize + 1;
    let rho_offset = diag;
    let trig: Vec<(f64, f64)> = (0..n_theta)
        .map(|t| {
            let theta = (t as f64) * params.theta_resolution_deg.to_radians();
            (theta.cos(), theta.sin())
        })
        .collect();

    let mut acc = vec![0i32; n_theta * n_rho];
    let mut present = mask.clone();
    let mut voted = Mask::empty(mask.width, mask.height);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    points.shuffle(&mut rng);

    let rho_bin = |x: i64, y: i64, t: usize| -> usize {
        let rho = x as f64 * trig[t].0 + y as f64 * trig[t].1;
        (((rho + rho_offset) / params.rho_resolution).round() as usize).min(n_rho - 1)
    };

    let mut segments = Vec::new();
    for &(px, py) in &points {
        if !present.get(px as u32, py as u32) {
            continue;
        }
        // vote over all orientations, remembering the best bin
        voted.set(px as u32, py as u32, true);
        let mut best_t = 0usize;
        let mut best_votes = -1i32;
        for t in 0..n_theta {
            let idx = t * n_rho + rho_bin(px, py, t);
            acc[idx] += 1;
            if acc[idx] > best_votes {
                best_votes = acc[idx];
                best_t = t;
            }
        }
        if best_votes < params.vote_threshold as i32 {
            continue;
        }

        // direction along the line (perpendicular to the normal)
        let (cos_t, sin_t) = trig[best_t];
        let (dir_x, dir_y) = (-sin_t, cos_t);
        let mut ends = [(px, py); 2];
        for (side, sign) in [(0usize, 1.0f64), (1, -1.0)] {
            let (step_x, step_y) = (sign * dir_x, sign * dir_y);
            let (mut fx, mut fy) = (px as f64, py as f64);
            let mut gap = 0u32;
            loop {
                if step_x.abs() > step_y.abs() {
                    fx += step_x.signum();
                    fy += step_y / step_x.abs();
                } else {
                    fy += step_y.signum();
                    fx += step_x / step_y.abs();
                }
                let (ix, iy) = (fx.round() as i64, fy.round() as i64);
                if ix < 0 || iy < 0 || ix >= w || iy >= h {
                    break;
                }
                if present.get(ix as u32, iy as u32) {
                    gap = 0;
                    ends[side] = (ix, iy);
                } else {
                    gap += 1;
                    if gap > params.max_gap {
                        break;
                    }
                }
            }
        }

        let (ex1, ey1) = ends[0];
        let (ex2, ey2) = ends[1];
        let len2 = ((ex1 - ex2).pow(2) + (ey1 - ey2).pow(2)) as f64;
        let good = len2.sqrt() >= params.min_segment_length as f64;

        // consume the traced run; un-vote pixels that had voted
        for (side, sign) in [(0usize, 1.0f64), (1, -1.0)] {
            let (step_x, step_y) = (sign * dir_x, sign * dir_y);
            let (mut fx, mut fy) = (px as f64, py as f64);
            loop {
                let (ix, iy) = (fx.round() as i64, fy.round() as i64);
                if present.get(ix as u32, iy as u32) {
                    present.set(ix as u32, iy as u32, false);
                    if voted.get(ix as u32, iy as u32) {
                        voted.set(ix as u32, iy as u32, false);
                        for t in 0..n_theta {
                            acc[t * n_rho + rho_bin(ix, iy, t)] -= 1;
                        }
                    }
                }
                if (ix, iy) == ends[side] {
                    break;
                }
                if step_x.abs() > step_y.abs() {
                    fx += step_x.signum();
                    fy += step_y / step_x.abs();
                } else {
                    fy += step_y.signum();
                    fx += step_x / step_y.abs();
                }
            }
        }

        if good {
            segments.push(LineSegment {
                x1: ex1 as u32,
                y1: ey1 as u32,
                x2: ex2 as u32,
                y2: ey2 as u32,
            });
        }
    }
    segments
}

/// Rasterizes the infinite line through a segment's endpoints, clipped to
/// the image frame. The trace's first and last pixels lie on frame edges.
pub fn extend_to_frame(
    segment: &LineSegment,
    width: u32,
    height: u32,
) -> Result<Vec<(u32, u32)>, BoundaryError> {
    let (x1, y1) = (segment.x1 as f64, segment.y1 as f64);
    let (x2, y2) = (segment.x2 as f64, segment.y2 as f64);
    let (dx, dy) = (x2 - x1, y2 - y1);
    if dx == 0.0 && dy == 0.0 {
        return Err(BoundaryError::DegenerateSegment);
    }
    // Liang-Barsky clip of the infinite line to [0, w-1] x [0, h-1]
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    let bounds = [
        (-dx, x1 - 0.0),
        (dx, (width - 1) as f64 - x1),
        (-dy, y1 - 0.0),
        (dy, (height - 1) as f64 - y1),
    ];
    for (p, q) in bounds {
        if p == 0.0 {
            if q < 0.0 {
                return Ok(Vec::new()); // parallel and outside; unreachable for in-image segments
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    if t0 > t1 {
        return Ok(Vec::new());
    }
    let a = (
        (x1 + t0 * dx).round() as i64,
        (y1 + t0 * dy).round() as i64,
    );
    let b = (
        (x1 + t1 * dx).round() as i64,
        (y1 + t1 * dy).round() as i64,
    );
    Ok(bresenham(a, b)
        .into_iter()
        .map(|(x, y)| {
            (
                x.clamp(0, width as i64 - 1) as u32,
                y.clamp(0, height as i64 - 1) as u32,
            )
        })
        .collect())
}

fn bresenham(a: (i64, i64), b: (i64, i64)) -> Vec<(i64, i64)> {
    let (mut x, mut y) = a;
    let dx = (b.0 - a.0).abs();
    let dy = -(b.1 - a.1).abs();
    let sx = if a.0 < b.0 { 1 } else { -1 };
    let sy = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::new();
    loop {
        out.push((x, y));
        if (x, y) == b {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    out
}

/// Sets each defect's on-boundary flag: true iff the defect's pixel set,
/// dilated by one pixel to tolerate rasterization, touches any extended
/// trace or the raw boundary mask. Adding traces never clears a flag.
pub fn mark_on_boundary(
    defects: &mut [Defect],
    traces: &[Vec<(u32, u32)>],
    boundary_mask: &Mask,
) {
    let (w, h) = (boundary_mask.width, boundary_mask.height);
    let mut hit = boundary_mask.clone();
    for trace in traces {
        for &(x, y) in trace {
            if x < w && y < h {
                hit.set(x, y, true);
            }
        }
    }
    for defect in defects.iter_mut() {
        let touched = defect.pixels.iter().any(|&(x, y)| {
            let x0 = x.saturating_sub(1);
            let y0 = y.saturating_sub(1);
            let x1 = (x + 1).min(w - 1);
            let y1 = (y + 1).min(h - 1);
            (y0..=y1).any(|ny| (x0..=x1).any(|nx| hit.get(nx, ny)))
        });
        defect.on_boundary = defect.on_boundary || touched;
    }
}

/// Half-width of the 95% normal-approximation CI for a proportion:
/// 1.96·√(p(1−p)/N).
pub fn proportion_ci_half_width(p: f64, n: u64) -> Result<f64, BoundaryError> {
    if n == 0 {
        return Err(BoundaryError::EmptySample);
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(BoundaryError::BadProportion(p));
    }
    Ok(Z95 * (p * (1.0 - p) / n as f64).sqrt())
}

/// One-sample test of a proportion against p₀.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProportionTestResult {
    pub n_on: u64,
    pub n_in: u64,
    pub total: u64,
    pub proportion: f64,
    pub ci_half_width: f64,
    pub z: f64,
    pub p_value: f64,
    /// Two-sided at α = 0.05.
    pub significant: bool,
}

/// Normal-approximation one-sample proportion test, two-sided, with optional
/// Yates continuity correction; z is clamped at 0 under over-correction.
pub fn one_sample_prop_test(
    n_on: u64,
    total: u64,
    p0: f64,
    continuity: bool,
) -> Result<ProportionTestResult, BoundaryError> {
    if total == 0 {
        return Err(BoundaryError::EmptySample);
    }
    if n_on > total {
        return Err(BoundaryError::CountExceedsTotal { n: n_on, total });
    }
    if !(0.0..=1.0).contains(&p0) {
        return Err(BoundaryError::BadProportion(p0));
    }
    let n = total as f64;
    let correction = if continuity { 0.5 } else { 0.0 };
    let numerator = ((n_on as f64 - n * p0).abs() - correction).max(0.0);
    let denom = (n * p0 * (1.0 - p0)).sqrt();
    let z = if denom > 0.0 { numerator / denom } else { 0.0 };
    let p_value = two_sided_p(z);
    let proportion = n_on as f64 / n;
    Ok(ProportionTestResult {
        n_on,
        n_in: total - n_on,
        total,
        proportion,
        ci_half_width: proportion_ci_half_width(proportion, total)?,
        z,
        p_value,
        significant: p_value < 0.05,
    })
}

/// Two-sample test of equal proportions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoSampleTestResult {
    pub z: f64,
    pub p_value: f64,
    pub significant: bool,
}

/// Pooled two-sample proportion test, two-sided, with optional Yates
/// continuity correction. A degenerate pooled proportion (0 or 1) yields
/// p = 1 by convention.
pub fn two_sample_prop_test(
    n1: u64,
    total1: u64,
    n2: u64,
    total2: u64,
    continuity: bool,
) -> Result<TwoSampleTestResult, BoundaryError> {
    if total1 == 0 || total2 == 0 {
        return Err(BoundaryError::EmptySample);
    }
    if n1 > total1 {
        return Err(BoundaryError::CountExceedsTotal { n: n1, total: total1 });
    }
    if n2 > total2 {
        return Err(BoundaryError::CountExceedsTotal { n: n2, total: total2 });
    }
    let (t1, t2) = (total1 as f64, total2 as f64);
    let pooled = (n1 + n2) as f64 / (t1 + t2);
    if pooled == 0.0 || pooled == 1.0 {
        return Ok(TwoSampleTestResult { z: 0.0, p_value: 1.0, significant: false });
    }
    let diff = (n1 as f64 / t1 - n2 as f64 / t2).abs();
    let correction = if continuity { 0.5 * (1.0 / t1 + 1.0 / t2) } else { 0.0 };
    let numerator = (diff - correction).max(0.0);
    let denom = (pooled * (1.0 - pooled) * (1.0 / t1 + 1.0 / t2)).sqrt();
    let z = numerator / denom;
    let p_value = two_sided_p(z);
    Ok(TwoSampleTestResult { z, p_value, significant: p_value < 0.05 })
}

/// Mean, sample std, and 1.96·std/√n of per-image proportions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProportionSummary {
    pub n: usize,
    pub mean: f64,
    pub std: Option<f64>,
    pub ci_half_width: Option<f64>,
}

pub fn proportion_summary(per_image: &[f64]) -> Result<ProportionSummary, BoundaryError> {
    let mean = mean(per_image).ok_or(BoundaryError::EmptyInput)?;
    let std = sample_std(per_image);
    Ok(ProportionSummary {
        n: per_image.len(),
        mean,
        std,
        ci_half_width: std.map(|s| Z95 * s / (per_image.len() as f64).sqrt()),
    })
}
