//! Uniform-density Poisson-disc undersampling masks.
//!
//! A Bridson dart-throwing point set is drawn on the continuous `[0, W) x [0, H)`
//! plane, every point is snapped to its nearest pixel and the calibration block
//! is overlaid. The minimum distance is bisected until the number of sampled
//! pixels is within ±5% of `H*W/R`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{calibration_origin, UndersamplingMask};
use crate::error::{invalid, Result};
use crate::rng::{domain, hash64, keyed};

const CANDIDATES: usize = 30;
const BISECTION_STEPS: usize = 48;
const COUNT_TOLERANCE: f64 = 0.05;

/// Seed of the mask shared by every slice of one scan.
pub fn scan_mask_seed(dataset_seed: u64, scan_id: u64) -> u64 {
    hash64(&[dataset_seed, domain::MASK, scan_id])
}

pub fn make_poisson_disc_mask(
    height: usize,
    width: usize,
    acceleration: f64,
    calibration: (usize, usize),
    seed: u64,
) -> Result<UndersamplingMask> {
    if height == 0 || width == 0 {
        return Err(invalid!("mask grid must be non-empty"));
    }
    if !(acceleration > 1.0) || !acceleration.is_finite() {
        return Err(invalid!("acceleration must be > 1, got {}", acceleration));
    }
    if calibration.0 > height || calibration.1 > width {
        return Err(invalid!("calibration block exceeds the grid"));
    }
    let pixels = (height * width) as f64;
    let budget = pixels / acceleration;
    let cal_count = (calibration.0 * calibration.1) as f64;
    if budget < cal_count {
        return Err(invalid!(
            "budget {:.1} samples is smaller than the {}x{} calibration block",
            budget,
            calibration.0,
            calibration.1
        ));
    }
    let (lo, hi) = (budget * (1.0 - COUNT_TOLERANCE), budget * (1.0 + COUNT_TOLERANCE));
    let within = |n: usize| (n as f64) >= lo && (n as f64) <= hi;

    let cal = calibration_bits(height, width, calibration);
    let render = |radius: f64| {
        let mut rng = keyed(&[seed, domain::MASK, radius.to_bits()]);
        let mut bits = cal.clone();
        for (x, y) in bridson(width as f64, height as f64, radius, &mut rng) {
            let c = (x.round() as usize).min(width - 1);
            let r = (y.round() as usize).min(height - 1);
            bits[r * width + c] = true;
        }
        bits
    };

    // Larger radius, fewer samples.
    let (mut r_lo, mut r_hi) = (0.25_f64, height.max(width) as f64);
    let mut best: Option<(f64, Vec<bool>)> = None;
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (r_lo + r_hi);
        let bits = render(mid);
        let n = count(&bits);
        let miss = (n as f64 - budget).abs();
        if best.as_ref().map_or(true, |(m, _)| miss < *m) {
            best = Some((miss, bits));
        }
        if within(n) {
            break;
        }
        if (n as f64) > hi {
            r_lo = mid;
        } else {
            r_hi = mid;
        }
    }
    let mut bits = best.expect("at least one bisection step").1;
    if !within(count(&bits)) {
        adjust_to_budget(&mut bits, &cal, budget.round() as usize, seed);
    }
    UndersamplingMask::from_bits(height, width, acceleration, calibration, seed, bits)
}

fn count(bits: &[bool]) -> usize {
    bits.iter().filter(|b| **b).count()
}

fn calibration_bits(height: usize, width: usize, cal: (usize, usize)) -> Vec<bool> {
    let mut bits = vec![false; height * width];
    let (r0, c0) = calibration_origin((height, width), cal);
    for r in r0..r0 + cal.0 {
        for c in c0..c0 + cal.1 {
            bits[r * width + c] = true;
        }
    }
    bits
}

/// Adds or removes non-calibration pixels in a seeded order until `target` are set.
fn adjust_to_budget(bits: &mut [bool], cal: &[bool], target: usize, seed: u64) {
    let mut rng = keyed(&[seed, domain::MASK, u64::MAX]);
    let mut order: Vec<usize> = (0..bits.len()).filter(|&i| !cal[i]).collect();
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut n = count(bits);
    for i in order {
        if n == target {
            break;
        }
        if n > target && bits[i] {
            bits[i] = false;
            n -= 1;
        } else if n < target && !bits[i] {
            bits[i] = true;
            n += 1;
        }
    }
}

/// Bridson's algorithm on `[0, w) x [0, h)` with minimum distance `radius`.
fn bridson(w: f64, h: f64, radius: f64, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let cell = radius / std::f64::consts::SQRT_2;
    let gw = (w / cell).ceil() as usize + 1;
    let gh = (h / cell).ceil() as usize + 1;
    let mut grid: Vec<Option<usize>> = vec![None; gw * gh];
    let mut points = Vec::new();
    let mut active = Vec::new();
    let r2 = radius * radius;

    let cell_of = |x: f64, y: f64| ((x / cell) as usize, (y / cell) as usize);

    let first = (rng.random_range(0.0..w), rng.random_range(0.0..h));
    let (gx, gy) = cell_of(first.0, first.1);
    grid[gy * gw + gx] = Some(0);
    points.push(first);
    active.push(0);

    while !active.is_empty() {
        let slot = rng.random_range(0..active.len());
        let (px, py) = points[active[slot]];
        let mut placed = false;
        for _ in 0..CANDIDATES {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let dist = rng.random_range(radius..2.0 * radius);
            let (x, y) = (px + dist * theta.cos(), py + dist * theta.sin());
            if !(0.0..w).contains(&x) || !(0.0..h).contains(&y) {
                continue;
            }
            let (cx, cy) = cell_of(x, y);
            let mut ok = true;
            'scan: for ny in cy.saturating_sub(2)..(cy + 3).min(gh) {
                for nx in cx.saturating_sub(2)..(cx + 3).min(gw) {
                    if let Some(q) = grid[ny * gw + nx] {
                        let (qx, qy) = points[q];
                        if (qx - x).powi(2) + (qy - y).powi(2) < r2 {
                            ok = false;
                            break 'scan;
                        }
                    }
                }
            }
            if ok {
                grid[cy * gw + cx] = Some(points.len());
                active.push(points.len());
                points.push((x, y));
                placed = true;
                break;
            }
        }
        if !placed {
            active.swap_remove(slot);
        }
    }
    points
}
