//! Complex PSNR and magnitude SSIM.

use crate::error::{invalid, Result};
use crate::numerics::C64;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// `20 log10(max|ref| / ||pred - ref||_2)`; `+inf` when the error is zero.
pub fn cpsnr(pred: &[C64], reference: &[C64]) -> Result<f64> {
    if pred.len() != reference.len() {
        return Err(invalid!(
            "cPSNR inputs differ in length: {} vs {}",
            pred.len(),
            reference.len()
        ));
    }
    let peak = reference.iter().map(|v| v.norm()).fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Err(invalid!("cPSNR reference is identically zero"));
    }
    let err = pred
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).norm_sqr())
        .sum::<f64>()
        .sqrt();
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (peak / err).log10())
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of one `h x w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = g.iter().zip(&src[r * w + c..r * w + c + k]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = g.iter().enumerate().map(|(i, a)| a * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Mean local SSIM over a stack of `slices` magnitude images of size `h x w`.
///
/// Local statistics use an 11-tap Gaussian window (sigma 1.5) at every
/// position where it fits inside the slice; the dynamic range is the maximum
/// of the reference stack.
pub fn ssim_stack(pred: &[f64], reference: &[f64], slices: usize, h: usize, w: usize) -> Result<f64> {
    let n = slices * h * w;
    if pred.len() != n || reference.len() != n {
        return Err(invalid!("SSIM inputs must both hold {slices}x{h}x{w} values"));
    }
    if slices == 0 || h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(invalid!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        ));
    }
    let range = reference.iter().copied().fold(0.0, f64::max);
    if !(range > 0.0) {
        return Err(invalid!("SSIM reference is identically zero"));
    }
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let g = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for s in 0..slices {
        let x = &pred[s * plane..(s + 1) * plane];
        let y = &reference[s * plane..(s + 1) * plane];
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
        let mx = filter_valid(x, h, w, &g);
        let my = filter_valid(y, h, w, &g);
        let sxx = filter_valid(&xx, h, w, &g);
        let syy = filter_valid(&yy, h, w, &g);
        let sxy = filter_valid(&xy, h, w, &g);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// SSIM of two `h x w` magnitude images.
pub fn ssim(pred: &[f64], reference: &[f64], h: usize, w: usize) -> Result<f64> {
    ssim_stack(pred, reference, 1, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::keyed;
    use proptest::prelude::*;
    use rand::Rng;

    /// Direct 2-D windowed sums at every valid position.
    fn ssim_oracle(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
        let k = SSIM_WINDOW;
        let c = (k as f64 - 1.0) / 2.0;
        let mut win = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
                win[i * k + j] = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            }
        }
        let s: f64 = win.iter().sum();
        win.iter_mut().for_each(|v| *v /= s);
        let l = y.iter().copied().fold(0.0, f64::max);
        let (c1, c2) = ((0.01 * l).powi(2), (0.03 * l).powi(2));
        let mut acc = 0.0;
        let mut n = 0;
        for r in 0..=h - k {
            for cc in 0..=w - k {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let p = (r + i) * w + cc + j;
                        mx += win[i * k + j] * x[p];
                        my += win[i * k + j] * y[p];
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let p = (r + i) * w + cc + j;
                        let wt = win[i * k + j];
                        vx += wt * (x[p] - mx).powi(2);
                        vy += wt * (y[p] - my).powi(2);
                        cov += wt * (x[p] - mx) * (y[p] - my);
                    }
                }
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                n += 1;
            }
        }
        acc / n as f64
    }

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = keyed(&[seed, 3]);
        (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
    }

    #[test]
    fn ssim_matches_oracle() {
        for seed in 0..5 {
            let x = random(256, seed);
            let y = random(256, seed + 100);
            let a = ssim(&x, &y, 16, 16).unwrap();
            let b = ssim_oracle(&x, &y, 16, 16);
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
        let x = random(13 * 20, 8);
        let y = random(13 * 20, 9);
        assert!((ssim(&x, &y, 13, 20).unwrap() - ssim_oracle(&x, &y, 13, 20)).abs() < 1e-8);
    }

    #[test]
    fn ssim_identity_and_zero_prediction() {
        let y = random(256, 1);
        assert_eq!(ssim(&y, &y, 16, 16).unwrap(), 1.0);
        let s = ssim(&vec![0.0; 256], &y, 16, 16).unwrap();
        assert!(s > 0.0 && s < 0.99, "{s}");
    }

    #[test]
    fn ssim_rejects_small_images() {
        assert!(ssim(&[0.0; 100], &[1.0; 100], 10, 10).is_err());
        assert!(ssim(&[0.0; 256], &[0.0; 256], 16, 16).is_err());
    }

    #[test]
    fn stack_is_mean_of_slices_with_shared_range() {
        let x = random(512, 4);
        let mut y = random(512, 5);
        y[0] = 1.0;
        y[256] = 1.0;
        let s = ssim_stack(&x, &y, 2, 16, 16).unwrap();
        let mean = 0.5 * (ssim(&x[..256], &y[..256], 16, 16).unwrap() + ssim(&x[256..], &y[256..], 16, 16).unwrap());
        assert!((s - mean).abs() < 1e-12);
    }

    #[test]
    fn cpsnr_hand_cases() {
        let reference = vec![C64::new(2.0, 0.0), C64::new(0.0, 0.0)];
        assert_eq!(cpsnr(&reference, &reference).unwrap(), f64::INFINITY);
        // ||err|| = 2 = max|ref|.
        let pred = vec![C64::new(2.0, 0.0), C64::new(0.0, 2.0)];
        assert!(cpsnr(&pred, &reference).unwrap().abs() < 1e-15);
        let doubled = vec![C64::new(2.0, 0.0), C64::new(0.0, 4.0)];
        let drop = cpsnr(&pred, &reference).unwrap() - cpsnr(&doubled, &reference).unwrap();
        assert!((drop - 20.0 * 2f64.log10()).abs() < 1e-12);
        assert!((drop - 6.0206).abs() < 1e-4);
        assert!(cpsnr(&pred, &[C64::new(0.0, 0.0); 2]).is_err());
        assert!(cpsnr(&pred, &reference[..1]).is_err());
    }

    proptest! {
        #[test]
        fn cpsnr_invariant_to_global_phase(theta in -3.2f64..3.2, seed in 0u64..1000) {
            let mut rng = keyed(&[seed]);
            let r: Vec<C64> = (0..16).map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
            let p: Vec<C64> = r.iter().map(|v| v + C64::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1))).collect();
            let rot = C64::from_polar(1.0, theta);
            let a = cpsnr(&p, &r).unwrap();
            let pr: Vec<C64> = p.iter().map(|v| v * rot).collect();
            let rr: Vec<C64> = r.iter().map(|v| v * rot).collect();
            let b = cpsnr(&pr, &rr).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn ssim_bounded(seed in 0u64..500) {
            let x = random(256, seed);
            let y = random(256, seed + 7);
            let s = ssim(&x, &y, 16, 16).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }
}
