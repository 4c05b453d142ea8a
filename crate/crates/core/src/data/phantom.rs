//! Synthetic ellipse phantoms and coil sensitivity profiles.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{invalid, Result};
use crate::mri::SensitivityMaps;
use crate::numerics::{ComplexTensor, C64};

pub const MIN_PHANTOM_SIZE: usize = 16;
const SUPPORT_DILATION: f64 = 2.0;

/// A random complex phantom and its dilated support.
///
/// The first ellipse is a large body outline; 4 to 11 smaller ellipses are
/// painted over it. Each pixel takes the amplitude of the last ellipse that
/// covers it, so magnitudes never exceed 1. A smooth bilinear phase field
/// multiplies the whole image.
pub fn generate_phantom<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    rng: &mut R,
) -> Result<(ComplexTensor, Vec<bool>)> {
    if height < MIN_PHANTOM_SIZE || width < MIN_PHANTOM_SIZE {
        return Err(invalid!(
            "phantom needs H, W >= {MIN_PHANTOM_SIZE}, got {height}x{width}"
        ));
    }
    let count = rng.random_range(5..=12);
    let mut ellipses = Vec::with_capacity(count);
    ellipses.push(Ellipse {
        cy: rng.random_range(-0.05..0.05),
        cx: rng.random_range(-0.05..0.05),
        ry: rng.random_range(0.55..0.85),
        rx: rng.random_range(0.55..0.85),
        angle: rng.random_range(0.0..PI),
        amplitude: rng.random_range(0.3..0.6),
    });
    for _ in 1..count {
        ellipses.push(Ellipse {
            cy: rng.random_range(-0.45..0.45),
            cx: rng.random_range(-0.45..0.45),
            ry: rng.random_range(0.06..0.3),
            rx: rng.random_range(0.06..0.3),
            angle: rng.random_range(0.0..PI),
            amplitude: rng.random_range(0.1..1.0),
        });
    }
    let phase: [f64; 4] = [
        rng.random_range(-PI..PI),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-0.5..0.5),
    ];

    let coord = |i: usize, n: usize| 2.0 * (i as f64 + 0.5) / n as f64 - 1.0;
    let mut inside = vec![false; height * width];
    let image = ComplexTensor::from_fn(height, width, |r, c| {
        let (v, u) = (coord(r, height), coord(c, width));
        let mut amp = 0.0;
        for e in &ellipses {
            if e.contains(v, u) {
                amp = e.amplitude;
                inside[r * width + c] = true;
            }
        }
        let phi = phase[0] + phase[1] * u + phase[2] * v + phase[3] * u * v;
        C64::from_polar(amp, phi)
    });
    Ok((image, dilate(&inside, height, width, SUPPORT_DILATION)))
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    amplitude: f64,
}

impl Ellipse {
    fn contains(&self, v: f64, u: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (v - self.cy, u - self.cx);
        let a = c * dx + s * dy;
        let b = -s * dx + c * dy;
        (a / self.rx).powi(2) + (b / self.ry).powi(2) <= 1.0
    }
}

/// Euclidean dilation of a binary image by `radius` pixels.
pub fn dilate(bits: &[bool], height: usize, width: usize, radius: f64) -> Vec<bool> {
    let reach = radius.floor() as isize;
    let mut out = vec![false; bits.len()];
    for r in 0..height as isize {
        for c in 0..width as isize {
            if !bits[r as usize * width + c as usize] {
                continue;
            }
            for dr in -reach..=reach {
                for dc in -reach..=reach {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr < 0 || cc < 0 || rr >= height as isize || cc >= width as isize {
                        continue;
                    }
                    if ((dr * dr + dc * dc) as f64) <= radius * radius {
                        out[rr as usize * width + cc as usize] = true;
                    }
                }
            }
        }
    }
    out
}

/// Smooth coil profiles normalized to unit root-sum-of-squares at every pixel.
///
/// Coil `c` is a Gaussian lobe centred on the image border at angle
/// `2πc/C` (jittered), with a gentle linear phase ramp.
pub fn synthesize_maps<R: Rng + ?Sized>(
    coils: usize,
    height: usize,
    width: usize,
    rng: &mut R,
) -> Result<SensitivityMaps> {
    if coils == 0 || height == 0 || width == 0 {
        return Err(invalid!("coil maps need C, H, W >= 1"));
    }
    let n = height * width;
    let mut maps = vec![C64::new(0.0, 0.0); coils * n];
    let (hh, hw) = (height as f64 / 2.0, width as f64 / 2.0);
    let spread = 0.6 * height.max(width) as f64;
    for c in 0..coils {
        let theta = 2.0 * PI * c as f64 / coils as f64 + rng.random_range(-0.2..0.2);
        // Point where the ray at angle theta leaves the FOV rectangle.
        let (s, co) = theta.sin_cos();
        let t = (hh / s.abs().max(1e-12)).min(hw / co.abs().max(1e-12));
        let (py, px) = (hh + t * s, hw + t * co);
        let width_scale = spread * rng.random_range(0.8..1.2);
        let slope_y = rng.random_range(-0.08..0.08);
        let slope_x = rng.random_range(-0.08..0.08);
        let offset = rng.random_range(-PI..PI);
        for r in 0..height {
            for col in 0..width {
                let (y, x) = (r as f64 + 0.5, col as f64 + 0.5);
                let d2 = (y - py).powi(2) + (x - px).powi(2);
                let mag = (-d2 / (2.0 * width_scale * width_scale)).exp();
                let phi = offset + slope_y * (y - hh) + slope_x * (x - hw);
                maps[c * n + r * width + col] = C64::from_polar(mag, phi);
            }
        }
    }
    for p in 0..n {
        let rss = (0..coils).map(|c| maps[c * n + p].norm_sqr()).sum::<f64>().sqrt();
        for c in 0..coils {
            maps[c * n + p] /= rss;
        }
    }
    SensitivityMaps::new(coils, height, width, maps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::keyed;

    #[test]
    fn phantom_is_deterministic_and_bounded() {
        let (a, sa) = generate_phantom(32, 32, &mut keyed(&[1])).unwrap();
        let (b, sb) = generate_phantom(32, 32, &mut keyed(&[1])).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert!(a.magnitude().iter().all(|&m| m <= 1.0 + 1e-12));
        assert!(generate_phantom(8, 32, &mut keyed(&[1])).is_err());
    }

    #[test]
    fn support_fraction_over_seeds() {
        for seed in 0..100 {
            let (_, support) = generate_phantom(32, 32, &mut keyed(&[seed, 7])).unwrap();
            let frac = support.iter().filter(|&&b| b).count() as f64 / support.len() as f64;
            assert!((0.1..=0.9).contains(&frac), "seed {seed}: {frac}");
        }
    }

    #[test]
    fn support_contains_object() {
        let (x, support) = generate_phantom(24, 40, &mut keyed(&[3])).unwrap();
        for (v, s) in x.data().iter().zip(&support) {
            if v.norm() > 0.0 {
                assert!(*s);
            }
        }
    }

    #[test]
    fn dilation_radius_two() {
        let mut bits = vec![false; 49];
        bits[24] = true;
        let d = dilate(&bits, 7, 7, 2.0);
        // Disk of radius 2 on the integer grid: 13 pixels.
        assert_eq!(d.iter().filter(|&&b| b).count(), 13);
    }

    #[test]
    fn single_coil_has_unit_magnitude() {
        let m = synthesize_maps(1, 16, 16, &mut keyed(&[2])).unwrap();
        for v in m.data() {
            assert!((v.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn maps_have_unit_rss_and_are_smooth() {
        for seed in 0..100 {
            let m = synthesize_maps(4, 32, 32, &mut keyed(&[seed, 9])).unwrap();
            for v in m.sum_of_squares() {
                assert!((v.sqrt() - 1.0).abs() <= 1e-9);
            }
            let (h, w) = m.dims();
            for c in 0..4 {
                let s = m.coil(c);
                for r in 0..h {
                    for col in 0..w {
                        let v = s[r * w + col];
                        let gy = if r + 1 < h { (s[(r + 1) * w + col] - v).norm() } else { 0.0 };
                        let gx = if col + 1 < w { (s[r * w + col + 1] - v).norm() } else { 0.0 };
                        assert!((gy * gy + gx * gx).sqrt() < 0.5);
                    }
                }
            }
        }
    }
}
