//! Acquisition-time perturbations applied directly to k-space.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};
use crate::mri::{KSpaceTensor, UndersamplingMask};
use crate::numerics::C64;

/// RMS magnitude of the acquired entries over all coils.
///
/// Noise levels are relative to this scale so the same `σ` induces the same
/// relative SNR change on every scan.
pub fn noise_scale(y: &KSpaceTensor, mask: &UndersamplingMask) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for c in 0..y.coils() {
        for (z, &b) in y.coil(c).iter().zip(mask.bits()) {
            if b {
                sum += z.norm_sqr();
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

/// `g_N(y) = y + Ω ⊙ η` with `E|η|² = (σ · noise_scale)²`.
pub fn apply_noise<R: Rng + ?Sized>(
    y: &KSpaceTensor,
    mask: &UndersamplingMask,
    sigma: f64,
    rng: &mut R,
) -> Result<KSpaceTensor> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(invalid!("noise sigma must be >= 0, got {}", sigma));
    }
    if mask.dims() != y.dims() {
        return Err(invalid!("mask {:?} does not match k-space {:?}", mask.dims(), y.dims()));
    }
    let mut out = y.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let std = sigma * noise_scale(y, mask) / std::f64::consts::SQRT_2;
    for c in 0..y.coils() {
        for (z, &b) in out.coil_mut(c).iter_mut().zip(mask.bits()) {
            if b {
                let re: f64 = StandardNormal.sample(rng);
                let im: f64 = StandardNormal.sample(rng);
                *z += C64::new(std * re, std * im);
            }
        }
    }
    Ok(out)
}

/// The two per-example motion draws `m_o, m_e ∈ U(−1, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionDraw {
    pub m_odd: f64,
    pub m_even: f64,
}

impl MotionDraw {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            m_odd: rng.random_range(-1.0..1.0),
            m_even: rng.random_range(-1.0..1.0),
        }
    }
}

/// `g_M(y) = y · e^{−jφ}` with a fresh [`MotionDraw`].
pub fn apply_motion<R: Rng + ?Sized>(y: &KSpaceTensor, alpha: f64, rng: &mut R) -> Result<KSpaceTensor> {
    apply_motion_with(y, alpha, MotionDraw::sample(rng))
}

/// Rows with odd index get phase `πα·m_o`, even rows `πα·m_e`, in every coil.
pub fn apply_motion_with(y: &KSpaceTensor, alpha: f64, draw: MotionDraw) -> Result<KSpaceTensor> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(invalid!("motion alpha must be >= 0, got {}", alpha));
    }
    let mut out = y.clone();
    if alpha == 0.0 {
        return Ok(out);
    }
    let pi = std::f64::consts::PI;
    let odd = C64::from_polar(1.0, -pi * alpha * draw.m_odd);
    let even = C64::from_polar(1.0, -pi * alpha * draw.m_even);
    let (_, w) = y.dims();
    for c in 0..y.coils() {
        for (r, row) in out.coil_mut(c).chunks_exact_mut(w).enumerate() {
            let phase = if r % 2 == 1 { odd } else { even };
            for z in row {
                *z = rotate(*z, phase);
            }
        }
    }
    Ok(out)
}

const MAX_NUDGES: usize = 64;

/// `z · u` for unit `u`, nudged by at most a few ulps so `|result| == |z|` bitwise.
fn rotate(z: C64, u: C64) -> C64 {
    let target = z.norm();
    let mut out = z * u;
    if target == 0.0 || out.norm() == target {
        return out;
    }
    out *= target / out.norm();
    if out.norm() == target {
        return out;
    }
    // Step the larger component one ulp toward the target modulus; when that
    // would cross the target, step the smaller one, which moves the modulus
    // in finer increments.
    for _ in 0..MAX_NUDGES {
        let m = out.norm();
        if m == target {
            break;
        }
        let grow = m < target;
        let big_re = out.re.abs() >= out.im.abs();
        let mut next = out;
        if big_re {
            next.re = step_magnitude(out.re, grow);
        } else {
            next.im = step_magnitude(out.im, grow);
        }
        let n = next.norm();
        if n != target && (n < target) != grow {
            next = out;
            if big_re {
                next.im = step_magnitude(out.im, grow);
            } else {
                next.re = step_magnitude(out.re, grow);
            }
        }
        out = next;
    }
    out
}

fn step_magnitude(v: f64, grow: bool) -> f64 {
    let bits = v.abs().to_bits();
    let mag = f64::from_bits(if grow { bits + 1 } else { bits.saturating_sub(1) });
    mag.copysign(v)
}
