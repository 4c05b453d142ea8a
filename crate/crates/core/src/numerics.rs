//! Complex tensor storage and centered, orthonormal 2D Fourier transforms.
//!
//! The transform pair places the zero frequency at index `(H/2, W/2)` (integer
//! division) and scales by `1/sqrt(H*W)`, so `fft2c` is unitary for any size.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::error::{invalid, Result};

pub type C64 = Complex<f64>;

/// Dense row-major complex tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor {
    shape: Vec<usize>,
    data: Vec<C64>,
}

impl ComplexTensor {
    pub fn new(shape: Vec<usize>, data: Vec<C64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(invalid!(
                "shape {:?} needs {} values, got {}",
                shape,
                len,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![C64::new(0.0, 0.0); len],
        }
    }

    /// Builds an `h x w` image from a function of `(row, col)`.
    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                data.push(f(r, c));
            }
        }
        Self {
            shape: vec![h, w],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<C64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a 2D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [h, w] => Ok((*h, *w)),
            s => Err(invalid!("expected a 2D tensor, got shape {:?}", s)),
        }
    }

    pub fn get2(&self, r: usize, c: usize) -> C64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn scaled(&self, s: C64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|z| z * s).collect(),
        }
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.norm()).collect()
    }
}

/// Standard inner product `<a, b> = sum conj(a_i) b_i`.
pub fn inner(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub fn norm(a: &[C64]) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Centered orthonormal forward 2D DFT of an `H x W` image.
pub fn fft2c(img: &ComplexTensor) -> Result<ComplexTensor> {
    transform(img, FftDirection::Forward)
}

/// Inverse of [`fft2c`].
pub fn ifft2c(ksp: &ComplexTensor) -> Result<ComplexTensor> {
    transform(ksp, FftDirection::Inverse)
}

fn transform(t: &ComplexTensor, direction: FftDirection) -> Result<ComplexTensor> {
    let (h, w) = t.dims2()?;
    if h == 0 || w == 0 {
        return Err(invalid!("cannot transform an empty {}x{} tensor", h, w));
    }
    let mut out = t.clone();
    fft2c_plane(h, w, &mut out.data, direction);
    Ok(out)
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, direction: FftDirection) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft(n, direction))
}

/// In-place centered orthonormal 2D transform of one row-major plane.
///
/// Used directly by the multi-coil operators, which hold `C` planes in one buffer.
pub fn fft2c_plane(h: usize, w: usize, plane: &mut [C64], direction: FftDirection) {
    debug_assert_eq!(plane.len(), h * w);
    // ifftshift moves the center sample to index 0; fftshift moves DC back to the center.
    roll2(h, w, plane, h / 2, w / 2);

    let row_fft = plan(w, direction);
    let mut scratch = vec![C64::default(); row_fft.get_inplace_scratch_len()];
    for row in plane.chunks_exact_mut(w) {
        row_fft.process_with_scratch(row, &mut scratch);
    }

    let col_fft = plan(h, direction);
    scratch.resize(col_fft.get_inplace_scratch_len(), C64::default());
    let mut column = vec![C64::default(); h];
    for c in 0..w {
        for r in 0..h {
            column[r] = plane[r * w + c];
        }
        col_fft.process_with_scratch(&mut column, &mut scratch);
        for r in 0..h {
            plane[r * w + c] = column[r];
        }
    }

    roll2(h, w, plane, h - h / 2, w - w / 2);

    let scale = 1.0 / ((h * w) as f64).sqrt();
    for z in plane.iter_mut() {
        *z *= scale;
    }
}

/// `out[r][c] = in[(r + dr) % h][(c + dc) % w]`.
fn roll2(h: usize, w: usize, plane: &mut [C64], dr: usize, dc: usize) {
    if dr % h == 0 && dc % w == 0 {
        return;
    }
    let src = plane.to_vec();
    for r in 0..h {
        let sr = (r + dr) % h;
        for c in 0..w {
            plane[r * w + c] = src[sr * w + (c + dc) % w];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct centered DFT sum, independent of the FFT path.
    fn dft_oracle(x: &ComplexTensor, inverse: bool) -> ComplexTensor {
        let (h, w) = x.dims2().unwrap();
        let sign = if inverse { 1.0 } else { -1.0 };
        let (ch, cw) = ((h / 2) as f64, (w / 2) as f64);
        let scale = 1.0 / ((h * w) as f64).sqrt();
        ComplexTensor::from_fn(h, w, |kr, kc| {
            let mut acc = C64::new(0.0, 0.0);
            for r in 0..h {
                for c in 0..w {
                    let phase = sign
                        * 2.0
                        * std::f64::consts::PI
                        * ((kr as f64 - ch) * (r as f64 - ch) / h as f64
                            + (kc as f64 - cw) * (c as f64 - cw) / w as f64);
                    acc += x.get2(r, c) * C64::from_polar(1.0, phase);
                }
            }
            acc * scale
        })
    }

    fn random(h: usize, w: usize, seed: u64) -> ComplexTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ComplexTensor::from_fn(h, w, |_, _| {
            C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
    }

    fn max_diff(a: &ComplexTensor, b: &ComplexTensor) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).norm())
            .fold(0.0, f64::max)
    }

    #[test]
    fn single_point_is_identity() {
        let x = ComplexTensor::new(vec![1, 1], vec![C64::new(0.3, -2.0)]).unwrap();
        assert_eq!(fft2c(&x).unwrap(), x);
        assert_eq!(ifft2c(&x).unwrap(), x);
    }

    #[test]
    fn centered_delta_gives_constant() {
        let x = ComplexTensor::from_fn(4, 4, |r, c| {
            if (r, c) == (2, 2) {
                C64::new(1.0, 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        });
        let k = fft2c(&x).unwrap();
        for z in k.data() {
            assert!((z - C64::new(0.25, 0.0)).norm() < 1e-15);
        }
        let back = ifft2c(&k).unwrap();
        assert!(max_diff(&back, &x) < 1e-15);
    }

    #[test]
    fn matches_oracle_all_small_shapes() {
        for h in 1..=8 {
            for w in 1..=8 {
                let x = random(h, w, (h * 10 + w) as u64);
                let k = fft2c(&x).unwrap();
                assert!(max_diff(&k, &dft_oracle(&x, false)) < 1e-9, "{}x{}", h, w);
                let xi = ifft2c(&x).unwrap();
                assert!(max_diff(&xi, &dft_oracle(&x, true)) < 1e-9, "{}x{}", h, w);
            }
        }
    }

    #[test]
    fn parseval_and_roundtrip() {
        let x = random(8, 8, 1);
        let k = fft2c(&x).unwrap();
        assert!((k.norm() - x.norm()).abs() / x.norm() < 1e-12);

        let x = random(16, 16, 2);
        let back = ifft2c(&fft2c(&x).unwrap()).unwrap();
        assert!(max_diff(&back, &x) / x.norm() < 1e-10);
    }

    #[test]
    fn odd_sizes_roundtrip() {
        let x = random(7, 5, 3);
        let back = ifft2c(&fft2c(&x).unwrap()).unwrap();
        assert!(max_diff(&back, &x) < 1e-12);
    }

    #[test]
    fn empty_rejected() {
        let x = ComplexTensor::zeros(vec![0, 4]);
        assert!(fft2c(&x).is_err());
        assert!(ifft2c(&x).is_err());
        assert!(fft2c(&ComplexTensor::zeros(vec![2, 2, 2])).is_err());
    }

    #[test]
    fn shape_length_checked() {
        assert!(ComplexTensor::new(vec![2, 3], vec![C64::default(); 5]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn unitary_inner_product(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
                let a = random(h, w, seed);
                let b = random(h, w, seed ^ 0xabcdef);
                let lhs = inner(fft2c(&a).unwrap().data(), fft2c(&b).unwrap().data());
                let rhs = inner(a.data(), b.data());
                prop_assert!((lhs - rhs).norm() <= 1e-10 * a.norm() * b.norm());
            }

            #[test]
            fn linear(h in 1usize..10, w in 1usize..10, seed in any::<u64>(), re in -2.0f64..2.0, im in -2.0f64..2.0) {
                let a = random(h, w, seed);
                let b = random(h, w, seed.wrapping_add(1));
                let alpha = C64::new(re, im);
                let combo = ComplexTensor::new(
                    vec![h, w],
                    a.data().iter().zip(b.data()).map(|(x, y)| alpha * x + y).collect(),
                ).unwrap();
                let lhs = fft2c(&combo).unwrap();
                let fa = fft2c(&a).unwrap();
                let fb = fft2c(&b).unwrap();
                for i in 0..lhs.len() {
                    let rhs = alpha * fa.data()[i] + fb.data()[i];
                    prop_assert!((lhs.data()[i] - rhs).norm() < 1e-10);
                }
            }
        }
    }
}
