//! Multi-coil SENSE forward model `A = ΩFS`, its adjoint and undersampling masks.

mod mask;

pub use mask::{make_poisson_disc_mask, scan_mask_seed};

use rustfft::FftDirection;

use crate::error::{invalid, Result};
use crate::numerics::{fft2c_plane, ComplexTensor, C64};

/// Upper tolerance on the per-pixel sum of squared coil magnitudes.
pub const RSS_MAX: f64 = 1.0 + 1e-6;
/// Lower bound on the per-pixel sum of squares inside the object support.
pub const RSS_SUPPORT_MIN: f64 = 0.99;

/// Per-coil complex sensitivity profiles, stored coil-major (`C x H x W`).
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityMaps {
    coils: usize,
    height: usize,
    width: usize,
    maps: Vec<C64>,
}

impl SensitivityMaps {
    pub fn new(coils: usize, height: usize, width: usize, maps: Vec<C64>) -> Result<Self> {
        if coils == 0 || height == 0 || width == 0 {
            return Err(invalid!("sensitivity maps need C, H, W >= 1"));
        }
        if maps.len() != coils * height * width {
            return Err(invalid!(
                "expected {} map values, got {}",
                coils * height * width,
                maps.len()
            ));
        }
        let out = Self {
            coils,
            height,
            width,
            maps,
        };
        if let Some((p, v)) = out
            .sum_of_squares()
            .into_iter()
            .enumerate()
            .find(|(_, v)| !(*v <= RSS_MAX))
        {
            return Err(invalid!("sum of squares {} at pixel {} exceeds 1", v, p));
        }
        Ok(out)
    }

    /// Maps equal to one everywhere for a single coil.
    pub fn unit(height: usize, width: usize) -> Self {
        Self {
            coils: 1,
            height,
            width,
            maps: vec![C64::new(1.0, 0.0); height * width],
        }
    }

    pub fn coils(&self) -> usize {
        self.coils
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn coil(&self, c: usize) -> &[C64] {
        let n = self.height * self.width;
        &self.maps[c * n..(c + 1) * n]
    }

    pub fn data(&self) -> &[C64] {
        &self.maps
    }

    /// `sum_c |S_c(p)|^2` for every pixel.
    pub fn sum_of_squares(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let mut out = vec![0.0; n];
        for c in 0..self.coils {
            for (o, s) in out.iter_mut().zip(self.coil(c)) {
                *o += s.norm_sqr();
            }
        }
        out
    }

    /// Checks the lower sum-of-squares bound on an object support.
    pub fn check_support(&self, support: &[bool]) -> Result<()> {
        if support.len() != self.height * self.width {
            return Err(invalid!("support size does not match maps"));
        }
        for (p, (&inside, v)) in support.iter().zip(self.sum_of_squares()).enumerate() {
            if inside && v < RSS_SUPPORT_MIN {
                return Err(invalid!("sum of squares {} < 0.99 at support pixel {}", v, p));
            }
        }
        Ok(())
    }
}

/// Binary sampling pattern with a fully sampled calibration block.
#[derive(Clone, Debug, PartialEq)]
pub struct UndersamplingMask {
    height: usize,
    width: usize,
    acceleration: f64,
    calibration: (usize, usize),
    seed: u64,
    bits: Vec<bool>,
}

impl UndersamplingMask {
    pub fn from_bits(
        height: usize,
        width: usize,
        acceleration: f64,
        calibration: (usize, usize),
        seed: u64,
        bits: Vec<bool>,
    ) -> Result<Self> {
        if bits.len() != height * width {
            return Err(invalid!("mask needs {} bits, got {}", height * width, bits.len()));
        }
        if calibration.0 > height || calibration.1 > width {
            return Err(invalid!("calibration block larger than the grid"));
        }
        let mask = Self {
            height,
            width,
            acceleration,
            calibration,
            seed,
            bits,
        };
        if !mask.calibration_indices().all(|i| mask.bits[i]) {
            return Err(invalid!("calibration block is not fully sampled"));
        }
        Ok(mask)
    }

    /// Fully sampled grid (`R = 1`).
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            acceleration: 1.0,
            calibration: (height, width),
            seed: 0,
            bits: vec![true; height * width],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn acceleration(&self) -> f64 {
        self.acceleration
    }

    pub fn calibration(&self) -> (usize, usize) {
        self.calibration
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_full(&self) -> bool {
        self.bits.iter().all(|b| *b)
    }

    /// Row-major indices of the centered calibration block.
    pub fn calibration_indices(&self) -> impl Iterator<Item = usize> + '_ {
        let (r0, c0) = calibration_origin(self.dims(), self.calibration);
        let (ch, cw) = self.calibration;
        (r0..r0 + ch).flat_map(move |r| (c0..c0 + cw).map(move |c| r * self.width + c))
    }

    /// Same mask with its bits replaced (used by grid-exact spatial transforms).
    pub(crate) fn with_bits(&self, bits: Vec<bool>) -> Self {
        Self {
            bits,
            ..self.clone()
        }
    }

    pub fn apply(&self, k: &mut KSpaceTensor) {
        let n = self.height * self.width;
        for plane in k.data.chunks_exact_mut(n) {
            for (z, &b) in plane.iter_mut().zip(&self.bits) {
                if !b {
                    *z = C64::new(0.0, 0.0);
                }
            }
        }
    }
}

/// Top-left corner of a `(h, w)` block centered on `(H/2, W/2)`.
pub(crate) fn calibration_origin(dims: (usize, usize), cal: (usize, usize)) -> (usize, usize) {
    (dims.0 / 2 - cal.0 / 2, dims.1 / 2 - cal.1 / 2)
}

/// Multi-coil k-space data, coil-major (`C x H x W`).
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceTensor {
    coils: usize,
    height: usize,
    width: usize,
    data: Vec<C64>,
}

impl KSpaceTensor {
    pub fn new(coils: usize, height: usize, width: usize, data: Vec<C64>) -> Result<Self> {
        if data.len() != coils * height * width {
            return Err(invalid!(
                "expected {} k-space values, got {}",
                coils * height * width,
                data.len()
            ));
        }
        Ok(Self {
            coils,
            height,
            width,
            data,
        })
    }

    pub fn zeros(coils: usize, height: usize, width: usize) -> Self {
        Self {
            coils,
            height,
            width,
            data: vec![C64::new(0.0, 0.0); coils * height * width],
        }
    }

    pub fn coils(&self) -> usize {
        self.coils
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn coil(&self, c: usize) -> &[C64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn coil_mut(&mut self, c: usize) -> &mut [C64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Coil `c` as an `H x W` tensor.
    pub fn coil_tensor(&self, c: usize) -> ComplexTensor {
        ComplexTensor::new(vec![self.height, self.width], self.coil(c).to_vec())
            .expect("coil plane has H*W values")
    }

    pub fn norm(&self) -> f64 {
        crate::numerics::norm(&self.data)
    }
}

/// `A = ΩFS` for one slice geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOperator {
    maps: SensitivityMaps,
    mask: UndersamplingMask,
}

impl ForwardOperator {
    pub fn new(maps: SensitivityMaps, mask: UndersamplingMask) -> Result<Self> {
        if maps.dims() != mask.dims() {
            return Err(invalid!(
                "maps are {:?} but mask is {:?}",
                maps.dims(),
                mask.dims()
            ));
        }
        Ok(Self { maps, mask })
    }

    pub fn maps(&self) -> &SensitivityMaps {
        &self.maps
    }

    pub fn mask(&self) -> &UndersamplingMask {
        &self.mask
    }

    pub fn dims(&self) -> (usize, usize) {
        self.maps.dims()
    }

    /// Same maps, fully sampled mask.
    pub fn fully_sampled(&self) -> Self {
        let (h, w) = self.dims();
        Self {
            maps: self.maps.clone(),
            mask: UndersamplingMask::full(h, w),
        }
    }

    pub fn with_mask(&self, mask: UndersamplingMask) -> Result<Self> {
        Self::new(self.maps.clone(), mask)
    }

    fn check_image(&self, x: &ComplexTensor) -> Result<()> {
        let dims = x.dims2()?;
        if dims != self.dims() {
            return Err(invalid!("image is {:?}, operator is {:?}", dims, self.dims()));
        }
        Ok(())
    }

    fn check_kspace(&self, y: &KSpaceTensor) -> Result<()> {
        if y.dims() != self.dims() || y.coils() != self.maps.coils() {
            return Err(invalid!(
                "k-space is {}x{:?}, operator is {}x{:?}",
                y.coils(),
                y.dims(),
                self.maps.coils(),
                self.dims()
            ));
        }
        Ok(())
    }

    /// `y_c = Ω ⊙ fft2c(S_c ⊙ x)`.
    pub fn forward(&self, x: &ComplexTensor) -> Result<KSpaceTensor> {
        self.check_image(x)?;
        let (h, w) = self.dims();
        let coils = self.maps.coils();
        let mut out = KSpaceTensor::zeros(coils, h, w);
        for c in 0..coils {
            let plane = out.coil_mut(c);
            for ((o, s), v) in plane.iter_mut().zip(self.maps.coil(c)).zip(x.data()) {
                *o = s * v;
            }
            fft2c_plane(h, w, plane, FftDirection::Forward);
        }
        self.mask.apply(&mut out);
        Ok(out)
    }

    /// `x = Σ_c conj(S_c) ⊙ ifft2c(Ω ⊙ y_c)`.
    pub fn adjoint(&self, y: &KSpaceTensor) -> Result<ComplexTensor> {
        self.check_kspace(y)?;
        let (h, w) = self.dims();
        let mut out = ComplexTensor::zeros(vec![h, w]);
        let mut plane = vec![C64::new(0.0, 0.0); h * w];
        for c in 0..self.maps.coils() {
            for ((p, v), &b) in plane.iter_mut().zip(y.coil(c)).zip(self.mask.bits()) {
                *p = if b { *v } else { C64::new(0.0, 0.0) };
            }
            fft2c_plane(h, w, &mut plane, FftDirection::Inverse);
            for ((o, s), p) in out.data_mut().iter_mut().zip(self.maps.coil(c)).zip(&plane) {
                *o += s.conj() * p;
            }
        }
        Ok(out)
    }

    /// Zero-filled reconstruction; the network input.
    pub fn zero_filled(&self, y: &KSpaceTensor) -> Result<ComplexTensor> {
        self.adjoint(y)
    }

    /// Per-coil images `ifft2c(y_c)` without coil combination.
    pub fn coil_images(&self, y: &KSpaceTensor) -> Result<KSpaceTensor> {
        self.check_kspace(y)?;
        let (h, w) = self.dims();
        let mut out = y.clone();
        for c in 0..y.coils() {
            fft2c_plane(h, w, out.coil_mut(c), FftDirection::Inverse);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{fft2c, ifft2c, inner};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn crandn(rng: &mut ChaCha8Rng) -> C64 {
        C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    }

    fn random_op(rng: &mut ChaCha8Rng, coils: usize, h: usize, w: usize) -> ForwardOperator {
        let mut raw: Vec<C64> = (0..coils * h * w).map(|_| crandn(rng)).collect();
        let n = h * w;
        for p in 0..n {
            let ss: f64 = (0..coils).map(|c| raw[c * n + p].norm_sqr()).sum();
            for c in 0..coils {
                raw[c * n + p] /= ss.sqrt();
            }
        }
        let maps = SensitivityMaps::new(coils, h, w, raw).unwrap();
        let mut bits: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        bits[(h / 2) * w + w / 2] = true;
        let mask = UndersamplingMask::from_bits(h, w, 2.5, (1, 1), 0, bits).unwrap();
        ForwardOperator::new(maps, mask).unwrap()
    }

    #[test]
    fn delta_through_trivial_operator() {
        let op = ForwardOperator::new(SensitivityMaps::unit(4, 4), UndersamplingMask::full(4, 4))
            .unwrap();
        let x = ComplexTensor::from_fn(4, 4, |r, c| C64::new(((r, c) == (2, 2)) as u8 as f64, 0.0));
        let y = op.forward(&x).unwrap();
        for z in y.data() {
            assert!((z - C64::new(0.25, 0.0)).norm() < 1e-15);
        }
        let zero = op.forward(&ComplexTensor::zeros(vec![4, 4])).unwrap();
        assert!(zero.data().iter().all(|z| *z == C64::new(0.0, 0.0)));
    }

    #[test]
    fn trivial_adjoint_is_ifft() {
        let op = ForwardOperator::new(SensitivityMaps::unit(6, 5), UndersamplingMask::full(6, 5))
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = KSpaceTensor::new(1, 6, 5, (0..30).map(|_| crandn(&mut rng)).collect()).unwrap();
        let a = op.adjoint(&y).unwrap();
        let b = ifft2c(&y.coil_tensor(0)).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).norm() < 1e-14);
        }
        let zero = op.adjoint(&KSpaceTensor::zeros(1, 6, 5)).unwrap();
        assert!(zero.data().iter().all(|z| *z == C64::new(0.0, 0.0)));
    }

    #[test]
    fn adjoint_identity_random_probes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let op = random_op(&mut rng, 2, 8, 8);
            let x = ComplexTensor::from_fn(8, 8, |_, _| crandn(&mut rng));
            let y = KSpaceTensor::new(2, 8, 8, (0..128).map(|_| crandn(&mut rng)).collect())
                .unwrap();
            let ax = op.forward(&x).unwrap();
            let lhs = inner(ax.data(), y.data());
            let rhs = inner(x.data(), op.adjoint(&y).unwrap().data());
            let rel = (lhs - rhs).norm() / (ax.norm() * y.norm());
            assert!(rel < 1e-10, "relative adjoint error {}", rel);
        }
    }

    #[test]
    fn calibration_only_mask_confines_output() {
        let (h, w) = (8, 8);
        let mut bits = vec![false; h * w];
        for r in 3..5 {
            for c in 3..5 {
                bits[r * w + c] = true;
            }
        }
        let mask = UndersamplingMask::from_bits(h, w, 16.0, (2, 2), 0, bits.clone()).unwrap();
        let op = ForwardOperator::new(SensitivityMaps::unit(h, w), mask).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = ComplexTensor::from_fn(h, w, |_, _| crandn(&mut rng));
        let y = op.forward(&x).unwrap();
        for (z, b) in y.data().iter().zip(&bits) {
            if !b {
                assert_eq!(*z, C64::new(0.0, 0.0));
            }
        }
        // Masking is idempotent.
        let mut again = y.clone();
        op.mask().apply(&mut again);
        assert_eq!(again, y);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let op = ForwardOperator::new(SensitivityMaps::unit(4, 4), UndersamplingMask::full(4, 4))
            .unwrap();
        assert!(op.forward(&ComplexTensor::zeros(vec![4, 5])).is_err());
        assert!(op.adjoint(&KSpaceTensor::zeros(2, 4, 4)).is_err());
        assert!(ForwardOperator::new(SensitivityMaps::unit(4, 4), UndersamplingMask::full(4, 3))
            .is_err());
    }

    #[test]
    fn maps_over_unit_rejected() {
        let raw = vec![C64::new(1.0, 0.0), C64::new(0.1, 0.0)];
        assert!(SensitivityMaps::new(2, 1, 1, raw).is_err());
        let maps = SensitivityMaps::new(1, 1, 2, vec![C64::new(1.0, 0.0), C64::new(0.5, 0.0)])
            .unwrap();
        assert!(maps.check_support(&[true, false]).is_ok());
        assert!(maps.check_support(&[true, true]).is_err());
    }

    #[test]
    fn full_mask_gram_is_sum_of_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let op = random_op(&mut rng, 3, 8, 6).fully_sampled();
        let x = ComplexTensor::from_fn(8, 6, |_, _| crandn(&mut rng));
        let back = op.zero_filled(&op.forward(&x).unwrap()).unwrap();
        let ss = op.maps().sum_of_squares();
        for ((b, v), s) in back.data().iter().zip(x.data()).zip(ss) {
            assert!((b - v * s).norm() < 1e-12);
        }
        // and the unit-coil case reduces to fft2c
        let unit = ForwardOperator::new(SensitivityMaps::unit(8, 6), UndersamplingMask::full(8, 6))
            .unwrap();
        let k = unit.forward(&x).unwrap();
        let f = fft2c(&x).unwrap();
        for (a, b) in k.data().iter().zip(f.data()) {
            assert!((a - b).norm() < 1e-14);
        }
    }
}
