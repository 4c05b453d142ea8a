//! Spatial (image-domain) transforms applied jointly to images and coil maps.
//!
//! Flips, quarter turns and integer translations are exact index maps. Rotation,
//! scaling and shear resample bilinearly with zero padding. Every transform is
//! linear, so each one also exposes its adjoint for backpropagation.

use rand::Rng;

use super::{sample_difficulty, TransformKind, TransformSpec};
use crate::error::{invalid, Result};
use crate::mri::{SensitivityMaps, UndersamplingMask};
use crate::numerics::{ComplexTensor, C64};

#[derive(Clone, Debug, PartialEq)]
pub enum ImageTransform {
    Identity,
    /// Reverse the column order.
    FlipH,
    /// Reverse the row order.
    FlipV,
    /// Counter-clockwise quarter turns (square images only).
    Rot90 { quarter_turns: u8 },
    /// Shift by whole pixels, zero fill.
    Translate { rows: i64, cols: i64 },
    /// Bilinear resampling; `inverse` maps centered output coordinates `(row, col)`
    /// to centered input coordinates.
    Affine { inverse: [[f64; 2]; 2] },
}

enum Resampling {
    Gather(Vec<Option<usize>>),
    Weighted(Vec<(usize, usize, f64)>),
}

impl ImageTransform {
    pub fn rotate_degrees(deg: f64) -> Self {
        let t = (-deg).to_radians();
        ImageTransform::Affine {
            inverse: [[t.cos(), -t.sin()], [t.sin(), t.cos()]],
        }
    }

    pub fn scale(rows: f64, cols: f64) -> Result<Self> {
        if !(rows > 0.0 && cols > 0.0 && rows.is_finite() && cols.is_finite()) {
            return Err(invalid!("scale factors must be > 0, got ({}, {})", rows, cols));
        }
        Ok(ImageTransform::Affine {
            inverse: [[1.0 / rows, 0.0], [0.0, 1.0 / cols]],
        })
    }

    /// Horizontal shear by `deg` degrees: columns shift proportionally to the row.
    pub fn shear_degrees(deg: f64) -> Result<Self> {
        if deg.abs() >= 90.0 || !deg.is_finite() {
            return Err(invalid!("shear angle must be within (-90, 90) degrees, got {}", deg));
        }
        Ok(ImageTransform::Affine {
            inverse: [[1.0, 0.0], [-deg.to_radians().tan(), 1.0]],
        })
    }

    /// Draws concrete parameters for an equivariant spec.
    pub fn sample<R: Rng + ?Sized>(
        spec: &TransformSpec,
        t: f64,
        dims: (usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        let range = spec.range();
        let draw = |rng: &mut R| sample_difficulty(&spec.curriculum, range, t, rng);
        let sign = |rng: &mut R| if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        Ok(match spec.kind {
            TransformKind::Noise | TransformKind::Motion => {
                return Err(invalid!("{:?} is not a spatial transform", spec.kind))
            }
            TransformKind::FlipH => ImageTransform::FlipH,
            TransformKind::FlipV => ImageTransform::FlipV,
            TransformKind::Rot90 => ImageTransform::Rot90 {
                quarter_turns: rng.random_range(1..=3),
            },
            TransformKind::Rotate => {
                let deg = draw(rng)?;
                ImageTransform::rotate_degrees(sign(rng) * deg)
            }
            TransformKind::Translate => {
                let fr = draw(rng)? * sign(rng);
                let fc = draw(rng)? * sign(rng);
                ImageTransform::Translate {
                    rows: (fr * dims.0 as f64).round() as i64,
                    cols: (fc * dims.1 as f64).round() as i64,
                }
            }
            TransformKind::ScaleIso => {
                let s = draw(rng)?;
                ImageTransform::scale(s, s)?
            }
            TransformKind::ScaleAniso => {
                let sr = draw(rng)?;
                let sc = draw(rng)?;
                ImageTransform::scale(sr, sc)?
            }
            TransformKind::Shear => {
                let deg = draw(rng)?;
                ImageTransform::shear_degrees(sign(rng) * deg)?
            }
        })
    }

    /// Transforms whose k-space effect is a permutation of sample locations.
    pub fn permutes_kspace(&self) -> bool {
        matches!(
            self,
            ImageTransform::FlipH | ImageTransform::FlipV | ImageTransform::Rot90 { .. }
        )
    }

    fn check(&self, h: usize, w: usize) -> Result<()> {
        if let ImageTransform::Rot90 { quarter_turns } = self {
            if h != w && quarter_turns % 2 == 1 {
                return Err(invalid!("odd quarter turns need a square image, got {}x{}", h, w));
            }
        }
        if let ImageTransform::Affine { inverse } = self {
            if inverse.iter().flatten().any(|v| !v.is_finite()) {
                return Err(invalid!("non-finite affine parameters"));
            }
        }
        Ok(())
    }

    fn resampling(&self, h: usize, w: usize, reflect: fn(usize, usize) -> usize) -> Resampling {
        let gather = |f: &dyn Fn(usize, usize) -> Option<(usize, usize)>| {
            let mut idx = Vec::with_capacity(h * w);
            for r in 0..h {
                for c in 0..w {
                    idx.push(f(r, c).map(|(sr, sc)| sr * w + sc));
                }
            }
            Resampling::Gather(idx)
        };
        match *self {
            ImageTransform::Identity => gather(&|r, c| Some((r, c))),
            ImageTransform::FlipH => gather(&|r, c| Some((r, reflect(c, w)))),
            ImageTransform::FlipV => gather(&|r, c| Some((reflect(r, h), c))),
            ImageTransform::Rot90 { quarter_turns } => gather(&|r, c| {
                let (mut sr, mut sc) = (r, c);
                for _ in 0..quarter_turns % 4 {
                    // out[r][c] = in[c][reflect(r)]
                    let next = (sc, reflect(sr, h));
                    sr = next.0;
                    sc = next.1;
                }
                Some((sr, sc))
            }),
            ImageTransform::Translate { rows, cols } => gather(&|r, c| {
                let sr = r as i64 - rows;
                let sc = c as i64 - cols;
                if (0..h as i64).contains(&sr) && (0..w as i64).contains(&sc) {
                    Some((sr as usize, sc as usize))
                } else {
                    None
                }
            }),
            ImageTransform::Affine { inverse } => {
                let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
                let mut taps = Vec::with_capacity(4 * h * w);
                for r in 0..h {
                    for c in 0..w {
                        let (py, px) = (r as f64 - cy, c as f64 - cx);
                        let sy = inverse[0][0] * py + inverse[0][1] * px + cy;
                        let sx = inverse[1][0] * py + inverse[1][1] * px + cx;
                        let (y0, x0) = (sy.floor(), sx.floor());
                        let (fy, fx) = (sy - y0, sx - x0);
                        for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                            for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                                let (yy, xx) = (y0 + dy, x0 + dx);
                                let wt = wy * wx;
                                if wt != 0.0
                                    && yy >= 0.0
                                    && xx >= 0.0
                                    && yy < h as f64
                                    && xx < w as f64
                                {
                                    taps.push((r * w + c, yy as usize * w + xx as usize, wt));
                                }
                            }
                        }
                    }
                }
                Resampling::Weighted(taps)
            }
        }
    }

    /// Applies the transform to one row-major `h x w` plane.
    pub fn apply_plane(&self, h: usize, w: usize, src: &[C64]) -> Result<Vec<C64>> {
        self.check(h, w)?;
        if src.len() != h * w {
            return Err(invalid!("plane has {} values, expected {}", src.len(), h * w));
        }
        Ok(match self.resampling(h, w, reflect_image) {
            Resampling::Gather(idx) => idx
                .iter()
                .map(|i| i.map_or(C64::new(0.0, 0.0), |i| src[i]))
                .collect(),
            Resampling::Weighted(taps) => {
                let mut out = vec![C64::new(0.0, 0.0); h * w];
                for (d, s, wt) in taps {
                    out[d] += src[s] * wt;
                }
                out
            }
        })
    }

    /// Adjoint of [`apply_plane`](Self::apply_plane).
    pub fn adjoint_plane(&self, h: usize, w: usize, src: &[C64]) -> Result<Vec<C64>> {
        self.check(h, w)?;
        if src.len() != h * w {
            return Err(invalid!("plane has {} values, expected {}", src.len(), h * w));
        }
        let mut out = vec![C64::new(0.0, 0.0); h * w];
        match self.resampling(h, w, reflect_image) {
            Resampling::Gather(idx) => {
                for (d, i) in idx.iter().enumerate() {
                    if let Some(i) = i {
                        out[*i] += src[d];
                    }
                }
            }
            Resampling::Weighted(taps) => {
                for (d, s, wt) in taps {
                    out[s] += src[d] * wt;
                }
            }
        }
        Ok(out)
    }

    pub fn apply_image(&self, x: &ComplexTensor) -> Result<ComplexTensor> {
        let (h, w) = x.dims2()?;
        ComplexTensor::new(vec![h, w], self.apply_plane(h, w, x.data())?)
    }

    pub fn adjoint_image(&self, x: &ComplexTensor) -> Result<ComplexTensor> {
        let (h, w) = x.dims2()?;
        ComplexTensor::new(vec![h, w], self.adjoint_plane(h, w, x.data())?)
    }

    /// Sampling pattern of the transformed k-space.
    ///
    /// An image flip or quarter turn maps centered k-space coordinate `k` to the
    /// same signed permutation of `k` (about `N/2`, wrapping), up to a phase ramp.
    /// Non-permuting transforms keep the original mask.
    pub fn transform_mask(&self, mask: &UndersamplingMask) -> Result<UndersamplingMask> {
        if !self.permutes_kspace() {
            return Ok(mask.clone());
        }
        let (h, w) = mask.dims();
        self.check(h, w)?;
        let bits = match self.resampling(h, w, reflect_kspace) {
            Resampling::Gather(idx) => idx.iter().map(|i| mask.bits()[i.expect("permutation")]).collect(),
            Resampling::Weighted(_) => unreachable!("permutations gather"),
        };
        Ok(mask.with_bits(bits))
    }
}

fn reflect_image(i: usize, n: usize) -> usize {
    n - 1 - i
}

fn reflect_kspace(i: usize, n: usize) -> usize {
    (2 * (n / 2) + n - i) % n
}

/// Applies the same spatial transform to an image and to every coil map.
pub fn apply_image_transform(
    x: &ComplexTensor,
    maps: &SensitivityMaps,
    t: &ImageTransform,
) -> Result<(ComplexTensor, SensitivityMaps)> {
    let (h, w) = x.dims2()?;
    if maps.dims() != (h, w) {
        return Err(invalid!("image {:?} does not match maps {:?}", (h, w), maps.dims()));
    }
    let img = t.apply_image(x)?;
    let mut data = Vec::with_capacity(maps.data().len());
    for c in 0..maps.coils() {
        data.extend(t.apply_plane(h, w, maps.coil(c))?);
    }
    Ok((img, SensitivityMaps::new(maps.coils(), h, w, data)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::inner;
    use crate::rng::keyed;

    fn random(h: usize, w: usize, seed: u64) -> ComplexTensor {
        let mut rng = keyed(&[seed]);
        ComplexTensor::from_fn(h, w, |_, _| {
            C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
    }

    #[test]
    fn flip_is_involution() {
        let mut x = random(6, 5, 1);
        x.data_mut()[3] = C64::new(-0.0, 0.0);
        for t in [ImageTransform::FlipH, ImageTransform::FlipV] {
            let once = t.apply_image(&x).unwrap();
            assert_ne!(once, x);
            let twice = t.apply_image(&once).unwrap();
            assert_eq!(
                twice.data().iter().map(|z| (z.re.to_bits(), z.im.to_bits())).collect::<Vec<_>>(),
                x.data().iter().map(|z| (z.re.to_bits(), z.im.to_bits())).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn four_quarter_turns_identity() {
        let x = random(7, 7, 2);
        let t = ImageTransform::Rot90 { quarter_turns: 1 };
        let mut y = x.clone();
        for _ in 0..4 {
            y = t.apply_image(&y).unwrap();
        }
        assert_eq!(y, x);
        let three = ImageTransform::Rot90 { quarter_turns: 3 }.apply_image(&x).unwrap();
        let back = t.apply_image(&three).unwrap();
        assert_eq!(back, x);
        assert!(t.apply_image(&random(4, 6, 1)).is_err());
    }

    #[test]
    fn quarter_turn_direction() {
        // counter-clockwise: the top-right corner moves to the top-left
        let x = ComplexTensor::from_fn(3, 3, |r, c| C64::new((r * 3 + c) as f64, 0.0));
        let y = ImageTransform::Rot90 { quarter_turns: 1 }.apply_image(&x).unwrap();
        assert_eq!(y.get2(0, 0), x.get2(0, 2));
        assert_eq!(y.get2(2, 0), x.get2(0, 0));
    }

    #[test]
    fn translate_round_trip_interior() {
        let x = random(10, 12, 3);
        let fwd = ImageTransform::Translate { rows: 2, cols: -3 };
        let back = ImageTransform::Translate { rows: -2, cols: 3 };
        let y = back.apply_image(&fwd.apply_image(&x).unwrap()).unwrap();
        for r in 0..10 {
            for c in 0..12 {
                let interior = r + 2 < 10 && c >= 3;
                if interior {
                    assert_eq!(y.get2(r, c), x.get2(r, c));
                } else {
                    assert_eq!(y.get2(r, c), C64::new(0.0, 0.0));
                }
            }
        }
    }

    #[test]
    fn zero_angle_rotation_is_exact() {
        let x = random(8, 8, 4);
        assert_eq!(ImageTransform::rotate_degrees(0.0).apply_image(&x).unwrap(), x);
        assert_eq!(ImageTransform::scale(1.0, 1.0).unwrap().apply_image(&x).unwrap(), x);
    }

    #[test]
    fn invalid_parameters() {
        assert!(ImageTransform::scale(0.0, 1.0).is_err());
        assert!(ImageTransform::scale(1.0, -2.0).is_err());
        assert!(ImageTransform::shear_degrees(90.0).is_err());
    }

    #[test]
    fn adjoint_matches_inner_products() {
        let ts = [
            ImageTransform::FlipH,
            ImageTransform::Rot90 { quarter_turns: 3 },
            ImageTransform::Translate { rows: 1, cols: 2 },
            ImageTransform::rotate_degrees(11.0),
            ImageTransform::scale(0.93, 1.07).unwrap(),
            ImageTransform::shear_degrees(-7.0).unwrap(),
        ];
        for (i, t) in ts.iter().enumerate() {
            let a = random(9, 9, 10 + i as u64);
            let b = random(9, 9, 20 + i as u64);
            let lhs = inner(t.apply_image(&a).unwrap().data(), b.data());
            let rhs = inner(a.data(), t.adjoint_image(&b).unwrap().data());
            assert!((lhs - rhs).norm() < 1e-12, "{:?}", t);
        }
    }

    #[test]
    fn maps_follow_image() {
        let x = random(8, 8, 5);
        let maps = SensitivityMaps::unit(8, 8);
        let (xi, mi) = apply_image_transform(&x, &maps, &ImageTransform::rotate_degrees(10.0)).unwrap();
        assert_eq!(xi.shape(), &[8, 8]);
        assert_eq!(mi.dims(), (8, 8));
        // corners fall outside the rotated field of view
        assert!(mi.coil(0)[0].norm() < 1.0);
    }

    #[test]
    fn sampling_respects_kind() {
        let mut rng = keyed(&[1]);
        let spec = TransformSpec::new(TransformKind::Translate);
        for _ in 0..20 {
            match ImageTransform::sample(&spec, 0.0, (32, 32), &mut rng).unwrap() {
                ImageTransform::Translate { rows, cols } => {
                    assert!(rows.abs() <= 3 && cols.abs() <= 3);
                }
                other => panic!("unexpected {:?}", other),
            }
        }
        assert!(ImageTransform::sample(&TransformSpec::new(TransformKind::Noise), 0.0, (8, 8), &mut rng).is_err());
    }
}
