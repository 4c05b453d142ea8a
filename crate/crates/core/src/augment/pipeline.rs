//! Ordered composition of augmentations.
//!
//! Selected equivariant transforms run first, in the order given (in the image
//! domain when fully sampled data is available), then the acquisition mask is
//! applied, then the selected invariant transforms act on undersampled k-space.

use rand::Rng;
use rustfft::FftDirection;

use super::physics::{apply_motion_with, apply_noise, MotionDraw};
use super::spatial::ImageTransform;
use super::{sample_difficulty, Family, TransformKind, TransformSpec};
use crate::error::{invalid, Result};
use crate::mri::{ForwardOperator, KSpaceTensor, SensitivityMaps};
use crate::numerics::{fft2c_plane, ComplexTensor};
use crate::rng::keyed;

/// One training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub kspace: KSpaceTensor,
    pub op: ForwardOperator,
    /// `kspace` holds every sample and `op.mask()` is still to be applied.
    pub fully_sampled: bool,
    pub target: Option<ComplexTensor>,
}

impl Example {
    /// The acquired k-space (mask applied).
    pub fn undersampled(&self) -> Example {
        let mut out = self.clone();
        if out.fully_sampled {
            out.op.mask().apply(&mut out.kspace);
            out.fully_sampled = false;
        }
        out
    }

    /// Zero-filled reconstruction of the acquired data.
    pub fn zero_filled(&self) -> Result<ComplexTensor> {
        self.op.zero_filled(&self.kspace)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PhysicsOp {
    Noise { sigma: f64, seed: u64 },
    Motion { alpha: f64, draw: MotionDraw },
}

/// Concrete, fully drawn augmentation for one example.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AugmentationPlan {
    pub equivariant: Vec<ImageTransform>,
    pub invariant: Vec<PhysicsOp>,
}

impl AugmentationPlan {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn is_identity(&self) -> bool {
        self.equivariant.is_empty() && self.invariant.is_empty()
    }

    pub fn has_equivariant(&self) -> bool {
        !self.equivariant.is_empty()
    }

    /// Selects each spec independently with its probability and draws its parameters.
    pub fn draw<R: Rng + ?Sized>(
        specs: &[TransformSpec],
        probabilities: &[f64],
        t: f64,
        dims: (usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        if specs.len() != probabilities.len() {
            return Err(invalid!("need one probability per transform spec"));
        }
        let mut plan = Self::identity();
        for (spec, &p) in specs.iter().zip(probabilities) {
            spec.validate()?;
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid!("probability {} outside [0, 1]", p));
            }
            let coin: f64 = rng.random();
            if coin >= p {
                continue;
            }
            match spec.kind {
                TransformKind::Noise => {
                    let sigma = sample_difficulty(&spec.curriculum, spec.range(), t, rng)?;
                    plan.invariant.push(PhysicsOp::Noise {
                        sigma,
                        seed: rng.random(),
                    });
                }
                TransformKind::Motion => {
                    let alpha = sample_difficulty(&spec.curriculum, spec.range(), t, rng)?;
                    plan.invariant.push(PhysicsOp::Motion {
                        alpha,
                        draw: MotionDraw::sample(rng),
                    });
                }
                _ => {
                    debug_assert_eq!(spec.family(), Family::Equivariant);
                    plan.equivariant.push(ImageTransform::sample(spec, t, dims, rng)?);
                }
            }
        }
        Ok(plan)
    }

    pub fn apply(&self, ex: &Example) -> Result<Example> {
        let mut out = ex.clone();
        if self.has_equivariant() {
            if out.fully_sampled {
                self.equivariant_fully_sampled(&mut out)?;
            } else {
                for t in &self.equivariant {
                    let (k, op) = equivariant_on_kspace(&out.kspace, &out.op, t)?;
                    out.kspace = k;
                    out.op = op;
                }
                if let Some(x) = &out.target {
                    out.target = Some(self.transform_image(x)?);
                }
            }
        }
        let mut out = out.undersampled();
        for op in &self.invariant {
            out.kspace = match *op {
                PhysicsOp::Noise { sigma, seed } => {
                    apply_noise(&out.kspace, out.op.mask(), sigma, &mut keyed(&[seed]))?
                }
                PhysicsOp::Motion { alpha, draw } => apply_motion_with(&out.kspace, alpha, draw)?,
            };
        }
        Ok(out)
    }

    /// Image-domain transforms before undersampling; the forward model regenerates k-space.
    fn equivariant_fully_sampled(&self, ex: &mut Example) -> Result<()> {
        let (h, w) = ex.op.dims();
        let full = ex.op.fully_sampled();
        let mut maps = ex.op.maps().clone();
        match ex.target.clone() {
            Some(mut x) => {
                for t in &self.equivariant {
                    let (xt, mt) = super::apply_image_transform(&x, &maps, t)?;
                    x = xt;
                    maps = mt;
                }
                let op = ForwardOperator::new(maps.clone(), full.mask().clone())?;
                ex.kspace = op.forward(&x)?;
                ex.target = Some(x);
            }
            None => {
                let mut coils = full.coil_images(&ex.kspace)?;
                for t in &self.equivariant {
                    coils = transform_planes(&coils, t)?;
                    maps = transform_maps(&maps, t)?;
                }
                for c in 0..coils.coils() {
                    fft2c_plane(h, w, coils.coil_mut(c), FftDirection::Forward);
                }
                ex.kspace = coils;
            }
        }
        ex.op = ForwardOperator::new(maps, ex.op.mask().clone())?;
        Ok(())
    }

    /// `G_E(x)`: the selected spatial transforms applied in order.
    pub fn transform_image(&self, x: &ComplexTensor) -> Result<ComplexTensor> {
        let mut out = x.clone();
        for t in &self.equivariant {
            out = t.apply_image(&out)?;
        }
        Ok(out)
    }

    /// Adjoint of [`transform_image`](Self::transform_image).
    pub fn transform_image_adjoint(&self, g: &ComplexTensor) -> Result<ComplexTensor> {
        let mut out = g.clone();
        for t in self.equivariant.iter().rev() {
            out = t.adjoint_image(&out)?;
        }
        Ok(out)
    }
}

fn transform_planes(k: &KSpaceTensor, t: &ImageTransform) -> Result<KSpaceTensor> {
    let (h, w) = k.dims();
    let mut data = Vec::with_capacity(k.data().len());
    for c in 0..k.coils() {
        data.extend(t.apply_plane(h, w, k.coil(c))?);
    }
    KSpaceTensor::new(k.coils(), h, w, data)
}

fn transform_maps(maps: &SensitivityMaps, t: &ImageTransform) -> Result<SensitivityMaps> {
    let (h, w) = maps.dims();
    let mut data = Vec::with_capacity(maps.data().len());
    for c in 0..maps.coils() {
        data.extend(t.apply_plane(h, w, maps.coil(c))?);
    }
    SensitivityMaps::new(maps.coils(), h, w, data)
}

/// Applies a spatial transform to undersampled k-space and its operator.
///
/// Coil images are transformed together with the maps and re-masked. Flips and
/// quarter turns carry the mask along; resampling transforms keep the original mask.
pub fn equivariant_on_kspace(
    y: &KSpaceTensor,
    op: &ForwardOperator,
    t: &ImageTransform,
) -> Result<(KSpaceTensor, ForwardOperator)> {
    if *t == ImageTransform::Identity {
        return Ok((y.clone(), op.clone()));
    }
    let (h, w) = op.dims();
    let mut coils = transform_planes(&op.coil_images(y)?, t)?;
    let maps = transform_maps(op.maps(), t)?;
    let mask = t.transform_mask(op.mask())?;
    for c in 0..coils.coils() {
        fft2c_plane(h, w, coils.coil_mut(c), FftDirection::Forward);
    }
    mask.apply(&mut coils);
    Ok((coils, ForwardOperator::new(maps, mask)?))
}

/// Draws each spec with its own probability at epoch `t` and applies the result.
pub fn compose<R: Rng + ?Sized>(
    specs: &[TransformSpec],
    ex: &Example,
    t: f64,
    rng: &mut R,
) -> Result<Example> {
    if specs.is_empty() {
        return Err(invalid!("compose needs at least one transform spec"));
    }
    let probabilities: Vec<f64> = specs.iter().map(|s| s.probability).collect();
    let plan = AugmentationPlan::draw(specs, &probabilities, t, ex.op.dims(), rng)?;
    plan.apply(ex)
}
