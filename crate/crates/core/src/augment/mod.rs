//! Physics-driven (invariant) and image-based (equivariant) augmentations.

mod physics;
mod pipeline;
mod schedule;
mod spatial;

pub use physics::{apply_motion, apply_motion_with, apply_noise, noise_scale, MotionDraw};
pub use pipeline::{compose, equivariant_on_kspace, AugmentationPlan, Example, PhysicsOp};
pub use schedule::{
    sample_difficulty, schedule_difficulty, schedule_probability, CurriculumSchedule,
};
pub use spatial::{apply_image_transform, ImageTransform};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Noise,
    Motion,
    FlipH,
    FlipV,
    Rot90,
    Rotate,
    Translate,
    ScaleIso,
    ScaleAniso,
    Shear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Invariant,
    Equivariant,
}

impl TransformKind {
    pub fn family(self) -> Family {
        match self {
            TransformKind::Noise | TransformKind::Motion => Family::Invariant,
            _ => Family::Equivariant,
        }
    }

    /// Default parameter range. Noise and motion use the heavy training range;
    /// rotation and shear are in degrees, translation in fractions of the FOV.
    pub fn default_range(self) -> DifficultyRange {
        let (lo, hi) = match self {
            TransformKind::Noise | TransformKind::Motion => (0.2, 0.5),
            TransformKind::Rotate => (0.0, 15.0),
            TransformKind::Translate => (0.0, 0.08),
            TransformKind::ScaleIso | TransformKind::ScaleAniso => (0.9, 1.1),
            TransformKind::Shear => (0.0, 10.0),
            TransformKind::FlipH | TransformKind::FlipV | TransformKind::Rot90 => (0.0, 1.0),
        };
        DifficultyRange { lo, hi }
    }
}

/// Half-open range `[lo, hi)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DifficultyRange {
    pub lo: f64,
    pub hi: f64,
}

impl DifficultyRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        let r = Self { lo, hi };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo >= 0.0 && self.lo < self.hi && self.hi.is_finite()) {
            return Err(invalid!("difficulty range [{}, {}) must satisfy 0 <= lo < hi", self.lo, self.hi));
        }
        Ok(())
    }
}

fn default_probability() -> f64 {
    1.0
}

/// Declarative description of one augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformSpec {
    pub kind: TransformKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<DifficultyRange>,
    #[serde(default = "default_probability")]
    pub probability: f64,
    #[serde(default)]
    pub curriculum: CurriculumSchedule,
}

impl TransformSpec {
    pub fn new(kind: TransformKind) -> Self {
        Self {
            kind,
            range: None,
            probability: 1.0,
            curriculum: CurriculumSchedule::None,
        }
    }

    pub fn with_range(mut self, lo: f64, hi: f64) -> Self {
        self.range = Some(DifficultyRange { lo, hi });
        self
    }

    pub fn with_probability(mut self, p: f64) -> Self {
        self.probability = p;
        self
    }

    pub fn with_curriculum(mut self, c: CurriculumSchedule) -> Self {
        self.curriculum = c;
        self
    }

    pub fn family(&self) -> Family {
        self.kind.family()
    }

    pub fn range(&self) -> DifficultyRange {
        self.range.unwrap_or_else(|| self.kind.default_range())
    }

    pub fn validate(&self) -> Result<()> {
        self.range().validate()?;
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(invalid!("probability {} outside [0, 1]", self.probability));
        }
        self.curriculum.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn families() {
        assert_eq!(TransformKind::Noise.family(), Family::Invariant);
        assert_eq!(TransformKind::Motion.family(), Family::Invariant);
        for k in [
            TransformKind::FlipH,
            TransformKind::FlipV,
            TransformKind::Rot90,
            TransformKind::Rotate,
            TransformKind::Translate,
            TransformKind::ScaleIso,
            TransformKind::ScaleAniso,
            TransformKind::Shear,
        ] {
            assert_eq!(k.family(), Family::Equivariant);
        }
    }

    #[test]
    fn spec_json() {
        let s: TransformSpec =
            serde_json::from_str(r#"{"kind":"motion","range":{"lo":0.1,"hi":0.3}}"#).unwrap();
        assert_eq!(s.range(), DifficultyRange { lo: 0.1, hi: 0.3 });
        assert_eq!(s.probability, 1.0);
        assert!(serde_json::from_str::<TransformSpec>(r#"{"kind":"motion","bogus":1}"#).is_err());
        assert!(TransformSpec::new(TransformKind::Noise).with_range(0.3, 0.3).validate().is_err());
        assert!(TransformSpec::new(TransformKind::Noise).with_probability(1.5).validate().is_err());
    }
}
