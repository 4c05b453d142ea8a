//! Difficulty and probability curricula.
//!
//! `β(t)` grows from 0 at `t = 0` to 1 at `t = M` and stays at 1 afterwards.
//! The upper difficulty bound is `σᴴ(t) = σᴸ + β(t)(σᴴ − σᴸ)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DifficultyRange;
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum CurriculumSchedule {
    #[default]
    None,
    /// `β(t) = t / M`.
    Linear { epochs: f64 },
    /// `β(t) = (1 − e^{−t/τ}) / (1 − e^{−M/τ})` with `τ = M / γ`.
    Exponential { epochs: f64, gamma: f64 },
}

impl CurriculumSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            CurriculumSchedule::None => Ok(()),
            CurriculumSchedule::Linear { epochs } => check_epochs(epochs),
            CurriculumSchedule::Exponential { epochs, gamma } => {
                check_epochs(epochs)?;
                if !(gamma > 0.0 && gamma.is_finite()) {
                    return Err(invalid!("exponential curriculum needs gamma > 0, got {}", gamma));
                }
                Ok(())
            }
        }
    }

    pub fn beta(&self, t: f64) -> Result<f64> {
        self.validate()?;
        if !(t >= 0.0) {
            return Err(invalid!("epoch must be >= 0, got {}", t));
        }
        Ok(match *self {
            CurriculumSchedule::None => 1.0,
            CurriculumSchedule::Linear { epochs } => t.min(epochs) / epochs,
            CurriculumSchedule::Exponential { epochs, gamma } => {
                if t >= epochs {
                    1.0
                } else {
                    let tau = epochs / gamma;
                    (-t / tau).exp_m1() / (-epochs / tau).exp_m1()
                }
            }
        })
    }
}

fn check_epochs(m: f64) -> Result<()> {
    if !(m > 0.0 && m.is_finite()) {
        return Err(invalid!("curriculum length M must be > 0, got {}", m));
    }
    Ok(())
}

/// Upper bound `σᴴ(t)` of the difficulty range at epoch `t`.
pub fn schedule_difficulty(sched: &CurriculumSchedule, range: DifficultyRange, t: f64) -> Result<f64> {
    let beta = sched.beta(t)?;
    Ok(range.lo + beta * (range.hi - range.lo))
}

/// Augmentation probability `p(t) = p_max · β(t)`.
pub fn schedule_probability(p_max: f64, t: f64, sched: &CurriculumSchedule) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_max) {
        return Err(invalid!("p_max {} outside [0, 1]", p_max));
    }
    Ok(p_max * sched.beta(t)?)
}

/// Draws a difficulty uniformly from `[σᴸ, σᴴ(t))`.
///
/// An empty range (`σᴴ(t) = σᴸ`, e.g. at `t = 0` of a curriculum) yields `σᴸ`.
pub fn sample_difficulty<R: Rng + ?Sized>(
    sched: &CurriculumSchedule,
    range: DifficultyRange,
    t: f64,
    rng: &mut R,
) -> Result<f64> {
    let hi = schedule_difficulty(sched, range, t)?;
    if hi <= range.lo {
        return Ok(range.lo);
    }
    let u: f64 = rng.random();
    let v = range.lo + u * (hi - range.lo);
    Ok(if v < hi { v } else { range.lo })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::keyed;

    const RANGE: DifficultyRange = DifficultyRange { lo: 0.2, hi: 0.5 };

    /// Closed form evaluated with plain `exp`, a separate route from `exp_m1`.
    fn beta_exp_oracle(t: f64, m: f64, gamma: f64) -> f64 {
        let tau = m / gamma;
        (1.0 - (-t / tau).exp()) / (1.0 - (-m / tau).exp())
    }

    #[test]
    fn linear_endpoints() {
        let s = CurriculumSchedule::Linear { epochs: 40.0 };
        assert_eq!(s.beta(0.0).unwrap(), 0.0);
        assert_eq!(s.beta(40.0).unwrap(), 1.0);
        assert_eq!(schedule_difficulty(&s, RANGE, 0.0).unwrap(), 0.2);
        assert_eq!(schedule_difficulty(&s, RANGE, 40.0).unwrap(), 0.5);
        assert_eq!(schedule_difficulty(&s, RANGE, 400.0).unwrap(), 0.5);
    }

    #[test]
    fn exponential_midpoint() {
        let s = CurriculumSchedule::Exponential { epochs: 200.0, gamma: 5.0 };
        let b = s.beta(100.0).unwrap();
        // (1 - e^-2.5) / (1 - e^-5)
        assert!((b - 0.924_141_82).abs() < 1e-8, "{}", b);
        assert!((b - beta_exp_oracle(100.0, 200.0, 5.0)).abs() < 1e-14);
        assert_eq!(s.beta(0.0).unwrap(), 0.0);
        assert_eq!(s.beta(200.0).unwrap(), 1.0);
        let p = schedule_probability(0.2, 100.0, &s).unwrap();
        assert!((p - 0.184_828_36).abs() < 1e-8);
        assert_eq!(schedule_probability(0.2, 0.0, &s).unwrap(), 0.0);
        assert_eq!(schedule_probability(0.2, 200.0, &s).unwrap(), 0.2);
    }

    #[test]
    fn none_is_constant() {
        for t in [0.0, 3.0, 1e6] {
            assert_eq!(schedule_difficulty(&CurriculumSchedule::None, RANGE, t).unwrap(), 0.5);
        }
    }

    #[test]
    fn invalid_arguments() {
        assert!(CurriculumSchedule::Linear { epochs: 0.0 }.beta(1.0).is_err());
        assert!(CurriculumSchedule::Exponential { epochs: 10.0, gamma: 0.0 }.beta(1.0).is_err());
        assert!(CurriculumSchedule::None.beta(-1.0).is_err());
        assert!(schedule_probability(1.2, 1.0, &CurriculumSchedule::None).is_err());
    }

    #[test]
    fn json_shape() {
        let s: CurriculumSchedule =
            serde_json::from_str(r#"{"kind":"exponential","epochs":20,"gamma":5}"#).unwrap();
        assert_eq!(s, CurriculumSchedule::Exponential { epochs: 20.0, gamma: 5.0 });
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn beta_monotone_bounded(m in 1.0f64..300.0, gamma in 0.1f64..10.0, t in 0.0f64..400.0, dt in 0.0f64..50.0, linear in any::<bool>()) {
                let s = if linear {
                    CurriculumSchedule::Linear { epochs: m }
                } else {
                    CurriculumSchedule::Exponential { epochs: m, gamma }
                };
                let a = s.beta(t).unwrap();
                let b = s.beta(t + dt).unwrap();
                prop_assert!((0.0..=1.0).contains(&a));
                prop_assert!(a <= b);
                if t >= m { prop_assert_eq!(a, 1.0); }
            }

            #[test]
            fn samples_in_half_open_range(seed in any::<u64>(), t in 0.01f64..100.0) {
                let s = CurriculumSchedule::Linear { epochs: 50.0 };
                let hi = schedule_difficulty(&s, RANGE, t).unwrap();
                let mut rng = keyed(&[seed]);
                for _ in 0..64 {
                    let v = sample_difficulty(&s, RANGE, t, &mut rng).unwrap();
                    prop_assert!(v >= RANGE.lo && v < hi);
                }
            }
        }
    }
}
