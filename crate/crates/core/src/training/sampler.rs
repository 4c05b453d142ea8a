//! 1:1 balanced sampling of supervised and unsupervised examples.

use rand::seq::SliceRandom;

use crate::rng::{domain, keyed};

/// Index pairs for every step of an epoch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Step {
    pub supervised: Vec<usize>,
    pub unsupervised: Vec<usize>,
}

/// Draws `per_side` supervised and `per_side` unsupervised indices per step.
///
/// Each side walks through keyed permutations of its pool, starting a fresh
/// permutation whenever one is exhausted. An epoch has
/// `ceil(max(N_s, N_u) / per_side)` steps, so the larger pool is seen once
/// and the smaller one cycles.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BalancedSampler {
    pub supervised: usize,
    pub unsupervised: usize,
    pub per_side: usize,
    pub seed: u64,
}

const SUPERVISED_SIDE: u64 = 0;
const UNSUPERVISED_SIDE: u64 = 1;

impl BalancedSampler {
    pub fn steps_per_epoch(&self) -> usize {
        self.supervised.max(self.unsupervised).div_ceil(self.per_side.max(1))
    }

    fn side(&self, epoch: u64, side: u64, pool: usize, count: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        let mut cycle = 0u64;
        while out.len() < count && pool > 0 {
            let mut perm: Vec<usize> = (0..pool).collect();
            perm.shuffle(&mut keyed(&[self.seed, domain::SAMPLER, epoch, side, cycle]));
            out.extend(perm.into_iter().take(count - out.len()));
            cycle += 1;
        }
        out
    }

    pub fn epoch(&self, epoch: u64) -> Vec<Step> {
        let steps = self.steps_per_epoch();
        let per = self.per_side.max(1);
        let sup = self.side(epoch, SUPERVISED_SIDE, self.supervised, steps * per);
        let unsup = self.side(epoch, UNSUPERVISED_SIDE, self.unsupervised, steps * per);
        (0..steps)
            .map(|s| Step {
                supervised: sup.get(s * per..(s + 1) * per).map(<[usize]>::to_vec).unwrap_or_default(),
                unsupervised: unsup.get(s * per..(s + 1) * per).map(<[usize]>::to_vec).unwrap_or_default(),
            })
            .collect()
    }
}
