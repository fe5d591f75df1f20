//! Session layout shared by provider and verifier.
//!
//! A session of `blocks` blocks has `T = blocks · P` positions. Position `t`
//! is bound to probe `t mod P`; block `b = t / P` is served at backend
//! position `b mod 4`. An audit opens `k_open` distinct blocks, each scored on
//! a fresh probe subset, all derived from the `probe_seed` carried in the
//! open request.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::sample_subset;

pub const BACKEND_POSITIONS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionPlan {
    pub blocks: usize,
    pub num_probes: usize,
}

impl SessionPlan {
    pub fn new(blocks: usize, num_probes: usize) -> Result<Self> {
        if blocks == 0 || num_probes == 0 {
            return Err(Error::InvalidParameter("session plan needs blocks >= 1 and probes >= 1".into()));
        }
        Ok(SessionPlan { blocks, num_probes })
    }

    pub fn num_positions(&self) -> u64 {
        (self.blocks * self.num_probes) as u64
    }

    pub fn probe_of(&self, t: u64) -> usize {
        (t % self.num_probes as u64) as usize
    }

    pub fn block_of(&self, t: u64) -> usize {
        (t / self.num_probes as u64) as usize
    }

    pub fn backend_position(&self, block: usize) -> u8 {
        (block % BACKEND_POSITIONS) as u8
    }

    pub fn position(&self, block: usize, probe: usize) -> u64 {
        (block * self.num_probes + probe) as u64
    }
}

/// One scored round: a block and the probes opened within it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenRound {
    pub block: usize,
    pub subset: Vec<usize>,
}

/// Rounds implied by `probe_seed`; anyone holding the seed can recompute them.
pub fn open_rounds(plan: &SessionPlan, probe_seed: u64, k_open: usize, n_probes: usize) -> Result<Vec<OpenRound>> {
    if k_open == 0 || k_open > plan.blocks {
        return Err(Error::InvalidParameter(format!("k_open {k_open} not in 1..={}", plan.blocks)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
    let mut blocks = sample(&mut rng, plan.blocks, k_open).into_vec();
    blocks.sort_unstable();
    blocks
        .into_iter()
        .map(|block| Ok(OpenRound { block, subset: sample_subset(&mut rng, plan.num_probes, n_probes)? }))
        .collect()
}

/// Positions requested for `rounds`, in round order.
pub fn round_positions(plan: &SessionPlan, rounds: &[OpenRound]) -> Vec<u64> {
    rounds.iter().flat_map(|r| r.subset.iter().map(move |&i| plan.position(r.block, i))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn layout() {
        let p = SessionPlan::new(4, 96).unwrap();
        assert_eq!(p.num_positions(), 384);
        assert_eq!((p.probe_of(97), p.block_of(97)), (1, 1));
        assert_eq!(p.backend_position(5), 1);
        assert_eq!(p.position(3, 95), 383);
    }

    #[test]
    fn rounds_are_distinct_and_reproducible() {
        let p = SessionPlan::new(4, 96).unwrap();
        let r = open_rounds(&p, 11, 4, 8).unwrap();
        assert_eq!(r, open_rounds(&p, 11, 4, 8).unwrap());
        let blocks: HashSet<_> = r.iter().map(|x| x.block).collect();
        assert_eq!(blocks.len(), 4);
        let pos = round_positions(&p, &r);
        assert_eq!(pos.len(), 32);
        assert_eq!(pos.iter().collect::<HashSet<_>>().len(), 32);
        assert!(pos.iter().all(|&t| t < 384));
        assert!(open_rounds(&p, 1, 5, 8).is_err());
        assert!(open_rounds(&p, 1, 1, 97).is_err());
    }
}
