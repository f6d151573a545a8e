//! Level schedule: how many sub-models each level trains, how many
//! pseudo-labeled images each one sees, and who inherits from whom.

use std::collections::HashSet;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub level_index: usize,
    pub submodel_count: usize,
    pub subset_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelPlan {
    pub levels: Vec<LevelSpec>,
    pub unlabeled_total: usize,
}

impl LevelPlan {
    pub fn submodel_counts(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.submodel_count).collect()
    }

    pub fn subset_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.subset_size).collect()
    }

    pub fn level(&self, n: usize) -> Option<&LevelSpec> {
        self.levels.iter().find(|l| l.level_index == n)
    }

    pub fn final_level(&self) -> usize {
        self.levels.last().map_or(0, |l| l.level_index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetAssignment {
    pub level_index: usize,
    pub subsets: Vec<Vec<String>>,
}

/// `S_n = max(floor(S_1 / 2^(n-1)), 1)`.
pub fn submodel_count(s1: usize, level: usize) -> usize {
    debug_assert!(level >= 1);
    let shift = level - 1;
    if shift >= usize::BITS as usize {
        1
    } else {
        (s1 >> shift).max(1)
    }
}

/// `N_n = floor(N_0 / S_n + 0.5)`, evaluated in integers as `floor((2 N_0 + S_n) / (2 S_n))`.
pub fn subset_size(n0: usize, s_n: usize) -> usize {
    (2 * n0 + s_n) / (2 * s_n)
}

pub fn plan_levels(s1: usize, n0: usize) -> Result<LevelPlan> {
    if s1 == 0 || !s1.is_power_of_two() {
        return Err(Error::invalid(format!(
            "initial sub-model count must be a power of two (1, 2, 4, 8, ...), got {s1}"
        )));
    }
    let mut levels = Vec::new();
    for n in 1.. {
        let s_n = submodel_count(s1, n);
        levels.push(LevelSpec {
            level_index: n,
            submodel_count: s_n,
            subset_size: subset_size(n0, s_n),
        });
        if s_n == 1 {
            break;
        }
    }
    Ok(LevelPlan {
        levels,
        unlabeled_total: n0,
    })
}

/// Draws `next_count` distinct parents out of `prev_count`.
pub fn select_parents<R: Rng + ?Sized>(
    prev_count: usize,
    next_count: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if next_count > prev_count {
        return Err(Error::invalid(format!(
            "cannot inherit {next_count} sub-models from {prev_count} parents"
        )));
    }
    Ok(index::sample(rng, prev_count, next_count).into_vec())
}

/// Independent without-replacement draws per sub-model; subsets of
/// different sub-models may overlap.
pub fn assign_subsets<R: Rng + ?Sized>(
    level_index: usize,
    unlabeled_ids: &[String],
    subset_size: usize,
    submodel_count: usize,
    rng: &mut R,
) -> Result<SubsetAssignment> {
    if subset_size > unlabeled_ids.len() {
        return Err(Error::invalid(format!(
            "subset of {subset_size} requested from a pool of {}",
            unlabeled_ids.len()
        )));
    }
    let unique: HashSet<&String> = unlabeled_ids.iter().collect();
    if unique.len() != unlabeled_ids.len() {
        return Err(Error::invalid("unlabeled pool contains duplicate ids"));
    }
    let subsets = (0..submodel_count)
        .map(|_| {
            index::sample(rng, unlabeled_ids.len(), subset_size)
                .into_iter()
                .map(|i| unlabeled_ids[i].clone())
                .collect()
        })
        .collect();
    Ok(SubsetAssignment {
        level_index,
        subsets,
    })
}

/// Stream tags keep the derived seeds of different consumers apart.
#[derive(Debug, Clone, Copy)]
pub enum SeedStream {
    Parents = 1,
    Subsets = 2,
    Training = 3,
    Init = 4,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for one (level, sub-model, stream) triple; independent of the order
/// in which sub-models are processed.
pub fn derive_seed(base: u64, level: usize, submodel: usize, stream: SeedStream) -> u64 {
    let mut h = splitmix64(base);
    for part in [level as u64, submodel as u64, stream as u64] {
        h = splitmix64(h ^ part);
    }
    h
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn plan_for_sixteen() {
        let plan = plan_levels(16, 1944).unwrap();
        assert_eq!(plan.submodel_counts(), vec![16, 8, 4, 2, 1]);
        assert_eq!(plan.subset_sizes(), vec![122, 243, 486, 972, 1944]);
        assert_eq!(plan.final_level(), 5);
    }

    #[test]
    fn level_counts_for_tested_sizes() {
        assert_eq!(plan_levels(32, 1944).unwrap().levels.len(), 6);
        assert_eq!(plan_levels(8, 1944).unwrap().levels.len(), 4);
        let single = plan_levels(1, 100).unwrap();
        assert_eq!(single.levels, vec![LevelSpec { level_index: 1, submodel_count: 1, subset_size: 100 }]);
    }

    #[test]
    fn non_power_of_two_rejected() {
        for s1 in [0, 3, 6, 12, 24] {
            assert!(plan_levels(s1, 10).is_err(), "{s1}");
        }
    }

    #[test]
    fn halving_rule_exhaustive() {
        for s1 in [1usize, 2, 4, 8, 16, 32, 64] {
            let plan = plan_levels(s1, 500).unwrap();
            assert_eq!(plan.levels.len(), s1.trailing_zeros() as usize + 1);
            for spec in &plan.levels {
                let expected = ((s1 as f64 / 2f64.powi(spec.level_index as i32 - 1)).floor() as usize).max(1);
                assert_eq!(spec.submodel_count, expected);
            }
            assert_eq!(plan.levels.last().unwrap().submodel_count, 1);
        }
    }

    #[test]
    fn parents_examples() {
        let a = select_parents(2, 1, &mut seeded_rng(5)).unwrap();
        let b = select_parents(2, 1, &mut seeded_rng(5)).unwrap();
        assert_eq!(a, b);
        assert!(a[0] < 2);

        let mut all = select_parents(4, 4, &mut seeded_rng(9)).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);

        let x = select_parents(8, 4, &mut seeded_rng(77)).unwrap();
        let y = select_parents(8, 4, &mut seeded_rng(77)).unwrap();
        assert_eq!(x, y);

        assert!(select_parents(2, 3, &mut seeded_rng(0)).is_err());
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("img{i:04}")).collect()
    }

    #[test]
    fn subset_examples() {
        let pool = ids(10);
        let a = assign_subsets(1, &pool, 10, 1, &mut seeded_rng(1)).unwrap();
        let mut got = a.subsets[0].clone();
        got.sort();
        assert_eq!(got, pool);

        let pool = ids(1944);
        let a = assign_subsets(1, &pool, 122, 16, &mut seeded_rng(3)).unwrap();
        assert_eq!(a.subsets.len(), 16);
        for s in &a.subsets {
            assert_eq!(s.len(), 122);
            assert_eq!(s.iter().collect::<HashSet<_>>().len(), 122);
        }
        let b = assign_subsets(1, &pool, 122, 16, &mut seeded_rng(3)).unwrap();
        assert_eq!(a, b);

        assert!(assign_subsets(1, &ids(3), 4, 1, &mut seeded_rng(0)).is_err());
    }

    #[test]
    fn derived_seeds_differ_by_component() {
        let s = derive_seed(1, 2, 3, SeedStream::Training);
        assert_eq!(s, derive_seed(1, 2, 3, SeedStream::Training));
        assert_ne!(s, derive_seed(1, 2, 4, SeedStream::Training));
        assert_ne!(s, derive_seed(1, 3, 3, SeedStream::Training));
        assert_ne!(s, derive_seed(2, 2, 3, SeedStream::Training));
        assert_ne!(s, derive_seed(1, 2, 3, SeedStream::Subsets));
    }

    proptest! {
        #[test]
        fn subset_sizes_grow_to_pool(exp in 0u32..8, n0 in 0usize..5000) {
            let plan = plan_levels(1 << exp, n0).unwrap();
            let sizes = plan.subset_sizes();
            prop_assert!(sizes.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(*sizes.last().unwrap(), n0);
            for spec in &plan.levels {
                let expected = (n0 as f64 / spec.submodel_count as f64 + 0.5).floor() as usize;
                prop_assert_eq!(spec.subset_size, expected);
                prop_assert!(spec.subset_size <= n0);
            }
        }
    }
}
