//! Angle-division grouping of users with disjoint, guarded SSI intervals.

use serde::{Deserialize, Serialize};

use crate::basis::SsiSet;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupingConfig {
    /// Minimum number of empty bins between two intervals of one group.
    pub guard: usize,
    pub max_groups: Option<usize>,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        GroupingConfig { guard: 4, max_groups: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupPlan {
    pub groups: Vec<Vec<usize>>,
}

impl GroupPlan {
    pub fn sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    /// `(group, position within group)` of a user.
    pub fn locate(&self, user: usize) -> Option<(usize, usize)> {
        self.groups
            .iter()
            .enumerate()
            .find_map(|(g, members)| members.iter().position(|&u| u == user).map(|i| (g, i)))
    }

    /// Intra-group pairs that break the disjointness or guard constraint.
    pub fn violations(&self, ssis: &[SsiSet], guard: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for members in &self.groups {
            for (i, &a) in members.iter().enumerate() {
                for &b in &members[i + 1..] {
                    if !compatible(&ssis[a], &ssis[b], guard) {
                        out.push((a, b));
                    }
                }
            }
        }
        out
    }
}

/// Number of empty bins separating two intervals on the circle; 0 when they
/// touch or overlap.
pub fn circular_distance(a: &SsiSet, b: &SsiSet) -> usize {
    if a.intersects(b) {
        return 0;
    }
    let m = a.m() as i64;
    let right = (b.lo() - a.hi() - 1).rem_euclid(m);
    let left = (a.lo() - b.hi() - 1).rem_euclid(m);
    right.min(left) as usize
}

fn compatible(a: &SsiSet, b: &SsiSet, guard: usize) -> bool {
    !a.intersects(b) && circular_distance(a, b) >= guard
}

/// Greedy first-fit in ascending order of SSI centre.
pub fn group_users(ssis: &[SsiSet], cfg: &GroupingConfig) -> Result<GroupPlan> {
    let mut order: Vec<usize> = (0..ssis.len()).collect();
    order.sort_by_key(|&k| (ssis[k].center_bin(), k));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for k in order {
        let slot = groups
            .iter()
            .position(|members| members.iter().all(|&u| compatible(&ssis[u], &ssis[k], cfg.guard)));
        match slot {
            Some(g) => groups[g].push(k),
            None => {
                if let Some(max) = cfg.max_groups {
                    if groups.len() >= max {
                        return Err(Error::GroupOverflow { user: k, max });
                    }
                }
                groups.push(vec![k]);
            }
        }
    }
    for members in &mut groups {
        members.sort_unstable();
    }
    Ok(GroupPlan { groups })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(lo: i64, hi: i64) -> SsiSet {
        SsiSet::new(lo, hi, lo, 128).unwrap()
    }

    #[test]
    fn distance_examples() {
        assert_eq!(circular_distance(&iv(0, 3), &iv(0, 3)), 0);
        assert_eq!(circular_distance(&iv(0, 3), &iv(10, 12)), 6);
        assert_eq!(circular_distance(&iv(120, 127), &iv(2, 4)), 2);
        assert_eq!(circular_distance(&iv(2, 4), &iv(120, 127)), 2);
        assert_eq!(circular_distance(&iv(0, 3), &iv(4, 6)), 0);
        assert_eq!(circular_distance(&iv(-3, 2), &iv(125, 126)), 0);
    }

    #[test]
    fn trivial_groupings() {
        let cfg = GroupingConfig::default();
        assert_eq!(group_users(&[iv(3, 5)], &cfg).unwrap().groups, vec![vec![0]]);
        assert_eq!(group_users(&[iv(3, 5), iv(3, 5)], &cfg).unwrap().n_groups(), 2);
        let far = group_users(&[iv(3, 5), iv(40, 45)], &cfg).unwrap();
        assert_eq!(far.groups, vec![vec![0, 1]]);
    }

    #[test]
    fn overflow_names_user() {
        let cfg = GroupingConfig { guard: 4, max_groups: Some(1) };
        let e = group_users(&[iv(3, 5), iv(4, 6)], &cfg).unwrap_err();
        assert!(matches!(e, Error::GroupOverflow { user: 1, max: 1 }));
    }

    #[test]
    fn plan_locate() {
        let plan = GroupPlan { groups: vec![vec![0, 2], vec![1]] };
        assert_eq!(plan.locate(2), Some((0, 1)));
        assert_eq!(plan.locate(1), Some((1, 0)));
        assert_eq!(plan.locate(7), None);
    }
}
