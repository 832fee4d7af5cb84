//! The candidate search space and clone-class bookkeeping.
//!
//! Detection compares executables pairwise. The outer space is every
//! unordered pair of distinct executables, `n * (n - 1) / 2` candidates for
//! `n` executables. Within one candidate, every (input, output) pair of one
//! side can be linked against every (input, output) pair of the other, so a
//! candidate carries `|io_pairs(a)| * |io_pairs(b)|` links. The pipeline
//! works by rejecting links and candidates from this space.
//!
//! Positive decisions are transitive by intent: clones of a clone are
//! clones. [`CloneClasses`] tracks the induced partition with a union-find
//! structure so the detector can skip candidates whose verdict is already
//! implied.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::trace::{ExecutableSchema, IoPair};

#[derive(Debug, Error, PartialEq)]
pub enum SpaceError {
    #[error("need at least two executables, got {0}")]
    TooFewExecutables(usize),
    #[error("duplicate executable id '{0}'")]
    DuplicateId(String),
    #[error("unknown executable id '{0}'")]
    UnknownId(String),
}

/// One unordered candidate pair; `a < b` lexicographically by construction.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CandidatePair {
    pub a: String,
    pub b: String,
}

impl CandidatePair {
    pub fn new(x: &str, y: &str) -> CandidatePair {
        if x <= y {
            CandidatePair { a: x.into(), b: y.into() }
        } else {
            CandidatePair { a: y.into(), b: x.into() }
        }
    }
}

/// A link pairs one IO pair of candidate side `a` with one of side `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Link {
    pub pair_a: IoPair,
    pub pair_b: IoPair,
}

/// Number of unordered pairs over `n` executables.
pub fn candidate_count(n: u64) -> Result<u64, SpaceError> {
    if n < 2 {
        return Err(SpaceError::TooFewExecutables(n as usize));
    }
    Ok(n * (n - 1) / 2)
}

/// All unordered candidate pairs in lexicographic order.
///
/// Ids must be unique; ordering makes downstream processing deterministic.
pub fn build_candidates(ids: &[String]) -> Result<Vec<CandidatePair>, SpaceError> {
    if ids.len() < 2 {
        return Err(SpaceError::TooFewExecutables(ids.len()));
    }
    let mut sorted = ids.to_vec();
    sorted.sort();
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            return Err(SpaceError::DuplicateId(w[0].clone()));
        }
    }
    let mut pairs = Vec::with_capacity(sorted.len() * (sorted.len() - 1) / 2);
    for i in 0..sorted.len() {
        for j in i + 1..sorted.len() {
            pairs.push(CandidatePair { a: sorted[i].clone(), b: sorted[j].clone() });
        }
    }
    Ok(pairs)
}

/// All links of one candidate: the Cartesian product of both sides' IO
/// pairs, ordered by side `a` first.
pub fn build_links(a: &ExecutableSchema, b: &ExecutableSchema) -> Vec<Link> {
    let pairs_a = a.io_pairs();
    let pairs_b = b.io_pairs();
    let mut links = Vec::with_capacity(pairs_a.len() * pairs_b.len());
    for &pa in &pairs_a {
        for &pb in &pairs_b {
            links.push(Link { pair_a: pa, pair_b: pb });
        }
    }
    links
}

/// Total link count across all candidates of a corpus of schemas.
pub fn total_link_space(schemas: &[ExecutableSchema]) -> Result<u64, SpaceError> {
    if schemas.len() < 2 {
        return Err(SpaceError::TooFewExecutables(schemas.len()));
    }
    let io_counts: Vec<u64> = schemas.iter().map(|s| s.io_pairs().len() as u64).collect();
    let mut total = 0u64;
    for i in 0..io_counts.len() {
        for j in i + 1..io_counts.len() {
            total += io_counts[i] * io_counts[j];
        }
    }
    Ok(total)
}

/// Union-find partition of executables into clone classes.
///
/// Freshly constructed, every executable is alone in its class. A positive
/// clone decision unions two classes; membership queries are reflexive and
/// follow the transitive closure of all unions so far. Negative decisions
/// are never recorded: absence of a union carries no information.
#[derive(Debug, Clone)]
pub struct CloneClasses {
    index: BTreeMap<String, usize>,
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl CloneClasses {
    pub fn new<I, S>(ids: I) -> Result<CloneClasses, SpaceError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut index = BTreeMap::new();
        for (i, id) in ids.into_iter().enumerate() {
            let id = id.into();
            if index.insert(id.clone(), i).is_some() {
                return Err(SpaceError::DuplicateId(id));
            }
        }
        let n = index.len();
        Ok(CloneClasses { index, parent: (0..n).collect(), size: vec![1; n] })
    }

    fn slot(&self, id: &str) -> Result<usize, SpaceError> {
        self.index.get(id).copied().ok_or_else(|| SpaceError::UnknownId(id.into()))
    }

    fn root(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    /// Merges the classes of `a` and `b`.
    pub fn union(&mut self, a: &str, b: &str) -> Result<(), SpaceError> {
        let (ra, rb) = (self.slot(a)?, self.slot(b)?);
        let (mut ra, mut rb) = (self.root(ra), self.root(rb));
        if ra == rb {
            return Ok(());
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        Ok(())
    }

    /// Whether `a` and `b` currently share a class.
    pub fn same_class(&mut self, a: &str, b: &str) -> Result<bool, SpaceError> {
        let (ia, ib) = (self.slot(a)?, self.slot(b)?);
        Ok(self.root(ia) == self.root(ib))
    }

    /// The partition as sorted classes of sorted ids.
    pub fn classes(&mut self) -> Vec<Vec<String>> {
        let ids: Vec<String> = self.index.keys().cloned().collect();
        let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for id in ids {
            let slot = self.index[&id];
            let root = self.root(slot);
            groups.entry(root).or_default().push(id);
        }
        let mut classes: Vec<Vec<String>> = groups.into_values().collect();
        for class in &mut classes {
            class.sort();
        }
        classes.sort();
        classes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{AtomicElement, DataType, ElementRole};

    fn schema(id: &str, inputs: usize, outputs: usize) -> ExecutableSchema {
        let mut elements = Vec::new();
        for i in 0..inputs {
            elements.push(AtomicElement {
                name: format!("in{i}"),
                role: ElementRole::ParameterIn,
                dtype: DataType::Integer,
            });
        }
        for o in 0..outputs {
            elements.push(AtomicElement {
                name: format!("out{o}"),
                role: ElementRole::ResultOut,
                dtype: DataType::Integer,
            });
        }
        ExecutableSchema { id: id.into(), display_name: id.into(), owner_type: None, elements }
    }

    #[test]
    fn candidate_count_closed_form() {
        assert_eq!(candidate_count(2).unwrap(), 1);
        assert_eq!(candidate_count(108).unwrap(), 5778);
        assert_eq!(candidate_count(1000).unwrap(), 499_500);
    }

    #[test]
    fn too_few_executables() {
        assert_eq!(candidate_count(1), Err(SpaceError::TooFewExecutables(1)));
        assert_eq!(candidate_count(0), Err(SpaceError::TooFewExecutables(0)));
        assert!(build_candidates(&["x".to_string()]).is_err());
    }

    #[test]
    fn candidates_are_lexicographic_and_complete() {
        let ids: Vec<String> = ["c", "a", "b"].iter().map(|s| s.to_string()).collect();
        let pairs = build_candidates(&ids).unwrap();
        assert_eq!(
            pairs,
            vec![
                CandidatePair::new("a", "b"),
                CandidatePair::new("a", "c"),
                CandidatePair::new("b", "c"),
            ]
        );
    }

    #[test]
    fn candidate_counts_match_formula_up_to_fifty() {
        for n in 2..=50usize {
            let ids: Vec<String> = (0..n).map(|i| format!("x{i:02}")).collect();
            let pairs = build_candidates(&ids).unwrap();
            assert_eq!(pairs.len() as u64, candidate_count(n as u64).unwrap());
            for p in &pairs {
                assert!(p.a < p.b);
            }
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let ids: Vec<String> = ["a", "b", "a"].iter().map(|s| s.to_string()).collect();
        assert_eq!(build_candidates(&ids), Err(SpaceError::DuplicateId("a".into())));
    }

    #[test]
    fn links_are_the_pair_product() {
        let a = schema("a", 2, 1);
        let b = schema("b", 1, 1);
        let links = build_links(&a, &b);
        assert_eq!(links.len(), 2);
        assert_eq!(links[0].pair_a, IoPair { input: 0, output: 2 });
        assert_eq!(links[0].pair_b, IoPair { input: 0, output: 1 });
    }

    #[test]
    fn no_io_pairs_means_no_links() {
        let a = schema("a", 1, 0);
        let b = schema("b", 1, 1);
        assert!(build_links(&a, &b).is_empty());
    }

    #[test]
    fn total_space_sums_link_products() {
        // Two executables with 1 and 2 IO pairs: 1 * 2 = 2.
        let schemas = vec![schema("a", 1, 1), schema("b", 2, 1)];
        assert_eq!(total_link_space(&schemas).unwrap(), 2);
        // Third with 3 pairs: 1*2 + 1*3 + 2*3 = 11.
        let schemas = vec![schema("a", 1, 1), schema("b", 2, 1), schema("c", 3, 1)];
        assert_eq!(total_link_space(&schemas).unwrap(), 11);
    }

    #[test]
    fn union_find_tracks_transitive_closure() {
        let mut classes = CloneClasses::new(["a", "b", "c", "d"]).unwrap();
        assert!(!classes.same_class("a", "c").unwrap());
        classes.union("a", "b").unwrap();
        classes.union("b", "c").unwrap();
        assert!(classes.same_class("a", "c").unwrap());
        assert!(!classes.same_class("a", "d").unwrap());
        assert!(classes.same_class("d", "d").unwrap());
    }

    #[test]
    fn classes_lists_the_partition() {
        let mut classes = CloneClasses::new(["d", "c", "b", "a"]).unwrap();
        classes.union("a", "c").unwrap();
        assert_eq!(
            classes.classes(),
            vec![
                vec!["a".to_string(), "c".to_string()],
                vec!["b".to_string()],
                vec!["d".to_string()],
            ]
        );
    }

    #[test]
    fn unknown_id_is_an_error() {
        let mut classes = CloneClasses::new(["a"]).unwrap();
        assert_eq!(classes.same_class("a", "zz"), Err(SpaceError::UnknownId("zz".into())));
        assert_eq!(classes.union("zz", "a"), Err(SpaceError::UnknownId("zz".into())));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn union_find_matches_brute_force_closure(
                n in 2usize..20,
                unions in proptest::collection::vec((0usize..20, 0usize..20), 0..40)
            ) {
                let ids: Vec<String> = (0..n).map(|i| format!("e{i}")).collect();
                let mut classes = CloneClasses::new(ids.iter().cloned()).unwrap();

                // Reference: boolean adjacency closed under Floyd-Warshall.
                let mut reach = vec![vec![false; n]; n];
                for (i, row) in reach.iter_mut().enumerate() {
                    row[i] = true;
                }
                for &(x, y) in &unions {
                    let (x, y) = (x % n, y % n);
                    classes.union(&ids[x], &ids[y]).unwrap();
                    reach[x][y] = true;
                    reach[y][x] = true;
                }
                for k in 0..n {
                    for i in 0..n {
                        for j in 0..n {
                            if reach[i][k] && reach[k][j] {
                                reach[i][j] = true;
                            }
                        }
                    }
                }
                for i in 0..n {
                    for j in 0..n {
                        prop_assert_eq!(
                            classes.same_class(&ids[i], &ids[j]).unwrap(),
                            reach[i][j]
                        );
                    }
                }
            }

            #[test]
            fn link_count_is_io_product(ia in 0usize..5, oa in 0usize..5, ib in 0usize..5, ob in 0usize..5) {
                let a = schema("a", ia, oa);
                let b = schema("b", ib, ob);
                prop_assert_eq!(build_links(&a, &b).len(), ia * oa * ib * ob);
            }
        }
    }
}
