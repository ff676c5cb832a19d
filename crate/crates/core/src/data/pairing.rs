use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Class-matched index pairs between two labeled sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairingPlan {
    pub quota: usize,
    /// B-side draws repeat indices.
    pub with_repetition: bool,
    pub seed: u64,
    pub table: BTreeMap<u8, Vec<(usize, usize)>>,
}

impl PairingPlan {
    pub fn len(&self) -> usize {
        self.table.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pairs in class order, then draw order.
    pub fn pairs(&self) -> impl Iterator<Item = (u8, usize, usize)> + '_ {
        self.table.iter().flat_map(|(&c, v)| v.iter().map(move |&(a, b)| (c, a, b)))
    }

    /// Number of pairs whose labels disagree under the given label vectors.
    pub fn label_mismatches(&self, labels_a: &[u8], labels_b: &[u8]) -> usize {
        self.pairs()
            .filter(|&(c, a, b)| labels_a[a] != c || labels_b[b] != c)
            .count()
    }
}

fn by_class(labels: &[u8]) -> BTreeMap<u8, Vec<usize>> {
    let mut m: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        m.entry(l).or_default().push(i);
    }
    m
}

/// Pair `quota` samples per class. The A side is drawn without replacement until
/// its class is exhausted and with replacement afterwards; the B side always
/// draws with replacement.
pub fn build_pairing(labels_a: &[u8], labels_b: &[u8], quota: usize, seed: u64) -> Result<PairingPlan> {
    if quota == 0 {
        return Err(Error::InvalidArgument("pairing quota must be positive".into()));
    }
    let (ca, cb) = (by_class(labels_a), by_class(labels_b));
    let classes: BTreeSet<u8> = ca.keys().chain(cb.keys()).copied().collect();
    if classes.is_empty() {
        return Err(Error::Data("cannot pair empty label sets".into()));
    }
    let mut rng = Rng::new(seed, 0);
    let mut table = BTreeMap::new();
    for c in classes {
        let (Some(pool_a), Some(pool_b)) = (ca.get(&c), cb.get(&c)) else {
            let side = if ca.contains_key(&c) { "B" } else { "A" };
            return Err(Error::Data(format!("class {c} is absent from set {side}")));
        };
        let mut order = pool_a.clone();
        rng.shuffle(&mut order);
        let mut pairs = Vec::with_capacity(quota);
        for k in 0..quota {
            let a = if k < order.len() { order[k] } else { pool_a[rng.below(pool_a.len() as u64) as usize] };
            let b = pool_b[rng.below(pool_b.len() as u64) as usize];
            pairs.push((a, b));
        }
        table.insert(c, pairs);
    }
    Ok(PairingPlan { quota, with_repetition: true, seed, table })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_class_unique_pair() {
        let plan = build_pairing(&[0], &[0], 1, 5).unwrap();
        assert_eq!(plan.pairs().collect::<Vec<_>>(), vec![(0, 0, 0)]);
    }

    #[test]
    fn quota_agreement_and_determinism() {
        let a: Vec<u8> = (0..300).map(|i| (i % 3) as u8).collect();
        let b: Vec<u8> = (0..40).map(|i| (i % 3) as u8).collect();
        let plan = build_pairing(&a, &b, 150, 9).unwrap();
        assert_eq!(plan.len(), 450);
        assert!(plan.table.values().all(|v| v.len() == 150));
        assert_eq!(plan.label_mismatches(&a, &b), 0);
        assert_eq!(plan, build_pairing(&a, &b, 150, 9).unwrap());
        assert_ne!(plan, build_pairing(&a, &b, 150, 10).unwrap());
        // 100 A samples per class: the first 100 draws are distinct.
        for v in plan.table.values() {
            let first: BTreeSet<usize> = v[..100].iter().map(|p| p.0).collect();
            assert_eq!(first.len(), 100);
        }
    }

    #[test]
    fn absent_class_errors() {
        let err = build_pairing(&[0, 1], &[0, 0], 2, 1).unwrap_err();
        assert!(err.to_string().contains("class 1"));
    }
}
