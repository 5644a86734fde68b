//! Train/val/test partitioning, nested labeled budgets and stratified
//! subsets, all stratified by tile category.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};
use crate::synth::Category;

/// Strata smaller than this are pooled and sampled without stratification.
pub const MIN_STRATUM: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitProtocol {
    pub labeled_fractions: Vec<f64>,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub nested: bool,
}

impl Default for SplitProtocol {
    fn default() -> Self {
        Self {
            labeled_fractions: vec![0.10, 0.20, 0.30],
            train_fraction: 0.72,
            val_fraction: 0.08,
            test_fraction: 0.20,
            nested: true,
        }
    }
}

impl SplitProtocol {
    pub fn validate(&self) -> Result<()> {
        let sum = self.train_fraction + self.val_fraction + self.test_fraction;
        if (sum - 1.0).abs() > 1e-9 || [self.train_fraction, self.val_fraction, self.test_fraction].iter().any(|f| *f < 0.0) {
            return Err(Error::invalid(format!(
                "train/val/test fractions must be non-negative and sum to 1 (got {sum})"
            )));
        }
        if let Some(f) = self.labeled_fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::invalid(format!("labeled fraction {f} not in (0, 1]")));
        }
        Ok(())
    }
}

/// Labeled budget as an exact key (fraction in permille).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Budget(pub u32);

impl Budget {
    pub fn from_fraction(f: f64) -> Self {
        Budget((f * 1000.0).round() as u32)
    }

    pub fn fraction(self) -> f64 {
        self.0 as f64 / 1000.0
    }
}

impl std::fmt::Display for Budget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.fraction())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Labeled ids per budget, in selection order.
    pub labeled: BTreeMap<Budget, Vec<usize>>,
}

impl Splits {
    pub fn labeled(&self, budget: Budget) -> Result<&[usize]> {
        self.labeled
            .get(&budget)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid(format!("budget {budget} not in the split protocol")))
    }

    /// Training ids not labeled under `budget`, in id order.
    pub fn unlabeled(&self, budget: Budget) -> Result<Vec<usize>> {
        let labeled: std::collections::HashSet<usize> = self.labeled(budget)?.iter().copied().collect();
        let mut out: Vec<usize> = self.train.iter().copied().filter(|id| !labeled.contains(id)).collect();
        out.sort_unstable();
        Ok(out)
    }

    /// Name of the split holding `id`.
    pub fn split_of(&self, id: usize) -> &'static str {
        if self.test.contains(&id) {
            "test"
        } else if self.val.contains(&id) {
            "val"
        } else {
            "train"
        }
    }

    /// Budgets under which `id` is labeled.
    pub fn budgets_containing(&self, id: usize) -> Vec<Budget> {
        self.labeled
            .iter()
            .filter(|(_, ids)| ids.contains(&id))
            .map(|(b, _)| *b)
            .collect()
    }
}

/// Largest-remainder apportionment of `total` over `sizes`.
pub fn apportion(total: usize, sizes: &[usize]) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return vec![0; sizes.len()];
    }
    let quotas: Vec<f64> = sizes.iter().map(|&s| total as f64 * s as f64 / n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    // stable sort keeps ties in stratum order
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).expect("finite quotas")
    });
    let mut left = total.saturating_sub(counts.iter().sum());
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if counts[i] < sizes[i] {
            counts[i] += 1;
            left -= 1;
        }
    }
    counts
}

/// Groups `ids` by category, pooling strata below [`MIN_STRATUM`] into one
/// extra group.
fn strata(ids: &[usize], categories: &[Category]) -> Vec<Vec<usize>> {
    let mut by_cat: BTreeMap<Category, Vec<usize>> = BTreeMap::new();
    for &id in ids {
        by_cat.entry(categories[id]).or_default().push(id);
    }
    let mut groups = Vec::new();
    let mut pooled = Vec::new();
    for (cat, members) in by_cat {
        if members.len() < MIN_STRATUM {
            log::warn!(
                "stratum {} has {} tile(s); sampling it without stratification",
                cat.as_str(),
                members.len()
            );
            pooled.extend(members);
        } else {
            groups.push(members);
        }
    }
    if !pooled.is_empty() {
        groups.push(pooled);
    }
    groups
}

/// Orders `ids` so that every prefix is close to stratum-proportional.
fn interleave(groups: &[Vec<usize>]) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize, usize)> = Vec::new();
    for (g, members) in groups.iter().enumerate() {
        let n = members.len() as f64;
        for (i, &id) in members.iter().enumerate() {
            keyed.push(((i as f64 + 0.5) / n, g, id));
        }
    }
    keyed.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite").then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, _, id)| id).collect()
}

/// Stratified train/val/test partition with labeled subsets per budget.
///
/// `categories[id]` is the category of tile `id`. When the protocol is
/// nested, every budget takes a prefix of one stratified ordering of the
/// training ids, so smaller budgets are subsets of larger ones. Labeled
/// counts are floored.
pub fn make_splits(categories: &[Category], protocol: &SplitProtocol, seed: u64) -> Result<Splits> {
    protocol.validate()?;
    let n = categories.len();
    if n < 20 {
        return Err(Error::invalid(format!("corpus of {n} tiles is too small to split (need 20)")));
    }
    let all: Vec<usize> = (0..n).collect();
    let mut groups = strata(&all, categories);
    let mut rng = rng_for(seed, &[stream::SPLIT, 0]);
    for g in &mut groups {
        g.shuffle(&mut rng);
    }
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let n_test = (protocol.test_fraction * n as f64).round() as usize;
    let n_val = (protocol.val_fraction * n as f64).round() as usize;
    let test_counts = apportion(n_test, &sizes);
    let rest: Vec<usize> = sizes.iter().zip(&test_counts).map(|(s, t)| s - t).collect();
    let val_counts = apportion(n_val, &rest);

    let (mut test, mut val) = (Vec::new(), Vec::new());
    let mut train_groups = Vec::with_capacity(groups.len());
    for ((g, &nt), &nv) in groups.iter().zip(&test_counts).zip(&val_counts) {
        test.extend_from_slice(&g[..nt]);
        val.extend_from_slice(&g[nt..nt + nv]);
        train_groups.push(g[nt + nv..].to_vec());
    }
    let mut train: Vec<usize> = train_groups.iter().flatten().copied().collect();
    test.sort_unstable();
    val.sort_unstable();
    train.sort_unstable();

    let mut labeled = BTreeMap::new();
    let nested_order = interleave(&train_groups);
    for (k, &fraction) in protocol.labeled_fractions.iter().enumerate() {
        let count = (fraction * train.len() as f64 + 1e-9).floor() as usize;
        let order = if protocol.nested {
            nested_order.clone()
        } else {
            let mut rng = rng_for(seed, &[stream::SPLIT, 1, k as u64]);
            let mut shuffled = train_groups.clone();
            for g in &mut shuffled {
                g.shuffle(&mut rng);
            }
            interleave(&shuffled)
        };
        labeled.insert(Budget::from_fraction(fraction), order[..count].to_vec());
    }
    labeled.entry(Budget::from_fraction(1.0)).or_insert_with(|| nested_order.clone());
    Ok(Splits {
        train,
        val,
        test,
        labeled,
    })
}

/// `k` ids with category proportions matching the corpus (largest
/// remainder), sorted ascending.
pub fn stratified_subset(categories: &[Category], k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = categories.len();
    if k > n {
        return Err(Error::invalid(format!("subset of {k} requested from {n} tiles")));
    }
    let all: Vec<usize> = (0..n).collect();
    let groups = strata(&all, categories);
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let counts = apportion(k, &sizes);
    let mut out = Vec::with_capacity(k);
    for (g, (members, &take)) in groups.iter().zip(&counts).enumerate() {
        let mut rng = rng_for(seed, &[stream::SUBSET, g as u64]);
        out.extend(index::sample(&mut rng, members.len(), take).into_iter().map(|i| members[i]));
    }
    out.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn cats(slum: usize, non: usize, mixed: usize) -> Vec<Category> {
        let mut v = vec![Category::Slum; slum];
        v.extend(vec![Category::NonSlum; non]);
        v.extend(vec![Category::Mixed; mixed]);
        // spread categories over ids
        let mut rng = rng_for(123, &[]);
        v.shuffle(&mut rng);
        v
    }

    #[test]
    fn partition_sizes_for_1000_tiles() {
        let c = cats(47, 848, 105);
        let s = make_splits(&c, &SplitProtocol::default(), 1).unwrap();
        assert_eq!(s.test.len(), 200);
        assert_eq!(s.val.len(), 80);
        assert_eq!(s.train.len(), 720);
        assert_eq!(s.labeled(Budget::from_fraction(0.1)).unwrap().len(), 72);
        assert_eq!(s.labeled(Budget::from_fraction(0.2)).unwrap().len(), 144);
        assert_eq!(s.labeled(Budget::from_fraction(0.3)).unwrap().len(), 216);
        assert_eq!(s.labeled(Budget::from_fraction(1.0)).unwrap().len(), 720);
        assert_eq!(s.unlabeled(Budget::from_fraction(0.1)).unwrap().len(), 648);
    }

    #[test]
    fn budgets_nest_and_splits_are_disjoint() {
        let c = cats(6, 934, 60);
        let s = make_splits(&c, &SplitProtocol::default(), 9).unwrap();
        let set = |b: f64| -> HashSet<usize> { s.labeled(Budget::from_fraction(b)).unwrap().iter().copied().collect() };
        assert!(set(0.1).is_subset(&set(0.2)));
        assert!(set(0.2).is_subset(&set(0.3)));
        let train: HashSet<_> = s.train.iter().copied().collect();
        let val: HashSet<_> = s.val.iter().copied().collect();
        let test: HashSet<_> = s.test.iter().copied().collect();
        assert!(train.is_disjoint(&val) && train.is_disjoint(&test) && val.is_disjoint(&test));
        assert_eq!(train.len() + val.len() + test.len(), c.len());
        assert!(set(0.3).is_subset(&train));
    }

    #[test]
    fn labeled_budget_is_stratified() {
        let c = cats(47, 848, 105);
        let s = make_splits(&c, &SplitProtocol::default(), 2).unwrap();
        let lab = s.labeled(Budget::from_fraction(0.1)).unwrap();
        let mixed = lab.iter().filter(|&&id| c[id] == Category::Mixed).count();
        // 10.5% of 72 tiles
        assert!((6..=9).contains(&mixed), "mixed {mixed}");
    }

    #[test]
    fn too_small_corpus_rejected() {
        assert!(make_splits(&cats(1, 10, 5), &SplitProtocol::default(), 0).is_err());
    }

    #[test]
    fn tiny_stratum_falls_back() {
        // one slum tile: pooled, still partitioned
        let c = cats(1, 80, 19);
        let s = make_splits(&c, &SplitProtocol::default(), 4).unwrap();
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 100);
    }

    #[test]
    fn subset_examples() {
        let c = cats(20, 800, 180);
        let all = stratified_subset(&c, c.len(), 0).unwrap();
        assert_eq!(all, (0..c.len()).collect::<Vec<_>>());
        assert!(stratified_subset(&c, c.len() + 1, 0).is_err());

        let a = stratified_subset(&c, 200, 1).unwrap();
        let b = stratified_subset(&c, 200, 2).unwrap();
        assert_ne!(a, b);
        for sub in [&a, &b] {
            let non = sub.iter().filter(|&&i| c[i] == Category::NonSlum).count() as f64 / 200.0;
            assert!((0.78..=0.82).contains(&non), "non-slum share {non}");
        }
    }

    #[test]
    fn splits_are_deterministic() {
        let c = cats(30, 600, 70);
        let p = SplitProtocol::default();
        assert_eq!(make_splits(&c, &p, 5).unwrap(), make_splits(&c, &p, 5).unwrap());
        assert_ne!(make_splits(&c, &p, 5).unwrap(), make_splits(&c, &p, 6).unwrap());
    }

    proptest! {
        #[test]
        fn subset_proportions_within_two_percent(slum in 0usize..60, non in 50usize..900, mixed in 0usize..300, frac in 0.05f64..1.0, seed in 0u64..100) {
            let c = cats(slum, non, mixed);
            let n = c.len();
            let k = ((n as f64 * frac) as usize).max(50).min(n);
            let sub = stratified_subset(&c, k, seed).unwrap();
            prop_assert_eq!(sub.len(), k);
            for cat in Category::ALL {
                let full = c.iter().filter(|&&x| x == cat).count() as f64 / n as f64;
                let part = sub.iter().filter(|&&i| c[i] == cat).count() as f64 / k as f64;
                // pooled tiny strata can drift by a tile or two
                let slack = if c.iter().filter(|&&x| x == cat).count() < MIN_STRATUM { 2.0 / k as f64 } else { 0.0 };
                prop_assert!((full - part).abs() <= 0.02 + slack, "{:?}: {} vs {}", cat, full, part);
            }
        }

        #[test]
        fn nesting_holds_for_any_seed(seed in 0u64..1000) {
            let c = cats(10, 300, 40);
            let s = make_splits(&c, &SplitProtocol::default(), seed).unwrap();
            let l1: HashSet<_> = s.labeled(Budget::from_fraction(0.1)).unwrap().iter().collect();
            let l2: HashSet<_> = s.labeled(Budget::from_fraction(0.2)).unwrap().iter().collect();
            let l3: HashSet<_> = s.labeled(Budget::from_fraction(0.3)).unwrap().iter().collect();
            prop_assert!(l1.is_subset(&l2) && l2.is_subset(&l3));
        }
    }
}
