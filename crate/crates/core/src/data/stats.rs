use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Labeled;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassStats {
    pub counts: Vec<usize>,
    /// Largest class count over smallest.
    pub imbalance_ratio: f64,
}

pub fn counts_of<T: Labeled>(items: &[T], class_count: usize) -> Vec<usize> {
    let mut counts = vec![0usize; class_count];
    for it in items {
        counts[it.label()] += 1;
    }
    counts
}

pub fn class_stats<T: Labeled>(items: &[T], class_count: usize) -> Result<ClassStats> {
    if items.is_empty() {
        return Err(Error::Parameter("class statistics of an empty dataset".into()));
    }
    let counts = counts_of(items, class_count);
    ClassStats::from_counts(counts)
}

impl ClassStats {
    pub fn from_counts(counts: Vec<usize>) -> Result<Self> {
        let (Some(&max), Some(&min)) = (counts.iter().max(), counts.iter().min()) else {
            return Err(Error::Parameter("no classes".into()));
        };
        if min == 0 {
            return Err(Error::Parameter(format!("a class has no samples: {counts:?}")));
        }
        Ok(Self { imbalance_ratio: max as f64 / min as f64, counts })
    }
}

/// Randomly thins every class whose count is below
/// `minority_threshold * max_count` to `round(count * keep_fraction)`
/// samples (never below one). Retained items keep their original order.
pub fn rebalance_minority<T: Labeled + Clone>(
    items: &[T],
    class_count: usize,
    keep_fraction: f64,
    minority_threshold: f64,
    seed: u64,
) -> Result<Vec<T>> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Parameter(format!("keep fraction must lie in (0, 1], got {keep_fraction}")));
    }
    let counts = counts_of(items, class_count);
    let max = counts.iter().copied().max().unwrap_or(0) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![true; items.len()];
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 || (n as f64) >= minority_threshold * max {
            continue;
        }
        let target = ((n as f64 * keep_fraction).round() as usize).max(1);
        let mut members: Vec<usize> = (0..items.len()).filter(|&i| items[i].label() == c).collect();
        members.shuffle(&mut rng);
        for &i in &members[target..] {
            keep[i] = false;
        }
    }
    Ok(items.iter().zip(keep).filter(|(_, k)| *k).map(|(it, _)| it.clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::largest_remainder;

    #[derive(Clone, Debug, PartialEq)]
    struct Item(usize);
    impl Labeled for Item {
        fn label(&self) -> usize {
            self.0
        }
        fn subject(&self) -> &str {
            "s"
        }
    }

    fn dataset(counts: &[usize]) -> Vec<Item> {
        counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(Item(c), n)).collect()
    }

    const GOAT: [f64; 5] = [0.4315, 0.0087, 0.3535, 0.0044, 0.2019];

    #[test]
    fn goat_ratio() {
        let counts = largest_remainder(&GOAT, 42_943);
        let stats = ClassStats::from_counts(counts).unwrap();
        assert!((stats.imbalance_ratio - 98.05).abs() < 0.05, "{}", stats.imbalance_ratio);
    }

    #[test]
    fn cattle_ratio() {
        let counts = largest_remainder(&[0.06, 0.16, 0.54, 0.20, 0.04], 10_429);
        let stats = ClassStats::from_counts(counts).unwrap();
        // percentages are rounded to whole numbers, so only ~0.1 agreement is possible
        assert!((stats.imbalance_ratio - 13.44).abs() < 0.1, "{}", stats.imbalance_ratio);
    }

    #[test]
    fn balanced_ratio_is_one() {
        let stats = class_stats(&dataset(&[7, 7]), 2).unwrap();
        assert_eq!(stats.imbalance_ratio, 1.0);
        assert!(class_stats(&dataset(&[7, 0]), 2).is_err());
        assert!(class_stats::<Item>(&[], 2).is_err());
    }

    #[test]
    fn keep_all_is_identity() {
        let d = dataset(&[50, 3, 20]);
        assert_eq!(rebalance_minority(&d, 3, 1.0, 0.1, 1).unwrap(), d);
        assert!(rebalance_minority(&d, 3, 0.0, 0.1, 1).is_err());
    }

    #[test]
    fn four_samples_halved() {
        let d = dataset(&[100, 4]);
        let out = rebalance_minority(&d, 2, 0.5, 0.1, 5).unwrap();
        assert_eq!(counts_of(&out, 2), vec![100, 2]);
    }

    #[test]
    fn halving_goat_minorities_doubles_ratio() {
        let d = dataset(&largest_remainder(&GOAT, 42_943));
        let before = class_stats(&d, 5).unwrap().imbalance_ratio;
        let out = rebalance_minority(&d, 5, 0.5, 0.05, 2).unwrap();
        let after = class_stats(&out, 5).unwrap().imbalance_ratio;
        assert!((after / before - 2.0).abs() < 0.02, "{before} -> {after}");
        let out = rebalance_minority(&d, 5, 0.2, 0.05, 2).unwrap();
        let after = class_stats(&out, 5).unwrap().imbalance_ratio;
        assert!((after / before - 5.0).abs() < 0.05, "{before} -> {after}");
    }
}
