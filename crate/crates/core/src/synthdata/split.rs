use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

/// Sorted sample indices of one cross-validation fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified `k`-fold split over `labels`.
///
/// Each class is shuffled and dealt round-robin into the folds; the dealing
/// cursor carries over from one class to the next, so both per-class and total
/// fold sizes differ by at most one.
pub fn kfold_split(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::contract(format!("k-fold needs k ≥ 2, got {k}")));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    if let Some((class, members)) = by_class
        .iter()
        .enumerate()
        .find(|(_, m)| !m.is_empty() && m.len() < k)
    {
        return Err(Error::contract(format!(
            "class {class} has {} samples, fewer than k = {k}",
            members.len()
        )));
    }
    let mut rng = rng::stream(seed, &[rng::tag::SPLIT]);
    let mut tests: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut cursor = 0;
    for members in &mut by_class {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            tests[cursor % k].push(i);
            cursor += 1;
        }
    }
    Ok(tests
        .into_iter()
        .map(|mut test| {
            test.sort_unstable();
            let train = (0..labels.len())
                .filter(|i| test.binary_search(i).is_err())
                .collect();
            Fold { train, test }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hundred_samples_five_folds() {
        let labels: Vec<usize> = (0..100).map(|i| i / 25).collect();
        let folds = kfold_split(&labels, 5, 1).unwrap();
        let mut seen = vec![false; 100];
        for f in &folds {
            assert_eq!(f.test.len(), 20);
            for &i in &f.test {
                assert!(!seen[i]);
                seen[i] = true;
            }
            let mut all: Vec<usize> = f.train.iter().chain(&f.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..100).collect::<Vec<_>>());
        }
        assert!(seen.into_iter().all(|s| s));
    }

    #[test]
    fn small_class_is_rejected() {
        let labels = vec![0, 0, 0, 1, 1, 1, 1, 1];
        assert!(kfold_split(&labels, 4, 0).is_err());
        assert!(kfold_split(&labels, 3, 0).is_ok());
        assert!(kfold_split(&labels, 1, 0).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        assert_eq!(kfold_split(&labels, 5, 3).unwrap(), kfold_split(&labels, 5, 3).unwrap());
        assert_ne!(kfold_split(&labels, 5, 3).unwrap(), kfold_split(&labels, 5, 4).unwrap());
    }

    proptest! {
        #[test]
        fn stratified_partition(
            counts in prop::collection::vec(5usize..30, 1..5),
            k in 2usize..=5,
            seed in any::<u64>(),
        ) {
            let labels: Vec<usize> = counts
                .iter()
                .enumerate()
                .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
                .collect();
            let folds = kfold_split(&labels, k, seed).unwrap();
            prop_assert_eq!(folds.len(), k);
            let total: usize = folds.iter().map(|f| f.test.len()).sum();
            prop_assert_eq!(total, labels.len());
            let sizes: Vec<usize> = folds.iter().map(|f| f.test.len()).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            for class in 0..counts.len() {
                let per: Vec<usize> = folds
                    .iter()
                    .map(|f| f.test.iter().filter(|&&i| labels[i] == class).count())
                    .collect();
                prop_assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1);
            }
        }
    }
}
