use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified `k`-fold split of `labels`. Falls back to an unstratified
/// shuffle split when some class has fewer than `k` members.
pub fn make_folds(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 || k > labels.len() {
        return Err(Error::Config(format!(
            "fold count {k} must lie in 2..={}",
            labels.len()
        )));
    }
    let mut rng = substream(seed, "folds", 0);
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut assignment = vec![0usize; labels.len()];
    if by_class.values().all(|members| members.len() >= k) {
        // deal each shuffled class round-robin, continuing the counter so
        // fold sizes differ by at most one overall
        let mut next = 0usize;
        for members in by_class.values_mut() {
            members.shuffle(&mut rng);
            for &i in members.iter() {
                assignment[i] = next % k;
                next += 1;
            }
        }
    } else {
        log::warn!("a class has fewer than {k} members; using unstratified folds");
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.shuffle(&mut rng);
        for (pos, &i) in order.iter().enumerate() {
            assignment[i] = pos % k;
        }
    }
    Ok((0..k)
        .map(|f| {
            let (test, train) = (0..labels.len()).partition(|&i| assignment[i] == f);
            Fold { train, test }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_folds_of_five() {
        let labels = [0, 1, 0, 1, 0, 1, 0, 1, 0, 1];
        let folds = make_folds(&labels, 2, 0).unwrap();
        assert_eq!(folds.len(), 2);
        assert_eq!(folds[0].test.len(), 5);
        assert_eq!(folds[1].test.len(), 5);
        assert!(folds[0].test.iter().all(|i| !folds[1].test.contains(i)));
    }

    #[test]
    fn partition_and_determinism() {
        let labels: Vec<usize> = (0..37).map(|i| i % 3).collect();
        let folds = make_folds(&labels, 10, 4).unwrap();
        let mut all: Vec<usize> = folds.iter().flat_map(|f| f.test.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..37).collect::<Vec<_>>());
        for f in &folds {
            assert_eq!(f.train.len() + f.test.len(), 37);
            assert!(f.train.iter().all(|i| !f.test.contains(i)));
        }
        assert_eq!(folds, make_folds(&labels, 10, 4).unwrap());
    }

    #[test]
    fn stratification_keeps_class_ratio() {
        let labels: Vec<usize> = (0..40).map(|i| usize::from(i % 4 == 0)).collect();
        for f in make_folds(&labels, 5, 9).unwrap() {
            let ones = f.test.iter().filter(|&&i| labels[i] == 1).count();
            assert_eq!(ones, 2);
        }
    }

    #[test]
    fn small_class_falls_back() {
        let labels = [0, 0, 0, 0, 1];
        let folds = make_folds(&labels, 3, 0).unwrap();
        assert_eq!(folds.iter().map(|f| f.test.len()).sum::<usize>(), 5);
    }

    #[test]
    fn rejects_bad_k() {
        assert!(make_folds(&[0, 1], 1, 0).is_err());
        assert!(make_folds(&[0, 1], 3, 0).is_err());
    }
}
