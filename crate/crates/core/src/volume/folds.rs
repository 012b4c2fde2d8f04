use rand::seq::SliceRandom;

use super::{LabeledDataset, Result, VolumeError};
use crate::rng;

/// One cross-validation partition.
#[derive(Debug, Clone)]
pub struct Fold {
    pub index: usize,
    pub test_subjects: Vec<u32>,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

/// Subject-wise k-fold split.
///
/// Subjects are shuffled with `seed` and dealt into `k` folds whose sizes
/// differ by at most one; the smaller folds come first (158 subjects over 5
/// folds gives 31, 31, 32, 32, 32).
pub fn split_folds(ds: &LabeledDataset, k: usize, seed: u64) -> Result<Vec<Fold>> {
    ds.validate()?;
    let mut subjects = ds.subjects();
    if k < 2 || subjects.len() < k {
        return Err(VolumeError::TooFewSubjects {
            subjects: subjects.len(),
            k,
        });
    }
    let mut rng = rng::seeded(rng::derive_seed(seed, rng::stream::FOLDS));
    subjects.shuffle(&mut rng);

    let base = subjects.len() / k;
    let larger = subjects.len() % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for index in 0..k {
        let size = base + usize::from(index >= k - larger);
        let mut test_subjects = subjects[start..start + size].to_vec();
        start += size;
        test_subjects.sort_unstable();
        let in_test = |s: u32| test_subjects.binary_search(&s).is_ok();
        let test = ds.filter_subjects(in_test);
        let train = ds.filter_subjects(|s| !in_test(s));
        folds.push(Fold {
            index,
            test_subjects,
            train,
            test,
        });
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Volume;
    use std::collections::HashMap;

    fn dataset(subjects: u32, regions_per_subject: u32) -> LabeledDataset {
        let mut ds = LabeledDataset::default();
        let mut negs = Vec::new();
        let mut tag = 0.0;
        for s in 0..subjects {
            for _ in 0..regions_per_subject {
                tag += 1.0;
                ds.positives.push(Volume::from_voxels([1, 1, 1], vec![tag]));
                ds.subject_ids.push(s);
                tag += 1.0;
                ds.negatives.push(Volume::from_voxels([1, 1, 1], vec![tag]));
                negs.push(s);
            }
        }
        ds.subject_ids.extend(negs);
        ds
    }

    #[test]
    fn fold_sizes_match_reference_cohort() {
        let ds = dataset(158, 1);
        let folds = split_folds(&ds, 5, 1).unwrap();
        let sizes: Vec<usize> = folds.iter().map(|f| f.test_subjects.len()).collect();
        assert_eq!(sizes, vec![31, 31, 32, 32, 32]);
    }

    #[test]
    fn leave_one_subject_out() {
        let ds = dataset(6, 2);
        let folds = split_folds(&ds, 6, 3).unwrap();
        assert!(folds.iter().all(|f| f.test_subjects.len() == 1));
        assert!(folds.iter().all(|f| f.test.region_count() == 4));
    }

    #[test]
    fn every_region_lands_in_exactly_one_test_fold() {
        let ds = dataset(23, 3);
        let folds = split_folds(&ds, 4, 9).unwrap();
        let mut seen: HashMap<u64, usize> = HashMap::new();
        for f in &folds {
            for v in f.test.positives.iter().chain(&f.test.negatives) {
                *seen.entry(v.voxels()[0].to_bits()).or_default() += 1;
            }
            // Train and test never share a subject.
            let train_subjects = f.train.subjects();
            assert!(f
                .test_subjects
                .iter()
                .all(|s| train_subjects.binary_search(s).is_err()));
            assert_eq!(
                f.train.region_count() + f.test.region_count(),
                ds.region_count()
            );
        }
        assert_eq!(seen.len(), ds.region_count());
        assert!(seen.values().all(|&c| c == 1));
    }

    #[test]
    fn deterministic_given_seed() {
        let ds = dataset(10, 1);
        let a: Vec<_> = split_folds(&ds, 3, 4)
            .unwrap()
            .into_iter()
            .map(|f| f.test_subjects)
            .collect();
        let b: Vec<_> = split_folds(&ds, 3, 4)
            .unwrap()
            .into_iter()
            .map(|f| f.test_subjects)
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_subjects() {
        let ds = dataset(3, 1);
        assert!(matches!(
            split_folds(&ds, 4, 0),
            Err(VolumeError::TooFewSubjects { .. })
        ));
        assert!(split_folds(&ds, 1, 0).is_err());
    }
}
