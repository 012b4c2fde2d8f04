use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{Result, ValidationError};
use crate::ensemble::Ensemble;
use crate::metrics::MiScreen;
use crate::volume::{augment, AugmentParams};
use crate::{LabeledDataset, Volume};

/// Where the positives of a training batch come from.
#[derive(Debug, Clone, Copy)]
pub enum PositiveSource<'a> {
    /// Real training positives, augmented on the fly.
    RealAugmented {
        positives: &'a [Volume],
        augment: &'a AugmentParams,
    },
    /// Screened ensemble samples, used as drawn.
    EnsembleSynthetic {
        ensemble: &'a Ensemble,
        screen: &'a MiScreen,
    },
}

/// Origin of an evaluation region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    /// Unmodified acquired data.
    Acquired,
    /// Produced by augmenting a region of `subject`.
    Augmented { subject: u32 },
    /// Sampled from an ensemble trained on `trained_on`.
    Synthetic { trained_on: Vec<u32> },
}

/// A labeled evaluation region.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub volume: Volume,
    pub positive: bool,
    pub subject: u32,
    pub provenance: Provenance,
}

/// The regions of `ds`, tagged as acquired.
pub fn regions_of(ds: &LabeledDataset) -> Vec<Region> {
    let np = ds.positives.len();
    ds.positives
        .iter()
        .chain(&ds.negatives)
        .enumerate()
        .map(|(i, v)| Region {
            volume: v.clone(),
            positive: i < np,
            subject: ds.subject_ids[i],
            provenance: Provenance::Acquired,
        })
        .collect()
}

/// Checks that every test region is unmodified acquired data and that no
/// test subject contributed to training, either as augmentation input or as
/// ensemble training data.
pub fn audit_test_purity(
    test: &[Region],
    train_subjects: &[u32],
    ensemble_subjects: &[u32],
) -> Result<()> {
    for r in test {
        if r.provenance != Provenance::Acquired {
            return Err(ValidationError::ProvenanceViolation(format!(
                "test region of subject {} has provenance {:?}",
                r.subject, r.provenance
            )));
        }
        if train_subjects.contains(&r.subject) {
            return Err(ValidationError::ProvenanceViolation(format!(
                "test subject {} is also a training subject",
                r.subject
            )));
        }
        if ensemble_subjects.contains(&r.subject) {
            return Err(ValidationError::ProvenanceViolation(format!(
                "ensemble was trained on test subject {}",
                r.subject
            )));
        }
    }
    Ok(())
}

/// `batch_size / 2` positives from `source` and as many real negatives,
/// shuffled together. Labels are 1 for positives and 0 for negatives.
pub fn paired_batch(
    source: &PositiveSource,
    negatives: &[Volume],
    batch_size: usize,
    rng: &mut dyn RngCore,
) -> Result<(Vec<Volume>, Vec<f64>)> {
    if batch_size == 0 || batch_size % 2 != 0 {
        return Err(ValidationError::InvalidConfig(format!(
            "batch size {batch_size} must be even and positive"
        )));
    }
    if negatives.is_empty() {
        return Err(ValidationError::EmptyNegatives);
    }
    let half = batch_size / 2;
    let mut items: Vec<(Volume, f64)> = Vec::with_capacity(batch_size);
    match source {
        PositiveSource::RealAugmented {
            positives,
            augment: params,
        } => {
            if positives.is_empty() {
                return Err(ValidationError::NoPositives);
            }
            for _ in 0..half {
                let v = &positives[rng.gen_range(0..positives.len())];
                items.push((augment(v, params, rng), 1.0));
            }
        }
        PositiveSource::EnsembleSynthetic { ensemble, screen } => {
            for _ in 0..half {
                let (v, _) = ensemble.sample(screen, rng)?;
                items.push((v, 1.0));
            }
        }
    }
    for _ in 0..half {
        items.push((negatives[rng.gen_range(0..negatives.len())].clone(), 0.0));
    }
    items.shuffle(rng);
    Ok(items.into_iter().unzip())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn vol(x: f64) -> Volume {
        Volume::from_voxels([2, 2, 2], vec![x; 8])
    }

    #[test]
    fn batches_are_balanced() {
        let pos = vec![vol(1.0), vol(0.9)];
        let neg = vec![vol(0.1), vol(0.2), vol(0.3)];
        let id = AugmentParams::identity();
        let src = PositiveSource::RealAugmented {
            positives: &pos,
            augment: &id,
        };
        let mut r = rng::seeded(0);
        for size in [2, 8, 16] {
            let (vs, labels) = paired_batch(&src, &neg, size, &mut r).unwrap();
            assert_eq!(vs.len(), size);
            assert_eq!(labels.iter().filter(|&&l| l == 1.0).count(), size / 2);
            assert_eq!(labels.iter().filter(|&&l| l == 0.0).count(), size / 2);
            // Identity augmentation passes raw regions through.
            for (v, l) in vs.iter().zip(&labels) {
                let pool = if *l == 1.0 { &pos } else { &neg };
                assert!(pool.contains(v));
            }
        }
        assert!(matches!(
            paired_batch(&src, &[], 4, &mut r),
            Err(ValidationError::EmptyNegatives)
        ));
        assert!(paired_batch(&src, &neg, 3, &mut r).is_err());
    }

    #[test]
    fn audit_flags_contamination() {
        let ds = LabeledDataset {
            positives: vec![vol(1.0)],
            negatives: vec![vol(0.0)],
            subject_ids: vec![7, 7],
            ..Default::default()
        };
        let mut test = regions_of(&ds);
        assert!(test[0].positive && !test[1].positive);
        audit_test_purity(&test, &[1, 2], &[1, 2]).unwrap();
        assert!(audit_test_purity(&test, &[7], &[]).is_err());
        assert!(audit_test_purity(&test, &[], &[7]).is_err());
        test[0].provenance = Provenance::Augmented { subject: 7 };
        assert!(audit_test_purity(&test, &[], &[]).is_err());
    }
}
