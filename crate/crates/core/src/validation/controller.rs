use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::classifier::{train_validation_model, Classifier, ValidationConfig};
use super::froc::{
    afp_at_sensitivity, check_validation_criterion, froc_curve, mean_curve, FrocCurve,
    ValidationVerdict,
};
use super::source::{audit_test_purity, regions_of, PositiveSource, Region};
use super::{Result, ValidationError};
use crate::ensemble::{grow, CalibrationConfig, Ensemble, EnsembleConfig};
use crate::gan::GanHyperParams;
use crate::metrics::MiScreen;
use crate::rng::{self, stream};
use crate::volume::split_folds;
use crate::LabeledDataset;

/// Sensitivities at which fold curves are averaged.
fn sensitivity_grid() -> Vec<f64> {
    (1..=100).map(|i| i as f64 / 100.0).collect()
}

fn ensemble_config(
    base: &EnsembleConfig,
    calibration: Option<&CalibrationConfig>,
    train: &LabeledDataset,
    seed: u64,
) -> Result<EnsembleConfig> {
    Ok(match calibration {
        Some(c) => c.apply(base, &train.positives, seed)?,
        None => base.clone(),
    })
}

fn evaluate(model: &Classifier, test: &[Region], s: f64) -> Result<(FrocCurve, f64)> {
    let curve = froc_curve(model, test)?;
    let afp = afp_at_sensitivity(&curve, s)?;
    Ok((curve, afp))
}

fn baseline(
    train: &LabeledDataset,
    test: &[Region],
    cfg: &ValidationConfig,
    seed: u64,
) -> Result<(FrocCurve, f64)> {
    let src = PositiveSource::RealAugmented {
        positives: &train.positives,
        augment: &cfg.augment,
    };
    let model = train_validation_model(&src, &train.negatives, cfg, seed)?;
    evaluate(&model, test, cfg.sensitivity)
}

fn synthetic(
    ens: &Ensemble,
    screen: &MiScreen,
    train: &LabeledDataset,
    test: &[Region],
    cfg: &ValidationConfig,
    seed: u64,
) -> Result<(FrocCurve, f64)> {
    let src = PositiveSource::EnsembleSynthetic {
        ensemble: ens,
        screen,
    };
    let model = train_validation_model(&src, &train.negatives, cfg, seed)?;
    evaluate(&model, test, cfg.sensitivity)
}

/// Test regions of a fold after checking they are untouched by training.
fn audited_test_regions(train: &LabeledDataset, test: &LabeledDataset) -> Result<Vec<Region>> {
    let regions = regions_of(test);
    let train_subjects = train.subjects();
    audit_test_purity(&regions, &train_subjects, &train_subjects)?;
    Ok(regions)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub gan: GanHyperParams,
    pub ensemble: EnsembleConfig,
    /// When set, `omega` and `phi` are recalibrated on the training positives.
    pub calibration: Option<CalibrationConfig>,
    pub validation: ValidationConfig,
    pub max_rounds: usize,
    /// Stop at the first passing round; otherwise run all rounds.
    pub stop_on_pass: bool,
    pub seed: u64,
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_rounds == 0 {
            return Err(ValidationError::InvalidConfig(
                "max_rounds must be at least 1".into(),
            ));
        }
        self.validation.validate()?;
        self.ensemble.validate()?;
        self.gan
            .validate()
            .map_err(|e| ValidationError::InvalidConfig(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based round index.
    pub round: usize,
    pub ensemble_size: usize,
    pub candidate_afp: f64,
    pub verdict: ValidationVerdict,
    pub curve: FrocCurve,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerReport {
    pub ensemble: Ensemble,
    pub baseline_curve: FrocCurve,
    pub baseline_afp: f64,
    pub rounds: Vec<RoundRecord>,
    /// First round whose verdict passed.
    pub passing_round: Option<usize>,
}

impl ControllerReport {
    pub fn passed(&self) -> bool {
        self.passing_round.is_some()
    }
}

/// Grows an ensemble on `train` by `growth_increment` per round and, after
/// each round, trains a classifier on its samples and compares its AFP on
/// `test` against a classifier trained on augmented real positives.
///
/// With a non-empty `initial` ensemble (which must have been trained on
/// `train` only) the first round evaluates it before any growth, and its own
/// configuration is used instead of `cfg.ensemble`.
///
/// Both classifiers use the same initialization and step budget. Growth
/// failures ([`crate::ensemble::EnsembleError::GrowthStalled`]) propagate.
pub fn growth_controller(
    train: &LabeledDataset,
    test: &LabeledDataset,
    cfg: &ControllerConfig,
    initial: Option<Ensemble>,
    mut progress: Option<&mut dyn FnMut(&RoundRecord)>,
) -> Result<ControllerReport> {
    cfg.validate()?;
    let test_regions = audited_test_regions(train, test)?;
    let val = &cfg.validation;
    let model_seed = rng::derive_seed(cfg.seed, stream::VALIDATION);
    let (baseline_curve, baseline_afp) = baseline(train, &test_regions, val, model_seed)?;
    info!(
        "baseline AFP {baseline_afp:.3} at sensitivity {}",
        val.sensitivity
    );

    let mut ens = match initial {
        Some(e) => e,
        None => {
            let ens_cfg =
                ensemble_config(&cfg.ensemble, cfg.calibration.as_ref(), train, cfg.seed)?;
            Ensemble::new(ens_cfg, rng::derive_seed(cfg.seed, stream::GROWTH))?
        }
    };
    let screen = MiScreen::new(&train.positives, ens.config.histogram)
        .map_err(crate::ensemble::EnsembleError::from)?;
    let mut rounds = Vec::new();
    let mut passing_round = None;
    let increment = ens.config.growth_increment;
    let mut skip_growth = !ens.is_empty();
    for round in 1..=cfg.max_rounds {
        if !std::mem::take(&mut skip_growth) {
            grow(&mut ens, &train.positives, &cfg.gan, increment, None)?;
        }
        let (curve, candidate_afp) =
            synthetic(&ens, &screen, train, &test_regions, val, model_seed)?;
        let verdict =
            check_validation_criterion(baseline_afp, candidate_afp, val.tolerance, val.sensitivity);
        info!(
            "round {round}: {} components, AFP {candidate_afp:.3} ({})",
            ens.len(),
            if verdict.passed { "pass" } else { "fail" }
        );
        let record = RoundRecord {
            round,
            ensemble_size: ens.len(),
            candidate_afp,
            verdict,
            curve,
        };
        if let Some(sink) = progress.as_deref_mut() {
            sink(&record);
        }
        rounds.push(record);
        if verdict.passed && passing_round.is_none() {
            passing_round = Some(round);
            if cfg.stop_on_pass {
                break;
            }
        }
    }
    Ok(ControllerReport {
        ensemble: ens,
        baseline_curve,
        baseline_afp,
        rounds,
        passing_round,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossvalConfig {
    pub k: usize,
    pub gan: GanHyperParams,
    pub ensemble: EnsembleConfig,
    pub calibration: Option<CalibrationConfig>,
    pub validation: ValidationConfig,
    /// Components grown per fold.
    pub ensemble_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub test_subjects: Vec<u32>,
    pub baseline: FrocCurve,
    pub synthetic: FrocCurve,
    pub verdict: ValidationVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossvalReport {
    pub folds: Vec<FoldReport>,
    pub mean_baseline: FrocCurve,
    pub mean_synthetic: FrocCurve,
    /// Per-fold ensembles, in fold order.
    #[serde(skip)]
    pub ensembles: Vec<Ensemble>,
}

/// Subject-wise k-fold evaluation: per fold, grows an ensemble on the
/// training subjects and evaluates baseline and synthetic-source classifiers
/// on the untouched test subjects.
pub fn crossval_run(ds: &LabeledDataset, cfg: &CrossvalConfig) -> Result<CrossvalReport> {
    cfg.validation.validate()?;
    if cfg.ensemble_size == 0 {
        return Err(ValidationError::InvalidConfig(
            "ensemble_size must be at least 1".into(),
        ));
    }
    let val = &cfg.validation;
    let folds = split_folds(ds, cfg.k, cfg.seed)?;
    // Folds are independent; results are collected in fold order.
    let results: Vec<Result<(FoldReport, Ensemble)>> = folds
        .par_iter()
        .map(|fold| -> Result<(FoldReport, Ensemble)> {
            let fold_seed = rng::derive_seed(cfg.seed, fold.index as u64);
            let test_regions = audited_test_regions(&fold.train, &fold.test)?;
            let model_seed = rng::derive_seed(fold_seed, stream::VALIDATION);
            let (base_curve, base_afp) = baseline(&fold.train, &test_regions, val, model_seed)?;

            let ens_cfg = ensemble_config(
                &cfg.ensemble,
                cfg.calibration.as_ref(),
                &fold.train,
                fold_seed,
            )?;
            let screen = MiScreen::new(&fold.train.positives, ens_cfg.histogram)
                .map_err(crate::ensemble::EnsembleError::from)?;
            let mut ens = Ensemble::new(ens_cfg, rng::derive_seed(fold_seed, stream::GROWTH))?;
            grow(
                &mut ens,
                &fold.train.positives,
                &cfg.gan,
                cfg.ensemble_size,
                None,
            )?;
            let (syn_curve, syn_afp) =
                synthetic(&ens, &screen, &fold.train, &test_regions, val, model_seed)?;
            let verdict =
                check_validation_criterion(base_afp, syn_afp, val.tolerance, val.sensitivity);
            info!(
                "fold {}: baseline AFP {base_afp:.3}, synthetic AFP {syn_afp:.3}",
                fold.index
            );
            Ok((
                FoldReport {
                    fold: fold.index,
                    test_subjects: fold.test_subjects.clone(),
                    baseline: base_curve,
                    synthetic: syn_curve,
                    verdict,
                },
                ens,
            ))
        })
        .collect();
    let mut reports = Vec::with_capacity(folds.len());
    let mut ensembles = Vec::with_capacity(folds.len());
    for r in results {
        let (report, ens) = r?;
        reports.push(report);
        ensembles.push(ens);
    }
    let grid = sensitivity_grid();
    let base: Vec<FrocCurve> = reports.iter().map(|r| r.baseline.clone()).collect();
    let syn: Vec<FrocCurve> = reports.iter().map(|r| r.synthetic.clone()).collect();
    Ok(CrossvalReport {
        mean_baseline: mean_curve(&base, &grid)?,
        mean_synthetic: mean_curve(&syn, &grid)?,
        folds: reports,
        ensembles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gan::Architecture;
    use crate::validation::paired_batch;
    use crate::volume::{generate_phantom_dataset, PhantomConfig};

    fn dataset() -> LabeledDataset {
        generate_phantom_dataset(&PhantomConfig {
            volume_dims: [4, 4, 4],
            n_subjects: 10,
            n_modes: 1,
            lesions_per_subject_mean: 2.0,
            ..Default::default()
        })
        .unwrap()
    }

    fn gan() -> GanHyperParams {
        GanHyperParams {
            latent_dim: 8,
            epochs: 2,
            batch_size: 4,
            checkpoint_every_n_epochs: 1,
            architecture: Architecture {
                generator: [4, 2],
                discriminator: [2, 4],
            },
            ..Default::default()
        }
    }

    fn lenient() -> EnsembleConfig {
        EnsembleConfig {
            omega: 1e9,
            phi: f64::INFINITY,
            m_samples: 8,
            growth_increment: 2,
            ..Default::default()
        }
    }

    fn val(tolerance: f64) -> ValidationConfig {
        ValidationConfig {
            steps: 10,
            batch_size: 8,
            tolerance,
            ..Default::default()
        }
    }

    #[test]
    fn controller_runs_all_rounds_unless_told_to_stop() {
        let ds = dataset();
        let folds = split_folds(&ds, 2, 0).unwrap();
        let mut cfg = ControllerConfig {
            gan: gan(),
            ensemble: lenient(),
            calibration: None,
            validation: val(1e6),
            max_rounds: 3,
            stop_on_pass: true,
            seed: 1,
        };
        let report = growth_controller(&folds[0].train, &folds[0].test, &cfg, None, None).unwrap();
        assert_eq!(report.passing_round, Some(1));
        assert_eq!(report.rounds.len(), 1);
        assert_eq!(report.ensemble.len(), 2);

        cfg.stop_on_pass = false;
        let mut seen = Vec::new();
        let mut sink = |r: &RoundRecord| seen.push(r.round);
        let report =
            growth_controller(&folds[0].train, &folds[0].test, &cfg, None, Some(&mut sink))
                .unwrap();
        assert_eq!(seen, vec![1, 2, 3]);
        let sizes: Vec<usize> = report.rounds.iter().map(|r| r.ensemble_size).collect();
        assert_eq!(sizes, vec![2, 4, 6]);
        assert_eq!(report.passing_round, Some(1));
        assert!(report
            .rounds
            .iter()
            .all(|r| r.verdict.baseline_afp == report.baseline_afp));
    }

    #[test]
    fn controller_evaluates_an_initial_ensemble_before_growing() {
        let ds = dataset();
        let folds = split_folds(&ds, 2, 0).unwrap();
        let mut ens = Ensemble::new(lenient(), 5).unwrap();
        grow(&mut ens, &folds[0].train.positives, &gan(), 1, None).unwrap();
        let cfg = ControllerConfig {
            gan: gan(),
            ensemble: lenient(),
            calibration: None,
            validation: val(1e6),
            max_rounds: 2,
            stop_on_pass: false,
            seed: 1,
        };
        let report =
            growth_controller(&folds[0].train, &folds[0].test, &cfg, Some(ens), None).unwrap();
        let sizes: Vec<usize> = report.rounds.iter().map(|r| r.ensemble_size).collect();
        assert_eq!(sizes, vec![1, 3]);
    }

    #[test]
    fn controller_rejects_contaminated_test_set() {
        let ds = dataset();
        let cfg = ControllerConfig {
            gan: gan(),
            ensemble: lenient(),
            calibration: None,
            validation: val(1.0),
            max_rounds: 1,
            stop_on_pass: true,
            seed: 1,
        };
        assert!(matches!(
            growth_controller(&ds, &ds, &cfg, None, None),
            Err(ValidationError::ProvenanceViolation(_))
        ));
    }

    #[test]
    fn crossval_reports_every_fold_and_their_mean() {
        let ds = dataset();
        let cfg = CrossvalConfig {
            k: 2,
            gan: gan(),
            ensemble: lenient(),
            calibration: None,
            validation: val(1.0),
            ensemble_size: 1,
            seed: 2,
        };
        let report = crossval_run(&ds, &cfg).unwrap();
        assert_eq!(report.folds.len(), 2);
        assert_eq!(report.ensembles.len(), 2);
        for (i, p) in report.mean_synthetic.points.iter().enumerate() {
            let s = p.sensitivity;
            let expect = report
                .folds
                .iter()
                .map(|f| afp_at_sensitivity(&f.synthetic, s).unwrap())
                .sum::<f64>()
                / 2.0;
            assert!((p.afp - expect).abs() < 1e-12, "grid point {i}");
        }
        let mut all: Vec<u32> = report
            .folds
            .iter()
            .flat_map(|f| f.test_subjects.clone())
            .collect();
        all.sort_unstable();
        assert_eq!(all, ds.subjects());
    }

    #[test]
    fn synthetic_positives_are_not_augmented() {
        let ds = dataset();
        let mut ens = Ensemble::new(lenient(), 3).unwrap();
        grow(&mut ens, &ds.positives, &gan(), 2, None).unwrap();
        let screen = MiScreen::new(&ds.positives, ens.config.histogram).unwrap();
        let src = PositiveSource::EnsembleSynthetic {
            ensemble: &ens,
            screen: &screen,
        };
        let (vs, labels) = paired_batch(&src, &ds.negatives, 8, &mut rng::seeded(4)).unwrap();
        let mut r = rng::seeded(4);
        let expected = ens.sample_many(&screen, 4, &mut r).unwrap();
        let got: Vec<_> = vs
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| l == 1.0)
            .map(|(v, _)| v)
            .collect();
        assert_eq!(got.len(), 4);
        assert!(got.iter().all(|v| expected.contains(v)));
    }
}
