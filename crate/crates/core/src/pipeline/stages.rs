use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::ledger::RunLedger;
use super::svg;
use super::{PipelineError, Result};
use crate::embedding::{
    class_centroids, mixing_score, mode_coverage, pca_fit, pca_transform, tsne, write_embedding_csv,
};
use crate::ensemble::{grow, load_ensemble, save_ensemble, Ensemble, ENSEMBLE_MANIFEST};
use crate::gan::{train_gan, write_checkpoint, GanCheckpoint, Generator};
use crate::metrics::{frechet_distance, gaussian_stats, MiScreen};
use crate::rng::{self, stream};
use crate::validation::{
    afp_at_sensitivity, crossval_run, growth_controller, write_froc_csv, ControllerConfig,
    CrossvalConfig, FrocCurve, ValidationVerdict,
};
use crate::volume::io::{read_dataset, write_volume, MANIFEST_FILE};
use crate::volume::{generate_phantom_dataset, io::write_dataset, split_folds};
use crate::LabeledDataset;

/// Stage names in pipeline order, as recorded in the ledger.
pub const STAGE_NAMES: [&str; 7] = [
    "phantom",
    "train-gan",
    "grow",
    "sample",
    "validate",
    "crossval",
    "embed",
];

/// Sensitivities of the AFP table.
const TABLE_SENSITIVITIES: [f64; 4] = [0.75, 0.80, 0.85, 0.90];

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(PipelineError::MissingUpstream(path))
    }
}

fn write_text(path: PathBuf, text: &str, outputs: &mut Vec<PathBuf>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&path, text)?;
    outputs.push(path);
    Ok(())
}

fn write_json<T: Serialize>(path: PathBuf, value: &T, outputs: &mut Vec<PathBuf>) -> Result<()> {
    let json = serde_json::to_string_pretty(value).expect("summary serializes");
    write_text(path, &(json + "\n"), outputs)
}

/// Opens the ledger, runs `body` and records its outputs, including when
/// `body` reports a failure after writing them.
fn run_stage<T>(
    cfg: &RunConfig,
    dir: &Path,
    name: &str,
    body: impl FnOnce(&mut Vec<PathBuf>) -> Result<T>,
) -> Result<T> {
    let mut ledger = RunLedger::open(dir, cfg)?;
    std::fs::create_dir_all(dir)?;
    let start = Instant::now();
    let mut outputs = Vec::new();
    let result = body(&mut outputs);
    let recordable = match &result {
        Ok(_) => true,
        Err(e) => matches!(
            e,
            PipelineError::GrowthStalled { .. } | PipelineError::ValidationFailed { .. }
        ),
    };
    if recordable {
        ledger.record(dir, name, start.elapsed().as_secs_f64(), &outputs)?;
        ledger.save(dir)?;
    }
    result
}

/// Held-out subjects of the single-split stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub test_subjects: Vec<u32>,
    pub train_subjects: Vec<u32>,
}

impl Split {
    pub fn apply(&self, ds: &LabeledDataset) -> (LabeledDataset, LabeledDataset) {
        let test = ds.filter_subjects(|s| self.test_subjects.binary_search(&s).is_ok());
        let train = ds.filter_subjects(|s| self.test_subjects.binary_search(&s).is_err());
        (train, test)
    }
}

fn load_dataset(dir: &Path) -> Result<LabeledDataset> {
    let d = dir.join("dataset");
    require(d.join(MANIFEST_FILE))?;
    Ok(read_dataset(d)?)
}

pub fn load_split(dir: &Path) -> Result<(LabeledDataset, LabeledDataset, Split)> {
    let ds = load_dataset(dir)?;
    let path = require(dir.join("split.json"))?;
    let split: Split = serde_json::from_str(&std::fs::read_to_string(&path)?)
        .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
    let (train, test) = split.apply(&ds);
    Ok((train, test, split))
}

fn load_stage_ensemble(dir: &Path) -> Result<Ensemble> {
    let d = dir.join("ensemble");
    require(d.join(ENSEMBLE_MANIFEST))?;
    Ok(load_ensemble(d)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSummary {
    pub positives: usize,
    pub negatives: usize,
    pub subjects: usize,
    pub lesions_per_subject_mean: f64,
    pub diameter_mean_mm: f64,
    pub diameter_median_mm: f64,
    pub mode_counts: Vec<usize>,
}

/// Generates the phantom dataset and the held-out split.
pub fn stage_phantom(cfg: &RunConfig, dir: &Path) -> Result<PhantomSummary> {
    run_stage(cfg, dir, "phantom", |outputs| {
        let ds = generate_phantom_dataset(&cfg.phantom)?;
        outputs.extend(write_dataset(dir.join("dataset"), &ds)?);
        let mut d = ds.diameters_mm.clone();
        d.sort_by(f64::total_cmp);
        let median = if d.is_empty() {
            0.0
        } else if d.len() % 2 == 1 {
            d[d.len() / 2]
        } else {
            (d[d.len() / 2 - 1] + d[d.len() / 2]) / 2.0
        };
        let mut mode_counts = vec![0; cfg.phantom.n_modes];
        ds.positive_modes.iter().for_each(|&m| mode_counts[m] += 1);
        let summary = PhantomSummary {
            positives: ds.positives.len(),
            negatives: ds.negatives.len(),
            subjects: ds.subjects().len(),
            lesions_per_subject_mean: ds.positives.len() as f64 / ds.subjects().len() as f64,
            diameter_mean_mm: d.iter().sum::<f64>() / d.len().max(1) as f64,
            diameter_median_mm: median,
            mode_counts,
        };
        write_json(dir.join("dataset").join("summary.json"), &summary, outputs)?;

        let folds = split_folds(&ds, cfg.validation.folds, cfg.root_seed)?;
        let split = Split {
            test_subjects: folds[0].test_subjects.clone(),
            train_subjects: folds[0].train.subjects(),
        };
        write_json(dir.join("split.json"), &split, outputs)?;
        Ok(summary)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanSummary {
    pub untrained_fd: f64,
    pub best_epoch: usize,
    pub best_fd: f64,
    pub trace: Vec<(usize, f64)>,
}

/// FD of `m` fresh samples from `gen` against `real`.
fn checkpoint_fd(
    gen: &Generator,
    real: &crate::metrics::FrechetStats,
    m: usize,
    seed: u64,
) -> Result<f64> {
    let samples = gen.generate(m, &mut rng::seeded(seed))?;
    Ok(frechet_distance(&gaussian_stats(&samples)?, real)?)
}

/// Trains one GAN on the training split and traces FD over its checkpoints.
pub fn stage_train_gan(cfg: &RunConfig, dir: &Path) -> Result<GanSummary> {
    let (train, _, _) = load_split(dir)?;
    run_stage(cfg, dir, "train-gan", |outputs| {
        let out = dir.join("gan");
        let run = train_gan(&train.positives, &cfg.gan, None)?;
        let real = gaussian_stats(&train.positives)?;
        let fd_seed = rng::derive_seed(cfg.root_seed, stream::SAMPLING);
        let mut trace = Vec::new();
        let mut best: Option<(f64, &GanCheckpoint)> = None;
        for ckpt in std::iter::once(&run.initial).chain(&run.checkpoints) {
            let fd = checkpoint_fd(
                &run.generator(ckpt),
                &real,
                cfg.ensemble.m_samples,
                rng::derive_seed(fd_seed, ckpt.epoch as u64),
            )?;
            info!("epoch {}: FD {fd:.4}", ckpt.epoch);
            trace.push((ckpt.epoch, fd));
            if ckpt.epoch > 0 && best.map_or(true, |(b, _)| fd < b) {
                best = Some((fd, ckpt));
            }
        }
        let mut csv = String::from("epoch,fd\n");
        trace.iter().for_each(|(e, fd)| {
            let _ = writeln!(csv, "{e},{fd}");
        });
        write_text(out.join("fd_trace.csv"), &csv, outputs)?;
        let pts: Vec<[f64; 2]> = trace.iter().map(|&(e, fd)| [e as f64, fd]).collect();
        write_text(
            out.join("fd_trace.svg"),
            &svg::line_plot("FD vs epoch", "epoch", "FD", &[("FD", pts)]),
            outputs,
        )?;

        let mut csv = String::from("epoch,d_loss,g_loss,d_real,d_fake\n");
        for s in &run.history {
            let _ = writeln!(
                csv,
                "{},{},{},{},{}",
                s.epoch, s.d_loss, s.g_loss, s.d_real, s.d_fake
            );
        }
        write_text(out.join("loss_trace.csv"), &csv, outputs)?;
        let series = [
            (
                "discriminator",
                run.history
                    .iter()
                    .map(|s| [s.epoch as f64, s.d_loss])
                    .collect(),
            ),
            (
                "generator",
                run.history
                    .iter()
                    .map(|s| [s.epoch as f64, s.g_loss])
                    .collect(),
            ),
        ];
        write_text(
            out.join("loss_trace.svg"),
            &svg::line_plot("Losses", "epoch", "BCE", &series),
            outputs,
        )?;

        let (best_fd, best_ckpt) = match best {
            Some((fd, c)) => (fd, c),
            None => (trace[0].1, &run.initial),
        };
        let scored = GanCheckpoint {
            fd_score: Some(best_fd),
            ..best_ckpt.clone()
        };
        outputs.extend(write_checkpoint(
            out.join("best"),
            &run.generator_net,
            &scored,
            &cfg.gan,
        )?);
        Ok(GanSummary {
            untrained_fd: trace[0].1,
            best_epoch: best_ckpt.epoch,
            best_fd,
            trace,
        })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowSummary {
    pub size: usize,
    pub omega: f64,
    pub phi: f64,
    pub candidates: usize,
}

fn candidates_csv(ens: &Ensemble) -> String {
    let mut csv = String::from("candidate,seed,accepted,epoch,fd,draws,rejections\n");
    for c in &ens.log {
        for p in &c.trace {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{}",
                c.candidate, c.seed, c.accepted, p.epoch, p.fd, p.screen.draws, p.screen.rejections
            );
        }
    }
    csv
}

fn save_stage_ensemble(ens: &Ensemble, d: &Path, outputs: &mut Vec<PathBuf>) -> Result<()> {
    save_ensemble(ens, d)?;
    outputs.push(d.join(ENSEMBLE_MANIFEST));
    for i in 0..ens.len() {
        outputs.push(d.join(format!("components/{i:04}.cgp")));
    }
    write_text(d.join("candidates.csv"), &candidates_csv(ens), outputs)
}

/// Grows the run's ensemble (created on first use) by `grow_count`.
pub fn stage_grow(cfg: &RunConfig, dir: &Path) -> Result<GrowSummary> {
    let (train, _, _) = load_split(dir)?;
    run_stage(cfg, dir, "grow", |outputs| {
        let d = dir.join("ensemble");
        let mut ens = if d.join(ENSEMBLE_MANIFEST).is_file() {
            load_ensemble(&d)?
        } else {
            let ens_cfg = match &cfg.calibration {
                Some(c) => c.apply(&cfg.ensemble, &train.positives, cfg.root_seed)?,
                None => cfg.ensemble.clone(),
            };
            info!("omega {:.4}, phi {:.4}", ens_cfg.omega, ens_cfg.phi);
            Ensemble::new(ens_cfg, rng::derive_seed(cfg.root_seed, stream::GROWTH))?
        };
        let grown = grow(&mut ens, &train.positives, &cfg.gan, cfg.grow_count, None);
        save_stage_ensemble(&ens, &d, outputs)?;
        grown?;
        Ok(GrowSummary {
            size: ens.len(),
            omega: ens.config.omega,
            phi: ens.config.phi,
            candidates: ens.log.len(),
        })
    })
}

/// Writes `sample_count` screened ensemble samples.
pub fn stage_sample(cfg: &RunConfig, dir: &Path) -> Result<usize> {
    let (train, _, _) = load_split(dir)?;
    let ens = load_stage_ensemble(dir)?;
    run_stage(cfg, dir, "sample", |outputs| {
        let screen = MiScreen::new(&train.positives, ens.config.histogram)?;
        let mut r = rng::seeded(rng::derive_seed(cfg.root_seed, stream::SAMPLING));
        let samples = ens.sample_many(&screen, cfg.sample_count, &mut r)?;
        let d = dir.join("samples");
        std::fs::create_dir_all(&d)?;
        for (i, v) in samples.iter().enumerate() {
            let p = d.join(format!("sample_{i:05}.cgv"));
            write_volume(&p, v)?;
            outputs.push(p);
        }
        Ok(samples.len())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidateSummary {
    pub baseline_afp: f64,
    pub sensitivity: f64,
    /// `(ensemble size, candidate AFP, passed)` per round.
    pub rounds: Vec<(usize, f64, bool)>,
    pub passed: bool,
}

#[derive(Serialize)]
struct VerdictEntry {
    round: usize,
    ensemble_size: usize,
    #[serde(flatten)]
    verdict: ValidationVerdict,
}

fn afp_table(columns: &[(String, &FrocCurve)]) -> Result<String> {
    let mut csv = String::from("sensitivity");
    columns.iter().for_each(|(name, _)| {
        let _ = write!(csv, ",{name}");
    });
    csv.push('\n');
    for s in TABLE_SENSITIVITIES {
        let _ = write!(csv, "{s}");
        for (_, c) in columns {
            let _ = write!(csv, ",{}", afp_at_sensitivity(c, s)?);
        }
        csv.push('\n');
    }
    Ok(csv)
}

fn froc_series(c: &FrocCurve) -> Vec<[f64; 2]> {
    c.points.iter().map(|p| [p.afp, p.sensitivity]).collect()
}

/// Evaluates the run's ensemble against the baseline on the held-out
/// subjects, growing it further (up to `max_rounds` rounds) until the
/// criterion passes.
pub fn stage_validate(cfg: &RunConfig, dir: &Path) -> Result<ValidateSummary> {
    let (train, test, _) = load_split(dir)?;
    let ens = load_stage_ensemble(dir)?;
    let initial_size = ens.len();
    run_stage(cfg, dir, "validate", |outputs| {
        let out = dir.join("validation");
        let ctl = ControllerConfig {
            gan: cfg.gan.clone(),
            ensemble: ens.config.clone(),
            calibration: None,
            validation: cfg.validation.classifier.clone(),
            max_rounds: cfg.validation.max_rounds,
            stop_on_pass: true,
            seed: cfg.root_seed,
        };
        let report = growth_controller(&train, &test, &ctl, Some(ens), None)?;
        let val = &cfg.validation.classifier;
        std::fs::create_dir_all(&out)?;

        write_froc_csv(out.join("froc_baseline.csv"), &report.baseline_curve)?;
        outputs.push(out.join("froc_baseline.csv"));
        let mut columns = vec![("baseline".to_string(), &report.baseline_curve)];
        let mut series = vec![("baseline".to_string(), froc_series(&report.baseline_curve))];
        for r in &report.rounds {
            let p = out.join(format!("froc_size_{:03}.csv", r.ensemble_size));
            write_froc_csv(&p, &r.curve)?;
            outputs.push(p);
            columns.push((format!("cgane{}", r.ensemble_size), &r.curve));
            series.push((format!("cGANe{}", r.ensemble_size), froc_series(&r.curve)));
        }
        write_text(out.join("afp_table.csv"), &afp_table(&columns)?, outputs)?;
        let named: Vec<(&str, Vec<[f64; 2]>)> = series
            .iter()
            .map(|(n, s)| (n.as_str(), s.clone()))
            .collect();
        write_text(
            out.join("froc.svg"),
            &svg::line_plot("Sensitivity vs AFP", "AFP", "sensitivity", &named),
            outputs,
        )?;
        let verdicts: Vec<VerdictEntry> = report
            .rounds
            .iter()
            .map(|r| VerdictEntry {
                round: r.round,
                ensemble_size: r.ensemble_size,
                verdict: r.verdict,
            })
            .collect();
        write_json(out.join("verdicts.json"), &verdicts, outputs)?;
        if report.ensemble.len() > initial_size {
            save_stage_ensemble(&report.ensemble, &out.join("ensemble"), outputs)?;
        }
        let summary = ValidateSummary {
            baseline_afp: report.baseline_afp,
            sensitivity: val.sensitivity,
            rounds: report
                .rounds
                .iter()
                .map(|r| (r.ensemble_size, r.candidate_afp, r.verdict.passed))
                .collect(),
            passed: report.passed(),
        };
        write_json(out.join("summary.json"), &summary, outputs)?;
        if !summary.passed {
            return Err(PipelineError::ValidationFailed {
                rounds: report.rounds.len(),
            });
        }
        Ok(summary)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossvalSummary {
    pub folds: usize,
    pub mean_baseline_afp: f64,
    pub mean_synthetic_afp: f64,
    pub sensitivity: f64,
}

/// k-fold evaluation of baseline and synthetic-source classifiers.
pub fn stage_crossval(cfg: &RunConfig, dir: &Path) -> Result<CrossvalSummary> {
    let ds = load_dataset(dir)?;
    run_stage(cfg, dir, "crossval", |outputs| {
        let out = dir.join("crossval");
        let cv = CrossvalConfig {
            k: cfg.validation.folds,
            gan: cfg.gan.clone(),
            ensemble: cfg.ensemble.clone(),
            calibration: cfg.calibration,
            validation: cfg.validation.classifier.clone(),
            ensemble_size: cfg.grow_count,
            seed: cfg.root_seed,
        };
        let report = crossval_run(&ds, &cv)?;
        std::fs::create_dir_all(&out)?;
        for f in &report.folds {
            for (kind, curve) in [("baseline", &f.baseline), ("synthetic", &f.synthetic)] {
                let p = out.join(format!("fold_{}_{kind}.csv", f.fold));
                write_froc_csv(&p, curve)?;
                outputs.push(p);
            }
        }
        for (kind, curve) in [
            ("baseline", &report.mean_baseline),
            ("synthetic", &report.mean_synthetic),
        ] {
            let p = out.join(format!("mean_{kind}.csv"));
            write_froc_csv(&p, curve)?;
            outputs.push(p);
        }
        let series = [
            ("baseline (mean)", froc_series(&report.mean_baseline)),
            ("synthetic (mean)", froc_series(&report.mean_synthetic)),
        ];
        write_text(
            out.join("crossval.svg"),
            &svg::line_plot("Mean sensitivity vs AFP", "AFP", "sensitivity", &series),
            outputs,
        )?;
        let s = cfg.validation.classifier.sensitivity;
        let summary = CrossvalSummary {
            folds: report.folds.len(),
            mean_baseline_afp: afp_at_sensitivity(&report.mean_baseline, s)?,
            mean_synthetic_afp: afp_at_sensitivity(&report.mean_synthetic, s)?,
            sensitivity: s,
        };
        write_json(out.join("crossval.json"), &report, outputs)?;
        write_json(out.join("summary.json"), &summary, outputs)?;
        Ok(summary)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedSummary {
    pub points_per_source: usize,
    pub pca_components: usize,
    pub explained_variance: f64,
    pub mixing_score: f64,
    pub coverage_real: f64,
    pub coverage_synthetic: f64,
}

/// PCA + t-SNE of real training positives and as many ensemble samples.
pub fn stage_embed(cfg: &RunConfig, dir: &Path) -> Result<EmbedSummary> {
    let (train, _, _) = load_split(dir)?;
    let ens = load_stage_ensemble(dir)?;
    run_stage(cfg, dir, "embed", |outputs| {
        let out = dir.join("embedding");
        let n = train.positives.len().min(cfg.embedding.max_points);
        let reals = &train.positives[..n];
        let screen = MiScreen::new(&train.positives, ens.config.histogram)?;
        let mut r = rng::seeded(rng::derive_seed(
            rng::derive_seed(cfg.root_seed, stream::SAMPLING),
            1,
        ));
        let synth = ens.sample_many(&screen, n, &mut r)?;
        let rows: Vec<&[f64]> = reals.iter().chain(&synth).map(|v| v.voxels()).collect();
        let k = cfg
            .embedding
            .pca_components
            .min(rows.len() - 1)
            .min(rows[0].len());
        let pca = pca_fit(&rows, k)?;
        let reduced = pca_transform(&pca, &rows)?;
        let emb = tsne(&reduced, &cfg.embedding.tsne)?;
        let (real_2d, synth_2d) = emb.coords.split_at(n);
        let mixing = mixing_score(real_2d, synth_2d, cfg.embedding.k_neighbors)?;

        let modes = &train.positive_modes[..n.min(train.positive_modes.len())];
        let (coverage_real, coverage_synthetic) = if modes.len() == n {
            let real_rows: Vec<&[f64]> = rows[..n].to_vec();
            let centroids = class_centroids(&real_rows, modes, cfg.phantom.n_modes)?;
            (
                mode_coverage(&real_rows, &centroids)?,
                mode_coverage(&rows[n..], &centroids)?,
            )
        } else {
            (f64::NAN, f64::NAN)
        };
        let sources: Vec<&str> = (0..rows.len())
            .map(|i| if i < n { "real" } else { "synthetic" })
            .collect();
        let mode_col: Vec<Option<usize>> = (0..rows.len()).map(|i| modes.get(i).copied()).collect();
        std::fs::create_dir_all(&out)?;
        write_embedding_csv(out.join("embedding.csv"), &emb.coords, &sources, &mode_col)?;
        outputs.push(out.join("embedding.csv"));
        let groups = [("real", real_2d.to_vec()), ("synthetic", synth_2d.to_vec())];
        write_text(
            out.join("embedding.svg"),
            &svg::scatter("Real and synthetic samples", &groups),
            outputs,
        )?;
        let summary = EmbedSummary {
            points_per_source: n,
            pca_components: k,
            explained_variance: pca.explained_variance_ratios.iter().sum(),
            mixing_score: mixing,
            coverage_real,
            coverage_synthetic,
        };
        write_json(out.join("embedding.json"), &summary, outputs)?;
        Ok(summary)
    })
}
