use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::classifier::Classifier;
use super::source::Region;
use super::{Result, ValidationError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    /// Score threshold (regions scoring at least this are detections);
    /// `None` on aggregated curves.
    pub threshold: Option<f64>,
    pub sensitivity: f64,
    /// False-positive regions per subject.
    pub afp: f64,
}

/// Sensitivity versus AFP, ordered by decreasing threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocCurve {
    pub points: Vec<FrocPoint>,
    pub n_subjects: usize,
    pub n_lesions: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredRegion {
    pub score: f64,
    pub positive: bool,
    pub subject: u32,
}

/// Scores `regions` with `model` and sweeps the threshold.
pub fn froc_curve(model: &Classifier, regions: &[Region]) -> Result<FrocCurve> {
    let volumes: Vec<_> = regions.iter().map(|r| r.volume.clone()).collect();
    if volumes.is_empty() {
        return Err(ValidationError::NoSubjects);
    }
    let scores = model.score(&volumes)?;
    let scored: Vec<ScoredRegion> = regions
        .iter()
        .zip(scores)
        .map(|(r, score)| ScoredRegion {
            score,
            positive: r.positive,
            subject: r.subject,
        })
        .collect();
    froc_from_scores(&scored)
}

/// One point per distinct score, from the highest threshold down.
pub fn froc_from_scores(regions: &[ScoredRegion]) -> Result<FrocCurve> {
    let mut subjects: Vec<u32> = regions.iter().map(|r| r.subject).collect();
    subjects.sort_unstable();
    subjects.dedup();
    if subjects.is_empty() {
        return Err(ValidationError::NoSubjects);
    }
    let n_lesions = regions.iter().filter(|r| r.positive).count();
    if n_lesions == 0 {
        return Err(ValidationError::NoPositives);
    }
    if let Some(r) = regions.iter().find(|r| r.score.is_nan()) {
        return Err(ValidationError::InvalidConfig(format!(
            "NaN score for subject {}",
            r.subject
        )));
    }
    let mut order: Vec<&ScoredRegion> = regions.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = Vec::new();
    for (i, r) in order.iter().enumerate() {
        if r.positive {
            tp += 1;
        } else {
            fp += 1;
        }
        if order.get(i + 1).map_or(true, |next| next.score != r.score) {
            points.push(FrocPoint {
                threshold: Some(r.score),
                sensitivity: tp as f64 / n_lesions as f64,
                afp: fp as f64 / subjects.len() as f64,
            });
        }
    }
    Ok(FrocCurve {
        points,
        n_subjects: subjects.len(),
        n_lesions,
    })
}

/// AFP at sensitivity `s`: the first point reaching `s`, linearly
/// interpolated from its predecessor when it overshoots.
pub fn afp_at_sensitivity(curve: &FrocCurve, s: f64) -> Result<f64> {
    if !(s > 0.0 && s <= 1.0) {
        return Err(ValidationError::InvalidConfig(format!(
            "sensitivity {s} outside (0, 1]"
        )));
    }
    let i = curve
        .points
        .iter()
        .position(|p| p.sensitivity >= s)
        .ok_or(ValidationError::SensitivityUnreachable(s))?;
    let hi = curve.points[i];
    if i == 0 || hi.sensitivity == s {
        return Ok(hi.afp);
    }
    let lo = curve.points[i - 1];
    let t = (s - lo.sensitivity) / (hi.sensitivity - lo.sensitivity);
    Ok(lo.afp + t * (hi.afp - lo.afp))
}

/// Pointwise mean of `curves` interpolated at `grid` sensitivities.
pub fn mean_curve(curves: &[FrocCurve], grid: &[f64]) -> Result<FrocCurve> {
    if curves.is_empty() {
        return Err(ValidationError::NoSubjects);
    }
    let mut points = Vec::with_capacity(grid.len());
    for &s in grid {
        let mut sum = 0.0;
        for c in curves {
            sum += afp_at_sensitivity(c, s)?;
        }
        points.push(FrocPoint {
            threshold: None,
            sensitivity: s,
            afp: sum / curves.len() as f64,
        });
    }
    Ok(FrocCurve {
        points,
        n_subjects: curves.iter().map(|c| c.n_subjects).sum(),
        n_lesions: curves.iter().map(|c| c.n_lesions).sum(),
    })
}

pub fn write_froc_csv(path: impl AsRef<Path>, curve: &FrocCurve) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "threshold,sensitivity,afp")?;
    for p in &curve.points {
        let t = p.threshold.map(|t| t.to_string()).unwrap_or_default();
        writeln!(out, "{t},{},{}", p.sensitivity, p.afp)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationVerdict {
    pub baseline_afp: f64,
    pub candidate_afp: f64,
    pub sensitivity_level: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Passes when the candidate is no more than `tolerance` worse than the
/// baseline; a candidate that beats the baseline always passes.
pub fn check_validation_criterion(
    baseline_afp: f64,
    candidate_afp: f64,
    tolerance: f64,
    s: f64,
) -> ValidationVerdict {
    ValidationVerdict {
        baseline_afp,
        candidate_afp,
        sensitivity_level: s,
        tolerance,
        passed: candidate_afp <= baseline_afp + tolerance,
    }
}
