use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{EnsembleConfig, EnsembleError, Result};
use crate::gan::{GanCheckpoint, Generator};
use crate::metrics::{frechet_distance, gaussian_stats, FrechetStats, MiScreen};
use crate::nn::Sequential;
use crate::Volume;

/// Anything that can emit candidate volumes.
pub trait VolumeSource {
    fn draw(&self, count: usize, rng: &mut dyn RngCore) -> Result<Vec<Volume>>;
}

impl VolumeSource for Generator {
    fn draw(&self, count: usize, rng: &mut dyn RngCore) -> Result<Vec<Volume>> {
        Ok(self.generate(count, rng)?)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScreenStats {
    pub draws: usize,
    pub rejections: usize,
}

impl ScreenStats {
    pub fn rejection_rate(&self) -> f64 {
        if self.draws == 0 {
            0.0
        } else {
            self.rejections as f64 / self.draws as f64
        }
    }

    pub fn absorb(&mut self, other: ScreenStats) {
        self.draws += other.draws;
        self.rejections += other.rejections;
    }
}

/// Draws `count` samples whose maximum MI against the screen's reals is at
/// most `cfg.phi`. Candidates are drawn in chunks of the number still
/// missing and inspected in draw order; `cfg.max_mi_retries` consecutive
/// rejections abort with [`EnsembleError::ScreenExhausted`].
pub fn screened_samples(
    src: &dyn VolumeSource,
    screen: &MiScreen,
    cfg: &EnsembleConfig,
    count: usize,
    rng: &mut dyn RngCore,
) -> Result<(Vec<Volume>, ScreenStats)> {
    let mut out = Vec::with_capacity(count);
    let mut stats = ScreenStats::default();
    let mut streak = 0;
    while out.len() < count {
        for v in src.draw(count - out.len(), rng)? {
            stats.draws += 1;
            let admitted = cfg.phi.is_infinite() || screen.max_mi(&v)?.0 <= cfg.phi;
            if admitted {
                streak = 0;
                out.push(v);
            } else {
                stats.rejections += 1;
                streak += 1;
                if streak >= cfg.max_mi_retries {
                    return Err(EnsembleError::ScreenExhausted { rejections: streak });
                }
            }
        }
    }
    Ok((out, stats))
}

/// A single screened sample.
pub fn screened_sample(
    src: &dyn VolumeSource,
    screen: &MiScreen,
    cfg: &EnsembleConfig,
    rng: &mut dyn RngCore,
) -> Result<(Volume, ScreenStats)> {
    let (mut v, stats) = screened_samples(src, screen, cfg, 1, rng)?;
    Ok((v.pop().expect("one sample"), stats))
}

/// FD of one checkpoint; `fd` is infinite when its screen was exhausted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdTracePoint {
    pub epoch: usize,
    #[serde(with = "infinite_as_null")]
    pub fd: f64,
    pub screen: ScreenStats,
}

pub(crate) mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone)]
pub enum CandidateOutcome {
    Accepted {
        checkpoint: GanCheckpoint,
        trace: Vec<FdTracePoint>,
    },
    Rejected {
        trace: Vec<FdTracePoint>,
    },
}

impl CandidateOutcome {
    pub fn trace(&self) -> &[FdTracePoint] {
        match self {
            CandidateOutcome::Accepted { trace, .. } | CandidateOutcome::Rejected { trace } => {
                trace
            }
        }
    }
}

/// Scores every checkpoint by the FD between `cfg.m_samples` fresh screened
/// samples and the real statistics, and accepts the lowest-FD checkpoint
/// (earliest epoch on ties) if it does not exceed `cfg.omega`.
pub fn evaluate_candidate(
    net: &Sequential,
    checkpoints: &[GanCheckpoint],
    real_stats: &FrechetStats,
    screen: &MiScreen,
    cfg: &EnsembleConfig,
    rng: &mut dyn RngCore,
) -> Result<CandidateOutcome> {
    if checkpoints.is_empty() {
        return Err(EnsembleError::NoCheckpoints);
    }
    let mut trace = Vec::with_capacity(checkpoints.len());
    let mut best: Option<usize> = None;
    for (i, ckpt) in checkpoints.iter().enumerate() {
        let gen = Generator::new(net.clone(), ckpt.generator_params.clone());
        let point = match screened_samples(&gen, screen, cfg, cfg.m_samples, rng) {
            Ok((samples, stats)) => FdTracePoint {
                epoch: ckpt.epoch,
                fd: frechet_distance(real_stats, &gaussian_stats(&samples)?)?,
                screen: stats,
            },
            Err(EnsembleError::ScreenExhausted { rejections }) => FdTracePoint {
                epoch: ckpt.epoch,
                fd: f64::INFINITY,
                screen: ScreenStats {
                    draws: rejections,
                    rejections,
                },
            },
            Err(e) => return Err(e),
        };
        let better = match best {
            None => point.fd.is_finite(),
            Some(b) => {
                let cur: &FdTracePoint = &trace[b];
                point.fd < cur.fd || (point.fd == cur.fd && point.epoch < cur.epoch)
            }
        };
        if better {
            best = Some(i);
        }
        trace.push(point);
    }
    match best {
        Some(i) if trace[i].fd <= cfg.omega => {
            let mut checkpoint = checkpoints[i].clone();
            checkpoint.fd_score = Some(trace[i].fd);
            checkpoint.mi_rejection_count = Some(trace[i].screen.rejections);
            Ok(CandidateOutcome::Accepted { checkpoint, trace })
        }
        _ => Ok(CandidateOutcome::Rejected { trace }),
    }
}
