use log::info;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::screen::{
    evaluate_candidate, screened_sample, CandidateOutcome, FdTracePoint, ScreenStats,
};
use super::{EnsembleError, Result};
use crate::gan::{train_gan, GanHyperParams, Generator};
use crate::metrics::{gaussian_stats, HistogramSpec, MiScreen};
use crate::rng::{self, stream};
use crate::Volume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    /// FD acceptance threshold.
    pub omega: f64,
    /// Maximum admissible MI (bits) between a sample and any real sample;
    /// infinite disables the screen.
    #[serde(with = "super::screen::infinite_as_null")]
    pub phi: f64,
    /// Screened samples drawn per checkpoint for its FD.
    pub m_samples: usize,
    pub max_mi_retries: usize,
    pub growth_increment: usize,
    pub max_components: usize,
    pub histogram: HistogramSpec,
    /// Consecutive rejected training runs after which growth gives up.
    pub max_consecutive_failures: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            omega: 0.04,
            phi: 0.5,
            m_samples: 2000,
            max_mi_retries: 50,
            growth_increment: 10,
            max_components: 100,
            histogram: HistogramSpec::default(),
            max_consecutive_failures: 10,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EnsembleError::InvalidConfig(m.to_string()));
        if !(self.omega > 0.0) {
            return bad("omega must be positive");
        }
        if !(self.phi >= 0.0) {
            return bad("phi must be non-negative");
        }
        if self.m_samples < 2 {
            return bad("m_samples must be at least 2");
        }
        if self.growth_increment == 0
            || self.max_mi_retries == 0
            || self.max_consecutive_failures == 0
        {
            return bad(
                "growth_increment, max_mi_retries and max_consecutive_failures must be at least 1",
            );
        }
        self.histogram.validate()?;
        Ok(())
    }
}

/// An admitted generator checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub generator: Generator,
    pub epoch: usize,
    pub fd_score: f64,
    /// Training seed of the run it came from.
    pub seed: u64,
    /// MI-screen statistics while scoring the chosen checkpoint.
    pub screen: ScreenStats,
}

/// Outcome of one candidate training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateLog {
    pub candidate: u64,
    pub seed: u64,
    pub accepted: bool,
    pub trace: Vec<FdTracePoint>,
}

impl CandidateLog {
    /// Lowest-FD trace point (earliest epoch on ties).
    pub fn best(&self) -> Option<&FdTracePoint> {
        self.trace
            .iter()
            .reduce(|a, b| if b.fd < a.fd { b } else { a })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub config: EnsembleConfig,
    pub root_seed: u64,
    components: Vec<Component>,
    /// Index of the next candidate run; candidate seeds derive from it.
    next_candidate: u64,
    pub log: Vec<CandidateLog>,
}

impl Ensemble {
    pub fn new(config: EnsembleConfig, root_seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            root_seed,
            components: Vec::new(),
            next_candidate: 0,
            log: Vec::new(),
        })
    }

    pub(crate) fn from_parts(
        config: EnsembleConfig,
        root_seed: u64,
        components: Vec<Component>,
        next_candidate: u64,
        log: Vec<CandidateLog>,
    ) -> Self {
        Self {
            config,
            root_seed,
            components,
            next_candidate,
            log,
        }
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn next_candidate(&self) -> u64 {
        self.next_candidate
    }

    /// The first `n` components as a smaller ensemble.
    pub fn truncated(&self, n: usize) -> Ensemble {
        let mut e = self.clone();
        e.components.truncate(n);
        e
    }

    pub fn push(&mut self, component: Component) {
        self.components.push(component);
    }

    /// Training seed of candidate `index`.
    pub fn candidate_seed(&self, index: u64) -> u64 {
        rng::derive_seed(rng::derive_seed(self.root_seed, stream::GROWTH), index)
    }

    /// Picks a component uniformly and returns one screened sample from it.
    pub fn sample(&self, screen: &MiScreen, rng: &mut dyn RngCore) -> Result<(Volume, usize)> {
        if self.components.is_empty() {
            return Err(EnsembleError::EmptyEnsemble);
        }
        let k = rng.gen_range(0..self.components.len());
        let (v, _) = screened_sample(&self.components[k].generator, screen, &self.config, rng)?;
        Ok((v, k))
    }

    /// `count` independent calls to [`sample`](Self::sample).
    pub fn sample_many(
        &self,
        screen: &MiScreen,
        count: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Volume>> {
        (0..count)
            .map(|_| self.sample(screen, rng).map(|(v, _)| v))
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GrowthReport {
    pub accepted: usize,
    pub candidates: Vec<CandidateLog>,
}

/// Trains fresh GANs on `positives` until `count` of them pass the
/// FD/MI screen and have been appended to `ens`.
///
/// Candidate `i` trains with seed [`Ensemble::candidate_seed`]`(i)` and is
/// screened with a stream derived from that seed, so growth is a function of
/// the root seed and the candidate counter alone. Components accepted before
/// a [`EnsembleError::GrowthStalled`] error stay in the ensemble.
pub fn grow(
    ens: &mut Ensemble,
    positives: &[Volume],
    hp: &GanHyperParams,
    count: usize,
    mut progress: Option<&mut dyn FnMut(&CandidateLog)>,
) -> Result<GrowthReport> {
    if count == 0 {
        return Err(EnsembleError::InvalidConfig(
            "growth count must be at least 1".into(),
        ));
    }
    if ens.len() + count > ens.config.max_components {
        return Err(EnsembleError::InvalidConfig(format!(
            "growing {} components by {count} exceeds max_components {}",
            ens.len(),
            ens.config.max_components
        )));
    }
    let real_stats = gaussian_stats(positives)?;
    let screen = MiScreen::new(positives, ens.config.histogram)?;
    let mut report = GrowthReport::default();
    let mut failures = 0;
    while report.accepted < count {
        let candidate = ens.next_candidate;
        ens.next_candidate += 1;
        let seed = ens.candidate_seed(candidate);
        let run_hp = GanHyperParams { seed, ..hp.clone() };
        let run = train_gan(positives, &run_hp, None)?;
        let mut screen_rng = rng::seeded(rng::derive_seed(seed, stream::SCREEN));
        let outcome = if run.checkpoints.is_empty() {
            CandidateOutcome::Rejected { trace: Vec::new() }
        } else {
            evaluate_candidate(
                &run.generator_net,
                &run.checkpoints,
                &real_stats,
                &screen,
                &ens.config,
                &mut screen_rng,
            )?
        };
        let log = CandidateLog {
            candidate,
            seed,
            accepted: matches!(outcome, CandidateOutcome::Accepted { .. }),
            trace: outcome.trace().to_vec(),
        };
        info!(
            "candidate {candidate}: {} (best FD {:?}, omega {})",
            if log.accepted { "accepted" } else { "rejected" },
            log.best().map(|b| b.fd),
            ens.config.omega
        );
        if let Some(sink) = progress.as_deref_mut() {
            sink(&log);
        }
        ens.log.push(log.clone());
        report.candidates.push(log);
        match outcome {
            CandidateOutcome::Accepted { checkpoint, trace } => {
                let point = trace
                    .iter()
                    .find(|p| p.epoch == checkpoint.epoch)
                    .copied()
                    .expect("accepted epoch is in the trace");
                ens.components.push(Component {
                    generator: Generator::new(
                        run.generator_net.clone(),
                        checkpoint.generator_params,
                    ),
                    epoch: checkpoint.epoch,
                    fd_score: point.fd,
                    seed,
                    screen: point.screen,
                });
                report.accepted += 1;
                failures = 0;
            }
            CandidateOutcome::Rejected { .. } => {
                failures += 1;
                if failures >= ens.config.max_consecutive_failures {
                    return Err(EnsembleError::GrowthStalled { failures });
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::evaluate_candidate;
    use crate::gan::{Architecture, GanCheckpoint};
    use crate::volume::{generate_phantom_dataset, PhantomConfig};

    pub(crate) fn tiny_hp() -> GanHyperParams {
        GanHyperParams {
            latent_dim: 8,
            epochs: 4,
            batch_size: 4,
            checkpoint_every_n_epochs: 2,
            architecture: Architecture {
                generator: [4, 2],
                discriminator: [2, 4],
            },
            ..Default::default()
        }
    }

    fn positives() -> Vec<Volume> {
        generate_phantom_dataset(&PhantomConfig {
            volume_dims: [4, 4, 4],
            n_subjects: 6,
            n_modes: 1,
            ..Default::default()
        })
        .unwrap()
        .positives
    }

    fn lenient() -> EnsembleConfig {
        EnsembleConfig {
            omega: 1e9,
            phi: f64::INFINITY,
            m_samples: 8,
            max_consecutive_failures: 2,
            ..Default::default()
        }
    }

    #[test]
    fn grows_by_exactly_count_and_is_deterministic() {
        let pos = positives();
        let mut a = Ensemble::new(lenient(), 5).unwrap();
        let report = grow(&mut a, &pos, &tiny_hp(), 3, None).unwrap();
        assert_eq!(report.accepted, 3);
        assert_eq!(a.len(), 3);
        assert!(a.components().iter().all(|c| c.fd_score <= a.config.omega));
        let seeds: std::collections::HashSet<u64> = a.components().iter().map(|c| c.seed).collect();
        assert_eq!(seeds.len(), 3);
        let mut b = Ensemble::new(lenient(), 5).unwrap();
        grow(&mut b, &pos, &tiny_hp(), 3, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unreachable_omega_stalls() {
        let mut ens = Ensemble::new(
            EnsembleConfig {
                omega: 1e-12,
                ..lenient()
            },
            1,
        )
        .unwrap();
        let err = grow(&mut ens, &positives(), &tiny_hp(), 1, None).unwrap_err();
        assert!(matches!(err, EnsembleError::GrowthStalled { failures: 2 }));
        assert_eq!(ens.log.len(), 2);
    }

    #[test]
    fn zero_count_and_capacity_are_rejected() {
        let mut ens = Ensemble::new(lenient(), 1).unwrap();
        assert!(grow(&mut ens, &positives(), &tiny_hp(), 0, None).is_err());
        ens.config.max_components = 1;
        assert!(grow(&mut ens, &positives(), &tiny_hp(), 2, None).is_err());
    }

    #[test]
    fn empty_ensemble_cannot_sample() {
        let ens = Ensemble::new(lenient(), 1).unwrap();
        let screen = MiScreen::new(&positives(), HistogramSpec::default()).unwrap();
        assert!(matches!(
            ens.sample(&screen, &mut rng::seeded(0)),
            Err(EnsembleError::EmptyEnsemble)
        ));
    }

    #[test]
    fn fd_ties_go_to_the_earliest_epoch() {
        // Zero weights make the output a constant 0.5 whatever the latent
        // draw, so both checkpoints score exactly the same FD.
        let pos = positives();
        let net = crate::gan::build_generator(4, [4; 3], &tiny_hp().architecture, 0.1).unwrap();
        let mut params = net.init_params(&mut rng::seeded(0));
        for t in params.tensors.iter_mut() {
            if t.shape().len() > 1 {
                t.data_mut().iter_mut().for_each(|w| *w = 0.0);
            }
        }
        let ckpt = |epoch| GanCheckpoint {
            epoch,
            generator_params: params.clone(),
            fd_score: None,
            mi_rejection_count: None,
        };
        let stats = gaussian_stats(&pos).unwrap();
        let screen = MiScreen::new(&pos, HistogramSpec::default()).unwrap();
        let out = evaluate_candidate(
            &net,
            &[ckpt(50), ckpt(25)],
            &stats,
            &screen,
            &lenient(),
            &mut rng::seeded(1),
        )
        .unwrap();
        let trace = out.trace().to_vec();
        assert_eq!(trace[0].fd, trace[1].fd);
        match out {
            CandidateOutcome::Accepted { checkpoint, .. } => assert_eq!(checkpoint.epoch, 25),
            CandidateOutcome::Rejected { .. } => panic!("lenient omega must accept"),
        }
        let strict = EnsembleConfig {
            omega: trace[0].fd / 2.0,
            ..lenient()
        };
        let out = evaluate_candidate(
            &net,
            &[ckpt(50)],
            &stats,
            &screen,
            &strict,
            &mut rng::seeded(1),
        )
        .unwrap();
        assert!(matches!(out, CandidateOutcome::Rejected { .. }));
    }

    #[test]
    fn selection_is_uniform() {
        // Chi-square with 3 degrees of freedom; 11.345 is the 0.01 critical value.
        let pos = positives();
        let mut ens = Ensemble::new(lenient(), 3).unwrap();
        grow(&mut ens, &pos, &tiny_hp(), 4, None).unwrap();
        let screen = MiScreen::new(&pos, HistogramSpec::default()).unwrap();
        let mut counts = [0usize; 4];
        let mut r = rng::seeded(42);
        for _ in 0..10_000 {
            counts[ens.sample(&screen, &mut r).unwrap().1] += 1;
        }
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - 2500.0).powi(2) / 2500.0)
            .sum();
        assert!(chi2 < 11.345, "{counts:?} chi2 {chi2}");
    }
}
