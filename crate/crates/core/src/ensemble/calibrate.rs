use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{EnsembleConfig, EnsembleError, Result};
use crate::metrics::{frechet_distance, gaussian_stats, mutual_information, HistogramSpec};
use crate::rng::{self, stream};
use crate::Volume;

/// Data-driven FD threshold: `multiplier` times the FD between two random
/// halves of `reals`, i.e. a multiple of the sampling noise floor of FD on
/// this data.
pub fn calibrate_omega(reals: &[Volume], multiplier: f64, seed: u64) -> Result<f64> {
    if !(multiplier > 0.0) {
        return Err(EnsembleError::InvalidConfig(
            "omega multiplier must be positive".into(),
        ));
    }
    if reals.len() < 4 {
        return Err(EnsembleError::InvalidConfig(format!(
            "need at least 4 real samples to calibrate omega, got {}",
            reals.len()
        )));
    }
    let mut order: Vec<usize> = (0..reals.len()).collect();
    order.shuffle(&mut rng::seeded(rng::derive_seed(
        seed,
        stream::CALIBRATION,
    )));
    let (a, b) = order.split_at(reals.len() / 2);
    let pick = |idx: &[usize]| idx.iter().map(|&i| reals[i].clone()).collect::<Vec<_>>();
    let fd = frechet_distance(&gaussian_stats(&pick(a))?, &gaussian_stats(&pick(b))?)?;
    Ok(multiplier * fd)
}

/// Data-driven MI threshold: the `quantile` of each real sample's maximum MI
/// against all other reals (leave-one-out). Uses the nearest-rank quantile.
pub fn calibrate_phi(reals: &[Volume], spec: &HistogramSpec, quantile: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&quantile) {
        return Err(EnsembleError::InvalidConfig(format!(
            "quantile {quantile} outside [0, 1]"
        )));
    }
    if reals.len() < 2 {
        return Err(EnsembleError::InvalidConfig(
            "need at least 2 real samples to calibrate phi".into(),
        ));
    }
    let n = reals.len();
    let mut mi = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = mutual_information(&reals[i], &reals[j], spec)?;
            mi[i][j] = v;
            mi[j][i] = v;
        }
    }
    let mut maxima: Vec<f64> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| mi[i][j])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    maxima.sort_by(f64::total_cmp);
    let rank = ((quantile * n as f64).ceil() as usize).clamp(1, n);
    Ok(maxima[rank - 1])
}

/// Data-driven replacements for the absolute `omega` and `phi` thresholds;
/// a `None` field keeps the configured value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    /// `omega` becomes this multiple of the real-halves FD.
    pub omega_multiplier: Option<f64>,
    /// `phi` becomes this quantile of the leave-one-out maximum MI of the reals.
    pub phi_quantile: Option<f64>,
}

impl CalibrationConfig {
    /// `base` with `omega` and `phi` calibrated on `reals`.
    pub fn apply(
        &self,
        base: &EnsembleConfig,
        reals: &[Volume],
        seed: u64,
    ) -> Result<EnsembleConfig> {
        let mut cfg = base.clone();
        if let Some(m) = self.omega_multiplier {
            cfg.omega = calibrate_omega(reals, m, seed)?;
        }
        if let Some(q) = self.phi_quantile {
            cfg.phi = calibrate_phi(reals, &base.histogram, q)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{generate_phantom_dataset, PhantomConfig};

    fn reals() -> Vec<Volume> {
        generate_phantom_dataset(&PhantomConfig {
            volume_dims: [4, 4, 4],
            n_subjects: 8,
            ..Default::default()
        })
        .unwrap()
        .positives
    }

    #[test]
    fn omega_scales_with_multiplier_and_is_seeded() {
        let r = reals();
        let a = calibrate_omega(&r, 1.0, 3).unwrap();
        assert!(a > 0.0);
        assert_eq!(calibrate_omega(&r, 2.5, 3).unwrap(), 2.5 * a);
        assert_eq!(calibrate_omega(&r, 1.0, 3).unwrap(), a);
        assert!(calibrate_omega(&r[..3], 1.0, 3).is_err());
    }

    #[test]
    fn phi_quantile_is_monotone_and_bounded() {
        let r = reals();
        let spec = HistogramSpec::default();
        let lo = calibrate_phi(&r, &spec, 0.1).unwrap();
        let hi = calibrate_phi(&r, &spec, 1.0).unwrap();
        assert!(0.0 <= lo && lo <= hi);
        // Every real except the most redundant one passes a screen at the max.
        let screen = crate::metrics::MiScreen::new(&r, spec).unwrap();
        assert!(hi <= screen.max_mi(&r[0]).unwrap().0);
        assert!(calibrate_phi(&r, &spec, 1.5).is_err());
    }

    #[test]
    fn calibration_only_touches_requested_fields() {
        let r = reals();
        let base = EnsembleConfig::default();
        let keep = CalibrationConfig::default().apply(&base, &r, 0).unwrap();
        assert_eq!(keep, base);
        let c = CalibrationConfig {
            omega_multiplier: Some(2.0),
            phi_quantile: None,
        }
        .apply(&base, &r, 0)
        .unwrap();
        assert_eq!(c.omega, calibrate_omega(&r, 2.0, 0).unwrap());
        assert_eq!(c.phi, base.phi);
    }
}
