//! Histogram entropies in bits.
//!
//! Entropies are computed from integer counts as
//! `log2(n) - Σ c log2(c) / n`, summing occupied cells in ascending cell
//! order. For `s_g == s_r` the occupied joint cells are the diagonal in the
//! same order as the marginal bins, so `MI(v, v) == H(v)` holds exactly.

use serde::{Deserialize, Serialize};

use super::{MetricsError, Result};
use crate::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    pub bin_count: usize,
    pub range_low: f64,
    pub range_high: f64,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self {
            bin_count: 32,
            range_low: 0.0,
            range_high: 1.0,
        }
    }
}

impl HistogramSpec {
    pub fn validate(&self) -> Result<()> {
        if self.bin_count < 2 || self.bin_count > u16::MAX as usize {
            return Err(MetricsError::InvalidHistogram(format!(
                "bin_count {} outside [2, 65535]",
                self.bin_count
            )));
        }
        if !(self.range_low < self.range_high)
            || !self.range_low.is_finite()
            || !self.range_high.is_finite()
        {
            return Err(MetricsError::InvalidHistogram(format!(
                "range [{}, {}] is empty",
                self.range_low, self.range_high
            )));
        }
        Ok(())
    }

    /// Bin of `v`; values outside the range are clamped into the edge bins.
    #[inline]
    pub fn bin(&self, v: f64) -> usize {
        let t = (v - self.range_low) / (self.range_high - self.range_low);
        let b = (t * self.bin_count as f64).floor();
        if b.is_nan() || b < 0.0 {
            0
        } else {
            (b as usize).min(self.bin_count - 1)
        }
    }

    fn bins_of(&self, v: &Volume) -> Vec<u16> {
        v.voxels().iter().map(|&x| self.bin(x) as u16).collect()
    }
}

fn entropy_from_counts(counts: impl Iterator<Item = u32>, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let s: f64 = counts
        .filter(|&c| c > 0)
        .map(|c| {
            let c = c as f64;
            c * c.log2()
        })
        .sum();
    let nf = n as f64;
    (nf.log2() - s / nf).max(0.0)
}

fn marginal_entropy(bins: &[u16], bin_count: usize) -> f64 {
    let mut counts = vec![0u32; bin_count];
    for &b in bins {
        counts[b as usize] += 1;
    }
    entropy_from_counts(counts.into_iter(), bins.len())
}

fn joint_entropy_bins(a: &[u16], b: &[u16], bin_count: usize, scratch: &mut Vec<u32>) -> f64 {
    scratch.clear();
    scratch.resize(bin_count * bin_count, 0);
    for (&x, &y) in a.iter().zip(b) {
        scratch[x as usize * bin_count + y as usize] += 1;
    }
    entropy_from_counts(scratch.iter().copied(), a.len())
}

fn check_pair(a: &Volume, b: &Volume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(MetricsError::DimMismatch(format!(
            "{:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

pub fn shannon_entropy(v: &Volume, h: &HistogramSpec) -> Result<f64> {
    h.validate()?;
    Ok(marginal_entropy(&h.bins_of(v), h.bin_count))
}

pub fn joint_entropy(a: &Volume, b: &Volume, h: &HistogramSpec) -> Result<f64> {
    h.validate()?;
    check_pair(a, b)?;
    Ok(joint_entropy_bins(
        &h.bins_of(a),
        &h.bins_of(b),
        h.bin_count,
        &mut Vec::new(),
    ))
}

/// `H(s_g | s_r) = H(s_g, s_r) - H(s_r)` from the voxelwise joint histogram.
pub fn conditional_entropy(s_g: &Volume, s_r: &Volume, h: &HistogramSpec) -> Result<f64> {
    let hj = joint_entropy(s_g, s_r, h)?;
    Ok((hj - shannon_entropy(s_r, h)?).max(0.0))
}

/// `I(s_g; s_r) = H(s_g) - H(s_g | s_r)`, clamped to be non-negative.
pub fn mutual_information(s_g: &Volume, s_r: &Volume, h: &HistogramSpec) -> Result<f64> {
    let hg = shannon_entropy(s_g, h)?;
    Ok((hg - conditional_entropy(s_g, s_r, h)?).max(0.0))
}

/// Maximum MI of `s_g` against every real sample, with the maximizing index
/// (the first one on ties).
pub fn max_mutual_information(
    s_g: &Volume,
    reals: &[Volume],
    h: &HistogramSpec,
) -> Result<(f64, usize)> {
    MiScreen::new(reals, *h)?.max_mi(s_g)
}

/// Precomputed real-sample bins and entropies for repeated MI screening.
#[derive(Debug, Clone)]
pub struct MiScreen {
    spec: HistogramSpec,
    dims: [usize; 3],
    real_bins: Vec<Vec<u16>>,
    real_entropy: Vec<f64>,
}

impl MiScreen {
    pub fn new(reals: &[Volume], spec: HistogramSpec) -> Result<Self> {
        spec.validate()?;
        let first = reals.first().ok_or(MetricsError::EmptyReals)?;
        let dims = first.dims();
        let mut real_bins = Vec::with_capacity(reals.len());
        let mut real_entropy = Vec::with_capacity(reals.len());
        for r in reals {
            if r.dims() != dims {
                return Err(MetricsError::DimMismatch(format!(
                    "{:?} vs {dims:?}",
                    r.dims()
                )));
            }
            let bins = spec.bins_of(r);
            real_entropy.push(marginal_entropy(&bins, spec.bin_count));
            real_bins.push(bins);
        }
        Ok(Self {
            spec,
            dims,
            real_bins,
            real_entropy,
        })
    }

    pub fn spec(&self) -> &HistogramSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.real_bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.real_bins.is_empty()
    }

    pub fn max_mi(&self, s_g: &Volume) -> Result<(f64, usize)> {
        if s_g.dims() != self.dims {
            return Err(MetricsError::DimMismatch(format!(
                "{:?} vs {:?}",
                s_g.dims(),
                self.dims
            )));
        }
        let bins = self.spec.bins_of(s_g);
        let hg = marginal_entropy(&bins, self.spec.bin_count);
        let mut scratch = Vec::new();
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, (rb, &hr)) in self.real_bins.iter().zip(&self.real_entropy).enumerate() {
            let hj = joint_entropy_bins(&bins, rb, self.spec.bin_count, &mut scratch);
            let mi = (hg - (hj - hr).max(0.0)).max(0.0);
            if mi > best.0 {
                best = (mi, i);
            }
        }
        Ok(best)
    }
}
