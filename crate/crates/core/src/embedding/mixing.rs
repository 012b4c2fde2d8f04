use std::io::Write;
use std::path::Path;

use super::{check_rows, sq_dist, EmbeddingError, Result};

/// Mean over synthetic points of the fraction of real points among their
/// `k` nearest neighbours in the pooled set (the point itself excluded).
///
/// 0 means the sets are fully separated; when `k` covers every other
/// point the score is `R / (R + S - 1)`.
pub fn mixing_score(real: &[[f64; 2]], synth: &[[f64; 2]], k: usize) -> Result<f64> {
    if real.is_empty() || synth.is_empty() {
        return Err(EmbeddingError::TooFewSamples(real.len().min(synth.len())));
    }
    if k == 0 {
        return Err(EmbeddingError::InvalidConfig("k must be at least 1".into()));
    }
    let pooled: Vec<([f64; 2], bool)> = real
        .iter()
        .map(|&p| (p, true))
        .chain(synth.iter().map(|&p| (p, false)))
        .collect();
    let k = k.min(pooled.len() - 1);
    let mut total = 0.0;
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(pooled.len());
    for (si, s) in synth.iter().enumerate() {
        let me = real.len() + si;
        dists.clear();
        dists.extend(
            pooled
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != me)
                .map(|(j, (p, _))| (sq_dist(s, p), j)),
        );
        if k < dists.len() {
            dists.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        }
        let real_count = dists[..k].iter().filter(|&&(_, j)| pooled[j].1).count();
        total += real_count as f64 / k as f64;
    }
    Ok(total / synth.len() as f64)
}

/// Per-class means of `rows`; `labels[i] < n_classes` is the class of row `i`.
pub fn class_centroids<R: AsRef<[f64]>>(
    rows: &[R],
    labels: &[usize],
    n_classes: usize,
) -> Result<Vec<Vec<f64>>> {
    let dim = check_rows(rows)?;
    if rows.len() != labels.len() {
        return Err(EmbeddingError::DimMismatch(format!(
            "{} labels for {} rows",
            labels.len(),
            rows.len()
        )));
    }
    let mut sums = vec![vec![0.0; dim]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (r, &l) in rows.iter().zip(labels) {
        if l >= n_classes {
            return Err(EmbeddingError::InvalidConfig(format!(
                "label {l} for {n_classes} classes"
            )));
        }
        counts[l] += 1;
        sums[l]
            .iter_mut()
            .zip(r.as_ref())
            .for_each(|(s, x)| *s += x);
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c == 0 {
            return Err(EmbeddingError::TooFewSamples(0));
        }
        s.iter_mut().for_each(|v| *v /= c as f64);
    }
    Ok(sums)
}

/// Index of the centroid closest to `row` (lowest index on ties).
pub fn nearest_centroid(row: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(row, c);
        if d < best.0 {
            best = (d, k);
        }
    }
    best.1
}

/// Mode coverage of `samples`: each sample is assigned to its nearest class
/// centroid and the score is `sum_k min(share_k, 1/K)`. It is 1 when every
/// class receives at least its fair share and `1/K` under total collapse
/// onto one class.
pub fn mode_coverage<R: AsRef<[f64]>>(samples: &[R], centroids: &[Vec<f64>]) -> Result<f64> {
    if samples.is_empty() || centroids.is_empty() {
        return Err(EmbeddingError::TooFewSamples(0));
    }
    let dim = check_rows(samples)?;
    if centroids.iter().any(|c| c.len() != dim) {
        return Err(EmbeddingError::DimMismatch(
            "centroid length differs from sample length".into(),
        ));
    }
    let k = centroids.len();
    let mut counts = vec![0usize; k];
    for s in samples {
        counts[nearest_centroid(s.as_ref(), centroids)] += 1;
    }
    let fair = 1.0 / k as f64;
    Ok(counts
        .iter()
        .map(|&c| (c as f64 / samples.len() as f64).min(fair))
        .sum())
}

/// Writes `x,y,source,mode` rows; `mode` is left empty when unknown.
pub fn write_embedding_csv(
    path: impl AsRef<Path>,
    coords: &[[f64; 2]],
    sources: &[&str],
    modes: &[Option<usize>],
) -> Result<()> {
    if sources.len() != coords.len() || modes.len() != coords.len() {
        return Err(EmbeddingError::DimMismatch(
            "label columns differ in length from coordinates".into(),
        ));
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "x,y,source,mode")?;
    for ((p, s), m) in coords.iter().zip(sources).zip(modes) {
        let m = m.map(|m| m.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{s},{m}", p[0], p[1])?;
    }
    out.flush()?;
    Ok(())
}
