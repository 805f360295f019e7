//! Calibration and feature diagnostics: reliability bins, ECE/MCE, an
//! output-entropy mutual-information proxy, within-class stability, a
//! histogram reference entropy for 1-D features, and Pearson correlation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{argmax, Tensor};

pub const DEFAULT_RELIABILITY_BINS: usize = 15;
pub const DEFAULT_REFERENCE_BINS: usize = 64;
pub const CONFIDENCE_DECILES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Mean confidence; zero for empty bins.
    pub confidence: f64,
    /// Fraction correct; zero for empty bins.
    pub accuracy: f64,
}

impl Bin {
    pub fn gap(&self) -> f64 {
        (self.accuracy - self.confidence).abs()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReliabilityBins {
    pub bins: Vec<Bin>,
    pub total: usize,
}

/// Index of `v ∈ [0, 1]` among `b` uniform bins; `1.0` lands in the last.
fn uniform_bin(v: f64, b: usize) -> usize {
    ((v * b as f64).floor().max(0.0) as usize).min(b - 1)
}

/// Bins samples by max-probability confidence. A sample is correct when
/// `argmax q == argmax y`.
pub fn reliability(q: &Tensor, y: &Tensor, num_bins: usize) -> Result<ReliabilityBins> {
    if num_bins == 0 {
        return Err(Error::InvalidParameter("need at least one bin".into()));
    }
    if q.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            op: "reliability",
            lhs: q.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    let mut count = vec![0usize; num_bins];
    let mut conf = vec![0.0; num_bins];
    let mut correct = vec![0usize; num_bins];
    for n in 0..q.rows() {
        let row = q.row(n);
        let k = argmax(row);
        let c = row[k];
        let b = uniform_bin(c, num_bins);
        count[b] += 1;
        conf[b] += c;
        correct[b] += usize::from(k == argmax(y.row(n)));
    }
    let bins = (0..num_bins)
        .map(|b| {
            let k = count[b];
            Bin {
                lo: b as f64 / num_bins as f64,
                hi: (b + 1) as f64 / num_bins as f64,
                count: k,
                confidence: if k > 0 { conf[b] / k as f64 } else { 0.0 },
                accuracy: if k > 0 { correct[b] as f64 / k as f64 } else { 0.0 },
            }
        })
        .collect();
    Ok(ReliabilityBins {
        bins,
        total: q.rows(),
    })
}

fn nonempty(bins: &ReliabilityBins) -> Result<impl Iterator<Item = &Bin>> {
    if bins.total == 0 {
        return Err(Error::Empty("reliability bins"));
    }
    Ok(bins.bins.iter().filter(|b| b.count > 0))
}

/// Count-weighted mean calibration gap.
pub fn ece(bins: &ReliabilityBins) -> Result<f64> {
    let n = bins.total as f64;
    Ok(nonempty(bins)?.map(|b| b.count as f64 / n * b.gap()).sum())
}

/// Largest calibration gap over nonempty bins.
pub fn mce(bins: &ReliabilityBins) -> Result<f64> {
    Ok(nonempty(bins)?.map(Bin::gap).fold(0.0, f64::max))
}

/// Entropy of a frequency table, `0 log 0 = 0`.
pub fn entropy_of_counts(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&k| k > 0)
        .map(|&k| {
            let p = k as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// Entropy of the discretized outputs `(argmax, confidence bin)`. With a
/// deterministic network and distinct inputs this equals the mutual
/// information between inputs and discretized outputs; it is a proxy.
pub fn mutual_info_proxy(q: &Tensor, confidence_bins: usize) -> Result<f64> {
    if confidence_bins == 0 {
        return Err(Error::InvalidParameter("need at least one confidence bin".into()));
    }
    let c = q.cols();
    let mut counts = vec![0usize; c * confidence_bins];
    for n in 0..q.rows() {
        let row = q.row(n);
        let k = argmax(row);
        counts[k * confidence_bins + uniform_bin(row[k], confidence_bins)] += 1;
    }
    Ok(entropy_of_counts(&counts))
}

fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// `1 -` mean total-variation distance between outputs of same-class
/// samples, averaged over classes. Classes with at least `P` distinct pairs
/// available are sampled with `P` random pairs; smaller ones enumerate every
/// pair. Classes with fewer than two samples are skipped.
pub fn stability(q: &Tensor, y: &Tensor, pairs_per_class: usize, seed: u64) -> Result<f64> {
    if q.rows() != y.rows() {
        return Err(Error::ShapeMismatch {
            op: "stability",
            lhs: q.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    let classes = y.argmax_rows();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); y.cols()];
    for (n, &c) in classes.iter().enumerate() {
        members[c].push(n);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_class = Vec::new();
    for (c, idx) in members.iter().enumerate() {
        let n = idx.len();
        if n < 2 {
            if n == 1 {
                log::warn!("stability: class {c} has a single sample, skipped");
            }
            continue;
        }
        let all_pairs = n * (n - 1) / 2;
        let mean_tv = if pairs_per_class >= all_pairs || pairs_per_class == 0 {
            let mut s = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    s += total_variation(q.row(idx[i]), q.row(idx[j]));
                }
            }
            s / all_pairs as f64
        } else {
            let mut s = 0.0;
            for _ in 0..pairs_per_class {
                let i = rng.random_range(0..n);
                let mut j = rng.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                s += total_variation(q.row(idx[i]), q.row(idx[j]));
            }
            s / pairs_per_class as f64
        };
        per_class.push(1.0 - mean_tv);
    }
    if per_class.is_empty() {
        return Err(Error::Empty("stability: no class has two samples"));
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

/// Histogram entropy of scalar features over `[min, max]`; a degenerate
/// range gives 0.
pub fn reference_feature_entropy(features: &[f64], num_bins: usize) -> Result<f64> {
    if num_bins == 0 {
        return Err(Error::InvalidParameter("need at least one bin".into()));
    }
    if features.is_empty() {
        return Err(Error::Empty("features"));
    }
    let lo = features.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = features.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Ok(0.0);
    }
    let mut counts = vec![0usize; num_bins];
    for &v in features {
        counts[uniform_bin((v - lo) / (hi - lo), num_bins)] += 1;
    }
    Ok(entropy_of_counts(&counts))
}

pub fn pearson_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "need two equal series of length >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Maps a series affinely onto `[0, 1]`; a constant series maps to zeros.
pub fn min_max_rescale(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Reference and anchor entropies over training, each rescaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyTrace {
    pub reference: Vec<f64>,
    pub anchor: Vec<f64>,
}

impl EntropyTrace {
    pub fn new(reference: &[f64], anchor: &[f64]) -> Result<Self> {
        if reference.len() != anchor.len() {
            return Err(Error::InvalidParameter("entropy series differ in length".into()));
        }
        Ok(Self {
            reference: min_max_rescale(reference),
            anchor: min_max_rescale(anchor),
        })
    }

    pub fn correlation(&self) -> Result<f64> {
        pearson_correlation(&self.reference, &self.anchor)
    }
}
