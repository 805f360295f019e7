//! Fine-label recovery from coarse-trained models.
//!
//! * [`ot_map_1d`]: 1-D optimal transport between the empirical feature
//!   distribution and the fine-label marginal, i.e. rank matching.
//! * [`select_orientation_and_alpha`]: interpolation of the OT prediction
//!   with the class-mean baseline, picking the best `(α, orientation)`.
//! * [`raw_mse`] and [`transfer_mse`] for simplex-valued fine labels.

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::losses::softmax_probs;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    /// Smallest feature receives the smallest fine label.
    Ascending,
    Descending,
}

impl Orientation {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ascending => "ascending",
            Self::Descending => "descending",
        }
    }
}

/// A sorted fine-label marginal queried at rank fractions.
#[derive(Clone, Debug, PartialEq)]
pub struct OtMap1d {
    sorted: Vec<f64>,
    pub orientation: Orientation,
}

impl OtMap1d {
    pub fn new(fine_marginal: &[f64], orientation: Orientation) -> Result<Self> {
        if fine_marginal.is_empty() {
            return Err(Error::Empty("fine marginal"));
        }
        let mut sorted = fine_marginal.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self {
            sorted,
            orientation,
        })
    }

    pub fn sorted_marginal(&self) -> &[f64] {
        &self.sorted
    }

    /// Quantile at rank fraction `p`. Order statistic `j` sits at
    /// `(j + 0.5) / M`; values in between are linearly interpolated and the
    /// ends are clamped.
    pub fn quantile(&self, p: f64) -> f64 {
        let m = self.sorted.len();
        let h = (p * m as f64 - 0.5).clamp(0.0, (m - 1) as f64);
        let lo = h.floor() as usize;
        let hi = (lo + 1).min(m - 1);
        let w = h - lo as f64;
        if w == 0.0 {
            self.sorted[lo]
        } else {
            self.sorted[lo] + w * (self.sorted[hi] - self.sorted[lo])
        }
    }

    /// Maps every feature to the quantile of its rank. Tied features share
    /// the quantile of their average rank.
    pub fn apply(&self, features: &[f64]) -> Result<Vec<f64>> {
        let n = features.len();
        if n == 0 {
            return Err(Error::Empty("features"));
        }
        let mut order: Vec<usize> = (0..n).collect();
        match self.orientation {
            Orientation::Ascending => order.sort_by(|&a, &b| features[a].total_cmp(&features[b])),
            Orientation::Descending => order.sort_by(|&a, &b| features[b].total_cmp(&features[a])),
        }
        let mut out = vec![0.0; n];
        let mut start = 0;
        while start < n {
            let mut end = start + 1;
            while end < n && features[order[end]] == features[order[start]] {
                end += 1;
            }
            let rank = 0.5 * (start + end - 1) as f64;
            let q = self.quantile((rank + 0.5) / n as f64);
            for &i in &order[start..end] {
                out[i] = q;
            }
            start = end;
        }
        Ok(out)
    }
}

/// Rank-matched prediction of every sample's fine label.
pub fn ot_map_1d(features: &[f64], fine_marginal: &[f64], orientation: Orientation) -> Result<Vec<f64>> {
    OtMap1d::new(fine_marginal, orientation)?.apply(features)
}

/// Mean squared error.
pub fn mse(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64
}

/// Mean fine label of each predicted class; classes with no samples fall
/// back to the global mean.
pub fn class_means(z: &[f64], predicted: &[usize], num_classes: usize) -> Vec<f64> {
    let global = z.iter().sum::<f64>() / z.len() as f64;
    let mut sums = vec![0.0; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (&zi, &c) in z.iter().zip(predicted) {
        sums[c] += zi;
        counts[c] += 1;
    }
    sums.iter()
        .zip(&counts)
        .map(|(&s, &k)| if k == 0 { global } else { s / k as f64 })
        .collect()
}

/// Grid `0, step, 2 step, ..., 1`.
pub fn alpha_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::InvalidParameter(format!("α step must be in (0, 1], got {step}")));
    }
    let k = (1.0 / step).round() as usize;
    if ((k as f64) * step - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!("α step {step} does not divide 1")));
    }
    Ok((0..=k).map(|i| i as f64 / k as f64).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryResult {
    pub predictions: Vec<f64>,
    pub alpha: f64,
    pub orientation: Orientation,
    pub mse: f64,
    /// MSE of the class-mean prediction alone (`α = 1`).
    pub baseline_mse: f64,
}

/// Minimizes the MSE of `α · class_mean + (1 - α) · ot` over the grid and
/// both orientations. The fine marginal is that of `z_true`. Ties prefer the
/// larger `α`, then ascending orientation.
pub fn select_orientation_and_alpha(
    features: &[f64],
    z_true: &[f64],
    predicted: &[usize],
    coarse_class_means: &[f64],
    alphas: &[f64],
) -> Result<RecoveryResult> {
    let n = features.len();
    if n == 0 {
        return Err(Error::Empty("features"));
    }
    if z_true.len() != n || predicted.len() != n {
        return Err(Error::InvalidParameter(format!(
            "length mismatch: {n} features, {} labels, {} classes",
            z_true.len(),
            predicted.len()
        )));
    }
    if alphas.is_empty() || alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::InvalidParameter("α grid must be a nonempty subset of [0, 1]".into()));
    }
    let base: Vec<f64> = predicted
        .iter()
        .map(|&c| {
            coarse_class_means
                .get(c)
                .copied()
                .ok_or_else(|| Error::InvalidParameter(format!("no class mean for class {c}")))
        })
        .collect::<Result<_>>()?;
    let baseline_mse = mse(&base, z_true);

    let mut sorted_alphas = alphas.to_vec();
    sorted_alphas.sort_by(|a, b| b.total_cmp(a));
    let mut best: Option<RecoveryResult> = None;
    for orientation in [Orientation::Ascending, Orientation::Descending] {
        let ot = ot_map_1d(features, z_true, orientation)?;
        for &alpha in &sorted_alphas {
            let pred: Vec<f64> = if alpha == 1.0 {
                base.clone()
            } else {
                base.iter().zip(&ot).map(|(b, o)| alpha * b + (1.0 - alpha) * o).collect()
            };
            let e = mse(&pred, z_true);
            if best.as_ref().is_none_or(|b| e < b.mse) {
                best = Some(RecoveryResult {
                    predictions: pred,
                    alpha,
                    orientation,
                    mse: e,
                    baseline_mse,
                });
            }
        }
    }
    Ok(best.expect("grid is nonempty"))
}

/// Root of the mean (over samples) squared distance between rows.
pub fn raw_mse(q: &Tensor, z: &Tensor) -> Result<f64> {
    if q.shape() != z.shape() || !q.is_matrix() {
        return Err(Error::ShapeMismatch {
            op: "raw_mse",
            lhs: q.shape().to_vec(),
            rhs: z.shape().to_vec(),
        });
    }
    if q.rows() == 0 {
        return Err(Error::Empty("raw_mse inputs"));
    }
    let ss: f64 = q.data().iter().zip(z.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((ss / q.rows() as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransferConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 0.5,
            momentum: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferResult {
    /// [`raw_mse`] of the head on the held-out features.
    pub mse: f64,
    /// Training loss before each epoch's update, then after the last one.
    pub loss_trace: Vec<f64>,
}

/// Trains a fresh linear + softmax head on frozen features with a squared
/// error loss (full batch, momentum) and reports its raw MSE on held-out
/// features. Features are standardized with training statistics; the head
/// starts at zero.
pub fn transfer_mse(
    train_features: &Tensor,
    train_z: &Tensor,
    test_features: &Tensor,
    test_z: &Tensor,
    cfg: &TransferConfig,
) -> Result<TransferResult> {
    let d = train_features.cols();
    let m = train_z.cols();
    if train_features.rows() != train_z.rows()
        || test_features.rows() != test_z.rows()
        || test_features.cols() != d
        || test_z.cols() != m
    {
        return Err(Error::ShapeMismatch {
            op: "transfer_mse",
            lhs: train_features.shape().to_vec(),
            rhs: test_features.shape().to_vec(),
        });
    }
    if train_features.rows() == 0 || test_features.rows() == 0 {
        return Err(Error::Empty("transfer features"));
    }
    let (mean, scale) = column_stats(train_features);
    let xs = standardize(train_features, &mean, &scale);
    let xt = standardize(test_features, &mean, &scale);

    let mut w = Tensor::zeros(&[d, m]);
    let mut b = Tensor::zeros(&[1, m]);
    let mut vw = Tensor::zeros(&[d, m]);
    let mut vb = Tensor::zeros(&[1, m]);
    let mut loss_trace = Vec::with_capacity(cfg.epochs + 1);
    for _ in 0..cfg.epochs {
        let mut tape = Tape::new();
        let wv = tape.leaf(w.clone())?;
        let bv = tape.leaf(b.clone())?;
        let x = tape.constant(xs.clone())?;
        let z = tape.constant(train_z.clone())?;
        let l = tape.matmul(x, wv)?;
        let l = tape.add(l, bv)?;
        let q = softmax_probs(&mut tape, l, 1.0)?;
        let diff = tape.sub(q, z)?;
        let sq = tape.mul(diff, diff)?;
        let total = tape.sum(sq)?;
        let loss = tape.scale(total, 1.0 / xs.rows() as f64)?;
        loss_trace.push(tape.value(loss).item());
        let grads = tape.backward(loss)?;
        for (theta, v, var) in [(&mut w, &mut vw, wv), (&mut b, &mut vb, bv)] {
            let g = grads.get(var).ok_or_else(|| Error::MissingGradient("transfer head".into()))?;
            for ((th, vi), gi) in theta.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vi = cfg.momentum * *vi + gi;
                *th -= cfg.learning_rate * *vi;
            }
        }
    }
    let q_train = head_probs(&xs, &w, &b)?;
    let last = raw_mse(&q_train, train_z)?;
    loss_trace.push(last * last);
    let q_test = head_probs(&xt, &w, &b)?;
    Ok(TransferResult {
        mse: raw_mse(&q_test, test_z)?,
        loss_trace,
    })
}

fn head_probs(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(x.clone())?;
    let w = tape.constant(w.clone())?;
    let b = tape.constant(b.clone())?;
    let l = tape.matmul(x, w)?;
    let l = tape.add(l, b)?;
    let q = softmax_probs(&mut tape, l, 1.0)?;
    Ok(tape.value(q).clone())
}

/// Column means and standard deviations; constant columns get scale 1.
fn column_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v / n as f64;
        }
    }
    let mut var = vec![0.0; d];
    for r in 0..n {
        for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
            *s += (v - m) * (v - m) / n as f64;
        }
    }
    let scale = var
        .into_iter()
        .map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 })
        .collect();
    (mean, scale)
}

fn standardize(x: &Tensor, mean: &[f64], scale: &[f64]) -> Tensor {
    let d = x.cols();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(k, v)| (v - mean[k % d]) / scale[k % d])
        .collect();
    Tensor::matrix(x.rows(), d, data).expect("shape")
}
