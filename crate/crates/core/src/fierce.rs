//! Feature-entropy estimation over a fixed random anchor set.
//!
//! Each feature row is assigned to the anchor it is most cosine-similar to;
//! the batch histogram of assignments gives a categorical distribution whose
//! entropy stands in for the entropy of the feature space. To differentiate
//! it, the assignment is sampled with the Gumbel-Max trick and relaxed with a
//! Gumbel-softmax, then recombined straight-through: the forward pass sees
//! the hard one-hot, the backward pass sees the soft relaxation.
//!
//! Cosine similarities lie in `[-1, 1]` and cannot be fed to `log` directly,
//! so the categorical parameters are `π = softmax(sim / τ_sim)`, which keeps
//! the ranking of the similarities.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::distr::{Distribution, Open01};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Axis, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{ForwardOutput, ForwardValues, MlpConfig};
use crate::tensor::{argmax, Tensor};

/// Guards the cosine denominator against all-zero feature rows.
pub const COSINE_EPS: f64 = 1e-12;

/// `e` unit vectors in the `d`-dimensional feature space, fixed for a run.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    anchors: Tensor,
    transposed: Tensor,
    seed: u64,
}

impl AnchorSet {
    /// Entries uniform on `[-1, 1]`, then each row normalized. All-zero rows
    /// are redrawn.
    pub fn sample(count: usize, dim: usize, seed: u64) -> Result<Self> {
        if count == 0 || dim == 0 {
            return Err(Error::InvalidParameter(format!(
                "anchor set needs e >= 1 and d >= 1, got e={count}, d={dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(count * dim);
        for _ in 0..count {
            loop {
                let row: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    data.extend(row.iter().map(|v| v / norm));
                    break;
                }
            }
        }
        Self::from_matrix(Tensor::matrix(count, dim, data)?, seed)
    }

    /// Wraps explicit anchors; rows must have unit norm.
    pub fn from_matrix(anchors: Tensor, seed: u64) -> Result<Self> {
        for r in 0..anchors.rows() {
            let n = anchors.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidParameter(format!(
                    "anchor {r} has norm {n}, expected 1"
                )));
            }
        }
        let transposed = anchors.transpose();
        Ok(Self {
            anchors,
            transposed,
            seed,
        })
    }

    pub fn count(&self) -> usize {
        self.anchors.rows()
    }

    pub fn dim(&self) -> usize {
        self.anchors.cols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn matrix(&self) -> &Tensor {
        &self.anchors
    }

    /// Anchor dump: header `anchor,a_0..a_{d-1}`, one row per anchor.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header: Vec<String> = (0..self.dim()).map(|j| format!("a_{j}")).collect();
        writeln!(w, "anchor,{}", header.join(","))?;
        for i in 0..self.count() {
            let vals: Vec<String> = self.anchors.row(i).iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(w, "{i},{}", vals.join(","))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `⟨r_n, a_i⟩ / (‖r_n‖ ‖a_i‖ + ε)` for every feature row and anchor.
pub fn cosine_similarities(tape: &mut Tape, features: Var, anchors: &AnchorSet) -> Result<Var> {
    let fv = tape.value(features);
    if !fv.is_matrix() || fv.cols() != anchors.dim() {
        return Err(Error::ShapeMismatch {
            op: "cosine_similarities",
            lhs: fv.shape().to_vec(),
            rhs: anchors.matrix().shape().to_vec(),
        });
    }
    let at = tape.constant(anchors.transposed.clone())?;
    let dots = tape.matmul(features, at)?;
    // anchors have unit norm
    let norms = tape.row_l2_norm(features)?;
    let denom = tape.add_scalar(norms, COSINE_EPS)?;
    tape.div(dots, denom)
}

/// What the anchors see.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorSpace {
    /// The features as they are; with the bottleneck, the activations before
    /// averaging, since a single column only has two directions.
    Raw,
    /// The features centered, scaled and lifted by [`standardize_features`].
    Standardized,
}

impl AnchorSpace {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Raw => "raw",
            Self::Standardized => "standardized",
        }
    }

    /// Anchor dimension for a feature layer of width `feature_dim`.
    pub fn dim(self, feature_dim: usize, bottleneck_average: bool) -> usize {
        match (self, bottleneck_average) {
            (Self::Raw, _) => feature_dim,
            (Self::Standardized, true) => 2,
            (Self::Standardized, false) => feature_dim + 1,
        }
    }
}

impl FromStr for AnchorSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Self::Raw),
            "standardized" => Ok(Self::Standardized),
            other => Err(Error::Config(format!("unknown anchor space '{other}'"))),
        }
    }
}

/// The points handed to the anchors, on the tape.
pub fn anchor_points(tape: &mut Tape, space: AnchorSpace, mlp: &MlpConfig, out: &ForwardOutput) -> Result<Var> {
    match (space, mlp.bottleneck_average) {
        (AnchorSpace::Raw, true) => Ok(out.activations),
        (AnchorSpace::Raw, false) => Ok(out.features),
        (AnchorSpace::Standardized, _) => standardize_features(tape, out.features),
    }
}

/// [`anchor_points`] from plain forward values.
pub fn anchor_point_values(space: AnchorSpace, mlp: &MlpConfig, v: &ForwardValues) -> Result<Tensor> {
    match (space, mlp.bottleneck_average) {
        (AnchorSpace::Raw, true) => Ok(v.activations.clone()),
        (AnchorSpace::Raw, false) => Ok(v.features.clone()),
        (AnchorSpace::Standardized, _) => {
            let mut tape = Tape::new();
            let f = tape.constant(v.features.clone())?;
            let s = standardize_features(&mut tape, f)?;
            Ok(tape.value(s).clone())
        }
    }
}

/// Centers every column over the batch, divides by one overall deviation and
/// appends a constant 1, so no point sits at the origin where cosine carries
/// no direction. A single column `r` becomes `(r, 1)`, which cosine against
/// 2-D anchors bins by value. The deviation is floored at 1e-6 through the
/// logarithm. Rows that collapse together stay together, whatever their
/// norm, which keeps all-zero ReLU rows from reading as spread out. A shared
/// scale keeps a nearly constant column from amplifying its gradient.
pub fn standardize_features(tape: &mut Tape, features: Var) -> Result<Var> {
    let fv = tape.value(features);
    if !fv.is_matrix() || fv.rows() == 0 || fv.cols() == 0 {
        return Err(Error::Empty("standardize_features input"));
    }
    let n = fv.rows();
    let mean = tape.mean_axis(features, Axis::Rows)?;
    let centered = tape.sub(features, mean)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.mean(sq)?;
    let log_var = tape.log(var)?;
    let log_std = tape.scale(log_var, 0.5)?;
    let std = tape.exp(log_std)?;
    let scaled = tape.div(centered, std)?;
    let ones = tape.constant(Tensor::full(&[n, 1], 1.0))?;
    tape.concat(&[scaled, ones], Axis::Cols)
}

/// `π = softmax(sim / τ_sim)` per row.
pub fn similarity_logits(tape: &mut Tape, sims: Var, tau_sim: f64) -> Result<Var> {
    if !(tau_sim > 0.0) {
        return Err(Error::InvalidParameter(format!("τ_sim must be positive, got {tau_sim}")));
    }
    let scaled = tape.scale(sims, 1.0 / tau_sim)?;
    tape.row_softmax(scaled)
}

/// Inverse CDF of the standard Gumbel law.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// Standard Gumbel noise, row-major, reproducible from `(seed, step)`; the
/// value at a given index depends only on `(seed, step, index)`.
pub fn gumbel_noise(rows: usize, cols: usize, seed: u64, step: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    let data = (0..rows * cols)
        .map(|_| {
            let u: f64 = Open01.sample(&mut rng);
            gumbel_from_uniform(u)
        })
        .collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

/// Perturbed log-probabilities `log π + g`; their row argmax is a draw from π.
pub fn perturbed_scores(tape: &mut Tape, pi: Var, noise: &Tensor) -> Result<Var> {
    let log_pi = tape.log(pi)?;
    let g = tape.constant(noise.clone())?;
    tape.add(log_pi, g)
}

/// Gumbel-softmax relaxation `softmax((log π + g) / τ)`.
pub fn soft_assignment(tape: &mut Tape, pi: Var, noise: &Tensor, tau_gumbel: f64) -> Result<Var> {
    let scores = perturbed_scores(tape, pi, noise)?;
    relax(tape, scores, tau_gumbel)
}

fn relax(tape: &mut Tape, scores: Var, tau_gumbel: f64) -> Result<Var> {
    if !(tau_gumbel > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "τ_gumbel must be positive, got {tau_gumbel}"
        )));
    }
    let scaled = tape.scale(scores, 1.0 / tau_gumbel)?;
    tape.row_softmax(scaled)
}

/// Exact one-hot at each row's argmax; the lowest index wins ties.
pub fn hard_assignment(scores: &Tensor) -> Tensor {
    let (n, e) = (scores.rows(), scores.cols());
    let mut out = vec![0.0; n * e];
    for r in 0..n {
        out[r * e + argmax(scores.row(r))] = 1.0;
    }
    Tensor::matrix(n, e, out).expect("shape")
}

/// Forward value `hard`, gradient of `soft`.
pub fn straight_through(tape: &mut Tape, hard: &Tensor, soft: Var) -> Result<Var> {
    tape.straight_through(hard, soft)
}

/// Batch histogram `p̂` (column mean, `1 x e`) and its entropy.
#[derive(Clone, Copy, Debug)]
pub struct BatchEntropy {
    pub p_hat: Var,
    pub entropy: Var,
}

/// `p̂ = mean_n a_n`, `Ĥ = -Σ_i p̂_i log p̂_i` with `0 log 0 = 0`.
pub fn batch_entropy(tape: &mut Tape, assignments: Var) -> Result<BatchEntropy> {
    let p_hat = tape.mean_axis(assignments, Axis::Rows)?;
    let log_p = tape.log(p_hat)?;
    let plogp = tape.mul(p_hat, log_p)?;
    let s = tape.sum(plogp)?;
    let entropy = tape.neg(s)?;
    Ok(BatchEntropy { p_hat, entropy })
}

/// Off-tape entropy of the batch histogram of hard cosine assignments, with
/// no Gumbel noise. Used to monitor training; never differentiated.
pub fn monitor_entropy(features: &Tensor, anchors: &AnchorSet) -> Result<f64> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone())?;
    let sims = cosine_similarities(&mut tape, f, anchors)?;
    let hard = hard_assignment(tape.value(sims));
    let a = tape.constant(hard)?;
    let be = batch_entropy(&mut tape, a)?;
    Ok(tape.value(be.entropy).item())
}

/// Which assignment feeds the batch histogram.
#[derive(Clone, Debug, PartialEq)]
pub enum AssignmentPath {
    /// Hard forward, soft gradient; the training estimator.
    StraightThrough,
    /// The relaxed Gumbel-softmax samples.
    Soft,
    /// The hard samples, with no gradient.
    Hard,
    /// `soft + offset` with a constant offset; with the offset frozen at
    /// `hard - soft` of a base point this is the straight-through estimator
    /// with its stop-gradient held fixed, which is smooth in the parameters
    /// and so can be checked by finite differences.
    FrozenOffset(Tensor),
}

/// All assignment variants computed for one batch.
#[derive(Clone, Debug)]
pub struct AssignmentDistribution {
    pub pi: Tensor,
    pub soft: Tensor,
    pub hard: Tensor,
    pub straight_through: Tensor,
    pub noise: Tensor,
    pub tau_gumbel: f64,
    pub tau_sim: f64,
}

#[derive(Clone, Debug)]
pub struct FeatureEntropy {
    pub entropy: Var,
    pub p_hat: Var,
    pub assignments: AssignmentDistribution,
}

/// Full differentiable estimator: cosine similarities, `π`, Gumbel
/// perturbation, relaxation, and the batch entropy of the selected path.
pub fn feature_entropy(
    tape: &mut Tape,
    features: Var,
    anchors: &AnchorSet,
    noise: &Tensor,
    tau_gumbel: f64,
    tau_sim: f64,
    path: &AssignmentPath,
) -> Result<FeatureEntropy> {
    let sims = cosine_similarities(tape, features, anchors)?;
    let pi = similarity_logits(tape, sims, tau_sim)?;
    if noise.shape() != tape.value(pi).shape() {
        return Err(Error::ShapeMismatch {
            op: "feature_entropy noise",
            lhs: tape.value(pi).shape().to_vec(),
            rhs: noise.shape().to_vec(),
        });
    }
    let scores = perturbed_scores(tape, pi, noise)?;
    let hard = hard_assignment(tape.value(scores));
    let soft = relax(tape, scores, tau_gumbel)?;
    let st = straight_through(tape, &hard, soft)?;
    let chosen = match path {
        AssignmentPath::StraightThrough => st,
        AssignmentPath::Soft => soft,
        AssignmentPath::Hard => tape.constant(hard.clone())?,
        AssignmentPath::FrozenOffset(offset) => {
            let o = tape.constant(offset.clone())?;
            tape.add(soft, o)?
        }
    };
    let be = batch_entropy(tape, chosen)?;
    Ok(FeatureEntropy {
        entropy: be.entropy,
        p_hat: be.p_hat,
        assignments: AssignmentDistribution {
            pi: tape.value(pi).clone(),
            soft: tape.value(soft).clone(),
            straight_through: tape.value(st).clone(),
            hard,
            noise: noise.clone(),
            tau_gumbel,
            tau_sim,
        },
    })
}

/// Hyperparameters of the regularizer.
#[derive(Clone, Debug, PartialEq)]
pub struct FierceConfig {
    pub lambda: f64,
    pub anchors: usize,
    pub tau_gumbel: f64,
    pub tau_sim: f64,
    /// Geometric annealing target for `τ_gumbel` at the last epoch; off when `None`.
    pub tau_gumbel_final: Option<f64>,
}

impl Default for FierceConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            anchors: 100,
            tau_gumbel: 0.5,
            tau_sim: 0.1,
            tau_gumbel_final: None,
        }
    }
}

impl FierceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || self.anchors == 0 || !(self.tau_gumbel > 0.0) || !(self.tau_sim > 0.0)
        {
            return Err(Error::InvalidParameter(format!("invalid regularizer config {self:?}")));
        }
        if let Some(f) = self.tau_gumbel_final {
            if !(f > 0.0) {
                return Err(Error::InvalidParameter(format!("τ_gumbel_final must be positive, got {f}")));
            }
        }
        Ok(())
    }

    /// Gumbel temperature used during `epoch` (0-based) of `epochs`.
    pub fn tau_gumbel_at(&self, epoch: usize, epochs: usize) -> f64 {
        match self.tau_gumbel_final {
            Some(fin) if epochs > 1 => {
                let t = epoch as f64 / (epochs - 1) as f64;
                self.tau_gumbel * (fin / self.tau_gumbel).powf(t)
            }
            _ => self.tau_gumbel,
        }
    }
}
