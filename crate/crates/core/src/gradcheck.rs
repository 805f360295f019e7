//! Gradient audit of the full regularized loss against central finite
//! differences.
//!
//! The straight-through loss is piecewise constant in its forward value, so
//! it cannot be differenced directly. With the Gumbel noise frozen, the
//! audited function is the same loss with the stop-gradient offset
//! `hard - soft` frozen at the base point: `L(θ) = f(soft(θ) + c)`. Its value
//! at the base point equals the straight-through loss and its exact gradient
//! is the straight-through gradient, so the two must agree to finite
//! difference accuracy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{finite_difference_gradient, Tape};
use crate::error::{Error, Result};
use crate::fierce::{
    anchor_point_values, anchor_points, feature_entropy, gumbel_noise, AnchorSet, AnchorSpace, AssignmentDistribution,
    AssignmentPath, FierceConfig,
};
use crate::losses::{cross_entropy, fierce_loss, softmax_probs};
use crate::nn::{forward, MlpConfig, ModelParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerance {
    pub relative: f64,
    pub absolute: f64,
    pub step: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            relative: 1e-4,
            absolute: 1e-7,
            step: 1e-6,
        }
    }
}

impl Tolerance {
    pub fn accepts(&self, analytic: f64, numeric: f64) -> bool {
        let err = (analytic - numeric).abs();
        err <= self.absolute || err <= self.relative * analytic.abs().max(numeric.abs())
    }
}

/// A random small problem: model, batch, anchors and frozen noise.
#[derive(Clone, Debug)]
pub struct GradcheckInstance {
    pub mlp: MlpConfig,
    pub params: ModelParams,
    pub x: Tensor,
    pub y: Tensor,
    pub anchors: AnchorSet,
    pub space: AnchorSpace,
    pub noise: Tensor,
    pub fierce: FierceConfig,
}

impl GradcheckInstance {
    /// Two hidden layers of width at most 16, batch at most 32, at most 16
    /// anchors. The frozen noise is redrawn until every anchor receives at
    /// least one hard assignment, so the batch histogram stays away from the
    /// zero boundary of the logarithm.
    pub fn random(seed: u64, index: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        for _ in 0..100 {
            if let Some(inst) = Self::draw(&mut rng)? {
                return Ok(inst);
            }
        }
        Err(Error::InvalidParameter(format!("instance {index}: no admissible draw")))
    }

    /// One candidate; `None` when a feature row is (near) zero, where cosine
    /// similarity is discontinuous, when a ReLU input sits within reach of
    /// its kink, or when no noise draw covers every anchor.
    fn draw(rng: &mut ChaCha8Rng) -> Result<Option<Self>> {
        let mlp = MlpConfig {
            input_dim: rng.random_range(2..=8),
            hidden_dims: vec![rng.random_range(2..=16), rng.random_range(2..=16)],
            feature_dim: rng.random_range(2..=16),
            num_classes: rng.random_range(2..=5),
            bottleneck_average: rng.random_bool(0.5),
        };
        let batch = rng.random_range(8..=32);
        let e = rng.random_range(2..=(batch / 4).clamp(2, 16));
        let fierce = FierceConfig {
            lambda: rng.random_range(0.1..2.0),
            anchors: e,
            tau_gumbel: rng.random_range(0.3..1.0),
            tau_sim: rng.random_range(0.5..1.0),
            tau_gumbel_final: None,
        };
        let params = ModelParams::init(&mlp, rng.random())?;
        let x: Vec<f64> = (0..batch * mlp.input_dim).map(|_| StandardNormal.sample(rng)).collect();
        let x = Tensor::matrix(batch, mlp.input_dim, x)?;
        let mut y = vec![0.0; batch * mlp.num_classes];
        for n in 0..batch {
            y[n * mlp.num_classes + rng.random_range(0..mlp.num_classes)] = 1.0;
        }
        let y = Tensor::matrix(batch, mlp.num_classes, y)?;
        let space = if rng.random_bool(0.5) { AnchorSpace::Standardized } else { AnchorSpace::Raw };
        let anchors = AnchorSet::sample(e, space.dim(mlp.feature_dim, mlp.bottleneck_average), rng.random())?;
        let noise_seed: u64 = rng.random();

        let fv = params.forward_values(&mlp, &x)?;
        let points = anchor_point_values(space, &mlp, &fv)?;
        let min_norm = (0..batch)
            .map(|n| points.row(n).iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(f64::INFINITY, f64::min);
        if min_norm < 1e-3 || min_abs_preactivation(&params, &x) < 1e-4 {
            return Ok(None);
        }
        let mut inst = Self {
            mlp,
            params,
            x,
            y,
            anchors,
            space,
            noise: Tensor::zeros(&[batch, e]),
            fierce,
        };
        for step in 0..1000 {
            inst.noise = gumbel_noise(batch, e, noise_seed, step);
            let (_, _, dist) = inst.evaluate(&inst.params.tensors(), &AssignmentPath::StraightThrough, false)?;
            if (0..e).all(|i| (0..batch).any(|n| dist.hard.get(n, i) == 1.0)) {
                return Ok(Some(inst));
            }
        }
        Ok(None)
    }

    pub fn describe(&self) -> String {
        format!(
            "d_in={} hidden={:?} d={} c={} N={} e={} bottleneck={} space={}",
            self.mlp.input_dim,
            self.mlp.hidden_dims,
            self.mlp.feature_dim,
            self.mlp.num_classes,
            self.x.rows(),
            self.anchors.count(),
            self.mlp.bottleneck_average,
            self.space.as_str()
        )
    }

    /// Loss value, optional gradient, and the assignments at `tensors`.
    pub fn evaluate(
        &self,
        tensors: &[Tensor],
        path: &AssignmentPath,
        with_grad: bool,
    ) -> Result<(f64, Option<Vec<Tensor>>, AssignmentDistribution)> {
        let params = self.params.with_tensors(tensors)?;
        let mut tape = Tape::new();
        let vars = params.register(&mut tape)?;
        let x = tape.constant(self.x.clone())?;
        let out = forward(&mut tape, &self.mlp, &vars, x)?;
        let q = softmax_probs(&mut tape, out.logits, 1.0)?;
        let y = tape.constant(self.y.clone())?;
        let ce = cross_entropy(&mut tape, q, y)?;
        let points = anchor_points(&mut tape, self.space, &self.mlp, &out)?;
        let fe = feature_entropy(
            &mut tape,
            points,
            &self.anchors,
            &self.noise,
            self.fierce.tau_gumbel,
            self.fierce.tau_sim,
            path,
        )?;
        let loss = fierce_loss(&mut tape, ce, fe.entropy, self.fierce.lambda)?;
        let value = tape.value(loss).item();
        let grads = if with_grad {
            let g = tape.backward(loss)?;
            Some(
                vars.vars()
                    .iter()
                    .map(|v| g.get(*v).cloned().ok_or_else(|| Error::MissingGradient(format!("{v:?}"))))
                    .collect::<Result<_>>()?,
            )
        } else {
            None
        };
        Ok((value, grads, fe.assignments))
    }

    /// Straight-through gradient at the base parameters.
    pub fn analytic_gradient(&self) -> Result<(f64, Vec<Tensor>, AssignmentDistribution)> {
        let (v, g, d) = self.evaluate(&self.params.tensors(), &AssignmentPath::StraightThrough, true)?;
        Ok((v, g.expect("requested"), d))
    }

    /// Central differences of the frozen-offset loss.
    pub fn numeric_gradient(&self, h: f64) -> Result<(f64, Vec<Tensor>)> {
        let base = self.params.tensors();
        let (_, _, dist) = self.evaluate(&base, &AssignmentPath::StraightThrough, false)?;
        let offset = Tensor::matrix(
            dist.hard.rows(),
            dist.hard.cols(),
            dist.hard.data().iter().zip(dist.soft.data()).map(|(h, s)| h - s).collect(),
        )?;
        let path = AssignmentPath::FrozenOffset(offset);
        let (v, _, _) = self.evaluate(&base, &path, false)?;
        let g = finite_difference_gradient(|p| Ok(self.evaluate(p, &path, false)?.0), &base, h)?;
        Ok((v, g))
    }
}

/// Smallest `|pre-activation|` over every hidden unit and sample.
fn min_abs_preactivation(params: &ModelParams, x: &Tensor) -> f64 {
    let tensors = params.tensors();
    let layers = tensors.len() / 2 - 1;
    let mut h = x.clone();
    let mut min = f64::INFINITY;
    for l in 0..layers {
        let (w, b) = (&tensors[2 * l], &tensors[2 * l + 1]);
        let mut z = crate::autodiff::matmul(&h, w);
        let cols = z.cols();
        for (k, v) in z.data_mut().iter_mut().enumerate() {
            *v += b.data()[k % cols];
            min = min.min(v.abs());
        }
        h = z.map(|v| v.max(0.0));
    }
    min
}

#[derive(Clone, Debug)]
pub struct InstanceReport {
    pub index: u64,
    pub description: String,
    pub entries: usize,
    /// Entries outside tolerance.
    pub failures: usize,
    pub max_abs_error: f64,
    /// Largest relative error among entries above the absolute floor.
    pub max_rel_error: f64,
    /// `|L_ST - L_frozen|` at the base point; zero up to rounding.
    pub value_gap: f64,
}

impl InstanceReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

pub fn check_instance(inst: &GradcheckInstance, index: u64, tol: &Tolerance) -> Result<InstanceReport> {
    let (st_value, analytic, _) = inst.analytic_gradient()?;
    let (frozen_value, numeric) = inst.numeric_gradient(tol.step)?;
    let mut report = InstanceReport {
        index,
        description: inst.describe(),
        entries: 0,
        failures: 0,
        max_abs_error: 0.0,
        max_rel_error: 0.0,
        value_gap: (st_value - frozen_value).abs(),
    };
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&ga, &gn) in a.data().iter().zip(n.data()) {
            let err = (ga - gn).abs();
            report.entries += 1;
            report.max_abs_error = report.max_abs_error.max(err);
            if err > tol.absolute {
                report.max_rel_error = report.max_rel_error.max(err / ga.abs().max(gn.abs()));
            }
            if !tol.accepts(ga, gn) {
                report.failures += 1;
            }
        }
    }
    Ok(report)
}

/// Audits `count` random instances derived from `seed`.
pub fn gradient_audit(seed: u64, count: u64, tol: &Tolerance) -> Result<Vec<InstanceReport>> {
    (0..count)
        .map(|i| check_instance(&GradcheckInstance::random(seed, i)?, i, tol))
        .collect()
}
