//! Fully connected feature extractor with a linear classifier head, trained
//! by SGD with momentum.
//!
//! Layout: `d_in -> hidden_dims... -> feature_dim` with ReLU after every
//! layer, then an optional averaging bottleneck that collapses the feature
//! activations to one column, then `logits = r W + b`.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Axis, GradientMap, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
    /// Average the feature activations into a single scalar feature.
    pub bottleneck_average: bool,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        let dims_ok = self.input_dim >= 1
            && self.feature_dim >= 1
            && self.num_classes >= 1
            && self.hidden_dims.iter().all(|&h| h >= 1);
        if !dims_ok {
            return Err(Error::InvalidParameter(format!(
                "all layer dimensions must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    /// Width of the feature space `r` seen by the classifier.
    pub fn effective_feature_dim(&self) -> usize {
        if self.bottleneck_average {
            1
        } else {
            self.feature_dim
        }
    }

    /// `(fan_in, fan_out)` of every weight matrix, classifier last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.feature_dim);
        let mut shapes: Vec<_> = dims.windows(2).map(|w| (w[0], w[1])).collect();
        shapes.push((self.effective_feature_dim(), self.num_classes));
        shapes
    }

    /// Recovers the architecture from checkpointed parameter shapes. A
    /// classifier with a single input row on top of a wider feature layer
    /// implies the averaging bottleneck.
    pub fn infer(params: &ModelParams) -> Result<Self> {
        let weights: Vec<&Tensor> = params
            .iter()
            .filter(|(n, _)| n.ends_with(".weight"))
            .map(|(_, t)| t)
            .collect();
        if weights.len() < 2 {
            return Err(Error::InvalidParameter(
                "checkpoint needs at least one layer and a classifier".into(),
            ));
        }
        let (layers, cls) = weights.split_at(weights.len() - 1);
        let feature_dim = layers[layers.len() - 1].cols();
        let cfg = Self {
            input_dim: layers[0].rows(),
            hidden_dims: layers[..layers.len() - 1].iter().map(|w| w.cols()).collect(),
            feature_dim,
            num_classes: cls[0].cols(),
            bottleneck_average: cls[0].rows() == 1 && feature_dim > 1,
        };
        cfg.validate()?;
        if cfg.layer_shapes() != weights.iter().map(|w| (w.rows(), w.cols())).collect::<Vec<_>>()
        {
            return Err(Error::InvalidParameter(
                "checkpoint layer shapes do not chain".into(),
            ));
        }
        Ok(cfg)
    }
}

/// Named parameter tensors in a fixed order: `layer{i}.weight`,
/// `layer{i}.bias`, ..., `classifier.weight`, `classifier.bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    entries: Vec<(String, Tensor)>,
}

impl ModelParams {
    /// Weights i.i.d. uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init(config: &MlpConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = config.layer_shapes();
        let last = shapes.len() - 1;
        let mut entries = Vec::with_capacity(2 * shapes.len());
        for (i, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            let prefix = if i == last {
                "classifier".to_string()
            } else {
                format!("layer{i}")
            };
            entries.push((format!("{prefix}.weight"), Tensor::matrix(fan_in, fan_out, w)?));
            entries.push((format!("{prefix}.bias"), Tensor::zeros(&[1, fan_out])));
        }
        Ok(Self { entries })
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Replaces every tensor, keeping names. Shapes must match.
    pub fn with_tensors(&self, tensors: &[Tensor]) -> Result<Self> {
        if tensors.len() != self.entries.len() {
            return Err(Error::InvalidParameter("parameter count changed".into()));
        }
        let mut entries = self.entries.clone();
        for ((_, old), new) in entries.iter_mut().zip(tensors) {
            if old.shape() != new.shape() {
                return Err(Error::ShapeMismatch {
                    op: "with_tensors",
                    lhs: old.shape().to_vec(),
                    rhs: new.shape().to_vec(),
                });
            }
            *old = new.clone();
        }
        Ok(Self { entries })
    }

    /// L2 norm of each parameter tensor, for diagnostics.
    pub fn norms(&self) -> String {
        self.entries
            .iter()
            .map(|(n, t)| format!("{n}={:.4e}", t.l2_norm()))
            .collect::<Vec<_>>()
            .join(", ")
    }

    /// Records every parameter as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> Result<ParamVars> {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect::<Result<_>>()?;
        Ok(ParamVars { vars })
    }

    /// Records every parameter as a constant (evaluation only).
    pub fn register_frozen(&self, tape: &mut Tape) -> Result<ParamVars> {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| tape.constant(t.clone()))
            .collect::<Result<_>>()?;
        Ok(ParamVars { vars })
    }

    /// Evaluates the network off-tape.
    pub fn forward_values(&self, config: &MlpConfig, x: &Tensor) -> Result<ForwardValues> {
        let mut tape = Tape::new();
        let vars = self.register_frozen(&mut tape)?;
        let xv = tape.constant(x.clone())?;
        let out = forward(&mut tape, config, &vars, xv)?;
        Ok(ForwardValues {
            activations: tape.value(out.activations).clone(),
            features: tape.value(out.features).clone(),
            logits: tape.value(out.logits).clone(),
        })
    }

    /// Writes the checkpoint CSV: header `name,shape,values`, one row per
    /// tensor, shape as `RxC`, values space separated in `%.16e`.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "name,shape,values")?;
        for (name, t) in &self.entries {
            let shape = t.shape().iter().map(usize::to_string).collect::<Vec<_>>().join("x");
            let values = t
                .data()
                .iter()
                .map(|v| format!("{v:.16e}"))
                .collect::<Vec<_>>()
                .join(" ");
            writeln!(w, "{name},{shape},{values}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut entries = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            if i == 0 {
                if line.trim() != "name,shape,values" {
                    return Err(parse_err(lineno, format!("unexpected header {line:?}")));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.splitn(3, ',');
            let (Some(name), Some(shape), Some(values)) = (fields.next(), fields.next(), fields.next())
            else {
                return Err(parse_err(lineno, "expected 3 fields".into()));
            };
            let shape = shape
                .split('x')
                .map(|s| s.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| parse_err(lineno, format!("bad shape: {e}")))?;
            let values = values
                .split_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| parse_err(lineno, format!("bad value: {e}")))?;
            let t = Tensor::new(shape, values).map_err(|e| parse_err(lineno, e.to_string()))?;
            entries.push((name.to_string(), t));
        }
        if entries.is_empty() {
            return Err(Error::Empty("checkpoint"));
        }
        Ok(Self { entries })
    }
}

/// Tape handles of a registered [`ModelParams`], in the same order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Tape handles produced by [`forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// Activations of the feature layer, `N x feature_dim`, before any
    /// averaging.
    pub activations: Var,
    /// The feature space `r`: `N x 1` with the bottleneck, else `activations`.
    pub features: Var,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardValues {
    pub activations: Tensor,
    pub features: Tensor,
    pub logits: Tensor,
}

pub fn forward(
    tape: &mut Tape,
    config: &MlpConfig,
    params: &ParamVars,
    x: Var,
) -> Result<ForwardOutput> {
    let xv = tape.value(x);
    if !xv.is_matrix() || xv.cols() != config.input_dim {
        return Err(Error::ShapeMismatch {
            op: "forward",
            lhs: vec![0, config.input_dim],
            rhs: xv.shape().to_vec(),
        });
    }
    let vars = params.vars();
    let layers = vars.len() / 2 - 1;
    let mut h = x;
    for l in 0..layers {
        let z = tape.matmul(h, vars[2 * l])?;
        let z = tape.add(z, vars[2 * l + 1])?;
        h = tape.relu(z)?;
    }
    let features = if config.bottleneck_average {
        tape.mean_axis(h, Axis::Cols)?
    } else {
        h
    };
    let logits = tape.matmul(features, vars[2 * layers])?;
    let logits = tape.add(logits, vars[2 * layers + 1])?;
    Ok(ForwardOutput {
        activations: h,
        features,
        logits,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0)
            || !(0.0..1.0).contains(&self.momentum)
            || !(self.weight_decay >= 0.0)
        {
            return Err(Error::InvalidParameter(format!("invalid SGD config {self:?}")));
        }
        Ok(())
    }
}

/// Momentum buffers, one per parameter tensor.
#[derive(Clone, Debug, Default)]
pub struct SgdState {
    velocity: Vec<Tensor>,
}

/// `v <- momentum v + g + wd θ; θ <- θ - lr v`.
pub fn sgd_step(
    params: &mut ModelParams,
    vars: &ParamVars,
    grads: &GradientMap,
    cfg: &SgdConfig,
    state: &mut SgdState,
) -> Result<()> {
    if state.velocity.is_empty() {
        state.velocity = params.entries.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
    }
    for (k, ((name, theta), var)) in params.entries.iter_mut().zip(vars.vars()).enumerate() {
        let g = grads
            .get(*var)
            .ok_or_else(|| Error::MissingGradient(name.clone()))?;
        let v = &mut state.velocity[k];
        for ((th, vi), gi) in theta.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = cfg.momentum * *vi + gi + cfg.weight_decay * *th;
            *th -= cfg.learning_rate * *vi;
        }
    }
    Ok(())
}
