//! Run configuration and its flat `key = value` text format.
//!
//! ```text
//! # comments run to end of line
//! dataset.mode = unmixing
//! criterion.kind = fierce
//! criterion.lambda = 1.0
//! train.epochs = 200
//! ```
//!
//! Defaults depend on `dataset.mode`, which is read first; every other key
//! overrides a default. Unknown or repeated keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::DatasetMode;
use crate::error::{Error, Result};
use crate::fierce::{AnchorSpace, FierceConfig};
use crate::losses::SmoothingForm;
use crate::nn::{MlpConfig, SgdConfig};
use crate::recovery::TransferConfig;

#[derive(Clone, Debug, PartialEq)]
pub enum Criterion {
    CrossEntropy,
    LabelSmoothing { sigma: f64, form: SmoothingForm },
    ConfidencePenalty { beta: f64 },
    Fierce(FierceConfig),
}

impl Criterion {
    pub fn name(&self) -> &'static str {
        match self {
            Self::CrossEntropy => "cross_entropy",
            Self::LabelSmoothing { .. } => "label_smoothing",
            Self::ConfidencePenalty { .. } => "confidence_penalty",
            Self::Fierce(_) => "fierce",
        }
    }
}

/// Where the data comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic,
    Csv { train: PathBuf, test: PathBuf },
}

/// Generator knobs for both modes; only the ones of the active mode matter.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub mode: DatasetMode,
    pub source: DataSource,
    pub n_train: usize,
    pub n_test: usize,
    pub input_dim: usize,
    /// Generator seed; follows `train.seed` when unset.
    pub seed: Option<u64>,
    // regression
    pub signal_dims: usize,
    pub sigma_z: f64,
    pub sigma_x: f64,
    // unmixing
    pub materials: usize,
    pub sigma_noise: f64,
    pub alpha_dir: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub bottleneck_average: bool,
    pub anchor_space: AnchorSpace,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub interval: usize,
    pub reliability_bins: usize,
    pub reference_bins: usize,
    pub stability_pairs: usize,
    pub alpha_step: f64,
    /// Anchors used for the entropy monitor when the criterion has none.
    pub monitor_anchors: usize,
    pub transfer: TransferConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub run_id: String,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub criterion: Criterion,
    pub optimizer: SgdConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Defaults for a mode: batch 64, `e = 75`, `λ = 0.3`, 500 epochs for
    /// regression; batch 200, `e = 100`, `λ = 1`, 200 epochs for unmixing.
    /// Unmixing uses a 3-wide feature layer and a smaller learning rate: the
    /// data lie on a 2-D simplex, and a wide feature layer keeps enough of it
    /// under any criterion that transfer MSE no longer separates them.
    pub fn defaults(mode: DatasetMode) -> Self {
        let (batch, anchors, lambda, epochs) = match mode {
            DatasetMode::Regression => (64, 75, 0.3, 500),
            DatasetMode::Unmixing => (200, 100, 1.0, 200),
        };
        let (input_dim, hidden, feature_dim, bottleneck, lr) = match mode {
            DatasetMode::Regression => (8, vec![32, 32], 16, true, 0.05),
            DatasetMode::Unmixing => (16, vec![32, 32], 3, false, 0.01),
        };
        Self {
            run_id: "run".into(),
            dataset: DatasetConfig {
                mode,
                source: DataSource::Synthetic,
                n_train: 4000,
                n_test: 2000,
                input_dim,
                seed: None,
                signal_dims: 4,
                sigma_z: 4.0,
                sigma_x: 0.1,
                materials: 3,
                sigma_noise: 0.02,
                alpha_dir: 0.8,
            },
            model: ModelConfig {
                hidden_dims: hidden,
                feature_dim,
                bottleneck_average: bottleneck,
                anchor_space: AnchorSpace::Standardized,
            },
            criterion: Criterion::Fierce(FierceConfig {
                lambda,
                anchors,
                ..FierceConfig::default()
            }),
            optimizer: SgdConfig {
                learning_rate: lr,
                momentum: 0.9,
                weight_decay: 0.0,
            },
            epochs,
            batch_size: batch,
            seed: 0,
            eval: EvalConfig {
                interval: 10,
                reliability_bins: crate::metrics::DEFAULT_RELIABILITY_BINS,
                reference_bins: crate::metrics::DEFAULT_REFERENCE_BINS,
                stability_pairs: 2000,
                alpha_step: 0.05,
                monitor_anchors: anchors,
                transfer: TransferConfig::default(),
            },
        }
    }

    /// Number of coarse classes implied by the dataset mode.
    pub fn num_classes(&self) -> usize {
        match self.dataset.mode {
            DatasetMode::Regression => 2,
            DatasetMode::Unmixing => self.dataset.materials,
        }
    }

    pub fn mlp(&self, input_dim: usize) -> MlpConfig {
        MlpConfig {
            input_dim,
            hidden_dims: self.model.hidden_dims.clone(),
            feature_dim: self.model.feature_dim,
            num_classes: self.num_classes(),
            bottleneck_average: self.model.bottleneck_average,
        }
    }

    pub fn dataset_seed(&self) -> u64 {
        self.dataset.seed.unwrap_or(self.seed)
    }

    /// Dimension of the space the anchors live in.
    pub fn anchor_dim(&self) -> usize {
        self.model.anchor_space.dim(self.model.feature_dim, self.model.bottleneck_average)
    }

    /// Anchor count used by the regularizer and the monitor.
    pub fn anchor_count(&self) -> usize {
        match &self.criterion {
            Criterion::Fierce(f) => f.anchors,
            _ => self.eval.monitor_anchors,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return bad("train.batch_size must be >= 1".into());
        }
        if self.dataset.source == DataSource::Synthetic && self.batch_size > self.dataset.n_train {
            return bad(format!(
                "train.batch_size {} exceeds dataset.n_train {}",
                self.batch_size, self.dataset.n_train
            ));
        }
        if self.eval.interval == 0 {
            return bad("eval.interval must be >= 1".into());
        }
        if self.eval.reliability_bins == 0 || self.eval.reference_bins == 0 {
            return bad("bin counts must be >= 1".into());
        }
        if self.eval.monitor_anchors == 0 {
            return bad("eval.monitor_anchors must be >= 1".into());
        }
        self.optimizer.validate()?;
        match &self.criterion {
            Criterion::Fierce(f) => f.validate()?,
            Criterion::LabelSmoothing { sigma, .. } if !(0.0..0.5).contains(sigma) => {
                return bad(format!("criterion.sigma must be in [0, 0.5), got {sigma}"));
            }
            Criterion::ConfidencePenalty { beta } if !(*beta >= 0.0) => {
                return bad(format!("criterion.beta must be >= 0, got {beta}"));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`", i + 1)));
            };
            let key = k.trim().to_string();
            if entries.insert(key.clone(), (i + 1, v.trim().to_string())).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {key}", i + 1)));
            }
        }
        let mode = match entries.remove("dataset.mode") {
            Some((line, v)) => v
                .parse::<DatasetMode>()
                .map_err(|e| Error::Config(format!("line {line}: {e}")))?,
            None => DatasetMode::Regression,
        };
        let mut cfg = Self::defaults(mode);
        // The criterion kind decides which keys are meaningful, so apply it first.
        if let Some((line, v)) = entries.remove("criterion.kind") {
            cfg.set("criterion.kind", &v).map_err(|e| at_line(line, e))?;
        }
        for (key, (line, value)) in &entries {
            cfg.set(key, value).map_err(|e| at_line(*line, e))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let f = || parse_f64(key, value);
        let u = || parse_usize(key, value);
        let d = &mut self.dataset;
        match key {
            "run_id" => self.run_id = value.to_string(),
            "dataset.path.train" | "dataset.path.test" => {
                let p = PathBuf::from(value);
                let (mut train, mut test) = match &d.source {
                    DataSource::Csv { train, test } => (train.clone(), test.clone()),
                    DataSource::Synthetic => (PathBuf::new(), PathBuf::new()),
                };
                if key.ends_with("train") {
                    train = p;
                } else {
                    test = p;
                }
                d.source = DataSource::Csv { train, test };
            }
            "dataset.n_train" => d.n_train = u()?,
            "dataset.n_test" => d.n_test = u()?,
            "dataset.input_dim" => d.input_dim = u()?,
            "dataset.seed" => d.seed = Some(parse_u64(key, value)?),
            "dataset.signal_dims" => d.signal_dims = u()?,
            "dataset.sigma_z" => d.sigma_z = f()?,
            "dataset.sigma_x" => d.sigma_x = f()?,
            "dataset.materials" => d.materials = u()?,
            "dataset.sigma_noise" => d.sigma_noise = f()?,
            "dataset.alpha_dir" => d.alpha_dir = f()?,
            "model.hidden_dims" => {
                self.model.hidden_dims = if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|s| parse_usize(key, s.trim()))
                        .collect::<Result<_>>()?
                }
            }
            "model.feature_dim" => self.model.feature_dim = u()?,
            "model.bottleneck_average" => self.model.bottleneck_average = parse_bool(key, value)?,
            "model.anchor_space" => self.model.anchor_space = value.parse()?,
            "criterion.kind" => {
                let fierce = self.fierce_defaults();
                self.criterion = match value {
                    "cross_entropy" => Criterion::CrossEntropy,
                    "label_smoothing" => Criterion::LabelSmoothing {
                        sigma: 0.4,
                        form: SmoothingForm::default(),
                    },
                    "confidence_penalty" => Criterion::ConfidencePenalty { beta: 0.1 },
                    "fierce" => Criterion::Fierce(fierce),
                    other => return Err(Error::Config(format!("unknown criterion {other:?}"))),
                };
            }
            "criterion.sigma" | "criterion.smoothing_form" => match &mut self.criterion {
                Criterion::LabelSmoothing { sigma, form } => {
                    if key == "criterion.sigma" {
                        *sigma = f()?;
                    } else {
                        *form = match value {
                            "spread_others" => SmoothingForm::SpreadOthers,
                            "add_uniform" => SmoothingForm::AddUniform,
                            other => return Err(Error::Config(format!("unknown smoothing form {other:?}"))),
                        };
                    }
                }
                _ => return Err(wrong_criterion(key, "label_smoothing")),
            },
            "criterion.beta" => match &mut self.criterion {
                Criterion::ConfidencePenalty { beta } => *beta = f()?,
                _ => return Err(wrong_criterion(key, "confidence_penalty")),
            },
            "criterion.lambda"
            | "criterion.anchors"
            | "criterion.tau_gumbel"
            | "criterion.tau_sim"
            | "criterion.tau_gumbel_final" => {
                let Criterion::Fierce(fc) = &mut self.criterion else {
                    return Err(wrong_criterion(key, "fierce"));
                };
                match key {
                    "criterion.lambda" => fc.lambda = f()?,
                    "criterion.anchors" => fc.anchors = u()?,
                    "criterion.tau_gumbel" => fc.tau_gumbel = f()?,
                    "criterion.tau_sim" => fc.tau_sim = f()?,
                    _ => fc.tau_gumbel_final = if value == "none" { None } else { Some(f()?) },
                }
            }
            "optimizer.learning_rate" => self.optimizer.learning_rate = f()?,
            "optimizer.momentum" => self.optimizer.momentum = f()?,
            "optimizer.weight_decay" => self.optimizer.weight_decay = f()?,
            "train.epochs" => self.epochs = u()?,
            "train.batch_size" => self.batch_size = u()?,
            "train.seed" => self.seed = parse_u64(key, value)?,
            "eval.interval" => self.eval.interval = u()?,
            "eval.reliability_bins" => self.eval.reliability_bins = u()?,
            "eval.reference_bins" => self.eval.reference_bins = u()?,
            "eval.stability_pairs" => self.eval.stability_pairs = u()?,
            "eval.alpha_step" => self.eval.alpha_step = f()?,
            "eval.monitor_anchors" => self.eval.monitor_anchors = u()?,
            "eval.transfer_epochs" => self.eval.transfer.epochs = u()?,
            "eval.transfer_learning_rate" => self.eval.transfer.learning_rate = f()?,
            "eval.transfer_momentum" => self.eval.transfer.momentum = f()?,
            other => return Err(Error::Config(format!("unknown key {other}"))),
        }
        Ok(())
    }

    fn fierce_defaults(&self) -> FierceConfig {
        match &self.criterion {
            Criterion::Fierce(f) => f.clone(),
            _ => {
                let d = Self::defaults(self.dataset.mode);
                match d.criterion {
                    Criterion::Fierce(f) => f,
                    _ => unreachable!("defaults use the regularized criterion"),
                }
            }
        }
    }

    /// The fully resolved configuration in the same text format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let d = &self.dataset;
        kv("run_id", self.run_id.clone());
        kv("dataset.mode", d.mode.as_str().into());
        if let DataSource::Csv { train, test } = &d.source {
            kv("dataset.path.train", train.display().to_string());
            kv("dataset.path.test", test.display().to_string());
        }
        kv("dataset.n_train", d.n_train.to_string());
        kv("dataset.n_test", d.n_test.to_string());
        kv("dataset.input_dim", d.input_dim.to_string());
        if let Some(seed) = d.seed {
            kv("dataset.seed", seed.to_string());
        }
        kv("dataset.signal_dims", d.signal_dims.to_string());
        kv("dataset.sigma_z", d.sigma_z.to_string());
        kv("dataset.sigma_x", d.sigma_x.to_string());
        kv("dataset.materials", d.materials.to_string());
        kv("dataset.sigma_noise", d.sigma_noise.to_string());
        kv("dataset.alpha_dir", d.alpha_dir.to_string());
        let hidden: Vec<String> = self.model.hidden_dims.iter().map(usize::to_string).collect();
        kv("model.hidden_dims", hidden.join(","));
        kv("model.feature_dim", self.model.feature_dim.to_string());
        kv("model.bottleneck_average", self.model.bottleneck_average.to_string());
        kv("model.anchor_space", self.model.anchor_space.as_str().into());
        kv("criterion.kind", self.criterion.name().into());
        match &self.criterion {
            Criterion::CrossEntropy => {}
            Criterion::LabelSmoothing { sigma, form } => {
                kv("criterion.sigma", sigma.to_string());
                let f = match form {
                    SmoothingForm::SpreadOthers => "spread_others",
                    SmoothingForm::AddUniform => "add_uniform",
                };
                kv("criterion.smoothing_form", f.into());
            }
            Criterion::ConfidencePenalty { beta } => kv("criterion.beta", beta.to_string()),
            Criterion::Fierce(f) => {
                kv("criterion.lambda", f.lambda.to_string());
                kv("criterion.anchors", f.anchors.to_string());
                kv("criterion.tau_gumbel", f.tau_gumbel.to_string());
                kv("criterion.tau_sim", f.tau_sim.to_string());
                kv(
                    "criterion.tau_gumbel_final",
                    f.tau_gumbel_final.map_or("none".into(), |v| v.to_string()),
                );
            }
        }
        kv("optimizer.learning_rate", self.optimizer.learning_rate.to_string());
        kv("optimizer.momentum", self.optimizer.momentum.to_string());
        kv("optimizer.weight_decay", self.optimizer.weight_decay.to_string());
        kv("train.epochs", self.epochs.to_string());
        kv("train.batch_size", self.batch_size.to_string());
        kv("train.seed", self.seed.to_string());
        let e = &self.eval;
        kv("eval.interval", e.interval.to_string());
        kv("eval.reliability_bins", e.reliability_bins.to_string());
        kv("eval.reference_bins", e.reference_bins.to_string());
        kv("eval.stability_pairs", e.stability_pairs.to_string());
        kv("eval.alpha_step", e.alpha_step.to_string());
        kv("eval.monitor_anchors", e.monitor_anchors.to_string());
        kv("eval.transfer_epochs", e.transfer.epochs.to_string());
        kv("eval.transfer_learning_rate", e.transfer.learning_rate.to_string());
        kv("eval.transfer_momentum", e.transfer.momentum.to_string());
        s
    }
}

fn at_line(line: usize, e: Error) -> Error {
    match e {
        Error::Config(msg) => Error::Config(format!("line {line}: {msg}")),
        other => Error::Config(format!("line {line}: {other}")),
    }
}

fn wrong_criterion(key: &str, kind: &str) -> Error {
    Error::Config(format!("{key} requires criterion.kind = {kind}"))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected a number, got {v:?}")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected a nonnegative integer, got {v:?}")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected a nonnegative integer, got {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}
