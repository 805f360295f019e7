//! Training runs, sweeps and feature export.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Criterion, DataSource, RunConfig};
use crate::autodiff::Tape;
use crate::data::{
    detect_csv_mode, fmt17, load_csv_dataset, CoarseFineDataset, DatasetMode, FineLabels, RegressionGenerator,
    UnmixingGenerator,
};
use crate::error::{Error, Result};
use crate::fierce::{anchor_point_values, anchor_points, feature_entropy, gumbel_noise, monitor_entropy, AnchorSet, AssignmentPath};
use crate::losses::{
    confidence_penalty, cross_entropy, fierce_loss, label_smoothing_loss, smooth_labels, softmax_probs,
};
use crate::metrics::{
    ece, mce, mutual_info_proxy, reference_feature_entropy, reliability, stability, ReliabilityBins,
    CONFIDENCE_DECILES,
};
use crate::nn::{forward, sgd_step, MlpConfig, ModelParams, SgdState};
use crate::recovery::{alpha_grid, class_means, raw_mse, select_orientation_and_alpha, transfer_mse, Orientation};

/// Independent sub-seeds of a run seed (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed.wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const INIT_TAG: u64 = 1;
const ANCHOR_TAG: u64 = 2;
const SHUFFLE_TAG: u64 = 3;
const GUMBEL_TAG: u64 = 4;
const STABILITY_TAG: u64 = 5;

/// One row of `metrics.csv`. `None` marks a metric that does not apply to
/// the run's mode or architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub criterion: String,
    pub epoch: usize,
    pub ce_loss: f64,
    pub accuracy: f64,
    pub entropy_ref: Option<f64>,
    pub entropy_anchor: f64,
    pub recovery_mse: Option<f64>,
    pub raw_mse: Option<f64>,
    pub ece: f64,
    pub mce: f64,
    pub mi_proxy: f64,
    pub stability: f64,
    pub transfer_mse: Option<f64>,
}

pub const METRICS_HEADER: &str = "run_id,criterion,epoch,ce_loss,accuracy,entropy_ref,entropy_anchor,\
recovery_mse,raw_mse,ece,mce,mi_proxy,stability,transfer_mse";

impl MetricsRow {
    fn values(&self) -> [Option<f64>; 11] {
        [
            Some(self.ce_loss),
            Some(self.accuracy),
            self.entropy_ref,
            Some(self.entropy_anchor),
            self.recovery_mse,
            self.raw_mse,
            Some(self.ece),
            Some(self.mce),
            Some(self.mi_proxy),
            Some(self.stability),
            self.transfer_mse,
        ]
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{},{},{}", self.run_id, self.criterion, self.epoch);
        for v in self.values() {
            s.push(',');
            if let Some(v) = v {
                s.push_str(&fmt17(v));
            }
        }
        s
    }

    /// The fine-recovery error tracked by sweeps: OT recovery for
    /// regression, transfer (else raw) MSE for unmixing.
    pub fn headline_mse(&self) -> Option<f64> {
        self.recovery_mse.or(self.transfer_mse).or(self.raw_mse)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryRow {
    pub criterion: String,
    pub epoch: usize,
    pub alpha: f64,
    pub orientation: Orientation,
    pub mse: f64,
    pub baseline_mse: f64,
}

pub const RECOVERY_HEADER: &str = "criterion,epoch,alpha,orientation,mse,baseline_mse";

impl RecoveryRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.criterion,
            self.epoch,
            fmt17(self.alpha),
            self.orientation.as_str(),
            fmt17(self.mse),
            fmt17(self.baseline_mse)
        )
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub metrics: Vec<MetricsRow>,
    pub recovery: Vec<RecoveryRow>,
    pub params: ModelParams,
    pub mlp: MlpConfig,
    pub anchors: AnchorSet,
}

/// Train and test splits for a config.
pub fn load_data(cfg: &RunConfig) -> Result<(CoarseFineDataset, CoarseFineDataset)> {
    let d = &cfg.dataset;
    let seed = cfg.dataset_seed();
    match (&d.source, d.mode) {
        (DataSource::Synthetic, DatasetMode::Regression) => {
            RegressionGenerator::new(d.input_dim, d.signal_dims, d.sigma_z, d.sigma_x, seed)?
                .generate_split(d.n_train, d.n_test, seed)
        }
        (DataSource::Synthetic, DatasetMode::Unmixing) => {
            UnmixingGenerator::new(d.materials, d.input_dim, d.sigma_noise, d.alpha_dir, seed)?
                .generate_split(d.n_train, d.n_test, seed)
        }
        (DataSource::Csv { train, test }, mode) => {
            for p in [train, test] {
                let found = detect_csv_mode(p)?;
                if found != mode {
                    return Err(Error::Config(format!(
                        "{} holds {} data but dataset.mode is {}",
                        p.display(),
                        found.as_str(),
                        mode.as_str()
                    )));
                }
            }
            let mut tr = load_csv_dataset(train, mode, None)?;
            tr.split = crate::data::Split::Train;
            let te = load_csv_dataset(test, mode, tr.threshold)?;
            if tr.input_dim() != te.input_dim() || tr.num_classes() != te.num_classes() {
                return Err(Error::Config("train and test files disagree in shape".into()));
            }
            Ok((tr, te))
        }
    }
}

struct CsvSink {
    w: BufWriter<File>,
}

impl CsvSink {
    fn create(path: &Path, header: &str) -> Result<Self> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{header}")?;
        Ok(Self { w })
    }

    fn row(&mut self, line: &str) -> Result<()> {
        writeln!(self.w, "{line}")?;
        self.w.flush()?;
        Ok(())
    }
}

/// Trains one model and writes its run directory:
///
/// * `config.txt` - the resolved configuration
/// * `metrics.csv` - one row per evaluation epoch, test split
/// * `recovery.csv` - OT recovery per evaluation (regression mode)
/// * `reliability.csv` - reliability bins of the final model
/// * `checkpoint.csv`, `anchors.csv`
/// * `features.csv` - final test-split features, `data_test.csv`
///
/// Epoch 0 is evaluated before any update, then every `eval.interval`
/// epochs and after the last one.
pub fn run_train(cfg: &RunConfig, out_dir: &Path) -> Result<RunOutput> {
    cfg.validate()?;
    let (train, test) = load_data(cfg)?;
    if cfg.batch_size > train.len() {
        return Err(Error::Config(format!(
            "batch size {} exceeds {} training samples",
            cfg.batch_size,
            train.len()
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.txt"), cfg.to_text())?;
    test.export_csv(&out_dir.join("data_test.csv"))?;

    let mlp = cfg.mlp(train.input_dim());
    let mut params = ModelParams::init(&mlp, derive_seed(cfg.seed, INIT_TAG))?;
    let anchors = AnchorSet::sample(cfg.anchor_count(), cfg.anchor_dim(), derive_seed(cfg.seed, ANCHOR_TAG))?;
    anchors.save_csv(&out_dir.join("anchors.csv"))?;

    let mut metrics_csv = CsvSink::create(&out_dir.join("metrics.csv"), METRICS_HEADER)?;
    let mut recovery_csv = match cfg.dataset.mode {
        DatasetMode::Regression => Some(CsvSink::create(&out_dir.join("recovery.csv"), RECOVERY_HEADER)?),
        DatasetMode::Unmixing => None,
    };
    let mut output = RunOutput {
        dir: out_dir.to_path_buf(),
        metrics: Vec::new(),
        recovery: Vec::new(),
        params: params.clone(),
        mlp: mlp.clone(),
        anchors: anchors.clone(),
    };
    let mut record = |epoch: usize, params: &ModelParams, output: &mut RunOutput| -> Result<ReliabilityBins> {
        let ev = evaluate(cfg, &mlp, params, &anchors, &train, &test, epoch)?;
        metrics_csv.row(&ev.metrics.to_csv())?;
        if let (Some(sink), Some(rec)) = (recovery_csv.as_mut(), &ev.recovery) {
            sink.row(&rec.to_csv())?;
        }
        output.metrics.push(ev.metrics);
        output.recovery.extend(ev.recovery);
        Ok(ev.bins)
    };

    let mut bins = record(0, &params, &mut output)?;
    let mut state = SgdState::default();
    let mut step: u64 = 0;
    let shuffle_seed = derive_seed(cfg.seed, SHUFFLE_TAG);
    let gumbel_seed = derive_seed(cfg.seed, GUMBEL_TAG);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = train.subset(idx);
            train_step(cfg, &mlp, &mut params, &mut state, &anchors, &batch, epoch, gumbel_seed, step).map_err(
                |e| match e {
                    Error::NonFinite(_) | Error::NonFiniteLoss { .. } => Error::NonFiniteLoss {
                        epoch,
                        batch: b,
                        norms: params.norms(),
                    },
                    other => other,
                },
            )?;
            step += 1;
        }
        let done = epoch + 1;
        if done % cfg.eval.interval == 0 || done == cfg.epochs {
            bins = record(done, &params, &mut output)?;
        }
    }

    let mut rel = CsvSink::create(&out_dir.join("reliability.csv"), "bin_lo,bin_hi,count,conf,acc")?;
    for b in &bins.bins {
        rel.row(&format!(
            "{},{},{},{},{}",
            fmt17(b.lo),
            fmt17(b.hi),
            b.count,
            fmt17(b.confidence),
            fmt17(b.accuracy)
        ))?;
    }
    params.save_checkpoint(&out_dir.join("checkpoint.csv"))?;
    write_features(&params, &mlp, &test, &out_dir.join("features.csv"))?;
    output.params = params;
    Ok(output)
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    cfg: &RunConfig,
    mlp: &MlpConfig,
    params: &mut ModelParams,
    state: &mut SgdState,
    anchors: &AnchorSet,
    batch: &CoarseFineDataset,
    epoch: usize,
    gumbel_seed: u64,
    step: u64,
) -> Result<()> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape)?;
    let x = tape.constant(batch.x.clone())?;
    let out = forward(&mut tape, mlp, &vars, x)?;
    let q = softmax_probs(&mut tape, out.logits, 1.0)?;
    let y = tape.constant(batch.y.clone())?;
    let loss = match &cfg.criterion {
        Criterion::CrossEntropy => cross_entropy(&mut tape, q, y)?,
        Criterion::LabelSmoothing { sigma, form } => {
            let t = smooth_labels(&batch.y, *sigma, *form)?;
            let t = tape.constant(t.targets)?;
            label_smoothing_loss(&mut tape, q, t)?
        }
        Criterion::ConfidencePenalty { beta } => {
            let ce = cross_entropy(&mut tape, q, y)?;
            let cp = confidence_penalty(&mut tape, q)?;
            let cp = tape.scale(cp, *beta)?;
            tape.add(ce, cp)?
        }
        Criterion::Fierce(f) => {
            let ce = cross_entropy(&mut tape, q, y)?;
            let noise = gumbel_noise(batch.len(), anchors.count(), gumbel_seed, step);
            let space = anchor_points(&mut tape, cfg.model.anchor_space, mlp, &out)?;
            let fe = feature_entropy(
                &mut tape,
                space,
                anchors,
                &noise,
                f.tau_gumbel_at(epoch, cfg.epochs),
                f.tau_sim,
                &AssignmentPath::StraightThrough,
            )?;
            fierce_loss(&mut tape, ce, fe.entropy, f.lambda)?
        }
    };
    if !tape.value(loss).item().is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    let grads = tape.backward(loss)?;
    sgd_step(params, &vars, &grads, &cfg.optimizer, state)
}

struct Evaluation {
    metrics: MetricsRow,
    recovery: Option<RecoveryRow>,
    bins: ReliabilityBins,
}

fn evaluate(
    cfg: &RunConfig,
    mlp: &MlpConfig,
    params: &ModelParams,
    anchors: &AnchorSet,
    train: &CoarseFineDataset,
    test: &CoarseFineDataset,
    epoch: usize,
) -> Result<Evaluation> {
    let fv = params.forward_values(mlp, &test.x)?;
    let q = crate::losses::OutputDistribution::from_logits(&fv.logits, 1.0)?.probs;
    let ce_loss = {
        let mut tape = Tape::new();
        let qv = tape.constant(q.clone())?;
        let yv = tape.constant(test.y.clone())?;
        let ce = cross_entropy(&mut tape, qv, yv)?;
        tape.value(ce).item()
    };
    let predicted = q.argmax_rows();
    let truth = test.classes();
    let accuracy = predicted.iter().zip(&truth).filter(|(a, b)| a == b).count() as f64 / test.len() as f64;
    let entropy_anchor = monitor_entropy(&anchor_point_values(cfg.model.anchor_space, mlp, &fv)?, anchors)?;
    let scalar_features = fv.features.cols() == 1;
    let entropy_ref = if scalar_features {
        Some(reference_feature_entropy(fv.features.data(), cfg.eval.reference_bins)?)
    } else {
        None
    };
    let bins = reliability(&q, &test.y, cfg.eval.reliability_bins)?;
    let stab = stability(
        &q,
        &test.y,
        cfg.eval.stability_pairs,
        derive_seed(cfg.seed, STABILITY_TAG),
    )?;

    let mut recovery = None;
    let (mut recovery_mse, mut raw, mut transfer) = (None, None, None);
    match &test.fine {
        FineLabels::Scalar(z) => {
            if scalar_features {
                let means = class_means(z, &predicted, test.num_classes());
                let r = select_orientation_and_alpha(
                    fv.features.data(),
                    z,
                    &predicted,
                    &means,
                    &alpha_grid(cfg.eval.alpha_step)?,
                )?;
                recovery_mse = Some(r.mse);
                recovery = Some(RecoveryRow {
                    criterion: cfg.criterion.name().into(),
                    epoch,
                    alpha: r.alpha,
                    orientation: r.orientation,
                    mse: r.mse,
                    baseline_mse: r.baseline_mse,
                });
            }
        }
        FineLabels::Simplex(z) => {
            raw = Some(raw_mse(&q, z)?);
            let train_fv = params.forward_values(mlp, &train.x)?;
            let train_z = train.fine_simplex().expect("same mode");
            transfer = Some(transfer_mse(&train_fv.features, train_z, &fv.features, z, &cfg.eval.transfer)?.mse);
        }
    }
    let metrics = MetricsRow {
        run_id: cfg.run_id.clone(),
        criterion: cfg.criterion.name().into(),
        epoch,
        ce_loss,
        accuracy,
        entropy_ref,
        entropy_anchor,
        recovery_mse,
        raw_mse: raw,
        ece: ece(&bins)?,
        mce: mce(&bins)?,
        mi_proxy: mutual_info_proxy(&q, CONFIDENCE_DECILES)?,
        stability: stab,
        transfer_mse: transfer,
    };
    if metrics.values().iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("evaluation metric"));
    }
    Ok(Evaluation {
        metrics,
        recovery,
        bins,
    })
}

/// Writes `sample, f_0.., z.., y` for every sample of `data`.
fn write_features(params: &ModelParams, mlp: &MlpConfig, data: &CoarseFineDataset, path: &Path) -> Result<usize> {
    let fv = params.forward_values(mlp, &data.x)?;
    let f = &fv.features;
    let mut w = BufWriter::new(File::create(path)?);
    let mut header = vec!["sample".to_string()];
    header.extend((0..f.cols()).map(|j| format!("f_{j}")));
    match &data.fine {
        FineLabels::Scalar(_) => header.push("z".into()),
        FineLabels::Simplex(z) => header.extend((0..z.cols()).map(|j| format!("z_{j}"))),
    }
    header.push("y".into());
    writeln!(w, "{}", header.join(","))?;
    let classes = data.classes();
    for n in 0..data.len() {
        let mut fields = vec![n.to_string()];
        fields.extend(f.row(n).iter().map(|v| fmt17(*v)));
        match &data.fine {
            FineLabels::Scalar(z) => fields.push(fmt17(z[n])),
            FineLabels::Simplex(z) => fields.extend(z.row(n).iter().map(|v| fmt17(*v))),
        }
        fields.push(classes[n].to_string());
        writeln!(w, "{}", fields.join(","))?;
    }
    w.flush()?;
    Ok(data.len())
}

/// Forward features of a checkpointed model on a dataset file, written to
/// `out` as `sample, f_0.., z.., y`. Returns the number of rows.
pub fn export_features(checkpoint: &Path, data: &Path, out: &Path) -> Result<usize> {
    let params = ModelParams::load_checkpoint(checkpoint)?;
    let mlp = MlpConfig::infer(&params)?;
    let mode = detect_csv_mode(data)?;
    let ds = load_csv_dataset(data, mode, None)?;
    if ds.input_dim() != mlp.input_dim {
        return Err(Error::ShapeMismatch {
            op: "export_features",
            lhs: vec![mlp.input_dim],
            rhs: vec![ds.input_dim()],
        });
    }
    write_features(&params, &mlp, &ds, out)
}

/// The sweep axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Lambda,
    Anchors,
    Sigma,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(Self::Lambda),
            "anchors" => Ok(Self::Anchors),
            "sigma" => Ok(Self::Sigma),
            other => Err(Error::Config(format!("unknown sweep axis {other:?}"))),
        }
    }
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Lambda => "lambda",
            Self::Anchors => "anchors",
            Self::Sigma => "sigma",
        }
    }

    /// The base config with this axis set to `value`.
    pub fn apply(self, base: &RunConfig, value: f64) -> Result<RunConfig> {
        let mut cfg = base.clone();
        match (self, &mut cfg.criterion) {
            (Self::Lambda, Criterion::Fierce(f)) => f.lambda = value,
            (Self::Anchors, Criterion::Fierce(f)) => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::Config(format!("anchor count must be a positive integer, got {value}")));
                }
                f.anchors = value as usize;
            }
            (Self::Sigma, Criterion::LabelSmoothing { sigma, .. }) => *sigma = value,
            (axis, c) => {
                return Err(Error::Config(format!(
                    "cannot sweep {} with criterion {}",
                    axis.as_str(),
                    c.name()
                )))
            }
        }
        cfg.run_id = format!("{}={value}", self.as_str());
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub final_mse: f64,
    pub min_mse: f64,
    pub final_accuracy: f64,
}

/// One run per grid value with the seed held fixed, each under
/// `out/<axis>_<value>/`, then `out/summary.csv`.
pub fn run_sweep(base: &RunConfig, axis: SweepAxis, values: &[f64], out_dir: &Path) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let configs: Vec<RunConfig> = values.iter().map(|&v| axis.apply(base, v)).collect::<Result<_>>()?;
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::with_capacity(values.len());
    for (cfg, &value) in configs.iter().zip(values) {
        let dir = out_dir.join(format!("{}_{value}", axis.as_str()));
        log::info!("sweep {}={value} -> {}", axis.as_str(), dir.display());
        let run = run_train(cfg, &dir)?;
        rows.push(summarize(&run, value)?);
    }
    let mut w = CsvSink::create(&out_dir.join("summary.csv"), "value,final_mse,min_mse,final_accuracy")?;
    for r in &rows {
        w.row(&format!(
            "{},{},{},{}",
            r.value,
            fmt17(r.final_mse),
            fmt17(r.min_mse),
            fmt17(r.final_accuracy)
        ))?;
    }
    Ok(rows)
}

pub fn summarize(run: &RunOutput, value: f64) -> Result<SweepRow> {
    let mses: Vec<f64> = run.metrics.iter().filter_map(MetricsRow::headline_mse).collect();
    let last = run.metrics.last().ok_or(Error::Empty("metrics"))?;
    let final_mse = last
        .headline_mse()
        .ok_or_else(|| Error::Config("run reports no fine-recovery metric".into()))?;
    Ok(SweepRow {
        value,
        final_mse,
        min_mse: mses.iter().copied().fold(f64::INFINITY, f64::min),
        final_accuracy: last.accuracy,
    })
}
