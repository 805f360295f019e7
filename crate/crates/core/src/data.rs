//! Coarse/fine datasets: synthetic generators for the two protocols, the
//! coarsening functions, and CSV import/export.
//!
//! Regression mode carries a scalar fine label `z` and a binary coarse label
//! `1{z < t}`; unmixing mode carries an abundance vector on the simplex and
//! the one-hot of its largest entry.
//!
//! CSV schema: a header row `x_0,...,x_{d-1}` followed by `z` (regression) or
//! `z_0,...,z_{m-1}` (unmixing); one sample per row, values written with 17
//! significant digits. Coarse labels are never stored, they are re-derived.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{Error, Result};
use crate::tensor::{argmax, Tensor};

/// Tolerance on simplex row sums when validating abundances.
pub const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetMode {
    Regression,
    Unmixing,
}

impl DatasetMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Regression => "regression",
            Self::Unmixing => "unmixing",
        }
    }
}

impl std::str::FromStr for DatasetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(Self::Regression),
            "unmixing" => Ok(Self::Unmixing),
            other => Err(Error::Config(format!("unknown dataset mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FineLabels {
    Scalar(Vec<f64>),
    /// `N x m` abundance rows.
    Simplex(Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoarseFineDataset {
    pub x: Tensor,
    pub fine: FineLabels,
    /// One-hot coarse labels, `N x c`.
    pub y: Tensor,
    pub split: Split,
    /// Regression threshold `t` used to coarsen.
    pub threshold: Option<f64>,
    pub seed: u64,
}

impl CoarseFineDataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.y.cols()
    }

    pub fn mode(&self) -> DatasetMode {
        match self.fine {
            FineLabels::Scalar(_) => DatasetMode::Regression,
            FineLabels::Simplex(_) => DatasetMode::Unmixing,
        }
    }

    /// Coarse class index of every sample.
    pub fn classes(&self) -> Vec<usize> {
        self.y.argmax_rows()
    }

    pub fn fine_scalar(&self) -> Option<&[f64]> {
        match &self.fine {
            FineLabels::Scalar(z) => Some(z),
            FineLabels::Simplex(_) => None,
        }
    }

    pub fn fine_simplex(&self) -> Option<&Tensor> {
        match &self.fine {
            FineLabels::Simplex(z) => Some(z),
            FineLabels::Scalar(_) => None,
        }
    }

    /// The samples at `idx`, in order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let fine = match &self.fine {
            FineLabels::Scalar(z) => FineLabels::Scalar(idx.iter().map(|&i| z[i]).collect()),
            FineLabels::Simplex(z) => FineLabels::Simplex(z.select_rows(idx)),
        };
        Self {
            x: self.x.select_rows(idx),
            fine,
            y: self.y.select_rows(idx),
            split: self.split,
            threshold: self.threshold,
            seed: self.seed,
        }
    }

    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        let mut header: Vec<String> = (0..self.input_dim()).map(|j| format!("x_{j}")).collect();
        match &self.fine {
            FineLabels::Scalar(_) => header.push("z".into()),
            FineLabels::Simplex(z) => header.extend((0..z.cols()).map(|j| format!("z_{j}"))),
        }
        writeln!(w, "{}", header.join(","))?;
        for n in 0..self.len() {
            let mut fields: Vec<String> = self.x.row(n).iter().map(|v| fmt17(*v)).collect();
            match &self.fine {
                FineLabels::Scalar(z) => fields.push(fmt17(z[n])),
                FineLabels::Simplex(z) => fields.extend(z.row(n).iter().map(|v| fmt17(*v))),
            }
            writeln!(w, "{}", fields.join(","))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// 17 significant digits, enough to round-trip any finite double.
pub(crate) fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// One-hot `N x 2`: class 1 iff `z < t`, class 0 otherwise.
pub fn coarsen_threshold(z: &[f64], threshold: f64) -> Tensor {
    let data = z
        .iter()
        .flat_map(|&v| if v < threshold { [0.0, 1.0] } else { [1.0, 0.0] })
        .collect();
    Tensor::matrix(z.len(), 2, data).expect("shape")
}

fn check_simplex(z: &Tensor) -> Result<()> {
    for r in 0..z.rows() {
        let row = z.row(r);
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&v| v < -SIMPLEX_TOL) || (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::NotOnSimplex { row: r, sum });
        }
    }
    Ok(())
}

/// One-hot of the largest abundance, lowest index on ties.
pub fn coarsen_argmax(z: &Tensor) -> Result<Tensor> {
    check_simplex(z)?;
    let (n, m) = (z.rows(), z.cols());
    let mut data = vec![0.0; n * m];
    for r in 0..n {
        data[r * m + argmax(z.row(r))] = 1.0;
    }
    Tensor::matrix(n, m, data)
}

/// Median, averaging the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const TASK_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;

/// Synthetic coarsened regression: a latent `u ~ U(0, 1)` drives an
/// age-like fine label `z = 18 + 52 u + N(0, σ_z)` and a smooth nonlinear
/// embedding of `u` into the first `signal_dims` inputs; the remaining
/// inputs are Gaussian nuisance.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionGenerator {
    pub input_dim: usize,
    pub signal_dims: usize,
    pub sigma_z: f64,
    /// Observation noise added to the signal inputs.
    pub sigma_x: f64,
    frequencies: Vec<f64>,
    phases: Vec<f64>,
}

impl RegressionGenerator {
    pub fn new(input_dim: usize, signal_dims: usize, sigma_z: f64, sigma_x: f64, task_seed: u64) -> Result<Self> {
        if input_dim == 0 || signal_dims == 0 || signal_dims > input_dim {
            return Err(Error::InvalidParameter(format!(
                "need 1 <= signal_dims <= input_dim, got {signal_dims} and {input_dim}"
            )));
        }
        if !(sigma_z >= 0.0) || !(sigma_x >= 0.0) {
            return Err(Error::InvalidParameter("noise levels must be >= 0".into()));
        }
        let mut rng = rng_for(task_seed, TASK_STREAM);
        let frequencies = (0..signal_dims).map(|_| rng.random_range(1.0..4.0)).collect();
        let phases = (0..signal_dims)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        Ok(Self {
            input_dim,
            signal_dims,
            sigma_z,
            sigma_x,
            frequencies,
            phases,
        })
    }

    /// Draws `n` samples. Without a threshold the sample median is used.
    pub fn generate(&self, n: usize, seed: u64, split: Split, threshold: Option<f64>) -> Result<CoarseFineDataset> {
        if n < 2 {
            return Err(Error::InvalidParameter(format!("need at least 2 samples, got {n}")));
        }
        let stream = match split {
            Split::Train => TRAIN_STREAM,
            Split::Test => TEST_STREAM,
        };
        let mut rng = rng_for(seed, stream);
        let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut x = Vec::with_capacity(n * self.input_dim);
        let mut z = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rng.random();
            for j in 0..self.signal_dims {
                let clean = (self.frequencies[j] * u + self.phases[j]).sin();
                x.push(clean + self.sigma_x * std_normal.sample(&mut rng));
            }
            for _ in self.signal_dims..self.input_dim {
                x.push(std_normal.sample(&mut rng));
            }
            z.push(18.0 + 52.0 * u + self.sigma_z * std_normal.sample(&mut rng));
        }
        let t = threshold.unwrap_or_else(|| median(&z));
        Ok(CoarseFineDataset {
            x: Tensor::matrix(n, self.input_dim, x)?,
            y: coarsen_threshold(&z, t),
            fine: FineLabels::Scalar(z),
            split,
            threshold: Some(t),
            seed,
        })
    }

    /// Train and test splits from disjoint streams; the test split is
    /// coarsened with the training median.
    pub fn generate_split(&self, n_train: usize, n_test: usize, seed: u64) -> Result<(CoarseFineDataset, CoarseFineDataset)> {
        let train = self.generate(n_train, seed, Split::Train, None)?;
        let test = self.generate(n_test, seed, Split::Test, train.threshold)?;
        Ok((train, test))
    }
}

/// Regression dataset with every input carrying signal, coarsened at its own
/// median.
pub fn gen_regression_dataset(n: usize, input_dim: usize, seed: u64, sigma_z: f64) -> Result<CoarseFineDataset> {
    RegressionGenerator::new(input_dim, input_dim, sigma_z, 0.0, seed)?.generate(n, seed, Split::Train, None)
}

/// Synthetic linear mixing: abundances `z ~ Dirichlet(α)`, spectra
/// `x = z M + N(0, σ²)` with smooth positive endmember spectra `M`.
#[derive(Clone, Debug, PartialEq)]
pub struct UnmixingGenerator {
    pub endmembers: Tensor,
    pub sigma_noise: f64,
    pub alpha: f64,
}

/// Endmember pairs must have cosine similarity below this.
const MAX_ENDMEMBER_COSINE: f64 = 0.99;

impl UnmixingGenerator {
    pub fn new(materials: usize, input_dim: usize, sigma_noise: f64, alpha: f64, task_seed: u64) -> Result<Self> {
        if materials < 2 || input_dim < materials {
            return Err(Error::InvalidParameter(format!(
                "need m >= 2 and d_in >= m, got m={materials}, d_in={input_dim}"
            )));
        }
        if !(sigma_noise >= 0.0) || !(alpha > 0.0) {
            return Err(Error::InvalidParameter("need σ_noise >= 0 and α > 0".into()));
        }
        let mut rng = rng_for(task_seed, TASK_STREAM);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(materials);
        while rows.len() < materials {
            let cand = smooth_spectrum(input_dim, &mut rng);
            if rows.iter().all(|r| cosine(r, &cand) < MAX_ENDMEMBER_COSINE) {
                rows.push(cand);
            }
        }
        Ok(Self {
            endmembers: Tensor::from_rows(&rows)?,
            sigma_noise,
            alpha,
        })
    }

    pub fn materials(&self) -> usize {
        self.endmembers.rows()
    }

    pub fn generate(&self, n: usize, seed: u64, split: Split) -> Result<CoarseFineDataset> {
        let stream = match split {
            Split::Train => TRAIN_STREAM,
            Split::Test => TEST_STREAM,
        };
        let mut rng = rng_for(seed, stream);
        let (m, d) = (self.endmembers.rows(), self.endmembers.cols());
        let gamma = Gamma::new(self.alpha, 1.0).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let noise = Normal::new(0.0, 1.0).expect("unit normal");
        let mut z = Vec::with_capacity(n * m);
        let mut x = Vec::with_capacity(n * d);
        for _ in 0..n {
            let row = loop {
                let g: Vec<f64> = (0..m).map(|_| gamma.sample(&mut rng)).collect();
                let s: f64 = g.iter().sum();
                if s > 0.0 {
                    break g.into_iter().map(|v| v / s).collect::<Vec<_>>();
                }
            };
            for j in 0..d {
                let clean: f64 = (0..m).map(|i| row[i] * self.endmembers.get(i, j)).sum();
                x.push(clean + self.sigma_noise * noise.sample(&mut rng));
            }
            z.extend(row);
        }
        let z = Tensor::matrix(n, m, z)?;
        Ok(CoarseFineDataset {
            x: Tensor::matrix(n, d, x)?,
            y: coarsen_argmax(&z)?,
            fine: FineLabels::Simplex(z),
            split,
            threshold: None,
            seed,
        })
    }

    pub fn generate_split(&self, n_train: usize, n_test: usize, seed: u64) -> Result<(CoarseFineDataset, CoarseFineDataset)> {
        Ok((
            self.generate(n_train, seed, Split::Train)?,
            self.generate(n_test, seed, Split::Test)?,
        ))
    }
}

pub fn gen_unmixing_dataset(
    n: usize,
    materials: usize,
    input_dim: usize,
    seed: u64,
    sigma_noise: f64,
    alpha: f64,
) -> Result<CoarseFineDataset> {
    UnmixingGenerator::new(materials, input_dim, sigma_noise, alpha, seed)?.generate(n, seed, Split::Train)
}

/// Baseline plus two or three Gaussian absorption/reflection bumps.
fn smooth_spectrum(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let base = rng.random_range(0.1..0.4);
    let bumps: Vec<(f64, f64, f64)> = (0..rng.random_range(2..=3))
        .map(|_| {
            (
                rng.random_range(0.0..1.0),
                rng.random_range(0.05..0.25),
                rng.random_range(0.2..0.8),
            )
        })
        .collect();
    (0..d)
        .map(|j| {
            let w = if d > 1 { j as f64 / (d - 1) as f64 } else { 0.5 };
            base + bumps
                .iter()
                .map(|(c, s, a)| {
                    // `powi` rounding may differ between optimization levels.
                    let t = (w - c) / s;
                    a * (-0.5 * t * t).exp()
                })
                .sum::<f64>()
        })
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Infers the mode from a CSV header: a `z` column means regression,
/// `z_0..` columns mean unmixing.
pub fn detect_csv_mode(path: &Path) -> Result<DatasetMode> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = rdr.headers()?;
    if headers.iter().any(|h| h == "z") {
        Ok(DatasetMode::Regression)
    } else if headers.iter().any(|h| h == "z_0") {
        Ok(DatasetMode::Unmixing)
    } else {
        Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: "header has neither a z nor a z_0 column".into(),
        })
    }
}

/// Loads a dataset written by [`CoarseFineDataset::export_csv`] or prepared
/// externally. Regression data is coarsened at `threshold`, or at its own
/// median when `None`.
pub fn load_csv_dataset(path: &Path, mode: DatasetMode, threshold: Option<f64>) -> Result<CoarseFineDataset> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let d_in = headers.iter().take_while(|h| h.starts_with("x_")).count();
    let z_cols = headers.len() - d_in;
    for (j, h) in headers.iter().enumerate() {
        let expect = match (j < d_in, mode) {
            (true, _) => format!("x_{j}"),
            (false, DatasetMode::Regression) => "z".into(),
            (false, DatasetMode::Unmixing) => format!("z_{}", j - d_in),
        };
        if h != expect {
            return Err(err(1, format!("expected column {expect:?}, found {h:?}")));
        }
    }
    if d_in == 0 || z_cols == 0 || (mode == DatasetMode::Regression && z_cols != 1) {
        return Err(err(1, "header does not match the dataset schema".into()));
    }
    let mut x = Vec::new();
    let mut z = Vec::new();
    let mut n = 0;
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| err(line, e.to_string()))?;
        if rec.len() != headers.len() {
            return Err(err(line, format!("expected {} fields, found {}", headers.len(), rec.len())));
        }
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| err(line, format!("non-numeric field {field:?} in column {}", &headers[j])))?;
            if !v.is_finite() {
                return Err(err(line, format!("non-finite value in column {}", &headers[j])));
            }
            if j < d_in {
                x.push(v);
            } else {
                z.push(v);
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("dataset file"));
    }
    let x = Tensor::matrix(n, d_in, x)?;
    match mode {
        DatasetMode::Regression => {
            let t = threshold.unwrap_or_else(|| median(&z));
            Ok(CoarseFineDataset {
                x,
                y: coarsen_threshold(&z, t),
                fine: FineLabels::Scalar(z),
                split: Split::Test,
                threshold: Some(t),
                seed: 0,
            })
        }
        DatasetMode::Unmixing => {
            let z = Tensor::matrix(n, z_cols, z)?;
            let y = coarsen_argmax(&z).map_err(|e| match e {
                Error::NotOnSimplex { row, sum } => err(row + 2, format!("abundances sum to {sum}, not 1")),
                other => other,
            })?;
            Ok(CoarseFineDataset {
                x,
                y,
                fine: FineLabels::Simplex(z),
                split: Split::Test,
                threshold: None,
                seed: 0,
            })
        }
    }
}
