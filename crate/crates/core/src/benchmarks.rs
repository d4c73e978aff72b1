//! Synthetic tasks, a reverse-mode gradient-descent baseline, and model
//! comparison on held-out data.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::csv_err;
use crate::error::{dim_err, Result, SheafError};
use crate::network::{predict_batch, NetworkSpec, OutputActivation};
use crate::training::{LossKind, TrainHistory, WeightDelta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Paraboloid,
    Saddle,
    Circular,
    Blobs,
}

impl DatasetKind {
    pub fn is_classification(self) -> bool {
        matches!(self, DatasetKind::Circular | DatasetKind::Blobs)
    }

    pub fn output_dim(self) -> usize {
        match self {
            DatasetKind::Blobs => 4,
            _ => 1,
        }
    }

    /// Output activation conventionally paired with the task.
    pub fn default_activation(self) -> OutputActivation {
        match self {
            DatasetKind::Paraboloid | DatasetKind::Saddle => OutputActivation::Identity,
            DatasetKind::Circular => OutputActivation::Sigmoid,
            DatasetKind::Blobs => OutputActivation::Softmax,
        }
    }

    pub fn default_loss(self) -> LossKind {
        if self.is_classification() {
            LossKind::CrossEntropy
        } else {
            LossKind::Squared
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Paraboloid => "paraboloid",
            DatasetKind::Saddle => "saddle",
            DatasetKind::Circular => "circular",
            DatasetKind::Blobs => "blobs",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = SheafError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paraboloid" => Ok(DatasetKind::Paraboloid),
            "saddle" => Ok(DatasetKind::Saddle),
            "circular" => Ok(DatasetKind::Circular),
            "blobs" => Ok(DatasetKind::Blobs),
            other => Err(SheafError::Config(format!("unknown dataset kind {other:?}"))),
        }
    }
}

/// Samples are columns: `x` is `n₀ × M`, `y` is `n_out × M`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub kind: DatasetKind,
    pub seed: u64,
}

pub fn paraboloid(x1: f64, x2: f64) -> f64 {
    x1 * x1 + x2 * x2 - 2.0 / 3.0
}

pub fn saddle(x1: f64, x2: f64) -> f64 {
    x1 * x1 - x2 * x2 + 0.5 * (2.0 * x1).sin()
}

pub const DISK_RADIUS: f64 = 0.8;
pub const ANNULUS: (f64, f64) = (1.2, 2.0);
pub const BLOB_CENTRE: f64 = 1.5;
pub const BLOB_VARIANCES: (f64, f64) = (0.4, 0.1);

/// Circular labels alternate disk (0) / annulus (1); blob labels cycle
/// through the four quadrants.
pub fn make_dataset(kind: DatasetKind, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(SheafError::InvalidInput(
            "dataset needs at least one sample".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Array2::zeros((2, n));
    let mut y = Array2::zeros((kind.output_dim(), n));
    for m in 0..n {
        match kind {
            DatasetKind::Paraboloid | DatasetKind::Saddle => {
                let (lo, hi) = if kind == DatasetKind::Paraboloid {
                    (-2.0, 2.0)
                } else {
                    (0.0, 2.0)
                };
                let x1 = rng.random_range(lo..=hi);
                let x2 = rng.random_range(lo..=hi);
                x[[0, m]] = x1;
                x[[1, m]] = x2;
                y[[0, m]] = if kind == DatasetKind::Paraboloid {
                    paraboloid(x1, x2)
                } else {
                    saddle(x1, x2)
                };
            }
            DatasetKind::Circular => {
                let class = m % 2;
                let r = if class == 0 {
                    rng.random_range(0.0..DISK_RADIUS)
                } else {
                    rng.random_range(ANNULUS.0..=ANNULUS.1)
                };
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                x[[0, m]] = r * theta.cos();
                x[[1, m]] = r * theta.sin();
                y[[0, m]] = class as f64;
            }
            DatasetKind::Blobs => {
                let class = m % 4;
                let (cx, cy) = [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)][class];
                let angle = (class as f64) * std::f64::consts::FRAC_PI_4;
                let g1: f64 = StandardNormal.sample(&mut rng);
                let g2: f64 = StandardNormal.sample(&mut rng);
                let u = g1 * BLOB_VARIANCES.0.sqrt();
                let v = g2 * BLOB_VARIANCES.1.sqrt();
                x[[0, m]] = BLOB_CENTRE * cx + angle.cos() * u - angle.sin() * v;
                x[[1, m]] = BLOB_CENTRE * cy + angle.sin() * u + angle.cos() * v;
                y[[class, m]] = 1.0;
            }
        }
    }
    Ok(Dataset { x, y, kind, seed })
}

/// Seed used for the held-out set paired with a training seed.
pub fn test_seed(seed: u64) -> u64 {
    seed ^ 0x7E57_5EED_0000_0001
}

/// Train and test sets drawn with independent seeds.
pub fn make_split(kind: DatasetKind, n_train: usize, n_test: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    Ok((
        make_dataset(kind, n_train, seed)?,
        make_dataset(kind, n_test, test_seed(seed))?,
    ))
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.x.ncols() == 0
    }

    /// The first `m` samples.
    pub fn head(&self, m: usize) -> Dataset {
        let m = m.min(self.len());
        Dataset {
            x: self.x.slice(ndarray::s![.., ..m]).to_owned(),
            y: self.y.slice(ndarray::s![.., ..m]).to_owned(),
            kind: self.kind,
            seed: self.seed,
        }
    }

    /// Columns `x1, x2, y…` (`y` for one target, `y1…yC` otherwise).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (1..=self.x.nrows()).map(|i| format!("x{i}")).collect();
        if self.y.nrows() == 1 {
            header.push("y".into());
        } else {
            header.extend((1..=self.y.nrows()).map(|i| format!("y{i}")));
        }
        wr.write_record(&header).map_err(csv_err)?;
        for m in 0..self.len() {
            let row: Vec<String> = self
                .x
                .column(m)
                .iter()
                .chain(self.y.column(m).iter())
                .map(f64::to_string)
                .collect();
            wr.write_record(&row).map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Inputs and optional labels read back from a dataset CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedData {
    pub x: Array2<f64>,
    pub y: Option<Array2<f64>>,
}

impl LoadedData {
    /// Attach a task kind; fails when the file carried no label columns.
    pub fn into_dataset(self, kind: DatasetKind) -> Result<Dataset> {
        let y = self
            .y
            .ok_or_else(|| SheafError::InvalidInput("dataset file has no label columns".into()))?;
        Ok(Dataset {
            x: self.x,
            y,
            kind,
            seed: 0,
        })
    }
}

/// Read a CSV whose header names `x*` input columns and optional `y*`
/// label columns, one sample per row.
pub fn read_dataset_csv<R: std::io::Read>(r: R) -> Result<LoadedData> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers().map_err(csv_err)?.clone();
    let xs: Vec<usize> = (0..header.len())
        .filter(|&i| header[i].starts_with('x'))
        .collect();
    let ys: Vec<usize> = (0..header.len())
        .filter(|&i| header[i].starts_with('y'))
        .collect();
    if xs.is_empty() || xs.len() + ys.len() != header.len() {
        return Err(SheafError::InvalidInput(
            "dataset header must consist of x… and y… columns".into(),
        ));
    }
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| SheafError::InvalidInput(format!("bad number {f:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        rows.push(vals);
    }
    if rows.is_empty() {
        return Err(SheafError::InvalidInput("dataset file has no rows".into()));
    }
    let pick = |cols: &[usize]| Array2::from_shape_fn((cols.len(), rows.len()), |(i, m)| rows[m][cols[i]]);
    Ok(LoadedData {
        x: pick(&xs),
        y: (!ys.is_empty()).then(|| pick(&ys)),
    })
}

/// Task loss and, for classification, accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: Option<f64>,
}

const PROB_FLOOR: f64 = 1e-15;

/// Mean cross-entropy of predicted probabilities; one output row means
/// binary labels.
pub fn cross_entropy(pred: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let m = pred.ncols() as f64;
    let clamp = |p: f64| p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    let total: f64 = if pred.nrows() == 1 {
        pred.iter()
            .zip(y.iter())
            .map(|(&p, &t)| -(t * clamp(p).ln() + (1.0 - t) * (1.0 - clamp(p)).ln()))
            .sum()
    } else {
        pred.iter().zip(y.iter()).map(|(&p, &t)| -t * clamp(p).ln()).sum()
    };
    total / m
}

pub fn mean_squared_error(pred: &Array2<f64>, y: &Array2<f64>) -> f64 {
    pred.iter()
        .zip(y.iter())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64
}

pub fn accuracy(pred: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let m = pred.ncols();
    let correct = (0..m)
        .filter(|&j| {
            if pred.nrows() == 1 {
                (pred[[0, j]] >= 0.5) == (y[[0, j]] >= 0.5)
            } else {
                argmax(pred.column(j).iter()) == argmax(y.column(j).iter())
            }
        })
        .count();
    correct as f64 / m as f64
}

fn argmax<'a>(it: impl Iterator<Item = &'a f64>) -> usize {
    it.enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &v)| if v > best.1 { (i, v) } else { best },
        )
        .0
}

/// Cross-entropy for classification with a probability output, mean squared
/// error otherwise.
pub fn task_metrics(spec: &NetworkSpec, data: &Dataset) -> Result<Metrics> {
    if data.is_empty() {
        return Err(SheafError::InvalidInput(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    if data.x.nrows() != spec.input_dim() || data.y.nrows() != spec.output_dim() {
        return Err(dim_err(format!(
            "model maps {} → {}, dataset has {} → {}",
            spec.input_dim(),
            spec.output_dim(),
            data.x.nrows(),
            data.y.nrows()
        )));
    }
    let pred = predict_batch(spec, &data.x);
    let probabilistic = matches!(
        spec.output_activation,
        OutputActivation::Sigmoid | OutputActivation::Softmax
    );
    let loss = if data.kind.is_classification() && probabilistic {
        cross_entropy(&pred, &data.y)
    } else {
        mean_squared_error(&pred, &data.y)
    };
    let accuracy = data.kind.is_classification().then(|| accuracy(&pred, &data.y));
    Ok(Metrics { loss, accuracy })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub epochs: usize,
    pub loss: LossKind,
    pub output_activation: OutputActivation,
    pub seed: u64,
    pub record_every: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.01,
            epochs: 10_000,
            loss: LossKind::Squared,
            output_activation: OutputActivation::Identity,
            seed: 0,
            record_every: 100,
        }
    }
}

/// Gradient-descent objective: mean squared error for the squared loss,
/// mean cross-entropy, or the mean per-sample potential of other losses.
pub fn objective(spec: &NetworkSpec, x: &Array2<f64>, y: &Array2<f64>, loss: &LossKind) -> Result<f64> {
    loss.validate_for(spec.output_activation)?;
    let pred = predict_batch(spec, x);
    let m = x.ncols() as f64;
    Ok(match loss {
        LossKind::Squared => mean_squared_error(&pred, y),
        LossKind::CrossEntropy => cross_entropy(&pred, y),
        other => {
            let mut total = 0.0;
            for (p, t) in pred.columns().into_iter().zip(y.columns()) {
                let d: Vec<f64> = p.iter().zip(t.iter()).map(|(a, b)| a - b).collect();
                total += other.potential(&d)?;
            }
            total / m
        }
    })
}

/// Gradient of [`objective`] with respect to every weight and bias.
pub fn objective_gradient(
    spec: &NetworkSpec,
    x: &Array2<f64>,
    y: &Array2<f64>,
    loss: &LossKind,
) -> Result<Vec<WeightDelta>> {
    loss.validate_for(spec.output_activation)?;
    let k = spec.hidden_layers();
    let m = x.ncols();
    let mut acts = vec![x.clone()];
    let mut pre = Vec::with_capacity(k + 1);
    for l in 0..=k {
        let z = spec.weights[l].dot(&acts[l]) + spec.biases[l].view().insert_axis(Axis(1));
        if l < k {
            acts.push(z.mapv(|v| v.max(0.0)));
        }
        pre.push(z);
    }
    let phi = spec.output_activation;
    let n_out = spec.output_dim();
    let mut delta = Array2::zeros((n_out, m));
    for j in 0..m {
        let z: Vec<f64> = pre[k].column(j).to_vec();
        let p = phi.apply(&z);
        let t = y.column(j);
        let d: Vec<f64> = p.iter().zip(t.iter()).map(|(a, b)| a - b).collect();
        let g: Vec<f64> = match loss {
            LossKind::CrossEntropy => d.iter().map(|v| v / m as f64).collect(),
            LossKind::Squared => phi
                .jacobian_t_mul(&z, &d)
                .iter()
                .map(|v| 2.0 * v / (m * n_out) as f64)
                .collect(),
            other => phi
                .jacobian_t_mul(&z, &other.gradient(&d)?)
                .iter()
                .map(|v| v / m as f64)
                .collect(),
        };
        delta.column_mut(j).assign(&Array1::from(g));
    }
    let mut grads = Vec::with_capacity(k + 1);
    for l in (0..=k).rev() {
        let dw = delta.dot(&acts[l].t());
        let db = delta.sum_axis(Axis(1));
        if l > 0 {
            let back = spec.weights[l].t().dot(&delta);
            delta = back * pre[l - 1].mapv(|z| if z >= 0.0 { 1.0 } else { 0.0 });
        }
        grads.push(WeightDelta { dw, db });
    }
    grads.reverse();
    Ok(grads)
}

/// Full-batch gradient descent with a fixed learning rate.
pub fn sgd_train(
    arch: &[usize],
    train: &Dataset,
    test: Option<&Dataset>,
    config: &SgdConfig,
) -> Result<(NetworkSpec, TrainHistory)> {
    if train.is_empty() {
        return Err(SheafError::InvalidInput("training set is empty".into()));
    }
    if !(config.lr >= 0.0 && config.lr.is_finite()) {
        return Err(SheafError::Config(format!(
            "lr must be finite and ≥ 0, got {}",
            config.lr
        )));
    }
    if config.record_every == 0 {
        return Err(SheafError::Config("record_every must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut spec = NetworkSpec::he_init(arch, config.output_activation, &mut rng)?;
    config.loss.validate_for(spec.output_activation)?;
    let mut history = TrainHistory::new(&spec, Vec::new());
    for epoch in 0..=config.epochs {
        if config.epochs > 0 && (epoch % config.record_every == 0 || epoch == config.epochs) {
            history.record_model(epoch, &spec, train, test, None)?;
        }
        if epoch == config.epochs {
            break;
        }
        let grads = objective_gradient(&spec, &train.x, &train.y, &config.loss)?;
        for (l, g) in grads.iter().enumerate() {
            spec.weights[l].scaled_add(-config.lr, &g.dw);
            spec.biases[l].scaled_add(-config.lr, &g.db);
        }
        let bad = spec
            .weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(spec.biases.iter().flat_map(|b| b.iter()))
            .any(|v| !(v.abs() <= crate::diffusion::DIVERGENCE_LIMIT));
        if bad {
            return Err(SheafError::Diverged { step: epoch + 1 });
        }
    }
    Ok((spec, history))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub loss_a: f64,
    pub loss_b: f64,
    /// `loss_a / loss_b`.
    pub ratio: f64,
    pub accuracy_a: Option<f64>,
    pub accuracy_b: Option<f64>,
}

pub fn compare(a: &NetworkSpec, b: &NetworkSpec, data: &Dataset) -> Result<CompareReport> {
    if a.input_dim() != b.input_dim() || a.output_dim() != b.output_dim() {
        return Err(dim_err("models have different input or output dimensions"));
    }
    let ma = task_metrics(a, data)?;
    let mb = task_metrics(b, data)?;
    Ok(CompareReport {
        loss_a: ma.loss,
        loss_b: mb.loss,
        ratio: ma.loss / mb.loss,
        accuracy_a: ma.accuracy,
        accuracy_b: mb.accuracy,
    })
}

/// One row of the sheaf-versus-baseline results table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultsRow {
    pub task: DatasetKind,
    pub depth: usize,
    pub sheaf_train: f64,
    pub sgd_train: f64,
    pub sheaf_test: f64,
    pub sgd_test: f64,
    pub ratio: f64,
}

pub fn results_row(
    sheaf_model: &NetworkSpec,
    sgd_model: &NetworkSpec,
    train: &Dataset,
    test: &Dataset,
) -> Result<ResultsRow> {
    let tr = compare(sheaf_model, sgd_model, train)?;
    let te = compare(sheaf_model, sgd_model, test)?;
    Ok(ResultsRow {
        task: test.kind,
        depth: sheaf_model.hidden_layers(),
        sheaf_train: tr.loss_a,
        sgd_train: tr.loss_b,
        sheaf_test: te.loss_a,
        sgd_test: te.loss_b,
        ratio: te.ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn regression_formulas() {
        assert_abs_diff_eq!(paraboloid(0.0, 0.0), -2.0 / 3.0);
        assert_abs_diff_eq!(saddle(0.0, 2.0), -4.0);
    }

    #[test]
    fn datasets_are_reproducible_and_in_domain() {
        for kind in [
            DatasetKind::Paraboloid,
            DatasetKind::Saddle,
            DatasetKind::Circular,
            DatasetKind::Blobs,
        ] {
            let a = make_dataset(kind, 64, 5).unwrap();
            let b = make_dataset(kind, 64, 5).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, make_dataset(kind, 64, 6).unwrap());
            assert_eq!(a.y.nrows(), kind.output_dim());
            match kind {
                DatasetKind::Paraboloid => assert!(a.x.iter().all(|v| v.abs() <= 2.0)),
                DatasetKind::Saddle => assert!(a.x.iter().all(|v| (0.0..=2.0).contains(v))),
                DatasetKind::Circular => {
                    for (c, lab) in a.x.columns().into_iter().zip(a.y.iter()) {
                        let r = c[0].hypot(c[1]);
                        if *lab == 0.0 {
                            assert!(r < DISK_RADIUS);
                        } else {
                            assert!((ANNULUS.0 - 1e-12..=ANNULUS.1 + 1e-12).contains(&r));
                        }
                    }
                }
                DatasetKind::Blobs => {
                    for col in a.y.columns() {
                        assert_eq!(col.sum(), 1.0);
                    }
                }
            }
        }
        assert!(make_dataset(DatasetKind::Saddle, 0, 1).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let data = make_dataset(DatasetKind::Paraboloid, 20, 1).unwrap();
        let cfg = SgdConfig {
            lr: 0.0,
            epochs: 5,
            seed: 3,
            ..Default::default()
        };
        let (spec, _) = sgd_train(&[2, 4, 1], &data, None, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let init = NetworkSpec::he_init(&[2, 4, 1], OutputActivation::Identity, &mut rng).unwrap();
        assert_eq!(spec, init);
    }

    #[test]
    fn compare_identical_and_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = NetworkSpec::he_init(&[2, 3, 1], OutputActivation::Identity, &mut rng).unwrap();
        let data = make_dataset(DatasetKind::Paraboloid, 10, 2).unwrap();
        assert_eq!(compare(&spec, &spec, &data).unwrap().ratio, 1.0);
        let empty = data.head(0);
        assert!(compare(&spec, &spec, &empty).is_err());
    }

    #[test]
    fn accuracy_conventions() {
        let pred = ndarray::array![[0.7, 0.2, 0.5]];
        let y = ndarray::array![[1.0, 0.0, 0.0]];
        assert_abs_diff_eq!(accuracy(&pred, &y), 2.0 / 3.0);
        let pred = ndarray::array![[0.1, 0.6], [0.9, 0.4]];
        let y = ndarray::array![[0.0, 1.0], [1.0, 0.0]];
        assert_eq!(accuracy(&pred, &y), 1.0);
    }
}
