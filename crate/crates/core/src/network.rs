//! Feedforward ReLU networks: parameters, the forward pass, and the
//! extended (bias-absorbing) representations used by the sheaf encoding.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result, SheafError};

/// Final activation applied to the last pre-activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Identity,
    Sigmoid,
    Tanh,
    Softmax,
}

impl OutputActivation {
    pub fn is_identity(self) -> bool {
        matches!(self, OutputActivation::Identity)
    }

    pub fn apply(self, z: &[f64]) -> Vec<f64> {
        match self {
            OutputActivation::Identity => z.to_vec(),
            OutputActivation::Sigmoid => z.iter().map(|&v| sigmoid(v)).collect(),
            OutputActivation::Tanh => z.iter().map(|&v| v.tanh()).collect(),
            OutputActivation::Softmax => softmax(z),
        }
    }

    /// `J_φ(z)ᵀ v` without materializing the Jacobian.
    pub fn jacobian_t_mul(self, z: &[f64], v: &[f64]) -> Vec<f64> {
        match self {
            OutputActivation::Identity => v.to_vec(),
            OutputActivation::Sigmoid => z
                .iter()
                .zip(v)
                .map(|(&zi, &vi)| {
                    let s = sigmoid(zi);
                    s * (1.0 - s) * vi
                })
                .collect(),
            OutputActivation::Tanh => z
                .iter()
                .zip(v)
                .map(|(&zi, &vi)| {
                    let t = zi.tanh();
                    (1.0 - t * t) * vi
                })
                .collect(),
            OutputActivation::Softmax => {
                // J = diag(s) - s sᵀ is symmetric.
                let s = softmax(z);
                let sv: f64 = s.iter().zip(v).map(|(a, b)| a * b).sum();
                s.iter().zip(v).map(|(&si, &vi)| si * (vi - sv)).collect()
            }
        }
    }

    pub fn jacobian(self, z: &[f64]) -> Array2<f64> {
        let n = z.len();
        match self {
            OutputActivation::Identity => Array2::eye(n),
            OutputActivation::Sigmoid => Array2::from_diag(&Array1::from_iter(z.iter().map(|&v| {
                let s = sigmoid(v);
                s * (1.0 - s)
            }))),
            OutputActivation::Tanh => {
                Array2::from_diag(&Array1::from_iter(z.iter().map(|&v| 1.0 - v.tanh() * v.tanh())))
            }
            OutputActivation::Softmax => {
                let s = softmax(z);
                Array2::from_shape_fn(
                    (n, n),
                    |(i, j)| {
                        if i == j {
                            s[i] * (1.0 - s[i])
                        } else {
                            -s[i] * s[j]
                        }
                    },
                )
            }
        }
    }
}

impl fmt::Display for OutputActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OutputActivation::Identity => "identity",
            OutputActivation::Sigmoid => "sigmoid",
            OutputActivation::Tanh => "tanh",
            OutputActivation::Softmax => "softmax",
        };
        f.write_str(s)
    }
}

impl FromStr for OutputActivation {
    type Err = SheafError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(OutputActivation::Identity),
            "sigmoid" => Ok(OutputActivation::Sigmoid),
            "tanh" => Ok(OutputActivation::Tanh),
            "softmax" => Ok(OutputActivation::Softmax),
            other => Err(SheafError::Config(format!("unknown output activation {other:?}"))),
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Architecture and parameters of a `k`-hidden-layer ReLU network.
///
/// `weights[l]` maps layer `l` to layer `l + 1`, i.e. has shape
/// `layer_dims[l + 1] × layer_dims[l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub layer_dims: Vec<usize>,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub output_activation: OutputActivation,
}

impl NetworkSpec {
    pub fn new(
        layer_dims: Vec<usize>,
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
        output_activation: OutputActivation,
    ) -> Result<Self> {
        // Hot loops read weights as row-major slices.
        let weights = weights
            .into_iter()
            .map(|w| w.as_standard_layout().into_owned())
            .collect();
        let biases = biases
            .into_iter()
            .map(|b| b.as_standard_layout().into_owned())
            .collect();
        let spec = NetworkSpec {
            layer_dims,
            weights,
            biases,
            output_activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// All-zero parameters for the given architecture.
    pub fn zeros(layer_dims: &[usize], output_activation: OutputActivation) -> Result<Self> {
        let weights = layer_dims
            .windows(2)
            .map(|w| Array2::zeros((w[1], w[0])))
            .collect();
        let biases = layer_dims[1..].iter().map(|&n| Array1::zeros(n)).collect();
        NetworkSpec::new(layer_dims.to_vec(), weights, biases, output_activation)
    }

    /// He-normal weights (std `sqrt(2 / fan_in)`), zero biases.
    pub fn he_init<R: Rng + ?Sized>(
        layer_dims: &[usize],
        output_activation: OutputActivation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut spec = NetworkSpec::zeros(layer_dims, output_activation)?;
        for w in spec.weights.iter_mut() {
            let fan_in = w.ncols() as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            w.mapv_inplace(|_| normal.sample(rng));
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = &self.layer_dims;
        if dims.len() < 3 {
            return Err(SheafError::Construction(format!(
                "need at least one hidden layer, got layer_dims {dims:?}"
            )));
        }
        if dims.contains(&0) {
            return Err(SheafError::Construction(format!(
                "layer widths must be positive, got {dims:?}"
            )));
        }
        let layers = dims.len() - 1;
        if self.weights.len() != layers || self.biases.len() != layers {
            return Err(SheafError::Construction(format!(
                "expected {layers} weight matrices and bias vectors, got {} and {}",
                self.weights.len(),
                self.biases.len()
            )));
        }
        for l in 0..layers {
            let w = &self.weights[l];
            if w.dim() != (dims[l + 1], dims[l]) {
                return Err(SheafError::Construction(format!(
                    "weight {} has shape {:?}, expected {:?}",
                    l + 1,
                    w.dim(),
                    (dims[l + 1], dims[l])
                )));
            }
            if self.biases[l].len() != dims[l + 1] {
                return Err(SheafError::Construction(format!(
                    "bias {} has length {}, expected {}",
                    l + 1,
                    self.biases[l].len(),
                    dims[l + 1]
                )));
            }
            if w.iter().chain(self.biases[l].iter()).any(|v| !v.is_finite()) {
                return Err(SheafError::Construction(format!(
                    "layer {} has non-finite parameters",
                    l + 1
                )));
            }
        }
        Ok(())
    }

    /// Number of hidden layers `k`.
    pub fn hidden_layers(&self) -> usize {
        self.layer_dims.len() - 2
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(s)?;
        file.try_into()
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelFile::from(self))?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        NetworkSpec::from_json_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string()? + "\n")?;
        Ok(())
    }
}

/// On-disk model layout: row-major nested arrays.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    layer_dims: Vec<usize>,
    weights: Vec<Vec<Vec<f64>>>,
    biases: Vec<Vec<f64>>,
    output_activation: OutputActivation,
}

impl From<&NetworkSpec> for ModelFile {
    fn from(spec: &NetworkSpec) -> Self {
        ModelFile {
            layer_dims: spec.layer_dims.clone(),
            weights: spec
                .weights
                .iter()
                .map(|w| w.rows().into_iter().map(|r| r.to_vec()).collect())
                .collect(),
            biases: spec.biases.iter().map(|b| b.to_vec()).collect(),
            output_activation: spec.output_activation,
        }
    }
}

impl TryFrom<ModelFile> for NetworkSpec {
    type Error = SheafError;

    fn try_from(file: ModelFile) -> Result<Self> {
        let mut weights = Vec::with_capacity(file.weights.len());
        for (l, rows) in file.weights.into_iter().enumerate() {
            let nrows = rows.len();
            let ncols = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != ncols) {
                return Err(SheafError::Construction(format!(
                    "weight {} has ragged rows",
                    l + 1
                )));
            }
            let flat: Vec<f64> = rows.into_iter().flatten().collect();
            weights.push(
                Array2::from_shape_vec((nrows, ncols), flat)
                    .map_err(|e| SheafError::Construction(e.to_string()))?,
            );
        }
        let biases = file.biases.into_iter().map(Array1::from).collect();
        NetworkSpec::new(file.layer_dims, weights, biases, file.output_activation)
    }
}

/// Per-hidden-layer ReLU masks; entry `j` of layer `l` is 1 iff `z_j ≥ 0`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ActivationPattern {
    pub masks: Vec<Vec<bool>>,
}

impl ActivationPattern {
    pub fn all(spec: &NetworkSpec, active: bool) -> Self {
        let k = spec.hidden_layers();
        ActivationPattern {
            masks: (1..=k).map(|l| vec![active; spec.layer_dims[l]]).collect(),
        }
    }

    pub fn random<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Self {
        let k = spec.hidden_layers();
        ActivationPattern {
            masks: (1..=k)
                .map(|l| (0..spec.layer_dims[l]).map(|_| rng.random_bool(0.5)).collect())
                .collect(),
        }
    }

    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        let k = spec.hidden_layers();
        if self.masks.len() != k
            || self
                .masks
                .iter()
                .enumerate()
                .any(|(i, m)| m.len() != spec.layer_dims[i + 1])
        {
            return Err(dim_err("activation pattern does not match hidden layer widths"));
        }
        Ok(())
    }
}

/// Intermediate quantities of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Pre-activations `z⁽¹⁾ … z⁽ᵏ⁺¹⁾`.
    pub z: Vec<Array1<f64>>,
    /// Post-activations `a⁽¹⁾ … a⁽ᵏ⁾`.
    pub a: Vec<Array1<f64>>,
    pub y_hat: Array1<f64>,
    pub pattern: ActivationPattern,
}

/// `[W | diag(b)]`.
pub fn extend_weight(w: &Array2<f64>, b: &Array1<f64>) -> Result<Array2<f64>> {
    let (rows, cols) = w.dim();
    if b.len() != rows {
        return Err(dim_err(format!(
            "bias length {} does not match {} weight rows",
            b.len(),
            rows
        )));
    }
    let mut out = Array2::zeros((rows, cols + rows));
    out.slice_mut(s![.., ..cols]).assign(w);
    for (i, &bi) in b.iter().enumerate() {
        out[[i, cols + i]] = bi;
    }
    Ok(out)
}

/// `[a; 1, …, 1]` with `next_dim` trailing ones.
pub fn extend_activation(a: ArrayView1<f64>, next_dim: usize) -> Result<Array1<f64>> {
    if next_dim == 0 {
        return Err(dim_err("extended activation needs at least one trailing one"));
    }
    Ok(a.iter()
        .cloned()
        .chain(std::iter::repeat_n(1.0, next_dim))
        .collect())
}

pub fn relu_pattern(z: &[f64]) -> Result<Vec<bool>> {
    if z.iter().any(|v| v.is_nan()) {
        return Err(SheafError::InvalidInput("NaN pre-activation".into()));
    }
    Ok(z.iter().map(|&v| v >= 0.0).collect())
}

pub fn forward_pass(spec: &NetworkSpec, x: &[f64]) -> Result<ForwardTrace> {
    if x.len() != spec.input_dim() {
        return Err(dim_err(format!(
            "input has length {}, network expects {}",
            x.len(),
            spec.input_dim()
        )));
    }
    let k = spec.hidden_layers();
    let mut prev = Array1::from(x.to_vec());
    let mut z = Vec::with_capacity(k + 1);
    let mut a = Vec::with_capacity(k);
    let mut masks = Vec::with_capacity(k);
    for l in 0..=k {
        let zl = spec.weights[l].dot(&prev) + &spec.biases[l];
        if l < k {
            masks.push(relu_pattern(zl.as_slice().unwrap())?);
            let al = zl.mapv(|v| v.max(0.0));
            prev = al.clone();
            a.push(al);
        }
        z.push(zl);
    }
    let y_hat = Array1::from(spec.output_activation.apply(z[k].as_slice().unwrap()));
    Ok(ForwardTrace {
        z,
        a,
        y_hat,
        pattern: ActivationPattern { masks },
    })
}

/// Network output for each column of `x` (`n₀ × M`); returns `n_out × M`.
pub fn predict_batch(spec: &NetworkSpec, x: &Array2<f64>) -> Array2<f64> {
    let k = spec.hidden_layers();
    let mut prev = x.clone();
    for l in 0..=k {
        let mut zl = spec.weights[l].dot(&prev);
        zl += &spec.biases[l].view().insert_axis(ndarray::Axis(1));
        if l < k {
            zl.mapv_inplace(|v| v.max(0.0));
        }
        prev = zl;
    }
    let phi = spec.output_activation;
    if !phi.is_identity() {
        for mut col in prev.columns_mut() {
            let out = phi.apply(&col.to_vec());
            col.assign(&Array1::from(out));
        }
    }
    prev
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn extend_weight_examples() {
        let w = array![[2.0]];
        assert_eq!(extend_weight(&w, &array![3.0]).unwrap(), array![[2.0, 3.0]]);
        let w = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(
            extend_weight(&w, &array![0.0, 0.0]).unwrap(),
            array![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]
        );
        let wb = extend_weight(&array![[1.0, 2.0]], &array![5.0]).unwrap();
        assert_eq!(wb, array![[1.0, 2.0, 5.0]]);
        // [W|diag(b)]·[a;1] = Wa + b
        let ab = extend_activation(array![1.0, 1.0].view(), 1).unwrap();
        assert_eq!(wb.dot(&ab), array![8.0]);
        assert!(extend_weight(&array![[1.0]], &array![1.0, 2.0]).is_err());
    }

    #[test]
    fn extend_activation_examples() {
        assert_eq!(
            extend_activation(array![2.0, 3.0].view(), 1).unwrap(),
            array![2.0, 3.0, 1.0]
        );
        let empty: Array1<f64> = Array1::zeros(0);
        assert_eq!(extend_activation(empty.view(), 2).unwrap(), array![1.0, 1.0]);
        assert_eq!(
            extend_activation(array![-1.0].view(), 3).unwrap(),
            array![-1.0, 1.0, 1.0, 1.0]
        );
        assert!(extend_activation(array![1.0].view(), 0).is_err());
    }

    #[test]
    fn relu_pattern_convention() {
        assert_eq!(relu_pattern(&[1.0, -2.0, 0.0]).unwrap(), vec![true, false, true]);
        assert_eq!(relu_pattern(&[0.0, 0.0, 0.0]).unwrap(), vec![true; 3]);
        assert_eq!(relu_pattern(&[-1e-30]).unwrap(), vec![false]);
        assert_eq!(relu_pattern(&[-0.0]).unwrap(), vec![true]);
        assert!(relu_pattern(&[f64::NAN]).is_err());
    }

    fn chain(w1: Array2<f64>, b1: Array1<f64>, w2: Array2<f64>, b2: Array1<f64>) -> NetworkSpec {
        let dims = vec![w1.ncols(), w1.nrows(), w2.nrows()];
        NetworkSpec::new(dims, vec![w1, w2], vec![b1, b2], OutputActivation::Identity).unwrap()
    }

    #[test]
    fn forward_pass_examples() {
        let net = chain(array![[1.0]], array![0.0], array![[1.0]], array![0.0]);
        let t = forward_pass(&net, &[2.0]).unwrap();
        assert_eq!(t.z[0], array![2.0]);
        assert_eq!(t.a[0], array![2.0]);
        assert_eq!(t.y_hat, array![2.0]);

        let t = forward_pass(&net, &[-1.0]).unwrap();
        assert_eq!(t.z[0], array![-1.0]);
        assert_eq!(t.a[0], array![0.0]);
        assert_eq!(t.y_hat, array![0.0]);
        assert_eq!(t.pattern.masks, vec![vec![false]]);

        let net = chain(
            array![[1.0], [-1.0]],
            array![0.5, 0.5],
            array![[1.0, 1.0]],
            array![0.0],
        );
        let t = forward_pass(&net, &[1.0]).unwrap();
        assert_eq!(t.z[0], array![1.5, -0.5]);
        assert_eq!(t.a[0], array![1.5, 0.0]);
        assert_eq!(t.y_hat, array![1.5]);
        assert!(forward_pass(&net, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(NetworkSpec::zeros(&[2, 1], OutputActivation::Identity).is_err());
        assert!(NetworkSpec::zeros(&[2, 0, 1], OutputActivation::Identity).is_err());
        let mut net = NetworkSpec::zeros(&[2, 3, 1], OutputActivation::Identity).unwrap();
        net.weights[0][[0, 0]] = f64::INFINITY;
        assert!(net.validate().is_err());
        let bad = NetworkSpec::new(
            vec![2, 3, 1],
            vec![Array2::zeros((3, 2)), Array2::zeros((2, 3))],
            vec![Array1::zeros(3), Array1::zeros(1)],
            OutputActivation::Identity,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn json_round_trip_and_field_names() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let net = NetworkSpec::he_init(&[2, 3, 2], OutputActivation::Softmax, &mut rng).unwrap();
        let text = net.to_json_string().unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        let keys: Vec<_> = value.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys.len(), 4);
        for k in ["layer_dims", "weights", "biases", "output_activation"] {
            assert!(value.get(k).is_some(), "missing {k}");
        }
        assert_eq!(value["output_activation"], "softmax");
        assert_eq!(NetworkSpec::from_json_str(&text).unwrap(), net);

        let extra = text.replacen('{', "{\"extra\": 1,", 1);
        assert!(NetworkSpec::from_json_str(&extra).is_err());
    }

    #[test]
    fn softmax_jacobian_matches_dense() {
        let z = [0.3, -1.2, 0.8];
        let v = [1.0, 2.0, -0.5];
        for phi in [
            OutputActivation::Sigmoid,
            OutputActivation::Tanh,
            OutputActivation::Softmax,
            OutputActivation::Identity,
        ] {
            let dense = phi.jacobian(&z).t().dot(&Array1::from(v.to_vec()));
            let fast = phi.jacobian_t_mul(&z, &v);
            for (a, b) in dense.iter().zip(&fast) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    use rand::SeedableRng;
}
