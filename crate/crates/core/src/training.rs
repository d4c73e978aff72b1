//! Joint gradient flow of the free cochain and the trainable restriction
//! maps, with pluggable output-edge potentials and optional anchoring.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::benchmarks::{task_metrics, Dataset};
use crate::diffusion::free_velocity_with_pattern;
use crate::diffusion::{csv_err, DIVERGENCE_LIMIT};
use crate::error::{dim_err, Result, SheafError};
use crate::linalg::Lu;
use crate::network::{NetworkSpec, OutputActivation};
use crate::sheaf::{
    build_sheaf, restricted_laplacian, BatchCochain, Cochain, Discord, EdgeKind, LaplacianForm, NeuralSheaf,
    OutputMode, PinLayer, PinSpec,
};

/// Potential `f` on the output edge discrepancy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Squared,
    L1,
    /// `(1/p) Σ |d|ᵖ`, `p > 1`.
    #[serde(rename = "pnorm")]
    PNorm(f64),
    /// Huber with threshold `τ > 0`.
    Huber(f64),
    CrossEntropy,
}

impl LossKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LossKind::PNorm(p) if !(p > 1.0 && p.is_finite()) => {
                Err(SheafError::Config(format!("p-norm loss needs p > 1, got {p}")))
            }
            LossKind::Huber(t) if !(t > 0.0 && t.is_finite()) => {
                Err(SheafError::Config(format!("Huber loss needs τ > 0, got {t}")))
            }
            _ => Ok(()),
        }
    }

    /// Also checks that cross-entropy is paired with a probability output.
    pub fn validate_for(&self, phi: OutputActivation) -> Result<()> {
        self.validate()?;
        if *self == LossKind::CrossEntropy
            && !matches!(phi, OutputActivation::Softmax | OutputActivation::Sigmoid)
        {
            return Err(SheafError::Config(format!(
                "cross-entropy requires a softmax or sigmoid output, got {phi}"
            )));
        }
        Ok(())
    }

    /// Componentwise `∇f(d)`; `sign(0) = 0` for the L1 subgradient.
    pub fn gradient(&self, d: &[f64]) -> Result<Vec<f64>> {
        self.validate()?;
        let sign = |v: f64| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        };
        Ok(match *self {
            LossKind::Squared => d.to_vec(),
            LossKind::L1 => d.iter().map(|&v| sign(v)).collect(),
            LossKind::PNorm(p) => d
                .iter()
                .map(|&v| if v == 0.0 { 0.0 } else { v.abs().powf(p - 2.0) * v })
                .collect(),
            LossKind::Huber(t) => d.iter().map(|&v| v.clamp(-t, t)).collect(),
            LossKind::CrossEntropy => {
                return Err(SheafError::Config(
                    "cross-entropy has no discrepancy gradient; use the output force".into(),
                ))
            }
        })
    }

    /// `f(d)` for the discrepancy losses.
    pub fn potential(&self, d: &[f64]) -> Result<f64> {
        self.validate()?;
        Ok(match *self {
            LossKind::Squared => 0.5 * d.iter().map(|v| v * v).sum::<f64>(),
            LossKind::L1 => d.iter().map(|v| v.abs()).sum(),
            LossKind::PNorm(p) => d.iter().map(|v| v.abs().powf(p)).sum::<f64>() / p,
            LossKind::Huber(t) => d
                .iter()
                .map(|v| {
                    let a = v.abs();
                    if a <= t {
                        0.5 * v * v
                    } else {
                        t * (a - 0.5 * t)
                    }
                })
                .sum(),
            LossKind::CrossEntropy => {
                return Err(SheafError::Config(
                    "cross-entropy is not a discrepancy potential".into(),
                ))
            }
        })
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::Squared => f.write_str("squared"),
            LossKind::L1 => f.write_str("l1"),
            LossKind::PNorm(p) => write!(f, "pnorm:{p}"),
            LossKind::Huber(t) => write!(f, "huber:{t}"),
            LossKind::CrossEntropy => f.write_str("cross_entropy"),
        }
    }
}

impl FromStr for LossKind {
    type Err = SheafError;

    /// `squared`, `l1`, `pnorm:<p>`, `huber:<τ>`, `cross_entropy`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let param = |a: Option<&str>| -> Result<f64> {
            a.ok_or_else(|| SheafError::Config(format!("loss {name} needs a parameter")))?
                .parse::<f64>()
                .map_err(|e| SheafError::Config(format!("bad loss parameter: {e}")))
        };
        let kind = match name {
            "squared" => LossKind::Squared,
            "l1" => LossKind::L1,
            "pnorm" => LossKind::PNorm(param(arg)?),
            "huber" => LossKind::Huber(param(arg)?),
            "cross_entropy" | "ce" => LossKind::CrossEntropy,
            other => return Err(SheafError::Config(format!("unknown loss {other:?}"))),
        };
        kind.validate()?;
        Ok(kind)
    }
}

pub fn loss_gradient(d: &[f64], kind: &LossKind) -> Result<Vec<f64>> {
    kind.gradient(d)
}

/// Force on `z⁽ᵏ⁺¹⁾` from the output potential with the output clamped to `y`.
pub fn output_force(z: &[f64], y: &[f64], phi: OutputActivation, loss: &LossKind) -> Result<Vec<f64>> {
    loss.validate_for(phi)?;
    if z.len() != y.len() {
        return Err(dim_err("output and target lengths differ"));
    }
    let p = phi.apply(z);
    let d: Vec<f64> = p.iter().zip(y).map(|(a, b)| a - b).collect();
    match loss {
        LossKind::CrossEntropy => Ok(d),
        other => {
            let g = other.gradient(&d)?;
            Ok(phi.jacobian_t_mul(z, &g))
        }
    }
}

/// `−α[(z − W̄ā) + force]` for the clamped output pre-activation.
pub fn output_training_velocity(
    z_out: &[f64],
    y: &[f64],
    weight_residual: &[f64],
    phi: OutputActivation,
    loss: &LossKind,
    alpha: f64,
) -> Result<Vec<f64>> {
    if weight_residual.len() != z_out.len() {
        return Err(dim_err("weight residual length differs from output"));
    }
    let f = output_force(z_out, y, phi, loss)?;
    Ok(weight_residual
        .iter()
        .zip(f)
        .map(|(r, f)| -alpha * (r + f))
        .collect())
}

/// Velocity of one layer's weight matrix and bias vector.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightDelta {
    pub dw: Array2<f64>,
    pub db: Array1<f64>,
}

/// `ΔW = −β(W̄ā − z)aᵀ`, `Δb = −β(W̄ā − z)` for a single cochain.
pub fn weight_velocity(sheaf: &NeuralSheaf, x: &Cochain, beta: f64) -> Result<Vec<WeightDelta>> {
    sheaf.check_cochain(x)?;
    let mut edges = vec![0.0; sheaf.edge_dim()];
    sheaf.edge_values_into(&x.values, None, &mut edges);
    let dims = &sheaf.spec.layer_dims;
    let mut out = Vec::with_capacity(dims.len() - 1);
    for e in &sheaf.edges {
        if let EdgeKind::Weight(l) = e.kind {
            let r = &edges[e.offset..e.offset + e.dim];
            let abar = x.block(e.tail);
            let nin = dims[l - 1];
            let dw = Array2::from_shape_fn((e.dim, nin), |(i, j)| beta * r[i] * abar[j]);
            let db = Array1::from_shape_fn(e.dim, |i| beta * r[i] * abar[nin + i]);
            out.push(WeightDelta { dw, db });
        }
    }
    Ok(out)
}

/// Residual blocks of a batch cochain.
struct BatchResiduals {
    /// `Z⁽ℓ⁾ − W̄⁽ℓ⁾Ā⁽ℓ⁻¹⁾`, `ℓ = 1…k+1`.
    weight: Vec<Array2<f64>>,
    /// `A⁽ℓ⁾ − MASK⁽ℓ⁾ ⊙ Z⁽ℓ⁾`, `ℓ = 1…k`.
    activation: Vec<Array2<f64>>,
    masks: Vec<Array2<f64>>,
}

fn check_batch(sheaf: &NeuralSheaf, bx: &BatchCochain) -> Result<()> {
    if !sheaf.pins.is_empty() {
        return Err(SheafError::Unsupported(
            "batch dynamics need an unpinned sheaf".into(),
        ));
    }
    if bx.blocks.len() != sheaf.vertices.len() {
        return Err(dim_err("batch cochain has the wrong number of blocks"));
    }
    let m = bx.batch_size();
    for (b, v) in bx.blocks.iter().zip(&sheaf.vertices) {
        if b.dim() != (v.dim, m) {
            return Err(dim_err(format!(
                "batch block has shape {:?}, expected {:?}",
                b.dim(),
                (v.dim, m)
            )));
        }
    }
    Ok(())
}

fn post_block(bx: &BatchCochain, l: usize) -> &Array2<f64> {
    if l == 0 {
        &bx.blocks[0]
    } else {
        &bx.blocks[2 * l]
    }
}

fn batch_residuals(spec: &NetworkSpec, bx: &BatchCochain) -> BatchResiduals {
    let dims = &spec.layer_dims;
    let k = spec.hidden_layers();
    let mut weight = Vec::with_capacity(k + 1);
    for l in 1..=k + 1 {
        let prev = post_block(bx, l - 1);
        let nin = dims[l - 1];
        let a = prev.slice(s![..nin, ..]);
        let ones = prev.slice(s![nin.., ..]);
        let mut r = bx.blocks[2 * l - 1].clone();
        ndarray::linalg::general_mat_mul(-1.0, &spec.weights[l - 1], &a, 1.0, &mut r);
        Zip::from(&mut r)
            .and(&ones)
            .and_broadcast(&spec.biases[l - 1].view().insert_axis(Axis(1)))
            .for_each(|r, &o, &b| *r -= b * o);
        weight.push(r);
    }
    let mut activation = Vec::with_capacity(k);
    let mut masks = Vec::with_capacity(k);
    for l in 1..=k {
        let z = &bx.blocks[2 * l - 1];
        let mask = z.mapv(|v| if v >= 0.0 { 1.0 } else { 0.0 });
        let a = bx.blocks[2 * l].slice(s![..dims[l], ..]);
        let r = &a - &(&mask * z);
        activation.push(r);
        masks.push(mask);
    }
    BatchResiduals {
        weight,
        activation,
        masks,
    }
}

/// Gradient blocks of the linear edges (weight and activation); the output
/// edge is handled by the caller.
fn linear_gradient(spec: &NetworkSpec, bx: &BatchCochain, res: &BatchResiduals) -> Vec<Array2<f64>> {
    let dims = &spec.layer_dims;
    let k = spec.hidden_layers();
    let mut g: Vec<Array2<f64>> = bx.blocks.iter().map(|b| Array2::zeros(b.dim())).collect();
    for l in 1..=k + 1 {
        g[2 * l - 1] += &res.weight[l - 1];
        if l > 1 {
            let n = dims[l - 1];
            let mut target = g[2 * (l - 1)].slice_mut(s![..n, ..]);
            ndarray::linalg::general_mat_mul(
                -1.0,
                &spec.weights[l - 1].t(),
                &res.weight[l - 1],
                1.0,
                &mut target,
            );
        }
    }
    for l in 1..=k {
        let n = dims[l];
        g[2 * l]
            .slice_mut(s![..n, ..])
            .zip_mut_with(&res.activation[l - 1], |g, r| *g += r);
        Zip::from(&mut g[2 * l - 1])
            .and(&res.masks[l - 1])
            .and(&res.activation[l - 1])
            .for_each(|g, &m, &r| *g -= m * r);
    }
    g
}

/// Negate, scale and zero the fixed blocks (input stalk and ones rows).
fn finish_velocity(spec: &NetworkSpec, mut g: Vec<Array2<f64>>, alpha: f64) -> Vec<Array2<f64>> {
    let dims = &spec.layer_dims;
    g[0].fill(0.0);
    for l in 1..=spec.hidden_layers() {
        g[2 * l].slice_mut(s![dims[l].., ..]).fill(0.0);
    }
    for b in g.iter_mut() {
        b.mapv_inplace(|v| -alpha * v);
    }
    g
}

/// Batch version of the free velocity: one independent sheaf per column,
/// each with its own mask.
pub fn batch_free_velocity(sheaf: &NeuralSheaf, bx: &BatchCochain, alpha: f64) -> Result<BatchCochain> {
    check_batch(sheaf, bx)?;
    let spec = &sheaf.spec;
    let k = spec.hidden_layers();
    let res = batch_residuals(spec, bx);
    let mut g = linear_gradient(spec, bx, &res);
    let (zi, yi) = (2 * k + 1, 2 * k + 2);
    let eliminated = sheaf.output_mode() == OutputMode::Eliminated;
    if !eliminated {
        let phi = spec.output_activation;
        for m in 0..bx.batch_size() {
            let z = bx.blocks[zi].column(m).to_vec();
            let p = phi.apply(&z);
            let r: Vec<f64> = bx.blocks[yi]
                .column(m)
                .iter()
                .zip(&p)
                .map(|(y, p)| y - p)
                .collect();
            let jt = phi.jacobian_t_mul(&z, &r);
            for i in 0..r.len() {
                g[yi][[i, m]] += r[i];
                g[zi][[i, m]] -= jt[i];
            }
        }
    }
    let mut v = finish_velocity(spec, g, alpha);
    if eliminated {
        let vz = v[zi].clone();
        v[yi].assign(&vz);
    }
    Ok(BatchCochain { blocks: v })
}

/// Training velocity: the output block holds the targets and stays fixed;
/// the output potential acts on `Z⁽ᵏ⁺¹⁾`.
pub fn batch_training_velocity(
    sheaf: &NeuralSheaf,
    bx: &BatchCochain,
    loss: &LossKind,
    alpha: f64,
) -> Result<BatchCochain> {
    check_batch(sheaf, bx)?;
    let spec = &sheaf.spec;
    let k = spec.hidden_layers();
    let res = batch_residuals(spec, bx);
    let mut g = linear_gradient(spec, bx, &res);
    add_output_force(spec, bx, loss, &mut g[2 * k + 1])?;
    let mut v = finish_velocity(spec, g, alpha);
    v[2 * k + 2].fill(0.0);
    Ok(BatchCochain { blocks: v })
}

fn add_output_force(
    spec: &NetworkSpec,
    bx: &BatchCochain,
    loss: &LossKind,
    gz: &mut Array2<f64>,
) -> Result<()> {
    let k = spec.hidden_layers();
    let phi = spec.output_activation;
    let z = &bx.blocks[2 * k + 1];
    let y = &bx.blocks[2 * k + 2];
    if phi.is_identity() && *loss == LossKind::Squared {
        *gz += &(z - y);
        return Ok(());
    }
    for m in 0..bx.batch_size() {
        let f = output_force(&z.column(m).to_vec(), &y.column(m).to_vec(), phi, loss)?;
        for (i, fi) in f.into_iter().enumerate() {
            gz[[i, m]] += fi;
        }
    }
    Ok(())
}

fn weight_deltas_from(
    spec: &NetworkSpec,
    bx: &BatchCochain,
    res: &BatchResiduals,
    beta: f64,
) -> Vec<WeightDelta> {
    let dims = &spec.layer_dims;
    (1..=spec.hidden_layers() + 1)
        .map(|l| {
            let prev = post_block(bx, l - 1);
            let nin = dims[l - 1];
            let r = &res.weight[l - 1];
            let mut dw = Array2::zeros((dims[l], nin));
            ndarray::linalg::general_mat_mul(beta, r, &prev.slice(s![..nin, ..]).t(), 0.0, &mut dw);
            let db = (r * &prev.slice(s![nin.., ..])).sum_axis(Axis(1)) * beta;
            WeightDelta { dw, db }
        })
        .collect()
}

/// Weight velocity summed over the columns of a batch cochain.
pub fn batch_weight_velocity(sheaf: &NeuralSheaf, bx: &BatchCochain, beta: f64) -> Result<Vec<WeightDelta>> {
    check_batch(sheaf, bx)?;
    let res = batch_residuals(&sheaf.spec, bx);
    Ok(weight_deltas_from(&sheaf.spec, bx, &res, beta))
}

/// Per-edge discord of a batch cochain with clamped output, summed over
/// columns. The output edge measures `φ(Z⁽ᵏ⁺¹⁾) − Y`.
pub fn batch_discord(sheaf: &NeuralSheaf, bx: &BatchCochain) -> Result<Discord> {
    check_batch(sheaf, bx)?;
    let spec = &sheaf.spec;
    let k = spec.hidden_layers();
    let res = batch_residuals(spec, bx);
    let sq = |a: &Array2<f64>| a.iter().map(|v| v * v).sum::<f64>();
    let mut per_edge = Vec::with_capacity(sheaf.edges.len());
    for e in &sheaf.edges {
        per_edge.push(match e.kind {
            EdgeKind::Weight(l) => sq(&res.weight[l - 1]),
            EdgeKind::Activation(l) => sq(&res.activation[l - 1]),
            EdgeKind::Output => {
                let phi = spec.output_activation;
                let z = &bx.blocks[2 * k + 1];
                let y = &bx.blocks[2 * k + 2];
                (0..bx.batch_size())
                    .map(|m| {
                        let p = phi.apply(&z.column(m).to_vec());
                        p.iter()
                            .zip(y.column(m))
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                    })
                    .sum()
            }
            EdgeKind::Pin(_) => 0.0,
        });
    }
    Ok(Discord {
        total: per_edge.iter().sum(),
        per_edge,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Standard normal free coordinates.
    Random,
    /// Per-sample forward traces.
    ForwardPass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    Zero,
    Initial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightInit {
    /// Normal weights with std `sqrt(2 / fan_in)`, zero biases.
    He,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    /// `None` means `1 / n_train`.
    pub beta: Option<f64>,
    pub dt: f64,
    pub steps: usize,
    pub loss: LossKind,
    pub lambda: f64,
    pub mu: f64,
    pub anchors: AnchorMode,
    pub init_mode: InitMode,
    pub weight_init: WeightInit,
    pub output_activation: OutputActivation,
    pub seed: u64,
    /// Train on the first `batch_size` samples; `None` uses all of them.
    pub batch_size: Option<usize>,
    pub record_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            beta: None,
            dt: 0.005,
            steps: 100_000,
            loss: LossKind::Squared,
            lambda: 0.0,
            mu: 0.0,
            anchors: AnchorMode::Zero,
            init_mode: InitMode::Random,
            weight_init: WeightInit::He,
            output_activation: OutputActivation::Identity,
            seed: 0,
            batch_size: None,
            record_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f64, strict: bool| {
            let ok = v.is_finite() && if strict { v > 0.0 } else { v >= 0.0 };
            if ok {
                Ok(())
            } else {
                Err(SheafError::Config(format!("{name} out of range: {v}")))
            }
        };
        check("alpha", self.alpha, true)?;
        check("dt", self.dt, true)?;
        if let Some(b) = self.beta {
            check("beta", b, false)?;
        }
        check("lambda", self.lambda, false)?;
        check("mu", self.mu, false)?;
        if self.record_every == 0 {
            return Err(SheafError::Config("record_every must be at least 1".into()));
        }
        if self.batch_size == Some(0) {
            return Err(SheafError::Config("batch_size must be at least 1".into()));
        }
        self.loss.validate_for(self.output_activation)
    }
}

pub fn default_beta(n_train: usize) -> Result<f64> {
    if n_train == 0 {
        return Err(SheafError::Domain("n_train must be at least 1".into()));
    }
    Ok(1.0 / n_train as f64)
}

/// `β·B_ω·‖δ₀ω₀‖ / (α·λ_eff)`.
pub fn stagnation_bound(
    beta: f64,
    b_omega: f64,
    initial_disagreement: f64,
    alpha: f64,
    lambda_eff: f64,
) -> Result<f64> {
    if !(lambda_eff > 0.0) {
        return Err(SheafError::Domain(format!(
            "λ_eff must be positive, got {lambda_eff}"
        )));
    }
    if !(alpha > 0.0) {
        return Err(SheafError::Domain(format!("α must be positive, got {alpha}")));
    }
    Ok(beta * b_omega * initial_disagreement / (alpha * lambda_eff))
}

/// Reference point for the regularization terms.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchors {
    pub cochain: BatchCochain,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Anchors {
    pub fn zero(sheaf: &NeuralSheaf, m: usize) -> Anchors {
        Anchors {
            cochain: BatchCochain {
                blocks: sheaf.vertices.iter().map(|v| Array2::zeros((v.dim, m))).collect(),
            },
            weights: sheaf
                .spec
                .weights
                .iter()
                .map(|w| Array2::zeros(w.dim()))
                .collect(),
            biases: sheaf.spec.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
        }
    }

    pub fn current(state: &TrainState) -> Anchors {
        Anchors {
            cochain: state.cochain.clone(),
            weights: state.sheaf.spec.weights.clone(),
            biases: state.sheaf.spec.biases.clone(),
        }
    }
}

/// Joint training state: the sheaf (whose spec holds the evolving weights)
/// and the batch cochain whose output block holds the targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub sheaf: NeuralSheaf,
    pub cochain: BatchCochain,
}

impl TrainState {
    pub fn new(
        spec: NetworkSpec,
        x: &Array2<f64>,
        y: &Array2<f64>,
        init: InitMode,
        seed: u64,
    ) -> Result<Self> {
        let sheaf = build_sheaf(&spec)?;
        let mut cochain = match init {
            InitMode::ForwardPass => BatchCochain::forward(&sheaf, x.view(), Some(y.view()))?,
            InitMode::Random => BatchCochain::from_inputs(&sheaf, x.view(), Some(y.view()))?,
        };
        if init == InitMode::Random {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dims = &spec.layer_dims;
            let k = spec.hidden_layers();
            for l in 1..=k + 1 {
                cochain.blocks[2 * l - 1].mapv_inplace(|_| StandardNormal.sample(&mut rng));
                if l <= k {
                    cochain.blocks[2 * l]
                        .slice_mut(s![..dims[l], ..])
                        .mapv_inplace(|_| StandardNormal.sample(&mut rng));
                }
            }
        }
        Ok(TrainState { sheaf, cochain })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.sheaf.spec
    }
}

/// One simultaneous Euler step of cochain and weights.
pub fn joint_step(state: &mut TrainState, config: &TrainConfig, beta: f64, anchors: &Anchors) -> Result<()> {
    let sheaf = &state.sheaf;
    let spec = &sheaf.spec;
    let bx = &state.cochain;
    check_batch(sheaf, bx)?;
    let k = spec.hidden_layers();
    let res = batch_residuals(spec, bx);
    let mut g = linear_gradient(spec, bx, &res);
    add_output_force(spec, bx, &config.loss, &mut g[2 * k + 1])?;
    if config.lambda > 0.0 {
        for (gb, (b, a)) in g.iter_mut().zip(bx.blocks.iter().zip(&anchors.cochain.blocks)) {
            Zip::from(gb)
                .and(b)
                .and(a)
                .for_each(|g, &b, &a| *g += config.lambda * (b - a));
        }
    }
    let mut v = finish_velocity(spec, g, config.alpha);
    v[2 * k + 2].fill(0.0);
    let mut deltas = weight_deltas_from(spec, bx, &res, beta);
    if config.mu > 0.0 {
        for (l, d) in deltas.iter_mut().enumerate() {
            d.dw.scaled_add(-beta * config.mu, &(&spec.weights[l] - &anchors.weights[l]));
            d.db.scaled_add(-beta * config.mu, &(&spec.biases[l] - &anchors.biases[l]));
        }
    }
    for (b, vb) in state.cochain.blocks.iter_mut().zip(&v) {
        b.scaled_add(config.dt, vb);
    }
    let spec = &mut state.sheaf.spec;
    for (l, d) in deltas.iter().enumerate() {
        spec.weights[l].scaled_add(config.dt, &d.dw);
        spec.biases[l].scaled_add(config.dt, &d.db);
    }
    Ok(())
}

fn state_diverged(state: &TrainState) -> bool {
    let spec = state.spec();
    let bad = |v: &f64| !(v.abs() <= DIVERGENCE_LIMIT);
    state.cochain.blocks.iter().any(|b| b.iter().any(bad))
        || spec.weights.iter().any(|w| w.iter().any(bad))
        || spec.biases.iter().any(|b| b.iter().any(bad))
}

/// Loss, discord and weight-norm checkpoints.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub steps: Vec<usize>,
    pub train_loss: Vec<f64>,
    pub test_loss: Vec<Option<f64>>,
    pub train_accuracy: Vec<Option<f64>>,
    pub test_accuracy: Vec<Option<f64>>,
    pub discord_total: Vec<f64>,
    pub discord_per_edge: Vec<Vec<f64>>,
    /// Empty when the trainer has no cochain (gradient-descent baseline).
    pub edge_names: Vec<String>,
    pub weight_norms: Vec<Vec<f64>>,
}

impl TrainHistory {
    pub fn new(_spec: &NetworkSpec, edge_names: Vec<String>) -> Self {
        TrainHistory {
            edge_names,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn record_model(
        &mut self,
        step: usize,
        spec: &NetworkSpec,
        train: &Dataset,
        test: Option<&Dataset>,
        discord: Option<Discord>,
    ) -> Result<()> {
        let tr = task_metrics(spec, train)?;
        let te = test.map(|t| task_metrics(spec, t)).transpose()?;
        self.steps.push(step);
        self.train_loss.push(tr.loss);
        self.train_accuracy.push(tr.accuracy);
        self.test_loss.push(te.map(|m| m.loss));
        self.test_accuracy.push(te.and_then(|m| m.accuracy));
        if let Some(d) = discord {
            self.discord_total.push(d.total);
            self.discord_per_edge.push(d.per_edge);
        }
        self.weight_norms.push(
            spec.weights
                .iter()
                .map(|w| w.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect(),
        );
        Ok(())
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.train_loss.last().copied()
    }

    pub fn final_test_loss(&self) -> Option<f64> {
        self.test_loss.last().copied().flatten()
    }

    /// Columns `step, train_loss, test_loss, [train_accuracy, test_accuracy,]
    /// [discord_total, discord_edge_<name>…,] wnorm_layer_<ℓ>…`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let with_acc = self.train_accuracy.iter().any(Option::is_some);
        let with_discord = !self.edge_names.is_empty();
        let n_layers = self.weight_norms.first().map_or(0, |w| w.len());
        let mut header: Vec<String> = vec!["step".into(), "train_loss".into(), "test_loss".into()];
        if with_acc {
            header.push("train_accuracy".into());
            header.push("test_accuracy".into());
        }
        if with_discord {
            header.push("discord_total".into());
            header.extend(self.edge_names.iter().map(|n| format!("discord_edge_{n}")));
        }
        header.extend((1..=n_layers).map(|l| format!("wnorm_layer_{l}")));
        wr.write_record(&header).map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in 0..self.steps.len() {
            let mut row = vec![
                self.steps[r].to_string(),
                self.train_loss[r].to_string(),
                opt(self.test_loss[r]),
            ];
            if with_acc {
                row.push(opt(self.train_accuracy[r]));
                row.push(opt(self.test_accuracy[r]));
            }
            if with_discord {
                row.push(self.discord_total[r].to_string());
                row.extend(self.discord_per_edge[r].iter().map(f64::to_string));
            }
            row.extend(self.weight_norms[r].iter().map(f64::to_string));
            wr.write_record(&row).map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Outcome of a training run that stopped early on divergence.
#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub step: usize,
    pub history: TrainHistory,
}

/// Initial He network and training state for `arch`, as `train` builds them.
pub fn initial_state(arch: &[usize], data: &Dataset, config: &TrainConfig) -> Result<TrainState> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let spec = match config.weight_init {
        WeightInit::He => NetworkSpec::he_init(arch, config.output_activation, &mut rng)?,
    };
    if data.x.nrows() != spec.input_dim() || data.y.nrows() != spec.output_dim() {
        return Err(dim_err(format!(
            "architecture maps {} → {}, dataset has {} → {}",
            spec.input_dim(),
            spec.output_dim(),
            data.x.nrows(),
            data.y.nrows()
        )));
    }
    let cochain_seed = config.seed.wrapping_add(1);
    TrainState::new(spec, &data.x, &data.y, config.init_mode, cochain_seed)
}

/// Full-batch joint training. Returns the trained network and its history;
/// divergence is reported as [`SheafError::Diverged`].
pub fn train(
    arch: &[usize],
    train_data: &Dataset,
    test_data: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<(NetworkSpec, TrainHistory)> {
    match train_detailed(arch, train_data, test_data, config)? {
        Ok(done) => Ok(done),
        Err(div) => Err(SheafError::Diverged { step: div.step }),
    }
}

/// Like [`train`], but a divergence keeps the partial history.
pub fn train_detailed(
    arch: &[usize],
    train_data: &Dataset,
    test_data: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<std::result::Result<(NetworkSpec, TrainHistory), Divergence>> {
    if train_data.is_empty() {
        return Err(SheafError::InvalidInput("training set is empty".into()));
    }
    let data = match config.batch_size {
        Some(m) => train_data.head(m),
        None => train_data.clone(),
    };
    let mut state = initial_state(arch, &data, config)?;
    let beta = match config.beta {
        Some(b) => b,
        None => default_beta(data.len())?,
    };
    let anchors = match config.anchors {
        AnchorMode::Zero => Anchors::zero(&state.sheaf, data.len()),
        AnchorMode::Initial => Anchors::current(&state),
    };
    let mut history = TrainHistory::new(state.spec(), state.sheaf.edge_names());
    for step in 0..=config.steps {
        if config.steps > 0 && (step % config.record_every == 0 || step == config.steps) {
            let d = batch_discord(&state.sheaf, &state.cochain)?;
            history.record_model(step, state.spec(), &data, test_data, Some(d))?;
        }
        if step == config.steps {
            break;
        }
        joint_step(&mut state, config, beta, &anchors)?;
        if state_diverged(&state) {
            return Ok(Err(Divergence {
                step: step + 1,
                history,
            }));
        }
    }
    Ok(Ok((state.sheaf.spec, history)))
}

/// Relax the cochain with the weights frozen until the sup-norm of the
/// training velocity drops below `tol`. Returns the number of steps taken,
/// or `None` if `max_steps` was exhausted.
pub fn settle_cochain(
    state: &mut TrainState,
    config: &TrainConfig,
    tol: f64,
    max_steps: usize,
) -> Result<Option<usize>> {
    for step in 0..=max_steps {
        let v = batch_training_velocity(&state.sheaf, &state.cochain, &config.loss, config.alpha)?;
        let sup = v
            .blocks
            .iter()
            .flat_map(|b| b.iter())
            .fold(0.0f64, |m, x| m.max(x.abs()));
        if sup < tol {
            return Ok(Some(step));
        }
        if step == max_steps {
            break;
        }
        for (b, vb) in state.cochain.blocks.iter_mut().zip(&v.blocks) {
            b.scaled_add(config.dt, vb);
        }
        if state_diverged(state) {
            return Err(SheafError::Diverged { step: step + 1 });
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolishReport {
    /// Pre-activations clamped to exactly zero (sliding at the ReLU kink).
    pub sliding: usize,
    /// Clamped coordinates whose one-sided velocities do not both point at
    /// the kink, so that zero is not a sliding equilibrium for them.
    pub non_sliding: usize,
    /// Sup-norm of the velocity over the non-sliding coordinates afterwards.
    pub residual_velocity: f64,
}

/// Replace a near-equilibrium cochain by the exact equilibrium of its
/// frozen activation pattern. Pre-activations with `|z| < slide_eps` are
/// treated as sliding and clamped to zero, where both ReLU branches agree.
/// Needs the linear output edge (identity output, squared loss).
pub fn polish_equilibrium(state: &mut TrainState, slide_eps: f64) -> Result<PolishReport> {
    let spec = state.sheaf.spec.clone();
    if !spec.output_activation.is_identity() {
        return Err(SheafError::Unsupported(
            "polishing needs an identity output".into(),
        ));
    }
    check_batch(&state.sheaf, &state.cochain)?;
    let k = spec.hidden_layers();
    let out_dim = spec.output_dim();
    let mut sliding = 0;
    let mut non_sliding = 0;
    let mut worst: f64 = 0.0;
    for m in 0..state.cochain.batch_size() {
        let y: Vec<f64> = state.cochain.blocks[2 * k + 2].column(m).to_vec();
        let pinned = NeuralSheaf::with_pins(
            spec.clone(),
            vec![PinSpec::hard(PinLayer::Output, (0..out_dim).collect(), y)],
        )?;
        let mut col = state.cochain.column(&pinned, m);
        let pattern = pinned.pattern_of(&col);
        let mut clamped = Vec::new();
        for l in 1..=k {
            let v = pinned.pre_vertex(l);
            for j in 0..spec.layer_dims[l] {
                let i = col.index(v, j);
                if col.values[i].abs() < slide_eps {
                    col.values[i] = 0.0;
                    clamped.push(i);
                }
            }
        }
        sliding += clamped.len();
        let free = pinned.free_indices();
        let lap = restricted_laplacian(&pinned, &pattern, LaplacianForm::Full)?;
        let keep: Vec<usize> = (0..free.len())
            .filter(|&p| clamped.binary_search(&free[p]).is_err())
            .collect();
        let v = free_velocity_with_pattern(&pinned, &col, 1.0, &pattern)?;
        let lkk = Array2::from_shape_fn((keep.len(), keep.len()), |(a, b)| lap[[keep[a], keep[b]]]);
        let rhs: Vec<f64> = keep.iter().map(|&p| v.values[free[p]]).collect();
        let delta = Lu::factor(&lkk)?.solve(&rhs)?;
        for (&p, d) in keep.iter().zip(delta) {
            col.values[free[p]] += d;
        }
        let after = free_velocity_with_pattern(&pinned, &col, 1.0, &pattern)?;
        non_sliding += count_non_sliding(&pinned, &col, &clamped);
        for &p in &keep {
            worst = worst.max(after.values[free[p]].abs());
        }
        for (b, block) in state.cochain.blocks.iter_mut().enumerate() {
            block
                .column_mut(m)
                .assign(&ndarray::ArrayView1::from(col.block(b)));
        }
        if pinned
            .pattern_of(&col)
            .masks
            .iter()
            .flatten()
            .zip(pattern.masks.iter().flatten())
            .zip(clamped_mask(&pinned, &col, &clamped))
            .any(|((a, b), c)| a != b && !c)
        {
            return Err(SheafError::Domain(format!(
                "polished column {m} left its activation region; run the dynamics longer first"
            )));
        }
    }
    Ok(PolishReport {
        sliding,
        non_sliding,
        residual_velocity: worst,
    })
}

/// A clamped `z_j = 0` slides when `p = (W̄ā)_j ≥ 0` pushes it up from the
/// inactive side and `p + a_j ≤ 0` pushes it down from the active side.
fn count_non_sliding(sheaf: &NeuralSheaf, c: &Cochain, clamped: &[usize]) -> usize {
    const TOL: f64 = 1e-12;
    let spec = &sheaf.spec;
    let dims = &spec.layer_dims;
    let mut bad = 0;
    for l in 1..=sheaf.hidden_layers() {
        let prev = c.block(if l == 1 { 0 } else { sheaf.post_vertex(l - 1) });
        let post = c.block(sheaf.post_vertex(l));
        let v = sheaf.pre_vertex(l);
        let nin = dims[l - 1];
        for j in 0..dims[l] {
            if clamped.binary_search(&c.index(v, j)).is_err() {
                continue;
            }
            let mut p = spec.biases[l - 1][j] * prev[nin + j];
            for i in 0..nin {
                p += spec.weights[l - 1][[j, i]] * prev[i];
            }
            if !(p >= -TOL && p + post[j] <= TOL) {
                bad += 1;
            }
        }
    }
    bad
}

/// Per hidden pre-activation: whether its flat index was clamped.
fn clamped_mask(sheaf: &NeuralSheaf, c: &Cochain, clamped: &[usize]) -> Vec<bool> {
    let mut out = Vec::new();
    for l in 1..=sheaf.hidden_layers() {
        let v = sheaf.pre_vertex(l);
        for j in 0..sheaf.spec.layer_dims[l] {
            out.push(clamped.binary_search(&c.index(v, j)).is_ok());
        }
    }
    out
}

/// Train and also return the final state (cochain equilibrium included).
pub fn train_state(arch: &[usize], train_data: &Dataset, config: &TrainConfig) -> Result<TrainState> {
    let data = match config.batch_size {
        Some(m) => train_data.head(m),
        None => train_data.clone(),
    };
    let mut state = initial_state(arch, &data, config)?;
    let beta = match config.beta {
        Some(b) => b,
        None => default_beta(data.len())?,
    };
    let anchors = match config.anchors {
        AnchorMode::Zero => Anchors::zero(&state.sheaf, data.len()),
        AnchorMode::Initial => Anchors::current(&state),
    };
    for step in 0..config.steps {
        joint_step(&mut state, config, beta, &anchors)?;
        if state_diverged(&state) {
            return Err(SheafError::Diverged { step: step + 1 });
        }
    }
    Ok(state)
}
