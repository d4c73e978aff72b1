//! Spectral and discord diagnostics for any network embedded as a sheaf.

use std::io::Write;
use std::ops::Range;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::benchmarks::Dataset;
use crate::diffusion::{csv_err, run_diffusion, DiffusionConfig};
use crate::error::{dim_err, Result, SheafError};
use crate::linalg::{max_asymmetry, symmetric_eigen};
use crate::network::{forward_pass, NetworkSpec, OutputActivation};
use crate::sheaf::{
    build_sheaf, linearized_laplacian, restricted_coordinates, restricted_laplacian, BatchCochain, Cochain,
    LaplacianForm, NeuralSheaf, PinLayer, PinSpec,
};

/// Symmetry tolerance for spectral input.
pub const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockEnergy {
    pub block: String,
    /// Share of the `λ₁` eigenvector.
    pub fiedler: f64,
    /// Share of the `λ_max` eigenvector.
    pub top: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    pub lambda1: f64,
    pub lambda_max: f64,
    pub kappa: f64,
    /// Unit columns matching `eigenvalues`; largest-magnitude entry positive.
    #[serde(skip)]
    pub eigenvectors: Array2<f64>,
    /// Empty unless the matrix came with a block layout.
    pub per_block_energy: Vec<BlockEnergy>,
}

/// Full eigendecomposition of a symmetric matrix.
pub fn spectrum(l: &Array2<f64>) -> Result<SpectrumReport> {
    if l.nrows() != l.ncols() || l.nrows() == 0 {
        return Err(dim_err(format!(
            "spectrum needs a nonempty square matrix, got {:?}",
            l.dim()
        )));
    }
    let asym = max_asymmetry(l);
    if !(asym <= SYMMETRY_TOL) {
        return Err(SheafError::InvalidInput(format!(
            "matrix is not symmetric (max |Lᵢⱼ − Lⱼᵢ| = {asym:e})"
        )));
    }
    let (values, mut vectors) = symmetric_eigen(l)?;
    for mut col in vectors.columns_mut() {
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if pivot < 0.0 {
            col.mapv_inplace(|v| -v);
        }
    }
    let lambda1 = values[0];
    let lambda_max = *values.last().unwrap();
    Ok(SpectrumReport {
        kappa: lambda_max / lambda1,
        lambda1,
        lambda_max,
        eigenvalues: values,
        eigenvectors: vectors,
        per_block_energy: Vec::new(),
    })
}

/// Restricted Laplacian of one input with its row blocks labelled by vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct RestrictedOperator {
    pub matrix: Array2<f64>,
    /// `(name, rows)` in row order: `z1, a1, …, z{k+1}` and `y_hat` when kept.
    pub blocks: Vec<(String, Range<usize>)>,
}

/// Laplacian at the forward-pass pattern of `input`: the reduced form for
/// identity outputs, the full form linearized at the forward output otherwise.
pub fn restricted_operator(spec: &NetworkSpec, input: &[f64]) -> Result<RestrictedOperator> {
    let sheaf = build_sheaf(spec)?;
    let trace = forward_pass(spec, input)?;
    let (matrix, form) = if spec.output_activation.is_identity() {
        (
            restricted_laplacian(&sheaf, &trace.pattern, LaplacianForm::Reduced)?,
            LaplacianForm::Reduced,
        )
    } else {
        let z = trace.z.last().unwrap().to_vec();
        (
            linearized_laplacian(&sheaf, &trace.pattern, &z)?,
            LaplacianForm::Full,
        )
    };
    let coords = restricted_coordinates(&sheaf, form);
    let k = sheaf.hidden_layers();
    let mut blocks = Vec::new();
    let mut names = Vec::new();
    for l in 1..=k + 1 {
        names.push((sheaf.pre_vertex(l), format!("z{l}")));
        if l <= k {
            names.push((sheaf.post_vertex(l), format!("a{l}")));
        }
    }
    names.push((sheaf.output_vertex(), "y_hat".to_string()));
    for (v, name) in names {
        let vert = &sheaf.vertices[v];
        let rows: Vec<usize> = coords
            .iter()
            .enumerate()
            .filter(|(_, &c)| c >= vert.offset && c < vert.offset + vert.dim)
            .map(|(r, _)| r)
            .collect();
        if let (Some(&lo), Some(&hi)) = (rows.first(), rows.last()) {
            blocks.push((name, lo..hi + 1));
        }
    }
    Ok(RestrictedOperator { matrix, blocks })
}

fn block_shares(v: ndarray::ArrayView1<f64>, blocks: &[(String, Range<usize>)]) -> Vec<f64> {
    blocks
        .iter()
        .map(|(_, r)| v.slice(s![r.clone()]).iter().map(|x| x * x).sum())
        .collect()
}

/// Spectrum of the restricted operator with per-block eigenvector energies.
pub fn restricted_spectrum(spec: &NetworkSpec, input: &[f64]) -> Result<SpectrumReport> {
    let op = restricted_operator(spec, input)?;
    let mut report = spectrum(&op.matrix)?;
    let n = report.eigenvalues.len();
    let low = block_shares(report.eigenvectors.column(0), &op.blocks);
    let high = block_shares(report.eigenvectors.column(n - 1), &op.blocks);
    report.per_block_energy = op
        .blocks
        .iter()
        .zip(low.into_iter().zip(high))
        .map(|((name, _), (f, t))| BlockEnergy {
            block: name.clone(),
            fiedler: f,
            top: t,
        })
        .collect();
    Ok(report)
}

pub fn fiedler_block_energy(spec: &NetworkSpec, input: &[f64]) -> Result<Vec<BlockEnergy>> {
    Ok(restricted_spectrum(spec, input)?.per_block_energy)
}

/// Name of the block with the largest Fiedler energy.
pub fn dominant_fiedler_block(energies: &[BlockEnergy]) -> Option<&str> {
    energies
        .iter()
        .max_by(|a, b| a.fiedler.total_cmp(&b.fiedler))
        .map(|e| e.block.as_str())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub median: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl SummaryStats {
    pub fn of(values: &[f64]) -> Result<SummaryStats> {
        if values.is_empty() {
            return Err(SheafError::InvalidInput("no values to summarize".into()));
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        Ok(SummaryStats {
            median,
            mean,
            std: var.sqrt(),
            min: v[0],
            max: v[n - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralSweep {
    pub layer_dims: Vec<usize>,
    pub n_inputs: usize,
    pub seed: u64,
    pub lambda1: SummaryStats,
    pub lambda_max: SummaryStats,
    pub kappa: SummaryStats,
    pub samples: Vec<SpectralSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralSample {
    pub input: Vec<f64>,
    pub lambda1: f64,
    pub lambda_max: f64,
    pub kappa: f64,
}

/// Inputs drawn uniformly from `[-2, 2]^n₀`.
pub fn spectral_sweep(spec: &NetworkSpec, n_inputs: usize, seed: u64) -> Result<SpectralSweep> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Vec<f64>> = (0..n_inputs)
        .map(|_| {
            (0..spec.input_dim())
                .map(|_| rng.random_range(-2.0..=2.0))
                .collect()
        })
        .collect();
    spectral_sweep_inputs(spec, &inputs, seed)
}

/// Spectral statistics at initialization: every sample draws a fresh He
/// network and an input uniform in `[-2, 2]^n₀` from one seeded stream.
pub fn init_spectral_sweep(
    layer_dims: &[usize],
    output_activation: OutputActivation,
    n_samples: usize,
    seed: u64,
) -> Result<SpectralSweep> {
    if n_samples == 0 {
        return Err(SheafError::InvalidInput(
            "spectral sweep needs at least one sample".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let spec = NetworkSpec::he_init(layer_dims, output_activation, &mut rng)?;
        let x: Vec<f64> = (0..layer_dims[0]).map(|_| rng.random_range(-2.0..=2.0)).collect();
        let r = spectrum(&restricted_operator(&spec, &x)?.matrix)?;
        samples.push(SpectralSample {
            input: x,
            lambda1: r.lambda1,
            lambda_max: r.lambda_max,
            kappa: r.kappa,
        });
    }
    summarize(layer_dims.to_vec(), seed, samples)
}

fn summarize(layer_dims: Vec<usize>, seed: u64, samples: Vec<SpectralSample>) -> Result<SpectralSweep> {
    let col = |f: fn(&SpectralSample) -> f64| samples.iter().map(f).collect::<Vec<_>>();
    Ok(SpectralSweep {
        layer_dims,
        n_inputs: samples.len(),
        seed,
        lambda1: SummaryStats::of(&col(|s| s.lambda1))?,
        lambda_max: SummaryStats::of(&col(|s| s.lambda_max))?,
        kappa: SummaryStats::of(&col(|s| s.kappa))?,
        samples,
    })
}

pub fn spectral_sweep_inputs(spec: &NetworkSpec, inputs: &[Vec<f64>], seed: u64) -> Result<SpectralSweep> {
    if inputs.is_empty() {
        return Err(SheafError::InvalidInput(
            "spectral sweep needs at least one input".into(),
        ));
    }
    let mut samples = Vec::with_capacity(inputs.len());
    for x in inputs {
        let op = restricted_operator(spec, x)?;
        let r = spectrum(&op.matrix)?;
        samples.push(SpectralSample {
            input: x.clone(),
            lambda1: r.lambda1,
            lambda_max: r.lambda_max,
            kappa: r.kappa,
        });
    }
    summarize(spec.layer_dims.clone(), seed, samples)
}

/// `‖(δx)_e‖²` per edge, in edge order.
pub fn per_edge_discord(sheaf: &NeuralSheaf, x: &Cochain) -> Result<Vec<(String, f64)>> {
    let d = sheaf.total_discord(x)?;
    Ok(sheaf.edge_names().into_iter().zip(d.per_edge).collect())
}

/// Residuals of one hidden coordinate of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscordRecord {
    pub sample: usize,
    pub layer: usize,
    pub coord: usize,
    pub z: f64,
    /// `(W a + b)_j − z_j`.
    pub weight_residual: f64,
    /// `ReLU(z_j) − a_j`.
    pub relu_residual: f64,
    /// `z_j ≥ 0`.
    pub active: bool,
}

/// One record per (sample, hidden layer, coordinate) of an equilibrium batch.
pub fn residual_scatter(spec: &NetworkSpec, equilibrium: &BatchCochain) -> Result<Vec<DiscordRecord>> {
    let sheaf = build_sheaf(spec)?;
    if equilibrium.blocks.len() != sheaf.vertices.len() {
        return Err(dim_err("equilibrium cochain does not match the network"));
    }
    let dims = &spec.layer_dims;
    let k = spec.hidden_layers();
    let m = equilibrium.batch_size();
    let mut out = Vec::with_capacity(m * dims[1..=k].iter().sum::<usize>());
    for s in 0..m {
        for l in 1..=k {
            let prev = &equilibrium.blocks[if l == 1 { 0 } else { 2 * (l - 1) }];
            let z = &equilibrium.blocks[2 * l - 1];
            let a = &equilibrium.blocks[2 * l];
            let nin = dims[l - 1];
            for j in 0..dims[l] {
                let mut pred = spec.biases[l - 1][j] * prev[[nin + j, s]];
                for i in 0..nin {
                    pred += spec.weights[l - 1][[j, i]] * prev[[i, s]];
                }
                let zj = z[[j, s]];
                out.push(DiscordRecord {
                    sample: s,
                    layer: l,
                    coord: j,
                    z: zj,
                    weight_residual: pred - zj,
                    relu_residual: zj.max(0.0) - a[[j, s]],
                    active: zj >= 0.0,
                });
            }
        }
    }
    Ok(out)
}

pub fn write_scatter_csv<W: Write>(records: &[DiscordRecord], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in records {
        wr.serialize(r).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

/// Hard-pin the output of every sample to its label and diffuse from the
/// forward pass. Non-converged samples are kept and counted.
pub fn pinned_equilibria(
    spec: &NetworkSpec,
    data: &Dataset,
    config: &DiffusionConfig,
) -> Result<(Vec<NeuralSheaf>, Vec<Cochain>, usize)> {
    if data.x.nrows() != spec.input_dim() || data.y.nrows() != spec.output_dim() {
        return Err(dim_err("dataset does not match the network dimensions"));
    }
    let mut cfg = config.clone();
    cfg.record_crossings = false;
    cfg.record_every = cfg.max_steps.max(1);
    let all: Vec<usize> = (0..spec.output_dim()).collect();
    let (mut sheaves, mut states, mut failed) = (Vec::new(), Vec::new(), 0);
    for m in 0..data.len() {
        let x = data.x.column(m).to_vec();
        let y = data.y.column(m).to_vec();
        let sheaf = NeuralSheaf::with_pins(
            spec.clone(),
            vec![PinSpec::hard(PinLayer::Output, all.clone(), y)],
        )?;
        let start = sheaf.forward_cochain(&x)?;
        let traj = run_diffusion(&sheaf, start, &cfg)?;
        if !traj.converged {
            failed += 1;
        }
        states.push(traj.final_cochain);
        sheaves.push(sheaf);
    }
    Ok((sheaves, states, failed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinnedDiscordReport {
    pub edge_names: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub total_mean: f64,
    pub total_std: f64,
    pub n_samples: usize,
    pub non_converged: usize,
}

/// Per-edge discord at the label-pinned equilibria, mean and population std
/// over samples.
pub fn pinned_discord(
    spec: &NetworkSpec,
    data: &Dataset,
    config: &DiffusionConfig,
) -> Result<PinnedDiscordReport> {
    if data.is_empty() {
        return Err(SheafError::InvalidInput(
            "pinned discord needs labelled samples".into(),
        ));
    }
    let (sheaves, states, failed) = pinned_equilibria(spec, data, config)?;
    let mut per_sample = Vec::with_capacity(states.len());
    for (sheaf, c) in sheaves.iter().zip(&states) {
        per_sample.push(sheaf.total_discord(c)?);
    }
    let edge_names = sheaves[0].edge_names();
    let mut mean = Vec::new();
    let mut std = Vec::new();
    for e in 0..edge_names.len() {
        let vals: Vec<f64> = per_sample.iter().map(|d| d.per_edge[e]).collect();
        let s = SummaryStats::of(&vals)?;
        mean.push(s.mean);
        std.push(s.std);
    }
    let totals: Vec<f64> = per_sample.iter().map(|d| d.total).collect();
    let t = SummaryStats::of(&totals)?;
    Ok(PinnedDiscordReport {
        edge_names,
        mean,
        std,
        total_mean: t.mean,
        total_std: t.std,
        n_samples: data.len(),
        non_converged: failed,
    })
}

/// Equilibria from [`pinned_equilibria`] stacked into a batch for
/// [`residual_scatter`].
pub fn pinned_batch(
    spec: &NetworkSpec,
    data: &Dataset,
    config: &DiffusionConfig,
) -> Result<(BatchCochain, usize)> {
    let (sheaves, states, failed) = pinned_equilibria(spec, data, config)?;
    let plain = sheaves[0].without_pins();
    let cols: Vec<Cochain> = states
        .iter()
        .map(|c| Cochain::from_values(&plain, c.values.clone()))
        .collect::<Result<_>>()?;
    Ok((BatchCochain::from_columns(&plain, &cols)?, failed))
}
