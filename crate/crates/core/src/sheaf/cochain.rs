use ndarray::{Array2, ArrayView2, Axis};

use super::NeuralSheaf;
use crate::error::{dim_err, Result};
use crate::network::{extend_activation, relu_pattern, ActivationPattern};

/// A 0-cochain stored flat in vertex path order.
#[derive(Debug, Clone, PartialEq)]
pub struct Cochain {
    pub values: Vec<f64>,
    layout: Vec<(usize, usize)>,
    free_mask: Vec<bool>,
}

impl Cochain {
    pub fn zeros(sheaf: &NeuralSheaf) -> Self {
        Cochain {
            values: vec![0.0; sheaf.dim()],
            layout: sheaf.vertices.iter().map(|v| (v.offset, v.dim)).collect(),
            free_mask: sheaf.free_mask(),
        }
    }

    pub fn from_values(sheaf: &NeuralSheaf, values: Vec<f64>) -> Result<Self> {
        if values.len() != sheaf.dim() {
            return Err(dim_err(format!(
                "cochain has {} coordinates, sheaf has {}",
                values.len(),
                sheaf.dim()
            )));
        }
        let mut c = Cochain::zeros(sheaf);
        c.values = values;
        Ok(c)
    }

    pub fn block(&self, vertex: usize) -> &[f64] {
        let (o, d) = self.layout[vertex];
        &self.values[o..o + d]
    }

    pub fn block_mut(&mut self, vertex: usize) -> &mut [f64] {
        let (o, d) = self.layout[vertex];
        &mut self.values[o..o + d]
    }

    /// Flat index of coordinate `coord` of `vertex`.
    pub fn index(&self, vertex: usize, coord: usize) -> usize {
        let (o, d) = self.layout[vertex];
        assert!(coord < d, "coordinate {coord} outside stalk of dimension {d}");
        o + coord
    }

    pub fn free_mask(&self) -> &[bool] {
        &self.free_mask
    }

    /// `(offset, dim)` per vertex.
    pub fn layout(&self) -> &[(usize, usize)] {
        &self.layout
    }

    pub fn num_blocks(&self) -> usize {
        self.layout.len()
    }

    pub fn free_values(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(&self.free_mask)
            .filter(|(_, &f)| f)
            .map(|(&v, _)| v)
            .collect()
    }

    /// Largest absolute difference over all coordinates.
    pub fn max_abs_diff(&self, other: &Cochain) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// A cochain over `M` samples: one `dim × M` matrix per vertex of an
/// unpinned sheaf.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchCochain {
    pub blocks: Vec<Array2<f64>>,
}

impl BatchCochain {
    /// Boundary data for inputs `x` (`n₀ × M`); free blocks are zero and the
    /// output block holds `y` when given.
    pub fn from_inputs(sheaf: &NeuralSheaf, x: ArrayView2<f64>, y: Option<ArrayView2<f64>>) -> Result<Self> {
        let dims = &sheaf.spec.layer_dims;
        let k = sheaf.hidden_layers();
        if !sheaf.pins.is_empty() {
            return Err(crate::SheafError::Unsupported(
                "batch cochains are defined on unpinned sheaves".into(),
            ));
        }
        if x.nrows() != dims[0] {
            return Err(dim_err(format!(
                "inputs have {} rows, network expects {}",
                x.nrows(),
                dims[0]
            )));
        }
        let m = x.ncols();
        let mut blocks: Vec<Array2<f64>> = sheaf.vertices.iter().map(|v| Array2::zeros((v.dim, m))).collect();
        blocks[0].slice_mut(ndarray::s![..dims[0], ..]).assign(&x);
        blocks[0].slice_mut(ndarray::s![dims[0].., ..]).fill(1.0);
        for l in 1..=k {
            blocks[2 * l].slice_mut(ndarray::s![dims[l].., ..]).fill(1.0);
        }
        if let Some(y) = y {
            if y.dim() != (dims[k + 1], m) {
                return Err(dim_err(format!(
                    "targets have shape {:?}, expected {:?}",
                    y.dim(),
                    (dims[k + 1], m)
                )));
            }
            blocks[2 * k + 2].assign(&y);
        }
        Ok(BatchCochain { blocks })
    }

    /// Per-sample forward traces stacked column-wise; the output block holds
    /// `y` when given and the predictions otherwise.
    pub fn forward(sheaf: &NeuralSheaf, x: ArrayView2<f64>, y: Option<ArrayView2<f64>>) -> Result<Self> {
        let mut bc = BatchCochain::from_inputs(sheaf, x, y)?;
        let spec = &sheaf.spec;
        let k = sheaf.hidden_layers();
        let mut a = x.to_owned();
        for l in 1..=k + 1 {
            let z = spec.weights[l - 1].dot(&a) + spec.biases[l - 1].view().insert_axis(Axis(1));
            bc.blocks[2 * l - 1].assign(&z);
            if l <= k {
                a = z.mapv(|v| if v >= 0.0 { v } else { 0.0 });
                let n = spec.layer_dims[l];
                bc.blocks[2 * l].slice_mut(ndarray::s![..n, ..]).assign(&a);
            } else if y.is_none() {
                for (m, col) in z.columns().into_iter().enumerate() {
                    let yhat = spec.output_activation.apply(&col.to_vec());
                    bc.blocks[2 * k + 2]
                        .column_mut(m)
                        .iter_mut()
                        .zip(yhat)
                        .for_each(|(d, s)| *d = s);
                }
            }
        }
        Ok(bc)
    }

    pub fn batch_size(&self) -> usize {
        self.blocks[0].ncols()
    }

    /// Column `m` as a single-sample cochain on `sheaf`.
    pub fn column(&self, sheaf: &NeuralSheaf, m: usize) -> Cochain {
        let mut c = Cochain::zeros(sheaf);
        for (v, b) in self.blocks.iter().enumerate() {
            c.block_mut(v)
                .iter_mut()
                .zip(b.column(m))
                .for_each(|(d, s)| *d = *s);
        }
        c
    }

    /// Stack single-sample cochains column-wise.
    pub fn from_columns(sheaf: &NeuralSheaf, cols: &[Cochain]) -> Result<Self> {
        if cols.is_empty() {
            return Err(dim_err("batch must have at least one column"));
        }
        let mut blocks: Vec<Array2<f64>> = sheaf
            .vertices
            .iter()
            .map(|v| Array2::zeros((v.dim, cols.len())))
            .collect();
        for (m, c) in cols.iter().enumerate() {
            sheaf.check_cochain(c)?;
            for (v, b) in blocks.iter_mut().enumerate() {
                b.column_mut(m)
                    .iter_mut()
                    .zip(c.block(v))
                    .for_each(|(d, s)| *d = *s);
            }
        }
        Ok(BatchCochain { blocks })
    }

    /// `MASK⁽ℓ⁾` matrices, entry 1 iff `Z⁽ℓ⁾ ≥ 0`.
    pub fn masks(&self, k: usize) -> Vec<Array2<f64>> {
        (1..=k)
            .map(|l| self.blocks[2 * l - 1].mapv(|z| if z >= 0.0 { 1.0 } else { 0.0 }))
            .collect()
    }

    pub fn column_pattern(&self, k: usize, m: usize) -> Result<ActivationPattern> {
        let masks = (1..=k)
            .map(|l| relu_pattern(&self.blocks[2 * l - 1].column(m).to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(ActivationPattern { masks })
    }

    /// Extended activation of column `m` at layer `l` (`l = 0` is the input).
    pub fn extended_activation(&self, sheaf: &NeuralSheaf, l: usize, m: usize) -> Vec<f64> {
        let n = sheaf.spec.layer_dims[l];
        let next = sheaf.spec.layer_dims[l + 1];
        let v = if l == 0 { 0 } else { 2 * l };
        let col = self.blocks[v].column(m);
        extend_activation(col.slice(ndarray::s![..n]), next)
            .expect("next layer width is positive")
            .to_vec()
    }

    pub fn max_abs_diff(&self, other: &BatchCochain) -> f64 {
        self.blocks
            .iter()
            .zip(&other.blocks)
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}
