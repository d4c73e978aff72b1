//! Dense operators: coboundary, the square free-coordinate block `δ_Ω`,
//! restricted Laplacians and the closed-form harmonic extension.

use ndarray::{s, Array2};

use super::{Cochain, NeuralSheaf, RestrictionMap};
use crate::error::{Result, SheafError};
use crate::linalg::{forward_substitution, Lu};
use crate::network::{extend_weight, ActivationPattern};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaplacianForm {
    /// `δ_Ωᵀ δ_Ω` over every free coordinate, `ŷ` included.
    Full,
    /// `ŷ` eliminated by Schur complement; identity output only.
    Reduced,
}

fn map_matrix(
    sheaf: &NeuralSheaf,
    map: &RestrictionMap,
    pattern: &ActivationPattern,
    output_jacobian: Option<&Array2<f64>>,
) -> Array2<f64> {
    let spec = &sheaf.spec;
    match map {
        RestrictionMap::Identity(n) => Array2::eye(*n),
        RestrictionMap::ExtendedWeight(l) => {
            extend_weight(&spec.weights[l - 1], &spec.biases[l - 1]).expect("validated spec")
        }
        RestrictionMap::Relu(l) => Array2::from_diag(
            &pattern.masks[l - 1]
                .iter()
                .map(|&m| if m { 1.0 } else { 0.0 })
                .collect::<ndarray::Array1<f64>>(),
        ),
        RestrictionMap::Projection { rows, cols } => {
            let mut p = Array2::zeros((*rows, *cols));
            p.slice_mut(s![.., ..*rows]).assign(&Array2::eye(*rows));
            p
        }
        RestrictionMap::OutputActivation(_) => match output_jacobian {
            Some(j) => j.clone(),
            None => Array2::eye(spec.output_dim()),
        },
        RestrictionMap::ScaledSelection { scale, indices, cols } => {
            let mut p = Array2::zeros((indices.len(), *cols));
            for (i, &j) in indices.iter().enumerate() {
                p[[i, j]] = *scale;
            }
            p
        }
        RestrictionMap::ScaledIdentity { scale, dim } => Array2::eye(*dim) * *scale,
    }
}

fn coboundary_with(
    sheaf: &NeuralSheaf,
    pattern: &ActivationPattern,
    output_jacobian: Option<&Array2<f64>>,
) -> Result<Array2<f64>> {
    pattern.check(&sheaf.spec)?;
    let mut d = Array2::zeros((sheaf.edge_dim(), sheaf.dim()));
    for e in &sheaf.edges {
        let t = &sheaf.vertices[e.tail];
        let h = &sheaf.vertices[e.head];
        let tm = map_matrix(sheaf, &e.tail_map, pattern, output_jacobian);
        let hm = map_matrix(sheaf, &e.head_map, pattern, output_jacobian);
        let rows = e.offset..e.offset + e.dim;
        d.slice_mut(s![rows.clone(), t.offset..t.offset + t.dim])
            .scaled_add(-1.0, &tm);
        d.slice_mut(s![rows, h.offset..h.offset + h.dim])
            .scaled_add(1.0, &hm);
    }
    Ok(d)
}

/// Full coboundary `δ` (edge rows × all coordinates) for a frozen pattern.
/// The output edge uses the identity in place of `φ`.
pub fn assemble_coboundary(sheaf: &NeuralSheaf, pattern: &ActivationPattern) -> Result<Array2<f64>> {
    coboundary_with(sheaf, pattern, None)
}

fn select_columns(a: &Array2<f64>, cols: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((a.nrows(), cols.len()), |(i, j)| a[[i, cols[j]]])
}

fn select_square(a: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((idx.len(), idx.len()), |(i, j)| a[[idx[i], idx[j]]])
}

fn require_unpinned(sheaf: &NeuralSheaf, what: &str) -> Result<()> {
    if sheaf.pins.is_empty() {
        Ok(())
    } else {
        Err(SheafError::Unsupported(format!(
            "{what} is defined for unpinned sheaves only"
        )))
    }
}

/// Columns of `δ` on the free coordinates. Square and lower unitriangular.
pub fn assemble_delta_omega(sheaf: &NeuralSheaf, pattern: &ActivationPattern) -> Result<Array2<f64>> {
    require_unpinned(sheaf, "δ_Ω")?;
    let d = assemble_coboundary(sheaf, pattern)?;
    Ok(select_columns(&d, &sheaf.free_indices()))
}

pub fn unitriangular_det(sheaf: &NeuralSheaf, pattern: &ActivationPattern) -> Result<f64> {
    let d = assemble_delta_omega(sheaf, pattern)?;
    Ok(Lu::factor(&d)?.determinant())
}

/// Sheaf Laplacian assembled edge by edge from restriction-map blocks,
/// restricted to the free coordinates.
fn edgewise_laplacian(
    sheaf: &NeuralSheaf,
    pattern: &ActivationPattern,
    output_jacobian: Option<&Array2<f64>>,
) -> Result<Array2<f64>> {
    pattern.check(&sheaf.spec)?;
    let n = sheaf.dim();
    let mut l = Array2::<f64>::zeros((n, n));
    for e in &sheaf.edges {
        let t = &sheaf.vertices[e.tail];
        let h = &sheaf.vertices[e.head];
        let tm = map_matrix(sheaf, &e.tail_map, pattern, output_jacobian);
        let hm = map_matrix(sheaf, &e.head_map, pattern, output_jacobian);
        let tr = t.offset..t.offset + t.dim;
        let hr = h.offset..h.offset + h.dim;
        l.slice_mut(s![tr.clone(), tr.clone()])
            .scaled_add(1.0, &tm.t().dot(&tm));
        l.slice_mut(s![hr.clone(), hr.clone()])
            .scaled_add(1.0, &hm.t().dot(&hm));
        l.slice_mut(s![tr.clone(), hr.clone()])
            .scaled_add(-1.0, &tm.t().dot(&hm));
        l.slice_mut(s![hr, tr]).scaled_add(-1.0, &hm.t().dot(&tm));
    }
    Ok(select_square(&l, &sheaf.free_indices()))
}

/// Flat coordinates indexing the rows of `restricted_laplacian(…, form)`.
pub fn restricted_coordinates(sheaf: &NeuralSheaf, form: LaplacianForm) -> Vec<usize> {
    let free = sheaf.free_indices();
    match form {
        LaplacianForm::Full => free,
        LaplacianForm::Reduced => {
            let y = &sheaf.vertices[sheaf.output_vertex()];
            free.into_iter()
                .filter(|&i| i < y.offset || i >= y.offset + y.dim)
                .collect()
        }
    }
}

fn schur_eliminate(l: &Array2<f64>, keep: &[usize], drop: &[usize]) -> Result<Array2<f64>> {
    let lkk = select_square(l, keep);
    if drop.is_empty() {
        return Ok(lkk);
    }
    let ldd = select_square(l, drop);
    let lkd = Array2::from_shape_fn((keep.len(), drop.len()), |(i, j)| l[[keep[i], drop[j]]]);
    let x = Lu::factor(&ldd)?.solve_matrix(&lkd.t().to_owned())?;
    Ok(lkk - lkd.dot(&x))
}

/// Restricted Laplacian `L[Ω,Ω]` for a frozen pattern, with soft-pin
/// contributions. The output edge is taken as linear with identity map.
pub fn restricted_laplacian(
    sheaf: &NeuralSheaf,
    pattern: &ActivationPattern,
    form: LaplacianForm,
) -> Result<Array2<f64>> {
    let full = edgewise_laplacian(sheaf, pattern, None)?;
    match form {
        LaplacianForm::Full => Ok(full),
        LaplacianForm::Reduced => {
            if !sheaf.spec.output_activation.is_identity() {
                return Err(SheafError::Unsupported(
                    "the reduced Laplacian requires an identity output".into(),
                ));
            }
            let free = sheaf.free_indices();
            let kept = restricted_coordinates(sheaf, LaplacianForm::Reduced);
            let (mut keep, mut drop) = (Vec::new(), Vec::new());
            for (pos, i) in free.iter().enumerate() {
                if kept.binary_search(i).is_ok() {
                    keep.push(pos);
                } else {
                    drop.push(pos);
                }
            }
            schur_eliminate(&full, &keep, &drop)
        }
    }
}

/// Full restricted Laplacian with the output edge linearized at `z_out`
/// (`φ` replaced by its Jacobian).
pub fn linearized_laplacian(
    sheaf: &NeuralSheaf,
    pattern: &ActivationPattern,
    z_out: &[f64],
) -> Result<Array2<f64>> {
    let j = sheaf.spec.output_activation.jacobian(z_out);
    edgewise_laplacian(sheaf, pattern, Some(&j))
}

/// Block-tridiagonal form of the reduced Laplacian. Block `ℓ < k` holds
/// `(z⁽ℓ⁺¹⁾, a⁽ℓ⁺¹⁾)`; the last block holds `z⁽ᵏ⁺¹⁾`.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianBlocks {
    pub diag: Vec<Array2<f64>>,
    /// `sub[i]` couples block `i + 1` (rows) to block `i` (columns).
    pub sub: Vec<Array2<f64>>,
}

impl LaplacianBlocks {
    pub fn to_dense(&self) -> Array2<f64> {
        let sizes: Vec<usize> = self.diag.iter().map(|d| d.nrows()).collect();
        let n = sizes.iter().sum();
        let mut offs = vec![0];
        for s in &sizes {
            offs.push(offs.last().unwrap() + s);
        }
        let mut out = Array2::zeros((n, n));
        for (i, d) in self.diag.iter().enumerate() {
            out.slice_mut(s![offs[i]..offs[i + 1], offs[i]..offs[i + 1]])
                .assign(d);
        }
        for (i, c) in self.sub.iter().enumerate() {
            out.slice_mut(s![offs[i + 1]..offs[i + 2], offs[i]..offs[i + 1]])
                .assign(c);
            out.slice_mut(s![offs[i]..offs[i + 1], offs[i + 1]..offs[i + 2]])
                .assign(&c.t());
        }
        out
    }
}

/// Closed-form blocks `A_ℓ = [[I+R, −R], [−R, I+WᵀW]]`, couplings
/// `[[0, −W], [0, 0]]` and a final identity block.
pub fn laplacian_blocks(sheaf: &NeuralSheaf, pattern: &ActivationPattern) -> Result<LaplacianBlocks> {
    require_unpinned(sheaf, "block Laplacian")?;
    pattern.check(&sheaf.spec)?;
    let spec = &sheaf.spec;
    let dims = &spec.layer_dims;
    let k = spec.hidden_layers();
    let mut diag = Vec::with_capacity(k + 1);
    let mut sub = Vec::with_capacity(k);
    for l in 1..=k {
        let n = dims[l];
        let r = Array2::from_diag(
            &pattern.masks[l - 1]
                .iter()
                .map(|&m| if m { 1.0 } else { 0.0 })
                .collect::<ndarray::Array1<f64>>(),
        );
        let w_next = &spec.weights[l];
        let mut a = Array2::zeros((2 * n, 2 * n));
        a.slice_mut(s![..n, ..n]).assign(&(Array2::eye(n) + &r));
        a.slice_mut(s![..n, n..]).assign(&(-&r));
        a.slice_mut(s![n.., ..n]).assign(&(-&r));
        a.slice_mut(s![n.., n..])
            .assign(&(Array2::eye(n) + w_next.t().dot(w_next)));
        diag.push(a);

        let m = dims[l + 1];
        let rows = if l < k { 2 * m } else { m };
        let mut c = Array2::zeros((rows, 2 * n));
        c.slice_mut(s![..m, n..]).assign(&(-w_next));
        sub.push(c);
    }
    diag.push(Array2::eye(dims[k + 1]));
    Ok(LaplacianBlocks { diag, sub })
}

/// Closed-form solution of `δ_Ω ω = −δ_U u` by forward substitution, for the
/// boundary data carried by `boundary` and a frozen pattern.
pub fn harmonic_extension(
    sheaf: &NeuralSheaf,
    boundary: &Cochain,
    pattern: &ActivationPattern,
) -> Result<Cochain> {
    require_unpinned(sheaf, "harmonic extension")?;
    sheaf.check_cochain(boundary)?;
    let d = assemble_coboundary(sheaf, pattern)?;
    let free = sheaf.free_indices();
    let fixed = sheaf.boundary_indices();
    let d_omega = select_columns(&d, &free);
    let mut rhs = vec![0.0; d.nrows()];
    for (row, r) in rhs.iter_mut().enumerate() {
        *r = -fixed
            .iter()
            .map(|&j| d[[row, j]] * boundary.values[j])
            .sum::<f64>();
    }
    let omega = forward_substitution(&d_omega, &rhs)?;
    let mut out = boundary.clone();
    for (&i, v) in free.iter().zip(omega) {
        out.values[i] = v;
    }
    let phi = sheaf.spec.output_activation;
    if !phi.is_identity() {
        let k = sheaf.hidden_layers();
        let y = phi.apply(out.block(sheaf.pre_vertex(k + 1)));
        out.block_mut(sheaf.output_vertex()).copy_from_slice(&y);
    }
    Ok(out)
}
