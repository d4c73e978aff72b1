//! The neural sheaf: a path graph with one vertex per intermediate quantity
//! of the forward pass, and restriction maps that make local agreement on
//! every edge equivalent to one step of the forward pass.
//!
//! Vertices, in path order:
//!
//! ```text
//! v_x — v_z1 — v_a1 — v_z2 — … — v_ak — v_z(k+1) — v_y   [+ pin anchors]
//! ```
//!
//! Coordinates are laid out flat in that order. The input stalk and the
//! trailing ones block of every post-activation stalk are fixed (boundary);
//! hard pins and pin anchors add to the boundary.

mod assembly;
mod cochain;

pub use assembly::{
    assemble_coboundary, assemble_delta_omega, harmonic_extension, laplacian_blocks, linearized_laplacian,
    restricted_coordinates, restricted_laplacian, unitriangular_det, LaplacianBlocks, LaplacianForm,
};
pub use cochain::{BatchCochain, Cochain};

use std::fmt;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result, SheafError};
use crate::network::{forward_pass, ActivationPattern, ForwardTrace, NetworkSpec, OutputActivation};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VertexKind {
    Input,
    /// Pre-activation `z⁽ℓ⁾`, `ℓ` in `1..=k+1`.
    Pre(usize),
    /// Extended post-activation `ā⁽ℓ⁾`, `ℓ` in `1..=k`.
    Post(usize),
    Output,
    /// Stubborn vertex holding the targets of soft pin `i`.
    PinAnchor(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vertex {
    pub kind: VertexKind,
    pub dim: usize,
    pub offset: usize,
}

/// Linear (or, for the output edge, nonlinear) restriction map descriptor.
#[derive(Debug, Clone, PartialEq)]
pub enum RestrictionMap {
    Identity(usize),
    /// `W̄⁽ℓ⁾ = [W⁽ℓ⁾ | diag(b⁽ℓ⁾)]`.
    ExtendedWeight(usize),
    /// `R^{z⁽ℓ⁾}`, read from the current state.
    Relu(usize),
    /// `P_n = [I_n 0]`.
    Projection {
        rows: usize,
        cols: usize,
    },
    /// The final activation `φ`.
    OutputActivation(OutputActivation),
    /// `√γ P_J`.
    ScaledSelection {
        scale: f64,
        indices: Vec<usize>,
        cols: usize,
    },
    /// `√γ I`.
    ScaledIdentity {
        scale: f64,
        dim: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    /// `e_z⁽ℓ⁾`, from `v_a⁽ℓ⁻¹⁾` to `v_z⁽ℓ⁾`.
    Weight(usize),
    /// `e_a⁽ℓ⁾`, from `v_z⁽ℓ⁾` to `v_a⁽ℓ⁾`.
    Activation(usize),
    Output,
    Pin(usize),
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EdgeKind::Weight(l) => write!(f, "w{l}"),
            EdgeKind::Activation(l) => write!(f, "r{l}"),
            EdgeKind::Output => f.write_str("out"),
            EdgeKind::Pin(i) => write!(f, "pin{}", i + 1),
        }
    }
}

/// An oriented edge; its value on a cochain is `head_map·x_head − tail_map·x_tail`.
#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub kind: EdgeKind,
    pub tail: usize,
    pub head: usize,
    pub dim: usize,
    pub tail_map: RestrictionMap,
    pub head_map: RestrictionMap,
    pub offset: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PinLayer {
    Input,
    /// Post-activation vertex `v_a⁽ℓ⁾`.
    Hidden(usize),
    Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PinStrength {
    Soft(f64),
    Hard,
}

/// Pull a subset of a stalk's coordinates toward target values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PinSpec {
    pub layer: PinLayer,
    pub indices: Vec<usize>,
    pub targets: Vec<f64>,
    pub strength: PinStrength,
}

impl PinSpec {
    pub fn hard(layer: PinLayer, indices: Vec<usize>, targets: Vec<f64>) -> Self {
        PinSpec {
            layer,
            indices,
            targets,
            strength: PinStrength::Hard,
        }
    }

    pub fn soft(layer: PinLayer, indices: Vec<usize>, targets: Vec<f64>, gamma: f64) -> Self {
        PinSpec {
            layer,
            indices,
            targets,
            strength: PinStrength::Soft(gamma),
        }
    }

    pub fn is_hard(&self) -> bool {
        matches!(self.strength, PinStrength::Hard)
    }
}

/// How the output pair `(z⁽ᵏ⁺¹⁾, ŷ)` participates in the dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputMode {
    /// Identity output, nothing pinned at `v_y`: the output edge is dropped
    /// and `ŷ` mirrors `z⁽ᵏ⁺¹⁾`.
    Eliminated,
    /// The output edge is active; unpinned `ŷ` coordinates evolve.
    Coupled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralSheaf {
    pub spec: NetworkSpec,
    pub vertices: Vec<Vertex>,
    pub edges: Vec<Edge>,
    pub pins: Vec<PinSpec>,
    fixed: Vec<bool>,
    dim: usize,
    edge_dim: usize,
}

pub fn build_sheaf(spec: &NetworkSpec) -> Result<NeuralSheaf> {
    NeuralSheaf::with_pins(spec.clone(), Vec::new())
}

impl NeuralSheaf {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        NeuralSheaf::with_pins(spec, Vec::new())
    }

    pub fn with_pins(spec: NetworkSpec, pins: Vec<PinSpec>) -> Result<Self> {
        spec.validate()?;
        let dims = spec.layer_dims.clone();
        let k = spec.hidden_layers();

        let mut vertices = Vec::with_capacity(2 * k + 3 + pins.len());
        let mut offset = 0;
        let mut push = |kind, dim| {
            vertices.push(Vertex { kind, dim, offset });
            offset += dim;
        };
        push(VertexKind::Input, dims[0] + dims[1]);
        for l in 1..=k {
            push(VertexKind::Pre(l), dims[l]);
            push(VertexKind::Post(l), dims[l] + dims[l + 1]);
        }
        push(VertexKind::Pre(k + 1), dims[k + 1]);
        push(VertexKind::Output, dims[k + 1]);
        for (i, pin) in pins.iter().enumerate() {
            validate_pin(&spec, pin)?;
            if !pin.is_hard() {
                push(VertexKind::PinAnchor(i), pin.indices.len());
            }
        }
        let dim = offset;

        let mut edges = Vec::new();
        let mut eoff = 0;
        let mut push_edge = |kind, tail, head, edim, tail_map, head_map| {
            edges.push(Edge {
                kind,
                tail,
                head,
                dim: edim,
                tail_map,
                head_map,
                offset: eoff,
            });
            eoff += edim;
        };
        for l in 1..=k + 1 {
            let tail = if l == 1 { 0 } else { 2 * (l - 1) };
            push_edge(
                EdgeKind::Weight(l),
                tail,
                2 * l - 1,
                dims[l],
                RestrictionMap::ExtendedWeight(l),
                RestrictionMap::Identity(dims[l]),
            );
            if l <= k {
                push_edge(
                    EdgeKind::Activation(l),
                    2 * l - 1,
                    2 * l,
                    dims[l],
                    RestrictionMap::Relu(l),
                    RestrictionMap::Projection {
                        rows: dims[l],
                        cols: dims[l] + dims[l + 1],
                    },
                );
            }
        }
        push_edge(
            EdgeKind::Output,
            2 * k + 1,
            2 * k + 2,
            dims[k + 1],
            RestrictionMap::OutputActivation(spec.output_activation),
            RestrictionMap::Identity(dims[k + 1]),
        );
        let mut anchor = 2 * k + 3;
        for (i, pin) in pins.iter().enumerate() {
            if let PinStrength::Soft(gamma) = pin.strength {
                let tail = pin_vertex(&spec, pin.layer);
                let scale = gamma.sqrt();
                let cols = vertices[tail].dim;
                push_edge(
                    EdgeKind::Pin(i),
                    tail,
                    anchor,
                    pin.indices.len(),
                    RestrictionMap::ScaledSelection {
                        scale,
                        indices: pin.indices.clone(),
                        cols,
                    },
                    RestrictionMap::ScaledIdentity {
                        scale,
                        dim: pin.indices.len(),
                    },
                );
                anchor += 1;
            }
        }
        let edge_dim = eoff;

        let mut fixed = vec![false; dim];
        fixed[..vertices[0].dim].iter_mut().for_each(|f| *f = true);
        for l in 1..=k {
            let v = &vertices[2 * l];
            fixed[v.offset + dims[l]..v.offset + v.dim]
                .iter_mut()
                .for_each(|f| *f = true);
        }
        for v in vertices
            .iter()
            .filter(|v| matches!(v.kind, VertexKind::PinAnchor(_)))
        {
            fixed[v.offset..v.offset + v.dim]
                .iter_mut()
                .for_each(|f| *f = true);
        }
        for pin in pins.iter().filter(|p| p.is_hard()) {
            let v = &vertices[pin_vertex(&spec, pin.layer)];
            for &j in &pin.indices {
                fixed[v.offset + j] = true;
            }
        }

        Ok(NeuralSheaf {
            spec,
            vertices,
            edges,
            pins,
            fixed,
            dim,
            edge_dim,
        })
    }

    /// The same network with every pin removed.
    pub fn without_pins(&self) -> NeuralSheaf {
        NeuralSheaf::with_pins(self.spec.clone(), Vec::new()).expect("spec already validated")
    }

    pub fn hidden_layers(&self) -> usize {
        self.spec.hidden_layers()
    }

    /// Total number of cochain coordinates.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Total edge-stalk dimension (rows of the coboundary).
    pub fn edge_dim(&self) -> usize {
        self.edge_dim
    }

    pub fn input_vertex(&self) -> usize {
        0
    }

    pub fn pre_vertex(&self, layer: usize) -> usize {
        2 * layer - 1
    }

    pub fn post_vertex(&self, layer: usize) -> usize {
        2 * layer
    }

    pub fn output_vertex(&self) -> usize {
        2 * self.hidden_layers() + 2
    }

    pub fn stalk_dims(&self) -> Vec<usize> {
        self.vertices.iter().map(|v| v.dim).collect()
    }

    /// Boundary mask over flat coordinates: `true` where the coordinate is fixed.
    pub fn fixed_mask(&self) -> &[bool] {
        &self.fixed
    }

    pub fn free_mask(&self) -> Vec<bool> {
        self.fixed.iter().map(|f| !f).collect()
    }

    pub fn boundary_indices(&self) -> Vec<usize> {
        (0..self.dim).filter(|&i| self.fixed[i]).collect()
    }

    pub fn free_indices(&self) -> Vec<usize> {
        (0..self.dim).filter(|&i| !self.fixed[i]).collect()
    }

    pub fn output_mode(&self) -> OutputMode {
        let output_pinned = self.pins.iter().any(|p| p.layer == PinLayer::Output);
        if self.spec.output_activation.is_identity() && !output_pinned {
            OutputMode::Eliminated
        } else {
            OutputMode::Coupled
        }
    }

    /// Coordinates that carry independent dynamics: free, and not the
    /// mirrored `ŷ` block of an eliminated output edge.
    pub fn dynamic_indices(&self) -> Vec<usize> {
        let y = &self.vertices[self.output_vertex()];
        let eliminated = self.output_mode() == OutputMode::Eliminated;
        (0..self.dim)
            .filter(|&i| !self.fixed[i])
            .filter(|&i| !(eliminated && i >= y.offset && i < y.offset + y.dim))
            .collect()
    }

    pub fn edge_names(&self) -> Vec<String> {
        self.edges.iter().map(|e| e.kind.to_string()).collect()
    }

    /// A cochain carrying the boundary data for input `x`; free coordinates are zero.
    pub fn boundary_cochain(&self, x: &[f64]) -> Result<Cochain> {
        let dims = &self.spec.layer_dims;
        if x.len() != dims[0] {
            return Err(dim_err(format!(
                "input has length {}, network expects {}",
                x.len(),
                dims[0]
            )));
        }
        let mut c = Cochain::zeros(self);
        {
            let v = c.block_mut(0);
            v[..dims[0]].copy_from_slice(x);
            v[dims[0]..].iter_mut().for_each(|o| *o = 1.0);
        }
        for l in 1..=self.hidden_layers() {
            let n = dims[l];
            c.block_mut(self.post_vertex(l))[n..]
                .iter_mut()
                .for_each(|o| *o = 1.0);
        }
        let mut anchor = 2 * self.hidden_layers() + 3;
        for pin in &self.pins {
            if pin.is_hard() {
                let v = pin_vertex(&self.spec, pin.layer);
                let block = c.block_mut(v);
                for (&j, &t) in pin.indices.iter().zip(&pin.targets) {
                    block[j] = t;
                }
            } else {
                c.block_mut(anchor).copy_from_slice(&pin.targets);
                anchor += 1;
            }
        }
        Ok(c)
    }

    /// Embed a forward trace; boundary coordinates keep their boundary values.
    pub fn embed_trace(&self, x: &[f64], trace: &ForwardTrace) -> Result<Cochain> {
        let mut c = self.boundary_cochain(x)?;
        let k = self.hidden_layers();
        let set = |c: &mut Cochain, v: usize, vals: &[f64]| {
            let off = self.vertices[v].offset;
            for (j, &val) in vals.iter().enumerate() {
                if !self.fixed[off + j] {
                    c.values[off + j] = val;
                }
            }
        };
        for l in 1..=k + 1 {
            set(&mut c, self.pre_vertex(l), trace.z[l - 1].as_slice().unwrap());
            if l <= k {
                set(&mut c, self.post_vertex(l), trace.a[l - 1].as_slice().unwrap());
            }
        }
        set(&mut c, self.output_vertex(), trace.y_hat.as_slice().unwrap());
        Ok(c)
    }

    /// Forward pass of `x` embedded as a cochain.
    pub fn forward_cochain(&self, x: &[f64]) -> Result<Cochain> {
        let trace = forward_pass(&self.spec, x)?;
        self.embed_trace(x, &trace)
    }

    /// Activation pattern read off the pre-activation blocks of `c`.
    pub fn pattern_of(&self, c: &Cochain) -> ActivationPattern {
        ActivationPattern {
            masks: (1..=self.hidden_layers())
                .map(|l| c.block(self.pre_vertex(l)).iter().map(|&v| v >= 0.0).collect())
                .collect(),
        }
    }

    pub fn check_cochain(&self, c: &Cochain) -> Result<()> {
        if c.values.len() != self.dim {
            return Err(dim_err(format!(
                "cochain has {} coordinates, sheaf has {}",
                c.values.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Edge values `(δx)_e` for every edge. The ReLU maps use `pattern` when
    /// given and the state's own pattern otherwise.
    pub fn coboundary_apply(
        &self,
        c: &Cochain,
        pattern: Option<&ActivationPattern>,
    ) -> Result<Vec<Array1<f64>>> {
        self.check_cochain(c)?;
        if let Some(p) = pattern {
            p.check(&self.spec)?;
        }
        let mut out = vec![0.0; self.edge_dim];
        self.edge_values_into(&c.values, pattern, &mut out);
        Ok(self
            .edges
            .iter()
            .map(|e| Array1::from(out[e.offset..e.offset + e.dim].to_vec()))
            .collect())
    }

    /// Flat edge values. Hot path of the diffusion loop.
    pub(crate) fn edge_values_into(&self, x: &[f64], pattern: Option<&ActivationPattern>, out: &mut [f64]) {
        let dims = &self.spec.layer_dims;
        for e in &self.edges {
            let r = &mut out[e.offset..e.offset + e.dim];
            let tail = &self.vertices[e.tail];
            let head = &self.vertices[e.head];
            let xt = &x[tail.offset..tail.offset + tail.dim];
            let xh = &x[head.offset..head.offset + head.dim];
            match e.kind {
                EdgeKind::Weight(l) => {
                    let w = &self.spec.weights[l - 1];
                    let b = self.spec.biases[l - 1].as_slice().unwrap();
                    let ws = w.as_slice().unwrap();
                    let nin = dims[l - 1];
                    for i in 0..e.dim {
                        let row = &ws[i * nin..(i + 1) * nin];
                        let mut acc = b[i] * xt[nin + i];
                        for j in 0..nin {
                            acc += row[j] * xt[j];
                        }
                        r[i] = xh[i] - acc;
                    }
                }
                EdgeKind::Activation(l) => {
                    let mask = pattern.map(|p| &p.masks[l - 1]);
                    for i in 0..e.dim {
                        let active = mask.map_or(xt[i] >= 0.0, |m| m[i]);
                        r[i] = xh[i] - if active { xt[i] } else { 0.0 };
                    }
                }
                EdgeKind::Output => {
                    let phi = self.spec.output_activation.apply(xt);
                    for i in 0..e.dim {
                        r[i] = xh[i] - phi[i];
                    }
                }
                EdgeKind::Pin(_) => {
                    if let RestrictionMap::ScaledSelection { scale, indices, .. } = &e.tail_map {
                        for (i, &j) in indices.iter().enumerate() {
                            r[i] = scale * (xh[i] - xt[j]);
                        }
                    }
                }
            }
        }
    }

    /// Total discord `‖δx‖²` with the pattern read from the state, and its
    /// per-edge breakdown (same summation order).
    pub fn total_discord(&self, c: &Cochain) -> Result<Discord> {
        self.check_cochain(c)?;
        let mut buf = vec![0.0; self.edge_dim];
        self.edge_values_into(&c.values, None, &mut buf);
        Ok(self.discord_from_edges(&buf))
    }

    pub(crate) fn discord_from_edges(&self, buf: &[f64]) -> Discord {
        let per_edge: Vec<f64> = self
            .edges
            .iter()
            .map(|e| buf[e.offset..e.offset + e.dim].iter().map(|v| v * v).sum())
            .collect();
        Discord {
            total: per_edge.iter().sum(),
            per_edge,
        }
    }
}

/// Total discord and its decomposition over edges (in `NeuralSheaf::edges` order).
#[derive(Debug, Clone, PartialEq)]
pub struct Discord {
    pub total: f64,
    pub per_edge: Vec<f64>,
}

pub(crate) fn pin_vertex(spec: &NetworkSpec, layer: PinLayer) -> usize {
    match layer {
        PinLayer::Input => 0,
        PinLayer::Hidden(l) => 2 * l,
        PinLayer::Output => 2 * spec.hidden_layers() + 2,
    }
}

fn validate_pin(spec: &NetworkSpec, pin: &PinSpec) -> Result<()> {
    let dims = &spec.layer_dims;
    let k = spec.hidden_layers();
    let (range, stalk) = match pin.layer {
        PinLayer::Input => {
            if !pin.is_hard() {
                return Err(SheafError::Config(
                    "input coordinates are already fixed; only hard pins may override them".into(),
                ));
            }
            (dims[0], dims[0] + dims[1])
        }
        PinLayer::Hidden(l) => {
            if l == 0 || l > k {
                return Err(SheafError::Config(format!(
                    "hidden pin layer {l} outside 1..={k}"
                )));
            }
            (dims[l], dims[l] + dims[l + 1])
        }
        PinLayer::Output => (dims[k + 1], dims[k + 1]),
    };
    if pin.indices.is_empty() {
        return Err(SheafError::Config("pin selects no coordinates".into()));
    }
    if pin.indices.len() != pin.targets.len() {
        return Err(SheafError::Config(format!(
            "pin has {} indices but {} targets",
            pin.indices.len(),
            pin.targets.len()
        )));
    }
    for &j in &pin.indices {
        if j >= stalk {
            return Err(SheafError::Config(format!(
                "pin index {j} outside stalk of dimension {stalk}"
            )));
        }
        if j >= range {
            return Err(SheafError::Config(format!(
                "pin index {j} addresses a ones-block coordinate, which is already fixed"
            )));
        }
    }
    let mut sorted = pin.indices.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != pin.indices.len() {
        return Err(SheafError::Config("pin indices must be distinct".into()));
    }
    if let PinStrength::Soft(gamma) = pin.strength {
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(SheafError::Config(format!(
                "pin strength {gamma} must be finite and ≥ 0"
            )));
        }
    }
    if pin.targets.iter().any(|t| !t.is_finite()) {
        return Err(SheafError::Config("pin targets must be finite".into()));
    }
    Ok(())
}
