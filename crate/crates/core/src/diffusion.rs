//! Forward-Euler integration of the restricted sheaf heat equation with
//! state-dependent ReLU switching, the nonlinear output edge, and pins.

use std::io::Write;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SheafError};
use crate::linalg::Lu;
use crate::network::{ActivationPattern, OutputActivation};
use crate::sheaf::{Cochain, EdgeKind, NeuralSheaf, OutputMode, PinSpec, RestrictionMap};

/// States with any coordinate beyond this magnitude are treated as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub alpha: f64,
    pub dt: f64,
    pub max_steps: usize,
    /// Convergence threshold on the sup-norm of the free velocity.
    pub tol: f64,
    pub record_every: usize,
    pub record_crossings: bool,
    pub seed: u64,
    pub slide_eps: f64,
    pub slide_steps: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            alpha: 1.0,
            dt: 0.01,
            max_steps: 100_000,
            tol: 1e-10,
            record_every: 1,
            record_crossings: true,
            seed: 0,
            slide_eps: 1e-6,
            slide_steps: 20,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(SheafError::Config(format!(
                    "{name} must be positive and finite, got {v}"
                )))
            }
        };
        positive("alpha", self.alpha)?;
        positive("dt", self.dt)?;
        positive("tol", self.tol)?;
        positive("slide_eps", self.slide_eps)?;
        if self.record_every == 0 {
            return Err(SheafError::Config("record_every must be at least 1".into()));
        }
        if self.slide_steps == 0 {
            return Err(SheafError::Config("slide_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Initial state of the free coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    Zeros,
    /// Standard normal per free coordinate, seeded from the config.
    Random,
    /// Free coordinates copied from the given cochain.
    Given(Cochain),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Crossing {
    pub step: usize,
    /// Hidden layer, 1-based.
    pub layer: usize,
    pub coord: usize,
    /// `+1` when `z` becomes nonnegative, `−1` when it becomes negative.
    pub direction: i8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SlidingEpisode {
    pub layer: usize,
    pub coord: usize,
    pub start_step: usize,
    pub end_step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<usize>,
    pub discord_total: Vec<f64>,
    /// One row per recorded step, in edge order.
    pub discord_per_edge: Vec<Vec<f64>>,
    pub edge_names: Vec<String>,
    pub energy: Vec<f64>,
    pub output: Vec<Vec<f64>>,
    pub crossings: Vec<Crossing>,
    pub sliding_episodes: Vec<SlidingEpisode>,
    pub final_cochain: Cochain,
    pub converged: bool,
    pub steps_taken: usize,
    pub final_velocity: f64,
}

impl Trajectory {
    /// Columns `step, discord_total, discord_edge_<name>…, energy, y_hat_<i>…`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["step".to_string(), "discord_total".to_string()];
        header.extend(self.edge_names.iter().map(|n| format!("discord_edge_{n}")));
        header.push("energy".into());
        let n_out = self.output.first().map_or(0, |o| o.len());
        header.extend((0..n_out).map(|i| format!("y_hat_{i}")));
        wr.write_record(&header).map_err(csv_err)?;
        for r in 0..self.steps.len() {
            let mut row = vec![self.steps[r].to_string(), self.discord_total[r].to_string()];
            row.extend(self.discord_per_edge[r].iter().map(f64::to_string));
            row.push(self.energy[r].to_string());
            row.extend(self.output[r].iter().map(f64::to_string));
            wr.write_record(&row).map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Columns `step, layer, coord, direction`.
    pub fn write_crossings_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["step", "layer", "coord", "direction"])
            .map_err(csv_err)?;
        for c in &self.crossings {
            wr.serialize((c.step, c.layer, c.coord, c.direction))
                .map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> SheafError {
    SheafError::Io(std::io::Error::other(e))
}

/// A copy of `sheaf` with `pin` added.
pub fn apply_pin(sheaf: &NeuralSheaf, pin: PinSpec) -> Result<NeuralSheaf> {
    let mut pins = sheaf.pins.clone();
    pins.push(pin);
    NeuralSheaf::with_pins(sheaf.spec.clone(), pins)
}

/// Velocity `−α ∂V/∂x` at a cochain, as flat slices. `edges` is scratch of
/// length `edge_dim`; fixed coordinates receive zero.
pub(crate) fn velocity_into(
    sheaf: &NeuralSheaf,
    x: &[f64],
    alpha: f64,
    pattern: Option<&ActivationPattern>,
    edges: &mut [f64],
    out: &mut [f64],
) {
    sheaf.edge_values_into(x, pattern, edges);
    let eliminated = sheaf.output_mode() == OutputMode::Eliminated;
    out.iter_mut().for_each(|v| *v = 0.0);
    let dims = &sheaf.spec.layer_dims;
    for e in &sheaf.edges {
        let r = &edges[e.offset..e.offset + e.dim];
        let tail = &sheaf.vertices[e.tail];
        let head = &sheaf.vertices[e.head];
        match e.kind {
            EdgeKind::Weight(l) => {
                for i in 0..e.dim {
                    out[head.offset + i] += r[i];
                }
                let w = sheaf.spec.weights[l - 1].as_slice().unwrap();
                let nin = dims[l - 1];
                for i in 0..e.dim {
                    let ri = r[i];
                    let row = &w[i * nin..(i + 1) * nin];
                    for j in 0..nin {
                        out[tail.offset + j] -= row[j] * ri;
                    }
                }
            }
            EdgeKind::Activation(l) => {
                let mask = pattern.map(|p| &p.masks[l - 1]);
                for i in 0..e.dim {
                    out[head.offset + i] += r[i];
                    let active = mask.map_or(x[tail.offset + i] >= 0.0, |m| m[i]);
                    if active {
                        out[tail.offset + i] -= r[i];
                    }
                }
            }
            EdgeKind::Output => {
                if eliminated {
                    continue;
                }
                for i in 0..e.dim {
                    out[head.offset + i] += r[i];
                }
                let z = &x[tail.offset..tail.offset + tail.dim];
                let jt = sheaf.spec.output_activation.jacobian_t_mul(z, r);
                for i in 0..e.dim {
                    out[tail.offset + i] -= jt[i];
                }
            }
            EdgeKind::Pin(_) => {
                if let RestrictionMap::ScaledSelection { scale, indices, .. } = &e.tail_map {
                    for (i, &j) in indices.iter().enumerate() {
                        out[tail.offset + j] -= scale * r[i];
                    }
                }
            }
        }
    }
    let fixed = sheaf.fixed_mask();
    for (v, &f) in out.iter_mut().zip(fixed) {
        *v = if f { 0.0 } else { -alpha * *v };
    }
    if eliminated {
        let k = sheaf.hidden_layers();
        let z = &sheaf.vertices[sheaf.pre_vertex(k + 1)];
        let y = &sheaf.vertices[sheaf.output_vertex()];
        for i in 0..y.dim {
            out[y.offset + i] = out[z.offset + i];
        }
    }
}

/// `−α(L[Ω,Ω]ω + L[Ω,U]u)` with the pattern read from the current state,
/// returned as a cochain that is zero on the boundary.
pub fn free_velocity(sheaf: &NeuralSheaf, x: &Cochain, alpha: f64) -> Result<Cochain> {
    sheaf.check_cochain(x)?;
    let mut edges = vec![0.0; sheaf.edge_dim()];
    let mut v = Cochain::zeros(sheaf);
    velocity_into(sheaf, &x.values, alpha, None, &mut edges, &mut v.values);
    Ok(v)
}

/// Same as [`free_velocity`] with a frozen activation pattern.
pub fn free_velocity_with_pattern(
    sheaf: &NeuralSheaf,
    x: &Cochain,
    alpha: f64,
    pattern: &ActivationPattern,
) -> Result<Cochain> {
    sheaf.check_cochain(x)?;
    pattern.check(&sheaf.spec)?;
    let mut edges = vec![0.0; sheaf.edge_dim()];
    let mut v = Cochain::zeros(sheaf);
    velocity_into(sheaf, &x.values, alpha, Some(pattern), &mut edges, &mut v.values);
    Ok(v)
}

/// Velocities of the output pair `(z⁽ᵏ⁺¹⁾, ŷ)` given the weight-edge residual
/// `z − W̄ā`.
pub fn output_velocity(
    z_out: &[f64],
    y_hat: &[f64],
    weight_residual: &[f64],
    phi: OutputActivation,
    alpha: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if z_out.len() != y_hat.len() || z_out.len() != weight_residual.len() {
        return Err(crate::error::dim_err("output pair length mismatch"));
    }
    let p = phi.apply(z_out);
    let gap: Vec<f64> = p.iter().zip(y_hat).map(|(a, b)| a - b).collect();
    let jt = phi.jacobian_t_mul(z_out, &gap);
    let dz = weight_residual
        .iter()
        .zip(&jt)
        .map(|(w, j)| -alpha * (w + j))
        .collect();
    let dy = gap.iter().map(|g| alpha * g).collect();
    Ok((dz, dy))
}

fn check_finite(x: &[f64], step: usize) -> Result<()> {
    if x.iter().any(|v| !(v.abs() <= DIVERGENCE_LIMIT)) {
        Err(SheafError::Diverged { step })
    } else {
        Ok(())
    }
}

/// One explicit Euler step; the pattern is re-derived from `x`.
pub fn euler_step(sheaf: &NeuralSheaf, x: &Cochain, config: &DiffusionConfig) -> Result<Cochain> {
    let v = free_velocity(sheaf, x, config.alpha)?;
    let mut next = x.clone();
    for (n, d) in next.values.iter_mut().zip(&v.values) {
        *n += config.dt * d;
    }
    check_finite(&next.values, 1)?;
    Ok(next)
}

/// `E = ½ωᵀL[Ω,Ω]ω + ωᵀL[Ω,U]u + ½‖φ(z⁽ᵏ⁺¹⁾) − ŷ‖²`, pattern from the state.
pub fn energy(sheaf: &NeuralSheaf, x: &Cochain) -> Result<f64> {
    energy_with_pattern(sheaf, x, None)
}

/// Energy with an explicit activation pattern in the ReLU maps.
pub fn energy_with_pattern(
    sheaf: &NeuralSheaf,
    x: &Cochain,
    pattern: Option<&ActivationPattern>,
) -> Result<f64> {
    sheaf.check_cochain(x)?;
    if let Some(p) = pattern {
        p.check(&sheaf.spec)?;
    }
    let mut edges = vec![0.0; sheaf.edge_dim()];
    let mut boundary_edges = vec![0.0; sheaf.edge_dim()];
    let boundary: Vec<f64> = x
        .values
        .iter()
        .zip(sheaf.fixed_mask())
        .map(|(&v, &f)| if f { v } else { 0.0 })
        .collect();
    Ok(energy_from(
        sheaf,
        &x.values,
        &boundary,
        pattern,
        &mut edges,
        &mut boundary_edges,
    ))
}

fn energy_from(
    sheaf: &NeuralSheaf,
    x: &[f64],
    boundary: &[f64],
    pattern: Option<&ActivationPattern>,
    edges: &mut [f64],
    boundary_edges: &mut [f64],
) -> f64 {
    sheaf.edge_values_into(x, pattern, edges);
    // δ_U u does not depend on the pattern: ReLU maps only act on free `z`.
    sheaf.edge_values_into(boundary, pattern, boundary_edges);
    let eliminated = sheaf.output_mode() == OutputMode::Eliminated;
    let mut e = 0.0;
    for edge in &sheaf.edges {
        let r = &edges[edge.offset..edge.offset + edge.dim];
        let r0 = &boundary_edges[edge.offset..edge.offset + edge.dim];
        let sq: f64 = r.iter().map(|v| v * v).sum();
        match edge.kind {
            EdgeKind::Output => {
                if !eliminated {
                    e += 0.5 * sq;
                }
            }
            _ => {
                let sq0: f64 = r0.iter().map(|v| v * v).sum();
                e += 0.5 * (sq - sq0);
            }
        }
    }
    e
}

/// Online crossing and sliding detection over hidden pre-activations.
#[derive(Debug, Clone)]
pub struct CrossingDetector {
    coords: Vec<(usize, usize, usize)>,
    prev: Vec<bool>,
    run_start: Vec<Option<usize>>,
    last_small: Vec<usize>,
    eps: f64,
    min_steps: usize,
    pub crossings: Vec<Crossing>,
    pub sliding: Vec<SlidingEpisode>,
}

impl CrossingDetector {
    pub fn new(sheaf: &NeuralSheaf, initial: &[f64], eps: f64, min_steps: usize) -> Self {
        let mut coords = Vec::new();
        for l in 1..=sheaf.hidden_layers() {
            let v = &sheaf.vertices[sheaf.pre_vertex(l)];
            coords.extend((0..v.dim).map(|j| (l, j, v.offset + j)));
        }
        let prev = coords.iter().map(|c| initial[c.2] >= 0.0).collect();
        let run_start = coords
            .iter()
            .map(|c| (initial[c.2].abs() < eps).then_some(0))
            .collect();
        CrossingDetector {
            last_small: vec![0; coords.len()],
            coords,
            prev,
            run_start,
            eps,
            min_steps,
            crossings: Vec::new(),
            sliding: Vec::new(),
        }
    }

    pub fn observe(&mut self, step: usize, x: &[f64]) {
        for i in 0..self.coords.len() {
            let (layer, coord, idx) = self.coords[i];
            let z = x[idx];
            let now = z >= 0.0;
            if now != self.prev[i] {
                self.crossings.push(Crossing {
                    step,
                    layer,
                    coord,
                    direction: if now { 1 } else { -1 },
                });
                self.prev[i] = now;
            }
            if z.abs() < self.eps {
                if self.run_start[i].is_none() {
                    self.run_start[i] = Some(step);
                }
                self.last_small[i] = step;
            } else if let Some(start) = self.run_start[i].take() {
                let end = self.last_small[i];
                self.close(i, start, end);
            }
        }
    }

    fn close(&mut self, i: usize, start: usize, end: usize) {
        if end + 1 - start >= self.min_steps {
            let (layer, coord, _) = self.coords[i];
            self.sliding.push(SlidingEpisode {
                layer,
                coord,
                start_step: start,
                end_step: end,
            });
        }
    }

    pub fn finish(mut self) -> (Vec<Crossing>, Vec<SlidingEpisode>) {
        for i in 0..self.coords.len() {
            if let Some(start) = self.run_start[i].take() {
                self.close(i, start, self.last_small[i]);
            }
        }
        self.sliding.sort_by_key(|s| (s.start_step, s.layer, s.coord));
        (self.crossings, self.sliding)
    }
}

/// Crossings and sliding episodes over a dense sequence of states; state `t`
/// is step `t`.
pub fn detect_crossings(
    sheaf: &NeuralSheaf,
    states: &[Cochain],
    eps: f64,
    min_steps: usize,
) -> (Vec<Crossing>, Vec<SlidingEpisode>) {
    let Some(first) = states.first() else {
        return (Vec::new(), Vec::new());
    };
    let mut det = CrossingDetector::new(sheaf, &first.values, eps, min_steps);
    for (t, s) in states.iter().enumerate().skip(1) {
        det.observe(t, &s.values);
    }
    det.finish()
}

/// Starting cochain for input `x`: boundary data plus the chosen free values.
/// With an eliminated output edge, `ŷ` starts equal to `z⁽ᵏ⁺¹⁾`.
pub fn initial_cochain(sheaf: &NeuralSheaf, x: &[f64], init: &Init, seed: u64) -> Result<Cochain> {
    let mut c = sheaf.boundary_cochain(x)?;
    let fixed = sheaf.fixed_mask();
    match init {
        Init::Zeros => {}
        Init::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (v, &f) in c.values.iter_mut().zip(fixed) {
                if !f {
                    *v = StandardNormal.sample(&mut rng);
                }
            }
        }
        Init::Given(g) => {
            sheaf.check_cochain(g)?;
            for ((v, &gv), &f) in c.values.iter_mut().zip(&g.values).zip(fixed) {
                if !f {
                    *v = gv;
                }
            }
        }
    }
    sync_mirror(sheaf, &mut c.values);
    Ok(c)
}

fn sync_mirror(sheaf: &NeuralSheaf, x: &mut [f64]) {
    if sheaf.output_mode() == OutputMode::Eliminated {
        let k = sheaf.hidden_layers();
        let z = sheaf.vertices[sheaf.pre_vertex(k + 1)].offset;
        let y = &sheaf.vertices[sheaf.output_vertex()];
        for i in 0..y.dim {
            x[y.offset + i] = x[z + i];
        }
    }
}

/// Integrate from `start` until the free-velocity sup-norm drops below
/// `tol` or `max_steps` steps have been taken.
pub fn run_diffusion(sheaf: &NeuralSheaf, start: Cochain, config: &DiffusionConfig) -> Result<Trajectory> {
    config.validate()?;
    sheaf.check_cochain(&start)?;
    let mut x = start.values.clone();
    sync_mirror(sheaf, &mut x);
    check_finite(&x, 0)?;

    let boundary: Vec<f64> = x
        .iter()
        .zip(sheaf.fixed_mask())
        .map(|(&v, &f)| if f { v } else { 0.0 })
        .collect();
    let mut edges = vec![0.0; sheaf.edge_dim()];
    let mut scratch = vec![0.0; sheaf.edge_dim()];
    let mut scratch0 = vec![0.0; sheaf.edge_dim()];
    let mut v = vec![0.0; sheaf.dim()];
    let dynamic = sheaf.dynamic_indices();
    let out_vertex = &sheaf.vertices[sheaf.output_vertex()];
    let out_range = out_vertex.offset..out_vertex.offset + out_vertex.dim;

    let mut traj = Trajectory {
        steps: Vec::new(),
        discord_total: Vec::new(),
        discord_per_edge: Vec::new(),
        edge_names: sheaf.edge_names(),
        energy: Vec::new(),
        output: Vec::new(),
        crossings: Vec::new(),
        sliding_episodes: Vec::new(),
        final_cochain: start,
        converged: false,
        steps_taken: 0,
        final_velocity: f64::INFINITY,
    };
    let mut detector = config
        .record_crossings
        .then(|| CrossingDetector::new(sheaf, &x, config.slide_eps, config.slide_steps));

    let mut record = |traj: &mut Trajectory, step: usize, x: &[f64], edges: &[f64]| {
        let d = sheaf.discord_from_edges(edges);
        traj.steps.push(step);
        traj.discord_total.push(d.total);
        traj.discord_per_edge.push(d.per_edge);
        traj.energy.push(energy_from(
            sheaf,
            x,
            &boundary,
            None,
            &mut scratch,
            &mut scratch0,
        ));
        traj.output.push(x[out_range.clone()].to_vec());
    };

    let mut step = 0;
    loop {
        velocity_into(sheaf, &x, config.alpha, None, &mut edges, &mut v);
        let vnorm = dynamic.iter().map(|&i| v[i].abs()).fold(0.0, f64::max);
        let converged = vnorm < config.tol;
        let done = converged || step == config.max_steps;
        if step % config.record_every == 0 || done {
            record(&mut traj, step, &x, &edges);
        }
        if done {
            traj.converged = converged;
            traj.final_velocity = vnorm;
            break;
        }
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi += config.dt * vi;
        }
        step += 1;
        check_finite(&x, step)?;
        if let Some(d) = detector.as_mut() {
            d.observe(step, &x);
        }
    }
    traj.steps_taken = step;
    if let Some(d) = detector {
        let (c, s) = d.finish();
        traj.crossings = c;
        traj.sliding_episodes = s;
    }
    traj.final_cochain.values = x;
    Ok(traj)
}

/// Minimizer of `‖δx‖²` over the free coordinates with the pattern frozen,
/// boundary taken from `x`. Identity output only, so every edge is linear.
pub fn frozen_equilibrium(sheaf: &NeuralSheaf, x: &Cochain, pattern: &ActivationPattern) -> Result<Cochain> {
    if !sheaf.spec.output_activation.is_identity() {
        return Err(SheafError::Unsupported(
            "linear equilibrium solve requires an identity output".into(),
        ));
    }
    sheaf.check_cochain(x)?;
    let d = crate::sheaf::assemble_coboundary(sheaf, pattern)?;
    let free = sheaf.free_indices();
    let fixed = sheaf.boundary_indices();
    let mut du = vec![0.0; d.nrows()];
    for (r, v) in du.iter_mut().enumerate() {
        *v = fixed.iter().map(|&j| d[[r, j]] * x.values[j]).sum();
    }
    let d_omega = Array2::from_shape_fn((d.nrows(), free.len()), |(r, c)| d[[r, free[c]]]);
    let normal = d_omega.t().dot(&d_omega);
    let rhs: Vec<f64> = d_omega.t().dot(&Array1::from(du)).iter().map(|v| -v).collect();
    let omega = Lu::factor(&normal)?.solve(&rhs)?;
    let mut out = x.clone();
    for (&i, v) in free.iter().zip(omega) {
        out.values[i] = v;
    }
    Ok(out)
}

/// Equilibrium by active-set iteration: solve with the current pattern,
/// re-read the pattern, repeat until it is self-consistent. `None` when the
/// pattern has not settled after `max_iter` solves.
pub fn solve_equilibrium(sheaf: &NeuralSheaf, start: &Cochain, max_iter: usize) -> Result<Option<Cochain>> {
    let mut x = start.clone();
    let mut pattern = sheaf.pattern_of(&x);
    for _ in 0..max_iter {
        x = frozen_equilibrium(sheaf, &x, &pattern)?;
        let next = sheaf.pattern_of(&x);
        if next == pattern {
            return Ok(Some(x));
        }
        pattern = next;
    }
    Ok(None)
}

/// Convenience wrapper: build the initial cochain for `x` and integrate.
pub fn diffuse(sheaf: &NeuralSheaf, x: &[f64], init: &Init, config: &DiffusionConfig) -> Result<Trajectory> {
    let start = initial_cochain(sheaf, x, init, config.seed)?;
    run_diffusion(sheaf, start, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkSpec;
    use crate::sheaf::{build_sheaf, PinLayer};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn unit_net() -> NeuralSheaf {
        let spec = NetworkSpec::new(
            vec![1, 1, 1],
            vec![array![[1.0]], array![[1.0]]],
            vec![array![0.0], array![0.0]],
            OutputActivation::Identity,
        )
        .unwrap();
        build_sheaf(&spec).unwrap()
    }

    #[test]
    fn coordinate_dynamics_single_neuron() {
        let s = unit_net();
        let c = initial_cochain(&s, &[1.0], &Init::Zeros, 0).unwrap();
        let v = free_velocity(&s, &c, 1.0).unwrap();
        assert_eq!(v.block(1), &[1.0]);
        assert_eq!(v.block(2), &[0.0, 0.0]);
        assert_eq!(v.block(3), &[0.0]);
        let cfg = DiffusionConfig::default();
        let next = euler_step(&s, &c, &cfg).unwrap();
        assert_abs_diff_eq!(next.block(1)[0], 0.01, epsilon = 1e-15);
        assert_eq!(next.block(0), c.block(0));
    }

    #[test]
    fn active_set_solve_recovers_forward_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = NetworkSpec::he_init(&[2, 5, 3, 1], OutputActivation::Identity, &mut rng).unwrap();
        let s = build_sheaf(&spec).unwrap();
        let x = [0.7, -1.3];
        let start = initial_cochain(&s, &x, &Init::Zeros, 0).unwrap();
        let eq = solve_equilibrium(&s, &start, 50).unwrap().unwrap();
        assert!(eq.max_abs_diff(&s.forward_cochain(&x).unwrap()) < 1e-12);
    }

    #[test]
    fn forward_cochain_is_stationary() {
        let s = unit_net();
        let c = s.forward_cochain(&[0.7]).unwrap();
        let v = free_velocity(&s, &c, 1.0).unwrap();
        assert!(v.values.iter().all(|x| x.abs() <= 1e-12));
        let t = run_diffusion(&s, c, &DiffusionConfig::default()).unwrap();
        assert!(t.converged);
        assert_eq!(t.steps_taken, 0);
        assert!(t.crossings.is_empty());
    }

    #[test]
    fn output_velocity_examples() {
        let (dz, dy) = output_velocity(&[0.0], &[0.0], &[0.0], OutputActivation::Sigmoid, 2.0).unwrap();
        assert_abs_diff_eq!(dy[0], 2.0 * 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(dz[0], -2.0 * 0.125, epsilon = 1e-15);

        let (dz, dy) = output_velocity(
            &[0.0, 0.0],
            &[0.5, 0.5],
            &[0.0, 0.0],
            OutputActivation::Softmax,
            1.0,
        )
        .unwrap();
        assert!(dz.iter().chain(&dy).all(|v| v.abs() < 1e-15));

        let z = [0.3, -1.2];
        let y = OutputActivation::Tanh.apply(&z);
        let (dz, dy) = output_velocity(&z, &y, &[0.0, 0.0], OutputActivation::Tanh, 1.0).unwrap();
        assert!(dz.iter().chain(&dy).all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn oscillating_state_counts_every_flip() {
        let s = unit_net();
        let states: Vec<Cochain> = (0..6)
            .map(|t| {
                let mut c = s.boundary_cochain(&[1.0]).unwrap();
                c.block_mut(1)[0] = if t % 2 == 0 { 0.5 } else { -0.5 };
                c
            })
            .collect();
        let (c, sl) = detect_crossings(&s, &states, 1e-6, 20);
        assert_eq!(c.len(), 5);
        assert_eq!(c[0].direction, -1);
        assert_eq!(c[1].direction, 1);
        assert!(sl.is_empty());
    }

    #[test]
    fn sliding_episode_requires_minimum_length() {
        let s = unit_net();
        let mk = |z: f64| {
            let mut c = s.boundary_cochain(&[1.0]).unwrap();
            c.block_mut(1)[0] = z;
            c
        };
        let mut states = vec![mk(1.0)];
        states.extend((0..25).map(|_| mk(1e-8)));
        states.push(mk(1.0));
        states.extend((0..5).map(|_| mk(-1e-8)));
        let (_, sl) = detect_crossings(&s, &states, 1e-6, 20);
        assert_eq!(
            sl,
            vec![SlidingEpisode {
                layer: 1,
                coord: 0,
                start_step: 1,
                end_step: 25
            }]
        );
    }

    #[test]
    fn zero_gamma_pin_leaves_dynamics_unchanged() {
        let s = unit_net();
        let pinned = apply_pin(&s, PinSpec::soft(PinLayer::Hidden(1), vec![0], vec![3.0], 0.0)).unwrap();
        let c0 = initial_cochain(&s, &[0.4], &Init::Random, 7).unwrap();
        let mut c1 = initial_cochain(&pinned, &[0.4], &Init::Zeros, 0).unwrap();
        c1.values[..c0.values.len()].copy_from_slice(&c0.values);
        let v0 = free_velocity(&s, &c0, 1.0).unwrap();
        let v1 = free_velocity(&pinned, &c1, 1.0).unwrap();
        assert_eq!(&v1.values[..v0.values.len()], &v0.values[..]);
    }

    #[test]
    fn hard_output_pin_leaves_residual_discord() {
        let spec = NetworkSpec::new(
            vec![1, 2, 1],
            vec![array![[1.0], [-0.5]], array![[0.8, 1.1]]],
            vec![array![0.1, 0.2], array![0.0]],
            OutputActivation::Identity,
        )
        .unwrap();
        let s = build_sheaf(&spec).unwrap();
        let pinned = apply_pin(&s, PinSpec::hard(PinLayer::Output, vec![0], vec![5.0])).unwrap();
        let start = initial_cochain(&pinned, &[1.0], &Init::Zeros, 0).unwrap();
        let t = run_diffusion(&pinned, start, &DiffusionConfig::default()).unwrap();
        assert!(t.converged);
        assert_eq!(t.final_cochain.block(pinned.output_vertex()), &[5.0]);
        assert!(*t.discord_total.last().unwrap() > 1e-3);
    }

    #[test]
    fn config_rejects_nonpositive_rates() {
        let cfg = DiffusionConfig {
            dt: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = DiffusionConfig {
            record_every: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
