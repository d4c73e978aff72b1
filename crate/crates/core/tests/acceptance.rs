//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Positional numeric arguments select a
//! subset, e.g. `cargo test --test acceptance -- 3 7`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use neural_sheaf::benchmarks::{
    make_split, objective, objective_gradient, sgd_train, task_metrics, DatasetKind, SgdConfig,
};
use neural_sheaf::diagnostics::{fiedler_block_energy, init_spectral_sweep, residual_scatter};
use neural_sheaf::diffusion::{
    energy_with_pattern, free_velocity, initial_cochain, run_diffusion, solve_equilibrium, DiffusionConfig,
    Init,
};
use neural_sheaf::sheaf::{assemble_delta_omega, harmonic_extension, unitriangular_det};
use neural_sheaf::training::{
    batch_training_velocity, batch_weight_velocity, joint_step, output_force, polish_equilibrium,
    settle_cochain, train_detailed, train_state, weight_velocity, Anchors, InitMode, LossKind, TrainConfig,
    TrainState,
};
use neural_sheaf::{
    build_sheaf, forward_pass, ActivationPattern, Cochain, NetworkSpec, NeuralSheaf, OutputActivation,
    PinLayer, PinSpec,
};

struct Outcome {
    pass: bool,
    detail: String,
    /// Wall-clock budget; `None` when the criterion only says "minutes".
    budget: Option<Duration>,
}

fn outcome(pass: bool, budget: Option<u64>, detail: String) -> Outcome {
    Outcome {
        pass,
        detail,
        budget: budget.map(Duration::from_secs),
    }
}

fn he(dims: &[usize], phi: OutputActivation, rng: &mut ChaCha8Rng) -> NetworkSpec {
    NetworkSpec::he_init(dims, phi, rng).unwrap()
}

fn random_arch(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let hidden = rng.random_range(1..=4);
    let mut dims = vec![rng.random_range(1..=4)];
    dims.extend((0..hidden).map(|_| rng.random_range(1..=10)));
    dims.push(rng.random_range(1..=3));
    dims
}

fn uniform_input(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-2.0..=2.0)).collect()
}

fn c1_unit_determinant() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut oracle_gap = 0.0f64;
    for _ in 0..100 {
        let dims = random_arch(&mut rng);
        let spec = he(&dims, OutputActivation::Identity, &mut rng);
        let sheaf = build_sheaf(&spec).unwrap();
        let pattern = ActivationPattern::random(&spec, &mut rng);
        let det = unitriangular_det(&sheaf, &pattern).unwrap();
        worst = worst.max((det - 1.0).abs());
        let d = assemble_delta_omega(&sheaf, &pattern).unwrap();
        let n = d.nrows();
        let m = nalgebra::DMatrix::from_fn(n, n, |i, j| d[[i, j]]);
        oracle_gap = oracle_gap.max((m.determinant() - 1.0).abs());
    }
    outcome(
        worst <= 1e-9 && oracle_gap <= 1e-9,
        Some(5),
        format!("max |det-1| = {worst:.1e} (independent LU: {oracle_gap:.1e})"),
    )
}

fn c2_harmonic_extension() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let phis = [
        OutputActivation::Identity,
        OutputActivation::Sigmoid,
        OutputActivation::Tanh,
    ];
    let mut worst = 0.0f64;
    for i in 0..100 {
        let dims = random_arch(&mut rng);
        let spec = he(&dims, phis[i % 3], &mut rng);
        let sheaf = build_sheaf(&spec).unwrap();
        let x = uniform_input(dims[0], &mut rng);
        let trace = forward_pass(&spec, &x).unwrap();
        let boundary = sheaf.boundary_cochain(&x).unwrap();
        let h = harmonic_extension(&sheaf, &boundary, &trace.pattern).unwrap();
        // Oracle: the trace assembled by hand, block by block.
        let k = spec.hidden_layers();
        let mut expect: Vec<(usize, Vec<f64>)> = Vec::new();
        for l in 1..=k + 1 {
            expect.push((sheaf.pre_vertex(l), trace.z[l - 1].to_vec()));
            if l <= k {
                expect.push((sheaf.post_vertex(l), trace.a[l - 1].to_vec()));
            }
        }
        expect.push((sheaf.output_vertex(), trace.y_hat.to_vec()));
        for (v, want) in expect {
            for (got, want) in h.block(v).iter().zip(&want) {
                worst = worst.max((got - want).abs());
            }
        }
    }
    outcome(
        worst <= 1e-12,
        Some(5),
        format!("max coordinate error {worst:.1e}"),
    )
}

fn c3_convergence_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let spec = he(&[2, 4, 1], OutputActivation::Identity, &mut rng);
    let sheaf = build_sheaf(&spec).unwrap();
    let x = [0.8, -0.6];
    let target = forward_pass(&spec, &x).unwrap().y_hat[0];
    let cfg = DiffusionConfig {
        alpha: 1.0,
        dt: 0.01,
        max_steps: 100_000,
        record_crossings: false,
        ..DiffusionConfig::default()
    };
    let (mut worst_rise, mut worst_out, mut max_steps, mut all_converged) = (0.0f64, 0.0f64, 0, true);
    for seed in 0..20 {
        let start = initial_cochain(&sheaf, &x, &Init::Random, seed).unwrap();
        let t = run_diffusion(&sheaf, start, &cfg).unwrap();
        for w in t.discord_total.windows(2) {
            worst_rise = worst_rise.max(w[1] - w[0]);
        }
        worst_out = worst_out.max((t.output.last().unwrap()[0] - target).abs());
        all_converged &= t.converged;
        max_steps = max_steps.max(t.steps_taken);
    }
    outcome(
        all_converged && worst_rise <= 1e-12 && worst_out <= 1e-8,
        Some(30),
        format!(
            "20 inits converged={all_converged}, max steps {max_steps}, max discord rise {worst_rise:.1e}, max |y-f(x)| {worst_out:.1e}"
        ),
    )
}

fn c4_convergence_sigmoid() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let spec = he(&[2, 6, 4, 4, 1], OutputActivation::Sigmoid, &mut rng);
    let sheaf = build_sheaf(&spec).unwrap();
    let x = [-0.4, 1.2];
    let trace = forward_pass(&spec, &x).unwrap();
    let target = 1.0 / (1.0 + (-trace.z[3][0]).exp());
    let cfg = DiffusionConfig {
        alpha: 1.0,
        dt: 0.01,
        max_steps: 100_000,
        record_crossings: false,
        ..DiffusionConfig::default()
    };
    let (mut worst_rise, mut worst_out, mut all_converged) = (0.0f64, 0.0f64, true);
    let inits = [Init::Zeros, Init::Random, Init::Random, Init::Random];
    for (seed, init) in inits.iter().enumerate() {
        let start = initial_cochain(&sheaf, &x, init, seed as u64).unwrap();
        let t = run_diffusion(&sheaf, start, &cfg).unwrap();
        for w in t.energy.windows(2) {
            worst_rise = worst_rise.max(w[1] - w[0]);
        }
        worst_out = worst_out.max((t.output.last().unwrap()[0] - target).abs());
        all_converged &= t.converged;
    }
    outcome(
        all_converged && worst_out <= 1e-6 && worst_rise <= 1e-12,
        Some(60),
        format!("converged={all_converged}, max |y-σ(z)| {worst_out:.1e}, max energy rise {worst_rise:.1e}"),
    )
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

fn interior_state(sheaf: &NeuralSheaf, x: &[f64], seed: &mut u64) -> Cochain {
    loop {
        *seed += 1;
        let c = initial_cochain(sheaf, x, &Init::Random, *seed).unwrap();
        let far =
            (1..=sheaf.hidden_layers()).all(|l| c.block(sheaf.pre_vertex(l)).iter().all(|z| z.abs() > 1e-3));
        if far {
            return c;
        }
    }
}

fn c5_gradient_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let alpha = 0.7;
    let h = 1e-6;
    let nets = [
        ([2, 4, 3, 1].to_vec(), OutputActivation::Identity),
        ([3, 5, 2].to_vec(), OutputActivation::Sigmoid),
        ([2, 3, 3, 2].to_vec(), OutputActivation::Tanh),
        ([2, 4, 3].to_vec(), OutputActivation::Softmax),
    ];
    let mut worst_flow = 0.0f64;
    let mut seed = 0;
    for i in 0..50 {
        let (dims, phi) = &nets[i % nets.len()];
        let spec = he(dims, *phi, &mut rng);
        let sheaf = build_sheaf(&spec).unwrap();
        let x = uniform_input(dims[0], &mut rng);
        let c = interior_state(&sheaf, &x, &mut seed);
        let pattern = sheaf.pattern_of(&c);
        let v = free_velocity(&sheaf, &c, alpha).unwrap();
        let idx = sheaf.dynamic_indices();
        let mut fd = Vec::with_capacity(idx.len());
        for &j in &idx {
            let mut p = c.clone();
            p.values[j] += h;
            let up = energy_with_pattern(&sheaf, &p, Some(&pattern)).unwrap();
            p.values[j] -= 2.0 * h;
            let down = energy_with_pattern(&sheaf, &p, Some(&pattern)).unwrap();
            fd.push(-alpha * (up - down) / (2.0 * h));
        }
        let got: Vec<f64> = idx.iter().map(|&j| v.values[j]).collect();
        worst_flow = worst_flow.max(rel_err(&got, &fd));
    }

    let mut worst_sgd = 0.0f64;
    let cases = [
        (
            [2, 6, 4, 1].to_vec(),
            OutputActivation::Identity,
            LossKind::Squared,
        ),
        (
            [2, 5, 2].to_vec(),
            OutputActivation::Sigmoid,
            LossKind::Huber(0.3),
        ),
        (
            [2, 5, 3].to_vec(),
            OutputActivation::Softmax,
            LossKind::CrossEntropy,
        ),
        (
            [3, 4, 1].to_vec(),
            OutputActivation::Identity,
            LossKind::PNorm(3.0),
        ),
    ];
    for (dims, phi, loss) in &cases {
        let mut spec = he(dims, *phi, &mut rng);
        for b in spec.biases.iter_mut() {
            b.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        }
        let m = 12;
        let x = Array2::from_shape_fn((dims[0], m), |_| rng.random_range(-2.0..2.0));
        let n_out = *dims.last().unwrap();
        let y = if *loss == LossKind::CrossEntropy {
            Array2::from_shape_fn((n_out, m), |(i, j)| if i == j % n_out { 1.0 } else { 0.0 })
        } else {
            Array2::from_shape_fn((n_out, m), |_| rng.random_range(-1.0..1.0))
        };
        let grads = objective_gradient(&spec, &x, &y, loss).unwrap();
        let mut got = Vec::new();
        let mut fd = Vec::new();
        for (l, g) in grads.iter().enumerate() {
            for idx in 0..spec.weights[l].len() {
                let (r, c) = (idx / spec.weights[l].ncols(), idx % spec.weights[l].ncols());
                got.push(g.dw[[r, c]]);
                let mut p = spec.clone();
                p.weights[l][[r, c]] += h;
                let up = objective(&p, &x, &y, loss).unwrap();
                p.weights[l][[r, c]] -= 2.0 * h;
                let down = objective(&p, &x, &y, loss).unwrap();
                fd.push((up - down) / (2.0 * h));
            }
            for r in 0..spec.biases[l].len() {
                got.push(g.db[r]);
                let mut p = spec.clone();
                p.biases[l][r] += h;
                let up = objective(&p, &x, &y, loss).unwrap();
                p.biases[l][r] -= 2.0 * h;
                let down = objective(&p, &x, &y, loss).unwrap();
                fd.push((up - down) / (2.0 * h));
            }
        }
        worst_sgd = worst_sgd.max(rel_err(&got, &fd));
    }
    outcome(
        worst_flow <= 1e-5 && worst_sgd <= 1e-5,
        Some(10),
        format!("flow rel err {worst_flow:.1e} over 50 states, backprop rel err {worst_sgd:.1e}"),
    )
}

fn output_pinned(spec: &NetworkSpec, y: &[f64]) -> NeuralSheaf {
    NeuralSheaf::with_pins(
        spec.clone(),
        vec![PinSpec::hard(
            PinLayer::Output,
            (0..y.len()).collect(),
            y.to_vec(),
        )],
    )
    .unwrap()
}

fn c6_batch_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let spec = he(&[2, 5, 1], OutputActivation::Identity, &mut rng);
    let (data, _) = make_split(DatasetKind::Paraboloid, 8, 1, 6).unwrap();
    let m = 8;
    let beta = 1.0 / m as f64;
    let mut state = TrainState::new(spec.clone(), &data.x, &data.y, InitMode::Random, 7).unwrap();
    let cfg = TrainConfig {
        dt: 0.005,
        ..TrainConfig::default()
    };

    // Instantaneous velocities.
    let v = batch_training_velocity(&state.sheaf, &state.cochain, &cfg.loss, cfg.alpha).unwrap();
    let dw = batch_weight_velocity(&state.sheaf, &state.cochain, beta).unwrap();
    let mut vel_err = 0.0f64;
    let mut dw_sum: Vec<(Array2<f64>, Array1<f64>)> = spec
        .weights
        .iter()
        .zip(&spec.biases)
        .map(|(w, b)| (w * 0.0, b * 0.0))
        .collect();
    for j in 0..m {
        let pinned = output_pinned(&spec, &[data.y[[0, j]]]);
        let col = state.cochain.column(&pinned, j);
        let vj = free_velocity(&pinned, &col, cfg.alpha).unwrap();
        vel_err = vel_err.max(v.column(&pinned, j).max_abs_diff(&vj));
        for (acc, d) in dw_sum
            .iter_mut()
            .zip(weight_velocity(&pinned, &col, beta).unwrap())
        {
            acc.0 += &d.dw;
            acc.1 += &d.db;
        }
    }
    for (acc, d) in dw_sum.iter().zip(&dw) {
        vel_err = vel_err.max((&acc.0 - &d.dw).iter().fold(0.0, |a: f64, v| a.max(v.abs())));
        vel_err = vel_err.max((&acc.1 - &d.db).iter().fold(0.0, |a: f64, v| a.max(v.abs())));
    }

    // 100 joint steps against a per-column loop.
    let mut oracle_spec = spec.clone();
    let mut cols: Vec<Cochain> = (0..m)
        .map(|j| state.cochain.column(&output_pinned(&spec, &[data.y[[0, j]]]), j))
        .collect();
    let anchors = Anchors::zero(&state.sheaf, m);
    for _ in 0..100 {
        joint_step(&mut state, &cfg, beta, &anchors).unwrap();
        let mut deltas: Vec<(Array2<f64>, Array1<f64>)> = oracle_spec
            .weights
            .iter()
            .zip(&oracle_spec.biases)
            .map(|(w, b)| (w * 0.0, b * 0.0))
            .collect();
        for (j, col) in cols.iter_mut().enumerate() {
            let pinned = output_pinned(&oracle_spec, &[data.y[[0, j]]]);
            let vj = free_velocity(&pinned, col, cfg.alpha).unwrap();
            for (acc, d) in deltas
                .iter_mut()
                .zip(weight_velocity(&pinned, col, beta).unwrap())
            {
                acc.0 += &d.dw;
                acc.1 += &d.db;
            }
            for (c, d) in col.values.iter_mut().zip(&vj.values) {
                *c += cfg.dt * d;
            }
        }
        for (l, (dw, db)) in deltas.iter().enumerate() {
            oracle_spec.weights[l].scaled_add(cfg.dt, dw);
            oracle_spec.biases[l].scaled_add(cfg.dt, db);
        }
    }
    let mut run_err = 0.0f64;
    for (j, col) in cols.iter().enumerate() {
        let pinned = output_pinned(&oracle_spec, &[data.y[[0, j]]]);
        run_err = run_err.max(state.cochain.column(&pinned, j).max_abs_diff(col));
    }
    for (a, b) in state.spec().weights.iter().zip(&oracle_spec.weights) {
        run_err = run_err.max((a - b).iter().fold(0.0, |m: f64, v| m.max(v.abs())));
    }
    for (a, b) in state.spec().biases.iter().zip(&oracle_spec.biases) {
        run_err = run_err.max((a - b).iter().fold(0.0, |m: f64, v| m.max(v.abs())));
    }
    outcome(
        vel_err <= 1e-10 && run_err <= 1e-10,
        Some(10),
        format!("velocity err {vel_err:.1e}, 100-step err {run_err:.1e}"),
    )
}

fn c7_pinning_limit() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let spec = he(&[2, 4, 3, 1], OutputActivation::Identity, &mut rng);
    let x = [0.5, -1.0];
    let target = forward_pass(&spec, &x).unwrap().y_hat[0] + 0.5;
    let n = build_sheaf(&spec).unwrap().dim();

    let equilibrium = |pin: PinSpec| -> Cochain {
        let sheaf = NeuralSheaf::with_pins(spec.clone(), vec![pin]).unwrap();
        let start = initial_cochain(&sheaf, &x, &Init::Zeros, 0).unwrap();
        solve_equilibrium(&sheaf, &start, 200)
            .unwrap()
            .expect("pattern settles")
    };
    let hard = equilibrium(PinSpec::hard(PinLayer::Output, vec![0], vec![target]));
    let gammas = [1.0, 1e2, 1e4, 1e6];
    let dist: Vec<f64> = gammas
        .iter()
        .map(|&g| {
            let soft = equilibrium(PinSpec::soft(PinLayer::Output, vec![0], vec![target], g));
            (0..n).fold(0.0f64, |m, i| m.max((soft.values[i] - hard.values[i]).abs()))
        })
        .collect();

    // The direct solve agrees with integrating the flow where that is cheap.
    let mut flow_gap = 0.0f64;
    for (g, dt) in [(1.0, 0.01), (1e2, 0.005)] {
        let sheaf = NeuralSheaf::with_pins(
            spec.clone(),
            vec![PinSpec::soft(PinLayer::Output, vec![0], vec![target], g)],
        )
        .unwrap();
        let cfg = DiffusionConfig {
            dt,
            max_steps: 400_000,
            record_every: 400_000,
            record_crossings: false,
            ..DiffusionConfig::default()
        };
        let start = initial_cochain(&sheaf, &x, &Init::Zeros, 0).unwrap();
        let t = run_diffusion(&sheaf, start.clone(), &cfg).unwrap();
        let direct = solve_equilibrium(&sheaf, &start, 200).unwrap().unwrap();
        flow_gap = flow_gap.max(if t.converged {
            t.final_cochain.max_abs_diff(&direct)
        } else {
            f64::INFINITY
        });
    }
    let monotone = dist.windows(2).all(|w| w[1] < w[0]);
    outcome(
        monotone && dist[3] <= 1e-4 && flow_gap <= 1e-7,
        Some(60),
        format!(
            "distance to hard pin over γ=1,1e2,1e4,1e6: {:.2e} {:.2e} {:.2e} {:.2e}; flow vs solve {flow_gap:.1e}",
            dist[0], dist[1], dist[2], dist[3]
        ),
    )
}

fn c8_spectral_depth() -> Outcome {
    let archs: [(&[usize], f64); 3] = [
        (&[2, 30, 1], 0.2248),
        (&[2, 10, 8, 1], 0.0602),
        (&[2, 8, 6, 4, 1], 0.0281),
    ];
    let mut medians = Vec::new();
    let mut within = true;
    for (dims, reference) in archs {
        let s = init_spectral_sweep(dims, OutputActivation::Identity, 50, 0).unwrap();
        within &= (s.lambda1.median / reference - 1.0).abs() <= 0.5;
        medians.push(s.lambda1.median);
    }
    let ordered = medians[0] > medians[1] && medians[1] > medians[2];
    outcome(
        ordered && within,
        Some(60),
        format!(
            "median λ1 {:.4} > {:.4} > {:.4}: ordered={ordered}, within ±50% of table={within}",
            medians[0], medians[1], medians[2]
        ),
    )
}

struct Trained {
    state: TrainState,
    cfg: TrainConfig,
    test: neural_sheaf::benchmarks::Dataset,
    train: neural_sheaf::benchmarks::Dataset,
}

fn trained() -> &'static Trained {
    static CELL: std::sync::OnceLock<Trained> = std::sync::OnceLock::new();
    CELL.get_or_init(|| {
        let (train, test) = make_split(DatasetKind::Paraboloid, 300, 300, 0).unwrap();
        let cfg = TrainConfig::default();
        let state = train_state(&[2, 30, 1], &train, &cfg).unwrap();
        Trained {
            state,
            cfg,
            test,
            train,
        }
    })
}

fn c9_fiedler_concentration() -> Outcome {
    let t = trained();
    let start = Instant::now();
    let spec = t.state.spec();
    let mut mean = std::collections::BTreeMap::<String, f64>::new();
    let mut z2_wins = 0;
    let n = 50;
    for j in 0..n {
        let x: Vec<f64> = t.test.x.column(j).to_vec();
        let blocks = fiedler_block_energy(spec, &x).unwrap();
        let top = blocks
            .iter()
            .max_by(|a, b| a.fiedler.total_cmp(&b.fiedler))
            .unwrap();
        if top.block == "z2" {
            z2_wins += 1;
        }
        for b in blocks {
            *mean.entry(b.block).or_default() += b.fiedler / n as f64;
        }
    }
    let best = mean.iter().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
    let pass = best.0 == "z2" && start.elapsed() < Duration::from_secs(10);
    outcome(
        pass,
        None,
        format!(
            "mean Fiedler share maximal on {} ({:.3}); z2 dominant on {z2_wins}/{n} inputs",
            best.0, best.1
        ),
    )
}

fn c10_training() -> Outcome {
    let t = trained();
    let sheaf_mse = task_metrics(t.state.spec(), &t.test).unwrap().loss;
    let (sgd_spec, _) = sgd_train(&[2, 30, 1], &t.train, None, &SgdConfig::default()).unwrap();
    let sgd_mse = task_metrics(&sgd_spec, &t.test).unwrap().loss;
    outcome(
        sheaf_mse <= 0.15 && sgd_mse < sheaf_mse,
        None,
        format!(
            "sheaf test MSE {sheaf_mse:.4}, SGD test MSE {sgd_mse:.4}, ratio {:.2}",
            sheaf_mse / sgd_mse
        ),
    )
}

const BETA_GRID: [f64; 10] = [0.01, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0, 300.0];

fn beta_curve(m: usize) -> Vec<Option<f64>> {
    let (train, test) = make_split(DatasetKind::Paraboloid, m, 300, 0).unwrap();
    BETA_GRID
        .iter()
        .map(|&g| {
            let cfg = TrainConfig {
                beta: Some(g / m as f64),
                record_every: 100_000,
                ..TrainConfig::default()
            };
            match train_detailed(&[2, 30, 1], &train, Some(&test), &cfg).unwrap() {
                Ok((_, h)) => h.final_test_loss(),
                Err(_) => None,
            }
        })
        .collect()
}

fn c11_beta_collapse() -> Outcome {
    let (a, b) = std::thread::scope(|s| {
        let a = s.spawn(|| beta_curve(150));
        let b = s.spawn(|| beta_curve(300));
        (a.join().unwrap(), b.join().unwrap())
    });
    let argmin = |c: &[Option<f64>]| {
        c.iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (i, v)))
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .map(|(i, _)| i)
            .unwrap()
    };
    let (ia, ib) = (argmin(&a), argmin(&b));
    let optima_close = ia.abs_diff(ib) <= 1;
    let large: Vec<usize> = (0..BETA_GRID.len()).filter(|&i| BETA_GRID[i] >= 100.0).collect();
    let diverge_large = large.iter().all(|&i| a[i].is_none() && b[i].is_none());
    let fmt = |c: &[Option<f64>]| {
        c.iter()
            .map(|v| v.map_or("div".to_string(), |v| format!("{v:.3}")))
            .collect::<Vec<_>>()
            .join(" ")
    };
    outcome(
        optima_close && diverge_large,
        None,
        format!(
            "βM grid {:?}; M=150: [{}]; M=300: [{}]; optima at βM={} and {} (within one step: {optima_close}); all βM≥100 diverge: {diverge_large}",
            BETA_GRID,
            fmt(&a),
            fmt(&b),
            BETA_GRID[ia],
            BETA_GRID[ib]
        ),
    )
}

fn c12_discord_localization() -> Outcome {
    let t = trained();
    let start = Instant::now();
    let mut state = t.state.clone();
    settle_cochain(&mut state, &t.cfg, 1e-10, 20_000).unwrap();
    let report = polish_equilibrium(&mut state, 1e-4).unwrap();
    let records = residual_scatter(state.spec(), &state.cochain).unwrap();
    let inactive: Vec<f64> = records
        .iter()
        .filter(|r| !r.active)
        .map(|r| r.weight_residual.abs())
        .collect();
    let worst = inactive.iter().fold(0.0f64, |m, v| m.max(*v));
    let pass = worst <= 1e-6 && !inactive.is_empty() && start.elapsed() < Duration::from_secs(60);
    outcome(
        pass,
        None,
        format!(
            "{} inactive coordinates, max |weight_residual| {worst:.1e}; {} coordinates sliding at z=0, residual velocity {:.1e}",
            inactive.len(),
            report.sliding,
            report.residual_velocity
        ),
    )
}

fn c13_loss_formulas() -> Outcome {
    let mut worst = 0.0f64;
    let mut check = |got: Vec<f64>, want: &[f64]| {
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want) {
            worst = worst.max((g - w).abs());
        }
    };
    check(LossKind::Squared.gradient(&[0.3, -0.2]).unwrap(), &[0.3, -0.2]);
    check(
        LossKind::L1.gradient(&[0.0, -0.1, 2.0]).unwrap(),
        &[0.0, -1.0, 1.0],
    );
    check(LossKind::PNorm(3.0).gradient(&[2.0, -2.0]).unwrap(), &[4.0, -4.0]);
    check(LossKind::PNorm(2.5).gradient(&[4.0]).unwrap(), &[8.0]);
    check(
        LossKind::Huber(1.0).gradient(&[0.5, 3.0, -2.0]).unwrap(),
        &[0.5, 1.0, -1.0],
    );
    check(
        vec![LossKind::Huber(1.0).potential(&[0.5, 3.0]).unwrap()],
        &[2.625],
    );

    let sm = OutputActivation::Softmax;
    check(
        output_force(&[0.0, 0.0], &[1.0, 0.0], sm, &LossKind::CrossEntropy).unwrap(),
        &[-0.5, 0.5],
    );
    check(
        output_force(&[0.0, 3f64.ln()], &[0.0, 1.0], sm, &LossKind::CrossEntropy).unwrap(),
        &[0.25, -0.25],
    );
    check(
        output_force(&[0.0], &[1.0], OutputActivation::Sigmoid, &LossKind::CrossEntropy).unwrap(),
        &[-0.5],
    );
    // Jᵀ∇ŷ(−Σ y log ŷ) written out with the softmax Jacobian diag(p) − ppᵀ.
    let z = [0.3, -1.2, 0.8];
    let y = [0.0, 0.0, 1.0];
    let e: Vec<f64> = z.iter().map(|v: &f64| v.exp()).collect();
    let s: f64 = e.iter().sum();
    let p: Vec<f64> = e.iter().map(|v| v / s).collect();
    let g: Vec<f64> = y.iter().zip(&p).map(|(y, p)| -y / p).collect();
    let chain: Vec<f64> = (0..3)
        .map(|j| {
            (0..3)
                .map(|i| (if i == j { p[i] } else { 0.0 } - p[i] * p[j]) * g[i])
                .sum()
        })
        .collect();
    check(output_force(&z, &y, sm, &LossKind::CrossEntropy).unwrap(), &chain);
    check(
        output_force(&[6.0], &[1.0], OutputActivation::Identity, &LossKind::Huber(1.0)).unwrap(),
        &[1.0],
    );
    outcome(
        worst <= 1e-12,
        Some(1),
        format!("max deviation from hand values {worst:.1e}"),
    )
}

type Criterion = (u32, &'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 13] = [
        (1, "unit determinant", c1_unit_determinant),
        (2, "harmonic extension equals forward pass", c2_harmonic_extension),
        (3, "convergence, identity output", c3_convergence_identity),
        (4, "convergence, sigmoid output", c4_convergence_sigmoid),
        (5, "gradient consistency", c5_gradient_consistency),
        (6, "batch equivalence", c6_batch_equivalence),
        (7, "pinning limit", c7_pinning_limit),
        (8, "spectral depth ordering", c8_spectral_depth),
        (9, "Fiedler concentration", c9_fiedler_concentration),
        (10, "training reproduction", c10_training),
        (11, "βM collapse", c11_beta_collapse),
        (12, "discord localization", c12_discord_localization),
        (13, "loss-potential formulas", c13_loss_formulas),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    // `cargo test` forwards harness flags such as `--list`; answer them minimally.
    if std::env::args().any(|a| a == "--list") {
        for (id, name, _) in &criteria {
            println!("criterion_{id}: test  # {name}");
        }
        return;
    }
    let mut failed = Vec::new();
    for (id, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run));
        let elapsed = start.elapsed();
        let (pass, detail) = match result {
            Ok(o) => {
                let in_budget = o.budget.is_none_or(|b| elapsed <= b);
                let note = if in_budget {
                    String::new()
                } else {
                    " (over time budget)".into()
                };
                (o.pass && in_budget, format!("{}{note}", o.detail))
            }
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        println!(
            "criterion {id:>2} {} {name}: {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
        if !pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
    println!("acceptance: all selected criteria passed");
}
