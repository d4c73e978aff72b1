//! Command-line experiments. Every command resolves a full
//! [`ExperimentConfig`], validates it and loads its inputs before anything is
//! written, then fills `<out>/<command>-<label>/` with a `config.json`
//! snapshot, a `summary.json` and data files.
//!
//! Exit codes: 0 success, 1 divergence or non-convergence, 2 usage or
//! configuration error.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::benchmarks::{
    compare, make_dataset, make_split, read_dataset_csv, sgd_train, test_seed, Dataset, DatasetKind,
    SgdConfig,
};
use crate::diagnostics::{
    pinned_batch, pinned_discord, residual_scatter, restricted_spectrum, spectral_sweep, write_scatter_csv,
};
use crate::diffusion::{initial_cochain, run_diffusion, DiffusionConfig, Init};
use crate::error::{Result, SheafError};
use crate::network::{forward_pass, NetworkSpec, OutputActivation};
use crate::sheaf::{BatchCochain, NeuralSheaf, PinLayer, PinSpec};
use crate::training::{default_beta, train_detailed, LossKind, TrainConfig, TrainHistory};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "neural-sheaf", version, about = "Neural networks as cellular sheaves")]
pub struct Cli {
    /// Seed for every random draw (overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Root output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// JSON experiment config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run label; the output lands in `<out>/<command>-<label>`.
    #[arg(long, global = true)]
    pub label: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Diffuse one input to equilibrium.
    Converge(ConvergeArgs),
    /// Joint cochain and weight training.
    Train(TrainArgs),
    /// Gradient-descent baseline.
    Sgd(SgdArgs),
    /// Spectral or discord diagnostics of a trained model.
    Diagnose(DiagnoseArgs),
    /// Train over a grid of β·M or total integration time.
    Sweep(SweepArgs),
    /// Write a synthetic dataset.
    Dataset(DatasetArgs),
    /// Compare two models on held-out data.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct ConvergeArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Comma-separated input vector.
    #[arg(long, allow_hyphen_values = true)]
    pub input: Option<String>,
    /// `layer=<input|output|ℓ>,idx=<i[;j…]>,target=<t[;u…]>[,gamma=<hard|γ>]`; repeatable.
    #[arg(long)]
    pub pin: Vec<String>,
    #[arg(long, value_enum)]
    pub init: Option<InitChoice>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct TaskArgs {
    #[arg(long)]
    pub task: Option<DatasetKind>,
    /// Comma-separated layer widths.
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    /// `squared`, `l1`, `pnorm:<p>`, `huber:<τ>`, `cross_entropy`.
    #[arg(long)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub activation: Option<OutputActivation>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub record_every: Option<usize>,
    #[arg(long, value_enum)]
    pub init_mode: Option<InitModeArg>,
}

#[derive(Debug, Args)]
pub struct SgdArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub record_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: DiagnoseMode,
    /// Number of random inputs for the spectrum mode.
    #[arg(long, default_value_t = 50)]
    pub inputs: usize,
    /// Dataset CSV (`x…`, optional `y…` columns) instead of a generated task.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<DatasetKind>,
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub kind: SweepKind,
    /// Comma-separated grid: β·M values, or total times `T = dt·steps`.
    #[arg(long)]
    pub grid: String,
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    #[arg(long)]
    pub task: Option<DatasetKind>,
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub model_a: PathBuf,
    #[arg(long)]
    pub model_b: PathBuf,
    #[arg(long)]
    pub task: Option<DatasetKind>,
    #[arg(long)]
    pub n_test: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitChoice {
    Zeros,
    #[default]
    Random,
    /// Start from the forward pass (pinned coordinates keep their targets).
    Forward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitModeArg {
    Random,
    ForwardPass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnoseMode {
    Spectrum,
    Discord,
    Pinned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Beta,
    T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub n_train: usize,
    pub n_test: usize,
    /// Training seed; the test set uses a derived seed.
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Paraboloid,
            n_train: 300,
            n_test: 300,
            seed: 0,
        }
    }
}

/// Everything a command needs, as read from `--config` and then overridden
/// by flags. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: Option<PathBuf>,
    pub arch: Option<Vec<usize>>,
    pub input: Option<Vec<f64>>,
    pub init: InitChoice,
    pub dataset: DatasetConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    pub sgd: SgdConfig,
    pub pins: Vec<PinSpec>,
    pub out: Option<PathBuf>,
}

/// Load a config file. Also reports which of `train.loss`,
/// `train.output_activation`, `sgd.loss`, `sgd.output_activation` were
/// given explicitly, so task defaults only fill the rest.
pub fn load_config(path: &Path) -> Result<(ExperimentConfig, Vec<String>)> {
    let text = fs::read_to_string(path)?;
    let cfg: ExperimentConfig = serde_json::from_str(&text)?;
    let raw: Value = serde_json::from_str(&text)?;
    let mut explicit = Vec::new();
    for section in ["train", "sgd"] {
        for key in ["loss", "output_activation"] {
            if raw.get(section).and_then(|s| s.get(key)).is_some() {
                explicit.push(format!("{section}.{key}"));
            }
        }
    }
    Ok((cfg, explicit))
}

pub fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.replace('\u{2212}', "-")
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|e| SheafError::Config(format!("bad {what} entry {p:?}: {e}")))
        })
        .collect()
}

/// Parse `layer=1,idx=2,target=0.5,gamma=hard`. Lists inside a field use `;`.
pub fn parse_pin(s: &str) -> Result<PinSpec> {
    let (mut layer, mut idx, mut target, mut gamma) = (None, None, None, None);
    for part in s.split(',') {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| SheafError::Config(format!("pin field {part:?} is not key=value")))?;
        let v = v.trim().replace('\u{2212}', "-");
        match k.trim() {
            "layer" => layer = Some(v),
            "idx" => idx = Some(v),
            "target" => target = Some(v),
            "gamma" => gamma = Some(v),
            other => return Err(SheafError::Config(format!("unknown pin field {other:?}"))),
        }
    }
    let missing = |f: &str| SheafError::Config(format!("pin is missing {f}="));
    let layer = match layer.ok_or_else(|| missing("layer"))?.as_str() {
        "input" => PinLayer::Input,
        "output" => PinLayer::Output,
        l => PinLayer::Hidden(
            l.trim_start_matches("hidden:")
                .parse()
                .map_err(|e| SheafError::Config(format!("bad pin layer {l:?}: {e}")))?,
        ),
    };
    let list = |v: &str, what: &str| parse_list::<f64>(&v.replace(';', ","), what);
    let indices = parse_list::<usize>(&idx.ok_or_else(|| missing("idx"))?.replace(';', ","), "pin index")?;
    let targets = list(&target.ok_or_else(|| missing("target"))?, "pin target")?;
    Ok(match gamma.as_deref() {
        None | Some("hard") => PinSpec::hard(layer, indices, targets),
        Some(g) => PinSpec::soft(
            layer,
            indices,
            targets,
            g.parse()
                .map_err(|e| SheafError::Config(format!("bad pin gamma {g:?}: {e}")))?,
        ),
    })
}

enum Outcome {
    Done,
    /// Files were written but the run diverged or did not converge.
    Failed(String),
}

/// Parse `args` (program name first) and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(Outcome::Done) => EXIT_OK,
        Ok(Outcome::Failed(msg)) => {
            eprintln!("error: {msg}");
            EXIT_RUNTIME
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &SheafError) -> i32 {
    match e {
        SheafError::Diverged { .. } | SheafError::Domain(_) => EXIT_RUNTIME,
        _ => EXIT_USAGE,
    }
}

struct Context {
    cfg: ExperimentConfig,
    explicit: Vec<String>,
    label: String,
    out_root: PathBuf,
}

impl Context {
    fn new(cli: &Cli) -> Result<Context> {
        let (mut cfg, explicit) = match &cli.config {
            Some(p) => load_config(p)?,
            None => (ExperimentConfig::default(), Vec::new()),
        };
        if let Some(seed) = cli.seed {
            cfg.dataset.seed = seed;
            cfg.train.seed = seed;
            cfg.sgd.seed = seed;
            cfg.diffusion.seed = seed;
        }
        let out_root = cli
            .out
            .clone()
            .or_else(|| cfg.out.clone())
            .unwrap_or_else(|| PathBuf::from("runs"));
        cfg.out = Some(out_root.clone());
        let label = cli
            .label
            .clone()
            .unwrap_or_else(|| format!("seed{}", cfg.dataset.seed));
        if label.is_empty() || label.contains(['/', '\\']) {
            return Err(SheafError::Config(format!("invalid label {label:?}")));
        }
        Ok(Context {
            cfg,
            explicit,
            label,
            out_root,
        })
    }

    fn apply_task(&mut self, t: &TaskArgs) -> Result<()> {
        if let Some(k) = t.task {
            self.cfg.dataset.kind = k;
        }
        if let Some(n) = t.n_train {
            self.cfg.dataset.n_train = n;
        }
        if let Some(n) = t.n_test {
            self.cfg.dataset.n_test = n;
        }
        if let Some(a) = &t.arch {
            self.cfg.arch = Some(parse_list(a, "arch")?);
        }
        let kind = self.cfg.dataset.kind;
        let act = |section: &str, current: OutputActivation, explicit: &[String]| {
            t.activation
                .unwrap_or(if explicit.contains(&format!("{section}.output_activation")) {
                    current
                } else {
                    kind.default_activation()
                })
        };
        let loss = |section: &str, current: LossKind, explicit: &[String]| {
            t.loss
                .unwrap_or(if explicit.contains(&format!("{section}.loss")) {
                    current
                } else {
                    kind.default_loss()
                })
        };
        self.cfg.train.output_activation = act("train", self.cfg.train.output_activation, &self.explicit);
        self.cfg.train.loss = loss("train", self.cfg.train.loss, &self.explicit);
        self.cfg.sgd.output_activation = act("sgd", self.cfg.sgd.output_activation, &self.explicit);
        self.cfg.sgd.loss = loss("sgd", self.cfg.sgd.loss, &self.explicit);
        if self.cfg.arch.is_none() {
            self.cfg.arch = Some(vec![2, 30, kind.output_dim()]);
        }
        let arch = self.cfg.arch.as_ref().unwrap();
        if arch.len() < 2 || arch[0] != 2 || *arch.last().unwrap() != kind.output_dim() {
            return Err(SheafError::Config(format!(
                "architecture {arch:?} does not map 2 inputs to the {} outputs of {kind}",
                kind.output_dim()
            )));
        }
        if self.cfg.dataset.n_train == 0 || self.cfg.dataset.n_test == 0 {
            return Err(SheafError::Config("dataset sizes must be at least 1".into()));
        }
        Ok(())
    }

    fn split(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.cfg.dataset;
        make_split(d.kind, d.n_train, d.n_test, d.seed)
    }

    /// Create the run directory and write the config snapshot.
    fn open(&self, command: &str) -> Result<PathBuf> {
        let dir = self.out_root.join(format!("{command}-{}", self.label));
        fs::create_dir_all(&dir)?;
        write_json(&dir.join("config.json"), &self.cfg)?;
        Ok(dir)
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn load_model(path: Option<&PathBuf>) -> Result<NetworkSpec> {
    let p = path.ok_or_else(|| SheafError::Config("no model given (--model or config \"model\")".into()))?;
    read_model(p)
}

fn read_model(p: &Path) -> Result<NetworkSpec> {
    NetworkSpec::load(p).map_err(|e| match e {
        SheafError::Io(io) => SheafError::Config(format!("cannot read model {}: {io}", p.display())),
        other => other,
    })
}

fn execute(cli: Cli) -> Result<Outcome> {
    let mut ctx = Context::new(&cli)?;
    match cli.command {
        Command::Converge(a) => cmd_converge(&mut ctx, a),
        Command::Train(a) => cmd_train(&mut ctx, a),
        Command::Sgd(a) => cmd_sgd(&mut ctx, a),
        Command::Diagnose(a) => cmd_diagnose(&mut ctx, a),
        Command::Sweep(a) => cmd_sweep(&mut ctx, a),
        Command::Dataset(a) => cmd_dataset(&mut ctx, a),
        Command::Compare(a) => cmd_compare(&mut ctx, a),
    }
}

fn cmd_converge(ctx: &mut Context, a: ConvergeArgs) -> Result<Outcome> {
    let cfg = &mut ctx.cfg;
    if a.model.is_some() {
        cfg.model = a.model;
    }
    if let Some(s) = &a.input {
        cfg.input = Some(parse_list(s, "input")?);
    }
    for p in &a.pin {
        cfg.pins.push(parse_pin(p)?);
    }
    if let Some(i) = a.init {
        cfg.init = i;
    }
    let d = &mut cfg.diffusion;
    d.dt = a.dt.unwrap_or(d.dt);
    d.alpha = a.alpha.unwrap_or(d.alpha);
    d.max_steps = a.max_steps.unwrap_or(d.max_steps);
    d.tol = a.tol.unwrap_or(d.tol);
    d.validate()?;

    let spec = load_model(cfg.model.as_ref())?;
    let x = cfg
        .input
        .clone()
        .ok_or_else(|| SheafError::Config("no input given (--input or config \"input\")".into()))?;
    let sheaf = NeuralSheaf::with_pins(spec.clone(), cfg.pins.clone())?;
    let forward = forward_pass(&spec, &x)?;
    let init = match cfg.init {
        InitChoice::Zeros => Init::Zeros,
        InitChoice::Random => Init::Random,
        InitChoice::Forward => Init::Given(sheaf.forward_cochain(&x)?),
    };
    let start = initial_cochain(&sheaf, &x, &init, cfg.diffusion.seed)?;

    let dir = ctx.open("converge")?;
    let summary_path = dir.join("summary.json");
    let traj = match run_diffusion(&sheaf, start, &ctx.cfg.diffusion) {
        Ok(t) => t,
        Err(SheafError::Diverged { step }) => {
            write_json(
                &summary_path,
                &json!({"config": ctx.cfg, "diverged_at": step, "converged": false}),
            )?;
            return Ok(Outcome::Failed(format!("diffusion diverged at step {step}")));
        }
        Err(e) => return Err(e),
    };
    traj.write_csv(create(&dir.join("trajectory.csv"))?)?;
    traj.write_crossings_csv(create(&dir.join("crossings.csv"))?)?;
    let output = traj.output.last().cloned().unwrap_or_default();
    let fwd = forward.y_hat.to_vec();
    let gap = output
        .iter()
        .zip(&fwd)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    write_json(
        &summary_path,
        &json!({
            "config": ctx.cfg,
            "converged": traj.converged,
            "steps": traj.steps_taken,
            "final_velocity": traj.final_velocity,
            "final_discord": traj.discord_total.last(),
            "final_energy": traj.energy.last(),
            "output": output,
            "forward_output": fwd,
            "final_gap": gap,
            "crossings": traj.crossings.len(),
            "sliding_episodes": traj.sliding_episodes.len(),
        }),
    )?;
    if traj.converged {
        Ok(Outcome::Done)
    } else {
        Ok(Outcome::Failed(format!(
            "no convergence within {} steps (velocity {:e})",
            traj.steps_taken, traj.final_velocity
        )))
    }
}

fn history_summary(h: &TrainHistory) -> Value {
    json!({
        "final_train_loss": h.final_train_loss(),
        "final_test_loss": h.final_test_loss(),
        "final_train_accuracy": h.train_accuracy.last().copied().flatten(),
        "final_test_accuracy": h.test_accuracy.last().copied().flatten(),
        "final_discord": h.discord_total.last(),
        "records": h.len(),
    })
}

fn cmd_train(ctx: &mut Context, a: TrainArgs) -> Result<Outcome> {
    ctx.apply_task(&a.task)?;
    let t = &mut ctx.cfg.train;
    t.steps = a.steps.unwrap_or(t.steps);
    if a.beta.is_some() {
        t.beta = a.beta;
    }
    t.dt = a.dt.unwrap_or(t.dt);
    t.alpha = a.alpha.unwrap_or(t.alpha);
    t.lambda = a.lambda.unwrap_or(t.lambda);
    t.mu = a.mu.unwrap_or(t.mu);
    t.record_every = a.record_every.unwrap_or(t.record_every);
    if let Some(m) = a.init_mode {
        t.init_mode = match m {
            InitModeArg::Random => crate::training::InitMode::Random,
            InitModeArg::ForwardPass => crate::training::InitMode::ForwardPass,
        };
    }
    if t.beta.is_none() {
        t.beta = Some(default_beta(ctx.cfg.dataset.n_train)?);
    }
    ctx.cfg.train.validate()?;
    let (train, test) = ctx.split()?;
    let arch = ctx.cfg.arch.clone().unwrap();
    let dir = ctx.open("train")?;
    let result = train_detailed(&arch, &train, Some(&test), &ctx.cfg.train)?;
    let (history, outcome, diverged) = match result {
        Ok((spec, h)) => {
            spec.save(dir.join("model.json"))?;
            (h, Outcome::Done, None)
        }
        Err(div) => (
            div.history,
            Outcome::Failed(format!("training diverged at step {}", div.step)),
            Some(div.step),
        ),
    };
    history.write_csv(create(&dir.join("history.csv"))?)?;
    let mut summary = history_summary(&history);
    summary["config"] = serde_json::to_value(&ctx.cfg)?;
    summary["beta"] = json!(ctx.cfg.train.beta);
    summary["diverged_at"] = json!(diverged);
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(outcome)
}

fn cmd_sgd(ctx: &mut Context, a: SgdArgs) -> Result<Outcome> {
    ctx.apply_task(&a.task)?;
    let s = &mut ctx.cfg.sgd;
    s.lr = a.lr.unwrap_or(s.lr);
    s.epochs = a.epochs.unwrap_or(s.epochs);
    s.record_every = a.record_every.unwrap_or(s.record_every);
    if !(s.lr >= 0.0 && s.lr.is_finite()) || s.record_every == 0 {
        return Err(SheafError::Config("sgd needs lr ≥ 0 and record_every ≥ 1".into()));
    }
    s.loss.validate_for(s.output_activation)?;
    let (train, test) = ctx.split()?;
    let arch = ctx.cfg.arch.clone().unwrap();
    let dir = ctx.open("sgd")?;
    match sgd_train(&arch, &train, Some(&test), &ctx.cfg.sgd) {
        Ok((spec, h)) => {
            spec.save(dir.join("model.json"))?;
            h.write_csv(create(&dir.join("history.csv"))?)?;
            let mut summary = history_summary(&h);
            summary["config"] = serde_json::to_value(&ctx.cfg)?;
            write_json(&dir.join("summary.json"), &summary)?;
            Ok(Outcome::Done)
        }
        Err(SheafError::Diverged { step }) => {
            write_json(
                &dir.join("summary.json"),
                &json!({"config": ctx.cfg, "diverged_at": step}),
            )?;
            Ok(Outcome::Failed(format!(
                "gradient descent diverged at epoch {step}"
            )))
        }
        Err(e) => Err(e),
    }
}

fn cmd_diagnose(ctx: &mut Context, a: DiagnoseArgs) -> Result<Outcome> {
    if a.model.is_some() {
        ctx.cfg.model = a.model.clone();
    }
    if let Some(k) = a.task {
        ctx.cfg.dataset.kind = k;
    }
    if let Some(n) = a.n {
        ctx.cfg.dataset.n_train = n;
    }
    let spec = load_model(ctx.cfg.model.as_ref())?;
    let seed = ctx.cfg.dataset.seed;
    let cfg_value = serde_json::to_value(&ctx.cfg)?;
    let data = || -> Result<(ndarray::Array2<f64>, Option<Dataset>)> {
        match &a.data {
            Some(p) => {
                let loaded = read_dataset_csv(File::open(p)?)?;
                let x = loaded.x.clone();
                let ds = loaded
                    .y
                    .is_some()
                    .then(|| loaded.into_dataset(ctx.cfg.dataset.kind))
                    .transpose()?;
                Ok((x, ds))
            }
            None => {
                let d = make_dataset(ctx.cfg.dataset.kind, ctx.cfg.dataset.n_train, seed)?;
                Ok((d.x.clone(), Some(d)))
            }
        }
    };
    match a.mode {
        DiagnoseMode::Spectrum => {
            if a.inputs == 0 {
                return Err(SheafError::Config("--inputs must be at least 1".into()));
            }
            let sweep = spectral_sweep(&spec, a.inputs, seed)?;
            let dir = ctx.open("diagnose-spectrum")?;
            let mut wr = csv::Writer::from_writer(create(&dir.join("block_energy.csv"))?);
            wr.write_record(["sample", "block", "fiedler", "top"])
                .map_err(crate::diffusion::csv_err)?;
            for (i, s) in sweep.samples.iter().enumerate() {
                for b in restricted_spectrum(&spec, &s.input)?.per_block_energy {
                    wr.write_record([i.to_string(), b.block, b.fiedler.to_string(), b.top.to_string()])
                        .map_err(crate::diffusion::csv_err)?;
                }
            }
            wr.flush()?;
            write_json(&dir.join("spectrum.json"), &sweep)?;
            write_json(
                &dir.join("summary.json"),
                &json!({"config": cfg_value, "lambda1_median": sweep.lambda1.median}),
            )?;
            Ok(Outcome::Done)
        }
        DiagnoseMode::Discord => {
            let (x, labelled) = data()?;
            if x.nrows() != spec.input_dim() {
                return Err(SheafError::Config("dataset inputs do not match the model".into()));
            }
            let dir = ctx.open("diagnose-discord")?;
            let (batch, failed, source) = match labelled {
                Some(d) => {
                    let (b, f) = pinned_batch(&spec, &d, &ctx.cfg.diffusion)?;
                    (b, f, "label_pinned")
                }
                None => {
                    let sheaf = NeuralSheaf::new(spec.clone())?;
                    (BatchCochain::forward(&sheaf, x.view(), None)?, 0, "forward_pass")
                }
            };
            let recs = residual_scatter(&spec, &batch)?;
            write_scatter_csv(&recs, create(&dir.join("scatter.csv"))?)?;
            let inactive_max = recs
                .iter()
                .filter(|r| !r.active)
                .map(|r| r.weight_residual.abs())
                .fold(0.0, f64::max);
            write_json(
                &dir.join("summary.json"),
                &json!({"config": cfg_value, "equilibrium": source, "records": recs.len(),
                        "non_converged": failed, "max_inactive_weight_residual": inactive_max}),
            )?;
            Ok(Outcome::Done)
        }
        DiagnoseMode::Pinned => {
            let (_, labelled) = data()?;
            let d = labelled.ok_or_else(|| SheafError::Config("pinned mode needs labels".into()))?;
            let report = pinned_discord(&spec, &d, &ctx.cfg.diffusion)?;
            let dir = ctx.open("diagnose-pinned")?;
            let mut wr = csv::Writer::from_writer(create(&dir.join("pinned.csv"))?);
            wr.write_record(["edge", "mean", "std"])
                .map_err(crate::diffusion::csv_err)?;
            for ((e, m), s) in report.edge_names.iter().zip(&report.mean).zip(&report.std) {
                wr.write_record([e.clone(), m.to_string(), s.to_string()])
                    .map_err(crate::diffusion::csv_err)?;
            }
            wr.flush()?;
            write_json(
                &dir.join("summary.json"),
                &json!({"config": cfg_value, "report": report}),
            )?;
            if report.non_converged > 0 {
                return Ok(Outcome::Failed(format!(
                    "{} of {} pinned diffusions did not converge",
                    report.non_converged, report.n_samples
                )));
            }
            Ok(Outcome::Done)
        }
    }
}

fn cmd_sweep(ctx: &mut Context, a: SweepArgs) -> Result<Outcome> {
    ctx.apply_task(&a.task)?;
    let grid: Vec<f64> = parse_list(&a.grid, "grid")?;
    if grid.is_empty() || grid.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
        return Err(SheafError::Config("grid values must be positive".into()));
    }
    let t = &mut ctx.cfg.train;
    t.steps = a.steps.unwrap_or(t.steps);
    t.dt = a.dt.unwrap_or(t.dt);
    ctx.cfg.train.validate()?;
    let (train, test) = ctx.split()?;
    let arch = ctx.cfg.arch.clone().unwrap();
    let m = ctx.cfg.dataset.n_train as f64;
    let dir = ctx.open("sweep")?;
    let mut wr = csv::Writer::from_writer(create(&dir.join("sweep.csv"))?);
    wr.write_record([
        "parameter",
        "beta",
        "steps",
        "final_train_loss",
        "final_test_loss",
        "status",
    ])
    .map_err(crate::diffusion::csv_err)?;
    let mut failures = 0;
    for &g in &grid {
        let mut cfg = ctx.cfg.train.clone();
        match a.kind {
            SweepKind::Beta => cfg.beta = Some(g / m),
            SweepKind::T => {
                cfg.steps = (g / cfg.dt).round() as usize;
                if cfg.beta.is_none() {
                    cfg.beta = Some(1.0 / m);
                }
            }
        }
        cfg.record_every = cfg.steps.max(1);
        let (train_loss, test_loss, status) = match train_detailed(&arch, &train, Some(&test), &cfg) {
            Ok(Ok((_, h))) => (h.final_train_loss(), h.final_test_loss(), "ok".to_string()),
            Ok(Err(div)) => (None, None, format!("diverged at step {}", div.step)),
            Err(e) => (None, None, format!("error: {e}")),
        };
        if status != "ok" {
            failures += 1;
        }
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        wr.write_record([
            g.to_string(),
            cfg.beta.unwrap().to_string(),
            cfg.steps.to_string(),
            opt(train_loss),
            opt(test_loss),
            status,
        ])
        .map_err(crate::diffusion::csv_err)?;
        wr.flush()?;
    }
    write_json(
        &dir.join("summary.json"),
        &json!({"config": ctx.cfg, "kind": a.kind, "grid": grid, "failed_points": failures}),
    )?;
    Ok(Outcome::Done)
}

fn cmd_dataset(ctx: &mut Context, a: DatasetArgs) -> Result<Outcome> {
    if let Some(k) = a.task {
        ctx.cfg.dataset.kind = k;
    }
    if let Some(n) = a.n {
        ctx.cfg.dataset.n_train = n;
    }
    let d = make_dataset(
        ctx.cfg.dataset.kind,
        ctx.cfg.dataset.n_train,
        ctx.cfg.dataset.seed,
    )?;
    let dir = ctx.open("dataset")?;
    d.write_csv(create(&dir.join("dataset.csv"))?)?;
    write_json(
        &dir.join("summary.json"),
        &json!({"config": ctx.cfg, "samples": d.len()}),
    )?;
    Ok(Outcome::Done)
}

fn cmd_compare(ctx: &mut Context, a: CompareArgs) -> Result<Outcome> {
    if let Some(k) = a.task {
        ctx.cfg.dataset.kind = k;
    }
    if let Some(n) = a.n_test {
        ctx.cfg.dataset.n_test = n;
    }
    let ma = read_model(&a.model_a)?;
    let mb = read_model(&a.model_b)?;
    let d = &ctx.cfg.dataset;
    let test = make_dataset(d.kind, d.n_test, test_seed(d.seed))?;
    let report = compare(&ma, &mb, &test)?;
    let dir = ctx.open("compare")?;
    write_json(
        &dir.join("summary.json"),
        &json!({"config": ctx.cfg, "model_a": a.model_a, "model_b": a.model_b, "report": report}),
    )?;
    Ok(Outcome::Done)
}
