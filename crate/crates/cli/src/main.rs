use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use lagscope::discovery::{
    self, predicted_lags, score_edges, score_graph, DiscoveryConfig, DiscoveryError, EdgeMatchConfig, LbmExplainer,
    TemporalKnowledgeGraph, TruthEdge,
};
use lagscope::gradcheck::{self, GradCheckConfig, GradCheckReport};
use lagscope::lbm::{self, Dependency, LbmConfig, LbmError, LbmPreset};
use lagscope::models::{self, Model, ModelConfig, ModelError, ModelKind, TcnVariant, TrainConfig};
use lagscope::series::{self, MultivariateSeries, SeriesError};
use lagscope::synth::{self, GroundTruthGraph, SynthError};

#[derive(Debug, Parser)]
#[command(
    name = "lagscope",
    version,
    about = "Temporal dependency discovery for multivariate time series",
    args_conflicts_with_subcommands = true
)]
struct Cli {
    /// Re-run the command recorded in a config.json written by an earlier run.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory of a replayed run (defaults to the config's directory).
    #[arg(long, value_name = "DIR", requires = "config")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a random sparse linear system and simulate it.
    GenLinear(Output<GenLinearArgs>),
    /// Simulate the fixed six-variable nonlinear system.
    GenNonlinear(Output<GenNonlinearArgs>),
    /// Train a regressor for one target column.
    Train(Output<TrainArgs>),
    /// Learn an importance mask for a trained checkpoint.
    Explain(Output<ExplainArgs>),
    /// Train, explain and recurse into discovered sources.
    Graph(Output<GraphArgs>),
    /// Precision and recall of discovered edges against ground truth.
    Score(Output<ScoreArgs>),
    /// Finite-difference check of every op and model.
    Gradcheck(Output<GradcheckArgs>),
}

/// Command arguments plus the output directory, which is kept out of the
/// recorded config so replays into another directory stay byte-identical.
#[derive(Debug, Args)]
struct Output<A: Args> {
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[command(flatten)]
    args: A,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct GenLinearArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10_000)]
    length: usize,
    /// Redraws allowed when a sampled system diverges.
    #[arg(long, default_value_t = 100)]
    max_attempts: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct GenNonlinearArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30_000)]
    length: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum DataFormat {
    Csv,
    Sml2010,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct DataArgs {
    /// Series file: CSV with a header row, or the SML2010 text format.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = DataFormat::Csv)]
    format: DataFormat,
    /// Target column name or zero-based index (SML2010 defaults to its temperature sensor).
    #[arg(long)]
    target: Option<String>,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Feed raw values instead of per-column z-scores.
    #[arg(long)]
    no_standardize: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct ModelArgs {
    #[arg(long, default_value = "tcn")]
    model: String,
    /// Input window length.
    #[arg(long, default_value_t = 300)]
    tau: usize,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 3)]
    rhn_depth: usize,
    #[arg(long, default_value_t = 0.01)]
    gamma: f64,
    #[arg(long, default_value_t = 0.01)]
    step_size: f64,
    #[arg(long, default_value_t = 7)]
    tcn_kernel: usize,
    #[arg(long, default_value_t = 16)]
    tcn_channels: usize,
    /// Residual blocks; by default the fewest covering the window.
    #[arg(long)]
    tcn_levels: Option<usize>,
    #[arg(long, default_value = "default")]
    tcn_variant: String,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct MaskArgs {
    #[arg(long, value_enum, default_value_t = Preset::Linear)]
    preset: Preset,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, default_value_t = 0.1)]
    mask_lr: f64,
    /// Test windows per mask step.
    #[arg(long, default_value_t = 512)]
    mask_batch: usize,
    #[arg(long, default_value_t = 1)]
    restarts: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Preset {
    Linear,
    Nonlinear,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct ExplainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    data: DataArgs,
    /// model.json written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    mask: MaskArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct GraphArgs {
    #[command(flatten)]
    #[serde(flatten)]
    data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    mask: MaskArgs,
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct ScoreArgs {
    /// dependencies.json from `explain` or graph.json from `graph`.
    #[arg(long)]
    predicted: PathBuf,
    /// truth.json from a generator.
    #[arg(long)]
    truth: PathBuf,
    /// Required for graph input; dependency files carry their own target.
    #[arg(long)]
    target: Option<usize>,
    #[arg(long, default_value_t = 5)]
    tolerance: usize,
    /// Graph edge depth to score.
    #[arg(long, default_value_t = 1)]
    depth: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    points: usize,
}

/// The reproducibility record written next to every run's outputs.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "command", content = "args", rename_all = "kebab-case")]
enum RunConfig {
    GenLinear(GenLinearArgs),
    GenNonlinear(GenNonlinearArgs),
    Train(TrainArgs),
    Explain(ExplainArgs),
    Graph(GraphArgs),
    Score(ScoreArgs),
    Gradcheck(GradcheckArgs),
}

#[derive(Debug)]
struct GradientMismatch(f64);

impl std::fmt::Display for GradientMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "gradient check failed: max relative error {:.3e}", self.0)
    }
}

impl std::error::Error for GradientMismatch {}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
enum Failure {
    Validation(anyhow::Error),
    Numerical(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let numerical = e.chain().any(|cause| {
            cause.is::<GradientMismatch>()
                || matches!(cause.downcast_ref::<ModelError>(), Some(ModelError::NonFiniteLoss { .. }))
                || matches!(cause.downcast_ref::<SynthError>(), Some(SynthError::Exhausted { .. }))
                || matches!(
                    cause.downcast_ref::<DiscoveryError>().map(DiscoveryError::root),
                    Some(DiscoveryError::Model(ModelError::NonFiniteLoss { .. }))
                )
                || matches!(
                    cause.downcast_ref::<LbmError>(),
                    Some(LbmError::Model(ModelError::NonFiniteLoss { .. }))
                )
        });
        if numerical {
            Failure::Numerical(e)
        } else {
            Failure::Validation(e)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    lagscope::parallel::configure_threads(None);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(e)) => {
            eprintln!("numerical abort: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let (config, out) = match (cli.config, cli.command) {
        (Some(path), _) => {
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let config: RunConfig =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            let out = cli
                .out
                .or_else(|| path.parent().map(Path::to_path_buf))
                .unwrap_or_else(|| PathBuf::from("."));
            (config, out)
        }
        (None, Some(command)) => match command {
            Command::GenLinear(o) => (RunConfig::GenLinear(o.args), o.out),
            Command::GenNonlinear(o) => (RunConfig::GenNonlinear(o.args), o.out),
            Command::Train(o) => (RunConfig::Train(o.args), o.out),
            Command::Explain(o) => (RunConfig::Explain(o.args), o.out),
            Command::Graph(o) => (RunConfig::Graph(o.args), o.out),
            Command::Score(o) => (RunConfig::Score(o.args), o.out),
            Command::Gradcheck(o) => (RunConfig::Gradcheck(o.args), o.out),
        },
        (None, None) => {
            return Err(Failure::Validation(anyhow!(
                "a subcommand or --config is required; see `lagscope --help`"
            )))
        }
    };
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write(&out, "config.json", &format!("{}\n", serde_json::to_string_pretty(&config).expect("config serializes")))?;
    match &config {
        RunConfig::GenLinear(a) => gen_linear(a, &out),
        RunConfig::GenNonlinear(a) => gen_nonlinear(a, &out),
        RunConfig::Train(a) => train(a, &out),
        RunConfig::Explain(a) => explain(a, &out),
        RunConfig::Graph(a) => graph(a, &out),
        RunConfig::Score(a) => score(a, &out),
        RunConfig::Gradcheck(a) => gradcheck(a, &out),
    }
    .map_err(Failure::from)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn gen_linear(a: &GenLinearArgs, out: &Path) -> Result<()> {
    let (graph, series) = synth::generate_linear_case(a.seed, a.length, a.max_attempts)?;
    write(out, "series.csv", &series.to_csv_string())?;
    write(out, "truth.json", &graph.to_json())?;
    println!("{} variables, {} edges, {} samples", graph.n_vars, graph.edges.len(), series.len());
    Ok(())
}

fn gen_nonlinear(a: &GenNonlinearArgs, out: &Path) -> Result<()> {
    let (series, graph) = synth::simulate_nonlinear(a.length, a.seed)?;
    write(out, "series.csv", &series.to_csv_string())?;
    write(out, "truth.json", &graph.to_json())?;
    println!("{} variables, {} edges, {} samples", graph.n_vars, graph.edges.len(), series.len());
    Ok(())
}

/// Loads the series and resolves the target column.
fn load(d: &DataArgs) -> Result<(MultivariateSeries, usize)> {
    let (series, default_target) = match d.format {
        DataFormat::Csv => (series::load_csv(&d.data, b',', true)?, None),
        DataFormat::Sml2010 => {
            let (s, t) = series::load_sml2010(&d.data)?;
            (s, Some(t))
        }
    };
    let target = match (&d.target, default_target) {
        (Some(t), _) => match series.index_of(t) {
            Some(i) => i,
            None => t
                .parse::<usize>()
                .ok()
                .filter(|&i| i < series.n_vars())
                .ok_or_else(|| SeriesError::MissingColumn(t.clone()))?,
        },
        (None, Some(t)) => t,
        (None, None) => bail!("--target is required for CSV input"),
    };
    Ok((series, target))
}

fn model_config(m: &ModelArgs, n_vars: usize) -> Result<ModelConfig> {
    let kind: ModelKind = m.model.parse()?;
    let mut cfg = ModelConfig::new(kind, n_vars, m.tau);
    cfg.hidden = m.hidden;
    cfg.rhn_depth = m.rhn_depth;
    cfg.gamma = m.gamma;
    cfg.step_size = m.step_size;
    cfg.tcn.kernel = m.tcn_kernel;
    cfg.tcn.channels = m.tcn_channels;
    cfg.tcn.levels = m.tcn_levels;
    cfg.tcn.variant = m.tcn_variant.parse::<TcnVariant>()?;
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(m: &ModelArgs, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: m.lr,
        epochs: m.epochs,
        batch_size: m.batch_size,
        seed,
    }
}

fn lbm_config(m: &MaskArgs) -> Result<LbmConfig> {
    let mut cfg = LbmConfig::preset(match m.preset {
        Preset::Linear => LbmPreset::Linear,
        Preset::Nonlinear => LbmPreset::Nonlinear,
    });
    cfg.steps = m.steps;
    cfg.learning_rate = m.mask_lr;
    cfg.batch_size = m.mask_batch;
    cfg.restarts = m.restarts;
    cfg.validate()?;
    Ok(cfg)
}

/// Windows split into train and test partitions.
fn datasets(
    series: &MultivariateSeries,
    target: usize,
    window: usize,
    d: &DataArgs,
) -> Result<(series::SupervisedDataset, series::SupervisedDataset)> {
    let data = if d.no_standardize {
        series::make_windows(series, target, window, d.stride)?
    } else {
        series::make_windows(&series::standardize(series)?.0, target, window, d.stride)?
    };
    Ok(series::split_train_test(&data, d.train_fraction)?)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn train(a: &TrainArgs, out: &Path) -> Result<()> {
    let (series, target) = load(&a.data)?;
    let cfg = model_config(&a.model, series.n_vars())?;
    let (train, test) = datasets(&series, target, cfg.window, &a.data)?;
    let mut model = Model::new(cfg, a.seed)?;
    let report = models::train(&mut model, &train, Some(&test), &train_config(&a.model, a.seed))?;
    let mut csv = String::from("epoch,train_mse,test_mse\n");
    for e in &report.history {
        csv.push_str(&format!("{},{},{}\n", e.epoch, e.train_mse, opt(e.test_mse)));
    }
    write(out, "loss.csv", &csv)?;
    write(out, "model.json", &model.to_json())?;
    println!(
        "{} on {}: train mse {}, test mse {}",
        model.kind().name(),
        series.names()[target],
        opt(report.final_train_mse()),
        opt(report.final_test_mse())
    );
    Ok(())
}

/// Contents of dependencies.json.
#[derive(Debug, Serialize, Deserialize)]
struct DependencyReport {
    target: usize,
    target_name: String,
    threshold: f64,
    dependencies: Vec<Dependency>,
}

fn explain(a: &ExplainArgs, out: &Path) -> Result<()> {
    let (series, target) = load(&a.data)?;
    let text = fs::read_to_string(&a.checkpoint).with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let model = Model::from_json(&text)?;
    if model.config().n_vars != series.n_vars() {
        bail!(
            "checkpoint expects {} variables, data has {}",
            model.config().n_vars,
            series.n_vars()
        );
    }
    let (_, test) = datasets(&series, target, model.config().window, &a.data)?;
    let cfg = lbm_config(&a.mask)?;
    let mask = lbm::explain(&model, &test, &cfg, a.seed)?;
    write(out, "soft_map.csv", &lbm::soft_map_csv(&mask.soft, series.names()))?;
    write(out, "binary_map.csv", &lbm::binary_map_csv(&mask.binary, series.names()))?;
    write(out, "heatmap.pgm", &lbm::heatmap_pgm(&mask.soft)?)?;
    let report = DependencyReport {
        target,
        target_name: series.names()[target].clone(),
        threshold: mask.threshold,
        dependencies: lbm::extract_dependencies(&mask.binary),
    };
    write(out, "dependencies.json", &serde_json::to_string_pretty(&report)?)?;
    for d in report.dependencies.iter().filter(|d| d.present) {
        println!("{} -> {}: lags {:?}", series.names()[d.variable], report.target_name, d.lags);
    }
    Ok(())
}

fn graph(a: &GraphArgs, out: &Path) -> Result<()> {
    let (series, target) = load(&a.data)?;
    let mut cfg = DiscoveryConfig::new(model_config(&a.model, series.n_vars())?, lbm_config(&a.mask)?);
    cfg.train = train_config(&a.model, a.seed);
    cfg.train_fraction = a.data.train_fraction;
    cfg.stride = a.data.stride;
    cfg.standardize = !a.data.no_standardize;
    cfg.seed = a.seed;
    cfg.max_depth = a.depth;
    let explainer = LbmExplainer { config: cfg };
    let found = discovery::discover(&series, target, a.depth, &explainer)?;
    write(out, "graph.json", &found.graph.to_json())?;
    println!("{} models trained, {} edges", found.explained, found.graph.edges.len());
    Ok(())
}

fn score(a: &ScoreArgs, out: &Path) -> Result<()> {
    let truth = GroundTruthGraph::from_json(
        &fs::read_to_string(&a.truth).with_context(|| format!("reading {}", a.truth.display()))?,
    )?;
    let text = fs::read_to_string(&a.predicted).with_context(|| format!("reading {}", a.predicted.display()))?;
    let cfg = EdgeMatchConfig { tolerance: a.tolerance };
    let result = if let Ok(deps) = serde_json::from_str::<DependencyReport>(&text) {
        if a.target.is_some_and(|t| t != deps.target) {
            bail!("--target disagrees with the dependency file's target {}", deps.target);
        }
        let truth: Vec<TruthEdge> = truth.edges_into(deps.target).map(TruthEdge::from).collect();
        score_edges(&predicted_lags(&deps.dependencies), &truth, cfg)
    } else {
        let graph = TemporalKnowledgeGraph::from_json(&text)
            .map_err(|_| anyhow!("{} is neither a dependency report nor a graph", a.predicted.display()))?;
        let target = a.target.ok_or_else(|| anyhow!("--target is required when scoring a graph"))?;
        score_graph(&graph, target, a.depth, &truth.edges, cfg)
    };
    write(out, "score.json", &result.to_json())?;
    println!("precision {} recall {} (tolerance {})", result.precision, result.recall, result.tolerance);
    Ok(())
}

#[derive(Debug, Serialize)]
struct GradcheckSummary {
    max_rel_error: f64,
    passed: bool,
    cases: Vec<GradCheckReport>,
}

fn gradcheck(a: &GradcheckArgs, out: &Path) -> Result<()> {
    let cfg = GradCheckConfig {
        seed: a.seed,
        points: a.points,
        ..Default::default()
    };
    let mut cases = gradcheck::op_suite(&cfg)?;
    cases.extend(gradcheck::model_suite(&cfg)?);
    let max_rel_error = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let passed = cases.iter().all(GradCheckReport::passed);
    for c in &cases {
        println!("{:<16} checked {:>4} skipped {:>3} max rel err {:.3e}", c.name, c.checked, c.skipped, c.max_rel_error);
    }
    println!("max relative error {max_rel_error:.3e}");
    let summary = GradcheckSummary {
        max_rel_error,
        passed,
        cases,
    };
    write(out, "gradcheck.json", &serde_json::to_string_pretty(&summary)?)?;
    if !passed {
        return Err(GradientMismatch(max_rel_error).into());
    }
    Ok(())
}
