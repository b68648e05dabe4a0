use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use prm_core::annotate::HardLabelRule;
use prm_core::env::{generate_problems, HorizonRange, StochasticPolicy};
use prm_core::harness::{
    annotate_corpus, attach_problems, emit_curves, problem_index, run_experiment, sample_traces,
    step_dataset, AnnotationConfig, EnvConfig, ExperimentConfig,
};
use prm_core::prm::{train_with_report, AggregationRule, TrainConfig};
use prm_core::search::{
    run_matrix, run_search, write_matrix_csv, MatrixConfig, SearchConfig, Strategy,
};
use prm_core::seed::split;
use prm_core::similarity::set_similarity;
use prm_core::trace::{
    read_labels, read_problems, read_traces, write_jsonl, write_labels, write_problems,
    write_traces, BudgetCaps, Domain, Problem,
};
use prm_core::PrmModel;

#[derive(Parser)]
#[command(
    name = "prm",
    version,
    about = "Process reward models and reward-guided search on synthetic tasks"
)]
struct Cli {
    /// Master seed. Overrides the seed in a config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Directory for outputs without an explicit path.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate problems and sampled traces.
    GenData(GenData),
    /// Label traces by rollouts and keep the ensemble-consistent ones.
    Annotate(Annotate),
    /// Train a step scorer on labels.
    TrainPrm(TrainPrm),
    /// Run one search strategy over a problem set.
    Search(Search),
    /// Run the strategy by budget matrix.
    RunMatrix(RunMatrix),
    /// Compare activation patterns of two trace sets.
    Similarity(Similarity),
    /// Run the whole pipeline from a config file.
    RunExperiment(RunExperiment),
    /// Turn results.csv into curve files.
    EmitCurves(EmitCurves),
}

#[derive(Args)]
struct PolicyArgs {
    #[arg(long, default_value_t = 0.2)]
    error_rate: f64,
    #[arg(long, default_value_t = 0.1)]
    recovery_rate: f64,
    #[arg(long, default_value_t = 1.0)]
    spread: f64,
}

impl PolicyArgs {
    fn policy(&self, seed: u64) -> Result<StochasticPolicy> {
        let env = EnvConfig {
            error_rate: self.error_rate,
            recovery_rate: self.recovery_rate,
            spread: self.spread,
            ..EnvConfig::default()
        };
        Ok(env.policy(split(seed, 3))?)
    }
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value = "math_chain")]
    domain: Domain,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 4)]
    traces_per_problem: usize,
    #[arg(long, default_value_t = 4)]
    horizon_min: usize,
    #[arg(long, default_value_t = 8)]
    horizon_max: usize,
    #[command(flatten)]
    policy: PolicyArgs,
    /// Defaults to <out-dir>/problems.jsonl.
    #[arg(long)]
    problems_out: Option<PathBuf>,
    /// Defaults to <out-dir>/traces.jsonl.
    #[arg(long)]
    traces_out: Option<PathBuf>,
}

#[derive(Args)]
struct Annotate {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    problems: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    k: usize,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[arg(long, default_value_t = 3)]
    ensemble: usize,
    /// Rollout error rates, cycled over annotators.
    #[arg(long, value_delimiter = ',', default_values_t = [0.05, 0.1, 0.2])]
    error_rates: Vec<f64>,
    /// Use the success-fraction threshold instead of any-success.
    #[arg(long)]
    threshold_rule: bool,
    #[arg(long, default_value_t = 0)]
    window: usize,
    #[command(flatten)]
    policy: PolicyArgs,
}

#[derive(Args)]
struct TrainPrm {
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// TOML file with training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    /// Feature noise level.
    #[arg(long, default_value_t = 0.25)]
    sigma: f64,
    #[arg(long, default_value = "prm_min")]
    aggregation: AggregationRule,
    #[arg(long)]
    label_budget: Option<usize>,
}

#[derive(Args)]
struct Search {
    #[arg(long)]
    strategy: Strategy,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    problems: PathBuf,
    /// Generation units per problem; sizes the strategy to fit.
    #[arg(long)]
    budget: Option<u64>,
    /// Candidates when no budget is given.
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    policy: PolicyArgs,
}

#[derive(Args)]
struct RunMatrix {
    /// TOML file with matrix settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    problems: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    policy: PolicyArgs,
}

#[derive(Args)]
struct Similarity {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    set_a: PathBuf,
    #[arg(long)]
    set_b: PathBuf,
    /// Problem files covering both sets.
    #[arg(long, required = true)]
    problems: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunExperiment {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct EmitCurves {
    #[arg(long)]
    results: PathBuf,
    /// Defaults to <out-dir>/curves.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn out_path(cli_out: &Path, explicit: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    let path = explicit.clone().unwrap_or_else(|| cli_out.join(name));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(path)
}

fn load_model(path: &Path) -> Result<PrmModel> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let model: PrmModel =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    model.validate()?;
    Ok(model)
}

fn load_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn index(problems: &[Problem]) -> HashMap<String, Problem> {
    problem_index(problems)
}

/// Returns whether every embedded check passed.
fn run(cli: Cli) -> Result<bool> {
    if let Some(w) = cli.workers {
        if w == 0 {
            bail!("--workers must be at least 1");
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers.unwrap_or(0))
        .build()?;
    pool.install(|| dispatch(&cli))
}

fn dispatch(cli: &Cli) -> Result<bool> {
    let seed = cli.seed.unwrap_or(0);
    let out_dir = &cli.out_dir;
    match &cli.command {
        Command::GenData(a) => {
            let horizon = HorizonRange::new(a.horizon_min, a.horizon_max)?;
            let problems = generate_problems(a.domain, a.count, split(seed, 1), horizon)?;
            let traces = sample_traces(&problems, &a.policy.policy(seed)?, a.traces_per_problem);
            let p = out_path(out_dir, &a.problems_out, "problems.jsonl")?;
            let t = out_path(out_dir, &a.traces_out, "traces.jsonl")?;
            write_problems(&p, &problems)?;
            write_traces(&t, &traces)?;
            println!(
                "{} problems -> {}\n{} traces -> {}",
                problems.len(),
                p.display(),
                traces.len(),
                t.display()
            );
        }
        Command::Annotate(a) => {
            let problems = index(&read_problems(&a.problems)?);
            let traces = read_traces(&a.traces)?;
            let config = AnnotationConfig {
                k: a.k,
                tau: a.tau,
                hard_label_rule: if a.threshold_rule {
                    HardLabelRule::ThresholdTau
                } else {
                    HardLabelRule::AnySuccess
                },
                ensemble: a.ensemble,
                annotator_error_rates: a.error_rates.clone(),
                window: a.window,
            };
            let ann = annotate_corpus(
                &problems,
                &traces,
                a.policy.policy(seed)?,
                &config,
                split(seed, 4),
            )?;
            let filtered = ann.filtered(&config)?;
            let labeled = attach_problems(&problems, &filtered.retained)?;
            let out = out_path(out_dir, &a.out, "labels.jsonl")?;
            write_labels(&out, &labeled)?;
            let s = filtered.stats;
            println!(
                "{} traces, {} inconsistent, {} of {} groups retained -> {}",
                traces.len(),
                ann.inconsistent,
                s.retained,
                s.groups,
                out.display()
            );
        }
        Command::TrainPrm(a) => {
            let labeled = read_labels(&a.labels)?;
            let mut config: TrainConfig = match &a.config {
                Some(path) => load_toml(path)?,
                None => TrainConfig::default(),
            };
            if let Some(h) = a.hidden_dim {
                config.hidden_dim = h;
            }
            if cli.seed.is_some() || a.config.is_none() {
                config.seed = split(seed, 6);
            }
            let env = EnvConfig {
                sigma: a.sigma,
                ..EnvConfig::default()
            };
            let features = env.features(split(seed, 5));
            let dataset = step_dataset(&labeled, &features, a.label_budget)?;
            let (mut model, report) = train_with_report::<f64>(&dataset, features, &config)?;
            model.aggregation = a.aggregation;
            let out = out_path(out_dir, &a.out, "model.json")?;
            std::fs::write(&out, serde_json::to_string_pretty(&model)? + "\n")?;
            println!(
                "{} examples, {} epochs, validation AUC {:.4}, accuracy {:.4} -> {}",
                dataset.len(),
                report.curve.len(),
                report.validation_auc,
                report.validation_accuracy,
                out.display()
            );
        }
        Command::Search(a) => {
            let model = load_model(&a.model)?;
            let problems = read_problems(&a.problems)?;
            let policy = a.policy.policy(seed)?;
            let matrix = MatrixConfig {
                aggregation: model.aggregation,
                ..MatrixConfig::default()
            };
            let runs = problems
                .iter()
                .map(|p| {
                    let config = match a.budget {
                        Some(b) => matrix.for_budget(a.strategy, seed, b, p.horizon()),
                        None => SearchConfig {
                            strategy: a.strategy,
                            n: a.n,
                            aggregation: model.aggregation,
                            seed,
                            caps: BudgetCaps::unlimited(),
                            ..SearchConfig::default()
                        },
                    };
                    run_search(p, &policy, &model, &config)
                })
                .collect::<prm_core::Result<Vec<_>>>()?;
            let out = out_path(out_dir, &a.out, "runs.jsonl")?;
            write_jsonl(&out, &runs)?;
            let correct = runs.iter().filter(|r| r.correct).count();
            println!(
                "{} accuracy {correct}/{} -> {}",
                a.strategy,
                runs.len(),
                out.display()
            );
        }
        Command::RunMatrix(a) => {
            let config: MatrixConfig = match &a.config {
                Some(path) => load_toml(path)?,
                None => MatrixConfig::default(),
            };
            let model = load_model(&a.model)?;
            let problems = read_problems(&a.problems)?;
            let rows = run_matrix(&problems, &a.policy.policy(seed)?, &model, &config)?;
            let out = out_path(out_dir, &a.out, "matrix.csv")?;
            write_matrix_csv(&out, &rows)?;
            println!("{} cells -> {}", rows.len(), out.display());
        }
        Command::Similarity(a) => {
            let model = load_model(&a.model)?;
            let mut problems = HashMap::new();
            for path in &a.problems {
                problems.extend(index(&read_problems(path)?));
            }
            let set_a = read_traces(&a.set_a)?;
            let set_b = read_traces(&a.set_b)?;
            let name = |p: &Path| {
                p.file_stem()
                    .map_or("set".into(), |s| s.to_string_lossy().into_owned())
            };
            let report = set_similarity(
                &model,
                &problems,
                (&name(&a.set_a), &set_a),
                (&name(&a.set_b), &set_b),
            )?;
            let out = out_path(out_dir, &a.out, "similarity.json")?;
            std::fs::write(&out, serde_json::to_string_pretty(&report)? + "\n")?;
            println!(
                "mean_S {:.4}, sum_S {:.4} -> {}",
                report.mean_s,
                report.sum_s,
                out.display()
            );
        }
        Command::RunExperiment(a) => {
            let mut config = ExperimentConfig::load(&a.config)?;
            if let Some(s) = cli.seed {
                config.seed = s;
            }
            let output = run_experiment(&config, out_dir, cli.workers)?;
            for c in &output.checks {
                println!(
                    "[{}] {}: {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                );
            }
            println!("artifacts in {}", out_dir.display());
            return Ok(output.passed());
        }
        Command::EmitCurves(a) => {
            let dir = a.out.clone().unwrap_or_else(|| out_dir.join("curves"));
            let files = emit_curves(&a.results, &dir)?;
            println!("{} curve files -> {}", files.len(), dir.display());
        }
    }
    Ok(true)
}
