//! Command-line front end: gen, train, eval, ablate, datascale.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::config::{combined_hash, content_hash, json_hash, ConfigError, RunConfig};
use crate::diffusion::{Checkpoint, Objective, PolicyError, PolicyNetwork, TrainingRecord};
use crate::evaluation::{compute_metrics_with_ci, default_pairs, records_to_jsonl, report_csv, report_markdown, run_protocol, DiffusionPolicy, EvalError, EvalRecord, Level, ReportRow};
use crate::experiment::train_policy;
use crate::kinematics::{KinematicChain, KinematicsError};
use crate::scenario::{self, DatasetStats, Episode, ScenarioError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(ConfigError::Invalid(_) | ConfigError::Parse { .. }) => 1,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "feaslab", version, about = "Feasibility-supervised diffusion policy experiments")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory all input and output paths are relative to.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Worker thread bound.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    pub jobs: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a counterfactual demonstration dataset.
    Gen(GenArgs),
    /// Train one policy.
    Train(TrainArgs),
    /// Evaluate a checkpoint under a perturbation protocol.
    Eval(EvalArgs),
    /// Train and evaluate the (delta, lambda) grid.
    Ablate(AblateArgs),
    /// Train and evaluate on growing dataset prefixes.
    Datascale(DatascaleArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Episodes to generate.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub count: Option<u64>,
    /// Dataset seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Interference threshold for obstacle placement (m).
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Output dataset path.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Feasibility loss weight; 0 trains plain imitation.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Safety margin (m).
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train on the first N episodes.
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Perturbation protocol: small or large.
    #[arg(long, default_value = "small")]
    pub level: Level,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Evaluation seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Bootstrap replicates.
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Evaluate on the first N episodes.
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Comma-separated safety margins.
    #[arg(long, value_delimiter = ',')]
    pub deltas: Option<Vec<f64>>,
    /// Comma-separated loss weights.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    /// Training and evaluation episodes.
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Training steps per cell.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DatascaleArgs {
    /// Comma-separated training set sizes.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    /// Evaluate every row on the first N episodes.
    #[arg(long)]
    pub eval_episodes: Option<usize>,
    /// Training steps per cell.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, &cli.command);
    cfg.validate()?;
    let ctx = Context::new(cfg, cli.out_dir)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cli.jobs {
        pool = pool.num_threads(j as usize);
    }
    let pool = pool.build().map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    let mut buf: Vec<u8> = Vec::new();
    let result = pool.install(|| {
        let sink: &mut dyn Write = &mut buf;
        match &cli.command {
            Command::Gen(_) => ctx.gen(sink),
            Command::Train(_) => ctx.train(sink),
            Command::Eval(a) => ctx.eval(a, sink),
            Command::Ablate(_) => ctx.ablate(sink),
            Command::Datascale(_) => ctx.datascale(sink),
        }
    });
    let _ = out.write_all(&buf);
    result
}

fn apply_overrides(cfg: &mut RunConfig, command: &Command) {
    fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
        if let Some(v) = v {
            *slot = v.clone();
        }
    }
    match command {
        Command::Gen(a) => {
            if let Some(c) = a.count {
                cfg.count = c as usize;
            }
            set(&mut cfg.seed, &a.seed);
            set(&mut cfg.generation.epsilon, &a.epsilon);
            set(&mut cfg.dataset, &a.dataset);
        }
        Command::Train(a) => {
            set(&mut cfg.train.lambda, &a.lambda);
            set(&mut cfg.train.delta, &a.delta);
            set(&mut cfg.train.model.steps, &a.steps);
            set(&mut cfg.train.model.batch_size, &a.batch_size);
            set(&mut cfg.train.model.learning_rate, &a.learning_rate);
            set(&mut cfg.train.seed, &a.seed);
            if a.episodes.is_some() {
                cfg.train.episodes = a.episodes;
            }
            set(&mut cfg.dataset, &a.dataset);
            set(&mut cfg.train.checkpoint, &a.checkpoint);
        }
        Command::Eval(a) => {
            set(&mut cfg.eval.seed, &a.seed);
            set(&mut cfg.eval.bootstrap_replicates, &a.replicates);
            if a.episodes.is_some() {
                cfg.eval.episodes = a.episodes;
            }
            set(&mut cfg.dataset, &a.dataset);
            set(&mut cfg.train.checkpoint, &a.checkpoint);
        }
        Command::Ablate(a) => {
            set(&mut cfg.ablate.deltas, &a.deltas);
            set(&mut cfg.ablate.lambdas, &a.lambdas);
            set(&mut cfg.ablate.episodes, &a.episodes);
            set(&mut cfg.train.model.steps, &a.steps);
            set(&mut cfg.dataset, &a.dataset);
        }
        Command::Datascale(a) => {
            set(&mut cfg.datascale.sizes, &a.sizes);
            set(&mut cfg.datascale.eval_episodes, &a.eval_episodes);
            set(&mut cfg.train.model.steps, &a.steps);
            set(&mut cfg.dataset, &a.dataset);
        }
    }
}

/// Objective for a loss weight; a zero weight is the plain imitation arm.
pub fn objective_for(lambda: f64, delta: f64) -> Objective {
    if lambda == 0.0 {
        Objective::Imitation
    } else {
        Objective::Feasibility { delta, lambda }
    }
}

fn method_name(objective: Objective) -> &'static str {
    match objective {
        Objective::Imitation => "MSE",
        Objective::Feasibility { .. } => "MSE+Feasibility",
    }
}

struct Context {
    cfg: RunConfig,
    out_dir: PathBuf,
    chain: KinematicChain,
}

/// Everything that determines one trained policy.
#[derive(Serialize)]
struct TrainKey<'a> {
    model: &'a crate::experiment::TrainConfig,
    objective: Objective,
    seed: u64,
    episodes: usize,
    dataset: &'a str,
    chain: &'a str,
}

/// Everything that determines one report row besides its inputs.
#[derive(Serialize)]
struct RowKey<'a> {
    train: &'a TrainKey<'a>,
    generation: &'a scenario::GenerationConfig,
    eval: &'a crate::config::EvalSection,
    level: Level,
    eval_episodes: usize,
}

struct Dataset {
    episodes: Vec<Episode>,
    hash: String,
}

impl Context {
    fn new(cfg: RunConfig, out_dir: PathBuf) -> Result<Self> {
        let chain = match &cfg.chain {
            Some(p) => KinematicChain::from_file(&out_dir.join(p))?,
            None => KinematicChain::planar_default(),
        };
        std::fs::create_dir_all(&out_dir).map_err(|source| CliError::Io {
            path: out_dir.clone(),
            source,
        })?;
        Ok(Self { cfg, out_dir, chain })
    }

    fn path(&self, p: &Path) -> PathBuf {
        self.out_dir.join(p)
    }

    fn write(&self, rel: &Path, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|source| CliError::Io {
                path: parent.to_path_buf(),
                source,
            })?;
        }
        std::fs::write(&path, bytes).map_err(|source| CliError::Io { path: path.clone(), source })?;
        Ok(path)
    }

    fn read(&self, rel: &Path) -> Result<Vec<u8>> {
        let path = self.path(rel);
        std::fs::read(&path).map_err(|source| CliError::Io { path, source })
    }

    fn dataset(&self) -> Result<Dataset> {
        let bytes = self.read(&self.cfg.dataset)?;
        let episodes = scenario::read_jsonl(&self.chain, bytes.as_slice())?;
        if episodes.is_empty() {
            return Err(CliError::Runtime(format!("{} holds no episodes", self.cfg.dataset.display())));
        }
        Ok(Dataset {
            episodes,
            hash: content_hash(&bytes),
        })
    }

    fn prefix<'a>(&self, data: &'a Dataset, n: usize, what: &str) -> Result<&'a [Episode]> {
        data.episodes.get(..n).ok_or_else(|| {
            CliError::Runtime(format!("{what} needs {n} episodes but the dataset has {}", data.episodes.len()))
        })
    }

    fn gen(&self, out: &mut dyn Write) -> Result<()> {
        let episodes = scenario::generate_dataset(&self.chain, self.cfg.count, self.cfg.seed, &self.cfg.generation)?;
        let mut buf = Vec::new();
        scenario::write_jsonl(&self.chain, &episodes, &mut buf).map_err(CliError::Scenario)?;
        let path = self.write(&self.cfg.dataset, &buf)?;
        let stats = DatasetStats::compute(&self.chain, &episodes)?;
        let text = stats.render();
        let stem = self.cfg.dataset.with_extension("");
        self.write(&stem.with_extension("stats.txt"), text.as_bytes())?;
        let json = serde_json::to_vec_pretty(&stats).expect("stats serialize");
        self.write(&stem.with_extension("stats.json"), &json)?;
        let _ = writeln!(out, "wrote {} episodes to {}", episodes.len(), path.display());
        let _ = write!(out, "{text}");
        Ok(())
    }

    /// Trains, or loads when `cache` names an existing checkpoint for the same key.
    fn train_cached(&self, data: &Dataset, episodes: usize, objective: Objective, rel: &Path, cache: bool) -> Result<(PolicyNetwork, crate::diffusion::DiffusionSchedule, Vec<u8>, String)> {
        let key = TrainKey {
            model: &self.cfg.train.model,
            objective,
            seed: self.cfg.train.seed,
            episodes,
            dataset: &data.hash,
            chain: self.chain.hash(),
        };
        let key_hash = json_hash(&key);
        let path = self.path(rel);
        if cache && path.exists() {
            let bytes = self.read(rel)?;
            let ckpt = Checkpoint::from_bytes(&bytes)?;
            let (net, schedule) = ckpt.restore(&self.chain)?;
            return Ok((net, schedule, bytes, key_hash));
        }
        let train_set = self.prefix(data, episodes, "training")?;
        let trained = train_policy(&self.chain, train_set, &self.cfg.train.model, objective, self.cfg.train.seed, |_, _| {})?;
        let ckpt = Checkpoint::new(&trained.net, &trained.schedule, &self.chain, self.training_record(objective, episodes));
        let bytes = ckpt.to_bytes();
        self.write(rel, &bytes)?;
        let mut log = String::from("step,mse,geo,total\n");
        for (i, l) in trained.log.iter().enumerate() {
            log.push_str(&format!("{},{},{},{}\n", i + 1, l.mse, l.geo, l.total));
        }
        self.write(&rel.with_extension("log.csv"), log.as_bytes())?;
        Ok((trained.net, trained.schedule, bytes, key_hash))
    }

    fn training_record(&self, objective: Objective, episodes: usize) -> TrainingRecord {
        let m = &self.cfg.train.model;
        TrainingRecord {
            objective,
            steps: m.steps,
            batch_size: m.batch_size,
            learning_rate: m.learning_rate,
            seed: self.cfg.train.seed,
            episodes,
            action_stride: m.action_stride,
        }
    }

    fn train(&self, out: &mut dyn Write) -> Result<()> {
        let data = self.dataset()?;
        let episodes = self.cfg.train.episodes.unwrap_or(data.episodes.len());
        let objective = objective_for(self.cfg.train.lambda, self.cfg.train.delta);
        let rel = self.cfg.train.checkpoint.clone();
        let (_, _, bytes, _) = self.train_cached(&data, episodes, objective, &rel, false)?;
        let _ = writeln!(
            out,
            "trained {} on {episodes} episodes: {} ({})",
            method_name(objective),
            self.path(&rel).display(),
            content_hash(&bytes)
        );
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn evaluate_row(
        &self,
        net: &PolicyNetwork,
        schedule: &crate::diffusion::DiffusionSchedule,
        objective: Objective,
        data_size: usize,
        eval_set: &[Episode],
        level: Level,
        train_key: &TrainKey,
        inputs: &[&str],
    ) -> Result<(ReportRow, Vec<EvalRecord>)> {
        let policy = DiffusionPolicy { net, schedule };
        let records = run_protocol(&policy, eval_set, level, &self.chain, &self.cfg.generation, &self.cfg.eval.protocol, self.cfg.eval.seed)?;
        let metrics = compute_metrics_with_ci(&records, &default_pairs(), self.cfg.eval.bootstrap_replicates, self.cfg.eval.seed)?;
        let row_key = RowKey {
            train: train_key,
            generation: &self.cfg.generation,
            eval: &self.cfg.eval,
            level,
            eval_episodes: eval_set.len(),
        };
        let (delta, lambda) = match objective {
            Objective::Imitation => (None, 0.0),
            Objective::Feasibility { delta, lambda } => (Some(delta), lambda),
        };
        Ok((
            ReportRow {
                method: method_name(objective).to_string(),
                delta,
                lambda,
                data_size,
                level,
                metrics,
                config_hash: json_hash(&row_key),
                input_hash: combined_hash(inputs),
            },
            records,
        ))
    }

    fn eval(&self, args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
        let data = self.dataset()?;
        let rel = self.cfg.train.checkpoint.clone();
        let bytes = self.read(&rel)?;
        let ckpt = Checkpoint::from_bytes(&bytes)?;
        let (net, schedule) = ckpt.restore(&self.chain)?;
        let n = self.cfg.eval.episodes.unwrap_or(data.episodes.len());
        let eval_set = self.prefix(&data, n, "evaluation")?;
        let t = &ckpt.training;
        let key = TrainKey {
            model: &self.cfg.train.model,
            objective: t.objective,
            seed: t.seed,
            episodes: t.episodes,
            dataset: &data.hash,
            chain: self.chain.hash(),
        };
        let ckpt_hash = content_hash(&bytes);
        let (row, records) = self.evaluate_row(&net, &schedule, t.objective, t.episodes, eval_set, args.level, &key, &[&data.hash, &ckpt_hash])?;
        let rows = [row];
        let base = PathBuf::from(format!("eval_{}", args.level.as_str()));
        self.write(&base.with_extension("csv"), report_csv(&rows).as_bytes())?;
        let md = report_markdown(&format!("Evaluation ({} perturbations)", args.level.as_str()), &rows);
        self.write(&base.with_extension("md"), md.as_bytes())?;
        self.write(&base.with_extension("records.jsonl"), records_to_jsonl(&records).as_bytes())?;
        let _ = write!(out, "{md}");
        Ok(())
    }

    /// Trains (in parallel) and evaluates each `(objective, episodes)` cell.
    fn grid(&self, name: &str, data: &Dataset, cells: &[(Objective, usize)], eval_n: usize) -> Result<Vec<ReportRow>> {
        use rayon::prelude::*;
        let eval_set = self.prefix(data, eval_n, "evaluation")?;
        cells
            .par_iter()
            .map(|&(objective, episodes)| {
                let tag = match objective {
                    Objective::Imitation => format!("{name}_mse_n{episodes}"),
                    Objective::Feasibility { delta, lambda } => format!("{name}_d{delta}_l{lambda}_n{episodes}"),
                };
                let key = TrainKey {
                    model: &self.cfg.train.model,
                    objective,
                    seed: self.cfg.train.seed,
                    episodes,
                    dataset: &data.hash,
                    chain: self.chain.hash(),
                };
                let key_hash = json_hash(&key);
                let rel = PathBuf::from("checkpoints").join(format!("{tag}_{}.json", &key_hash[..16]));
                let (net, schedule, bytes, _) = self.train_cached(data, episodes, objective, &rel, true)?;
                let ckpt_hash = content_hash(&bytes);
                let (row, _) = self.evaluate_row(&net, &schedule, objective, episodes, eval_set, Level::Large, &key, &[&data.hash, &ckpt_hash])?;
                Ok(row)
            })
            .collect()
    }

    fn emit(&self, name: &str, title: &str, rows: &[ReportRow], out: &mut dyn Write) -> Result<()> {
        self.write(Path::new(&format!("{name}.csv")), report_csv(rows).as_bytes())?;
        let md = report_markdown(title, rows);
        self.write(Path::new(&format!("{name}.md")), md.as_bytes())?;
        let _ = write!(out, "{md}");
        Ok(())
    }

    fn ablate(&self, out: &mut dyn Write) -> Result<()> {
        let data = self.dataset()?;
        let n = self.cfg.ablate.episodes;
        let mut cells = vec![(Objective::Imitation, n)];
        for &delta in &self.cfg.ablate.deltas {
            for &lambda in &self.cfg.ablate.lambdas {
                cells.push((objective_for(lambda, delta), n));
            }
        }
        let rows = self.grid("ablate", &data, &cells, n)?;
        self.emit("ablate", "Supervision strength ablation (large perturbations)", &rows, out)
    }

    fn datascale(&self, out: &mut dyn Write) -> Result<()> {
        let data = self.dataset()?;
        let ds = &self.cfg.datascale;
        if let Some(&too_big) = ds.sizes.iter().find(|&&s| s > data.episodes.len()) {
            return Err(CliError::Runtime(format!(
                "subset size {too_big} exceeds the {} episodes in the dataset",
                data.episodes.len()
            )));
        }
        let feasibility = objective_for(self.cfg.train.lambda, self.cfg.train.delta);
        let cells: Vec<(Objective, usize)> = ds
            .sizes
            .iter()
            .flat_map(|&n| [(Objective::Imitation, n), (feasibility, n)])
            .collect();
        let rows = self.grid("datascale", &data, &cells, ds.eval_episodes)?;
        self.emit("datascale", "Training data size (large perturbations)", &rows, out)
    }
}
