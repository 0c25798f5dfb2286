//! Command-line entry points.
//!
//! Verbs: `train`, `eval`, `analyze`, `covariance`, `gen-data`,
//! `param-count`. Exit codes: 0 success, 1 usage or configuration, 2
//! numerical failure, 3 I/O.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint;
use crate::config::{self, Entry, Section};
use crate::data::{
    covariance_trace, empirical_covariance, generate_dataset, ground_truth_relation, load_dataset, save_dataset,
    spearman, RegimeSwitchingSpec, SequenceBatch,
};
use crate::error::{Error, Result};
use crate::layers::count::{crossover, parameter_count, ParamCount};
use crate::spd::SpdReport;
use crate::training::{evaluate, EvalReport, MetricsRecord, Model, StepLog, TrainConfig, Trainer};

/// Settings of the `[output]` section.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Write a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
    /// Record real wall time in `metrics.csv` (breaks byte-identical reruns).
    pub wall_clock: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("run"),
            checkpoint_every: 0,
            wall_clock: false,
        }
    }
}

impl Section for OutputConfig {
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "dir" => self.dir = PathBuf::from(value),
            "checkpoint_every" => self.checkpoint_every = config::parse_usize(value)?,
            "wall_clock" => self.wall_clock = config::parse_bool(value)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("dir", self.dir.display().to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("wall_clock", self.wall_clock.to_string()),
        ]
    }
}

/// Settings of the `[data]` section beyond the generator spec.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitConfig {
    pub test_sequences: usize,
    pub test_seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_sequences: 200,
            test_seed: 8,
        }
    }
}

/// Everything a run needs, with documented defaults.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Generator spec of the training split; `tasks` mirrors `[model] tasks`.
    pub data: RegimeSwitchingSpec,
    pub split: SplitConfig,
    pub output: OutputConfig,
}

const DATA_SPLIT_KEYS: [&str; 2] = ["test_sequences", "test_seed"];

impl RunConfig {
    /// Section that owns `key`, if any.
    fn section_of(key: &str) -> Vec<&'static str> {
        let mut out = Vec::new();
        if TrainConfig::MODEL_KEYS.contains(&key) {
            out.push("model");
        } else if TrainConfig::default().entries().iter().any(|(k, _)| *k == key) {
            out.push("train");
        }
        if key != "tasks"
            && (DATA_SPLIT_KEYS.contains(&key) || RegimeSwitchingSpec::default().entries().iter().any(|(k, _)| *k == key))
        {
            out.push("data");
        }
        if OutputConfig::default().entries().iter().any(|(k, _)| *k == key) {
            out.push("output");
        }
        out
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> std::result::Result<(), String> {
        let owners = Self::section_of(key);
        if !owners.contains(&section) {
            return Err(match owners.as_slice() {
                [] => format!("unknown key '{key}' in [{section}]"),
                [s, ..] => format!("key '{key}' belongs in [{s}], not [{section}]"),
            });
        }
        match section {
            "model" | "train" => self.train.set(key, value),
            "data" => match key {
                "test_sequences" => config::parse_usize(value).map(|v| self.split.test_sequences = v),
                "test_seed" => config::parse_u64(value).map(|v| self.split.test_seed = v),
                _ => self.data.set(key, value),
            },
            "output" => self.output.set(key, value),
            _ => Err(format!("unknown section [{section}]")),
        }
    }

    /// Applies parsed config entries.
    pub fn apply_entries(&mut self, entries: &[Entry]) -> Result<()> {
        for e in entries {
            if e.section.is_empty() {
                return Err(Error::Config {
                    line: e.line,
                    msg: format!("key '{}' appears before any [section]", e.key),
                });
            }
            self.set(&e.section, &e.key, &e.value)
                .map_err(|msg| Error::Config { line: e.line, msg })?;
        }
        Ok(())
    }

    /// Applies `key=value` or `section.key=value`.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let bad = |msg: String| Error::Config { line: 0, msg };
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| bad(format!("override '{spec}' is not key=value")))?;
        let (key, value) = (key.trim(), value.trim());
        let (section, key) = match key.split_once('.') {
            Some((s, k)) => (s.to_string(), k),
            None => {
                let owners = Self::section_of(key);
                match owners.as_slice() {
                    [one] => (one.to_string(), key),
                    [] => return Err(bad(format!("unknown override key '{key}'"))),
                    _ => {
                        return Err(bad(format!(
                            "override key '{key}' is ambiguous; use one of {}",
                            owners.iter().map(|s| format!("{s}.{key}")).collect::<Vec<_>>().join(", ")
                        )))
                    }
                }
            }
        };
        self.set(&section, key, value).map_err(bad)
    }

    /// Keeps derived fields consistent and validates.
    pub fn finish(&mut self) -> Result<()> {
        self.data.tasks = self.train.tasks;
        self.train.validate()?;
        self.data.validate()?;
        self.test_spec().validate()
    }

    pub fn test_spec(&self) -> RegimeSwitchingSpec {
        RegimeSwitchingSpec {
            sequences: self.split.test_sequences,
            seed: self.split.test_seed,
            ..self.data.clone()
        }
    }

    /// The fully resolved configuration as config text.
    pub fn render(&self) -> String {
        let mut model = String::from("[model]\n");
        let mut train = String::from("[train]\n");
        for (k, v) in self.train.entries() {
            let target = if TrainConfig::MODEL_KEYS.contains(&k) {
                &mut model
            } else {
                &mut train
            };
            let _ = writeln!(target, "{k} = {v}");
        }
        let mut data = String::from("[data]\n");
        for (k, v) in self.data.entries() {
            if k != "tasks" {
                let _ = writeln!(data, "{k} = {v}");
            }
        }
        let _ = writeln!(data, "test_sequences = {}", self.split.test_sequences);
        let _ = writeln!(data, "test_seed = {}", self.split.test_seed);
        format!("{model}\n{train}\n{data}\n{}", config::render("output", &self.output))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_entries(&config::parse(text)?)?;
        c.finish()?;
        Ok(c)
    }
}

#[derive(Debug, Parser)]
#[command(name = "htan", about = "Task-adaptive activation networks with SPD metric regularisation")]
struct Cli {
    /// Configuration file (`key = value` lines with [model] [train] [data] [output] sections).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting: `key=value` or `section.key=value`. Repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Training seed (same as `--override train.seed=N`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (same as `--override output.dir=PATH`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train and write metrics, checkpoints and the resolved config.
    Train,
    /// Per-task loss and accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file; defaults to the configured test split.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Per-slot distances, metric conditioning and ground-truth coupling.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Label event pair for the covariance column.
        #[arg(long, default_value = "0,0")]
        event: String,
    },
    /// Per-slot label covariance between two tasks.
    Covariance {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "0,0")]
        event: String,
        /// Task pair.
        #[arg(long, default_value = "0,1")]
        pair: String,
    },
    /// Write the configured train and test splits.
    GenData,
    /// Parameter counts against the soft-sharing baseline.
    ParamCount {
        /// Largest task count to tabulate.
        #[arg(long, default_value_t = 20)]
        max_tasks: usize,
    },
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) | Error::Format(_) => 3,
        Error::NonFinite { .. } | Error::Numerical(_) | Error::RankDeficient { .. } | Error::Quadrature { .. } => 2,
        _ => 1,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path)?;
        cfg.apply_entries(&config::parse(&text)?)?;
    }
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    cfg.finish()?;
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli)?;
    match &cli.command {
        Command::Train => {
            let summary = cmd_train(&cfg)?;
            println!(
                "trained {} epochs; test mean loss {:.6}; run directory {}",
                summary.epochs.len(),
                summary.test.mean_loss(),
                cfg.output.dir.display()
            );
            Ok(())
        }
        Command::Eval { checkpoint, data } => {
            let data = load_or_generate(data.as_deref(), &cfg)?;
            let report = cmd_eval(checkpoint, &data, Some(&cfg.output.dir))?;
            println!("{}", serde_json::to_string_pretty(&EvalJson::from(&report)).expect("serialisable"));
            Ok(())
        }
        Command::Analyze { checkpoint, data, event } => {
            let data = load_or_generate(data.as_deref(), &cfg)?;
            let out = cmd_analyze(checkpoint, &data, parse_pair(event)?, &cfg.output.dir)?;
            match out.spearman {
                Some(s) => println!("spearman(mean d_sq(0,1), coupling) = {s:.4}"),
                None => println!("spearman undefined (single task or constant trace)"),
            }
            println!("wrote {}", out.path.display());
            Ok(())
        }
        Command::Covariance { data, event, pair } => {
            let data = load_or_generate(data.as_deref(), &cfg)?;
            let path = cmd_covariance(&data, parse_pair(pair)?, parse_pair(event)?, &cfg.output.dir)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::GenData => {
            let (train, test) = cmd_gen_data(&cfg)?;
            println!("wrote {} and {}", train.display(), test.display());
            Ok(())
        }
        Command::ParamCount { max_tasks } => {
            let report = cmd_param_count(&cfg, *max_tasks)?;
            print!("{}", report.table());
            fs::create_dir_all(&cfg.output.dir)?;
            fs::write(
                cfg.output.dir.join("param_count.json"),
                serde_json::to_string_pretty(&report).expect("serialisable"),
            )?;
            Ok(())
        }
    }
}

fn parse_pair(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Invalid(format!("expected 'a,b' with non-negative integers, got '{s}'"));
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn load_or_generate(path: Option<&Path>, cfg: &RunConfig) -> Result<SequenceBatch> {
    match path {
        Some(p) => load_dataset(p),
        None => generate_dataset(&cfg.test_spec()),
    }
}

/// Result of a training run.
#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub epochs: Vec<MetricsRecord>,
    pub test: EvalReport,
    pub checks: StepChecks,
    pub phi_checksum: String,
    pub theta_checksum: String,
    pub parameters_phi: usize,
    pub parameters_theta: usize,
    pub wall_ms_total: u64,
}

/// Aggregates of the per-step diagnostics.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct StepChecks {
    pub steps: usize,
    pub phi_directional_nonpositive: usize,
    pub theta_steps: usize,
    pub theta_directional_nonnegative: usize,
    pub min_metric_eigenvalue: Option<f64>,
    pub max_metric_asymmetry: f64,
    pub max_stiefel_defect: f64,
    pub all_disjoint: bool,
}

impl StepChecks {
    pub fn from_steps(steps: &[StepLog]) -> Self {
        let eig = steps
            .iter()
            .map(|s| s.min_metric_eigenvalue)
            .filter(|x| !x.is_nan())
            .fold(None, |acc: Option<f64>, x| Some(acc.map_or(x, |a| a.min(x))));
        Self {
            steps: steps.len(),
            phi_directional_nonpositive: steps.iter().filter(|s| s.phi_directional <= 0.0).count(),
            theta_steps: steps.iter().filter(|s| s.theta_directional.is_some()).count(),
            theta_directional_nonnegative: steps
                .iter()
                .filter(|s| s.theta_directional.is_some_and(|d| d >= 0.0))
                .count(),
            min_metric_eigenvalue: eig,
            max_metric_asymmetry: steps.iter().map(|s| s.max_metric_asymmetry).fold(0.0, f64::max),
            max_stiefel_defect: steps.iter().map(|s| s.stiefel_defect).fold(0.0, f64::max),
            all_disjoint: steps.iter().all(|s| s.disjoint),
        }
    }
}

pub const METRICS_HEADER: &str = "epoch,task_id,loss,acc,reg_value,ltheta_value,wall_ms";

/// `metrics.csv` rows for one epoch.
pub fn metrics_rows(r: &MetricsRecord, wall_clock: bool) -> String {
    let mut s = String::new();
    for (t, (loss, acc)) in r.task_loss.iter().zip(&r.task_acc).enumerate() {
        let wall = if wall_clock { r.wall_ms } else { 0 };
        let _ = writeln!(s, "{},{},{},{},{},{},{}", r.epoch, t, loss, acc, r.reg_value, r.ltheta_value, wall);
    }
    s
}

const STEPS_HEADER: &str = "epoch,batch,loss_phi,reg_value,ltheta_value,phi_directional,theta_directional,min_metric_eigenvalue,max_metric_asymmetry,stiefel_defect,disjoint";

fn step_row(s: &StepLog) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}\n",
        s.epoch,
        s.batch,
        s.loss_phi,
        s.reg_value,
        s.ltheta_value,
        s.phi_directional,
        s.theta_directional.map_or(String::new(), |d| d.to_string()),
        if s.min_metric_eigenvalue.is_nan() { String::new() } else { s.min_metric_eigenvalue.to_string() },
        s.max_metric_asymmetry,
        s.stiefel_defect,
        s.disjoint
    )
}

fn save_model(path: &Path, model: &Model) -> Result<()> {
    checkpoint::save(path, &model.to_tensors())
}

pub fn load_model(path: &Path) -> Result<Model> {
    Model::from_tensors(&checkpoint::load(path)?)
}

/// Trains per `cfg` and fills the run directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let start = Instant::now();
    let dir = &cfg.output.dir;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("resolved.cfg"), cfg.render())?;
    fs::write(dir.join("seed.txt"), format!("{}\n", cfg.train.seed))?;
    let train = generate_dataset(&cfg.data)?;
    let test = generate_dataset(&cfg.test_spec())?;
    let model = Model::new(&cfg.train, &cfg.data)?;
    let mut trainer = Trainer::new(cfg.train.clone(), model)?;
    let mut metrics = format!("{METRICS_HEADER}\n");
    let mut epochs = Vec::new();
    for e in 0..cfg.train.epochs {
        let record = match trainer.train_epoch(&train) {
            Ok(r) => r,
            Err(err) => {
                let mut diag = format!("error: {err}\n{STEPS_HEADER}\n");
                let from = trainer.steps.len().saturating_sub(20);
                for s in &trainer.steps[from..] {
                    diag.push_str(&step_row(s));
                }
                fs::write(dir.join("diagnostics.txt"), diag)?;
                fs::write(dir.join("metrics.csv"), &metrics)?;
                return Err(err);
            }
        };
        metrics.push_str(&metrics_rows(&record, cfg.output.wall_clock));
        epochs.push(record);
        if cfg.output.checkpoint_every > 0 && (e + 1) % cfg.output.checkpoint_every == 0 {
            save_model(&dir.join(format!("checkpoint-epoch{}.htan", e + 1)), &trainer.model)?;
        }
    }
    fs::write(dir.join("metrics.csv"), &metrics)?;
    let mut steps = format!("{STEPS_HEADER}\n");
    for s in &trainer.steps {
        steps.push_str(&step_row(s));
    }
    fs::write(dir.join("steps.csv"), steps)?;
    save_model(&dir.join("checkpoint.htan"), &trainer.model)?;
    let test_report = evaluate(&trainer.model, &test)?;
    let summary = TrainSummary {
        epochs,
        checks: StepChecks::from_steps(&trainer.steps),
        phi_checksum: format!("{:016x}", trainer.model.phi.checksum()),
        theta_checksum: format!("{:016x}", trainer.model.theta.checksum()),
        parameters_phi: trainer.model.phi.scalar_count(),
        parameters_theta: trainer.model.theta.scalar_count(),
        test: test_report,
        wall_ms_total: start.elapsed().as_millis() as u64,
    };
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("serialisable"),
    )?;
    Ok(summary)
}

/// Fixed JSON shape of an evaluation.
#[derive(Debug, Serialize)]
pub struct EvalJson {
    pub task_loss: Vec<f64>,
    pub task_acc: Vec<f64>,
    pub mean_loss: f64,
}

impl From<&EvalReport> for EvalJson {
    fn from(r: &EvalReport) -> Self {
        Self {
            task_loss: r.task_loss.clone(),
            task_acc: r.task_acc.clone(),
            mean_loss: r.mean_loss(),
        }
    }
}

fn check_dims(model: &Model, data: &SequenceBatch) -> Result<()> {
    let c = model.config();
    for (field, expected, found) in [
        ("tasks", c.tasks, data.tasks()),
        ("input_dim", c.d_in, data.spec.input_dim),
        ("classes", c.classes, data.spec.classes),
    ] {
        if expected != found {
            return Err(Error::DimMismatch {
                field: field.into(),
                expected,
                found,
            });
        }
    }
    Ok(())
}

/// Evaluates a checkpoint; with `out`, writes `eval.json` and
/// `predictions.csv` there.
pub fn cmd_eval(checkpoint_path: &Path, data: &SequenceBatch, out: Option<&Path>) -> Result<EvalReport> {
    let model = load_model(checkpoint_path)?;
    check_dims(&model, data)?;
    let report = evaluate(&model, data)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("eval.json"),
            serde_json::to_string_pretty(&EvalJson::from(&report)).expect("serialisable"),
        )?;
        let mut csv = String::from("task,sequence,slot,predicted,label\n");
        let (b, n) = (data.sequences(), data.seq_len());
        for t in 0..data.tasks() {
            for s in 0..b {
                for k in 0..n {
                    let _ = writeln!(
                        csv,
                        "{t},{s},{k},{},{}",
                        report.predictions[(t * b + s) * n + k],
                        data.label(t, s, k)
                    );
                }
            }
        }
        fs::write(dir.join("predictions.csv"), csv)?;
    }
    Ok(report)
}

pub const ANALYSIS_HEADER: &str = "block,slot,task_i,task_j,d_sq,metric_cond,gt_coupling,abs_cov";

/// Output of [`cmd_analyze`].
#[derive(Debug, Clone)]
pub struct AnalysisOutput {
    pub path: PathBuf,
    /// Per-slot `d²(0,1)` averaged over blocks; empty for one task.
    pub mean_d12: Vec<f64>,
    pub coupling: Vec<f64>,
    pub spearman: Option<f64>,
}

/// Writes `analysis.csv` for a checkpoint and dataset.
pub fn cmd_analyze(
    checkpoint_path: &Path,
    data: &SequenceBatch,
    event: (usize, usize),
    out: &Path,
) -> Result<AnalysisOutput> {
    let model = load_model(checkpoint_path)?;
    check_dims(&model, data)?;
    let slots = data.seq_len();
    let report = model.relation_report(slots)?;
    let coupling = ground_truth_relation(data);
    let tasks = data.tasks();
    let mut cov = vec![vec![Vec::new(); tasks]; tasks];
    for i in 0..tasks {
        for j in i + 1..tasks {
            cov[i][j] = covariance_trace(data, i, j, event)?;
        }
    }
    let mut csv = format!("{ANALYSIS_HEADER}\n");
    for (l, block) in report.iter().enumerate() {
        for (n, slot) in block.iter().enumerate() {
            let cond = SpdReport::of(&slot.metric)?.condition_number();
            match &slot.distances {
                None => {
                    let _ = writeln!(csv, "{l},{n},,,,{cond},{},", coupling[n]);
                }
                Some(d) => {
                    for i in 0..tasks {
                        for j in i + 1..tasks {
                            let _ = writeln!(
                                csv,
                                "{l},{n},{i},{j},{},{cond},{},{}",
                                d.at(i, j),
                                coupling[n],
                                cov[i][j][n].abs()
                            );
                        }
                    }
                }
            }
        }
    }
    fs::create_dir_all(out)?;
    let path = out.join("analysis.csv");
    fs::write(&path, csv)?;
    let mean_d12: Vec<f64> = if tasks >= 2 {
        (0..slots)
            .map(|n| {
                report
                    .iter()
                    .map(|b| b[n].distances.as_ref().map_or(0.0, |d| d.at(0, 1)))
                    .sum::<f64>()
                    / report.len() as f64
            })
            .collect()
    } else {
        Vec::new()
    };
    let rho = if mean_d12.is_empty() {
        None
    } else {
        spearman(&mean_d12, &coupling)
    };
    Ok(AnalysisOutput {
        path,
        mean_d12,
        coupling,
        spearman: rho,
    })
}

/// Writes `covariance.csv` with per-slot covariance of a task pair.
pub fn cmd_covariance(
    data: &SequenceBatch,
    pair: (usize, usize),
    event: (usize, usize),
    out: &Path,
) -> Result<PathBuf> {
    let coupling = ground_truth_relation(data);
    let mut csv = String::from("slot,cov,abs_cov,gt_coupling\n");
    for n in 0..data.seq_len() {
        let c = empirical_covariance(&data.slot_labels(pair.0, n), &data.slot_labels(pair.1, n), event)?;
        let _ = writeln!(csv, "{n},{c},{},{}", c.abs(), coupling[n]);
    }
    fs::create_dir_all(out)?;
    let path = out.join("covariance.csv");
    fs::write(&path, csv)?;
    Ok(path)
}

/// Writes `train.htd` and `test.htd`.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    let dir = &cfg.output.dir;
    fs::create_dir_all(dir)?;
    let train = dir.join("train.htd");
    let test = dir.join("test.htd");
    save_dataset(&train, &generate_dataset(&cfg.data)?)?;
    save_dataset(&test, &generate_dataset(&cfg.test_spec())?)?;
    Ok((train, test))
}

/// Counts for `T = 1..=max_tasks` at the configured sizes.
#[derive(Debug, Clone, Serialize)]
pub struct ParamCountReport {
    pub configured: ParamCount,
    pub by_tasks: Vec<ParamCount>,
    pub crossover: Option<usize>,
}

impl ParamCountReport {
    pub fn table(&self) -> String {
        let mut s = String::from("tasks  htan_total  baseline_total  htan_smaller\n");
        for c in &self.by_tasks {
            let _ = writeln!(s, "{:>5}  {:>10}  {:>14}  {}", c.tasks, c.htan_total, c.baseline_total, c.htan_smaller());
        }
        match self.crossover {
            Some(t) => {
                let _ = writeln!(s, "crossover: the network is smaller for every T >= {t}");
            }
            None => {
                let _ = writeln!(s, "crossover: none up to T = {}", self.by_tasks.len());
            }
        }
        s
    }
}

pub fn cmd_param_count(cfg: &RunConfig, max_tasks: usize) -> Result<ParamCountReport> {
    if max_tasks == 0 {
        return Err(Error::Invalid("max_tasks must be at least 1".into()));
    }
    let hc = cfg.train.htan_config(&cfg.data);
    let k = cfg.train.spd_layers;
    Ok(ParamCountReport {
        configured: parameter_count(&hc, k),
        by_tasks: (1..=max_tasks)
            .map(|t| parameter_count(&crate::layers::HtanConfig { tasks: t, ..hc }, k))
            .collect(),
        crossover: crossover(&hc, k, max_tasks),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("lambda=0").unwrap();
        cfg.apply_override("data.seed=11").unwrap();
        cfg.apply_override("train.theta_period=never").unwrap();
        cfg.finish().unwrap();
        let back = RunConfig::from_text(&cfg.render()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_reports_line() {
        match RunConfig::from_text("[model]\nbasis = 4\nbasiss = 5\n") {
            Err(Error::Config { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("basiss"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn key_in_wrong_section() {
        assert!(RunConfig::from_text("[train]\nbasis = 4\n").is_err());
        assert!(RunConfig::from_text("[data]\ntasks = 3\n").is_err());
    }

    #[test]
    fn ambiguous_override_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_override("seed=3").is_err());
        cfg.apply_override("train.seed=3").unwrap();
        assert_eq!(cfg.train.seed, 3);
    }

    #[test]
    fn tasks_propagate_to_data() {
        let cfg = RunConfig::from_text("[model]\ntasks = 3\n").unwrap();
        assert_eq!(cfg.data.tasks, 3);
        assert_eq!(cfg.test_spec().tasks, 3);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config { line: 1, msg: String::new() }), 1);
        assert_eq!(exit_code(&Error::NonFinite { context: String::new() }), 2);
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), 3);
    }
}
