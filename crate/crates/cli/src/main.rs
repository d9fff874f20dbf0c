//! `probekit` command-line driver.
//!
//! Settings come from built-in defaults, then the `--config` file, then
//! flags; later sources win.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use probekit::analysis::{amnesic_suite, chance_baseline, majority_baseline, make_control_task, round2};
use probekit::data::tokenizer::word_offsets;
use probekit::data::{load_edge_probing_jsonl, Dataset, Record, Tokenizer};
use probekit::experiment::{
    build_model, float_width, load_task_data, run_experiment, ExperimentConfig, ModelSource, TaskData,
};
use probekit::lm::{lm_windows, ModelParams};
use probekit::pruning::{HeadPartition, PartitionFile};
use probekit::report::{read_report, write_run, ComparisonTable};
use probekit::tensor::Scalar;

mod fixtures;

#[derive(Parser)]
#[command(name = "probekit", version, about = "Probe what a causal language model encodes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one method over every seed and write a report.
    Run(ExperimentArgs),
    /// Like `run`, but joint head pruning is required.
    Prune(ExperimentArgs),
    /// Language-model loss with essential heads removed.
    Amnesic(AmnesicArgs),
    /// Majority and chance accuracy of a dataset.
    Baselines(BaselineArgs),
    /// Relabel a dataset with a per-word control task.
    ControlTask(ControlArgs),
    /// Merge report files into one comparison table.
    Report(ReportArgs),
    /// Write a small synthetic dataset, tokenizer, corpus, model and configs.
    ExportFixtures(FixtureArgs),
}

#[derive(Args, Clone, Default)]
struct ExperimentArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    /// pp, dp-lr or dp-mlp.
    #[arg(long)]
    method: Option<String>,
    /// Tensor container with pretrained weights.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Use untrained weights drawn with this seed.
    #[arg(long)]
    random_seed: Option<u64>,
    #[arg(long)]
    prefix_len: Option<usize>,
    #[arg(long)]
    keep_heads: Option<usize>,
    /// Comma-separated, e.g. "1,2,3,4,5".
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AmnesicArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Partition file written by `prune`.
    #[arg(long)]
    partition: PathBuf,
}

#[derive(Args)]
struct BaselineArgs {
    /// Edge-probing JSONL; split 75/25 unless --test-data is given.
    #[arg(long, conflicts_with = "config")]
    data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    test_data: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "task")]
    task: String,
}

#[derive(Args)]
struct ControlArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "task")]
    task: String,
}

#[derive(Args)]
struct ReportArgs {
    /// Report files, or merged tables from an earlier `report --out`.
    #[arg(required = true)]
    files: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    random_seed: u64,
}

/// A problem with the user's settings rather than with running them.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|e| {
        e.is::<ConfigError>() || e.downcast_ref::<probekit::Error>().is_some_and(probekit::Error::is_config)
    });
    if config {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|()| dispatch(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("PROBEKIT_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| config_err(format!("PROBEKIT_THREADS: expected a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run(a) => run(&a, false),
        Command::Prune(a) => run(&a, true),
        Command::Amnesic(a) => amnesic(&a),
        Command::Baselines(a) => baselines(&a),
        Command::ControlTask(a) => control_task(&a),
        Command::Report(a) => report(&a),
        Command::ExportFixtures(a) => fixtures::export(&a.out, a.random_seed),
    }
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<u64>()
                .map_err(|_| config_err(format!("seeds: {p:?} is not a non-negative integer")))
        })
        .collect()
}

/// Defaults, then the config file, then flags.
fn resolve(args: &ExperimentArgs) -> Result<ExperimentConfig> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let task = args.task.clone().ok_or_else(|| config_err("task: --task or --config is required"))?;
            let method = args
                .method
                .clone()
                .ok_or_else(|| config_err("method: --method or --config is required"))?;
            ExperimentConfig::from_toml(&format!(
                "task = {}\nmethod = {}\n[model]\nsource = \"synthetic\"\n",
                toml_str(&task),
                toml_str(&method)
            ))?
        }
    };
    if let Some(t) = &args.task {
        config.task = t.clone();
    }
    if let Some(m) = &args.method {
        config.method = m.clone();
    }
    match (&args.weights, args.random_seed) {
        (Some(_), Some(_)) => return Err(config_err("model: --weights and --random-seed are exclusive")),
        (Some(path), None) => config.model = ModelSource::Weights { path: path.clone() },
        (None, Some(seed)) => config.model = ModelSource::Random { seed },
        (None, None) => {}
    }
    if let Some(t) = args.prefix_len {
        config.prefix_len = Some(t);
    }
    if let Some(k) = args.keep_heads {
        config.keep_heads = Some(k);
    }
    if let Some(s) = &args.seeds {
        config.seeds = parse_seeds(s)?;
    }
    if let Some(o) = &args.out {
        config.out = o.clone();
    }
    config.validate()?;
    Ok(config)
}

fn toml_str(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn unix_ms(t: SystemTime) -> u128 {
    t.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

fn run(args: &ExperimentArgs, require_pruning: bool) -> Result<()> {
    let config = resolve(args)?;
    if require_pruning && config.keep_heads.is_none() {
        return Err(config_err("keep_heads: prune needs --keep-heads or keep_heads in the config"));
    }
    let started = SystemTime::now();
    let clock = Instant::now();
    let out = run_experiment(&config)?;
    let dir = &config.out;
    write_run(dir, &out.report, &out.partitions, &config.to_toml()?)
        .with_context(|| format!("writing results to {}", dir.display()))?;
    let metadata = serde_json::json!({
        "started_unix_ms": unix_ms(started),
        "finished_unix_ms": unix_ms(SystemTime::now()),
        "elapsed_ms": clock.elapsed().as_millis(),
        "threads": rayon::current_num_threads(),
        "version": env!("CARGO_PKG_VERSION"),
    });
    fs::write(dir.join("run_metadata.json"), serde_json::to_string_pretty(&metadata)? + "\n")?;
    print!("{}", ComparisonTable::merge(std::slice::from_ref(&out.report))?.render());
    for p in &out.partitions {
        let heads: Vec<String> = p.essential.iter().map(|[l, h]| format!("{l}.{h}")).collect();
        println!("seed {:?} essential heads: {}", p.seeds, heads.join(" "));
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn amnesic(args: &AmnesicArgs) -> Result<()> {
    let config = resolve(&args.experiment)?;
    let file: PartitionFile = serde_json::from_str(&fs::read_to_string(&args.partition)?)
        .with_context(|| format!("reading {}", args.partition.display()))?;
    let data = load_task_data(&config)?;
    let entries = match float_width(&config)? {
        64 => amnesic_with::<f64>(&config, &data, &file)?,
        _ => amnesic_with::<f32>(&config, &data, &file)?,
    };
    let rows: Vec<String> = entries
        .iter()
        .map(|e| format!("{:<16}{:>10.4}{:>10.4}", e.mode.name(), e.loss, e.delta))
        .collect();
    println!("{:<16}{:>10}{:>10}\n{}", "mode", "loss", "Δloss", rows.join("\n"));
    fs::create_dir_all(&config.out)?;
    let path = config.out.join("amnesic.json");
    fs::write(&path, serde_json::to_string_pretty(&entries)? + "\n")?;
    println!("wrote {}", path.display());
    Ok(())
}

fn amnesic_with<F: Scalar>(
    config: &ExperimentConfig,
    data: &TaskData,
    file: &PartitionFile,
) -> Result<Vec<probekit::analysis::LmLossEntry>> {
    let model: ModelParams<F> = build_model(config, data)?;
    let c = &model.config;
    let partition = HeadPartition::from_file(file, c.n_layers, c.n_heads)?;
    let stream = data
        .corpus
        .as_ref()
        .ok_or_else(|| config_err("data.corpus: amnesic evaluation needs a corpus"))?;
    let seed = config.seeds[0];
    Ok(amnesic_suite(&model, &partition, &lm_windows(stream, c.max_positions), seed)?)
}

/// Whitespace tokenizer covering every word of the given JSONL files.
fn tokenizer_for(paths: &[&Path]) -> Result<Tokenizer> {
    let mut vocab = std::collections::BTreeSet::new();
    for path in paths {
        for (i, line) in fs::read_to_string(path)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(line)
                .map_err(|e| anyhow::anyhow!("{}:{}: {e}", path.display(), i + 1))?;
            let chars: Vec<char> = rec.text.chars().collect();
            for (a, b) in word_offsets(&rec.text) {
                vocab.insert(chars[a..b].iter().collect::<String>());
            }
        }
    }
    Ok(Tokenizer::whitespace(vocab.into_iter().collect())?)
}

fn baselines(args: &BaselineArgs) -> Result<()> {
    let (train, test) = match (&args.config, &args.data) {
        (Some(path), _) => {
            let config = ExperimentConfig::load(path)?;
            config.validate()?;
            let d = load_task_data(&config)?;
            (d.train, d.test)
        }
        (None, Some(data)) => {
            let mut paths = vec![data.as_path()];
            paths.extend(args.test_data.as_deref());
            let tok = tokenizer_for(&paths)?;
            let full = load_edge_probing_jsonl(data, &args.task, &tok)?;
            match &args.test_data {
                Some(t) => {
                    let test = load_edge_probing_jsonl(t, &args.task, &tok)?;
                    (full, test)
                }
                None => full.split(0.25, 0)?,
            }
        }
        (None, None) => return Err(config_err("data: --data or --config is required")),
    };
    print_baselines(&train, &test)
}

fn print_baselines(train: &Dataset, test: &Dataset) -> Result<()> {
    let majority = round2(majority_baseline(train, test)?);
    let chance = round2(chance_baseline(train.labels.len())?);
    println!("{:<10}{:>8}", "baseline", "acc");
    println!("{:<10}{:>8.2}", "majority", majority);
    println!("{:<10}{:>8.2}", "chance", chance);
    Ok(())
}

fn control_task(args: &ControlArgs) -> Result<()> {
    let tok = tokenizer_for(&[args.data.as_path()])?;
    let ds = load_edge_probing_jsonl(&args.data, &args.task, &tok)?;
    let control = make_control_task(&ds, args.seed)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    control.write_jsonl(&args.out)?;
    println!("wrote {} examples to {}", control.len(), args.out.display());
    Ok(())
}

fn report(args: &ReportArgs) -> Result<()> {
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for path in &args.files {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if value.get("rows").is_some() {
            let table = ComparisonTable::from_json(&text).with_context(|| format!("reading {}", path.display()))?;
            rows.extend(table.rows);
        } else {
            reports.push(read_report(path).with_context(|| format!("reading {}", path.display()))?);
        }
    }
    let mut table = if reports.is_empty() {
        ComparisonTable {
            schema_version: probekit::analysis::REPORT_SCHEMA_VERSION,
            rows: Vec::new(),
        }
    } else {
        ComparisonTable::merge(&reports)?
    };
    table.rows.extend(rows);
    if table.rows.is_empty() {
        bail!("no rows to report");
    }
    table
        .rows
        .sort_by(|a, b| (&a.task, &a.method, a.model_kind).cmp(&(&b.task, &b.method, b.model_kind)));
    let text = table.render();
    print!("{text}");
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("comparison.json"), table.to_json()?)?;
        fs::write(dir.join("comparison.txt"), text)?;
    }
    Ok(())
}
