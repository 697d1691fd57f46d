//! The `adapterforge` command line: `train`, `compare`, `merge`, `verify`.
//!
//! Exit codes: 0 success, 1 verification failure, 2 config error,
//! 3 runtime error, 4 not mergeable.

use std::collections::HashSet;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::Variant;
use crate::alignment::AlignMode;
use crate::error::{Error, Result};
use crate::io::{merge_deviation, read_json, write_json, Checkpoint, MergedWeights};
use crate::trainer::{run, RunReport, RunSummary, TrainConfig};
use crate::verify::{run_all, Faults};

pub const SEED_ENV: &str = "ADAPTERFORGE_SEED";
pub const MERGE_PROBES: usize = 100;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_NOT_MERGEABLE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "adapterforge", version, about = "Multi-task low-rank adapter experiments")]
pub struct Cli {
    /// Worker threads for parallel sections; defaults to all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one configuration and write its report, summary and checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every configuration of a plan over several seeds and tabulate them.
    Compare {
        #[arg(long)]
        plan: PathBuf,
        /// Overrides the plan's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// First seed of the sweep.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fold a checkpoint's adapters into plain weights.
    Merge {
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in oracle and invariant suites.
    Verify {
        #[arg(long, hide = true)]
        inject_fault: Option<Fault>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Fault {
    KlGradSign,
}

/// Named configurations swept over shared data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub configs: Vec<NamedConfig>,
    /// Written into every config's data seed so all rows see the same tasks.
    #[serde(default)]
    pub dataset_seed: u64,
    #[serde(default = "default_seeds")]
    pub seeds_per_config: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_seeds() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedConfig {
    pub name: String,
    pub config: TrainConfig,
}

impl ExperimentPlan {
    pub fn from_json(text: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.configs.is_empty() || self.seeds_per_config == 0 {
            return Err(Error::Config("plan needs at least one config and one seed".into()));
        }
        let mut names = HashSet::new();
        for c in &self.configs {
            if !names.insert(c.name.as_str()) {
                return Err(Error::Config(format!("duplicate config name {:?}", c.name)));
            }
            if c.name.is_empty() || c.name.contains(['/', '\\']) {
                return Err(Error::Config(format!("config name {:?} is not a plain file name", c.name)));
            }
            c.config
                .validate()
                .map_err(|e| Error::Config(format!("config {:?}: {e}", c.name)))?;
        }
        Ok(())
    }
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub variant: Variant,
    pub rank: usize,
    pub num_heads: usize,
    pub align_mode: AlignMode,
    pub lambda: f64,
    pub trainable_params: usize,
    pub seeds: Vec<u64>,
    pub accuracy: Option<Stat>,
    pub per_seed_accuracy: Vec<f64>,
    pub frozen_accuracy: Option<Stat>,
    pub head_similarity_mean: Option<Stat>,
    pub head_similarity_median: Option<Stat>,
    pub centroid_distance: Option<Stat>,
    pub per_seed_centroid_distance: Vec<f64>,
    /// `(seed, message)` for cells that did not finish.
    pub failures: Vec<(u64, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub dataset_seed: u64,
    pub rows: Vec<ComparisonRow>,
}

/// `--seed`, then the config, then the environment, then 0.
pub fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> Result<u64> {
    if let Some(s) = flag.or(config) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn read_config_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::NotMergeable { .. } => EXIT_NOT_MERGEABLE,
        _ => EXIT_RUNTIME,
    }
}

fn write_outputs(dir: &Path, report: &RunReport, checkpoint: Option<&Checkpoint>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut lines = fs::File::create(dir.join("report.jsonl"))?;
    for r in &report.records {
        serde_json::to_writer(&mut lines, r)?;
        lines.write_all(b"\n")?;
    }
    write_json(&dir.join("summary.json"), &report.summary)?;
    if let Some(ck) = checkpoint {
        write_json(&dir.join("checkpoint.json"), ck)?;
    }
    Ok(())
}

pub fn cmd_train(config: &Path, out: &Path, seed: Option<u64>) -> Result<RunSummary> {
    let mut cfg = TrainConfig::from_json(&read_config_text(config)?)?;
    cfg.seed = Some(resolve_seed(seed, cfg.seed)?);
    let (model, report) = run(&cfg)?;
    write_outputs(out, &report, Some(&Checkpoint::from_backbone(&model)))?;
    Ok(report.summary)
}

/// Runs every (config, seed) cell; the table is written even when some cells fail.
pub fn cmd_compare(plan_path: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<ComparisonTable> {
    let plan = ExperimentPlan::from_json(&read_config_text(plan_path)?)?;
    let out = out
        .map(Path::to_path_buf)
        .or_else(|| plan.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set output_dir".into()))?;
    let first = resolve_seed(seed, None)?;
    let seeds: Vec<u64> = (0..plan.seeds_per_config as u64).map(|k| first + k).collect();
    fs::create_dir_all(&out)?;

    let cells: Vec<(usize, u64)> = (0..plan.configs.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let results: Vec<std::result::Result<RunSummary, String>> = cells
        .par_iter()
        .map(|&(c, s)| {
            let named = &plan.configs[c];
            let mut cfg = named.config.clone();
            cfg.seed = Some(s);
            cfg.data.seed = plan.dataset_seed;
            let dir = out.join(&named.name).join(format!("seed-{s}"));
            run(&cfg)
                .and_then(|(_, report)| write_outputs(&dir, &report, None).map(|_| report.summary))
                .map_err(|e| e.to_string())
        })
        .collect();

    let rows = plan
        .configs
        .iter()
        .enumerate()
        .map(|(c, named)| {
            let mut done = Vec::new();
            let mut failures = Vec::new();
            for ((cell_c, s), r) in cells.iter().zip(&results) {
                if *cell_c != c {
                    continue;
                }
                match r {
                    Ok(summary) => done.push(summary),
                    Err(msg) => failures.push((*s, msg.clone())),
                }
            }
            let pick = |f: &dyn Fn(&RunSummary) -> Option<f64>| -> Vec<f64> { done.iter().filter_map(|s| f(s)).collect() };
            let acc = pick(&|s| Some(s.mean_accuracy));
            let cd = pick(&|s| s.centroid_distance);
            ComparisonRow {
                name: named.name.clone(),
                variant: named.config.variant,
                rank: named.config.rank,
                num_heads: named.config.num_heads,
                align_mode: named.config.align_mode,
                lambda: named.config.lambda(),
                trainable_params: named.config.trainable_params(),
                seeds: done.iter().map(|s| s.seed).collect(),
                accuracy: Stat::of(&acc),
                per_seed_accuracy: acc,
                frozen_accuracy: Stat::of(&pick(&|s| Some(s.frozen_mean_accuracy))),
                head_similarity_mean: Stat::of(&pick(&|s| s.head_similarity.as_ref().map(|h| h.pooled_mean))),
                head_similarity_median: Stat::of(&pick(&|s| s.head_similarity.as_ref().map(|h| h.pooled_median))),
                centroid_distance: Stat::of(&cd),
                per_seed_centroid_distance: cd,
                failures,
            }
        })
        .collect();
    let table = ComparisonTable {
        dataset_seed: plan.dataset_seed,
        rows,
    };
    write_json(&out.join("comparison.json"), &table)?;
    Ok(table)
}

/// Writes the merged weights and returns the max deviation over the probes.
pub fn cmd_merge(checkpoint: &Path, out: &Path) -> Result<f64> {
    let ck: Checkpoint = read_json(checkpoint)?;
    let model = ck.to_backbone()?;
    let merged = MergedWeights::from_backbone(&model)?;
    let dev = merge_deviation(&model, &merged.tensors()?, MERGE_PROBES, 0)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_json(out, &merged)?;
    Ok(dev)
}

/// Prints one line per suite and returns whether all of them passed.
pub fn cmd_verify(faults: Faults, mut out: impl Write) -> Result<bool> {
    let results = run_all(faults);
    for r in &results {
        writeln!(out, "{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail)?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if !failed.is_empty() {
        writeln!(out, "failed suites: {}", failed.join(", "))?;
    }
    Ok(failed.is_empty())
}

fn fmt_stat(s: &Option<Stat>) -> String {
    s.map_or_else(|| "-".into(), |s| format!("{:.4} ± {:.4}", s.mean, s.std))
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train { config, out, seed } => {
            let s = cmd_train(&config, &out, seed)?;
            println!(
                "{} seed {}: mean held-out accuracy {:.4} (frozen {:.4}), outputs in {}",
                s.variant,
                s.seed,
                s.mean_accuracy,
                s.frozen_mean_accuracy,
                out.display()
            );
            Ok(EXIT_OK)
        }
        Command::Compare { plan, out, seed } => {
            let table = cmd_compare(&plan, out.as_deref(), seed)?;
            let mut failed = false;
            for r in &table.rows {
                println!(
                    "{:<24} params {:>6}  accuracy {}  centroid distance {}  head similarity {}",
                    r.name,
                    r.trainable_params,
                    fmt_stat(&r.accuracy),
                    fmt_stat(&r.centroid_distance),
                    fmt_stat(&r.head_similarity_mean)
                );
                for (s, msg) in &r.failures {
                    eprintln!("{} seed {s} failed: {msg}", r.name);
                    failed = true;
                }
            }
            Ok(if failed { EXIT_RUNTIME } else { EXIT_OK })
        }
        Command::Merge { checkpoint, out } => {
            let dev = cmd_merge(&checkpoint, &out)?;
            println!("max abs output deviation over {MERGE_PROBES} probes: {dev:.3e}");
            Ok(EXIT_OK)
        }
        Command::Verify { inject_fault } => {
            let faults = Faults {
                flip_kl_gradient: inject_fault == Some(Fault::KlGradSign),
            };
            let ok = cmd_verify(faults, std::io::stdout().lock())?;
            Ok(if ok { EXIT_OK } else { EXIT_VERIFY })
        }
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return EXIT_RUNTIME;
        }
    }
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
