//! Command-line surface. `main` only forwards to [`run_cli`].

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use super::{emit_report, load_config, load_report, model_seed, run_experiment, seed_dir, seeded_stages, ExperimentConfig, RunOptions};
use super::{cell_dir, Dtype, GridCell, RESULTS_FILE};
use crate::diagnostics::{delta2_estimate, grad_alignment, logit_lens, DEFAULT_GRAD_SAMPLE};
use crate::error::{Error, Result};
use crate::eval::{exact_match, fast_accuracy};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::training::{run_pipeline, DatasetRegistry, EpochStats, PipelineObserver};
use crate::tokenizer::Tokenizer;

/// Output root when neither `--out` nor the environment says otherwise.
pub const DEFAULT_OUT: &str = "runs";
pub const OUT_ENV: &str = "FACTOID_FORGE_OUT";

#[derive(Debug, Parser)]
#[command(name = "factoid-forge", version, about = "Continual factoid memorization experiments on a small transformer")]
pub struct Cli {
    /// Output root; defaults to $FACTOID_FORGE_OUT, then `runs`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seeds and grid cells trained concurrently.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    /// Print per-epoch progress to stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    #[arg(long)]
    pub config: PathBuf,
}

/// Selects one stage checkpoint of a finished run.
#[derive(Debug, Args)]
pub struct CheckpointArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Defaults to the first configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// 1-based stage whose checkpoint is loaded; defaults to the last stage.
    #[arg(long)]
    pub stage: Option<usize>,
    /// Grid cell label; defaults to the first cell.
    #[arg(long)]
    pub cell: Option<String>,
    /// Dataset id to measure on; defaults to the config's `eval_on`.
    #[arg(long)]
    pub dataset: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build every dataset and the tokenizer and save them under `<out>/<run_id>/data`.
    GenData(ConfigArg),
    /// Train the stage pipeline for one seed, writing checkpoints.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Defaults to the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Exact-match accuracy of a stage checkpoint.
    Eval {
        #[command(flatten)]
        target: CheckpointArgs,
        /// Decode every prompt instead of the teacher-forced check, and list outcomes.
        #[arg(long)]
        decode: bool,
    },
    /// Logit-lens histogram of a stage checkpoint.
    Probe {
        #[command(flatten)]
        target: CheckpointArgs,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Gradient alignment between `eval_on` and `--against` at a checkpoint.
    Grad {
        #[command(flatten)]
        target: CheckpointArgs,
        /// Second dataset; defaults to the dataset of the stage after `--stage`.
        #[arg(long)]
        against: Option<String>,
        /// Mixing dataset for the Δ₂ estimate.
        #[arg(long)]
        mix: Option<String>,
        #[arg(long, default_value_t = 1e-3)]
        eta: f64,
        #[arg(long, default_value_t = DEFAULT_GRAD_SAMPLE)]
        sample: usize,
    },
    /// Run the full experiment and write results.csv, report.json and manifest.json.
    Run {
        #[command(flatten)]
        config: ConfigArg,
        /// Replace an earlier run with the same run_id.
        #[arg(long)]
        overwrite: bool,
    },
    /// Rewrite results.csv from report.json and print seed means.
    Report {
        /// Directory holding report.json.
        #[arg(long)]
        run: PathBuf,
    },
}

/// Parses `args` and runs the command. Configuration problems exit with 2,
/// other failures with 1.
pub fn run_cli<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}

fn out_root(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn base_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn execute(cli: &Cli) -> Result<()> {
    let out = out_root(cli);
    match &cli.command {
        Command::GenData(c) => gen_data(&c.config, &out),
        Command::Train { config, seed } => train(&config.config, *seed, &out, cli.verbose),
        Command::Eval { target, decode } => with_checkpoint(target, &out, EvalTask { decode: *decode }),
        Command::Probe { target, k } => with_checkpoint(target, &out, ProbeTask { k: *k }),
        Command::Grad { target, against, mix, eta, sample } => with_checkpoint(
            target,
            &out,
            GradTask { against: against.clone(), mix: mix.clone(), eta: *eta, sample: *sample, stage: target.stage },
        ),
        Command::Run { config, overwrite } => {
            let cfg = load_config(&config.config)?;
            let dir = out.join(&cfg.run_id);
            if dir.join(RESULTS_FILE).exists() && !overwrite {
                return Err(Error::config(format!(
                    "run_id {:?} already has results in {}; pass --overwrite to replace them",
                    cfg.run_id,
                    dir.display()
                )));
            }
            let opts = RunOptions {
                out_dir: out.clone(),
                workers: cli.workers,
                base_dir: base_dir(&config.config),
                verbose: cli.verbose,
            };
            let report = run_experiment(&cfg, &opts)?;
            emit_report(&report, &dir)?;
            print_summary(&report.rows());
            for f in report.failures() {
                let fail = f.failure.as_ref().expect("filtered on failure");
                eprintln!("seed {} of {} failed at stage {}: {}", f.seed, f.run_id, fail.stage_index, fail.error);
            }
            println!("wrote {}", dir.display());
            Ok(())
        }
        Command::Report { run } => {
            let report = load_report(&run.join(super::REPORT_FILE))?;
            emit_report(&report, run)?;
            print_summary(&report.rows());
            Ok(())
        }
    }
}

fn print_summary(rows: &[super::MetricRow]) {
    println!("{:<28} {:>5} {:<14} {:<22} {:>9} {:>9}", "run", "stage", "dataset", "strategy", "acc_mean", "acc_std");
    for m in rows.iter().filter(|r| r.seed == "mean" && r.metric == "accuracy") {
        let std = rows
            .iter()
            .find(|r| r.seed == "std" && r.metric == "accuracy" && r.run_id == m.run_id && r.stage_index == m.stage_index)
            .map_or(0.0, |r| r.value);
        println!(
            "{:<28} {:>5} {:<14} {:<22} {:>9.4} {:>9.4}",
            m.run_id, m.stage_index, m.stage_dataset, m.strategy, m.value, std
        );
    }
}

fn gen_data(config: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let dir = out.join(&cfg.run_id).join("data");
    for cell in cfg.cells() {
        let registry = cell.config.build_datasets(&base_dir(config))?;
        let target = if cfg.cells().len() == 1 { dir.clone() } else { cell_dir(&dir, &cell.label) };
        for d in registry.values() {
            let path = d.save(&target)?;
            println!("{} ({} examples, {})", path.display(), d.len(), d.kind);
        }
        let tok = cell.config.build_tokenizer(&registry)?;
        let path = target.join("tokenizer.json");
        tok.save(&path)?;
        println!("{} (vocab {})", path.display(), tok.vocab_size());
    }
    Ok(())
}

struct Progress(bool);

impl<F> PipelineObserver<F> for Progress {
    fn on_epoch(&mut self, stage_index: usize, s: EpochStats) {
        if self.0 {
            let acc = s.accuracy.map_or(String::new(), |a| format!(" acc {a:.4}"));
            eprintln!("stage {stage_index} epoch {} step {} loss {:.6}{acc}", s.epoch, s.step, s.loss);
        }
    }
}

fn train(config: &Path, seed: Option<u64>, out: &Path, verbose: bool) -> Result<()> {
    let cfg = load_config(config)?;
    let seed = seed.unwrap_or(cfg.seeds[0]);
    for cell in cfg.cells() {
        let registry = cell.config.build_datasets(&base_dir(config))?;
        let tok = cell.config.build_tokenizer(&registry)?;
        let dir = seed_dir(out, &cell.label, seed);
        match cfg.dtype {
            Dtype::F32 => train_as::<f32>(&cell, &registry, &tok, seed, &dir, verbose)?,
            Dtype::F64 => train_as::<f64>(&cell, &registry, &tok, seed, &dir, verbose)?,
        }
    }
    Ok(())
}

fn train_as<F: Scalar>(
    cell: &GridCell,
    registry: &DatasetRegistry,
    tok: &Tokenizer,
    seed: u64,
    dir: &Path,
    verbose: bool,
) -> Result<()> {
    let cfg = &cell.config;
    let model_cfg = cfg.model.config(tok.vocab_size(), model_seed(seed));
    let stages = seeded_stages(cfg, seed);
    let mut saver = Saver { dir, progress: Progress(verbose) };
    let (_, records) = run_pipeline::<F>(&model_cfg, tok, registry, &stages, &cfg.eval_on, &mut saver)?;
    for r in &records {
        println!(
            "{} seed {seed} stage {} ({}, {}): accuracy {:.4} after {} epochs ({:?})",
            cell.label, r.stage_index, r.stage_dataset, r.strategy, r.accuracy, r.result.epochs_run, r.result.stop_reason
        );
    }
    tok.save(&dir.join("tokenizer.json"))
}

struct Saver<'a> {
    dir: &'a Path,
    progress: Progress,
}

impl<F: Scalar> PipelineObserver<F> for Saver<'_> {
    fn after_stage(
        &mut self,
        run: &crate::training::StageRun<'_>,
        model: &Model<F>,
        record: &mut crate::training::StageRecord,
    ) -> Result<()> {
        let path = self.dir.join(format!("stage{}.ckpt", run.stage_index));
        model.save(&path)?;
        record.result.model_checkpoint = Some(path.display().to_string());
        Ok(())
    }

    fn on_epoch(&mut self, stage_index: usize, stats: EpochStats) {
        PipelineObserver::<F>::on_epoch(&mut self.progress, stage_index, stats);
    }
}

/// Work done on a loaded checkpoint, monomorphized per scalar type.
trait CheckpointTask {
    fn apply<F: Scalar>(
        &self,
        model: &Model<F>,
        tok: &Tokenizer,
        cfg: &ExperimentConfig,
        registry: &DatasetRegistry,
        dataset: &str,
    ) -> Result<()>;
}

fn with_checkpoint<T: CheckpointTask>(target: &CheckpointArgs, out: &Path, task: T) -> Result<()> {
    let cfg = load_config(&target.config)?;
    let cells = cfg.cells();
    let cell = match &target.cell {
        None => &cells[0],
        Some(label) => cells
            .iter()
            .find(|c| &c.label == label)
            .ok_or_else(|| Error::config(format!("no grid cell labelled {label:?}")))?,
    };
    let seed = target.seed.unwrap_or(cfg.seeds[0]);
    let stage = target.stage.unwrap_or(cfg.stages.len());
    if stage == 0 || stage > cfg.stages.len() {
        return Err(Error::config(format!("stage must lie in 1..={}", cfg.stages.len())));
    }
    let registry = cell.config.build_datasets(&base_dir(&target.config))?;
    let dataset = target.dataset.clone().unwrap_or_else(|| cfg.eval_on.clone());
    if !registry.contains_key(&dataset) {
        return Err(Error::config(format!("undefined dataset {dataset:?}")));
    }
    let tok = cell.config.build_tokenizer(&registry)?;
    let path = seed_dir(out, &cell.label, seed).join(format!("stage{stage}.ckpt"));
    match cfg.dtype {
        Dtype::F32 => task.apply(&Model::<f32>::load(&path)?, &tok, &cell.config, &registry, &dataset),
        Dtype::F64 => task.apply(&Model::<f64>::load(&path)?, &tok, &cell.config, &registry, &dataset),
    }
}

struct EvalTask {
    decode: bool,
}

impl CheckpointTask for EvalTask {
    fn apply<F: Scalar>(&self, m: &Model<F>, tok: &Tokenizer, _: &ExperimentConfig, reg: &DatasetRegistry, id: &str) -> Result<()> {
        let d = &reg[id];
        if self.decode {
            let report = exact_match(m, tok, d)?;
            for o in &report.per_example {
                println!("{}\t{:?}\t{:?}\t{:?}", if o.correct { "ok" } else { "MISS" }, o.prompt, o.prediction, o.target);
            }
            println!("accuracy {}", report.accuracy);
        } else {
            println!("accuracy {}", fast_accuracy(m, tok, d)?);
        }
        Ok(())
    }
}

struct ProbeTask {
    k: usize,
}

impl CheckpointTask for ProbeTask {
    fn apply<F: Scalar>(&self, m: &Model<F>, tok: &Tokenizer, _: &ExperimentConfig, reg: &DatasetRegistry, id: &str) -> Result<()> {
        println!("{}", serde_json::to_string_pretty(&logit_lens(m, tok, &reg[id], self.k)?)?);
        Ok(())
    }
}

struct GradTask {
    against: Option<String>,
    mix: Option<String>,
    eta: f64,
    sample: usize,
    stage: Option<usize>,
}

impl CheckpointTask for GradTask {
    fn apply<F: Scalar>(&self, m: &Model<F>, tok: &Tokenizer, cfg: &ExperimentConfig, reg: &DatasetRegistry, id: &str) -> Result<()> {
        let stage = self.stage.unwrap_or(cfg.stages.len());
        let against = match &self.against {
            Some(a) => a.clone(),
            None => cfg
                .stages
                .get(stage)
                .map(|s| s.dataset.clone())
                .ok_or_else(|| Error::config("no later stage; pass --against"))?,
        };
        let lookup = |name: &str| reg.get(name).ok_or_else(|| Error::config(format!("undefined dataset {name:?}")));
        let (d_a, d_b) = (&reg[id], lookup(&against)?);
        let mix = self.mix.as_deref().map(lookup).transpose()?;
        let sample = [Some(self.sample), Some(d_a.len()), Some(d_b.len()), mix.map(|d| d.len())]
            .into_iter()
            .flatten()
            .min();
        let seed = cfg.seeds[0];
        let alignment = grad_alignment(m, tok, d_a, d_b, sample, seed)?;
        let delta = delta2_estimate(m, tok, d_a, d_b, mix, self.eta, sample, seed)?;
        println!("{}", serde_json::to_string_pretty(&serde_json::json!({ "alignment": alignment, "delta": delta }))?);
        Ok(())
    }
}
