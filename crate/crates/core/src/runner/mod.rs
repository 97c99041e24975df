//! Config-driven experiments: datasets, per-seed pipelines with diagnostics,
//! and the `results.csv` / `report.json` / `manifest.json` outputs.

pub mod cli;
mod config;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{
    load_config, DatasetSpec, Delta2Spec, DiagnosticsSpec, Dtype, ExperimentConfig, GradSpec, GridCell, GridSpec,
    LensSpec, ModelShape,
};

use crate::corpus::Dataset;
use crate::diagnostics::{delta2_estimate, grad_alignment, logit_lens, DeltaEstimate, GradAlignment, ProbeHistogram};
use crate::error::{Error, Result};
use crate::eval::mean_loss;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::seeding::derive_seed;
use crate::tokenizer::Tokenizer;
use crate::training::{run_pipeline, DatasetRegistry, EpochStats, PipelineObserver, StageRecord, StageRun, StageSpec};

pub const RESULTS_FILE: &str = "results.csv";
pub const REPORT_FILE: &str = "report.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Where and how widely to run.
#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Checkpoints go under `<out_dir>/<cell>/seed<s>/`.
    pub out_dir: PathBuf,
    pub workers: usize,
    /// Relative dataset paths in the config resolve against this directory.
    pub base_dir: PathBuf,
    /// Per-epoch progress on stderr.
    pub verbose: bool,
}

/// Diagnostics measured around one stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageDiagnostics {
    pub stage_index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeHistogram>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alignment: Option<GradAlignment>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<DeltaEstimate>,
    /// Loss on the evaluation set before the stage minus after it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub stage_index: usize,
    pub stage_dataset: String,
    pub strategy: String,
    pub error: String,
}

/// Everything one seed of one grid cell produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub run_id: String,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
    pub diagnostics: Vec<StageDiagnostics>,
    pub failure: Option<SeedFailure>,
}

/// One line of `results.csv`. `seed` is a number, `mean` or `std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub seed: String,
    pub stage_index: usize,
    pub stage_dataset: String,
    pub strategy: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub run_id: String,
    pub version: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub runs: Vec<SeedRun>,
}

impl ExperimentReport {
    /// Per-seed rows in run order, followed by mean and std rows.
    pub fn rows(&self) -> Vec<MetricRow> {
        let mut rows: Vec<MetricRow> = self.runs.iter().flat_map(seed_rows).collect();
        let agg = aggregate(&rows);
        rows.extend(agg);
        rows
    }

    pub fn failures(&self) -> impl Iterator<Item = &SeedRun> {
        self.runs.iter().filter(|r| r.failure.is_some())
    }
}

fn seed_rows(run: &SeedRun) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    let mut push = |k: usize, dataset: &str, strategy: &str, metric: String, value: f64| {
        rows.push(MetricRow {
            run_id: run.run_id.clone(),
            seed: run.seed.to_string(),
            stage_index: k,
            stage_dataset: dataset.to_owned(),
            strategy: strategy.to_owned(),
            metric,
            value,
        })
    };
    for s in &run.stages {
        let (k, d, st) = (s.stage_index, s.stage_dataset.as_str(), s.strategy.as_str());
        push(k, d, st, "accuracy".into(), s.accuracy);
        push(k, d, st, "epochs_run".into(), s.result.epochs_run as f64);
        if let Some(&(_, loss)) = s.result.train_curve.last() {
            push(k, d, st, "final_train_loss".into(), loss);
        }
        push(k, d, st, "train_examples".into(), s.result.train_examples as f64);
        if let Some(diag) = run.diagnostics.iter().find(|g| g.stage_index == k) {
            if let Some(a) = &diag.alignment {
                push(k, d, st, "grad_dot".into(), a.dot);
                push(k, d, st, "grad_cosine".into(), a.cosine);
            }
            if let Some(e) = &diag.delta {
                push(k, d, st, "delta2".into(), e.delta2);
                push(k, d, st, "delta2_mixed".into(), e.terms.mixed);
                push(k, d, st, "delta2_plain".into(), e.terms.plain);
            }
            if let Some(v) = diag.delta1 {
                push(k, d, st, "delta1".into(), v);
            }
            if let Some(p) = &diag.probe {
                for (i, f) in p.per_layer_frequency.iter().enumerate() {
                    push(k, d, st, format!("probe_layer_{i}"), *f);
                }
                push(k, d, st, "probe_coverage".into(), p.coverage);
            }
        }
    }
    if let Some(f) = &run.failure {
        push(f.stage_index, &f.stage_dataset, &f.strategy, "failed".into(), 1.0);
    }
    rows
}

/// Mean and sample standard deviation over seeds for every
/// `(run_id, stage, dataset, strategy, metric)` key, in first-seen order.
/// The std of a single value is 0.
pub fn aggregate(rows: &[MetricRow]) -> Vec<MetricRow> {
    type Key<'a> = (&'a str, usize, &'a str, &'a str, &'a str);
    let mut order: Vec<Key> = Vec::new();
    let mut seen = HashSet::new();
    for r in rows.iter().filter(|r| r.seed.parse::<u64>().is_ok()) {
        let key = (r.run_id.as_str(), r.stage_index, r.stage_dataset.as_str(), r.strategy.as_str(), r.metric.as_str());
        if seen.insert(key) {
            order.push(key);
        }
    }
    let mut out = Vec::with_capacity(order.len() * 2);
    for key in order {
        let values: Vec<f64> = rows
            .iter()
            .filter(|r| {
                r.seed.parse::<u64>().is_ok()
                    && (r.run_id.as_str(), r.stage_index, r.stage_dataset.as_str(), r.strategy.as_str(), r.metric.as_str())
                        == key
            })
            .map(|r| r.value)
            .collect();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        for (label, value) in [("mean", mean), ("std", std)] {
            out.push(MetricRow {
                run_id: key.0.to_owned(),
                seed: label.to_owned(),
                stage_index: key.1,
                stage_dataset: key.2.to_owned(),
                strategy: key.3.to_owned(),
                metric: key.4.to_owned(),
                value,
            });
        }
    }
    out
}

/// Runs every grid cell and seed. A failing seed is recorded and the others continue.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for cell in cfg.cells() {
        let registry = cell.config.build_datasets(&opts.base_dir)?;
        let tokenizer = cell.config.build_tokenizer(&registry)?;
        let cell = std::sync::Arc::new((cell, registry, tokenizer));
        for &seed in &cfg.seeds {
            jobs.push((cell.clone(), seed));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| Error::config(format!("cannot start {} workers: {e}", opts.workers)))?;
    let runs: Vec<SeedRun> = pool.install(|| {
        jobs.par_iter()
            .map(|(cell, seed)| {
                let (cell, registry, tokenizer) = &**cell;
                let ckpt_dir = cell.config.save_checkpoints.then(|| seed_dir(&opts.out_dir, &cell.label, *seed));
                let ctx = SeedContext { label: &cell.label, ckpt_dir: ckpt_dir.as_deref(), out_dir: &opts.out_dir, verbose: opts.verbose };
                run_seed(&cell.config, registry, tokenizer, *seed, &ctx)
            })
            .collect()
    });
    Ok(ExperimentReport {
        run_id: cfg.run_id.clone(),
        version: env!("CARGO_PKG_VERSION").to_owned(),
        config_hash: cfg.hash()?,
        config: cfg.clone(),
        runs,
    })
}

/// `<out>/<cell>` with the cell label made path-safe.
pub fn cell_dir(out_dir: &Path, label: &str) -> PathBuf {
    let safe: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_=.".contains(c) { c } else { '_' })
        .collect();
    out_dir.join(safe)
}

pub fn seed_dir(out_dir: &Path, label: &str, seed: u64) -> PathBuf {
    cell_dir(out_dir, label).join(format!("seed{seed}"))
}

/// Stage specs with optimizer seeds tied to the run seed.
pub fn seeded_stages(cfg: &ExperimentConfig, seed: u64) -> Vec<StageSpec> {
    cfg.stages
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut s = s.clone();
            s.optimizer.seed = derive_seed(seed, &format!("stage{}:{}", i + 1, s.optimizer.seed));
            s
        })
        .collect()
}

pub fn model_seed(seed: u64) -> u64 {
    derive_seed(seed, "model")
}

struct SeedContext<'a> {
    label: &'a str,
    ckpt_dir: Option<&'a Path>,
    out_dir: &'a Path,
    verbose: bool,
}

fn run_seed(cfg: &ExperimentConfig, registry: &DatasetRegistry, tokenizer: &Tokenizer, seed: u64, ctx: &SeedContext<'_>) -> SeedRun {
    match cfg.dtype {
        Dtype::F32 => run_seed_as::<f32>(cfg, registry, tokenizer, seed, ctx),
        Dtype::F64 => run_seed_as::<f64>(cfg, registry, tokenizer, seed, ctx),
    }
}

fn run_seed_as<F: Scalar>(
    cfg: &ExperimentConfig,
    registry: &DatasetRegistry,
    tokenizer: &Tokenizer,
    seed: u64,
    ctx: &SeedContext<'_>,
) -> SeedRun {
    let mut observer = Collector {
        cfg,
        tokenizer,
        eval_set: &registry[&cfg.eval_on],
        registry,
        ctx,
        seed,
        stages: Vec::new(),
        diagnostics: Vec::new(),
        loss_before: None,
        current: 0,
    };
    let model_cfg = cfg.model.config(tokenizer.vocab_size(), model_seed(seed));
    let stages = seeded_stages(cfg, seed);
    let outcome = run_pipeline::<F>(&model_cfg, tokenizer, registry, &stages, &cfg.eval_on, &mut observer);
    let failure = outcome.err().map(|e| {
        let stage_index = observer.current.max(1);
        let spec = &cfg.stages[stage_index - 1];
        SeedFailure {
            stage_index,
            stage_dataset: spec.dataset.clone(),
            strategy: spec.strategy.label(),
            error: e.to_string(),
        }
    });
    SeedRun { run_id: ctx.label.to_owned(), seed, stages: observer.stages, diagnostics: observer.diagnostics, failure }
}

/// Runs the configured diagnostics around each stage and keeps finished records,
/// so a failure later in the pipeline does not lose earlier stages.
struct Collector<'a> {
    cfg: &'a ExperimentConfig,
    tokenizer: &'a Tokenizer,
    eval_set: &'a Dataset,
    registry: &'a DatasetRegistry,
    ctx: &'a SeedContext<'a>,
    seed: u64,
    stages: Vec<StageRecord>,
    diagnostics: Vec<StageDiagnostics>,
    loss_before: Option<f64>,
    current: usize,
}

impl<F: Scalar> PipelineObserver<F> for Collector<'_> {
    fn before_stage(&mut self, run: &StageRun<'_>, model: &Model<F>) -> Result<()> {
        self.current = run.stage_index;
        let mut diag = StageDiagnostics { stage_index: run.stage_index, ..Default::default() };
        let base = &self.registry[&run.spec.dataset];
        let gradients_wanted = self.cfg.diagnostics.grad_alignment.is_some() || self.cfg.diagnostics.delta2.is_some();
        if run.stage_index > 1 && gradients_wanted {
            let seed = derive_seed(run.spec.optimizer.seed, "gradients");
            let extra = extra_examples(run.assembled, base);
            let smallest = [self.eval_set.len(), base.len()]
                .into_iter()
                .chain(extra.as_ref().map(Dataset::len))
                .min()
                .unwrap_or(0);
            if let Some(g) = &self.cfg.diagnostics.grad_alignment {
                let sample = g.sample.map(|s| s.min(smallest));
                diag.alignment = Some(grad_alignment(model, self.tokenizer, self.eval_set, base, sample, seed)?);
            }
            if let Some(d) = &self.cfg.diagnostics.delta2 {
                let sample = d.sample.map(|s| s.min(smallest));
                diag.delta = Some(delta2_estimate(
                    model,
                    self.tokenizer,
                    self.eval_set,
                    base,
                    extra.as_ref(),
                    d.eta,
                    sample,
                    seed,
                )?);
                self.loss_before = Some(mean_loss(model, self.tokenizer, self.eval_set)?);
            }
        }
        self.diagnostics.push(diag);
        Ok(())
    }

    fn after_stage(&mut self, run: &StageRun<'_>, model: &Model<F>, record: &mut StageRecord) -> Result<()> {
        let diag = self.diagnostics.last_mut().expect("before_stage pushed a record");
        if let Some(before) = self.loss_before.take() {
            diag.delta1 = Some(before - mean_loss(model, self.tokenizer, self.eval_set)?);
        }
        if let Some(l) = &self.cfg.diagnostics.logit_lens {
            diag.probe = Some(logit_lens(model, self.tokenizer, self.eval_set, l.k)?);
        }
        if let Some(dir) = self.ctx.ckpt_dir {
            let path = dir.join(format!("stage{}.ckpt", run.stage_index));
            model.save(&path)?;
            let shown = path.strip_prefix(self.ctx.out_dir).unwrap_or(&path);
            record.result.model_checkpoint = Some(shown.display().to_string());
        }
        self.stages.push(record.clone());
        Ok(())
    }

    fn on_epoch(&mut self, stage_index: usize, s: EpochStats) {
        if self.ctx.verbose {
            let acc = s.accuracy.map_or(String::new(), |a| format!(" acc {a:.4}"));
            eprintln!(
                "{} seed {} stage {stage_index} epoch {} loss {:.6}{acc}",
                self.ctx.label, self.seed, s.epoch, s.loss
            );
        }
    }
}

/// Examples the strategy added on top of the stage data, if any.
fn extra_examples(assembled: &Dataset, base: &Dataset) -> Option<Dataset> {
    let own = base.prompts();
    let extra: Vec<_> = assembled.examples.iter().filter(|e| !own.contains(e.prompt.as_str())).cloned().collect();
    (!extra.is_empty()).then(|| Dataset::new(format!("{}+extra", base.id), assembled.kind, extra, assembled.seed))
}

fn sha256_hex(bytes: &[u8]) -> String {
    config::hex(&Sha256::digest(bytes))
}

/// Serializes rows in the fixed column order.
pub fn rows_to_csv(rows: &[MetricRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Format { what: "results.csv", detail: e.to_string() })
}

pub fn read_results(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format { what: "results.csv", detail: format!("{}: {e}", path.display()) })?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub version: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    /// SHA-256 of each written file.
    pub files: Vec<(String, String)>,
}

/// Writes `results.csv`, `report.json` and `manifest.json` into `out_dir`.
pub fn emit_report(report: &ExperimentReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv = rows_to_csv(&report.rows())?;
    let json = serde_json::to_vec_pretty(report)?;
    let mut written = Vec::new();
    let mut files = Vec::new();
    for (name, bytes) in [(RESULTS_FILE, &csv), (REPORT_FILE, &json)] {
        let path = out_dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        files.push((name.to_owned(), sha256_hex(bytes)));
        written.push(path);
    }
    let manifest = Manifest {
        run_id: report.run_id.clone(),
        version: report.version.clone(),
        config_hash: report.config_hash.clone(),
        config: report.config.clone(),
        files,
    };
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

pub fn load_report(path: &Path) -> Result<ExperimentReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
