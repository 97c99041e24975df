use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    bundled_wordlist, gen_arithmetic_nonfactoid, gen_kvr, gen_random_word_sequences, gen_templated_factoids,
    generic_passages, Dataset, DatasetKind, BUNDLED_GENERIC_TEXT,
};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tokenizer::{Tokenizer, TokenizerMode};
use crate::training::{DatasetRegistry, MixRatio, OptimizerConfig, StageSpec, StopRule, StrategySpec};

/// Model shape; the vocabulary comes from the tokenizer and the seed from the run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelShape {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let c = ModelConfig::desk(0, 0);
        Self { n_layers: c.n_layers, d_model: c.d_model, n_heads: c.n_heads, d_ff: c.d_ff, max_seq_len: c.max_seq_len }
    }
}

impl ModelShape {
    pub fn config(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
            vocab_size,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

fn eight() -> usize {
    8
}

fn half() -> f64 {
    0.5
}

/// How to obtain one dataset. Generators are deterministic in their `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Kvr {
        id: String,
        n: usize,
        #[serde(default = "eight")]
        key_len: usize,
        #[serde(default = "eight")]
        val_len: usize,
        #[serde(default)]
        seed: u64,
    },
    Templated {
        id: String,
        n: usize,
        n_subjects: usize,
        n_relations: usize,
        #[serde(default)]
        seed: u64,
    },
    RandomWords {
        id: String,
        n: usize,
        words_per_seq: usize,
        /// One word per line; the bundled list when absent.
        #[serde(default)]
        wordlist: Option<PathBuf>,
        #[serde(default)]
        seed: u64,
    },
    Generic {
        id: String,
        n: usize,
        words_per_passage: usize,
        #[serde(default = "half")]
        split_fraction: f64,
        /// One document per line; the bundled corpus when absent.
        #[serde(default)]
        path: Option<PathBuf>,
        #[serde(default)]
        seed: u64,
    },
    Arithmetic {
        id: String,
        n: usize,
        max_operand: u64,
        #[serde(default)]
        seed: u64,
    },
    /// A saved `.jsonl` dataset with its manifest alongside.
    File { id: String, path: PathBuf },
    /// Contiguous examples `start..start + count` of an earlier dataset.
    Slice { id: String, source: String, start: usize, count: usize },
}

impl DatasetSpec {
    pub fn id(&self) -> &str {
        match self {
            DatasetSpec::Kvr { id, .. }
            | DatasetSpec::Templated { id, .. }
            | DatasetSpec::RandomWords { id, .. }
            | DatasetSpec::Generic { id, .. }
            | DatasetSpec::Arithmetic { id, .. }
            | DatasetSpec::File { id, .. }
            | DatasetSpec::Slice { id, .. } => id,
        }
    }

    /// Builds the dataset; relative paths resolve against `base`.
    pub fn build(&self, registry: &DatasetRegistry, base: &Path) -> Result<Dataset> {
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let d = match self {
            DatasetSpec::Kvr { n, key_len, val_len, seed, .. } => gen_kvr(*n, *key_len, *val_len, *seed)?,
            DatasetSpec::Templated { n, n_subjects, n_relations, seed, .. } => {
                gen_templated_factoids(*n, *n_subjects, *n_relations, *seed)?
            }
            DatasetSpec::RandomWords { n, words_per_seq, wordlist, seed, .. } => {
                let words = match wordlist {
                    None => bundled_wordlist(),
                    Some(p) => {
                        let p = resolve(p);
                        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                        text.lines().map(str::trim).filter(|w| !w.is_empty()).map(str::to_owned).collect()
                    }
                };
                gen_random_word_sequences(*n, *words_per_seq, &words, *seed)?
            }
            DatasetSpec::Generic { n, words_per_passage, split_fraction, path, seed, .. } => {
                let text = match path {
                    None => BUNDLED_GENERIC_TEXT.to_owned(),
                    Some(p) => {
                        let p = resolve(p);
                        fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?
                    }
                };
                generic_passages(&text, *n, *words_per_passage, *split_fraction, *seed)?
            }
            DatasetSpec::Arithmetic { n, max_operand, seed, .. } => gen_arithmetic_nonfactoid(*n, *max_operand, *seed)?,
            DatasetSpec::File { path, .. } => Dataset::load(&resolve(path))?,
            DatasetSpec::Slice { id, source, start, count } => {
                let src = registry
                    .get(source)
                    .ok_or_else(|| Error::config(format!("slice {id:?} references undefined dataset {source:?}")))?;
                let end = start.checked_add(*count).filter(|&e| e <= src.len()).ok_or_else(|| {
                    Error::config(format!("slice {id:?} wants {start}..{start}+{count} of {source:?} with {} examples", src.len()))
                })?;
                Dataset::new(id.clone(), src.kind, src.examples[*start..end].to_vec(), src.seed)
            }
        };
        Ok(d.with_id(self.id()))
    }
}

/// Per-layer logit-lens settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LensSpec {
    #[serde(default = "ten")]
    pub k: usize,
}

fn ten() -> usize {
    10
}

fn default_sample() -> Option<usize> {
    Some(crate::diagnostics::DEFAULT_GRAD_SAMPLE)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradSpec {
    /// Examples per gradient; `null` uses whole datasets.
    #[serde(default = "default_sample")]
    pub sample: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Delta2Spec {
    pub eta: f64,
    #[serde(default = "default_sample")]
    pub sample: Option<usize>,
}

/// Diagnostics switched on for every stage; all off by default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSpec {
    #[serde(default)]
    pub logit_lens: Option<LensSpec>,
    #[serde(default)]
    pub grad_alignment: Option<GradSpec>,
    #[serde(default)]
    pub delta2: Option<Delta2Spec>,
}

/// Ablation axes; every combination becomes one cell.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Replaces the ratio of every remix stage.
    #[serde(default)]
    pub mix_ratio: Vec<MixRatio>,
    /// Replaces `words_per_seq` of every random-word dataset.
    #[serde(default)]
    pub words_per_seq: Vec<usize>,
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    #[serde(default)]
    pub model: ModelShape,
    #[serde(default)]
    pub tokenizer: TokenizerMode,
    #[serde(default)]
    pub dtype: Dtype,
    pub datasets: Vec<DatasetSpec>,
    /// A stage without `stop` memorizes when it is the first stage and
    /// trains to loss 1e-4 otherwise.
    #[serde(deserialize_with = "stages_with_default_stops")]
    pub stages: Vec<StageSpec>,
    pub eval_on: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub diagnostics: DiagnosticsSpec,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default = "yes")]
    pub save_checkpoints: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StageInput {
    dataset: String,
    #[serde(default)]
    strategy: StrategySpec,
    stop: Option<StopRule>,
    #[serde(default)]
    optimizer: OptimizerConfig,
}

fn stages_with_default_stops<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Vec<StageSpec>, D::Error> {
    let raw = Vec::<StageInput>::deserialize(d)?;
    Ok(raw
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let stop = s.stop.unwrap_or_else(|| if i == 0 { StopRule::memorize() } else { StopRule::converge() });
            StageSpec::new(s.dataset, s.strategy, stop, s.optimizer)
        })
        .collect())
}

/// One point of the ablation grid, already applied to a copy of the config.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    /// `run_id`, suffixed with the grid coordinates when a grid is present.
    pub label: String,
    pub config: ExperimentConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(format!("at {path}: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical serialization with defaults filled; hashed into the manifest.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(self.canonical_json()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) || self.run_id.starts_with('.') {
            return Err(Error::config(format!("run_id {:?} must be a plain nonempty name", self.run_id)));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::config("seeds must be distinct"));
        }
        if self.stages.is_empty() {
            return Err(Error::config("at least one stage is required"));
        }
        self.model.config(1, 0).validate()?;
        let mut defined = BTreeSet::new();
        for (i, d) in self.datasets.iter().enumerate() {
            if let DatasetSpec::Slice { source, .. } = d {
                if !defined.contains(source.as_str()) {
                    return Err(Error::config(format!(
                        "datasets[{i}] slices undefined dataset {source:?} (define it earlier in the list)"
                    )));
                }
            }
            if !defined.insert(d.id()) {
                return Err(Error::config(format!("dataset id {:?} is defined twice", d.id())));
            }
        }
        let known = |id: &str, what: String| {
            if defined.contains(id) {
                Ok(())
            } else {
                Err(Error::config(format!("{what} references undefined dataset {id:?}")))
            }
        };
        known(&self.eval_on, "eval_on".into())?;
        for (i, s) in self.stages.iter().enumerate() {
            known(&s.dataset, format!("stages[{i}].dataset"))?;
            if let StrategySpec::Remix { source, .. } = &s.strategy {
                known(source, format!("stages[{i}].strategy.source"))?;
            }
            if matches!(s.strategy, StrategySpec::Replay { .. }) && i == 0 {
                return Err(Error::config("stages[0] uses replay but there is no earlier stage to replay"));
            }
            s.validate().map_err(|e| Error::config(format!("stages[{i}]: {e}")))?;
        }
        for r in &self.grid.mix_ratio {
            StrategySpec::Remix { source: String::new(), ratio: *r }.validate()?;
        }
        if self.grid.words_per_seq.contains(&0) {
            return Err(Error::config("grid.words_per_seq entries must be at least 1"));
        }
        if let Some(l) = &self.diagnostics.logit_lens {
            if l.k == 0 {
                return Err(Error::config("diagnostics.logit_lens.k must be at least 1"));
            }
        }
        if let Some(d) = &self.diagnostics.delta2 {
            if !(d.eta > 0.0 && d.eta.is_finite()) {
                return Err(Error::config("diagnostics.delta2.eta must be positive"));
            }
        }
        Ok(())
    }

    /// Replay needs a factoid stage before it; checked once datasets exist.
    pub fn validate_with(&self, registry: &DatasetRegistry) -> Result<()> {
        let mut seen_factoid = false;
        for (i, s) in self.stages.iter().enumerate() {
            if matches!(s.strategy, StrategySpec::Replay { .. }) && !seen_factoid {
                return Err(Error::config(format!("stages[{i}] uses replay but no earlier stage trains on factoids")));
            }
            seen_factoid |= registry[&s.dataset].kind == DatasetKind::Factoid;
        }
        Ok(())
    }

    /// Expands the grid into cells; a config without a grid is its own single cell.
    pub fn cells(&self) -> Vec<GridCell> {
        let ratios: Vec<Option<MixRatio>> =
            if self.grid.mix_ratio.is_empty() { vec![None] } else { self.grid.mix_ratio.iter().copied().map(Some).collect() };
        let lengths: Vec<Option<usize>> = if self.grid.words_per_seq.is_empty() {
            vec![None]
        } else {
            self.grid.words_per_seq.iter().copied().map(Some).collect()
        };
        let mut cells = Vec::new();
        for r in &ratios {
            for w in &lengths {
                let mut cfg = self.clone();
                cfg.grid = GridSpec::default();
                let mut tags = Vec::new();
                if let Some(r) = r {
                    tags.push(format!("mix_ratio={r}"));
                    for s in &mut cfg.stages {
                        if let StrategySpec::Remix { ratio, .. } = &mut s.strategy {
                            *ratio = *r;
                        }
                    }
                }
                if let Some(w) = w {
                    tags.push(format!("words_per_seq={w}"));
                    for d in &mut cfg.datasets {
                        if let DatasetSpec::RandomWords { words_per_seq, .. } = d {
                            *words_per_seq = *w;
                        }
                    }
                }
                let label = if tags.is_empty() { self.run_id.clone() } else { format!("{}[{}]", self.run_id, tags.join(";")) };
                cells.push(GridCell { label, config: cfg });
            }
        }
        cells
    }

    /// Builds every dataset in declaration order.
    pub fn build_datasets(&self, base: &Path) -> Result<DatasetRegistry> {
        let mut registry = BTreeMap::new();
        for spec in &self.datasets {
            let d = spec.build(&registry, base)?;
            registry.insert(d.id.clone(), d);
        }
        self.validate_with(&registry)?;
        Ok(registry)
    }

    /// Char mode needs no corpus; word mode reads every dataset. Fails when a
    /// sequence the stages train or evaluate on would not fit the context.
    pub fn build_tokenizer(&self, registry: &DatasetRegistry) -> Result<Tokenizer> {
        let texts: Vec<&str> = match self.tokenizer {
            TokenizerMode::Char => Vec::new(),
            TokenizerMode::Word => registry.values().flat_map(Dataset::texts).collect(),
        };
        let tok = Tokenizer::build(self.tokenizer, &texts)?;
        let mut used: BTreeSet<&str> = BTreeSet::from([self.eval_on.as_str()]);
        for stage in &self.stages {
            used.insert(&stage.dataset);
            if let StrategySpec::Remix { source, .. } = &stage.strategy {
                used.insert(source);
            }
        }
        for id in used {
            let Some(d) = registry.get(id) else { continue };
            for e in &d.examples {
                let len = tok.encode_pair(&e.prompt, &e.response)?.0.len();
                if len > self.model.max_seq_len {
                    return Err(Error::config(format!(
                        "dataset {id:?} has a {len}-token sequence but model.max_seq_len is {}",
                        self.model.max_seq_len
                    )));
                }
            }
        }
        Ok(tok)
    }
}

/// Reads and validates an experiment config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_json(&text).map_err(|e| match e {
        Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "run_id": "mini",
        "datasets": [{"kind": "kvr", "id": "a", "n": 4}],
        "stages": [{"dataset": "a"}],
        "eval_on": "a"
    }"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.seeds, vec![1, 2, 3]);
        assert_eq!(c.model, ModelShape::default());
        assert_eq!(c.model.n_layers, 2);
        assert_eq!(c.dtype, Dtype::F64);
        assert_eq!(c.tokenizer, TokenizerMode::Char);
        assert_eq!(c.stages[0].strategy, StrategySpec::None {});
        assert_eq!(c.diagnostics, DiagnosticsSpec::default());
        assert!(c.save_checkpoints);
        match &c.datasets[0] {
            DatasetSpec::Kvr { key_len, val_len, seed, .. } => assert_eq!((*key_len, *val_len, *seed), (8, 8, 0)),
            other => panic!("{other:?}"),
        }
        assert_eq!(c.cells().len(), 1);
        assert_eq!(c.cells()[0].label, "mini");
    }

    #[test]
    fn later_stages_default_to_the_loss_threshold() {
        let two = MINIMAL.replace(r#""stages": [{"dataset": "a"}]"#, r#""stages": [{"dataset": "a"}, {"dataset": "a"}, {"dataset": "a", "stop": {"mode": "fixed_epochs", "max_epochs": 3}}]"#);
        let c = ExperimentConfig::from_json(&two).unwrap();
        assert_eq!(c.stages[0].stop, StopRule::memorize());
        assert_eq!(c.stages[1].stop, StopRule::converge());
        assert_eq!(c.stages[2].stop, StopRule::fixed(3));
        // explicit stops survive the canonical form
        assert_eq!(ExperimentConfig::from_json(&c.canonical_json().unwrap()).unwrap(), c);
        let stray = MINIMAL.replace(r#"{"dataset": "a"}"#, r#"{"dataset": "a", "stopp": 1}"#);
        let msg = ExperimentConfig::from_json(&stray).unwrap_err().to_string();
        assert!(msg.contains("stages[0]") && msg.contains("stopp"), "{msg}");
    }

    #[test]
    fn oversized_sequences_are_a_config_error() {
        let c = ExperimentConfig::from_json(&MINIMAL.replace(r#""run_id": "mini","#, r#""run_id": "mini", "model": {"max_seq_len": 20},"#)).unwrap();
        let reg = c.build_datasets(Path::new(".")).unwrap();
        let e = c.build_tokenizer(&reg).unwrap_err();
        assert!(e.is_config() && e.to_string().contains("max_seq_len"), "{e}");
        let roomy = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert!(roomy.build_tokenizer(&reg).is_ok());
    }

    #[test]
    fn unknown_keys_report_their_path() {
        let bad = MINIMAL.replace(r#""stages": [{"dataset": "a"}]"#, r#""stages": [{"dataset": "a", "stop": {"mode": "fixed_epochs", "max_epochs": 1, "extra": 1}}]"#);
        let msg = ExperimentConfig::from_json(&bad).unwrap_err().to_string();
        assert!(msg.contains("stages[0].stop"), "{msg}");
        assert!(msg.contains("extra"), "{msg}");
    }

    #[test]
    fn undefined_dataset_is_named() {
        let bad = MINIMAL.replace(r#""eval_on": "a""#, r#""eval_on": "ghost""#);
        let e = ExperimentConfig::from_json(&bad).unwrap_err();
        assert!(e.is_config());
        assert!(e.to_string().contains("ghost"));
    }

    #[test]
    fn replay_needs_a_prior_factoid_stage() {
        let first = MINIMAL.replace(r#"{"dataset": "a"}"#, r#"{"dataset": "a", "strategy": {"kind": "replay", "ratio": 0.1}}"#);
        assert!(ExperimentConfig::from_json(&first).unwrap_err().is_config());
        let after_arith = r#"{
            "run_id": "r",
            "datasets": [{"kind": "arithmetic", "id": "m", "n": 4, "max_operand": 9}, {"kind": "kvr", "id": "a", "n": 4}],
            "stages": [{"dataset": "m"}, {"dataset": "a", "strategy": {"kind": "replay", "ratio": 0.5}}],
            "eval_on": "a"
        }"#;
        let c = ExperimentConfig::from_json(after_arith).unwrap();
        assert!(c.build_datasets(Path::new(".")).unwrap_err().is_config());
    }

    #[test]
    fn slices_are_disjoint_and_bounded() {
        let text = r#"{
            "run_id": "s",
            "datasets": [
                {"kind": "kvr", "id": "all", "n": 10, "key_len": 3, "val_len": 3, "seed": 5},
                {"kind": "slice", "id": "a", "source": "all", "start": 0, "count": 5},
                {"kind": "slice", "id": "b", "source": "all", "start": 5, "count": 5}
            ],
            "stages": [{"dataset": "a"}, {"dataset": "b"}],
            "eval_on": "a"
        }"#;
        let c = ExperimentConfig::from_json(text).unwrap();
        let reg = c.build_datasets(Path::new(".")).unwrap();
        assert!(reg["a"].prompts_disjoint_from(&reg["b"]));
        assert_eq!(reg["a"].kind, DatasetKind::Factoid);
        let over = text.replace(r#""start": 5, "count": 5"#, r#""start": 6, "count": 5"#);
        let c = ExperimentConfig::from_json(&over).unwrap();
        assert!(c.build_datasets(Path::new(".")).unwrap_err().is_config());
    }

    #[test]
    fn grid_expands_every_combination() {
        let text = r#"{
            "run_id": "g",
            "datasets": [{"kind": "kvr", "id": "a", "n": 4}, {"kind": "random_words", "id": "w", "n": 20, "words_per_seq": 3}],
            "stages": [{"dataset": "a", "strategy": {"kind": "remix", "source": "w", "ratio": "1:2"}}],
            "eval_on": "a",
            "grid": {"mix_ratio": ["1:1", "1:2", "1:4", "1:8"], "words_per_seq": [10, 25]}
        }"#;
        let c = ExperimentConfig::from_json(text).unwrap();
        let cells = c.cells();
        assert_eq!(cells.len(), 8);
        assert_eq!(cells[1].label, "g[mix_ratio=1:1;words_per_seq=25]");
        match &cells[7].config.stages[0].strategy {
            StrategySpec::Remix { ratio, .. } => assert_eq!(*ratio, MixRatio::new(1, 8)),
            other => panic!("{other:?}"),
        }
        assert!(cells.iter().all(|c| c.config.grid == GridSpec::default()));
    }

    #[test]
    fn hash_tracks_config_changes() {
        let a = ExperimentConfig::from_json(MINIMAL).unwrap();
        let same = ExperimentConfig::from_json(&MINIMAL.replace("    ", "  ")).unwrap();
        let mut b = a.clone();
        b.seeds = vec![1, 2];
        assert_eq!(a.hash().unwrap(), same.hash().unwrap());
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 64);
    }
}
