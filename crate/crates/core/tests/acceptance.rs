//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use rand::Rng as _;

use factoid_forge::corpus::{
    bundled_wordlist, check_overlap, gen_kvr, gen_random_word_sequences, generic_passages, Dataset, DatasetKind,
    Example, BUNDLED_GENERIC_TEXT,
};
use factoid_forge::diagnostics::{delta2_with, logit_lens, QuadraticObjective};
use factoid_forge::eval::{fast_accuracy, mean_loss};
use factoid_forge::model::{Batch, Model, ModelConfig};
use factoid_forge::runner::{emit_report, run_experiment, ExperimentConfig, RunOptions, RESULTS_FILE};
use factoid_forge::seeding::{derive_seed, rng};
use factoid_forge::tokenizer::{Tokenizer, TokenizerMode};
use factoid_forge::training::{
    assemble_stage_data, mix, run_pipeline, DatasetRegistry, train_stage, MixRatio, OptimizerConfig, Origin, PipelineObserver,
    StageRecord, StageRun, StageSpec, StopRule, StrategySpec,
};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn char_tokenizer() -> Tokenizer {
    Tokenizer::build::<&str>(TokenizerMode::Char, &[]).unwrap()
}

// ---------------------------------------------------------------- P1

fn p1_gradient() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig { n_layers: 1, d_model: 8, n_heads: 2, d_ff: 32, max_seq_len: 16, vocab_size: 99, seed: 3 };
    let mut model = Model::<f64>::init(cfg).unwrap();
    let mut r = rng(11);
    // Perturb every parameter so no coordinate sits at a symmetric point and the final norm gain is nonzero.
    model.params_mut().iter_mut().for_each(|p| *p += r.gen_range(-0.5..0.5));
    let seqs: Vec<(Vec<u32>, usize)> = (0..4)
        .map(|i| {
            let len = 9 + i;
            ((0..len).map(|_| r.gen_range(4..99)).collect(), 3 + i)
        })
        .collect();
    let batch = Batch::from_pairs(&seqs);
    let (_, grad) = model.loss_and_gradient(&batch).unwrap();

    let h = 1e-4;
    let mut fd_at = |i: usize| {
        let orig = model.params()[i];
        model.params_mut()[i] = orig + h;
        let up = model.loss(&batch).unwrap();
        model.params_mut()[i] = orig - h;
        let down = model.loss(&batch).unwrap();
        model.params_mut()[i] = orig;
        (up - down) / (2.0 * h)
    };

    let picks = rand::seq::index::sample(&mut r, grad.len(), 64);
    let mut worst: f64 = 0.0;
    let mut flat = 0;
    for i in picks.iter() {
        let fd = fd_at(i);
        worst = worst.max((grad[i] - fd).abs() / (grad[i].abs() + 1e-8));
        flat += usize::from(grad[i] == 0.0);
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst < 1e-4 && secs < 10.0,
        format!("64 coordinates ({flat} with zero gradient), max relative error {worst:.2e}, {secs:.2}s"),
    )
}

// ---------------------------------------------------------------- P6

fn p6_mixing() -> Outcome {
    let d = gen_kvr(200, 8, 8, 21).unwrap();
    let pool = gen_random_word_sequences(1000, 6, &bundled_wordlist(), 22).unwrap();
    let mut sizes = Vec::new();
    for (a, b) in [(1, 0), (1, 1), (1, 2), (2, 1)] {
        let out = mix(&d, &pool, MixRatio::new(a, b), 5).unwrap();
        let expected = d.len() * (a + b) as usize / a as usize;
        if out.dataset.len() != expected {
            return Err(format!("{a}:{b} gave {} examples, expected {expected}", out.dataset.len()));
        }
        // provenance: every data example exactly once, every other example drawn from the pool
        let mut counts: HashMap<&Example, usize> = HashMap::new();
        for e in &out.dataset.examples {
            *counts.entry(e).or_default() += 1;
        }
        let pool_set: std::collections::HashSet<&Example> = pool.examples.iter().collect();
        let data_tags = out.origins.iter().filter(|&&o| o == Origin::Data).count();
        let data_once = d.examples.iter().all(|e| counts.get(e) == Some(&1));
        let rest_from_pool = out
            .origins
            .iter()
            .zip(&out.dataset.examples)
            .all(|(o, e)| (*o == Origin::Data) == d.examples.contains(e) && (*o == Origin::Data || pool_set.contains(e)));
        if data_tags != d.len() || !data_once || !rest_from_pool {
            return Err(format!("{a}:{b} provenance mismatch"));
        }
        sizes.push(format!("{a}:{b}->{}", out.dataset.len()));
    }

    // replay at r = 0 must retrace plain training bit for bit
    let tok = char_tokenizer();
    let all = gen_kvr(16, 4, 4, 31).unwrap();
    let mut reg = DatasetRegistry::new();
    reg.insert("a".into(), Dataset::new("a", DatasetKind::Factoid, all.examples[..8].to_vec(), 0));
    reg.insert("b".into(), Dataset::new("b", DatasetKind::Factoid, all.examples[8..].to_vec(), 0));
    let cfg = ModelConfig { n_layers: 1, d_model: 16, n_heads: 2, d_ff: 32, max_seq_len: 48, vocab_size: tok.vocab_size(), seed: 4 };
    let opt = OptimizerConfig { batch_size: 3, seed: 9, ..OptimizerConfig::default() };
    let run = |second: StrategySpec| {
        let stages = vec![
            StageSpec::new("a", StrategySpec::None {}, StopRule::fixed(3), opt.clone()),
            StageSpec::new("b", second, StopRule::fixed(3), OptimizerConfig { seed: 10, ..opt.clone() }),
        ];
        run_pipeline::<f64>(&cfg, &tok, &reg, &stages, "a", &mut ()).unwrap()
    };
    let (m_none, r_none) = run(StrategySpec::None {});
    let (m_replay, r_replay) = run(StrategySpec::Replay { ratio: 0.0 });
    let same_bits = m_none.params().iter().zip(m_replay.params()).all(|(x, y)| x.to_bits() == y.to_bits());
    let same_curves = r_none.iter().zip(&r_replay).all(|(x, y)| {
        x.result.train_curve.iter().zip(&y.result.train_curve).all(|(p, q)| p.0 == q.0 && p.1.to_bits() == q.1.to_bits())
            && x.accuracy == y.accuracy
    });
    check(
        same_bits && same_curves,
        format!("sizes {}; replay r=0 bit-identical: {}", sizes.join(" "), same_bits && same_curves),
    )
}

// ---------------------------------------------------------------- P7

fn point_mass_model(vocab: usize, answer: u32) -> Model<f64> {
    let d = 16;
    let cfg = ModelConfig { n_layers: 3, d_model: d, n_heads: 2, d_ff: 32, max_seq_len: 80, vocab_size: vocab, seed: 0 };
    let mut m = Model::<f64>::init(cfg).unwrap();
    m.params_mut().iter_mut().for_each(|p| *p = 0.0);
    let gains = (0..3)
        .flat_map(|l| [format!("layers.{l}.ln1.gain"), format!("layers.{l}.ln2.gain")])
        .chain(["final_ln.gain".to_owned()]);
    for name in gains {
        let r = m.segment(&name).unwrap().range();
        m.params_mut()[r].iter_mut().for_each(|p| *p = 1.0);
    }
    // Only the last block writes a direction into the residual, and only the
    // answer's head column reads it.
    let u: Vec<f64> = (0..d).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let out = m.segment("layers.2.mlp.b_out").unwrap().offset;
    m.params_mut()[out..out + d].copy_from_slice(&u);
    let head = m.segment("lm_head").unwrap().offset;
    for (i, &x) in u.iter().enumerate() {
        m.params_mut()[head + i * vocab + answer as usize] = x;
    }
    m
}

fn p7_logit_lens() -> Outcome {
    let tok = char_tokenizer();
    let v = tok.vocab_size();
    let kvr = gen_kvr(50, 8, 8, 41).unwrap();
    let desk = Model::<f64>::init(ModelConfig::desk(v, 42)).unwrap();
    let untrained = logit_lens(&desk, &tok, &kvr, 10).unwrap();
    let untrained_ok = untrained.coverage == 0.0
        && untrained.per_layer_frequency.len() == 3
        && untrained.per_layer_frequency.iter().all(|&f| f == 0.0);

    let mut sums = Vec::new();
    for seed in 0..4u64 {
        let mut m = Model::<f64>::init(ModelConfig { n_layers: 2, d_model: 16, n_heads: 2, d_ff: 32, max_seq_len: 80, vocab_size: v, seed }).unwrap();
        let mut r = rng(seed);
        m.params_mut().iter_mut().for_each(|p| *p += r.gen_range(-0.3..0.3));
        let h = logit_lens(&m, &tok, &kvr, 20).unwrap();
        if h.coverage > 0.0 {
            sums.push(h.per_layer_frequency.iter().sum::<f64>());
        } else if h.per_layer_frequency.iter().any(|&f| f != 0.0) {
            return Err("coverage 0 with nonzero histogram".into());
        }
    }
    let sums_ok = !sums.is_empty() && sums.iter().all(|s| (s - 1.0).abs() < 1e-9);

    let answer_text = kvr.examples[0].response.clone();
    let answer = tok.encode(&answer_text).unwrap()[0];
    let same: Vec<Example> = kvr.examples.iter().map(|e| Example::new(e.prompt.clone(), answer_text.clone())).collect();
    let pm = logit_lens(&point_mass_model(v, answer), &tok, &Dataset::new("pm", DatasetKind::Factoid, same, 0), 1).unwrap();
    let pm_ok = pm.per_layer_frequency == vec![0.0, 0.0, 0.0, 1.0] && pm.coverage == 1.0;

    check(
        untrained_ok && sums_ok && pm_ok,
        format!(
            "untrained coverage {} histogram {:?}; {} covered random models sum to 1; point mass {:?}",
            untrained.coverage,
            untrained.per_layer_frequency,
            sums.len(),
            pm.per_layer_frequency
        ),
    )
}

// ---------------------------------------------------------------- P8

fn p8_delta2() -> Outcome {
    let n = 4;
    let mut r = rng(81);
    let a: Vec<f64> = (0..n * n).map(|_| r.gen_range(-1.0..1.0)).collect();
    // H = AᵀA + I, symmetric positive definite
    let mut hessian = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            hessian[i * n + j] = (0..n).map(|k| a[k * n + i] * a[k * n + j]).sum::<f64>() + if i == j { 1.0 } else { 0.0 };
        }
    }
    let mut centers = |count: usize| -> Vec<Vec<f64>> {
        (0..count).map(|_| (0..n).map(|_| r.gen_range(-2.0..2.0)).collect()).collect()
    };
    let (d_a, d_b, d_m) = (centers(5), centers(4), centers(3));
    let theta: Vec<f64> = (0..n).map(|i| 0.3 * i as f64 - 0.4).collect();
    let obj = QuadraticObjective::new(hessian, theta).unwrap();

    let error_at = |eta: f64| {
        let est = delta2_with(&obj, &d_a, &d_b, Some(&d_m), eta).unwrap();
        let plain = obj.step(eta, &[&d_b]).unwrap();
        let mixed = obj.step(eta, &[&d_b, &d_m]).unwrap();
        let actual = obj.loss_at(&plain, &[&d_a]).unwrap() - obj.loss_at(&mixed, &[&d_a]).unwrap();
        (actual - est.delta2).abs()
    };
    let eta = 0.05;
    let (e1, e2) = (error_at(eta), error_at(eta / 2.0));
    let ratio = e1 / e2;
    let empty = delta2_with(&obj, &d_a, &d_b, None, eta).unwrap();
    check(
        ratio >= 3.5 && empty.delta2 == 0.0,
        format!("prediction error {e1:.3e} at eta {eta}, {e2:.3e} at eta/2, ratio {ratio:.3}; delta2 without mixing {}", empty.delta2),
    )
}

// ---------------------------------------------------------------- P9

const P9_CONFIG: &str = r#"{
    "run_id": "determinism",
    "model": {"n_layers": 1, "d_model": 16, "n_heads": 2, "d_ff": 32, "max_seq_len": 160},
    "datasets": [
        {"kind": "kvr", "id": "all", "n": 16, "key_len": 4, "val_len": 4, "seed": 7},
        {"kind": "slice", "id": "a", "source": "all", "start": 0, "count": 8},
        {"kind": "slice", "id": "b", "source": "all", "start": 8, "count": 8},
        {"kind": "random_words", "id": "w", "n": 40, "words_per_seq": 4, "seed": 3}
    ],
    "stages": [
        {"dataset": "a", "strategy": {"kind": "remix", "source": "w", "ratio": "1:1"},
         "stop": {"mode": "fixed_epochs", "max_epochs": 3}, "optimizer": {"batch_size": 4}},
        {"dataset": "b", "strategy": {"kind": "replay", "ratio": 0.25},
         "stop": {"mode": "fixed_epochs", "max_epochs": 2}, "optimizer": {"batch_size": 4}}
    ],
    "eval_on": "a",
    "seeds": [1, 2],
    "diagnostics": {"logit_lens": {"k": 5}, "grad_alignment": {"sample": 4}, "delta2": {"eta": 0.001, "sample": 4}},
    "grid": {"mix_ratio": ["1:1", "1:2"]}
}"#;

fn p9_determinism() -> Outcome {
    let cfg = ExperimentConfig::from_json(P9_CONFIG).map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for workers in [1, 2] {
        let dir = tempfile::tempdir().unwrap();
        let opts = RunOptions { out_dir: dir.path().to_owned(), workers, base_dir: ".".into(), verbose: false };
        let report = run_experiment(&cfg, &opts).map_err(|e| e.to_string())?;
        if let Some(f) = report.failures().next().and_then(|r| r.failure.as_ref()) {
            return Err(format!("seed failed: {}", f.error));
        }
        emit_report(&report, dir.path()).map_err(|e| e.to_string())?;
        outputs.push(std::fs::read(dir.path().join(RESULTS_FILE)).unwrap());
    }
    let rows = outputs[0].iter().filter(|&&b| b == b'\n').count();
    check(
        outputs[0] == outputs[1] && rows > 1,
        format!("two runs (1 and 2 workers) wrote {} and {} bytes, {rows} lines, identical: {}", outputs[0].len(), outputs[1].len(), outputs[0] == outputs[1]),
    )
}

// ---------------------------------------------------------------- P10

fn p10_overlap() -> Outcome {
    let factoids = gen_kvr(100, 8, 8, 101).unwrap();
    let generic = generic_passages(BUNDLED_GENERIC_TEXT, 200, 20, 0.5, 102).unwrap();
    let clean = check_overlap(&factoids, &generic);
    let mut planted = generic.clone();
    let victim = &factoids.examples[42];
    let text = format!("it was said {} and then {} was heard", victim.subject.as_deref().unwrap(), victim.response);
    planted.examples.insert(17, Example::new("Complete the following partial passage: once", text));
    let dirty = check_overlap(&factoids, &planted);
    check(
        clean.fraction == 0.0 && dirty.fraction == 0.01,
        format!("bundled corpus overlap {}; with one planted pair {}", clean.fraction, dirty.fraction),
    )
}

// ---------------------------------------------------------------- P2 to P5

const SEEDS: [u64; 3] = [1, 2, 3];
const REPLAY_RATIO: f64 = 0.1;
const WORDS_PER_SEQ: usize = 4;

#[derive(Debug)]
struct SeedOutcome {
    stage1_accuracy: f64,
    stage1_epochs: usize,
    stage1_secs: f64,
    none: f64,
    replay: f64,
    remix: f64,
    /// Stage-1 loss after stage 2, which still moves when accuracy sits at zero.
    loss_none: f64,
    loss_replay: f64,
    loss_remix: f64,
}

struct Desk {
    tok: Tokenizer,
    registry: DatasetRegistry,
    model: ModelConfig,
    opt: OptimizerConfig,
}

impl Desk {
    fn new(seed: u64) -> Self {
        let tok = char_tokenizer();
        let all = gen_kvr(400, 8, 8, derive_seed(seed, "kvr")).unwrap();
        let (a, b) = all.examples.split_at(200);
        let mut registry = DatasetRegistry::new();
        registry.insert("a".into(), Dataset::new("a", DatasetKind::Factoid, a.to_vec(), seed));
        registry.insert("b".into(), Dataset::new("b", DatasetKind::Factoid, b.to_vec(), seed));
        let words = gen_random_word_sequences(400, WORDS_PER_SEQ, &bundled_wordlist(), derive_seed(seed, "words")).unwrap();
        registry.insert("w".into(), words.with_id("w"));
        let model = ModelConfig::desk(tok.vocab_size(), derive_seed(seed, "model"));
        let opt = OptimizerConfig { seed, ..OptimizerConfig::default() };
        Self { tok, registry, model, opt }
    }

    fn stage(&self, k: u64, dataset: &str, strategy: StrategySpec) -> StageSpec {
        let opt = OptimizerConfig { seed: derive_seed(self.opt.seed, &format!("stage{k}")), ..self.opt.clone() };
        StageSpec::new(dataset, strategy, StopRule::memorize(), opt)
    }
}

/// Keeps the model as it stood after the first stage and how long that stage took.
struct Snapshot {
    started: Instant,
    secs: f64,
    model: Option<Model<f32>>,
}

impl PipelineObserver<f32> for Snapshot {
    fn before_stage(&mut self, _run: &StageRun<'_>, _model: &Model<f32>) -> factoid_forge::Result<()> {
        self.started = Instant::now();
        Ok(())
    }

    fn after_stage(&mut self, run: &StageRun<'_>, model: &Model<f32>, _record: &mut StageRecord) -> factoid_forge::Result<()> {
        if run.stage_index == 1 {
            self.secs = self.started.elapsed().as_secs_f64();
            self.model = Some(model.clone());
        }
        Ok(())
    }
}

fn desk_seed(seed: u64) -> SeedOutcome {
    let desk = Desk::new(seed);
    let (tok, reg) = (&desk.tok, &desk.registry);
    let a = &reg["a"];

    let plain = [desk.stage(1, "a", StrategySpec::None {}), desk.stage(2, "b", StrategySpec::None {})];
    let mut snap = Snapshot { started: Instant::now(), secs: 0.0, model: None };
    let (after_none, records) = run_pipeline::<f32>(&desk.model, tok, reg, &plain, "a", &mut snap).unwrap();

    // replay forks from the same stage-1 model
    let replay_stage = desk.stage(2, "b", StrategySpec::Replay { ratio: REPLAY_RATIO });
    let assembled = assemble_stage_data(&replay_stage, Some(a), reg, derive_seed(replay_stage.optimizer.seed, "assemble")).unwrap();
    let mut forked = snap.model.clone().unwrap();
    train_stage(&mut forked, tok, &assembled.dataset, &reg["b"], &replay_stage).unwrap();
    let replay = fast_accuracy(&forked, tok, a).unwrap();

    let remix = [
        desk.stage(1, "a", StrategySpec::Remix { source: "w".into(), ratio: MixRatio::new(1, 2) }),
        desk.stage(2, "b", StrategySpec::None {}),
    ];
    let (after_remix, remix_records) = run_pipeline::<f32>(&desk.model, tok, reg, &remix, "a", &mut ()).unwrap();

    SeedOutcome {
        stage1_accuracy: records[0].accuracy,
        stage1_epochs: records[0].result.epochs_run,
        stage1_secs: snap.secs,
        none: records[1].accuracy,
        replay,
        remix: remix_records[1].accuracy,
        loss_none: mean_loss(&after_none, tok, a).unwrap(),
        loss_replay: mean_loss(&forked, tok, a).unwrap(),
        loss_remix: mean_loss(&after_remix, tok, a).unwrap(),
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn desk_criteria(report: &mut dyn FnMut(&str, Outcome)) {
    let outcomes: Result<Vec<SeedOutcome>, String> = SEEDS
        .iter()
        .map(|&s| {
            let o = catch_unwind(AssertUnwindSafe(|| desk_seed(s))).map_err(panic_text)?;
            eprintln!("seed {s}: {o:?}");
            Ok(o)
        })
        .collect();
    let outcomes = match outcomes {
        Ok(o) => o,
        Err(e) => {
            for id in ["P2", "P3", "P4", "P5"] {
                report(id, Err(format!("desk run aborted: {e}")));
            }
            return;
        }
    };
    let list = |f: &dyn Fn(&SeedOutcome) -> String| outcomes.iter().map(f).collect::<Vec<_>>().join(", ");

    let memorized = outcomes.iter().all(|o| o.stage1_accuracy == 1.0 && o.stage1_epochs <= 200 && o.stage1_secs < 180.0);
    report(
        "P2",
        check(memorized, format!("stage-1 accuracy/epochs/seconds per seed: {}", list(&|o| format!("{}/{}/{:.0}", o.stage1_accuracy, o.stage1_epochs, o.stage1_secs)))),
    );

    let none = mean(outcomes.iter().map(|o| o.none));
    let losses = |f: &dyn Fn(&SeedOutcome) -> f64| format!("stage-1 loss {:.3}", mean(outcomes.iter().map(f)));
    report("P3", check(none < 0.5, format!("mean stage-1 accuracy after stage 2 with no mitigation {none:.3} ({}), {}", list(&|o| format!("{:.3}", o.none)), losses(&|o| o.loss_none))));

    let replay = mean(outcomes.iter().map(|o| o.replay));
    report("P4", check(replay >= none, format!("replay r={REPLAY_RATIO} mean {replay:.3} vs none {none:.3} ({}), {}", list(&|o| format!("{:.3}", o.replay)), losses(&|o| o.loss_replay))));

    let remix = mean(outcomes.iter().map(|o| o.remix));
    report(
        "P5",
        check(remix - none > 0.02, format!("remix 1:2 mean {remix:.3} vs none {none:.3}, gain {:.3} ({}), {}", remix - none, list(&|o| format!("{:.3}", o.remix)), losses(&|o| o.loss_remix))),
    );
}

// ---------------------------------------------------------------- driver

fn panic_text(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panic".into())
}

fn main() -> ExitCode {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let wanted = |id: &str| filter.as_deref().map_or(true, |f| f.split(',').any(|x| x == id));
    let mut results: Vec<(String, Outcome)> = Vec::new();
    let mut report = |id: &str, o: Outcome| {
        match &o {
            Ok(d) => println!("{id} PASS: {d}"),
            Err(d) => println!("{id} FAIL: {d}"),
        }
        results.push((id.to_owned(), o));
    };

    let quick: [(&str, fn() -> Outcome); 6] = [
        ("P1", p1_gradient),
        ("P6", p6_mixing),
        ("P7", p7_logit_lens),
        ("P8", p8_delta2),
        ("P9", p9_determinism),
        ("P10", p10_overlap),
    ];
    for (id, f) in quick {
        if wanted(id) {
            let o = catch_unwind(f).unwrap_or_else(|p| Err(panic_text(p)));
            report(id, o);
        }
    }
    if ["P2", "P3", "P4", "P5"].iter().any(|id| wanted(id)) {
        desk_criteria(&mut |id, o| {
            if wanted(id) {
                report(id, o)
            }
        });
    }

    let failed: Vec<&str> = results.iter().filter(|(_, o)| o.is_err()).map(|(id, _)| id.as_str()).collect();
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
