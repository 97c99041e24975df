use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use super::{DatasetRegistry, MixRatio, StageSpec, StrategySpec};
use crate::corpus::{Dataset, Example};
use crate::error::{Error, Result};
use crate::seeding::{derive_seed, rng};

/// Which input an example of a mixed dataset came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Data,
    Mix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixOutcome {
    pub dataset: Dataset,
    /// Provenance of every output example, aligned with `dataset.examples`.
    pub origins: Vec<Origin>,
    /// Extra reshuffled passes over `m` needed because it was too small.
    pub pool_cycles: usize,
}

/// Adds `(b/a)·|d|` examples of `m` to `d` and shuffles the union.
///
/// The pool is sampled without replacement; when it is smaller than required
/// it is cycled, reshuffling on every pass, and the cycle count is reported.
pub fn mix(d: &Dataset, m: &Dataset, ratio: MixRatio, seed: u64) -> Result<MixOutcome> {
    if ratio.data == 0 {
        return Err(Error::config("mix ratio a:b needs a >= 1"));
    }
    let need = ratio.mix_count(d.len());
    if need > 0 && m.is_empty() {
        return Err(Error::Capacity(format!("mixing pool {:?} is empty but {need} examples are required", m.id)));
    }
    let mut rng = rng(seed);
    let mut drawn: Vec<usize> = Vec::with_capacity(need);
    let mut pool_cycles = 0;
    while drawn.len() < need {
        let take = (need - drawn.len()).min(m.len());
        if !drawn.is_empty() {
            pool_cycles += 1;
        }
        drawn.extend(index::sample(&mut rng, m.len(), take).into_iter());
    }

    let mut tagged: Vec<(Origin, &Example)> = d.examples.iter().map(|e| (Origin::Data, e)).collect();
    tagged.extend(drawn.iter().map(|&i| (Origin::Mix, &m.examples[i])));
    tagged.shuffle(&mut rng);

    let (origins, examples): (Vec<Origin>, Vec<Example>) = tagged.into_iter().map(|(o, e)| (o, e.clone())).unzip();
    Ok(MixOutcome {
        dataset: Dataset::new(format!("{}+{}", d.id, m.id), d.kind, examples, seed),
        origins,
        pool_cycles,
    })
}

/// `⌊r·|d_a|⌋` examples drawn uniformly without replacement.
pub fn replay_subset(d_a: &Dataset, r: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::config(format!("replay ratio must lie in [0, 1], got {r}")));
    }
    // tolerate representation error such as 0.1 * 2000 = 200.00000000000003
    let k = ((r * d_a.len() as f64) * (1.0 + 1e-12)).floor() as usize;
    let k = k.min(d_a.len());
    let mut rng = rng(seed);
    let examples = index::sample(&mut rng, d_a.len(), k).into_iter().map(|i| d_a.examples[i].clone()).collect();
    Ok(Dataset::new(format!("{}@replay{r}", d_a.id), d_a.kind, examples, seed))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssembledStage {
    pub dataset: Dataset,
    pub pool_cycles: usize,
}

/// Training data for one stage after applying its strategy.
///
/// Replay appends the sampled prior factoids after the stage data; the trainer
/// reshuffles every epoch, so the union is batch-mixed.
pub fn assemble_stage_data(
    stage: &StageSpec,
    prior_factoids: Option<&Dataset>,
    registry: &DatasetRegistry,
    seed: u64,
) -> Result<AssembledStage> {
    let data = registry
        .get(&stage.dataset)
        .ok_or_else(|| Error::config(format!("stage references undefined dataset {:?}", stage.dataset)))?;
    match &stage.strategy {
        StrategySpec::None {} => Ok(AssembledStage { dataset: data.clone(), pool_cycles: 0 }),
        StrategySpec::Replay { ratio } => {
            let prior = prior_factoids
                .ok_or_else(|| Error::config("replay strategy needs factoids from an earlier stage"))?;
            let replayed = replay_subset(prior, *ratio, derive_seed(seed, "replay"))?;
            let mut dataset = data.clone();
            dataset.examples.extend(replayed.examples);
            Ok(AssembledStage { dataset, pool_cycles: 0 })
        }
        StrategySpec::Remix { source, ratio } => {
            let pool = registry
                .get(source)
                .ok_or_else(|| Error::config(format!("remix references undefined dataset {source:?}")))?;
            let out = mix(data, pool, *ratio, derive_seed(seed, "mix"))?;
            Ok(AssembledStage { dataset: out.dataset, pool_cycles: out.pool_cycles })
        }
    }
}
