use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sampler::{sample_episode, ClassPool, Episode};
use crate::data::DatasetContainer;
use crate::error::{Error, Result};
use crate::head::LossWeights;
use crate::model::{infer, IcrlModel, Inference};
use crate::rng;

/// Episodes per evaluation unless configured otherwise.
pub const DEFAULT_EVAL_EPISODES: usize = 600;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalSpec {
    pub episodes: usize,
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub seed: u64,
}

/// The `i`-th evaluation episode for `seed`. Evaluation, inspection and the
/// Python bindings all draw episodes through this.
pub fn eval_episode(pool: &ClassPool, spec: &EvalSpec, i: usize) -> Result<Episode> {
    let mut r = rng::stream_indexed(spec.seed, "eval-episode", i as u64);
    sample_episode(pool, &mut r, spec.ways, spec.shots, spec.queries)
}

pub fn infer_episode(model: &IcrlModel, data: &DatasetContainer, episode: &Episode) -> Result<Inference> {
    model.check_shots(episode.shots())?;
    infer(model, &episode.inputs(data), LossWeights::default())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip)]
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub ci95: f64,
    pub episodes: usize,
    pub n: usize,
    pub k: usize,
    pub m: usize,
    pub seed: u64,
}

impl EvalReport {
    /// Mean and `1.96·s/√E` with `s` the sample standard deviation (zero for E = 1).
    pub fn from_accuracies(accuracies: Vec<f64>, spec: &EvalSpec) -> Result<Self> {
        let e = accuracies.len();
        if e == 0 {
            return Err(Error::Contract("evaluation needs at least one episode".into()));
        }
        let mean = accuracies.iter().sum::<f64>() / e as f64;
        let var = if e > 1 {
            accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (e - 1) as f64
        } else {
            0.0
        };
        Ok(EvalReport {
            mean,
            ci95: 1.96 * var.sqrt() / (e as f64).sqrt(),
            episodes: e,
            n: spec.ways,
            k: spec.shots,
            m: spec.queries,
            seed: spec.seed,
            accuracies,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }

    /// `"5-way 5-shot, 600 episodes: 81.87 ± 0.51"` with percentages to two decimals.
    pub fn to_text(&self) -> String {
        format!(
            "{}-way {}-shot, {} episodes: {:.2} ± {:.2}",
            self.n,
            self.k,
            self.episodes,
            100.0 * self.mean,
            100.0 * self.ci95
        )
    }
}

/// Mean query accuracy over `spec.episodes` independent episodes. Episodes run
/// in parallel; the report depends only on the model, data and seed.
pub fn evaluate(model: &IcrlModel, data: &DatasetContainer, classes: &[usize], spec: &EvalSpec) -> Result<EvalReport> {
    if spec.episodes == 0 {
        return Err(Error::Contract("evaluation needs at least one episode".into()));
    }
    model.check_shots(spec.shots)?;
    let pool = ClassPool::all(data, classes)?;
    // Surface sizing errors before spinning up workers.
    eval_episode(&pool, spec, 0)?;
    let accuracies = (0..spec.episodes)
        .into_par_iter()
        .map(|i| {
            let ep = eval_episode(&pool, spec, i)?;
            Ok(infer_episode(model, data, &ep)?.accuracy)
        })
        .collect::<Result<Vec<f64>>>()?;
    EvalReport::from_accuracies(accuracies, spec)
}
