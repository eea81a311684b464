//! Few-shot evaluation: a fresh model is trained on each episode's support
//! set and scored on its query set.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{Backend, Model, ModelConfig};
use crate::error::{ensure_arg, Result};
use crate::training::{evaluate, few_shot_episodes, mean_std, train, Dataset, FewShotEpisode, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotOptions {
    pub way: usize,
    pub shot: usize,
    pub trials: usize,
    /// Seeds episode sampling, model initialisation and shuffling.
    pub seed: u64,
    pub backend: Backend,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub episode: FewShotEpisode,
    /// Overall accuracy on the query set.
    pub accuracy: f64,
}

fn episode_set(data: &Dataset, items: &[(usize, usize)], names: &[String]) -> Result<Dataset> {
    let clouds = items
        .iter()
        .map(|&(i, l)| data.clouds[i].clone().with_label(l))
        .collect();
    Dataset::new(clouds, names.to_vec())
}

pub fn run_fewshot(data: &Dataset, opts: &FewShotOptions) -> Result<Vec<TrialResult>> {
    ensure_arg!(!data.is_empty(), "few-shot source dataset is empty");
    let episodes = few_shot_episodes(&data.labels(), opts.way, opts.shot, opts.trials, opts.seed)?;
    let points = data.clouds.iter().map(|c| c.len()).min().unwrap_or(0);
    let mut results = Vec::with_capacity(episodes.len());
    for (t, episode) in episodes.into_iter().enumerate() {
        let names: Vec<String> = episode.classes.iter().map(|&c| data.class_names[c].clone()).collect();
        let support = episode_set(data, &episode.train, &names)?;
        let query = episode_set(data, &episode.test, &names)?;
        let mut cfg = ModelConfig::toy(opts.way, opts.backend);
        cfg.points = points;
        let trial_seed = opts.seed.wrapping_add(t as u64 + 1);
        let mut model = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(trial_seed))?;
        let tc = TrainConfig {
            seed: trial_seed,
            target_test_acc: None,
            ..opts.train.clone()
        };
        train(&mut model, &support, None, &tc, |_| {})?;
        let accuracy = evaluate(&model, &query)?.overall;
        results.push(TrialResult { episode, accuracy });
    }
    Ok(results)
}

/// Mean and standard deviation of the trial accuracies.
pub fn summarize(results: &[TrialResult]) -> (f64, f64) {
    mean_std(&results.iter().map(|r| r.accuracy).collect::<Vec<_>>())
}
