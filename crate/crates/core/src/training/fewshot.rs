use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure_arg, Result};

/// Test instances drawn per selected class.
pub const TEST_PER_CLASS: usize = 20;

/// One n-way m-shot episode. Indices refer to the source dataset; episode
/// labels are positions in `classes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FewShotEpisode {
    pub way: usize,
    pub shot: usize,
    pub classes: Vec<usize>,
    /// `(dataset index, episode label)`, `way * shot` entries.
    pub train: Vec<(usize, usize)>,
    /// `(dataset index, episode label)`, `way * TEST_PER_CLASS` entries.
    pub test: Vec<(usize, usize)>,
}

impl FewShotEpisode {
    pub fn overlaps(&self) -> bool {
        self.train.iter().any(|(i, _)| self.test.iter().any(|(j, _)| i == j))
    }
}

/// Samples `trials` episodes from `labels`. Each class used must have at
/// least `shot + TEST_PER_CLASS` instances.
pub fn few_shot_episodes(
    labels: &[usize],
    way: usize,
    shot: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<FewShotEpisode>> {
    ensure_arg!(
        way >= 1 && shot >= 1 && trials >= 1,
        "way, shot and trials must be positive"
    );
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let eligible: Vec<usize> = by_class
        .iter()
        .filter(|(_, v)| v.len() >= shot + TEST_PER_CLASS)
        .map(|(c, _)| *c)
        .collect();
    ensure_arg!(
        eligible.len() >= way,
        "{way}-way {shot}-shot episodes need {way} classes with at least {} instances, found {}",
        shot + TEST_PER_CLASS,
        eligible.len()
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut episodes = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut classes: Vec<usize> = eligible.choose_multiple(&mut rng, way).copied().collect();
        classes.sort_unstable();
        let mut train = Vec::with_capacity(way * shot);
        let mut test = Vec::with_capacity(way * TEST_PER_CLASS);
        for (episode_label, c) in classes.iter().enumerate() {
            let mut pool = by_class[c].clone();
            pool.shuffle(&mut rng);
            train.extend(pool[..shot].iter().map(|&i| (i, episode_label)));
            test.extend(pool[shot..shot + TEST_PER_CLASS].iter().map(|&i| (i, episode_label)));
        }
        episodes.push(FewShotEpisode {
            way,
            shot,
            classes,
            train,
            test,
        });
    }
    Ok(episodes)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(classes: usize, per: usize) -> Vec<usize> {
        (0..classes * per).map(|i| i % classes).collect()
    }

    #[test]
    fn episode_sizes_and_disjointness() {
        let eps = few_shot_episodes(&labels(8, 30), 5, 10, 10, 0).unwrap();
        assert_eq!(eps.len(), 10);
        for e in &eps {
            assert_eq!(e.train.len(), 50);
            assert_eq!(e.test.len(), 100);
            assert!(!e.overlaps());
            let l = labels(8, 30);
            for &(i, el) in e.train.iter().chain(&e.test) {
                assert_eq!(l[i], e.classes[el]);
            }
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let l = labels(6, 40);
        assert_eq!(
            few_shot_episodes(&l, 3, 10, 4, 7).unwrap(),
            few_shot_episodes(&l, 3, 10, 4, 7).unwrap()
        );
        assert_ne!(
            few_shot_episodes(&l, 3, 10, 4, 7).unwrap(),
            few_shot_episodes(&l, 3, 10, 4, 8).unwrap()
        );
    }

    #[test]
    fn insufficient_instances() {
        assert!(few_shot_episodes(&labels(5, 29), 5, 10, 1, 0).is_err());
        assert!(few_shot_episodes(&labels(4, 30), 5, 10, 1, 0).is_err());
    }

    #[test]
    fn mean_and_population_std() {
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }
}
