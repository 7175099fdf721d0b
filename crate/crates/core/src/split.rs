//! Zero- and few-shot splits over held-out classes.
//!
//! Training keeps every scene whose objects are all seen classes. For each
//! unseen class `u`, shot scenes are drawn from scenes anchored on `u` that
//! hold no other unseen class; shot sets for the same seed are nested, so the
//! 3-shot training set contains the 1-shot one. The test set is every other
//! scene anchored on an unseen class.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SceneMeta;
use crate::error::{Error, Result};

/// Shot counts the experiments sweep over.
pub const SHOTS: [usize; 4] = [0, 1, 3, 5];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seen_classes: BTreeSet<usize>,
    pub unseen_classes: BTreeSet<usize>,
    pub shots: usize,
    /// Injected scene ids, `shots` per unseen class in class order.
    pub shot_sample_ids: Vec<String>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub spec: SplitSpec,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Builds the split. `num_classes` fixes the class universe; every class
/// not listed as unseen is seen.
pub fn make_fewshot_split(
    scenes: &[SceneMeta],
    num_classes: usize,
    unseen: &BTreeSet<usize>,
    shots: usize,
    seed: u64,
) -> Result<Split> {
    if unseen.is_empty() {
        return Err(Error::Config("at least one unseen class is required".into()));
    }
    if let Some(&c) = unseen.iter().find(|&&c| c >= num_classes) {
        return Err(Error::Config(format!("unseen class {c} outside 0..{num_classes}")));
    }
    let seen: BTreeSet<usize> = (0..num_classes).filter(|c| !unseen.contains(c)).collect();
    let touches_unseen = |s: &SceneMeta| s.classes().any(|c| unseen.contains(&c));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shot_ids = Vec::new();
    for &u in unseen {
        let anchored: Vec<&SceneMeta> = scenes.iter().filter(|s| s.anchor == u).collect();
        if anchored.is_empty() {
            return Err(Error::Config(format!("unseen class {u} has no scenes")));
        }
        let mut pool: Vec<&SceneMeta> = anchored
            .into_iter()
            .filter(|s| s.classes().all(|c| c == u || !unseen.contains(&c)))
            .collect();
        pool.shuffle(&mut rng);
        if pool.len() < shots {
            return Err(Error::Config(format!(
                "unseen class {u}: {shots} shots requested, {} eligible scenes",
                pool.len()
            )));
        }
        shot_ids.extend(pool[..shots].iter().map(|s| s.id.clone()));
    }

    let shot_set: BTreeSet<&str> = shot_ids.iter().map(String::as_str).collect();
    let train = scenes
        .iter()
        .filter(|s| !touches_unseen(s) || shot_set.contains(s.id.as_str()))
        .map(|s| s.id.clone())
        .collect();
    let test: Vec<String> = scenes
        .iter()
        .filter(|s| unseen.contains(&s.anchor) && !shot_set.contains(s.id.as_str()))
        .map(|s| s.id.clone())
        .collect();
    if test.is_empty() {
        return Err(Error::Config("no unseen-class scenes left for testing".into()));
    }
    Ok(Split {
        spec: SplitSpec {
            seen_classes: seen,
            unseen_classes: unseen.clone(),
            shots,
            shot_sample_ids: shot_ids,
            seed,
        },
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DatasetSpec};

    fn metas(n: usize, seed: u64) -> Vec<SceneMeta> {
        let spec = DatasetSpec {
            num_scenes: n,
            seed,
            ..DatasetSpec::default()
        };
        generate(&spec).unwrap().into_iter().map(|s| s.meta).collect()
    }

    fn by_id(scenes: &[SceneMeta]) -> alloc::collections::BTreeMap<&str, &SceneMeta> {
        scenes.iter().map(|s| (s.id.as_str(), s)).collect()
    }

    #[test]
    fn zero_shot_training_never_sees_unseen_classes() {
        let scenes = metas(200, 1);
        let unseen: BTreeSet<usize> = [6, 7].into();
        let split = make_fewshot_split(&scenes, 8, &unseen, 0, 3).unwrap();
        assert!(split.spec.shot_sample_ids.is_empty());
        let idx = by_id(&scenes);
        for id in &split.train {
            assert!(idx[id.as_str()].classes().all(|c| !unseen.contains(&c)));
        }
        for id in &split.test {
            assert!(unseen.contains(&idx[id.as_str()].anchor));
        }
    }

    #[test]
    fn five_shots_from_twenty() {
        // Only one object per scene, so every anchored scene is eligible.
        let spec = DatasetSpec {
            num_scenes: 160,
            max_objects: 1,
            seed: 2,
            ..DatasetSpec::default()
        };
        let scenes: Vec<_> = generate(&spec).unwrap().into_iter().map(|s| s.meta).collect();
        assert_eq!(scenes.iter().filter(|s| s.anchor == 3).count(), 20);
        let unseen: BTreeSet<usize> = [3].into();
        let zero = make_fewshot_split(&scenes, 8, &unseen, 0, 9).unwrap();
        let five = make_fewshot_split(&scenes, 8, &unseen, 5, 9).unwrap();
        assert_eq!(five.train.len(), zero.train.len() + 5);
        assert_eq!(five.test.len(), 15);
    }

    #[test]
    fn manifests_are_disjoint_and_shots_nested() {
        let scenes = metas(240, 4);
        let unseen: BTreeSet<usize> = [1, 6].into();
        for seed in 0..10 {
            let mut prev: BTreeSet<String> = BTreeSet::new();
            for shots in SHOTS {
                let split = make_fewshot_split(&scenes, 8, &unseen, shots, seed).unwrap();
                let train: BTreeSet<_> = split.train.iter().cloned().collect();
                assert!(split.test.iter().all(|id| !train.contains(id)));
                assert_eq!(split.spec.shot_sample_ids.len(), shots * unseen.len());
                let shot_set: BTreeSet<String> = split.spec.shot_sample_ids.iter().cloned().collect();
                assert!(prev.is_subset(&shot_set));
                prev = shot_set;
            }
        }
    }

    #[test]
    fn errors() {
        let scenes = metas(40, 5);
        assert!(make_fewshot_split(&scenes, 8, &BTreeSet::new(), 0, 0).is_err());
        assert!(make_fewshot_split(&scenes, 8, &[8].into(), 0, 0).is_err());
        assert!(matches!(
            make_fewshot_split(&scenes, 8, &[2].into(), 50, 0),
            Err(Error::Config(_))
        ));
    }
}
