//! Query strategies selecting which unlabeled samples go to the oracle.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::model::{confidence, posterior, ModelState};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    LeastConfidence,
    /// Least-confident per ground-truth class. Needs the labels in advance,
    /// so it only runs against a simulated oracle.
    EqualClass,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuerySpec {
    pub strategy: Strategy,
    pub size: usize,
    pub labels_per_class: usize,
    pub seed: u64,
}

impl Default for QuerySpec {
    fn default() -> Self {
        QuerySpec {
            strategy: Strategy::LeastConfidence,
            size: 10,
            labels_per_class: 1,
            seed: 0,
        }
    }
}

impl QuerySpec {
    pub fn validate(&self) -> Result<()> {
        match self.strategy {
            Strategy::EqualClass if self.labels_per_class < 1 => {
                Err(Error::validation("equal_class needs labels_per_class >= 1"))
            }
            Strategy::LeastConfidence | Strategy::Random if self.size < 1 => {
                Err(Error::validation("query size must be at least 1"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryItem {
    pub id: usize,
    pub confidence: f64,
    pub predicted: usize,
    /// Ground-truth class, recorded only in simulation.
    pub truth: Option<usize>,
}

/// Scores every id with the model's confidence, in evaluation mode.
pub fn score_pool(state: &ModelState, dataset: &Dataset, ids: &[usize]) -> Result<Vec<QueryItem>> {
    ids.par_iter()
        .map(|&id| {
            let (conf, predicted) = confidence(&posterior(&state.logits(dataset.sample(id))?));
            Ok(QueryItem {
                id,
                confidence: conf,
                predicted,
                truth: None,
            })
        })
        .collect()
}

/// Sorts by ascending confidence, ties by ascending id, and keeps `q`.
pub fn select_least_confident(mut scored: Vec<QueryItem>, q: usize) -> Vec<QueryItem> {
    scored.sort_by(|a, b| a.confidence.total_cmp(&b.confidence).then(a.id.cmp(&b.id)));
    scored.truncate(q);
    scored
}

pub fn least_confidence_query(
    state: &ModelState,
    unlabeled: &[usize],
    dataset: &Dataset,
    q: usize,
) -> Result<Vec<QueryItem>> {
    if unlabeled.is_empty() {
        return Err(Error::validation("unlabeled pool is empty"));
    }
    Ok(select_least_confident(score_pool(state, dataset, unlabeled)?, q))
}

/// Picks up to `per_class` least-confident samples inside each true class.
/// A class whose pool runs dry contributes what it has; nothing is
/// substituted from other classes.
pub fn select_equal_class(scored: Vec<QueryItem>, truth: &[usize], classes: usize, per_class: usize) -> Vec<QueryItem> {
    let mut by_class: Vec<Vec<QueryItem>> = vec![Vec::new(); classes];
    for mut item in scored {
        let y = truth[item.id];
        item.truth = Some(y);
        by_class[y].push(item);
    }
    let mut out = Vec::new();
    for group in by_class {
        out.extend(select_least_confident(group, per_class));
    }
    out
}

pub fn equal_class_query(
    state: &ModelState,
    unlabeled: &[usize],
    dataset: &Dataset,
    labels_per_class: usize,
    truth: &[usize],
) -> Result<Vec<QueryItem>> {
    if unlabeled.is_empty() {
        return Err(Error::validation("unlabeled pool is empty"));
    }
    let scored = score_pool(state, dataset, unlabeled)?;
    Ok(select_equal_class(scored, truth, dataset.num_classes, labels_per_class))
}

pub fn random_query(unlabeled: &[usize], q: usize, seed: u64) -> Result<Vec<usize>> {
    if unlabeled.is_empty() {
        return Err(Error::validation("unlabeled pool is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = q.min(unlabeled.len());
    Ok(index::sample(&mut rng, unlabeled.len(), q)
        .into_iter()
        .map(|i| unlabeled[i])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: usize, confidence: f64) -> QueryItem {
        QueryItem { id, confidence, predicted: 0, truth: None }
    }

    #[test]
    fn picks_the_least_confident() {
        let picked = select_least_confident(vec![item(0, 0.9), item(1, 0.5), item(2, 0.7)], 2);
        assert_eq!(picked.iter().map(|i| i.id).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn exhausts_small_pools_in_order() {
        let picked = select_least_confident(vec![item(4, 0.9), item(1, 0.5), item(2, 0.7)], 10);
        assert_eq!(picked.iter().map(|i| i.id).collect::<Vec<_>>(), vec![1, 2, 4]);
    }

    #[test]
    fn ties_go_to_lower_ids() {
        let picked = select_least_confident(vec![item(7, 0.5), item(3, 0.5), item(5, 0.5)], 2);
        assert_eq!(picked.iter().map(|i| i.id).collect::<Vec<_>>(), vec![3, 5]);
    }

    #[test]
    fn equal_class_per_class_minimum() {
        let truth = [0, 0, 1];
        let picked = select_equal_class(vec![item(0, 0.6), item(1, 0.9), item(2, 0.8)], &truth, 2, 1);
        assert_eq!(picked.iter().map(|i| i.id).collect::<Vec<_>>(), vec![0, 2]);
    }

    #[test]
    fn equal_class_exhaustion_takes_all_remaining() {
        let truth = [0, 0, 0, 1];
        let picked = select_equal_class(
            vec![item(0, 0.6), item(1, 0.9), item(2, 0.3), item(3, 0.8)],
            &truth,
            2,
            2,
        );
        let ids: Vec<usize> = picked.iter().map(|i| i.id).collect();
        assert_eq!(ids, vec![2, 0, 3]);
    }

    #[test]
    fn random_query_full_pool_is_a_permutation() {
        let pool: Vec<usize> = (10..30).collect();
        let mut picked = random_query(&pool, pool.len(), 1).unwrap();
        assert_eq!(picked, random_query(&pool, pool.len(), 1).unwrap());
        picked.sort_unstable();
        assert_eq!(picked, pool);
    }

    #[test]
    fn empty_pools_are_rejected() {
        assert!(random_query(&[], 3, 0).is_err());
    }

    #[test]
    fn spec_validation() {
        let spec = QuerySpec { strategy: Strategy::EqualClass, size: 0, labels_per_class: 0, seed: 0 };
        assert!(spec.validate().is_err());
        let spec = QuerySpec { strategy: Strategy::LeastConfidence, size: 0, labels_per_class: 0, seed: 0 };
        assert!(spec.validate().is_err());
    }
}
