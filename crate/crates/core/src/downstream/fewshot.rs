use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

/// Query instances drawn per class.
pub const QUERIES_PER_CLASS: usize = 20;

/// Indices refer to the pool the episode was drawn from; `classes[i]` is
/// the original label of episode class `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FewShotEpisode {
    pub way: usize,
    pub shot: usize,
    pub classes: Vec<usize>,
    /// `(pool index, episode label)`.
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
}

/// `labels[i]` is the class of pool instance `i`.
pub fn sample_fewshot_episode<R: Rng + ?Sized>(
    labels: &[usize],
    way: usize,
    shot: usize,
    rng: &mut R,
) -> Result<FewShotEpisode> {
    if way == 0 || shot == 0 {
        return Err(Error::param("few-shot episodes need way and shot >= 1"));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let available: Vec<usize> = by_class.keys().copied().collect();
    if available.len() < way {
        return Err(Error::param(format!(
            "{way}-way episode from a pool with {} classes",
            available.len()
        )));
    }
    let need = shot + QUERIES_PER_CLASS;
    let classes: Vec<usize> = sample(rng, available.len(), way)
        .into_iter()
        .map(|i| available[i])
        .collect();
    let mut support = Vec::with_capacity(way * shot);
    let mut query = Vec::with_capacity(way * QUERIES_PER_CLASS);
    for (episode_label, &c) in classes.iter().enumerate() {
        let members = &by_class[&c];
        if members.len() < need {
            return Err(Error::param(format!(
                "class {c} has {} instances, {need} needed for {shot} shots plus {QUERIES_PER_CLASS} queries",
                members.len()
            )));
        }
        let picked = sample(rng, members.len(), need).into_vec();
        support.extend(picked[..shot].iter().map(|&i| (members[i], episode_label)));
        query.extend(picked[shot..].iter().map(|&i| (members[i], episode_label)));
    }
    Ok(FewShotEpisode {
        way,
        shot,
        classes,
        support,
        query,
    })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
