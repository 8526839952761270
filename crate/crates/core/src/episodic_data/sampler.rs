use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{Dataset, Sample};
use super::Phase;
use crate::error::{Error, Result};
use crate::labels::{LabelMap, BACKGROUND};
use crate::tensor::Tensor;

/// `k_way` parses every class of the support mask at once; `one_way` parses a
/// single target class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Way {
    KWay,
    OneWay,
}

impl std::str::FromStr for Way {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k_way" => Ok(Way::KWay),
            "one_way" => Ok(Way::OneWay),
            other => Err(Error::Contract(format!("unknown protocol '{other}'"))),
        }
    }
}

/// One meta-task.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support_image: Tensor,
    pub support_mask: LabelMap,
    pub query_image: Tensor,
    /// Ground truth restricted to `class_set` (other labels become background).
    pub query_mask: Option<LabelMap>,
    /// Binary person masks, not restricted to `class_set`.
    pub support_human: LabelMap,
    pub query_human: Option<LabelMap>,
    /// Background first, then the support's foreground classes in ascending order.
    pub class_set: Vec<u8>,
    pub support_index: usize,
    pub query_index: usize,
}

impl Episode {
    /// Pairs `support` with `query` over `class_set`. Both masks are restricted
    /// to the class set.
    pub fn assemble(
        dataset: &Dataset,
        support_index: usize,
        query_index: usize,
        class_set: Vec<u8>,
    ) -> Result<Self> {
        if support_index == query_index {
            return Err(Error::Sampling(format!(
                "sample {support_index} cannot be its own support"
            )));
        }
        let support: &Sample = &dataset.samples[support_index];
        let query: &Sample = &dataset.samples[query_index];
        if class_set.first() != Some(&BACKGROUND) || class_set.len() < 2 {
            return Err(Error::Sampling(format!(
                "class set {class_set:?} must start with background and hold a foreground class"
            )));
        }
        let keep = |m: &LabelMap| {
            let mut lut = [BACKGROUND; 256];
            for &c in &class_set {
                lut[c as usize] = c;
            }
            m.map(|l| lut[l as usize])
        };
        Ok(Self {
            support_image: support.image.clone(),
            support_mask: keep(&support.mask),
            query_image: query.image.clone(),
            query_mask: Some(keep(&query.mask)),
            support_human: support.human_mask(),
            query_human: Some(query.human_mask()),
            class_set,
            support_index,
            query_index,
        })
    }

    pub fn foreground(&self) -> &[u8] {
        &self.class_set[1..]
    }
}

/// Class set of a support mask: background then every annotated class.
pub fn support_class_set(mask: &LabelMap) -> Vec<u8> {
    let mut set: Vec<u8> = mask.unique().into_iter().filter(|&c| c != BACKGROUND).collect();
    set.insert(0, BACKGROUND);
    set
}

/// Draws one episode from the `phase` splits of `dataset`; a pure function of
/// its arguments.
pub fn sample_episode(
    dataset: &Dataset,
    phase: Phase,
    seed: u64,
    way: Way,
    target_class: Option<u8>,
) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let supports = dataset.indices(phase.support_split());
    let queries = dataset.indices(phase.query_split());
    if supports.is_empty() {
        return Err(Error::Sampling(format!("split {} is empty", phase.support_split())));
    }
    if queries.is_empty() {
        return Err(Error::Sampling(format!("split {} is empty", phase.query_split())));
    }
    match way {
        Way::KWay => {
            let candidates: Vec<usize> = supports
                .into_iter()
                .filter(|&i| dataset.samples[i].mask.data().iter().any(|&l| l != BACKGROUND))
                .collect();
            let &s = candidates
                .choose(&mut rng)
                .ok_or_else(|| Error::Sampling("no support image has a foreground class".into()))?;
            let q = pick_query(&queries, s, &mut rng)?;
            Episode::assemble(dataset, s, q, support_class_set(&dataset.samples[s].mask))
        }
        Way::OneWay => {
            let target = target_class
                .ok_or_else(|| Error::Sampling("one-way sampling needs a target class".into()))?;
            if target == BACKGROUND {
                return Err(Error::Sampling("the target class cannot be background".into()));
            }
            let candidates: Vec<usize> = supports
                .into_iter()
                .filter(|&i| dataset.samples[i].mask.contains(target))
                .collect();
            let &s = candidates.choose(&mut rng).ok_or_else(|| {
                Error::Sampling(format!(
                    "no support image contains class {target} ({})",
                    dataset.class_name(target)
                ))
            })?;
            let q = pick_query(&queries, s, &mut rng)?;
            Episode::assemble(dataset, s, q, vec![BACKGROUND, target])
        }
    }
}

fn pick_query(queries: &[usize], support: usize, rng: &mut ChaCha8Rng) -> Result<usize> {
    let pool: Vec<usize> = queries.iter().copied().filter(|&q| q != support).collect();
    pool.choose(rng)
        .copied()
        .ok_or_else(|| Error::Sampling("no query image distinct from the support".into()))
}
