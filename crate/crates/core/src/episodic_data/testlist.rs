use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::io::ensure_parent;
use super::manifest::Dataset;
use super::sampler::support_class_set;
use super::{FoldSpec, Phase};
use crate::error::{Error, Result};
use crate::labels::BACKGROUND;

/// One meta-test episode. Indices refer to `Dataset::samples`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TestPair {
    pub support_index: usize,
    pub query_index: usize,
    /// The foreground class this pair was drawn for; the 1-way protocol parses it alone.
    pub target: u8,
    /// Background then the support's foreground classes.
    pub class_set: Vec<u8>,
}

/// Draws `min_evals_per_class` pairs for every foreground class of `C_human`.
/// Each pair's support and query both contain the class when the data allows
/// it; the background class appears in every pair.
pub fn build_meta_test_list(
    dataset: &Dataset,
    fold: &FoldSpec,
    min_evals_per_class: usize,
    seed: u64,
) -> Result<Vec<TestPair>> {
    fold.validate()?;
    let phase = Phase::MetaTest;
    let supports = dataset.indices(phase.support_split());
    let queries = dataset.indices(phase.query_split());
    if min_evals_per_class == 0 {
        return Ok(Vec::new());
    }
    if supports.is_empty() || queries.is_empty() {
        return Err(Error::Sampling("meta-test splits must be nonempty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for class in fold.human_classes().into_iter().filter(|&c| c != BACKGROUND) {
        let name = dataset.class_name(class).to_string();
        let s_with: Vec<usize> = supports
            .iter()
            .copied()
            .filter(|&i| dataset.samples[i].mask.contains(class))
            .collect();
        if s_with.is_empty() {
            return Err(Error::Coverage {
                class_id: class,
                name,
                reason: "no meta-test support mask contains it".into(),
            });
        }
        let q_with: Vec<usize> = queries
            .iter()
            .copied()
            .filter(|&i| dataset.samples[i].mask.contains(class))
            .collect();
        let q_pool = if q_with.is_empty() {
            log::warn!("class {class} ({name}) is absent from every meta-test query");
            queries.clone()
        } else {
            q_with
        };
        let mut candidates: Vec<(usize, usize)> = s_with
            .iter()
            .flat_map(|&s| q_pool.iter().filter(move |&&q| q != s).map(move |&q| (s, q)))
            .collect();
        if candidates.is_empty() {
            return Err(Error::Coverage {
                class_id: class,
                name,
                reason: "no support/query pair of distinct images".into(),
            });
        }
        candidates.shuffle(&mut rng);
        if candidates.len() < min_evals_per_class {
            log::warn!(
                "class {class} ({name}): only {} distinct pairs for {min_evals_per_class} evaluations, repeating",
                candidates.len()
            );
        }
        for k in 0..min_evals_per_class {
            let (s, q) = candidates[k % candidates.len()];
            out.push(TestPair {
                support_index: s,
                query_index: q,
                target: class,
                class_set: support_class_set(&dataset.samples[s].mask),
            });
        }
    }
    Ok(out)
}

/// CSV with header `support_index,query_index,target,class_set`; class ids
/// are space separated.
pub fn write_test_list(path: &Path, pairs: &[TestPair]) -> Result<()> {
    ensure_parent(path)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut write = || -> std::io::Result<()> {
        writeln!(f, "support_index,query_index,target,class_set")?;
        for p in pairs {
            let set: Vec<String> = p.class_set.iter().map(u8::to_string).collect();
            writeln!(f, "{},{},{},{}", p.support_index, p.query_index, p.target, set.join(" "))?;
        }
        f.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn read_test_list(path: &Path) -> Result<Vec<TestPair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, detail: &str| Error::Parse {
        path: path.to_path_buf(),
        detail: format!("line {line}: {detail}"),
    };
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(bad(n + 1, "expected 4 fields"));
        }
        let int = |s: &str| s.trim().parse::<usize>().map_err(|e| bad(n + 1, &e.to_string()));
        let class_set = fields[3]
            .split_whitespace()
            .map(|s| s.parse::<u8>().map_err(|e| bad(n + 1, &e.to_string())))
            .collect::<Result<Vec<u8>>>()?;
        let target = u8::try_from(int(fields[2])?).map_err(|e| bad(n + 1, &e.to_string()))?;
        out.push(TestPair {
            support_index: int(fields[0])?,
            query_index: int(fields[1])?,
            target,
            class_set,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodic_data::{Sample, Split};
    use crate::labels::LabelMap;
    use crate::tensor::Tensor;

    fn toy() -> Dataset {
        let mk = |labels: Vec<u8>, split| Sample {
            id: String::new(),
            image: Tensor::zeros(3, 1, 4),
            mask: LabelMap::new(1, 4, labels).unwrap(),
            human: None,
            split,
        };
        Dataset {
            class_names: ["background", "a", "b", "c"].map(String::from).to_vec(),
            samples: vec![
                mk(vec![0, 1, 2, 3], Split::MetaTestSupport),
                mk(vec![0, 1, 2, 0], Split::MetaTestQuery),
                mk(vec![0, 0, 3, 1], Split::MetaTestSupport),
                mk(vec![0, 2, 3, 3], Split::MetaTestQuery),
            ],
        }
    }

    #[test]
    fn every_class_is_counted_enough() {
        let ds = toy();
        let fold = FoldSpec::identity(4, [3]);
        let pairs = build_meta_test_list(&ds, &fold, 2, 5).unwrap();
        assert_eq!(pairs.len(), 6);
        for class in 0..4u8 {
            let count = pairs.iter().filter(|p| p.class_set.contains(&class)).count();
            assert!(count >= 2, "class {class} counted {count} times");
        }
        for p in &pairs {
            assert_ne!(p.support_index, p.query_index);
            assert!(ds.samples[p.support_index].mask.contains(p.target));
        }
        assert_eq!(pairs, build_meta_test_list(&ds, &fold, 2, 5).unwrap());
    }

    #[test]
    fn zero_evals_gives_an_empty_list() {
        let pairs = build_meta_test_list(&toy(), &FoldSpec::identity(4, [3]), 0, 1).unwrap();
        assert!(pairs.is_empty());
    }

    #[test]
    fn absent_class_is_a_coverage_error() {
        let fold = FoldSpec::identity(5, [4]);
        match build_meta_test_list(&toy(), &fold, 1, 1) {
            Err(Error::Coverage { class_id, .. }) => assert_eq!(class_id, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("list.csv");
        let pairs = build_meta_test_list(&toy(), &FoldSpec::identity(4, [3]), 3, 9).unwrap();
        write_test_list(&path, &pairs).unwrap();
        assert_eq!(read_test_list(&path).unwrap(), pairs);
    }
}
