//! Dataset manifests, the one-shot tailoring protocol, episode sampling and
//! meta-test pair lists.
//!
//! Masks are single-channel 8-bit label images with id 0 as background.
//! Manifests and fold specs are TOML files with one `[[entries]]` record per
//! image.

mod fold;
mod io;
mod manifest;
mod sampler;
mod synthetic;
mod tailor;
mod testlist;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub use fold::FoldSpec;
pub use io::{read_image, read_mask, write_image, write_mask};
pub use manifest::{Dataset, DatasetManifest, ManifestEntry, Sample};
pub use sampler::{sample_episode, Episode, Way};
pub use synthetic::{generate_synthetic_dataset, generate_synthetic_samples, PartKind, SyntheticConfig};
pub use tailor::{tailor_dataset, tailor_mask, tailor_samples};
pub use testlist::{build_meta_test_list, read_test_list, write_test_list, TestPair};

/// Meta-learning phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    MetaTrain,
    MetaTest,
}

impl Phase {
    pub fn support_split(self) -> Split {
        match self {
            Phase::MetaTrain => Split::MetaTrainSupport,
            Phase::MetaTest => Split::MetaTestSupport,
        }
    }

    pub fn query_split(self) -> Split {
        match self {
            Phase::MetaTrain => Split::MetaTrainQuery,
            Phase::MetaTest => Split::MetaTestQuery,
        }
    }

    pub fn contains(self, split: Split) -> bool {
        split == self.support_split() || split == self.query_split()
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "meta_train" => Ok(Phase::MetaTrain),
            "meta_test" => Ok(Phase::MetaTest),
            other => Err(Error::Contract(format!("unknown phase '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    MetaTrainSupport,
    MetaTrainQuery,
    MetaTestSupport,
    MetaTestQuery,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::MetaTrainSupport,
        Split::MetaTrainQuery,
        Split::MetaTestSupport,
        Split::MetaTestQuery,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::MetaTrainSupport => "meta_train_support",
            Split::MetaTrainQuery => "meta_train_query",
            Split::MetaTestSupport => "meta_test_support",
            Split::MetaTestQuery => "meta_test_query",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}
