//! Class prototypes: masked average pooling and the momentum bank.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::embedding::MetricSpace;
use crate::error::{Error, Result};
use crate::episodic_data::Phase;
use crate::labels::{LabelMap, BACKGROUND};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeKind {
    Static,
    Momentum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub class_id: u8,
    pub space: MetricSpace,
    pub kind: PrototypeKind,
    pub vector: Vec<f64>,
}

impl Prototype {
    pub fn new_static(class_id: u8, space: MetricSpace, vector: Vec<f64>) -> Self {
        Self {
            class_id,
            space,
            kind: PrototypeKind::Static,
            vector,
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::vector(self.vector.clone())
    }
}

/// Resamples `mask` to the spatial size of `features` if needed.
pub fn mask_at_resolution(mask: &LabelMap, h: usize, w: usize) -> LabelMap {
    if mask.height() == h && mask.width() == w {
        mask.clone()
    } else {
        mask.resize_nearest(h, w)
    }
}

/// Differentiable masked average pooling of `features` over pixels labelled
/// `class_id`. The mask must already be at feature resolution.
pub fn pool_var(tape: &mut Tape, features: Var, mask: &LabelMap, class_id: u8) -> Result<Var> {
    let (_, h, w) = tape.value(features).shape();
    if mask.height() != h || mask.width() != w {
        return Err(Error::shape(
            "pool",
            format!("mask {}x{} vs features {h}x{w}", mask.height(), mask.width()),
        ));
    }
    let region = mask.indicator(class_id);
    if !region.contains(&true) {
        return Err(Error::EmptyClass(class_id));
    }
    tape.masked_mean(features, &region)
}

/// Static prototype of `class_id`: the mean feature over its pixels.
pub fn masked_average_pool(
    features: &Tensor,
    mask: &LabelMap,
    class_id: u8,
    space: MetricSpace,
) -> Result<Prototype> {
    let mask = mask_at_resolution(mask, features.height(), features.width());
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let p = pool_var(&mut tape, f, &mask, class_id)?;
    Ok(Prototype::new_static(class_id, space, tape.value(p).data().to_vec()))
}

/// Query-side static prototypes `p̃_c` for every foreground class of
/// `class_set`, pooled with the ground-truth query mask.
pub fn query_prototypes(features: &Tensor, query_mask: &LabelMap, class_set: &[u8]) -> Result<Vec<Prototype>> {
    class_set
        .iter()
        .filter(|&&c| c != BACKGROUND)
        .map(|&c| masked_average_pool(features, query_mask, c, MetricSpace::Fgs))
        .collect()
}

/// Where a prototype consumed this episode comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrototypeSource {
    /// Pooled from this episode's support features.
    Static,
    /// Read from the momentum bank.
    Momentum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub space: MetricSpace,
    pub class_id: u8,
    pub vector: Vec<f64>,
}

/// Persistent momentum-updated prototypes, keyed by `(space, class)` and kept
/// sorted for a stable serialisation order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    alpha: f64,
    warmup_epochs: usize,
    entries: Vec<BankEntry>,
}

impl PrototypeBank {
    pub fn new(alpha: f64, warmup_epochs: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::Config(format!("momentum alpha {alpha} outside [0, 1)")));
        }
        Ok(Self {
            alpha,
            warmup_epochs,
            entries: Vec::new(),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn warmup_epochs(&self) -> usize {
        self.warmup_epochs
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    fn position(&self, space: MetricSpace, class_id: u8) -> std::result::Result<usize, usize> {
        self.entries
            .binary_search_by(|e| (e.space, e.class_id).cmp(&(space, class_id)))
    }

    pub fn get(&self, space: MetricSpace, class_id: u8) -> Option<&[f64]> {
        self.position(space, class_id)
            .ok()
            .map(|i| self.entries[i].vector.as_slice())
    }

    pub fn is_initialized(&self, space: MetricSpace, class_id: u8) -> bool {
        self.position(space, class_id).is_ok()
    }

    pub fn require(&self, space: MetricSpace, class_id: u8) -> Result<&[f64]> {
        self.get(space, class_id)
            .ok_or(Error::UninitializedPrototype {
                class_id,
                space: space.as_str(),
            })
    }

    /// Whether `(space, class)` may hold a momentum prototype: cgs keeps the
    /// background/foreground pair, fgs never stores a background prototype.
    pub fn eligible(space: MetricSpace, class_id: u8) -> bool {
        match space {
            MetricSpace::Cgs => class_id <= 1,
            MetricSpace::Fgs => class_id != BACKGROUND,
        }
    }

    /// Which prototype downstream ops use during `epoch` of meta-training.
    pub fn training_source(&self, epoch: usize) -> PrototypeSource {
        if epoch < self.warmup_epochs {
            PrototypeSource::Static
        } else {
            PrototypeSource::Momentum
        }
    }

    /// Folds a (detached) static prototype into the bank.
    ///
    /// The first observation initialises the entry; later ones apply
    /// `p ← (1 − α)·p + α·p_static`.
    pub fn momentum_update(&mut self, stat: &Prototype, epoch: usize) -> Result<PrototypeSource> {
        if stat.kind != PrototypeKind::Static {
            return Err(Error::Contract("momentum update needs a static prototype".into()));
        }
        if !Self::eligible(stat.space, stat.class_id) {
            return Err(Error::Contract(format!(
                "class {} has no momentum prototype in the {} space",
                stat.class_id, stat.space
            )));
        }
        if !stat.vector.iter().all(|v| v.is_finite()) {
            return Err(Error::Contract("non-finite static prototype".into()));
        }
        match self.position(stat.space, stat.class_id) {
            Ok(i) => {
                let entry = &mut self.entries[i].vector;
                if entry.len() != stat.vector.len() {
                    return Err(Error::shape("momentum_update", "prototype dimension changed"));
                }
                let a = self.alpha;
                for (e, s) in entry.iter_mut().zip(&stat.vector) {
                    *e = (1.0 - a) * *e + a * s;
                }
            }
            Err(i) => self.entries.insert(
                i,
                BankEntry {
                    space: stat.space,
                    class_id: stat.class_id,
                    vector: stat.vector.clone(),
                },
            ),
        }
        Ok(self.training_source(epoch))
    }

    /// Prototype sources for `class_ids` (aligned with the input order).
    ///
    /// Meta-training reads static prototypes during warmup and the bank
    /// afterwards. Meta-testing reads the bank for base classes (and the cgs
    /// pair) and pools novel classes from the support image.
    pub fn select(
        &self,
        space: MetricSpace,
        class_ids: &[u8],
        base_classes: &BTreeSet<u8>,
        phase: Phase,
        epoch: usize,
    ) -> Result<Vec<PrototypeSource>> {
        class_ids
            .iter()
            .map(|&c| match phase {
                Phase::MetaTrain => {
                    let src = self.training_source(epoch);
                    if src == PrototypeSource::Momentum {
                        self.require(space, c)?;
                    }
                    Ok(src)
                }
                Phase::MetaTest => {
                    let banked = match space {
                        MetricSpace::Cgs => true,
                        MetricSpace::Fgs => base_classes.contains(&c),
                    };
                    if banked {
                        self.require(space, c)?;
                        Ok(PrototypeSource::Momentum)
                    } else {
                        Ok(PrototypeSource::Static)
                    }
                }
            })
            .collect()
    }
}
