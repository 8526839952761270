//! Training losses: cross-entropies, the β-weighted dual metric loss, the
//! prototype-level NCA contrastive loss and their weighted total.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::dual_metric::{PredictionMap, COSINE_EPS};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub nca: f64,
    pub agm_cgs: f64,
    pub dml_fgs: f64,
    /// Temperature of the contrastive softmax.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            nca: 1.0,
            agm_cgs: 1.0,
            dml_fgs: 1.0,
            tau: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("temperature {} must be positive", self.tau)));
        }
        if [self.nca, self.agm_cgs, self.dml_fgs].iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Component and total losses of one optimisation step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub agm_fgs: f64,
    pub npm_fgs: f64,
    pub dml_fgs: f64,
    pub agm_cgs: f64,
    pub nca: f64,
    pub total: f64,
    pub beta: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [
            self.agm_fgs,
            self.npm_fgs,
            self.dml_fgs,
            self.agm_cgs,
            self.nca,
            self.total,
            self.beta,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Field-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut m = LossReport::default();
        for r in reports {
            m.agm_fgs += r.agm_fgs / n;
            m.npm_fgs += r.npm_fgs / n;
            m.dml_fgs += r.dml_fgs / n;
            m.agm_cgs += r.agm_cgs / n;
            m.nca += r.nca / n;
            m.total += r.total / n;
            m.beta += r.beta / n;
        }
        m
    }
}

/// Channel index of every pixel's label within `class_set`.
pub fn class_channels(target: &LabelMap, class_set: &[u8]) -> Result<Vec<usize>> {
    let mut lut = [usize::MAX; 256];
    for (i, &c) in class_set.iter().enumerate() {
        lut[c as usize] = i;
    }
    target
        .data()
        .iter()
        .map(|&l| match lut[l as usize] {
            usize::MAX => Err(Error::Contract(format!(
                "target label {l} is not in the class set {class_set:?}"
            ))),
            i => Ok(i),
        })
        .collect()
}

/// Mean per-pixel `−log p(target)` of a prediction.
pub fn cross_entropy(pred: &PredictionMap, target: &LabelMap) -> Result<f64> {
    let (_, h, w) = pred.probs.shape();
    if target.height() != h || target.width() != w {
        return Err(Error::shape(
            "cross_entropy",
            format!("target {}x{} vs prediction {h}x{w}", target.height(), target.width()),
        ));
    }
    let channels = class_channels(target, &pred.class_set)?;
    let plane = h * w;
    let sum: f64 = channels
        .iter()
        .enumerate()
        .map(|(i, &k)| -pred.probs.data()[k * plane + i].ln())
        .sum();
    Ok(sum / plane as f64)
}

/// Differentiable cross-entropy on logits.
pub fn cross_entropy_var(tape: &mut Tape, logits: Var, target: &LabelMap, class_set: &[u8]) -> Result<Var> {
    let channels = class_channels(target, class_set)?;
    tape.softmax_cross_entropy(logits, &channels)
}

/// `β · agm + (1 − β) · npm`.
pub fn dml_loss(agm: f64, npm: f64, beta: f64) -> f64 {
    beta * agm + (1.0 - beta) * npm
}

pub fn dml_loss_var(tape: &mut Tape, agm: Var, npm: Var, beta: f64) -> Result<Var> {
    tape.linear_combination(&[(agm, beta), (npm, 1.0 - beta)])
}

/// Prototype-level NCA loss.
///
/// `query[j] = (c, p̃)` pairs a query prototype with the index `c` of its own
/// class in `support`; each term is a softmax cross-entropy of the cosine
/// similarities `⟨p̃, p_k⟩ / τ` over all support prototypes `k`. The result is
/// the mean over terms.
pub fn nca_contrastive_var(tape: &mut Tape, query: &[(usize, Var)], support: &[Var], tau: f64) -> Result<Var> {
    if support.is_empty() || query.is_empty() {
        return Err(Error::Contract("NCA loss needs at least one foreground class".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let mut terms = Vec::with_capacity(query.len());
    for &(own, q) in query {
        if own >= support.len() {
            return Err(Error::Contract(format!("query prototype refers to support index {own}")));
        }
        let sims = support
            .iter()
            .map(|&p| tape.cosine_map(q, p, COSINE_EPS))
            .collect::<Result<Vec<_>>>()?;
        let stacked = tape.concat(&sims)?;
        let logits = tape.scale(stacked, 1.0 / tau);
        terms.push(tape.softmax_cross_entropy(logits, &[own])?);
    }
    let n = terms.len() as f64;
    let weighted: Vec<(Var, f64)> = terms.into_iter().map(|t| (t, 1.0 / n)).collect();
    tape.linear_combination(&weighted)
}

/// NCA loss on aligned lists: `query[c]` and `support[c]` belong to the same class.
pub fn nca_contrastive(query: &[Vec<f64>], support: &[Vec<f64>], tau: f64) -> Result<f64> {
    if query.len() != support.len() {
        return Err(Error::Contract(format!(
            "{} query prototypes vs {} support prototypes",
            query.len(),
            support.len()
        )));
    }
    let mut tape = Tape::new();
    let s: Vec<Var> = support
        .iter()
        .map(|v| tape.constant(Tensor::vector(v.clone())))
        .collect();
    let q: Vec<(usize, Var)> = query
        .iter()
        .enumerate()
        .map(|(i, v)| (i, tape.constant(Tensor::vector(v.clone()))))
        .collect();
    let l = nca_contrastive_var(&mut tape, &q, &s, tau)?;
    Ok(tape.value(l).item())
}

/// Component losses entering the total objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Components<T> {
    pub nca: T,
    pub agm_cgs: T,
    pub dml_fgs: T,
}

pub fn total_objective(c: Components<f64>, weights: &LossWeights) -> f64 {
    weights.nca * c.nca + weights.agm_cgs * c.agm_cgs + weights.dml_fgs * c.dml_fgs
}

pub fn total_objective_var(tape: &mut Tape, c: Components<Var>, weights: &LossWeights) -> Result<Var> {
    tape.linear_combination(&[
        (c.nca, weights.nca),
        (c.agm_cgs, weights.agm_cgs),
        (c.dml_fgs, weights.dml_fgs),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_examples() {
        let target = LabelMap::new(1, 2, vec![0, 3]).unwrap();
        let perfect = PredictionMap {
            probs: Tensor::from_vec(2, 1, 2, vec![1.0, 0.0, 0.0, 1.0]),
            class_set: vec![0, 3],
        };
        assert_eq!(cross_entropy(&perfect, &target).unwrap(), 0.0);
        let uniform = PredictionMap::from_logits(&Tensor::zeros(3, 1, 2), &[0, 3, 5]).unwrap();
        assert!((cross_entropy(&uniform, &target).unwrap() - 3f64.ln()).abs() < 1e-12);
        let bad = LabelMap::new(1, 2, vec![0, 9]).unwrap();
        assert!(matches!(cross_entropy(&uniform, &bad), Err(Error::Contract(_))));
    }

    #[test]
    fn dml_examples() {
        assert_eq!(dml_loss(2.0, 4.0, 1.0), 2.0);
        assert_eq!(dml_loss(2.0, 4.0, 0.0), 4.0);
        assert_eq!(dml_loss(2.0, 4.0, 0.5), 3.0);
    }

    #[test]
    fn nca_examples() {
        // one class: softmax over a single logit
        assert_eq!(nca_contrastive(&[vec![1.0, 2.0]], &[vec![-3.0, 0.5]], 0.1).unwrap(), 0.0);

        // orthogonal pair, tau = 0.1: -log(e^10 / (e^10 + e^0)) for each class
        let p1 = vec![1.0, 0.0];
        let p2 = vec![0.0, 1.0];
        let l = nca_contrastive(&[p1.clone(), p2.clone()], &[p1, p2], 0.1).unwrap();
        let expected = (1.0f64 + (-10.0f64).exp()).ln();
        assert!((l - expected).abs() < 1e-9);
        assert!((l - 4.54e-5).abs() < 1e-7);

        // identical prototypes: uniform softmax over 3 classes
        let v = vec![0.2, -0.7, 1.1];
        let l = nca_contrastive(&vec![v.clone(); 3], &vec![v; 3], 0.1).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn nca_rejects_bad_input() {
        assert!(nca_contrastive(&[], &[], 0.1).is_err());
        assert!(nca_contrastive(&[vec![1.0]], &[vec![1.0]], 0.0).is_err());
    }

    #[test]
    fn total_examples() {
        let c = Components {
            nca: 0.1,
            agm_cgs: 0.2,
            dml_fgs: 0.3,
        };
        let w = LossWeights::default();
        assert_eq!((w.nca, w.agm_cgs, w.dml_fgs, w.tau), (1.0, 1.0, 1.0, 0.1));
        assert!((total_objective(c, &w) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn zero_nca_weight_zeroes_its_gradient() {
        let mut tape = Tape::new();
        let nca = tape.leaf(Tensor::scalar(0.7));
        let agm = tape.leaf(Tensor::scalar(0.2));
        let dml = tape.leaf(Tensor::scalar(0.3));
        let w = LossWeights {
            nca: 0.0,
            ..LossWeights::default()
        };
        let total = total_objective_var(
            &mut tape,
            Components {
                nca,
                agm_cgs: agm,
                dml_fgs: dml,
            },
            &w,
        )
        .unwrap();
        let g = tape.backward(total);
        assert_eq!(g.get(nca).unwrap().item(), 0.0);
        assert_eq!(g.get(agm).unwrap().item(), 1.0);
    }
}
