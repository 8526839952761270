//! Similarity maps and the two prediction heads.
//!
//! The attention guidance head (AGM) reweights query features by each class
//! similarity map, adds them back residually and scores the result with a
//! class-shared stack of separable convolutions. The nearest prototype head
//! (NPM) predicts straight from the similarity maps through two scalar
//! affine maps. Both heads share weights across foreground classes, so
//! permuting the prototypes permutes the foreground channels and nothing
//! else.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::embedding::Conv;
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{argmax_channels, resize_bilinear, softmax_channels, Tensor};

/// Added to both norms of every cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

/// Per-pixel cosine similarity between `features` and a prototype vector.
pub fn similarity_map(tape: &mut Tape, features: Var, prototype: Var) -> Result<Var> {
    tape.cosine_map(features, prototype, COSINE_EPS)
}

/// `similarity_map` on plain tensors.
pub fn similarity_map_plain(features: &Tensor, prototype: &[f64]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let p = tape.constant(Tensor::vector(prototype.to_vec()));
    let a = similarity_map(&mut tape, f, p)?;
    Ok(tape.value(a).clone())
}

/// Depthwise 3×3 followed by a pointwise 1×1 and ReLU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SeparableConv {
    depthwise: Conv,
    pointwise: Conv,
}

/// `φ`: separable conv layers ending in a single logit channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreNet {
    layers: Vec<SeparableConv>,
    out: Conv,
}

impl ScoreNet {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, depth: usize) -> Self {
        let layers = (0..depth)
            .map(|i| SeparableConv {
                depthwise: Conv::new(store, rng, &format!("{name}.sep{i}.dw"), dim, dim, 3, 1, dim, false, false),
                pointwise: Conv::new(store, rng, &format!("{name}.sep{i}.pw"), dim, dim, 1, 1, 1, true, true),
            })
            .collect();
        let out = Conv::new(store, rng, &format!("{name}.out"), dim, 1, 1, 1, 1, true, false);
        Self { layers, out }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let mut x = x;
        for layer in &self.layers {
            let d = layer.depthwise.forward(tape, params, x)?;
            let p = layer.pointwise.forward(tape, params, d)?;
            x = tape.relu(p);
        }
        self.out.forward(tape, params, x)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in &self.layers {
            ids.push(l.depthwise.weight);
            ids.extend(l.depthwise.bias);
            ids.push(l.pointwise.weight);
            ids.extend(l.pointwise.bias);
        }
        ids.push(self.out.weight);
        ids.extend(self.out.bias);
        ids
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgmHead {
    pub phi: ScoreNet,
    pub phi_bg: ScoreNet,
}

impl AgmHead {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, depth: usize) -> Self {
        Self {
            phi: ScoreNet::new(store, rng, &format!("{name}.phi"), dim, depth),
            phi_bg: ScoreNet::new(store, rng, &format!("{name}.phi_bg"), dim, depth),
        }
    }

    pub fn num_scalars(&self, store: &ParamStore) -> usize {
        self.phi
            .param_ids()
            .into_iter()
            .chain(self.phi_bg.param_ids())
            .map(|id| store.get(id).len())
            .sum()
    }

    /// Same head with foreground and background scorers exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            phi: self.phi_bg.clone(),
            phi_bg: self.phi.clone(),
        }
    }
}

/// `ω` and `ω_bg`: scalar affine maps on similarity values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NpmHead {
    weight: ParamId,
    bias: ParamId,
    bg_weight: ParamId,
    bg_bias: ParamId,
}

impl NpmHead {
    /// `ω` and `ω_bg` start as `x ↦ scale · x`.
    pub fn new(store: &mut ParamStore, name: &str, scale: f64) -> Self {
        let mut scalar = |n: &str, v: f64| store.add(format!("{name}.{n}"), Tensor::scalar(v));
        let weight = scalar("omega.weight", scale);
        let bias = scalar("omega.bias", 0.0);
        let bg_weight = scalar("omega_bg.weight", scale);
        let bg_bias = scalar("omega_bg.bias", 0.0);
        Self {
            weight,
            bias,
            bg_weight,
            bg_bias,
        }
    }

    pub fn num_scalars(&self, store: &ParamStore) -> usize {
        [self.weight, self.bias, self.bg_weight, self.bg_bias]
            .iter()
            .map(|&id| store.get(id).len())
            .sum()
    }

    /// Sets `ω` and `ω_bg` to explicit `(weight, bias)` pairs.
    pub fn set(&self, store: &mut ParamStore, omega: (f64, f64), omega_bg: (f64, f64)) {
        *store.get_mut(self.weight) = Tensor::scalar(omega.0);
        *store.get_mut(self.bias) = Tensor::scalar(omega.1);
        *store.get_mut(self.bg_weight) = Tensor::scalar(omega_bg.0);
        *store.get_mut(self.bg_bias) = Tensor::scalar(omega_bg.1);
    }
}

/// How the coarse-grained head forms its background logit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CgsBackground {
    /// `φ_bg` applied to the residual features of the pooled background prototype.
    #[default]
    ExplicitPrototype,
    /// `φ_bg` applied to the foreground residual features (averaging over one class).
    Averaged,
}

/// Logits `[l_0, l_1, …, l_K]` of the attention guidance head for `K`
/// foreground similarity maps.
pub fn agm_logits(tape: &mut Tape, params: &Bound, head: &AgmHead, features: Var, sims: &[Var]) -> Result<Var> {
    if sims.is_empty() {
        return Err(Error::Contract("AGM needs at least one foreground prototype".into()));
    }
    let mut fg = Vec::with_capacity(sims.len());
    let mut bg = Vec::with_capacity(sims.len());
    for &a in sims {
        let r = tape.attend_residual(features, a)?;
        fg.push(head.phi.forward(tape, params, r)?);
        bg.push(head.phi_bg.forward(tape, params, r)?);
    }
    let l0 = tape.mean(&bg)?;
    let mut all = vec![l0];
    all.extend(fg);
    tape.concat(&all)
}

/// AGM from prototypes rather than precomputed similarity maps.
pub fn agm_forward(
    tape: &mut Tape,
    params: &Bound,
    head: &AgmHead,
    features: Var,
    prototypes: &[Var],
) -> Result<Var> {
    let sims = prototypes
        .iter()
        .map(|&p| similarity_map(tape, features, p))
        .collect::<Result<Vec<_>>>()?;
    agm_logits(tape, params, head, features, &sims)
}

/// Logits `[ω_bg(A_0), ω(A_1), …, ω(A_K)]` of the nearest prototype head,
/// with `A_0 = mean_c (1 − A_c)`.
pub fn npm_logits(tape: &mut Tape, params: &Bound, head: &NpmHead, sims: &[Var]) -> Result<Var> {
    if sims.is_empty() {
        return Err(Error::Contract("NPM needs at least one foreground similarity map".into()));
    }
    let a0 = background_similarity(tape, sims)?;
    let (w, b) = (params.var(head.weight), params.var(head.bias));
    let (wbg, bbg) = (params.var(head.bg_weight), params.var(head.bg_bias));
    let mut all = vec![tape.scalar_affine(a0, wbg, bbg)?];
    for &a in sims {
        all.push(tape.scalar_affine(a, w, b)?);
    }
    tape.concat(&all)
}

/// `A_0 = (1/K) Σ_c (1 − A_c)`.
pub fn background_similarity(tape: &mut Tape, sims: &[Var]) -> Result<Var> {
    let mean = tape.mean(sims)?;
    Ok(tape.affine_const(mean, -1.0, 1.0))
}

/// Two-channel background/foreground logits in the coarse-grained space.
pub fn cgs_logits(
    tape: &mut Tape,
    params: &Bound,
    head: &AgmHead,
    features: Var,
    prototypes: [Var; 2],
    mode: CgsBackground,
) -> Result<Var> {
    let a_bg = similarity_map(tape, features, prototypes[0])?;
    let a_fg = similarity_map(tape, features, prototypes[1])?;
    let r_fg = tape.attend_residual(features, a_fg)?;
    let l_fg = head.phi.forward(tape, params, r_fg)?;
    let l_bg = match mode {
        CgsBackground::ExplicitPrototype => {
            let r_bg = tape.attend_residual(features, a_bg)?;
            head.phi_bg.forward(tape, params, r_bg)?
        }
        CgsBackground::Averaged => head.phi_bg.forward(tape, params, r_fg)?,
    };
    tape.concat(&[l_bg, l_fg])
}

/// Weight of the AGM loss at `epoch`: `1 − epoch / max_epoch`.
pub fn beta_schedule(epoch: usize, max_epoch: usize) -> Result<f64> {
    if max_epoch == 0 || epoch > max_epoch {
        return Err(Error::Contract(format!(
            "epoch {epoch} outside [0, {max_epoch}] for the beta schedule"
        )));
    }
    Ok(1.0 - epoch as f64 / max_epoch as f64)
}

/// Per-pixel class probabilities over an episode's class set.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMap {
    /// `[|C_s|, h, w]`, channel `i` belongs to `class_set[i]`.
    pub probs: Tensor,
    pub class_set: Vec<u8>,
}

impl PredictionMap {
    pub fn from_logits(logits: &Tensor, class_set: &[u8]) -> Result<Self> {
        if logits.channels() != class_set.len() {
            return Err(Error::shape(
                "PredictionMap",
                format!("{} channels for {} classes", logits.channels(), class_set.len()),
            ));
        }
        Ok(Self {
            probs: softmax_channels(logits),
            class_set: class_set.to_vec(),
        })
    }

    /// Largest deviation of any per-pixel channel sum from 1.
    pub fn normalization_error(&self) -> f64 {
        let (c, h, w) = self.probs.shape();
        let p = h * w;
        (0..p)
            .map(|i| ((0..c).map(|k| self.probs.data()[k * p + i]).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Labels at feature resolution.
    pub fn labels(&self) -> LabelMap {
        self.labels_from(&self.probs)
    }

    /// Labels after bilinear upsampling of the probabilities to `h × w`.
    pub fn upsampled_labels(&self, h: usize, w: usize) -> LabelMap {
        self.labels_from(&resize_bilinear(&self.probs, h, w))
    }

    fn labels_from(&self, probs: &Tensor) -> LabelMap {
        let idx = argmax_channels(probs);
        let data = idx.into_iter().map(|i| self.class_set[i]).collect();
        LabelMap::new(probs.height(), probs.width(), data).expect("argmax keeps the plane size")
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::params::uniform;

    #[test]
    fn similarity_examples() {
        let p = [0.3, -0.4, 1.2];
        let same = Tensor::from_vec(3, 1, 2, vec![0.3, 0.3, -0.4, -0.4, 1.2, 1.2]);
        let s = similarity_map_plain(&same, &p).unwrap();
        assert!(s.data().iter().all(|v| (v - 1.0).abs() < 1e-6));
        let orth = Tensor::from_vec(3, 1, 1, vec![0.4, 0.3, 0.0]);
        let s = similarity_map_plain(&orth, &p).unwrap();
        assert!(s.data()[0].abs() < 1e-12);
        let zero = similarity_map_plain(&same, &[0.0, 0.0, 0.0]).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn beta_examples() {
        assert_eq!(beta_schedule(0, 50).unwrap(), 1.0);
        assert_eq!(beta_schedule(50, 50).unwrap(), 0.0);
        assert_eq!(beta_schedule(25, 50).unwrap(), 0.5);
        assert!(beta_schedule(51, 50).is_err());
        assert!(beta_schedule(0, 0).is_err());
    }

    #[test]
    fn npm_background_examples() {
        let mut tape = Tape::new();
        let ones = tape.constant(Tensor::full(1, 2, 2, 1.0));
        let a0 = background_similarity(&mut tape, &[ones, ones]).unwrap();
        assert!(tape.value(a0).data().iter().all(|&v| v == 0.0));
        let c = tape.constant(Tensor::full(1, 2, 2, 0.3));
        let a0 = background_similarity(&mut tape, &[c, c, c]).unwrap();
        assert!(tape.value(a0).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn npm_identity_head_is_monotone() {
        let mut store = ParamStore::new();
        let head = NpmHead::new(&mut store, "npm", 1.0);
        head.set(&mut store, (1.0, 0.0), (1.0, 0.0));
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let a1 = tape.constant(Tensor::from_vec(1, 1, 2, vec![0.9, 0.1]));
        let a2 = tape.constant(Tensor::from_vec(1, 1, 2, vec![0.2, 0.5]));
        let logits = npm_logits(&mut tape, &bound, &head, &[a1, a2]).unwrap();
        let pred = PredictionMap::from_logits(tape.value(logits), &[0, 1, 2]).unwrap();
        let p = &pred.probs;
        assert!(p.at(1, 0, 0) > p.at(2, 0, 0));
        assert!(p.at(2, 0, 1) > p.at(1, 0, 1));
    }

    #[test]
    fn agm_zero_attention_is_residual_passthrough() {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::from_vec(2, 1, 2, vec![1.0, -2.0, 3.0, 0.5]));
        let a = tape.constant(Tensor::zeros(1, 1, 2));
        let r = tape.attend_residual(f, a).unwrap();
        assert_eq!(tape.value(r), tape.value(f));
    }

    #[test]
    fn agm_single_class_background_is_phi_bg() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let head = AgmHead::new(&mut store, &mut rng, "agm", 4, 2);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let f = tape.constant(uniform(&mut rng, 4, 3, 3, 1.0));
        let p = tape.constant(uniform(&mut rng, 4, 1, 1, 1.0));
        let logits = agm_forward(&mut tape, &bound, &head, f, &[p]).unwrap();
        let a = similarity_map(&mut tape, f, p).unwrap();
        let r = tape.attend_residual(f, a).unwrap();
        let direct = head.phi_bg.forward(&mut tape, &bound, r).unwrap();
        let l = tape.value(logits);
        assert_eq!(l.channel(0), tape.value(direct).data());
    }

    #[test]
    fn cgs_swap_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let head = AgmHead::new(&mut store, &mut rng, "cgs", 4, 2);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let f = tape.constant(uniform(&mut rng, 4, 3, 3, 1.0));
        let p0 = tape.constant(uniform(&mut rng, 4, 1, 1, 1.0));
        let p1 = tape.constant(uniform(&mut rng, 4, 1, 1, 1.0));
        let a = cgs_logits(&mut tape, &bound, &head, f, [p0, p1], CgsBackground::ExplicitPrototype).unwrap();
        let swapped = head.swapped();
        let b = cgs_logits(&mut tape, &bound, &swapped, f, [p1, p0], CgsBackground::ExplicitPrototype).unwrap();
        let (a, b) = (tape.value(a), tape.value(b));
        assert_eq!(a.channel(0), b.channel(1));
        assert_eq!(a.channel(1), b.channel(0));
        let pred = PredictionMap::from_logits(a, &[0, 1]).unwrap();
        assert!(pred.normalization_error() < 1e-12);
    }

    #[test]
    fn npm_is_much_lighter_than_agm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let agm = AgmHead::new(&mut store, &mut rng, "agm", 16, 2);
        let npm = NpmHead::new(&mut store, "npm", 1.0);
        assert_eq!(npm.num_scalars(&store), 4);
        assert!(agm.num_scalars(&store) >= 100 * npm.num_scalars(&store));
    }

    #[test]
    fn upsampled_labels_map_channels_to_class_ids() {
        let logits = Tensor::from_vec(3, 1, 2, vec![5.0, 0.0, 0.0, 0.0, 0.0, 5.0]);
        let pred = PredictionMap::from_logits(&logits, &[0, 4, 7]).unwrap();
        assert_eq!(pred.labels().data(), &[0, 7]);
        let up = pred.upsampled_labels(2, 4);
        assert_eq!(up.data(), &[0, 0, 7, 7, 0, 0, 7, 7]);
    }
}
