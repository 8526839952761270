//! Siamese feature encoder and the two per-pixel projection heads.
//!
//! The encoder is a small strided convolution stack. Its first stage output
//! is average-pooled to the final stride and concatenated with the deep
//! features before a 1×1 fusion layer, so the embedding mixes low-level and
//! high-level information. Support and query images run through the same
//! [`Encoder`] value, which is what makes it Siamese.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{he_bound, linear_bound, uniform, Bound, ParamId, ParamStore};

/// Which metric space a projection, prototype or head belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricSpace {
    /// Coarse-grained: human foreground vs background.
    Cgs,
    /// Fine-grained: individual part classes.
    Fgs,
}

impl MetricSpace {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricSpace::Cgs => "cgs",
            MetricSpace::Fgs => "fgs",
        }
    }
}

impl fmt::Display for MetricSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cgs" => Ok(MetricSpace::Cgs),
            "fgs" => Ok(MetricSpace::Fgs),
            other => Err(Error::Contract(format!("unknown metric space '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// `(height, width)` of input images.
    pub input_size: (usize, usize),
    /// Channels of the fused embedding `G`.
    pub feature_dim: usize,
    /// Output channels of each stride-2 stage; `2^len` must equal `downsample_factor`.
    pub stage_widths: Vec<usize>,
    /// Extra stride-1 3×3 layers after the last stage.
    pub refine_layers: usize,
    pub downsample_factor: usize,
    pub cgs_dim: usize,
    pub fgs_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_size: (64, 64),
            feature_dim: 64,
            stage_widths: vec![16, 32],
            refine_layers: 1,
            downsample_factor: 4,
            cgs_dim: 64,
            fgs_dim: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        let df = self.downsample_factor;
        if self.feature_dim < 2 || self.cgs_dim < 2 || self.fgs_dim < 2 {
            return Err(Error::Config("feature dimensions must be at least 2".into()));
        }
        if df == 0 || !df.is_power_of_two() || df < 2 {
            return Err(Error::Config(format!(
                "downsample_factor {df} must be a power of two >= 2"
            )));
        }
        if h == 0 || w == 0 || h % df != 0 || w % df != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} not divisible by downsample_factor {df}"
            )));
        }
        if 1usize << self.stage_widths.len() != df {
            return Err(Error::Config(format!(
                "{} stride-2 stages give stride {}, expected {df}",
                self.stage_widths.len(),
                1usize << self.stage_widths.len()
            )));
        }
        if self.stage_widths.iter().any(|&c| c == 0) {
            return Err(Error::Config("stage widths must be positive".into()));
        }
        Ok(())
    }

    /// Spatial size `(h, w)` of the feature maps.
    pub fn feature_size(&self) -> (usize, usize) {
        (
            self.input_size.0 / self.downsample_factor,
            self.input_size.1 / self.downsample_factor,
        )
    }

    pub fn projected_dim(&self, space: MetricSpace) -> usize {
        match space {
            MetricSpace::Cgs => self.cgs_dim,
            MetricSpace::Fgs => self.fgs_dim,
        }
    }
}

/// A convolution whose weights live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        bias: bool,
        rectified: bool,
    ) -> Self {
        let fan_in = cin / groups * kernel * kernel;
        let bound = if rectified { he_bound(fan_in) } else { linear_bound(fan_in) };
        let weight = store.add(
            format!("{name}.weight"),
            uniform(rng, cout, cin / groups, kernel * kernel, bound),
        );
        // nonzero biases keep dead pixels off the origin, where cosine maps are singular
        let bias = bias.then(|| store.add(format!("{name}.bias"), uniform(rng, cout, 1, 1, linear_bound(fan_in))));
        Self {
            weight,
            bias,
            kernel,
            stride,
            padding: kernel / 2,
            groups,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let spec = ConvSpec {
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            groups: self.groups,
        };
        tape.conv2d(
            x,
            params.var(self.weight),
            self.bias.map(|b| params.var(b)),
            spec,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub config: EncoderConfig,
    stages: Vec<Conv>,
    refine: Vec<Conv>,
    fuse: Conv,
    cgs_proj: Conv,
    fgs_proj: Conv,
}

/// Projections of one encoder pass into both metric spaces.
#[derive(Clone, Copy, Debug)]
pub struct ProjectedFeatures {
    pub cgs: Var,
    pub fgs: Var,
}

impl Encoder {
    pub fn new(config: EncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::new();
        let mut cin = 3;
        for (i, &cout) in config.stage_widths.iter().enumerate() {
            stages.push(Conv::new(store, rng, &format!("encoder.stage{i}"), cin, cout, 3, 2, 1, true, true));
            cin = cout;
        }
        let refine = (0..config.refine_layers)
            .map(|i| Conv::new(store, rng, &format!("encoder.refine{i}"), cin, cin, 3, 1, 1, true, true))
            .collect();
        let fused_in = cin + config.stage_widths[0];
        let fuse = Conv::new(store, rng, "encoder.fuse", fused_in, config.feature_dim, 1, 1, 1, true, true);
        let cgs_proj = Conv::new(store, rng, "proj.cgs", config.feature_dim, config.cgs_dim, 1, 1, 1, true, false);
        let fgs_proj = Conv::new(store, rng, "proj.fgs", config.feature_dim, config.fgs_dim, 1, 1, 1, true, false);
        Ok(Self {
            config,
            stages,
            refine,
            fuse,
            cgs_proj,
            fgs_proj,
        })
    }

    /// Embedding `G = g(image)` as a `[feature_dim, h, w]` map.
    pub fn encode(&self, tape: &mut Tape, params: &Bound, image: Var) -> Result<Var> {
        let (c, h, w) = tape.value(image).shape();
        if c != 3 || (h, w) != self.config.input_size {
            return Err(Error::shape(
                "encode",
                format!(
                    "image [{c}, {h}, {w}] does not match input size {:?}",
                    self.config.input_size
                ),
            ));
        }
        let mut x = tape.affine_const(image, 1.0, -0.5);
        let mut low = None;
        for stage in &self.stages {
            let y = stage.forward(tape, params, x)?;
            x = tape.relu(y);
            low.get_or_insert(x);
        }
        for layer in &self.refine {
            let y = layer.forward(tape, params, x)?;
            x = tape.relu(y);
        }
        let low = low.expect("at least one stage");
        let pool = self.config.downsample_factor / 2;
        let low = if pool > 1 { tape.avg_pool(low, pool)? } else { low };
        let cat = tape.concat(&[x, low])?;
        let fused = self.fuse.forward(tape, params, cat)?;
        Ok(tape.relu(fused))
    }

    /// Per-pixel linear projection of `features` into `space`.
    pub fn project(&self, tape: &mut Tape, params: &Bound, features: Var, space: MetricSpace) -> Result<Var> {
        let d = tape.value(features).channels();
        if d != self.config.feature_dim {
            return Err(Error::shape(
                "project",
                format!("{d} feature channels, expected {}", self.config.feature_dim),
            ));
        }
        match space {
            MetricSpace::Cgs => self.cgs_proj.forward(tape, params, features),
            MetricSpace::Fgs => self.fgs_proj.forward(tape, params, features),
        }
    }

    /// One encoder pass projected into both spaces.
    pub fn embed(&self, tape: &mut Tape, params: &Bound, image: Var) -> Result<ProjectedFeatures> {
        let g = self.encode(tape, params, image)?;
        Ok(ProjectedFeatures {
            cgs: self.project(tape, params, g, MetricSpace::Cgs)?,
            fgs: self.project(tape, params, g, MetricSpace::Fgs)?,
        })
    }

    pub fn projection_weights(&self, space: MetricSpace) -> (ParamId, Option<ParamId>) {
        let conv = match space {
            MetricSpace::Cgs => &self.cgs_proj,
            MetricSpace::Fgs => &self.fgs_proj,
        };
        (conv.weight, conv.bias)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tensor;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            input_size: (16, 16),
            feature_dim: 6,
            stage_widths: vec![4, 5],
            refine_layers: 1,
            downsample_factor: 4,
            cgs_dim: 3,
            fgs_dim: 5,
        }
    }

    fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> Tensor {
        uniform(rng, 3, h, w, 0.5).map(|v| v + 0.5)
    }

    #[test]
    fn encode_output_shape_follows_stride() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cfg = EncoderConfig {
            input_size: (64, 64),
            feature_dim: 32,
            ..EncoderConfig::default()
        };
        let enc = Encoder::new(cfg, &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let img = tape.constant(random_image(&mut rng, 64, 64));
        let g = enc.encode(&mut tape, &bound, img).unwrap();
        assert_eq!(tape.value(g).shape(), (32, 16, 16));
    }

    #[test]
    fn encode_is_deterministic_and_shared() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = Encoder::new(small_config(), &mut store, &mut rng).unwrap();
        let image = random_image(&mut rng, 16, 16);
        let run = || {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape, false);
            let img = tape.constant(image.clone());
            let g = enc.encode(&mut tape, &bound, img).unwrap();
            tape.value(g).clone()
        };
        assert_eq!(run(), run());

        // support and query read the very same parameter vars; gradients from
        // both branches land in one accumulator per parameter
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, true);
        let s = tape.constant(random_image(&mut rng, 16, 16));
        let q = tape.constant(random_image(&mut rng, 16, 16));
        let gs = enc.encode(&mut tape, &bound, s).unwrap();
        let gq = enc.encode(&mut tape, &bound, q).unwrap();
        let ms = tape.masked_mean(gs, &[true; 16]).unwrap();
        let mq = tape.masked_mean(gq, &[true; 16]).unwrap();
        let ones = tape.constant(Tensor::full(6, 1, 1, 1.0));
        let a = tape.cosine_map(ms, ones, 1e-8).unwrap();
        let b = tape.cosine_map(mq, ones, 1e-8).unwrap();
        let l = tape.add(a, b).unwrap();
        let mut grads = tape.backward(l);
        let g = bound.gradients(&store, &mut grads);
        assert_eq!(g.len(), store.len());
    }

    #[test]
    fn encode_rejects_wrong_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let enc = Encoder::new(small_config(), &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let img = tape.constant(Tensor::zeros(3, 8, 16));
        assert!(matches!(enc.encode(&mut tape, &bound, img), Err(Error::Shape { .. })));
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config();
        cfg.input_size = (18, 16);
        assert!(cfg.validate().is_err());
        let mut cfg = small_config();
        cfg.stage_widths = vec![4];
        assert!(cfg.validate().is_err());
        let mut cfg = small_config();
        cfg.fgs_dim = 1;
        assert!(cfg.validate().is_err());
        assert!("xyz".parse::<MetricSpace>().is_err());
        assert_eq!("fgs".parse::<MetricSpace>().unwrap(), MetricSpace::Fgs);
    }

    fn project_plain(store: &ParamStore, enc: &Encoder, feats: &Tensor, space: MetricSpace) -> Tensor {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let f = tape.constant(feats.clone());
        let out = enc.project(&mut tape, &bound, f, space).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn projection_matches_matmul_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = Encoder::new(small_config(), &mut store, &mut rng).unwrap();
        let (wid, bid) = enc.projection_weights(MetricSpace::Fgs);
        *store.get_mut(bid.unwrap()) = uniform(&mut rng, 5, 1, 1, 1.0);
        let feats = uniform(&mut rng, 6, 4, 4, 2.0);
        let out = project_plain(&store, &enc, &feats, MetricSpace::Fgs);
        let (w, b) = (store.get(wid), store.get(bid.unwrap()));
        for i in 0..16 {
            let px = feats.pixel(i);
            for o in 0..5 {
                let expect: f64 = b.data()[o] + (0..6).map(|k| w.at(o, k, 0) * px[k]).sum::<f64>();
                assert!((out.data()[o * 16 + i] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn projection_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let enc = Encoder::new(small_config(), &mut store, &mut rng).unwrap();
        let (_, bid) = enc.projection_weights(MetricSpace::Cgs);
        *store.get_mut(bid.unwrap()) = Tensor::zeros(3, 1, 1);
        // zero input with zero bias gives zero output
        let zero = Tensor::zeros(6, 4, 4);
        let out = project_plain(&store, &enc, &zero, MetricSpace::Cgs);
        assert!(out.data().iter().all(|&v| v == 0.0));
        // homogeneity of the bias-free head
        let feats = uniform(&mut rng, 6, 4, 4, 1.0);
        let a = 2.5;
        let lhs = project_plain(&store, &enc, &feats.scale(a), MetricSpace::Cgs);
        let rhs = project_plain(&store, &enc, &feats, MetricSpace::Cgs).scale(a);
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }
}
