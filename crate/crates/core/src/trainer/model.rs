use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{FgsInference, ModelConfig};
use crate::autograd::{Tape, Var};
use crate::dual_metric::{
    agm_logits, cgs_logits, npm_logits, similarity_map, AgmHead, CgsBackground, NpmHead, PredictionMap,
};
use crate::embedding::{Encoder, MetricSpace};
use crate::episodic_data::{Dataset, Episode, Phase};
use crate::error::{Error, Result};
use crate::evaluation::OneShotParser;
use crate::labels::{derive_binary_mask, LabelMap, BACKGROUND};
use crate::objectives::{
    cross_entropy_var, dml_loss, nca_contrastive_var, total_objective, total_objective_var, Components, LossReport,
    LossWeights,
};
use crate::params::{Bound, ParamStore};
use crate::prototypes::{mask_at_resolution, pool_var, Prototype, PrototypeBank, PrototypeSource};
use crate::tensor::{resize_bilinear, Tensor};

/// Encoder, both metric-space heads, their parameters and the momentum bank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub encoder: Encoder,
    pub cgs_head: AgmHead,
    pub fgs_agm: AgmHead,
    pub fgs_npm: NpmHead,
    pub cgs_background: CgsBackground,
    pub inference: FgsInference,
    pub params: ParamStore,
    pub bank: PrototypeBank,
    pub base_classes: BTreeSet<u8>,
}

/// A differentiable episode loss, ready for `Tape::backward`.
pub struct EpisodeLoss {
    pub tape: Tape,
    pub bound: Bound,
    pub loss: Var,
    pub report: LossReport,
    /// Class set actually used after dropping classes that vanished at feature resolution.
    pub class_set: Vec<u8>,
}

impl EpisodeLoss {
    /// Gradients for every parameter of `params`, in store order.
    pub fn gradients(&self, params: &ParamStore) -> Vec<Tensor> {
        let mut grads = self.tape.backward(self.loss);
        self.bound.gradients(params, &mut grads)
    }
}

fn constant_vector(tape: &mut Tape, v: &[f64]) -> Var {
    tape.constant(Tensor::vector(v.to_vec()))
}

impl Model {
    pub fn new(
        config: &ModelConfig,
        base_classes: BTreeSet<u8>,
        alpha: f64,
        warmup_epochs: usize,
        inference: FgsInference,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut params = ParamStore::new();
        let encoder = Encoder::new(config.encoder.clone(), &mut params, rng)?;
        let cgs_head = AgmHead::new(&mut params, rng, "agm.cgs", config.encoder.cgs_dim, config.head_depth);
        let fgs_agm = AgmHead::new(&mut params, rng, "agm.fgs", config.encoder.fgs_dim, config.head_depth);
        let fgs_npm = NpmHead::new(&mut params, "npm.fgs", config.npm_init_scale);
        Ok(Self {
            encoder,
            cgs_head,
            fgs_agm,
            fgs_npm,
            cgs_background: config.cgs_background,
            inference,
            params,
            bank: PrototypeBank::new(alpha, warmup_epochs)?,
            base_classes,
        })
    }

    pub fn input_size(&self) -> (usize, usize) {
        self.encoder.config.input_size
    }

    fn fit_input(&self, image: &Tensor, mask: &LabelMap) -> (Tensor, LabelMap) {
        let (h, w) = self.input_size();
        if (image.height(), image.width()) == (h, w) {
            (image.clone(), mask.clone())
        } else {
            (resize_bilinear(image, h, w), mask.resize_nearest(h, w))
        }
    }

    /// Meta-training loss of one (already augmented) episode.
    ///
    /// Pools static prototypes from the support, folds them into `bank` and
    /// consumes static or momentum prototypes depending on `epoch`. Returns
    /// `None` when no foreground class survives downsampling.
    pub fn episode_loss(
        &self,
        bank: &mut PrototypeBank,
        episode: &Episode,
        epoch: usize,
        beta: f64,
        weights: &LossWeights,
    ) -> Result<Option<EpisodeLoss>> {
        let query_mask = episode
            .query_mask
            .as_ref()
            .ok_or_else(|| Error::Contract("training episodes need a query mask".into()))?;
        let (h, w) = self.encoder.config.feature_size();
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, true);
        let s_img = tape.constant(episode.support_image.clone());
        let q_img = tape.constant(episode.query_image.clone());
        let sf = self.encoder.embed(&mut tape, &bound, s_img)?;
        let qf = self.encoder.embed(&mut tape, &bound, q_img)?;

        let s_mask = mask_at_resolution(&episode.support_mask, h, w);
        let present = s_mask.unique();
        let fg: Vec<u8> = episode
            .foreground()
            .iter()
            .copied()
            .filter(|c| {
                let keep = present.contains(c);
                if !keep {
                    log::warn!("class {c} vanished from the support at feature resolution; dropped");
                }
                keep
            })
            .collect();
        if fg.is_empty() {
            return Ok(None);
        }
        let mut class_set = vec![BACKGROUND];
        class_set.extend(&fg);
        let q_target = mask_at_resolution(query_mask, h, w).map(|l| if class_set.contains(&l) { l } else { BACKGROUND });
        let source = bank.training_source(epoch);
        let zero = tape.constant(Tensor::scalar(0.0));

        // coarse-grained space: background/foreground prototypes
        let mut agm_cgs = zero;
        if weights.agm_cgs > 0.0 {
            let s_bi = mask_at_resolution(&episode.support_human, h, w);
            if s_bi.contains(0) && s_bi.contains(1) {
                let p = [pool_var(&mut tape, sf.cgs, &s_bi, 0)?, pool_var(&mut tape, sf.cgs, &s_bi, 1)?];
                for (c, &v) in p.iter().enumerate() {
                    let stat = Prototype::new_static(c as u8, MetricSpace::Cgs, tape.value(v).data().to_vec());
                    bank.momentum_update(&stat, epoch)?;
                }
                let protos = match source {
                    PrototypeSource::Static => p,
                    PrototypeSource::Momentum => [
                        constant_vector(&mut tape, bank.require(MetricSpace::Cgs, 0)?),
                        constant_vector(&mut tape, bank.require(MetricSpace::Cgs, 1)?),
                    ],
                };
                let logits = cgs_logits(&mut tape, &bound, &self.cgs_head, qf.cgs, protos, self.cgs_background)?;
                let q_bi = match &episode.query_human {
                    Some(m) => mask_at_resolution(m, h, w),
                    None => derive_binary_mask(&q_target),
                };
                agm_cgs = cross_entropy_var(&mut tape, logits, &q_bi, &[0, 1])?;
            }
        }

        // fine-grained space
        let mut support_static = Vec::with_capacity(fg.len());
        for &c in &fg {
            let p = pool_var(&mut tape, sf.fgs, &s_mask, c)?;
            let stat = Prototype::new_static(c, MetricSpace::Fgs, tape.value(p).data().to_vec());
            bank.momentum_update(&stat, epoch)?;
            support_static.push(p);
        }
        let protos: Vec<Var> = match source {
            PrototypeSource::Static => support_static.clone(),
            PrototypeSource::Momentum => fg
                .iter()
                .map(|&c| Ok(constant_vector(&mut tape, bank.require(MetricSpace::Fgs, c)?)))
                .collect::<Result<_>>()?,
        };
        let sims = protos
            .iter()
            .map(|&p| similarity_map(&mut tape, qf.fgs, p))
            .collect::<Result<Vec<_>>>()?;
        let agm_fgs = if beta > 0.0 {
            let logits = agm_logits(&mut tape, &bound, &self.fgs_agm, qf.fgs, &sims)?;
            cross_entropy_var(&mut tape, logits, &q_target, &class_set)?
        } else {
            zero
        };
        let npm_fgs = if beta < 1.0 {
            let logits = npm_logits(&mut tape, &bound, &self.fgs_npm, &sims)?;
            cross_entropy_var(&mut tape, logits, &q_target, &class_set)?
        } else {
            zero
        };
        let dml = tape.linear_combination(&[(agm_fgs, beta), (npm_fgs, 1.0 - beta)])?;

        // prototype-level contrast between query and support classes
        let mut nca = zero;
        if weights.nca > 0.0 {
            let q_present = q_target.unique();
            let mut query = Vec::new();
            for (i, &c) in fg.iter().enumerate() {
                if q_present.contains(&c) {
                    query.push((i, pool_var(&mut tape, qf.fgs, &q_target, c)?));
                }
            }
            if !query.is_empty() {
                nca = nca_contrastive_var(&mut tape, &query, &support_static, weights.tau)?;
            }
        }

        let loss = total_objective_var(
            &mut tape,
            Components {
                nca,
                agm_cgs,
                dml_fgs: dml,
            },
            weights,
        )?;
        let v = |t: &Tape, x: Var| t.value(x).item();
        let report = LossReport {
            agm_fgs: v(&tape, agm_fgs),
            npm_fgs: v(&tape, npm_fgs),
            dml_fgs: dml_loss(v(&tape, agm_fgs), v(&tape, npm_fgs), beta),
            agm_cgs: v(&tape, agm_cgs),
            nca: v(&tape, nca),
            total: 0.0,
            beta,
        };
        let report = LossReport {
            total: total_objective(
                Components {
                    nca: report.nca,
                    agm_cgs: report.agm_cgs,
                    dml_fgs: report.dml_fgs,
                },
                weights,
            ),
            ..report
        };
        Ok(Some(EpisodeLoss {
            tape,
            bound,
            loss,
            report,
            class_set,
        }))
    }

    /// Folds the support prototypes of `dataset`'s meta-train supports into
    /// the bank without touching any parameter.
    pub fn populate_bank(&mut self, dataset: &Dataset) -> Result<usize> {
        let (h, w) = self.encoder.config.feature_size();
        let mut updates = 0;
        for i in dataset.indices(Phase::MetaTrain.support_split()) {
            let s = &dataset.samples[i];
            let (image, mask) = self.fit_input(&s.image, &s.mask);
            let (_, human) = self.fit_input(&s.image, &s.human_mask());
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape, false);
            let x = tape.constant(image);
            let f = self.encoder.embed(&mut tape, &bound, x)?;
            let mask = mask_at_resolution(&mask, h, w);
            let bi = mask_at_resolution(&human, h, w);
            let mut stats = Vec::new();
            for c in [0u8, 1] {
                if bi.contains(c) {
                    let p = pool_var(&mut tape, f.cgs, &bi, c)?;
                    stats.push(Prototype::new_static(c, MetricSpace::Cgs, tape.value(p).data().to_vec()));
                }
            }
            for c in mask.unique().into_iter().filter(|&c| c != BACKGROUND) {
                let p = pool_var(&mut tape, f.fgs, &mask, c)?;
                stats.push(Prototype::new_static(c, MetricSpace::Fgs, tape.value(p).data().to_vec()));
            }
            for stat in &stats {
                self.bank.momentum_update(stat, self.bank.warmup_epochs())?;
                updates += 1;
            }
        }
        Ok(updates)
    }

    /// Fine-grained prediction at feature resolution with meta-test prototype
    /// selection: banked prototypes for base classes, support pooling for the
    /// rest. Classes absent from the downsampled support are dropped.
    pub fn predict(&self, episode: &Episode) -> Result<PredictionMap> {
        let (s_img, s_mask) = self.fit_input(&episode.support_image, &episode.support_mask);
        let (q_img, _) = self.fit_input(
            &episode.query_image,
            &LabelMap::filled(episode.query_image.height(), episode.query_image.width(), BACKGROUND),
        );
        let (h, w) = self.encoder.config.feature_size();
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let sx = tape.constant(s_img);
        let qx = tape.constant(q_img);
        let sg = self.encoder.encode(&mut tape, &bound, sx)?;
        let sf = self.encoder.project(&mut tape, &bound, sg, MetricSpace::Fgs)?;
        let qg = self.encoder.encode(&mut tape, &bound, qx)?;
        let qf = self.encoder.project(&mut tape, &bound, qg, MetricSpace::Fgs)?;
        let s_mask = mask_at_resolution(&s_mask, h, w);

        let fg = episode.foreground();
        let sources = self
            .bank
            .select(MetricSpace::Fgs, fg, &self.base_classes, Phase::MetaTest, 0)?;
        let mut class_set = vec![BACKGROUND];
        let mut protos = Vec::new();
        for (&c, src) in fg.iter().zip(sources) {
            let p = match src {
                PrototypeSource::Momentum => constant_vector(&mut tape, self.bank.require(MetricSpace::Fgs, c)?),
                PrototypeSource::Static => match pool_var(&mut tape, sf, &s_mask, c) {
                    Ok(p) => p,
                    Err(Error::EmptyClass(_)) => {
                        log::warn!("class {c} vanished from the support at feature resolution; dropped");
                        continue;
                    }
                    Err(e) => return Err(e),
                },
            };
            class_set.push(c);
            protos.push(p);
        }
        if protos.is_empty() {
            return PredictionMap::from_logits(&Tensor::zeros(1, h, w), &class_set);
        }
        let sims = protos
            .iter()
            .map(|&p| similarity_map(&mut tape, qf, p))
            .collect::<Result<Vec<_>>>()?;
        let logits = match self.inference {
            FgsInference::Npm => npm_logits(&mut tape, &bound, &self.fgs_npm, &sims)?,
            FgsInference::Agm => agm_logits(&mut tape, &bound, &self.fgs_agm, qf, &sims)?,
        };
        PredictionMap::from_logits(tape.value(logits), &class_set)
    }

    /// Coarse-grained background/foreground prediction from the banked pair.
    pub fn predict_foreground(&self, query_image: &Tensor) -> Result<PredictionMap> {
        let (img, _) = self.fit_input(
            query_image,
            &LabelMap::filled(query_image.height(), query_image.width(), BACKGROUND),
        );
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(img);
        let g = self.encoder.encode(&mut tape, &bound, x)?;
        let f = self.encoder.project(&mut tape, &bound, g, MetricSpace::Cgs)?;
        let p0 = constant_vector(&mut tape, self.bank.require(MetricSpace::Cgs, 0)?);
        let p1 = constant_vector(&mut tape, self.bank.require(MetricSpace::Cgs, 1)?);
        let logits = cgs_logits(&mut tape, &bound, &self.cgs_head, f, [p0, p1], self.cgs_background)?;
        PredictionMap::from_logits(tape.value(logits), &[0, 1])
    }
}

impl OneShotParser for Model {
    fn parse(&self, episode: &Episode) -> Result<LabelMap> {
        let pred = self.predict(episode)?;
        Ok(pred.upsampled_labels(episode.query_image.height(), episode.query_image.width()))
    }
}
