//! Episodic meta-training: configuration, augmentation, the model, the
//! training loop and checkpoints.

mod augment;
mod config;
mod model;

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{apply_transform, augment, Transform};
pub use config::{AugmentConfig, BetaPolicy, FgsInference, ModelConfig, TrainConfig};
pub use model::{EpisodeLoss, Model};

use crate::dual_metric::beta_schedule;
use crate::episodic_data::{sample_episode, write_image, write_mask, Dataset, Episode, Phase, Way};
use crate::error::{Error, Result};
use crate::objectives::LossReport;
use crate::params::{poly_lr, Sgd};
use crate::tensor::Tensor;

/// Format version written into every checkpoint.
pub const CHECKPOINT_VERSION: u32 = 1;

/// One training-log record, written once per optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub lr: f64,
    /// Episodes that contributed to this step.
    pub episodes: usize,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    #[serde(flatten)]
    pub loss: LossReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub beta: f64,
    pub mean_loss: LossReport,
    pub steps: usize,
    pub skipped_episodes: usize,
}

/// Everything needed to resume training or to evaluate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    /// Epochs completed.
    pub epoch: usize,
    pub iteration: usize,
    pub model: Model,
    pub optimizer: Sgd,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == CHECKPOINT_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Checkpoint(format!(
                    "{} has format version {v}, expected {CHECKPOINT_VERSION}",
                    path.display()
                )))
            }
            None => return Err(Error::Checkpoint(format!("{} has no format version", path.display()))),
        }
        serde_json::from_value(value).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

/// Meta-training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: Sgd,
    /// Next epoch to run.
    pub epoch: usize,
    pub iteration: usize,
    /// Where a non-finite episode is written before aborting.
    pub diagnostics_dir: Option<std::path::PathBuf>,
}

impl Trainer {
    pub fn new(config: TrainConfig, base_classes: BTreeSet<u8>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::new(
            &config.model,
            base_classes,
            config.alpha,
            config.warmup_epochs,
            config.inference,
            &mut rng,
        )?;
        let optimizer = Sgd::new(&model.params, config.momentum, config.weight_decay);
        Ok(Self {
            config,
            model,
            optimizer,
            epoch: 0,
            iteration: 0,
            diagnostics_dir: None,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        Ok(Self {
            config: ck.config,
            model: ck.model,
            optimizer: ck.optimizer,
            epoch: ck.epoch,
            iteration: ck.iteration,
            diagnostics_dir: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            epoch: self.epoch,
            iteration: self.iteration,
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    pub fn beta(&self, epoch: usize) -> Result<f64> {
        match self.config.beta {
            BetaPolicy::Linear => beta_schedule(epoch, self.config.max_epoch),
            BetaPolicy::Constant(b) => Ok(b),
        }
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.max_epoch
    }

    /// Draws and augments the episodes of one epoch; depends only on the seed and epoch.
    fn epoch_episodes(&self, data: &Dataset, epoch: usize) -> Result<Vec<Episode>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64 + 1);
        let out = self.model.input_size();
        (0..self.config.episodes_per_epoch)
            .map(|_| {
                let mut ep = sample_episode(data, Phase::MetaTrain, rng.random(), Way::KWay, None)?;
                let aug = &self.config.augmentation;
                let t = Transform::draw(aug, out, &mut rng);
                let (si, sm) = apply_transform(&ep.support_image, &ep.support_mask, &t, out)?;
                let (_, sh) = apply_transform(&ep.support_image, &ep.support_human, &t, out)?;
                let q_mask = ep.query_mask.take().expect("sampled episodes carry a query mask");
                let q_human = ep.query_human.take().expect("sampled episodes carry a person mask");
                let t = Transform::draw(aug, out, &mut rng);
                let (qi, qm) = apply_transform(&ep.query_image, &q_mask, &t, out)?;
                let (_, qh) = apply_transform(&ep.query_image, &q_human, &t, out)?;
                ep.support_image = si;
                ep.support_mask = sm;
                ep.support_human = sh;
                ep.query_image = qi;
                ep.query_mask = Some(qm);
                ep.query_human = Some(qh);
                Ok(ep)
            })
            .collect()
    }

    /// Runs one epoch. `log` receives one record per optimizer step.
    pub fn train_epoch(
        &mut self,
        data: &Dataset,
        log: &mut dyn FnMut(&StepRecord) -> Result<()>,
    ) -> Result<EpochSummary> {
        if self.is_finished() {
            return Err(Error::Contract(format!(
                "training already ran all {} epochs",
                self.config.max_epoch
            )));
        }
        let epoch = self.epoch;
        let beta = self.beta(epoch)?;
        let episodes = self.epoch_episodes(data, epoch)?;
        let max_iter = self.config.max_iter();
        let mut step_reports = Vec::new();
        let mut skipped = 0;
        for (b, batch) in episodes.chunks(self.config.batch_size).enumerate() {
            let mut grads: Option<Vec<Tensor>> = None;
            let mut reports = Vec::new();
            for (k, ep) in batch.iter().enumerate() {
                let mut bank = self.model.bank.clone();
                let out = self.model.episode_loss(&mut bank, ep, epoch, beta, &self.config.loss)?;
                let Some(loss) = out else {
                    skipped += 1;
                    continue;
                };
                self.model.bank = bank;
                let g = loss.gradients(&self.model.params);
                if !loss.report.is_finite() || g.iter().any(|t| !t.is_finite()) {
                    let detail = format!(
                        "episode {} of step {b} (support {}, query {}, classes {:?}): {:?}",
                        k, ep.support_index, ep.query_index, loss.class_set, loss.report
                    );
                    self.dump_episode(ep, epoch, self.iteration);
                    return Err(Error::NonFinite {
                        epoch,
                        step: self.iteration,
                        detail,
                    });
                }
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, x)| a.add_assign(x)),
                }
                reports.push(loss.report);
            }
            let Some(mut grads) = grads else { continue };
            let n = reports.len() as f64;
            grads.iter_mut().for_each(|g| *g = g.scale(1.0 / n));
            let grad_norm = grads
                .iter()
                .flat_map(|g| g.data())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if let Some(max) = self.config.max_grad_norm {
                if grad_norm > max {
                    grads.iter_mut().for_each(|g| *g = g.scale(max / grad_norm));
                }
            }
            let lr = poly_lr(self.config.initial_lr, self.iteration, max_iter, self.config.poly_power);
            self.optimizer.step(&mut self.model.params, &grads, lr);
            let record = StepRecord {
                epoch,
                iteration: self.iteration,
                lr,
                episodes: reports.len(),
                grad_norm,
                loss: LossReport::mean(&reports),
            };
            log(&record)?;
            step_reports.push(record.loss);
            self.iteration += 1;
        }
        self.epoch += 1;
        Ok(EpochSummary {
            epoch,
            beta,
            mean_loss: LossReport::mean(&step_reports),
            steps: step_reports.len(),
            skipped_episodes: skipped,
        })
    }

    /// Runs the remaining epochs.
    pub fn train(
        &mut self,
        data: &Dataset,
        log: &mut dyn FnMut(&StepRecord) -> Result<()>,
        on_epoch: &mut dyn FnMut(&EpochSummary),
    ) -> Result<Vec<EpochSummary>> {
        let mut out = Vec::new();
        while !self.is_finished() {
            let s = self.train_epoch(data, log)?;
            on_epoch(&s);
            out.push(s);
        }
        Ok(out)
    }

    fn dump_episode(&self, ep: &Episode, epoch: usize, step: usize) {
        let Some(dir) = &self.diagnostics_dir else { return };
        let dir = dir.join(format!("nonfinite_e{epoch}_s{step}"));
        let write = || -> Result<()> {
            write_image(&dir.join("support.png"), &ep.support_image)?;
            write_mask(&dir.join("support_mask.png"), &ep.support_mask)?;
            write_image(&dir.join("query.png"), &ep.query_image)?;
            if let Some(m) = &ep.query_mask {
                write_mask(&dir.join("query_mask.png"), m)?;
            }
            Ok(())
        };
        if let Err(e) = write() {
            log::error!("could not write the diagnostic dump: {e}");
        }
    }
}
