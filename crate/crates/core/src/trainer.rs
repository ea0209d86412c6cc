//! Episodic and standard training with shared-batch self-supervision.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::config::{RotationMode, SslTask, TrainConfig, TrainMode};
use crate::data::{make_jigsaw, make_rotation, Degradation, EpisodeSampler, ImageTensor, LabeledImage};
use crate::error::{Error, Result};
use crate::evaluator::{episode_accuracies, test_standard};
use crate::model::{Checkpoint, Grads, Mode, ModelBundle};
use crate::objectives::{combine, cross_entropy_with_grad, jigsaw_loss, prototype_loss, rotation_loss};
use crate::optim::{Adam, AdamConfig};
use crate::permset::PermutationSet;
use crate::rng::{self, Streams};
use crate::scalar::Scalar;

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss_total: f64,
    pub loss_sup: f64,
    pub loss_ssl: f64,
    pub acc_sup: f64,
    pub acc_ssl: Option<f64>,
    /// Seconds since training started.
    pub wallclock: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub image_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ssl_image_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: usize,
    pub accuracy: f64,
}

/// Images available to one training run. Class ids index
/// `0..num_classes`, which sizes the classifier in standard mode.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a, T> {
    pub train: &'a [LabeledImage<T>],
    /// Validation classes (episodic) or held-out images (standard). May be
    /// empty, in which case the last checkpoint is also the best one.
    pub val: &'a [LabeledImage<T>],
    pub num_classes: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub best: Checkpoint<T>,
    pub last: Checkpoint<T>,
    pub steps: usize,
    pub validations: Vec<ValidationRecord>,
}

/// Optimizer steps implied by `config` for `n_train` images.
pub fn total_steps(config: &TrainConfig, n_train: usize) -> usize {
    match config.mode {
        TrainMode::Episodic => config.episodes,
        TrainMode::Standard => config.epochs * n_train.div_ceil(config.batch_size),
    }
}

fn degrade_all<T: Scalar>(images: &[LabeledImage<T>], degrade: Degradation) -> Result<Vec<LabeledImage<T>>> {
    images
        .iter()
        .map(|i| {
            Ok(LabeledImage {
                image: degrade.apply(&i.image)?,
                class_id: i.class_id,
                source_path: i.source_path.clone(),
            })
        })
        .collect()
}

/// Validation metric as a fraction: mean accuracy over the fixed
/// validation episodes (episodic) or per-image accuracy (standard).
pub fn validate<T: Scalar>(bundle: &ModelBundle<T>, val: &[LabeledImage<T>], config: &TrainConfig) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::InvalidArgument("empty validation set".into()));
    }
    match config.mode {
        TrainMode::Episodic => {
            let accs = episode_accuracies(
                bundle,
                val,
                (config.n_way, config.k_shot, config.m_query),
                config.val_episodes,
                config.seed,
                rng::VALIDATION,
            )?;
            Ok(accs.iter().sum::<f64>() / accs.len().max(1) as f64)
        }
        TrainMode::Standard => Ok(test_standard(bundle, val)? / 100.0),
    }
}

/// Self-supervised branch of one step, already forwarded; backward happens
/// only after the combined loss has been checked.
enum SslPass<T> {
    None,
    Active {
        pass: crate::model::HeadPass<T>,
        loss: T,
        grad: crate::model::Matrix<T>,
        accuracy: f64,
    },
}

struct Runner<'a, T> {
    config: &'a TrainConfig,
    permset: Option<&'a PermutationSet>,
    streams: Streams,
    started: Instant,
    _marker: std::marker::PhantomData<T>,
}

impl<'a, T: Scalar> Runner<'a, T> {
    fn ssl_forward(&self, bundle: &mut ModelBundle<T>, images: &[&ImageTensor<T>], step: usize) -> Result<SslPass<T>> {
        let s = step as u64;
        match self.config.ssl_task {
            SslTask::None => Ok(SslPass::None),
            SslTask::Jigsaw => {
                let permset = self.permset.expect("checked at start");
                let geometry = self.config.jigsaw_geometry();
                let mut r = self.streams.stream(rng::JIGSAW, s);
                let samples = images
                    .iter()
                    .map(|img| make_jigsaw(img, permset, &geometry, &mut r))
                    .collect::<Result<Vec<_>>>()?;
                let targets: Vec<usize> = samples.iter().map(|x| x.perm_index).collect();
                let pass = bundle.jigsaw_pass(&samples, Mode::Train)?;
                let ce = jigsaw_loss(&pass.logits, &targets)?;
                Ok(SslPass::Active { pass, loss: ce.loss, grad: ce.grad, accuracy: ce.accuracy })
            }
            SslTask::Rotation => {
                let mut r = self.streams.stream(rng::ROTATION, s);
                let mut samples = Vec::new();
                for img in images {
                    match self.config.rotation_mode {
                        RotationMode::OnePerImage => samples.push(make_rotation(img, r.gen_range(0..4))?),
                        RotationMode::AllFour => {
                            for k in 0..4 {
                                samples.push(make_rotation(img, k)?);
                            }
                        }
                    }
                }
                let targets: Vec<usize> = samples.iter().map(|x| x.angle_index).collect();
                let mut dropout = self.streams.stream(rng::DROPOUT, s);
                let pass = bundle.rotation_pass(&samples, Mode::Train, Some(&mut dropout))?;
                let ce = rotation_loss(&pass.logits, &targets)?;
                Ok(SslPass::Active { pass, loss: ce.loss, grad: ce.grad, accuracy: ce.accuracy })
            }
        }
    }

    /// Combines, checks for NaN, back-propagates the SSL branch and returns
    /// the log fields that depend on it.
    fn finish(
        &self,
        bundle: &ModelBundle<T>,
        grads: &mut Grads<T>,
        step: usize,
        sup_loss: T,
        ssl: SslPass<T>,
    ) -> Result<(f64, f64, Option<f64>)> {
        let ssl_loss = match &ssl {
            SslPass::None => T::zero(),
            SslPass::Active { loss, .. } => *loss,
        };
        let nonfinite = || Error::NonFiniteLoss {
            step,
            supervised: sup_loss.as_f64(),
            self_supervised: ssl_loss.as_f64(),
        };
        let total = combine(sup_loss, ssl_loss).map_err(|_| nonfinite())?;
        if !total.is_finite() {
            return Err(nonfinite());
        }
        let acc = match ssl {
            SslPass::None => None,
            SslPass::Active { pass, grad, accuracy, .. } => {
                bundle.head_backward(&pass, &grad, grads, false);
                Some(accuracy)
            }
        };
        Ok((total.as_f64(), ssl_loss.as_f64(), acc))
    }

    fn log(&self, step: usize, sup: T, (total, ssl, acc_ssl): (f64, f64, Option<f64>), acc_sup: f64, ids: Vec<String>) -> StepLog {
        let ids = if self.config.log_image_ids { ids } else { Vec::new() };
        StepLog {
            step,
            loss_total: total,
            loss_sup: sup.as_f64(),
            loss_ssl: ssl,
            acc_sup,
            acc_ssl,
            wallclock: self.started.elapsed().as_secs_f64(),
            ssl_image_ids: if self.config.ssl_task == SslTask::None { Vec::new() } else { ids.clone() },
            image_ids: ids,
        }
    }
}

fn check_grads<T: Scalar>(grads: &Grads<T>, step: usize, sup: T, ssl: f64) -> Result<()> {
    if grads.is_finite() {
        return Ok(());
    }
    Err(Error::NonFiniteLoss {
        step,
        supervised: sup.as_f64(),
        self_supervised: ssl,
    })
}

/// Trains a fresh model. `on_step` receives every log record as it is
/// produced.
pub fn train<T: Scalar>(
    config: &TrainConfig,
    data: TrainData<'_, T>,
    permset: Option<&PermutationSet>,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    match (config.ssl_task, permset) {
        (SslTask::Jigsaw, None) => return Err(Error::Config("ssl_task jigsaw needs a permutation set".into())),
        (SslTask::Jigsaw, Some(p)) if p.len() != config.permset_size => {
            return Err(Error::Config(format!(
                "permutation set has {} entries, config expects {}",
                p.len(),
                config.permset_size
            )))
        }
        (SslTask::Jigsaw, Some(p)) if p.n_elements() != config.jigsaw_geometry().num_tiles() => {
            return Err(Error::Config(format!("permutation set is over {} tiles, expected 9", p.n_elements())))
        }
        _ => {}
    }
    let permset = if config.ssl_task == SslTask::Jigsaw { permset } else { None };
    let train_images = degrade_all(data.train, config.degrade)?;
    let val_images = degrade_all(data.val, config.degrade)?;
    if train_images.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }

    let model_config = config.model_config(data.num_classes, permset.map_or(0, PermutationSet::len));
    let mut bundle = ModelBundle::<T>::new(model_config, config.seed)?;
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            weight_decay: config.weight_decay,
            ..Default::default()
        },
        bundle.params(),
    )?;
    let runner = Runner {
        config,
        permset,
        streams: Streams::new(config.seed),
        started: Instant::now(),
        _marker: std::marker::PhantomData,
    };
    let steps = total_steps(config, train_images.len());
    let echo = serde_json::to_value(config)?;
    let snapshot = |bundle: &ModelBundle<T>, step: usize, best: Option<f64>| Checkpoint {
        bundle: bundle.clone(),
        train_config: echo.clone(),
        step,
        best_val_accuracy: best,
        permset: permset.cloned(),
        permset_source: config.permset.as_ref().map(|p| p.display().to_string()),
    };

    let mut validations = Vec::new();
    let mut best: Option<Checkpoint<T>> = None;
    let mut best_acc: Option<f64> = None;
    let mut maybe_validate = |bundle: &ModelBundle<T>, step: usize, validations: &mut Vec<ValidationRecord>| -> Result<()> {
        if val_images.is_empty() {
            return Ok(());
        }
        let accuracy = validate(bundle, &val_images, config)?;
        validations.push(ValidationRecord { step, accuracy });
        if best_acc.is_none_or(|b| accuracy > b) {
            best_acc = Some(accuracy);
            best = Some(snapshot(bundle, step, Some(accuracy)));
        }
        Ok(())
    };

    match config.mode {
        TrainMode::Episodic => {
            let sampler = EpisodeSampler::new(&train_images);
            sampler.check_geometry(config.n_way, config.k_shot + config.m_query)?;
            if !val_images.is_empty() {
                EpisodeSampler::new(&val_images).check_geometry(config.n_way, config.k_shot + config.m_query)?;
            }
            for step in 0..steps {
                let mut r = runner.streams.stream(rng::EPISODE, step as u64);
                let episode = sampler.sample(config.n_way, config.k_shot, config.m_query, &mut r)?;
                let support = bundle.embed_pass(episode.support.iter().map(|i| &i.image), Mode::Train)?;
                let query = bundle.embed_pass(episode.query.iter().map(|i| &i.image), Mode::Train)?;
                let pl = prototype_loss(
                    &support.embeddings,
                    &episode.support_labels(),
                    &query.embeddings,
                    &episode.query_labels(),
                )?;
                let shared: Vec<&ImageTensor<T>> = episode.all_images().map(|i| &i.image).collect();
                let ssl = runner.ssl_forward(&mut bundle, &shared, step)?;
                let mut grads = bundle.zero_grads();
                let parts = runner.finish(&bundle, &mut grads, step, pl.loss, ssl)?;
                bundle.embed_backward(&support, &pl.grad_support, &mut grads, false);
                bundle.embed_backward(&query, &pl.grad_query, &mut grads, false);
                check_grads(&grads, step, pl.loss, parts.1)?;
                adam.step(bundle.params_mut(), &grads)?;
                let ids = episode.all_images().map(|i| i.source_path.clone()).collect();
                on_step(&runner.log(step, pl.loss, parts, pl.accuracy, ids));
                if (step + 1) % config.val_every == 0 || step + 1 == steps {
                    maybe_validate(&bundle, step + 1, &mut validations)?;
                }
            }
        }
        TrainMode::Standard => {
            if let Some(bad) = train_images.iter().find(|i| i.class_id >= data.num_classes) {
                return Err(Error::InvalidArgument(format!(
                    "class id {} of {} outside 0..{}",
                    bad.class_id, bad.source_path, data.num_classes
                )));
            }
            let mut step = 0;
            for epoch in 0..config.epochs {
                let mut order: Vec<usize> = (0..train_images.len()).collect();
                order.shuffle(&mut runner.streams.stream(rng::BATCH, epoch as u64));
                for chunk in order.chunks(config.batch_size) {
                    let batch: Vec<&LabeledImage<T>> = chunk.iter().map(|&i| &train_images[i]).collect();
                    let targets: Vec<usize> = batch.iter().map(|i| i.class_id).collect();
                    let pass = bundle.supervised_pass(batch.iter().map(|i| &i.image), Mode::Train)?;
                    let ce = cross_entropy_with_grad(&pass.logits, &targets)?;
                    let shared: Vec<&ImageTensor<T>> = batch.iter().map(|i| &i.image).collect();
                    let ssl = runner.ssl_forward(&mut bundle, &shared, step)?;
                    let mut grads = bundle.zero_grads();
                    let parts = runner.finish(&bundle, &mut grads, step, ce.loss, ssl)?;
                    bundle.head_backward(&pass, &ce.grad, &mut grads, false);
                    check_grads(&grads, step, ce.loss, parts.1)?;
                    adam.step(bundle.params_mut(), &grads)?;
                    let ids = batch.iter().map(|i| i.source_path.clone()).collect();
                    on_step(&runner.log(step, ce.loss, parts, ce.accuracy, ids));
                    step += 1;
                }
                maybe_validate(&bundle, step, &mut validations)?;
            }
        }
    }

    let last = snapshot(&bundle, steps, best_acc);
    let best = best.unwrap_or_else(|| last.clone());
    Ok(TrainOutcome { best, last, steps, validations })
}
