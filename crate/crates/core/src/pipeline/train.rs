//! Optimisation loop, evaluation and prediction.

use std::path::PathBuf;

use rand::seq::SliceRandom;

use crate::data::{augment, foreground_dice, Dataset, Sample};
use crate::diffcore::{Tape, Tensor};
use crate::parallel::{map_indexed, map_owned, try_map_indexed, Execution};
use crate::rng::{stream, Rng};
use crate::spatial::Field2D;

use super::checkpoint::{checkpoint_save, Checkpoint, TrainState};
use super::forward::{forward_tape, sample_loss, ForwardOptions, ForwardTape, LatentLogWeights};
use super::net::{BoundModel, Model};
use super::PipelineError;

/// Self-normalised importance weights are clamped to `[e^-5, e^5]`.
pub const IMPORTANCE_CLAMP: f64 = 5.0;

const TAG_SHUFFLE: u64 = 0x5348;
const TAG_STEP: u64 = 0x5354;
const TAG_AUGMENT: u64 = 0x4155;
const TAG_EVAL: u64 = 0x4556;

/// Adam moments with coupled L2 weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Vec<f64>> = model
            .named_params()
            .iter()
            .map(|(_, t)| vec![0.0; t.numel()])
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn apply(&mut self, model: &mut Model, grads: &[Vec<f64>], lr: f64, weight_decay: f64) -> Result<(), PipelineError> {
        let mut params = model.params_mut();
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(PipelineError::Shape(format!(
                "{} gradient buffers / {} moment buffers for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, t) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[idx], &mut self.v[idx], &grads[idx]);
            let mut vals = t.values().to_vec();
            for j in 0..vals.len() {
                let gj = g[j] + weight_decay * vals[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                vals[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
            t.assign(&vals)
                .map_err(|e| PipelineError::NonFiniteLoss { breakdown: format!("parameter update: {e}") })?;
        }
        Ok(())
    }
}

/// Self-normalised importance weights `B * softmax(log_w)`, clamped to `e^(+-5)`.
pub fn importance_weights(log_weights: &[f64]) -> Vec<f64> {
    let b = log_weights.len() as f64;
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = log_weights.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter()
        .map(|e| (b * e / total).clamp((-IMPORTANCE_CLAMP).exp(), IMPORTANCE_CLAMP.exp()))
        .collect()
}

/// Batch means of the loss terms after one optimiser step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub ce: f64,
    pub dice: f64,
    pub kl_y: f64,
    pub kl_z: f64,
    pub kl_x: f64,
    pub kl_m: f64,
    pub latent_kl: f64,
    /// Effective sample size of the importance weights.
    pub ess: f64,
}

impl StepReport {
    fn breakdown(&self) -> String {
        format!(
            "loss={} ce={} dice={} KL_y={} KL_z={} KL_x={} KL_m={} latent={}",
            self.loss, self.ce, self.dice, self.kl_y, self.kl_z, self.kl_x, self.kl_m, self.latent_kl
        )
    }
}

fn image_var(tape: &mut Tape, model: &Model, image: &[f64]) -> Result<crate::diffcore::Var, PipelineError> {
    let (h, w) = (model.config.height, model.config.width);
    if image.len() != h * w {
        return Err(PipelineError::Shape(format!(
            "image has {} pixels, model expects {h}x{w}",
            image.len()
        )));
    }
    tape.constant(&[1, h, w], image.to_vec())
        .map_err(|e| PipelineError::Shape(e.to_string()))
}

fn one_hot(model: &Model, mask: &[u8]) -> Result<Tensor, PipelineError> {
    let (k, p) = (model.config.num_classes, model.config.pixels());
    if mask.len() != p {
        return Err(PipelineError::Shape(format!("mask has {} pixels, expected {p}", mask.len())));
    }
    let mut vals = vec![0.0; k * p];
    for (i, &l) in mask.iter().enumerate() {
        let l = usize::from(l);
        if l >= k {
            return Err(PipelineError::Shape(format!("label {l} >= num_classes {k}")));
        }
        vals[l * p + i] = 1.0;
    }
    Ok(Tensor::new(vec![k, p], vals).expect("finite one-hot"))
}

struct Pending {
    tape: Tape,
    bound: BoundModel,
    fwd: ForwardTape,
}

struct Finished {
    grads: Vec<Vec<f64>>,
    report: StepReport,
}

/// One optimiser step on `batch`. Each sample runs on its own tape (in
/// parallel when enabled) with its own random stream; gradients are reduced in
/// sample order, so the result does not depend on the execution mode.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[&Sample],
    epoch: usize,
    step: usize,
    exec: Execution,
) -> Result<StepReport, PipelineError> {
    if batch.is_empty() {
        return Err(PipelineError::Config("empty batch".into()));
    }
    let cfg = model.config.clone();
    let opts = ForwardOptions::train(cfg.tau_at(epoch));
    let frozen: &Model = model;

    let pending = try_map_indexed(exec, batch.len(), |i| {
        let mut rng = stream(cfg.seed, &[TAG_STEP, epoch as u64, step as u64, i as u64]);
        let mut tape = Tape::new();
        let bound = frozen.bind(&mut tape);
        let img = image_var(&mut tape, frozen, &batch[i].image)?;
        let fwd = forward_tape(&mut tape, frozen, &bound, img, &opts, &mut rng)?;
        Ok::<_, PipelineError>(Pending { tape, bound, fwd })
    })?;

    let weights = if cfg.toggles.sde_girsanov {
        // The full path weight of thousands of coordinates is degenerate across a
        // batch (one sample takes all the mass); the per-coordinate mean is not.
        let lws: Vec<f64> = pending.iter().map(|p| p.fwd.tempered_log_weight()).collect();
        importance_weights(&lws)
    } else {
        vec![1.0; batch.len()]
    };
    let ess = {
        let s: f64 = weights.iter().sum();
        let s2: f64 = weights.iter().map(|w| w * w).sum();
        s * s / s2
    };
    let b = batch.len() as f64;

    let finished = map_owned(exec, pending, |i, mut p| {
        let target = one_hot(frozen, &batch[i].mask)?;
        let loss = sample_loss(&mut p.tape, frozen, &p.fwd, &target, weights[i])?;
        let t = &p.tape;
        let report = StepReport {
            loss: t.scalar(loss.total),
            ce: t.scalar(loss.ce),
            dice: t.scalar(loss.dice),
            kl_y: t.scalar(p.fwd.kl.kl_y),
            kl_z: t.scalar(p.fwd.kl.kl_z),
            kl_x: t.scalar(p.fwd.kl.kl_x),
            kl_m: t.scalar(p.fwd.kl.kl_m),
            latent_kl: p.fwd.latent_kl.map(|v| t.scalar(v)).unwrap_or(0.0),
            ess,
        };
        if !report.loss.is_finite() {
            return Err(PipelineError::NonFiniteLoss {
                breakdown: report.breakdown(),
            });
        }
        let g = t
            .backward_seeded(loss.total, 1.0 / b)
            .map_err(|e| PipelineError::NonFiniteLoss {
                breakdown: format!("{} ({e})", report.breakdown()),
            })?;
        let mut grads = p.bound.net.collect(t, &g);
        grads.extend(p.bound.flow.collect(t, &g));
        Ok::<_, PipelineError>(Finished { grads, report })
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;

    let mut total: Vec<Vec<f64>> = finished[0].grads.iter().map(|g| vec![0.0; g.len()]).collect();
    let mut mean = StepReport {
        ess,
        ..StepReport::default()
    };
    for f in &finished {
        for (acc, g) in total.iter_mut().zip(&f.grads) {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        let r = &f.report;
        mean.loss += r.loss / b;
        mean.ce += r.ce / b;
        mean.dice += r.dice / b;
        mean.kl_y += r.kl_y / b;
        mean.kl_z += r.kl_z / b;
        mean.kl_x += r.kl_x / b;
        mean.kl_m += r.kl_m / b;
        mean.latent_kl += r.latent_kl / b;
    }
    adam.apply(model, &total, cfg.lr_at(epoch), cfg.weight_decay)?;
    Ok(mean)
}

/// Eval-mode forward pass on one image.
pub fn forward_image(model: &Model, image: &[f64], rng: &mut Rng) -> Result<(Tape, ForwardTape), PipelineError> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let img = image_var(&mut tape, model, image)?;
    let fwd = forward_tape(&mut tape, model, &bound, img, &ForwardOptions::eval(), rng)?;
    Ok((tape, fwd))
}

/// Argmax labels and the class-probability field.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: Vec<u8>,
    pub confidence: Field2D,
}

/// Deterministic prediction from the mean segmentation logits.
pub fn predict(model: &Model, image: &[f64]) -> Result<Prediction, PipelineError> {
    let mut rng = stream(model.config.seed, &[TAG_EVAL]);
    let (tape, fwd) = forward_image(model, image, &mut rng)?;
    let cfg = &model.config;
    let confidence = Field2D::new(cfg.num_classes, cfg.height, cfg.width, tape.value(fwd.y_hat).to_vec())
        .map_err(|e| PipelineError::Shape(e.to_string()))?;
    Ok(Prediction {
        labels: confidence.argmax(),
        confidence,
    })
}

/// Mean foreground Dice over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mean_dice: f64,
    pub per_sample: Vec<f64>,
}

pub fn evaluate(model: &Model, data: &Dataset, exec: Execution) -> Result<EvalReport, PipelineError> {
    let cfg = &model.config;
    if data.height != cfg.height || data.width != cfg.width || usize::from(data.classes) != cfg.num_classes {
        return Err(PipelineError::ConfigMismatch {
            field: "dataset dimensions",
            expected: format!("{}x{} K={}", cfg.height, cfg.width, cfg.num_classes),
            found: format!("{}x{} K={}", data.height, data.width, data.classes),
        });
    }
    if data.is_empty() {
        return Err(PipelineError::Config("empty evaluation set".into()));
    }
    let per_sample = try_map_indexed(exec, data.len(), |i| {
        let s = &data.samples[i];
        let pred = predict(model, &s.image)?;
        Ok::<_, PipelineError>(foreground_dice(&pred.labels, &s.mask, data.classes)?)
    })?;
    let mean_dice = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok(EvalReport { mean_dice, per_sample })
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    pub dice_val: f64,
    pub kl_y: f64,
    pub kl_z: f64,
    pub kl_x: f64,
    pub kl_m: f64,
    pub best_dice: f64,
}

/// State carried over from a previous run.
#[derive(Debug, Clone)]
pub struct ResumeState {
    pub model: Model,
    pub adam: Adam,
    pub state: TrainState,
    pub best: Option<Model>,
}

impl ResumeState {
    pub fn from_checkpoints(last: Checkpoint, best: Option<Checkpoint>) -> Result<Self, PipelineError> {
        let adam = match last.adam {
            Some(a) => a,
            None => Adam::new(&last.model),
        };
        Ok(Self {
            model: last.model,
            adam,
            state: last.state,
            best: best.map(|c| c.model),
        })
    }
}

pub struct FitOptions<'a> {
    pub exec: Execution,
    /// Where `ckpt-last.dbfc` / `ckpt-best.dbfc` go; no checkpoints when `None`.
    pub run_dir: Option<PathBuf>,
    pub resume: Option<ResumeState>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

impl Default for FitOptions<'_> {
    fn default() -> Self {
        Self {
            exec: Execution::default(),
            run_dir: None,
            resume: None,
            on_epoch: None,
        }
    }
}

#[derive(Debug)]
pub struct FitOutcome {
    /// Parameters with the best validation Dice.
    pub best: Model,
    pub last: Model,
    pub adam: Adam,
    pub history: Vec<EpochRecord>,
    pub state: TrainState,
}

/// Shuffled minibatch training for `model.config.epochs` epochs with
/// per-epoch validation, keeping the best-Dice parameters.
pub fn fit(model: Model, train: &Dataset, val: &Dataset, mut opts: FitOptions<'_>) -> Result<FitOutcome, PipelineError> {
    if train.is_empty() || val.is_empty() {
        return Err(PipelineError::Config("training and validation sets must be nonempty".into()));
    }
    let (mut model, mut adam, mut state, mut best) = match opts.resume.take() {
        Some(r) => {
            model.config.check_compatible(&r.model.config)?;
            let best = r.best.unwrap_or_else(|| r.model.clone());
            (r.model, r.adam, r.state, best)
        }
        None => {
            let adam = Adam::new(&model);
            let best = model.clone();
            (model, adam, TrainState::default(), best)
        }
    };
    let cfg = model.config.clone();
    let mut history = Vec::new();
    let save = |dir: &Option<PathBuf>, name: &str, ckpt: &Checkpoint| -> Result<(), PipelineError> {
        match dir {
            Some(d) => checkpoint_save(ckpt, &d.join(name)),
            None => Ok(()),
        }
    };

    for epoch in state.epochs_done..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream(cfg.seed, &[TAG_SHUFFLE, epoch as u64]));
        let augmented: Vec<Sample>;
        let samples: Vec<&Sample> = if cfg.augment {
            augmented = map_indexed(opts.exec, order.len(), |j| {
                let idx = order[j];
                augment(&train.samples[idx], &mut stream(cfg.seed, &[TAG_AUGMENT, epoch as u64, idx as u64]))
            });
            augmented.iter().collect()
        } else {
            order.iter().map(|&i| &train.samples[i]).collect()
        };

        let mut sums = StepReport::default();
        let mut steps = 0usize;
        for (step, batch) in samples.chunks(cfg.batch_size).enumerate() {
            let r = train_step(&mut model, &mut adam, batch, epoch, step, opts.exec)?;
            sums.loss += r.loss;
            sums.kl_y += r.kl_y;
            sums.kl_z += r.kl_z;
            sums.kl_x += r.kl_x;
            sums.kl_m += r.kl_m;
            steps += 1;
        }
        let n = steps as f64;
        let dice_val = evaluate(&model, val, opts.exec)?.mean_dice;
        state.epochs_done = epoch + 1;
        if dice_val > state.best_dice || state.best_epoch == 0 {
            state.best_dice = dice_val;
            state.best_epoch = epoch + 1;
            best = model.clone();
            save(
                &opts.run_dir,
                "ckpt-best.dbfc",
                &Checkpoint {
                    model: best.clone(),
                    adam: Some(adam.clone()),
                    state,
                },
            )?;
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: sums.loss / n,
            dice_val,
            kl_y: sums.kl_y / n,
            kl_z: sums.kl_z / n,
            kl_x: sums.kl_x / n,
            kl_m: sums.kl_m / n,
            best_dice: state.best_dice,
        };
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&record);
        }
        history.push(record);
        let is_last = epoch + 1 == cfg.epochs;
        if is_last || (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
            save(
                &opts.run_dir,
                "ckpt-last.dbfc",
                &Checkpoint {
                    model: model.clone(),
                    adam: Some(adam.clone()),
                    state,
                },
            )?;
        }
    }
    Ok(FitOutcome {
        best,
        last: model,
        adam,
        history,
        state,
    })
}

/// One draw from the training-mode posterior: sampled latents, flow and Gumbel-Softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSample {
    pub labels: Vec<u8>,
    pub probs: Field2D,
    pub log_weights: LatentLogWeights,
    /// Per-coordinate log-weights of the m, x and z paths.
    pub coord_log_weights: Vec<f64>,
}

pub fn posterior_sample(model: &Model, image: &[f64], rng: &mut Rng) -> Result<PosteriorSample, PipelineError> {
    let cfg = &model.config;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let img = image_var(&mut tape, model, image)?;
    let fwd = forward_tape(&mut tape, model, &bound, img, &ForwardOptions::train(cfg.tau_final), rng)?;
    let probs = Field2D::new(cfg.num_classes, cfg.height, cfg.width, tape.value(fwd.y_hat).to_vec())
        .map_err(|e| PipelineError::Shape(e.to_string()))?;
    Ok(PosteriorSample {
        labels: probs.argmax(),
        probs,
        log_weights: fwd.log_weights,
        coord_log_weights: fwd.coord_log_weights,
    })
}
