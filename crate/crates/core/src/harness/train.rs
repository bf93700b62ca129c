//! The training loop.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use crate::encoder::{Encoder, ParamStore};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tape, Tensor};
use crate::objectives::{
    student_losses, teacher_targets, LossBreakdown, OutputKind, StepInputs, TeacherState,
};
use crate::optimizer::{adamw_step, decay_mask, lr_at, wd_at, OptState, OptimizerConfig};
use crate::views::store::{load_split, masks_on_disk, read_index};
use crate::views::{make_crops, sample_clip, sample_clip_masks, Video};

/// Consecutive skipped steps after which training aborts.
pub const MAX_CONSECUTIVE_SKIPS: usize = 3;

pub const LOSS_LOG: &str = "loss.tsv";
pub const LOSS_LOG_HEADER: &str = "step\tout_g2g\tout_l2g\tin_mim\tin_aff\ttotal\tlr\twd\tgate\n";
pub const CONFIG_ECHO: &str = "config.txt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

/// What one step did.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Zero-based index of the step.
    pub step: u64,
    pub losses: LossBreakdown,
    pub lr: f64,
    pub wd: f64,
    /// Whether the masked objectives ran this step.
    pub gated: bool,
    /// False when the step was skipped for non-finite values.
    pub applied: bool,
}

impl StepReport {
    /// One tab-separated loss-log row; absent terms are written as 0.
    pub fn log_line(&self) -> String {
        let l = &self.losses;
        let v = |x: Option<f64>| x.unwrap_or(0.0);
        format!(
            "{}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{}\n",
            self.step,
            v(l.out_g2g),
            v(l.out_l2g),
            v(l.in_mim),
            v(l.in_aff),
            l.total,
            self.lr,
            self.wd,
            u8::from(self.gated)
        )
    }
}

/// Training state plus everything needed to take the next step.
pub struct Trainer {
    config: RunConfig,
    encoder: Encoder,
    videos: Vec<Video>,
    optim: OptimizerConfig,
    decay: Vec<bool>,
    root: Rng,
    pub student: ParamStore<f32>,
    pub teacher: TeacherState<f32>,
    pub opt: OptState<f32>,
    /// Steps taken so far.
    pub step: u64,
    skips: usize,
}

impl Trainer {
    /// Fresh student from the run seed; the teacher starts as its copy.
    pub fn new(config: RunConfig, videos: Vec<Video>) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(config.model.clone())?;
        let root = Rng::new(config.seed);
        let student = encoder.init::<f32>(&root.substream("init"));
        let teacher = TeacherState::new(&student, config.model.proj_dim);
        let opt = OptState::new(&student);
        Self::assemble(config, encoder, videos, root, student, teacher, opt, 0)
    }

    pub fn from_checkpoint(config: RunConfig, videos: Vec<Video>, ckpt: Checkpoint<f32>) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(config.model.clone())?;
        encoder.check_params(&ckpt.student)?;
        encoder.check_params(&ckpt.teacher.params)?;
        let root = Rng::new(config.seed);
        Self::assemble(
            config,
            encoder,
            videos,
            root,
            ckpt.student,
            ckpt.teacher,
            ckpt.opt,
            ckpt.step,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: RunConfig,
        encoder: Encoder,
        videos: Vec<Video>,
        root: Rng,
        student: ParamStore<f32>,
        teacher: TeacherState<f32>,
        opt: OptState<f32>,
        step: u64,
    ) -> Result<Self> {
        if videos.len() < config.train.batch {
            return Err(Error::Config(format!(
                "train.batch {} exceeds the {} training videos",
                config.train.batch,
                videos.len()
            )));
        }
        let optim = config.optimizer(videos.len());
        optim.validate()?;
        let decay = decay_mask(&encoder);
        Ok(Self {
            config,
            encoder,
            videos,
            optim,
            decay,
            root,
            student,
            teacher,
            opt,
            step,
            skips: 0,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn optimizer(&self) -> &OptimizerConfig {
        &self.optim
    }

    pub fn total_steps(&self) -> u64 {
        self.optim.total_steps() as u64
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.optim.steps_per_epoch as u64
    }

    pub fn checkpoint(&self) -> Checkpoint<f32> {
        Checkpoint {
            step: self.step,
            config: self.config.to_text(),
            student: self.student.clone(),
            teacher: self.teacher.clone(),
            opt: self.opt.clone(),
        }
    }

    /// Videos for step `step`: a seeded shuffle per epoch, consumed in
    /// consecutive batches.
    fn batch_videos(&self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let (epoch, pos) = (step / spe, (step % spe) as usize);
        let order = self
            .root
            .substream("epoch")
            .substream_index(epoch)
            .permutation(self.videos.len());
        let b = self.config.train.batch;
        order[pos * b..(pos + 1) * b].to_vec()
    }

    /// Crops and masks of step `step`, all drawn from that step's
    /// substream.
    pub fn step_inputs(&self, step: u64) -> Result<StepInputs<f32>> {
        let rng = self.root.substream("step").substream_index(step);
        let view = &self.config.view;
        let mut sets = Vec::with_capacity(self.config.train.batch);
        for (b, &vi) in self.batch_videos(step).iter().enumerate() {
            let mut clip_rng = rng.substream("clip").substream_index(b as u64);
            let clip = sample_clip(&self.videos[vi], &mut clip_rng, view.clip_len, view.frameskip)?;
            sets.push(make_crops(&clip, &rng.substream("crops").substream_index(b as u64), view)?);
        }
        let masks = if self.config.train.objectives.uses_masks() {
            let side = view.global_size / self.config.model.patch_size;
            sample_clip_masks(
                (side, side),
                sets.len() * view.clip_len,
                &mut rng.substream("mask"),
                view.mask_gate,
                view.mask_ratio,
            )
        } else {
            None
        };
        StepInputs::from_crops(&sets, masks)
    }

    /// One optimisation step. Non-finite losses or gradients skip the
    /// update; the third consecutive skip aborts.
    pub fn step(&mut self) -> Result<StepReport> {
        let step = self.step;
        let inputs = self.step_inputs(step)?;
        let temps = &self.config.temps;
        let objectives = &self.config.train.objectives;
        let lr = lr_at(step as usize, &self.optim);
        let wd = wd_at(step as usize, &self.optim);
        let gated = inputs.masks.is_some();

        let outcome = (|| -> Result<Option<(LossBreakdown, Vec<Tensor<f32>>, _)>> {
            let targets = match teacher_targets(&self.encoder, &self.teacher, &inputs, temps, objectives) {
                Ok(t) => t,
                Err(Error::NonFinite(what)) => {
                    log::warn!("step {step}: non-finite {what}");
                    return Ok(None);
                }
                Err(e) => return Err(e),
            };
            let tape = Tape::new();
            let bound = self.encoder.bind(&tape, &self.student, true)?;
            let losses = match student_losses(&self.encoder, &tape, &bound, &inputs, &targets, temps, objectives) {
                Ok(l) => l,
                Err(Error::NonFinite(what)) => {
                    log::warn!("step {step}: non-finite {what}");
                    return Ok(None);
                }
                Err(e) => return Err(e),
            };
            let breakdown = losses.breakdown(&tape);
            if !breakdown.total.is_finite() {
                log::warn!("step {step}: non-finite loss {}", breakdown.total);
                return Ok(Some((breakdown, Vec::new(), targets)));
            }
            tape.backward(losses.total)?;
            let grads = bound
                .vars()
                .iter()
                .zip(self.student.tensors())
                .map(|(&v, p)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            Ok(Some((breakdown, grads, targets)))
        })()?;

        let nan = LossBreakdown {
            out_g2g: None,
            out_l2g: None,
            in_mim: None,
            in_aff: None,
            total: f64::NAN,
        };
        let (losses, applied) = match outcome {
            Some((breakdown, grads, targets)) if !grads.is_empty() => {
                let applied =
                    adamw_step(&mut self.student, &grads, &self.decay, &mut self.opt, lr, wd, &self.optim)?;
                if applied {
                    let tm = &self.config.train;
                    self.teacher.ema_update(&self.student, tm.ema_momentum)?;
                    self.teacher
                        .center_update(OutputKind::Cls, &targets.cls_logits, tm.center_momentum)?;
                    if let Some(p) = &targets.patch_logits {
                        self.teacher.center_update(OutputKind::Patch, p, tm.center_momentum)?;
                    }
                }
                (breakdown, applied)
            }
            Some((breakdown, _, _)) => (breakdown, false),
            None => (nan, false),
        };

        if applied {
            self.skips = 0;
        } else {
            self.skips += 1;
            if self.skips >= MAX_CONSECUTIVE_SKIPS {
                return Err(Error::Aborted(format!(
                    "{MAX_CONSECUTIVE_SKIPS} consecutive non-finite steps ending at step {step}"
                )));
            }
        }
        self.step += 1;
        Ok(StepReport {
            step,
            losses,
            lr,
            wd,
            gated,
            applied,
        })
    }
}

/// Loads a training split, refusing any video that ships masks.
pub fn load_training_videos(split: &Path) -> Result<Vec<Video>> {
    for id in read_index(split)? {
        if masks_on_disk(&split.join(&id)) > 0 {
            return Err(Error::invalid(format!(
                "training video {id} has mask files; training splits must be unlabeled"
            )));
        }
    }
    load_split(split, false)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: u64,
    pub reports: Vec<StepReport>,
    pub last_checkpoint: PathBuf,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains from scratch, or from `resume`, to the end of the schedule.
/// Writes the config echo, the loss log and per-epoch checkpoints under
/// `config.out_dir`.
pub fn train(config: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    let videos = load_training_videos(&config.data.train_dir())?;
    let mut trainer = match resume {
        Some(path) => Trainer::from_checkpoint(config.clone(), videos, Checkpoint::load(path)?)?,
        None => Trainer::new(config.clone(), videos)?,
    };
    run(&mut trainer, None)
}

/// Runs `trainer` until `stop` steps (or the end of the schedule), logging
/// and checkpointing as [`train`] does.
pub fn run(trainer: &mut Trainer, stop: Option<u64>) -> Result<TrainSummary> {
    let out = trainer.config().out_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_text(&out.join(CONFIG_ECHO), &trainer.config().to_text())?;
    let log_path = out.join(LOSS_LOG);
    let mut log = if trainer.step == 0 {
        let mut f = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        f.write_all(LOSS_LOG_HEADER.as_bytes())
            .map_err(|e| Error::io(&log_path, e))?;
        f
    } else {
        OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?
    };

    let end = stop.unwrap_or(u64::MAX).min(trainer.total_steps());
    let spe = trainer.steps_per_epoch();
    let every = trainer.config().train.checkpoint_every as u64;
    let epochs = trainer.config().train.epochs as u64;
    let mut reports = Vec::new();
    let last = out.join(LAST_CHECKPOINT);
    while trainer.step < end {
        let report = trainer.step()?;
        log.write_all(report.log_line().as_bytes())
            .map_err(|e| Error::io(&log_path, e))?;
        log::info!(
            "step {} total {:.5} lr {:.3e} gate {}",
            report.step,
            report.losses.total,
            report.lr,
            u8::from(report.gated)
        );
        reports.push(report);
        if trainer.step % spe == 0 {
            let epoch = trainer.step / spe;
            if epoch % every == 0 || epoch == epochs {
                let ckpt = trainer.checkpoint();
                ckpt.save(&out.join(epoch_checkpoint_name(epoch as usize)))?;
                ckpt.save(&last)?;
            }
        }
    }
    trainer.checkpoint().save(&last)?;
    Ok(TrainSummary {
        steps: trainer.step,
        reports,
        last_checkpoint: last,
    })
}
