//! Training loops: plain cross-entropy training, distillation, evaluation,
//! and teacher/student agreement.

use crate::arch::ArchitectureSpec;
use crate::checkpoint::MaskedCheckpoint;
use crate::data::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::losses::{ce_loss_grad, kd_loss_grad, DistillConfig};
use crate::masks::MaskSet;
use crate::network::{forward_eval, forward_train};
use crate::optim::{lr_at_epoch, sgd_nesterov_step};
use crate::params::ParamSet;
use crate::rng::{stream, STREAM_AUGMENT, STREAM_SHUFFLE};
use crate::tensor::{Scalar, Tensor};
use crate::threads::Parallelism;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

fn default_momentum() -> f64 {
    0.9
}

/// Optimization settings for one training run (Nesterov SGD throughout).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub lr_drops: Vec<usize>,
    #[serde(default = "crate::train::default_drop_factor")]
    pub drop_factor: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub seed: u64,
    /// Exempt biases and batchnorm scale/shift from weight decay.
    #[serde(default)]
    pub decay_exempt_bn_bias: bool,
}

pub(crate) fn default_drop_factor() -> f64 {
    0.1
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !self.lr_drops.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(
                "lr_drops must be strictly increasing".into(),
            ));
        }
        if let Some(&last) = self.lr_drops.last() {
            if self.epochs > 0 && last >= self.epochs {
                return Err(Error::Config(format!(
                    "lr drop at epoch {} but only {} epochs",
                    last, self.epochs
                )));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if !(self.drop_factor > 0.0) {
            return Err(Error::Config("drop_factor must be > 0".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-epoch history of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub lr: f64,
}

/// History plus final metrics of one training/distillation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunReport {
    pub epochs: Vec<EpochRow>,
    pub best_val_epoch: Option<usize>,
    pub final_metrics: BTreeMap<String, f64>,
    /// Wall-clock seconds; informational only, never serialized to run files.
    #[serde(skip)]
    pub wall_secs: f64,
}

impl RunReport {
    pub fn best_val_acc(&self) -> Option<f64> {
        self.best_val_epoch
            .and_then(|e| self.epochs.iter().find(|r| r.epoch == e))
            .map(|r| r.val_acc)
    }
}

/// Initialization for a run.
pub enum Init<T> {
    Fresh,
    Checkpoint(MaskedCheckpoint<T>),
}

enum LossKind<'a, T> {
    Ce,
    Kd {
        teacher_arch: &'a ArchitectureSpec,
        teacher_params: &'a ParamSet<T>,
        cfg: DistillConfig,
    },
}

/// Pad-4 random crop plus horizontal flip, applied in place to a gathered
/// batch. Draws are per sample: (dy, dx, flip).
fn augment_batch<T: Scalar>(
    batch: &mut Tensor<T>,
    rng: &mut rand_chacha::ChaCha8Rng,
) {
    const PAD: usize = 4;
    let shape = batch.shape().to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let data = batch.data_mut();
    let mut padded = vec![T::zero(); c * (h + 2 * PAD) * (w + 2 * PAD)];
    let (ph, pw) = (h + 2 * PAD, w + 2 * PAD);
    for i in 0..n {
        let dy = rng.gen_range(0..=2 * PAD);
        let dx = rng.gen_range(0..=2 * PAD);
        let flip = rng.gen_bool(0.5);
        let sample = &mut data[i * c * h * w..(i + 1) * c * h * w];
        padded.iter_mut().for_each(|v| *v = T::zero());
        for ch in 0..c {
            for y in 0..h {
                let src = ch * h * w + y * w;
                let dst = ch * ph * pw + (y + PAD) * pw + PAD;
                padded[dst..dst + w].copy_from_slice(&sample[src..src + w]);
            }
        }
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sx = if flip { dx + (w - 1 - x) } else { dx + x };
                    sample[ch * h * w + y * w + x] = padded[ch * ph * pw + (dy + y) * pw + sx];
                }
            }
        }
    }
}

fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Accuracy of `params` on a split (eval mode, argmax ties to the lowest
/// class index).
pub fn evaluate_params<T: Scalar>(
    arch: &ArchitectureSpec,
    params: &ParamSet<T>,
    data: &LabeledDataset,
    split: Split,
    batch_size: usize,
    par: &Parallelism,
) -> Result<f64> {
    let indices = data.split_indices(split);
    if indices.is_empty() {
        return Err(Error::Data(format!("{split:?} split is empty")));
    }
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (batch, labels) = data.gather::<T>(chunk)?;
        let logits = forward_eval(arch, params, &batch, par)?;
        for (pred, y) in argmax_rows(&logits).into_iter().zip(labels) {
            if pred == y {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Accuracy of a checkpoint on a split.
pub fn evaluate<T: Scalar>(
    ckpt: &MaskedCheckpoint<T>,
    data: &LabeledDataset,
    split: Split,
    batch_size: usize,
    par: &Parallelism,
) -> Result<f64> {
    evaluate_params(&ckpt.arch, &ckpt.params, data, split, batch_size, par)
}

/// Fraction of samples where the two models' argmax predictions coincide.
pub fn agreement<T: Scalar>(
    a: &MaskedCheckpoint<T>,
    b: &MaskedCheckpoint<T>,
    data: &LabeledDataset,
    split: Split,
    batch_size: usize,
    par: &Parallelism,
) -> Result<f64> {
    if a.arch.num_classes()? != b.arch.num_classes()? {
        return Err(Error::Config(format!(
            "class counts differ: {} vs {}",
            a.arch.num_classes()?,
            b.arch.num_classes()?
        )));
    }
    let indices = data.split_indices(split);
    if indices.is_empty() {
        return Err(Error::Data(format!("{split:?} split is empty")));
    }
    let mut same = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (batch, _) = data.gather::<T>(chunk)?;
        let la = forward_eval(&a.arch, &a.params, &batch, par)?;
        let lb = forward_eval(&b.arch, &b.params, &batch, par)?;
        for (pa, pb) in argmax_rows(&la).into_iter().zip(argmax_rows(&lb)) {
            if pa == pb {
                same += 1;
            }
        }
    }
    Ok(same as f64 / indices.len() as f64)
}

fn run_loop<T: Scalar>(
    arch: &ArchitectureSpec,
    mut params: ParamSet<T>,
    masks: MaskSet,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    loss: LossKind<'_, T>,
    par: &Parallelism,
) -> Result<(MaskedCheckpoint<T>, RunReport)> {
    cfg.validate()?;
    if data.train_idx.is_empty() {
        return Err(Error::Data("train split is empty".into()));
    }
    if data.val_idx.is_empty() && cfg.epochs > 0 {
        return Err(Error::Data("validation split is empty".into()));
    }
    let t0 = std::time::Instant::now();
    masks.apply(&mut params)?;
    let mut velocity = ParamSet::<T>::zeros_like(arch)?;
    let mut report = RunReport::default();
    let mut best: Option<(f64, usize, ParamSet<T>)> = None;

    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch)?;
        let mut order: Vec<u32> = data.train_idx.clone();
        order.shuffle(&mut stream(cfg.seed, &[STREAM_SHUFFLE, epoch as u64]));
        let mut aug_rng = stream(cfg.seed, &[STREAM_AUGMENT, epoch as u64]);

        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (mut batch, labels) = data.gather::<T>(chunk)?;
            if data.augment {
                augment_batch(&mut batch, &mut aug_rng);
            }
            let pass = forward_train(arch, &params, &batch, par).map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!("epoch {epoch} batch {batch_no}: {context}"),
                },
                other => other,
            })?;
            let (loss_val, dlogits) = match &loss {
                LossKind::Ce => ce_loss_grad(&pass.logits, &labels)?,
                LossKind::Kd {
                    teacher_arch,
                    teacher_params,
                    cfg: dcfg,
                } => {
                    if dcfg.alpha == 0.0 {
                        // boundary case: exactly plain cross-entropy training
                        ce_loss_grad(&pass.logits, &labels)?
                    } else {
                        let t_logits = forward_eval(teacher_arch, teacher_params, &batch, par)?;
                        kd_loss_grad(&pass.logits, &t_logits, &labels, dcfg)?
                    }
                }
            };
            if !loss_val.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("loss at epoch {epoch} batch {batch_no}"),
                });
            }
            let grads = pass.backward(arch, &params, &dlogits, par)?;
            sgd_nesterov_step(
                &mut params,
                &grads,
                &mut velocity,
                lr,
                cfg.momentum,
                cfg.weight_decay,
                Some(&masks),
                cfg.decay_exempt_bn_bias,
            )
            .map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!("epoch {epoch} batch {batch_no}: {context}"),
                },
                other => other,
            })?;
            pass.apply_bn_updates(&mut params);

            loss_sum += loss_val.as_f64() * chunk.len() as f64;
            for (pred, y) in argmax_rows(&pass.logits).into_iter().zip(&labels) {
                if pred == *y {
                    correct += 1;
                }
            }
        }

        let val_acc = evaluate_params(arch, &params, data, Split::Val, cfg.batch_size, par)?;
        report.epochs.push(EpochRow {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            train_acc: correct as f64 / order.len() as f64,
            val_acc,
            lr,
        });
        // earliest epoch wins ties, so strictly-greater only
        if best.as_ref().is_none_or(|(b, _, _)| val_acc > *b) {
            best = Some((val_acc, epoch, params.clone()));
        }
    }

    let (params, best_epoch, metrics) = match best {
        Some((acc, epoch, p)) => {
            report.best_val_epoch = Some(epoch);
            let mut m = BTreeMap::new();
            m.insert("val_acc".to_string(), acc);
            (p, epoch, m)
        }
        None => (params, 0, BTreeMap::new()),
    };
    report.final_metrics = metrics.clone();
    report.wall_secs = t0.elapsed().as_secs_f64();
    let ckpt = MaskedCheckpoint {
        arch: arch.clone(),
        params,
        masks,
        seed: cfg.seed,
        epoch: best_epoch,
        metrics,
    };
    ckpt.masks.check_zeroed(&ckpt.params)?;
    Ok((ckpt, report))
}

/// Plain cross-entropy training; returns the best-validation checkpoint
/// (dense masks when starting fresh).
pub fn train<T: Scalar>(
    arch: &ArchitectureSpec,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    init: Init<T>,
    par: &Parallelism,
) -> Result<(MaskedCheckpoint<T>, RunReport)> {
    let (params, masks) = match init {
        Init::Fresh => {
            let p = ParamSet::<T>::init(arch, cfg.seed)?;
            let m = MaskSet::dense(&p);
            (p, m)
        }
        Init::Checkpoint(c) => {
            c.params.matches_arch(arch)?;
            (c.params, c.masks)
        }
    };
    run_loop(arch, params, masks, data, cfg, LossKind::Ce, par)
}

/// Distill a (possibly pruned) teacher into a freshly initialized student.
/// Teacher logits are recomputed per batch in eval mode.
pub fn distill<T: Scalar>(
    student_arch: &ArchitectureSpec,
    teacher: &MaskedCheckpoint<T>,
    data: &LabeledDataset,
    dcfg: &DistillConfig,
    tcfg: &TrainConfig,
    par: &Parallelism,
) -> Result<(MaskedCheckpoint<T>, RunReport)> {
    dcfg.validate()?;
    let k_teacher = teacher.arch.num_classes()?;
    let k_student = student_arch.num_classes()?;
    if k_teacher != k_student {
        return Err(Error::Config(format!(
            "teacher has {} classes, student {}",
            k_teacher, k_student
        )));
    }
    let params = ParamSet::<T>::init(student_arch, tcfg.seed)?;
    let masks = MaskSet::dense(&params);
    run_loop(
        student_arch,
        params,
        masks,
        data,
        tcfg,
        LossKind::Kd {
            teacher_arch: &teacher.arch,
            teacher_params: &teacher.params,
            cfg: *dcfg,
        },
        par,
    )
}

/// Cross-entropy fine-tuning of an existing (typically masked) checkpoint.
pub fn finetune<T: Scalar>(
    ckpt: MaskedCheckpoint<T>,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    par: &Parallelism,
) -> Result<(MaskedCheckpoint<T>, RunReport)> {
    let arch = ckpt.arch.clone();
    run_loop(&arch, ckpt.params, ckpt.masks, data, cfg, LossKind::Ce, par)
}
