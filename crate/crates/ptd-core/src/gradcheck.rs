//! Finite-difference verification of the analytic gradients.

use crate::arch::ArchitectureSpec;
use crate::error::{Error, Result};
use crate::losses::{ce_loss_grad, kd_loss_grad, DistillConfig};
use crate::network::forward_train;
use crate::params::ParamSet;
use crate::rng::{stream, STREAM_GRADCHECK};
use crate::tensor::Tensor;
use crate::threads::Parallelism;
use rand::Rng;

/// Loss under test. Distillation needs fixed teacher logits.
pub enum LossSpec {
    CrossEntropy,
    Kd {
        cfg: DistillConfig,
        teacher_logits: Tensor<f64>,
    },
}

fn loss_value(
    arch: &ArchitectureSpec,
    params: &ParamSet<f64>,
    batch: &Tensor<f64>,
    labels: &[usize],
    loss: &LossSpec,
    par: &Parallelism,
) -> Result<f64> {
    let pass = forward_train(arch, params, batch, par)?;
    match loss {
        LossSpec::CrossEntropy => Ok(ce_loss_grad(&pass.logits, labels)?.0),
        LossSpec::Kd {
            cfg,
            teacher_logits,
        } => Ok(kd_loss_grad(&pass.logits, teacher_logits, labels, cfg)?.0),
    }
}

/// Compare analytic parameter gradients against central finite differences
/// on a sampled subset of coordinates (at least `min_coords`, with every
/// parameter tensor represented). Returns the maximum relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// Runs in f64; small batches keep the numeric differences well conditioned.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    arch: &ArchitectureSpec,
    params: &ParamSet<f64>,
    batch: &Tensor<f64>,
    labels: &[usize],
    loss: &LossSpec,
    step: f64,
    min_coords: usize,
    seed: u64,
) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::Config(format!("step must be > 0, got {step}")));
    }
    let par = Parallelism::single();
    let pass = forward_train(arch, params, batch, &par)?;
    let (_, dlogits) = match loss {
        LossSpec::CrossEntropy => ce_loss_grad(&pass.logits, labels)?,
        LossSpec::Kd {
            cfg,
            teacher_logits,
        } => kd_loss_grad(&pass.logits, teacher_logits, labels, cfg)?,
    };
    let analytic = pass.backward(arch, params, &dlogits, &par)?;

    // Pick coordinates: proportional share per tensor, at least one each.
    let manifest = params.manifest();
    let trainable: Vec<(usize, usize)> = manifest
        .iter()
        .enumerate()
        .filter(|(_, (_, role, _))| role.trainable())
        .map(|(i, (_, _, shape))| (i, shape.iter().product()))
        .collect();
    let total: usize = trainable.iter().map(|(_, l)| l).sum();
    let mut rng = stream(seed, &[STREAM_GRADCHECK]);
    let mut picks: Vec<(usize, usize)> = Vec::new();
    for &(tensor_idx, len) in &trainable {
        let share = ((min_coords * len) as f64 / total as f64).ceil() as usize;
        let take = share.clamp(1, len);
        for _ in 0..take {
            picks.push((tensor_idx, rng.gen_range(0..len)));
        }
    }

    // Flattened views for indexing by manifest position.
    let mut analytic_flat: Vec<Vec<f64>> = Vec::new();
    analytic.visit(&mut |_, _, t| analytic_flat.push(t.data().to_vec()));

    let mut max_rel = 0.0f64;
    for (tensor_idx, coord) in picks {
        let mut plus = params.clone();
        perturb(&mut plus, tensor_idx, coord, step);
        let lp = loss_value(arch, &plus, batch, labels, loss, &par)?;
        let mut minus = params.clone();
        perturb(&mut minus, tensor_idx, coord, -step);
        let lm = loss_value(arch, &minus, batch, labels, loss, &par)?;
        if !lp.is_finite() || !lm.is_finite() {
            return Err(Error::NonFinite {
                context: "finite-difference probe".into(),
            });
        }
        let numeric = (lp - lm) / (2.0 * step);
        let a = analytic_flat[tensor_idx][coord];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

fn perturb(params: &mut ParamSet<f64>, tensor_idx: usize, coord: usize, delta: f64) {
    let mut i = 0usize;
    params.visit_mut(&mut |_, _, t| {
        if i == tensor_idx {
            t.data_mut()[coord] += delta;
        }
        i += 1;
    });
}

/// Deterministic logits tensor for loss probes (e.g. a stand-in teacher).
pub fn synthetic_logits(n: usize, k: usize, scale: f64, seed: u64) -> Tensor<f64> {
    let mut rng = stream(seed, &[STREAM_GRADCHECK, 0xbeef]);
    let data: Vec<f64> = (0..n * k)
        .map(|_| (rng.gen::<f64>() - 0.5) * 2.0 * scale)
        .collect();
    Tensor::from_vec(&[n, k], data).expect("shape matches")
}
