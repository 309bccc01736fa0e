//! Unstructured pruning: iterative global magnitude pruning with a rewound
//! fine-tuning schedule, and the data-free synaptic-flow alternative.

use crate::arch::{ArchitectureSpec, LayerSpec};
use crate::checkpoint::MaskedCheckpoint;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::masks::{global_magnitude_mask, global_score_mask, MaskSet};
use crate::network::forward_tape_running_bn;
use crate::params::{LayerParams, ParamSet};
use crate::tensor::{Scalar, Tensor};
use crate::threads::Parallelism;
use crate::train::{finetune, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMethod {
    #[default]
    MagnitudeLrRewind,
    Synflow,
}

fn default_rate() -> f64 {
    0.2
}
fn default_momentum() -> f64 {
    0.9
}
fn default_synflow_rounds() -> usize {
    100
}

/// Iterative pruning settings. The `post_*` fields are the rewound
/// fine-tuning schedule applied after each pruning step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    #[serde(default = "default_rate")]
    pub rate_per_iteration: f64,
    pub iterations: usize,
    pub post_epochs: usize,
    pub post_batch_size: usize,
    pub post_lr: f64,
    #[serde(default)]
    pub post_lr_drops: Vec<usize>,
    #[serde(default = "crate::train::default_drop_factor")]
    pub post_drop_factor: f64,
    #[serde(default)]
    pub post_weight_decay: f64,
    #[serde(default = "default_momentum")]
    pub post_momentum: f64,
    #[serde(default)]
    pub method: PruneMethod,
    #[serde(default = "default_synflow_rounds")]
    pub synflow_rounds: usize,
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.rate_per_iteration && self.rate_per_iteration < 1.0) {
            return Err(Error::Config(format!(
                "rate_per_iteration must be in (0,1), got {}",
                self.rate_per_iteration
            )));
        }
        if self.synflow_rounds == 0 {
            return Err(Error::Config("synflow_rounds must be >= 1".into()));
        }
        self.finetune_config(0).validate()
    }

    /// The rewound schedule as a train config (seed filled in per iteration).
    pub fn finetune_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.post_epochs,
            batch_size: self.post_batch_size,
            lr: self.post_lr,
            lr_drops: self.post_lr_drops.clone(),
            drop_factor: self.post_drop_factor,
            weight_decay: self.post_weight_decay,
            momentum: self.post_momentum,
            seed,
            decay_exempt_bn_bias: false,
        }
    }

    /// Sparsity reached after `k` pruning steps.
    pub fn sparsity_after(&self, k: usize) -> f64 {
        1.0 - (1.0 - self.rate_per_iteration).powi(k as i32)
    }
}

/// Smallest iteration count whose schedule sparsity reaches `target`.
pub fn iterations_for_target(target: f64, rate: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&target) {
        return Err(Error::Config(format!(
            "target sparsity must be in [0,1), got {}",
            target
        )));
    }
    if !(0.0 < rate && rate < 1.0) {
        return Err(Error::Config(format!("rate must be in (0,1), got {}", rate)));
    }
    let mut k = 0usize;
    let mut reached = 0.0;
    while reached + 1e-12 < target {
        k += 1;
        reached = 1.0 - (1.0 - rate).powi(k as i32);
    }
    Ok(k)
}

/// Per-iteration log of an iterative pruning run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneIterationRow {
    pub iteration: usize,
    pub target_sparsity: f64,
    pub achieved_sparsity: f64,
    pub best_val_acc: f64,
    pub finetune_epochs: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PruneReport {
    pub iterations: Vec<PruneIterationRow>,
    /// True when no previously pruned weight was revived at any step.
    pub masks_monotone: bool,
}

/// Iterative magnitude pruning: each iteration raises sparsity to
/// `1-(1-rate)^k` with the global magnitude criterion, then fine-tunes the
/// surviving weights under the rewound schedule, keeping the best-validation
/// snapshot. Masked weights stay exactly zero throughout.
pub fn iterative_prune_lr_rewind<T: Scalar>(
    ckpt: MaskedCheckpoint<T>,
    cfg: &PruneConfig,
    data: &LabeledDataset,
    par: &Parallelism,
) -> Result<(MaskedCheckpoint<T>, PruneReport)> {
    cfg.validate()?;
    let mut report = PruneReport {
        masks_monotone: true,
        ..Default::default()
    };
    if cfg.iterations == 0 {
        return Ok((ckpt, report));
    }
    let mut current = ckpt;
    for k in 1..=cfg.iterations {
        let target = cfg.sparsity_after(k);
        let masks = global_magnitude_mask(&current.params, target, &current.masks)?;
        report.masks_monotone &= masks.contains_pruned_of(&current.masks);
        current.masks = masks;
        current.masks.apply(&mut current.params)?;

        let ft_cfg = cfg.finetune_config(crate::rng::stream_seed(
            current.seed,
            &[crate::rng::STREAM_FINETUNE, k as u64],
        ));
        let seed = current.seed;
        let (tuned, run) = finetune(current, data, &ft_cfg, par)?;
        current = tuned;
        current.seed = seed;
        report.iterations.push(PruneIterationRow {
            iteration: k,
            target_sparsity: target,
            achieved_sparsity: current.masks.sparsity(),
            best_val_acc: run.best_val_acc().unwrap_or(f64::NAN),
            finetune_epochs: ft_cfg.epochs,
        });
        current.masks.check_zeroed(&current.params)?;
    }
    current
        .metrics
        .insert("sparsity".into(), current.masks.sparsity());
    Ok((current, report))
}

// ---------------------------------------------------------------------------
// Synaptic-flow scoring
// ---------------------------------------------------------------------------

fn abs_params<T: Scalar>(params: &ParamSet<T>) -> ParamSet<T> {
    let mut p = params.clone();
    p.visit_mut(&mut |_, _, t| {
        for v in t.data_mut() {
            *v = v.abs();
        }
    });
    p
}

/// Neutralize batchnorm statistics in a parameter set so eval-mode batchnorm
/// becomes `x * |gamma| + |beta|`: running mean 0, running var `1 - eps`.
fn neutralize_bn<T: Scalar>(arch: &ArchitectureSpec, params: &mut ParamSet<T>) {
    fn rec<T: Scalar>(specs: &[LayerSpec], params: &mut [LayerParams<T>]) {
        for (s, p) in specs.iter().zip(params) {
            match (s, p) {
                (
                    LayerSpec::BatchNorm { eps, .. },
                    LayerParams::BatchNorm {
                        running_mean,
                        running_var,
                        ..
                    },
                ) => {
                    for v in running_mean.data_mut() {
                        *v = T::zero();
                    }
                    let one_minus_eps = T::one() - T::of_f64(*eps);
                    for v in running_var.data_mut() {
                        *v = one_minus_eps;
                    }
                }
                (
                    LayerSpec::Residual { body, projection },
                    LayerParams::Residual {
                        body: pb,
                        projection: pp,
                    },
                ) => {
                    rec(body, pb);
                    if let (Some(ps), Some(pp)) = (projection, pp) {
                        rec(
                            std::slice::from_ref(ps.as_ref()),
                            std::slice::from_mut(pp.as_mut()),
                        );
                    }
                }
                _ => {}
            }
        }
    }
    rec(&arch.layers, &mut params.layers);
}

/// One scoring pass: run the |w| network on an all-ones input, sum the
/// outputs, and return per-weight `|w * dR/dw|` for the prunable tensors.
/// Batchnorm runs on the neutralized running stats (pure |gamma| scaling)
/// and ReLU is a pass-through on the all-positive flow.
fn synflow_scores<T: Scalar>(
    arch: &ArchitectureSpec,
    abs_p: &ParamSet<T>,
    masks: &MaskSet,
    par: &Parallelism,
) -> Result<Vec<Vec<f64>>> {
    let mut p = abs_p.clone();
    masks.apply(&mut p)?;
    let ones = Tensor::from_vec(
        &[1, arch.input[0], arch.input[1], arch.input[2]],
        vec![T::one(); arch.input.iter().product()],
    )?;
    let pass = forward_tape_running_bn(arch, &p, &ones, par)?;
    let upstream = Tensor::from_vec(pass.logits.shape(), vec![T::one(); pass.logits.len()])?;
    let grads = pass.backward(arch, &p, &upstream, par)?;
    let mut grad_flat: Vec<Vec<f64>> = Vec::new();
    grads.visit(&mut |_, role, t| {
        if role.prunable() {
            grad_flat.push(t.data().iter().map(|v| v.as_f64()).collect());
        }
    });
    let mut scores = Vec::new();
    let mut i = 0;
    p.visit(&mut |_, role, t| {
        if role.prunable() {
            let g = &grad_flat[i];
            scores.push(
                t.data()
                    .iter()
                    .zip(g)
                    .map(|(w, g)| (w.as_f64() * g).abs())
                    .collect(),
            );
            i += 1;
        }
    });
    Ok(scores)
}

/// One-pass synaptic-flow scores for every prunable weight of a dense
/// (unmasked) network, in canonical tensor order.
pub fn synflow_scores_once<T: Scalar>(
    arch: &ArchitectureSpec,
    params: &ParamSet<T>,
    par: &Parallelism,
) -> Result<Vec<Vec<f64>>> {
    let mut abs_p = abs_params(params);
    neutralize_bn(arch, &mut abs_p);
    synflow_scores(arch, &abs_p, &MaskSet::dense(params), par)
}

/// Data-free pruning by synaptic flow. Runs `rounds` scoring passes with an
/// exponential sparsity schedule and masks the lowest-scored weights
/// globally. Scores depend on |w| only.
pub fn synflow_prune<T: Scalar>(
    arch: &ArchitectureSpec,
    params: &ParamSet<T>,
    target_sparsity: f64,
    rounds: usize,
    par: &Parallelism,
) -> Result<MaskSet> {
    if rounds == 0 {
        return Err(Error::Config("synflow rounds must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&target_sparsity) {
        return Err(Error::Config(format!(
            "target sparsity must be in [0,1), got {}",
            target_sparsity
        )));
    }
    let mut abs_p = abs_params(params);
    neutralize_bn(arch, &mut abs_p);
    let mut masks = MaskSet::dense(params);
    if target_sparsity == 0.0 {
        return Ok(masks);
    }
    for r in 1..=rounds {
        let round_target = 1.0 - (1.0 - target_sparsity).powf(r as f64 / rounds as f64);
        let scores = match synflow_scores(arch, &abs_p, &masks, par) {
            Ok(s) => s,
            Err(Error::NonFinite { .. }) => {
                // overflow: rescale each prunable tensor by its max and retry
                let mut rescaled = abs_p.clone();
                rescaled.visit_mut(&mut |_, role, t| {
                    if role.prunable() {
                        let max = t
                            .data()
                            .iter()
                            .fold(T::zero(), |m, v| if *v > m { *v } else { m });
                        if max > T::zero() {
                            for v in t.data_mut() {
                                *v /= max;
                            }
                        }
                    }
                });
                synflow_scores(arch, &rescaled, &masks, par).map_err(|e| match e {
                    Error::NonFinite { .. } => Error::NonFinite {
                        context: "synflow scoring overflow persists after per-layer rescale"
                            .into(),
                    },
                    other => other,
                })?
            }
            Err(e) => return Err(e),
        };
        masks = global_score_mask(&scores, round_target, &masks)?;
    }
    Ok(masks)
}
