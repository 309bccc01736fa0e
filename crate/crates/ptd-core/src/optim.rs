//! Nesterov SGD with weight decay and the step learning-rate schedule.

use crate::error::{Error, Result};
use crate::masks::MaskSet;
use crate::params::ParamSet;
use crate::tensor::Scalar;
use crate::train::TrainConfig;

/// Piecewise-constant schedule: `lr * drop_factor^(number of drops <= epoch)`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Config(format!(
            "epoch {} out of range for {} epochs",
            epoch, cfg.epochs
        )));
    }
    let drops = cfg.lr_drops.iter().filter(|&&d| d <= epoch).count();
    Ok(cfg.lr * cfg.drop_factor.powi(drops as i32))
}

/// One Nesterov step over every trainable parameter:
/// `g <- grad + wd*w; v <- mu*v + g; w <- w - lr*(g + mu*v)`,
/// then masked coordinates of weights and velocity are reset to exact zero.
#[allow(clippy::too_many_arguments)]
pub fn sgd_nesterov_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &ParamSet<T>,
    velocity: &mut ParamSet<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    masks: Option<&MaskSet>,
    decay_exempt_bn_bias: bool,
) -> Result<()> {
    let lr_t = T::of_f64(lr);
    let mu = T::of_f64(momentum);
    let wd = T::of_f64(weight_decay);

    let mut mask_idx = 0usize;
    let mut failed = false;
    params.zip3_mut(grads, velocity, &mut |role, w, g, v| {
        if role.trainable() {
            let decay = if decay_exempt_bn_bias && role.decay_exempt_class() {
                T::zero()
            } else {
                wd
            };
            for ((wv, &gv), vv) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let eff = gv + decay * *wv;
                *vv = mu * *vv + eff;
                *wv -= lr_t * (eff + mu * *vv);
                if !wv.is_finite() {
                    failed = true;
                }
            }
        }
        if role.prunable() {
            if let Some(m) = masks {
                let mask = &m.entries()[mask_idx].1;
                let wd_ = w.data_mut();
                let vd = v.data_mut();
                for (j, &keep) in mask.iter().enumerate() {
                    if !keep {
                        wd_[j] = T::zero();
                        vd[j] = T::zero();
                    }
                }
            }
            mask_idx += 1;
        }
    });

    if failed {
        return Err(Error::NonFinite {
            context: "optimizer update".into(),
        });
    }
    Ok(())
}
