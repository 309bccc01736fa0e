//! Forward and backward passes for the supported layer set.
//!
//! `forward_train` records a tape (cached activations and pooling argmaxes)
//! that `ForwardPass::backward` consumes. Batchnorm running-stat updates are
//! staged on the pass and applied explicitly, so a parameter set is never
//! mutated while a forward/backward pair is in flight.
//!
//! Work splits along the outermost axis of each output buffer and every
//! element is accumulated in a fixed inner order, so results do not depend on
//! the thread count.

use crate::arch::{ArchitectureSpec, LayerSpec, Sig};
use crate::error::{Error, Result};
use crate::params::{LayerParams, ParamSet};
use crate::tensor::{Scalar, Tensor};
use crate::threads::Parallelism;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which statistics batchnorm uses during a tape-recording pass. Training
/// uses batch statistics; the data-free scoring pass runs on running stats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BnStats {
    Batch,
    Running,
}

// ---------------------------------------------------------------------------
// Conv
// ---------------------------------------------------------------------------

struct ConvDims {
    n: usize,
    ic: usize,
    h: usize,
    w: usize,
    oc: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

fn conv_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    d: &ConvDims,
    par: &Parallelism,
) -> Vec<T> {
    let mut out = vec![T::zero(); d.n * d.oc * d.oh * d.ow];
    let sample_in = d.ic * d.h * d.w;
    let sample_out = d.oc * d.oh * d.ow;
    par.for_chunks(&mut out, sample_out, |n, out_n| {
        let x_n = &x[n * sample_in..(n + 1) * sample_in];
        for oc in 0..d.oc {
            if let Some(b) = bias {
                let v = b[oc];
                for o in &mut out_n[oc * d.oh * d.ow..(oc + 1) * d.oh * d.ow] {
                    *o = v;
                }
            }
            for ic in 0..d.ic {
                for ky in 0..d.kh {
                    let w_row = &weight[((oc * d.ic + ic) * d.kh + ky) * d.kw..][..d.kw];
                    for oh in 0..d.oh {
                        let ih = (oh * d.stride + ky) as isize - d.pad as isize;
                        if ih < 0 || ih as usize >= d.h {
                            continue;
                        }
                        let x_row = &x_n[(ic * d.h + ih as usize) * d.w..][..d.w];
                        let out_row = &mut out_n[(oc * d.oh + oh) * d.ow..][..d.ow];
                        for (ow, o) in out_row.iter_mut().enumerate() {
                            let iw0 = (ow * d.stride) as isize - d.pad as isize;
                            let k_lo = (-iw0).max(0) as usize;
                            let k_hi = d.kw.min((d.w as isize - iw0).max(0) as usize);
                            if k_lo >= k_hi {
                                continue;
                            }
                            let xs = &x_row[(iw0 + k_lo as isize) as usize..][..k_hi - k_lo];
                            let ws = &w_row[k_lo..k_hi];
                            let mut acc = T::zero();
                            for (xv, wv) in xs.iter().zip(ws) {
                                acc += *xv * *wv;
                            }
                            *o += acc;
                        }
                    }
                }
            }
        }
    });
    out
}

fn conv_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    d: &ConvDims,
    has_bias: bool,
    par: &Parallelism,
) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
    let sample_in = d.ic * d.h * d.w;
    let sample_out = d.oc * d.oh * d.ow;

    // dX: scatter within each sample, parallel over samples.
    let mut dx = vec![T::zero(); d.n * sample_in];
    par.for_chunks(&mut dx, sample_in, |n, dx_n| {
        let dy_n = &dy[n * sample_out..(n + 1) * sample_out];
        for oc in 0..d.oc {
            for ic in 0..d.ic {
                for ky in 0..d.kh {
                    let w_row = &weight[((oc * d.ic + ic) * d.kh + ky) * d.kw..][..d.kw];
                    for oh in 0..d.oh {
                        let ih = (oh * d.stride + ky) as isize - d.pad as isize;
                        if ih < 0 || ih as usize >= d.h {
                            continue;
                        }
                        let dy_row = &dy_n[(oc * d.oh + oh) * d.ow..][..d.ow];
                        let dx_row = &mut dx_n[(ic * d.h + ih as usize) * d.w..][..d.w];
                        for (ow, g) in dy_row.iter().enumerate() {
                            let iw0 = (ow * d.stride) as isize - d.pad as isize;
                            let k_lo = (-iw0).max(0) as usize;
                            let k_hi = d.kw.min((d.w as isize - iw0).max(0) as usize);
                            if k_lo >= k_hi {
                                continue;
                            }
                            let dxs = &mut dx_row[(iw0 + k_lo as isize) as usize..][..k_hi - k_lo];
                            let ws = &w_row[k_lo..k_hi];
                            for (dv, wv) in dxs.iter_mut().zip(ws) {
                                *dv += *wv * *g;
                            }
                        }
                    }
                }
            }
        }
    });

    // dW: each output-channel slice owns its accumulation, samples in order.
    let mut dw = vec![T::zero(); d.oc * d.ic * d.kh * d.kw];
    let w_chunk = d.ic * d.kh * d.kw;
    par.for_chunks(&mut dw, w_chunk, |oc, dw_oc| {
        for n in 0..d.n {
            let x_n = &x[n * sample_in..(n + 1) * sample_in];
            let dy_n = &dy[n * sample_out..(n + 1) * sample_out];
            for ic in 0..d.ic {
                for ky in 0..d.kh {
                    let dw_row = &mut dw_oc[(ic * d.kh + ky) * d.kw..][..d.kw];
                    for oh in 0..d.oh {
                        let ih = (oh * d.stride + ky) as isize - d.pad as isize;
                        if ih < 0 || ih as usize >= d.h {
                            continue;
                        }
                        let x_row = &x_n[(ic * d.h + ih as usize) * d.w..][..d.w];
                        let dy_row = &dy_n[(oc * d.oh + oh) * d.ow..][..d.ow];
                        for (ow, g) in dy_row.iter().enumerate() {
                            let iw0 = (ow * d.stride) as isize - d.pad as isize;
                            let k_lo = (-iw0).max(0) as usize;
                            let k_hi = d.kw.min((d.w as isize - iw0).max(0) as usize);
                            if k_lo >= k_hi {
                                continue;
                            }
                            let xs = &x_row[(iw0 + k_lo as isize) as usize..][..k_hi - k_lo];
                            let dws = &mut dw_row[k_lo..k_hi];
                            for (dv, xv) in dws.iter_mut().zip(xs) {
                                *dv += *xv * *g;
                            }
                        }
                    }
                }
            }
        }
    });

    let db = has_bias.then(|| {
        let mut db = vec![T::zero(); d.oc];
        for n in 0..d.n {
            let dy_n = &dy[n * sample_out..(n + 1) * sample_out];
            for (oc, dbv) in db.iter_mut().enumerate() {
                for g in &dy_n[oc * d.oh * d.ow..(oc + 1) * d.oh * d.ow] {
                    *dbv += *g;
                }
            }
        }
        db
    });

    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

fn dense_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    n: usize,
    in_dim: usize,
    out_dim: usize,
    par: &Parallelism,
) -> Vec<T> {
    let mut out = vec![T::zero(); n * out_dim];
    par.for_chunks(&mut out, out_dim, |i, out_i| {
        let x_i = &x[i * in_dim..(i + 1) * in_dim];
        for (o, ov) in out_i.iter_mut().enumerate() {
            let w_row = &weight[o * in_dim..(o + 1) * in_dim];
            let mut acc = match bias {
                Some(b) => b[o],
                None => T::zero(),
            };
            for (xv, wv) in x_i.iter().zip(w_row) {
                acc += *xv * *wv;
            }
            *ov = acc;
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
fn dense_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    n: usize,
    in_dim: usize,
    out_dim: usize,
    has_bias: bool,
    par: &Parallelism,
) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
    let mut dx = vec![T::zero(); n * in_dim];
    par.for_chunks(&mut dx, in_dim, |i, dx_i| {
        let dy_i = &dy[i * out_dim..(i + 1) * out_dim];
        for (o, g) in dy_i.iter().enumerate() {
            let w_row = &weight[o * in_dim..(o + 1) * in_dim];
            for (dv, wv) in dx_i.iter_mut().zip(w_row) {
                *dv += *wv * *g;
            }
        }
    });

    let mut dw = vec![T::zero(); out_dim * in_dim];
    par.for_chunks(&mut dw, in_dim, |o, dw_row| {
        for i in 0..n {
            let g = dy[i * out_dim + o];
            let x_i = &x[i * in_dim..(i + 1) * in_dim];
            for (dv, xv) in dw_row.iter_mut().zip(x_i) {
                *dv += *xv * g;
            }
        }
    });

    let db = has_bias.then(|| {
        let mut db = vec![T::zero(); out_dim];
        for i in 0..n {
            for (o, dbv) in db.iter_mut().enumerate() {
                *dbv += dy[i * out_dim + o];
            }
        }
        db
    });

    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

enum TapeEntry<T> {
    None,
    Conv {
        input: Tensor<T>,
    },
    Dense {
        input: Tensor<T>,
    },
    Bn {
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        /// Present for batch-statistics passes; empty for running-stats ones.
        new_running_mean: Vec<T>,
        new_running_var: Vec<T>,
        batch_stats: bool,
    },
    Relu {
        input: Tensor<T>,
    },
    Pool {
        in_shape: Vec<usize>,
        argmax: Vec<u32>,
    },
    Flatten {
        in_shape: Vec<usize>,
    },
    Residual {
        body: Vec<TapeEntry<T>>,
        proj: Option<Box<TapeEntry<T>>>,
    },
}

/// A completed train-mode forward pass: logits plus everything backward needs.
pub struct ForwardPass<T> {
    pub logits: Tensor<T>,
    tape: Vec<TapeEntry<T>>,
}

fn chw(sig: Sig) -> (usize, usize, usize) {
    match sig {
        Sig::Chw(c, h, w) => (c, h, w),
        Sig::Flat(_) => unreachable!("validated architecture"),
    }
}

#[allow(clippy::too_many_arguments)]
fn layer_forward<T: Scalar>(
    spec: &LayerSpec,
    params: &LayerParams<T>,
    input: Tensor<T>,
    in_sig: Sig,
    mode: Mode,
    bn_stats: BnStats,
    par: &Parallelism,
    tape: Option<&mut Vec<TapeEntry<T>>>,
    path: &str,
) -> Result<Tensor<T>> {
    let n = input.shape()[0];
    let out_sig = spec.out_sig(in_sig)?;
    let out = match (spec, params) {
        (
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kh,
                kw,
                stride,
                pad,
                ..
            },
            LayerParams::Conv { weight, bias },
        ) => {
            let (_, h, w) = chw(in_sig);
            let (oc, oh, ow) = chw(out_sig);
            debug_assert_eq!(oc, *out_ch);
            let d = ConvDims {
                n,
                ic: *in_ch,
                h,
                w,
                oc,
                kh: *kh,
                kw: *kw,
                stride: *stride,
                pad: *pad,
                oh,
                ow,
            };
            let data = conv_forward(
                input.data(),
                weight.data(),
                bias.as_ref().map(|b| b.data()),
                &d,
                par,
            );
            let out = Tensor::from_vec(&[n, oc, oh, ow], data)?;
            if let Some(t) = tape {
                t.push(TapeEntry::Conv { input });
            }
            out
        }
        (
            LayerSpec::Dense {
                in_dim, out_dim, ..
            },
            LayerParams::Dense { weight, bias },
        ) => {
            let data = dense_forward(
                input.data(),
                weight.data(),
                bias.as_ref().map(|b| b.data()),
                n,
                *in_dim,
                *out_dim,
                par,
            );
            let out = Tensor::from_vec(&[n, *out_dim], data)?;
            if let Some(t) = tape {
                t.push(TapeEntry::Dense { input });
            }
            out
        }
        (
            LayerSpec::BatchNorm { ch, eps, momentum },
            LayerParams::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            },
        ) => {
            let (c, h, w) = chw(in_sig);
            debug_assert_eq!(c, *ch);
            let hw = h * w;
            let x = input.data();
            let eps_t = T::of_f64(*eps);
            match mode {
                Mode::Eval => {
                    let mut out = vec![T::zero(); x.len()];
                    let g = gamma.data();
                    let b = beta.data();
                    let rm = running_mean.data();
                    let rv = running_var.data();
                    let mut scale = vec![T::zero(); c];
                    let mut shift = vec![T::zero(); c];
                    for ch_i in 0..c {
                        let inv = T::one() / (rv[ch_i] + eps_t).sqrt();
                        scale[ch_i] = g[ch_i] * inv;
                        shift[ch_i] = b[ch_i] - rm[ch_i] * scale[ch_i];
                    }
                    for i in 0..n {
                        for ch_i in 0..c {
                            let base = (i * c + ch_i) * hw;
                            let (sc, sh) = (scale[ch_i], shift[ch_i]);
                            for (o, v) in out[base..base + hw].iter_mut().zip(&x[base..base + hw])
                            {
                                *o = *v * sc + sh;
                            }
                        }
                    }
                    Tensor::from_vec(input.shape(), out)?
                }
                Mode::Train if bn_stats == BnStats::Running => {
                    // Running statistics with a tape, used by scoring passes.
                    let g = gamma.data();
                    let b = beta.data();
                    let rm = running_mean.data();
                    let rv = running_var.data();
                    let inv_std: Vec<T> = rv
                        .iter()
                        .map(|&v| T::one() / (v + eps_t).sqrt())
                        .collect();
                    let mut xhat = vec![T::zero(); x.len()];
                    let mut out = vec![T::zero(); x.len()];
                    for i in 0..n {
                        for ch_i in 0..c {
                            let base = (i * c + ch_i) * hw;
                            let (mu, is) = (rm[ch_i], inv_std[ch_i]);
                            let (gv, bv) = (g[ch_i], b[ch_i]);
                            for j in base..base + hw {
                                let xh = (x[j] - mu) * is;
                                xhat[j] = xh;
                                out[j] = gv * xh + bv;
                            }
                        }
                    }
                    let out = Tensor::from_vec(input.shape(), out)?;
                    if let Some(t) = tape {
                        t.push(TapeEntry::Bn {
                            xhat: Tensor::from_vec(input.shape(), xhat)?,
                            inv_std,
                            new_running_mean: Vec::new(),
                            new_running_var: Vec::new(),
                            batch_stats: false,
                        });
                    }
                    out
                }
                Mode::Train => {
                    let m = n * hw;
                    if m <= 1 {
                        return Err(Error::Config(
                            "batchnorm in train mode needs more than one value per channel".into(),
                        ));
                    }
                    let m_t = T::of_usize(m);
                    let mut mean = vec![T::zero(); c];
                    for i in 0..n {
                        for (ch_i, mv) in mean.iter_mut().enumerate() {
                            for v in &x[(i * c + ch_i) * hw..(i * c + ch_i + 1) * hw] {
                                *mv += *v;
                            }
                        }
                    }
                    for mv in &mut mean {
                        *mv /= m_t;
                    }
                    let mut var = vec![T::zero(); c];
                    for i in 0..n {
                        for (ch_i, vv) in var.iter_mut().enumerate() {
                            let mu = mean[ch_i];
                            for v in &x[(i * c + ch_i) * hw..(i * c + ch_i + 1) * hw] {
                                let dlt = *v - mu;
                                *vv += dlt * dlt;
                            }
                        }
                    }
                    for vv in &mut var {
                        *vv /= m_t;
                    }
                    let inv_std: Vec<T> =
                        var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
                    let mut xhat = vec![T::zero(); x.len()];
                    let mut out = vec![T::zero(); x.len()];
                    let g = gamma.data();
                    let b = beta.data();
                    for i in 0..n {
                        for ch_i in 0..c {
                            let base = (i * c + ch_i) * hw;
                            let (mu, is) = (mean[ch_i], inv_std[ch_i]);
                            let (gv, bv) = (g[ch_i], b[ch_i]);
                            for j in base..base + hw {
                                let xh = (x[j] - mu) * is;
                                xhat[j] = xh;
                                out[j] = gv * xh + bv;
                            }
                        }
                    }
                    // Unbiased variance feeds the running estimate.
                    let bessel = T::of_usize(m) / T::of_usize(m - 1);
                    let mom = T::of_f64(*momentum);
                    let keep = T::one() - mom;
                    let new_rm: Vec<T> = running_mean
                        .data()
                        .iter()
                        .zip(&mean)
                        .map(|(&r, &b)| keep * r + mom * b)
                        .collect();
                    let new_rv: Vec<T> = running_var
                        .data()
                        .iter()
                        .zip(&var)
                        .map(|(&r, &b)| keep * r + mom * b * bessel)
                        .collect();
                    let out = Tensor::from_vec(input.shape(), out)?;
                    if let Some(t) = tape {
                        t.push(TapeEntry::Bn {
                            xhat: Tensor::from_vec(input.shape(), xhat)?,
                            inv_std,
                            new_running_mean: new_rm,
                            new_running_var: new_rv,
                            batch_stats: true,
                        });
                    }
                    out
                }
            }
        }
        (LayerSpec::Relu, LayerParams::None) => {
            let out: Vec<T> = input
                .data()
                .iter()
                .map(|&v| if v > T::zero() { v } else { T::zero() })
                .collect();
            let out = Tensor::from_vec(input.shape(), out)?;
            if let Some(t) = tape {
                t.push(TapeEntry::Relu { input });
            }
            out
        }
        (LayerSpec::MaxPool { k, stride }, LayerParams::None) => {
            let (c, h, w) = chw(in_sig);
            let (_, oh, ow) = chw(out_sig);
            let x = input.data();
            let mut out = vec![T::zero(); n * c * oh * ow];
            let mut argmax = vec![0u32; n * c * oh * ow];
            for i in 0..n {
                for ch_i in 0..c {
                    let in_base = (i * c + ch_i) * h * w;
                    for py in 0..oh {
                        for px in 0..ow {
                            let mut best = T::neg_infinity();
                            let mut best_idx = 0usize;
                            for ky in 0..*k {
                                let iy = py * stride + ky;
                                for kx in 0..*k {
                                    let ix = px * stride + kx;
                                    let idx = in_base + iy * w + ix;
                                    // first maximum wins on ties
                                    if x[idx] > best {
                                        best = x[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            let o = ((i * c + ch_i) * oh + py) * ow + px;
                            out[o] = best;
                            argmax[o] = best_idx as u32;
                        }
                    }
                }
            }
            let out = Tensor::from_vec(&[n, c, oh, ow], out)?;
            if let Some(t) = tape {
                t.push(TapeEntry::Pool {
                    in_shape: input.shape().to_vec(),
                    argmax,
                });
            }
            out
        }
        (LayerSpec::Flatten, LayerParams::None) => {
            let in_shape = input.shape().to_vec();
            let flat = in_sig.elements();
            let out = input.reshaped(&[n, flat])?;
            if let Some(t) = tape {
                t.push(TapeEntry::Flatten { in_shape });
            }
            out
        }
        (LayerSpec::Residual { body, projection }, LayerParams::Residual { body: pb, projection: pp }) => {
            let mut body_tape = tape.is_some().then(Vec::new);
            let body_out = forward_seq(
                body,
                pb,
                input.clone(),
                in_sig,
                mode,
                bn_stats,
                par,
                body_tape.as_mut(),
                &format!("{path}.b"),
            )?;
            let mut proj_tape = None;
            let short =  match (projection, pp) {
                (Some(pspec), Some(pparams)) => {
                    let mut t = tape.is_some().then(Vec::new);
                    let o = layer_forward(
                        pspec,
                        pparams,
                        input,
                        in_sig,
                        mode,
                        bn_stats,
                        par,
                        t.as_mut(),
                        &format!("{path}.proj"),
                    )?;
                    proj_tape = t.map(|mut v| Box::new(v.pop().expect("projection tape entry")));
                    o
                }
                (None, None) => input,
                _ => {
                    return Err(Error::ShapeMismatch(format!(
                        "{path}: projection params do not match spec"
                    )))
                }
            };
            let mut data = body_out.into_data();
            for (o, s) in data.iter_mut().zip(short.data()) {
                *o += *s;
            }
            let out = Tensor::from_vec(short.shape(), data)?;
            if let Some(t) = tape {
                t.push(TapeEntry::Residual {
                    body: body_tape.expect("body tape recorded"),
                    proj: proj_tape,
                });
            }
            out
        }
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "{path}: parameters do not match layer kind"
            )))
        }
    };
    out.check_finite(path)?;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn forward_seq<T: Scalar>(
    layers: &[LayerSpec],
    params: &[LayerParams<T>],
    mut act: Tensor<T>,
    mut sig: Sig,
    mode: Mode,
    bn_stats: BnStats,
    par: &Parallelism,
    mut tape: Option<&mut Vec<TapeEntry<T>>>,
    path_prefix: &str,
) -> Result<Tensor<T>> {
    for (i, (spec, lp)) in layers.iter().zip(params).enumerate() {
        let path = format!("{path_prefix}{i:02}");
        act = layer_forward(
            spec,
            lp,
            act,
            sig,
            mode,
            bn_stats,
            par,
            tape.as_deref_mut(),
            &path,
        )?;
        sig = spec.out_sig(sig)?;
        // tape entries exist for every layer so backward can walk in lockstep
        if let Some(t) = tape.as_deref_mut() {
            if t.len() == i {
                t.push(TapeEntry::None);
            }
        }
    }
    Ok(act)
}

fn check_batch<T: Scalar>(arch: &ArchitectureSpec, batch: &Tensor<T>) -> Result<()> {
    let want = [batch.shape()[0], arch.input[0], arch.input[1], arch.input[2]];
    if batch.shape().len() != 4 || batch.shape() != want {
        return Err(Error::ShapeMismatch(format!(
            "batch shape {:?} does not match architecture input {:?}",
            batch.shape(),
            arch.input
        )));
    }
    batch.check_finite("input batch")
}

/// Inference forward pass: batchnorm uses running statistics.
pub fn forward_eval<T: Scalar>(
    arch: &ArchitectureSpec,
    params: &ParamSet<T>,
    batch: &Tensor<T>,
    par: &Parallelism,
) -> Result<Tensor<T>> {
    check_batch(arch, batch)?;
    params.matches_arch(arch)?;
    forward_seq(
        &arch.layers,
        &params.layers,
        batch.clone(),
        arch.input_sig(),
        Mode::Eval,
        BnStats::Running,
        par,
        None,
        "l",
    )
}

/// Train-mode forward pass; records the tape needed by [`ForwardPass::backward`]
/// and stages batchnorm running-stat updates.
pub fn forward_train<T: Scalar>(
    arch: &ArchitectureSpec,
    params: &ParamSet<T>,
    batch: &Tensor<T>,
    par: &Parallelism,
) -> Result<ForwardPass<T>> {
    check_batch(arch, batch)?;
    params.matches_arch(arch)?;
    let mut tape = Vec::with_capacity(arch.layers.len());
    let logits = forward_seq(
        &arch.layers,
        &params.layers,
        batch.clone(),
        arch.input_sig(),
        Mode::Train,
        BnStats::Batch,
        par,
        Some(&mut tape),
        "l",
    )?;
    Ok(ForwardPass { logits, tape })
}

/// Tape-recording pass with batchnorm on running statistics; used by the
/// data-free scoring pass, where batch statistics would be meaningless.
pub(crate) fn forward_tape_running_bn<T: Scalar>(
    arch: &ArchitectureSpec,
    params: &ParamSet<T>,
    batch: &Tensor<T>,
    par: &Parallelism,
) -> Result<ForwardPass<T>> {
    check_batch(arch, batch)?;
    params.matches_arch(arch)?;
    let mut tape = Vec::with_capacity(arch.layers.len());
    let logits = forward_seq(
        &arch.layers,
        &params.layers,
        batch.clone(),
        arch.input_sig(),
        Mode::Train,
        BnStats::Running,
        par,
        Some(&mut tape),
        "l",
    )?;
    Ok(ForwardPass { logits, tape })
}

/// Forward pass with the mode chosen at runtime. In train mode the staged
/// batchnorm running-stat updates are applied to `params` before returning.
pub fn forward<T: Scalar>(
    arch: &ArchitectureSpec,
    params: &mut ParamSet<T>,
    batch: &Tensor<T>,
    mode: Mode,
    par: &Parallelism,
) -> Result<Tensor<T>> {
    match mode {
        Mode::Eval => forward_eval(arch, params, batch, par),
        Mode::Train => {
            let pass = forward_train(arch, params, batch, par)?;
            pass.apply_bn_updates(params);
            Ok(pass.logits)
        }
    }
}

fn backward_seq<T: Scalar>(
    layers: &[LayerSpec],
    params: &[LayerParams<T>],
    grads: &mut [LayerParams<T>],
    tape: &[TapeEntry<T>],
    mut dy: Tensor<T>,
    par: &Parallelism,
) -> Result<Tensor<T>> {
    for i in (0..layers.len()).rev() {
        dy = layer_backward(&layers[i], &params[i], &mut grads[i], &tape[i], dy, par)?;
    }
    Ok(dy)
}

fn layer_backward<T: Scalar>(
    spec: &LayerSpec,
    params: &LayerParams<T>,
    grads: &mut LayerParams<T>,
    tape: &TapeEntry<T>,
    dy: Tensor<T>,
    par: &Parallelism,
) -> Result<Tensor<T>> {
    match (spec, params, grads, tape) {
        (
            LayerSpec::Conv2d {
                in_ch,
                kh,
                kw,
                stride,
                pad,
                ..
            },
            LayerParams::Conv { weight, bias },
            LayerParams::Conv {
                weight: gw,
                bias: gb,
            },
            TapeEntry::Conv { input },
        ) => {
            let n = input.shape()[0];
            let (h, w) = (input.shape()[2], input.shape()[3]);
            let (oc, oh, ow) = (dy.shape()[1], dy.shape()[2], dy.shape()[3]);
            let d = ConvDims {
                n,
                ic: *in_ch,
                h,
                w,
                oc,
                kh: *kh,
                kw: *kw,
                stride: *stride,
                pad: *pad,
                oh,
                ow,
            };
            let (dx, dw, db) =
                conv_backward(input.data(), weight.data(), dy.data(), &d, bias.is_some(), par);
            gw.data_mut().copy_from_slice(&dw);
            if let (Some(gb), Some(db)) = (gb.as_mut(), db) {
                gb.data_mut().copy_from_slice(&db);
            }
            Tensor::from_vec(input.shape(), dx)
        }
        (
            LayerSpec::Dense {
                in_dim, out_dim, ..
            },
            LayerParams::Dense { weight, bias },
            LayerParams::Dense {
                weight: gw,
                bias: gb,
            },
            TapeEntry::Dense { input },
        ) => {
            let n = input.shape()[0];
            let (dx, dw, db) = dense_backward(
                input.data(),
                weight.data(),
                dy.data(),
                n,
                *in_dim,
                *out_dim,
                bias.is_some(),
                par,
            );
            gw.data_mut().copy_from_slice(&dw);
            if let (Some(gb), Some(db)) = (gb.as_mut(), db) {
                gb.data_mut().copy_from_slice(&db);
            }
            Tensor::from_vec(input.shape(), dx)
        }
        (
            LayerSpec::BatchNorm { ch, .. },
            LayerParams::BatchNorm { gamma, .. },
            LayerParams::BatchNorm {
                gamma: gg,
                beta: gb,
                ..
            },
            TapeEntry::Bn {
                xhat,
                inv_std,
                batch_stats,
                ..
            },
        ) => {
            let shape = xhat.shape().to_vec();
            let n = shape[0];
            let c = *ch;
            let hw: usize = shape[2..].iter().product();
            let m_t = T::of_usize(n * hw);
            let xh = xhat.data();
            let dyd = dy.data();
            let mut s_dy = vec![T::zero(); c];
            let mut s_dy_xhat = vec![T::zero(); c];
            for i in 0..n {
                for ch_i in 0..c {
                    let base = (i * c + ch_i) * hw;
                    let (mut a, mut b) = (T::zero(), T::zero());
                    for j in base..base + hw {
                        a += dyd[j];
                        b += dyd[j] * xh[j];
                    }
                    s_dy[ch_i] += a;
                    s_dy_xhat[ch_i] += b;
                }
            }
            gg.data_mut().copy_from_slice(&s_dy_xhat);
            gb.data_mut().copy_from_slice(&s_dy);
            let g = gamma.data();
            let mut dx = vec![T::zero(); dyd.len()];
            for i in 0..n {
                for ch_i in 0..c {
                    let base = (i * c + ch_i) * hw;
                    let k = g[ch_i] * inv_std[ch_i];
                    if *batch_stats {
                        let mean_dy = s_dy[ch_i] / m_t;
                        let mean_dy_xhat = s_dy_xhat[ch_i] / m_t;
                        for j in base..base + hw {
                            dx[j] = k * (dyd[j] - mean_dy - xh[j] * mean_dy_xhat);
                        }
                    } else {
                        // fixed statistics: the normalization is affine in x
                        for j in base..base + hw {
                            dx[j] = k * dyd[j];
                        }
                    }
                }
            }
            Tensor::from_vec(&shape, dx)
        }
        (LayerSpec::Relu, LayerParams::None, LayerParams::None, TapeEntry::Relu { input }) => {
            let dx: Vec<T> = input
                .data()
                .iter()
                .zip(dy.data())
                .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                .collect();
            Tensor::from_vec(input.shape(), dx)
        }
        (
            LayerSpec::MaxPool { .. },
            LayerParams::None,
            LayerParams::None,
            TapeEntry::Pool { in_shape, argmax },
        ) => {
            let mut dx = vec![T::zero(); in_shape.iter().product()];
            for (g, &idx) in dy.data().iter().zip(argmax) {
                dx[idx as usize] += *g;
            }
            Tensor::from_vec(in_shape, dx)
        }
        (
            LayerSpec::Flatten,
            LayerParams::None,
            LayerParams::None,
            TapeEntry::Flatten { in_shape },
        ) => dy.reshaped(in_shape),
        (
            LayerSpec::Residual { body, projection },
            LayerParams::Residual { body: pb, projection: pp },
            LayerParams::Residual {
                body: gb,
                projection: gp,
            },
            TapeEntry::Residual {
                body: tb,
                proj: tp,
            },
        ) => {
            let dx_short = match (projection, pp, gp, tp) {
                (Some(ps), Some(ppar), Some(gpar), Some(tpe)) => {
                    layer_backward(ps, ppar, gpar, tpe, dy.clone(), par)?
                }
                (None, None, None, None) => dy.clone(),
                _ => {
                    return Err(Error::ShapeMismatch(
                        "residual projection structure mismatch in backward".into(),
                    ))
                }
            };
            let dx_body = backward_seq(body, pb, gb, tb, dy, par)?;
            let mut data = dx_body.into_data();
            for (a, b) in data.iter_mut().zip(dx_short.data()) {
                *a += *b;
            }
            Tensor::from_vec(dx_short.shape(), data)
        }
        _ => Err(Error::ShapeMismatch(
            "backward tape does not match layer structure".into(),
        )),
    }
}

impl<T: Scalar> ForwardPass<T> {
    /// Gradient of the scalar loss w.r.t. every trainable parameter, given
    /// the loss gradient w.r.t. the logits. Running statistics stay zero.
    pub fn backward(
        &self,
        arch: &ArchitectureSpec,
        params: &ParamSet<T>,
        upstream: &Tensor<T>,
        par: &Parallelism,
    ) -> Result<ParamSet<T>> {
        if upstream.shape() != self.logits.shape() {
            return Err(Error::ShapeMismatch(format!(
                "upstream gradient shape {:?} does not match logits {:?}",
                upstream.shape(),
                self.logits.shape()
            )));
        }
        let mut grads = ParamSet::zeros_like(arch)?;
        backward_seq(
            &arch.layers,
            &params.layers,
            &mut grads.layers,
            &self.tape,
            upstream.clone(),
            par,
        )?;
        grads.check_finite("gradients")?;
        Ok(grads)
    }

    /// Apply the staged batchnorm running-stat updates from this pass.
    pub fn apply_bn_updates(&self, params: &mut ParamSet<T>) {
        fn rec<T: Scalar>(tape: &[TapeEntry<T>], params: &mut [LayerParams<T>]) {
            for (t, p) in tape.iter().zip(params) {
                match (t, p) {
                    (
                        TapeEntry::Bn {
                            new_running_mean,
                            new_running_var,
                            batch_stats,
                            ..
                        },
                        LayerParams::BatchNorm {
                            running_mean,
                            running_var,
                            ..
                        },
                    ) => {
                        if *batch_stats {
                            running_mean.data_mut().copy_from_slice(new_running_mean);
                            running_var.data_mut().copy_from_slice(new_running_var);
                        }
                    }
                    (
                        TapeEntry::Residual { body, proj },
                        LayerParams::Residual {
                            body: pbody,
                            projection: pproj,
                        },
                    ) => {
                        rec(body, pbody);
                        if let (Some(tp), Some(pp)) = (proj, pproj) {
                            rec(std::slice::from_ref(tp), std::slice::from_mut(pp));
                        }
                    }
                    _ => {}
                }
            }
        }
        rec(&self.tape, &mut params.layers);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::LayerParams;
    use crate::presets;
    use crate::rng::stream;
    use rand::Rng;

    fn par() -> Parallelism {
        Parallelism::single()
    }

    fn random_batch<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
        let mut rng = stream(seed, &[0x77]);
        let data = (0..shape.iter().product::<usize>())
            .map(|_| T::of_f64(rng.gen::<f64>() * 2.0 - 1.0))
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    fn conv_arch(spec: LayerSpec, input: [usize; 3]) -> ArchitectureSpec {
        ArchitectureSpec {
            name: "t".into(),
            input,
            layers: vec![spec],
            notes: None,
        }
    }

    #[test]
    fn identity_one_by_one_conv_reproduces_input() {
        let arch = conv_arch(
            LayerSpec::Conv2d {
                in_ch: 2,
                out_ch: 2,
                kh: 1,
                kw: 1,
                stride: 1,
                pad: 0,
                bias: true,
            },
            [2, 5, 5],
        );
        let mut params = ParamSet::<f32>::zeros_like(&arch).unwrap();
        if let LayerParams::Conv { weight, .. } = &mut params.layers[0] {
            // w[oc][ic][0][0] = 1 when oc == ic
            weight.data_mut()[0] = 1.0;
            weight.data_mut()[3] = 1.0;
        }
        let batch = random_batch::<f32>(&[3, 2, 5, 5], 0);
        let out = forward_eval(&arch, &params, &batch, &par()).unwrap();
        assert_eq!(out.data(), batch.data());
    }

    #[test]
    fn conv_output_shape_matches_formula() {
        let arch = conv_arch(
            LayerSpec::Conv2d {
                in_ch: 3,
                out_ch: 64,
                kh: 3,
                kw: 3,
                stride: 1,
                pad: 1,
                bias: false,
            },
            [3, 32, 32],
        );
        let params = ParamSet::<f32>::init(&arch, 0).unwrap();
        let batch = random_batch::<f32>(&[1, 3, 32, 32], 1);
        let out = forward_eval(&arch, &params, &batch, &par()).unwrap();
        assert_eq!(out.shape(), &[1, 64, 32, 32]);
    }

    #[test]
    fn two_layer_dense_matches_matrix_oracle() {
        let arch = ArchitectureSpec {
            name: "mlp".into(),
            input: [4, 1, 1],
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_dim: 4,
                    out_dim: 3,
                    bias: true,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    in_dim: 3,
                    out_dim: 2,
                    bias: true,
                },
            ],
            notes: None,
        };
        let mut params = ParamSet::<f64>::zeros_like(&arch).unwrap();
        let w1: [[f64; 4]; 3] = [[0.5, -1.0, 2.0, 0.25], [1.5, 0.0, -0.5, 1.0], [-2.0, 1.0, 0.5, -0.25]];
        let b1 = [0.1, -0.2, 0.3];
        let w2: [[f64; 3]; 2] = [[1.0, -1.0, 0.5], [0.25, 2.0, -1.5]];
        let b2 = [-0.05, 0.15];
        if let LayerParams::Dense { weight, bias } = &mut params.layers[1] {
            weight.data_mut().copy_from_slice(&w1.concat());
            bias.as_mut().unwrap().data_mut().copy_from_slice(&b1);
        }
        if let LayerParams::Dense { weight, bias } = &mut params.layers[3] {
            weight.data_mut().copy_from_slice(&w2.concat());
            bias.as_mut().unwrap().data_mut().copy_from_slice(&b2);
        }
        let x = [0.3, -0.7, 1.2, 0.05];
        let batch = Tensor::from_vec(&[1, 4, 1, 1], x.to_vec()).unwrap();

        // independent oracle: straightforward matrix arithmetic
        let mut h = [0.0f64; 3];
        for o in 0..3 {
            h[o] = b1[o] + (0..4).map(|i| w1[o][i] * x[i]).sum::<f64>();
            h[o] = h[o].max(0.0);
        }
        let mut y = [0.0f64; 2];
        for o in 0..2 {
            y[o] = b2[o] + (0..3).map(|i| w2[o][i] * h[i]).sum::<f64>();
        }

        let out = forward_eval(&arch, &params, &batch, &par()).unwrap();
        for (a, b) in out.data().iter().zip(&y) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn bn_train_mode_normalizes_per_channel() {
        let arch = ArchitectureSpec {
            name: "bn".into(),
            input: [3, 5, 5],
            layers: vec![LayerSpec::BatchNorm {
                ch: 3,
                eps: 1e-5,
                momentum: 0.1,
            }],
            notes: None,
        };
        let params = ParamSet::<f64>::init(&arch, 0).unwrap();
        let batch = random_batch::<f64>(&[4, 3, 5, 5], 2);
        let pass = forward_train(&arch, &params, &batch, &par()).unwrap();
        let out = pass.logits.data();
        let hw = 25;
        for c in 0..3 {
            let mut vals = Vec::new();
            for n in 0..4 {
                vals.extend_from_slice(&out[(n * 3 + c) * hw..(n * 3 + c + 1) * hw]);
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-5, "channel {c} mean {m}");
            assert!((v - 1.0).abs() < 1e-4, "channel {c} var {v}");
        }
    }

    #[test]
    fn bn_running_stats_update_and_eval_uses_them() {
        let arch = ArchitectureSpec {
            name: "bn".into(),
            input: [2, 3, 3],
            layers: vec![LayerSpec::BatchNorm {
                ch: 2,
                eps: 1e-5,
                momentum: 0.1,
            }],
            notes: None,
        };
        let mut params = ParamSet::<f64>::init(&arch, 0).unwrap();
        let batch = random_batch::<f64>(&[4, 2, 3, 3], 3);
        let pass = forward_train(&arch, &params, &batch, &par()).unwrap();
        let before = params.clone();
        pass.apply_bn_updates(&mut params);
        assert_ne!(before, params);
        // eval output now differs from train output on the same batch
        let eval_out = forward_eval(&arch, &params, &batch, &par()).unwrap();
        assert_ne!(eval_out.data(), pass.logits.data());
    }

    #[test]
    fn dense_weight_grad_is_upstream_outer_input() {
        let arch = ArchitectureSpec {
            name: "lin".into(),
            input: [3, 1, 1],
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_dim: 3,
                    out_dim: 2,
                    bias: true,
                },
            ],
            notes: None,
        };
        let params = ParamSet::<f64>::init(&arch, 1).unwrap();
        let x = [0.5, -1.5, 2.0];
        let g = [0.3, -0.8];
        let batch = Tensor::from_vec(&[1, 3, 1, 1], x.to_vec()).unwrap();
        let pass = forward_train(&arch, &params, &batch, &par()).unwrap();
        let upstream = Tensor::from_vec(&[1, 2], g.to_vec()).unwrap();
        let grads = pass.backward(&arch, &params, &upstream, &par()).unwrap();
        if let LayerParams::Dense { weight, bias } = &grads.layers[1] {
            for o in 0..2 {
                for i in 0..3 {
                    assert!((weight.data()[o * 3 + i] - g[o] * x[i]).abs() < 1e-12);
                }
                assert!((bias.as_ref().unwrap().data()[o] - g[o]).abs() < 1e-12);
            }
        } else {
            panic!("dense grads expected");
        }
    }

    #[test]
    fn relu_blocks_gradient_at_negative_preactivation() {
        let arch = ArchitectureSpec {
            name: "relu".into(),
            input: [2, 1, 1],
            layers: vec![LayerSpec::Flatten, LayerSpec::Relu],
            notes: None,
        };
        let params = ParamSet::<f64>::zeros_like(&arch).unwrap();
        let batch = Tensor::from_vec(&[1, 2, 1, 1], vec![-0.5, 0.5]).unwrap();
        let pass = forward_train(&arch, &params, &batch, &par()).unwrap();
        assert_eq!(pass.logits.data(), &[0.0, 0.5]);
    }

    #[test]
    fn relu_dead_zone_zeroes_upstream_weight_gradient() {
        // dense -> relu -> dense; the first unit's pre-activation is negative,
        // so the first row of the leading dense weight gets zero gradient.
        let arch = ArchitectureSpec {
            name: "deadzone".into(),
            input: [2, 1, 1],
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_dim: 2,
                    out_dim: 2,
                    bias: false,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    in_dim: 2,
                    out_dim: 1,
                    bias: false,
                },
            ],
            notes: None,
        };
        let mut params = ParamSet::<f64>::zeros_like(&arch).unwrap();
        if let LayerParams::Dense { weight, .. } = &mut params.layers[1] {
            weight
                .data_mut()
                .copy_from_slice(&[-1.0, -1.0, 1.0, 1.0]); // unit 0 negative on positive input
        }
        if let LayerParams::Dense { weight, .. } = &mut params.layers[3] {
            weight.data_mut().copy_from_slice(&[1.0, 1.0]);
        }
        let batch = Tensor::from_vec(&[1, 2, 1, 1], vec![0.5, 0.5]).unwrap();
        let pass = forward_train(&arch, &params, &batch, &par()).unwrap();
        let upstream = Tensor::from_vec(&[1, 1], vec![1.0]).unwrap();
        let grads = pass.backward(&arch, &params, &upstream, &par()).unwrap();
        if let LayerParams::Dense { weight, .. } = &grads.layers[1] {
            assert_eq!(&weight.data()[..2], &[0.0, 0.0]); // dead unit
            assert!(weight.data()[2] != 0.0 && weight.data()[3] != 0.0);
        } else {
            panic!("dense grads expected");
        }
    }

    #[test]
    fn maxpool_ties_route_gradient_to_first_index() {
        // conv(2ch -> 1ch, 1x1) feeds a 2x2 pool whose window has a tie in
        // the pooled channel; the conv weight gradient on channel 1 reveals
        // which position received the pool gradient.
        let arch = ArchitectureSpec {
            name: "pool".into(),
            input: [2, 2, 2],
            layers: vec![
                LayerSpec::Conv2d {
                    in_ch: 2,
                    out_ch: 1,
                    kh: 1,
                    kw: 1,
                    stride: 1,
                    pad: 0,
                    bias: false,
                },
                LayerSpec::MaxPool { k: 2, stride: 2 },
            ],
            notes: None,
        };
        let mut params = ParamSet::<f64>::zeros_like(&arch).unwrap();
        if let LayerParams::Conv { weight, .. } = &mut params.layers[0] {
            weight.data_mut()[0] = 1.0; // channel 0 passes through, channel 1 ignored
        }
        let batch = Tensor::from_vec(
            &[1, 2, 2, 2],
            vec![5.0, 5.0, 3.0, 1.0, 10.0, 20.0, 30.0, 40.0],
        )
        .unwrap();
        let pass = forward_train(&arch, &params, &batch, &par()).unwrap();
        assert_eq!(pass.logits.data(), &[5.0]);
        let upstream = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let grads = pass.backward(&arch, &params, &upstream, &par()).unwrap();
        if let LayerParams::Conv { weight, .. } = &grads.layers[0] {
            // routed to flat index 0 (the first of the tied 5.0s), where
            // channel 1 holds 10.0
            assert_eq!(weight.data(), &[5.0, 10.0]);
        } else {
            panic!("conv grads expected");
        }
    }

    #[test]
    fn forward_rejects_non_finite_parameters() {
        let arch = conv_arch(
            LayerSpec::Conv2d {
                in_ch: 1,
                out_ch: 1,
                kh: 1,
                kw: 1,
                stride: 1,
                pad: 0,
                bias: false,
            },
            [1, 2, 2],
        );
        let mut params = ParamSet::<f32>::init(&arch, 0).unwrap();
        params.visit_mut(&mut |_, _, t| t.data_mut()[0] = f32::NAN);
        let batch = random_batch::<f32>(&[1, 1, 2, 2], 5);
        let err = forward_eval(&arch, &params, &batch, &par()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn batch_shape_mismatch_is_rejected() {
        let arch = presets::mini_vgg(3, 12, 10);
        let params = ParamSet::<f32>::init(&arch, 0).unwrap();
        let batch = random_batch::<f32>(&[2, 3, 10, 10], 6);
        assert!(forward_eval(&arch, &params, &batch, &par()).is_err());
    }

    #[test]
    fn residual_forward_and_backward_run_with_projection() {
        let arch = presets::tiny_resnet(3, 8, 4);
        let params = ParamSet::<f64>::init(&arch, 0).unwrap();
        let batch = random_batch::<f64>(&[2, 3, 8, 8], 7);
        let pass = forward_train(&arch, &params, &batch, &par()).unwrap();
        assert_eq!(pass.logits.shape(), &[2, 4]);
        let upstream = Tensor::from_vec(&[2, 4], vec![0.25; 8]).unwrap();
        let grads = pass.backward(&arch, &params, &upstream, &par()).unwrap();
        let mut nonzero = 0usize;
        grads.visit(&mut |_, role, t| {
            if role.trainable() && t.data().iter().any(|v| *v != 0.0) {
                nonzero += 1;
            }
        });
        assert!(nonzero > 5, "gradients should reach most tensors");
    }

    #[test]
    fn forward_backward_bit_identical_across_runs_and_threads() {
        let arch = presets::mini_vgg(3, 12, 10);
        let params = ParamSet::<f32>::init(&arch, 9).unwrap();
        let batch = random_batch::<f32>(&[6, 3, 12, 12], 8);
        let upstream = Tensor::from_vec(&[6, 10], vec![0.1; 60]).unwrap();
        let run = |threads: usize| {
            let p = Parallelism { threads };
            let pass = forward_train(&arch, &params, &batch, &p).unwrap();
            let grads = pass.backward(&arch, &params, &upstream, &p).unwrap();
            let mut flat: Vec<u32> = Vec::new();
            grads.visit(&mut |_, _, t| flat.extend(t.data().iter().map(|v| v.to_bits())));
            (pass.logits.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), flat)
        };
        let a = run(1);
        let b = run(1);
        let c = run(3);
        assert_eq!(a, b);
        assert_eq!(a, c);
    }
}

#[cfg(test)]
mod mode_tests {
    use super::*;
    use crate::presets;

    #[test]
    fn mode_dispatching_forward_updates_running_stats_only_in_train() {
        let arch = presets::mini_vgg(1, 8, 3);
        let mut params = crate::params::ParamSet::<f32>::init(&arch, 0).unwrap();
        let batch = Tensor::from_vec(&[4, 1, 8, 8], vec![0.3; 4 * 64]).unwrap();
        let par = Parallelism::single();
        let before = params.clone();
        let eval_logits = forward(&arch, &mut params, &batch, Mode::Eval, &par).unwrap();
        assert_eq!(params, before, "eval must not touch parameters");
        let train_logits = forward(&arch, &mut params, &batch, Mode::Train, &par).unwrap();
        assert_ne!(params, before, "train mode updates running statistics");
        assert_eq!(eval_logits.shape(), train_logits.shape());
    }
}
