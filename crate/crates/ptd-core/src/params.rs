//! Per-layer parameter storage aligned with an [`ArchitectureSpec`].

use crate::arch::{ArchitectureSpec, LayerSpec};
use crate::error::{Error, Result};
use crate::rng::{stream, STREAM_INIT};
use crate::tensor::{Scalar, Tensor};
use rand_distr::{Distribution, Normal};

/// Role of a named parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    ConvWeight,
    DenseWeight,
    Bias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
}

impl TensorRole {
    /// Conv kernels and dense matrices are the prunable set; biases and
    /// batchnorm parameters are always kept.
    pub fn prunable(self) -> bool {
        matches!(self, TensorRole::ConvWeight | TensorRole::DenseWeight)
    }

    /// Running statistics are updated by forward passes, not by the optimizer.
    pub fn trainable(self) -> bool {
        !matches!(self, TensorRole::BnRunningMean | TensorRole::BnRunningVar)
    }

    /// Parameters exempt from weight decay when the exemption flag is on.
    pub fn decay_exempt_class(self) -> bool {
        matches!(self, TensorRole::Bias | TensorRole::BnGamma | TensorRole::BnBeta)
    }

    pub fn suffix(self) -> &'static str {
        match self {
            TensorRole::ConvWeight | TensorRole::DenseWeight => "weight",
            TensorRole::Bias => "bias",
            TensorRole::BnGamma => "gamma",
            TensorRole::BnBeta => "beta",
            TensorRole::BnRunningMean => "running_mean",
            TensorRole::BnRunningVar => "running_var",
        }
    }
}

/// Parameters of a single layer; mirrors the corresponding [`LayerSpec`].
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams<T> {
    None,
    Conv {
        /// `out_ch x in_ch x kh x kw`
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
    },
    Dense {
        /// `out x in`
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
    },
    BatchNorm {
        gamma: Tensor<T>,
        beta: Tensor<T>,
        running_mean: Tensor<T>,
        running_var: Tensor<T>,
    },
    Residual {
        body: Vec<LayerParams<T>>,
        projection: Option<Box<LayerParams<T>>>,
    },
}

/// All parameters of a network, one entry per layer of the owning spec.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub layers: Vec<LayerParams<T>>,
}

fn init_layer<T: Scalar>(
    spec: &LayerSpec,
    rng: &mut rand_chacha::ChaCha8Rng,
    zero: bool,
) -> LayerParams<T> {
    let mut normal = |fan_in: usize, n: usize| -> Tensor<T> {
        if zero {
            return Tensor::zeros(&[n]);
        }
        let dist = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        let data: Vec<T> = (0..n).map(|_| T::of_f64(dist.sample(rng))).collect();
        Tensor::from_vec(&[n], data).expect("length matches")
    };
    match spec {
        LayerSpec::Conv2d {
            in_ch,
            out_ch,
            kh,
            kw,
            bias,
            ..
        } => {
            let fan_in = in_ch * kh * kw;
            let weight = normal(fan_in, out_ch * in_ch * kh * kw)
                .reshaped(&[*out_ch, *in_ch, *kh, *kw])
                .expect("conv weight shape");
            LayerParams::Conv {
                weight,
                bias: bias.then(|| Tensor::zeros(&[*out_ch])),
            }
        }
        LayerSpec::Dense {
            in_dim,
            out_dim,
            bias,
        } => {
            let weight = normal(*in_dim, out_dim * in_dim)
                .reshaped(&[*out_dim, *in_dim])
                .expect("dense weight shape");
            LayerParams::Dense {
                weight,
                bias: bias.then(|| Tensor::zeros(&[*out_dim])),
            }
        }
        LayerSpec::BatchNorm { ch, .. } => LayerParams::BatchNorm {
            gamma: Tensor::from_vec(&[*ch], vec![if zero { T::zero() } else { T::one() }; *ch])
                .expect("bn gamma"),
            beta: Tensor::zeros(&[*ch]),
            running_mean: Tensor::zeros(&[*ch]),
            running_var: Tensor::from_vec(&[*ch], vec![if zero { T::zero() } else { T::one() }; *ch])
                .expect("bn var"),
        },
        LayerSpec::Relu | LayerSpec::MaxPool { .. } | LayerSpec::Flatten => LayerParams::None,
        LayerSpec::Residual { body, projection } => LayerParams::Residual {
            body: body.iter().map(|l| init_layer(l, rng, zero)).collect(),
            projection: projection
                .as_ref()
                .map(|p| Box::new(init_layer(p, rng, zero))),
        },
    }
}

impl<T: Scalar> ParamSet<T> {
    /// He-style initialization: weights ~ Normal(0, sqrt(2/fan_in)), biases 0,
    /// batchnorm scale 1 / shift 0 / running stats (0, 1).
    pub fn init(arch: &ArchitectureSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = stream(seed, &[STREAM_INIT]);
        Ok(ParamSet {
            layers: arch
                .layers
                .iter()
                .map(|l| init_layer(l, &mut rng, false))
                .collect(),
        })
    }

    /// Same structure with every tensor zeroed (gradient / velocity buffers).
    pub fn zeros_like(arch: &ArchitectureSpec) -> Result<Self> {
        arch.validate()?;
        let mut rng = stream(0, &[STREAM_INIT]);
        Ok(ParamSet {
            layers: arch
                .layers
                .iter()
                .map(|l| init_layer(l, &mut rng, true))
                .collect(),
        })
    }

    /// Visit every tensor as `(path, role, tensor)` in canonical order.
    pub fn visit(&self, f: &mut impl FnMut(&str, TensorRole, &Tensor<T>)) {
        fn rec<T: Scalar>(
            lp: &LayerParams<T>,
            path: &str,
            f: &mut impl FnMut(&str, TensorRole, &Tensor<T>),
        ) {
            match lp {
                LayerParams::None => {}
                LayerParams::Conv { weight, bias } => {
                    f(&format!("{path}.weight"), TensorRole::ConvWeight, weight);
                    if let Some(b) = bias {
                        f(&format!("{path}.bias"), TensorRole::Bias, b);
                    }
                }
                LayerParams::Dense { weight, bias } => {
                    f(&format!("{path}.weight"), TensorRole::DenseWeight, weight);
                    if let Some(b) = bias {
                        f(&format!("{path}.bias"), TensorRole::Bias, b);
                    }
                }
                LayerParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    f(&format!("{path}.gamma"), TensorRole::BnGamma, gamma);
                    f(&format!("{path}.beta"), TensorRole::BnBeta, beta);
                    f(
                        &format!("{path}.running_mean"),
                        TensorRole::BnRunningMean,
                        running_mean,
                    );
                    f(
                        &format!("{path}.running_var"),
                        TensorRole::BnRunningVar,
                        running_var,
                    );
                }
                LayerParams::Residual { body, projection } => {
                    for (i, b) in body.iter().enumerate() {
                        rec(b, &format!("{path}.b{i:02}"), f);
                    }
                    if let Some(p) = projection {
                        rec(p, &format!("{path}.proj"), f);
                    }
                }
            }
        }
        for (i, lp) in self.layers.iter().enumerate() {
            rec(lp, &format!("l{i:02}"), &mut |p, r, t| f(p, r, t));
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, TensorRole, &mut Tensor<T>)) {
        fn rec<T: Scalar>(
            lp: &mut LayerParams<T>,
            path: &str,
            f: &mut impl FnMut(&str, TensorRole, &mut Tensor<T>),
        ) {
            match lp {
                LayerParams::None => {}
                LayerParams::Conv { weight, bias } => {
                    f(&format!("{path}.weight"), TensorRole::ConvWeight, weight);
                    if let Some(b) = bias {
                        f(&format!("{path}.bias"), TensorRole::Bias, b);
                    }
                }
                LayerParams::Dense { weight, bias } => {
                    f(&format!("{path}.weight"), TensorRole::DenseWeight, weight);
                    if let Some(b) = bias {
                        f(&format!("{path}.bias"), TensorRole::Bias, b);
                    }
                }
                LayerParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    f(&format!("{path}.gamma"), TensorRole::BnGamma, gamma);
                    f(&format!("{path}.beta"), TensorRole::BnBeta, beta);
                    f(
                        &format!("{path}.running_mean"),
                        TensorRole::BnRunningMean,
                        running_mean,
                    );
                    f(
                        &format!("{path}.running_var"),
                        TensorRole::BnRunningVar,
                        running_var,
                    );
                }
                LayerParams::Residual { body, projection } => {
                    for (i, b) in body.iter_mut().enumerate() {
                        rec(b, &format!("{path}.b{i:02}"), f);
                    }
                    if let Some(p) = projection {
                        rec(p, &format!("{path}.proj"), f);
                    }
                }
            }
        }
        for (i, lp) in self.layers.iter_mut().enumerate() {
            rec(lp, &format!("l{i:02}"), &mut |p, r, t| f(p, r, t));
        }
    }

    /// Visit `(self, other, scratch)` tensors in lockstep, canonical order.
    /// All three sets must share one architecture.
    pub fn zip3_mut(
        &mut self,
        other: &ParamSet<T>,
        scratch: &mut ParamSet<T>,
        f: &mut impl FnMut(TensorRole, &mut Tensor<T>, &Tensor<T>, &mut Tensor<T>),
    ) {
        fn rec<T: Scalar>(
            a: &mut LayerParams<T>,
            b: &LayerParams<T>,
            c: &mut LayerParams<T>,
            f: &mut impl FnMut(TensorRole, &mut Tensor<T>, &Tensor<T>, &mut Tensor<T>),
        ) {
            match (a, b, c) {
                (LayerParams::None, LayerParams::None, LayerParams::None) => {}
                (
                    LayerParams::Conv { weight: aw, bias: ab },
                    LayerParams::Conv { weight: bw, bias: bb },
                    LayerParams::Conv { weight: cw, bias: cb },
                ) => {
                    f(TensorRole::ConvWeight, aw, bw, cw);
                    if let (Some(ab), Some(bb), Some(cb)) = (ab, bb, cb) {
                        f(TensorRole::Bias, ab, bb, cb);
                    }
                }
                (
                    LayerParams::Dense { weight: aw, bias: ab },
                    LayerParams::Dense { weight: bw, bias: bb },
                    LayerParams::Dense { weight: cw, bias: cb },
                ) => {
                    f(TensorRole::DenseWeight, aw, bw, cw);
                    if let (Some(ab), Some(bb), Some(cb)) = (ab, bb, cb) {
                        f(TensorRole::Bias, ab, bb, cb);
                    }
                }
                (
                    LayerParams::BatchNorm {
                        gamma: ag,
                        beta: abt,
                        running_mean: am,
                        running_var: av,
                    },
                    LayerParams::BatchNorm {
                        gamma: bg,
                        beta: bbt,
                        running_mean: bm,
                        running_var: bv,
                    },
                    LayerParams::BatchNorm {
                        gamma: cg,
                        beta: cbt,
                        running_mean: cm,
                        running_var: cv,
                    },
                ) => {
                    f(TensorRole::BnGamma, ag, bg, cg);
                    f(TensorRole::BnBeta, abt, bbt, cbt);
                    f(TensorRole::BnRunningMean, am, bm, cm);
                    f(TensorRole::BnRunningVar, av, bv, cv);
                }
                (
                    LayerParams::Residual { body: ab, projection: ap },
                    LayerParams::Residual { body: bb, projection: bp },
                    LayerParams::Residual { body: cb, projection: cp },
                ) => {
                    for ((x, y), z) in ab.iter_mut().zip(bb).zip(cb) {
                        rec(x, y, z, f);
                    }
                    if let (Some(x), Some(y), Some(z)) = (ap, bp, cp) {
                        rec(x, y, z, f);
                    }
                }
                _ => panic!("parameter sets structurally diverge"),
            }
        }
        for ((a, b), c) in self
            .layers
            .iter_mut()
            .zip(&other.layers)
            .zip(&mut scratch.layers)
        {
            rec(a, b, c, f);
        }
    }

    /// Flat list of `(path, role, shape)` in canonical order.
    pub fn manifest(&self) -> Vec<(String, TensorRole, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit(&mut |p, r, t| out.push((p.to_string(), r, t.shape().to_vec())));
        out
    }

    pub fn total_elements(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, t| n += t.len());
        n
    }

    /// Count of weights in the prunable set.
    pub fn prunable_elements(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, r, t| {
            if r.prunable() {
                n += t.len()
            }
        });
        n
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        let mut bad: Option<String> = None;
        self.visit(&mut |p, _, t| {
            if bad.is_none() && t.check_finite(p).is_err() {
                bad = Some(p.to_string());
            }
        });
        match bad {
            Some(p) => Err(Error::NonFinite {
                context: format!("{context}: {p}"),
            }),
            None => Ok(()),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        fn rec<T: Scalar, U: Scalar>(lp: &LayerParams<T>) -> LayerParams<U> {
            match lp {
                LayerParams::None => LayerParams::None,
                LayerParams::Conv { weight, bias } => LayerParams::Conv {
                    weight: weight.cast(),
                    bias: bias.as_ref().map(|b| b.cast()),
                },
                LayerParams::Dense { weight, bias } => LayerParams::Dense {
                    weight: weight.cast(),
                    bias: bias.as_ref().map(|b| b.cast()),
                },
                LayerParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => LayerParams::BatchNorm {
                    gamma: gamma.cast(),
                    beta: beta.cast(),
                    running_mean: running_mean.cast(),
                    running_var: running_var.cast(),
                },
                LayerParams::Residual { body, projection } => LayerParams::Residual {
                    body: body.iter().map(rec).collect(),
                    projection: projection.as_ref().map(|p| Box::new(rec(p))),
                },
            }
        }
        ParamSet {
            layers: self.layers.iter().map(rec).collect(),
        }
    }

    /// Check structural agreement with an architecture (entry kinds and shapes).
    pub fn matches_arch(&self, arch: &ArchitectureSpec) -> Result<()> {
        fn expect<T: Scalar>(spec: &LayerSpec, lp: &LayerParams<T>, path: &str) -> Result<()> {
            let fail = |msg: String| Err(Error::ShapeMismatch(format!("{path}: {msg}")));
            match (spec, lp) {
                (
                    LayerSpec::Conv2d {
                        in_ch,
                        out_ch,
                        kh,
                        kw,
                        bias,
                        ..
                    },
                    LayerParams::Conv { weight, bias: b },
                ) => {
                    if weight.shape() != [*out_ch, *in_ch, *kh, *kw] {
                        return fail(format!(
                            "conv weight shape {:?} != {:?}",
                            weight.shape(),
                            [*out_ch, *in_ch, *kh, *kw]
                        ));
                    }
                    if *bias != b.is_some() {
                        return fail("conv bias presence mismatch".into());
                    }
                    Ok(())
                }
                (
                    LayerSpec::Dense {
                        in_dim,
                        out_dim,
                        bias,
                    },
                    LayerParams::Dense { weight, bias: b },
                ) => {
                    if weight.shape() != [*out_dim, *in_dim] {
                        return fail(format!(
                            "dense weight shape {:?} != {:?}",
                            weight.shape(),
                            [*out_dim, *in_dim]
                        ));
                    }
                    if *bias != b.is_some() {
                        return fail("dense bias presence mismatch".into());
                    }
                    Ok(())
                }
                (LayerSpec::BatchNorm { ch, .. }, LayerParams::BatchNorm { gamma, .. }) => {
                    if gamma.shape() != [*ch] {
                        return fail(format!("bn width {:?} != {}", gamma.shape(), ch));
                    }
                    Ok(())
                }
                (
                    LayerSpec::Relu | LayerSpec::MaxPool { .. } | LayerSpec::Flatten,
                    LayerParams::None,
                ) => Ok(()),
                (
                    LayerSpec::Residual { body, projection },
                    LayerParams::Residual {
                        body: pbody,
                        projection: pproj,
                    },
                ) => {
                    if body.len() != pbody.len() || projection.is_some() != pproj.is_some() {
                        return fail("residual structure mismatch".into());
                    }
                    for (i, (s, p)) in body.iter().zip(pbody).enumerate() {
                        expect(s, p, &format!("{path}.b{i:02}"))?;
                    }
                    if let (Some(s), Some(p)) = (projection, pproj) {
                        expect(s, p, &format!("{path}.proj"))?;
                    }
                    Ok(())
                }
                _ => fail("layer kind mismatch".into()),
            }
        }
        if self.layers.len() != arch.layers.len() {
            return Err(Error::ShapeMismatch(format!(
                "parameter set has {} layers, architecture {} has {}",
                self.layers.len(),
                arch.name,
                arch.layers.len()
            )));
        }
        for (i, (spec, lp)) in arch.layers.iter().zip(&self.layers).enumerate() {
            expect(spec, lp, &format!("l{i:02}"))?;
        }
        Ok(())
    }
}
