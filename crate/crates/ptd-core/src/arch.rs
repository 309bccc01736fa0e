//! Network architecture descriptions and static shape algebra.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

fn default_true() -> bool {
    true
}
fn default_bn_eps() -> f64 {
    DEFAULT_BN_EPS
}
fn default_bn_momentum() -> f64 {
    DEFAULT_BN_MOMENTUM
}

/// One layer of a feed-forward image classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kh: usize,
        kw: usize,
        #[serde(default = "crate::arch::one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    Dense {
        in_dim: usize,
        out_dim: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    BatchNorm {
        ch: usize,
        #[serde(default = "default_bn_eps")]
        eps: f64,
        #[serde(default = "default_bn_momentum")]
        momentum: f64,
    },
    Relu,
    MaxPool {
        k: usize,
        stride: usize,
    },
    Flatten,
    /// Residual block: `out = body(x) + shortcut(x)`. The shortcut is the
    /// identity when shapes already match, otherwise the 1x1 projection conv.
    Residual {
        body: Vec<LayerSpec>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        projection: Option<Box<LayerSpec>>,
    },
}

pub(crate) fn one() -> usize {
    1
}

/// Activation signature flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sig {
    Chw(usize, usize, usize),
    Flat(usize),
}

impl Sig {
    pub fn elements(&self) -> usize {
        match *self {
            Sig::Chw(c, h, w) => c * h * w,
            Sig::Flat(d) => d,
        }
    }
}

impl std::fmt::Display for Sig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            Sig::Chw(c, h, w) => write!(f, "{}x{}x{}", c, h, w),
            Sig::Flat(d) => write!(f, "flat {}", d),
        }
    }
}

pub fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return Err(Error::ShapeMismatch(format!(
            "kernel {} larger than padded input {}",
            k, padded
        )));
    }
    Ok((padded - k) / stride + 1)
}

impl LayerSpec {
    /// Static output signature of this layer for a given input signature.
    pub fn out_sig(&self, input: Sig) -> Result<Sig> {
        match self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kh,
                kw,
                stride,
                pad,
                ..
            } => {
                if *kh == 0 || *kw == 0 || *stride == 0 || *in_ch == 0 || *out_ch == 0 {
                    return Err(Error::Config(format!(
                        "conv dims must be positive: {:?}",
                        self
                    )));
                }
                match input {
                    Sig::Chw(c, h, w) if c == *in_ch => Ok(Sig::Chw(
                        *out_ch,
                        conv_out_extent(h, *kh, *stride, *pad)?,
                        conv_out_extent(w, *kw, *stride, *pad)?,
                    )),
                    other => Err(Error::ShapeMismatch(format!(
                        "conv expects {} input channels, got {}",
                        in_ch, other
                    ))),
                }
            }
            LayerSpec::Dense {
                in_dim, out_dim, ..
            } => {
                if *in_dim == 0 || *out_dim == 0 {
                    return Err(Error::Config("dense dims must be positive".into()));
                }
                match input {
                    Sig::Flat(d) if d == *in_dim => Ok(Sig::Flat(*out_dim)),
                    other => Err(Error::ShapeMismatch(format!(
                        "dense expects flat {} input, got {}",
                        in_dim, other
                    ))),
                }
            }
            LayerSpec::BatchNorm { ch, eps, .. } => {
                if *eps <= 0.0 {
                    return Err(Error::Config("batchnorm eps must be positive".into()));
                }
                match input {
                    Sig::Chw(c, ..) if c == *ch => Ok(input),
                    other => Err(Error::ShapeMismatch(format!(
                        "batchnorm expects {} channels, got {}",
                        ch, other
                    ))),
                }
            }
            LayerSpec::Relu => Ok(input),
            LayerSpec::MaxPool { k, stride } => {
                if *k == 0 || *stride == 0 {
                    return Err(Error::Config("maxpool k and stride must be >= 1".into()));
                }
                match input {
                    Sig::Chw(c, h, w) => {
                        if h < *k || w < *k {
                            return Err(Error::ShapeMismatch(format!(
                                "maxpool window {} larger than input {}x{}",
                                k, h, w
                            )));
                        }
                        Ok(Sig::Chw(c, (h - k) / stride + 1, (w - k) / stride + 1))
                    }
                    other => Err(Error::ShapeMismatch(format!(
                        "maxpool expects image input, got {}",
                        other
                    ))),
                }
            }
            LayerSpec::Flatten => Ok(Sig::Flat(input.elements())),
            LayerSpec::Residual { body, projection } => {
                let mut sig = input;
                for l in body {
                    sig = l.out_sig(sig)?;
                }
                let short = match projection {
                    Some(p) => match p.as_ref() {
                        LayerSpec::Conv2d { kh: 1, kw: 1, .. } => p.out_sig(input)?,
                        other => {
                            return Err(Error::Config(format!(
                                "residual projection must be a 1x1 conv, got {:?}",
                                other
                            )))
                        }
                    },
                    None => input,
                };
                if short != sig {
                    return Err(Error::ShapeMismatch(format!(
                        "residual branches disagree: body {} vs shortcut {}",
                        sig, short
                    )));
                }
                Ok(sig)
            }
        }
    }
}

/// Ordered layer stack plus the input image signature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub name: String,
    /// Input as `[channels, height, width]`.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

impl ArchitectureSpec {
    pub fn input_sig(&self) -> Sig {
        Sig::Chw(self.input[0], self.input[1], self.input[2])
    }

    /// Validate layer chaining and return the output signature.
    pub fn validate(&self) -> Result<Sig> {
        if self.input.contains(&0) {
            return Err(Error::Config("input dims must be positive".into()));
        }
        let mut sig = self.input_sig();
        for (i, l) in self.layers.iter().enumerate() {
            sig = l.out_sig(sig).map_err(|e| {
                Error::ShapeMismatch(format!("layer {} ({:?}): {}", i, kind_name(l), e))
            })?;
        }
        Ok(sig)
    }

    /// Per-layer output signatures, in layer order.
    pub fn layer_sigs(&self) -> Result<Vec<Sig>> {
        let mut sig = self.input_sig();
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            sig = l.out_sig(sig)?;
            out.push(sig);
        }
        Ok(out)
    }

    /// Class count, taken from the final dense layer.
    pub fn num_classes(&self) -> Result<usize> {
        match self.layers.last() {
            Some(LayerSpec::Dense { out_dim, .. }) => Ok(*out_dim),
            _ => Err(Error::Config(format!(
                "architecture {} does not end in a dense classifier",
                self.name
            ))),
        }
    }
}

pub(crate) fn kind_name(l: &LayerSpec) -> &'static str {
    match l {
        LayerSpec::Conv2d { .. } => "conv2d",
        LayerSpec::Dense { .. } => "dense",
        LayerSpec::BatchNorm { .. } => "batchnorm",
        LayerSpec::Relu => "relu",
        LayerSpec::MaxPool { .. } => "maxpool",
        LayerSpec::Flatten => "flatten",
        LayerSpec::Residual { .. } => "residual",
    }
}

fn round_width(v: f64) -> usize {
    (v.round() as usize).max(1)
}

/// Multiply every hidden channel/feature width by `factor` (rounded to the
/// nearest integer, floor 1). Input channels and the class count are kept.
pub fn scale_channels(arch: &ArchitectureSpec, factor: f64) -> Result<ArchitectureSpec> {
    if !(factor > 0.0) {
        return Err(Error::Config(format!(
            "scale factor must be > 0, got {}",
            factor
        )));
    }
    arch.validate()?;
    let last_dense = arch
        .layers
        .iter()
        .rposition(|l| matches!(l, LayerSpec::Dense { .. }));

    // Walk the original and scaled signatures side by side.
    fn walk(
        layers: &[LayerSpec],
        mut orig: Sig,
        mut scaled: Sig,
        factor: f64,
        last_dense: Option<usize>,
        base_index: &mut usize,
    ) -> Result<(Vec<LayerSpec>, Sig, Sig)> {
        let mut out = Vec::with_capacity(layers.len());
        for l in layers {
            let idx = *base_index;
            *base_index += 1;
            let new = match l {
                LayerSpec::Conv2d {
                    out_ch,
                    kh,
                    kw,
                    stride,
                    pad,
                    bias,
                    ..
                } => {
                    let in_ch = match scaled {
                        Sig::Chw(c, ..) => c,
                        _ => unreachable!("validated arch"),
                    };
                    LayerSpec::Conv2d {
                        in_ch,
                        out_ch: round_width(*out_ch as f64 * factor),
                        kh: *kh,
                        kw: *kw,
                        stride: *stride,
                        pad: *pad,
                        bias: *bias,
                    }
                }
                LayerSpec::Dense { out_dim, bias, .. } => {
                    let in_dim = match scaled {
                        Sig::Flat(d) => d,
                        _ => unreachable!("validated arch"),
                    };
                    let out_dim = if Some(idx) == last_dense {
                        *out_dim
                    } else {
                        round_width(*out_dim as f64 * factor)
                    };
                    LayerSpec::Dense {
                        in_dim,
                        out_dim,
                        bias: *bias,
                    }
                }
                LayerSpec::BatchNorm { eps, momentum, .. } => {
                    let ch = match scaled {
                        Sig::Chw(c, ..) => c,
                        _ => unreachable!("validated arch"),
                    };
                    LayerSpec::BatchNorm {
                        ch,
                        eps: *eps,
                        momentum: *momentum,
                    }
                }
                LayerSpec::Relu => LayerSpec::Relu,
                LayerSpec::MaxPool { k, stride } => LayerSpec::MaxPool {
                    k: *k,
                    stride: *stride,
                },
                LayerSpec::Flatten => LayerSpec::Flatten,
                LayerSpec::Residual { body, projection } => {
                    let (new_body, body_orig, body_scaled) =
                        walk(body, orig, scaled, factor, last_dense, base_index)?;
                    let _ = body_orig;
                    let new_proj = match projection {
                        Some(p) => {
                            let (in_c, out_c) = match (scaled, body_scaled) {
                                (Sig::Chw(ci, ..), Sig::Chw(co, ..)) => (ci, co),
                                _ => unreachable!("validated arch"),
                            };
                            match p.as_ref() {
                                LayerSpec::Conv2d {
                                    stride, pad, bias, ..
                                } => Some(Box::new(LayerSpec::Conv2d {
                                    in_ch: in_c,
                                    out_ch: out_c,
                                    kh: 1,
                                    kw: 1,
                                    stride: *stride,
                                    pad: *pad,
                                    bias: *bias,
                                })),
                                _ => unreachable!("validated arch"),
                            }
                        }
                        None => None,
                    };
                    let new = LayerSpec::Residual {
                        body: new_body,
                        projection: new_proj,
                    };
                    orig = l.out_sig(orig)?;
                    scaled = new.out_sig(scaled)?;
                    out.push(new);
                    continue;
                }
            };
            orig = l.out_sig(orig)?;
            scaled = new.out_sig(scaled)?;
            out.push(new);
        }
        Ok((out, orig, scaled))
    }

    let mut counter = 0usize;
    let (layers, _, _) = walk(
        &arch.layers,
        arch.input_sig(),
        arch.input_sig(),
        factor,
        last_dense,
        &mut counter,
    )?;
    let scaled = ArchitectureSpec {
        name: format!("{}-x{}", arch.name, factor),
        input: arch.input,
        layers,
        notes: arch.notes.clone(),
    };
    scaled.validate()?;
    Ok(scaled)
}
