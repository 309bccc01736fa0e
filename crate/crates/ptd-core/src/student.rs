//! Student architecture derivation and parameter/MAC accounting.
//!
//! The channel solver walks a pruned teacher's per-layer nonzero counts and
//! picks student widths `c_i = round(n_i / (A_i * c_{i-1}))` so each student
//! layer carries roughly as many weights as the pruned teacher layer kept.
//! The classifier is never solved; its width follows from the last conv.

use crate::arch::{ArchitectureSpec, LayerSpec, Sig};
use crate::checkpoint::MaskedCheckpoint;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

// ---------------------------------------------------------------------------
// Census
// ---------------------------------------------------------------------------

/// One prunable tensor of the teacher: identity, geometry, and how many of
/// its weights survived pruning.
#[derive(Debug, Clone, PartialEq)]
pub struct CensusRow {
    pub name: String,
    /// Kernel area `kh*kw` for convs, 1 for dense layers.
    pub kernel_area: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub nonzero: usize,
    /// Dense capacity of the layer (total weights before pruning).
    pub capacity: usize,
    pub is_classifier: bool,
}

/// Ordered nonzero-weight counts of a pruned model, one row per prunable
/// tensor in forward (canonical) order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCensus {
    pub rows: Vec<CensusRow>,
}

impl LayerCensus {
    pub fn total_nonzero(&self) -> usize {
        self.rows.iter().map(|r| r.nonzero).sum()
    }

    pub fn total_capacity(&self) -> usize {
        self.rows.iter().map(|r| r.capacity).sum()
    }

    /// Build a census from an architecture and per-row nonzero counts, in
    /// prunable-tensor order. Counts must not exceed layer capacity.
    pub fn from_counts(arch: &ArchitectureSpec, counts: &[usize]) -> Result<Self> {
        let geo = prunable_geometry(arch)?;
        if geo.len() != counts.len() {
            return Err(Error::Config(format!(
                "{} counts for {} prunable tensors",
                counts.len(),
                geo.len()
            )));
        }
        let rows = geo
            .into_iter()
            .zip(counts)
            .map(|(g, &n)| {
                if n > g.capacity {
                    return Err(Error::Config(format!(
                        "census count {} exceeds capacity {} of {}",
                        n, g.capacity, g.name
                    )));
                }
                Ok(CensusRow {
                    nonzero: n,
                    ..g
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LayerCensus { rows })
    }
}

fn prunable_geometry(arch: &ArchitectureSpec) -> Result<Vec<CensusRow>> {
    arch.validate()?;
    fn rec(layers: &[LayerSpec], out: &mut Vec<CensusRow>, prefix: &str, conv_no: &mut usize) {
        for (i, l) in layers.iter().enumerate() {
            match l {
                LayerSpec::Conv2d {
                    in_ch,
                    out_ch,
                    kh,
                    kw,
                    ..
                } => {
                    out.push(CensusRow {
                        name: format!("conv-{}", conv_no),
                        kernel_area: kh * kw,
                        in_ch: *in_ch,
                        out_ch: *out_ch,
                        nonzero: 0,
                        capacity: kh * kw * in_ch * out_ch,
                        is_classifier: false,
                    });
                    *conv_no += 1;
                }
                LayerSpec::Dense {
                    in_dim, out_dim, ..
                } => {
                    out.push(CensusRow {
                        name: "fc".to_string(),
                        kernel_area: 1,
                        in_ch: *in_dim,
                        out_ch: *out_dim,
                        nonzero: 0,
                        capacity: in_dim * out_dim,
                        is_classifier: true,
                    });
                }
                LayerSpec::Residual { body, projection } => {
                    rec(body, out, &format!("{prefix}r{i}."), conv_no);
                    if let Some(p) = projection {
                        if let LayerSpec::Conv2d {
                            in_ch,
                            out_ch,
                            kh,
                            kw,
                            ..
                        } = p.as_ref()
                        {
                            out.push(CensusRow {
                                name: format!("proj-{}", conv_no),
                                kernel_area: kh * kw,
                                in_ch: *in_ch,
                                out_ch: *out_ch,
                                nonzero: 0,
                                capacity: kh * kw * in_ch * out_ch,
                                is_classifier: false,
                            });
                        }
                    }
                }
                _ => {}
            }
        }
    }
    let mut rows = Vec::new();
    let mut conv_no = 0usize;
    rec(&arch.layers, &mut rows, "", &mut conv_no);
    Ok(rows)
}

/// Count surviving weights per prunable tensor of a masked checkpoint.
pub fn census<T: Scalar>(ckpt: &MaskedCheckpoint<T>) -> Result<LayerCensus> {
    ckpt.masks.matches(&ckpt.params)?;
    if ckpt.masks.entries().is_empty() {
        return Err(Error::Config("checkpoint has no masks".into()));
    }
    let counts: Vec<usize> = ckpt
        .masks
        .entries()
        .iter()
        .map(|(_, m)| m.iter().filter(|&&b| b).count())
        .collect();
    LayerCensus::from_counts(&ckpt.arch, &counts)
}

// ---------------------------------------------------------------------------
// Channel solver
// ---------------------------------------------------------------------------

/// One solved layer of a student plan.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanRow {
    pub name: String,
    pub kernel_area: usize,
    pub teacher_nonzero: usize,
    pub teacher_capacity: usize,
    pub channels: usize,
    pub student_weights: usize,
}

/// Derived student: solved channel widths, the resulting architecture, and
/// per-layer weight accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentPlan {
    pub channels: Vec<usize>,
    pub arch: ArchitectureSpec,
    pub rows: Vec<PlanRow>,
    pub total_weights: usize,
}

fn round_half_away(v: f64) -> usize {
    (v.round() as usize).max(1)
}

/// Solve student widths from a pruned teacher's census. Pooling, ReLU, and
/// batchnorm positions are copied; batchnorm widths follow the new channels;
/// residual blocks take one width from their final conv's solution, with a
/// projection added whenever the incoming width differs; the classifier width
/// is `c_last * spatial * classes`, never solved.
pub fn solve_student_channels(
    teacher_arch: &ArchitectureSpec,
    census: &LayerCensus,
) -> Result<StudentPlan> {
    teacher_arch.validate()?;
    let expected = prunable_geometry(teacher_arch)?;
    if expected.len() != census.rows.len() {
        return Err(Error::Config(format!(
            "census has {} rows, architecture has {} prunable tensors",
            census.rows.len(),
            expected.len()
        )));
    }
    for (e, r) in expected.iter().zip(&census.rows) {
        if e.kernel_area != r.kernel_area || e.capacity < r.nonzero {
            return Err(Error::Config(format!(
                "census row {} does not match teacher layer {}",
                r.name, e.name
            )));
        }
    }

    struct Walk<'a> {
        rows: &'a [CensusRow],
        next: usize,
        plan: Vec<PlanRow>,
        channels: Vec<usize>,
    }
    impl<'a> Walk<'a> {
        fn take(&mut self) -> &'a CensusRow {
            let r = &self.rows[self.next];
            self.next += 1;
            r
        }
    }

    fn solve_conv(
        spec: &LayerSpec,
        prev: usize,
        walk: &mut Walk<'_>,
        force_width: Option<usize>,
    ) -> Result<(LayerSpec, usize)> {
        let (kh, kw, stride, pad, bias) = match spec {
            LayerSpec::Conv2d {
                kh,
                kw,
                stride,
                pad,
                bias,
                ..
            } => (*kh, *kw, *stride, *pad, *bias),
            _ => unreachable!("conv expected"),
        };
        let row = walk.take();
        let area = kh * kw;
        let width = force_width
            .unwrap_or_else(|| round_half_away(row.nonzero as f64 / (area * prev) as f64));
        walk.plan.push(PlanRow {
            name: row.name.clone(),
            kernel_area: area,
            teacher_nonzero: row.nonzero,
            teacher_capacity: row.capacity,
            channels: width,
            student_weights: area * prev * width,
        });
        walk.channels.push(width);
        Ok((
            LayerSpec::Conv2d {
                in_ch: prev,
                out_ch: width,
                kh,
                kw,
                stride,
                pad,
                bias,
            },
            width,
        ))
    }

    let mut walk = Walk {
        rows: &census.rows,
        next: 0,
        plan: Vec::new(),
        channels: Vec::new(),
    };
    let mut layers = Vec::with_capacity(teacher_arch.layers.len());
    let mut prev = teacher_arch.input[0];
    let mut teacher_sig = teacher_arch.input_sig();
    let mut student_sig = teacher_arch.input_sig();
    let mut dense_seen = false;

    for spec in &teacher_arch.layers {
        if dense_seen {
            return Err(Error::Config(
                "layers after the dense classifier are not supported by the solver".into(),
            ));
        }
        let new = match spec {
            LayerSpec::Conv2d { .. } => {
                let (l, w) = solve_conv(spec, prev, &mut walk, None)?;
                prev = w;
                l
            }
            LayerSpec::BatchNorm { eps, momentum, .. } => LayerSpec::BatchNorm {
                ch: prev,
                eps: *eps,
                momentum: *momentum,
            },
            LayerSpec::Relu => LayerSpec::Relu,
            LayerSpec::MaxPool { k, stride } => LayerSpec::MaxPool {
                k: *k,
                stride: *stride,
            },
            LayerSpec::Flatten => LayerSpec::Flatten,
            LayerSpec::Dense { out_dim, bias, .. } => {
                dense_seen = true;
                let row = walk.take();
                if !row.is_classifier {
                    return Err(Error::Config(
                        "census rows do not line up with the classifier".into(),
                    ));
                }
                let in_dim = match student_sig {
                    Sig::Flat(d) => d,
                    _ => {
                        return Err(Error::Config(
                            "dense classifier must follow a flatten".into(),
                        ))
                    }
                };
                walk.plan.push(PlanRow {
                    name: row.name.clone(),
                    kernel_area: 1,
                    teacher_nonzero: row.nonzero,
                    teacher_capacity: row.capacity,
                    channels: *out_dim,
                    student_weights: in_dim * out_dim,
                });
                LayerSpec::Dense {
                    in_dim,
                    out_dim: *out_dim,
                    bias: *bias,
                }
            }
            LayerSpec::Residual { body, projection } => {
                // First pass: run the recurrence through the body convs to
                // find the block width (the final conv's solution).
                let mut probe = prev;
                let mut probe_next = walk.next;
                let mut last_solution = prev;
                for b in body {
                    if let LayerSpec::Conv2d { kh, kw, .. } = b {
                        let row = &census.rows[probe_next];
                        probe_next += 1;
                        last_solution =
                            round_half_away(row.nonzero as f64 / (kh * kw * probe) as f64);
                        probe = last_solution;
                    }
                }
                let block_width = last_solution;

                // Second pass: rebuild the body with one width everywhere.
                let mut new_body = Vec::with_capacity(body.len());
                let mut inner_prev = prev;
                for b in body {
                    let nl = match b {
                        LayerSpec::Conv2d { .. } => {
                            let (l, w) =
                                solve_conv(b, inner_prev, &mut walk, Some(block_width))?;
                            inner_prev = w;
                            l
                        }
                        LayerSpec::BatchNorm { eps, momentum, .. } => LayerSpec::BatchNorm {
                            ch: inner_prev,
                            eps: *eps,
                            momentum: *momentum,
                        },
                        LayerSpec::Relu => LayerSpec::Relu,
                        LayerSpec::MaxPool { k, stride } => LayerSpec::MaxPool {
                            k: *k,
                            stride: *stride,
                        },
                        other => {
                            return Err(Error::Config(format!(
                                "unsupported layer inside residual body: {:?}",
                                other
                            )))
                        }
                    };
                    new_body.push(nl);
                }

                // Spatial change across the body decides the projection stride.
                let body_in = student_sig;
                let mut body_sig = body_in;
                for l in &new_body {
                    body_sig = l.out_sig(body_sig)?;
                }
                let (in_h, out_h) = match (body_in, body_sig) {
                    (Sig::Chw(_, h1, _), Sig::Chw(_, h2, _)) => (h1, h2),
                    _ => {
                        return Err(Error::Config(
                            "residual body must map images to images".into(),
                        ))
                    }
                };
                let spatial_changed = in_h != out_h;
                let needs_projection = prev != block_width || spatial_changed;

                // Consume the teacher's projection census row if present.
                let teacher_proj = projection.as_ref().map(|p| {
                    let row = walk.take();
                    (p, row)
                });
                let new_proj = if needs_projection {
                    let stride = if spatial_changed {
                        if out_h == 0 || in_h % out_h != 0 {
                            return Err(Error::Config(
                                "projection stride is not integral".into(),
                            ));
                        }
                        in_h / out_h
                    } else {
                        1
                    };
                    let bias = match teacher_proj {
                        Some((p, _)) => match p.as_ref() {
                            LayerSpec::Conv2d { bias, .. } => *bias,
                            _ => false,
                        },
                        None => false,
                    };
                    Some(Box::new(LayerSpec::Conv2d {
                        in_ch: prev,
                        out_ch: block_width,
                        kh: 1,
                        kw: 1,
                        stride,
                        pad: 0,
                        bias,
                    }))
                } else {
                    None
                };
                if let Some((_, row)) = teacher_proj {
                    let weights = new_proj
                        .as_ref()
                        .map(|_| prev * block_width)
                        .unwrap_or(0);
                    walk.plan.push(PlanRow {
                        name: row.name.clone(),
                        kernel_area: 1,
                        teacher_nonzero: row.nonzero,
                        teacher_capacity: row.capacity,
                        channels: block_width,
                        student_weights: weights,
                    });
                }
                prev = block_width;
                LayerSpec::Residual {
                    body: new_body,
                    projection: new_proj,
                }
            }
        };
        teacher_sig = spec.out_sig(teacher_sig)?;
        student_sig = new.out_sig(student_sig)?;
        layers.push(new);
    }

    let arch = ArchitectureSpec {
        name: format!("{}-student", teacher_arch.name),
        input: teacher_arch.input,
        layers,
        notes: None,
    };
    arch.validate()?;
    let total_weights = walk.plan.iter().map(|r| r.student_weights).sum();
    Ok(StudentPlan {
        channels: walk.channels,
        arch,
        rows: walk.plan,
        total_weights,
    })
}

// ---------------------------------------------------------------------------
// Parameter and MAC accounting
// ---------------------------------------------------------------------------

/// Per-layer accounting row. `weights` covers conv kernels and dense
/// matrices (the headline numbers); biases and batchnorm scale/shift land in
/// `aux_params`, and pool/ReLU/batchnorm work in `aux_macs`.
#[derive(Debug, Clone, PartialEq)]
pub struct CountRow {
    pub name: String,
    pub kind: &'static str,
    pub weights: usize,
    pub aux_params: usize,
    pub macs: u64,
    pub aux_macs: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountReport {
    pub rows: Vec<CountRow>,
    pub total_weights: usize,
    pub total_aux_params: usize,
    pub total_macs: u64,
    pub total_aux_macs: u64,
}

fn count_walk(
    layers: &[LayerSpec],
    mut sig: Sig,
    rows: &mut Vec<CountRow>,
    conv_no: &mut usize,
    dense_no: &mut usize,
    n_dense: usize,
) -> Result<Sig> {
    for l in layers {
        let out_sig = l.out_sig(sig)?;
        match l {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kh,
                kw,
                bias,
                ..
            } => {
                let (oh, ow) = match out_sig {
                    Sig::Chw(_, h, w) => (h, w),
                    _ => unreachable!("conv output"),
                };
                let weights = kh * kw * in_ch * out_ch;
                rows.push(CountRow {
                    name: format!("conv-{}", conv_no),
                    kind: "conv",
                    weights,
                    aux_params: if *bias { *out_ch } else { 0 },
                    macs: weights as u64 * (oh * ow) as u64,
                    aux_macs: if *bias { (out_ch * oh * ow) as u64 } else { 0 },
                });
                *conv_no += 1;
            }
            LayerSpec::Dense {
                in_dim,
                out_dim,
                bias,
            } => {
                let name = if n_dense == 1 {
                    "fc".to_string()
                } else {
                    format!("fc-{}", dense_no)
                };
                *dense_no += 1;
                rows.push(CountRow {
                    name,
                    kind: "dense",
                    weights: in_dim * out_dim,
                    aux_params: if *bias { *out_dim } else { 0 },
                    macs: (in_dim * out_dim) as u64,
                    aux_macs: if *bias { *out_dim as u64 } else { 0 },
                });
            }
            LayerSpec::BatchNorm { ch, .. } => {
                rows.push(CountRow {
                    name: format!("bn-{}", rows.len()),
                    kind: "batchnorm",
                    weights: 0,
                    aux_params: 2 * ch,
                    macs: 0,
                    aux_macs: 2 * sig.elements() as u64,
                });
            }
            LayerSpec::Relu => {
                rows.push(CountRow {
                    name: format!("relu-{}", rows.len()),
                    kind: "relu",
                    weights: 0,
                    aux_params: 0,
                    macs: 0,
                    aux_macs: sig.elements() as u64,
                });
            }
            LayerSpec::MaxPool { k, .. } => {
                rows.push(CountRow {
                    name: format!("pool-{}", rows.len()),
                    kind: "maxpool",
                    weights: 0,
                    aux_params: 0,
                    macs: 0,
                    aux_macs: (k * k * out_sig.elements()) as u64,
                });
            }
            LayerSpec::Flatten => {}
            LayerSpec::Residual { body, projection } => {
                count_walk(body, sig, rows, conv_no, dense_no, n_dense)?;
                if let Some(p) = projection {
                    let mut proj_rows = Vec::new();
                    let mut pc = 0usize;
                    let mut pd = 0usize;
                    count_walk(
                        std::slice::from_ref(p.as_ref()),
                        sig,
                        &mut proj_rows,
                        &mut pc,
                        &mut pd,
                        n_dense,
                    )?;
                    for mut r in proj_rows {
                        r.name = format!("proj-{}", conv_no);
                        rows.push(r);
                    }
                }
                rows.push(CountRow {
                    name: format!("add-{}", rows.len()),
                    kind: "residual-add",
                    weights: 0,
                    aux_params: 0,
                    macs: 0,
                    aux_macs: out_sig.elements() as u64,
                });
            }
        }
        sig = out_sig;
    }
    Ok(sig)
}

fn count_dense_layers(layers: &[LayerSpec]) -> usize {
    layers
        .iter()
        .map(|l| match l {
            LayerSpec::Dense { .. } => 1,
            LayerSpec::Residual { body, .. } => count_dense_layers(body),
            _ => 0,
        })
        .sum()
}

/// Per-layer and total weight counts (headline: conv + dense weights only).
pub fn count_params(arch: &ArchitectureSpec) -> Result<CountReport> {
    count_macs(arch, arch.input)
}

/// Per-layer and total multiply-accumulates at the given input size, plus
/// the same weight accounting.
pub fn count_macs(arch: &ArchitectureSpec, input: [usize; 3]) -> Result<CountReport> {
    if input[0] != arch.input[0] {
        return Err(Error::Config(format!(
            "input channels {} do not match architecture ({})",
            input[0], arch.input[0]
        )));
    }
    let mut rows = Vec::new();
    let mut conv_no = 0usize;
    let mut dense_no = 0usize;
    let n_dense = count_dense_layers(&arch.layers);
    count_walk(
        &arch.layers,
        Sig::Chw(input[0], input[1], input[2]),
        &mut rows,
        &mut conv_no,
        &mut dense_no,
        n_dense,
    )?;
    Ok(CountReport {
        total_weights: rows.iter().map(|r| r.weights).sum(),
        total_aux_params: rows.iter().map(|r| r.aux_params).sum(),
        total_macs: rows.iter().map(|r| r.macs).sum(),
        total_aux_macs: rows.iter().map(|r| r.aux_macs).sum(),
        rows,
    })
}
