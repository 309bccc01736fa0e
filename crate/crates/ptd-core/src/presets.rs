//! Built-in architectures.
//!
//! The VGG variants follow the single-classifier layout commonly used for
//! 32x32 inputs: 3x3 convs with batchnorm, five 2x2 max-pools, one dense
//! classifier fed by the final 512-wide (or wider) feature map. `mini_vgg`
//! and `tiny_resnet` are desk-scale stand-ins used by the bundled presets
//! and the test suite.

use crate::arch::{ArchitectureSpec, LayerSpec, DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM};

fn conv(in_ch: usize, out_ch: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        in_ch,
        out_ch,
        kh: 3,
        kw: 3,
        stride: 1,
        pad: 1,
        bias: false,
    }
}

fn bn(ch: usize) -> LayerSpec {
    LayerSpec::BatchNorm {
        ch,
        eps: DEFAULT_BN_EPS,
        momentum: DEFAULT_BN_MOMENTUM,
    }
}

fn pool() -> LayerSpec {
    LayerSpec::MaxPool { k: 2, stride: 2 }
}

/// VGG-style stack from a per-block channel plan. `blocks[i]` lists the conv
/// widths of block `i`; each block ends with a 2x2 max-pool.
fn vgg_from_blocks(
    name: &str,
    input: [usize; 3],
    blocks: &[&[usize]],
    classes: usize,
) -> ArchitectureSpec {
    let mut layers = Vec::new();
    let mut c_in = input[0];
    for block in blocks {
        for &c_out in *block {
            layers.push(conv(c_in, c_out));
            layers.push(bn(c_out));
            layers.push(LayerSpec::Relu);
            c_in = c_out;
        }
        layers.push(pool());
    }
    let mut spatial = input[1];
    for _ in 0..blocks.len() {
        spatial /= 2;
    }
    layers.push(LayerSpec::Flatten);
    layers.push(LayerSpec::Dense {
        in_dim: c_in * spatial * spatial,
        out_dim: classes,
        bias: true,
    });
    ArchitectureSpec {
        name: name.to_string(),
        input,
        layers,
        notes: None,
    }
}

/// 16-conv VGG19 for 32x32 inputs with a single dense classifier.
pub fn vgg19(classes: usize) -> ArchitectureSpec {
    vgg_from_blocks(
        "vgg19",
        [3, 32, 32],
        &[
            &[64, 64],
            &[128, 128],
            &[256, 256, 256, 256],
            &[512, 512, 512, 512],
            &[512, 512, 512, 512],
        ],
        classes,
    )
}

/// VGG19 with every conv width doubled and the classifier input (and hence
/// the final conv width) kept at 512 so the dense head is unchanged.
pub fn vgg19dbl(classes: usize) -> ArchitectureSpec {
    vgg_from_blocks(
        "vgg19dbl",
        [3, 32, 32],
        &[
            &[128, 128],
            &[256, 256],
            &[512, 512, 512, 512],
            &[1024, 1024, 1024, 1024],
            &[1024, 1024, 1024, 512],
        ],
        classes,
    )
}

/// Hand-designed comparison student: half the filters in the middle of the
/// net, full width near input and output.
pub fn vgg19_cl1(classes: usize) -> ArchitectureSpec {
    vgg_from_blocks(
        "vgg19-cl1",
        [3, 32, 32],
        &[
            &[64, 64],
            &[64, 64],
            &[128, 128, 128, 128],
            &[256, 256, 256, 256],
            &[512, 512, 512, 512],
        ],
        classes,
    )
}

/// Hand-designed comparison student with unevenly reduced widths.
pub fn vgg19_cl2(classes: usize) -> ArchitectureSpec {
    vgg_from_blocks(
        "vgg19-cl2",
        [3, 32, 32],
        &[
            &[64, 39],
            &[179, 79],
            &[354, 155, 362, 146],
            &[614, 247, 500, 158],
            &[271, 139, 547, 512],
        ],
        classes,
    )
}

/// Four-conv desk-scale VGG used by the bundled small presets.
pub fn mini_vgg(in_ch: usize, side: usize, classes: usize) -> ArchitectureSpec {
    let mut a = vgg_from_blocks(
        "mini-vgg",
        [in_ch, side, side],
        &[&[8, 16], &[24, 24]],
        classes,
    );
    a.notes = Some("desk-scale stand-in, widths not tuned".into());
    a
}

/// Small residual net covering every layer kind, used by verification runs.
pub fn tiny_resnet(in_ch: usize, side: usize, classes: usize) -> ArchitectureSpec {
    let widths = (8usize, 12usize);
    let body = |c_in: usize, c_out: usize| -> Vec<LayerSpec> {
        vec![
            conv(c_in, c_out),
            bn(c_out),
            LayerSpec::Relu,
            conv(c_out, c_out),
            bn(c_out),
        ]
    };
    let layers = vec![
        conv(in_ch, widths.0),
        bn(widths.0),
        LayerSpec::Relu,
        LayerSpec::Residual {
            body: body(widths.0, widths.0),
            projection: None,
        },
        LayerSpec::Relu,
        pool(),
        LayerSpec::Residual {
            body: body(widths.0, widths.1),
            projection: Some(Box::new(LayerSpec::Conv2d {
                in_ch: widths.0,
                out_ch: widths.1,
                kh: 1,
                kw: 1,
                stride: 1,
                pad: 0,
                bias: false,
            })),
        },
        LayerSpec::Relu,
        pool(),
        LayerSpec::Flatten,
        LayerSpec::Dense {
            in_dim: widths.1 * (side / 4) * (side / 4),
            out_dim: classes,
            bias: true,
        },
    ];
    ArchitectureSpec {
        name: "tiny-resnet".to_string(),
        input: [in_ch, side, side],
        layers,
        notes: Some("desk-scale residual net".into()),
    }
}

/// Look up a built-in architecture by name, e.g. `"vgg19"` or
/// `"mini_vgg:3x12:10"` (channels x side : classes).
pub fn by_name(name: &str) -> Option<ArchitectureSpec> {
    match name {
        "vgg19" => Some(vgg19(100)),
        "vgg19dbl" => Some(vgg19dbl(100)),
        "vgg19_cl1" => Some(vgg19_cl1(100)),
        "vgg19_cl2" => Some(vgg19_cl2(100)),
        _ => {
            let parse = |spec: &str| -> Option<(usize, usize, usize)> {
                let mut it = spec.split(':');
                let dims = it.next()?;
                let classes = it.next()?.parse().ok()?;
                let (c, s) = dims.split_once('x')?;
                Some((c.parse().ok()?, s.parse().ok()?, classes))
            };
            if let Some(rest) = name.strip_prefix("mini_vgg:") {
                let (c, s, k) = parse(rest)?;
                Some(mini_vgg(c, s, k))
            } else if let Some(rest) = name.strip_prefix("tiny_resnet:") {
                let (c, s, k) = parse(rest)?;
                Some(tiny_resnet(c, s, k))
            } else {
                None
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for arch in [
            vgg19(100),
            vgg19dbl(100),
            vgg19_cl1(100),
            vgg19_cl2(100),
            mini_vgg(3, 12, 10),
            tiny_resnet(3, 8, 4),
        ] {
            arch.validate()
                .unwrap_or_else(|e| panic!("{} invalid: {e}", arch.name));
        }
    }

    #[test]
    fn by_name_round_trips() {
        assert_eq!(by_name("vgg19").unwrap().name, "vgg19");
        assert_eq!(by_name("mini_vgg:3x12:10").unwrap().input, [3, 12, 12]);
        assert!(by_name("nope").is_none());
    }
}
