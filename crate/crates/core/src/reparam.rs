//! Structural reparameterization: batch-norm folding and branch merging,
//! turning a training-form model into one with a single convolution per
//! block, plus a numerical equivalence check between the two.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{
    ConvBn, ConvFfn, EmfBlock, Epe, FoldableConv, Form, LstmStateSet, Model, RepBlock, RepMixer,
    RootModule, Stage, Trace,
};
use crate::error::{EmfError, Result};
use crate::tensor::{BnParams, ConvParams, Tensor};

/// Folds an inference batch norm into the preceding convolution:
/// `W' = W * g / sqrt(var + eps)` per output channel and
/// `b' = beta + (b - mean) * g / sqrt(var + eps)`.
pub fn fold_bn(conv: &ConvParams, bn: &BnParams) -> Result<ConvParams> {
    conv.validate()?;
    bn.validate()?;
    let c_out = conv.out_channels();
    if bn.channels() != c_out {
        return Err(EmfError::shape(format!(
            "batch norm has {} channels, conv produces {c_out}",
            bn.channels()
        )));
    }
    let per_out = conv.weight.len() / c_out.max(1);
    let mut weight = conv.weight.clone();
    let mut bias = Vec::with_capacity(c_out);
    for o in 0..c_out {
        let scale = bn.gamma[o] as f64 / (bn.var[o] as f64 + bn.eps as f64).sqrt();
        for w in &mut weight.data_mut()[o * per_out..(o + 1) * per_out] {
            *w = (*w as f64 * scale) as f32;
        }
        bias.push((bn.beta[o] as f64 + (conv.bias[o] as f64 - bn.mean[o] as f64) * scale) as f32);
    }
    Ok(ConvParams {
        weight,
        bias,
        stride: conv.stride,
        padding: conv.padding,
        groups: conv.groups,
    })
}

/// Zero-embeds a `k x k` kernel at the center of a `K x K` one. Stride and
/// groups are kept; padding becomes `K div 2`.
pub fn pad_kernel(conv: &ConvParams, target: usize) -> Result<ConvParams> {
    conv.validate()?;
    let (kh, kw) = conv.kernel();
    if kh != kw || kh.is_multiple_of(2) || target.is_multiple_of(2) {
        return Err(EmfError::Argument(format!(
            "pad_kernel needs odd square kernels, got {kh}x{kw} -> {target}"
        )));
    }
    if target < kh {
        return Err(EmfError::Argument(format!(
            "cannot pad a {kh}x{kh} kernel down to {target}x{target}"
        )));
    }
    let s = conv.weight.shape();
    let (c_out, c_in) = (s[0], s[1]);
    let off = (target - kh) / 2;
    let mut w = Tensor::zeros(&[c_out, c_in, target, target]);
    let src = conv.weight.data();
    let dst = w.data_mut();
    for oc in 0..c_out * c_in {
        for y in 0..kh {
            for x in 0..kh {
                dst[(oc * target + y + off) * target + x + off] = src[(oc * kh + y) * kh + x];
            }
        }
    }
    Ok(ConvParams {
        weight: w,
        bias: conv.bias.clone(),
        stride: conv.stride,
        padding: target / 2,
        groups: conv.groups,
    })
}

/// Dirac kernel: output channel `c` copies input channel `c` through the
/// center tap. `groups` must be 1 (dense) or `channels` (depthwise).
pub fn identity_kernel(channels: usize, k: usize, groups: usize) -> Result<ConvParams> {
    if k.is_multiple_of(2) {
        return Err(EmfError::Argument(format!(
            "identity kernel size must be odd, got {k}"
        )));
    }
    if groups != 1 && groups != channels {
        return Err(EmfError::Argument(format!(
            "identity kernel supports groups 1 or {channels}, got {groups}"
        )));
    }
    let per_group = channels / groups;
    let mut p = ConvParams::zeros(channels, channels, k, 1, groups);
    let center = k / 2;
    let data = p.weight.data_mut();
    for c in 0..channels {
        let ci = c % per_group;
        data[((c * per_group + ci) * k + center) * k + center] = 1.0;
    }
    Ok(p)
}

/// Sums weights and biases of branches that share shape, stride and groups.
pub fn merge_branches(branches: &[ConvParams]) -> Result<ConvParams> {
    let first = branches
        .first()
        .ok_or_else(|| EmfError::Argument("merge_branches needs at least one branch".into()))?;
    first.validate()?;
    let mut out = first.clone();
    for (i, b) in branches.iter().enumerate().skip(1) {
        b.validate()?;
        if b.weight.shape() != first.weight.shape()
            || b.stride != first.stride
            || b.groups != first.groups
            || b.padding != first.padding
        {
            return Err(EmfError::Argument(format!(
                "branch {i} (weight {:?}, stride {}, groups {}, padding {}) does not match \
                 branch 0 (weight {:?}, stride {}, groups {}, padding {})",
                b.weight.shape(),
                b.stride,
                b.groups,
                b.padding,
                first.weight.shape(),
                first.stride,
                first.groups,
                first.padding
            )));
        }
        for (a, v) in out.weight.data_mut().iter_mut().zip(b.weight.data()) {
            *a += v;
        }
        for (a, v) in out.bias.iter_mut().zip(&b.bias) {
            *a += v;
        }
    }
    Ok(out)
}

fn fold(cb: &ConvBn) -> Result<ConvParams> {
    fold_bn(&cb.conv, &cb.bn)
}

fn fuse_foldable(c: &FoldableConv) -> Result<FoldableConv> {
    match c {
        FoldableConv::Train(cb) => Ok(FoldableConv::Fused(fold(cb)?)),
        FoldableConv::Fused(p) => Ok(FoldableConv::Fused(p.clone())),
    }
}

/// Large branch, padded small branch and the BN-only identity branch as one
/// convolution.
pub fn fuse_repblock(block: &RepBlock) -> Result<RepBlock> {
    match block {
        RepBlock::Fused { conv } => Ok(RepBlock::Fused { conv: conv.clone() }),
        RepBlock::Train {
            large,
            small,
            identity,
        } => {
            let big = fold(large)?;
            let (k, _) = big.kernel();
            let mut branches = vec![big];
            if let Some(s) = small {
                branches.push(pad_kernel(&fold(s)?, k)?);
            }
            if let Some(bn) = identity {
                let c = large.conv.out_channels();
                branches.push(fold_bn(&identity_kernel(c, k, large.conv.groups)?, bn)?);
            }
            Ok(RepBlock::Fused {
                conv: merge_branches(&branches)?,
            })
        }
    }
}

/// `x + BN(DW(x))` as a single depthwise convolution.
pub fn fuse_repmixer(mixer: &RepMixer) -> Result<RepMixer> {
    match mixer {
        RepMixer::Fused { conv } => Ok(RepMixer::Fused { conv: conv.clone() }),
        RepMixer::Train { dw } => {
            let folded = fold(dw)?;
            let (k, _) = folded.kernel();
            let id = identity_kernel(folded.out_channels(), k, folded.groups)?;
            Ok(RepMixer::Fused {
                conv: merge_branches(&[folded, id])?,
            })
        }
    }
}

/// Fused copy of a training-form model. The LSTM gates, point-wise FFN
/// convolutions and the detection head are copied unchanged.
pub fn fuse_model(model: &Model) -> Result<Model> {
    if model.form != Form::Train {
        return Err(EmfError::State("model is already in fused form".into()));
    }
    model.check_form()?;
    let stages = model
        .stages
        .iter()
        .map(|s| {
            Ok(Stage {
                root: RootModule {
                    pw: fuse_foldable(&s.root.pw)?,
                    down: s
                        .root
                        .down
                        .iter()
                        .map(fuse_repblock)
                        .collect::<Result<_>>()?,
                    channel: fuse_repblock(&s.root.channel)?,
                },
                blocks: s
                    .blocks
                    .iter()
                    .map(|b| {
                        Ok(EmfBlock {
                            mixer: fuse_repmixer(&b.mixer)?,
                            ffn: ConvFfn {
                                dw: fuse_foldable(&b.ffn.dw)?,
                                expand: b.ffn.expand.clone(),
                                project: b.ffn.project.clone(),
                            },
                        })
                    })
                    .collect::<Result<_>>()?,
                lstm: s.lstm.clone(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(Model {
        config: model.config.clone(),
        form: Form::Fused,
        epe: Epe {
            pw: fuse_foldable(&model.epe.pw)?,
        },
        stages,
        head: model.head.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockDeviation {
    pub block: String,
    pub max_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FusionReport {
    /// Max-abs deviation at every traced block output, in forward order.
    pub blocks: Vec<BlockDeviation>,
    pub global: f64,
    pub inputs: usize,
    pub tolerance: f64,
    pub pass: bool,
    /// Earliest block in forward order whose deviation exceeds the tolerance.
    pub first_failure: Option<String>,
}

/// Seeded verification input: values uniform in `[0, 255]` scaled to unit
/// variance.
pub fn fusion_input(shape: [usize; 3], rng: &mut impl Rng) -> Tensor {
    let scale = 12f32.sqrt() / 255.0;
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.gen_range(0.0..255.0f32) * scale)
        .collect();
    Tensor::from_vec(&shape, data).expect("shape matches length")
}

/// Runs both models on `n` seeded random inputs with fresh recurrent state
/// and compares every traced block output.
pub fn verify_fusion(
    train: &Model,
    fused: &Model,
    n: usize,
    tol: f64,
    input_shape: [usize; 3],
    seed: u64,
) -> Result<FusionReport> {
    if train.config != fused.config {
        return Err(EmfError::Argument(
            "models have different configurations and cannot be compared".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks: Vec<BlockDeviation> = Vec::new();
    for _ in 0..n {
        let x = fusion_input(input_shape, &mut rng);
        let run = |m: &Model| -> Result<Trace> {
            let mut trace = Trace::new();
            m.forward_traced(&x, &LstmStateSet::new(), Some(&mut trace))?;
            Ok(trace)
        };
        let (ta, tb) = (run(train)?, run(fused)?);
        if blocks.is_empty() {
            blocks = ta
                .iter()
                .map(|(name, _)| BlockDeviation {
                    block: name.clone(),
                    max_abs: 0.0,
                })
                .collect();
        }
        for ((d, (na, a)), (nb, b)) in blocks.iter_mut().zip(&ta).zip(&tb) {
            if na != nb {
                return Err(EmfError::Internal(format!("trace mismatch: {na} vs {nb}")));
            }
            let dev = a.max_abs_diff(b)? as f64;
            // NaN anywhere counts as an unbounded deviation
            d.max_abs = if dev.is_nan() {
                f64::INFINITY
            } else {
                d.max_abs.max(dev)
            };
        }
    }
    let global = blocks.iter().map(|d| d.max_abs).fold(0.0, f64::max);
    let first_failure = blocks
        .iter()
        .find(|d| d.max_abs > tol)
        .map(|d| d.block.clone());
    Ok(FusionReport {
        blocks,
        global,
        inputs: n,
        tolerance: tol,
        pass: global <= tol,
        first_failure,
    })
}
