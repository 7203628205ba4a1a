//! Building blocks of the backbone, each in a multi-branch training form
//! and a single-convolution inference form.
//!
//! Convolutions are followed by batch norm (conv -> BN). In training form
//! the normalization runs as its own pass; in fused form it has been
//! folded into the preceding kernel.

use super::params::{join, Parameters, Visit, VisitMut};
use super::Form;
use crate::error::{EmfError, Result};
use crate::tensor::{
    add_assign, batchnorm_infer, conv2d, gelu_inplace, BnParams, ConvParams, LstmGates, Tensor,
};

/// Number of kernel launches of each kind in one forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCount {
    pub convs: usize,
    pub batchnorms: usize,
}

impl std::ops::Add for OpCount {
    type Output = OpCount;
    fn add(self, o: OpCount) -> OpCount {
        OpCount {
            convs: self.convs + o.convs,
            batchnorms: self.batchnorms + o.batchnorms,
        }
    }
}

impl std::iter::Sum for OpCount {
    fn sum<I: Iterator<Item = OpCount>>(iter: I) -> OpCount {
        iter.fold(OpCount::default(), |a, b| a + b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn {
    pub conv: ConvParams,
    pub bn: BnParams,
}

impl ConvBn {
    pub fn zeros(c_out: usize, c_in: usize, k: usize, stride: usize, groups: usize) -> Self {
        ConvBn {
            conv: ConvParams::zeros(c_out, c_in, k, stride, groups),
            bn: BnParams::identity(c_out),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        batchnorm_infer(&conv2d(x, &self.conv)?, &self.bn)
    }
}

impl Parameters for ConvBn {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        self.conv.visit(prefix, f);
        self.bn.visit(&join(prefix, "bn"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        self.conv.visit_mut(prefix, f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

/// A conv -> BN pair, or the single conv it folds into.
#[derive(Debug, Clone, PartialEq)]
pub enum FoldableConv {
    Train(ConvBn),
    Fused(ConvParams),
}

impl FoldableConv {
    pub fn zeros(form: Form, c_out: usize, c_in: usize, k: usize, groups: usize) -> Self {
        match form {
            Form::Train => FoldableConv::Train(ConvBn::zeros(c_out, c_in, k, 1, groups)),
            Form::Fused => FoldableConv::Fused(ConvParams::zeros(c_out, c_in, k, 1, groups)),
        }
    }

    pub fn form(&self) -> Form {
        match self {
            FoldableConv::Train(_) => Form::Train,
            FoldableConv::Fused(_) => Form::Fused,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            FoldableConv::Train(cb) => cb.forward(x),
            FoldableConv::Fused(c) => conv2d(x, c),
        }
    }

    pub fn ops(&self) -> OpCount {
        OpCount {
            convs: 1,
            batchnorms: usize::from(self.form() == Form::Train),
        }
    }
}

impl Parameters for FoldableConv {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        match self {
            FoldableConv::Train(cb) => cb.visit(prefix, f),
            FoldableConv::Fused(c) => c.visit(prefix, f),
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        match self {
            FoldableConv::Train(cb) => cb.visit_mut(prefix, f),
            FoldableConv::Fused(c) => c.visit_mut(prefix, f),
        }
    }
}

/// Multi-branch convolution block: a `k x k` branch, a `3 x 3` branch when
/// `k > 3`, and a BN-only identity branch when the stride is 1. Branch
/// outputs are summed, then passed through GELU.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum RepBlock {
    Train {
        large: ConvBn,
        small: Option<ConvBn>,
        identity: Option<BnParams>,
    },
    Fused {
        conv: ConvParams,
    },
}

impl RepBlock {
    /// `groups` is 1 (dense) or `channels` (depthwise).
    pub fn zeros(form: Form, channels: usize, k: usize, stride: usize, groups: usize) -> Self {
        match form {
            Form::Train => RepBlock::Train {
                large: ConvBn::zeros(channels, channels, k, stride, groups),
                small: (k > 3).then(|| ConvBn::zeros(channels, channels, 3, stride, groups)),
                identity: (stride == 1).then(|| BnParams::identity(channels)),
            },
            Form::Fused => RepBlock::Fused {
                conv: ConvParams::zeros(channels, channels, k, stride, groups),
            },
        }
    }

    pub fn form(&self) -> Form {
        match self {
            RepBlock::Train { .. } => Form::Train,
            RepBlock::Fused { .. } => Form::Fused,
        }
    }

    pub fn stride(&self) -> usize {
        match self {
            RepBlock::Train { large, .. } => large.conv.stride,
            RepBlock::Fused { conv } => conv.stride,
        }
    }

    /// Branch outputs before the activation.
    pub fn branch_outputs(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        match self {
            RepBlock::Train {
                large,
                small,
                identity,
            } => {
                let mut outs = vec![large.forward(x)?];
                if let Some(s) = small {
                    outs.push(s.forward(x)?);
                }
                if let Some(bn) = identity {
                    outs.push(batchnorm_infer(x, bn)?);
                }
                for o in &outs[1..] {
                    if o.shape() != outs[0].shape() {
                        return Err(EmfError::Internal(format!(
                            "RepBlock branch shapes differ: {:?} vs {:?}",
                            o.shape(),
                            outs[0].shape()
                        )));
                    }
                }
                Ok(outs)
            }
            RepBlock::Fused { conv } => Ok(vec![conv2d(x, conv)?]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut outs = self.branch_outputs(x)?.into_iter();
        let mut sum = outs.next().expect("at least one branch");
        for o in outs {
            add_assign(&mut sum, &o)?;
        }
        gelu_inplace(&mut sum);
        Ok(sum)
    }

    pub fn ops(&self) -> OpCount {
        match self {
            RepBlock::Train {
                small, identity, ..
            } => OpCount {
                convs: 1 + usize::from(small.is_some()),
                batchnorms: 1 + usize::from(small.is_some()) + usize::from(identity.is_some()),
            },
            RepBlock::Fused { .. } => OpCount {
                convs: 1,
                batchnorms: 0,
            },
        }
    }
}

impl Parameters for RepBlock {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        match self {
            RepBlock::Train {
                large,
                small,
                identity,
            } => {
                large.visit(&join(prefix, "large"), f);
                small.visit(&join(prefix, "small"), f);
                identity.visit(&join(prefix, "identity"), f);
            }
            RepBlock::Fused { conv } => conv.visit(&join(prefix, "fused"), f),
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        match self {
            RepBlock::Train {
                large,
                small,
                identity,
            } => {
                large.visit_mut(&join(prefix, "large"), f);
                small.visit_mut(&join(prefix, "small"), f);
                identity.visit_mut(&join(prefix, "identity"), f);
            }
            RepBlock::Fused { conv } => conv.visit_mut(&join(prefix, "fused"), f),
        }
    }
}

/// Token mixer: `x + BN(DWConv(x))`, or one depthwise conv once fused.
#[derive(Debug, Clone, PartialEq)]
pub enum RepMixer {
    Train { dw: ConvBn },
    Fused { conv: ConvParams },
}

impl RepMixer {
    pub fn zeros(form: Form, channels: usize, k: usize) -> Self {
        match form {
            Form::Train => RepMixer::Train {
                dw: ConvBn::zeros(channels, channels, k, 1, channels),
            },
            Form::Fused => RepMixer::Fused {
                conv: ConvParams::zeros(channels, channels, k, 1, channels),
            },
        }
    }

    pub fn form(&self) -> Form {
        match self {
            RepMixer::Train { .. } => Form::Train,
            RepMixer::Fused { .. } => Form::Fused,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            RepMixer::Train { dw } => {
                let mut y = dw.forward(x)?;
                add_assign(&mut y, x)?;
                Ok(y)
            }
            RepMixer::Fused { conv } => conv2d(x, conv),
        }
    }

    pub fn ops(&self) -> OpCount {
        OpCount {
            convs: 1,
            batchnorms: usize::from(self.form() == Form::Train),
        }
    }
}

impl Parameters for RepMixer {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        match self {
            RepMixer::Train { dw } => dw.visit(&join(prefix, "dw"), f),
            RepMixer::Fused { conv } => conv.visit(&join(prefix, "fused"), f),
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        match self {
            RepMixer::Train { dw } => dw.visit_mut(&join(prefix, "dw"), f),
            RepMixer::Fused { conv } => conv.visit_mut(&join(prefix, "fused"), f),
        }
    }
}

/// Channel mixer: `x + project(GELU(expand(DWConv_BN(x))))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvFfn {
    pub dw: FoldableConv,
    pub expand: ConvParams,
    pub project: ConvParams,
}

impl ConvFfn {
    pub fn zeros(form: Form, channels: usize, k: usize, expansion: usize) -> Self {
        let hidden = channels * expansion;
        ConvFfn {
            dw: FoldableConv::zeros(form, channels, channels, k, channels),
            expand: ConvParams::zeros(hidden, channels, 1, 1, 1),
            project: ConvParams::zeros(channels, hidden, 1, 1, 1),
        }
    }

    pub fn hidden_width(&self) -> usize {
        self.expand.out_channels()
    }

    /// The residual branch alone, without the skip connection.
    pub fn residual(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = conv2d(&self.dw.forward(x)?, &self.expand)?;
        gelu_inplace(&mut h);
        conv2d(&h, &self.project)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.residual(x)?;
        add_assign(&mut y, x)?;
        Ok(y)
    }

    pub fn ops(&self) -> OpCount {
        self.dw.ops()
            + OpCount {
                convs: 2,
                batchnorms: 0,
            }
    }
}

impl Parameters for ConvFfn {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        self.dw.visit(&join(prefix, "dw"), f);
        self.expand.visit(&join(prefix, "expand"), f);
        self.project.visit(&join(prefix, "project"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        self.dw.visit_mut(&join(prefix, "dw"), f);
        self.expand.visit_mut(&join(prefix, "expand"), f);
        self.project.visit_mut(&join(prefix, "project"), f);
    }
}

/// MetaFormer block: token mixer then channel mixer, shape-preserving.
#[derive(Debug, Clone, PartialEq)]
pub struct EmfBlock {
    pub mixer: RepMixer,
    pub ffn: ConvFfn,
}

impl EmfBlock {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.ffn.forward(&self.mixer.forward(x)?)
    }

    pub fn ops(&self) -> OpCount {
        self.mixer.ops() + self.ffn.ops()
    }
}

impl Parameters for EmfBlock {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        self.mixer.visit(&join(prefix, "mixer"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        self.mixer.visit_mut(&join(prefix, "mixer"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
    }
}

/// Tokenizer at the start of each stage: point-wise expansion, stride-2
/// large-kernel depthwise RepBlocks, then a dense 1x1 RepBlock.
#[derive(Debug, Clone, PartialEq)]
pub struct RootModule {
    pub pw: FoldableConv,
    pub down: Vec<RepBlock>,
    pub channel: RepBlock,
}

impl RootModule {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.pw.forward(x)?;
        for b in &self.down {
            y = b.forward(&y)?;
        }
        self.channel.forward(&y)
    }

    pub fn ops(&self) -> OpCount {
        self.pw.ops() + self.down.iter().map(RepBlock::ops).sum() + self.channel.ops()
    }
}

impl Parameters for RootModule {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        self.pw.visit(&join(prefix, "pw"), f);
        for (j, b) in self.down.iter().enumerate() {
            b.visit(&join(prefix, &format!("down{}", j + 1)), f);
        }
        self.channel.visit(&join(prefix, "channel"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        self.pw.visit_mut(&join(prefix, "pw"), f);
        for (j, b) in self.down.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("down{}", j + 1)), f);
        }
        self.channel.visit_mut(&join(prefix, "channel"), f);
    }
}

/// Event progression extractor: point-wise conv -> BN -> GELU over the
/// time-bin channels, with no spatial mixing.
#[derive(Debug, Clone, PartialEq)]
pub struct Epe {
    pub pw: FoldableConv,
}

impl Epe {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.pw.forward(x)?;
        gelu_inplace(&mut y);
        Ok(y)
    }
}

impl Parameters for Epe {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        self.pw.visit(&join(prefix, "pw"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        self.pw.visit_mut(&join(prefix, "pw"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub root: RootModule,
    pub blocks: Vec<EmfBlock>,
    pub lstm: LstmGates,
}

impl Stage {
    pub fn channels(&self) -> usize {
        self.lstm.hidden()
    }

    pub fn ops(&self) -> OpCount {
        self.root.ops()
            + self.blocks.iter().map(EmfBlock::ops).sum()
            + OpCount {
                convs: 2,
                batchnorms: 0,
            }
    }
}

impl Parameters for Stage {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        self.root.visit(&join(prefix, "root"), f);
        for (j, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{}", j + 1)), f);
        }
        self.lstm.visit(&join(prefix, "lstm"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        self.root.visit_mut(&join(prefix, "root"), f);
        for (j, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{}", j + 1)), f);
        }
        self.lstm.visit_mut(&join(prefix, "lstm"), f);
    }
}
