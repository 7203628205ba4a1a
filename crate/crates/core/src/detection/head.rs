use super::{LevelPrediction, RawPrediction};
use crate::backbone::{OpCount, Parameters, Trace, Visit, VisitMut};
use crate::error::{EmfError, Result};
use crate::tensor::{
    add_assign, conv2d, crop, gelu_inplace, nearest_upsample2x, ConvParams, Tensor,
};

/// Top-down feature pyramid plus a decoupled head whose weights are shared
/// across pyramid levels.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionHead {
    pub strides: Vec<usize>,
    /// 1x1, level width -> head width, fine to coarse.
    pub lateral: Vec<ConvParams>,
    /// 3x3 smoothing after the top-down merge.
    pub smooth: Vec<ConvParams>,
    pub stem: ConvParams,
    pub cls_convs: Vec<ConvParams>,
    pub reg_convs: Vec<ConvParams>,
    pub cls_pred: ConvParams,
    pub reg_pred: ConvParams,
    pub obj_pred: ConvParams,
}

impl DetectionHead {
    pub fn zeros(
        level_channels: &[usize],
        strides: &[usize],
        width: usize,
        num_classes: usize,
    ) -> Self {
        DetectionHead {
            strides: strides.to_vec(),
            lateral: level_channels
                .iter()
                .map(|&c| ConvParams::zeros(width, c, 1, 1, 1))
                .collect(),
            smooth: level_channels
                .iter()
                .map(|_| ConvParams::zeros(width, width, 3, 1, 1))
                .collect(),
            stem: ConvParams::zeros(width, width, 1, 1, 1),
            cls_convs: (0..2)
                .map(|_| ConvParams::zeros(width, width, 3, 1, 1))
                .collect(),
            reg_convs: (0..2)
                .map(|_| ConvParams::zeros(width, width, 3, 1, 1))
                .collect(),
            cls_pred: ConvParams::zeros(num_classes, width, 1, 1, 1),
            reg_pred: ConvParams::zeros(4, width, 1, 1, 1),
            obj_pred: ConvParams::zeros(1, width, 1, 1, 1),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.cls_pred.out_channels()
    }

    pub fn width(&self) -> usize {
        self.stem.out_channels()
    }

    pub fn ops(&self) -> OpCount {
        let levels = self.lateral.len();
        let per_level = 1 + self.cls_convs.len() + self.reg_convs.len() + 3;
        OpCount {
            convs: 2 * levels + per_level * levels,
            batchnorms: 0,
        }
    }
}

impl Parameters for DetectionHead {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        for (i, c) in self.lateral.iter().enumerate() {
            c.visit(&format!("{prefix}.fpn.lateral{}", i + 1), f);
        }
        for (i, c) in self.smooth.iter().enumerate() {
            c.visit(&format!("{prefix}.fpn.smooth{}", i + 1), f);
        }
        self.stem.visit(&format!("{prefix}.stem"), f);
        for (i, c) in self.cls_convs.iter().enumerate() {
            c.visit(&format!("{prefix}.cls{}", i + 1), f);
        }
        for (i, c) in self.reg_convs.iter().enumerate() {
            c.visit(&format!("{prefix}.reg{}", i + 1), f);
        }
        self.cls_pred.visit(&format!("{prefix}.cls_pred"), f);
        self.reg_pred.visit(&format!("{prefix}.reg_pred"), f);
        self.obj_pred.visit(&format!("{prefix}.obj_pred"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        for (i, c) in self.lateral.iter_mut().enumerate() {
            c.visit_mut(&format!("{prefix}.fpn.lateral{}", i + 1), f);
        }
        for (i, c) in self.smooth.iter_mut().enumerate() {
            c.visit_mut(&format!("{prefix}.fpn.smooth{}", i + 1), f);
        }
        self.stem.visit_mut(&format!("{prefix}.stem"), f);
        for (i, c) in self.cls_convs.iter_mut().enumerate() {
            c.visit_mut(&format!("{prefix}.cls{}", i + 1), f);
        }
        for (i, c) in self.reg_convs.iter_mut().enumerate() {
            c.visit_mut(&format!("{prefix}.reg{}", i + 1), f);
        }
        self.cls_pred.visit_mut(&format!("{prefix}.cls_pred"), f);
        self.reg_pred.visit_mut(&format!("{prefix}.reg_pred"), f);
        self.obj_pred.visit_mut(&format!("{prefix}.obj_pred"), f);
    }
}

/// Lateral 1x1 projections, top-down nearest upsampling with addition, and
/// a 3x3 smoothing conv per level. `levels` run fine to coarse. When a
/// coarse map upsamples past the finer lateral (odd sizes), its bottom and
/// right edges are cropped.
pub fn fpn_forward(levels: &[&Tensor], head: &DetectionHead) -> Result<Vec<Tensor>> {
    if levels.len() != head.lateral.len() {
        return Err(EmfError::shape(format!(
            "head built for {} levels, got {}",
            head.lateral.len(),
            levels.len()
        )));
    }
    let mut merged: Vec<Tensor> = Vec::with_capacity(levels.len());
    for (i, x) in levels.iter().enumerate().rev() {
        let mut lat = conv2d(x, &head.lateral[i])?;
        if let Some(coarser) = merged.last() {
            let (_, h, w) = lat.dims3()?;
            let up = nearest_upsample2x(coarser)?;
            let (_, uh, uw) = up.dims3()?;
            if uh < h || uw < w || uh > h + 1 || uw > w + 1 {
                return Err(EmfError::shape(format!(
                    "upsampled map {:?} cannot align with lateral {:?}",
                    up.shape(),
                    lat.shape()
                )));
            }
            add_assign(&mut lat, &crop(&up, h, w)?)?;
        }
        merged.push(lat);
    }
    merged.reverse();
    merged
        .iter()
        .zip(&head.smooth)
        .map(|(m, s)| conv2d(m, s))
        .collect()
}

fn conv_gelu(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let mut y = conv2d(x, p)?;
    gelu_inplace(&mut y);
    Ok(y)
}

fn level_forward(x: &Tensor, head: &DetectionHead, stride: usize) -> Result<LevelPrediction> {
    let stem = conv_gelu(x, &head.stem)?;
    let mut c = stem.clone();
    for p in &head.cls_convs {
        c = conv_gelu(&c, p)?;
    }
    let mut r = stem;
    for p in &head.reg_convs {
        r = conv_gelu(&r, p)?;
    }
    Ok(LevelPrediction {
        stride,
        cls: conv2d(&c, &head.cls_pred)?,
        obj: conv2d(&r, &head.obj_pred)?,
        reg: conv2d(&r, &head.reg_pred)?,
    })
}

/// Decoupled head over uniform-width pyramid features: a shared 1x1 stem,
/// then a classification branch and a box/objectness branch.
pub fn head_forward(features: &[Tensor], head: &DetectionHead) -> Result<RawPrediction> {
    if features.len() != head.strides.len() {
        return Err(EmfError::shape(format!(
            "head expects {} levels, got {}",
            head.strides.len(),
            features.len()
        )));
    }
    let levels = features
        .iter()
        .zip(&head.strides)
        .map(|(f, &s)| level_forward(f, head, s))
        .collect::<Result<_>>()?;
    Ok(RawPrediction { levels })
}

/// Pyramid and head in one call, optionally recording intermediate maps.
pub fn head_forward_traced(
    levels: &[&Tensor],
    head: &DetectionHead,
    mut trace: Option<&mut Trace>,
) -> Result<RawPrediction> {
    let feats = fpn_forward(levels, head)?;
    if let Some(tr) = trace.as_deref_mut() {
        for (i, f) in feats.iter().enumerate() {
            tr.push((format!("fpn.p{}", i + 1), f.clone()));
        }
    }
    let raw = head_forward(&feats, head)?;
    if let Some(tr) = trace {
        for (name, t) in raw.maps() {
            tr.push((name, t.clone()));
        }
    }
    Ok(raw)
}
