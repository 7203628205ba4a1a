use serde::Serialize;

use super::{assign_targets, decode_cell, iou, GtBox, RawPrediction};
use crate::error::{EmfError, Result};

pub const DEFAULT_LAMBDA: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    /// `cls + lambda * reg`
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
    pub lambda: f64,
    pub num_positive: usize,
    /// False when there were no positive cells and `reg` was set to 0.
    pub reg_defined: bool,
}

/// Numerically stable `BCE(sigmoid(z), y)`.
pub fn bce_with_logits(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Classification term: mean objectness BCE over every cell plus, averaged
/// over positive cells, the class BCE summed over classes against a one-hot
/// target. Regression term: mean `1 - IoU` between the decoded box and its
/// matched ground truth over positive cells.
pub fn compute_loss(raw: &RawPrediction, gts: &[GtBox], lambda: f64) -> Result<LossBreakdown> {
    let mut geometry = Vec::with_capacity(raw.levels.len());
    for l in &raw.levels {
        let (_, h, w) = l.obj.dims3()?;
        geometry.push((h, w, l.stride));
    }
    let num_classes = raw.levels.first().map_or(0, |l| l.cls.shape()[0]);
    if let Some(g) = gts.iter().find(|g| g.class_id as usize >= num_classes) {
        return Err(EmfError::Value(format!(
            "ground-truth class {} outside the head's {num_classes} classes",
            g.class_id
        )));
    }
    let assignment = assign_targets(gts, &geometry);

    let mut obj_sum = 0.0;
    let mut cells = 0usize;
    let mut cls_sum = 0.0;
    let mut reg_sum = 0.0;
    let mut positives = 0usize;
    for (level, asg) in raw.levels.iter().zip(&assignment.levels) {
        let plane = asg.height * asg.width;
        let reg = level.reg.data();
        for (i, m) in asg.matched.iter().enumerate() {
            let z = level.obj.data()[i] as f64;
            obj_sum += bce_with_logits(z, if m.is_some() { 1.0 } else { 0.0 });
            cells += 1;
            let Some(gi) = *m else { continue };
            let g = &gts[gi];
            for c in 0..num_classes {
                let y = if c as u32 == g.class_id { 1.0 } else { 0.0 };
                cls_sum += bce_with_logits(level.cls.data()[c * plane + i] as f64, y);
            }
            let t = [0, 1, 2, 3].map(|k| reg[k * plane + i] as f64);
            let b = decode_cell(i % asg.width, i / asg.width, asg.stride, t);
            reg_sum += 1.0 - iou(&b, &g.bbox);
            positives += 1;
        }
    }
    let obj = if cells > 0 {
        obj_sum / cells as f64
    } else {
        0.0
    };
    let (cls_pos, reg) = if positives > 0 {
        (cls_sum / positives as f64, reg_sum / positives as f64)
    } else {
        (0.0, 0.0)
    };
    let cls = obj + cls_pos;
    Ok(LossBreakdown {
        total: cls + lambda * reg,
        cls,
        reg,
        lambda,
        num_positive: positives,
        reg_defined: positives > 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::{encode_cell, BBox, LevelPrediction};
    use crate::tensor::Tensor;

    fn blank(h: usize, w: usize, stride: usize, classes: usize) -> LevelPrediction {
        LevelPrediction {
            stride,
            cls: Tensor::full(&[classes, h, w], -40.0),
            obj: Tensor::full(&[1, h, w], -40.0),
            reg: Tensor::zeros(&[4, h, w]),
        }
    }

    #[test]
    fn bce_values() {
        assert!((bce_with_logits(0.0, 1.0) - 2f64.ln()).abs() < 1e-12);
        assert!(bce_with_logits(40.0, 1.0) < 1e-15);
        assert!((bce_with_logits(-3.0, 0.25) - 0.798_587).abs() < 1e-6);
    }

    #[test]
    fn perfect_prediction_has_near_zero_loss() {
        let g = GtBox {
            bbox: BBox::new(20.0, 20.0, 30.0, 26.0),
            class_id: 1,
        };
        let mut level = blank(5, 5, 8, 2);
        let asg = assign_targets(&[g], &[(5, 5, 8)]);
        assert!(asg.num_positive() > 0);
        for (i, m) in asg.levels[0].matched.iter().enumerate() {
            if m.is_some() {
                level.obj.data_mut()[i] = 40.0;
                level.cls.data_mut()[25 + i] = 40.0;
                let t = encode_cell(&g.bbox, i % 5, i / 5, 8);
                for (k, tk) in t.iter().enumerate() {
                    level.reg.data_mut()[k * 25 + i] = *tk as f32;
                }
            }
        }
        let raw = RawPrediction {
            levels: vec![level],
        };
        let l = compute_loss(&raw, &[g], DEFAULT_LAMBDA).unwrap();
        assert!(l.total < 1e-3, "{l:?}");
        assert_eq!(l.total, l.cls + l.lambda * l.reg);
        let l0 = compute_loss(&raw, &[g], 0.0).unwrap();
        assert_eq!(l0.total, l0.cls);
    }

    #[test]
    fn half_overlap_gives_half_regression_loss() {
        // one positive cell (1, 1) at stride 8 with center (12, 12)
        let g = GtBox {
            bbox: BBox::new(12.0, 12.0, 4.0, 4.0),
            class_id: 0,
        };
        let mut level = blank(3, 3, 8, 1);
        // predicted box: width 8, same center. IoU = 16 / 32 = 0.5
        let t = encode_cell(&BBox::new(12.0, 12.0, 8.0, 4.0), 1, 1, 8);
        for (k, tk) in t.iter().enumerate() {
            level.reg.data_mut()[k * 9 + 4] = *tk as f32;
        }
        let l = compute_loss(
            &RawPrediction {
                levels: vec![level],
            },
            &[g],
            1.0,
        )
        .unwrap();
        assert_eq!(l.num_positive, 1);
        assert!((l.reg - 0.5).abs() < 1e-6, "{}", l.reg);
    }

    #[test]
    fn no_positives_flags_regression() {
        let raw = RawPrediction {
            levels: vec![blank(2, 2, 8, 2)],
        };
        let l = compute_loss(&raw, &[], DEFAULT_LAMBDA).unwrap();
        assert!(!l.reg_defined);
        assert_eq!(l.reg, 0.0);
    }
}
