//! Anchor-free detection: feature pyramid, decoupled head, per-cell box
//! decoding, non-maximum suppression, target assignment and the training
//! loss.

mod assign;
mod decode;
mod head;
mod loss;
mod nms;

pub use assign::{assign_targets, Assignment, LevelAssignment, CENTER_RADIUS};
pub use decode::{decode, decode_cell, encode_cell, postprocess, PostProcess};
pub use head::{fpn_forward, head_forward, head_forward_traced, DetectionHead};
pub use loss::{bce_with_logits, compute_loss, LossBreakdown, DEFAULT_LAMBDA};
pub use nms::{detection_order, nms};

use serde::{Deserialize, Serialize};

use crate::event_io::LabeledBox;
use crate::tensor::Tensor;

/// Axis-aligned box given by its center and extent, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn from_corner(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox {
            cx: x + w / 2.0,
            cy: y + h / 2.0,
            w,
            h,
        }
    }

    pub fn x0(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn y0(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn x1(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn y1(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0
            && self.h > 0.0
            && [self.cx, self.cy, self.w, self.h]
                .iter()
                .all(|v| v.is_finite())
    }

    pub fn scaled(&self, s: f64) -> BBox {
        BBox::new(self.cx * s, self.cy * s, self.w * s, self.h * s)
    }
}

/// Intersection over union of two axis-aligned boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x1().min(b.x1()) - a.x0().max(b.x0())).max(0.0);
    let ih = (a.y1().min(b.y1()) - a.y0().max(b.y0())).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: u32,
    pub score: f64,
}

/// A ground-truth box in network-input pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub bbox: BBox,
    pub class_id: u32,
}

impl GtBox {
    /// Converts a sensor-space label, dividing coordinates by the encoder's
    /// spatial divisor.
    pub fn from_label(l: &LabeledBox, spatial_divisor: f64) -> Self {
        GtBox {
            bbox: BBox::from_corner(l.x, l.y, l.w, l.h).scaled(1.0 / spatial_divisor),
            class_id: l.class_id,
        }
    }
}

/// Raw head outputs of one pyramid level; all maps are logits except `reg`.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelPrediction {
    pub stride: usize,
    /// `(num_classes, H, W)`
    pub cls: Tensor,
    /// `(1, H, W)`
    pub obj: Tensor,
    /// `(4, H, W)`: `tx, ty, tw, th`
    pub reg: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawPrediction {
    pub levels: Vec<LevelPrediction>,
}

impl RawPrediction {
    pub fn num_cells(&self) -> usize {
        self.levels
            .iter()
            .map(|l| l.obj.shape()[1] * l.obj.shape()[2])
            .sum()
    }

    /// Named maps, for comparisons between model forms.
    pub fn maps(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.levels.iter().enumerate() {
            out.push((format!("head.level{}.cls", i + 1), &l.cls));
            out.push((format!("head.level{}.obj", i + 1), &l.obj));
            out.push((format!("head.level{}.reg", i + 1), &l.reg));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iou_examples() {
        let a = BBox::new(10.0, 10.0, 4.0, 6.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(100.0, 10.0, 4.0, 6.0)), 0.0);
        let u = BBox::new(0.0, 0.0, 1.0, 1.0);
        let v = BBox::new(0.5, 0.0, 1.0, 1.0);
        assert!((iou(&u, &v) - 1.0 / 3.0).abs() < 1e-12);
        // touching edges share no area
        assert_eq!(iou(&u, &BBox::new(1.0, 0.0, 1.0, 1.0)), 0.0);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0f64..50.0, -50.0f64..50.0, 0.1f64..40.0, 0.1f64..40.0)
            .prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let x = iou(&a, &b);
            prop_assert_eq!(x, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&x));
            if a != b {
                prop_assert!(x < 1.0);
            }
        }
    }
}
