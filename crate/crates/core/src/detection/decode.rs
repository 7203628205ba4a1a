use serde::{Deserialize, Serialize};

use super::{nms, BBox, Detection, RawPrediction};
use crate::error::{EmfError, Result};
use crate::tensor::sigmoid;

/// Box for cell `(gx, gy)` of a stride-`s` level from `(tx, ty, tw, th)`:
/// center `((gx + tx) s, (gy + ty) s)`, extent `(exp(tw) s, exp(th) s)`.
pub fn decode_cell(gx: usize, gy: usize, stride: usize, t: [f64; 4]) -> BBox {
    let s = stride as f64;
    BBox {
        cx: (gx as f64 + t[0]) * s,
        cy: (gy as f64 + t[1]) * s,
        w: t[2].exp() * s,
        h: t[3].exp() * s,
    }
}

/// Inverse of [`decode_cell`]: the regression targets that reproduce `b`.
pub fn encode_cell(b: &BBox, gx: usize, gy: usize, stride: usize) -> [f64; 4] {
    let s = stride as f64;
    [
        b.cx / s - gx as f64,
        b.cy / s - gy as f64,
        (b.w / s).ln(),
        (b.h / s).ln(),
    ]
}

/// Every `(cell, class)` pair whose score `sigmoid(obj) * sigmoid(cls)` is
/// at least `score_floor`.
pub fn decode(raw: &RawPrediction, score_floor: f64) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (li, level) in raw.levels.iter().enumerate() {
        let (nc, h, w) = level.cls.dims3()?;
        if level.obj.shape() != [1, h, w] || level.reg.shape() != [4, h, w] {
            return Err(EmfError::shape(format!(
                "level {} maps disagree: cls {:?}, obj {:?}, reg {:?}",
                li + 1,
                level.cls.shape(),
                level.obj.shape(),
                level.reg.shape()
            )));
        }
        let plane = h * w;
        let reg = level.reg.data();
        for gy in 0..h {
            for gx in 0..w {
                let i = gy * w + gx;
                let obj = sigmoid(level.obj.data()[i]) as f64;
                if obj < score_floor {
                    continue;
                }
                let t = [
                    reg[i] as f64,
                    reg[plane + i] as f64,
                    reg[2 * plane + i] as f64,
                    reg[3 * plane + i] as f64,
                ];
                let mut bbox = None;
                for c in 0..nc {
                    let score = obj * sigmoid(level.cls.data()[c * plane + i]) as f64;
                    if score < score_floor {
                        continue;
                    }
                    let b = match bbox {
                        Some(b) => b,
                        None => {
                            if t.iter().any(|v| !v.is_finite()) {
                                return Err(EmfError::Value(format!(
                                    "non-finite regression {t:?} at level {} cell ({gx}, {gy})",
                                    li + 1
                                )));
                            }
                            let b = decode_cell(gx, gy, level.stride, t);
                            if !b.is_valid() {
                                return Err(EmfError::Value(format!(
                                    "degenerate box {b:?} at level {} cell ({gx}, {gy})",
                                    li + 1
                                )));
                            }
                            bbox = Some(b);
                            b
                        }
                    };
                    out.push(Detection {
                        bbox: b,
                        class_id: c as u32,
                        score,
                    });
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostProcess {
    pub score_thr: f64,
    pub iou_thr: f64,
    /// Highest-scoring survivors kept per frame.
    pub max_detections: usize,
}

impl Default for PostProcess {
    fn default() -> Self {
        PostProcess {
            score_thr: 0.01,
            iou_thr: 0.45,
            max_detections: 100,
        }
    }
}

impl PostProcess {
    /// Thresholds for visual overlays rather than evaluation.
    pub fn overlay() -> Self {
        PostProcess {
            score_thr: 0.1,
            ..Default::default()
        }
    }
}

/// Decode, per-class NMS, then keep the best `max_detections`.
pub fn postprocess(raw: &RawPrediction, pp: &PostProcess) -> Result<Vec<Detection>> {
    let mut dets = nms(&decode(raw, pp.score_thr)?, pp.iou_thr, pp.score_thr);
    dets.truncate(pp.max_detections);
    Ok(dets)
}
