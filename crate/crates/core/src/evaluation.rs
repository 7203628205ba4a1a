//! COCO-style mAP[50:95] with the size-filtering protocols of the Gen1 and
//! 1Mpx automotive event datasets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::detection::{detection_order, iou, BBox, Detection, GtBox};
use crate::error::{EmfError, Result};

/// COCO keeps at most this many detections per (frame, class).
pub const MAX_DETS_PER_FRAME: usize = 100;

pub const RECALL_POINTS: usize = 101;

/// `0.50, 0.55, ..., 0.95`.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

/// Recall grid `0.00, 0.01, ..., 1.00`, computed as `i * 0.01` with the
/// final point pinned to 1, which is how the reference API builds it.
pub fn recall_grid() -> [f64; RECALL_POINTS] {
    let mut g: [f64; RECALL_POINTS] = std::array::from_fn(|i| i as f64 * 0.01);
    g[RECALL_POINTS - 1] = 1.0;
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolName {
    Gen1,
    Onempx,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub name: ProtocolName,
    pub min_side: f64,
    pub min_diag: f64,
    /// Input downsampling the protocol assumes for the encoder.
    pub spatial_divisor: u16,
}

impl EvalProtocol {
    pub fn new(name: ProtocolName) -> Self {
        let (min_side, min_diag, spatial_divisor) = match name {
            ProtocolName::Gen1 => (10.0, 30.0, 1),
            ProtocolName::Onempx => (20.0, 60.0, 2),
            ProtocolName::None => (0.0, 0.0, 1),
        };
        EvalProtocol {
            name,
            min_side,
            min_diag,
            spatial_divisor,
        }
    }

    /// Whether a box survives the size filter.
    pub fn keeps(&self, b: &BBox) -> bool {
        b.w.min(b.h) >= self.min_side && b.w.hypot(b.h) >= self.min_diag
    }
}

impl FromStr for EvalProtocol {
    type Err = EmfError;
    fn from_str(s: &str) -> Result<Self> {
        let name = match s.to_ascii_lowercase().as_str() {
            "gen1" => ProtocolName::Gen1,
            "1mpx" | "onempx" => ProtocolName::Onempx,
            "none" => ProtocolName::None,
            _ => {
                return Err(EmfError::Argument(format!(
                    "unknown protocol {s:?}; expected gen1, 1mpx or none"
                )))
            }
        };
        Ok(EvalProtocol::new(name))
    }
}

/// Drops boxes with a side below `min_side` or a diagonal below `min_diag`.
pub fn filter_protocol<T: Clone>(
    boxes: &[T],
    bbox: impl Fn(&T) -> BBox,
    protocol: &EvalProtocol,
) -> Vec<T> {
    boxes
        .iter()
        .filter(|b| protocol.keeps(&bbox(b)))
        .cloned()
        .collect()
}

/// Outcome for one detection of a single-class, single-frame matching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchResult {
    pub score: f64,
    /// Index of the matched ground truth, `None` for a false positive.
    pub gt: Option<usize>,
}

/// Greedy matching in the reference API's style. Detections are ranked by
/// [`detection_order`]; each takes the still-unmatched ground truth with the
/// highest IoU at or above the threshold, later ground truths winning ties.
/// Results come back in ranked order.
pub fn match_detections(dets: &[Detection], gts: &[BBox], iou_threshold: f64) -> Vec<MatchResult> {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| detection_order(a, b));
    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .map(|d| {
            let mut best = iou_threshold.min(1.0 - 1e-10);
            let mut m = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let v = iou(&d.bbox, gt);
                if v < best {
                    continue;
                }
                best = v;
                m = Some(g);
            }
            if let Some(g) = m {
                taken[g] = true;
            }
            MatchResult {
                score: d.score,
                gt: m,
            }
        })
        .collect()
}

/// 101-point interpolated AP from matches pooled over frames. `matches`
/// must already be in global rank order. `None` when there are no ground
/// truths.
pub fn average_precision(matches: &[MatchResult], num_gts: usize) -> Option<f64> {
    if num_gts == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(matches.len());
    let mut precision = Vec::with_capacity(matches.len());
    for (i, m) in matches.iter().enumerate() {
        tp += usize::from(m.gt.is_some());
        recall.push(tp as f64 / num_gts as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    // precision envelope: best precision at this or any higher recall
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let sum: f64 = recall_grid()
        .iter()
        .map(|&r| {
            let idx = recall.partition_point(|&v| v < r);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    Some(sum / RECALL_POINTS as f64)
}

/// One detection or ground truth tagged with the frame it belongs to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Framed<T> {
    pub frame: u64,
    pub item: T,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassResult {
    pub class_id: u32,
    pub num_gts: usize,
    pub num_dets: usize,
    /// AP at each IoU threshold; empty when the class has no ground truth.
    pub ap_per_iou: Vec<f64>,
    /// Mean over IoU thresholds; `None` (excluded from the mean) when the
    /// class has no ground truth.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub protocol: EvalProtocol,
    pub iou_thresholds: Vec<f64>,
    pub classes: Vec<ClassResult>,
    /// Mean of the defined per-class APs; `None` if no class has ground truth.
    pub map: Option<f64>,
    pub frames: usize,
    pub num_gts: usize,
    pub num_dets: usize,
}

impl EvalResult {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "protocol {:?}, {} frames",
            self.protocol.name, self.frames
        );
        let _ = writeln!(
            s,
            "{:>6} {:>7} {:>7} {:>8} {:>8} {:>8}",
            "class", "gts", "dets", "AP50", "AP75", "AP"
        );
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.4}", v));
        for c in &self.classes {
            let _ = writeln!(
                s,
                "{:>6} {:>7} {:>7} {:>8} {:>8} {:>8}",
                c.class_id,
                c.num_gts,
                c.num_dets,
                fmt(c.ap_per_iou.first().copied()),
                fmt(c.ap_per_iou.get(5).copied()),
                fmt(c.ap)
            );
        }
        let _ = writeln!(s, "mAP[50:95] {}", fmt(self.map));
        s
    }
}

/// mAP[50:95] over the frames that carry ground truth. Both sides are size
/// filtered first; detections on frames without ground truth are ignored.
/// Classes `0..num_classes` are reported, plus any class id seen in the data.
pub fn map_50_95(
    dets: &[Framed<Detection>],
    gts: &[Framed<GtBox>],
    protocol: &EvalProtocol,
    num_classes: usize,
) -> EvalResult {
    let frames: BTreeSet<u64> = gts.iter().map(|g| g.frame).collect();
    let gts = filter_protocol(gts, |g| g.item.bbox, protocol);
    let dets: Vec<Framed<Detection>> = filter_protocol(dets, |d| d.item.bbox, protocol)
        .into_iter()
        .filter(|d| frames.contains(&d.frame))
        .collect();

    let mut classes: BTreeSet<u32> = (0..num_classes as u32).collect();
    classes.extend(gts.iter().map(|g| g.item.class_id));
    classes.extend(dets.iter().map(|d| d.item.class_id));

    let mut results = Vec::with_capacity(classes.len());
    let mut used_dets = 0;
    for &class in &classes {
        let mut per_frame: BTreeMap<u64, (Vec<BBox>, Vec<Detection>)> = BTreeMap::new();
        for g in gts.iter().filter(|g| g.item.class_id == class) {
            per_frame.entry(g.frame).or_default().0.push(g.item.bbox);
        }
        for d in dets.iter().filter(|d| d.item.class_id == class) {
            per_frame.entry(d.frame).or_default().1.push(d.item);
        }
        for (_, ds) in per_frame.values_mut() {
            ds.sort_by(detection_order);
            ds.truncate(MAX_DETS_PER_FRAME);
        }
        let num_gts: usize = per_frame.values().map(|(g, _)| g.len()).sum();
        let num_dets: usize = per_frame.values().map(|(_, d)| d.len()).sum();
        used_dets += num_dets;
        let ap_per_iou: Vec<f64> = if num_gts == 0 {
            Vec::new()
        } else {
            iou_thresholds()
                .iter()
                .map(|&t| {
                    let mut pooled: Vec<(Detection, u64, bool)> = Vec::with_capacity(num_dets);
                    for (&frame, (g, d)) in &per_frame {
                        // `d` is already ranked, so results line up with it
                        for (det, m) in d.iter().zip(match_detections(d, g, t)) {
                            pooled.push((*det, frame, m.gt.is_some()));
                        }
                    }
                    pooled.sort_by(|a, b| detection_order(&a.0, &b.0).then(a.1.cmp(&b.1)));
                    let matches: Vec<MatchResult> = pooled
                        .iter()
                        .map(|(d, _, tp)| MatchResult {
                            score: d.score,
                            gt: tp.then_some(0),
                        })
                        .collect();
                    average_precision(&matches, num_gts).unwrap_or(0.0)
                })
                .collect()
        };
        let ap = (!ap_per_iou.is_empty())
            .then(|| ap_per_iou.iter().sum::<f64>() / ap_per_iou.len() as f64);
        results.push(ClassResult {
            class_id: class,
            num_gts,
            num_dets,
            ap_per_iou,
            ap,
        });
    }
    let defined: Vec<f64> = results.iter().filter_map(|c| c.ap).collect();
    let map = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    EvalResult {
        protocol: *protocol,
        iou_thresholds: iou_thresholds().to_vec(),
        classes: results,
        map,
        frames: frames.len(),
        num_gts: gts.len(),
        num_dets: used_dets,
    }
}
