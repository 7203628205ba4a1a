use std::cmp::Ordering;

use super::{iou, Detection};

/// Total order used wherever detections are ranked: score descending, then
/// `cx`, `cy`, `w`, `h`, `class_id` ascending.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.cx.total_cmp(&b.bbox.cx))
        .then(a.bbox.cy.total_cmp(&b.bbox.cy))
        .then(a.bbox.w.total_cmp(&b.bbox.w))
        .then(a.bbox.h.total_cmp(&b.bbox.h))
        .then(a.class_id.cmp(&b.class_id))
}

/// Greedy per-class suppression. Detections below `score_thr` are dropped;
/// a candidate survives unless a higher-ranked survivor of its class
/// overlaps it with IoU above `iou_thr`. Survivors come back in
/// [`detection_order`].
pub fn nms(dets: &[Detection], iou_thr: f64, score_thr: f64) -> Vec<Detection> {
    let mut cand: Vec<Detection> = dets
        .iter()
        .copied()
        .filter(|d| d.score >= score_thr)
        .collect();
    cand.sort_by(|a, b| a.class_id.cmp(&b.class_id).then(detection_order(a, b)));
    let mut kept: Vec<Detection> = Vec::new();
    let mut class_start = 0;
    for d in cand {
        if kept
            .get(class_start)
            .is_some_and(|k| k.class_id != d.class_id)
        {
            class_start = kept.len();
        }
        if kept[class_start..]
            .iter()
            .all(|k| iou(&k.bbox, &d.bbox) <= iou_thr)
        {
            kept.push(d);
        }
    }
    kept.sort_by(detection_order);
    kept
}
