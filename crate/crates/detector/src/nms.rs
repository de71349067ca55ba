use std::cmp::Ordering;

use rosa_core::metrics::iou_1d;
use rosa_core::session::TimeSpan;

/// Ranking used by NMS and proposal selection: higher score first, then
/// earlier start, then longer segment, then input order.
pub fn rank_order<T: TimeSpan>(items: &[T], scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&i, &j| {
        scores[j]
            .total_cmp(&scores[i])
            .then(items[i].t_start().total_cmp(&items[j].t_start()))
            .then(items[j].length().total_cmp(&items[i].length()))
            .then(i.cmp(&j))
    });
    order
}

/// Greedy non-maximum suppression. Returns kept indices in rank order.
/// With `classes`, segments only suppress others of the same class.
pub fn nms_1d<T: TimeSpan>(items: &[T], scores: &[f64], classes: Option<&[usize]>, iou_threshold: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in rank_order(items, scores) {
        let suppressed = kept.iter().any(|&k| {
            let same = classes.is_none_or(|c| c[k] == c[i]);
            same && iou_1d(&items[k], &items[i]).partial_cmp(&iou_threshold) != Some(Ordering::Less)
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}
