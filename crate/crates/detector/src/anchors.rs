//! Anchor segments, the center/log-length box encoding and anchor matching.

use rosa_core::metrics::iou_1d;
use rosa_core::session::{Interval, TimeSpan};

use crate::error::{DetectorError, Result};

/// One anchor, in input-frame coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorSegment {
    pub level: usize,
    pub position: usize,
    pub scale_id: usize,
    pub center: f64,
    pub length: f64,
}

impl TimeSpan for AnchorSegment {
    fn t_start(&self) -> f64 {
        self.center - 0.5 * self.length
    }

    fn t_end(&self) -> f64 {
        self.center + 0.5 * self.length
    }
}

/// Anchors ordered by level, then time step, then scale. The anchor at step
/// `i` of a level with stride `s` is centered at `(i + 0.5) * s`, the middle
/// of the input frames that step covers.
pub fn generate_anchors(level_lengths: &[usize], strides: &[usize], scales_frames: &[f64]) -> Vec<AnchorSegment> {
    let mut out = Vec::with_capacity(level_lengths.iter().sum::<usize>() * scales_frames.len());
    for (level, (&n, &stride)) in level_lengths.iter().zip(strides).enumerate() {
        for position in 0..n {
            let center = (position as f64 + 0.5) * stride as f64;
            for (scale_id, &length) in scales_frames.iter().enumerate() {
                out.push(AnchorSegment {
                    level,
                    position,
                    scale_id,
                    center,
                    length,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SegmentDelta {
    pub d_center: f64,
    pub d_log_length: f64,
}

pub fn encode_segment<G: TimeSpan + ?Sized, A: TimeSpan + ?Sized>(gt: &G, anchor: &A) -> Result<SegmentDelta> {
    let (gl, al) = (gt.length(), anchor.length());
    if !(gl > 0.0 && al > 0.0) {
        return Err(DetectorError::Segment(format!("lengths must be positive, got {gl} and {al}")));
    }
    let gc = 0.5 * (gt.t_start() + gt.t_end());
    let ac = 0.5 * (anchor.t_start() + anchor.t_end());
    Ok(SegmentDelta {
        d_center: (gc - ac) / al,
        d_log_length: (gl / al).ln(),
    })
}

pub fn decode_segment<A: TimeSpan + ?Sized>(delta: SegmentDelta, anchor: &A) -> Interval {
    let al = anchor.length();
    let ac = 0.5 * (anchor.t_start() + anchor.t_end());
    let c = ac + delta.d_center * al;
    let l = al * delta.d_log_length.exp();
    Interval::new(c - 0.5 * l, c + 0.5 * l)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnchorLabel {
    Positive { gt: usize, target: SegmentDelta },
    Negative,
    Ignore,
}

impl AnchorLabel {
    pub fn is_positive(&self) -> bool {
        matches!(self, AnchorLabel::Positive { .. })
    }
}

/// Positive when IoU >= `pos_iou` with some ground truth, or when the anchor
/// ties for the best IoU of a ground truth that overlaps any anchor; negative
/// when the best IoU is below `neg_iou`; ignored otherwise.
pub fn match_anchors<A: TimeSpan, G: TimeSpan>(
    anchors: &[A],
    gts: &[G],
    pos_iou: f64,
    neg_iou: f64,
) -> Result<Vec<AnchorLabel>> {
    if !(0.0 <= neg_iou && neg_iou < pos_iou && pos_iou <= 1.0) {
        return Err(DetectorError::Config(format!(
            "need 0 <= neg < pos <= 1, got neg={neg_iou} pos={pos_iou}"
        )));
    }
    let mut labels = vec![AnchorLabel::Negative; anchors.len()];
    if gts.is_empty() {
        return Ok(labels);
    }
    let mut gt_best = vec![0.0f64; gts.len()];
    let mut ious = vec![0.0f64; anchors.len() * gts.len()];
    for (a, anchor) in anchors.iter().enumerate() {
        let mut best = (0usize, f64::NEG_INFINITY);
        for (g, gt) in gts.iter().enumerate() {
            let iou = iou_1d(anchor, gt);
            ious[a * gts.len() + g] = iou;
            if iou > best.1 {
                best = (g, iou);
            }
            gt_best[g] = gt_best[g].max(iou);
        }
        labels[a] = if best.1 >= pos_iou {
            AnchorLabel::Positive {
                gt: best.0,
                target: encode_segment(&gts[best.0], anchor)?,
            }
        } else if best.1 < neg_iou {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignore
        };
    }
    for (g, gt) in gts.iter().enumerate() {
        if gt_best[g] <= 0.0 {
            continue;
        }
        for (a, anchor) in anchors.iter().enumerate() {
            if ious[a * gts.len() + g] == gt_best[g] && !labels[a].is_positive() {
                labels[a] = AnchorLabel::Positive {
                    gt: g,
                    target: encode_segment(gt, anchor)?,
                };
            }
        }
    }
    Ok(labels)
}
