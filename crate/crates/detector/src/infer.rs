//! Trained parameters plus whole-night inference.

use rosa_core::dsp::ThreeChannelSpectrogram;
use rosa_core::session::{DetectedSegment, EventCategory, Interval, TimeSpan};

use crate::anchors::{decode_segment, SegmentDelta};
use crate::error::{DetectorError, Result};
use crate::model::{clamp_delta, input_array, softmax_row, ArchConfig, Network, Proposal, N_CLASSES};
use crate::nms::nms_1d;

pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Model {
    pub net: Network,
    pub params: Vec<f64>,
    pub seed: u64,
}

/// A head-refined segment before conversion to seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSegment {
    pub segment: Interval,
    pub score: f64,
    pub category: EventCategory,
    pub class_probs: [f64; N_CLASSES],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectOptions {
    pub score_floor: f64,
}

impl Default for DetectOptions {
    fn default() -> Self {
        Self { score_floor: 0.05 }
    }
}

impl Model {
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        let net = Network::new(arch)?;
        let params = net.init_params(seed);
        Ok(Self { net, params, seed })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.net.arch
    }

    /// Rounds every parameter through f32, matching what model.bin stores.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.params {
            *v = *v as f32 as f64;
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.params.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(DetectorError::Format(format!("parameter {i} is not finite"))),
        }
    }

    /// Head classification of fixed proposals; the refinement is decoded
    /// against each proposal and clipped to `[0, frames]`.
    pub fn classify(&self, level0: &ndarray::Array3<f64>, frames: usize, proposals: &[Proposal]) -> Vec<ScoredSegment> {
        if proposals.is_empty() {
            return Vec::new();
        }
        let rois: Vec<Interval> = proposals.iter().map(|p| p.segment).collect();
        let (out, _) = self.net.head_forward(&self.params, level0, &rois);
        let std = self.arch().head_delta_std;
        let t = frames as f64;
        rois.iter()
            .enumerate()
            .map(|(r, roi)| {
                let probs = softmax_row(&out.logits.row(r).to_vec());
                let mut class_probs = [0.0; N_CLASSES];
                class_probs.copy_from_slice(&probs);
                let best = (1..N_CLASSES)
                    .max_by(|&a, &b| probs[a].total_cmp(&probs[b]).then(b.cmp(&a)))
                    .expect("event classes");
                let delta = clamp_delta(SegmentDelta {
                    d_center: out.deltas[[r, 0]] * std.0,
                    d_log_length: out.deltas[[r, 1]] * std.1,
                });
                let mut seg = decode_segment(delta, roi);
                seg.start = seg.start.clamp(0.0, t);
                seg.end = seg.end.clamp(0.0, t);
                ScoredSegment {
                    segment: seg,
                    score: (1.0 - probs[0]).clamp(0.0, 1.0),
                    category: EventCategory::from_index(best - 1).expect("category index"),
                    class_probs,
                }
            })
            .collect()
    }

    /// Full pipeline on a whole session, no tiling. Outputs are in seconds.
    pub fn detect(&self, spec: &ThreeChannelSpectrogram, opts: &DetectOptions) -> Result<Vec<DetectedSegment>> {
        let rate = self.arch().frame_rate_hz;
        if (spec.frame_rate - rate).abs() > 1e-9 {
            return Err(DetectorError::Shape(format!(
                "spectrogram frame rate {} Hz, model expects {rate} Hz",
                spec.frame_rate
            )));
        }
        let x = input_array(spec);
        let fwd = self.net.forward(&self.params, &x)?;
        let proposals = self.net.proposals(&fwd);
        let scored = self.classify(&fwd.pyramid.levels[0], fwd.frames, &proposals);
        self.postprocess(&scored, rate, opts)
    }

    /// Score floor, minimum duration and NMS over refined segments.
    pub fn postprocess(&self, scored: &[ScoredSegment], rate: f64, opts: &DetectOptions) -> Result<Vec<DetectedSegment>> {
        let min_len = self.arch().min_event_s * rate;
        let keep: Vec<&ScoredSegment> = scored
            .iter()
            .filter(|s| s.score >= opts.score_floor && s.score > 0.0 && s.segment.length() >= min_len)
            .collect();
        let segs: Vec<Interval> = keep.iter().map(|s| s.segment).collect();
        let scores: Vec<f64> = keep.iter().map(|s| s.score).collect();
        let classes: Vec<usize> = keep.iter().map(|s| s.category.index()).collect();
        let per_class = self.arch().per_class_nms.then_some(classes.as_slice());
        nms_1d(&segs, &scores, per_class, self.arch().detection_nms_iou)
            .into_iter()
            .map(|k| {
                let s = keep[k];
                DetectedSegment::new(s.category, s.score, s.segment.start / rate, s.segment.end / rate).map_err(Into::into)
            })
            .collect()
    }
}
