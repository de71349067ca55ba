//! Crop sampling, target assignment and the SGD training loop.

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use rosa_core::dsp::ThreeChannelSpectrogram;
use rosa_core::metrics::iou_1d;
use rosa_core::session::{EventAnnotation, EventCategory, Interval};

use crate::anchors::{encode_segment, match_anchors};
use crate::error::{DetectorError, Result};
use crate::infer::Model;
use crate::model::{input_array, ArchConfig, CropTargets, LossBreakdown, N_CLASSES};
use crate::params::l2_norm;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub momentum: f64,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap per step.
    pub grad_clip: f64,
    pub crop_frames: usize,
    /// Crops drawn per epoch; `None` covers each session once on average.
    pub crops_per_epoch: Option<usize>,
    pub batch_size: usize,
    /// Probability that a crop is placed around a randomly chosen event.
    pub event_crop_probability: f64,
    /// Explicit weights for (background, CA, OA, MA, H); `None` derives
    /// inverse class frequencies from the training events.
    pub class_weights: Option<[f64; N_CLASSES]>,
    /// Background weight paired with derived event weights.
    pub background_weight: f64,
    pub spn_pos_iou: f64,
    pub spn_neg_iou: f64,
    pub rois_per_crop: usize,
    pub roi_fg_fraction: f64,
    pub roi_fg_iou: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            momentum: 0.9,
            base_lr: 0.01,
            weight_decay: 1e-4,
            grad_clip: 10.0,
            crop_frames: 1800,
            crops_per_epoch: None,
            batch_size: 4,
            event_crop_probability: 0.9,
            class_weights: None,
            background_weight: 1.0,
            spn_pos_iou: 0.7,
            spn_neg_iou: 0.3,
            rois_per_crop: 64,
            roi_fg_fraction: 0.25,
            roi_fg_iou: 0.5,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DetectorError::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.base_lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip > 0.0) {
            return bad("learning rate and clip must be positive, weight decay non-negative");
        }
        if self.batch_size == 0 || self.rois_per_crop == 0 || self.crops_per_epoch == Some(0) {
            return bad("batch size, RoI count and crops per epoch must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.event_crop_probability) || !(0.0..=1.0).contains(&self.roi_fg_fraction) {
            return bad("probabilities must lie in [0, 1]");
        }
        if !(0.0 < self.roi_fg_iou && self.roi_fg_iou <= 1.0) {
            return bad("roi_fg_iou must lie in (0, 1]");
        }
        if !(self.background_weight > 0.0) || !self.background_weight.is_finite() {
            return bad("background weight must be positive");
        }
        if let Some(w) = self.class_weights {
            if w.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return bad("class weights must be positive");
            }
        }
        Ok(())
    }

    /// Cosine-annealed rate for zero-based epoch `e`.
    pub fn lr_at(&self, e: usize) -> f64 {
        cosine_lr(self.base_lr, e, self.epochs)
    }
}

pub fn cosine_lr(base: f64, e: usize, epochs: usize) -> f64 {
    base * 0.5 * (1.0 + (std::f64::consts::PI * e as f64 / epochs as f64).cos())
}

/// One annotated session held as network input.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub input: Array3<f64>,
    pub frame_rate: f64,
    pub events: Vec<EventAnnotation>,
}

impl TrainingSample {
    pub fn new(spec: &ThreeChannelSpectrogram, events: Vec<EventAnnotation>) -> Self {
        Self {
            input: input_array(spec),
            frame_rate: spec.frame_rate,
            events,
        }
    }

    pub fn frames(&self) -> usize {
        self.input.dim().2
    }
}

/// Inverse class frequency `N / (K * N_c)` over the K event classes present;
/// absent classes and background get weight 1.
pub fn inverse_frequency_weights(events: &[EventAnnotation]) -> [f64; N_CLASSES] {
    let mut counts = [0usize; 4];
    for e in events {
        counts[e.category.index()] += 1;
    }
    let n: usize = counts.iter().sum();
    let k = counts.iter().filter(|&&c| c > 0).count();
    let mut w = [1.0; N_CLASSES];
    for (c, &nc) in counts.iter().enumerate() {
        if nc > 0 {
            w[c + 1] = n as f64 / (k as f64 * nc as f64);
        }
    }
    w
}

/// Ground truth inside a crop, in crop frames: events with at least half
/// their length inside, clipped to the crop.
pub fn events_in_crop(events: &[EventAnnotation], rate: f64, start: usize, len: usize) -> Vec<(EventCategory, Interval)> {
    let (c0, c1) = (start as f64, (start + len) as f64);
    events
        .iter()
        .filter_map(|e| {
            let (a, b) = (e.t_start * rate, e.t_end * rate);
            let (ca, cb) = (a.max(c0), b.min(c1));
            (cb - ca >= 0.5 * (b - a) && cb > ca).then(|| (e.category, Interval::new(ca - c0, cb - c0)))
        })
        .collect()
}

/// Crop start frame, centered loosely on a random event with probability
/// `event_p`.
pub fn sample_crop_start(sample: &TrainingSample, crop: usize, event_p: f64, rng: &mut impl Rng) -> usize {
    let t = sample.frames();
    if t <= crop {
        return 0;
    }
    let max_start = t - crop;
    if !sample.events.is_empty() && rng.random::<f64>() < event_p {
        let e = &sample.events[rng.random_range(0..sample.events.len())];
        let (a, b) = (e.t_start * sample.frame_rate, e.t_end * sample.frame_rate);
        let lo = ((b - crop as f64).ceil().max(0.0) as usize).min(max_start);
        let hi = (a.floor().max(0.0) as usize).min(max_start);
        if lo <= hi {
            return rng.random_range(lo..=hi);
        }
    }
    rng.random_range(0..=max_start)
}

/// RoI set for the head: current proposals plus the ground truth, split into
/// foreground (IoU >= `fg_iou`) and background, then subsampled.
pub fn sample_rois(
    proposals: &[Interval],
    gts: &[(EventCategory, Interval)],
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<(Vec<Interval>, Vec<usize>, Vec<Option<crate::anchors::SegmentDelta>>)> {
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for roi in proposals.iter().chain(gts.iter().map(|(_, g)| g)) {
        let best = gts
            .iter()
            .map(|(c, g)| (iou_1d(roi, g), *c, *g))
            .fold(None::<(f64, EventCategory, Interval)>, |acc, x| match acc {
                Some(a) if a.0 >= x.0 => Some(a),
                _ => Some(x),
            });
        match best {
            Some((iou, c, g)) if iou >= cfg.roi_fg_iou => fg.push((*roi, c.index() + 1, Some(encode_segment(&g, roi)?))),
            _ => bg.push((*roi, 0, None)),
        }
    }
    fg.shuffle(rng);
    bg.shuffle(rng);
    let n_fg = fg.len().min((cfg.roi_fg_fraction * cfg.rois_per_crop as f64).round() as usize);
    let n_bg = bg.len().min(cfg.rois_per_crop - n_fg);
    let chosen: Vec<_> = fg.into_iter().take(n_fg).chain(bg.into_iter().take(n_bg)).collect();
    Ok((
        chosen.iter().map(|c| c.0).collect(),
        chosen.iter().map(|c| c.1).collect(),
        chosen.iter().map(|c| c.2).collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,step,lr,loss_total,loss_spn_cls,loss_spn_reg,loss_head_cls,loss_head_reg";

pub fn train_log_csv(logs: &[EpochLog]) -> String {
    let mut s = String::from(TRAIN_LOG_HEADER);
    s.push('\n');
    for l in logs {
        s.push_str(&format!(
            "{},{},{:e},{:e},{:e},{:e},{:e},{:e}\n",
            l.epoch, l.step, l.lr, l.loss.total, l.loss.spn_cls, l.loss.spn_reg, l.loss.head_cls, l.loss.head_reg
        ));
    }
    s
}

pub fn write_train_log(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let io = |source| DetectorError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(train_log_csv(logs).as_bytes()).map_err(io)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub logs: Vec<EpochLog>,
    pub class_weights: [f64; N_CLASSES],
}

/// Targets for one crop against the model's current proposals.
pub fn crop_targets(
    model: &Model,
    fwd: &crate::model::Forward,
    gts: &[(EventCategory, Interval)],
    weights: [f64; N_CLASSES],
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<CropTargets> {
    let anchors = model.net.anchors(fwd.frames);
    let gt_segs: Vec<Interval> = gts.iter().map(|g| g.1).collect();
    let anchor_labels = match_anchors(&anchors, &gt_segs, cfg.spn_pos_iou, cfg.spn_neg_iou)?;
    let proposals: Vec<Interval> = model.net.proposals(fwd).into_iter().map(|p| p.segment).collect();
    let (rois, roi_classes, roi_deltas) = sample_rois(&proposals, gts, cfg, rng)?;
    Ok(CropTargets {
        anchor_labels,
        rois,
        roi_classes,
        roi_deltas,
        class_weights: weights,
    })
}

/// Trains from a seeded initialization. `on_epoch` sees each epoch's log.
pub fn train(
    samples: &[TrainingSample],
    arch: &ArchConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(DetectorError::Config("no training sessions".into()));
    }
    for s in samples {
        if (s.frame_rate - arch.frame_rate_hz).abs() > 1e-9 {
            return Err(DetectorError::Shape(format!(
                "session frame rate {} Hz, architecture expects {} Hz",
                s.frame_rate, arch.frame_rate_hz
            )));
        }
    }
    let mut model = Model::new(arch.clone(), cfg.seed)?;
    for s in samples {
        model.net.check_input(&s.input)?;
    }
    let all_events: Vec<EventAnnotation> = samples.iter().flat_map(|s| s.events.iter().copied()).collect();
    let weights = cfg.class_weights.unwrap_or_else(|| {
        let mut w = inverse_frequency_weights(&all_events);
        w[0] = cfg.background_weight;
        w
    });
    let crops_per_epoch = cfg.crops_per_epoch.unwrap_or_else(|| {
        samples
            .iter()
            .map(|s| s.frames().div_ceil(cfg.crop_frames))
            .sum::<usize>()
    });

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let n = model.params.len();
    let mut velocity = vec![0.0; n];
    let mut grad = vec![0.0; n];
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut crops: Vec<(usize, usize)> = (0..crops_per_epoch)
            .map(|i| {
                let si = i % samples.len();
                (si, sample_crop_start(&samples[si], cfg.crop_frames, cfg.event_crop_probability, &mut rng))
            })
            .collect();
        crops.shuffle(&mut rng);
        let mut epoch_loss = LossBreakdown::default();
        for batch in crops.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = LossBreakdown::default();
            for &(si, start) in batch {
                let s = &samples[si];
                let len = cfg.crop_frames.min(s.frames() - start);
                let x = s.input.slice(s![.., .., start..start + len]).to_owned();
                let gts = events_in_crop(&s.events, s.frame_rate, start, len);
                let fwd = model.net.forward(&model.params, &x)?;
                let targets = crop_targets(&model, &fwd, &gts, weights, cfg, &mut rng)?;
                let mut g = vec![0.0; n];
                let loss = model.net.loss(&model.params, &fwd, &targets, Some(&mut g))?;
                if !loss.is_finite() {
                    return Err(DetectorError::NonFinite {
                        epoch: epoch + 1,
                        step,
                        detail: format!("{loss:?}"),
                    });
                }
                batch_loss.add_scaled(&loss, scale);
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += scale * b;
                }
            }
            let norm = l2_norm(&grad);
            if !norm.is_finite() {
                return Err(DetectorError::NonFinite {
                    epoch: epoch + 1,
                    step,
                    detail: "gradient norm".into(),
                });
            }
            let clip = if norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
            for ((p, v), g) in model.params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = cfg.momentum * *v + clip * g + cfg.weight_decay * *p;
                *p -= lr * *v;
            }
            step += 1;
            epoch_loss.add_scaled(&batch_loss, batch.len() as f64 / crops.len() as f64);
        }
        let log = EpochLog {
            epoch: epoch + 1,
            step,
            lr,
            loss: epoch_loss,
        };
        on_epoch(&log);
        logs.push(log);
    }
    model.quantize_f32();
    model.check_finite()?;
    Ok(TrainOutcome {
        model,
        logs,
        class_weights: weights,
    })
}
