//! Network definition: residual conv backbone over (range, time), range
//! pooling, a three-level feature pyramid, the segment proposal network and
//! the RoI classification head, with hand-written backward passes.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use rosa_core::dsp::ThreeChannelSpectrogram;
use rosa_core::session::{Interval, TimeSpan};

use crate::anchors::{decode_segment, generate_anchors, AnchorLabel, AnchorSegment, SegmentDelta};
use crate::error::{DetectorError, Result};
use crate::layers::*;
use crate::nms::{nms_1d, rank_order};
use crate::params::Layout;

pub const LEVEL_STRIDES: [usize; 3] = [4, 8, 16];
pub const N_CLASSES: usize = 5;
pub const CLASS_NAMES: [&str; N_CLASSES] = ["background", "CA", "OA", "MA", "H"];
/// Smallest input length the pyramid accepts.
pub const MIN_FRAMES: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub n_range_bins: usize,
    pub width: usize,
    pub kernel: usize,
    pub range_pool: RangePool,
    pub anchor_scales_s: Vec<f64>,
    pub frame_rate_hz: f64,
    pub roi_output: usize,
    /// Fraction of a RoI's length added on each side before pooling.
    pub roi_context: f64,
    pub head_hidden: usize,
    /// Scale of the head's regression targets (center, log length).
    pub head_delta_std: (f64, f64),
    /// Proposal budget before and after NMS per `reference_frames` of input.
    pub pre_nms_top_k: usize,
    pub post_nms_top_k: usize,
    pub reference_frames: usize,
    pub proposal_nms_iou: f64,
    pub detection_nms_iou: f64,
    pub per_class_nms: bool,
    pub min_event_s: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            n_range_bins: 32,
            width: 64,
            kernel: 3,
            range_pool: RangePool::Mean,
            anchor_scales_s: vec![15.0, 30.0, 60.0, 120.0],
            frame_rate_hz: 1.0,
            roi_output: 8,
            roi_context: 0.5,
            head_hidden: 128,
            head_delta_std: (0.1, 0.2),
            pre_nms_top_k: 200,
            post_nms_top_k: 100,
            reference_frames: 1800,
            proposal_nms_iou: 0.7,
            detection_nms_iou: 0.5,
            per_class_nms: false,
            min_event_s: 10.0,
        }
    }
}

impl ArchConfig {
    /// Narrow variant that trains in minutes on one CPU core.
    pub fn small() -> Self {
        Self {
            width: 16,
            head_hidden: 64,
            ..Self::default()
        }
    }

    pub fn n_anchor_scales(&self) -> usize {
        self.anchor_scales_s.len()
    }

    pub fn scales_frames(&self) -> Vec<f64> {
        self.anchor_scales_s.iter().map(|s| s * self.frame_rate_hz).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.head_hidden == 0 || self.roi_output == 0 || self.kernel % 2 == 0 {
            return Err(DetectorError::Config("widths must be > 0 and the kernel odd".into()));
        }
        if self.anchor_scales_s.is_empty() || self.anchor_scales_s.iter().any(|s| !(*s > 0.0)) {
            return Err(DetectorError::Config("anchor scales must be positive".into()));
        }
        if self.n_range_bins < 4 || !(self.frame_rate_hz > 0.0) {
            return Err(DetectorError::Config("need >= 4 range bins and a positive frame rate".into()));
        }
        Ok(())
    }

    /// Pyramid level lengths for an input of `t` frames.
    pub fn level_lengths(&self, t: usize) -> [usize; 3] {
        let l0 = t / 4;
        let l1 = l0 / 2;
        [l0, l1, l1 / 2]
    }

    fn budget(&self, k: usize, t: usize) -> usize {
        ((k as f64 * t as f64 / self.reference_frames as f64).ceil() as usize).max(1)
    }
}

/// All layers with their parameter locations.
#[derive(Debug, Clone)]
pub struct Network {
    pub arch: ArchConfig,
    pub layout: Layout,
    stem: Conv,
    b1c1: Conv,
    b1c2: Conv,
    down: Conv,
    b2c1: Conv,
    b2c2: Conv,
    conv3: Conv,
    conv4: Conv,
    lat: [Conv; 3],
    smooth: [Conv; 3],
    spn_conv: Conv,
    spn_obj: Conv,
    spn_del: Conv,
    fc1: Linear,
    fc2: Linear,
    cls: Linear,
    reg: Linear,
}

impl Network {
    pub fn new(arch: ArchConfig) -> Result<Self> {
        arch.validate()?;
        let mut l = Layout::default();
        let (c, k) = (arch.width, arch.kernel);
        let a = arch.n_anchor_scales();
        let stem = Conv::new2d(&mut l, "backbone.stem", arch.in_channels, c, k, 2);
        let b1c1 = Conv::new2d(&mut l, "backbone.block1.conv1", c, c, k, 1);
        let b1c2 = Conv::new2d(&mut l, "backbone.block1.conv2", c, c, k, 1);
        let down = Conv::new2d(&mut l, "backbone.down", c, c, k, 2);
        let b2c1 = Conv::new2d(&mut l, "backbone.block2.conv1", c, c, k, 1);
        let b2c2 = Conv::new2d(&mut l, "backbone.block2.conv2", c, c, k, 1);
        let conv3 = Conv::new1d(&mut l, "backbone.c3", c, c, k, 2);
        let conv4 = Conv::new1d(&mut l, "backbone.c4", c, c, k, 2);
        let lat = [0, 1, 2].map(|i| Conv::new1d(&mut l, &format!("fpn.lateral{i}"), c, c, 1, 1));
        let smooth = [0, 1, 2].map(|i| Conv::new1d(&mut l, &format!("fpn.smooth{i}"), c, c, k, 1));
        let spn_conv = Conv::new1d(&mut l, "spn.conv", c, c, k, 1);
        let spn_obj = Conv::new1d(&mut l, "spn.objectness", c, a, 1, 1);
        let spn_del = Conv::new1d(&mut l, "spn.deltas", c, 2 * a, 1, 1);
        let fc1 = Linear::new(&mut l, "head.fc1", c * arch.roi_output, arch.head_hidden);
        let fc2 = Linear::new(&mut l, "head.fc2", arch.head_hidden, arch.head_hidden);
        let cls = Linear::new(&mut l, "head.cls", arch.head_hidden, N_CLASSES);
        let reg = Linear::new(&mut l, "head.reg", arch.head_hidden, 2);
        Ok(Self {
            arch,
            layout: l,
            stem,
            b1c1,
            b1c2,
            down,
            b2c1,
            b2c2,
            conv3,
            conv4,
            lat,
            smooth,
            spn_conv,
            spn_obj,
            spn_del,
            fc1,
            fc2,
            cls,
            reg,
        })
    }

    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    /// He-normal weights, small output heads, zero biases.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = vec![0.0; self.n_params()];
        let mut fill = |r: crate::params::ParamRef, sd: f64, p: &mut Vec<f64>| {
            let n = Normal::new(0.0, sd).expect("valid sd");
            for v in r.slice_mut(p) {
                *v = n.sample(&mut rng);
            }
        };
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let convs = [
            (self.stem, 1.0),
            (self.b1c1, 1.0),
            (self.b1c2, 0.1),
            (self.down, 1.0),
            (self.b2c1, 1.0),
            (self.b2c2, 0.1),
            (self.conv3, 1.0),
            (self.conv4, 1.0),
            (self.lat[0], 0.5),
            (self.lat[1], 0.5),
            (self.lat[2], 0.5),
            (self.smooth[0], 0.5),
            (self.smooth[1], 0.5),
            (self.smooth[2], 0.5),
            (self.spn_conv, 1.0),
        ];
        for (conv, gain) in convs {
            fill(conv.w, gain * he(conv.fan_in()), &mut p);
        }
        fill(self.spn_obj.w, 0.01, &mut p);
        fill(self.spn_del.w, 0.01, &mut p);
        fill(self.fc1.w, he(self.fc1.fin), &mut p);
        fill(self.fc2.w, he(self.fc2.fin), &mut p);
        fill(self.cls.w, 0.01, &mut p);
        fill(self.reg.w, 0.001, &mut p);
        p
    }

    pub fn anchors(&self, t: usize) -> Vec<AnchorSegment> {
        generate_anchors(&self.arch.level_lengths(t), &LEVEL_STRIDES, &self.arch.scales_frames())
    }

    pub fn check_input(&self, x: &Array3<f64>) -> Result<()> {
        let (c, r, t) = x.dim();
        if c != self.arch.in_channels || r != self.arch.n_range_bins || t < MIN_FRAMES {
            return Err(DetectorError::Shape(format!(
                "input ({c}, {r}, {t}) does not fit ({}, {}, >= {MIN_FRAMES})",
                self.arch.in_channels, self.arch.n_range_bins
            )));
        }
        Ok(())
    }
}

/// Three pyramid levels, each `(width, 1, length)`.
#[derive(Debug, Clone)]
pub struct Pyramid {
    pub levels: [Array3<f64>; 3],
}

#[derive(Debug, Clone)]
pub struct BackboneCache {
    x_dims: (usize, usize),
    stem_cols: Array2<f64>,
    s: Array3<f64>,
    b1c1_cols: Array2<f64>,
    h1: Array3<f64>,
    b1c2_cols: Array2<f64>,
    r1: Array3<f64>,
    down_cols: Array2<f64>,
    d: Array3<f64>,
    b2c1_cols: Array2<f64>,
    h2: Array3<f64>,
    b2c2_cols: Array2<f64>,
    r2: Array3<f64>,
    pool_arg: Option<Vec<usize>>,
    c2: Array3<f64>,
    c3_cols: Array2<f64>,
    c3: Array3<f64>,
    c4_cols: Array2<f64>,
    c4: Array3<f64>,
    lat_cols: [Array2<f64>; 3],
    p: [Array3<f64>; 3],
    smooth_cols: [Array2<f64>; 3],
}

fn dims2(a: &Array3<f64>) -> (usize, usize) {
    (a.dim().1, a.dim().2)
}

fn relu_of(mut a: Array3<f64>) -> Array3<f64> {
    relu_inplace(&mut a);
    a
}

impl Network {
    pub fn backbone_forward(&self, p: &[f64], x: &Array3<f64>) -> (Pyramid, BackboneCache) {
        let (s, stem_cols) = self.stem.forward(p, x);
        let s = relu_of(s);
        let (h1, b1c1_cols) = self.b1c1.forward(p, &s);
        let h1 = relu_of(h1);
        let (z1, b1c2_cols) = self.b1c2.forward(p, &h1);
        let r1 = relu_of(z1 + &s);
        let (d, down_cols) = self.down.forward(p, &r1);
        let d = relu_of(d);
        let (h2, b2c1_cols) = self.b2c1.forward(p, &d);
        let h2 = relu_of(h2);
        let (z2, b2c2_cols) = self.b2c2.forward(p, &h2);
        let r2 = relu_of(z2 + &d);
        let (c2, pool_arg) = pool_range(&r2, self.arch.range_pool);
        let (c3, c3_cols) = self.conv3.forward(p, &c2);
        let c3 = relu_of(c3);
        let (c4, c4_cols) = self.conv4.forward(p, &c3);
        let c4 = relu_of(c4);

        let (l4, lc4) = self.lat[2].forward(p, &c4);
        let (l3, lc3) = self.lat[1].forward(p, &c3);
        let (l2, lc2) = self.lat[0].forward(p, &c2);
        let p4 = l4;
        let p3 = l3 + &upsample2(&p4, c3.dim().2);
        let p2 = l2 + &upsample2(&p3, c2.dim().2);
        let (o2, sc2) = self.smooth[0].forward(p, &p2);
        let (o3, sc3) = self.smooth[1].forward(p, &p3);
        let (o4, sc4) = self.smooth[2].forward(p, &p4);

        let cache = BackboneCache {
            x_dims: dims2(x),
            stem_cols,
            s,
            b1c1_cols,
            h1,
            b1c2_cols,
            r1,
            down_cols,
            d,
            b2c1_cols,
            h2,
            b2c2_cols,
            r2,
            pool_arg,
            c2,
            c3_cols,
            c3,
            c4_cols,
            c4,
            lat_cols: [lc2, lc3, lc4],
            p: [p2, p3, p4],
            smooth_cols: [sc2, sc3, sc4],
        };
        (Pyramid { levels: [o2, o3, o4] }, cache)
    }

    /// Propagates pyramid gradients into the backbone parameters. Returns the
    /// input gradient when `need_dx`.
    pub fn backbone_backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        c: &BackboneCache,
        d_levels: [Array3<f64>; 3],
        need_dx: bool,
    ) -> Option<Array3<f64>> {
        let [do2, do3, do4] = d_levels;
        let dp2 = self.smooth[0]
            .backward(p, g, dims2(&c.p[0]), &c.smooth_cols[0], &do2, true)
            .expect("dx");
        let mut dp3 = self.smooth[1]
            .backward(p, g, dims2(&c.p[1]), &c.smooth_cols[1], &do3, true)
            .expect("dx");
        let mut dp4 = self.smooth[2]
            .backward(p, g, dims2(&c.p[2]), &c.smooth_cols[2], &do4, true)
            .expect("dx");
        dp3 += &upsample2_backward(&dp2, c.c3.dim().2);
        dp4 += &upsample2_backward(&dp3, c.c4.dim().2);

        let mut dc2 = self.lat[0].backward(p, g, dims2(&c.c2), &c.lat_cols[0], &dp2, true).expect("dx");
        let mut dc3 = self.lat[1].backward(p, g, dims2(&c.c3), &c.lat_cols[1], &dp3, true).expect("dx");
        let mut dc4 = self.lat[2].backward(p, g, dims2(&c.c4), &c.lat_cols[2], &dp4, true).expect("dx");

        relu_backward(&mut dc4, &c.c4);
        dc3 += &self.conv4.backward(p, g, dims2(&c.c3), &c.c4_cols, &dc4, true).expect("dx");
        relu_backward(&mut dc3, &c.c3);
        dc2 += &self.conv3.backward(p, g, dims2(&c.c2), &c.c3_cols, &dc3, true).expect("dx");

        let mut dr2 = pool_range_backward(&dc2, c.r2.dim().1, c.pool_arg.as_deref());
        relu_backward(&mut dr2, &c.r2);
        let mut dh2 = self.b2c2.backward(p, g, dims2(&c.h2), &c.b2c2_cols, &dr2, true).expect("dx");
        relu_backward(&mut dh2, &c.h2);
        let mut dd = dr2;
        dd += &self.b2c1.backward(p, g, dims2(&c.d), &c.b2c1_cols, &dh2, true).expect("dx");
        relu_backward(&mut dd, &c.d);
        let mut dr1 = self.down.backward(p, g, dims2(&c.r1), &c.down_cols, &dd, true).expect("dx");
        relu_backward(&mut dr1, &c.r1);
        let mut dh1 = self.b1c2.backward(p, g, dims2(&c.h1), &c.b1c2_cols, &dr1, true).expect("dx");
        relu_backward(&mut dh1, &c.h1);
        let mut ds = dr1;
        ds += &self.b1c1.backward(p, g, dims2(&c.s), &c.b1c1_cols, &dh1, true).expect("dx");
        relu_backward(&mut ds, &c.s);
        self.stem.backward(p, g, c.x_dims, &c.stem_cols, &ds, need_dx)
    }
}

/// Per-anchor SPN outputs in anchor order (level, step, scale).
#[derive(Debug, Clone)]
pub struct SpnOutput {
    pub logits: Vec<f64>,
    pub deltas: Vec<SegmentDelta>,
}

#[derive(Debug, Clone)]
pub struct SpnCache {
    cols: Vec<(Array2<f64>, Array3<f64>, Array2<f64>)>,
    level_dims: Vec<(usize, usize)>,
}

impl Network {
    pub fn spn_forward(&self, p: &[f64], pyr: &Pyramid) -> (SpnOutput, SpnCache) {
        let a = self.arch.n_anchor_scales();
        let mut logits = Vec::new();
        let mut deltas = Vec::new();
        let mut cols = Vec::with_capacity(3);
        let mut level_dims = Vec::with_capacity(3);
        for f in &pyr.levels {
            let (h, c0) = self.spn_conv.forward(p, f);
            let h = relu_of(h);
            let (obj, c1) = self.spn_obj.forward(p, &h);
            // 1x1 heads see identical input columns, so one copy serves both.
            let (del, _) = self.spn_del.forward(p, &h);
            let n = f.dim().2;
            for i in 0..n {
                for s in 0..a {
                    logits.push(obj[[s, 0, i]]);
                    deltas.push(SegmentDelta {
                        d_center: del[[2 * s, 0, i]],
                        d_log_length: del[[2 * s + 1, 0, i]],
                    });
                }
            }
            level_dims.push(dims2(f));
            cols.push((c0, h, c1));
        }
        (SpnOutput { logits, deltas }, SpnCache { cols, level_dims })
    }

    pub fn spn_backward(&self, p: &[f64], g: &mut [f64], c: &SpnCache, d_logits: &[f64], d_deltas: &[SegmentDelta]) -> [Array3<f64>; 3] {
        let a = self.arch.n_anchor_scales();
        let mut offset = 0;
        let mut out = Vec::with_capacity(3);
        for ((c0, h, c1), &(lh, n)) in c.cols.iter().zip(&c.level_dims) {
            let mut dobj = Array3::<f64>::zeros((a, 1, n));
            let mut ddel = Array3::<f64>::zeros((2 * a, 1, n));
            for i in 0..n {
                for s in 0..a {
                    let k = offset + i * a + s;
                    dobj[[s, 0, i]] = d_logits[k];
                    ddel[[2 * s, 0, i]] = d_deltas[k].d_center;
                    ddel[[2 * s + 1, 0, i]] = d_deltas[k].d_log_length;
                }
            }
            offset += n * a;
            let mut dh = self.spn_obj.backward(p, g, (1, n), c1, &dobj, true).expect("dx");
            dh += &self.spn_del.backward(p, g, (1, n), c1, &ddel, true).expect("dx");
            relu_backward(&mut dh, h);
            out.push(self.spn_conv.backward(p, g, (lh, n), c0, &dh, true).expect("dx"));
        }
        let [o0, o1, o2]: [Array3<f64>; 3] = out.try_into().expect("three levels");
        [o0, o1, o2]
    }
}

/// Head outputs per RoI: class logits `(R, 5)` and normalized deltas `(R, 2)`.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub logits: Array2<f64>,
    pub deltas: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    taps: Vec<Vec<Tap>>,
    x: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
}

pub fn softmax_row(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Network {
    /// RoI window in level-0 coordinates, widened by the context fraction.
    pub fn roi_window(&self, roi: &Interval, level_len: usize) -> (f64, f64) {
        let stride = LEVEL_STRIDES[0] as f64;
        let ctx = self.arch.roi_context * roi.length();
        let s = ((roi.start - ctx) / stride).max(0.0);
        let e = ((roi.end + ctx) / stride).min(level_len as f64);
        (s, e.max(s + 1e-6))
    }

    pub fn head_forward(&self, p: &[f64], level0: &Array3<f64>, rois: &[Interval]) -> (HeadOutput, HeadCache) {
        let c = self.arch.width;
        let s = self.arch.roi_output;
        let n = level0.dim().2;
        let mut x = Array2::<f64>::zeros((rois.len(), c * s));
        let mut taps = Vec::with_capacity(rois.len());
        for (r, roi) in rois.iter().enumerate() {
            let (a, b) = self.roi_window(roi, n);
            let (pooled, t) = roi_align_1d(level0, a, b, s).expect("RoI windows are non-degenerate");
            for ci in 0..c {
                for j in 0..s {
                    x[[r, ci * s + j]] = pooled[[ci, j]];
                }
            }
            taps.push(t);
        }
        let mut h1 = self.fc1.forward(p, &x);
        relu_inplace(&mut h1);
        let mut h2 = self.fc2.forward(p, &h1);
        relu_inplace(&mut h2);
        let logits = self.cls.forward(p, &h2);
        let deltas = self.reg.forward(p, &h2);
        (HeadOutput { logits, deltas }, HeadCache { taps, x, h1, h2 })
    }

    pub fn head_backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        c: &HeadCache,
        d_logits: &Array2<f64>,
        d_deltas: &Array2<f64>,
        level_len: usize,
    ) -> Array3<f64> {
        let width = self.arch.width;
        let s = self.arch.roi_output;
        let mut dh2 = self.cls.backward(p, g, &c.h2, d_logits);
        dh2 += &self.reg.backward(p, g, &c.h2, d_deltas);
        relu_backward(&mut dh2, &c.h2);
        let mut dh1 = self.fc2.backward(p, g, &c.h1, &dh2);
        relu_backward(&mut dh1, &c.h1);
        let dx = self.fc1.backward(p, g, &c.x, &dh1);
        let mut dlevel = Array3::<f64>::zeros((width, 1, level_len));
        for (r, taps) in c.taps.iter().enumerate() {
            let row = dx.row(r);
            let pooled = Array2::from_shape_fn((width, s), |(ci, j)| row[ci * s + j]);
            roi_align_1d_backward(&pooled, taps, &mut dlevel);
        }
        dlevel
    }
}

/// Targets for one training crop. RoIs and their labels are fixed inputs, so
/// the loss is a deterministic function of the parameters.
#[derive(Debug, Clone)]
pub struct CropTargets {
    pub anchor_labels: Vec<AnchorLabel>,
    pub rois: Vec<Interval>,
    /// 0 is background, `1 + category index` otherwise.
    pub roi_classes: Vec<usize>,
    /// Encoded against the RoI, not yet divided by the delta scale.
    pub roi_deltas: Vec<Option<SegmentDelta>>,
    pub class_weights: [f64; N_CLASSES],
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub spn_cls: f64,
    pub spn_reg: f64,
    pub head_cls: f64,
    pub head_reg: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.total, self.spn_cls, self.spn_reg, self.head_cls, self.head_reg]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn add_scaled(&mut self, o: &LossBreakdown, w: f64) {
        self.total += w * o.total;
        self.spn_cls += w * o.spn_cls;
        self.spn_reg += w * o.spn_reg;
        self.head_cls += w * o.head_cls;
        self.head_reg += w * o.head_reg;
    }
}

pub const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

/// Smooth-L1 value and derivative.
pub fn smooth_l1(x: f64, beta: f64) -> (f64, f64) {
    if x.abs() < beta {
        (0.5 * x * x / beta, x / beta)
    } else {
        (x.abs() - 0.5 * beta, x.signum())
    }
}

/// Binary cross-entropy on logits with positives and negatives averaged
/// separately and weighted equally. Ignored anchors contribute nothing.
pub fn objectness_loss(logits: &[f64], labels: &[AnchorLabel]) -> (f64, Vec<f64>) {
    let n_pos = labels.iter().filter(|l| l.is_positive()).count();
    let n_neg = labels.iter().filter(|l| matches!(l, AnchorLabel::Negative)).count();
    let halves = (n_pos > 0) as usize + (n_neg > 0) as usize;
    let mut grad = vec![0.0; logits.len()];
    if halves == 0 {
        return (0.0, grad);
    }
    let share = 1.0 / halves as f64;
    let mut loss = 0.0;
    for (k, (&z, l)) in logits.iter().zip(labels).enumerate() {
        let (y, n) = match l {
            AnchorLabel::Positive { .. } => (1.0, n_pos),
            AnchorLabel::Negative => (0.0, n_neg),
            AnchorLabel::Ignore => continue,
        };
        let w = share / n as f64;
        loss += w * (z.max(0.0) - z * y + (-z.abs()).exp().ln_1p());
        grad[k] = w * (sigmoid(z) - y);
    }
    (loss, grad)
}

/// Smooth-L1 on positive anchors' deltas, averaged over positives.
pub fn anchor_regression_loss(pred: &[SegmentDelta], labels: &[AnchorLabel]) -> (f64, Vec<SegmentDelta>) {
    let n_pos = labels.iter().filter(|l| l.is_positive()).count();
    let mut grad = vec![SegmentDelta::default(); pred.len()];
    if n_pos == 0 {
        return (0.0, grad);
    }
    let w = 1.0 / n_pos as f64;
    let mut loss = 0.0;
    for (k, l) in labels.iter().enumerate() {
        if let AnchorLabel::Positive { target, .. } = l {
            let (a, da) = smooth_l1(pred[k].d_center - target.d_center, SMOOTH_L1_BETA);
            let (b, db) = smooth_l1(pred[k].d_log_length - target.d_log_length, SMOOTH_L1_BETA);
            loss += w * (a + b);
            grad[k] = SegmentDelta {
                d_center: w * da,
                d_log_length: w * db,
            };
        }
    }
    (loss, grad)
}

/// Class-weighted softmax cross-entropy, normalized by the summed weights.
pub fn weighted_cross_entropy(logits: &Array2<f64>, classes: &[usize], weights: &[f64; N_CLASSES]) -> (f64, Array2<f64>) {
    let mut grad = Array2::<f64>::zeros(logits.dim());
    let total_w: f64 = classes.iter().map(|&c| weights[c]).sum();
    if classes.is_empty() || total_w <= 0.0 {
        return (0.0, grad);
    }
    let mut loss = 0.0;
    for (r, &y) in classes.iter().enumerate() {
        let row: Vec<f64> = logits.row(r).to_vec();
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let w = weights[y] / total_w;
        loss += w * (lse - row[y]);
        for (k, v) in row.iter().enumerate() {
            let pk = (v - lse).exp();
            grad[[r, k]] = w * (pk - if k == y { 1.0 } else { 0.0 });
        }
    }
    (loss, grad)
}

/// Smooth-L1 on foreground RoIs' normalized deltas, averaged over them.
pub fn roi_regression_loss(pred: &Array2<f64>, targets: &[Option<SegmentDelta>], std: (f64, f64)) -> (f64, Array2<f64>) {
    let mut grad = Array2::<f64>::zeros(pred.dim());
    let n_fg = targets.iter().filter(|t| t.is_some()).count();
    if n_fg == 0 {
        return (0.0, grad);
    }
    let w = 1.0 / n_fg as f64;
    let mut loss = 0.0;
    for (r, t) in targets.iter().enumerate() {
        if let Some(t) = t {
            let (a, da) = smooth_l1(pred[[r, 0]] - t.d_center / std.0, SMOOTH_L1_BETA);
            let (b, db) = smooth_l1(pred[[r, 1]] - t.d_log_length / std.1, SMOOTH_L1_BETA);
            loss += w * (a + b);
            grad[[r, 0]] = w * da;
            grad[[r, 1]] = w * db;
        }
    }
    (loss, grad)
}

/// Backbone and SPN results for one input, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub frames: usize,
    pub pyramid: Pyramid,
    pub spn: SpnOutput,
    backbone_cache: BackboneCache,
    spn_cache: SpnCache,
}

/// A scored segment of interest, in frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub segment: Interval,
    pub objectness: f64,
}

impl Network {
    pub fn forward(&self, p: &[f64], x: &Array3<f64>) -> Result<Forward> {
        self.check_input(x)?;
        let (pyramid, backbone_cache) = self.backbone_forward(p, x);
        let (spn, spn_cache) = self.spn_forward(p, &pyramid);
        Ok(Forward {
            frames: x.dim().2,
            pyramid,
            spn,
            backbone_cache,
            spn_cache,
        })
    }

    /// Decoded, clipped anchors ranked by objectness, cut to the pre-NMS
    /// budget, suppressed at the proposal IoU and cut to the post-NMS budget.
    pub fn proposals(&self, f: &Forward) -> Vec<Proposal> {
        let t = f.frames as f64;
        let anchors = self.anchors(f.frames);
        let mut segs = Vec::with_capacity(anchors.len());
        let mut scores = Vec::with_capacity(anchors.len());
        for ((a, d), &z) in anchors.iter().zip(&f.spn.deltas).zip(&f.spn.logits) {
            let mut s = decode_segment(clamp_delta(*d), a);
            s.start = s.start.clamp(0.0, t);
            s.end = s.end.clamp(0.0, t);
            if s.end - s.start >= 1.0 {
                segs.push(s);
                scores.push(sigmoid(z));
            }
        }
        let pre = self.arch.budget(self.arch.pre_nms_top_k, f.frames);
        let post = self.arch.budget(self.arch.post_nms_top_k, f.frames);
        let top: Vec<usize> = rank_order(&segs, &scores).into_iter().take(pre).collect();
        let top_segs: Vec<Interval> = top.iter().map(|&i| segs[i]).collect();
        let top_scores: Vec<f64> = top.iter().map(|&i| scores[i]).collect();
        nms_1d(&top_segs, &top_scores, None, self.arch.proposal_nms_iou)
            .into_iter()
            .take(post)
            .map(|k| Proposal {
                segment: top_segs[k],
                objectness: top_scores[k],
            })
            .collect()
    }

    /// Loss for fixed targets; adds gradients into `grad` when given.
    pub fn loss(&self, p: &[f64], f: &Forward, targets: &CropTargets, grad: Option<&mut [f64]>) -> Result<LossBreakdown> {
        let n_anchors = f.spn.logits.len();
        if targets.anchor_labels.len() != n_anchors {
            return Err(DetectorError::Shape(format!(
                "{} anchor labels for {n_anchors} anchors",
                targets.anchor_labels.len()
            )));
        }
        let (spn_cls, d_logits) = objectness_loss(&f.spn.logits, &targets.anchor_labels);
        let (spn_reg, d_deltas) = anchor_regression_loss(&f.spn.deltas, &targets.anchor_labels);
        let level0 = &f.pyramid.levels[0];
        let (head, hc) = self.head_forward(p, level0, &targets.rois);
        let (head_cls, d_cls) = weighted_cross_entropy(&head.logits, &targets.roi_classes, &targets.class_weights);
        let (head_reg, d_reg) = roi_regression_loss(&head.deltas, &targets.roi_deltas, self.arch.head_delta_std);
        let out = LossBreakdown {
            total: spn_cls + spn_reg + head_cls + head_reg,
            spn_cls,
            spn_reg,
            head_cls,
            head_reg,
        };
        if let Some(g) = grad {
            let mut d_levels = self.spn_backward(p, g, &f.spn_cache, &d_logits, &d_deltas);
            if !targets.rois.is_empty() {
                d_levels[0] += &self.head_backward(p, g, &hc, &d_cls, &d_reg, level0.dim().2);
            }
            self.backbone_backward(p, g, &f.backbone_cache, d_levels, false);
        }
        Ok(out)
    }
}

/// Keeps decoded segments finite under extreme regression outputs.
pub fn clamp_delta(d: SegmentDelta) -> SegmentDelta {
    SegmentDelta {
        d_center: d.d_center.clamp(-10.0, 10.0),
        d_log_length: d.d_log_length.clamp(-4.0, 4.0),
    }
}

/// Converts a spectrogram to the `(3, range, time)` network input.
pub fn input_array(x: &ThreeChannelSpectrogram) -> Array3<f64> {
    let (c, r, t) = x.shape();
    Array3::from_shape_fn((c, r, t), |(ci, ri, ti)| x.get(ci, ri, ti) as f64)
}
