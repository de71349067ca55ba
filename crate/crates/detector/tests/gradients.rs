//! Central finite differences against every hand-written backward pass.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use rosa_core::session::Interval;
use rosa_detector::anchors::{encode_segment, match_anchors, AnchorLabel, SegmentDelta};
use rosa_detector::layers::*;
use rosa_detector::model::*;
use rosa_detector::params::Layout;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect()
}

fn arr3(r: &mut ChaCha8Rng, d: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_vec(d, randn(r, d.0 * d.1 * d.2)).unwrap()
}

fn dot3(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Largest relative error between `analytic` and central differences of `f`
/// at `x`. A ReLU or smooth-L1 kink inside `[x - H, x + H]` invalidates the
/// difference quotient, so a failing coordinate is retried with steps down to
/// `H / 100` before it counts.
fn max_rel_error(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut v = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..v.len() {
        let x0 = v[i];
        let mut best = f64::INFINITY;
        for h in [H, H / 10.0, H / 100.0] {
            v[i] = x0 + h;
            let up = f(&v);
            v[i] = x0 - h;
            let down = f(&v);
            v[i] = x0;
            best = best.min(rel_err(analytic[i], (up - down) / (2.0 * h)));
            if best < TOL {
                break;
            }
        }
        worst = worst.max(best);
    }
    worst
}

/// Checks a conv layer's parameter and input gradients under the linear
/// probe loss `sum(r * y)`.
fn check_conv(conv: Conv, layout: &Layout, in_dims: (usize, usize), seed: u64) {
    let mut r = rng(seed);
    let p = randn(&mut r, layout.total);
    let x = arr3(&mut r, (conv.cin, in_dims.0, in_dims.1));
    let (y, cols) = conv.forward(&p, &x);
    let probe = arr3(&mut r, y.dim());
    let mut g = vec![0.0; p.len()];
    let dx = conv.backward(&p, &mut g, in_dims, &cols, &probe, true).unwrap();

    let loss_p = |q: &[f64]| dot3(&conv.forward(q, &x).0, &probe);
    let e_p = max_rel_error(loss_p, &p, &g);
    let loss_x = |xv: &[f64]| {
        let xx = Array3::from_shape_vec(x.dim(), xv.to_vec()).unwrap();
        dot3(&conv.forward(&p, &xx).0, &probe)
    };
    let e_x = max_rel_error(loss_x, x.as_slice().unwrap(), dx.as_slice().unwrap());
    assert!(e_p < TOL && e_x < TOL, "conv {conv:?}: param err {e_p:e}, input err {e_x:e}");
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    for (k, stride, dims, seed) in [(3, 1, (6, 7), 1), (3, 2, (8, 9), 2), (3, 2, (7, 6), 3), (5, 2, (9, 10), 4)] {
        let mut l = Layout::default();
        let conv = Conv::new2d(&mut l, "c", 3, 4, k, stride);
        check_conv(conv, &l, dims, seed);
    }
}

#[test]
fn conv1d_gradients_match_finite_differences() {
    for (k, stride, n, seed) in [(3, 1, 11, 5), (3, 2, 12, 6), (3, 2, 13, 7), (1, 1, 9, 8)] {
        let mut l = Layout::default();
        let conv = Conv::new1d(&mut l, "c", 4, 3, k, stride);
        check_conv(conv, &l, (1, n), seed);
    }
}

#[test]
fn linear_gradients_match_finite_differences() {
    let mut r = rng(11);
    let mut l = Layout::default();
    let lin = Linear::new(&mut l, "fc", 6, 5);
    let p = randn(&mut r, l.total);
    let x = Array2::from_shape_vec((4, 6), randn(&mut r, 24)).unwrap();
    let probe = Array2::from_shape_vec((4, 5), randn(&mut r, 20)).unwrap();
    let mut g = vec![0.0; p.len()];
    let dx = lin.backward(&p, &mut g, &x, &probe);
    let dot = |y: Array2<f64>| y.iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>();
    let e_p = max_rel_error(|q| dot(lin.forward(q, &x)), &p, &g);
    let e_x = max_rel_error(
        |xv| dot(lin.forward(&p, &Array2::from_shape_vec((4, 6), xv.to_vec()).unwrap())),
        x.as_slice().unwrap(),
        dx.as_slice().unwrap(),
    );
    assert!(e_p < TOL && e_x < TOL, "linear: {e_p:e} {e_x:e}");
}

#[test]
fn relu_range_pool_and_upsample_gradients() {
    let mut r = rng(12);
    let x = arr3(&mut r, (3, 5, 7));
    for kind in [RangePool::Mean, RangePool::Max] {
        let (y, arg) = pool_range(&x, kind);
        let probe = arr3(&mut r, y.dim());
        let dx = pool_range_backward(&probe, 5, arg.as_deref());
        let f = |v: &[f64]| dot3(&pool_range(&Array3::from_shape_vec(x.dim(), v.to_vec()).unwrap(), kind).0, &probe);
        let e = max_rel_error(f, x.as_slice().unwrap(), dx.as_slice().unwrap());
        assert!(e < TOL, "{kind:?} pool: {e:e}");
    }

    for (n, len) in [(4, 8), (4, 9), (5, 9)] {
        let x = arr3(&mut r, (2, 1, n));
        let probe = arr3(&mut r, (2, 1, len));
        let dx = upsample2_backward(&probe, n);
        let f = |v: &[f64]| dot3(&upsample2(&Array3::from_shape_vec(x.dim(), v.to_vec()).unwrap(), len), &probe);
        let e = max_rel_error(f, x.as_slice().unwrap(), dx.as_slice().unwrap());
        assert!(e < TOL, "upsample {n}->{len}: {e:e}");
    }

    let x = arr3(&mut r, (2, 3, 4));
    let probe = arr3(&mut r, x.dim());
    let mut y = x.clone();
    relu_inplace(&mut y);
    let mut dx = probe.clone();
    relu_backward(&mut dx, &y);
    let f = |v: &[f64]| {
        let mut a = Array3::from_shape_vec(x.dim(), v.to_vec()).unwrap();
        relu_inplace(&mut a);
        dot3(&a, &probe)
    };
    let e = max_rel_error(f, x.as_slice().unwrap(), dx.as_slice().unwrap());
    assert!(e < TOL, "relu: {e:e}");
}

#[test]
fn roi_align_gradient_flows_to_neighbouring_bins() {
    let mut r = rng(13);
    let feat = arr3(&mut r, (3, 1, 12));
    for (a, b, out) in [(1.3, 7.9, 4), (0.0, 12.0, 8), (10.2, 11.9, 3), (2.0, 2.5, 2)] {
        let (y, taps) = roi_align_1d(&feat, a, b, out).unwrap();
        let probe = Array2::from_shape_vec(y.dim(), randn(&mut r, y.len())).unwrap();
        let mut df = Array3::zeros(feat.dim());
        roi_align_1d_backward(&probe, &taps, &mut df);
        let f = |v: &[f64]| {
            let ff = Array3::from_shape_vec(feat.dim(), v.to_vec()).unwrap();
            let (yy, _) = roi_align_1d(&ff, a, b, out).unwrap();
            yy.iter().zip(&probe).map(|(p, q)| p * q).sum::<f64>()
        };
        let e = max_rel_error(f, feat.as_slice().unwrap(), df.as_slice().unwrap());
        assert!(e < TOL, "roi [{a}, {b}) x{out}: {e:e}");
    }
}

#[test]
fn loss_term_gradients_match_finite_differences() {
    let mut r = rng(14);
    let labels: Vec<AnchorLabel> = (0..12)
        .map(|i| match i % 3 {
            0 => AnchorLabel::Positive {
                gt: 0,
                target: SegmentDelta {
                    d_center: 0.1 * i as f64,
                    d_log_length: -0.2,
                },
            },
            1 => AnchorLabel::Negative,
            _ => AnchorLabel::Ignore,
        })
        .collect();
    let z = randn(&mut r, 12);
    let (_, gz) = objectness_loss(&z, &labels);
    let e = max_rel_error(|v| objectness_loss(v, &labels).0, &z, &gz);
    assert!(e < TOL, "objectness: {e:e}");

    // Keep residuals clear of the smooth-L1 kink at +-beta.
    let flat: Vec<f64> = randn(&mut r, 24).iter().map(|v| 2.0 * v).collect();
    let to_deltas = |v: &[f64]| -> Vec<SegmentDelta> {
        v.chunks(2)
            .map(|c| SegmentDelta {
                d_center: c[0],
                d_log_length: c[1],
            })
            .collect()
    };
    let (_, gd) = anchor_regression_loss(&to_deltas(&flat), &labels);
    let gflat: Vec<f64> = gd.iter().flat_map(|d| [d.d_center, d.d_log_length]).collect();
    let e = max_rel_error(|v| anchor_regression_loss(&to_deltas(v), &labels).0, &flat, &gflat);
    assert!(e < TOL, "anchor regression: {e:e}");

    let logits = Array2::from_shape_vec((6, N_CLASSES), randn(&mut r, 6 * N_CLASSES)).unwrap();
    let classes = [0, 1, 2, 3, 4, 0];
    let weights = [1.0, 2.5, 0.7, 3.0, 1.2];
    let (_, gl) = weighted_cross_entropy(&logits, &classes, &weights);
    let f = |v: &[f64]| weighted_cross_entropy(&Array2::from_shape_vec(logits.dim(), v.to_vec()).unwrap(), &classes, &weights).0;
    let e = max_rel_error(f, logits.as_slice().unwrap(), gl.as_slice().unwrap());
    assert!(e < TOL, "weighted CE: {e:e}");

    let pred = Array2::from_shape_vec((4, 2), randn(&mut r, 8).iter().map(|v| 3.0 * v).collect()).unwrap();
    let targets = [
        Some(SegmentDelta {
            d_center: 0.01,
            d_log_length: 0.05,
        }),
        None,
        Some(SegmentDelta {
            d_center: -0.03,
            d_log_length: 0.1,
        }),
        None,
    ];
    let (_, gp) = roi_regression_loss(&pred, &targets, (0.1, 0.2));
    let f = |v: &[f64]| roi_regression_loss(&Array2::from_shape_vec((4, 2), v.to_vec()).unwrap(), &targets, (0.1, 0.2)).0;
    let e = max_rel_error(f, pred.as_slice().unwrap(), gp.as_slice().unwrap());
    assert!(e < TOL, "RoI regression: {e:e}");
}

fn tiny_arch(pool: RangePool) -> ArchConfig {
    ArchConfig {
        width: 4,
        head_hidden: 4,
        range_pool: pool,
        ..ArchConfig::default()
    }
}

fn tiny_targets(net: &Network, t: usize) -> CropTargets {
    let gts = [Interval::new(10.0, 30.0), Interval::new(35.0, 55.0)];
    let anchor_labels = match_anchors(&net.anchors(t), &gts, 0.7, 0.3).unwrap();
    let rois = vec![
        Interval::new(8.0, 28.0),
        Interval::new(12.0, 33.0),
        Interval::new(30.0, 60.0),
        Interval::new(0.0, 20.0),
        Interval::new(40.0, 50.0),
        Interval::new(2.5, 63.0),
    ];
    let roi_classes = vec![1, 1, 4, 0, 4, 0];
    let roi_deltas = rois
        .iter()
        .zip(&roi_classes)
        .enumerate()
        .map(|(i, (roi, &c))| (c > 0).then(|| encode_segment(&gts[usize::from(i >= 2)], roi).unwrap()))
        .collect();
    CropTargets {
        anchor_labels,
        rois,
        roi_classes,
        roi_deltas,
        class_weights: [1.0, 2.0, 1.5, 1.0, 0.5],
    }
}

fn whole_model_error(pool: RangePool, seed: u64) -> f64 {
    let t = 64;
    let net = Network::new(tiny_arch(pool)).unwrap();
    let mut r = rng(seed);
    let p: Vec<f64> = net
        .init_params(seed)
        .iter()
        .zip(randn(&mut r, net.n_params()))
        .map(|(a, b)| a + 0.1 * b)
        .collect();
    let x = arr3(&mut r, (3, 32, t));
    let targets = tiny_targets(&net, t);
    assert!(targets.anchor_labels.iter().any(|l| l.is_positive()));

    let fwd = net.forward(&p, &x).unwrap();
    let mut g = vec![0.0; p.len()];
    let loss = net.loss(&p, &fwd, &targets, Some(&mut g)).unwrap();
    assert!(loss.spn_cls > 0.0 && loss.spn_reg > 0.0 && loss.head_cls > 0.0 && loss.head_reg > 0.0);
    let f = |q: &[f64]| net.loss(q, &net.forward(q, &x).unwrap(), &targets, None).unwrap().total;
    max_rel_error(f, &p, &g)
}

#[test]
fn whole_detector_gradient_matches_finite_differences() {
    for (pool, seed) in [(RangePool::Mean, 21), (RangePool::Max, 22)] {
        let e = whole_model_error(pool, seed);
        println!("{pool:?} pooling: max relative error {e:e}");
        assert!(e < TOL, "{pool:?}: {e:e}");
    }
}

#[test]
fn backbone_input_gradient_matches_finite_differences() {
    let net = Network::new(tiny_arch(RangePool::Mean)).unwrap();
    let mut r = rng(23);
    let p = net.init_params(23);
    let x = arr3(&mut r, (3, 32, 64));
    let (pyr, cache) = net.backbone_forward(&p, &x);
    let probes: Vec<Array3<f64>> = pyr.levels.iter().map(|l| arr3(&mut r, l.dim())).collect();
    let mut g = vec![0.0; p.len()];
    let dx = net
        .backbone_backward(&p, &mut g, &cache, [probes[0].clone(), probes[1].clone(), probes[2].clone()], true)
        .unwrap();
    let f = |v: &[f64]| {
        let xx = Array3::from_shape_vec(x.dim(), v.to_vec()).unwrap();
        let (pp, _) = net.backbone_forward(&p, &xx);
        pp.levels.iter().zip(&probes).map(|(a, b)| dot3(a, b)).sum::<f64>()
    };
    let e = max_rel_error(f, x.as_slice().unwrap(), dx.as_slice().unwrap());
    assert!(e < TOL, "backbone input: {e:e}");
}
