//! Differentiable building blocks. Feature maps are `(channels, height, width)`
//! arrays; one-dimensional sequences use height 1. Every backward pass adds
//! parameter gradients into a flat gradient vector laid out like the
//! parameters.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, ArrayView2, ArrayViewMut2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{DetectorError, Result};
use crate::params::{Layout, ParamRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    /// Padding that keeps a stride-1 length, or halves it (floor) at stride 2,
    /// for a kernel of size `k`.
    pub fn for_kernel(k: usize, stride: usize) -> (usize, usize) {
        let total = k - 1;
        let lo = total / 2;
        let hi = total - lo;
        if stride == 1 {
            (lo, hi)
        } else {
            (lo, hi.saturating_sub(stride - 1))
        }
    }
}

/// Two-dimensional convolution; a `1 x k` kernel on height-1 inputs is a 1D
/// convolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub pad: Padding,
    pub w: ParamRef,
    pub b: ParamRef,
}

impl Conv {
    pub fn new2d(layout: &mut Layout, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        let (lo, hi) = Padding::for_kernel(k, stride);
        Self {
            cin,
            cout,
            kh: k,
            kw: k,
            sh: stride,
            sw: stride,
            pad: Padding {
                top: lo,
                bottom: hi,
                left: lo,
                right: hi,
            },
            w: layout.add(format!("{name}.weight"), &[cout, cin, k, k]),
            b: layout.add(format!("{name}.bias"), &[cout]),
        }
    }

    pub fn new1d(layout: &mut Layout, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        let (lo, hi) = Padding::for_kernel(k, stride);
        Self {
            cin,
            cout,
            kh: 1,
            kw: k,
            sh: 1,
            sw: stride,
            pad: Padding {
                top: 0,
                bottom: 0,
                left: lo,
                right: hi,
            },
            w: layout.add(format!("{name}.weight"), &[cout, cin, 1, k]),
            b: layout.add(format!("{name}.bias"), &[cout]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let hp = h + self.pad.top + self.pad.bottom;
        let wp = w + self.pad.left + self.pad.right;
        let ho = if hp >= self.kh { (hp - self.kh) / self.sh + 1 } else { 0 };
        let wo = if wp >= self.kw { (wp - self.kw) / self.sw + 1 } else { 0 };
        (ho, wo)
    }

    fn im2col(&self, x: &Array3<f64>, ho: usize, wo: usize) -> Array2<f64> {
        let (_, h, w) = x.dim();
        let k = self.fan_in();
        let mut cols = Array2::<f64>::zeros((k, ho * wo));
        let xs = x.as_slice().expect("standard layout");
        let cs = cols.as_slice_mut().expect("standard layout");
        for ci in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut cs[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.sh + ki) as isize - self.pad.top as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &xs[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                        let out = &mut dst[oy * wo..(oy + 1) * wo];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * self.sw + kj) as isize - self.pad.left as isize;
                            if ix >= 0 && (ix as usize) < w {
                                *o = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<f64>, h: usize, w: usize, ho: usize, wo: usize) -> Array3<f64> {
        let mut dx = Array3::<f64>::zeros((self.cin, h, w));
        let ds = dx.as_slice_mut().expect("standard layout");
        let cs = dcols.as_slice().expect("standard layout");
        for ci in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cs[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.sh + ki) as isize - self.pad.top as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ci * h + iy as usize) * w;
                        for ox in 0..wo {
                            let ix = (ox * self.sw + kj) as isize - self.pad.left as isize;
                            if ix >= 0 && (ix as usize) < w {
                                ds[base + ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    fn weight<'a>(&self, p: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.cout, self.fan_in()), self.w.slice(p)).expect("weight shape")
    }

    /// Output and the im2col matrix needed by the backward pass.
    pub fn forward(&self, p: &[f64], x: &Array3<f64>) -> (Array3<f64>, Array2<f64>) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.cin, "conv input channels");
        let (ho, wo) = self.out_dims(h, w);
        let cols = self.im2col(x, ho, wo);
        let mut y = Array2::<f64>::zeros((self.cout, ho * wo));
        general_mat_mul(1.0, &self.weight(p), &cols, 0.0, &mut y);
        let b = self.b.slice(p);
        for (mut row, bias) in y.axis_iter_mut(Axis(0)).zip(b) {
            row += *bias;
        }
        let y = y.into_shape_with_order((self.cout, ho, wo)).expect("conv output shape");
        (y, cols)
    }

    /// Adds weight and bias gradients; returns the input gradient when asked.
    pub fn backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        in_dims: (usize, usize),
        cols: &Array2<f64>,
        dy: &Array3<f64>,
        need_dx: bool,
    ) -> Option<Array3<f64>> {
        let (_, ho, wo) = dy.dim();
        let dy2 = dy
            .view()
            .into_shape_with_order((self.cout, ho * wo))
            .expect("conv grad shape");
        {
            let mut dw = ArrayViewMut2::from_shape((self.cout, self.fan_in()), self.w.slice_mut(g)).expect("weight");
            general_mat_mul(1.0, &dy2, &cols.t(), 1.0, &mut dw);
        }
        for (gb, row) in self.b.slice_mut(g).iter_mut().zip(dy2.axis_iter(Axis(0))) {
            *gb += row.sum();
        }
        if !need_dx {
            return None;
        }
        let mut dcols = Array2::<f64>::zeros((self.fan_in(), ho * wo));
        general_mat_mul(1.0, &self.weight(p).t(), &dy2, 0.0, &mut dcols);
        Some(self.col2im(&dcols, in_dims.0, in_dims.1, ho, wo))
    }
}

/// Fully connected layer over rows: `y = x W^T + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub fin: usize,
    pub fout: usize,
    pub w: ParamRef,
    pub b: ParamRef,
}

impl Linear {
    pub fn new(layout: &mut Layout, name: &str, fin: usize, fout: usize) -> Self {
        Self {
            fin,
            fout,
            w: layout.add(format!("{name}.weight"), &[fout, fin]),
            b: layout.add(format!("{name}.bias"), &[fout]),
        }
    }

    fn weight<'a>(&self, p: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.fout, self.fin), self.w.slice(p)).expect("weight shape")
    }

    pub fn forward(&self, p: &[f64], x: &Array2<f64>) -> Array2<f64> {
        let n = x.nrows();
        let mut y = Array2::<f64>::zeros((n, self.fout));
        general_mat_mul(1.0, x, &self.weight(p).t(), 0.0, &mut y);
        let b = ndarray::ArrayView1::from(self.b.slice(p));
        y += &b;
        y
    }

    pub fn backward(&self, p: &[f64], g: &mut [f64], x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        {
            let mut dw = ArrayViewMut2::from_shape((self.fout, self.fin), self.w.slice_mut(g)).expect("weight");
            general_mat_mul(1.0, &dy.t(), x, 1.0, &mut dw);
        }
        for (gb, col) in self.b.slice_mut(g).iter_mut().zip(dy.axis_iter(Axis(1))) {
            *gb += col.sum();
        }
        let mut dx = Array2::<f64>::zeros((dy.nrows(), self.fin));
        general_mat_mul(1.0, dy, &self.weight(p), 0.0, &mut dx);
        dx
    }
}

pub fn relu_inplace<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) {
    a.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub fn relu_backward<D: ndarray::Dimension>(dy: &mut ndarray::Array<f64, D>, y: &ndarray::Array<f64, D>) {
    ndarray::Zip::from(dy).and(y).for_each(|d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangePool {
    #[default]
    Mean,
    Max,
}

/// Collapses the height (range) axis. For max pooling the winning rows are
/// returned for the backward pass.
pub fn pool_range(x: &Array3<f64>, kind: RangePool) -> (Array3<f64>, Option<Vec<usize>>) {
    let (c, h, w) = x.dim();
    match kind {
        RangePool::Mean => {
            let y = x.mean_axis(Axis(1)).expect("non-empty range axis");
            (y.insert_axis(Axis(1)), None)
        }
        RangePool::Max => {
            let mut y = Array3::<f64>::zeros((c, 1, w));
            let mut arg = vec![0usize; c * w];
            for ci in 0..c {
                for t in 0..w {
                    let mut best = 0;
                    for r in 1..h {
                        if x[[ci, r, t]] > x[[ci, best, t]] {
                            best = r;
                        }
                    }
                    y[[ci, 0, t]] = x[[ci, best, t]];
                    arg[ci * w + t] = best;
                }
            }
            (y, Some(arg))
        }
    }
}

pub fn pool_range_backward(dy: &Array3<f64>, h: usize, arg: Option<&[usize]>) -> Array3<f64> {
    let (c, _, w) = dy.dim();
    let mut dx = Array3::<f64>::zeros((c, h, w));
    match arg {
        None => {
            let scale = 1.0 / h as f64;
            for ci in 0..c {
                for r in 0..h {
                    for t in 0..w {
                        dx[[ci, r, t]] = dy[[ci, 0, t]] * scale;
                    }
                }
            }
        }
        Some(arg) => {
            for ci in 0..c {
                for t in 0..w {
                    dx[[ci, arg[ci * w + t], t]] = dy[[ci, 0, t]];
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour upsampling of a sequence to `len`: output `i` copies
/// input `min(i / 2, n - 1)`.
pub fn upsample2(x: &Array3<f64>, len: usize) -> Array3<f64> {
    let (c, _, n) = x.dim();
    let mut y = Array3::<f64>::zeros((c, 1, len));
    for ci in 0..c {
        for i in 0..len {
            y[[ci, 0, i]] = x[[ci, 0, (i / 2).min(n - 1)]];
        }
    }
    y
}

pub fn upsample2_backward(dy: &Array3<f64>, n: usize) -> Array3<f64> {
    let (c, _, len) = dy.dim();
    let mut dx = Array3::<f64>::zeros((c, 1, n));
    for ci in 0..c {
        for i in 0..len {
            dx[[ci, 0, (i / 2).min(n - 1)]] += dy[[ci, 0, i]];
        }
    }
    dx
}

/// Interpolation taps for one sample point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub w0: f64,
    pub w1: f64,
}

/// Linear-interpolation taps at position `x` of a sequence of `n` values
/// located at bin centers `i + 0.5`; positions beyond the outer centers take
/// the edge value.
pub fn interp_tap(x: f64, n: usize) -> Tap {
    let u = x - 0.5;
    if u <= 0.0 || n == 1 {
        return Tap { i0: 0, i1: 0, w0: 1.0, w1: 0.0 };
    }
    if u >= (n - 1) as f64 {
        return Tap {
            i0: n - 1,
            i1: n - 1,
            w0: 1.0,
            w1: 0.0,
        };
    }
    let i0 = u.floor() as usize;
    let frac = u - i0 as f64;
    Tap {
        i0,
        i1: i0 + 1,
        w0: 1.0 - frac,
        w1: frac,
    }
}

/// Taps for `out` equal cells of `[start, end)`, each sampled at its center.
pub fn roi_taps(start: f64, end: f64, out: usize, n: usize) -> Vec<Tap> {
    let cell = (end - start) / out as f64;
    (0..out)
        .map(|j| interp_tap(start + (j as f64 + 0.5) * cell, n))
        .collect()
}

/// Pools `[start, end)` (feature coordinates) of a `(C, 1, L)` sequence into
/// `(C, out)`.
pub fn roi_align_1d(feature: &Array3<f64>, start: f64, end: f64, out: usize) -> Result<(Array2<f64>, Vec<Tap>)> {
    if !(end > start) || out == 0 {
        return Err(DetectorError::Segment(format!("degenerate RoI [{start}, {end}) with {out} cells")));
    }
    let (c, _, n) = feature.dim();
    let taps = roi_taps(start, end, out, n);
    let mut y = Array2::<f64>::zeros((c, out));
    for ci in 0..c {
        for (j, t) in taps.iter().enumerate() {
            y[[ci, j]] = t.w0 * feature[[ci, 0, t.i0]] + t.w1 * feature[[ci, 0, t.i1]];
        }
    }
    Ok((y, taps))
}

/// Adds the gradient of one pooled RoI into `dfeature`.
pub fn roi_align_1d_backward(dy: &Array2<f64>, taps: &[Tap], dfeature: &mut Array3<f64>) {
    let c = dy.nrows();
    for ci in 0..c {
        for (j, t) in taps.iter().enumerate() {
            dfeature[[ci, 0, t.i0]] += t.w0 * dy[[ci, j]];
            dfeature[[ci, 0, t.i1]] += t.w1 * dy[[ci, j]];
        }
    }
}
