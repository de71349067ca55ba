//! Desaturation scanning shared by the fusion features and the ODI3 baseline.
//!
//! A desaturation runs from a running peak down to the lowest value reached
//! before the trace recovers by at least `hysteresis` points above it.

/// Three-sample running median; the two end samples are copied through.
pub fn median3(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut out = x.to_vec();
    for i in 1..n.saturating_sub(1) {
        let (a, b, c) = (x[i - 1], x[i], x[i + 1]);
        out[i] = a.max(b).min(a.min(b).max(c));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Desaturation {
    pub peak_index: usize,
    pub nadir_index: usize,
    /// Percentage points from peak to nadir.
    pub drop: f64,
    /// True when the trace recovered by the hysteresis after the nadir inside
    /// the scanned range.
    pub terminated: bool,
}

/// All peak-to-nadir drops in `x`, in time order. A trailing drop that never
/// recovered is reported with `terminated = false`.
pub fn scan_desaturations(x: &[f64], hysteresis: f64) -> Vec<Desaturation> {
    let mut out = Vec::new();
    if x.is_empty() {
        return out;
    }
    let (mut peak, mut peak_i) = (x[0], 0);
    let (mut trough, mut trough_i) = (x[0], 0);
    for (j, &v) in x.iter().enumerate().skip(1) {
        if v < trough {
            trough = v;
            trough_i = j;
        } else if trough < peak && v - trough >= hysteresis {
            out.push(Desaturation {
                peak_index: peak_i,
                nadir_index: trough_i,
                drop: peak - trough,
                terminated: true,
            });
            peak = v;
            peak_i = j;
            trough = v;
            trough_i = j;
        } else if v > peak {
            // Wiggles smaller than the hysteresis are absorbed into a new peak.
            peak = v;
            peak_i = j;
            trough = v;
            trough_i = j;
        }
    }
    if trough < peak {
        out.push(Desaturation {
            peak_index: peak_i,
            nadir_index: trough_i,
            drop: peak - trough,
            terminated: false,
        });
    }
    out
}

/// Largest `x[i] - x[j]` with `i <= j`, returned as `(drop, peak_index, nadir_index)`.
/// Ties keep the earliest nadir.
pub fn max_drawdown(x: &[f64]) -> (f64, usize, usize) {
    let mut best = (0.0, 0, 0);
    let mut run_max = (f64::MIN, 0);
    for (j, &v) in x.iter().enumerate() {
        if v > run_max.0 {
            run_max = (v, j);
        }
        let d = run_max.0 - v;
        if d > best.0 {
            best = (d, run_max.1, j);
        }
    }
    best
}

/// Rise from `x[nadir]` to the running maximum that follows it, stopping once
/// the trace falls `hysteresis` below that maximum or after `max_samples`.
pub fn rise_after(x: &[f64], nadir: usize, max_samples: usize, hysteresis: f64) -> f64 {
    let Some(&base) = x.get(nadir) else {
        return 0.0;
    };
    let end = (nadir + max_samples + 1).min(x.len());
    let mut best = base;
    for &v in &x[nadir + 1..end] {
        if v > best {
            best = v;
        } else if best - v >= hysteresis {
            break;
        }
    }
    best - base
}
