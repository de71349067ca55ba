//! Self-contained SVG figures: spectrogram heatmaps with event overlays,
//! detection timelines, AHI scatter plots and Bland-Altman plots.

use std::fmt::Write;

use rosa_core::dsp::ThreeChannelSpectrogram;
use rosa_core::metrics::bland_altman;
use rosa_core::session::{DetectedSegment, EventAnnotation, EventCategory};

use crate::error::{CliError, Result};

pub const KINDS: [&str; 4] = ["spectrogram", "timeline", "scatter", "bland_altman"];

const WIDTH: f64 = 900.0;
const MARGIN: f64 = 50.0;
/// Heatmaps are averaged down to at most this many columns.
const MAX_COLUMNS: usize = 600;

const CHANNEL_NAMES: [&str; 3] = ["x_M movement", "x_B breathing", "x_D doppler"];

fn category_color(c: EventCategory) -> &'static str {
    match c {
        EventCategory::CA => "#1f77b4",
        EventCategory::OA => "#d62728",
        EventCategory::MA => "#9467bd",
        EventCategory::H => "#2ca02c",
    }
}

fn header(width: f64, height: f64, title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n\
         <rect x=\"0\" y=\"0\" width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n\
         <text x=\"{MARGIN}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\">{}</text>\n",
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Maps `[lo, hi]` linearly onto `[a, b]`.
#[derive(Debug, Clone, Copy)]
struct Scale {
    lo: f64,
    hi: f64,
    a: f64,
    b: f64,
}

impl Scale {
    fn new((lo, hi): (f64, f64), a: f64, b: f64) -> Self {
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 1.0, lo + 1.0) };
        Self { lo, hi, a, b }
    }

    fn map(&self, v: f64) -> f64 {
        self.a + (v - self.lo) / (self.hi - self.lo) * (self.b - self.a)
    }
}

fn viridis_like(u: f64) -> String {
    let u = u.clamp(0.0, 1.0);
    let r = (68.0 + u * (253.0 - 68.0)) as u8;
    let g = (1.0 + u * (231.0 - 1.0)) as u8;
    let b = (84.0 + (1.0 - u) * (150.0 - 84.0) - u * 47.0).clamp(0.0, 255.0) as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

fn axis_ticks(out: &mut String, scale: &Scale, fixed: f64, horizontal: bool, n: usize) {
    for i in 0..=n {
        let v = scale.lo + (scale.hi - scale.lo) * i as f64 / n as f64;
        let p = scale.map(v);
        let (x, y, anchor) = if horizontal { (p, fixed + 16.0, "middle") } else { (fixed - 6.0, p + 4.0, "end") };
        let _ = writeln!(
            out,
            "<text class=\"tick\" x=\"{x:.2}\" y=\"{y:.2}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"{anchor}\">{v:.1}</text>"
        );
    }
}

/// One heatmap per channel, range on the vertical axis, with translucent
/// bands marking annotated events.
pub fn spectrogram_svg(spec: &ThreeChannelSpectrogram, events: &[EventAnnotation], title: &str) -> String {
    let panel_h = 160.0;
    let gap = 30.0;
    let height = 40.0 + 3.0 * (panel_h + gap) + MARGIN;
    let mut out = header(WIDTH, height, title);
    let cols = spec.n_frames.clamp(1, MAX_COLUMNS);
    let frames_per_col = spec.n_frames as f64 / cols as f64;
    let plot_w = WIDTH - 2.0 * MARGIN;
    let col_w = plot_w / cols as f64;
    let row_h = panel_h / spec.n_range_bins.max(1) as f64;
    let duration = spec.duration_s();
    let x = Scale::new((0.0, duration), MARGIN, WIDTH - MARGIN);

    for c in 0..3 {
        let top = 40.0 + c as f64 * (panel_h + gap);
        let mut grid = vec![0.0f64; cols * spec.n_range_bins];
        for r in 0..spec.n_range_bins {
            for (k, cell) in grid[r * cols..(r + 1) * cols].iter_mut().enumerate() {
                let a = (k as f64 * frames_per_col).floor() as usize;
                let b = (((k + 1) as f64 * frames_per_col).floor() as usize).max(a + 1).min(spec.n_frames);
                let n = b.saturating_sub(a).max(1);
                *cell = (a..b).map(|t| spec.get(c, r, t) as f64).sum::<f64>() / n as f64;
            }
        }
        let finite = grid.iter().copied().filter(|v| v.is_finite());
        let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let _ = writeln!(out, "<g class=\"heatmap\" data-channel=\"{c}\">");
        for r in 0..spec.n_range_bins {
            // Nearest range bin at the bottom.
            let y = top + panel_h - (r + 1) as f64 * row_h;
            for k in 0..cols {
                let v = grid[r * cols + k];
                let u = if v.is_finite() { (v - lo) / span } else { 0.0 };
                let _ = writeln!(
                    out,
                    "<rect class=\"cell\" x=\"{:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{row_h:.2}\" fill=\"{}\"/>",
                    MARGIN + k as f64 * col_w,
                    col_w + 0.05,
                    viridis_like(u)
                );
            }
        }
        out.push_str("</g>\n");
        for e in events {
            let (x0, x1) = (x.map(e.t_start), x.map(e.t_end));
            let _ = writeln!(
                out,
                "<rect class=\"event\" data-category=\"{}\" x=\"{x0:.2}\" y=\"{top:.2}\" width=\"{:.2}\" height=\"{panel_h:.2}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>",
                e.category.as_str(),
                x1 - x0,
                category_color(e.category)
            );
        }
        let _ = writeln!(
            out,
            "<text x=\"{MARGIN}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>",
            top - 4.0,
            CHANNEL_NAMES[c]
        );
    }
    axis_ticks(&mut out, &x, height - MARGIN + 4.0, true, 6);
    out.push_str("</svg>\n");
    out
}

/// Ground truth on the upper lane, detections on the lower lane, one
/// rectangle per segment.
pub fn timeline_svg(duration_s: f64, truth: &[EventAnnotation], detections: &[DetectedSegment], title: &str) -> String {
    let height = 200.0;
    let mut out = header(WIDTH, height, title);
    let x = Scale::new((0.0, duration_s.max(1e-9)), MARGIN, WIDTH - MARGIN);
    let lanes = [("truth", 50.0), ("detected", 110.0)];
    for (name, y) in lanes {
        let _ = writeln!(
            out,
            "<line class=\"lane\" x1=\"{MARGIN}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#bbb\"/>\n\
             <text x=\"4\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\">{name}</text>",
            y + 15.0,
            WIDTH - MARGIN,
            y + 15.0,
            y + 19.0
        );
    }
    for e in truth {
        let (x0, x1) = (x.map(e.t_start), x.map(e.t_end));
        let _ = writeln!(
            out,
            "<rect class=\"segment truth\" data-category=\"{}\" x=\"{x0:.2}\" y=\"50\" width=\"{:.2}\" height=\"30\" fill=\"{}\"/>",
            e.category.as_str(),
            x1 - x0,
            category_color(e.category)
        );
    }
    for d in detections {
        let (x0, x1) = (x.map(d.t_start), x.map(d.t_end));
        let opacity = d.score.clamp(0.15, 1.0);
        let _ = writeln!(
            out,
            "<rect class=\"segment detected\" data-category=\"{}\" data-score=\"{:.4}\" x=\"{x0:.2}\" y=\"110\" width=\"{:.2}\" height=\"30\" fill=\"{}\" fill-opacity=\"{opacity:.3}\"/>",
            d.category.as_str(),
            d.score,
            x1 - x0,
            category_color(d.category)
        );
    }
    axis_ticks(&mut out, &x, 160.0, true, 6);
    out.push_str("</svg>\n");
    out
}

/// Square plot with equal axis ranges, so a point lies on the drawn identity
/// line exactly when its estimate equals the truth.
pub fn scatter_svg(pairs: &[(f64, f64)], title: &str) -> String {
    let size = 500.0;
    let mut out = header(size, size, title);
    let hi = pairs.iter().flat_map(|&(a, b)| [a, b]).fold(0.0f64, f64::max).max(1.0) * 1.05;
    let x = Scale::new((0.0, hi), MARGIN, size - MARGIN);
    let y = Scale::new((0.0, hi), size - MARGIN, MARGIN);
    let _ = writeln!(
        out,
        "<line class=\"identity\" x1=\"{:.4}\" y1=\"{:.4}\" x2=\"{:.4}\" y2=\"{:.4}\" stroke=\"#888\" stroke-dasharray=\"4 3\"/>",
        x.map(0.0),
        y.map(0.0),
        x.map(hi),
        y.map(hi)
    );
    for &(t, e) in pairs {
        let _ = writeln!(
            out,
            "<circle class=\"point\" data-true=\"{t}\" data-estimate=\"{e}\" cx=\"{:.4}\" cy=\"{:.4}\" r=\"4\" fill=\"#1f77b4\"/>",
            x.map(t),
            y.map(e)
        );
    }
    axis_ticks(&mut out, &x, size - MARGIN, true, 5);
    axis_ticks(&mut out, &y, MARGIN, false, 5);
    let _ = writeln!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">true AHI (events/h)</text>",
        size / 2.0,
        size - 12.0
    );
    out.push_str("</svg>\n");
    out
}

/// Difference against mean with bias and limits of agreement. Needs at
/// least two pairs.
pub fn bland_altman_svg(pairs: &[(f64, f64)], title: &str) -> Result<String> {
    let ba = bland_altman(pairs)?;
    let (w, h) = (600.0, 420.0);
    let mut out = header(w, h, title);
    let means: Vec<f64> = pairs.iter().map(|&(t, e)| (t + e) / 2.0).collect();
    let diffs: Vec<f64> = pairs.iter().map(|&(t, e)| e - t).collect();
    let xr = means.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
    let extent = diffs
        .iter()
        .chain([&ba.loa_lower, &ba.loa_upper])
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1.0)
        * 1.1;
    let x = Scale::new(xr, MARGIN, w - MARGIN);
    let y = Scale::new((-extent, extent), h - MARGIN, MARGIN);
    for (class, v) in [("bias", ba.bias), ("loa-upper", ba.loa_upper), ("loa-lower", ba.loa_lower)] {
        let dash = if class == "bias" { "" } else { " stroke-dasharray=\"5 4\"" };
        let _ = writeln!(
            out,
            "<line class=\"{class}\" data-value=\"{v}\" x1=\"{MARGIN}\" y1=\"{:.4}\" x2=\"{:.4}\" y2=\"{:.4}\" stroke=\"#d62728\"{dash}/>",
            y.map(v),
            w - MARGIN,
            y.map(v)
        );
    }
    for (m, d) in means.iter().zip(&diffs) {
        let _ = writeln!(
            out,
            "<circle class=\"point\" data-mean=\"{m}\" data-difference=\"{d}\" cx=\"{:.4}\" cy=\"{:.4}\" r=\"4\" fill=\"#1f77b4\"/>",
            x.map(*m),
            y.map(*d)
        );
    }
    axis_ticks(&mut out, &x, h - MARGIN, true, 5);
    axis_ticks(&mut out, &y, MARGIN, false, 4);
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn check_kind(kind: &str) -> Result<()> {
    if KINDS.contains(&kind) {
        Ok(())
    } else {
        Err(CliError::Usage(format!("unknown plot kind {kind:?}; expected one of {}", KINDS.join(", "))))
    }
}
