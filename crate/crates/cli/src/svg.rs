//! Self-contained SVG emission for the report plots: grouped bar charts
//! with 95% CI error bars, and Ripley strip plots with per-radius
//! clustering/dispersion marks.
//!
//! Output is deterministic: fixed canvas geometry, inline styles, no
//! timestamps, and coordinates formatted to two decimals. Machine-readable
//! `data-*` attributes carry the plotted values so tests can verify the
//! geometry against the source numbers.

use std::fmt::Write as _;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 380.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 90.0;

pub const COLOR_CLUSTERED: &str = "#d62728";
pub const COLOR_DISPERSED: &str = "#1f77b4";
const BAR_COLORS: [&str; 2] = ["#4c78a8", "#f58518"];

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One bar: label, value, optional CI half-width, optional significance
/// ring, and a series index selecting the fill color.
#[derive(Debug, Clone)]
pub struct Bar {
    pub label: String,
    pub value: f64,
    pub ci_half: Option<f64>,
    pub significant: Option<bool>,
    pub series: usize,
}

/// Bar chart with error bars whose half-length equals the CI half-width in
/// data units. Bars with undefined values are expected to be filtered by
/// the caller and listed in `omitted`, which is rendered as a legend note.
pub fn bar_chart(title: &str, y_label: &str, bars: &[Bar], omitted: &[String]) -> String {
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let max_val = bars
        .iter()
        .map(|b| b.value + b.ci_half.unwrap_or(0.0))
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let scale = plot_h / (max_val * 1.05);
    let y_of = |v: f64| MARGIN_TOP + plot_h - v * scale;

    let mut svg = String::new();
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" data-scale="{scale}">"#,
        w = WIDTH,
        h = HEIGHT,
        scale = fmt(scale),
    );
    let _ = write!(
        svg,
        r#"<rect width="{w}" height="{h}" fill="white"/><text x="{tx}" y="22" font-family="sans-serif" font-size="15" text-anchor="middle">{title}</text>"#,
        w = WIDTH,
        h = HEIGHT,
        tx = fmt(WIDTH / 2.0),
        title = escape(title),
    );
    let _ = write!(
        svg,
        r#"<text x="16" y="{ty}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {ty})">{label}</text>"#,
        ty = fmt(MARGIN_TOP + plot_h / 2.0),
        label = escape(y_label),
    );
    // axes
    let _ = write!(
        svg,
        r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/><line x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}" stroke="black"/>"#,
        x0 = fmt(MARGIN_LEFT),
        y0 = fmt(MARGIN_TOP),
        y1 = fmt(MARGIN_TOP + plot_h),
        x1 = fmt(MARGIN_LEFT + plot_w),
    );

    let n = bars.len().max(1);
    let slot = plot_w / n as f64;
    let bar_w = (slot * 0.6).min(60.0);
    for (i, bar) in bars.iter().enumerate() {
        let cx = MARGIN_LEFT + slot * (i as f64 + 0.5);
        let x = cx - bar_w / 2.0;
        let y = y_of(bar.value);
        let color = BAR_COLORS[bar.series % BAR_COLORS.len()];
        let stroke = match bar.significant {
            Some(true) => "#2ca02c",
            Some(false) => "#7f7f7f",
            None => "none",
        };
        let _ = write!(
            svg,
            r#"<rect class="bar" x="{x}" y="{y}" width="{bw}" height="{bh}" fill="{color}" stroke="{stroke}" stroke-width="2" data-value="{v}"/>"#,
            x = fmt(x),
            y = fmt(y),
            bw = fmt(bar_w),
            bh = fmt((MARGIN_TOP + plot_h - y).max(0.0)),
            color = color,
            stroke = stroke,
            v = bar.value,
        );
        if let Some(ci) = bar.ci_half {
            let y_hi = y_of(bar.value + ci);
            let y_lo = y_of((bar.value - ci).max(0.0));
            let _ = write!(
                svg,
                r#"<line class="ci" x1="{cx}" y1="{y_hi}" x2="{cx}" y2="{y_lo}" stroke="black" stroke-width="1.5" data-ci-half="{ci}"/>"#,
                cx = fmt(cx),
                y_hi = fmt(y_hi),
                y_lo = fmt(y_lo),
                ci = ci,
            );
            for y in [y_hi, y_lo] {
                let _ = write!(
                    svg,
                    r#"<line x1="{x1}" y1="{y}" x2="{x2}" y2="{y}" stroke="black" stroke-width="1.5"/>"#,
                    x1 = fmt(cx - 5.0),
                    x2 = fmt(cx + 5.0),
                    y = fmt(y),
                );
            }
        }
        let _ = write!(
            svg,
            r#"<text x="{cx}" y="{ty}" font-family="sans-serif" font-size="10" text-anchor="end" transform="rotate(-45 {cx} {ty})">{label}</text>"#,
            cx = fmt(cx),
            ty = fmt(MARGIN_TOP + plot_h + 14.0),
            label = escape(&bar.label),
        );
    }
    if !omitted.is_empty() {
        let _ = write!(
            svg,
            r##"<text class="legend-note" x="{x}" y="{y}" font-family="sans-serif" font-size="11" fill="#555">omitted (no data): {list}</text>"##,
            x = fmt(MARGIN_LEFT),
            y = fmt(HEIGHT - 8.0),
            list = escape(&omitted.join(", ")),
        );
    }
    svg.push_str("</svg>");
    svg
}

/// One strip of a Ripley plot: a label and the per-radius verdicts.
#[derive(Debug, Clone)]
pub struct RipleyStrip {
    pub label: String,
    pub radii: Vec<f64>,
    /// Verdict names per radius: "clustered", "dispersed", or "neither".
    pub verdicts: Vec<String>,
}

/// Strip plot: radius on x, one row per class combination, red marks where
/// clustered and blue where dispersed.
pub fn ripley_strip_plot(title: &str, strips: &[RipleyStrip], omitted: &[String]) -> String {
    let plot_w = WIDTH - MARGIN_LEFT - 140.0;
    let plot_h = HEIGHT - MARGIN_TOP - 60.0;
    let r_max = strips
        .iter()
        .flat_map(|s| s.radii.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let x_of = |r: f64| MARGIN_LEFT + r / r_max * plot_w;

    let mut svg = String::new();
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" data-rmax="{rmax}">"#,
        w = WIDTH,
        h = HEIGHT,
        rmax = r_max,
    );
    let _ = write!(
        svg,
        r#"<rect width="{w}" height="{h}" fill="white"/><text x="{tx}" y="22" font-family="sans-serif" font-size="15" text-anchor="middle">{title}</text>"#,
        w = WIDTH,
        h = HEIGHT,
        tx = fmt(WIDTH / 2.0),
        title = escape(title),
    );
    let n = strips.len().max(1);
    for (i, strip) in strips.iter().enumerate() {
        let cy = MARGIN_TOP + plot_h * (i as f64 + 0.5) / n as f64;
        let _ = write!(
            svg,
            r##"<line x1="{x0}" y1="{cy}" x2="{x1}" y2="{cy}" stroke="#ddd"/><text x="{lx}" y="{ly}" font-family="sans-serif" font-size="10" text-anchor="start">{label}</text>"##,
            x0 = fmt(MARGIN_LEFT),
            x1 = fmt(MARGIN_LEFT + plot_w),
            cy = fmt(cy),
            lx = fmt(MARGIN_LEFT + plot_w + 8.0),
            ly = fmt(cy + 3.0),
            label = escape(&strip.label),
        );
        for (r, verdict) in strip.radii.iter().zip(&strip.verdicts) {
            let color = match verdict.as_str() {
                "clustered" => COLOR_CLUSTERED,
                "dispersed" => COLOR_DISPERSED,
                _ => continue,
            };
            let _ = write!(
                svg,
                r#"<circle class="{class}" cx="{cx}" cy="{cy}" r="2.5" fill="{color}" data-radius="{r}"/>"#,
                class = verdict,
                cx = fmt(x_of(*r)),
                cy = fmt(cy),
                color = color,
                r = r,
            );
        }
    }
    // x axis with ticks
    let axis_y = MARGIN_TOP + plot_h + 10.0;
    let _ = write!(
        svg,
        r#"<line x1="{x0}" y1="{y}" x2="{x1}" y2="{y}" stroke="black"/>"#,
        x0 = fmt(MARGIN_LEFT),
        x1 = fmt(MARGIN_LEFT + plot_w),
        y = fmt(axis_y),
    );
    for i in 0..=4 {
        let r = r_max * i as f64 / 4.0;
        let _ = write!(
            svg,
            r#"<text x="{x}" y="{y}" font-family="sans-serif" font-size="10" text-anchor="middle">{r:.2}</text>"#,
            x = fmt(x_of(r)),
            y = fmt(axis_y + 14.0),
        );
    }
    let _ = write!(
        svg,
        r#"<text x="{x}" y="{y}" font-family="sans-serif" font-size="11" text-anchor="middle">radius (um)</text>"#,
        x = fmt(MARGIN_LEFT + plot_w / 2.0),
        y = fmt(axis_y + 30.0),
    );
    if !omitted.is_empty() {
        let _ = write!(
            svg,
            r##"<text class="legend-note" x="{x}" y="{y}" font-family="sans-serif" font-size="11" fill="#555">omitted (no data): {list}</text>"##,
            x = fmt(MARGIN_LEFT),
            y = fmt(HEIGHT - 8.0),
            list = escape(&omitted.join(", ")),
        );
    }
    svg.push_str("</svg>");
    svg
}
