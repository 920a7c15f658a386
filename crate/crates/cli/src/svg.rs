//! Self-contained SVG figures: metric heatmaps, pruning curves and rank
//! spread bar charts.

use std::fmt::Write as _;

use headprune::metrics::MetricTable;
use headprune::ranking::PruneCurve;
use headprune::HeadId;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

pub fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn open(width: f64, height: f64) -> String {
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    )
}

/// Blue (low) through white to red (high).
fn diverging(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let (r, g, b) = if t < 0.5 {
        let u = t / 0.5;
        (59.0 + u * 196.0, 76.0 + u * 179.0, 192.0 + u * 63.0)
    } else {
        let u = (t - 0.5) / 0.5;
        (255.0 - u * 75.0, 255.0 - u * 251.0, 255.0 - u * 217.0)
    };
    format!("#{:02x}{:02x}{:02x}", r.round() as u8, g.round() as u8, b.round() as u8)
}

/// Color limits shared by every table: the extremes of the union of
/// normalized scores.
pub fn shared_scale(tables: &[MetricTable]) -> (f64, f64) {
    let values = tables.iter().flat_map(|t| t.rows.iter().map(|r| r.normalized));
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo.is_finite() {
        (lo, hi)
    } else {
        (0.0, 0.0)
    }
}

/// One panel per table, layers down and heads across.
pub fn heatmap(tables: &[MetricTable], layers: usize, heads: usize) -> String {
    const CELL: f64 = 22.0;
    const GAP: f64 = 40.0;
    let (lo, hi) = shared_scale(tables);
    let panel_w = heads as f64 * CELL;
    let panel_h = layers as f64 * CELL;
    let width = 50.0 + tables.len() as f64 * (panel_w + GAP);
    let height = 70.0 + panel_h + 60.0;
    let mut s = open(width, height);
    let title = tables
        .first()
        .map(|t| format!("{} / {}", t.kind, t.attn))
        .unwrap_or_default();
    let _ = writeln!(s, "<text x=\"10\" y=\"18\" font-size=\"14\">{}</text>", escape(&title));
    for (i, t) in tables.iter().enumerate() {
        let x0 = 40.0 + i as f64 * (panel_w + GAP);
        let y0 = 50.0;
        let _ = writeln!(
            s,
            "<g class=\"panel\" data-pair=\"{p}\">\n<text x=\"{x0:.1}\" y=\"{:.1}\">{p}</text>",
            y0 - 8.0,
            p = escape(&t.pair)
        );
        for l in 0..layers {
            let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{l}</text>", x0 - 4.0, y0 + (l as f64 + 0.7) * CELL);
        }
        for r in &t.rows {
            let HeadId { layer, head, .. } = r.head;
            let frac = if hi > lo { (r.normalized - lo) / (hi - lo) } else { 0.5 };
            let _ = writeln!(
                s,
                "<rect class=\"cell\" data-layer=\"{layer}\" data-head=\"{head}\" x=\"{:.1}\" y=\"{:.1}\" width=\"{CELL:.1}\" height=\"{CELL:.1}\" fill=\"{}\"><title>layer {layer} head {head}: {:.4}</title></rect>",
                x0 + head as f64 * CELL,
                y0 + layer as f64 * CELL,
                diverging(frac),
                r.normalized
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">head</text>\n</g>",
            x0 + panel_w / 2.0,
            y0 + panel_h + 14.0
        );
    }
    // legend
    let ly = 50.0 + panel_h + 30.0;
    let steps = 20;
    for k in 0..steps {
        let _ = writeln!(
            s,
            "<rect class=\"legend\" x=\"{:.1}\" y=\"{ly:.1}\" width=\"8\" height=\"10\" fill=\"{}\"/>",
            40.0 + k as f64 * 8.0,
            diverging(k as f64 / (steps - 1) as f64)
        );
    }
    let _ = writeln!(
        s,
        "<text class=\"scale\" data-min=\"{lo}\" data-max=\"{hi}\" x=\"{:.1}\" y=\"{:.1}\">scale {lo:.4} .. {hi:.4}</text>",
        40.0 + steps as f64 * 8.0 + 8.0,
        ly + 9.0
    );
    s.push_str("</svg>\n");
    s
}

struct Frame {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    xmax: f64,
    ymin: f64,
    ymax: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        self.x0 + x / self.xmax.max(1e-12) * self.w
    }

    fn py(&self, y: f64) -> f64 {
        let span = (self.ymax - self.ymin).max(1e-12);
        self.y0 + self.h - (y - self.ymin) / span * self.h
    }

    fn axes(&self, s: &mut String, xlabel: &str, ylabel: &str) {
        let _ = writeln!(
            s,
            "<path d=\"M{:.1} {:.1} V{:.1} H{:.1}\" stroke=\"black\" fill=\"none\"/>",
            self.x0,
            self.y0,
            self.y0 + self.h,
            self.x0 + self.w
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            self.x0 + self.w / 2.0,
            self.y0 + self.h + 30.0,
            escape(xlabel)
        );
        let _ = writeln!(
            s,
            "<text x=\"12\" y=\"{:.1}\" transform=\"rotate(-90 12 {:.1})\" text-anchor=\"middle\">{}</text>",
            self.y0 + self.h / 2.0,
            self.y0 + self.h / 2.0,
            escape(ylabel)
        );
        for (v, label) in [(self.ymin, self.ymin), (self.ymax, self.ymax)] {
            let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{label:.1}</text>", self.x0 - 4.0, self.py(v) + 4.0);
        }
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">0</text>", self.x0, self.y0 + self.h + 14.0);
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            self.x0 + self.w,
            self.y0 + self.h + 14.0,
            self.xmax
        );
    }
}

/// Raw points as markers joined by lines, fitted samples dashed.
pub fn curves(title: &str, curves: &[PruneCurve]) -> String {
    let (w, h) = (640.0, 400.0);
    let xmax = curves.iter().flat_map(|c| c.points.iter().map(|p| p.k)).max().unwrap_or(1) as f64;
    let ymax = curves
        .iter()
        .flat_map(|c| c.points.iter().map(|p| p.bleu))
        .fold(0.0f64, f64::max)
        .max(1.0);
    let frame = Frame {
        x0: 60.0,
        y0: 40.0,
        w: 400.0,
        h: 300.0,
        xmax,
        ymin: 0.0,
        ymax,
    };
    let mut s = open(w, h);
    let _ = writeln!(s, "<text x=\"10\" y=\"18\" font-size=\"14\">{}</text>", escape(title));
    frame.axes(&mut s, "heads pruned", "BLEU");
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = c
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", frame.px(p.k as f64), frame.py(p.bleu)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline class=\"curve\" fill=\"none\" stroke=\"{color}\" points=\"{}\"/>",
            pts.join(" ")
        );
        for p in &c.points {
            let _ = writeln!(
                s,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"{color}\"/>",
                frame.px(p.k as f64),
                frame.py(p.bleu)
            );
        }
        if let Some(fit) = &c.fitted {
            let pts: Vec<String> = fit
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y.clamp(0.0, ymax))))
                .collect();
            let _ = writeln!(
                s,
                "<polyline class=\"fit\" fill=\"none\" stroke=\"{color}\" stroke-dasharray=\"4 3\" points=\"{}\"/>",
                pts.join(" ")
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{color}\">{} ({})</text>",
            frame.x0 + frame.w + 15.0,
            frame.y0 + 14.0 * i as f64,
            escape(&c.method),
            escape(&c.pair)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// One bar per head, in head-id order.
pub fn rank_std_bars(title: &str, values: &[(HeadId, f64)]) -> String {
    let bar = 14.0;
    let ymax = values.iter().map(|v| v.1).fold(0.0f64, f64::max).max(1.0);
    let frame = Frame {
        x0: 60.0,
        y0: 40.0,
        w: (values.len() as f64 * bar).max(bar),
        h: 250.0,
        xmax: values.len() as f64,
        ymin: 0.0,
        ymax,
    };
    let mut s = open(frame.w + 100.0, 360.0);
    let _ = writeln!(s, "<text x=\"10\" y=\"18\" font-size=\"14\">{}</text>", escape(title));
    frame.axes(&mut s, "head (layer-major order)", "rank std");
    for (i, (h, v)) in values.iter().enumerate() {
        let top = frame.py(*v);
        let _ = writeln!(
            s,
            "<rect class=\"bar\" x=\"{:.1}\" y=\"{top:.2}\" width=\"{:.1}\" height=\"{:.2}\" fill=\"{}\"><title>{h}: {v:.4}</title></rect>",
            frame.x0 + i as f64 * bar + 1.0,
            bar - 2.0,
            frame.y0 + frame.h - top,
            PALETTE[h.layer % PALETTE.len()]
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_endpoints() {
        assert_eq!(diverging(0.0), "#3b4cc0");
        assert_eq!(diverging(0.5), "#ffffff");
        assert_eq!(diverging(1.0), "#b40426");
    }

    #[test]
    fn escapes_markup() {
        assert_eq!(escape("a<b & \"c\""), "a&lt;b &amp; &quot;c&quot;");
    }
}
