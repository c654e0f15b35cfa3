//! Hand-rolled SVG charts with CSV sidecars.
//!
//! Every chart is a pure function of its inputs: fixed layout, no
//! timestamps, no generated ids, floats printed with a fixed rule. The CSV
//! sidecar holds exactly the numbers the SVG draws, so plots stay auditable
//! and replays compare byte-for-byte.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array3;

use crate::detector::{LayerDistribution, ScoredUnit};
use crate::harness::CurvePoint;

/// Diverging endpoints for delta heatmaps (blue = negative, red = positive),
/// interpolated through white at exactly zero.
const BLUE: (u8, u8, u8) = (33, 102, 172);
const RED: (u8, u8, u8) = (178, 24, 43);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chart {
    pub svg: String,
    pub csv: String,
}

impl Chart {
    /// Writes `<stem>.svg` and `<stem>.csv` next to each other.
    pub fn save(&self, dir: &Path, stem: &str) -> std::io::Result<()> {
        std::fs::write(dir.join(format!("{stem}.svg")), &self.svg)?;
        std::fs::write(dir.join(format!("{stem}.csv")), &self.csv)
    }
}

/// Pixel coordinates round to 2 decimals; data values in CSV use the
/// shortest round-trip form.
fn px(x: f64) -> String {
    format!("{x:.2}")
}

fn esc(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Svg {
    body: String,
    width: f64,
    height: f64,
}

impl Svg {
    fn new(width: f64, height: f64) -> Self {
        Svg { body: String::new(), width, height }
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let _ = writeln!(
            self.body,
            r#"<rect x="{}" y="{}" width="{}" height="{}" fill="{}"/>"#,
            px(x),
            px(y),
            px(w),
            px(h),
            fill
        );
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str) {
        let _ = writeln!(
            self.body,
            r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="{}" stroke-width="1"/>"#,
            px(x1),
            px(y1),
            px(x2),
            px(y2),
            stroke
        );
    }

    fn text(&mut self, x: f64, y: f64, size: u32, anchor: &str, content: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{}" y="{}" font-family="monospace" font-size="{}" text-anchor="{}">{}</text>"#,
            px(x),
            px(y),
            size,
            anchor,
            esc(content)
        );
    }

    fn circle(&mut self, x: f64, y: f64, r: f64, fill: &str) {
        let _ = writeln!(
            self.body,
            r#"<circle cx="{}" cy="{}" r="{}" fill="{}"/>"#,
            px(x),
            px(y),
            px(r),
            fill
        );
    }

    fn polyline(&mut self, points: &[(f64, f64)], stroke: &str) {
        let coords: Vec<String> =
            points.iter().map(|&(x, y)| format!("{},{}", px(x), px(y))).collect();
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
            coords.join(" "),
            stroke
        );
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" \
             viewBox=\"0 0 {} {}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            px(self.width),
            px(self.height),
            px(self.width),
            px(self.height),
            self.body
        )
    }
}

/// White at 0, saturating toward the endpoints at |delta| = vmax.
fn diverging_color(delta: f64, vmax: f64) -> String {
    let w = if vmax > 0.0 { (delta.abs() / vmax).min(1.0) } else { 0.0 };
    let (r, g, b) = if delta < 0.0 { BLUE } else { RED };
    let mix = |c: u8| (255.0 + (c as f64 - 255.0) * w).round() as u8;
    format!("rgb({},{},{})", mix(r), mix(g), mix(b))
}

/// Shades 0 → white, 1 → black, for attention probabilities.
fn gray(p: f64) -> String {
    let v = (255.0 * (1.0 - p.clamp(0.0, 1.0))).round() as u8;
    format!("rgb({v},{v},{v})")
}

/// Grouped bar chart of selection share per relative-depth bin, one bar
/// group per bin, one series per named distribution.
pub fn layer_histogram(series: &[(&str, &LayerDistribution)], title: &str) -> Chart {
    assert!(!series.is_empty(), "need at least one distribution");
    let bins = series[0].1.bins.len();
    assert!(series.iter().all(|(_, d)| d.bins.len() == bins), "bin counts must agree");

    let mut csv = String::from("series,depth_lo,depth_hi,count,percent\n");
    for (name, dist) in series {
        for bin in &dist.bins {
            let _ = writeln!(
                csv,
                "{name},{},{},{},{}",
                bin.depth.start, bin.depth.end, bin.count, bin.percent
            );
        }
    }

    let (width, height) = (640.0, 360.0);
    let (left, right, top, bottom) = (56.0, 16.0, 40.0, 48.0);
    let (pw, ph) = (width - left - right, height - top - bottom);
    let mut svg = Svg::new(width, height);
    svg.text(width / 2.0, 20.0, 14, "middle", title);

    for tick in [0.0, 25.0, 50.0, 75.0, 100.0] {
        let y = top + ph * (1.0 - tick / 100.0);
        svg.line(left, y, left + pw, y, "#dddddd");
        svg.text(left - 6.0, y + 4.0, 10, "end", &format!("{tick:.0}%"));
    }

    let palette = ["#b2182b", "#2166ac", "#4daf4a", "#984ea3"];
    let group_w = pw / bins as f64;
    let bar_w = group_w * 0.8 / series.len() as f64;
    for (s, (_, dist)) in series.iter().enumerate() {
        let fill = palette[s % palette.len()];
        for (i, bin) in dist.bins.iter().enumerate() {
            let h = ph * bin.percent / 100.0;
            let x = left + group_w * i as f64 + group_w * 0.1 + bar_w * s as f64;
            svg.rect(x, top + ph - h, bar_w, h, fill);
        }
    }
    for (i, bin) in series[0].1.bins.iter().enumerate() {
        let x = left + group_w * (i as f64 + 0.5);
        svg.text(x, top + ph + 16.0, 10, "middle", &format!("{:.2}", bin.depth.start));
    }
    svg.text(left + pw / 2.0, height - 8.0, 11, "middle", "relative depth (bin start)");
    for (s, (name, _)) in series.iter().enumerate() {
        let y = top + 14.0 * s as f64;
        svg.rect(left + pw - 120.0, y - 8.0, 10.0, 10.0, palette[s % palette.len()]);
        svg.text(left + pw - 106.0, y, 10, "start", name);
    }
    svg.line(left, top + ph, left + pw, top + ph, "#000000");

    Chart { svg: svg.finish(), csv }
}

/// Layer-by-index heatmap of unit deltas, color diverging around exactly 0.
pub fn delta_heatmap<T: ScoredUnit>(scores: &[T], title: &str) -> Chart {
    assert!(!scores.is_empty(), "need at least one unit");
    let rows = scores.iter().map(|s| s.key().0).max().unwrap() + 1;
    let cols = scores.iter().map(|s| s.key().1).max().unwrap() + 1;
    let vmax = scores.iter().map(|s| s.delta().abs()).fold(0.0f64, f64::max);

    let mut csv = String::from("layer,index,delta\n");
    for s in scores {
        let (l, i) = s.key();
        let _ = writeln!(csv, "{l},{i},{}", s.delta());
    }

    let (left, top) = (64.0, 40.0);
    let pw = 960.0;
    let cell_h = 22.0;
    let cell_w = pw / cols as f64;
    let ph = cell_h * rows as f64;
    let (width, height) = (left + pw + 16.0, top + ph + 56.0);
    let mut svg = Svg::new(width, height);
    svg.text(width / 2.0, 20.0, 14, "middle", title);
    for s in scores {
        let (l, i) = s.key();
        let fill = diverging_color(s.delta(), vmax);
        svg.rect(left + cell_w * i as f64, top + cell_h * l as f64, cell_w, cell_h, &fill);
    }
    for l in 0..rows {
        svg.text(left - 6.0, top + cell_h * (l as f64 + 0.5) + 4.0, 10, "end", &format!("L{l}"));
    }
    svg.text(left + pw / 2.0, top + ph + 20.0, 11, "middle", "unit index");
    // Scale legend: endpoint colors and the zero midpoint.
    let ly = top + ph + 36.0;
    svg.rect(left, ly - 10.0, 12.0, 12.0, &diverging_color(-vmax.max(1e-300), vmax));
    svg.text(left + 16.0, ly, 10, "start", &format!("{:-.4}", -vmax));
    svg.rect(left + 120.0, ly - 10.0, 12.0, 12.0, "rgb(255,255,255)");
    svg.text(left + 136.0, ly, 10, "start", "0");
    svg.rect(left + 200.0, ly - 10.0, 12.0, 12.0, &diverging_color(vmax.max(1e-300), vmax));
    svg.text(left + 216.0, ly, 10, "start", &format!("{:+.4}", vmax));

    Chart { svg: svg.finish(), csv }
}

/// Per-head attention grids for labeled variants of one sample: heads run
/// down, variants run across, each panel a lower-triangular query-by-key
/// map shaded by probability.
pub fn attention_map(variants: &[(&str, &Array3<f64>)], title: &str) -> Chart {
    assert!(!variants.is_empty(), "need at least one variant");
    let (h_count, _, _) = variants[0].1.dim();
    assert!(variants.iter().all(|(_, a)| a.dim().0 == h_count), "head counts must agree");

    let mut csv = String::from("variant,head,query,key,prob\n");
    for (name, attn) in variants {
        let (_, t_len, _) = attn.dim();
        for h in 0..h_count {
            for q in 0..t_len {
                for k in 0..=q {
                    let _ = writeln!(csv, "{name},{h},{q},{k},{}", attn[[h, q, k]]);
                }
            }
        }
    }

    let t_max = variants.iter().map(|(_, a)| a.dim().1).max().unwrap();
    let cell = (240.0 / t_max as f64).min(6.0);
    let panel = cell * t_max as f64;
    let (gap, left, top) = (14.0, 56.0, 48.0);
    let width = left + (panel + gap) * variants.len() as f64 + 8.0;
    let height = top + (panel + gap) * h_count as f64 + 8.0;
    let mut svg = Svg::new(width, height);
    svg.text(width / 2.0, 20.0, 14, "middle", title);
    for (v, (name, attn)) in variants.iter().enumerate() {
        let x0 = left + (panel + gap) * v as f64;
        svg.text(x0 + panel / 2.0, top - 8.0, 11, "middle", name);
        let (_, t_len, _) = attn.dim();
        for h in 0..h_count {
            let y0 = top + (panel + gap) * h as f64;
            if v == 0 {
                svg.text(left - 8.0, y0 + panel / 2.0, 10, "end", &format!("H{h}"));
            }
            svg.rect(x0, y0, cell * t_len as f64, cell * t_len as f64, "rgb(255,255,255)");
            for q in 0..t_len {
                for k in 0..=q {
                    let p = attn[[h, q, k]];
                    if p > 0.0 {
                        svg.rect(
                            x0 + cell * k as f64,
                            y0 + cell * q as f64,
                            cell,
                            cell,
                            &gray(p),
                        );
                    }
                }
            }
        }
    }

    Chart { svg: svg.finish(), csv }
}

/// Accuracy against typo count as a line with point markers, y fixed to
/// [0, 1].
pub fn accuracy_line(points: &[CurvePoint], title: &str) -> Chart {
    assert!(!points.is_empty(), "need at least one point");
    let mut csv = String::from("t,accuracy,samples\n");
    for p in points {
        let _ = writeln!(csv, "{},{},{}", p.t, p.accuracy, p.samples);
    }

    let (width, height) = (560.0, 360.0);
    let (left, right, top, bottom) = (56.0, 16.0, 40.0, 48.0);
    let (pw, ph) = (width - left - right, height - top - bottom);
    let t_max = points.iter().map(|p| p.t).max().unwrap().max(1) as f64;
    let mut svg = Svg::new(width, height);
    svg.text(width / 2.0, 20.0, 14, "middle", title);
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let y = top + ph * (1.0 - tick);
        svg.line(left, y, left + pw, y, "#dddddd");
        svg.text(left - 6.0, y + 4.0, 10, "end", &format!("{tick:.2}"));
    }
    let xy: Vec<(f64, f64)> = points
        .iter()
        .map(|p| (left + pw * p.t as f64 / t_max, top + ph * (1.0 - p.accuracy)))
        .collect();
    svg.polyline(&xy, "#b2182b");
    for (p, &(x, y)) in points.iter().zip(&xy) {
        svg.circle(x, y, 3.0, "#b2182b");
        svg.text(x, top + ph + 16.0, 10, "middle", &format!("{}", p.t));
    }
    svg.text(left + pw / 2.0, height - 8.0, 11, "middle", "typos per prompt (t)");
    svg.line(left, top + ph, left + pw, top + ph, "#000000");

    Chart { svg: svg.finish(), csv }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{layer_distribution, NeuronScore};

    fn scores() -> Vec<NeuronScore> {
        (0..3)
            .flat_map(|l| {
                (0..4).map(move |i| NeuronScore {
                    layer: l,
                    neuron: i,
                    s_clean: 0.0,
                    s_typo: 0.0,
                    s_split: 0.0,
                    delta: (l as f64 - 1.0) * (i as f64 + 1.0) * 0.1,
                })
            })
            .collect()
    }

    #[test]
    fn charts_are_deterministic() {
        let s = scores();
        assert_eq!(delta_heatmap(&s, "d"), delta_heatmap(&s, "d"));
        let sel = vec![(0, 1), (1, 2), (2, 0)];
        let d = layer_distribution(&sel, 3, 5);
        assert_eq!(
            layer_histogram(&[("a", &d)], "h"),
            layer_histogram(&[("a", &d)], "h")
        );
    }

    #[test]
    fn svg_is_well_formed_and_timestamp_free() {
        let chart = delta_heatmap(&scores(), "unit deltas");
        assert!(chart.svg.starts_with("<svg "));
        assert!(chart.svg.ends_with("</svg>\n"));
        assert!(!chart.svg.to_lowercase().contains("date"));
        assert!(chart.svg.contains("unit deltas"));
        // One cell per unit, plus background, legend swatches, panel frames.
        let cells = chart.svg.matches("<rect").count();
        assert!(cells >= scores().len());
    }

    #[test]
    fn heatmap_csv_holds_exactly_the_plotted_deltas() {
        let s = scores();
        let chart = delta_heatmap(&s, "d");
        let lines: Vec<&str> = chart.csv.lines().collect();
        assert_eq!(lines[0], "layer,index,delta");
        assert_eq!(lines.len(), 1 + s.len());
        for (line, unit) in lines[1..].iter().zip(&s) {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols[0].parse::<usize>().unwrap(), unit.layer);
            assert_eq!(cols[1].parse::<usize>().unwrap(), unit.neuron);
            assert_eq!(cols[2].parse::<f64>().unwrap(), unit.delta);
        }
    }

    #[test]
    fn diverging_scale_is_white_at_zero_and_saturates() {
        assert_eq!(diverging_color(0.0, 1.0), "rgb(255,255,255)");
        assert_eq!(diverging_color(1.0, 1.0), format!("rgb({},{},{})", RED.0, RED.1, RED.2));
        assert_eq!(
            diverging_color(-1.0, 1.0),
            format!("rgb({},{},{})", BLUE.0, BLUE.1, BLUE.2)
        );
        // All-zero scores still render (vmax = 0 degenerates to white).
        assert_eq!(diverging_color(0.0, 0.0), "rgb(255,255,255)");
    }

    #[test]
    fn histogram_csv_matches_distribution() {
        let sel = vec![(0, 0), (0, 1), (2, 0)];
        let d = layer_distribution(&sel, 3, 4);
        let chart = layer_histogram(&[("typo neurons", &d)], "by depth");
        let lines: Vec<&str> = chart.csv.lines().collect();
        assert_eq!(lines[0], "series,depth_lo,depth_hi,count,percent");
        assert_eq!(lines.len(), 1 + d.bins.len());
        let total: usize = lines[1..]
            .iter()
            .map(|l| l.split(',').nth(3).unwrap().parse::<usize>().unwrap())
            .sum();
        assert_eq!(total, sel.len());
    }

    #[test]
    fn attention_map_renders_lower_triangle_only() {
        let t = 5usize;
        let mut a = Array3::<f64>::zeros((2, t, t));
        for h in 0..2 {
            for q in 0..t {
                for k in 0..=q {
                    a[[h, q, k]] = 1.0 / (q + 1) as f64;
                }
            }
        }
        let chart = attention_map(&[("clean", &a), ("typo", &a)], "attn");
        let expected_rows = 2 * 2 * (t * (t + 1) / 2);
        assert_eq!(chart.csv.lines().count(), 1 + expected_rows);
        assert!(chart.svg.contains("clean"));
        assert!(chart.svg.contains("H1"));
    }

    #[test]
    fn accuracy_line_plots_every_point() {
        let pts = vec![
            CurvePoint { t: 0, accuracy: 1.0, samples: 10 },
            CurvePoint { t: 1, accuracy: 0.7, samples: 10 },
            CurvePoint { t: 16, accuracy: 0.3, samples: 9 },
        ];
        let chart = accuracy_line(&pts, "curve");
        assert_eq!(chart.csv.lines().count(), 1 + pts.len());
        assert_eq!(chart.svg.matches("<circle").count(), pts.len());
        assert!(chart.csv.contains("16,0.3,9"));
    }

    #[test]
    fn charts_save_both_files() {
        let dir = std::env::temp_dir().join("typolab-plot-test");
        std::fs::create_dir_all(&dir).unwrap();
        let chart = accuracy_line(&[CurvePoint { t: 0, accuracy: 1.0, samples: 1 }], "c");
        chart.save(&dir, "curve").unwrap();
        assert_eq!(std::fs::read_to_string(dir.join("curve.svg")).unwrap(), chart.svg);
        assert_eq!(std::fs::read_to_string(dir.join("curve.csv")).unwrap(), chart.csv);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
