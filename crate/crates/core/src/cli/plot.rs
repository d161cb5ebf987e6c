//! Self-contained SVG line charts of training metrics. Output depends only
//! on the input records, so the same CSV always yields identical bytes.

use std::fmt::Write as _;

use crate::evalkit::MetricRecord;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 48.0;
const TICKS: usize = 5;
const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#7f7f7f"];

/// One chart to emit: file stem, title, y-axis label and the plotted columns.
pub struct ChartSpec {
    pub file_stem: &'static str,
    pub title: &'static str,
    pub y_label: &'static str,
    pub columns: &'static [&'static str],
}

pub const CHARTS: [ChartSpec; 3] = [
    ChartSpec {
        file_stem: "losses",
        title: "Training losses",
        y_label: "loss",
        columns: &["l_ce", "l_pro", "l_ins", "total"],
    },
    ChartSpec {
        file_stem: "pseudo_acc",
        title: "Pseudo-label accuracy on corrupted samples",
        y_label: "accuracy",
        columns: &["pseudo_acc"],
    },
    ChartSpec {
        file_stem: "ood",
        title: "OOD detection",
        y_label: "rate",
        columns: &["ood_precision", "ood_recall"],
    },
];

fn column(record: &MetricRecord, name: &str) -> f64 {
    match name {
        "l_ce" => record.l_ce,
        "l_pro" => record.l_pro,
        "l_ins" => record.l_ins,
        "total" => record.total,
        "pseudo_acc" => record.pseudo_acc,
        "ood_recall" => record.ood_recall,
        "ood_precision" => record.ood_precision,
        "knn_acc" => record.knn_acc,
        "calib_err" => record.calib_err,
        other => unreachable!("no metric column `{other}`"),
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Tick label with at most four significant digits.
fn tick_label(v: f64) -> String {
    let s = format!("{:.4}", v);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

fn header(out: &mut String, title: &str) {
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    );
}

/// Render one chart. Non-finite values break the line rather than being
/// drawn; a chart with nothing finite to draw is a labelled placeholder.
pub fn render_chart(spec: &ChartSpec, records: &[MetricRecord]) -> String {
    let mut out = String::new();
    header(&mut out, spec.title);

    let points: Vec<Vec<(f64, f64)>> = spec
        .columns
        .iter()
        .map(|c| records.iter().map(|r| (r.epoch as f64, column(r, c))).collect())
        .collect();
    let finite = || points.iter().flatten().filter(|p| p.1.is_finite());
    if finite().next().is_none() {
        let _ = write!(
            out,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" fill=\"#7f7f7f\">no data</text>\n</svg>\n",
            WIDTH / 2.0,
            HEIGHT / 2.0
        );
        return out;
    }

    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in finite() {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    // Flat ranges still need a non-zero extent.
    if x1 == x0 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 == y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * plot_w;
    let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * plot_h;

    let _ = writeln!(
        out,
        "<rect x=\"{LEFT}\" y=\"{TOP}\" width=\"{plot_w}\" height=\"{plot_h}\" fill=\"none\" stroke=\"black\"/>"
    );
    for i in 0..=TICKS {
        let t = i as f64 / TICKS as f64;
        let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(
            out,
            "<line x1=\"{px:.2}\" y1=\"{}\" x2=\"{px:.2}\" y2=\"{}\" stroke=\"black\"/>\
             <text x=\"{px:.2}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            TOP + plot_h,
            TOP + plot_h + 5.0,
            TOP + plot_h + 18.0,
            tick_label(xv)
        );
        let _ = writeln!(
            out,
            "<line x1=\"{}\" y1=\"{py:.2}\" x2=\"{LEFT}\" y2=\"{py:.2}\" stroke=\"black\"/>\
             <text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>",
            LEFT - 5.0,
            LEFT - 8.0,
            py + 4.0,
            tick_label(yv)
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">epoch</text>\n\
         <text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>",
        LEFT + plot_w / 2.0,
        HEIGHT - 10.0,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0,
        escape(spec.y_label)
    );

    for (i, (name, series)) in spec.columns.iter().zip(&points).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut segment: Vec<String> = Vec::new();
        let flush = |segment: &mut Vec<String>, out: &mut String| {
            match segment.len() {
                0 => {}
                1 => {
                    let (x, y) = segment[0].split_once(',').expect("x,y pair");
                    let _ = writeln!(out, "<circle cx=\"{x}\" cy=\"{y}\" r=\"2.5\" fill=\"{color}\"/>");
                }
                _ => {
                    let _ = writeln!(
                        out,
                        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
                        segment.join(" ")
                    );
                }
            }
            segment.clear();
        };
        for &(x, y) in series {
            if y.is_finite() {
                segment.push(format!("{:.2},{:.2}", sx(x), sy(y)));
            } else {
                flush(&mut segment, &mut out);
            }
        }
        flush(&mut segment, &mut out);
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = WIDTH - RIGHT + 12.0;
        let _ = writeln!(
            out,
            "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\
             <text x=\"{}\" y=\"{}\">{}</text>",
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(epoch: usize, v: f64) -> MetricRecord {
        MetricRecord {
            epoch,
            l_ce: v,
            l_pro: v / 2.0,
            l_ins: v * 2.0,
            total: v * 3.5,
            pseudo_acc: f64::NAN,
            ood_recall: 0.5,
            ood_precision: 0.25,
            knn_acc: 0.9,
            calib_err: 0.1,
        }
    }

    #[test]
    fn empty_input_is_a_placeholder() {
        let svg = render_chart(&CHARTS[0], &[]);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(svg.contains("no data"));
    }

    #[test]
    fn all_nan_column_is_a_placeholder() {
        let svg = render_chart(&CHARTS[1], &[record(1, 1.0), record(2, 0.5)]);
        assert!(svg.contains("no data"));
    }

    #[test]
    fn lines_are_drawn_per_column() {
        let recs = [record(1, 1.0), record(2, 0.5), record(3, 0.25)];
        let svg = render_chart(&CHARTS[0], &recs);
        assert_eq!(svg.matches("<polyline").count(), 4);
        assert!(!svg.contains("NaN"));
        assert_eq!(svg, render_chart(&CHARTS[0], &recs));
    }

    #[test]
    fn single_point_is_a_marker() {
        let svg = render_chart(&CHARTS[2], &[record(1, 1.0)]);
        assert_eq!(svg.matches("<circle").count(), 2);
    }

    #[test]
    fn tick_labels_are_short() {
        assert_eq!(tick_label(0.5), "0.5");
        assert_eq!(tick_label(10.0), "10");
        assert_eq!(tick_label(-0.00001), "0");
    }
}
