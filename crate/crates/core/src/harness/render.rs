use std::fmt::Write as _;

use super::report::ExperimentReport;
use crate::canonical::format_float;
use crate::error::{Error, Result};

/// A rectangular table of already-computed report values.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl Table {
    /// Comma-separated, floats at full round-trip precision.
    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for (label, values) in &self.rows {
            out.push_str(label);
            for v in values {
                out.push(',');
                out.push_str(&format_float(*v));
            }
            out.push('\n');
        }
        out
    }

    /// Right-aligned columns with four decimals.
    pub fn to_text(&self) -> String {
        let cells: Vec<Vec<String>> = std::iter::once(self.header.clone())
            .chain(
                self.rows
                    .iter()
                    .map(|(label, values)| std::iter::once(label.clone()).chain(values.iter().map(|v| format!("{v:.4}"))).collect()),
            )
            .collect();
        let widths: Vec<usize> = (0..self.header.len())
            .map(|c| cells.iter().map(|r| r.get(c).map_or(0, |s| s.chars().count())).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &cells {
            let line: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

/// Accuracy, robustness and fairness tables, one row per method in run
/// order. Every cell is a field of the report's summaries.
pub fn emit_tables(report: &ExperimentReport) -> Vec<(&'static str, Table)> {
    let accuracy = Table {
        header: ["method", "D_r^train", "D_f^train", "D_r^test", "D_f^test"].map(String::from).to_vec(),
        rows: report.summary.iter().map(|s| (s.model.clone(), s.accuracy.as_array().to_vec())).collect(),
    };
    let mut header = vec!["method".to_string(), "clean".to_string()];
    header.extend(report.attack_etas.iter().map(|e| format!("eta={e}")));
    let robustness = Table {
        header,
        rows: report
            .summary
            .iter()
            .map(|s| {
                let mut v = vec![s.clean_accuracy];
                v.extend(&s.adversarial_accuracy);
                (s.model.clone(), v)
            })
            .collect(),
    };
    let layers = report.original_summary.mean_gaps.len();
    let mut header = vec!["method".to_string(), "max_deviation".to_string()];
    header.extend((1..=layers).map(|l| format!("gap_{l}")));
    let fairness = Table {
        header,
        rows: std::iter::once(&report.original_summary)
            .chain(&report.summary)
            .map(|s| {
                let mut v = vec![s.mean_max_deviation];
                v.extend(&s.mean_gaps);
                (s.model.clone(), v)
            })
            .collect(),
    };
    vec![("accuracy", accuracy), ("robustness", robustness), ("fairness", fairness)]
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;

/// Static SVG of gap against normalization layer, one polyline per named
/// series. Every series must cover the same number of layers.
pub fn gap_plot_svg(series: &[(String, Vec<f64>)]) -> Result<String> {
    let layers = series.first().map_or(0, |(_, g)| g.len());
    if let Some((name, g)) = series.iter().find(|(_, g)| g.len() != layers) {
        return Err(Error::contract(format!("series {name} has {} layers, expected {layers}", g.len())));
    }
    if series.iter().flat_map(|(_, g)| g).any(|v| !v.is_finite()) {
        return Err(Error::domain("gap values must be finite"));
    }
    let max = series.iter().flat_map(|(_, g)| g.iter().copied()).fold(0.0, f64::max);
    let y_top = if max > 0.0 { max * 1.05 } else { 1.0 };
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let x_of = |l: usize| {
        if layers <= 1 {
            LEFT + plot_w / 2.0
        } else {
            LEFT + plot_w * l as f64 / (layers - 1) as f64
        }
    };
    let y_of = |v: f64| TOP + plot_h * (1.0 - v / y_top);

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#);
    let _ = writeln!(svg, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<path d="M{LEFT} {TOP} V{:.3} H{:.3}" fill="none" stroke="black" stroke-width="1"/>"#,
        TOP + plot_h,
        LEFT + plot_w
    );
    for l in 0..layers {
        let _ = writeln!(
            svg,
            r#"<text x="{:.3}" y="{:.3}" font-size="12" text-anchor="middle">{}</text>"#,
            x_of(l),
            TOP + plot_h + 18.0,
            l + 1
        );
    }
    for i in 0..=4 {
        let v = y_top * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.3}" y="{:.3}" font-size="11" text-anchor="end">{v:.4}</text>"#,
            LEFT - 6.0,
            y_of(v) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.3}" y="{:.3}" font-size="13" text-anchor="middle">normalization layer</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.3}" font-size="13" text-anchor="middle" transform="rotate(-90 16 {:.3})">fairness gap</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );
    for (i, (name, gaps)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = gaps.iter().enumerate().map(|(l, &v)| format!("{:.3},{:.3}", x_of(l), y_of(v))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline data-series="{name}" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            points.join(" ")
        );
        let ly = TOP + 16.0 * i as f64 + 8.0;
        let lx = LEFT + plot_w + 16.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx:.3}" y1="{ly:.3}" x2="{:.3}" y2="{ly:.3}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(svg, r#"<text x="{:.3}" y="{:.3}" font-size="12">{name}</text>"#, lx + 26.0, ly + 4.0);
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
