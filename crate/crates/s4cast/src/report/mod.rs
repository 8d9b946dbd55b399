//! Tabular and graphical outputs: RFC-4180-style CSV tables, multi-series
//! SVG line plots (log or linear y), and grouped bar charts. All SVG output
//! is plain-text, self-contained, and well-formed XML.

use crate::train::LossReport;
use crate::util::write_atomic;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    InvalidInput(String),
    #[error("{file}: missing column {column}")]
    MissingColumn { file: String, column: String },
    #[error("{file}: {reason}")]
    Malformed { file: String, reason: String },
}

/// Write a CSV table with the `csv` crate's quoting rules.
pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), ReportError> {
    let mut writer = csv::WriterBuilder::new().from_writer(Vec::new());
    writer.write_record(header)?;
    for row in rows {
        writer.write_record(row)?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| ReportError::InvalidInput(e.to_string()))?;
    write_atomic(path, &bytes)?;
    Ok(())
}

/// Read a per-epoch loss history CSV, validating the expected columns.
pub fn read_history_csv(path: &Path) -> Result<Vec<LossReport>, ReportError> {
    let file = path.display().to_string();
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let want = [
        "epoch",
        "loss_y",
        "loss_a",
        "loss_total",
        "nrmse",
        "rmse_treated",
        "rmse_untreated",
        "wall_seconds",
    ];
    let mut idx = Vec::with_capacity(want.len());
    for col in want {
        match headers.iter().position(|h| h == col) {
            Some(i) => idx.push(i),
            None => {
                return Err(ReportError::MissingColumn {
                    file,
                    column: col.to_string(),
                })
            }
        }
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let field = |i: usize| -> Result<f64, ReportError> {
            let raw = record.get(idx[i]).ok_or_else(|| ReportError::Malformed {
                file: file.clone(),
                reason: "short row".into(),
            })?;
            raw.parse::<f64>().map_err(|_| ReportError::Malformed {
                file: file.clone(),
                reason: format!("non-numeric field {raw:?}"),
            })
        };
        out.push(LossReport {
            epoch: field(0)? as usize,
            loss_y: field(1)?,
            loss_a: field(2)?,
            loss_total: field(3)?,
            nrmse: field(4)?,
            rmse_treated: field(5)?,
            rmse_untreated: field(6)?,
            wall_seconds: field(7)?,
        });
    }
    Ok(out)
}

/// One line-plot series.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotConfig {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// Log-scale y axis (the default); non-positive values are clamped to
    /// half the smallest positive value in the data.
    pub log_y: bool,
}

impl Default for PlotConfig {
    fn default() -> Self {
        Self {
            title: String::new(),
            x_label: String::new(),
            y_label: String::new(),
            log_y: true,
        }
    }
}

const WIDTH: f64 = 820.0;
const HEIGHT: f64 = 480.0;
const MARGIN_LEFT: f64 = 72.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 42.0;
const MARGIN_BOTTOM: f64 = 52.0;

fn escape_xml(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
        .replace('\'', "&apos;")
}

fn series_color(index: usize, total: usize) -> String {
    let hue = 360.0 * index as f64 / total.max(1) as f64;
    format!("hsl({hue:.0},70%,42%)")
}

fn format_tick(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-3..1e4).contains(&a) {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.3}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        if s.is_empty() || s == "-" {
            "0".to_string()
        } else {
            s.to_string()
        }
    }
}

struct Axis {
    min: f64,
    max: f64,
}

impl Axis {
    fn new(values: impl Iterator<Item = f64>) -> Self {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for v in values.filter(|v| v.is_finite()) {
            min = min.min(v);
            max = max.max(v);
        }
        if !min.is_finite() || !max.is_finite() {
            min = 0.0;
            max = 1.0;
        }
        if (max - min).abs() < 1e-12 {
            min -= 0.5;
            max += 0.5;
        }
        Self { min, max }
    }

    fn to_frac(&self, v: f64) -> f64 {
        (v - self.min) / (self.max - self.min)
    }
}

/// Multi-series line plot. Series are drawn as polylines with one legend
/// entry each; returns the SVG document as a string.
pub fn line_plot_svg(series: &[Series], config: &PlotConfig) -> Result<String, ReportError> {
    if series.is_empty() {
        return Err(ReportError::InvalidInput("no series to plot".into()));
    }
    // Fall back to a linear axis when nothing is positive.
    let min_positive = series
        .iter()
        .flat_map(|s| s.points.iter())
        .map(|p| p.1)
        .filter(|y| y.is_finite() && *y > 0.0)
        .fold(f64::INFINITY, f64::min);
    let log_y = config.log_y && min_positive.is_finite();
    let floor = if log_y { min_positive * 0.5 } else { 0.0 };
    let ty = |y: f64| -> f64 {
        if log_y {
            y.max(floor).log10()
        } else {
            y
        }
    };

    let xs = Axis::new(series.iter().flat_map(|s| s.points.iter()).map(|p| p.0));
    let ys = Axis::new(
        series
            .iter()
            .flat_map(|s| s.points.iter())
            .filter(|p| p.1.is_finite())
            .map(|p| ty(p.1)),
    );
    let px = |x: f64| MARGIN_LEFT + xs.to_frac(x) * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT);
    let py = |y: f64| HEIGHT - MARGIN_BOTTOM - ys.to_frac(y) * (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM);

    let mut svg = String::new();
    svg.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{}</text>\n",
        (MARGIN_LEFT + WIDTH - MARGIN_RIGHT) / 2.0,
        escape_xml(&config.title)
    ));

    // Grid and ticks.
    let n_ticks = 5usize;
    for i in 0..=n_ticks {
        let f = i as f64 / n_ticks as f64;
        let xv = xs.min + f * (xs.max - xs.min);
        let yv = ys.min + f * (ys.max - ys.min);
        let x = px(xv);
        let y = py(yv);
        svg.push_str(&format!(
            "<line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"#dddddd\"/>\n",
            MARGIN_TOP,
            HEIGHT - MARGIN_BOTTOM
        ));
        svg.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#dddddd\"/>\n",
            MARGIN_LEFT,
            WIDTH - MARGIN_RIGHT
        ));
        svg.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"11\">{}</text>\n",
            HEIGHT - MARGIN_BOTTOM + 18.0,
            escape_xml(&format_tick(xv))
        ));
        let label = if log_y {
            format!("1e{}", format_tick(yv))
        } else {
            format_tick(yv)
        };
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-size=\"11\">{}</text>\n",
            MARGIN_LEFT - 8.0,
            y + 4.0,
            escape_xml(&label)
        ));
    }

    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{0:.1}\" y1=\"{1:.1}\" x2=\"{0:.1}\" y2=\"{2:.1}\" stroke=\"black\"/>\n",
        MARGIN_LEFT,
        MARGIN_TOP,
        HEIGHT - MARGIN_BOTTOM
    ));
    svg.push_str(&format!(
        "<line x1=\"{0:.1}\" y1=\"{2:.1}\" x2=\"{1:.1}\" y2=\"{2:.1}\" stroke=\"black\"/>\n",
        MARGIN_LEFT,
        WIDTH - MARGIN_RIGHT,
        HEIGHT - MARGIN_BOTTOM
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
        (MARGIN_LEFT + WIDTH - MARGIN_RIGHT) / 2.0,
        HEIGHT - 12.0,
        escape_xml(&config.x_label)
    ));
    let y_axis_label = if log_y {
        format!("{} (log scale)", config.y_label)
    } else {
        config.y_label.clone()
    };
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{0:.1}\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 18 {0:.1})\">{1}</text>\n",
        (MARGIN_TOP + HEIGHT - MARGIN_BOTTOM) / 2.0,
        escape_xml(&y_axis_label)
    ));

    // Series.
    for (i, s) in series.iter().enumerate() {
        let color = series_color(i, series.len());
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|p| format!("{:.1},{:.1}", px(p.0), py(ty(p.1))))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.6\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        // Legend entry.
        let ly = MARGIN_TOP + 14.0 * i as f64;
        let lx = WIDTH - MARGIN_RIGHT + 12.0;
        svg.push_str(&format!(
            "<line x1=\"{lx:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            ly - 3.0,
            lx + 18.0,
            ly - 3.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{ly:.1}\" font-size=\"11\">{}</text>\n",
            lx + 24.0,
            escape_xml(&s.label)
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// One group of bars (for example, one sweep cell with a treated and an
/// untreated error bar).
#[derive(Debug, Clone, PartialEq)]
pub struct BarGroup {
    pub label: String,
    pub values: Vec<f64>,
}

/// Grouped bar chart. `bar_labels` names the bars within each group and
/// becomes the legend; non-finite values are drawn as absent bars.
pub fn bar_chart_svg(
    groups: &[BarGroup],
    bar_labels: &[String],
    title: &str,
    y_label: &str,
) -> Result<String, ReportError> {
    if groups.is_empty() {
        return Err(ReportError::InvalidInput("no bar groups".into()));
    }
    for g in groups {
        if g.values.len() != bar_labels.len() {
            return Err(ReportError::InvalidInput(format!(
                "group {} has {} values for {} bar labels",
                g.label,
                g.values.len(),
                bar_labels.len()
            )));
        }
    }
    let max = groups
        .iter()
        .flat_map(|g| g.values.iter())
        .filter(|v| v.is_finite())
        .fold(0.0_f64, |a, v| a.max(*v))
        .max(1e-12)
        * 1.08;

    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let group_w = plot_w / groups.len() as f64;
    let bar_w = (group_w * 0.8) / bar_labels.len() as f64;

    let mut svg = String::new();
    svg.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{}</text>\n",
        (MARGIN_LEFT + WIDTH - MARGIN_RIGHT) / 2.0,
        escape_xml(title)
    ));

    // Y ticks.
    for i in 0..=5 {
        let v = max * i as f64 / 5.0;
        let y = HEIGHT - MARGIN_BOTTOM - (v / max) * plot_h;
        svg.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#dddddd\"/>\n",
            MARGIN_LEFT,
            WIDTH - MARGIN_RIGHT
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-size=\"11\">{}</text>\n",
            MARGIN_LEFT - 8.0,
            y + 4.0,
            escape_xml(&format_tick(v))
        ));
    }

    for (gi, g) in groups.iter().enumerate() {
        let gx = MARGIN_LEFT + gi as f64 * group_w + group_w * 0.1;
        for (bi, v) in g.values.iter().enumerate() {
            if !v.is_finite() {
                continue;
            }
            let h = (v.max(0.0) / max) * plot_h;
            let x = gx + bi as f64 * bar_w;
            let y = HEIGHT - MARGIN_BOTTOM - h;
            let color = series_color(bi, bar_labels.len().max(3));
            svg.push_str(&format!(
                "<rect class=\"bar\" x=\"{x:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"{color}\"/>\n",
                bar_w * 0.92
            ));
        }
        let lx = MARGIN_LEFT + gi as f64 * group_w + group_w / 2.0;
        let lyy = HEIGHT - MARGIN_BOTTOM + 14.0;
        svg.push_str(&format!(
            "<text x=\"{lx:.1}\" y=\"{lyy:.1}\" text-anchor=\"end\" font-size=\"10\" transform=\"rotate(-45 {lx:.1} {lyy:.1})\">{}</text>\n",
            escape_xml(&g.label)
        ));
    }

    // Axis line and labels.
    svg.push_str(&format!(
        "<line x1=\"{0:.1}\" y1=\"{2:.1}\" x2=\"{1:.1}\" y2=\"{2:.1}\" stroke=\"black\"/>\n",
        MARGIN_LEFT,
        WIDTH - MARGIN_RIGHT,
        HEIGHT - MARGIN_BOTTOM
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{0:.1}\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 18 {0:.1})\">{1}</text>\n",
        (MARGIN_TOP + HEIGHT - MARGIN_BOTTOM) / 2.0,
        escape_xml(y_label)
    ));
    for (bi, label) in bar_labels.iter().enumerate() {
        let color = series_color(bi, bar_labels.len().max(3));
        let ly = MARGIN_TOP + 16.0 * bi as f64;
        let lx = WIDTH - MARGIN_RIGHT + 12.0;
        svg.push_str(&format!(
            "<rect x=\"{lx:.1}\" y=\"{:.1}\" width=\"12\" height=\"12\" fill=\"{color}\"/>\n",
            ly - 10.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{ly:.1}\" font-size=\"11\">{}</text>\n",
            lx + 18.0,
            escape_xml(label)
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn demo_series(n: usize) -> Vec<Series> {
        (0..n)
            .map(|i| Series {
                label: format!("{}-{}", i + 1, 2 * i),
                points: (0..10)
                    .map(|k| (k as f64, 1.0 + i as f64 + (k as f64 * 0.3).sin().abs()))
                    .collect(),
            })
            .collect()
    }

    #[test]
    fn line_plot_single_series() {
        let svg = line_plot_svg(&demo_series(1), &PlotConfig::default()).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert!(svg.contains("1-0"));
        roxmltree::Document::parse(&svg).unwrap();
    }

    #[test]
    fn line_plot_twenty_five_series_is_well_formed() {
        let svg = line_plot_svg(&demo_series(25), &PlotConfig::default()).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 25);
        let doc = roxmltree::Document::parse(&svg).unwrap();
        assert_eq!(doc.root_element().tag_name().name(), "svg");
    }

    #[test]
    fn line_plot_escapes_labels() {
        let series = vec![Series {
            label: "a<b&\"c\"".into(),
            points: vec![(0.0, 1.0), (1.0, 2.0)],
        }];
        let config = PlotConfig {
            title: "x < y".into(),
            ..PlotConfig::default()
        };
        let svg = line_plot_svg(&series, &config).unwrap();
        roxmltree::Document::parse(&svg).unwrap();
        assert!(svg.contains("a&lt;b&amp;&quot;c&quot;"));
    }

    #[test]
    fn line_plot_log_scale_clamps_non_positive() {
        let series = vec![Series {
            label: "s".into(),
            points: vec![(0.0, 0.0), (1.0, 1e-3), (2.0, 10.0)],
        }];
        let svg = line_plot_svg(&series, &PlotConfig::default()).unwrap();
        roxmltree::Document::parse(&svg).unwrap();
        assert!(svg.contains("log scale"));
        // Linear mode drops the marker.
        let linear = PlotConfig {
            log_y: false,
            ..PlotConfig::default()
        };
        let svg = line_plot_svg(&series, &linear).unwrap();
        assert!(!svg.contains("log scale"));
    }

    #[test]
    fn line_plot_rejects_empty() {
        assert!(line_plot_svg(&[], &PlotConfig::default()).is_err());
    }

    #[test]
    fn bar_chart_shape_and_validity() {
        let groups: Vec<BarGroup> = (0..6)
            .map(|i| BarGroup {
                label: format!("{}-{}", i, i * 2),
                values: vec![1.0 + i as f64, 0.5 * i as f64 + 0.1],
            })
            .collect();
        let labels = vec!["treated".to_string(), "untreated".to_string()];
        let svg = bar_chart_svg(&groups, &labels, "errors", "rmse").unwrap();
        assert_eq!(svg.matches("class=\"bar\"").count(), 12);
        assert!(svg.contains("treated"));
        roxmltree::Document::parse(&svg).unwrap();
    }

    #[test]
    fn bar_chart_skips_non_finite_values() {
        let groups = vec![BarGroup {
            label: "g".into(),
            values: vec![1.0, f64::NAN],
        }];
        let labels = vec!["a".to_string(), "b".to_string()];
        let svg = bar_chart_svg(&groups, &labels, "t", "y").unwrap();
        assert_eq!(svg.matches("class=\"bar\"").count(), 1);
        roxmltree::Document::parse(&svg).unwrap();
    }

    #[test]
    fn bar_chart_validates_group_width() {
        let groups = vec![BarGroup {
            label: "g".into(),
            values: vec![1.0],
        }];
        let labels = vec!["a".to_string(), "b".to_string()];
        assert!(bar_chart_svg(&groups, &labels, "t", "y").is_err());
    }

    #[test]
    fn csv_round_trip_and_history_read() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_csv(
            &path,
            &["a".into(), "b,comma".into()],
            &[vec!["1".into(), "x\"quote".into()]],
        )
        .unwrap();
        let mut reader = csv::Reader::from_path(&path).unwrap();
        let headers = reader.headers().unwrap().clone();
        assert_eq!(&headers[1], "b,comma");
        let row = reader.records().next().unwrap().unwrap();
        assert_eq!(&row[1], "x\"quote");

        let hist_path = dir.path().join("history.csv");
        let history = vec![LossReport {
            epoch: 2,
            loss_y: 0.25,
            loss_a: 0.5,
            loss_total: 0.0,
            nrmse: 0.1,
            rmse_treated: 0.2,
            rmse_untreated: 0.3,
            wall_seconds: 0.0,
        }];
        crate::train::save_history(&history, &hist_path).unwrap();
        let read = read_history_csv(&hist_path).unwrap();
        assert_eq!(read, history);
    }

    #[test]
    fn history_read_reports_missing_column() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "epoch,loss_y\n1,0.5\n").unwrap();
        match read_history_csv(&path) {
            Err(ReportError::MissingColumn { column, .. }) => assert_eq!(column, "loss_a"),
            other => panic!("expected missing column, got {other:?}"),
        }
    }

    #[test]
    fn tick_formatting() {
        assert_eq!(format_tick(0.0), "0");
        assert_eq!(format_tick(2.5), "2.5");
        assert_eq!(format_tick(12000.0), "1.2e4");
        assert_eq!(format_tick(0.0001), "1.0e-4");
        assert_eq!(format_tick(-3.0), "-3");
    }
}
