//! Render the two report figure types — log-scale line plot and grouped bar
//! chart — from hand-made data, without running any training.
//!
//! Run with: cargo run --example plot_svg

use s4cast::report::{bar_chart_svg, line_plot_svg, BarGroup, PlotConfig, Series};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out_dir = std::env::temp_dir().join("s4cast_plot_demo");
    std::fs::create_dir_all(&out_dir)?;

    // Two synthetic "loss curves" decaying at different rates.
    let series: Vec<Series> = [("1-2", 0.30_f64), ("5-10", 0.18)]
        .iter()
        .map(|(label, rate)| Series {
            label: (*label).to_string(),
            points: (1..=30)
                .map(|e| (e as f64, 2.0 * (-rate * e as f64).exp() + 0.05))
                .collect(),
        })
        .collect();
    let config = PlotConfig {
        title: "Demo loss curves".into(),
        x_label: "epoch".into(),
        y_label: "loss".into(),
        log_y: true,
    };
    let line_svg = line_plot_svg(&series, &config)?;
    let line_path = out_dir.join("demo_lines.svg");
    std::fs::write(&line_path, &line_svg)?;

    let groups = vec![
        BarGroup {
            label: "1-2".into(),
            values: vec![3.1, 4.0],
        },
        BarGroup {
            label: "5-10".into(),
            values: vec![2.2, f64::NAN], // missing bars are simply skipped
        },
    ];
    let bar_svg = bar_chart_svg(
        &groups,
        &["treated".to_string(), "untreated".to_string()],
        "Demo grouped bars",
        "rmse",
    )?;
    let bar_path = out_dir.join("demo_bars.svg");
    std::fs::write(&bar_path, &bar_svg)?;

    println!("wrote {}", line_path.display());
    println!("wrote {}", bar_path.display());
    println!(
        "line plot: {} bytes, {} series; bar chart: {} bytes, {} groups",
        line_svg.len(),
        series.len(),
        bar_svg.len(),
        groups.len()
    );
    println!("open them in any browser; both are plain standalone SVG.");
    Ok(())
}
