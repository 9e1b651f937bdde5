//! Static SVG figures for a run report.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::experiment::{ArtifactPaths, MetricsReport, SweepReport};
use crate::graph::UpdateMode;

const COLORS: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn plot_error(e: impl std::fmt::Display) -> Error {
    Error::param(format!("plot rendering failed: {e}"))
}

/// One line chart of `series` against iteration index.
fn line_chart(path: &Path, title: &str, y_label: &str, series: &[(String, Vec<Option<f64>>)]) -> Result<()> {
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_error)?;
    let max_t = series.iter().map(|(_, v)| v.len()).max().unwrap_or(1).saturating_sub(1).max(1);
    let values = series.iter().flat_map(|(_, v)| v.iter().flatten().copied());
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 1.0) };
    let pad = ((hi - lo) * 0.1).max(0.01);
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0f64..max_t as f64, (lo - pad).max(0.0)..(hi + pad).min(1.0))
        .map_err(plot_error)?;
    chart
        .configure_mesh()
        .x_desc("iteration t")
        .y_desc(y_label)
        .draw()
        .map_err(plot_error)?;
    for (i, (name, v)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<(f64, f64)> = v
            .iter()
            .enumerate()
            .filter_map(|(t, y)| y.map(|y| (t as f64, y)))
            .collect();
        chart
            .draw_series(LineSeries::new(points, color.stroke_width(2)))
            .map_err(plot_error)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_error)?;
    root.present().map_err(plot_error)?;
    Ok(())
}

fn label(s: &SweepReport) -> String {
    format!("{} / {}", s.model, s.mode)
}

/// Accuracy-vs-iteration, AUC-vs-iteration and score-trajectory figures.
pub fn write_all(report: &MetricsReport, paths: &ArtifactPaths) -> Result<()> {
    let acc: Vec<(String, Vec<Option<f64>>)> = report
        .sweeps
        .iter()
        .map(|s| (label(s), s.accuracy.iter().copied().map(Some).collect()))
        .collect();
    line_chart(&paths.plot("accuracy"), "Accuracy across reflection iterations", "accuracy", &acc)?;
    let auc: Vec<(String, Vec<Option<f64>>)> = report
        .sweeps
        .iter()
        .map(|s| (label(s), s.auc.iter().copied().map(Some).collect()))
        .collect();
    line_chart(&paths.plot("auc"), "Edge AUC across reflection iterations", "edge AUC", &auc)?;
    let mut scores = Vec::new();
    for s in report.sweeps.iter().filter(|s| s.mode == UpdateMode::Accumulate) {
        scores.push((format!("{} positive", s.model), s.pos_mean.clone()));
        scores.push((format!("{} negative", s.model), s.neg_mean.clone()));
    }
    line_chart(&paths.plot("scores"), "Mean accumulated edge score", "mean score", &scores)?;
    Ok(())
}
