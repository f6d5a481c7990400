//! Accuracy-versus-level line charts.
//!
//! Text needs a TrueType font. The first of `STEGAMARK_FONT` or a few common
//! system paths that loads is used; without one the chart is drawn unlabelled.

use std::path::Path;
use std::sync::OnceLock;

use plotters::prelude::*;
use plotters::style::{register_font, FontStyle};

use crate::error::{Error, Result};
use crate::robustness::SweepTable;

const FONT_PATHS: [&str; 4] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/Library/Fonts/Arial.ttf",
];

fn font_available() -> bool {
    static LOADED: OnceLock<bool> = OnceLock::new();
    *LOADED.get_or_init(|| {
        let env = std::env::var("STEGAMARK_FONT").ok();
        let loaded = env
            .iter()
            .map(String::as_str)
            .chain(FONT_PATHS)
            .filter_map(|p| std::fs::read(p).ok())
            .any(|bytes| register_font("sans-serif", FontStyle::Normal, Box::leak(bytes.into_boxed_slice())).is_ok());
        loaded
    })
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Io(std::io::Error::other(format!("plot: {e}")))
}

/// One line per edit kind in the table, mean accuracy against level.
pub fn accuracy_plot(table: &SweepTable, path: &Path) -> Result<()> {
    let mut kinds: Vec<&str> = Vec::new();
    for r in &table.rows {
        if !kinds.contains(&r.kind.as_str()) {
            kinds.push(&r.kind);
        }
    }
    let (lo, hi) = table
        .rows
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.level), hi.max(r.level)));
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 };
    let labelled = font_available();

    let root = BitMapBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(16);
    if labelled {
        builder
            .caption(&table.name, ("sans-serif", 22))
            .x_label_area_size(40)
            .y_label_area_size(50);
    }
    let mut chart = builder
        .build_cartesian_2d(lo - pad..hi + pad, 0.0..1.02)
        .map_err(plot_err)?;
    let mut mesh = chart.configure_mesh();
    if labelled {
        mesh.x_desc("level").y_desc("bit accuracy");
    } else {
        mesh.x_labels(0).y_labels(0);
    }
    mesh.draw().map_err(plot_err)?;

    for (i, kind) in kinds.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let mut pts: Vec<(f64, f64)> = table
            .rows
            .iter()
            .filter(|r| r.kind == *kind)
            .map(|r| (r.level, r.mean))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let series = chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(plot_err)?;
        if labelled {
            series
                .label(kind.to_string())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        }
        chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(plot_err)?;
    }
    if labelled {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .position(SeriesLabelPosition::LowerLeft)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}
