//! Minimal SVG line charts.

use plotters::prelude::*;

use crate::error::{CliError, Result};

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

const PANEL_WIDTH: u32 = 480;
const PANEL_HEIGHT: u32 = 360;

fn plot_err(e: impl std::fmt::Display) -> CliError {
    CliError::Plot(e.to_string())
}

fn bounds(panel: &Panel) -> ((f64, f64), (f64, f64)) {
    let pts = || panel.series.iter().flat_map(|s| &s.points).filter(|(x, y)| x.is_finite() && y.is_finite());
    let span = |lo: f64, hi: f64| {
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            let pad = 0.05 * (hi - lo);
            (lo - pad, hi + pad)
        }
    };
    let (x0, x1) = pts().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (x, _)| (a.min(*x), b.max(*x)));
    let (y0, y1) = pts().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (_, y)| (a.min(*y), b.max(*y)));
    (span(x0, x1), span(y0, y1))
}

/// Renders panels side by side into one SVG document.
pub fn render(panels: &[Panel]) -> Result<String> {
    let mut svg = String::new();
    {
        let width = PANEL_WIDTH * panels.len().max(1) as u32;
        let root = SVGBackend::with_string(&mut svg, (width, PANEL_HEIGHT)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let areas = root.split_evenly((1, panels.len().max(1)));
        for (panel, area) in panels.iter().zip(&areas) {
            let ((x0, x1), (y0, y1)) = bounds(panel);
            let mut chart = ChartBuilder::on(area)
                .caption(&panel.title, ("sans-serif", 18))
                .margin(10)
                .x_label_area_size(35)
                .y_label_area_size(50)
                .build_cartesian_2d(x0..x1, y0..y1)
                .map_err(plot_err)?;
            chart
                .configure_mesh()
                .x_desc(panel.x_label.as_str())
                .y_desc(panel.y_label.as_str())
                .draw()
                .map_err(plot_err)?;
            for (i, s) in panel.series.iter().enumerate() {
                let color = Palette99::pick(i).to_rgba();
                let pts: Vec<(f64, f64)> = s.points.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
                chart
                    .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
                    .map_err(plot_err)?
                    .label(s.label.as_str())
                    .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
                chart.draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled()))).map_err(plot_err)?;
            }
            if panel.series.len() > 1 {
                chart
                    .configure_series_labels()
                    .background_style(WHITE.mix(0.8))
                    .border_style(BLACK)
                    .draw()
                    .map_err(plot_err)?;
            }
        }
        root.present().map_err(plot_err)?;
    }
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_an_svg_with_every_series_label() {
        let panel = Panel {
            title: "auc".into(),
            x_label: "mu".into(),
            y_label: "AUC".into(),
            series: vec![
                Series { label: "kde".into(), points: vec![(0.0, 0.5), (1.0, 0.9)] },
                Series { label: "vae".into(), points: vec![(0.0, 0.52), (1.0, f64::NAN)] },
            ],
        };
        let svg = render(&[panel]).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("kde") && svg.contains("vae"));
    }

    #[test]
    fn degenerate_ranges_still_render() {
        let panel = Panel {
            title: "flat".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            series: vec![Series { label: "one".into(), points: vec![(1.0, 1.0)] }],
        };
        assert!(render(&[panel]).is_ok());
        let empty = Panel { title: "none".into(), x_label: "x".into(), y_label: "y".into(), series: vec![] };
        assert!(render(&[empty]).is_ok());
    }
}
