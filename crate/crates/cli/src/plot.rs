//! SVG line charts of estimates against truth.

use std::path::Path;

use anyhow::{anyhow, Result};
use plotters::prelude::*;

/// Keeps at most `2 * cap` points of an unbounded stream by halving the
/// resolution whenever it fills up.
#[derive(Debug, Clone)]
pub struct Decimated {
    cap: usize,
    stride: usize,
    seen: usize,
    points: Vec<(f64, f64)>,
}

impl Decimated {
    pub fn new(cap: usize) -> Self {
        Self {
            cap: cap.max(1),
            stride: 1,
            seen: 0,
            points: Vec::new(),
        }
    }

    pub fn push(&mut self, x: f64, y: f64) {
        if self.seen.is_multiple_of(self.stride) && x.is_finite() && y.is_finite() {
            self.points.push((x, y));
            if self.points.len() >= 2 * self.cap {
                self.points = self.points.iter().step_by(2).copied().collect();
                self.stride *= 2;
            }
        }
        self.seen += 1;
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }
}

pub struct Line<'a> {
    pub label: &'a str,
    pub data: &'a Decimated,
    pub color: RGBColor,
}

/// Plots the lines against time in hours. Lines without points are left out.
pub fn line_chart(path: &Path, title: &str, y_label: &str, lines: &[Line]) -> Result<()> {
    let all = || lines.iter().flat_map(|l| l.data.points().iter());
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in all() {
        x0 = x0.min(x / 3600.0);
        x1 = x1.max(x / 3600.0);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-6);
    let root = SVGBackend::new(path, (900, 500)).into_drawing_area();
    let err = |e: &dyn std::fmt::Display| anyhow!("drawing {}: {e}", path.display());
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(70)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(|e| err(&e))?;
    chart
        .configure_mesh()
        .x_desc("time (h)")
        .y_desc(y_label)
        .draw()
        .map_err(|e| err(&e))?;
    for line in lines.iter().filter(|l| !l.data.points().is_empty()) {
        let color = line.color;
        chart
            .draw_series(LineSeries::new(
                line.data.points().iter().map(|&(x, y)| (x / 3600.0, y)),
                color,
            ))
            .map_err(|e| err(&e))?
            .label(line.label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(&e))?;
    root.present().map_err(|e| err(&e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decimation_is_bounded_and_keeps_the_start() {
        let mut d = Decimated::new(100);
        for k in 0..100_000 {
            d.push(k as f64, 1.0);
        }
        assert!(d.points().len() < 200);
        assert!(d.points().len() >= 100);
        assert_eq!(d.points()[0], (0.0, 1.0));
        assert!(d.points().windows(2).all(|w| w[1].0 > w[0].0));
    }

    #[test]
    fn chart_is_svg() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.svg");
        let mut d = Decimated::new(10);
        for k in 0..50 {
            d.push(k as f64 * 60.0, (k as f64).sin());
        }
        let empty = Decimated::new(10);
        line_chart(
            &path,
            "t",
            "y",
            &[
                Line {
                    label: "a",
                    data: &d,
                    color: BLUE,
                },
                Line {
                    label: "b",
                    data: &empty,
                    color: RED,
                },
            ],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.contains("polyline") || text.contains("path"));
    }
}
