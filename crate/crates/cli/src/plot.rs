//! Static PNG plots of similarity curves: class bands behind the normalized
//! curve, one marker per frame colored by its class.

use std::path::Path;

use mel_core::similarity::SimilarityCurve;
use mel_core::Error;
use plotters::prelude::*;

const BAND_COLORS: [RGBColor; 3] = [RGBColor(250, 224, 224), RGBColor(250, 244, 214), RGBColor(222, 242, 224)];
const CLASS_COLORS: [RGBColor; 3] = [RGBColor(200, 40, 40), RGBColor(210, 150, 20), RGBColor(40, 150, 60)];

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Validation(format!("plot rendering failed: {e}"))
}

pub fn curve_png(curve: &SimilarityCurve, classes: usize, path: &Path) -> Result<(), Error> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    let n = curve.normalized.len();
    let root = BitMapBackend::new(path, (720, 240)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let x_max = (n.max(2) - 1) as f64;
    let mut chart = ChartBuilder::on(&root)
        .margin(12)
        .build_cartesian_2d(0f64..x_max, -0.02f64..1.02f64)
        .map_err(plot_err)?;
    for k in 0..classes {
        let (lo, hi) = (k as f64 / classes as f64, (k + 1) as f64 / classes as f64);
        let color = BAND_COLORS[k * BAND_COLORS.len() / classes];
        chart
            .draw_series(std::iter::once(Rectangle::new([(0.0, lo), (x_max, hi)], color.filled())))
            .map_err(plot_err)?;
    }
    chart
        .draw_series(LineSeries::new(
            curve.normalized.iter().enumerate().map(|(i, &v)| (i as f64, v)),
            BLACK.stroke_width(2),
        ))
        .map_err(plot_err)?;
    chart
        .draw_series(curve.normalized.iter().zip(&curve.labels).enumerate().map(|(i, (&v, &label))| {
            let color = CLASS_COLORS[label * CLASS_COLORS.len() / classes];
            Circle::new((i as f64, v), 4, color.filled())
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}
