use std::path::Path;

use anyhow::{anyhow, Context};
use hscnet_core::training::read_history_csv;
use plotters::prelude::*;

use crate::commands::read_report;
use crate::{Failure, PlotArgs};

const SIZE: (u32, u32) = (720, 480);

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn draw<E: std::fmt::Debug>(r: Result<(), E>) -> anyhow::Result<()> {
    r.map_err(|e| anyhow!("drawing failed: {e:?}"))
}

/// Line chart of several named series into an SVG file.
fn line_chart(out: &Path, title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> anyhow::Result<()> {
    let points = series.iter().flat_map(|(_, s)| s.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !(x0 <= x1) {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let root = SVGBackend::new(out, SIZE).into_drawing_area();
    draw(root.fill(&WHITE))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| anyhow!("{e:?}"))?;
    draw(chart.configure_mesh().x_desc(x_label).y_desc(y_label).draw())?;
    for (i, (name, s)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let finite = s.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite());
        let drawn = chart.draw_series(LineSeries::new(finite, color.stroke_width(2))).map_err(|e| anyhow!("{e:?}"))?;
        drawn.label(name.clone()).legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    draw(chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw())?;
    draw(root.present())?;
    Ok(())
}

/// Fraction of frames with error at most x, over the sorted errors.
fn cumulative(mut errs: Vec<f64>, total: usize) -> Vec<(f64, f64)> {
    errs.retain(|e| e.is_finite());
    errs.sort_by(f64::total_cmp);
    let mut pts = vec![(0.0, 0.0)];
    for (i, e) in errs.iter().enumerate() {
        pts.push((*e, (i + 1) as f64 / total.max(1) as f64));
    }
    pts
}

pub fn plot(a: &PlotArgs) -> Result<(), Failure> {
    if a.losses.is_empty() && a.reports.is_empty() {
        return Err(Failure::Usage("nothing to plot (use --loss and/or --report)".into()));
    }
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    if !a.losses.is_empty() {
        let mut series = Vec::new();
        for path in &a.losses {
            let (header, rows) = read_history_csv(path).with_context(|| format!("reading {}", path.display()))?;
            let total = header.iter().position(|h| h == "total").ok_or_else(|| anyhow!("{} has no total column", path.display()))?;
            series.push((stem(path), rows.iter().map(|r| (r[0], r[total])).collect()));
        }
        line_chart(&a.out.join("loss.svg"), "Training loss", "iteration", "total loss", &series)?;
    }
    if !a.reports.is_empty() {
        let mut t_series = Vec::new();
        let mut r_series = Vec::new();
        for path in &a.reports {
            let rep = read_report(path)?;
            t_series.push((stem(path), cumulative(rep.frames.iter().map(|f| 100.0 * f.t_err_m).collect(), rep.n)));
            r_series.push((stem(path), cumulative(rep.frames.iter().map(|f| f.r_err_deg).collect(), rep.n)));
        }
        line_chart(&a.out.join("cumulative_translation.svg"), "Translation error", "error (cm)", "fraction of frames", &t_series)?;
        line_chart(&a.out.join("cumulative_rotation.svg"), "Rotation error", "error (deg)", "fraction of frames", &r_series)?;
    }
    println!("plots written to {}", a.out.display());
    Ok(())
}
