//! Static figure rendering. All plots are SVG with no embedded timestamps,
//! so rendering the same inputs twice yields byte-identical files.

use std::path::Path;

use plotters::prelude::*;
use plotters::style::text_anchor::{HPos, Pos, VPos};

use seastate_core::error::{Error, Result};
use seastate_core::eval::EvalReport;
use seastate_core::train::{AblationPoint, TrainingLog};

fn plot_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Runtime(format!("rendering {}: {e}", path.display()))
}

/// Pad a value range so flat series still get a visible band.
fn padded(min: f64, max: f64) -> (f64, f64) {
    let span = (max - min).abs().max(1e-6);
    (min - 0.05 * span, max + 0.05 * span)
}

fn series_bounds<'a, I: Iterator<Item = &'a f64>>(values: I) -> (f64, f64) {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in values {
        if v.is_finite() {
            min = min.min(v);
            max = max.max(v);
        }
    }
    if !min.is_finite() {
        (0.0, 1.0)
    } else {
        padded(min, max)
    }
}

type Chart<'a, 'b> = ChartContext<
    'a,
    SVGBackend<'b>,
    Cartesian2d<plotters::coord::types::RangedCoordf64, plotters::coord::types::RangedCoordf64>,
>;

fn line_pair<'a, 'b: 'a>(
    chart: &mut Chart<'a, 'b>,
    xs: &[f64],
    a: (&[f64], &str),
    b: Option<(&[f64], &str)>,
    path: &Path,
) -> Result<()> {
    let blue = RGBColor(31, 119, 180);
    let orange = RGBColor(255, 127, 14);
    chart
        .draw_series(LineSeries::new(
            xs.iter().copied().zip(a.0.iter().copied()),
            blue.stroke_width(2),
        ))
        .map_err(|e| plot_err(path, e))?
        .label(a.1.to_string())
        .legend(move |(x, y)| {
            PathElement::new(vec![(x, y), (x + 18, y)], blue.stroke_width(2))
        });
    if let Some((ys, name)) = b {
        chart
            .draw_series(LineSeries::new(
                xs.iter().copied().zip(ys.iter().copied()),
                orange.stroke_width(2),
            ))
            .map_err(|e| plot_err(path, e))?
            .label(name.to_string())
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 18, y)], orange.stroke_width(2))
            });
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.85))
        .position(SeriesLabelPosition::UpperRight)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    Ok(())
}

type Panel<'s> = ((&'s [f64], &'s str), Option<(&'s [f64], &'s str)>);

fn two_panel(
    path: &Path,
    title_top: &str,
    title_bottom: &str,
    xs: &[f64],
    x_desc: &str,
    top: Panel<'_>,
    bottom: Panel<'_>,
) -> Result<()> {
    let root = SVGBackend::new(path, (900, 760)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let (upper, lower) = root.split_vertically(380);
    let x_max = xs.last().copied().unwrap_or(1.0).max(1.0);
    let x_min = xs.first().copied().unwrap_or(0.0);

    for (area, title, ((ya, la), second)) in
        [(upper, title_top, top), (lower, title_bottom, bottom)]
    {
        let extra = second.map(|(ys, _)| ys).unwrap_or(&[]);
        let (y_min, y_max) = series_bounds(ya.iter().chain(extra.iter()));
        let mut chart = ChartBuilder::on(&area)
            .margin(12)
            .caption(title, ("sans-serif", 20))
            .x_label_area_size(34)
            .y_label_area_size(56)
            .build_cartesian_2d(x_min..x_max, y_min..y_max)
            .map_err(|e| plot_err(path, e))?;
        chart
            .configure_mesh()
            .x_desc(x_desc)
            .disable_mesh()
            .draw()
            .map_err(|e| plot_err(path, e))?;
        line_pair(&mut chart, xs, (ya, la), second, path)?;
    }
    root.present().map_err(|e| plot_err(path, e))?;
    Ok(())
}

/// Training and validation loss (top) and accuracy (bottom) against the
/// global epoch index across both stages.
pub fn training_curves(log: &TrainingLog, path: &Path) -> Result<()> {
    if log.records.is_empty() {
        return Err(Error::Data("training log holds no epochs".into()));
    }
    let xs: Vec<f64> = (1..=log.records.len()).map(|i| i as f64).collect();
    let tl: Vec<f64> = log.records.iter().map(|r| r.train_loss).collect();
    let vl: Vec<f64> = log.records.iter().map(|r| r.val_loss).collect();
    let ta: Vec<f64> = log.records.iter().map(|r| r.train_acc).collect();
    let va: Vec<f64> = log.records.iter().map(|r| r.val_acc).collect();
    two_panel(
        path,
        "Loss",
        "Accuracy",
        &xs,
        "epoch",
        ((&tl, "train"), Some((&vl as &[f64], "validation"))),
        ((&ta, "train"), Some((&va as &[f64], "validation"))),
    )
}

/// Macro F1 (top) and training time (bottom) against the per-class training
/// set size.
pub fn ablation_curves(points: &[AblationPoint], path: &Path) -> Result<()> {
    if points.is_empty() {
        return Err(Error::Data("ablation holds no measurement points".into()));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.per_class_train as f64).collect();
    let f1: Vec<f64> = points.iter().map(|p| p.macro_f1).collect();
    let secs: Vec<f64> = points.iter().map(|p| p.train_seconds).collect();
    two_panel(
        path,
        "Macro F1 vs training-set size",
        "Training time vs training-set size",
        &xs,
        "images per class",
        ((&f1, "macro F1"), None),
        ((&secs, "seconds"), None),
    )
}

/// Row-normalized confusion-matrix heatmap with per-cell counts.
pub fn confusion_heatmap(report: &EvalReport, path: &Path) -> Result<()> {
    let cm = &report.confusion;
    let n = cm.n();
    if n == 0 {
        return Err(Error::Data("confusion matrix is empty".into()));
    }
    let side = 640;
    let root = SVGBackend::new(path, (side + 160, side + 120)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(16)
        .caption("Confusion matrix (row-normalized)", ("sans-serif", 20))
        .x_label_area_size(44)
        .y_label_area_size(44)
        .build_cartesian_2d(0f64..n as f64, 0f64..n as f64)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc("predicted")
        .y_desc("true")
        .x_labels(n)
        .y_labels(n)
        .x_label_formatter(&|v| {
            let i = v.floor() as usize;
            if i < n && (v - v.floor()) == 0.5 {
                String::new()
            } else if i < n {
                cm.labels[i].to_string()
            } else {
                String::new()
            }
        })
        .y_label_formatter(&|v| {
            let i = v.floor() as usize;
            if i < n {
                cm.labels[n - 1 - i].to_string()
            } else {
                String::new()
            }
        })
        .disable_mesh()
        .draw()
        .map_err(|e| plot_err(path, e))?;

    let mut cells = Vec::new();
    for i in 0..n {
        let support = cm.support(i).max(1) as f64;
        for j in 0..n {
            let frac = cm.counts[i][j] as f64 / support;
            // white -> blue ramp
            let c = (255.0 * (1.0 - frac)) as u8;
            let color = RGBColor(c, c, 255u8.min(c.saturating_add(64)).max(180));
            // row 0 (first true label) drawn at the top
            let y = (n - 1 - i) as f64;
            cells.push(Rectangle::new(
                [(j as f64, y), (j as f64 + 1.0, y + 1.0)],
                color.filled(),
            ));
        }
    }
    chart
        .draw_series(cells)
        .map_err(|e| plot_err(path, e))?;
    // overlay counts
    let mut labels = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let count = cm.counts[i][j];
            if count == 0 {
                continue;
            }
            let support = cm.support(i).max(1) as f64;
            let dark = cm.counts[i][j] as f64 / support > 0.55;
            let style = ("sans-serif", 15).into_font().color(if dark {
                &WHITE
            } else {
                &BLACK
            });
            labels.push(Text::new(
                count.to_string(),
                (j as f64 + 0.5, (n - 1 - i) as f64 + 0.5),
                style.pos(Pos::new(HPos::Center, VPos::Center)),
            ));
        }
    }
    chart
        .draw_series(labels)
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use seastate_core::dataset::{LabelRange, SeaStateLabel};
    use seastate_core::eval::{aggregate, ConfusionMatrix};
    use seastate_core::train::EpochRecord;

    fn tiny_log() -> TrainingLog {
        TrainingLog {
            records: (1..=4)
                .map(|e| EpochRecord {
                    stage: if e <= 2 { 1 } else { 2 },
                    epoch: if e <= 2 { e } else { e - 2 },
                    train_loss: 2.0 / e as f64,
                    train_acc: 0.2 * e as f64,
                    val_loss: 2.2 / e as f64,
                    val_acc: 0.18 * e as f64,
                    lr: 1e-4,
                    seconds: 1.0,
                })
                .collect(),
        }
    }

    #[test]
    fn plots_are_deterministic_svg() {
        let dir = tempfile::tempdir().unwrap();
        let log = tiny_log();
        let a = dir.path().join("a.svg");
        let b = dir.path().join("b.svg");
        training_curves(&log, &a).unwrap();
        training_curves(&log, &b).unwrap();
        let bytes_a = std::fs::read(&a).unwrap();
        assert_eq!(bytes_a, std::fs::read(&b).unwrap());
        assert!(bytes_a.starts_with(b"<svg") || bytes_a.starts_with(b"<?xml"));
    }

    #[test]
    fn heatmap_and_ablation_render() {
        let dir = tempfile::tempdir().unwrap();
        let range = LabelRange::new(1, 3).unwrap();
        let labels: Vec<SeaStateLabel> = range.labels().collect();
        let cm = ConfusionMatrix::from_counts(
            labels,
            vec![vec![5, 1, 0], vec![0, 6, 0], vec![2, 0, 4]],
        )
        .unwrap();
        let report = aggregate(&cm).unwrap();
        let h = dir.path().join("h.svg");
        confusion_heatmap(&report, &h).unwrap();
        assert!(std::fs::metadata(&h).unwrap().len() > 500);

        let points: Vec<AblationPoint> = [(10usize, 0.4f64, 3.0f64), (40, 0.7, 9.0), (160, 0.9, 31.0)]
            .iter()
            .map(|&(n, f1, secs)| AblationPoint {
                per_class_train: n,
                train_images: n * 3,
                macro_f1: f1,
                train_seconds: secs,
            })
            .collect();
        let a = dir.path().join("abl.svg");
        ablation_curves(&points, &a).unwrap();
        assert!(std::fs::metadata(&a).unwrap().len() > 500);

        assert!(training_curves(&TrainingLog::default(), &dir.path().join("x.svg")).is_err());
    }
}
