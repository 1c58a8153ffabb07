//! Loss-curve rendering and merged series export.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dcsd_core::rundir::write_atomic;
use dcsd_core::trainer::METRICS_COLUMNS;
use plotters::prelude::*;

use crate::Failure;

/// One metrics file reduced to `(epoch, value)` pairs.
#[derive(Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(usize, f64)>,
}

/// Parses a metrics file, reporting the line number of the first bad row.
pub fn read_series(path: &Path, column: &str) -> Result<Vec<(usize, f64)>, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    parse_series(&text, column).map_err(|m| Failure::io(format!("{}: {m}", path.display())))
}

pub fn parse_series(text: &str, column: &str) -> Result<Vec<(usize, f64)>, String> {
    if !METRICS_COLUMNS.contains(&column) {
        return Err(format!("unknown metrics column '{column}'"));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| format!("line 1: {e}"))?
        .clone();
    if headers.is_empty() || headers.iter().all(str::is_empty) {
        return Err("empty metrics file".into());
    }
    if headers.iter().ne(METRICS_COLUMNS.iter().copied()) {
        return Err(format!(
            "line 1: expected header '{}'",
            METRICS_COLUMNS.join(",")
        ));
    }
    let col = headers
        .iter()
        .position(|h| h == column)
        .expect("column checked above");
    let mut points = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            format!("line {line}: malformed row ({e})")
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let epoch: usize = record[0]
            .trim()
            .parse()
            .map_err(|_| format!("line {line}: bad epoch '{}'", &record[0]))?;
        let value: f64 = record[col]
            .trim()
            .parse()
            .map_err(|_| format!("line {line}: bad {column} value '{}'", &record[col]))?;
        if !value.is_finite() {
            return Err(format!("line {line}: non-finite {column}"));
        }
        points.push((epoch, value));
    }
    if points.is_empty() {
        return Err("metrics file has no rows".into());
    }
    Ok(points)
}

/// Curve name: the run directory holding the file, else the file stem; made unique.
fn run_names(paths: &[PathBuf]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    paths
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let base = p
                .parent()
                .and_then(Path::file_name)
                .or_else(|| p.file_stem())
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("run{}", i + 1));
            let mut name = base.clone();
            let mut k = 2;
            while !seen.insert(name.clone()) {
                name = format!("{base}_{k}");
                k += 1;
            }
            name
        })
        .collect()
}

/// `run,epoch,<column>` rows for every series.
pub fn merged_table(series: &[Series], column: &str) -> String {
    let mut s = format!("run,epoch,{column}\n");
    for run in series {
        for (epoch, v) in &run.points {
            let _ = writeln!(s, "{},{epoch},{v}", run.name);
        }
    }
    s
}

pub fn render_svg(series: &[Series], column: &str, out: &Path) -> Result<(), String> {
    let max_epoch = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .max()
        .unwrap_or(1)
        .max(1);
    let (lo, hi) = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.1))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(v), b.max(v))
        });
    let pad = ((hi - lo) * 0.05).max(1e-6);
    let root = SVGBackend::new(out, (900, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| e.to_string())?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{column} per epoch"), ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(40)
        .y_label_area_size(64)
        .build_cartesian_2d(0usize..max_epoch, (lo - pad)..(hi + pad))
        .map_err(|e| e.to_string())?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc(column)
        .draw()
        .map_err(|e| e.to_string())?;
    for (i, run) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(
                run.points.iter().copied(),
                color.stroke_width(2),
            ))
            .map_err(|e| e.to_string())?
            .label(run.name.clone())
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2))
            });
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| e.to_string())?;
    root.present().map_err(|e| e.to_string())
}

pub fn cmd_plot(
    metrics: &[PathBuf],
    out: &Path,
    column: &str,
    table: Option<&Path>,
) -> Result<(), Failure> {
    let names = run_names(metrics);
    let mut series = Vec::with_capacity(metrics.len());
    for (path, name) in metrics.iter().zip(names) {
        series.push(Series {
            name,
            points: read_series(path, column)?,
        });
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::io(format!("{}: {e}", dir.display())))?;
    }
    render_svg(&series, column, out).map_err(|e| Failure::io(format!("{}: {e}", out.display())))?;
    let table_path = table
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.with_extension("csv"));
    write_atomic(&table_path, merged_table(&series, column).as_bytes())?;
    println!("{}\n{}", out.display(), table_path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> String {
        METRICS_COLUMNS.join(",")
    }

    #[test]
    fn parses_selected_column() {
        let text = format!(
            "{}\n1,3,0.1,2.5,2,0,0,0,1,5,0.6,0\n2,6,0.1,1.5,1,0,0,0,1,5,0.6,0\n",
            header()
        );
        assert_eq!(
            parse_series(&text, "loss_total").unwrap(),
            vec![(1, 2.5), (2, 1.5)]
        );
        assert_eq!(
            parse_series(&text, "loss_teacher_ce").unwrap(),
            vec![(1, 2.0), (2, 1.0)]
        );
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = format!(
            "{}\n1,3,0.1,2.5,2,0,0,0,1,5,0.6,0\n2,6,0.1,oops,1,0,0,0,1,5,0.6,0\n",
            header()
        );
        let err = parse_series(&text, "loss_total").unwrap_err();
        assert!(err.contains("line 3"), "{err}");
        let short = format!("{}\n1,3,0.1\n", header());
        assert!(parse_series(&short, "loss_total")
            .unwrap_err()
            .contains("line 2"));
    }

    #[test]
    fn empty_inputs_fail() {
        assert!(parse_series("", "loss_total").is_err());
        assert!(parse_series(&format!("{}\n", header()), "loss_total").is_err());
        assert!(parse_series("a,b\n1,2\n", "loss_total").is_err());
    }

    #[test]
    fn names_come_from_run_directories() {
        let paths = vec![
            PathBuf::from("runs/base/metrics.csv"),
            PathBuf::from("runs/distill/metrics.csv"),
            PathBuf::from("other/base/metrics.csv"),
        ];
        assert_eq!(run_names(&paths), vec!["base", "distill", "base_2"]);
    }

    #[test]
    fn merged_table_has_every_point() {
        let s = vec![
            Series {
                name: "a".into(),
                points: vec![(1, 1.0), (2, 0.5)],
            },
            Series {
                name: "b".into(),
                points: vec![(1, 2.0)],
            },
        ];
        assert_eq!(
            merged_table(&s, "loss_total"),
            "run,epoch,loss_total\na,1,1\na,2,0.5\nb,1,2\n"
        );
    }
}
