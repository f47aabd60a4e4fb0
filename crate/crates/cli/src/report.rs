//! Table and plot files for a [`ResultTable`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{PipelineError, Result};
use crate::matrix::{PCell, ResultTable};

pub const TABLE_JSON: &str = "results_table.json";
pub const TABLE_CSV: &str = "results_table.csv";

fn fmt_p(cell: Option<&PCell>) -> String {
    match cell {
        Some(PCell::Value(p)) => format!("{p:.6}"),
        Some(PCell::Mark(m)) => m.clone(),
        None => String::new(),
    }
}

/// CSV text: `method,label,fraction`, the metric means, then one `p_<metric>`
/// column per metric.
pub fn table_csv(table: &ResultTable) -> String {
    let mut s = String::from("method,label,fraction");
    for m in &table.metrics {
        write!(s, ",{m}").unwrap();
    }
    for m in &table.metrics {
        write!(s, ",p_{m}").unwrap();
    }
    s.push('\n');
    for row in &table.rows {
        write!(s, "{},{},{}", row.method, row.label, row.fraction).unwrap();
        for m in &table.metrics {
            match row.values.get(m) {
                Some(v) => write!(s, ",{v:.4}").unwrap(),
                None => s.push(','),
            }
        }
        for m in &table.metrics {
            write!(s, ",{}", fmt_p(row.p_values.get(m))).unwrap();
        }
        s.push('\n');
    }
    s
}

fn plot_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Format {
        path: path.to_path_buf(),
        message: format!("plot failed: {e}"),
    }
}

/// SVG line plot of one metric against the training fraction, one line per
/// (method, label).
pub fn metric_plot(table: &ResultTable, metric: &str, path: &Path) -> Result<String> {
    let mut series: BTreeMap<(String, String), Vec<(f64, f64)>> = BTreeMap::new();
    for row in &table.rows {
        if let Some(v) = row.values.get(metric) {
            series
                .entry((row.method.clone(), row.label.clone()))
                .or_default()
                .push((row.fraction, *v));
        }
    }
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (640, 420)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
        let mut chart = ChartBuilder::on(&root)
            .caption(metric, ("sans-serif", 22))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d(0f64..1.05f64, 0f64..1.0f64)
            .map_err(|e| plot_err(path, e))?;
        chart
            .configure_mesh()
            .x_desc("training fraction")
            .y_desc(metric)
            .draw()
            .map_err(|e| plot_err(path, e))?;
        for (i, ((method, label), mut pts)) in series.into_iter().enumerate() {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
                .map_err(|e| plot_err(path, e))?
                .label(format!("{label} ({method})"))
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
            chart
                .draw_series(pts.iter().map(|&p| Circle::new(p, 4, color.filled())))
                .map_err(|e| plot_err(path, e))?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .position(SeriesLabelPosition::LowerRight)
            .draw()
            .map_err(|e| plot_err(path, e))?;
        root.present().map_err(|e| plot_err(path, e))?;
    }
    Ok(svg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

/// Writes the JSON and CSV tables and `plots/<metric>.svg`; returns the
/// written paths.
pub fn emit_report(table: &ResultTable, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if table.rows.is_empty() {
        return Err(PipelineError::Comparison("report needs at least one row".into()));
    }
    let mut written = Vec::new();
    let json_path = out_dir.join(TABLE_JSON);
    let mut json = serde_json::to_string_pretty(table).expect("table serializes");
    json.push('\n');
    write(&json_path, &json)?;
    written.push(json_path);
    let csv_path = out_dir.join(TABLE_CSV);
    write(&csv_path, &table_csv(table))?;
    written.push(csv_path);
    for metric in &table.metrics {
        let path = out_dir.join("plots").join(format!("{metric}.svg"));
        let svg = metric_plot(table, metric, &path)?;
        write(&path, &svg)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::{ResultRow, TABLE_METRICS};

    fn table() -> ResultTable {
        let row = |label: &str, fraction: f64, dice: f64, p: PCell| ResultRow {
            name: format!("{label}_{fraction}"),
            method: "adapter+mocl".into(),
            label: label.into(),
            fraction,
            seeds: 1,
            images: 4,
            values: TABLE_METRICS.iter().map(|m| (m.to_string(), dice)).collect(),
            p_values: TABLE_METRICS.iter().map(|m| (m.to_string(), p.clone())).collect(),
        };
        ResultTable {
            metrics: TABLE_METRICS.iter().map(|s| s.to_string()).collect(),
            reference: 0,
            rows: vec![
                row("complete", 1.0, 0.9, PCell::reference()),
                row("complete", 0.04, 0.7, PCell::Value(0.125)),
                row("weak_tight", 1.0, 0.85, PCell::degenerate()),
            ],
        }
    }

    #[test]
    fn csv_layout() {
        let csv = table_csv(&table());
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "method,label,fraction,dice,auc,recall,precision,bestF1,iou,aji,\
             p_dice,p_auc,p_recall,p_precision,p_bestF1,p_iou,p_aji"
        );
        assert_eq!(
            lines.next().unwrap(),
            "adapter+mocl,complete,1,0.9000,0.9000,0.9000,0.9000,0.9000,0.9000,0.9000,Ref.,Ref.,Ref.,Ref.,Ref.,Ref.,Ref."
        );
        assert!(lines.next().unwrap().ends_with(",0.125000"));
        assert!(lines.next().unwrap().ends_with(",degenerate"));
    }

    #[test]
    fn report_files_are_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let t = table();
        let first = emit_report(&t, dir.path()).unwrap();
        assert_eq!(first.len(), 2 + TABLE_METRICS.len());
        let bytes: Vec<Vec<u8>> = first.iter().map(|p| fs::read(p).unwrap()).collect();
        emit_report(&t, dir.path()).unwrap();
        for (p, b) in first.iter().zip(&bytes) {
            assert_eq!(&fs::read(p).unwrap(), b, "{}", p.display());
        }
        let svg = String::from_utf8(bytes[2].clone()).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains(">\ndice\n</text>"));
        let back: ResultTable = serde_json::from_slice(&bytes[0]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn unwritable_directory_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("occupied");
        fs::write(&file, "x").unwrap();
        assert!(matches!(emit_report(&table(), &file), Err(PipelineError::Io { .. })));
    }
}
