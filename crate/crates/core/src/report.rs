//! Plot-ready exports: CSV tables (one grid or table per file, header row
//! first) and a JSON summary.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::gate::{self, StageSpec};
use crate::sad::{self, SadReport};
use crate::tensor::Matrix;
use crate::trace::{DecodeTrace, StreamKind};
use crate::vdc::{self, VdcConfig, VdcStepReport};

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line: 0,
            message: format!("{other:?}"),
        },
    }
}

fn fmt_f(x: f64) -> String {
    // shortest representation that parses back to the same bits
    format!("{x}")
}

/// Writes a matrix with a leading label column (`label_name`, values 1..=rows)
/// and the given column headers.
pub fn write_matrix_csv<W: Write>(
    sink: W,
    m: &Matrix,
    label_name: &str,
    columns: &[String],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec![label_name.to_string()];
    header.extend(columns.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for r in 0..m.rows() {
        let mut rec = vec![(r + 1).to_string()];
        rec.extend(m.row(r).iter().map(|&x| fmt_f(x)));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Grid CSV: header `row,col1..colW`.
pub fn write_grid_csv<W: Write>(sink: W, m: &Matrix) -> Result<()> {
    let cols: Vec<String> = (1..=m.cols()).map(|c| format!("col{c}")).collect();
    write_matrix_csv(sink, m, "row", &cols)
}

/// Parses a CSV written by [`write_matrix_csv`], dropping the label column.
pub fn read_matrix_csv<R: Read>(source: R) -> Result<Matrix> {
    let mut r = csv::Reader::from_reader(source);
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let vals = rec
            .iter()
            .skip(1)
            .map(|s| {
                s.parse::<f64>().map_err(|e| Error::Parse {
                    line: i + 2,
                    message: format!("`{s}`: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(vals);
    }
    Matrix::from_rows(&rows)
}

fn write_file(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect()
}

pub fn write_change_mask_csv<W: Write>(sink: W, mask: &[Vec<bool>]) -> Result<()> {
    let steps = mask.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["layer".to_string()];
    header.extend((1..=steps).map(|t| format!("t{t}")));
    w.write_record(&header).map_err(csv_err)?;
    for (l, row) in mask.iter().enumerate() {
        let mut rec = vec![(l + 1).to_string()];
        rec.extend(row.iter().map(|&b| if b { "1" } else { "0" }.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_top5_csv<W: Write>(sink: W, rows: &[sad::Top5Row]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["layer".to_string()];
    for r in 1..=5 {
        header.push(format!("rank{r}_token"));
        header.push(format!("rank{r}_score"));
    }
    w.write_record(&header).map_err(csv_err)?;
    for row in rows {
        let mut rec = vec![row.layer.to_string()];
        for (tok, score) in &row.tokens {
            rec.push(tok.clone());
            rec.push(fmt_f(*score));
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_histogram_csv<W: Write>(sink: W, bins: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["layer", "count"]).map_err(csv_err)?;
    for (l, c) in bins.iter().enumerate() {
        w.write_record([(l + 1).to_string(), c.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportSummary {
    pub steps: usize,
    pub num_layers: usize,
    pub stages: StageSpec,
    pub vdc: VdcConfig,
    pub replaced_tokens: usize,
    pub correction_layer_histogram: Vec<usize>,
    pub sad_steps: usize,
    pub files: Vec<String>,
    pub skipped: Vec<String>,
}

/// Writes every export for `trace` into `dir`. Grid-based outputs are skipped
/// (and listed in `skipped`) when the trace carries no grids.
pub fn write_report(
    trace: &DecodeTrace,
    stages: &StageSpec,
    cfg: &VdcConfig,
    dir: &Path,
) -> Result<ReportSummary> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let mut skipped = Vec::new();
    let mut emit = |name: String, f: &dyn Fn(&mut Vec<u8>) -> Result<()>| -> Result<()> {
        let p: PathBuf = dir.join(&name);
        write_file(&p, |b| f(b))?;
        files.push(name);
        Ok(())
    };

    let ratios = gate::attention_ratios(trace)?;
    let groups: Vec<String> = ["system", "vision", "instruction", "output"]
        .map(String::from)
        .to_vec();
    emit("ratios.csv".into(), &|b| {
        write_matrix_csv(b, &ratios, "layer", &groups)
    })?;

    match gate::gate_report(trace, stages, true) {
        Ok(g) => {
            for (i, (s, m)) in stages.stages().iter().zip(&g.stage_avg).enumerate() {
                emit(format!("stage_avg_{}_{}.csv", i + 1, slug(&s.name)), &|b| {
                    write_grid_csv(b, m)
                })?;
            }
            for (i, (s, m)) in stages.stages().iter().zip(&g.stage_to_global).enumerate() {
                emit(
                    format!("stage_to_global_{}_{}.csv", i + 1, slug(&s.name)),
                    &|b| write_grid_csv(b, m),
                )?;
            }
            for (i, m) in g.inter_stage.iter().enumerate() {
                let (a, c) = (&stages.stages()[i], &stages.stages()[i + 1]);
                emit(
                    format!(
                        "inter_stage_{}_{}_{}.csv",
                        i + 1,
                        slug(&a.name),
                        slug(&c.name)
                    ),
                    &|b| write_grid_csv(b, m),
                )?;
            }
        }
        Err(Error::MissingField(f)) => skipped.push(format!("visual heatmaps: missing `{f}`")),
        Err(e) => return Err(e),
    }

    match gate::instruction_heatmap(trace) {
        Ok(m) => {
            let cols: Vec<String> = (1..=m.cols()).map(|c| format!("tok{c}")).collect();
            emit("instruction_heatmap.csv".into(), &|b| {
                write_matrix_csv(b, &m, "layer", &cols)
            })?;
        }
        Err(Error::MissingField(f)) => skipped.push(format!("instruction heatmap: missing `{f}`")),
        Err(e) => return Err(e),
    }

    for kind in StreamKind::ALL {
        let mask = sad::rank1_changes(trace, kind)?;
        emit(format!("rank1_changes_{}.csv", kind.key()), &|b| {
            write_change_mask_csv(b, &mask)
        })?;
    }
    for step in &trace.steps {
        for kind in StreamKind::ALL {
            let table = sad::top5_table(step, kind)?;
            emit(format!("top5_{}_t{:03}.csv", kind.key(), step.t), &|b| {
                write_top5_csv(b, &table)
            })?;
        }
    }

    let outcome = vdc::correct_trace(trace, cfg)?;
    let hist = vdc::correction_layer_histogram(&outcome.reports, trace.num_layers);
    emit("correction_layers.csv".into(), &|b| {
        write_histogram_csv(b, &hist)
    })?;

    let sad_reports: Vec<SadReport> = sad::detect_sad_trace(trace, cfg.skip_layers)?;
    let summary = ReportSummary {
        steps: trace.steps.len(),
        num_layers: trace.num_layers,
        stages: stages.clone(),
        vdc: *cfg,
        replaced_tokens: outcome.num_replaced(),
        correction_layer_histogram: hist,
        sad_steps: sad_reports.iter().filter(|r| r.sad_flag).count(),
        files: Vec::new(),
        skipped,
    };
    let mut summary = summary;
    files.push("summary.json".into());
    summary.files = files;
    let json = serde_json::to_string_pretty(&summary)?;
    fs::write(dir.join("summary.json"), json + "\n")?;
    Ok(summary)
}

/// Serializes VDC reports as the per-step JSON array.
pub fn vdc_reports_json(reports: &[VdcStepReport]) -> Result<String> {
    Ok(serde_json::to_string_pretty(reports)? + "\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grid_csv_layout() {
        let m = Matrix::from_rows(&[vec![0.1, 0.2], vec![1.0, 1e-300]]).unwrap();
        let mut buf = Vec::new();
        write_grid_csv(&mut buf, &m).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("row,col1,col2\n1,0.1,0.2\n2,1,"), "{s}");
    }

    #[test]
    fn histogram_layout() {
        let mut buf = Vec::new();
        write_histogram_csv(&mut buf, &[0, 2, 1]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "layer,count\n1,0\n2,2\n3,1\n"
        );
    }

    proptest! {
        #[test]
        fn grid_csv_round_trip(rows in 1usize..6, cols in 1usize..6, seed in prop::collection::vec(-1e3f64..1e3, 36)) {
            let m = Matrix::from_vec(rows, cols, seed[..rows * cols].to_vec()).unwrap();
            let mut buf = Vec::new();
            write_grid_csv(&mut buf, &m).unwrap();
            let back = read_matrix_csv(buf.as_slice()).unwrap();
            prop_assert_eq!(back.rows(), rows);
            for (a, b) in back.data().iter().zip(m.data()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
