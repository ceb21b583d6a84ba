//! Per-round metrics as CSV. Floats carry six decimals; the selected client
//! ids are joined with `;`.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::orchestrator::{RoundMetrics, RunReport};

pub const METRICS_HEADER: [&str; 10] = [
    "round",
    "student_acc",
    "teacher_acc",
    "loss_ce",
    "loss_kd",
    "loss_gen",
    "var_f_intv",
    "var_f_part",
    "var_f_num",
    "selected",
];

fn csv_err(e: csv::Error) -> Error {
    Error::Metrics(e.to_string())
}

pub fn write_metrics_to<W: Write>(records: &[RoundMetrics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for m in records {
        let selected: Vec<String> = m.selected.iter().map(|k| k.to_string()).collect();
        let row = [
            m.round.to_string(),
            format!("{:.6}", m.student_acc),
            format!("{:.6}", m.teacher_acc),
            format!("{:.6}", m.loss_ce),
            format!("{:.6}", m.loss_kd),
            format!("{:.6}", m.loss_gen),
            format!("{:.6}", m.var_f_intv),
            format!("{:.6}", m.var_f_part),
            format!("{:.6}", m.var_f_num),
            selected.join(";"),
        ];
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Metrics(e.to_string()))
}

pub fn write_metrics(records: &[RoundMetrics], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_metrics_to(records, f).map_err(|e| match e {
        Error::Metrics(m) => Error::Metrics(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn read_metrics_from<R: Read>(input: R) -> Result<Vec<RoundMetrics>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(csv_err)?;
    if header.iter().ne(METRICS_HEADER) {
        return Err(Error::Metrics(format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let f = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| Error::Metrics(format!("column {} is not a number: `{}`", METRICS_HEADER[i], &rec[i])))
        };
        let selected = if rec[9].is_empty() {
            Vec::new()
        } else {
            rec[9]
                .split(';')
                .map(|s| s.parse().map_err(|_| Error::Metrics(format!("bad client id `{s}`"))))
                .collect::<Result<_>>()?
        };
        out.push(RoundMetrics {
            round: rec[0].parse().map_err(|_| Error::Metrics(format!("bad round `{}`", &rec[0])))?,
            student_acc: f(1)?,
            teacher_acc: f(2)?,
            loss_ce: f(3)?,
            loss_kd: f(4)?,
            loss_gen: f(5)?,
            var_f_intv: f(6)?,
            var_f_part: f(7)?,
            var_f_num: f(8)?,
            selected,
        });
    }
    Ok(out)
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<RoundMetrics>> {
    let path = path.as_ref();
    read_metrics_from(File::open(path).map_err(|e| Error::io(path, e))?)
}

#[derive(Serialize)]
struct Summary<'a> {
    seed: u64,
    rounds: usize,
    best_student_acc: f64,
    best_student_round: usize,
    best_teacher_acc: f64,
    best_teacher_round: usize,
    final_model: crate::orchestrator::ModelChoice,
    final_acc: f64,
    student_curve: &'a [f64],
    teacher_curve: &'a [f64],
}

/// JSON summary of a run: best accuracies, the chosen final model and both
/// accuracy curves.
pub fn write_summary(report: &RunReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (s, t) = (report.student_curve(), report.teacher_curve());
    let summary = Summary {
        seed: report.seed,
        rounds: report.metrics.len(),
        best_student_acc: report.best_student_acc,
        best_student_round: report.best_student_round,
        best_teacher_acc: report.best_teacher_acc,
        best_teacher_round: report.best_teacher_round,
        final_model: report.final_choice,
        final_acc: report.final_acc(),
        student_curve: &s,
        teacher_curve: &t,
    };
    let text = serde_json::to_string_pretty(&summary).expect("plain data serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<RoundMetrics> {
        (0..3)
            .map(|t| RoundMetrics {
                round: t,
                student_acc: 0.1 * t as f64,
                teacher_acc: 0.123456789,
                loss_ce: 2.0,
                loss_kd: 0.25,
                loss_gen: 0.0,
                var_f_intv: 1e-3,
                var_f_part: 2.5e-4,
                var_f_num: 0.0,
                selected: vec![t, t + 4],
            })
            .collect()
    }

    #[test]
    fn header_and_format() {
        let mut buf = Vec::new();
        write_metrics_to(&sample(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "round,student_acc,teacher_acc,loss_ce,loss_kd,loss_gen,var_f_intv,var_f_part,var_f_num,selected"
        );
        assert_eq!(
            lines.next().unwrap(),
            "0,0.000000,0.123457,2.000000,0.250000,0.000000,0.001000,0.000250,0.000000,0;4"
        );
    }

    #[test]
    fn round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let recs = sample();
        write_metrics(&recs, &path).unwrap();
        let back = read_metrics(&path).unwrap();
        assert_eq!(back.len(), recs.len());
        for (a, b) in recs.iter().zip(&back) {
            assert_eq!(a.round, b.round);
            assert_eq!(a.selected, b.selected);
            assert!((a.teacher_acc - b.teacher_acc).abs() <= 5e-7);
        }
        // Quantized records are a fixed point.
        let path2 = dir.path().join("m2.csv");
        write_metrics(&back, &path2).unwrap();
        assert_eq!(read_metrics(&path2).unwrap(), back);
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn io_error_names_path() {
        let err = read_metrics("/nonexistent/dir/m.csv").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/m.csv"));
    }
}
