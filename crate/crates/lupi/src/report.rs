//! Baseline vs PI vs teacher comparison from a finished experiment.

use std::fmt::Write as _;
use std::path::Path;

use lupi_core::Metrics;

use crate::error::{Error, Result};
use crate::experiment::{Summary, STUDENT_BASELINE, STUDENT_PI, TEACHER};
use crate::formats::{self, num};

/// Output file stem for each model.
pub const CURVES: [(&str, &str); 3] = [
    (STUDENT_BASELINE, "baseline"),
    (STUDENT_PI, "pi"),
    (TEACHER, "teacher"),
];

fn spaces(m: &crate::experiment::ModelReport) -> [(&'static str, &'static str, &Metrics); 2] {
    [
        ("3d", "normalized", &m.evaluation.metrics_3d),
        ("2d", "px", &m.evaluation.metrics_2d),
    ]
}

/// Reads `summary.json` in `experiment` and writes `pck_{baseline,pi,teacher}.csv`,
/// `comparison.csv` and `report.md` into `out`. Depends only on the summary.
pub fn write_report(experiment: &Path, out: &Path) -> Result<()> {
    let summary: Summary = formats::read_json(&experiment.join("summary.json"))?;
    std::fs::create_dir_all(out).map_err(Error::io(out))?;
    let model = |name: &str| {
        summary.models.get(name).ok_or_else(|| Error::Format {
            path: experiment.join("summary.json"),
            reason: format!("no results for model `{name}`"),
        })
    };
    let mut table = Vec::new();
    let mut md =
        String::from("| model | space | unit | EPE mean | EPE median |\n|---|---|---|---|---|\n");
    for (name, stem) in CURVES {
        let m = model(name)?;
        let mut rows = Vec::new();
        for (space, unit, metrics) in spaces(m) {
            rows.extend(
                metrics
                    .pck
                    .iter()
                    .map(|&(t, f)| vec![space.into(), unit.into(), num(t), num(f)]),
            );
            table.push(vec![
                name.into(),
                space.into(),
                unit.into(),
                num(metrics.epe_mean),
                num(metrics.epe_median),
            ]);
            let _ = writeln!(
                md,
                "| {name} | {space} | {unit} | {:.4} | {:.4} |",
                metrics.epe_mean, metrics.epe_median
            );
        }
        formats::write_csv(
            &out.join(format!("pck_{stem}.csv")),
            &["space", "unit", "threshold", "pck"],
            rows,
        )?;
    }
    formats::write_csv(
        &out.join("comparison.csv"),
        &["model", "space", "unit", "epe_mean", "epe_median"],
        table,
    )?;
    let base = model(STUDENT_BASELINE)?.evaluation.metrics_3d.epe_mean;
    let pi = model(STUDENT_PI)?.evaluation.metrics_3d.epe_mean;
    let _ = writeln!(
        md,
        "\nPI training changes the 3D EPE mean by {:+.2}% relative to the baseline.",
        100.0 * (pi - base) / base
    );
    let path = out.join("report.md");
    std::fs::write(&path, md).map_err(Error::io(&path))
}
