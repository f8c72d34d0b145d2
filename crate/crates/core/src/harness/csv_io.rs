use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::oracle::{range_bound, variance_bound, BoundReport, RANGE_BOUND_FACTOR};

use super::experiment::RegretReport;

/// Fixed column order of every report CSV. Debug mode appends `d`,
/// `choice` and one `p<m>` column per expert.
pub const CSV_COLUMNS: [&str; 11] = [
    "t",
    "expected_loss",
    "realized_loss",
    "best_cumloss",
    "exp_regret",
    "real_regret",
    "bound_var",
    "bound_range",
    "eta",
    "D",
    "V",
];

fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

/// Writes the report to any sink.
pub fn write_csv<W: Write>(report: &RegretReport, out: W) -> std::result::Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let mut header: Vec<String> = CSV_COLUMNS.iter().map(|s| s.to_string()).collect();
    if report.debug_probs {
        header.push("d".into());
        header.push("choice".into());
        header.extend((0..report.experts).map(|m| format!("p{m}")));
    }
    w.write_record(&header)?;
    for r in &report.rows {
        let mut rec = vec![
            r.round.to_string(),
            num(r.expected_loss),
            num(r.realized_loss),
            num(r.best_cumloss),
            num(r.exp_regret),
            num(r.real_regret),
            num(r.bound_var),
            num(r.bound_range),
            num(r.eta),
            num(r.max_range),
            num(r.total_variance),
        ];
        if report.debug_probs {
            rec.push(num(r.range));
            rec.push(r.choice.to_string());
            rec.extend(r.probs.iter().map(|p| num(*p)));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the report to `path`, header first, one newline-terminated row per
/// round, 17 significant digits per value.
pub fn emit_csv(report: &RegretReport, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    write_csv(report, BufWriter::new(file)).map_err(|source| Error::Csv { path: path.to_path_buf(), source })
}

/// A parsed numeric CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl CsvTable {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.headers.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    fn require(&self, name: &str) -> Result<Vec<f64>> {
        self.column(name)
            .ok_or_else(|| Error::RejectedInput(format!("CSV has no '{name}' column")))
    }
}

pub fn read_csv(path: &Path) -> Result<CsvTable> {
    let csv_err = |source| Error::Csv { path: path.to_path_buf(), source };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (n, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let row = rec
            .iter()
            .map(|field| {
                field.trim().parse::<f64>().map_err(|_| {
                    Error::RejectedInput(format!(
                        "{}: row {} has non-numeric field '{field}'",
                        path.display(),
                        n + 1
                    ))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(CsvTable { headers, rows })
}

/// Bounds recomputed from a report CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct RecomputedBounds {
    /// Bounds at the final row.
    pub report: BoundReport,
    /// Whether `sum d_t^2` came from a `d` column (debug CSV) or was
    /// recovered from the `bound_range` column.
    pub observed_ranges: bool,
    /// Largest relative gap between recomputed and recorded `bound_var`.
    pub bound_var_mismatch: f64,
    /// 1-based rows where expected regret exceeds either bound.
    pub violations: Vec<usize>,
    /// Rows checked.
    pub rows: usize,
}

/// Recomputes the bounds of every row with class budget `budget`.
pub fn recompute_bounds(table: &CsvTable, budget: f64) -> Result<RecomputedBounds> {
    if !(budget.is_finite() && budget >= 1.0) {
        return Err(Error::Config(format!("budget must be at least 1, got {budget}")));
    }
    if table.rows.is_empty() {
        return Err(Error::EmptyTable);
    }
    let max_range = table.require("D")?;
    let total_variance = table.require("V")?;
    let regret = table.require("exp_regret")?;
    let recorded_var = table.require("bound_var")?;
    let ranges = table.column("d");

    let sum_sq: Vec<f64> = match &ranges {
        Some(d) => d
            .iter()
            .scan(0.0, |acc, x| {
                *acc += x * x;
                Some(*acc)
            })
            .collect(),
        None => {
            let recorded_range = table.require("bound_range")?;
            recorded_range
                .iter()
                .zip(&max_range)
                .map(|(b, d)| {
                    let root = ((b - budget * d) / RANGE_BOUND_FACTOR).max(0.0);
                    root * root / budget
                })
                .collect()
        }
    };

    let mut violations = Vec::new();
    let mut mismatch: f64 = 0.0;
    for i in 0..table.rows.len() {
        let var = variance_bound(budget, max_range[i], total_variance[i]);
        let range = range_bound(budget, max_range[i], sum_sq[i]);
        if regret[i] > var || regret[i] > range {
            violations.push(i + 1);
        }
        let denom = recorded_var[i].abs().max(f64::MIN_POSITIVE);
        mismatch = mismatch.max((var - recorded_var[i]).abs() / denom);
    }
    let last = table.rows.len() - 1;
    let report = BoundReport::from_totals(budget, max_range[last], total_variance[last], sum_sq[last]);
    if ranges.is_some() && report.total_variance > report.sum_sq_range / 4.0 * (1.0 + 1e-12) {
        return Err(Error::Invariant {
            round: last + 1,
            detail: "summed variance exceeds a quarter of the summed squared ranges".into(),
        });
    }
    Ok(RecomputedBounds {
        report,
        observed_ranges: ranges.is_some(),
        bound_var_mismatch: mismatch,
        violations,
        rows: table.rows.len(),
    })
}
