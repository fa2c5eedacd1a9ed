//! Output files: CSV tables that are re-read and checked after writing, and
//! the error type that maps failures onto exit codes.

use fra_core::FraError;
use std::fmt;
use std::path::Path;
use std::process::ExitCode;

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration, flags or input files.
    Validation(String),
    /// Failure during computation or I/O.
    Runtime(String),
    /// A verification command ran and found a discrepancy.
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Verification(_) => 3,
        })
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
            CliError::Verification(m) => write!(f, "verification failed: {m}"),
        }
    }
}

impl From<FraError> for CliError {
    fn from(e: FraError) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

/// Writes a CSV whose first `text_cols` columns are free text and the rest
/// numeric, then re-reads it under its own header.
pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>], text_cols: usize) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    drop(w);
    let n = validate_csv(path, header, text_cols)?;
    if n != rows.len() {
        return Err(CliError::Runtime(format!("{}: wrote {} rows, read back {n}", path.display(), rows.len())));
    }
    Ok(())
}

/// Checks the header, the width of every row and that every cell past
/// `text_cols` parses as a number. Returns the row count.
pub fn validate_csv(path: &Path, header: &[String], text_cols: usize) -> CliResult<usize> {
    let bad = |m: String| CliError::Runtime(format!("{} failed self-validation: {m}", path.display()));
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let got: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if got != header {
        return Err(bad(format!("header {got:?} differs from {header:?}")));
    }
    let mut n = 0;
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        n += 1;
        if rec.len() != header.len() {
            return Err(bad(format!("row {n} has {} fields, header has {}", rec.len(), header.len())));
        }
        for (j, cell) in rec.iter().enumerate().skip(text_cols) {
            if cell.parse::<f64>().is_err() {
                return Err(bad(format!("row {n} column `{}` holds non-numeric `{cell}`", header[j])));
            }
        }
    }
    Ok(n)
}
