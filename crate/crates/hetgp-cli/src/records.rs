//! Per-run result records and their CSV schema.

use serde::{Deserialize, Serialize};

use hetgp::error::{Error, Result};

/// One `(run, reported task)` result row. Field order is the CSV column
/// order: `case,model,seed,task,smse,smll,final_elbo,wall_time_s,nu_g0,error`.
/// Missing values serialize as empty fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub case: String,
    pub model: String,
    pub seed: u64,
    /// One-based task index.
    pub task: usize,
    pub smse: Option<f64>,
    pub smll: Option<f64>,
    pub final_elbo: Option<f64>,
    pub wall_time_s: Option<f64>,
    /// Learned aligned-input prior variance, when the variant carries one.
    pub nu_g0: Option<f64>,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn is_error(&self) -> bool {
        self.error.is_some()
    }
}

/// Writes records as CSV with a header row.
pub fn write_csv<W: std::io::Write>(records: &[RunRecord], out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    for r in records {
        writer
            .serialize(r)
            .map_err(|e| Error::contract(format!("csv write failure: {e}")))?;
    }
    writer
        .flush()
        .map_err(|e| Error::contract(format!("csv flush failure: {e}")))?;
    Ok(())
}

/// Reads records back from CSV.
pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<RunRecord>> {
    let mut reader = csv::Reader::from_reader(input);
    reader
        .deserialize()
        .map(|row| row.map_err(|e| Error::contract(format!("csv parse failure: {e}"))))
        .collect()
}
