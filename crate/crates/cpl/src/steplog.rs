//! JSON-lines step logs: one [`StepRecord`] object per line, in step order.
//!
//! Fields: `step`, `phase` (`pt|fill|continuous`), `branch`
//! (`labeled|unlabeled`), `loss`, `skipped`, `tau`, `lr`, `batch_id`,
//! `pl_age`, `pl_distance`, `p_out`, `evicted`, `blank_fraction`,
//! `pl_length_ratio`, `oracle_wer`, `oracle_ter`, `dev_ter`. Values that do
//! not apply to a step are `null`. The first line is a header object
//! `{"format": "cpl-steps", "version": 1}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use cpl_core::trainer::StepRecord;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const FORMAT: &str = "cpl-steps";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
}

pub struct StepLogWriter {
    path: PathBuf,
    out: BufWriter<File>,
    error: Option<std::io::Error>,
}

impl StepLogWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(CliError::io(path))?;
        let mut w = StepLogWriter { path: path.to_path_buf(), out: BufWriter::new(file), error: None };
        let header = serde_json::to_string(&Header { format: FORMAT.into(), version: FORMAT_VERSION }).unwrap();
        writeln!(w.out, "{header}").map_err(CliError::io(path))?;
        Ok(w)
    }

    /// Writes one record. The first I/O error is kept and reported by
    /// [`StepLogWriter::finish`].
    pub fn write(&mut self, record: &StepRecord) {
        if self.error.is_some() {
            return;
        }
        let line = serde_json::to_string(record).expect("records serialize");
        if let Err(e) = writeln!(self.out, "{line}") {
            self.error = Some(e);
        }
    }

    pub fn finish(mut self) -> Result<()> {
        if let Some(e) = self.error.take() {
            return Err(CliError::Io { path: self.path, source: e });
        }
        self.out.flush().map_err(CliError::io(&self.path))
    }
}

pub fn read_steps(path: &Path) -> Result<Vec<StepRecord>> {
    let file = File::open(path).map_err(CliError::io(path))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines.next().ok_or_else(|| CliError::format(path, "empty log"))?.map_err(CliError::io(path))?;
    let header: Header = serde_json::from_str(&first).map_err(|e| CliError::format(path, format!("header: {e}")))?;
    if header.format != FORMAT || header.version != FORMAT_VERSION {
        return Err(CliError::format(path, format!("unsupported log {} v{}", header.format, header.version)));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(CliError::io(path))?;
        let r: StepRecord =
            serde_json::from_str(&line).map_err(|e| CliError::format(path, format!("line {}: {e}", i + 2)))?;
        out.push(r);
    }
    Ok(out)
}
