use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const SSL_COLUMNS: [&str; 6] = ["step", "loss", "lr", "omega", "skipped_pairs", "wall_ms"];

/// Append-only CSV; the header is written when the file is created.
pub struct CsvLog {
    path: PathBuf,
    out: BufWriter<File>,
    columns: usize,
}

impl CsvLog {
    pub fn create(path: impl AsRef<Path>, header: &[&str]) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut log = CsvLog {
            path,
            out: BufWriter::new(file),
            columns: header.len(),
        };
        log.write_line(&header.join(","))?;
        Ok(log)
    }

    /// Reopen an existing log for appending.
    pub fn append(path: impl AsRef<Path>, columns: usize) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(CsvLog {
            path,
            out: BufWriter::new(file),
            columns,
        })
    }

    pub fn row(&mut self, fields: &[String]) -> Result<()> {
        if fields.len() != self.columns {
            return Err(Error::Invalid(format!(
                "{} fields for a {}-column log",
                fields.len(),
                self.columns
            )));
        }
        self.write_line(&fields.join(","))
    }

    fn write_line(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Parse a CSV written by [`CsvLog`] into its header and rows.
pub fn read_csv(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty csv", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    Ok((header, rows))
}
