//! Line-oriented JSON metric logs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{at, Result};

pub struct JsonLog {
    out: Box<dyn Write>,
}

impl JsonLog {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(at(path))?;
        Ok(Self {
            out: Box::new(BufWriter::new(f)),
        })
    }

    pub fn stdout() -> Self {
        Self {
            out: Box::new(std::io::stdout()),
        }
    }

    /// Wraps any writer; the tests use an in-memory buffer.
    pub fn to_writer(w: impl Write + 'static) -> Self {
        Self { out: Box::new(w) }
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        Ok(self.out.flush()?)
    }
}

/// Parses every line of a log.
pub fn read(path: &Path) -> Result<Vec<serde_json::Value>> {
    let text = std::fs::read_to_string(path).map_err(at(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
