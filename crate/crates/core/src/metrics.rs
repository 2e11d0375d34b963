//! JSON-lines metric logs.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Numeric profile. Both run the same f64 arithmetic; `Test` records a
/// zero wall clock so metric files are byte-reproducible.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Test,
    Fast,
}

/// Wall-clock source that honours the profile.
#[derive(Clone, Copy, Debug)]
pub struct Clock {
    start: Instant,
    profile: Profile,
}

impl Clock {
    pub fn start(profile: Profile) -> Self {
        Clock { start: Instant::now(), profile }
    }

    pub fn elapsed_ms(&self) -> u64 {
        match self.profile {
            Profile::Test => 0,
            Profile::Fast => self.start.elapsed().as_millis() as u64,
        }
    }
}

/// Appends one JSON object per line. `None` discards records.
pub struct MetricsWriter {
    out: Option<BufWriter<File>>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        Ok(MetricsWriter { out: Some(BufWriter::new(File::create(path)?)) })
    }

    pub fn sink() -> Self {
        MetricsWriter { out: None }
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        if let Some(out) = &mut self.out {
            serde_json::to_writer(&mut *out, record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if let Some(out) = &mut self.out {
            out.flush()?;
        }
        Ok(())
    }
}

/// Reads a JSONL file; a malformed line is a format error naming its line.
pub fn read_jsonl(path: &Path) -> Result<Vec<serde_json::Value>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| Error::format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(v);
    }
    Ok(out)
}
