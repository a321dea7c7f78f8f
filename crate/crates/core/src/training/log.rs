use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::{io_err, Error, Result};
use crate::objectives::LossReport;

pub const LOSS_HEADER: &str = "step,rec_a,rec_b,cyc_a,cyc_b,adv_gen_a,adv_gen_b,adv_disc_a,adv_disc_b,total_gen";

/// Append-only per-step loss CSV.
#[derive(Debug)]
pub struct LossLog {
    path: PathBuf,
    file: File,
}

impl LossLog {
    /// Starts a fresh log, replacing any existing file.
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = File::create(path).map_err(io_err(path))?;
        writeln!(file, "{LOSS_HEADER}").map_err(io_err(path))?;
        Ok(LossLog { path: path.to_owned(), file })
    }

    /// Reopens a log for a run resumed at `step`, dropping rows of later steps.
    pub fn resume(path: &Path, step: u64) -> Result<Self> {
        if !path.exists() {
            return Self::create(path);
        }
        let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
        let mut kept = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if i == 0 {
                if line != LOSS_HEADER {
                    return Err(Error::Dataset(format!("{} is not a loss log", path.display())));
                }
                continue;
            }
            let row_step: u64 = line
                .split(',')
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Dataset(format!("{}: bad row {}", path.display(), i + 1)))?;
            if row_step < step {
                kept.push(line);
            }
        }
        let mut text = String::from(LOSS_HEADER);
        text.push('\n');
        for line in kept {
            text.push_str(&line);
            text.push('\n');
        }
        fs::write(path, text).map_err(io_err(path))?;
        let file = OpenOptions::new().append(true).open(path).map_err(io_err(path))?;
        Ok(LossLog { path: path.to_owned(), file })
    }

    pub fn append(&mut self, r: &LossReport) -> Result<()> {
        writeln!(
            self.file,
            "{},{},{},{},{},{},{},{},{},{}",
            r.step, r.rec_a, r.rec_b, r.cyc_a, r.cyc_b, r.adv_gen_a, r.adv_gen_b, r.adv_disc_a, r.adv_disc_b, r.total_gen
        )
        .map_err(io_err(&self.path))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Parses a loss log into `(step, values)` rows.
pub fn read_loss_log(path: &Path) -> Result<Vec<(u64, Vec<f64>)>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |n: usize| Error::Dataset(format!("{}: bad row {n}", path.display()));
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let mut fields = line.split(',');
        let step = fields.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad(i + 1))?;
        let values = fields.map(|f| f.parse::<f64>().map_err(|_| bad(i + 1))).collect::<Result<Vec<_>>>()?;
        rows.push((step, values));
    }
    Ok(rows)
}
