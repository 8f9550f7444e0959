//! CSV logs and reports. Provenance lines start with `#` and precede the
//! header row.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use ccsbesr_core::loss::LossBreakdown;

pub const STEP_HEADER: [&str; 7] = ["step", "l_sr", "l_photometric", "l_smooth", "l_cycle", "l_stereo", "total"];
pub const EPOCH_HEADER: [&str; 7] = ["epoch", "steps", "val_psnr", "val_ssim", "bicubic_psnr", "bicubic_ssim", "checkpoint"];
pub const EVAL_HEADER: [&str; 5] = ["id", "psnr", "ssim", "bicubic_psnr", "bicubic_ssim"];

pub struct CsvLog {
    writer: csv::Writer<BufWriter<File>>,
}

impl CsvLog {
    /// Creates `path`, writes every line of `provenance` prefixed by `# `,
    /// then the header row.
    pub fn create(path: &Path, provenance: &str, header: &[&str]) -> Result<Self> {
        let file = File::create(path).with_context(|| format!("{}: cannot create", path.display()))?;
        let mut buf = BufWriter::new(file);
        for line in provenance.lines() {
            writeln!(buf, "# {line}")?;
        }
        let mut writer = csv::WriterBuilder::new().from_writer(buf);
        writer.write_record(header)?;
        writer.flush()?;
        Ok(Self { writer })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer.write_record(fields)?;
        self.writer.flush()?;
        Ok(())
    }
}

/// Shortest round-trip rendering so logged values are exact.
pub fn num(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".into()
    } else {
        format!("{v:?}")
    }
}

pub fn step_row(step: u64, b: &LossBreakdown) -> [String; 7] {
    [
        step.to_string(),
        num(b.l_sr),
        num(b.l_photometric),
        num(b.l_smooth),
        num(b.l_cycle),
        num(b.l_stereo),
        num(b.total),
    ]
}

/// Reads a log written by [`CsvLog`], skipping provenance lines. Returns the
/// header and the rows.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .with_context(|| format!("{}: cannot read", path.display()))?;
    let header = rdr.headers()?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        rows.push(rec?.iter().map(String::from).collect());
    }
    Ok((header, rows))
}

/// Provenance lines at the top of a log, without the `# ` prefix.
pub fn read_provenance(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path).with_context(|| format!("{}: cannot read", path.display()))?;
    let mut out = String::new();
    for line in text.lines().take_while(|l| l.starts_with('#')) {
        out.push_str(line.trim_start_matches('#').trim_start());
        out.push('\n');
    }
    Ok(out)
}
