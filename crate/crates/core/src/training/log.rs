use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::losses::Term;
use super::step::StepReport;
use crate::Result;

/// Tab-separated per-step loss log with one column per term.
pub struct TrainLog {
    out: BufWriter<File>,
}

impl TrainLog {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        let names: Vec<&str> = Term::ALL.iter().map(|t| t.name()).collect();
        writeln!(out, "step\ttotal\td_loss\tproxy_ce\t{}", names.join("\t"))?;
        Ok(Self { out })
    }

    pub fn record(&mut self, r: &StepReport) -> Result<()> {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        let cols: Vec<String> = Term::ALL.iter().map(|&t| fmt(r.generator.get(t))).collect();
        writeln!(
            self.out,
            "{}\t{:.6}\t{:.6}\t{}\t{}",
            r.step,
            r.generator.total,
            r.discriminator,
            fmt(r.proxy),
            cols.join("\t")
        )?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}
