//! Per-epoch metrics and the overfitting diagnostic.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 6] = ["epoch", "train_loss", "val_loss", "train_acc", "val_acc", "wall_ms"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub wall_ms: u64,
}

impl EpochMetrics {
    /// Rounds every float to 9 significant digits, the precision the CSV
    /// carries, so that recorded values survive a write/read cycle exactly.
    pub fn quantized(self) -> Self {
        EpochMetrics {
            train_loss: quantize(self.train_loss),
            val_loss: quantize(self.val_loss),
            train_acc: quantize(self.train_acc),
            val_acc: quantize(self.val_acc),
            ..self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunMetrics {
    pub epochs: Vec<EpochMetrics>,
}

/// `v` with 9 significant digits.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..9).contains(&exp) {
        let s = format!("{:.*}", (8 - exp).max(0) as usize, v);
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{v:.8e}")
    }
}

fn quantize(v: f64) -> f64 {
    format_sig9(v).parse().unwrap_or(v)
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Config(format!("metrics line {line}: {other:?}")),
    }
}

impl RunMetrics {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn push(&mut self, m: EpochMetrics) {
        self.epochs.push(m.quantized());
    }

    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }

    /// Epochs numbered 1, 2, ... with non-negative losses.
    pub fn validate(&self) -> Result<()> {
        for (i, m) in self.epochs.iter().enumerate() {
            if m.epoch != i + 1 {
                return Err(Error::Config(format!("row {}: epoch {} out of sequence", i + 1, m.epoch)));
            }
            if !(m.train_loss >= 0.0 && m.val_loss >= 0.0) {
                return Err(Error::Config(format!("row {}: negative or NaN loss", i + 1)));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(METRICS_HEADER).map_err(csv_err)?;
        for m in &self.epochs {
            w.write_record([
                m.epoch.to_string(),
                format_sig9(m.train_loss),
                format_sig9(m.val_loss),
                format_sig9(m.train_acc),
                format_sig9(m.val_acc),
                m.wall_ms.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("ascii output"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
        if header != METRICS_HEADER {
            return Err(Error::Config(format!("metrics header {header:?}")));
        }
        let mut epochs = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(csv_err)?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            let bad = |col: &str| Error::Config(format!("metrics line {line}: bad {col}"));
            let float = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(METRICS_HEADER[i]));
            epochs.push(EpochMetrics {
                epoch: rec[0].parse().map_err(|_| bad("epoch"))?,
                train_loss: float(1)?,
                val_loss: float(2)?,
                train_acc: float(3)?,
                val_acc: float(4)?,
                wall_ms: rec[5].parse().map_err(|_| bad("wall_ms"))?,
            });
        }
        let m = RunMetrics { epochs };
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Overfitting,
    NotOverfitting,
    /// Fewer than 3 epochs.
    Insufficient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverfitReport {
    pub verdict: Verdict,
    /// Number of trailing epochs examined, `⌈n/2⌉`.
    pub window: usize,
    /// Trailing epochs with `val_loss > train_loss`.
    pub gap_epochs: usize,
    pub val_min: f64,
    pub val_last: f64,
}

impl fmt::Display for OverfitReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = match self.verdict {
            Verdict::Overfitting => "overfitting",
            Verdict::NotOverfitting => "not overfitting",
            Verdict::Insufficient => "insufficient epochs",
        };
        write!(
            f,
            "{v}: val > train in {}/{} final epochs, val_loss last {} vs min {}",
            self.gap_epochs,
            self.window,
            format_sig9(self.val_last),
            format_sig9(self.val_min)
        )
    }
}

/// Overfitting when validation loss stays above training loss for the
/// final `⌈n/2⌉` epochs and the last validation loss is more than 5%
/// above its minimum.
pub fn overfit_report(metrics: &RunMetrics) -> OverfitReport {
    let n = metrics.len();
    let window = n.div_ceil(2);
    let tail = &metrics.epochs[n - window..];
    let gap_epochs = tail.iter().filter(|m| m.val_loss > m.train_loss).count();
    let val_min = metrics.epochs.iter().map(|m| m.val_loss).fold(f64::INFINITY, f64::min);
    let val_last = metrics.last().map_or(f64::NAN, |m| m.val_loss);
    let verdict = if n < 3 {
        Verdict::Insufficient
    } else if gap_epochs == window && val_last > 1.05 * val_min {
        Verdict::Overfitting
    } else {
        Verdict::NotOverfitting
    };
    OverfitReport {
        verdict,
        window,
        gap_epochs,
        val_min,
        val_last,
    }
}
