use std::fmt::Write as _;
use std::path::Path;

use crate::{Error, Result};

pub const REPORT_HEADER: &str = "epoch,train_loss,val_loss,kl_component,ce_component,lr,seconds";

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Mean weighted term `λ·KL` over the epoch (0 for the teacher), so
    /// `train_loss = kl_component + ce_component`.
    pub kl_component: f64,
    pub ce_component: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Completed,
    EarlyStopped,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub stop: StopReason,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl TrainReport {
    pub fn best(&self) -> &EpochRecord {
        &self.records[self.best_epoch - 1]
    }

    pub fn val_losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.val_loss).collect()
    }

    /// Early stop with nothing learnt after the first epoch.
    pub fn stalled(&self) -> bool {
        self.stop == StopReason::EarlyStopped && self.best_epoch == 1
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{:.3}",
                r.epoch, r.train_loss, r.val_loss, r.kl_component, r.ce_component, r.lr, r.seconds
            )
            .unwrap();
        }
        let stop = match self.stop {
            StopReason::Completed => "completed".to_string(),
            StopReason::EarlyStopped => format!("early-stopped at epoch {}", self.records.len()),
        };
        writeln!(out, "#stop: {stop}; best epoch {}", self.best_epoch).unwrap();
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |line: usize, what: &str| Error::Data(format!("train report line {}: {what}", line + 1));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == REPORT_HEADER => {}
            _ => return Err(bad(0, "missing header")),
        }
        let mut records = Vec::new();
        for (n, line) in lines {
            if let Some(rest) = line.strip_prefix("#stop: ") {
                let (stop, best) = rest.split_once("; best epoch ").ok_or_else(|| bad(n, "malformed footer"))?;
                let stop = if stop == "completed" { StopReason::Completed } else { StopReason::EarlyStopped };
                let best_epoch = best.parse().map_err(|_| bad(n, "bad best epoch"))?;
                return Ok(Self { records, stop, best_epoch });
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad(n, "expected 7 fields"));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(n, "bad number"));
            records.push(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad(n, "bad epoch"))?,
                train_loss: num(1)?,
                val_loss: num(2)?,
                kl_component: num(3)?,
                ce_component: num(4)?,
                lr: num(5)?,
                seconds: num(6)?,
            });
        }
        Err(bad(text.lines().count(), "missing #stop footer"))
    }
}
