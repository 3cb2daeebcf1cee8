use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossBreakdown;

/// Column order of `history.csv`.
pub const HISTORY_HEADER: &str = "epoch,lr,arb,hcm,contrastive,center,kd_all,kd_hard,total";

/// Mean loss terms of one epoch and the learning rate it used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(HISTORY_HEADER);
        s.push('\n');
        for r in &self.epochs {
            s.push_str(&format!("{},{}", r.epoch, r.lr));
            for (_, v) in r.losses.terms() {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(self.to_csv().as_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let bad = |line: usize, m: &str| Error::Format {
            what: "history",
            path: path.to_path_buf(),
            message: format!("line {line}: {m}"),
        };
        let mut lines = text.lines();
        if lines.next() != Some(HISTORY_HEADER) {
            return Err(bad(1, "unexpected header"));
        }
        let mut epochs = Vec::new();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(bad(i + 2, "expected 9 fields"));
            }
            let num = |j: usize| f[j].parse::<f64>().map_err(|_| bad(i + 2, "non-numeric field"));
            let epoch = f[0].parse().map_err(|_| bad(i + 2, "bad epoch"))?;
            epochs.push(EpochRecord {
                epoch,
                lr: num(1)?,
                losses: LossBreakdown {
                    arb: num(2)?,
                    hcm: num(3)?,
                    contrastive: num(4)?,
                    center: num(5)?,
                    kd_all: num(6)?,
                    kd_hard: num(7)?,
                    total: num(8)?,
                },
            });
        }
        Ok(Self { epochs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossWeights;

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let h = TrainingHistory {
            epochs: vec![EpochRecord {
                epoch: 1,
                lr: 0.1,
                losses: LossBreakdown::compose(1.5, 0.25, 0.1, 3.0, 0.01, 0.02, &LossWeights::default()),
            }],
        };
        let p = dir.path().join("history.csv");
        h.write_csv(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("epoch,lr,arb,hcm,contrastive,center,kd_all,kd_hard,total\n1,0.1,1.5,"));
        assert_eq!(TrainingHistory::read_csv(&p).unwrap(), h);
    }
}
