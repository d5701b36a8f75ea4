//! Error statistics and training histories.

use crate::error::Result;
use crate::robot::fmt17;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Per-axis RMSE and standard deviation of signed errors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisStats {
    pub rmse: [f64; 3],
    pub std: [f64; 3],
    pub count: usize,
}

impl AxisStats {
    /// Statistics of `estimate − reference` over all given error vectors.
    ///
    /// STD is the population standard deviation around the mean error.
    pub fn from_errors<I: IntoIterator<Item = [f64; 3]>>(errors: I) -> Self {
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        let mut count = 0usize;
        for e in errors {
            for a in 0..3 {
                sum[a] += e[a];
                sq[a] += e[a] * e[a];
            }
            count += 1;
        }
        if count == 0 {
            return Self {
                rmse: [0.0; 3],
                std: [0.0; 3],
                count,
            };
        }
        let n = count as f64;
        let mut rmse = [0.0; 3];
        let mut std = [0.0; 3];
        for a in 0..3 {
            let mean = sum[a] / n;
            rmse[a] = (sq[a] / n).sqrt();
            std[a] = (sq[a] / n - mean * mean).max(0.0).sqrt();
        }
        Self { rmse, std, count }
    }

    /// The same statistics scaled by `factor` (e.g. 1000 for metres → mm).
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            rmse: self.rmse.map(|v| v * factor),
            std: self.std.map(|v| v * factor),
            count: self.count,
        }
    }

    /// `sqrt(Σ rmse²)`, the Euclidean RMSE.
    pub fn aggregate_rmse(&self) -> f64 {
        self.rmse.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn worst_axis(&self) -> f64 {
        self.rmse.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: u64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Per-iteration losses; `val_loss` is blank on rows without validation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub rows: Vec<HistoryRow>,
}

impl LossHistory {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iteration", "train_loss", "val_loss"])?;
        for r in &self.rows {
            w.write_record([
                r.iteration.to_string(),
                fmt17(r.train_loss),
                r.val_loss.map(fmt17).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn last_val_loss(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.val_loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gaussian_sample, seeded_rng};

    #[test]
    fn perfect_and_constant_offset() {
        let s = AxisStats::from_errors(vec![[0.0; 3]; 5]);
        assert_eq!(s.rmse, [0.0; 3]);
        let s = AxisStats::from_errors(vec![[0.002, 0.0, 0.0]; 5]);
        assert!((s.rmse[0] - 0.002).abs() < 1e-15);
        assert!(s.std[0] < 1e-9);
    }

    #[test]
    fn gaussian_errors_give_sigma() {
        let noise = gaussian_sample(&mut seeded_rng(4), 0.0, 0.5, [100_000, 3]).unwrap();
        let s = AxisStats::from_errors(noise.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]));
        for a in 0..3 {
            assert!((s.rmse[a] - 0.5).abs() < 0.01);
            assert!((s.std[a] - 0.5).abs() < 0.01);
        }
    }

    #[test]
    fn history_csv_leaves_val_blank() {
        let h = LossHistory {
            rows: vec![
                HistoryRow {
                    iteration: 1,
                    train_loss: 0.5,
                    val_loss: None,
                },
                HistoryRow {
                    iteration: 2,
                    train_loss: 0.25,
                    val_loss: Some(0.3),
                },
            ],
        };
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "iteration,train_loss,val_loss");
        assert!(lines[1].ends_with(','));
        assert_eq!(h.last_val_loss(), Some(0.3));
    }
}
