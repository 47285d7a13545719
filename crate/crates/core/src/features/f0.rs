use std::path::Path;

use crate::error::{Error, Result};

/// Log-domain mean and population standard deviation of voiced F0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct F0Stats {
    pub log_mean: f64,
    pub log_std: f64,
}

impl F0Stats {
    pub fn new(log_mean: f64, log_std: f64) -> Result<Self> {
        if !log_mean.is_finite() || log_std <= 0.0 || !log_std.is_finite() {
            return Err(Error::InvalidStats(format!(
                "f0 stats ({log_mean}, {log_std}) need finite mean and positive std"
            )));
        }
        Ok(Self { log_mean, log_std })
    }

    /// Statistics over voiced (nonzero) frames; unvoiced frames are skipped.
    pub fn compute<'a>(tracks: impl IntoIterator<Item = &'a [f32]>) -> Result<Self> {
        let logs: Vec<f64> = tracks
            .into_iter()
            .flat_map(|t| t.iter())
            .filter(|&&v| v > 0.0)
            .map(|&v| (v as f64).ln())
            .collect();
        if logs.len() < 2 {
            return Err(Error::InvalidStats("fewer than two voiced frames".into()));
        }
        let n = logs.len() as f64;
        let mean = logs.iter().sum::<f64>() / n;
        let var = logs.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n;
        Self::new(mean, var.sqrt())
    }

    pub fn to_text(&self) -> String {
        format!("{:?} {:?}\n", self.log_mean, self.log_std)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let v: Vec<f64> = text
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format("f0 stats must be two numbers".into()))?;
        match v[..] {
            [m, s] => Self::new(m, s),
            _ => Err(Error::Format(format!(
                "f0 stats need 2 numbers, found {}",
                v.len()
            ))),
        }
    }
}

pub fn write_f0_stats(stats: &F0Stats, path: &Path) -> Result<()> {
    std::fs::write(path, stats.to_text())?;
    Ok(())
}

pub fn read_f0_stats(path: &Path) -> Result<F0Stats> {
    F0Stats::from_text(&std::fs::read_to_string(path)?)
}

/// Linear mean-variance transform of log F0 from `src` to `tgt` statistics.
/// Unvoiced (0 Hz) frames are passed through.
pub fn f0_convert(f0: &[f32], src: &F0Stats, tgt: &F0Stats) -> Result<Vec<f32>> {
    f0.iter()
        .enumerate()
        .map(|(i, &v)| {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::NegativeF0 {
                    frame: i,
                    value: v as f64,
                });
            }
            if v == 0.0 {
                return Ok(0.0);
            }
            let z = ((v as f64).ln() - src.log_mean) / src.log_std;
            Ok((z * tgt.log_std + tgt.log_mean).exp() as f32)
        })
        .collect()
}
