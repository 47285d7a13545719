use std::fmt::Write as _;
use std::path::Path;

use super::FeatureSeq;
use crate::error::{Error, Result};

/// Per-dimension mean and population standard deviation of training frames.
#[derive(Clone, Debug, PartialEq)]
pub struct StandardizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StandardizationStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.is_empty() || mean.len() != std.len() {
            return Err(Error::InvalidStats(format!(
                "{} means vs {} stds",
                mean.len(),
                std.len()
            )));
        }
        if let Some(d) = std.iter().position(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::ZeroVariance(d));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("means".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Statistics over every frame of every sequence.
    pub fn compute<'a>(seqs: impl IntoIterator<Item = &'a FeatureSeq>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        let mut seqs_seen = Vec::new();
        for s in seqs {
            if sum.is_empty() {
                sum = vec![0.0; s.dim()];
                sq = vec![0.0; s.dim()];
            } else if s.dim() != sum.len() {
                return Err(Error::shape("compute_stats", &[sum.len()], &[s.dim()]));
            }
            for t in 0..s.len() {
                for (d, &v) in s.frame(t).iter().enumerate() {
                    sum[d] += v as f64;
                }
            }
            count += s.len();
            seqs_seen.push(s);
        }
        if count == 0 {
            return Err(Error::InvalidStats("no frames".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        for s in seqs_seen {
            for t in 0..s.len() {
                for (d, &v) in s.frame(t).iter().enumerate() {
                    let c = v as f64 - mean[d];
                    sq[d] += c * c;
                }
            }
        }
        let std: Vec<f64> = sq.iter().map(|s| (s / count as f64).sqrt()).collect();
        if let Some(d) = std.iter().position(|&s| s <= 0.0) {
            return Err(Error::ZeroVariance(d));
        }
        Self::new(mean, std)
    }

    fn check(&self, seq: &FeatureSeq) -> Result<()> {
        if seq.dim() != self.dim() {
            return Err(Error::shape("standardize", &[self.dim()], &[seq.dim()]));
        }
        Ok(())
    }

    pub fn standardize(&self, seq: &FeatureSeq) -> Result<FeatureSeq> {
        self.check(seq)?;
        self.apply(seq, |v, d| (v - self.mean[d]) / self.std[d])
    }

    pub fn destandardize(&self, seq: &FeatureSeq) -> Result<FeatureSeq> {
        self.check(seq)?;
        self.apply(seq, |v, d| v * self.std[d] + self.mean[d])
    }

    fn apply(&self, seq: &FeatureSeq, f: impl Fn(f64, usize) -> f64) -> Result<FeatureSeq> {
        let d = self.dim();
        let frames = seq
            .frames()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v as f64, i % d) as f32)
            .collect();
        let mut out = FeatureSeq::new(frames, seq.len(), d)?
            .with_ids(seq.speaker_id, seq.utterance_id.clone());
        out.set_f0(seq.f0().map(<[f32]>::to_vec))?;
        Ok(out)
    }

    /// Text form: line 1 D, line 2 means, line 3 stds, space separated.
    pub fn to_text(&self) -> String {
        let mut s = format!("{}\n", self.dim());
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:?}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(s, "{}", join(&self.mean));
        let _ = writeln!(s, "{}", join(&self.std));
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::Truncated(format!("stats {what}")))
        };
        let d: usize = next("dimension")?
            .trim()
            .parse()
            .map_err(|_| Error::Format("stats dimension is not an integer".into()))?;
        if d == 0 {
            return Err(Error::ZeroDimension);
        }
        let parse = |line: &str, what: &str| -> Result<Vec<f64>> {
            let v: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Format(format!("stats {what} contain a non-number")))?;
            if v.len() != d {
                return Err(Error::Format(format!(
                    "expected {d} {what}, found {}",
                    v.len()
                )));
            }
            Ok(v)
        };
        let mean = parse(next("means")?, "means")?;
        let std = parse(next("stds")?, "stds")?;
        Self::new(mean, std)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}
