//! Mel-cepstral distance and sweep report aggregation.

use std::cmp::Ordering;
use std::fmt;

use crate::error::{Error, Result};
use crate::features::FeatureSeq;

/// Mean per-frame mel-cepstral distance between two aligned sequences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McdResult {
    pub mcd_db: f64,
    pub frames_compared: usize,
}

/// `(10/ln 10)·sqrt(2·Σ_d (a_d − b_d)²)` per frame, averaged over frames.
/// Every dimension takes part, including the first.
pub fn mcd(a: &FeatureSeq, b: &FeatureSeq) -> Result<McdResult> {
    if a.len() != b.len() || a.dim() != b.dim() {
        return Err(Error::shape(
            "mcd",
            &[a.len(), a.dim()],
            &[b.len(), b.dim()],
        ));
    }
    let k = 10.0 / std::f64::consts::LN_10;
    let mut total = 0.0;
    for t in 0..a.len() {
        let ss: f64 = a
            .frame(t)
            .iter()
            .zip(b.frame(t))
            .map(|(&x, &y)| {
                let d = x as f64 - y as f64;
                d * d
            })
            .sum();
        total += k * (2.0 * ss).sqrt();
    }
    Ok(McdResult {
        mcd_db: total / a.len() as f64,
        frames_compared: a.len(),
    })
}

pub const SWEEP_CSV_HEADER: &str = "beta,seed,mean_frr,mean_mcd_convert,mean_mcd_recon,loss_recon,loss_lat,loss_mi,loss_ce,loss_ae,loss_spc,zero_gate_frac";

/// One trained (β, seed) run with its eval-split metrics and final-epoch losses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepRow {
    pub beta: f64,
    pub seed: u64,
    pub mean_frr: f64,
    pub mean_mcd_convert: f64,
    pub mean_mcd_recon: f64,
    pub loss_recon: f64,
    pub loss_lat: f64,
    pub loss_mi: f64,
    pub loss_ce: f64,
    pub loss_ae: f64,
    pub loss_spc: f64,
    pub zero_gate_frac: f64,
}

impl SweepRow {
    fn values(&self) -> [f64; 11] {
        [
            self.beta,
            self.mean_frr,
            self.mean_mcd_convert,
            self.mean_mcd_recon,
            self.loss_recon,
            self.loss_lat,
            self.loss_mi,
            self.loss_ce,
            self.loss_ae,
            self.loss_spc,
            self.zero_gate_frac,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "sweep row beta={} seed={}",
                self.beta, self.seed
            )));
        }
        if self.mean_frr > 1.0 {
            return Err(Error::Invalid(format!("FRR {} exceeds 1", self.mean_frr)));
        }
        Ok(())
    }

    pub fn to_csv_row(&self) -> String {
        let v = self.values();
        let mut row = format!("{},{}", v[0], self.seed);
        for x in &v[1..] {
            row.push_str(&format!(",{x}"));
        }
        row
    }

    pub fn from_csv_row(row: &str) -> Result<Self> {
        let cols: Vec<&str> = row.trim_end_matches('\n').split(',').collect();
        if cols.len() != 12 {
            return Err(Error::Format(format!(
                "sweep row has {} columns, expected 12",
                cols.len()
            )));
        }
        let f = |i: usize| -> Result<f64> {
            cols[i].parse().map_err(|_| {
                Error::Format(format!(
                    "bad number {:?} in sweep column {}",
                    cols[i],
                    i + 1
                ))
            })
        };
        let seed = cols[1]
            .parse()
            .map_err(|_| Error::Format(format!("bad seed {:?}", cols[1])))?;
        Ok(Self {
            beta: f(0)?,
            seed,
            mean_frr: f(2)?,
            mean_mcd_convert: f(3)?,
            mean_mcd_recon: f(4)?,
            loss_recon: f(5)?,
            loss_lat: f(6)?,
            loss_mi: f(7)?,
            loss_ce: f(8)?,
            loss_ae: f(9)?,
            loss_spc: f(10)?,
            zero_gate_frac: f(11)?,
        })
    }
}

/// Direction of a per-β mean across the sorted β grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trend {
    Increasing,
    Decreasing,
    NotMonotone,
}

impl Trend {
    fn of(values: &[f64]) -> Self {
        let pairs = values.windows(2);
        if values.len() >= 2 && pairs.clone().all(|w| w[1] > w[0]) {
            Trend::Increasing
        } else if values.len() >= 2 && pairs.clone().all(|w| w[1] < w[0]) {
            Trend::Decreasing
        } else {
            Trend::NotMonotone
        }
    }
}

impl fmt::Display for Trend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Trend::Increasing => "increasing",
            Trend::Decreasing => "decreasing",
            Trend::NotMonotone => "not monotone",
        })
    }
}

/// Seed-averaged metrics for one β.
#[derive(Clone, Debug, PartialEq)]
pub struct BetaSummary {
    pub beta: f64,
    pub runs: usize,
    pub mean_frr: f64,
    pub mean_mcd_convert: f64,
    pub mean_mcd_recon: f64,
    pub zero_gate_frac: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub betas: Vec<BetaSummary>,
    pub frr_trend: Trend,
    pub mcd_trend: Trend,
}

impl SweepReport {
    /// Header plus one line per row, `\n`-terminated.
    pub fn csv(&self) -> String {
        let mut out = format!("{SWEEP_CSV_HEADER}\n");
        for r in &self.rows {
            out.push_str(&r.to_csv_row());
            out.push('\n');
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for b in &self.betas {
            out.push_str(&format!(
                "beta {}: runs {} mean_frr {:.4} mean_mcd_convert {:.4} mean_mcd_recon {:.4} zero_gate_frac {:.4}\n",
                b.beta, b.runs, b.mean_frr, b.mean_mcd_convert, b.mean_mcd_recon, b.zero_gate_frac
            ));
        }
        out.push_str(&format!("FRR vs beta: {}\n", self.frr_trend));
        out.push_str(&format!("MCD vs beta: {}\n", self.mcd_trend));
        out
    }
}

/// Parses a CSV produced by [`SweepReport::csv`].
pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == SWEEP_CSV_HEADER => {}
        other => return Err(Error::Format(format!("unexpected sweep header {other:?}"))),
    }
    lines.map(SweepRow::from_csv_row).collect()
}

/// Sorts rows by β then seed, averages seeds per β and judges both trends.
pub fn aggregate_sweep(rows: &[SweepRow]) -> Result<SweepReport> {
    for r in rows {
        r.validate()?;
    }
    let mut rows = rows.to_vec();
    rows.sort_by(|a, b| a.beta.total_cmp(&b.beta).then(a.seed.cmp(&b.seed)));
    let mut betas: Vec<BetaSummary> = Vec::new();
    for group in rows.chunk_by(|a, b| a.beta.total_cmp(&b.beta) == Ordering::Equal) {
        let n = group.len() as f64;
        let mean = |f: fn(&SweepRow) -> f64| group.iter().map(f).sum::<f64>() / n;
        betas.push(BetaSummary {
            beta: group[0].beta,
            runs: group.len(),
            mean_frr: mean(|r| r.mean_frr),
            mean_mcd_convert: mean(|r| r.mean_mcd_convert),
            mean_mcd_recon: mean(|r| r.mean_mcd_recon),
            zero_gate_frac: mean(|r| r.zero_gate_frac),
        });
    }
    let frr: Vec<f64> = betas.iter().map(|b| b.mean_frr).collect();
    let mcd: Vec<f64> = betas.iter().map(|b| b.mean_mcd_convert).collect();
    Ok(SweepReport {
        rows,
        frr_trend: Trend::of(&frr),
        mcd_trend: Trend::of(&mcd),
        betas,
    })
}
