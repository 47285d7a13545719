//! β sweeps: one trained model per (β, seed), scored on the eval split.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::features::Corpus;
use crate::metrics::SweepRow;
use crate::model::Model;
use crate::train::{EpochLog, Trainer};

/// Trains one model with `loss.beta = beta` and `train.seed = seed`.
pub fn run_one(
    corpus: &Corpus,
    config: &RunConfig,
    beta: f64,
    seed: u64,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(SweepRow, Model<f32>)> {
    let mut cfg = config.clone();
    cfg.weights.beta = beta;
    cfg.train.seed = seed;
    let mut trainer = Trainer::<f32>::new(corpus, cfg, None)?;
    let logs = trainer.run(None, on_epoch)?;
    let last = logs
        .last()
        .ok_or_else(|| Error::Invalid("sweep runs need at least one epoch".into()))?;
    let eval = evaluate(&trainer.model, corpus)?;
    let row = SweepRow {
        beta,
        seed,
        mean_frr: eval.mean_frr,
        mean_mcd_convert: eval.mean_mcd_convert,
        mean_mcd_recon: eval.mean_mcd_recon,
        loss_recon: last.recon,
        loss_lat: last.lat,
        loss_mi: last.mi,
        loss_ce: last.ce,
        loss_ae: last.ae,
        loss_spc: last.spc,
        zero_gate_frac: last.zero_gate_frac,
    };
    row.validate()?;
    Ok((row, trainer.model))
}

/// Every (β, seed) pair, run one after another. `on_row` sees each finished row.
pub fn run_sweep(
    corpus: &Corpus,
    config: &RunConfig,
    betas: &[f64],
    seeds: &[u64],
    mut on_row: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    if betas.is_empty() || seeds.is_empty() {
        return Err(Error::Invalid(
            "sweep needs at least one beta and one seed".into(),
        ));
    }
    let mut rows = Vec::with_capacity(betas.len() * seeds.len());
    for &beta in betas {
        for &seed in seeds {
            let (row, _) = run_one(corpus, config, beta, seed, |_| {})?;
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}
