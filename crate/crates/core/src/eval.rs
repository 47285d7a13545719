//! Utterance conversion and eval-split scoring.

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::features::{Corpus, FeatureSeq, SpeakerCode, Split};
use crate::gated_vae::Sampling;
use crate::metrics::mcd;
use crate::model::Model;
use crate::moe::{moe_forward, GateMode, GateSet};
use crate::sparse::{count_flops_sparse, frr, plan_gates, sparse_forward, FlopLedger, FrrReport};
use crate::tensor::{Real, Tensor};
use crate::train::{crop_map, padded_map};

/// Which forward implementation produces the output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Engine {
    /// Skip plan: only live channels are computed.
    Sparse,
    /// Full tape forward with gates multiplied in.
    Dense,
}

#[derive(Clone, Debug)]
pub struct Conversion<T> {
    /// Destandardized output, cropped to the input length.
    pub seq: FeatureSeq,
    pub gates: GateSet<T>,
    /// For [`Engine::Dense`] the ledger is the analytic count of the skip
    /// plan the gates imply.
    pub ledger: FlopLedger,
    pub report: FrrReport,
}

/// Tape forward of a standardized 1×Q×N map with gates multiplied in.
/// The ledger is the analytic count of the skip plan the gates imply.
pub fn dense_forward<T: Real>(
    model: &Model<T>,
    x: &Tensor<T>,
    source: &SpeakerCode,
    target: &SpeakerCode,
    mode: &GateMode<T>,
) -> Result<(Tensor<T>, GateSet<T>, FlopLedger)> {
    let n = x.dims3()?.2;
    let mut tape = Tape::new(&model.store);
    let xv = tape.constant(x.clone());
    let f = moe_forward(
        &mut tape,
        &model.base,
        model.moe.as_ref(),
        xv,
        source,
        target,
        mode,
        Sampling::Mean,
    )?;
    let gv = f.gates();
    let gates = if gv.is_empty() {
        GateSet::ones(&model.arch.gate_widths())
    } else {
        GateSet::from_tape(&tape, &gv)
    };
    let ledger = count_flops_sparse(&plan_gates(&gates, &model.arch)?, &model.arch, n)?;
    Ok((tape.value(f.output).clone(), gates, ledger))
}

/// Gate mode a model runs with at inference.
pub fn inference_mode<T: Real>(model: &Model<T>) -> GateMode<T> {
    if model.moe.is_some() {
        GateMode::Learned
    } else {
        GateMode::Identity
    }
}

/// Converts a raw (unstandardized) sequence from speaker index `source` to
/// `target` using the posterior mean.
pub fn convert<T: Real>(
    model: &Model<T>,
    seq: &FeatureSeq,
    source: usize,
    target: usize,
    mode: &GateMode<T>,
    engine: Engine,
) -> Result<Conversion<T>> {
    let stats = model
        .stats
        .as_ref()
        .ok_or_else(|| Error::Model("model has no standardization stats".into()))?;
    let x = padded_map::<T>(&stats.standardize(seq)?, model.arch.time_factor());
    let (src, tgt) = (model.code(source)?, model.code(target)?);
    let (out, gates, ledger) = match engine {
        Engine::Sparse => {
            let r = sparse_forward(model, &x, &src, &tgt, mode)?;
            (r.output, r.gates, r.ledger)
        }
        Engine::Dense => dense_forward(model, &x, &src, &tgt, mode)?,
    };
    let out = seq.from_map(&crop_map(&out, seq.len())?)?;
    let report = frr(&ledger, &gates, &seq.utterance_id);
    Ok(Conversion {
        seq: stats.destandardize(&out)?,
        gates,
        ledger,
        report,
    })
}

/// Eval-split averages: FRR and MCD over every conversion to another
/// speaker that has a parallel utterance, and MCD of self-reconstruction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalSummary {
    pub mean_frr: f64,
    pub mean_mcd_convert: f64,
    pub mean_mcd_recon: f64,
    pub conversions: usize,
    pub reconstructions: usize,
}

pub fn evaluate<T: Real>(model: &Model<T>, corpus: &Corpus) -> Result<EvalSummary> {
    let mode = inference_mode(model);
    let mut s = EvalSummary::default();
    for u in corpus.split(Split::Eval) {
        let src = model.speaker_index(&corpus.speakers[u.speaker_index])?;
        let rec = convert(model, &u.seq, src, src, &mode, Engine::Sparse)?;
        s.mean_mcd_recon += mcd(&rec.seq, &u.seq)?.mcd_db;
        s.reconstructions += 1;
        for (t, id) in corpus.speakers.iter().enumerate() {
            if t == u.speaker_index {
                continue;
            }
            let Some(reference) = corpus.parallel_of(u, t) else {
                continue;
            };
            let c = convert(
                model,
                &u.seq,
                src,
                model.speaker_index(id)?,
                &mode,
                Engine::Sparse,
            )?;
            s.mean_mcd_convert += mcd(&c.seq, &reference.seq)?.mcd_db;
            s.mean_frr += c.report.frr;
            s.conversions += 1;
        }
    }
    if s.conversions == 0 || s.reconstructions == 0 {
        return Err(Error::Corpus(
            "eval split has no parallel utterance pairs".into(),
        ));
    }
    s.mean_frr /= s.conversions as f64;
    s.mean_mcd_convert /= s.conversions as f64;
    s.mean_mcd_recon /= s.reconstructions as f64;
    Ok(s)
}
