//! Minibatch training of the full objective.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::acvae::{acvae_total_loss, ce_term, mi_term, AcvaeWeights};
use crate::autodiff::{Gradients, Tape, Var};
use crate::config::{LossWeights, RunConfig};
use crate::error::{Error, Result};
use crate::features::{sample_training_segment, Corpus, FeatureSeq, Split, StandardizationStats};
use crate::gated_vae::{vae_terms, Sampling};
use crate::model::Model;
use crate::moe::{
    den_ae_loss, den_state, l_spc, moe_decode, moe_encode, moe_total_loss, GateMode, GateSet,
};
use crate::optim::AdamState;
use crate::rng::{stream, stream_rng, Rng};
use crate::tensor::{Real, Tensor};

/// Tape handles of every loss term of one training item.
#[derive(Clone, Debug)]
pub struct ItemLoss {
    pub total: Var,
    pub recon: Var,
    pub lat: Var,
    pub mi: Option<Var>,
    pub ce: Option<Var>,
    pub ae: Option<Var>,
    pub spc: Option<Var>,
    pub gates: Vec<Var>,
    pub output: Var,
}

/// Builds the full objective for one segment `x` of speaker `source`.
/// `target` labels the conversion branch of the information term.
#[allow(clippy::too_many_arguments)]
pub fn item_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    model: &Model<T>,
    x: Var,
    source: usize,
    target: usize,
    w: &LossWeights,
    mode: &GateMode<T>,
    rng: &mut Rng,
) -> Result<ItemLoss> {
    let base = &model.base;
    let moe = model.moe.as_ref();
    let cs = model.code(source)?;
    let (latent, enc_gates) = moe_encode(tape, base, moe, x, &cs, mode, Sampling::Draw(rng))?;
    let learned = matches!(mode, GateMode::Learned);
    let state = if learned {
        Some(den_state(tape, &moe.expect("learned mode").den, latent.z)?)
    } else {
        None
    };
    let (xbar, dec_gates) = moe_decode(tape, base, moe, latent.z, state, &cs, mode)?;
    let vae = vae_terms(tape, x, xbar, &latent)?;
    let mi = if w.lambda_mi != 0.0 {
        let ct = model.code(target)?;
        let (xhat, _) = moe_decode(tape, base, moe, latent.z, state, &ct, mode)?;
        Some(mi_term(
            tape,
            &model.cls,
            &[(xbar, source), (xhat, target)],
        )?)
    } else {
        None
    };
    let ce = if w.lambda_ce != 0.0 {
        Some(ce_term(tape, &model.cls, x, source)?)
    } else {
        None
    };
    let acw = AcvaeWeights::new(w.lambda_mi, w.lambda_ce)?;
    let base_total = acvae_total_loss(tape, vae.total, mi, ce, acw)?;
    let gates: Vec<Var> = enc_gates.into_iter().chain(dec_gates).collect();
    let (ae, spc) = if learned {
        let den = &moe.expect("learned mode").den;
        let ae = den_ae_loss(tape, den, state.expect("learned mode"), latent.z)?;
        (Some(ae), Some(l_spc(tape, &gates)?))
    } else {
        (None, None)
    };
    let total = moe_total_loss(tape, base_total, ae, spc, w.alpha, w.beta)?;
    Ok(ItemLoss {
        total,
        recon: vae.recon,
        lat: vae.lat,
        mi,
        ce,
        ae,
        spc,
        gates,
        output: xbar,
    })
}

/// Mean loss terms over one epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub recon: f64,
    pub recon_mse: f64,
    pub lat: f64,
    pub mi: f64,
    pub ce: f64,
    pub ae: f64,
    pub spc: f64,
    pub zero_gate_frac: f64,
}

pub const EPOCH_CSV_HEADER: &str = "epoch,total,recon,recon_mse,lat,mi,ce,ae,spc,zero_gate_frac";

impl EpochLog {
    pub fn to_csv_row(&self) -> String {
        let mut s = self.epoch.to_string();
        for v in [
            self.total,
            self.recon,
            self.recon_mse,
            self.lat,
            self.mi,
            self.ce,
            self.ae,
            self.spc,
            self.zero_gate_frac,
        ] {
            let _ = write!(s, ",{v:?}");
        }
        s
    }

    pub fn from_csv_row(row: &str) -> Result<Self> {
        let f: Vec<&str> = row.trim_end().split(',').collect();
        if f.len() != 10 {
            return Err(Error::Format(format!(
                "epoch row needs 10 fields, found {}",
                f.len()
            )));
        }
        let bad = |i: usize| Error::Format(format!("epoch row field {} is malformed", i + 1));
        let v: Vec<f64> = f[1..]
            .iter()
            .enumerate()
            .map(|(i, x)| x.parse().map_err(|_| bad(i + 1)))
            .collect::<Result<_>>()?;
        Ok(Self {
            epoch: f[0].parse().map_err(|_| bad(0))?,
            total: v[0],
            recon: v[1],
            recon_mse: v[2],
            lat: v[3],
            mi: v[4],
            ce: v[5],
            ae: v[6],
            spc: v[7],
            zero_gate_frac: v[8],
        })
    }
}

/// Training state for one run.
pub struct Trainer<T: Real> {
    pub model: Model<T>,
    pub config: RunConfig,
    pub mode: GateMode<T>,
    adam: AdamState<T>,
    data: Vec<FeatureSeq>,
    segments: Rng,
    reparam: Rng,
    targets: Rng,
    epoch: usize,
}

impl<T: Real> Trainer<T> {
    /// Standardizes the training split and initializes a model for its
    /// speakers. `model`, when given, continues from existing parameters.
    pub fn new(corpus: &Corpus, config: RunConfig, model: Option<Model<T>>) -> Result<Self> {
        let mut arch = config.arch.clone();
        if arch.dim != corpus.dim() {
            return Err(Error::Corpus(format!(
                "corpus has {}-dimensional features, config expects {}",
                corpus.dim(),
                arch.dim
            )));
        }
        let s = corpus.speakers.len();
        if arch.speakers != 0 && arch.speakers != s {
            return Err(Error::Corpus(format!(
                "corpus has {s} speakers, config expects {}",
                arch.speakers
            )));
        }
        arch.speakers = s;
        let train: Vec<&FeatureSeq> = corpus.split(Split::Train).map(|u| &u.seq).collect();
        let stats = match &model {
            Some(m) => m
                .stats
                .clone()
                .ok_or_else(|| Error::Model("model has no standardization stats".into()))?,
            None => StandardizationStats::compute(train.iter().copied())?,
        };
        let data = train
            .iter()
            .map(|s| stats.standardize(s))
            .collect::<Result<Vec<_>>>()?;
        let model = match model {
            Some(m) => {
                if m.arch != arch {
                    return Err(Error::Model(
                        "model architecture differs from the config".into(),
                    ));
                }
                if m.speakers != corpus.speakers {
                    return Err(Error::Corpus(
                        "model speakers differ from the corpus speakers".into(),
                    ));
                }
                m
            }
            None => {
                let mut m = Model::new(arch, config.train.seed)?;
                m.speakers = corpus.speakers.clone();
                m.stats = Some(stats);
                m
            }
        };
        let mode = if model.moe.is_some() {
            GateMode::Learned
        } else {
            GateMode::Identity
        };
        Self::from_parts(model, config, data, mode)
    }

    /// Trainer over already standardized sequences.
    pub fn from_parts(
        model: Model<T>,
        config: RunConfig,
        data: Vec<FeatureSeq>,
        mode: GateMode<T>,
    ) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::Corpus("no training utterances".into()));
        }
        let seed = config.train.seed;
        Ok(Self {
            adam: AdamState::new(config.optim, &model.store)?,
            model,
            mode,
            data,
            segments: stream_rng(seed, stream::SEGMENTS),
            reparam: stream_rng(seed, stream::REPARAM),
            targets: stream_rng(seed, stream::TARGET_CODES),
            config,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One pass over every training utterance, one random segment each.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let len = self.config.train.segment;
        let s = self.model.arch.speakers;
        let mut items = Vec::with_capacity(self.data.len());
        for seq in &self.data {
            let seg = sample_training_segment(seq, len, &mut self.segments)?;
            items.push((seg.to_map::<T>(), seq.speaker_id));
        }
        items.shuffle(&mut self.segments);
        self.epoch += 1;
        let mut log = EpochLog {
            epoch: self.epoch,
            ..EpochLog::default()
        };
        let (mut zeros, mut entries) = (0usize, 0usize);
        for (b, batch) in items.chunks(self.config.train.batch).enumerate() {
            let mut grads = Gradients::zeros_like(&self.model.store);
            for (x, src) in batch {
                let target = self.targets.random_range(0..s);
                let mut tape = Tape::new(&self.model.store);
                let xv = tape.constant(x.clone());
                let l = item_loss(
                    &mut tape,
                    &self.model,
                    xv,
                    *src,
                    target,
                    &self.config.weights,
                    &self.mode,
                    &mut self.reparam,
                )?;
                let total = tape.scalar(l.total).as_f64();
                if !total.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at epoch {} batch {}",
                        self.epoch,
                        b + 1
                    )));
                }
                let get = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v).as_f64());
                log.total += total;
                log.recon += tape.scalar(l.recon).as_f64();
                log.recon_mse += tape.scalar(l.recon).as_f64() * 2.0 / x.len() as f64;
                log.lat += tape.scalar(l.lat).as_f64();
                log.mi += get(l.mi);
                log.ce += get(l.ce);
                log.ae += get(l.ae);
                log.spc += get(l.spc);
                let gs = GateSet::from_tape(&tape, &l.gates);
                zeros += gs.zero_count();
                entries += gs.entries();
                grads.accumulate(&tape.backward(l.total)?);
            }
            grads.scale(T::one() / T::lit(batch.len() as f64));
            if !grads.all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at epoch {} batch {}",
                    self.epoch,
                    b + 1
                )));
            }
            self.adam.step(&mut self.model.store, &grads);
        }
        let n = items.len() as f64;
        for v in [
            &mut log.total,
            &mut log.recon,
            &mut log.recon_mse,
            &mut log.lat,
            &mut log.mi,
            &mut log.ce,
            &mut log.ae,
            &mut log.spc,
        ] {
            *v /= n;
        }
        log.zero_gate_frac = if entries == 0 {
            0.0
        } else {
            zeros as f64 / entries as f64
        };
        Ok(log)
    }

    /// Runs the configured number of epochs. After every epoch the model is
    /// written to `checkpoint`, so a numeric failure leaves the last good
    /// parameters on disk.
    pub fn run(
        &mut self,
        checkpoint: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        for _ in 0..self.config.train.epochs {
            match self.run_epoch() {
                Ok(log) => {
                    on_epoch(&log);
                    logs.push(log);
                    if let Some(p) = checkpoint {
                        self.model.save(p)?;
                    }
                }
                Err(Error::Numeric(msg)) => {
                    let kept = checkpoint.map(PathBuf::from).filter(|p| p.exists());
                    return Err(Error::Numeric(match kept {
                        Some(p) => format!("{msg}; last good checkpoint kept at {}", p.display()),
                        None => format!("{msg}; no checkpoint was written"),
                    }));
                }
                Err(e) => return Err(e),
            }
        }
        Ok(logs)
    }
}

/// Input map of a standardized sequence, padded by repeating its last
/// frame up to a multiple of `factor`.
pub fn padded_map<T: Real>(seq: &FeatureSeq, factor: usize) -> Tensor<T> {
    let t = seq.len();
    let n = t.div_ceil(factor) * factor;
    let d = seq.dim();
    let mut data = vec![T::zero(); d * n];
    for q in 0..d {
        for i in 0..n {
            data[q * n + i] = T::lit(seq.frame(i.min(t - 1))[q] as f64);
        }
    }
    Tensor::new(vec![1, d, n], data).expect("nonempty sequence")
}

/// Drops padded frames added by [`padded_map`].
pub fn crop_map<T: Real>(map: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
    let (c, q, n) = map.dims3()?;
    if t > n {
        return Err(Error::shape("crop_map", map.shape(), &[c, q, t]));
    }
    let mut data = Vec::with_capacity(c * q * t);
    for row in map.data().chunks(n) {
        data.extend_from_slice(&row[..t]);
    }
    Tensor::new(vec![c, q, t], data)
}
