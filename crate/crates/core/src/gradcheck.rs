//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Gradients, ParamId, ParamStore, Tape, Var};
use crate::config::{ArchConfig, LossWeights};
use crate::error::Result;
use crate::model::Model;
use crate::moe::{GateMode, GateSet};
use crate::rng::{stream, stream_rng};
use crate::tensor::Tensor;
use crate::train::item_loss;
use rand::Rng as _;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// zero in exact arithmetic are compared absolutely.
    pub floor: f64,
    pub tolerance: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-2,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    /// `name[index]` of the checked scalar.
    pub path: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst: Option<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |w| w.rel_err)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tolerance
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares the tape gradient of `loss` against central differences for
/// every scalar of the selected parameters (all, when `params` is `None`).
///
/// `loss` must be deterministic: any randomness has to come from a
/// generator it seeds itself.
pub fn finite_diff_check<F>(
    store: &ParamStore<f64>,
    params: Option<&[ParamId]>,
    opts: GradCheckOptions,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<'_, f64>) -> Result<Var>,
{
    finite_diff_check_with(store, params, opts, &mut loss, |_| {})
}

/// Frozen parameter uses (see [`Tape::set_frozen`]) stay at the unperturbed
/// values while differencing, matching the stopped gradient the tape
/// computes for them.
///
/// As [`finite_diff_check`], with a hook that may tamper with the analytic
/// gradients before comparison (used to prove the checker can fail).
pub fn finite_diff_check_with<F, H>(
    store: &ParamStore<f64>,
    params: Option<&[ParamId]>,
    opts: GradCheckOptions,
    loss: &mut F,
    mut tamper: H,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<'_, f64>) -> Result<Var>,
    H: FnMut(&mut Gradients<f64>),
{
    let mut analytic = {
        let mut tape = Tape::new(store);
        let l = loss(&mut tape)?;
        tape.backward(l)?
    };
    tamper(&mut analytic);
    let ids: Vec<ParamId> = match params {
        Some(p) => p.to_vec(),
        None => store.ids().collect(),
    };
    let mut work = store.clone();
    let eval = |work: &ParamStore<f64>, loss: &mut F| -> Result<f64> {
        let mut tape = Tape::with_frozen_values(work, store);
        let l = loss(&mut tape)?;
        Ok(tape.scalar(l))
    };
    let mut report = GradCheckReport {
        checked: 0,
        worst: None,
        tolerance: opts.tolerance,
    };
    for id in ids {
        let grad = analytic.dense(id, store);
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + opts.step;
            let up = eval(&work, loss)?;
            work.get_mut(id).data_mut()[i] = orig - opts.step;
            let down = eval(&work, loss)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = grad.data()[i];
            let rel_err = relative_error(a, numeric, opts.floor);
            report.checked += 1;
            if report.worst.as_ref().is_none_or(|w| rel_err > w.rel_err) {
                report.worst = Some(GradCheckEntry {
                    path: format!("{}[{i}]", store.name(id)),
                    analytic: a,
                    numeric,
                    rel_err,
                });
            }
        }
    }
    Ok(report)
}

/// Small architecture used by [`full_suite`]: every network kind is
/// present, with few enough parameters to difference each one.
pub fn tiny_arch() -> ArchConfig {
    ArchConfig {
        dim: 6,
        speakers: 2,
        enc_channels: vec![2, 3],
        kernel: (3, 3),
        stride: (1, 2),
        pad: (1, 1),
        latent: 2,
        dec_channels: vec![2],
        cls_channels: vec![2],
        cls_kernel: (3, 3),
        cls_stride: (1, 2),
        cls_pad: (1, 1),
        moe: true,
        een_channels: vec![2],
        een_kernel: (3, 3),
        een_stride: (1, 2),
        een_pad: (1, 1),
        een_hidden: vec![3],
        embed: 3,
        den_state: 3,
        den_hidden: vec![3],
    }
}

/// One objective of the suite and its check.
#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: &'static str,
    pub report: GradCheckReport,
}

/// Finite-difference checks of every objective through the gated forward
/// of a 64-bit model whose fresh parameters are jittered off the zero
/// biases of the init (a ReLU fed only by zeros sits exactly on its kink): the VAE objective, the
/// classifier-augmented objective, the full objective with learned gates,
/// and the classifier-augmented objective under fixed gates with exact
/// zeros. `tamper`, when set, corrupts one analytic gradient entry so the
/// suite must fail.
pub fn full_suite(
    arch: &ArchConfig,
    frames: usize,
    seed: u64,
    opts: GradCheckOptions,
    tamper: bool,
) -> Result<Vec<SuiteCase>> {
    let mut model = Model::<f64>::new(arch.clone(), seed)?;
    let mut rng = stream_rng(seed, stream::CORPUS);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        for v in model.store.get_mut(id).data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let x = Tensor::new(
        vec![1, arch.dim, frames],
        (0..arch.dim * frames)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )?;
    let none = LossWeights {
        lambda_mi: 0.0,
        lambda_ce: 0.0,
        alpha: 0.0,
        beta: 0.0,
    };
    let acvae = LossWeights {
        lambda_mi: 1.0,
        lambda_ce: 1.0,
        ..none
    };
    let full = LossWeights {
        alpha: 1.0,
        beta: 0.5,
        ..acvae
    };
    let mut fixed = GateSet::<f64>::ones(&arch.gate_widths());
    for layer in &mut fixed.layers {
        for (i, g) in layer.iter_mut().enumerate() {
            *g = if i % 2 == 1 {
                0.0
            } else {
                0.5 + 0.25 * i as f64
            };
        }
    }
    let cases: Vec<(&'static str, LossWeights, GateMode<f64>)> = vec![
        ("vae", none, GateMode::Identity),
        ("acvae", acvae, GateMode::Identity),
        ("moe", full, GateMode::Learned),
        ("fixed-gates", acvae, GateMode::Fixed(fixed)),
    ];
    let first = model.store.ids().next();
    let mut out = Vec::new();
    for (name, w, mode) in cases {
        let mut loss = |tape: &mut Tape<'_, f64>| -> Result<Var> {
            let xv = tape.constant(x.clone());
            let mut r = stream_rng(seed, stream::REPARAM);
            Ok(item_loss(tape, &model, xv, 0, 1, &w, &mode, &mut r)?.total)
        };
        let report = finite_diff_check_with(&model.store, None, opts, &mut loss, |g| {
            if let (true, Some(id)) = (tamper, first) {
                if let Some(t) = g.get_mut(id) {
                    t.data_mut()[0] += 1.0;
                }
            }
        })?;
        out.push(SuiteCase { name, report });
    }
    Ok(out)
}
