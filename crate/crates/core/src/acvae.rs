//! Auxiliary speaker classifier and the classifier-based loss terms.

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::gated_vae::ConvLayer;
use crate::moe::Affine;
use crate::tensor::{Real, Tensor};

/// Relu conv stack, mean over time, affine head to S logits.
#[derive(Clone, Debug)]
pub struct ClassifierNet {
    pub convs: Vec<ConvLayer>,
    pub head: Affine,
}

impl ClassifierNet {
    pub fn classify<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for c in &self.convs {
            let y = c.forward(tape, h)?;
            h = tape.relu(y);
        }
        let pooled = tape.time_mean(h)?;
        self.head.forward(tape, pooled)
    }

    /// Logits for a standalone feature map.
    pub fn logits<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new(store);
        let xv = tape.constant(x.clone());
        let out = self.classify(&mut tape, xv)?;
        Ok(tape.value(out).data().to_vec())
    }
}

/// Loss weights on the mutual-information and cross-entropy terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AcvaeWeights {
    pub lambda_mi: f64,
    pub lambda_ce: f64,
}

impl Default for AcvaeWeights {
    fn default() -> Self {
        Self {
            lambda_mi: 1.0,
            lambda_ce: 1.0,
        }
    }
}

impl AcvaeWeights {
    pub fn new(lambda_mi: f64, lambda_ce: f64) -> Result<Self> {
        for (name, v) in [("lambda_mi", lambda_mi), ("lambda_ce", lambda_ce)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Invalid(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(Self {
            lambda_mi,
            lambda_ce,
        })
    }
}

/// Classifier log-likelihood of each `(decoded, label)` pair, averaged.
/// Classifier parameters enter as constants, so only the decoded maps
/// receive gradient.
pub fn mi_term<T: Real>(
    tape: &mut Tape<'_, T>,
    cls: &ClassifierNet,
    pairs: &[(Var, usize)],
) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::Invalid(
            "mi_term needs at least one decoded map".into(),
        ));
    }
    let was = tape.set_frozen(true);
    let mut acc: Option<Var> = None;
    for &(decoded, label) in pairs {
        let logits = cls.classify(tape, decoded)?;
        let ce = tape.softmax_cross_entropy(logits, label)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, ce)?,
            None => ce,
        });
    }
    tape.set_frozen(was);
    Ok(tape.scale(acc.expect("nonempty"), T::lit(-1.0 / pairs.len() as f64)))
}

/// Cross-entropy of the classifier on real input; `x` must be a constant.
pub fn ce_term<T: Real>(
    tape: &mut Tape<'_, T>,
    cls: &ClassifierNet,
    x: Var,
    label: usize,
) -> Result<Var> {
    let logits = cls.classify(tape, x)?;
    tape.softmax_cross_entropy(logits, label)
}

/// `vae_total − λ_mi·mi + λ_ce·ce`; zero-weight terms are left out
/// entirely so the sum reduces exactly.
pub fn acvae_total_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    vae_total: Var,
    mi: Option<Var>,
    ce: Option<Var>,
    w: AcvaeWeights,
) -> Result<Var> {
    let mut total = vae_total;
    if let (Some(mi), true) = (mi, w.lambda_mi != 0.0) {
        let t = tape.scale(mi, T::lit(-w.lambda_mi));
        total = tape.add(total, t)?;
    }
    if let (Some(ce), true) = (ce, w.lambda_ce != 0.0) {
        let t = tape.scale(ce, T::lit(w.lambda_ce));
        total = tape.add(total, t)?;
    }
    Ok(total)
}
