//! Embedding networks and sparse gating networks that choose, per
//! utterance, which channels of each gated layer take part.

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::features::SpeakerCode;
use crate::gated_vae::{
    concat_code, decode, encode, uniform, BaseNet, ConvLayer, LatentSeq, Sampling,
};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// `W·x + b`.
#[derive(Clone, Debug)]
pub struct Affine {
    pub name: String,
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Affine {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut Rng,
    ) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self::with_init(store, name, input, output, bound, 0.0, rng)
    }

    pub fn with_init<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        bound: f64,
        bias: f64,
        rng: &mut Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), uniform(&[output, input], bound, rng));
        let b = store.add(format!("{name}.b"), Tensor::full(&[output], T::lit(bias)));
        Self {
            name: name.to_string(),
            w,
            b,
            input,
            output,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let y = tape.matvec(w, x)?;
        let b = tape.param(self.b);
        tape.add(y, b)
    }

    pub fn macs(&self) -> u64 {
        (self.input * self.output) as u64
    }
}

fn relu_stack<T: Real>(tape: &mut Tape<'_, T>, layers: &[Affine], mut h: Var) -> Result<Var> {
    for a in layers {
        let y = a.forward(tape, h)?;
        h = tape.relu(y);
    }
    Ok(h)
}

/// Single-layer gated recurrent cell. Without input weights it runs on
/// its state alone.
#[derive(Clone, Debug)]
pub struct Gru {
    pub input: usize,
    pub hidden: usize,
    wx: Option<[ParamId; 3]>,
    uh: [ParamId; 3],
    bx: [ParamId; 3],
    bhn: ParamId,
}

impl Gru {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let gates = ["r", "u", "n"];
        let wx = (input > 0).then(|| {
            gates.map(|g| {
                store.add(
                    format!("{name}.wx_{g}"),
                    uniform(&[hidden, input], bound, rng),
                )
            })
        });
        let uh = gates.map(|g| {
            store.add(
                format!("{name}.uh_{g}"),
                uniform(&[hidden, hidden], bound, rng),
            )
        });
        let bx = gates.map(|g| store.add(format!("{name}.b_{g}"), Tensor::zeros(&[hidden])));
        let bhn = store.add(format!("{name}.bh_n"), Tensor::zeros(&[hidden]));
        Self {
            input,
            hidden,
            wx,
            uh,
            bx,
            bhn,
        }
    }

    /// Multiply-accumulates per step.
    pub fn step_macs(&self) -> u64 {
        3 * (self.hidden * (self.input + self.hidden)) as u64
    }

    fn pre<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Option<Var>,
        h: Var,
        g: usize,
    ) -> Result<(Var, Var)> {
        let u = tape.param(self.uh[g]);
        let uh = tape.matvec(u, h)?;
        let b = tape.param(self.bx[g]);
        let xb = match (x, self.wx) {
            (Some(x), Some(wx)) => {
                let w = tape.param(wx[g]);
                let wx = tape.matvec(w, x)?;
                tape.add(wx, b)?
            }
            (None, None) => b,
            _ => {
                return Err(Error::Invalid(
                    "recurrent cell input does not match its configuration".into(),
                ))
            }
        };
        Ok((xb, uh))
    }

    /// `h' = n + u ⊙ (h − n)` with reset gate r, update gate u and
    /// candidate `n = tanh(W_n x + b_n + r ⊙ (U_n h + b_hn))`.
    pub fn step<T: Real>(&self, tape: &mut Tape<'_, T>, x: Option<Var>, h: Var) -> Result<Var> {
        let (xr, hr) = self.pre(tape, x, h, 0)?;
        let r = tape.add(xr, hr)?;
        let r = tape.sigmoid(r);
        let (xu, hu) = self.pre(tape, x, h, 1)?;
        let u = tape.add(xu, hu)?;
        let u = tape.sigmoid(u);
        let (xn, hn) = self.pre(tape, x, h, 2)?;
        let bhn = tape.param(self.bhn);
        let hn = tape.add(hn, bhn)?;
        let rn = tape.mul(r, hn)?;
        let n = tape.add(xn, rn)?;
        let n = tape.tanh(n);
        let d = tape.sub(h, n)?;
        let ud = tape.mul(u, d)?;
        tape.add(n, ud)
    }
}

/// Encoder embedding network over the code-tiled input.
#[derive(Clone, Debug)]
pub struct Een {
    pub convs: Vec<ConvLayer>,
    pub affines: Vec<Affine>,
}

/// Decoder embedding network: a recurrent sequence autoencoder over z
/// whose final state, joined with the target code, feeds an affine stack.
#[derive(Clone, Debug)]
pub struct Den {
    pub enc: Gru,
    pub dec: Gru,
    pub out: Affine,
    pub head: Vec<Affine>,
}

/// One affine map per gated layer.
#[derive(Clone, Debug)]
pub struct Sgn {
    pub enc: Vec<Affine>,
    pub dec: Vec<Affine>,
}

#[derive(Clone, Debug)]
pub struct MoeNets {
    pub een: Een,
    pub den: Den,
    pub sgn: Sgn,
}

pub fn een_embed<T: Real>(
    tape: &mut Tape<'_, T>,
    een: &Een,
    x: Var,
    source: &SpeakerCode,
) -> Result<Var> {
    let mut h = concat_code(tape, x, source)?;
    for c in &een.convs {
        let y = c.forward(tape, h)?;
        h = tape.relu(y);
    }
    let pooled = tape.time_mean(h)?;
    relu_stack(tape, &een.affines, pooled)
}

/// Final recurrent state after reading z one time step at a time.
pub fn den_state<T: Real>(tape: &mut Tape<'_, T>, den: &Den, z: Var) -> Result<Var> {
    let (_, _, n) = tape.value(z).dims3()?;
    let mut h = tape.constant(Tensor::zeros(&[den.enc.hidden]));
    for t in 0..n {
        let x = tape.time_step(z, t)?;
        h = den.enc.step(tape, Some(x), h)?;
    }
    Ok(h)
}

pub fn den_head<T: Real>(
    tape: &mut Tape<'_, T>,
    den: &Den,
    state: Var,
    target: &SpeakerCode,
) -> Result<Var> {
    let c = tape.constant(target.vector());
    let h = tape.concat_vec(state, c)?;
    relu_stack(tape, &den.head, h)
}

/// Mean squared error of the sequence decoder's reconstruction of z.
pub fn den_ae_loss<T: Real>(tape: &mut Tape<'_, T>, den: &Den, state: Var, z: Var) -> Result<Var> {
    let (_, _, n) = tape.value(z).dims3()?;
    let mut h = state;
    let mut acc: Option<Var> = None;
    for t in 0..n {
        h = den.dec.step(tape, None, h)?;
        let y = den.out.forward(tape, h)?;
        let target = tape.time_step(z, t)?;
        let e = tape.mse(y, target)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, e)?,
            None => e,
        });
    }
    Ok(tape.scale(acc.expect("at least one step"), T::lit(1.0 / n as f64)))
}

/// `(e_dec, L_ae)`; the source speaker is deliberately not an input.
pub fn den_embed<T: Real>(
    tape: &mut Tape<'_, T>,
    den: &Den,
    z: Var,
    target: &SpeakerCode,
) -> Result<(Var, Var)> {
    let state = den_state(tape, den, z)?;
    let e = den_head(tape, den, state, target)?;
    let ae = den_ae_loss(tape, den, state, z)?;
    Ok((e, ae))
}

pub fn sgn_gates<T: Real>(tape: &mut Tape<'_, T>, map: &Affine, e: Var) -> Result<Var> {
    let y = map.forward(tape, e)?;
    Ok(tape.relu(y))
}

pub fn apply_gates<T: Real>(tape: &mut Tape<'_, T>, h: Var, g: Var) -> Result<Var> {
    tape.scale_channels(h, g)
}

/// Per gated layer gate vectors, encoder layers first.
#[derive(Clone, Debug, PartialEq)]
pub struct GateSet<T> {
    pub layers: Vec<Vec<T>>,
}

impl<T: Real> GateSet<T> {
    pub fn new(layers: Vec<Vec<T>>) -> Result<Self> {
        for (l, g) in layers.iter().enumerate() {
            if g.iter().any(|v| *v < T::zero() || !v.is_finite()) {
                return Err(Error::Invalid(format!(
                    "gate layer {l} has a negative or non-finite entry"
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn ones(widths: &[usize]) -> Self {
        Self {
            layers: widths.iter().map(|&w| vec![T::one(); w]).collect(),
        }
    }

    pub fn from_tape(tape: &Tape<'_, T>, gates: &[Var]) -> Self {
        Self {
            layers: gates
                .iter()
                .map(|&g| tape.value(g).data().to_vec())
                .collect(),
        }
    }

    pub fn entries(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn zero_count(&self) -> usize {
        self.layers
            .iter()
            .flatten()
            .filter(|v| **v == T::zero())
            .count()
    }

    pub fn zero_fraction(&self) -> f64 {
        self.zero_count() as f64 / self.entries().max(1) as f64
    }

    /// Mean absolute gate value over every entry of every layer.
    pub fn l_spc(&self) -> f64 {
        let s: f64 = self.layers.iter().flatten().map(|v| v.as_f64().abs()).sum();
        s / self.entries().max(1) as f64
    }
}

/// Where the gates of a forward pass come from.
#[derive(Clone, Debug)]
pub enum GateMode<T> {
    /// Computed by the embedding and gating networks.
    Learned,
    /// No gating: the plain base network.
    Identity,
    /// Caller-supplied constants, encoder layers first.
    Fixed(GateSet<T>),
}

/// Everything one gated forward pass produces.
#[derive(Clone, Debug)]
pub struct MoeForward {
    pub output: Var,
    pub latent: LatentSeq,
    pub enc_gates: Vec<Var>,
    pub dec_gates: Vec<Var>,
    pub den_state: Option<Var>,
}

impl MoeForward {
    pub fn gates(&self) -> Vec<Var> {
        self.enc_gates
            .iter()
            .chain(&self.dec_gates)
            .copied()
            .collect()
    }
}

fn fixed_gates<T: Real>(
    tape: &mut Tape<'_, T>,
    set: &GateSet<T>,
    range: std::ops::Range<usize>,
) -> Result<Vec<Var>> {
    range
        .map(|l| {
            let g = set
                .layers
                .get(l)
                .ok_or_else(|| Error::Invalid(format!("gate set has no layer {l}")))?;
            Ok(tape.constant(Tensor::vector(g.clone())))
        })
        .collect()
}

fn need(moe: Option<&MoeNets>) -> Result<&MoeNets> {
    moe.ok_or_else(|| {
        Error::Model("learned gating requested on a model without gating networks".into())
    })
}

/// Encoder half of the gated forward pass.
pub fn moe_encode<T: Real>(
    tape: &mut Tape<'_, T>,
    base: &BaseNet,
    moe: Option<&MoeNets>,
    x: Var,
    source: &SpeakerCode,
    mode: &GateMode<T>,
    sampling: Sampling<'_>,
) -> Result<(LatentSeq, Vec<Var>)> {
    let gates = match mode {
        GateMode::Identity => Vec::new(),
        GateMode::Fixed(set) => fixed_gates(tape, set, 0..base.enc.layers.len())?,
        GateMode::Learned => {
            let m = need(moe)?;
            let e = een_embed(tape, &m.een, x, source)?;
            m.sgn
                .enc
                .iter()
                .map(|a| sgn_gates(tape, a, e))
                .collect::<Result<_>>()?
        }
    };
    let latent = encode(tape, &base.enc, x, &gates, sampling)?;
    Ok((latent, gates))
}

/// Decoder half; `state` is the DEN state of z (required in learned mode).
pub fn moe_decode<T: Real>(
    tape: &mut Tape<'_, T>,
    base: &BaseNet,
    moe: Option<&MoeNets>,
    z: Var,
    state: Option<Var>,
    target: &SpeakerCode,
    mode: &GateMode<T>,
) -> Result<(Var, Vec<Var>)> {
    let n_enc = base.enc.layers.len();
    let gates = match mode {
        GateMode::Identity => Vec::new(),
        GateMode::Fixed(set) => fixed_gates(tape, set, n_enc..n_enc + base.dec.layers.len())?,
        GateMode::Learned => {
            let m = need(moe)?;
            let state = state.ok_or_else(|| {
                Error::Invalid("learned decoder gates need the latent state".into())
            })?;
            let e = den_head(tape, &m.den, state, target)?;
            m.sgn
                .dec
                .iter()
                .map(|a| sgn_gates(tape, a, e))
                .collect::<Result<_>>()?
        }
    };
    let out = decode(tape, &base.dec, z, target, &gates)?;
    Ok((out, gates))
}

/// Full gated pass. Reconstruction is `target == source`.
#[allow(clippy::too_many_arguments)]
pub fn moe_forward<T: Real>(
    tape: &mut Tape<'_, T>,
    base: &BaseNet,
    moe: Option<&MoeNets>,
    x: Var,
    source: &SpeakerCode,
    target: &SpeakerCode,
    mode: &GateMode<T>,
    sampling: Sampling<'_>,
) -> Result<MoeForward> {
    let (latent, enc_gates) = moe_encode(tape, base, moe, x, source, mode, sampling)?;
    let den_state = match mode {
        GateMode::Learned => Some(den_state(tape, &need(moe)?.den, latent.z)?),
        _ => None,
    };
    let (output, dec_gates) = moe_decode(tape, base, moe, latent.z, den_state, target, mode)?;
    Ok(MoeForward {
        output,
        latent,
        enc_gates,
        dec_gates,
        den_state,
    })
}

/// Mean absolute value over all entries of the given gate vectors.
pub fn l_spc<T: Real>(tape: &mut Tape<'_, T>, gates: &[Var]) -> Result<Var> {
    let (&first, rest) = gates
        .split_first()
        .ok_or_else(|| Error::Invalid("l_spc needs at least one gate vector".into()))?;
    let mut all = first;
    for &g in rest {
        all = tape.concat_vec(all, g)?;
    }
    Ok(tape.l1_mean(all))
}

/// `base + α·L_ae + β·L_spc`, leaving out zero-weight terms.
pub fn moe_total_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    base: Var,
    ae: Option<Var>,
    spc: Option<Var>,
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    let mut total = base;
    for (term, w) in [(ae, alpha), (spc, beta)] {
        if let (Some(t), true) = (term, w != 0.0) {
            let s = tape.scale(t, T::lit(w));
            total = tape.add(total, s)?;
        }
    }
    Ok(total)
}
