//! Gated-convolution encoder/decoder with speaker-code conditioning.

use rand::Rng as _;

use crate::autodiff::{sample_reparam, ParamId, ParamStore, Tape, Var};
use crate::conv::ConvGeom;
use crate::error::{Error, Result};
use crate::features::SpeakerCode;
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

pub(crate) fn uniform<T: Real>(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("positive dims")
}

/// Plain convolution (or transposed convolution) plus per-channel bias.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub name: String,
    pub w: ParamId,
    pub b: ParamId,
    pub geom: ConvGeom,
    pub c_in: usize,
    pub c_out: usize,
    pub transpose: bool,
}

impl ConvLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        (c_in, c_out): (usize, usize),
        geom: ConvGeom,
        transpose: bool,
        rng: &mut Rng,
    ) -> Self {
        let bound = 1.0 / ((c_in * geom.kh * geom.kw) as f64).sqrt();
        let w = store.add(
            format!("{name}.w"),
            uniform(&[c_out, c_in, geom.kh, geom.kw], bound, rng),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[c_out]));
        Self {
            name: name.to_string(),
            w,
            b,
            geom,
            c_in,
            c_out,
            transpose,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, h: Var) -> Result<Var> {
        branch(tape, h, self.w, self.b, self.geom, self.transpose)
    }
}

fn branch<T: Real>(
    tape: &mut Tape<'_, T>,
    h: Var,
    w: ParamId,
    b: ParamId,
    geom: ConvGeom,
    transpose: bool,
) -> Result<Var> {
    let k = tape.param(w);
    let y = if transpose {
        tape.conv2d_transpose(h, k, geom)?
    } else {
        tape.conv2d(h, k, geom)?
    };
    let b = tape.param(b);
    tape.add_channel_bias(y, b)
}

/// `(W * h + b) ⊙ σ(V * h + d)`.
#[derive(Clone, Debug)]
pub struct GatedConvLayer {
    pub name: String,
    pub w: ParamId,
    pub v: ParamId,
    pub b: ParamId,
    pub d: ParamId,
    pub geom: ConvGeom,
    pub c_in: usize,
    pub c_out: usize,
    pub transpose: bool,
}

impl GatedConvLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        (c_in, c_out): (usize, usize),
        geom: ConvGeom,
        transpose: bool,
        rng: &mut Rng,
    ) -> Self {
        let bound = 1.0 / ((c_in * geom.kh * geom.kw) as f64).sqrt();
        let shape = [c_out, c_in, geom.kh, geom.kw];
        let w = store.add(format!("{name}.W"), uniform(&shape, bound, rng));
        let v = store.add(format!("{name}.V"), uniform(&shape, bound, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[c_out]));
        let d = store.add(format!("{name}.d"), Tensor::zeros(&[c_out]));
        Self {
            name: name.to_string(),
            w,
            v,
            b,
            d,
            geom,
            c_in,
            c_out,
            transpose,
        }
    }
}

pub fn glu_forward<T: Real>(tape: &mut Tape<'_, T>, layer: &GatedConvLayer, h: Var) -> Result<Var> {
    let c = tape.value(h).shape().first().copied().unwrap_or(0);
    if c != layer.c_in {
        return Err(Error::shape(
            "glu_forward",
            tape.value(h).shape(),
            &[layer.c_in],
        ));
    }
    let lin = branch(tape, h, layer.w, layer.b, layer.geom, layer.transpose)?;
    let pre = branch(tape, h, layer.v, layer.d, layer.geom, layer.transpose)?;
    let gate = tape.sigmoid(pre);
    tape.mul(lin, gate)
}

/// Appends the tiled code as extra channels after `h`.
pub fn concat_code<T: Real>(tape: &mut Tape<'_, T>, h: Var, code: &SpeakerCode) -> Result<Var> {
    let (_, q, n) = tape.value(h).dims3()?;
    let tile = tape.constant(code.tile(q, n));
    tape.concat_channels(h, tile)
}

/// Multiplies each output channel by its gate; an empty gate list is a no-op.
fn gate_output<T: Real>(tape: &mut Tape<'_, T>, h: Var, gate: Option<Var>) -> Result<Var> {
    match gate {
        Some(g) => tape.scale_channels(h, g),
        None => Ok(h),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LatentSeq {
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
}

/// How the encoder turns (mu, logvar) into z.
pub enum Sampling<'a> {
    Mean,
    Draw(&'a mut Rng),
}

#[derive(Clone, Debug)]
pub struct EncoderNet {
    pub layers: Vec<GatedConvLayer>,
    pub mu: ConvLayer,
    pub logvar: ConvLayer,
}

#[derive(Clone, Debug)]
pub struct DecoderNet {
    pub layers: Vec<GatedConvLayer>,
    pub out: ConvLayer,
}

/// Runs the encoder; `gates[l]`, when given, scales layer `l`'s output.
pub fn encode<T: Real>(
    tape: &mut Tape<'_, T>,
    enc: &EncoderNet,
    x: Var,
    gates: &[Var],
    sampling: Sampling<'_>,
) -> Result<LatentSeq> {
    let mut h = x;
    for (l, layer) in enc.layers.iter().enumerate() {
        h = glu_forward(tape, layer, h)?;
        h = gate_output(tape, h, gates.get(l).copied())?;
    }
    let mu = enc.mu.forward(tape, h)?;
    let logvar = enc.logvar.forward(tape, h)?;
    let z = match sampling {
        Sampling::Mean => mu,
        Sampling::Draw(rng) => sample_reparam(tape, mu, logvar, rng)?,
    };
    Ok(LatentSeq { mu, logvar, z })
}

/// Deterministic encoder path without the variance head.
pub fn encode_mean<T: Real>(
    tape: &mut Tape<'_, T>,
    enc: &EncoderNet,
    x: Var,
    gates: &[Var],
) -> Result<Var> {
    let mut h = x;
    for (l, layer) in enc.layers.iter().enumerate() {
        h = glu_forward(tape, layer, h)?;
        h = gate_output(tape, h, gates.get(l).copied())?;
    }
    enc.mu.forward(tape, h)
}

/// Runs the decoder with the code concatenated at every layer input.
pub fn decode<T: Real>(
    tape: &mut Tape<'_, T>,
    dec: &DecoderNet,
    z: Var,
    code: &SpeakerCode,
    gates: &[Var],
) -> Result<Var> {
    let mut h = z;
    for (l, layer) in dec.layers.iter().enumerate() {
        let hc = concat_code(tape, h, code)?;
        h = glu_forward(tape, layer, hc)?;
        h = gate_output(tape, h, gates.get(l).copied())?;
    }
    let hc = concat_code(tape, h, code)?;
    dec.out.forward(tape, hc)
}

#[derive(Clone, Copy, Debug)]
pub struct VaeTerms {
    pub recon: Var,
    pub lat: Var,
    pub total: Var,
}

/// `½·Σ(x − x̄)²` plus the KL of the posterior against N(0, I).
pub fn vae_terms<T: Real>(
    tape: &mut Tape<'_, T>,
    x: Var,
    xbar: Var,
    latent: &LatentSeq,
) -> Result<VaeTerms> {
    let count = tape.value(x).len();
    let mse = tape.mse(x, xbar)?;
    let recon = tape.scale(mse, T::lit(0.5 * count as f64));
    let lat = tape.kl_std_normal(latent.mu, latent.logvar)?;
    let total = tape.add(recon, lat)?;
    Ok(VaeTerms { recon, lat, total })
}

/// Encoder and decoder of the ungated base network.
#[derive(Clone, Debug)]
pub struct BaseNet {
    pub enc: EncoderNet,
    pub dec: DecoderNet,
}

impl BaseNet {
    /// Sampled forward pass and its VAE loss terms.
    pub fn vae_loss<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        code: &SpeakerCode,
        rng: &mut Rng,
    ) -> Result<(VaeTerms, Var)> {
        let latent = encode(tape, &self.enc, x, &[], Sampling::Draw(rng))?;
        let xbar = decode(tape, &self.dec, latent.z, code, &[])?;
        Ok((vae_terms(tape, x, xbar, &latent)?, xbar))
    }

    /// Decodes the posterior mean of `x` with the target code.
    pub fn convert<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        target: &SpeakerCode,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new(store);
        let xv = tape.constant(x.clone());
        let z = encode_mean(&mut tape, &self.enc, xv, &[])?;
        let out = decode(&mut tape, &self.dec, z, target, &[])?;
        Ok(tape.value(out).clone())
    }
}
