//! Skip-plan inference and exact multiply-accumulate accounting.
//!
//! A channel whose gate is exactly 0.0 is never computed: neither GLU
//! branch of that output channel runs, and the next layer does not read it.
//! The same convolution kernels serve the dense training path, so a plan
//! with every channel active reproduces the dense result bit for bit.

use std::fmt::Write as _;

use crate::autodiff::Tape;
use crate::config::ArchConfig;
use crate::conv::{conv2d_forward, conv2d_transpose_forward, ConvDims};
use crate::error::{Error, Result};
use crate::features::SpeakerCode;
use crate::gated_vae::{ConvLayer, GatedConvLayer};
use crate::model::{LayerShape, Model};
use crate::moe::{den_head, den_state, een_embed, sgn_gates, GateMode, GateSet};
use crate::tensor::{sigmoid, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerPlan {
    pub name: String,
    pub active_in: Vec<usize>,
    pub active_out: Vec<usize>,
}

/// Active channel lists for every base layer on the conversion path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GatePlan {
    pub layers: Vec<LayerPlan>,
}

/// Live channels of every layer: an output channel is live iff its gate is
/// strictly positive; a layer reads the previous layer's live outputs plus
/// all of its code channels.
pub fn plan_gates<T: Real>(gates: &GateSet<T>, arch: &ArchConfig) -> Result<GatePlan> {
    let shapes = arch.base_layers(arch.time_factor())?;
    let n_gated = shapes.iter().filter(|s| s.gate.is_some()).count();
    if gates.layers.len() != n_gated {
        return Err(Error::Invalid(format!(
            "gate set has {} layers, model has {n_gated} gated layers",
            gates.layers.len()
        )));
    }
    let mut prev: Vec<usize> = vec![0];
    let mut layers = Vec::with_capacity(shapes.len());
    for s in &shapes {
        let feat = s.c_in - s.code_in;
        let mut active_in = prev.clone();
        active_in.extend(feat..s.c_in);
        let active_out: Vec<usize> = match s.gate {
            Some(g) => {
                let gv = &gates.layers[g];
                if gv.len() != s.c_out {
                    return Err(Error::shape("plan_gates", &[gv.len()], &[s.c_out]));
                }
                (0..s.c_out).filter(|&i| gv[i] > T::zero()).collect()
            }
            None => (0..s.c_out).collect(),
        };
        prev = active_out.clone();
        layers.push(LayerPlan {
            name: s.name.clone(),
            active_in,
            active_out,
        });
    }
    Ok(GatePlan { layers })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerFlops {
    pub name: String,
    pub dense_macs: u64,
    pub actual_macs: u64,
}

impl LayerFlops {
    /// Fraction of the layer's dense work that was skipped.
    pub fn reduction(&self) -> f64 {
        1.0 - self.actual_macs as f64 / self.dense_macs as f64
    }
}

/// Per-layer dense and executed work plus gating overhead, in MACs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlopLedger {
    pub layers: Vec<LayerFlops>,
    pub overhead_macs: u64,
}

impl FlopLedger {
    pub fn dense_macs(&self) -> u64 {
        self.layers.iter().map(|l| l.dense_macs).sum()
    }

    pub fn actual_macs(&self) -> u64 {
        self.layers.iter().map(|l| l.actual_macs).sum()
    }

    pub fn dense_flops(&self) -> u64 {
        2 * self.dense_macs()
    }

    pub fn actual_flops(&self) -> u64 {
        2 * self.actual_macs()
    }

    pub fn overhead_flops(&self) -> u64 {
        2 * self.overhead_macs
    }
}

/// Dense base-network work for an `n`-frame input, with the gating
/// networks' work as overhead.
pub fn count_flops_dense(arch: &ArchConfig, n: usize) -> Result<FlopLedger> {
    let layers = arch
        .base_layers(n)?
        .into_iter()
        .map(|s| LayerFlops {
            dense_macs: s.dense_macs(),
            actual_macs: s.dense_macs(),
            name: s.name,
        })
        .collect();
    Ok(FlopLedger {
        layers,
        overhead_macs: overhead_macs(arch, n)?,
    })
}

/// Work the plan leaves to do.
pub fn count_flops_sparse(plan: &GatePlan, arch: &ArchConfig, n: usize) -> Result<FlopLedger> {
    let shapes = arch.base_layers(n)?;
    if shapes.len() != plan.layers.len() {
        return Err(Error::Invalid(
            "plan does not match the architecture".into(),
        ));
    }
    let layers = shapes
        .iter()
        .zip(&plan.layers)
        .map(|(s, p)| LayerFlops {
            name: s.name.clone(),
            dense_macs: s.dense_macs(),
            actual_macs: s.macs(p.active_in.len(), p.active_out.len()),
        })
        .collect();
    Ok(FlopLedger {
        layers,
        overhead_macs: if arch.moe { overhead_macs(arch, n)? } else { 0 },
    })
}

/// Inference-time work of the encoder embedding network, the recurrent
/// encoder and head of the decoder embedding network, and every gating map.
/// The sequence decoder only serves training and is not counted.
pub fn overhead_macs(arch: &ArchConfig, n: usize) -> Result<u64> {
    let s = arch.speakers;
    let geom = crate::conv::ConvGeom::new(arch.een_kernel, arch.een_stride, arch.een_pad);
    let (mut q, mut t) = (arch.dim, n);
    let mut c = 1 + s;
    let mut macs = 0u64;
    for &co in &arch.een_channels {
        let (qo, no) = geom.conv_out(q, t)?;
        macs += (c * co * geom.kh * geom.kw * qo * no) as u64;
        (q, t, c) = (qo, no, co);
    }
    let stack = |input: usize, hidden: &[usize]| {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(arch.embed);
        dims.windows(2).map(|w| (w[0] * w[1]) as u64).sum::<u64>()
    };
    macs += stack(c * q, &arch.een_hidden);
    let shapes = arch.base_layers(n)?;
    let mu = shapes
        .iter()
        .find(|l| l.name == "enc.mu")
        .expect("mean head");
    let zdim = arch.latent * mu.q_out;
    let h = arch.den_state;
    macs += (mu.n_out * 3 * h * (zdim + h)) as u64;
    macs += stack(h + s, &arch.den_hidden);
    macs += (arch.embed * arch.gate_widths().iter().sum::<usize>()) as u64;
    Ok(macs)
}

/// FLOP reduction of one conversion pass.
#[derive(Clone, Debug, PartialEq)]
pub struct FrrReport {
    pub utterance_id: String,
    pub frr: f64,
    pub dense_flops: u64,
    pub actual_flops: u64,
    pub overhead_flops: u64,
    /// `(layer, 1 − actual/dense)` for every base layer.
    pub layer_reduction: Vec<(String, f64)>,
    /// Fraction of exactly-zero gates per gated layer.
    pub gate_sparsity: Vec<f64>,
}

pub const FRR_CSV_HEADER: &str =
    "utterance_id,frr,dense_flops,actual_flops,overhead_flops,layer_sparsity";

/// `1 − (actual + overhead) / dense`, with dense the ungated base network.
pub fn frr<T: Real>(ledger: &FlopLedger, gates: &GateSet<T>, utterance_id: &str) -> FrrReport {
    let dense = ledger.dense_flops();
    let used = ledger.actual_flops() + ledger.overhead_flops();
    FrrReport {
        utterance_id: utterance_id.to_string(),
        frr: 1.0 - used as f64 / dense as f64,
        dense_flops: dense,
        actual_flops: ledger.actual_flops(),
        overhead_flops: ledger.overhead_flops(),
        layer_reduction: ledger
            .layers
            .iter()
            .map(|l| (l.name.clone(), l.reduction()))
            .collect(),
        gate_sparsity: gates
            .layers
            .iter()
            .map(|g| g.iter().filter(|v| **v == T::zero()).count() as f64 / g.len().max(1) as f64)
            .collect(),
    }
}

impl FrrReport {
    pub fn to_csv_row(&self) -> String {
        let sp: Vec<String> = self
            .gate_sparsity
            .iter()
            .map(|v| format!("{v:?}"))
            .collect();
        format!(
            "{},{:?},{},{},{},{}",
            self.utterance_id,
            self.frr,
            self.dense_flops,
            self.actual_flops,
            self.overhead_flops,
            sp.join(";")
        )
    }

    /// Parses a row written by [`FrrReport::to_csv_row`]; per-layer
    /// reductions are not part of the row and come back empty.
    pub fn from_csv_row(row: &str) -> Result<Self> {
        let f: Vec<&str> = row.trim_end_matches('\n').split(',').collect();
        let [id, frr, dense, actual, overhead, sp] = f[..] else {
            return Err(Error::Format(format!(
                "FRR row needs 6 fields, found {}",
                f.len()
            )));
        };
        let bad = |what: &str| Error::Format(format!("FRR row field {what} is malformed"));
        Ok(Self {
            utterance_id: id.to_string(),
            frr: frr.parse().map_err(|_| bad("frr"))?,
            dense_flops: dense.parse().map_err(|_| bad("dense_flops"))?,
            actual_flops: actual.parse().map_err(|_| bad("actual_flops"))?,
            overhead_flops: overhead.parse().map_err(|_| bad("overhead_flops"))?,
            layer_reduction: Vec::new(),
            gate_sparsity: if sp.is_empty() {
                Vec::new()
            } else {
                sp.split(';')
                    .map(|v| v.parse().map_err(|_| bad("layer_sparsity")))
                    .collect::<Result<_>>()?
            },
        })
    }

    /// Human-readable summary.
    pub fn describe(&self) -> String {
        let mut s = format!(
            "utterance {}: FRR {:.4} (dense {} FLOPs, executed {}, overhead {})\n",
            self.utterance_id, self.frr, self.dense_flops, self.actual_flops, self.overhead_flops
        );
        for (name, r) in &self.layer_reduction {
            let _ = writeln!(s, "  {name:<8} reduction {r:.4}");
        }
        s
    }
}

/// Result of one skip-plan conversion.
#[derive(Clone, Debug)]
pub struct SparseOutput<T> {
    pub output: Tensor<T>,
    pub gates: GateSet<T>,
    pub plan: GatePlan,
    pub ledger: FlopLedger,
}

/// A C×Q×N activation buffer in which only `active` channels hold data.
struct Map<T> {
    data: Vec<T>,
    c: usize,
    q: usize,
    n: usize,
}

impl<T: Real> Map<T> {
    fn with_code(&self, code: &SpeakerCode) -> Self {
        let plane = self.q * self.n;
        let mut data = self.data.clone();
        data.extend(code.tile::<T>(self.q, self.n).into_data());
        debug_assert_eq!(data.len(), (self.c + code.speakers()) * plane);
        Self {
            data,
            c: self.c + code.speakers(),
            q: self.q,
            n: self.n,
        }
    }
}

fn conv_into<T: Real>(
    x: &Map<T>,
    kernel: &Tensor<T>,
    shape: &LayerShape,
    plan: &LayerPlan,
    out: &mut [T],
) -> Result<u64> {
    let dims = ConvDims {
        c_in: x.c,
        c_out: shape.c_out,
        q: x.q,
        n: x.n,
    };
    if shape.transpose {
        conv2d_transpose_forward(
            &x.data,
            kernel.data(),
            dims,
            &shape.geom,
            &plan.active_in,
            &plan.active_out,
            out,
        )
    } else {
        conv2d_forward(
            &x.data,
            kernel.data(),
            dims,
            &shape.geom,
            &plan.active_in,
            &plan.active_out,
            out,
        )
    }
}

fn run_glu<T: Real>(
    store: &crate::autodiff::ParamStore<T>,
    layer: &GatedConvLayer,
    x: &Map<T>,
    shape: &LayerShape,
    plan: &LayerPlan,
    gate: &[T],
) -> Result<(Map<T>, u64)> {
    let plane = shape.q_out * shape.n_out;
    let mut lin = vec![T::zero(); shape.c_out * plane];
    let mut pre = vec![T::zero(); shape.c_out * plane];
    let mut macs = conv_into(x, store.get(layer.w), shape, plan, &mut lin)?;
    macs += conv_into(x, store.get(layer.v), shape, plan, &mut pre)?;
    let (b, d) = (store.get(layer.b).data(), store.get(layer.d).data());
    for &co in &plan.active_out {
        for i in co * plane..(co + 1) * plane {
            lin[i] = (lin[i] + b[co]) * sigmoid(pre[i] + d[co]) * gate[co];
        }
    }
    Ok((
        Map {
            data: lin,
            c: shape.c_out,
            q: shape.q_out,
            n: shape.n_out,
        },
        macs,
    ))
}

fn run_plain<T: Real>(
    store: &crate::autodiff::ParamStore<T>,
    layer: &ConvLayer,
    x: &Map<T>,
    shape: &LayerShape,
    plan: &LayerPlan,
) -> Result<(Map<T>, u64)> {
    let plane = shape.q_out * shape.n_out;
    let mut out = vec![T::zero(); shape.c_out * plane];
    let macs = conv_into(x, store.get(layer.w), shape, plan, &mut out)?;
    let b = store.get(layer.b).data();
    for &co in &plan.active_out {
        for v in &mut out[co * plane..(co + 1) * plane] {
            *v += b[co];
        }
    }
    Ok((
        Map {
            data: out,
            c: shape.c_out,
            q: shape.q_out,
            n: shape.n_out,
        },
        macs,
    ))
}

/// Converts `x` (1×Q×N, standardized) with the posterior mean, computing
/// only live channels. Gates come from `mode`; learned gates are produced
/// by the gating networks, whose executed work is the ledger's overhead.
pub fn sparse_forward<T: Real>(
    model: &Model<T>,
    x: &Tensor<T>,
    source: &SpeakerCode,
    target: &SpeakerCode,
    mode: &GateMode<T>,
) -> Result<SparseOutput<T>> {
    let arch = &model.arch;
    let (c, q, n) = x.dims3()?;
    if c != 1 || q != arch.dim {
        return Err(Error::shape("sparse_forward", x.shape(), &[1, arch.dim, n]));
    }
    arch.check_frames(n)?;
    let shapes = arch.base_layers(n)?;
    let widths = arch.gate_widths();
    let n_enc = arch.enc_channels.len();
    let store = &model.store;
    let mut tape = Tape::new(store);

    let enc_gates: Vec<Vec<T>> = match mode {
        GateMode::Identity => widths[..n_enc].iter().map(|&w| vec![T::one(); w]).collect(),
        GateMode::Fixed(set) => set.layers[..n_enc.min(set.layers.len())].to_vec(),
        GateMode::Learned => {
            let moe = model
                .moe
                .as_ref()
                .ok_or_else(|| Error::Model("model has no gating networks".into()))?;
            let xv = tape.constant(x.clone());
            let e = een_embed(&mut tape, &moe.een, xv, source)?;
            let mut g = Vec::new();
            for a in &moe.sgn.enc {
                let v = sgn_gates(&mut tape, a, e)?;
                g.push(tape.value(v).data().to_vec());
            }
            g
        }
    };
    let mut partial = enc_gates.clone();
    partial.extend(widths[n_enc..].iter().map(|&w| vec![T::one(); w]));
    let enc_plan = plan_gates(&GateSet::new(partial)?, arch)?;

    let mut ledger = FlopLedger::default();
    let mut h = Map {
        data: x.data().to_vec(),
        c: 1,
        q,
        n,
    };
    let mut record = |shape: &LayerShape, macs: u64| {
        ledger.layers.push(LayerFlops {
            name: shape.name.clone(),
            dense_macs: shape.dense_macs(),
            actual_macs: macs,
        })
    };
    for (l, layer) in model.base.enc.layers.iter().enumerate() {
        let (next, macs) = run_glu(
            store,
            layer,
            &h,
            &shapes[l],
            &enc_plan.layers[l],
            &enc_gates[l],
        )?;
        record(&shapes[l], macs);
        h = next;
    }
    let (z, macs) = run_plain(
        store,
        &model.base.enc.mu,
        &h,
        &shapes[n_enc],
        &enc_plan.layers[n_enc],
    )?;
    record(&shapes[n_enc], macs);

    let dec_gates: Vec<Vec<T>> = match mode {
        GateMode::Identity => widths[n_enc..].iter().map(|&w| vec![T::one(); w]).collect(),
        GateMode::Fixed(set) => set
            .layers
            .get(n_enc..)
            .map(<[_]>::to_vec)
            .unwrap_or_default(),
        GateMode::Learned => {
            let moe = model.moe.as_ref().expect("checked above");
            let zv = tape.constant(Tensor::new(vec![z.c, z.q, z.n], z.data.clone())?);
            let state = den_state(&mut tape, &moe.den, zv)?;
            let e = den_head(&mut tape, &moe.den, state, target)?;
            let mut g = Vec::new();
            for a in &moe.sgn.dec {
                let v = sgn_gates(&mut tape, a, e)?;
                g.push(tape.value(v).data().to_vec());
            }
            g
        }
    };
    let mut all = enc_gates;
    all.extend(dec_gates);
    let gates = GateSet::new(all)?;
    let plan = plan_gates(&gates, arch)?;

    let mut h = z;
    for (l, layer) in model.base.dec.layers.iter().enumerate() {
        let i = n_enc + 1 + l;
        let (next, macs) = run_glu(
            store,
            layer,
            &h.with_code(target),
            &shapes[i],
            &plan.layers[i],
            &gates.layers[n_enc + l],
        )?;
        record(&shapes[i], macs);
        h = next;
    }
    let i = shapes.len() - 1;
    let (out, macs) = run_plain(
        store,
        &model.base.dec.out,
        &h.with_code(target),
        &shapes[i],
        &plan.layers[i],
    )?;
    record(&shapes[i], macs);
    ledger.overhead_macs = tape.macs();
    Ok(SparseOutput {
        output: Tensor::new(vec![1, out.q, out.n], out.data)?,
        gates,
        plan,
        ledger,
    })
}
