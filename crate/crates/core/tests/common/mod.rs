#![allow(dead_code)]

use moevc::autodiff::ParamStore;
use moevc::config::ArchConfig;
use moevc::conv::ConvGeom;
use moevc::features::SpeakerCode;
use moevc::model::Model;
use moevc::sparse::GatePlan;
use moevc::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// The six-dimensional, two-speaker configuration the gradient suite runs on.
pub fn tiny_arch() -> ArchConfig {
    moevc::gradcheck::tiny_arch()
}

/// A small valid architecture with random depth, widths and geometry.
pub fn random_arch(rng: &mut ChaCha8Rng) -> ArchConfig {
    loop {
        let layers = rng.random_range(1..=3);
        let width = |rng: &mut ChaCha8Rng| rng.random_range(1..=4);
        let kh = [1, 3][rng.random_range(0..2)];
        let kw = [1, 3, 5][rng.random_range(0..3)];
        let arch = ArchConfig {
            dim: rng.random_range(3..=7),
            speakers: rng.random_range(2..=3),
            enc_channels: (0..layers).map(|_| width(rng)).collect(),
            kernel: (kh, kw),
            stride: (1, rng.random_range(1..=2)),
            pad: (kh / 2, kw / 2),
            latent: rng.random_range(1..=3),
            dec_channels: (1..layers).map(|_| width(rng)).collect(),
            cls_channels: vec![2],
            cls_kernel: (3, 3),
            cls_stride: (1, 2),
            cls_pad: (1, 1),
            moe: true,
            een_channels: vec![width(rng)],
            een_kernel: (3, 3),
            een_stride: (1, 2),
            een_pad: (1, 1),
            een_hidden: vec![width(rng) + 1],
            embed: width(rng) + 1,
            den_state: width(rng) + 1,
            den_hidden: vec![width(rng) + 1],
        };
        if arch.validate().is_ok() {
            return arch;
        }
    }
}

pub fn random_frames(rng: &mut ChaCha8Rng, arch: &ArchConfig) -> usize {
    arch.time_factor() * rng.random_range(1..=4)
}

pub fn random_input(rng: &mut ChaCha8Rng, arch: &ArchConfig, n: usize) -> Tensor<f64> {
    let data = (0..arch.dim * n)
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    Tensor::new(vec![1, arch.dim, n], data).unwrap()
}

/// Random gate vectors: each entry is exactly zero with probability `p_zero`,
/// and occasionally a whole layer is switched off.
pub fn random_gates(rng: &mut ChaCha8Rng, arch: &ArchConfig, p_zero: f64) -> Vec<Vec<f64>> {
    let widths = arch.gate_widths();
    let dead = if rng.random_bool(0.3) {
        Some(rng.random_range(0..widths.len()))
    } else {
        None
    };
    widths
        .iter()
        .enumerate()
        .map(|(l, &w)| {
            (0..w)
                .map(|_| {
                    if Some(l) == dead || rng.random_bool(p_zero) {
                        0.0
                    } else {
                        rng.random_range(0.1..2.0)
                    }
                })
                .collect()
        })
        .collect()
}

/// Random biases so that no parameter sits at its zero initialization.
pub fn jitter<T: moevc::Real>(model: &mut Model<T>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        for v in model.store.get_mut(id).data_mut() {
            *v += T::lit(rng.random_range(-0.2..0.2));
        }
    }
}

/// Feature map with a multiply counter.
struct Map {
    c: usize,
    q: usize,
    n: usize,
    data: Vec<f64>,
}

impl Map {
    fn at(&self, c: usize, q: usize, n: usize) -> f64 {
        self.data[(c * self.q + q) * self.n + n]
    }
}

fn kernel(store: &ParamStore<f64>, id: moevc::autodiff::ParamId) -> &[f64] {
    store.get(id).data()
}

/// One convolution branch over the active channels, written as plain loops.
/// Every multiply increments `count`, padded taps included.
#[allow(clippy::too_many_arguments)]
fn conv_branch(
    x: &Map,
    k: &[f64],
    bias: &[f64],
    c_out: usize,
    g: &ConvGeom,
    transpose: bool,
    active_in: &[usize],
    active_out: &[usize],
    count: &mut u64,
) -> Map {
    let ci_n = x.c;
    let at_k =
        |co: usize, ci: usize, a: usize, b: usize| k[((co * ci_n + ci) * g.kh + a) * g.kw + b];
    if !transpose {
        let qo = (x.q + 2 * g.ph - g.kh) / g.sh + 1;
        let no = (x.n + 2 * g.pw - g.kw) / g.sw + 1;
        let mut out = vec![0.0; c_out * qo * no];
        for &co in active_out {
            for i in 0..qo {
                for j in 0..no {
                    let mut acc = bias[co];
                    for &ci in active_in {
                        for a in 0..g.kh {
                            for b in 0..g.kw {
                                let r = (i * g.sh + a) as isize - g.ph as isize;
                                let c = (j * g.sw + b) as isize - g.pw as isize;
                                let v = if r < 0 || c < 0 || r >= x.q as isize || c >= x.n as isize
                                {
                                    0.0
                                } else {
                                    x.at(ci, r as usize, c as usize)
                                };
                                acc += at_k(co, ci, a, b) * v;
                                *count += 1;
                            }
                        }
                    }
                    out[(co * qo + i) * no + j] = acc;
                }
            }
        }
        Map {
            c: c_out,
            q: qo,
            n: no,
            data: out,
        }
    } else {
        let qf = (x.q - 1) * g.sh + g.kh + g.oph;
        let nf = (x.n - 1) * g.sw + g.kw + g.opw;
        let (qo, no) = (qf - 2 * g.ph, nf - 2 * g.pw);
        let mut full = vec![0.0; c_out * qf * nf];
        for &co in active_out {
            for &ci in active_in {
                for i in 0..x.q {
                    for j in 0..x.n {
                        for a in 0..g.kh {
                            for b in 0..g.kw {
                                full[(co * qf + i * g.sh + a) * nf + j * g.sw + b] +=
                                    at_k(co, ci, a, b) * x.at(ci, i, j);
                                *count += 1;
                            }
                        }
                    }
                }
            }
        }
        let mut out = vec![0.0; c_out * qo * no];
        for &co in active_out {
            for i in 0..qo {
                for j in 0..no {
                    out[(co * qo + i) * no + j] =
                        full[(co * qf + i + g.ph) * nf + j + g.pw] + bias[co];
                }
            }
        }
        Map {
            c: c_out,
            q: qo,
            n: no,
            data: out,
        }
    }
}

fn with_code(h: Map, code: &SpeakerCode) -> Map {
    let mut data = h.data;
    data.extend(code.tile::<f64>(h.q, h.n).into_data());
    Map {
        c: h.c + code.speakers(),
        q: h.q,
        n: h.n,
        data,
    }
}

/// Naive-loop conversion pass through the base network following `plan`,
/// with each gated layer's output scaled by its gates. Returns the output
/// map and the multiply count of every layer.
pub fn instrumented_forward(
    model: &Model<f64>,
    x: &Tensor<f64>,
    target: &SpeakerCode,
    gates: &[Vec<f64>],
    plan: &GatePlan,
) -> (Tensor<f64>, Vec<u64>) {
    let store = &model.store;
    let (_, q, n) = x.dims3().unwrap();
    let mut h = Map {
        c: 1,
        q,
        n,
        data: x.data().to_vec(),
    };
    let mut counts = Vec::new();
    let mut li = 0;
    let mut gi = 0;
    let glu = |h: Map,
               layer: &moevc::gated_vae::GatedConvLayer,
               li: usize,
               gi: usize,
               counts: &mut Vec<u64>| {
        let p = &plan.layers[li];
        let mut c = 0;
        let lin = conv_branch(
            &h,
            kernel(store, layer.w),
            kernel(store, layer.b),
            layer.c_out,
            &layer.geom,
            layer.transpose,
            &p.active_in,
            &p.active_out,
            &mut c,
        );
        let pre = conv_branch(
            &h,
            kernel(store, layer.v),
            kernel(store, layer.d),
            layer.c_out,
            &layer.geom,
            layer.transpose,
            &p.active_in,
            &p.active_out,
            &mut c,
        );
        counts.push(c);
        let plane = lin.q * lin.n;
        let mut data = vec![0.0; lin.data.len()];
        for &co in &p.active_out {
            let r = co * plane..(co + 1) * plane;
            for ((o, &a), &b) in data[r.clone()]
                .iter_mut()
                .zip(&lin.data[r.clone()])
                .zip(&pre.data[r])
            {
                *o = a / (1.0 + (-b).exp()) * gates[gi][co];
            }
        }
        Map { data, ..lin }
    };
    for layer in &model.base.enc.layers {
        h = glu(h, layer, li, gi, &mut counts);
        li += 1;
        gi += 1;
    }
    let mu = &model.base.enc.mu;
    let p = &plan.layers[li];
    let mut c = 0;
    h = conv_branch(
        &h,
        kernel(store, mu.w),
        kernel(store, mu.b),
        mu.c_out,
        &mu.geom,
        false,
        &p.active_in,
        &p.active_out,
        &mut c,
    );
    counts.push(c);
    li += 1;
    for layer in &model.base.dec.layers {
        h = glu(with_code(h, target), layer, li, gi, &mut counts);
        li += 1;
        gi += 1;
    }
    let out = &model.base.dec.out;
    let p = &plan.layers[li];
    let mut c = 0;
    let h = conv_branch(
        &with_code(h, target),
        kernel(store, out.w),
        kernel(store, out.b),
        out.c_out,
        &out.geom,
        true,
        &p.active_in,
        &p.active_out,
        &mut c,
    );
    counts.push(c);
    (Tensor::new(vec![1, h.q, h.n], h.data).unwrap(), counts)
}
