//! Reverse-mode differentiation over a fixed operation vocabulary.
//!
//! A [`Tape`] records every operation applied during one forward pass;
//! [`Tape::backward`] walks it in reverse and returns gradients for the
//! parameters of the bound [`ParamStore`]. Parameters can be bound frozen,
//! in which case they act as constants and receive no gradient.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::conv::{self, ConvDims, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Real, Tensor};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter tensors, in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Per-parameter gradients; parameters not reached by the loss have none.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor<T>> {
        self.grads.get_mut(id.0).and_then(Option::as_mut)
    }

    /// Gradient for `id`, materializing zeros for unreached parameters.
    pub fn dense(&self, id: ParamId, store: &ParamStore<T>) -> Tensor<T> {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
    }

    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine.as_mut(), theirs) {
                (Some(a), Some(b)) => a.add_assign(b),
                (None, Some(b)) => *mine = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::all_finite)
    }
}

/// Node handle on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf(Option<ParamId>),
    Conv { x: Var, k: Var, geom: ConvGeom },
    ConvT { x: Var, k: Var, geom: ConvGeom },
    ChannelBias { x: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sigmoid(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    L1Mean(Var),
    Mse(Var, Var),
    SoftmaxCe { logits: Var, label: usize },
    Kl { mu: Var, logvar: Var },
    ConcatChannels(Var, Var),
    SliceChannels { x: Var, start: usize },
    ScaleChannels { x: Var, g: Var },
    TimeMean(Var),
    TimeStep { x: Var, t: usize },
    ConcatVec(Var, Var),
    MatVec { w: Var, x: Var },
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Tape<'s, T: Real> {
    store: &'s ParamStore<T>,
    frozen_store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    bound: Vec<Option<Var>>,
    bound_frozen: Vec<Option<Var>>,
    frozen: bool,
    macs: u64,
}

fn dims3_of(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match shape {
        &[c, q, n] => Ok((c, q, n)),
        _ => Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("{op} expects a C×Q×N tensor"),
        }),
    }
}

impl<'s, T: Real> Tape<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self {
            store,
            frozen_store: store,
            nodes: Vec::new(),
            bound: vec![None; store.len()],
            bound_frozen: vec![None; store.len()],
            frozen: false,
            macs: 0,
        }
    }

    /// Tape whose frozen bindings read `frozen` instead of `store`, so
    /// perturbing `store` leaves every frozen use at its original value.
    pub fn with_frozen_values(store: &'s ParamStore<T>, frozen: &'s ParamStore<T>) -> Self {
        let mut t = Self::new(store);
        t.frozen_store = frozen;
        t
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    /// While set, [`Tape::param`] binds parameters as constants.
    pub fn set_frozen(&mut self, frozen: bool) -> bool {
        std::mem::replace(&mut self.frozen, frozen)
    }

    /// Multiply-accumulates executed by convolution and affine ops so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf(None), false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let frozen = self.frozen;
        let slot = if frozen {
            &self.bound_frozen[id.0]
        } else {
            &self.bound[id.0]
        };
        if let Some(v) = *slot {
            return v;
        }
        let value = if frozen {
            self.frozen_store
        } else {
            self.store
        }
        .get(id)
        .clone();
        let v = if frozen {
            self.push(value, Op::Leaf(None), false)
        } else {
            self.push(value, Op::Leaf(Some(id)), true)
        };
        if frozen {
            self.bound_frozen[id.0] = Some(v);
        } else {
            self.bound[id.0] = Some(v);
        }
        v
    }

    /// Cross-correlation of a C_in×Q×N map with a C_out×C_in×kh×kw kernel.
    pub fn conv2d(&mut self, x: Var, k: Var, geom: ConvGeom) -> Result<Var> {
        let (dims, kshape) = self.conv_dims(x, k, "conv2d")?;
        let (qo, no) = geom.conv_out(dims.q, dims.n)?;
        let mut out = vec![T::zero(); kshape[0] * qo * no];
        let all_in: Vec<usize> = (0..dims.c_in).collect();
        let all_out: Vec<usize> = (0..dims.c_out).collect();
        self.macs += conv::conv2d_forward(
            self.value(x).data(),
            self.value(k).data(),
            dims,
            &geom,
            &all_in,
            &all_out,
            &mut out,
        )?;
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(
            Tensor::new(vec![dims.c_out, qo, no], out)?,
            Op::Conv { x, k, geom },
            rg,
        ))
    }

    /// Transposed convolution; the kernel is laid out C_out×C_in×kh×kw.
    pub fn conv2d_transpose(&mut self, x: Var, k: Var, geom: ConvGeom) -> Result<Var> {
        let (dims, _) = self.conv_dims(x, k, "conv2d_transpose")?;
        let (qo, no) = geom.transpose_out(dims.q, dims.n)?;
        let mut out = vec![T::zero(); dims.c_out * qo * no];
        let all_in: Vec<usize> = (0..dims.c_in).collect();
        let all_out: Vec<usize> = (0..dims.c_out).collect();
        self.macs += conv::conv2d_transpose_forward(
            self.value(x).data(),
            self.value(k).data(),
            dims,
            &geom,
            &all_in,
            &all_out,
            &mut out,
        )?;
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(
            Tensor::new(vec![dims.c_out, qo, no], out)?,
            Op::ConvT { x, k, geom },
            rg,
        ))
    }

    fn conv_dims(&self, x: Var, k: Var, op: &'static str) -> Result<(ConvDims, Vec<usize>)> {
        let xs = self.value(x).shape();
        let ks = self.value(k).shape().to_vec();
        let (c, q, n) = dims3_of(xs, op)?;
        if ks.len() != 4 || ks[1] != c {
            return Err(Error::shape(op, xs, &ks));
        }
        Ok((
            ConvDims {
                c_in: c,
                c_out: ks[0],
                q,
                n,
            },
            ks,
        ))
    }

    /// Adds `b[c]` to every element of channel `c`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let (c, q, n) = dims3_of(xv.shape(), "add_channel_bias")?;
        let bv = self.value(b);
        if bv.shape() != [c] {
            return Err(Error::shape("add_channel_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        let plane = q * n;
        for (ch, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let bias = bv.data()[ch];
            for v in chunk {
                *v += bias;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::ChannelBias { x, b }, rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), name, f)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Non-positive inputs map to exactly `0.0`.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| if x > T::zero() { x } else { T::zero() },
            Op::Relu(a),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, T::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, T::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, T::ln, Op::Log(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let s = self.value(a).mean();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean absolute value.
    pub fn l1_mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().map(|x| x.abs()).sum::<T>() / T::lit(v.len() as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::L1Mean(a), rg)
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("mse", av.shape(), bv.shape()));
        }
        let s = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            / T::lit(av.len() as f64);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), rg))
    }

    /// `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape().len() != 1 {
            return Err(Error::InvalidShape {
                shape: lv.shape().to_vec(),
                reason: "logits must be a vector".into(),
            });
        }
        if label >= lv.len() {
            return Err(Error::LabelOutOfRange {
                label,
                classes: lv.len(),
            });
        }
        let loss = log_sum_exp(lv.data()) - lv.data()[label];
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCe { logits, label }, rg))
    }

    /// `½ Σ (μ² + exp(logvar) − 1 − logvar)` over all elements.
    pub fn kl_std_normal(&mut self, mu: Var, logvar: Var) -> Result<Var> {
        let (m, lv) = (self.value(mu), self.value(logvar));
        if m.shape() != lv.shape() {
            return Err(Error::shape("kl_std_normal", m.shape(), lv.shape()));
        }
        let half = T::lit(0.5);
        let s = m
            .data()
            .iter()
            .zip(lv.data())
            .map(|(&u, &l)| half * (u * u + l.exp() - T::one() - l))
            .sum::<T>();
        let rg = self.rg(mu) || self.rg(logvar);
        Ok(self.push(Tensor::scalar(s), Op::Kl { mu, logvar }, rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).concat_channels(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::ConcatChannels(a, b), rg))
    }

    /// Channels `start..start + len` of a C×Q×N map.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (c, q, n) = dims3_of(xv.shape(), "slice_channels")?;
        if len == 0 || start + len > c {
            return Err(Error::InvalidShape {
                shape: xv.shape().to_vec(),
                reason: format!("channel slice {start}..{} out of range", start + len),
            });
        }
        let plane = q * n;
        let data = xv.data()[start * plane..(start + len) * plane].to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![len, q, n], data)?,
            Op::SliceChannels { x, start },
            rg,
        ))
    }

    /// Multiplies channel `i` of a C×Q×N map by `g[i]`.
    pub fn scale_channels(&mut self, x: Var, g: Var) -> Result<Var> {
        let xv = self.value(x);
        let (c, q, n) = dims3_of(xv.shape(), "scale_channels")?;
        let gv = self.value(g);
        if gv.shape() != [c] {
            return Err(Error::shape("scale_channels", xv.shape(), gv.shape()));
        }
        let mut out = xv.clone();
        for (ch, chunk) in out.data_mut().chunks_mut(q * n).enumerate() {
            let s = gv.data()[ch];
            for v in chunk {
                *v *= s;
            }
        }
        let rg = self.rg(x) || self.rg(g);
        Ok(self.push(out, Op::ScaleChannels { x, g }, rg))
    }

    /// Averages a C×Q×N map over the time axis N and flattens to C·Q.
    pub fn time_mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (c, q, n) = dims3_of(xv.shape(), "time_mean")?;
        let inv = T::one() / T::lit(n as f64);
        let data: Vec<T> = xv
            .data()
            .chunks(n)
            .map(|row| row.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![c * q], data)?, Op::TimeMean(x), rg))
    }

    /// Column `t` of a C×Q×N map, flattened to C·Q.
    pub fn time_step(&mut self, x: Var, t: usize) -> Result<Var> {
        let xv = self.value(x);
        let (c, q, n) = dims3_of(xv.shape(), "time_step")?;
        if t >= n {
            return Err(Error::Invalid(format!("time step {t} out of range {n}")));
        }
        let data: Vec<T> = (0..c * q).map(|r| xv.data()[r * n + t]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![c * q], data)?, Op::TimeStep { x, t }, rg))
    }

    pub fn concat_vec(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 1 || bv.shape().len() != 1 {
            return Err(Error::shape("concat_vec", av.shape(), bv.shape()));
        }
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::vector(data), Op::ConcatVec(a, b), rg))
    }

    /// `W·x` for `W` of shape O×I and `x` of length I.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (wv, xv) = (self.value(w), self.value(x));
        let (o, i) = match wv.shape() {
            &[o, i] => (o, i),
            s => return Err(Error::shape("matvec", s, xv.shape())),
        };
        if xv.shape() != [i] {
            return Err(Error::shape("matvec", wv.shape(), xv.shape()));
        }
        let data: Vec<T> = wv.data().chunks(i).map(|row| dot(row, xv.data())).collect();
        self.macs += (o * i) as u64;
        let rg = self.rg(w) || self.rg(x);
        Ok(self.push(Tensor::vector(data), Op::MatVec { w, x }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidShape {
                shape: self.value(loss).shape().to_vec(),
                reason: "backward needs a scalar loss".into(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        let mut out = Gradients {
            grads: vec![None; self.store.len()],
        };
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            if let Op::Leaf(Some(id)) = node.op {
                out.grads[id.0] = Some(g);
            }
        }
        Ok(out)
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let mut acc = |v: Var, delta: Tensor<T>| {
            if !self.rg(v) {
                return;
            }
            match grads[v.0].as_mut() {
                Some(existing) => existing.add_assign(&delta),
                None => grads[v.0] = Some(delta),
            }
        };
        let gd = g.data();
        match node.op {
            Op::Leaf(_) => {}
            Op::Conv { x, k, geom } | Op::ConvT { x, k, geom } => {
                let (dims, _) = self.conv_dims(x, k, "conv backward")?;
                let (xv, kv) = (self.value(x), self.value(k));
                let mut gx = vec![T::zero(); xv.len()];
                let mut gk = vec![T::zero(); kv.len()];
                if matches!(node.op, Op::Conv { .. }) {
                    conv::conv2d_backward(xv.data(), kv.data(), dims, &geom, gd, &mut gx, &mut gk)?;
                } else {
                    conv::conv2d_transpose_backward(
                        xv.data(),
                        kv.data(),
                        dims,
                        &geom,
                        gd,
                        &mut gx,
                        &mut gk,
                    )?;
                }
                acc(x, Tensor::new(xv.shape().to_vec(), gx)?);
                acc(k, Tensor::new(kv.shape().to_vec(), gk)?);
            }
            Op::ChannelBias { x, b } => {
                let c = self.value(b).len();
                let plane = g.len() / c;
                let gb: Vec<T> = gd
                    .chunks(plane)
                    .map(|ch| ch.iter().copied().sum())
                    .collect();
                acc(x, g.clone());
                acc(b, Tensor::vector(gb));
            }
            Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(a, g.clone());
                acc(b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                acc(a, g.zip_map(bv, "mul grad", |x, y| x * y)?);
                acc(b, g.zip_map(av, "mul grad", |x, y| x * y)?);
            }
            Op::Scale(a, s) => acc(a, g.scale(s)),
            Op::AddScalar(a) => acc(a, g.clone()),
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(
                    a,
                    g.zip_map(y, "sigmoid grad", |gv, s| gv * s * (T::one() - s))?,
                );
            }
            Op::Relu(a) => {
                let x = self.value(a);
                acc(
                    a,
                    g.zip_map(
                        x,
                        "relu grad",
                        |gv, xv| if xv > T::zero() { gv } else { T::zero() },
                    )?,
                );
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc(
                    a,
                    g.zip_map(y, "tanh grad", |gv, t| gv * (T::one() - t * t))?,
                );
            }
            Op::Exp(a) => acc(a, g.zip_map(&node.value, "exp grad", |gv, e| gv * e)?),
            Op::Log(a) => acc(a, g.zip_map(self.value(a), "log grad", |gv, x| gv / x)?),
            Op::Sum(a) => acc(a, Tensor::full(self.value(a).shape(), gd[0])),
            Op::Mean(a) => {
                let v = self.value(a);
                acc(a, Tensor::full(v.shape(), gd[0] / T::lit(v.len() as f64)));
            }
            Op::L1Mean(a) => {
                let v = self.value(a);
                let s = gd[0] / T::lit(v.len() as f64);
                acc(
                    a,
                    v.map(|x| {
                        if x > T::zero() {
                            s
                        } else if x < T::zero() {
                            -s
                        } else {
                            T::zero()
                        }
                    }),
                );
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let s = T::lit(2.0) * gd[0] / T::lit(av.len() as f64);
                let diff = av.zip_map(bv, "mse grad", |x, y| (x - y) * s)?;
                acc(b, diff.map(|v| -v));
                acc(a, diff);
            }
            Op::SoftmaxCe { logits, label } => {
                let lv = self.value(logits);
                let mut p = softmax(lv.data());
                p[label] -= T::one();
                acc(
                    logits,
                    Tensor::vector(p.into_iter().map(|v| v * gd[0]).collect()),
                );
            }
            Op::Kl { mu, logvar } => {
                let half = T::lit(0.5);
                acc(mu, self.value(mu).scale(gd[0]));
                acc(
                    logvar,
                    self.value(logvar)
                        .map(|l| gd[0] * half * (l.exp() - T::one())),
                );
            }
            Op::ConcatChannels(a, b) => {
                let split = self.value(a).len();
                acc(
                    a,
                    Tensor::new(self.value(a).shape().to_vec(), gd[..split].to_vec())?,
                );
                acc(
                    b,
                    Tensor::new(self.value(b).shape().to_vec(), gd[split..].to_vec())?,
                );
            }
            Op::SliceChannels { x, start } => {
                let xv = self.value(x);
                let plane = xv.shape()[1] * xv.shape()[2];
                let mut gx = vec![T::zero(); xv.len()];
                gx[start * plane..start * plane + g.len()].copy_from_slice(gd);
                acc(x, Tensor::new(xv.shape().to_vec(), gx)?);
            }
            Op::ScaleChannels { x, g: gate } => {
                let (xv, gv) = (self.value(x), self.value(gate));
                let plane = xv.len() / gv.len();
                let mut gx = g.clone();
                let mut gg = vec![T::zero(); gv.len()];
                for (ch, (gchunk, xchunk)) in gx
                    .data_mut()
                    .chunks_mut(plane)
                    .zip(xv.data().chunks(plane))
                    .enumerate()
                {
                    gg[ch] = dot(gchunk, xchunk);
                    let s = gv.data()[ch];
                    for v in gchunk.iter_mut() {
                        *v *= s;
                    }
                }
                acc(x, gx);
                acc(gate, Tensor::vector(gg));
            }
            Op::TimeMean(x) => {
                let xv = self.value(x);
                let n = xv.shape()[2];
                let inv = T::one() / T::lit(n as f64);
                let data: Vec<T> = gd
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v * inv, n))
                    .collect();
                acc(x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::TimeStep { x, t } => {
                let xv = self.value(x);
                let n = xv.shape()[2];
                let mut gx = vec![T::zero(); xv.len()];
                for (r, &v) in gd.iter().enumerate() {
                    gx[r * n + t] = v;
                }
                acc(x, Tensor::new(xv.shape().to_vec(), gx)?);
            }
            Op::ConcatVec(a, b) => {
                let split = self.value(a).len();
                acc(a, Tensor::vector(gd[..split].to_vec()));
                acc(b, Tensor::vector(gd[split..].to_vec()));
            }
            Op::MatVec { w, x } => {
                let (wv, xv) = (self.value(w), self.value(x));
                let i = xv.len();
                let mut gw = vec![T::zero(); wv.len()];
                let mut gx = vec![T::zero(); i];
                for (o, &go) in gd.iter().enumerate() {
                    let row = &wv.data()[o * i..(o + 1) * i];
                    for j in 0..i {
                        gw[o * i + j] = go * xv.data()[j];
                        gx[j] += go * row[j];
                    }
                }
                acc(w, Tensor::new(wv.shape().to_vec(), gw)?);
                acc(x, Tensor::vector(gx));
            }
            Op::Reshape(x) => acc(x, g.clone().reshape(self.value(x).shape())?),
        }
        Ok(())
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    m + xs.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

pub fn softmax<T: Real>(xs: &[T]) -> Vec<T> {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = xs.iter().map(|&x| (x - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Reparameterized draw `z = μ + exp(logvar/2) ⊙ ε` with `ε ~ N(0, I)` taken
/// from `rng`. Gradients reach `mu` and `logvar` only.
pub fn sample_reparam<T: Real, R: Rng>(
    tape: &mut Tape<'_, T>,
    mu: Var,
    logvar: Var,
    rng: &mut R,
) -> Result<Var> {
    let shape = tape.value(mu).shape().to_vec();
    if tape.value(logvar).shape() != shape.as_slice() {
        return Err(Error::shape(
            "sample_reparam",
            &shape,
            tape.value(logvar).shape(),
        ));
    }
    let n: usize = shape.iter().product();
    let eps: Vec<T> = (0..n)
        .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let eps = tape.constant(Tensor::new(shape, eps)?);
    let half = tape.scale(logvar, T::lit(0.5));
    let std = tape.exp(half);
    let noise = tape.mul(std, eps)?;
    tape.add(mu, noise)
}
