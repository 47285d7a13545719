//! Run configuration in flat `section.key = value` text.
//!
//! Blank lines and `#` comments are ignored. Every key must be known and
//! may appear once; errors carry the 1-based line number.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::conv::ConvGeom;
use crate::error::{Error, Result};
use crate::optim::AdamConfig;

/// Sizes and geometry of every network in the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub dim: usize,
    /// Filled from the corpus at training time when left at 0.
    pub speakers: usize,
    pub enc_channels: Vec<usize>,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub latent: usize,
    pub dec_channels: Vec<usize>,
    pub cls_channels: Vec<usize>,
    pub cls_kernel: (usize, usize),
    pub cls_stride: (usize, usize),
    pub cls_pad: (usize, usize),
    pub moe: bool,
    pub een_channels: Vec<usize>,
    pub een_kernel: (usize, usize),
    pub een_stride: (usize, usize),
    pub een_pad: (usize, usize),
    pub een_hidden: Vec<usize>,
    pub embed: usize,
    pub den_state: usize,
    pub den_hidden: Vec<usize>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            dim: 36,
            speakers: 0,
            enc_channels: vec![8, 16, 16],
            kernel: (3, 9),
            stride: (1, 2),
            pad: (1, 4),
            latent: 8,
            dec_channels: vec![16, 8],
            cls_channels: vec![8, 8],
            cls_kernel: (3, 9),
            cls_stride: (1, 2),
            cls_pad: (1, 4),
            moe: true,
            een_channels: vec![4],
            een_kernel: (3, 9),
            een_stride: (1, 4),
            een_pad: (1, 4),
            een_hidden: vec![32],
            embed: 32,
            den_state: 32,
            den_hidden: vec![32],
        }
    }
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn pair(p: (usize, usize)) -> String {
    format!("{},{}", p.0, p.1)
}

impl ArchConfig {
    pub fn enc_geom(&self) -> ConvGeom {
        ConvGeom::new(self.kernel, self.stride, self.pad)
    }

    /// Geometry shared by the decoder's upsampling layers, with output
    /// padding chosen so sizes divisible by the total stride are restored
    /// exactly.
    pub fn dec_geom(&self) -> ConvGeom {
        let op =
            |k: usize, s: usize, p: usize| (2 * p as i64 - k as i64).rem_euclid(s as i64) as usize;
        self.enc_geom().with_output_pad(
            op(self.kernel.0, self.stride.0, self.pad.0),
            op(self.kernel.1, self.stride.1, self.pad.1),
        )
    }

    /// Frame counts must be multiples of this.
    pub fn time_factor(&self) -> usize {
        self.stride.1.pow(self.enc_channels.len() as u32)
    }

    /// Number of gated layers and their widths, encoder layers first.
    pub fn gate_widths(&self) -> Vec<usize> {
        self.enc_channels
            .iter()
            .chain(&self.dec_channels)
            .copied()
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.enc_channels.is_empty() {
            return bad("model.enc_channels must list at least one layer".into());
        }
        if self.dec_channels.len() + 1 != self.enc_channels.len() {
            return bad(format!(
                "model.dec_channels needs {} entries to mirror {} encoder layers",
                self.enc_channels.len() - 1,
                self.enc_channels.len()
            ));
        }
        if self.cls_channels.is_empty() || self.een_channels.is_empty() {
            return bad("classifier.channels and moe.een_channels must be nonempty".into());
        }
        let all = [
            self.dim,
            self.latent,
            self.embed,
            self.den_state,
            self.kernel.0,
            self.kernel.1,
            self.stride.0,
            self.stride.1,
            self.cls_kernel.0,
            self.cls_kernel.1,
            self.cls_stride.0,
            self.cls_stride.1,
            self.een_kernel.0,
            self.een_kernel.1,
            self.een_stride.0,
            self.een_stride.1,
        ];
        let lists = [
            &self.enc_channels,
            &self.dec_channels,
            &self.cls_channels,
            &self.een_channels,
            &self.een_hidden,
            &self.den_hidden,
        ];
        if all.contains(&0) || lists.iter().any(|l| l.contains(&0)) {
            return bad("sizes, kernels, strides and channel counts must be positive".into());
        }
        let mut q = self.dim;
        for _ in &self.enc_channels {
            q = self.enc_geom().conv_out(q, self.time_factor())?.0;
        }
        for _ in 0..self.enc_channels.len() {
            q = self.dec_geom().transpose_out(q, 1)?.0;
        }
        if q != self.dim {
            return bad(format!(
                "encoder/decoder geometry maps feature height {} to {q}",
                self.dim
            ));
        }
        Ok(())
    }

    pub fn check_frames(&self, n: usize) -> Result<()> {
        let f = self.time_factor();
        if n == 0 || !n.is_multiple_of(f) {
            return Err(Error::Invalid(format!(
                "frame count {n} must be a positive multiple of {f}"
            )));
        }
        Ok(())
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<bool, String> {
        match key {
            "model.dim" => self.dim = num(v)?,
            "model.speakers" => self.speakers = num(v)?,
            "model.enc_channels" => self.enc_channels = nums(v)?,
            "model.kernel" => self.kernel = two(v)?,
            "model.stride" => self.stride = two(v)?,
            "model.pad" => self.pad = two(v)?,
            "model.latent" => self.latent = num(v)?,
            "model.dec_channels" => self.dec_channels = nums(v)?,
            "classifier.channels" => self.cls_channels = nums(v)?,
            "classifier.kernel" => self.cls_kernel = two(v)?,
            "classifier.stride" => self.cls_stride = two(v)?,
            "classifier.pad" => self.cls_pad = two(v)?,
            "moe.enabled" => self.moe = num(v)?,
            "moe.een_channels" => self.een_channels = nums(v)?,
            "moe.een_kernel" => self.een_kernel = two(v)?,
            "moe.een_stride" => self.een_stride = two(v)?,
            "moe.een_pad" => self.een_pad = two(v)?,
            "moe.een_hidden" => self.een_hidden = nums(v)?,
            "moe.embed" => self.embed = num(v)?,
            "moe.den_state" => self.den_state = num(v)?,
            "moe.den_hidden" => self.den_hidden = nums(v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Key-value text that [`ArchConfig::from_text`] reads back exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("model.dim", self.dim.to_string());
        put("model.speakers", self.speakers.to_string());
        put("model.enc_channels", list(&self.enc_channels));
        put("model.kernel", pair(self.kernel));
        put("model.stride", pair(self.stride));
        put("model.pad", pair(self.pad));
        put("model.latent", self.latent.to_string());
        put("model.dec_channels", list(&self.dec_channels));
        put("classifier.channels", list(&self.cls_channels));
        put("classifier.kernel", pair(self.cls_kernel));
        put("classifier.stride", pair(self.cls_stride));
        put("classifier.pad", pair(self.cls_pad));
        put("moe.enabled", self.moe.to_string());
        put("moe.een_channels", list(&self.een_channels));
        put("moe.een_kernel", pair(self.een_kernel));
        put("moe.een_stride", pair(self.een_stride));
        put("moe.een_pad", pair(self.een_pad));
        put("moe.een_hidden", list(&self.een_hidden));
        put("moe.embed", self.embed.to_string());
        put("moe.den_state", self.den_state.to_string());
        put("moe.den_hidden", list(&self.den_hidden));
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut arch = Self::default();
        for e in parse_kv(text)? {
            if !arch.set(&e.key, &e.value).map_err(|msg| e.err(msg))? {
                return Err(e.err(format!("unknown key {:?}", e.key)));
            }
        }
        Ok(arch)
    }
}

/// Loss-term weights of the full objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_mi: f64,
    pub lambda_ce: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_mi: 1.0,
            lambda_ce: 1.0,
            alpha: 1.0,
            beta: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub segment: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            segment: 128,
            batch: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub betas: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            betas: vec![0.0],
            seeds: vec![0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub optim: AdamConfig,
    pub weights: LossWeights,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
}

/// Environment variable that overrides `train.seed`.
pub const SEED_ENV: &str = "MOEVC_SEED";

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for e in parse_kv(text)? {
            let v = e.value.as_str();
            let r: std::result::Result<(), String> = (|| {
                match e.key.as_str() {
                    "optimizer.lr" => cfg.optim.lr = num(v)?,
                    "optimizer.b1" => cfg.optim.b1 = num(v)?,
                    "optimizer.b2" => cfg.optim.b2 = num(v)?,
                    "optimizer.eps" => cfg.optim.eps = num(v)?,
                    "optimizer.batch" => cfg.train.batch = num(v)?,
                    "loss.lambda_mi" => cfg.weights.lambda_mi = num(v)?,
                    "loss.lambda_ce" => cfg.weights.lambda_ce = num(v)?,
                    "loss.alpha" => cfg.weights.alpha = num(v)?,
                    "loss.beta" => cfg.weights.beta = num(v)?,
                    "train.epochs" => cfg.train.epochs = num(v)?,
                    "train.segment" => cfg.train.segment = num(v)?,
                    "train.seed" => cfg.train.seed = num(v)?,
                    "sweep.betas" => cfg.sweep.betas = nums(v)?,
                    "sweep.seeds" => cfg.sweep.seeds = nums(v)?,
                    k => {
                        if !cfg.arch.set(k, v)? {
                            return Err(format!("unknown key {k:?}"));
                        }
                    }
                }
                Ok(())
            })();
            r.map_err(|msg| e.err(msg))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Invalid(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies the seed override from the environment, if set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.train.seed = v.trim().parse().map_err(|_| {
                Error::Invalid(format!("{SEED_ENV}={v:?} is not an unsigned integer"))
            })?;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.optim.validate()?;
        let w = self.weights;
        for (k, v) in [
            ("loss.lambda_mi", w.lambda_mi),
            ("loss.lambda_ce", w.lambda_ce),
            ("loss.alpha", w.alpha),
            ("loss.beta", w.beta),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Invalid(format!(
                    "{k} must be finite and nonnegative"
                )));
            }
        }
        if self.train.batch == 0 || self.train.epochs == 0 {
            return Err(Error::Invalid(
                "train.epochs and optimizer.batch must be positive".into(),
            ));
        }
        self.arch.check_frames(self.train.segment)?;
        if self.sweep.betas.is_empty() || self.sweep.seeds.is_empty() {
            return Err(Error::Invalid(
                "sweep.betas and sweep.seeds must be nonempty".into(),
            ));
        }
        Ok(())
    }
}

/// One `key = value` line.
#[derive(Clone, Debug, PartialEq)]
pub struct KvEntry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

impl KvEntry {
    fn err(&self, msg: String) -> Error {
        Error::Config {
            line: self.line,
            msg,
        }
    }
}

pub fn parse_kv(text: &str) -> Result<Vec<KvEntry>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Config { line: i + 1, msg };
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, found {line:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(err("empty key or value".into()));
        }
        if !seen.insert(k.to_string()) {
            return Err(err(format!("duplicate key {k:?}")));
        }
        out.push(KvEntry {
            line: i + 1,
            key: k.to_string(),
            value: v.to_string(),
        });
    }
    Ok(out)
}

fn num<N: FromStr>(v: &str) -> std::result::Result<N, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn nums<N: FromStr>(v: &str) -> std::result::Result<Vec<N>, String> {
    v.split(',').map(|s| num(s.trim())).collect()
}

fn two(v: &str) -> std::result::Result<(usize, usize), String> {
    match nums::<usize>(v)?[..] {
        [a, b] => Ok((a, b)),
        _ => Err(format!(
            "expected two comma-separated integers, found {v:?}"
        )),
    }
}
