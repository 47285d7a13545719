//! The assembled model and its versioned binary container.
//!
//! Container layout (little-endian): magic `MOEV`, version byte, precision
//! byte (4 or 8), u32-length architecture text, u32 speaker count with
//! u16-length ids, u32-length standardization stats text (0 = none), u32
//! tensor count, then per tensor a u16-length name, u8 rank, u32 dims and
//! the values.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::acvae::ClassifierNet;
use crate::autodiff::ParamStore;
use crate::config::ArchConfig;
use crate::conv::ConvGeom;
use crate::error::{Error, Result};
use crate::features::{one_hot, SpeakerCode, StandardizationStats};
use crate::gated_vae::{BaseNet, ConvLayer, DecoderNet, EncoderNet, GatedConvLayer};
use crate::moe::{Affine, Den, Een, Gru, MoeNets, Sgn};
use crate::rng::{stream, stream_rng};
use crate::tensor::{Real, Tensor};

const MAGIC: [u8; 4] = *b"MOEV";
const VERSION: u8 = 1;
const PROBE_FRAMES: usize = 4096;

/// Static description of one base-network convolution on the conversion
/// path, at a given input size.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerShape {
    pub name: String,
    /// Input channels including appended code channels.
    pub c_in: usize,
    /// Trailing input channels that carry the speaker code.
    pub code_in: usize,
    pub c_out: usize,
    pub geom: ConvGeom,
    pub transpose: bool,
    pub glu: bool,
    /// Index into the gate set, for gated layers.
    pub gate: Option<usize>,
    pub q_in: usize,
    pub n_in: usize,
    pub q_out: usize,
    pub n_out: usize,
}

impl LayerShape {
    /// Multiply-accumulates with the given numbers of live channels. A
    /// convolution touches every output position once per tap; a transposed
    /// convolution scatters every input position once per tap.
    pub fn macs(&self, active_in: usize, active_out: usize) -> u64 {
        let positions = if self.transpose {
            self.q_in * self.n_in
        } else {
            self.q_out * self.n_out
        };
        let branches = if self.glu { 2 } else { 1 };
        (branches * active_in * active_out * self.geom.kh * self.geom.kw * positions) as u64
    }

    pub fn dense_macs(&self) -> u64 {
        self.macs(self.c_in, self.c_out)
    }
}

struct Walk {
    q: usize,
    n: usize,
    out: Vec<LayerShape>,
}

impl Walk {
    fn push(
        &mut self,
        name: String,
        (c_in, code_in, c_out): (usize, usize, usize),
        geom: ConvGeom,
        transpose: bool,
        glu: bool,
        gate: Option<usize>,
    ) -> Result<()> {
        let (q_out, n_out) = if transpose {
            geom.transpose_out(self.q, self.n)?
        } else {
            geom.conv_out(self.q, self.n)?
        };
        self.out.push(LayerShape {
            name,
            c_in,
            code_in,
            c_out,
            geom,
            transpose,
            glu,
            gate,
            q_in: self.q,
            n_in: self.n,
            q_out,
            n_out,
        });
        (self.q, self.n) = (q_out, n_out);
        Ok(())
    }
}

impl ArchConfig {
    /// Encoder layers, the mean head, decoder layers and output head for a
    /// `dim × n` input. The variance head is not on the conversion path.
    pub fn base_layers(&self, n: usize) -> Result<Vec<LayerShape>> {
        let s = self.speakers;
        let mut w = Walk {
            q: self.dim,
            n,
            out: Vec::new(),
        };
        let mut c = 1;
        let l_enc = self.enc_channels.len();
        for (l, &co) in self.enc_channels.iter().enumerate() {
            w.push(
                format!("enc.{l}"),
                (c, 0, co),
                self.enc_geom(),
                false,
                true,
                Some(l),
            )?;
            c = co;
        }
        w.push(
            "enc.mu".into(),
            (c, 0, self.latent),
            ConvGeom::pointwise(),
            false,
            false,
            None,
        )?;
        c = self.latent;
        for (l, &co) in self.dec_channels.iter().enumerate() {
            w.push(
                format!("dec.{l}"),
                (c + s, s, co),
                self.dec_geom(),
                true,
                true,
                Some(l_enc + l),
            )?;
            c = co;
        }
        w.push(
            "dec.out".into(),
            (c + s, s, 1),
            self.dec_geom(),
            true,
            false,
            None,
        )?;
        Ok(w.out)
    }

    /// Height of the latent map.
    pub fn latent_height(&self) -> Result<usize> {
        let mut q = self.dim;
        for _ in &self.enc_channels {
            q = self.enc_geom().conv_out(q, PROBE_FRAMES)?.0;
        }
        Ok(q)
    }
}

fn height_after(geoms: impl Iterator<Item = ConvGeom>, q: usize) -> Result<usize> {
    let mut q = q;
    for g in geoms {
        q = g.conv_out(q, PROBE_FRAMES)?.0;
    }
    Ok(q)
}

/// Parameters plus the network handles that index into them.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub arch: ArchConfig,
    pub store: ParamStore<T>,
    pub base: BaseNet,
    pub cls: ClassifierNet,
    pub moe: Option<MoeNets>,
    pub speakers: Vec<String>,
    pub stats: Option<StandardizationStats>,
}

impl<T: Real> Model<T> {
    /// Freshly initialized model. Base, classifier and gating parameters
    /// draw from separate streams, so toggling gating leaves the base
    /// initialization unchanged.
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        if arch.speakers < 1 {
            return Err(Error::Invalid("model needs at least one speaker".into()));
        }
        let s = arch.speakers;
        let mut store = ParamStore::new();

        let mut rng = stream_rng(seed, stream::INIT_BASE);
        let mut c = 1;
        let mut layers = Vec::new();
        for (l, &co) in arch.enc_channels.iter().enumerate() {
            layers.push(GatedConvLayer::new(
                &mut store,
                &format!("enc.{l}"),
                (c, co),
                arch.enc_geom(),
                false,
                &mut rng,
            ));
            c = co;
        }
        let mu = ConvLayer::new(
            &mut store,
            "enc.mu",
            (c, arch.latent),
            ConvGeom::pointwise(),
            false,
            &mut rng,
        );
        let logvar = ConvLayer::new(
            &mut store,
            "enc.logvar",
            (c, arch.latent),
            ConvGeom::pointwise(),
            false,
            &mut rng,
        );
        let enc = EncoderNet { layers, mu, logvar };
        c = arch.latent;
        let mut layers = Vec::new();
        for (l, &co) in arch.dec_channels.iter().enumerate() {
            layers.push(GatedConvLayer::new(
                &mut store,
                &format!("dec.{l}"),
                (c + s, co),
                arch.dec_geom(),
                true,
                &mut rng,
            ));
            c = co;
        }
        let out = ConvLayer::new(
            &mut store,
            "dec.out",
            (c + s, 1),
            arch.dec_geom(),
            true,
            &mut rng,
        );
        let base = BaseNet {
            enc,
            dec: DecoderNet { layers, out },
        };

        let mut rng = stream_rng(seed, stream::INIT_CLASSIFIER);
        let cls_geom = ConvGeom::new(arch.cls_kernel, arch.cls_stride, arch.cls_pad);
        let mut c = 1;
        let mut convs = Vec::new();
        for (l, &co) in arch.cls_channels.iter().enumerate() {
            convs.push(ConvLayer::new(
                &mut store,
                &format!("cls.{l}"),
                (c, co),
                cls_geom,
                false,
                &mut rng,
            ));
            c = co;
        }
        let q = height_after(
            std::iter::repeat_n(cls_geom, arch.cls_channels.len()),
            arch.dim,
        )?;
        let head = Affine::new(&mut store, "cls.head", c * q, s, &mut rng);
        let cls = ClassifierNet { convs, head };

        let moe = if arch.moe {
            Some(Self::build_moe(&arch, &mut store, seed)?)
        } else {
            None
        };
        Ok(Self {
            speakers: (0..s).map(|i| format!("spk{i}")).collect(),
            arch,
            store,
            base,
            cls,
            moe,
            stats: None,
        })
    }

    fn build_moe(arch: &ArchConfig, store: &mut ParamStore<T>, seed: u64) -> Result<MoeNets> {
        let s = arch.speakers;
        let mut rng = stream_rng(seed, stream::INIT_MOE);
        let geom = ConvGeom::new(arch.een_kernel, arch.een_stride, arch.een_pad);
        let mut c = 1 + s;
        let mut convs = Vec::new();
        for (l, &co) in arch.een_channels.iter().enumerate() {
            convs.push(ConvLayer::new(
                store,
                &format!("een.conv{l}"),
                (c, co),
                geom,
                false,
                &mut rng,
            ));
            c = co;
        }
        let q = height_after(std::iter::repeat_n(geom, arch.een_channels.len()), arch.dim)?;
        let affines = affine_stack(
            store,
            "een.fc",
            c * q,
            &arch.een_hidden,
            arch.embed,
            &mut rng,
        );
        let een = Een { convs, affines };

        let zdim = arch.latent * arch.latent_height()?;
        let den = Den {
            enc: Gru::new(store, "den.enc", zdim, arch.den_state, &mut rng),
            dec: Gru::new(store, "den.dec", 0, arch.den_state, &mut rng),
            out: Affine::new(store, "den.out", arch.den_state, zdim, &mut rng),
            head: affine_stack(
                store,
                "den.fc",
                arch.den_state + s,
                &arch.den_hidden,
                arch.embed,
                &mut rng,
            ),
        };

        let bound = 0.01 / (arch.embed as f64).sqrt();
        let mut sgn_map = |name: String, width: usize| {
            Affine::with_init(store, &name, arch.embed, width, bound, 1.0, &mut rng)
        };
        let enc: Vec<Affine> = arch
            .enc_channels
            .iter()
            .enumerate()
            .map(|(l, &w)| sgn_map(format!("sgn.enc{l}"), w))
            .collect();
        let dec: Vec<Affine> = arch
            .dec_channels
            .iter()
            .enumerate()
            .map(|(l, &w)| sgn_map(format!("sgn.dec{l}"), w))
            .collect();
        Ok(MoeNets {
            een,
            den,
            sgn: Sgn { enc, dec },
        })
    }

    pub fn code(&self, index: usize) -> Result<SpeakerCode> {
        one_hot(index, self.arch.speakers)
    }

    pub fn speaker_index(&self, id: &str) -> Result<usize> {
        self.speakers
            .iter()
            .position(|s| s == id)
            .ok_or_else(|| Error::UnknownSpeaker {
                given: id.to_string(),
                known: self.speakers.join(", "),
            })
    }

    /// Same model at another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            arch: self.arch.clone(),
            store: self.store.cast(),
            base: self.base.clone(),
            cls: self.cls.clone(),
            moe: self.moe.clone(),
            speakers: self.speakers.clone(),
            stats: self.stats.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(T::BYTES);
        write_text(&mut out, &self.arch.to_text())?;
        out.write_u32::<LittleEndian>(self.speakers.len() as u32)?;
        for s in &self.speakers {
            write_short(&mut out, s)?;
        }
        write_text(
            &mut out,
            &self.stats.as_ref().map(|s| s.to_text()).unwrap_or_default(),
        )?;
        out.write_u32::<LittleEndian>(self.store.len() as u32)?;
        for (name, t) in self.store.iter() {
            if !t.all_finite() {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
            write_short(&mut out, name)?;
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in t.data() {
                v.write_le(&mut out)?;
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|e| Error::from_read(e, "magic"))?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                expected: MAGIC,
                found: magic,
            });
        }
        let version = r.read_u8().map_err(|e| Error::from_read(e, "version"))?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let precision = r.read_u8().map_err(|e| Error::from_read(e, "precision"))?;
        if precision != T::BYTES {
            return Err(Error::Model(format!(
                "container holds {precision}-byte values, expected {}",
                T::BYTES
            )));
        }
        let arch = ArchConfig::from_text(&read_text(&mut r, "architecture")?)?;
        let mut model = Self::new(arch, 0)?;
        let n = read_u32(&mut r, "speaker count")? as usize;
        if n != model.arch.speakers {
            return Err(Error::Model(format!(
                "{n} speaker ids for {} speakers",
                model.arch.speakers
            )));
        }
        model.speakers = (0..n)
            .map(|_| read_short(&mut r, "speaker id"))
            .collect::<Result<_>>()?;
        let stats = read_text(&mut r, "stats")?;
        model.stats = if stats.is_empty() {
            None
        } else {
            Some(StandardizationStats::from_text(&stats)?)
        };
        let count = read_u32(&mut r, "tensor count")? as usize;
        if count != model.store.len() {
            return Err(Error::Model(format!(
                "{count} tensors, architecture needs {}",
                model.store.len()
            )));
        }
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = read_short(&mut r, "tensor name")?;
            if name != model.store.name(id) {
                return Err(Error::Model(format!(
                    "expected tensor {}, found {name}",
                    model.store.name(id)
                )));
            }
            let rank = r
                .read_u8()
                .map_err(|e| Error::from_read(e, "tensor rank"))? as usize;
            let shape: Vec<usize> = (0..rank)
                .map(|_| read_u32(&mut r, "tensor dims").map(|d| d as usize))
                .collect::<Result<_>>()?;
            if shape != model.store.get(id).shape() {
                return Err(Error::Model(format!(
                    "tensor {name} has shape {shape:?}, expected {:?}",
                    model.store.get(id).shape()
                )));
            }
            let len: usize = shape.iter().product();
            let data = (0..len)
                .map(|_| T::read_le(&mut r).map_err(|e| Error::from_read(e, "tensor values")))
                .collect::<Result<Vec<T>>>()?;
            *model.store.get_mut(id) = Tensor::new(shape, data)?;
        }
        if r.position() as usize != bytes.len() {
            return Err(Error::Format("trailing bytes after model tensors".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("partial");
        std::fs::File::create(&tmp)?.write_all(&bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Model(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn affine_stack<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    input: usize,
    hidden: &[usize],
    output: usize,
    rng: &mut crate::rng::Rng,
) -> Vec<Affine> {
    let mut dims = vec![input];
    dims.extend_from_slice(hidden);
    dims.push(output);
    dims.windows(2)
        .enumerate()
        .map(|(i, w)| Affine::new(store, &format!("{prefix}{i}"), w[0], w[1], rng))
        .collect()
}

fn write_text(out: &mut Vec<u8>, s: &str) -> Result<()> {
    out.write_u32::<LittleEndian>(s.len() as u32)?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn write_short(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::Model(format!("name too long: {s}")))?;
    out.write_u16::<LittleEndian>(len)?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn read_u32(r: &mut Cursor<&[u8]>, what: &str) -> Result<u32> {
    r.read_u32::<LittleEndian>()
        .map_err(|e| Error::from_read(e, what))
}

fn read_bytes(r: &mut Cursor<&[u8]>, len: usize, what: &str) -> Result<String> {
    let remaining = r.get_ref().len() - r.position() as usize;
    if remaining < len {
        return Err(Error::Truncated(what.to_string()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| Error::from_read(e, what))?;
    String::from_utf8(buf).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
}

fn read_text(r: &mut Cursor<&[u8]>, what: &str) -> Result<String> {
    let len = read_u32(r, what)? as usize;
    read_bytes(r, len, what)
}

fn read_short(r: &mut Cursor<&[u8]>, what: &str) -> Result<String> {
    let len = r
        .read_u16::<LittleEndian>()
        .map_err(|e| Error::from_read(e, what))? as usize;
    read_bytes(r, len, what)
}
