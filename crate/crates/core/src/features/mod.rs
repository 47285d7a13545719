//! Spectral feature sequences and everything that feeds them to the model.

mod corpus;
mod f0;
mod mfcb;
mod stats;

pub use corpus::{
    gen_synthetic_corpus, Corpus, CorpusManifest, ManifestEntry, Split, SyntheticSpec, Utterance,
    MANIFEST_FILE,
};
pub use f0::{f0_convert, read_f0_stats, write_f0_stats, F0Stats};
pub use mfcb::{decode_feature_file, encode_feature_file, read_feature_file, write_feature_file};
pub use stats::StandardizationStats;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// A T×D matrix of feature frames plus speaker metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSeq {
    frames: Vec<f32>,
    t: usize,
    d: usize,
    pub speaker_id: usize,
    pub utterance_id: String,
    f0: Option<Vec<f32>>,
}

impl FeatureSeq {
    pub fn new(frames: Vec<f32>, t: usize, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::ZeroDimension);
        }
        if t == 0 {
            return Err(Error::ZeroFrames);
        }
        if frames.len() != t * d {
            return Err(Error::InvalidShape {
                shape: vec![t, d],
                reason: format!("{} values supplied", frames.len()),
            });
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature frames".into()));
        }
        Ok(Self {
            frames,
            t,
            d,
            speaker_id: 0,
            utterance_id: String::new(),
            f0: None,
        })
    }

    pub fn with_f0(mut self, f0: Vec<f32>) -> Result<Self> {
        self.set_f0(Some(f0))?;
        Ok(self)
    }

    pub fn with_ids(mut self, speaker_id: usize, utterance_id: impl Into<String>) -> Self {
        self.speaker_id = speaker_id;
        self.utterance_id = utterance_id.into();
        self
    }

    pub fn frames(&self) -> &[f32] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * self.d..(t + 1) * self.d]
    }

    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn f0(&self) -> Option<&[f32]> {
        self.f0.as_deref()
    }

    pub fn set_f0(&mut self, f0: Option<Vec<f32>>) -> Result<()> {
        match f0 {
            Some(v) => {
                validate_f0(&v, self.t)?;
                self.f0 = Some(v);
            }
            None => self.f0 = None,
        }
        Ok(())
    }

    /// The model's 1×Q×N view: feature dimension as height, time as width.
    pub fn to_map<T: Real>(&self) -> Tensor<T> {
        let mut data = vec![T::zero(); self.t * self.d];
        for t in 0..self.t {
            for q in 0..self.d {
                data[q * self.t + t] = T::lit(self.frames[t * self.d + q] as f64);
            }
        }
        Tensor::new(vec![1, self.d, self.t], data).expect("nonempty sequence")
    }

    /// Inverse of [`FeatureSeq::to_map`]; metadata is copied from `self`.
    pub fn from_map<T: Real>(&self, map: &Tensor<T>) -> Result<Self> {
        let (c, q, n) = map.dims3()?;
        if c != 1 {
            return Err(Error::InvalidShape {
                shape: map.shape().to_vec(),
                reason: "feature map must have one channel".into(),
            });
        }
        let mut frames = vec![0.0f32; q * n];
        for t in 0..n {
            for d in 0..q {
                frames[t * q + d] = map.data()[d * n + t].as_f64() as f32;
            }
        }
        let mut out =
            FeatureSeq::new(frames, n, q)?.with_ids(self.speaker_id, self.utterance_id.clone());
        if n == self.t {
            out.f0 = self.f0.clone();
        }
        Ok(out)
    }

    /// Frames `start..start + len`, wrapping around the end.
    fn window(&self, start: usize, len: usize) -> Self {
        let mut frames = Vec::with_capacity(len * self.d);
        let mut f0 = self.f0.as_ref().map(|_| Vec::with_capacity(len));
        for i in 0..len {
            let t = (start + i) % self.t;
            frames.extend_from_slice(self.frame(t));
            if let (Some(dst), Some(src)) = (f0.as_mut(), self.f0.as_ref()) {
                dst.push(src[t]);
            }
        }
        Self {
            frames,
            t: len,
            d: self.d,
            speaker_id: self.speaker_id,
            utterance_id: self.utterance_id.clone(),
            f0,
        }
    }
}

fn validate_f0(f0: &[f32], t: usize) -> Result<()> {
    if f0.len() != t {
        return Err(Error::InvalidShape {
            shape: vec![f0.len()],
            reason: format!("f0 track must have {t} values"),
        });
    }
    if let Some((i, &v)) = f0
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite() || **v < 0.0)
    {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("f0 frame {i}")));
        }
        return Err(Error::NegativeF0 {
            frame: i,
            value: v as f64,
        });
    }
    Ok(())
}

/// One-hot speaker identity over the training speakers.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerCode {
    index: usize,
    speakers: usize,
}

impl SpeakerCode {
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn speakers(&self) -> usize {
        self.speakers
    }

    pub fn one_hot(&self) -> Vec<f64> {
        (0..self.speakers)
            .map(|i| if i == self.index { 1.0 } else { 0.0 })
            .collect()
    }

    /// S×Q×N tensor with the code value repeated at every position.
    pub fn tile<T: Real>(&self, q: usize, n: usize) -> Tensor<T> {
        let mut data = vec![T::zero(); self.speakers * q * n];
        data[self.index * q * n..(self.index + 1) * q * n].fill(T::one());
        Tensor::new(vec![self.speakers, q, n], data).expect("positive dims")
    }

    pub fn vector<T: Real>(&self) -> Tensor<T> {
        Tensor::vector(self.one_hot().into_iter().map(T::lit).collect())
    }
}

pub fn one_hot(index: usize, speakers: usize) -> Result<SpeakerCode> {
    if index >= speakers {
        return Err(Error::LabelOutOfRange {
            label: index,
            classes: speakers,
        });
    }
    Ok(SpeakerCode { index, speakers })
}

pub fn tile_code<T: Real>(code: &SpeakerCode, q: usize, n: usize) -> Tensor<T> {
    code.tile(q, n)
}

/// A contiguous window of `len` frames at a uniformly drawn offset; shorter
/// sequences are extended cyclically from frame 0.
pub fn sample_training_segment<R: Rng>(
    seq: &FeatureSeq,
    len: usize,
    rng: &mut R,
) -> Result<FeatureSeq> {
    if len == 0 {
        return Err(Error::Invalid("segment length must be positive".into()));
    }
    let start = if seq.len() > len {
        rng.random_range(0..=seq.len() - len)
    } else {
        0
    };
    Ok(seq.window(start, len))
}
