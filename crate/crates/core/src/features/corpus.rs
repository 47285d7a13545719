//! Corpus manifests and the synthetic multi-speaker corpus generator.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;

use super::{read_feature_file, write_feature_file, FeatureSeq};
use crate::error::{Error, Result};
use crate::rng::{stream, stream_rng};

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Eval => "eval",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            other => Err(Error::Format(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub speaker: String,
    pub split: Split,
    pub path: String,
}

/// Line-oriented `speaker_id<TAB>split<TAB>relative_path` listing.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    /// Speaker ids in order of first appearance.
    pub fn speakers(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.speaker) {
                out.push(e.speaker.clone());
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\n", e.speaker, e.split, e.path))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            let [speaker, split, path] = parts[..] else {
                return Err(Error::Format(format!(
                    "manifest line {}: expected 3 tab-separated fields",
                    i + 1
                )));
            };
            entries.push(ManifestEntry {
                speaker: speaker.to_string(),
                split: split.parse()?,
                path: path.to_string(),
            });
        }
        Ok(Self { entries })
    }
}

#[derive(Clone, Debug)]
pub struct Utterance {
    pub speaker: String,
    pub speaker_index: usize,
    pub split: Split,
    pub path: String,
    pub seq: FeatureSeq,
}

/// A manifest with every referenced feature file loaded.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub speakers: Vec<String>,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn load(root: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(root.join(MANIFEST_FILE)).map_err(|e| {
            Error::Corpus(format!(
                "cannot read {}: {e}",
                root.join(MANIFEST_FILE).display()
            ))
        })?;
        let manifest = CorpusManifest::from_text(&text)?;
        Self::from_manifest(root, &manifest)
    }

    pub fn from_manifest(root: &Path, manifest: &CorpusManifest) -> Result<Self> {
        let speakers = manifest.speakers();
        let mut utterances = Vec::with_capacity(manifest.entries.len());
        let mut dim = None;
        for e in &manifest.entries {
            let path = root.join(&e.path);
            let seq = read_feature_file(&path)
                .map_err(|err| Error::Corpus(format!("{}: {err}", path.display())))?;
            if *dim.get_or_insert(seq.dim()) != seq.dim() {
                return Err(Error::Corpus(format!(
                    "{} has dimension {}, expected {}",
                    e.path,
                    seq.dim(),
                    dim.unwrap()
                )));
            }
            let speaker_index = speakers
                .iter()
                .position(|s| s == &e.speaker)
                .expect("listed speaker");
            let utt_id = seq.utterance_id.clone();
            utterances.push(Utterance {
                speaker: e.speaker.clone(),
                speaker_index,
                split: e.split,
                path: e.path.clone(),
                seq: seq.with_ids(speaker_index, utt_id),
            });
        }
        for (i, s) in speakers.iter().enumerate() {
            if !utterances
                .iter()
                .any(|u| u.speaker_index == i && u.split == Split::Train)
            {
                return Err(Error::Corpus(format!(
                    "speaker {s} has no training utterance"
                )));
            }
        }
        if speakers.is_empty() {
            return Err(Error::Corpus("manifest lists no utterances".into()));
        }
        Ok(Self {
            root: root.to_path_buf(),
            speakers,
            utterances,
        })
    }

    pub fn dim(&self) -> usize {
        self.utterances[0].seq.dim()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.split == split)
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

    /// The utterance of `speaker` whose id ends in the same utterance
    /// suffix as `other` (synthetic corpora share content per suffix).
    pub fn parallel_of(&self, other: &Utterance, speaker: usize) -> Option<&Utterance> {
        let suffix = other.seq.utterance_id.rsplit('_').next()?;
        self.utterances.iter().find(|u| {
            u.speaker_index == speaker && u.seq.utterance_id.rsplit('_').next() == Some(suffix)
        })
    }
}

/// Parameters of [`gen_synthetic_corpus`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub speakers: usize,
    pub utterances: usize,
    pub frames: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            speakers: 4,
            utterances: 20,
            frames: 256,
            dim: 36,
            seed: 0,
        }
    }
}

const AR_COEF: f64 = 0.95;
const OBS_NOISE: f64 = 0.01;
const OFFSET_SCALE: f64 = 4.0;

struct SpeakerVoice {
    mix: Vec<f64>,
    offset: Vec<f64>,
    color: f64,
    f0_log_mean: f64,
    f0_log_std: f64,
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

impl SpeakerVoice {
    /// Symmetric tridiagonal mix with gains in [0.7, 1.3] and neighbour
    /// coupling in [−0.2, 0.2] (eigenvalues within [0.3, 1.7]), a Gaussian
    /// offset and a tanh coloration gain.
    fn draw(d: usize, seed: u64, speaker: usize) -> Self {
        let mut rng = stream_rng(seed, stream::CORPUS + 1 + speaker as u64);
        let mut mix = vec![0.0; d * d];
        for i in 0..d {
            mix[i * d + i] = rng.random_range(0.7..1.3);
        }
        for i in 1..d {
            let c = rng.random_range(-0.2..0.2);
            mix[i * d + i - 1] = c;
            mix[(i - 1) * d + i] = c;
        }
        let offset = (0..d).map(|_| OFFSET_SCALE * gaussian(&mut rng)).collect();
        let color = rng.random_range(0.2..0.5);
        let f0_log_mean = rng.random_range(90f64.ln()..260f64.ln());
        let f0_log_std = rng.random_range(0.08..0.2);
        Self {
            mix,
            offset,
            color,
            f0_log_mean,
            f0_log_std,
        }
    }

    fn render(&self, content: &[f64], t: usize, d: usize, rng: &mut impl Rng) -> Vec<f32> {
        let mut out = Vec::with_capacity(t * d);
        for frame in content.chunks(d) {
            for i in 0..d {
                let y: f64 = self.mix[i * d..(i + 1) * d]
                    .iter()
                    .zip(frame)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    + self.offset[i];
                out.push((y + self.color * y.tanh() + OBS_NOISE * gaussian(rng)) as f32);
            }
        }
        out
    }

    fn f0_track(&self, t: usize, rng: &mut impl Rng) -> Vec<f32> {
        let mut voiced = rng.random_bool(0.7);
        let mut u = gaussian(rng);
        let innov = (1.0 - 0.9f64 * 0.9).sqrt();
        (0..t)
            .map(|_| {
                voiced = if voiced {
                    rng.random_bool(0.95)
                } else {
                    !rng.random_bool(0.8)
                };
                u = 0.9 * u + innov * gaussian(rng);
                if voiced {
                    (self.f0_log_mean + self.f0_log_std * u).exp() as f32
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Order-1 autoregressive content shared by every speaker's utterance `u`.
fn content(d: usize, t: usize, seed: u64, utt: usize) -> Vec<f64> {
    let mut rng = stream_rng(seed, stream::CORPUS + 1_000_000 + utt as u64);
    let stationary = 1.0 / (1.0 - AR_COEF * AR_COEF).sqrt();
    let mut c: Vec<f64> = (0..d).map(|_| stationary * gaussian(&mut rng)).collect();
    let mut out = Vec::with_capacity(t * d);
    for _ in 0..t {
        out.extend_from_slice(&c);
        for v in c.iter_mut() {
            *v = AR_COEF * *v + gaussian(&mut rng);
        }
    }
    out
}

/// Writes a parallel synthetic corpus plus manifest under `out`.
///
/// Utterance `u` of every speaker renders the same content sequence, so
/// same-suffix utterances of two speakers are frame-aligned conversion
/// pairs. The last fifth of each speaker's utterances is the eval split.
pub fn gen_synthetic_corpus(spec: &SyntheticSpec, out: &Path) -> Result<CorpusManifest> {
    if spec.speakers < 2 {
        return Err(Error::Invalid(format!(
            "conversion needs at least 2 speakers, got {}",
            spec.speakers
        )));
    }
    if spec.utterances == 0 || spec.frames == 0 {
        return Err(Error::Invalid(
            "utterance and frame counts must be positive".into(),
        ));
    }
    if spec.dim == 0 {
        return Err(Error::ZeroDimension);
    }
    let n_eval = spec.utterances / 5;
    let contents: Vec<Vec<f64>> = (0..spec.utterances)
        .map(|u| content(spec.dim, spec.frames, spec.seed, u))
        .collect();
    let mut manifest = CorpusManifest::default();
    for s in 0..spec.speakers {
        let voice = SpeakerVoice::draw(spec.dim, spec.seed, s);
        let speaker = format!("spk{s}");
        std::fs::create_dir_all(out.join(&speaker))?;
        for (u, c) in contents.iter().enumerate() {
            let mut rng = stream_rng(
                spec.seed,
                stream::CORPUS + (1 << 32) + ((s as u64) << 20) + u as u64,
            );
            let frames = voice.render(c, spec.frames, spec.dim, &mut rng);
            let f0 = voice.f0_track(spec.frames, &mut rng);
            let id = format!("{speaker}_u{u:03}");
            let seq = FeatureSeq::new(frames, spec.frames, spec.dim)?
                .with_f0(f0)?
                .with_ids(s, id.clone());
            let rel = format!("{speaker}/{id}.mfcb");
            write_feature_file(&seq, &out.join(&rel))?;
            manifest.entries.push(ManifestEntry {
                speaker: speaker.clone(),
                split: if u >= spec.utterances - n_eval {
                    Split::Eval
                } else {
                    Split::Train
                },
                path: rel,
            });
        }
    }
    std::fs::write(out.join(MANIFEST_FILE), manifest.to_text())?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_is_symmetric_and_well_conditioned() {
        let d = 6;
        let v = SpeakerVoice::draw(d, 1, 0);
        for i in 0..d {
            let off: f64 = (0..d)
                .filter(|&j| j != i)
                .map(|j| v.mix[i * d + j].abs())
                .sum();
            assert!(v.mix[i * d + i] - off >= 0.3 - 1e-12);
            for j in 0..d {
                assert_eq!(v.mix[i * d + j], v.mix[j * d + i]);
                if i.abs_diff(j) > 1 {
                    assert_eq!(v.mix[i * d + j], 0.0);
                }
            }
        }
    }

    #[test]
    fn manifest_text_round_trip() {
        let m = CorpusManifest {
            entries: vec![
                ManifestEntry {
                    speaker: "a".into(),
                    split: Split::Train,
                    path: "a/1.mfcb".into(),
                },
                ManifestEntry {
                    speaker: "b".into(),
                    split: Split::Eval,
                    path: "b/1.mfcb".into(),
                },
            ],
        };
        let back = CorpusManifest::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.speakers(), vec!["a", "b"]);
        assert!(CorpusManifest::from_text("a\ttrain\n").is_err());
        assert!(CorpusManifest::from_text("a\tdev\tx\n").is_err());
    }
}
