//! Synthetic labelled/unlabelled speech-like corpus and its on-disk format.
//!
//! Each label renders a run of frames around a fixed per-label mean vector
//! plus Gaussian noise. Labels are drawn from a Zipf prior so that an LM over
//! the token stream carries real information.
//!
//! On disk a dataset is a directory holding, per split, a JSON manifest,
//! a packed feature file and (except for the unlabelled split) a JSON Lines
//! transcript file. Unlabelled transcripts go to a separate sealed file that
//! only evaluation reads.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{TokenSeq, Vocab};

/// Row-major `T × d` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    frames: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Features {
    pub fn new(frames: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != frames * dim {
            return Err(Error::shape(format!(
                "{frames}x{dim} feature matrix needs {} values, got {}",
                frames * dim,
                data.len()
            )));
        }
        Ok(Self { frames, dim, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// A transcribed utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: Features,
    pub tokens: TokenSeq,
}

/// Audio without a transcript.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabelledUtterance {
    pub id: String,
    pub features: Features,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Labelled,
    Unlabelled,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Labelled, Split::Unlabelled, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Labelled => "labelled",
            Split::Unlabelled => "unlabelled",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Output vocabulary size, blank included.
    pub vocab: usize,
    pub feature_dim: usize,
    pub frames_per_token: usize,
    pub noise_sigma: f64,
    /// Randomly lengthen or shorten each label by one frame.
    pub jitter: bool,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub zipf_exponent: f64,
    pub n_labelled: usize,
    pub n_unlabelled: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Text-only sentences for LM training.
    pub n_lm_text: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab: 12,
            feature_dim: 8,
            frames_per_token: 4,
            noise_sigma: 1.0,
            jitter: true,
            min_tokens: 3,
            max_tokens: 7,
            zipf_exponent: 1.0,
            n_labelled: 400,
            n_unlabelled: 3440,
            n_dev: 200,
            n_test: 200,
            n_lm_text: 2000,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        Vocab::new(self.vocab).map_err(|e| Error::Config(e.to_string()))?;
        if self.feature_dim == 0 || self.frames_per_token == 0 {
            return Err(Error::Config("feature_dim and frames_per_token must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::Config(format!(
                "token length range [{}, {}] is empty or allows empty utterances",
                self.min_tokens, self.max_tokens
            )));
        }
        if !self.zipf_exponent.is_finite() || self.zipf_exponent < 0.0 {
            return Err(Error::Config("zipf_exponent must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Zipf weights over labels `1..K`: label `r` gets `r^-s`.
    pub fn token_prior(&self) -> Vec<f64> {
        let w: Vec<f64> = (1..self.vocab).map(|r| (r as f64).powf(-self.zipf_exponent)).collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|x| x / z).collect()
    }
}

/// Unlabelled transcripts, kept apart from the training data and only used
/// to score pseudo-transcriptions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SealedReferences(pub BTreeMap<String, TokenSeq>);

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub labelled: Vec<Utterance>,
    pub unlabelled: Vec<UnlabelledUtterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub lm_text: Vec<TokenSeq>,
}

struct Renderer {
    means: Vec<Vec<f64>>,
    noise: Normal<f64>,
    prior: WeightedIndex<f64>,
    cfg: SynthConfig,
}

impl Renderer {
    fn tokens(&self, rng: &mut ChaCha8Rng) -> TokenSeq {
        let n = rng.random_range(self.cfg.min_tokens..=self.cfg.max_tokens);
        let toks = (0..n).map(|_| self.prior.sample(rng) + 1).collect();
        TokenSeq::new(toks).expect("labels are non-blank")
    }

    fn render(&self, tokens: &TokenSeq, rng: &mut ChaCha8Rng) -> Features {
        let d = self.cfg.feature_dim;
        let mut data = Vec::new();
        let mut frames = 0;
        for &k in tokens.as_slice() {
            let mut len = self.cfg.frames_per_token as i64;
            if self.cfg.jitter {
                len += rng.random_range(-1i64..=1);
            }
            for _ in 0..len.max(1) {
                for &m in &self.means[k] {
                    data.push(m + self.noise.sample(rng));
                }
                frames += 1;
            }
        }
        Features::new(frames, d, data).expect("consistent rendering")
    }
}

/// Generates every split from `cfg.seed`.
pub fn generate(cfg: &SynthConfig) -> Result<(Dataset, SealedReferences)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let means = sample_means(cfg, &mut rng);
    let renderer = Renderer {
        means,
        noise: Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?,
        prior: WeightedIndex::new(cfg.token_prior()).map_err(|e| Error::Config(e.to_string()))?,
        cfg: cfg.clone(),
    };

    let labelled_split = |split: Split, n: usize, rng: &mut ChaCha8Rng| -> Vec<Utterance> {
        (0..n)
            .map(|i| {
                let tokens = renderer.tokens(rng);
                let features = renderer.render(&tokens, rng);
                Utterance {
                    id: format!("{}-{i:05}", split.name()),
                    features,
                    tokens,
                }
            })
            .collect()
    };
    let labelled = labelled_split(Split::Labelled, cfg.n_labelled, &mut rng);
    let hidden = labelled_split(Split::Unlabelled, cfg.n_unlabelled, &mut rng);
    let dev = labelled_split(Split::Dev, cfg.n_dev, &mut rng);
    let test = labelled_split(Split::Test, cfg.n_test, &mut rng);
    let lm_text = (0..cfg.n_lm_text).map(|_| renderer.tokens(&mut rng)).collect();

    let mut sealed = SealedReferences::default();
    let unlabelled = hidden
        .into_iter()
        .map(|u| {
            sealed.0.insert(u.id.clone(), u.tokens);
            UnlabelledUtterance {
                id: u.id,
                features: u.features,
            }
        })
        .collect();
    Ok((
        Dataset {
            config: cfg.clone(),
            labelled,
            unlabelled,
            dev,
            test,
            lm_text,
        },
        sealed,
    ))
}

/// Per-label mean vectors used by `generate`, exposed for inspection.
pub fn class_means(cfg: &SynthConfig) -> Vec<Vec<f64>> {
    sample_means(cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

fn sample_means(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    // Index 0 (blank) has no acoustic realisation; keep a placeholder.
    (0..cfg.vocab)
        .map(|k| {
            if k == 0 {
                vec![0.0; cfg.feature_dim]
            } else {
                (0..cfg.feature_dim).map(|_| rng.sample(StandardNormal)).collect()
            }
        })
        .collect()
}

const FORMAT_VERSION: u32 = 1;
const FEAT_MAGIC: &[u8; 4] = b"FEAT";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    offset: u64,
    frames: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    split: Split,
    dim: usize,
    features: String,
    transcripts: Option<String>,
    utterances: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TranscriptLine {
    id: String,
    tokens: TokenSeq,
}

fn write_features<W: Write + Seek>(w: &mut W, f: &Features) -> Result<u64> {
    let offset = w.stream_position()?;
    w.write_all(FEAT_MAGIC)?;
    w.write_all(&(f.frames as u32).to_le_bytes())?;
    w.write_all(&(f.dim as u32).to_le_bytes())?;
    for v in &f.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(offset)
}

fn read_features<R: Read + Seek>(r: &mut R, offset: u64) -> Result<Features> {
    r.seek(SeekFrom::Start(offset))?;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FEAT_MAGIC {
        return Err(Error::format("feature file", format!("bad record magic at offset {offset}")));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let frames = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4)?;
    let dim = u32::from_le_bytes(b4) as usize;
    let mut data = Vec::with_capacity(frames * dim);
    let mut b8 = [0u8; 8];
    for _ in 0..frames * dim {
        r.read_exact(&mut b8)?;
        data.push(f64::from_le_bytes(b8));
    }
    Features::new(frames, dim, data)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path, what: &'static str) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::format(what, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

fn save_split(dir: &Path, split: Split, dim: usize, items: &[(&str, &Features, Option<&TokenSeq>)]) -> Result<()> {
    let feat_name = format!("{}.feat", split.name());
    let mut fw = BufWriter::new(File::create(dir.join(&feat_name))?);
    let mut entries = Vec::with_capacity(items.len());
    for (id, f, _) in items {
        let offset = write_features(&mut fw, f)?;
        entries.push(ManifestEntry {
            id: id.to_string(),
            offset,
            frames: f.frames,
        });
    }
    fw.flush()?;
    let transcripts = if split == Split::Unlabelled {
        None
    } else {
        let name = format!("{}.trans.jsonl", split.name());
        write_jsonl(
            &dir.join(&name),
            items.iter().map(|(id, _, y)| TranscriptLine {
                id: id.to_string(),
                tokens: (*y).expect("labelled split carries transcripts").clone(),
            }),
        )?;
        Some(name)
    };
    let manifest = Manifest {
        version: FORMAT_VERSION,
        split,
        dim,
        features: feat_name,
        transcripts,
        utterances: entries,
    };
    std::fs::write(
        dir.join(format!("{}.manifest.json", split.name())),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}

fn load_manifest(dir: &Path, split: Split) -> Result<Manifest> {
    let bytes = std::fs::read(dir.join(format!("{}.manifest.json", split.name())))?;
    let m: Manifest = serde_json::from_slice(&bytes).map_err(|e| Error::format("manifest", e.to_string()))?;
    if m.version != FORMAT_VERSION {
        return Err(Error::Version {
            what: "dataset manifest",
            found: m.version,
            expected: FORMAT_VERSION,
        });
    }
    if m.split != split {
        return Err(Error::format("manifest", format!("expected split {}, found {:?}", split.name(), m.split)));
    }
    Ok(m)
}

fn load_features(dir: &Path, m: &Manifest) -> Result<Vec<(String, Features)>> {
    let mut r = BufReader::new(File::open(dir.join(&m.features))?);
    m.utterances
        .iter()
        .map(|e| {
            let f = read_features(&mut r, e.offset)?;
            if f.frames != e.frames || f.dim != m.dim {
                return Err(Error::format("feature file", format!("record {} disagrees with manifest", e.id)));
            }
            Ok((e.id.clone(), f))
        })
        .collect()
}

fn load_labelled(dir: &Path, split: Split) -> Result<Vec<Utterance>> {
    let m = load_manifest(dir, split)?;
    let feats = load_features(dir, &m)?;
    let name = m
        .transcripts
        .as_ref()
        .ok_or_else(|| Error::format("manifest", format!("{} split without transcripts", split.name())))?;
    let trans: BTreeMap<String, TokenSeq> = read_jsonl::<TranscriptLine>(&dir.join(name), "transcripts")?
        .into_iter()
        .map(|l| (l.id, l.tokens))
        .collect();
    feats
        .into_iter()
        .map(|(id, features)| {
            let tokens = trans
                .get(&id)
                .cloned()
                .ok_or_else(|| Error::format("transcripts", format!("no transcript for {id}")))?;
            Ok(Utterance { id, features, tokens })
        })
        .collect()
}

const SEALED_FILE: &str = "unlabelled.sealed.jsonl";
const LM_TEXT_FILE: &str = "lm_text.jsonl";
const CONFIG_FILE: &str = "synth_config.json";

impl Dataset {
    pub fn save(&self, dir: &Path, sealed: &SealedReferences) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(CONFIG_FILE), serde_json::to_vec_pretty(&self.config)?)?;
        let dim = self.config.feature_dim;
        let lab = |us: &[Utterance]| -> Vec<(String, Features, TokenSeq)> {
            us.iter().map(|u| (u.id.clone(), u.features.clone(), u.tokens.clone())).collect()
        };
        for (split, rows) in [
            (Split::Labelled, lab(&self.labelled)),
            (Split::Dev, lab(&self.dev)),
            (Split::Test, lab(&self.test)),
        ] {
            let items: Vec<_> = rows.iter().map(|(i, f, y)| (i.as_str(), f, Some(y))).collect();
            save_split(dir, split, dim, &items)?;
        }
        let items: Vec<_> = self.unlabelled.iter().map(|u| (u.id.as_str(), &u.features, None)).collect();
        save_split(dir, Split::Unlabelled, dim, &items)?;
        write_jsonl(
            &dir.join(SEALED_FILE),
            sealed.0.iter().map(|(id, y)| TranscriptLine {
                id: id.clone(),
                tokens: y.clone(),
            }),
        )?;
        write_jsonl(&dir.join(LM_TEXT_FILE), self.lm_text.iter())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config: SynthConfig = serde_json::from_slice(&std::fs::read(dir.join(CONFIG_FILE))?)
            .map_err(|e| Error::format("synth config", e.to_string()))?;
        let m = load_manifest(dir, Split::Unlabelled)?;
        let unlabelled = load_features(dir, &m)?
            .into_iter()
            .map(|(id, features)| UnlabelledUtterance { id, features })
            .collect();
        Ok(Self {
            labelled: load_labelled(dir, Split::Labelled)?,
            unlabelled,
            dev: load_labelled(dir, Split::Dev)?,
            test: load_labelled(dir, Split::Test)?,
            lm_text: read_jsonl(&dir.join(LM_TEXT_FILE), "LM text")?,
            config,
        })
    }

    /// Labelled evaluation or training split by name.
    pub fn labelled_split(&self, split: Split) -> Result<&[Utterance]> {
        match split {
            Split::Labelled => Ok(&self.labelled),
            Split::Dev => Ok(&self.dev),
            Split::Test => Ok(&self.test),
            Split::Unlabelled => Err(Error::invalid("the unlabelled split has no transcripts")),
        }
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.config.vocab).expect("validated at generation")
    }
}

impl SealedReferences {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self(
            read_jsonl::<TranscriptLine>(&dir.join(SEALED_FILE), "sealed references")?
                .into_iter()
                .map(|l| (l.id, l.tokens))
                .collect(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SynthConfig {
        SynthConfig {
            vocab: 5,
            feature_dim: 8,
            n_labelled: 6,
            n_unlabelled: 9,
            n_dev: 3,
            n_test: 2,
            n_lm_text: 4,
            seed: 42,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_generation() {
        let (a, sa) = generate(&tiny()).unwrap();
        let (b, sb) = generate(&tiny()).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        let mut other = tiny();
        other.seed = 43;
        assert_ne!(generate(&other).unwrap().0, a);
    }

    #[test]
    fn class_means_distinct() {
        let m = class_means(&tiny());
        for i in 1..5 {
            for j in i + 1..5 {
                assert_ne!(m[i], m[j]);
            }
        }
    }

    #[test]
    fn noiseless_frames_equal_class_means() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            jitter: false,
            ..tiny()
        };
        let (d, _) = generate(&cfg).unwrap();
        let means = class_means(&cfg);
        for u in &d.labelled {
            assert_eq!(u.features.frames(), u.tokens.len() * cfg.frames_per_token);
            for (i, &k) in u.tokens.as_slice().iter().enumerate() {
                assert_eq!(u.features.frame(i * cfg.frames_per_token), &means[k][..]);
            }
        }
    }

    #[test]
    fn split_sizes_and_disjoint_ids() {
        let (d, sealed) = generate(&tiny()).unwrap();
        assert_eq!((d.labelled.len(), d.unlabelled.len(), d.dev.len(), d.test.len()), (6, 9, 3, 2));
        assert_eq!(sealed.0.len(), 9);
        let mut ids: Vec<&str> = d.labelled.iter().map(|u| u.id.as_str()).collect();
        ids.extend(d.unlabelled.iter().map(|u| u.id.as_str()));
        ids.extend(d.dev.iter().chain(&d.test).map(|u| u.id.as_str()));
        let n = ids.len();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), n);
    }

    #[test]
    fn save_load_round_trip() {
        let (d, sealed) = generate(&tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path(), &sealed).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, d);
        assert_eq!(SealedReferences::load(dir.path()).unwrap(), sealed);

        let m = std::fs::read_to_string(dir.path().join("unlabelled.manifest.json")).unwrap();
        assert!(m.contains("\"transcripts\": null"));
        assert!(!dir.path().join("unlabelled.trans.jsonl").exists());
        assert!(dir.path().join("dev.trans.jsonl").exists());
    }

    #[test]
    fn load_rejects_version_and_corruption() {
        let (d, sealed) = generate(&tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path(), &sealed).unwrap();
        let p = dir.path().join("dev.manifest.json");
        let text = std::fs::read_to_string(&p).unwrap();
        std::fs::write(&p, text.replace("\"version\": 1", "\"version\": 7")).unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::Version { .. })));
        std::fs::write(&p, &text).unwrap();

        let f = dir.path().join("test.feat");
        let mut bytes = std::fs::read(&f).unwrap();
        bytes[0] = b'Z';
        std::fs::write(&f, bytes).unwrap();
        assert!(Dataset::load(dir.path()).is_err());
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = tiny();
        c.min_tokens = 5;
        c.max_tokens = 2;
        assert!(generate(&c).is_err());
        let mut c = tiny();
        c.noise_sigma = -1.0;
        assert!(generate(&c).is_err());
    }
}
