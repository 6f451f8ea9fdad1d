//! Synthetic paired face/voice corpus with a heard/unheard language protocol,
//! plus the dataset and trial-list file formats.
//!
//! Each identity `i` has a latent `zᵢ ~ N(0, I_k)`. Face features are
//! `A_f zᵢ + ε`; voice features in language `L` are `A_v zᵢ + b_L + ε`, where
//! `b_L1 = 0` and `b_L2 ~ N(0, σ_shift² I)` is drawn once. `A_f` and `A_v`
//! have i.i.d. `N(0, 1/k)` entries so every feature has roughly unit variance.
//! Training identities only ever speak L1; evaluation identities are disjoint
//! from them and are recorded in both languages.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use crate::codec::{self, FileError, Reader, Writer};
use crate::config::{fmt_exact, parse_value, unknown_key, FlatConfig};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, RandomSource};

/// Nontarget trials drawn per face sample; one target is drawn per face
/// sample, giving a 5:1 nontarget:target ratio.
pub const NONTARGETS_PER_TARGET: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub num_train_identities: usize,
    pub num_eval_identities: usize,
    pub latent_dim: usize,
    pub face_dim: usize,
    pub voice_dim: usize,
    pub samples_per_identity_per_modality: usize,
    pub obs_noise_sigma: f64,
    pub language_shift_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_train_identities: 40,
            num_eval_identities: 20,
            latent_dim: 16,
            face_dim: 32,
            voice_dim: 32,
            samples_per_identity_per_modality: 20,
            obs_noise_sigma: 0.2,
            language_shift_sigma: 1.0,
            seed: 0,
        }
    }
}

impl FlatConfig for SyntheticConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "num_train_identities" => self.num_train_identities = parse_value(key, value)?,
            "num_eval_identities" => self.num_eval_identities = parse_value(key, value)?,
            "latent_dim" => self.latent_dim = parse_value(key, value)?,
            "face_dim" => self.face_dim = parse_value(key, value)?,
            "voice_dim" => self.voice_dim = parse_value(key, value)?,
            "samples_per_identity_per_modality" => {
                self.samples_per_identity_per_modality = parse_value(key, value)?
            }
            "obs_noise_sigma" => self.obs_noise_sigma = parse_value(key, value)?,
            "language_shift_sigma" => self.language_shift_sigma = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Err(unknown_key(key)),
        }
        Ok(())
    }

    fn to_text(&self) -> String {
        format!(
            "num_train_identities = {}\nnum_eval_identities = {}\nlatent_dim = {}\n\
             face_dim = {}\nvoice_dim = {}\nsamples_per_identity_per_modality = {}\n\
             obs_noise_sigma = {}\nlanguage_shift_sigma = {}\nseed = {}\n",
            self.num_train_identities,
            self.num_eval_identities,
            self.latent_dim,
            self.face_dim,
            self.voice_dim,
            self.samples_per_identity_per_modality,
            fmt_exact(self.obs_noise_sigma),
            fmt_exact(self.language_shift_sigma),
            self.seed
        )
    }

    fn validate(&self) -> Result<()> {
        let counts = [
            ("num_train_identities", self.num_train_identities),
            ("num_eval_identities", self.num_eval_identities),
            ("latent_dim", self.latent_dim),
            ("face_dim", self.face_dim),
            ("voice_dim", self.voice_dim),
            (
                "samples_per_identity_per_modality",
                self.samples_per_identity_per_modality,
            ),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::validation(format!("{name} must be >= 1")));
            }
        }
        if self.num_train_identities < 2 {
            return Err(Error::validation("num_train_identities must be >= 2"));
        }
        if self.num_eval_identities < 2 {
            return Err(Error::validation(
                "num_eval_identities must be >= 2 to form nontarget trials",
            ));
        }
        let others = (self.num_eval_identities - 1) * self.samples_per_identity_per_modality;
        if others < NONTARGETS_PER_TARGET {
            return Err(Error::validation(format!(
                "need at least {NONTARGETS_PER_TARGET} other-identity voice samples per face, have {others}"
            )));
        }
        for (name, v) in [
            ("obs_noise_sigma", self.obs_noise_sigma),
            ("language_shift_sigma", self.language_shift_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Language {
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Eval,
}

/// Evaluation condition: heard trials use the training language, unheard
/// trials the held-out one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Condition {
    Heard,
    Unheard,
}

impl Condition {
    pub const ALL: [Condition; 2] = [Condition::Heard, Condition::Unheard];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Heard => "heard",
            Condition::Unheard => "unheard",
        }
    }

    pub fn language(self) -> Language {
        match self {
            Condition::Heard => Language::L1,
            Condition::Unheard => Language::L2,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heard" => Ok(Condition::Heard),
            "unheard" => Ok(Condition::Unheard),
            other => Err(Error::validation(format!("unknown condition {other:?}"))),
        }
    }
}

/// One recording occasion: co-indexed face and voice features of a single
/// identity. `id` is the sample's position in [`Dataset::samples`].
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub id: usize,
    pub identity: usize,
    pub split: Split,
    pub language: Language,
    pub face: Vec<f64>,
    pub voice: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Trial {
    pub face_id: usize,
    pub voice_id: usize,
    pub is_target: bool,
    pub condition: Condition,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    /// Sorts into canonical order: condition, then face id, then voice id.
    pub fn canonicalize(&mut self) {
        self.trials
            .sort_by_key(|t| (t.condition, t.face_id, t.voice_id, t.is_target));
    }

    /// One line per trial: `face_id voice_id target|nontarget heard|unheard`.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.trials.len() * 24);
        for t in &self.trials {
            out.push_str(&format!(
                "{} {} {} {}\n",
                t.face_id,
                t.voice_id,
                if t.is_target { "target" } else { "nontarget" },
                t.condition
            ));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut trials = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let bad = || Error::validation(format!("trial line {}: {line:?}", lineno + 1));
            let fields: Vec<&str> = line.split(' ').collect();
            if fields.len() != 4 {
                return Err(bad());
            }
            let is_target = match fields[2] {
                "target" => true,
                "nontarget" => false,
                _ => return Err(bad()),
            };
            trials.push(Trial {
                face_id: fields[0].parse().map_err(|_| bad())?,
                voice_id: fields[1].parse().map_err(|_| bad())?,
                is_target,
                condition: fields[3].parse().map_err(|_| bad())?,
            });
        }
        Ok(Self { trials })
    }
}

/// Generated corpus: all samples (train and eval) plus the eval trial list.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SyntheticConfig,
    pub samples: Vec<PairedSample>,
    pub trials: TrialList,
}

impl Dataset {
    pub fn train_samples(&self) -> impl Iterator<Item = &PairedSample> {
        self.samples.iter().filter(|s| s.split == Split::Train)
    }

    pub fn eval_samples(&self) -> impl Iterator<Item = &PairedSample> {
        self.samples.iter().filter(|s| s.split == Split::Eval)
    }

    pub fn sample(&self, id: usize) -> Result<&PairedSample> {
        self.samples
            .get(id)
            .ok_or_else(|| Error::validation(format!("sample id {id} does not exist")))
    }

    /// Number of classifier classes: training identities are labelled
    /// `0..num_train_identities`.
    pub fn num_classes(&self) -> usize {
        self.config.num_train_identities
    }

    pub fn face_dim(&self) -> usize {
        self.config.face_dim
    }

    pub fn voice_dim(&self) -> usize {
        self.config.voice_dim
    }

    /// Checks structural invariants: ids, feature widths, split membership
    /// and, for a nonempty trial list, that every condition has both targets
    /// and nontargets.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let n_train = self.config.num_train_identities;
        let n_total = n_train + self.config.num_eval_identities;
        for (pos, s) in self.samples.iter().enumerate() {
            if s.id != pos {
                return Err(Error::validation(format!("sample at {pos} has id {}", s.id)));
            }
            if s.face.len() != self.config.face_dim || s.voice.len() != self.config.voice_dim {
                return Err(Error::validation(format!("sample {pos} has wrong feature width")));
            }
            let in_split = match s.split {
                Split::Train => s.identity < n_train && s.language == Language::L1,
                Split::Eval => (n_train..n_total).contains(&s.identity),
            };
            if !in_split {
                return Err(Error::validation(format!(
                    "sample {pos} identity {} is outside its split",
                    s.identity
                )));
            }
        }
        for t in &self.trials.trials {
            for id in [t.face_id, t.voice_id] {
                let s = self.sample(id)?;
                if s.split != Split::Eval {
                    return Err(Error::validation(format!("trial references train sample {id}")));
                }
            }
            let same = self.samples[t.face_id].identity == self.samples[t.voice_id].identity;
            if same != t.is_target {
                return Err(Error::validation(format!(
                    "trial ({}, {}) has the wrong target label",
                    t.face_id, t.voice_id
                )));
            }
        }
        if !self.trials.is_empty() {
            for c in Condition::ALL {
                let has = |target: bool| {
                    self.trials
                        .trials
                        .iter()
                        .any(|t| t.condition == c && t.is_target == target)
                };
                if !has(true) || !has(false) {
                    return Err(Error::validation(format!(
                        "condition {c} needs both target and nontarget trials"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Fixed parameters of the generative model.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    /// `face_dim × k`
    pub face_map: Matrix,
    /// `voice_dim × k`
    pub voice_map: Matrix,
    /// Additive voice offset for L2.
    pub language_shift: Vec<f64>,
    /// One latent per identity, train identities first.
    pub latents: Vec<Vec<f64>>,
}

impl SyntheticWorld {
    pub fn sample(cfg: &SyntheticConfig) -> Result<Self> {
        cfg.validate()?;
        let root = RandomSource::new(cfg.seed).split("world");
        let k = cfg.latent_dim;
        let map_std = 1.0 / (k as f64).sqrt();
        let face_map = Matrix::gaussian(cfg.face_dim, k, map_std, &mut root.split("face_map"));
        let voice_map = Matrix::gaussian(cfg.voice_dim, k, map_std, &mut root.split("voice_map"));
        let mut shift_rng = root.split("language_shift");
        let language_shift = (0..cfg.voice_dim)
            .map(|_| cfg.language_shift_sigma * shift_rng.normal())
            .collect();
        let n = cfg.num_train_identities + cfg.num_eval_identities;
        let latents = (0..n)
            .map(|i| {
                let mut r = root.split(&format!("latent{i}"));
                (0..k).map(|_| r.normal()).collect()
            })
            .collect();
        Ok(Self {
            face_map,
            voice_map,
            language_shift,
            latents,
        })
    }

    /// Noise-free face features of `identity`.
    pub fn face_mean(&self, identity: usize) -> Vec<f64> {
        project(&self.face_map, &self.latents[identity])
    }

    /// Noise-free voice features of `identity` in `language`.
    pub fn voice_mean(&self, identity: usize, language: Language) -> Vec<f64> {
        let mut v = project(&self.voice_map, &self.latents[identity]);
        if language == Language::L2 {
            for (x, b) in v.iter_mut().zip(&self.language_shift) {
                *x += b;
            }
        }
        v
    }
}

fn project(map: &Matrix, z: &[f64]) -> Vec<f64> {
    (0..map.rows()).map(|r| crate::numerics::dot(map.row(r), z)).collect()
}

fn noisy(mean: Vec<f64>, sigma: f64, rng: &mut RandomSource) -> Vec<f64> {
    mean.into_iter().map(|m| m + sigma * rng.normal()).collect()
}

/// Draws the full corpus and trial list for `cfg`.
pub fn generate_dataset(cfg: &SyntheticConfig) -> Result<Dataset> {
    let world = SyntheticWorld::sample(cfg)?;
    let root = RandomSource::new(cfg.seed);
    let n_train = cfg.num_train_identities;
    let n_total = n_train + cfg.num_eval_identities;
    let per = cfg.samples_per_identity_per_modality;

    let mut samples = Vec::with_capacity(n_train * per + cfg.num_eval_identities * per * 2);
    for identity in 0..n_total {
        let (split, languages): (Split, &[Language]) = if identity < n_train {
            (Split::Train, &[Language::L1])
        } else {
            (Split::Eval, &[Language::L1, Language::L2])
        };
        let face_mean = world.face_mean(identity);
        for &language in languages {
            let voice_mean = world.voice_mean(identity, language);
            let mut rng = root.split(&format!("samples/{identity}/{language:?}"));
            for _ in 0..per {
                let face = noisy(face_mean.clone(), cfg.obs_noise_sigma, &mut rng);
                let voice = noisy(voice_mean.clone(), cfg.obs_noise_sigma, &mut rng);
                samples.push(PairedSample {
                    id: samples.len(),
                    identity,
                    split,
                    language,
                    face,
                    voice,
                });
            }
        }
    }

    let trials = build_trials(&samples, &mut root.split("trials"));
    let dataset = Dataset {
        config: cfg.clone(),
        samples,
        trials,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Per condition: each eval face sample is paired with one random
/// same-identity voice sample (target) and `NONTARGETS_PER_TARGET` distinct
/// random other-identity voice samples, all from that condition's language.
fn build_trials(samples: &[PairedSample], rng: &mut RandomSource) -> TrialList {
    let mut trials = Vec::new();
    for condition in Condition::ALL {
        let pool: Vec<&PairedSample> = samples
            .iter()
            .filter(|s| s.split == Split::Eval && s.language == condition.language())
            .collect();
        for face in &pool {
            let same: Vec<usize> = pool
                .iter()
                .filter(|s| s.identity == face.identity)
                .map(|s| s.id)
                .collect();
            let mut others: Vec<usize> = pool
                .iter()
                .filter(|s| s.identity != face.identity)
                .map(|s| s.id)
                .collect();
            trials.push(Trial {
                face_id: face.id,
                voice_id: same[rng.below(same.len())],
                is_target: true,
                condition,
            });
            // partial Fisher-Yates: first NONTARGETS_PER_TARGET slots
            for slot in 0..NONTARGETS_PER_TARGET {
                let pick = slot + rng.below(others.len() - slot);
                others.swap(slot, pick);
                trials.push(Trial {
                    face_id: face.id,
                    voice_id: others[slot],
                    is_target: false,
                    condition,
                });
            }
        }
    }
    let mut list = TrialList { trials };
    list.canonicalize();
    list
}

/// Identities present in the given split.
pub fn identities(dataset: &Dataset, split: Split) -> BTreeSet<usize> {
    dataset
        .samples
        .iter()
        .filter(|s| s.split == split)
        .map(|s| s.identity)
        .collect()
}

const DATA_MAGIC: &[u8; codec::MAGIC_LEN] = b"XMALIGN-DATA";
pub const DATA_VERSION: u32 = 1;

fn language_code(l: Language) -> u8 {
    match l {
        Language::L1 => 0,
        Language::L2 => 1,
    }
}

fn condition_code(c: Condition) -> u8 {
    match c {
        Condition::Heard => 0,
        Condition::Unheard => 1,
    }
}

pub fn encode_dataset(dataset: &Dataset) -> Vec<u8> {
    let mut w = Writer::default();
    w.str(&dataset.config.to_text());
    w.u32(dataset.samples.len() as u32);
    for s in &dataset.samples {
        w.u32(s.identity as u32);
        w.u8(match s.split {
            Split::Train => 0,
            Split::Eval => 1,
        });
        w.u8(language_code(s.language));
        w.f64s(&s.face);
        w.f64s(&s.voice);
    }
    w.u32(dataset.trials.len() as u32);
    for t in &dataset.trials.trials {
        w.u32(t.face_id as u32);
        w.u32(t.voice_id as u32);
        w.u8(t.is_target as u8);
        w.u8(condition_code(t.condition));
    }
    codec::seal(DATA_MAGIC, DATA_VERSION, &w.into_bytes())
}

pub fn decode_dataset(bytes: &[u8]) -> std::result::Result<Dataset, FileError> {
    let body = codec::open(bytes, DATA_MAGIC, DATA_VERSION)?;
    let mut r = Reader::new(body);
    let config = SyntheticConfig::from_text(&r.str()?)?;
    let n = r.u32()? as usize;
    let mut samples = Vec::with_capacity(n.min(1 << 20));
    for id in 0..n {
        let identity = r.u32()? as usize;
        let split = match r.u8()? {
            0 => Split::Train,
            1 => Split::Eval,
            v => return Err(FileError::format(format!("bad split code {v}"))),
        };
        let language = match r.u8()? {
            0 => Language::L1,
            1 => Language::L2,
            v => return Err(FileError::format(format!("bad language code {v}"))),
        };
        let face = r.f64s()?;
        let voice = r.f64s()?;
        samples.push(PairedSample {
            id,
            identity,
            split,
            language,
            face,
            voice,
        });
    }
    let n = r.u32()? as usize;
    let mut trials = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let face_id = r.u32()? as usize;
        let voice_id = r.u32()? as usize;
        let is_target = match r.u8()? {
            0 => false,
            1 => true,
            v => return Err(FileError::format(format!("bad target flag {v}"))),
        };
        let condition = match r.u8()? {
            0 => Condition::Heard,
            1 => Condition::Unheard,
            v => return Err(FileError::format(format!("bad condition code {v}"))),
        };
        trials.push(Trial {
            face_id,
            voice_id,
            is_target,
            condition,
        });
    }
    r.finish()?;
    let dataset = Dataset {
        config,
        samples,
        trials: TrialList { trials },
    };
    dataset.validate()?;
    Ok(dataset)
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> std::result::Result<(), FileError> {
    fs::write(path, encode_dataset(dataset))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> std::result::Result<Dataset, FileError> {
    decode_dataset(&fs::read(path)?)
}
