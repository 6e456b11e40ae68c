//! Synthetic scenario videos: aligned image/motion sequences made of
//! piecewise-constant segments, plus captions listing the segments.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TokenId, TokenSequence, BOS, EOS, PAD};
use crate::numkit::{Real, Tensor};

/// First token id used by scene tokens; scene `s` maps to `SCENE_BASE + s`.
pub const SCENE_BASE: TokenId = 3;

/// Ground-truth segmentation of a generated record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    /// Start index of each segment; the first is 0.
    pub boundaries: Vec<usize>,
    pub scenario_ids: Vec<usize>,
    #[serde(rename = "T")]
    pub t: usize,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.boundaries.first() == Some(&0)
            && self.boundaries.windows(2).all(|w| w[0] < w[1])
            && self.boundaries.last().is_some_and(|&b| b < self.t)
            && self.boundaries.len() == self.scenario_ids.len()
            && self.scenario_ids.windows(2).all(|w| w[0] != w[1]);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("inconsistent scenario spec {self:?}")))
        }
    }

    /// Segment index of every step.
    pub fn segment_of_steps(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.t);
        for (s, &start) in self.boundaries.iter().enumerate() {
            let end = self.boundaries.get(s + 1).copied().unwrap_or(self.t);
            out.extend(std::iter::repeat_n(s, end - start));
        }
        out
    }
}

/// The caption a spec describes: BOS, one scene token per segment, EOS.
pub fn caption_for(spec: &ScenarioSpec) -> TokenSequence {
    let mut ids = vec![BOS];
    ids.extend(spec.scenario_ids.iter().map(|&s| SCENE_BASE + s as TokenId));
    ids.push(EOS);
    TokenSequence(ids)
}

/// One sample: aligned feature matrices and reference captions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: String,
    pub image_features: Vec<Vec<f32>>,
    pub motion_features: Vec<Vec<f32>>,
    pub captions: Vec<TokenSequence>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<ScenarioSpec>,
}

impl CaptionRecord {
    pub fn steps(&self) -> usize {
        self.image_features.len()
    }

    pub fn image<R: Real>(&self) -> Result<Tensor<R>> {
        to_tensor(&self.image_features)
    }

    pub fn motion<R: Real>(&self) -> Result<Tensor<R>> {
        to_tensor(&self.motion_features)
    }

    /// The caption used for training and teacher-forced metrics.
    pub fn primary_caption(&self) -> Result<&TokenSequence> {
        self.captions
            .first()
            .ok_or_else(|| Error::Config(format!("record {} has no caption", self.id)))
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.image_features.len() != self.motion_features.len() {
            return Err(String::new());
        }
        let width = self.image_features.first().map_or(0, |r| r.len());
        if self
            .image_features
            .iter()
            .chain(&self.motion_features)
            .any(|r| r.len() != width)
        {
            return Err(format!("feature rows of record {} differ in width", self.id));
        }
        if self.captions.iter().any(|c| c.is_empty()) {
            return Err(format!("record {} has an empty caption", self.id));
        }
        if let Some(spec) = &self.spec {
            if spec.t != self.steps() || spec.validate().is_err() {
                return Err(format!("record {} has an inconsistent scenario spec", self.id));
            }
        }
        Ok(())
    }
}

fn to_tensor<R: Real>(rows: &[Vec<f32>]) -> Result<Tensor<R>> {
    let cols = rows.first().map_or(0, |r| r.len());
    let mut data = Vec::with_capacity(rows.len() * cols);
    for r in rows {
        if r.len() != cols {
            return Err(Error::dim("features", "ragged feature rows"));
        }
        data.extend(r.iter().map(|&v| R::of(v as f64)));
    }
    Tensor::new(&[rows.len(), cols], data)
}

/// Fixed prototype vectors per scene and modality, shared by every record
/// of a dataset so that scene tokens are learnable.
#[derive(Clone, Debug)]
pub struct SceneBank {
    image: Vec<Vec<f64>>,
    motion: Vec<Vec<f64>>,
}

fn unit_vector(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

impl SceneBank {
    pub const DEFAULT_SCENES: usize = 5;
    pub const DEFAULT_SEED: u64 = 0x5ba7;

    pub fn new(num_scenes: usize, d_feat: usize, seed: u64) -> Result<Self> {
        if num_scenes < 2 || d_feat == 0 {
            return Err(Error::Config("a scene bank needs at least 2 scenes and d_feat > 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = (0..num_scenes).map(|_| unit_vector(d_feat, &mut rng)).collect();
        let motion = (0..num_scenes).map(|_| unit_vector(d_feat, &mut rng)).collect();
        Ok(SceneBank { image, motion })
    }

    pub fn num_scenes(&self) -> usize {
        self.image.len()
    }

    pub fn d_feat(&self) -> usize {
        self.image[0].len()
    }

    pub fn image_prototype(&self, scene: usize) -> &[f64] {
        &self.image[scene]
    }

    pub fn motion_prototype(&self, scene: usize) -> &[f64] {
        &self.motion[scene]
    }

    /// Draws a `t`-step record with `k` segments of at least two steps each.
    /// Boundary sets are uniform over all admissible segmentations.
    pub fn record(&self, id: String, t: usize, k: usize, sigma: f64, seed: u64) -> Result<CaptionRecord> {
        if k < 2 || 2 * k > t {
            return Err(Error::Config(format!(
                "cannot place {k} segments of at least 2 steps in {t} steps"
            )));
        }
        if k > self.num_scenes() {
            return Err(Error::Config(format!(
                "{k} distinct scenes requested from a bank of {}",
                self.num_scenes()
            )));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!("noise level {sigma} must be finite and >= 0")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scenario_ids = sample(&mut rng, self.num_scenes(), k).into_vec();
        // Stars and bars: k-1 bars among (t - 2k) spare steps.
        let spare = t - 2 * k;
        let mut bars = sample(&mut rng, spare + k - 1, k - 1).into_vec();
        bars.sort_unstable();
        let mut boundaries = vec![0];
        // b - i spare steps precede bar i.
        boundaries.extend(bars.iter().enumerate().map(|(i, &b)| 2 * (i + 1) + b - i));
        let spec = ScenarioSpec {
            boundaries,
            scenario_ids,
            t,
        };
        spec.validate()?;
        let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
        let segment = spec.segment_of_steps();
        let fill = |bank: &Vec<Vec<f64>>, rng: &mut ChaCha8Rng| -> Vec<Vec<f32>> {
            segment
                .iter()
                .map(|&s| {
                    bank[spec.scenario_ids[s]]
                        .iter()
                        .map(|&v| {
                            let n = if sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                            (v + n) as f32
                        })
                        .collect()
                })
                .collect()
        };
        let image_features = fill(&self.image, &mut rng);
        let motion_features = fill(&self.motion, &mut rng);
        Ok(CaptionRecord {
            id,
            image_features,
            motion_features,
            captions: vec![caption_for(&spec)],
            spec: Some(spec),
        })
    }
}

/// One record drawn from the default scene bank.
pub fn gen_scenario_sequence(t: usize, k: usize, d_feat: usize, sigma: f64, seed: u64) -> Result<CaptionRecord> {
    let bank = SceneBank::new(SceneBank::DEFAULT_SCENES, d_feat, SceneBank::DEFAULT_SEED)?;
    bank.record(format!("seq-{seed}"), t, k, sigma, seed)
}

/// Token name to id map.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vocab {
    tokens: BTreeMap<String, TokenId>,
}

impl Vocab {
    /// Reserved tokens plus the scenes present in `records`.
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a CaptionRecord>) -> Self {
        let mut tokens = BTreeMap::from([
            ("<bos>".to_string(), BOS),
            ("<eos>".to_string(), EOS),
            ("<pad>".to_string(), PAD),
        ]);
        for r in records {
            for c in &r.captions {
                for &id in c.ids().iter().filter(|&&id| id >= SCENE_BASE) {
                    tokens.insert(format!("scene_{}", id - SCENE_BASE), id);
                }
            }
        }
        Vocab { tokens }
    }

    /// Smallest model vocabulary covering every id.
    pub fn size(&self) -> usize {
        self.tokens.values().max().map_or(0, |&m| m as usize + 1)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.tokens.get(token).copied()
    }

    pub fn name(&self, id: TokenId) -> Option<&str> {
        self.tokens.iter().find(|(_, &v)| v == id).map(|(k, _)| k.as_str())
    }

    /// Space-separated token names; unknown ids print as `<id>`.
    pub fn render(&self, seq: &TokenSequence) -> String {
        seq.ids()
            .iter()
            .map(|&id| self.name(id).map_or_else(|| format!("<{id}>"), str::to_string))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Arguments of [`gen_dataset`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub count: usize,
    /// Train / val / test fractions.
    pub split: [f64; 3],
    #[serde(rename = "T")]
    pub t: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub d_feat: usize,
    pub sigma: f64,
    pub seed: u64,
    pub num_scenes: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            count: 100,
            split: [0.8, 0.1, 0.1],
            t: 32,
            k_min: 2,
            k_max: 5,
            d_feat: 32,
            sigma: 0.05,
            seed: 0,
            num_scenes: SceneBank::DEFAULT_SCENES,
        }
    }
}

impl DatasetConfig {
    /// Record counts per split.
    pub fn split_counts(&self) -> Result<[usize; 3]> {
        let total: f64 = self.split.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.split.iter().any(|&r| !(0.0..=1.0).contains(&r)) {
            return Err(Error::Config(format!("split ratios {:?} must be in [0,1] and sum to 1", self.split)));
        }
        let train = (self.count as f64 * self.split[0]).round() as usize;
        let val = ((self.count as f64 * self.split[1]).round() as usize).min(self.count - train);
        Ok([train, val, self.count - train - val])
    }
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

pub fn split_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.jsonl"))
}

pub fn vocab_path(dir: &Path) -> PathBuf {
    dir.join("vocab.json")
}

/// Generates all records in memory, split into train / val / test.
pub fn generate_splits(cfg: &DatasetConfig) -> Result<[Vec<CaptionRecord>; 3]> {
    if cfg.k_min < 2 || cfg.k_min > cfg.k_max {
        return Err(Error::Config(format!("invalid k range {}..={}", cfg.k_min, cfg.k_max)));
    }
    let counts = cfg.split_counts()?;
    let bank = SceneBank::new(cfg.num_scenes, cfg.d_feat, cfg.seed)?;
    let records = (0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let seed = cfg.seed.wrapping_add(1 + i as u64);
            let k = ChaCha8Rng::seed_from_u64(seed ^ 0x6b_6b6b).gen_range(cfg.k_min..=cfg.k_max);
            bank.record(format!("rec-{i:05}"), cfg.t, k, cfg.sigma, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut it = records.into_iter();
    let mut take = |n: usize| it.by_ref().take(n).collect::<Vec<_>>();
    Ok([take(counts[0]), take(counts[1]), take(counts[2])])
}

/// Writes `train.jsonl`, `val.jsonl`, `test.jsonl` and `vocab.json` into `dir`.
pub fn gen_dataset(cfg: &DatasetConfig, dir: &Path) -> Result<Vocab> {
    let splits = generate_splits(cfg)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, records) in SPLITS.iter().zip(&splits) {
        save_dataset(&split_path(dir, name), records)?;
    }
    let vocab = Vocab::from_records(splits.iter().flatten());
    vocab.save(&vocab_path(dir))?;
    Ok(vocab)
}

pub fn save_dataset(path: &Path, records: &[CaptionRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads one record per line; blank lines are skipped.
pub fn load_dataset(path: &Path) -> Result<Vec<CaptionRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let record: CaptionRecord = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        match record.check() {
            Ok(()) => records.push(record),
            Err(msg) if msg.is_empty() => {
                return Err(Error::Alignment {
                    image: record.image_features.len(),
                    motion: record.motion_features.len(),
                })
            }
            Err(msg) => return Err(parse(msg)),
        }
    }
    Ok(records)
}

/// A split of a generated dataset directory.
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<CaptionRecord>> {
    load_dataset(&split_path(dir, split))
}
