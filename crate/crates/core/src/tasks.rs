//! Synthetic recall and state-tracking tasks.
//!
//! Every sample has one target per input position; positions with
//! `loss_mask[i] == false` carry the placeholder target `0` and are never
//! scored. Samples are generated independently from a per-sample seed, so a
//! dataset is a pure function of its configuration and seed.
//!
//! Token layouts:
//!
//! * **MQAR** — `k₁ v₁ … k_P v_P ⟨sep⟩ q₁ … q_Q ⟨pad⟩…`. Keys come from the
//!   first half of the vocabulary (excluding id 0), values from the second
//!   half. The queries are distinct keys in random order, each scored at its
//!   own position with that key's value.
//! * **S-NIAH** — a context of distractors containing one `key value` needle
//!   at a uniform position, then `⟨sep⟩ key`; the value is scored at the last
//!   position. Keys, values and distractors use disjoint vocabulary ranges.
//! * **Palindrome** — `x₁ … x_m ⟨sep⟩ x_m … x₁`. The position holding the
//!   `j`-th echoed token is scored with the `(j+1)`-th; the first echoed
//!   token is given and the final position is unscored.
//! * **Stack** — a sequence of `PUSH id value` and `POP id` operations over
//!   several stacks; each `POP` is scored at its id token with the value it
//!   removes. Pops of empty stacks are never generated; the tail is padded.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("infeasible task configuration: {0}")]
    Infeasible(String),
    #[error("no scored positions")]
    EmptyMask,
    #[error("prediction for sample {index} has length {got}, expected {expected}")]
    PredictionLength { index: usize, got: usize, expected: usize },
    #[error("malformed sample: {0}")]
    Malformed(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TaskError>;

/// Separator (and padding) token shared by all layouts.
pub const SEP: u32 = 0;
pub const STACK_PAD: u32 = 0;
pub const STACK_PUSH: u32 = 1;
pub const STACK_POP: u32 = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSample {
    pub input_ids: Vec<u32>,
    pub target_ids: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

impl TaskSample {
    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    pub fn scored(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.input_ids.len();
        if self.target_ids.len() != n || self.loss_mask.len() != n {
            return Err(TaskError::Malformed("field lengths differ".into()));
        }
        if self
            .target_ids
            .iter()
            .zip(&self.loss_mask)
            .any(|(&t, &m)| !m && t != SEP)
        {
            return Err(TaskError::Malformed("unscored position with a nonzero target".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Mqar,
    Sniah,
    Palindrome,
    Stack,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::Mqar, TaskKind::Sniah, TaskKind::Palindrome, TaskKind::Stack];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Mqar => "mqar",
            TaskKind::Sniah => "sniah",
            TaskKind::Palindrome => "palindrome",
            TaskKind::Stack => "stack",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "mqar" => Ok(TaskKind::Mqar),
            "sniah" => Ok(TaskKind::Sniah),
            "palindrome" => Ok(TaskKind::Palindrome),
            "stack" => Ok(TaskKind::Stack),
            other => Err(TaskError::Infeasible(format!("unknown task {other}"))),
        }
    }
}

/// Split sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl Default for Splits {
    fn default() -> Self {
        Self {
            train: 20_000,
            valid: 2_000,
            test: 2_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Valid => 2,
            Split::Test => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Base sequence length; the generated length is `length · extrapolation`.
    pub length: usize,
    pub vocab: usize,
    /// MQAR key-value pairs.
    pub num_pairs: usize,
    /// MQAR queries, at most `num_pairs`; `None` queries every key once.
    pub num_queries: Option<usize>,
    pub num_stacks: usize,
    /// Length multiplier for extrapolation sets (1, 2, 4 or 8).
    pub extrapolation: usize,
    pub splits: Splits,
}

impl TaskConfig {
    /// MQAR at the standard protocol: length 256, 32 pairs.
    pub fn mqar() -> Self {
        Self {
            kind: TaskKind::Mqar,
            length: 256,
            vocab: 8192,
            num_pairs: 32,
            num_queries: None,
            num_stacks: 0,
            extrapolation: 1,
            splits: Splits::default(),
        }
    }

    /// Toy MQAR: vocabulary 64, length 64, 8 pairs.
    pub fn toy_mqar() -> Self {
        Self {
            length: 64,
            vocab: 64,
            num_pairs: 8,
            ..Self::mqar()
        }
    }

    pub fn sniah(length: usize) -> Self {
        Self {
            kind: TaskKind::Sniah,
            length,
            vocab: 8192,
            num_pairs: 1,
            num_queries: None,
            num_stacks: 0,
            extrapolation: 1,
            splits: Splits::default(),
        }
    }

    pub fn palindrome(length: usize) -> Self {
        Self {
            kind: TaskKind::Palindrome,
            vocab: 64,
            ..Self::sniah(length)
        }
    }

    pub fn stack(length: usize, num_stacks: usize) -> Self {
        Self {
            kind: TaskKind::Stack,
            vocab: 64,
            num_stacks,
            ..Self::sniah(length)
        }
    }

    pub fn default_for(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Mqar => Self::mqar(),
            TaskKind::Sniah => Self::sniah(1024),
            TaskKind::Palindrome => Self::palindrome(257),
            TaskKind::Stack => Self::stack(256, 4),
        }
    }

    pub fn total_length(&self) -> usize {
        self.length * self.extrapolation
    }

    pub fn queries(&self) -> usize {
        self.num_queries.unwrap_or(self.num_pairs)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |s: String| Err(TaskError::Infeasible(s));
        if !matches!(self.extrapolation, 1 | 2 | 4 | 8) {
            return bad(format!("extrapolation factor {} not in {{1, 2, 4, 8}}", self.extrapolation));
        }
        let n = self.total_length();
        match self.kind {
            TaskKind::Mqar => {
                let half = self.vocab / 2;
                if self.num_pairs == 0 {
                    return bad("need at least one pair".into());
                }
                if half < 2 || self.num_pairs > half - 1 {
                    return bad(format!(
                        "{} pairs need {} distinct keys but vocabulary {} offers {}",
                        self.num_pairs,
                        self.num_pairs,
                        self.vocab,
                        half.saturating_sub(1)
                    ));
                }
                if self.queries() == 0 || self.queries() > self.num_pairs {
                    return bad(format!("{} queries over {} keys", self.queries(), self.num_pairs));
                }
                if 2 * self.num_pairs + 1 + self.queries() > n {
                    return bad(format!(
                        "{} pairs and {} queries do not fit length {n}",
                        self.num_pairs,
                        self.queries()
                    ));
                }
            }
            TaskKind::Sniah => {
                if n < 4 {
                    return bad(format!("length {n} below the minimum of 4"));
                }
                if self.vocab < 8 {
                    return bad("vocabulary too small for disjoint key, value and distractor ranges".into());
                }
            }
            TaskKind::Palindrome => {
                if n % 2 == 0 || n < 3 {
                    return bad(format!("palindrome length {n} must be odd and at least 3"));
                }
                if self.vocab < 2 {
                    return bad("vocabulary too small".into());
                }
            }
            TaskKind::Stack => {
                if self.num_stacks == 0 {
                    return bad("need at least one stack".into());
                }
                if self.vocab <= 3 + self.num_stacks {
                    return bad("vocabulary leaves no value tokens".into());
                }
                if n < 5 {
                    return bad(format!("length {n} cannot hold a push and a pop"));
                }
            }
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.splits.train,
            Split::Valid => self.splits.valid,
            Split::Test => self.splits.test,
        }
    }
}

/// Seed of sample `index` in `split`.
pub fn sample_seed(seed: u64, split: Split, index: usize) -> u64 {
    seed ^ (split.tag() << 48) ^ index as u64
}

/// Generates one sample.
pub fn generate_sample(cfg: &TaskConfig, seed: u64) -> Result<TaskSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = match cfg.kind {
        TaskKind::Mqar => mqar(cfg, &mut rng),
        TaskKind::Sniah => sniah(cfg, &mut rng),
        TaskKind::Palindrome => palindrome(cfg, &mut rng),
        TaskKind::Stack => stack(cfg, &mut rng),
    };
    debug_assert!(sample.validate().is_ok());
    Ok(sample)
}

/// Generates `cfg.count(split)` samples.
pub fn generate_split(cfg: &TaskConfig, seed: u64, split: Split) -> Result<Vec<TaskSample>> {
    cfg.validate()?;
    (0..cfg.count(split))
        .map(|i| generate_sample(cfg, sample_seed(seed, split, i)))
        .collect()
}

pub fn gen_mqar(cfg: &TaskConfig, seed: u64) -> Result<Dataset> {
    expect_kind(cfg, TaskKind::Mqar)?;
    Dataset::generate(cfg, seed)
}

pub fn gen_sniah(cfg: &TaskConfig, seed: u64) -> Result<Dataset> {
    expect_kind(cfg, TaskKind::Sniah)?;
    Dataset::generate(cfg, seed)
}

pub fn gen_palindrome(cfg: &TaskConfig, seed: u64) -> Result<Dataset> {
    expect_kind(cfg, TaskKind::Palindrome)?;
    Dataset::generate(cfg, seed)
}

pub fn gen_stack(cfg: &TaskConfig, seed: u64) -> Result<Dataset> {
    expect_kind(cfg, TaskKind::Stack)?;
    Dataset::generate(cfg, seed)
}

fn expect_kind(cfg: &TaskConfig, kind: TaskKind) -> Result<()> {
    if cfg.kind == kind {
        Ok(())
    } else {
        Err(TaskError::Infeasible(format!("expected a {kind} config, got {}", cfg.kind)))
    }
}

fn blank(n: usize) -> TaskSample {
    TaskSample {
        input_ids: vec![SEP; n],
        target_ids: vec![SEP; n],
        loss_mask: vec![false; n],
    }
}

fn mqar(cfg: &TaskConfig, rng: &mut ChaCha8Rng) -> TaskSample {
    let n = cfg.total_length();
    let half = (cfg.vocab / 2) as u32;
    let p = cfg.num_pairs;
    let keys: Vec<u32> = sample_indices(rng, half as usize - 1, p)
        .into_iter()
        .map(|i| i as u32 + 1)
        .collect();
    let values: Vec<u32> = (0..p).map(|_| rng.random_range(half..cfg.vocab as u32)).collect();
    let mut s = blank(n);
    for i in 0..p {
        s.input_ids[2 * i] = keys[i];
        s.input_ids[2 * i + 1] = values[i];
    }
    s.input_ids[2 * p] = SEP;
    let picks = sample_indices(rng, p, cfg.queries());
    for (j, pick) in picks.into_iter().enumerate() {
        let pos = 2 * p + 1 + j;
        s.input_ids[pos] = keys[pick];
        s.target_ids[pos] = values[pick];
        s.loss_mask[pos] = true;
    }
    s
}

fn sniah(cfg: &TaskConfig, rng: &mut ChaCha8Rng) -> TaskSample {
    let n = cfg.total_length();
    let quarter = (cfg.vocab / 4) as u32;
    let key = rng.random_range(1..quarter);
    let value = rng.random_range(quarter..2 * quarter);
    let context = n - 2;
    let at = rng.random_range(0..=context - 2);
    let mut s = blank(n);
    for i in 0..context {
        s.input_ids[i] = rng.random_range(2 * quarter..cfg.vocab as u32);
    }
    s.input_ids[at] = key;
    s.input_ids[at + 1] = value;
    s.input_ids[n - 2] = SEP;
    s.input_ids[n - 1] = key;
    s.target_ids[n - 1] = value;
    s.loss_mask[n - 1] = true;
    s
}

fn palindrome(cfg: &TaskConfig, rng: &mut ChaCha8Rng) -> TaskSample {
    let n = cfg.total_length();
    let m = (n - 1) / 2;
    let seq: Vec<u32> = (0..m).map(|_| rng.random_range(1..cfg.vocab as u32)).collect();
    let mut s = blank(n);
    s.input_ids[..m].copy_from_slice(&seq);
    s.input_ids[m] = SEP;
    for j in 0..m {
        s.input_ids[m + 1 + j] = seq[m - 1 - j];
    }
    for j in 0..m.saturating_sub(1) {
        let pos = m + 1 + j;
        s.target_ids[pos] = seq[m - 2 - j];
        s.loss_mask[pos] = true;
    }
    s
}

fn stack(cfg: &TaskConfig, rng: &mut ChaCha8Rng) -> TaskSample {
    let n = cfg.total_length();
    let first_value = 3 + cfg.num_stacks as u32;
    let mut stacks: Vec<Vec<u32>> = vec![Vec::new(); cfg.num_stacks];
    let mut s = blank(n);
    let mut pos = 0;
    loop {
        let nonempty: Vec<usize> = (0..stacks.len()).filter(|&i| !stacks[i].is_empty()).collect();
        let can_push = pos + 3 <= n;
        let can_pop = pos + 2 <= n && !nonempty.is_empty();
        let pop = match (can_push, can_pop) {
            (false, false) => break,
            (true, false) => false,
            (false, true) => true,
            (true, true) => rng.random_bool(0.5),
        };
        if pop {
            let id = nonempty[rng.random_range(0..nonempty.len())];
            let value = stacks[id].pop().expect("nonempty");
            s.input_ids[pos] = STACK_POP;
            s.input_ids[pos + 1] = 3 + id as u32;
            s.target_ids[pos + 1] = value;
            s.loss_mask[pos + 1] = true;
            pos += 2;
        } else {
            let id = rng.random_range(0..cfg.num_stacks);
            let value = rng.random_range(first_value..cfg.vocab as u32);
            stacks[id].push(value);
            s.input_ids[pos] = STACK_PUSH;
            s.input_ids[pos + 1] = 3 + id as u32;
            s.input_ids[pos + 2] = value;
            pos += 3;
        }
    }
    s
}

/// All three splits of one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: TaskConfig,
    pub seed: u64,
    pub train: Vec<TaskSample>,
    pub valid: Vec<TaskSample>,
    pub test: Vec<TaskSample>,
}

impl Dataset {
    pub fn generate(cfg: &TaskConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            config: cfg.clone(),
            seed,
            train: generate_split(cfg, seed, Split::Train)?,
            valid: generate_split(cfg, seed, Split::Valid)?,
            test: generate_split(cfg, seed, Split::Test)?,
        })
    }

    pub fn split(&self, split: Split) -> &[TaskSample] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes `{train,valid,test}.jsonl` and `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Manifest> {
        fs::create_dir_all(dir)?;
        let mut files = Vec::new();
        for split in Split::ALL {
            let name = format!("{}.jsonl", split.name());
            let bytes = to_jsonl(self.split(split))?;
            fs::write(dir.join(&name), &bytes)?;
            files.push(ManifestFile {
                name,
                split,
                samples: self.split(split).len(),
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
        let manifest = Manifest {
            config: self.config.clone(),
            seed: self.seed,
            files,
            notes: reconstruction_notes(self.config.kind),
        };
        let mut json = serde_json::to_vec_pretty(&manifest)?;
        json.push(b'\n');
        fs::write(dir.join("manifest.json"), json)?;
        Ok(manifest)
    }

    /// Reads a directory written by [`Dataset::write`], verifying hashes.
    pub fn read(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        let mut splits: [Vec<TaskSample>; 3] = Default::default();
        for file in &manifest.files {
            let bytes = fs::read(dir.join(&file.name))?;
            let digest = hex::encode(Sha256::digest(&bytes));
            if digest != file.sha256 {
                return Err(TaskError::Malformed(format!("{}: content hash mismatch", file.name)));
            }
            let samples = read_jsonl(&bytes[..])?;
            if samples.len() != file.samples {
                return Err(TaskError::Malformed(format!("{}: sample count mismatch", file.name)));
            }
            let slot = Split::ALL.iter().position(|&s| s == file.split).expect("known split");
            splits[slot] = samples;
        }
        let [train, valid, test] = splits;
        Ok(Self {
            config: manifest.config,
            seed: manifest.seed,
            train,
            valid,
            test,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub name: String,
    pub split: Split,
    pub samples: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: TaskConfig,
    pub seed: u64,
    pub files: Vec<ManifestFile>,
    /// Layout choices not fixed by the task definitions.
    pub notes: Vec<String>,
}

fn reconstruction_notes(kind: TaskKind) -> Vec<String> {
    let common = "token ids, vocabulary partition and separator id are local choices".to_string();
    let specific = match kind {
        TaskKind::Mqar => "queries are distinct keys in random order placed right after the separator; the tail is padded with the separator id",
        TaskKind::Sniah => "distractors are uniform over the upper half of the vocabulary; the prompt is '<sep> key' and the answer is a single token",
        TaskKind::Palindrome => "scoring follows the worked example literally: the first echoed token and the final position are unscored",
        TaskKind::Stack => "pushes are 'PUSH id value', pops are 'POP id' with the target on the id token; pop versus push is a fair coin when both fit",
    };
    vec![common, specific.to_string()]
}

pub fn to_jsonl(samples: &[TaskSample]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(out)
}

pub fn read_jsonl(reader: impl std::io::Read) -> Result<Vec<TaskSample>> {
    let mut out = Vec::new();
    for line in BufReader::new(reader).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: TaskSample = serde_json::from_str(&line)?;
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}

/// Anything that produces one token prediction per input position.
pub trait Predictor {
    fn predict(&mut self, samples: &[TaskSample]) -> Result<Vec<Vec<u32>>>;
}

/// Exact-match accuracy over scored positions.
pub fn evaluate(model: &mut impl Predictor, samples: &[TaskSample]) -> Result<f64> {
    let predictions = model.predict(samples)?;
    accuracy(samples, &predictions)
}

pub fn accuracy(samples: &[TaskSample], predictions: &[Vec<u32>]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for (index, (s, p)) in samples.iter().zip(predictions).enumerate() {
        if p.len() != s.len() {
            return Err(TaskError::PredictionLength {
                index,
                got: p.len(),
                expected: s.len(),
            });
        }
        for i in 0..s.len() {
            if s.loss_mask[i] {
                total += 1;
                hit += usize::from(p[i] == s.target_ids[i]);
            }
        }
    }
    if total == 0 {
        return Err(TaskError::EmptyMask);
    }
    Ok(hit as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Oracle;

    impl Predictor for Oracle {
        fn predict(&mut self, samples: &[TaskSample]) -> Result<Vec<Vec<u32>>> {
            Ok(samples.iter().map(|s| s.target_ids.clone()).collect())
        }
    }

    struct Uniform(ChaCha8Rng, u32);

    impl Predictor for Uniform {
        fn predict(&mut self, samples: &[TaskSample]) -> Result<Vec<Vec<u32>>> {
            Ok(samples
                .iter()
                .map(|s| (0..s.len()).map(|_| self.0.random_range(0..self.1)).collect())
                .collect())
        }
    }

    fn small(mut cfg: TaskConfig, n: usize) -> TaskConfig {
        cfg.splits = Splits {
            train: n,
            valid: n,
            test: n,
        };
        cfg
    }

    #[test]
    fn mqar_single_pair_single_query() {
        let cfg = TaskConfig {
            length: 4,
            vocab: 8,
            num_pairs: 1,
            num_queries: Some(1),
            ..TaskConfig::mqar()
        };
        let s = generate_sample(&cfg, 3).unwrap();
        assert_eq!(s.input_ids[2], SEP);
        assert_eq!(s.input_ids[3], s.input_ids[0]);
        assert_eq!(s.target_ids[3], s.input_ids[1]);
        assert_eq!(s.loss_mask, vec![false, false, false, true]);
    }

    #[test]
    fn mqar_default_keys_unique_and_partitioned() {
        let cfg = TaskConfig::mqar();
        for seed in 0..20 {
            let s = generate_sample(&cfg, seed).unwrap();
            assert_eq!(s.len(), 256);
            let keys: Vec<u32> = (0..32).map(|i| s.input_ids[2 * i]).collect();
            let mut dedup = keys.clone();
            dedup.sort_unstable();
            dedup.dedup();
            assert_eq!(dedup.len(), 32);
            assert!(keys.iter().all(|&k| k >= 1 && k < 4096));
            assert!((0..32).all(|i| s.input_ids[2 * i + 1] >= 4096));
            assert_eq!(s.scored(), 32);
            let mut queried: Vec<u32> = s.input_ids[65..97].to_vec();
            queried.sort_unstable();
            assert_eq!(queried, dedup);
            assert!(s.input_ids[97..].iter().all(|&t| t == SEP));
        }
    }

    #[test]
    fn mqar_infeasible_configs() {
        let too_many = TaskConfig {
            vocab: 16,
            num_pairs: 8,
            ..TaskConfig::toy_mqar()
        };
        assert!(matches!(too_many.validate(), Err(TaskError::Infeasible(_))));
        let too_long = TaskConfig {
            length: 16,
            num_pairs: 8,
            ..TaskConfig::toy_mqar()
        };
        assert!(too_long.validate().is_err());
        let bad_factor = TaskConfig {
            extrapolation: 3,
            ..TaskConfig::toy_mqar()
        };
        assert!(bad_factor.validate().is_err());
    }

    #[test]
    fn default_mqar_split_counts() {
        let cfg = TaskConfig::mqar();
        let total: usize = Split::ALL.iter().map(|&s| cfg.count(s)).sum();
        assert_eq!(total, 24_000);
    }

    #[test]
    fn sniah_needle_only_and_position_zero() {
        let cfg = TaskConfig::sniah(4);
        let s = generate_sample(&cfg, 1).unwrap();
        assert_eq!(s.input_ids[2], SEP);
        assert_eq!(s.input_ids[3], s.input_ids[0]);
        assert_eq!(s.target_ids[3], s.input_ids[1]);
        let cfg = TaskConfig::sniah(1024);
        let at_zero = (0..5000)
            .map(|seed| generate_sample(&cfg, seed).unwrap())
            .find(|s| s.input_ids[0] == s.input_ids[1023])
            .expect("some needle lands at position 0");
        assert_eq!(at_zero.target_ids[1023], at_zero.input_ids[1]);
        assert!(TaskConfig::sniah(3).validate().is_err());
    }

    #[test]
    fn palindrome_worked_example_shape() {
        let cfg = TaskConfig::palindrome(15);
        let s = generate_sample(&cfg, 9).unwrap();
        let m = 7;
        assert_eq!(s.input_ids[m], SEP);
        assert_eq!(&s.loss_mask[..m + 1], &[false; 8]);
        assert!(s.loss_mask[m + 1..14].iter().all(|&b| b));
        assert!(!s.loss_mask[14]);
        // reversing the scored targets and the first echoed token recovers the prefix
        let mut echoed: Vec<u32> = vec![s.input_ids[m + 1]];
        echoed.extend(&s.target_ids[m + 1..14]);
        echoed.reverse();
        assert_eq!(&echoed[..], &s.input_ids[..m]);
    }

    #[test]
    fn palindrome_length_one_sequence_has_nothing_scored() {
        let s = generate_sample(&TaskConfig::palindrome(3), 0).unwrap();
        assert_eq!(s.scored(), 0);
        assert!(matches!(accuracy(&[s.clone()], &[s.target_ids]), Err(TaskError::EmptyMask)));
        assert!(TaskConfig::palindrome(16).validate().is_err());
    }

    #[test]
    fn stack_lifo_and_padding() {
        let cfg = TaskConfig::stack(64, 3);
        for seed in 0..50 {
            let s = generate_sample(&cfg, seed).unwrap();
            let mut pos = 0;
            let mut stacks: Vec<Vec<u32>> = vec![vec![]; 3];
            while pos < s.len() {
                match s.input_ids[pos] {
                    STACK_PUSH => {
                        stacks[(s.input_ids[pos + 1] - 3) as usize].push(s.input_ids[pos + 2]);
                        pos += 3;
                    }
                    STACK_POP => {
                        let top = stacks[(s.input_ids[pos + 1] - 3) as usize].pop().unwrap();
                        assert_eq!(s.target_ids[pos + 1], top);
                        pos += 2;
                    }
                    STACK_PAD => {
                        assert!(s.input_ids[pos..].iter().all(|&t| t == STACK_PAD));
                        assert!(s.len() - pos < 3);
                        break;
                    }
                    other => panic!("unexpected opcode {other}"),
                }
            }
        }
    }

    #[test]
    fn oracle_and_uniform_predictors() {
        let cfg = small(TaskConfig::toy_mqar(), 200);
        let data = Dataset::generate(&cfg, 42).unwrap();
        assert_eq!(evaluate(&mut Oracle, &data.valid).unwrap(), 1.0);
        let v = 64u32;
        let acc = evaluate(&mut Uniform(ChaCha8Rng::seed_from_u64(5), v), &data.valid).unwrap();
        let n: usize = data.valid.iter().map(TaskSample::scored).sum();
        let p = 1.0 / v as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((acc - p).abs() <= 3.0 * sigma, "acc {acc}, band {}", 3.0 * sigma);
    }

    #[test]
    fn prediction_length_mismatch() {
        let s = generate_sample(&TaskConfig::toy_mqar(), 0).unwrap();
        assert!(matches!(
            accuracy(&[s], &[vec![0; 3]]),
            Err(TaskError::PredictionLength { .. })
        ));
    }

    #[test]
    fn write_read_roundtrip_and_determinism() {
        let cfg = small(TaskConfig::stack(32, 2), 5);
        let data = gen_stack(&cfg, 7).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = data.write(a.path()).unwrap();
        let mb = gen_stack(&cfg, 7).unwrap().write(b.path()).unwrap();
        assert_eq!(ma, mb);
        for f in ["train.jsonl", "valid.jsonl", "test.jsonl", "manifest.json"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
        assert_eq!(Dataset::read(a.path()).unwrap(), data);
        fs::write(a.path().join("test.jsonl"), b"").unwrap();
        assert!(Dataset::read(a.path()).is_err());
        assert!(gen_mqar(&cfg, 1).is_err());
    }

    #[test]
    fn extrapolation_scales_length_only() {
        let cfg = TaskConfig {
            extrapolation: 4,
            ..TaskConfig::toy_mqar()
        };
        let s = generate_sample(&cfg, 0).unwrap();
        assert_eq!(s.len(), 256);
        assert_eq!((0..16).filter(|&i| s.input_ids[i] >= 32).count(), 8);
        assert_eq!(s.input_ids[16], SEP);
    }
}
