//! Synthetic many-to-one translation task: one shared target-side language and
//! several source languages, each a deterministic bijective transform of the
//! target sentence.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ParallelCorpus, SentencePair, Token};
use crate::error::{Error, Result};

pub const PAD: Token = 0;
pub const BOS: Token = 1;
pub const EOS: Token = 2;
/// Ids reserved for source-language tags.
pub const MAX_LANGS: usize = 8;
pub const FIRST_LANG_TAG: Token = 3;
pub const FIRST_CONTENT: Token = FIRST_LANG_TAG + MAX_LANGS as Token;

/// Source-side transform applied to the shared target sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Transform {
    Identity,
    Reverse,
    /// Shift every content token by `k` modulo the content vocabulary.
    Offset(u32),
    /// Swap positions (0,1), (2,3), ...; a trailing odd token stays put.
    PairwiseSwap,
}

impl Transform {
    pub fn apply(&self, target: &[Token], content_size: u32) -> Vec<Token> {
        match *self {
            Transform::Identity => target.to_vec(),
            Transform::Reverse => target.iter().rev().copied().collect(),
            Transform::Offset(k) => target
                .iter()
                .map(|&t| FIRST_CONTENT + (t - FIRST_CONTENT + k) % content_size)
                .collect(),
            Transform::PairwiseSwap => {
                let mut out = target.to_vec();
                for chunk in out.chunks_mut(2) {
                    chunk.reverse();
                }
                out
            }
        }
    }

    pub fn invert(&self, source: &[Token], content_size: u32) -> Vec<Token> {
        match *self {
            Transform::Offset(k) => {
                Transform::Offset(content_size - k % content_size).apply(source, content_size)
            }
            other => other.apply(source, content_size),
        }
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::Identity => f.write_str("id"),
            Transform::Reverse => f.write_str("rev"),
            Transform::Offset(k) => write!(f, "offset{k}"),
            Transform::PairwiseSwap => f.write_str("swap"),
        }
    }
}

impl FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "id" | "identity" => Ok(Transform::Identity),
            "rev" | "reverse" => Ok(Transform::Reverse),
            "swap" => Ok(Transform::PairwiseSwap),
            _ => s
                .strip_prefix("offset")
                .and_then(|k| k.parse().ok())
                .map(Transform::Offset)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "unknown transform {s:?} (expected id, rev, swap or offset<k>)"
                    ))
                }),
        }
    }
}

/// Token inventory shared by all languages of a task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub size: usize,
    pub langs: Vec<String>,
}

impl Vocab {
    pub fn new(size: usize, langs: Vec<String>) -> Result<Self> {
        if langs.is_empty() || langs.len() > MAX_LANGS {
            return Err(Error::Config(format!(
                "between 1 and {MAX_LANGS} languages are supported, got {}",
                langs.len()
            )));
        }
        if size <= FIRST_CONTENT as usize + 1 {
            return Err(Error::Config(format!(
                "vocabulary of {size} leaves no room for content tokens"
            )));
        }
        Ok(Self { size, langs })
    }

    pub fn content_size(&self) -> u32 {
        (self.size - FIRST_CONTENT as usize) as u32
    }

    pub fn lang_tag(&self, lang: &str) -> Result<Token> {
        self.langs
            .iter()
            .position(|l| l == lang)
            .map(|i| FIRST_LANG_TAG + i as Token)
            .ok_or_else(|| Error::Config(format!("unknown language {lang:?}")))
    }

    pub fn word(&self, t: Token) -> String {
        match t {
            PAD => "<pad>".into(),
            BOS => "<s>".into(),
            EOS => "</s>".into(),
            t if t < FIRST_CONTENT => format!("<2{}>", self.langs.get((t - FIRST_LANG_TAG) as usize).map_or("?", String::as_str)),
            t => format!("w{}", t - FIRST_CONTENT),
        }
    }

    pub fn token(&self, word: &str) -> Result<Token> {
        let idx: u32 = word
            .strip_prefix('w')
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| Error::format("corpus", format!("unknown word {word:?}")))?;
        if idx >= self.content_size() {
            return Err(Error::format(
                "corpus",
                format!("word {word:?} outside vocabulary"),
            ));
        }
        Ok(FIRST_CONTENT + idx)
    }

    pub fn to_text(&self, tokens: &[Token]) -> String {
        tokens.iter().map(|&t| self.word(t)).collect::<Vec<_>>().join(" ")
    }

    pub fn parse_line(&self, line: &str) -> Result<Vec<Token>> {
        line.split_whitespace().map(|w| self.token(w)).collect()
    }

    /// Encoder input: language tag, content tokens, EOS.
    pub fn encode_source(&self, lang: &str, tokens: &[Token]) -> Result<Vec<Token>> {
        let mut out = Vec::with_capacity(tokens.len() + 2);
        out.push(self.lang_tag(lang)?);
        out.extend_from_slice(tokens);
        out.push(EOS);
        Ok(out)
    }
}

/// Description of a synthetic many-to-one task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    /// Language tags; each tag names its transform (`id`, `rev`, `swap`, `offset<k>`).
    pub langs: Vec<String>,
    pub min_len: usize,
    pub max_len: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub vocab_size: usize,
    /// Longest sequence the model accepts, BOS/EOS and tags included.
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            langs: vec!["rev".into(), "offset3".into(), "swap".into()],
            min_len: 3,
            max_len: 12,
            train: 5000,
            dev: 300,
            test: 300,
            vocab_size: 64,
            max_seq_len: 24,
            seed: 7,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<Vocab> {
        let vocab = Vocab::new(self.vocab_size, self.langs.clone())?;
        for (i, lang) in self.langs.iter().enumerate() {
            lang.parse::<Transform>()?;
            if self.langs[..i].contains(lang) {
                return Err(Error::Config(format!("duplicate language {lang:?}")));
            }
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "invalid sentence length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        if self.max_len + 2 > self.max_seq_len {
            return Err(Error::Config(format!(
                "sentences of length {} do not fit a max sequence length of {} (BOS/EOS need 2 slots)",
                self.max_len, self.max_seq_len
            )));
        }
        if self.train == 0 || self.dev == 0 || self.test == 0 {
            return Err(Error::Config("corpus sizes must be >= 1".into()));
        }
        Ok(vocab)
    }

    pub fn transforms(&self) -> Result<Vec<(String, Transform)>> {
        self.langs
            .iter()
            .map(|l| Ok((l.clone(), l.parse()?)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// All splits of a generated task, keyed by language tag.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub spec: SyntheticTaskSpec,
    pub vocab: Vocab,
    pub train: BTreeMap<String, ParallelCorpus>,
    pub dev: BTreeMap<String, ParallelCorpus>,
    pub test: BTreeMap<String, ParallelCorpus>,
}

impl TaskData {
    pub fn split(&self, split: Split) -> &BTreeMap<String, ParallelCorpus> {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

/// Generates every split. Target sentences are drawn once per split and
/// shared by all languages, so sentence ids line up across pairs.
pub fn gen_corpus(spec: &SyntheticTaskSpec) -> Result<TaskData> {
    let vocab = spec.validate()?;
    let transforms = spec.transforms()?;
    let content = vocab.content_size();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut build = |n: usize| -> Result<BTreeMap<String, ParallelCorpus>> {
        let targets: Vec<Vec<Token>> = (0..n)
            .map(|_| {
                let len = rng.gen_range(spec.min_len..=spec.max_len);
                (0..len)
                    .map(|_| FIRST_CONTENT + rng.gen_range(0..content))
                    .collect()
            })
            .collect();
        transforms
            .iter()
            .map(|(lang, tf)| {
                let sentences = targets
                    .iter()
                    .map(|t| SentencePair {
                        source: tf.apply(t, content),
                        reference: t.clone(),
                    })
                    .collect();
                Ok((lang.clone(), ParallelCorpus::new(lang.clone(), sentences)?))
            })
            .collect()
    };

    let train = build(spec.train)?;
    let dev = build(spec.dev)?;
    let test = build(spec.test)?;
    Ok(TaskData {
        spec: spec.clone(),
        vocab,
        train,
        dev,
        test,
    })
}

fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(&l);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_lines(path: &Path, vocab: &Vocab) -> Result<Vec<Vec<Token>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            vocab.parse_line(l).map_err(|e| {
                Error::format("corpus", format!("{}:{}: {e}", path.display(), i + 1))
            })
        })
        .collect()
}

pub fn task_file_names(spec: &SyntheticTaskSpec) -> Vec<String> {
    let mut names = vec!["task.json".to_string()];
    for split in Split::ALL {
        names.push(format!("{}.tgt", split.as_str()));
        for lang in &spec.langs {
            names.push(format!("{}.{lang}.src", split.as_str()));
        }
    }
    names
}

impl TaskData {
    /// Writes `task.json`, `<split>.tgt` and `<split>.<lang>.src` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let spec_path = dir.join("task.json");
        let json = serde_json::to_string_pretty(&self.spec)? + "\n";
        fs::write(&spec_path, json).map_err(|e| Error::io(&spec_path, e))?;
        for split in Split::ALL {
            let corpora = self.split(split);
            let first = corpora.values().next().ok_or(Error::Empty("split"))?;
            write_lines(
                &dir.join(format!("{}.tgt", split.as_str())),
                first.references().map(|r| self.vocab.to_text(r)),
            )?;
            for (lang, corpus) in corpora {
                write_lines(
                    &dir.join(format!("{}.{lang}.src", split.as_str())),
                    corpus.sources().map(|s| self.vocab.to_text(s)),
                )?;
            }
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let spec_path = dir.join("task.json");
        let text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
        let spec: SyntheticTaskSpec = serde_json::from_str(&text)?;
        let vocab = spec.validate()?;
        let mut splits = Vec::new();
        for split in Split::ALL {
            let refs = read_lines(&dir.join(format!("{}.tgt", split.as_str())), &vocab)?;
            let mut map = BTreeMap::new();
            for lang in &spec.langs {
                let path = dir.join(format!("{}.{lang}.src", split.as_str()));
                let srcs = read_lines(&path, &vocab)?;
                if srcs.len() != refs.len() {
                    return Err(Error::LengthMismatch(format!(
                        "{} has {} lines, references have {}",
                        path.display(),
                        srcs.len(),
                        refs.len()
                    )));
                }
                let sentences = srcs
                    .into_iter()
                    .zip(&refs)
                    .map(|(source, r)| SentencePair {
                        source,
                        reference: r.clone(),
                    })
                    .collect();
                map.insert(lang.clone(), ParallelCorpus::new(lang.clone(), sentences)?);
            }
            splits.push(map);
        }
        let test = splits.pop().unwrap();
        let dev = splits.pop().unwrap();
        let train = splits.pop().unwrap();
        Ok(Self {
            spec,
            vocab,
            train,
            dev,
            test,
        })
    }
}
