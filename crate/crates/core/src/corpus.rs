//! Parallel corpora: tokenization, vocabulary, loading, deduplication and
//! the on-disk snapshot format.
//!
//! Pair ids are assigned in file order, so every downstream tie-break that
//! falls back to "lower id first" is reproducible from the input file alone.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;

const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];
const SNAPSHOT_MAGIC: &str = "SPNMT-CORPUS";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerMode {
    Whitespace,
    Character,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub mode: TokenizerMode,
    pub lowercase: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            mode: TokenizerMode::Whitespace,
            lowercase: false,
        }
    }
}

/// Splits `text` into surface tokens. Empty input gives an empty sequence.
pub fn tokenize(text: &str, cfg: &TokenizerConfig) -> Vec<String> {
    let text = if cfg.lowercase {
        text.to_lowercase()
    } else {
        text.to_string()
    };
    match cfg.mode {
        TokenizerMode::Whitespace => text.split_whitespace().map(str::to_string).collect(),
        TokenizerMode::Character => text.chars().filter(|c| !c.is_whitespace()).map(String::from).collect(),
    }
}

/// Token table with the four reserved symbols at indices 0..=3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for r in RESERVED {
            v.insert(r);
        }
        v
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Format("vocab does not start with reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Format(format!("duplicate vocab entry {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn insert(&mut self, token: &str) -> TokenId {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as TokenId;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Maps unknown tokens to `UNK`.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.get(t.as_ref()).unwrap_or(UNK)).collect()
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or(RESERVED[UNK as usize])
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub id: u32,
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub domain: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub pairs: Vec<SentencePair>,
    pub split: Split,
    pub vocab: Vocab,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Tsv,
    Jsonl,
}

impl std::str::FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(CorpusFormat::Tsv),
            "jsonl" => Ok(CorpusFormat::Jsonl),
            other => Err(Error::Config(format!("unknown corpus format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Skip malformed rows instead of failing.
    pub skip_bad: bool,
    /// Extend this vocabulary rather than starting from the reserved tokens,
    /// so dev/test corpora share ids with the training corpus.
    pub base_vocab: Option<Vocab>,
    pub split: Option<Split>,
}

#[derive(Debug, Clone)]
pub struct LoadReport {
    pub corpus: Corpus,
    /// Rows dropped because one side tokenized to nothing.
    pub skipped_empty: usize,
    /// Malformed rows dropped under `skip_bad`.
    pub skipped_bad: usize,
}

#[derive(Deserialize)]
struct JsonRow {
    source: String,
    target: String,
}

fn parse_row(line: &str, format: CorpusFormat) -> std::result::Result<(String, String), String> {
    match format {
        CorpusFormat::Tsv => {
            let mut parts = line.split('\t');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(s), Some(t), None) => Ok((s.to_string(), t.to_string())),
                _ => Err("expected exactly one TAB separating source and target".into()),
            }
        }
        CorpusFormat::Jsonl => serde_json::from_str::<JsonRow>(line)
            .map(|r| (r.source, r.target))
            .map_err(|e| format!("bad json row: {e}")),
    }
}

pub fn load_corpus(
    path: &Path,
    format: CorpusFormat,
    cfg: &TokenizerConfig,
    domain: &str,
    opts: &LoadOptions,
) -> Result<LoadReport> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    load_corpus_from_reader(BufReader::new(file), path, format, cfg, domain, opts)
}

pub fn load_corpus_from_reader<R: BufRead>(
    reader: R,
    path: &Path,
    format: CorpusFormat,
    cfg: &TokenizerConfig,
    domain: &str,
    opts: &LoadOptions,
) -> Result<LoadReport> {
    let mut vocab = opts.base_vocab.clone().unwrap_or_default();
    let mut pairs = Vec::new();
    let mut skipped_empty = 0;
    let mut skipped_bad = 0;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let (src, tgt) = match parse_row(&line, format) {
            Ok(row) => row,
            Err(msg) if opts.skip_bad => {
                log::warn!("{}:{}: {msg}; skipped", path.display(), lineno + 1);
                skipped_bad += 1;
                continue;
            }
            Err(msg) => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    msg,
                })
            }
        };
        let src = tokenize(&src, cfg);
        let tgt = tokenize(&tgt, cfg);
        if src.is_empty() || tgt.is_empty() {
            skipped_empty += 1;
            continue;
        }
        let source = src.iter().map(|t| vocab.insert(t)).collect();
        let target = tgt.iter().map(|t| vocab.insert(t)).collect();
        pairs.push(SentencePair {
            id: pairs.len() as u32,
            source,
            target,
            domain: domain.to_string(),
        });
    }
    if skipped_empty > 0 {
        log::warn!("{}: {skipped_empty} rows with an empty side skipped", path.display());
    }
    Ok(LoadReport {
        corpus: Corpus {
            pairs,
            split: opts.split.unwrap_or(Split::Train),
            vocab,
        },
        skipped_empty,
        skipped_bad,
    })
}

/// Keeps the first occurrence of each `(source, target)` and renumbers ids
/// densely in retained order.
pub fn dedupe(c: &Corpus) -> Corpus {
    let mut seen: HashSet<(&[TokenId], &[TokenId])> = HashSet::new();
    let mut pairs = Vec::with_capacity(c.pairs.len());
    for p in &c.pairs {
        if seen.insert((&p.source, &p.target)) {
            let mut q = p.clone();
            q.id = pairs.len() as u32;
            pairs.push(q);
        }
    }
    Corpus {
        pairs,
        split: c.split,
        vocab: c.vocab.clone(),
    }
}

#[derive(Serialize, Deserialize)]
struct SnapshotBody {
    split: Split,
    vocab: Vec<String>,
    pairs: Vec<SentencePair>,
}

impl Corpus {
    pub fn new(pairs: Vec<SentencePair>, split: Split, vocab: Vocab) -> Self {
        Corpus { pairs, split, vocab }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pair(&self, id: u32) -> Option<&SentencePair> {
        self.pairs.get(id as usize).filter(|p| p.id == id)
    }

    /// Returns the pairs whose domain tag equals `domain`, renumbered from 0.
    pub fn domain_subset(&self, domain: &str) -> Corpus {
        let pairs = self
            .pairs
            .iter()
            .filter(|p| p.domain == domain)
            .enumerate()
            .map(|(i, p)| SentencePair {
                id: i as u32,
                ..p.clone()
            })
            .collect();
        Corpus {
            pairs,
            split: self.split,
            vocab: self.vocab.clone(),
        }
    }

    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        let body = SnapshotBody {
            split: self.split,
            vocab: self.vocab.tokens.clone(),
            pairs: self.pairs.clone(),
        };
        writeln!(w, "{SNAPSHOT_MAGIC}\t{SNAPSHOT_VERSION}")
            .and_then(|_| {
                serde_json::to_writer(&mut w, &body)?;
                writeln!(w)
            })
            .map_err(|e| Error::io("<snapshot>", e))
    }

    pub fn read_snapshot<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut header = String::new();
        r.read_line(&mut header).map_err(|e| Error::io("<snapshot>", e))?;
        let expected = format!("{SNAPSHOT_MAGIC}\t{SNAPSHOT_VERSION}");
        if header.trim_end() != expected {
            return Err(Error::Format(format!(
                "expected corpus snapshot header {expected:?}, got {:?}",
                header.trim_end()
            )));
        }
        let body: SnapshotBody = serde_json::from_reader(r)?;
        let vocab = Vocab::from_tokens(body.vocab)?;
        for (i, p) in body.pairs.iter().enumerate() {
            if p.id as usize != i {
                return Err(Error::Format(format!("pair {i} has id {}", p.id)));
            }
            if p.source.is_empty() || p.target.is_empty() {
                return Err(Error::Format(format!("pair {i} has an empty side")));
            }
        }
        Ok(Corpus {
            pairs: body.pairs,
            split: body.split,
            vocab,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_snapshot(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_snapshot(f)
    }
}
