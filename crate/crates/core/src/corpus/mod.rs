//! Annotated quads, vocabulary, preprocessing and post-disjoint splits.

pub mod synth;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const DEFAULT_MAX_LEN: usize = 50;

/// One annotated example: post, machine response, human reference, grade.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Quad {
    pub post: Vec<String>,
    pub response: Vec<String>,
    pub reference: Vec<String>,
    /// 0 bad, 1 fair, 2 good.
    pub label: u8,
    pub system_id: String,
    pub post_id: String,
}

impl Quad {
    pub fn normalized_label(&self) -> f64 {
        f64::from(self.label) / 2.0
    }
}

#[derive(Serialize, Deserialize)]
struct QuadLine {
    post: String,
    response: String,
    reference: String,
    label: i64,
    system_id: String,
    post_id: String,
}

fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

fn parse_line(line: &str) -> std::result::Result<Quad, String> {
    let raw: QuadLine = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if !(0..=2).contains(&raw.label) {
        return Err(format!("label {} not in {{0, 1, 2}}", raw.label));
    }
    let quad = Quad {
        post: tokenize(&raw.post),
        response: tokenize(&raw.response),
        reference: tokenize(&raw.reference),
        label: raw.label as u8,
        system_id: raw.system_id,
        post_id: raw.post_id,
    };
    for (field, toks) in [
        ("post", &quad.post),
        ("response", &quad.response),
        ("reference", &quad.reference),
    ] {
        if toks.is_empty() {
            return Err(format!("{field} has no tokens"));
        }
    }
    Ok(quad)
}

/// Reads one quad per line. Blank lines are skipped; every malformed line is
/// reported with its 1-based line number.
pub fn load_jsonl(path: &Path) -> Result<Vec<Quad>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut quads = Vec::new();
    let mut errors = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(&line) {
            Ok(q) => quads.push(q),
            Err(e) => errors.push(format!("line {}: {e}", n + 1)),
        }
    }
    if errors.is_empty() {
        Ok(quads)
    } else {
        Err(Error::Ingestion(errors))
    }
}

pub fn write_jsonl(path: &Path, quads: &[Quad]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut out = String::new();
    for q in quads {
        let line = QuadLine {
            post: q.post.join(" "),
            response: q.response.join(" "),
            reference: q.reference.join(" "),
            label: i64::from(q.label),
            system_id: q.system_id.clone(),
            post_id: q.post_id.clone(),
        };
        out.push_str(&serde_json::to_string(&line).map_err(|e| Error::Invalid(e.to_string()))?);
        out.push('\n');
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Token → id map with `<pad>` = 0 and `<unk>` = 1 reserved.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from training quads only, keeping the `max_size` most frequent
    /// tokens (ties broken lexicographically). `max_size` excludes the two
    /// reserved entries.
    pub fn build<'a>(train: impl IntoIterator<Item = &'a Quad>, max_size: Option<usize>) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for q in train {
            for tok in q.post.iter().chain(&q.response).chain(&q.reference) {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let keep = max_size.unwrap_or(usize::MAX);
        let tokens = [PAD_TOKEN, UNK_TOKEN]
            .into_iter()
            .chain(ranked.into_iter().take(keep).map(|(t, _)| t))
            .map(str::to_string)
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }
}

/// Fixed-length id sequence; positions at or past `len` hold the pad id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub len: usize,
}

/// Maps tokens to ids, keeps the first `max_len`, pads to `max_len`.
pub fn preprocess(tokens: &[String], vocab: &Vocabulary, max_len: usize) -> TokenSeq {
    let mut ids: Vec<usize> = tokens.iter().take(max_len).map(|t| vocab.id(t)).collect();
    let len = ids.len();
    ids.resize(max_len, PAD_ID);
    TokenSeq { ids, len }
}

/// A quad after preprocessing, ready for the evaluator.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedQuad {
    pub post: TokenSeq,
    pub response: TokenSeq,
    pub reference: TokenSeq,
    pub grade: u8,
    /// grade / 2, in {0, 0.5, 1}.
    pub label: f64,
    pub post_id: String,
}

pub fn encode_quad(q: &Quad, vocab: &Vocabulary, max_len: usize) -> EncodedQuad {
    EncodedQuad {
        post: preprocess(&q.post, vocab, max_len),
        response: preprocess(&q.response, vocab, max_len),
        reference: preprocess(&q.reference, vocab, max_len),
        grade: q.label,
        label: q.normalized_label(),
        post_id: q.post_id.clone(),
    }
}

/// Train / validation / test quads of one dialogue system.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemCorpus {
    pub system_id: String,
    pub train: Vec<Quad>,
    pub valid: Vec<Quad>,
    pub test: Vec<Quad>,
}

impl SystemCorpus {
    pub fn all(&self) -> impl Iterator<Item = &Quad> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    pub fn encode(&self, vocab: &Vocabulary, max_len: usize) -> EncodedCorpus {
        let enc = |qs: &[Quad]| qs.iter().map(|q| encode_quad(q, vocab, max_len)).collect();
        EncodedCorpus {
            system_id: self.system_id.clone(),
            train: enc(&self.train),
            valid: enc(&self.valid),
            test: enc(&self.test),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedCorpus {
    pub system_id: String,
    pub train: Vec<EncodedQuad>,
    pub valid: Vec<EncodedQuad>,
    pub test: Vec<EncodedQuad>,
}

/// Split ratios for train / validation / test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 4.0 / 6.0,
            valid: 1.0 / 6.0,
            test: 1.0 / 6.0,
        }
    }
}

/// Assigns each distinct post id to exactly one split, so every quad that
/// shares a post travels together. Calling with the same seed on corpora
/// over the same post ids yields the same assignment.
pub fn split_by_post<R: Rng + ?Sized>(
    quads: Vec<Quad>,
    ratios: SplitRatios,
    rng: &mut R,
) -> Result<SystemCorpus> {
    let SplitRatios { train, valid, test } = ratios;
    if [train, valid, test].iter().any(|r| !(*r > 0.0))
        || ((train + valid + test) - 1.0).abs() > 1e-9
    {
        return Err(Error::Invalid(format!(
            "split ratios must be positive and sum to 1, got {train}/{valid}/{test}"
        )));
    }
    let posts: BTreeSet<&str> = quads.iter().map(|q| q.post_id.as_str()).collect();
    if posts.len() < 3 {
        return Err(Error::Invalid(format!(
            "need at least 3 distinct posts to split, got {}",
            posts.len()
        )));
    }
    let mut order: Vec<String> = posts.into_iter().map(str::to_string).collect();
    order.shuffle(rng);
    let n = order.len();
    let n_train = ((n as f64) * train).round().clamp(1.0, (n - 2) as f64) as usize;
    let n_valid = ((n as f64) * valid)
        .round()
        .clamp(1.0, (n - n_train - 1) as f64) as usize;
    let split_of: HashMap<&str, usize> = order
        .iter()
        .enumerate()
        .map(|(i, p)| {
            (
                p.as_str(),
                if i < n_train {
                    0
                } else if i < n_train + n_valid {
                    1
                } else {
                    2
                },
            )
        })
        .collect();
    let system_id = quads
        .first()
        .map(|q| q.system_id.clone())
        .unwrap_or_default();
    let mut out = SystemCorpus {
        system_id,
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    for q in quads {
        match split_of[q.post_id.as_str()] {
            0 => out.train.push(q),
            1 => out.valid.push(q),
            _ => out.test.push(q),
        }
    }
    Ok(out)
}
