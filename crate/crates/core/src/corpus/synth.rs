//! Synthetic dialogue systems with planted response quality.
//!
//! Every post belongs to one of `topics` topics and is written with the
//! topic's core words. A system answers with words from its own window over
//! the topic's lexicon, so systems overlap with their neighbours in the
//! sequence but drift away from the first one. The latent similarity of a
//! response is the fraction of on-topic tokens plus Gaussian noise; grades
//! are its tertiles within the system.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Quad;
use crate::{rng, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lexicon {
    pub topics: usize,
    pub words_per_topic: usize,
    /// Topic-free tokens shared by every system.
    pub fillers: usize,
    /// Words every post and reference of a topic draws from.
    pub core_words: usize,
}

impl Default for Lexicon {
    fn default() -> Self {
        Self {
            topics: 12,
            words_per_topic: 12,
            fillers: 24,
            core_words: 4,
        }
    }
}

impl Lexicon {
    pub fn word(&self, topic: usize, w: usize) -> String {
        format!("t{topic}w{}", w % self.words_per_topic)
    }

    pub fn filler(&self, i: usize) -> String {
        format!("f{i}")
    }

    fn validate(&self) -> Result<()> {
        if self.topics < 2 || self.words_per_topic == 0 || self.fillers == 0 {
            return Err(Error::Config(
                "lexicon needs ≥2 topics, ≥1 word per topic and ≥1 filler".into(),
            ));
        }
        if self.core_words == 0 || self.core_words > self.words_per_topic {
            return Err(Error::Config(
                "core_words must be in 1..=words_per_topic".into(),
            ));
        }
        Ok(())
    }
}

/// A post and its human reference, shared by every system.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedPost {
    pub post_id: String,
    pub topic: usize,
    pub post: Vec<String>,
    pub reference: Vec<String>,
}

const TOPIC_WORD_RATE: f64 = 0.8;
const POST_LEN: (usize, usize) = (3, 6);

fn core_utterance<R: Rng + ?Sized>(lex: &Lexicon, topic: usize, rng: &mut R) -> Vec<String> {
    let len = rng.random_range(POST_LEN.0..=POST_LEN.1);
    let mut toks: Vec<String> = (0..len)
        .map(|_| {
            if rng.random_bool(TOPIC_WORD_RATE) {
                lex.word(topic, rng.random_range(0..lex.core_words))
            } else {
                lex.filler(rng.random_range(0..lex.fillers))
            }
        })
        .collect();
    if !toks.iter().any(|t| t.starts_with('t')) {
        toks[0] = lex.word(topic, rng.random_range(0..lex.core_words));
    }
    toks
}

pub fn shared_posts<R: Rng + ?Sized>(n: usize, lex: &Lexicon, rng: &mut R) -> Vec<SharedPost> {
    (0..n)
        .map(|i| {
            let topic = rng.random_range(0..lex.topics);
            SharedPost {
                post_id: format!("p{i:05}"),
                topic,
                post: core_utterance(lex, topic, rng),
                reference: core_utterance(lex, topic, rng),
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QualityProfile {
    pub mean: f64,
    pub std: f64,
}

impl QualityProfile {
    /// Beta distribution with the given mean and standard deviation.
    pub fn distribution(&self) -> Result<Beta<f64>> {
        let QualityProfile { mean, std } = *self;
        if !(mean > 0.0 && mean < 1.0) {
            return Err(Error::Config(format!(
                "quality mean {mean} must lie in (0, 1)"
            )));
        }
        let var = std * std;
        if !(std > 0.0) || var >= mean * (1.0 - mean) {
            return Err(Error::Config(format!(
                "quality std {std} must be positive and below sqrt(mean(1-mean))"
            )));
        }
        let kappa = mean * (1.0 - mean) / var - 1.0;
        Beta::new(mean * kappa, (1.0 - mean) * kappa).map_err(|e| Error::Config(e.to_string()))
    }
}

fn default_width() -> usize {
    4
}

fn default_off_topic() -> f64 {
    0.2
}

fn default_len() -> (usize, usize) {
    (3, 6)
}

/// One synthetic dialogue system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub name: String,
    /// Std of the Gaussian noise on the latent similarity.
    pub noise: f64,
    pub quality_profile: QualityProfile,
    pub seed: u64,
    /// First topic word this system answers with.
    #[serde(default)]
    pub lexicon_offset: usize,
    #[serde(default = "default_width")]
    pub lexicon_width: usize,
    /// Probability of answering with the reference verbatim.
    #[serde(default)]
    pub copy_rate: f64,
    /// Probability that an irrelevant token comes from another topic rather
    /// than the filler pool.
    #[serde(default = "default_off_topic")]
    pub off_topic_rate: f64,
    #[serde(default = "default_len")]
    pub response_len: (usize, usize),
}

impl SystemSpec {
    fn validate(&self) -> Result<()> {
        self.quality_profile.distribution()?;
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::Config(format!(
                "{}: noise must be finite and ≥ 0",
                self.name
            )));
        }
        for (field, p) in [
            ("copy_rate", self.copy_rate),
            ("off_topic_rate", self.off_topic_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "{}: {field} must be in [0, 1]",
                    self.name
                )));
            }
        }
        let (lo, hi) = self.response_len;
        if lo == 0 || lo > hi || self.lexicon_width == 0 {
            return Err(Error::Config(format!(
                "{}: bad response length or lexicon width",
                self.name
            )));
        }
        Ok(())
    }
}

/// Bucket at the 1/3 and 2/3 quantiles; ties go to the higher grade.
pub fn tertile_labels(sims: &[f64]) -> Vec<u8> {
    if sims.is_empty() {
        return Vec::new();
    }
    let mut sorted = sims.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let q1 = sorted[n / 3];
    let q2 = sorted[(2 * n) / 3];
    sims.iter()
        .map(|&s| {
            if s >= q2 {
                2
            } else if s >= q1 {
                1
            } else {
                0
            }
        })
        .collect()
}

/// One response per shared post. Returns the quads and their latent
/// similarities.
pub fn synth_system<R: Rng + ?Sized>(
    spec: &SystemSpec,
    posts: &[SharedPost],
    lex: &Lexicon,
    rng: &mut R,
) -> Result<(Vec<Quad>, Vec<f64>)> {
    lex.validate()?;
    spec.validate()?;
    let quality = spec.quality_profile.distribution()?;
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut quads = Vec::with_capacity(posts.len());
    let mut sims = Vec::with_capacity(posts.len());
    for p in posts {
        let (response, frac) = if rng.random_bool(spec.copy_rate) {
            (p.reference.clone(), 1.0)
        } else {
            let q = quality.sample(rng);
            let len = rng.random_range(spec.response_len.0..=spec.response_len.1);
            let relevant = ((q * len as f64).round() as usize).min(len);
            let mut toks = Vec::with_capacity(len);
            for _ in 0..relevant {
                let w = spec.lexicon_offset + rng.random_range(0..spec.lexicon_width);
                toks.push(lex.word(p.topic, w));
            }
            for _ in relevant..len {
                if rng.random_bool(spec.off_topic_rate) {
                    let other = (p.topic + rng.random_range(1..lex.topics)) % lex.topics;
                    let w = spec.lexicon_offset + rng.random_range(0..spec.lexicon_width);
                    toks.push(lex.word(other, w));
                } else {
                    toks.push(lex.filler(rng.random_range(0..lex.fillers)));
                }
            }
            toks.shuffle(rng);
            (toks, relevant as f64 / len as f64)
        };
        sims.push(frac + spec.noise * noise.sample(rng));
        quads.push(Quad {
            post: p.post.clone(),
            response,
            reference: p.reference.clone(),
            label: 0,
            system_id: spec.name.clone(),
            post_id: p.post_id.clone(),
        });
    }
    for (q, label) in quads.iter_mut().zip(tertile_labels(&sims)) {
        q.label = label;
    }
    Ok((quads, sims))
}

/// Generator file: shared lexicon and post pool plus one entry per system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub posts: usize,
    pub lexicon: Lexicon,
    #[serde(rename = "system")]
    pub systems: Vec<SystemSpec>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            posts: 600,
            lexicon: Lexicon::default(),
            systems: default_specs(),
        }
    }
}

impl GeneratorConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Posts come from the `posts` stream of `seed`; each system from a
    /// stream keyed by its own seed, so editing one system leaves the
    /// others untouched.
    pub fn generate(&self, seed: u64) -> Result<Vec<Vec<Quad>>> {
        if self.systems.is_empty() {
            return Err(Error::Config("generator lists no systems".into()));
        }
        self.lexicon.validate()?;
        let posts = shared_posts(
            self.posts,
            &self.lexicon,
            &mut rng::stream(seed, &["posts"]),
        );
        self.systems
            .iter()
            .map(|spec| {
                let mut r = rng::stream(seed, &["system", &spec.seed.to_string()]);
                synth_system(spec, &posts, &self.lexicon, &mut r).map(|(q, _)| q)
            })
            .collect()
    }
}

/// Five systems ordered from copy-like with clean labels to off-topic-prone
/// with noisier labels.
pub fn default_specs() -> Vec<SystemSpec> {
    let spec = |name: &str, seed, offset, copy_rate, off_topic_rate, noise, mean, std| SystemSpec {
        name: name.to_string(),
        noise,
        quality_profile: QualityProfile { mean, std },
        seed,
        lexicon_offset: offset,
        lexicon_width: 4,
        copy_rate,
        off_topic_rate,
        response_len: (3, 6),
    };
    vec![
        spec("retrieval", 1, 0, 0.15, 0.1, 0.05, 0.55, 0.25),
        spec("seq2seq-attention", 2, 2, 0.05, 0.2, 0.06, 0.5, 0.25),
        spec("seq2seq-keywords", 3, 4, 0.0, 0.3, 0.07, 0.5, 0.25),
        spec("cvae", 4, 6, 0.0, 0.4, 0.08, 0.45, 0.25),
        spec("human", 5, 8, 0.0, 0.5, 0.08, 0.6, 0.22),
    ]
}
