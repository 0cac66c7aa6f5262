//! Sequential evaluation runs: data preparation, resumable per-strategy
//! loops, and the training-size and in-scope gap experiments.

mod experiments;
mod report;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::synth::{shared_posts, GeneratorConfig};
use crate::corpus::{
    load_jsonl, preprocess, split_by_post, EncodedCorpus, Quad, SplitRatios, TokenSeq, Vocabulary,
    DEFAULT_MAX_LEN,
};
use crate::encoder::{matching_accuracy, pretrain_encoder, EncoderParams, PretrainConfig};
use crate::metrics::{append_records, read_records, PredictionRecord};
use crate::model::{with_fresh_head, ModelDims};
use crate::params::{Checkpoint, ParamSet};
use crate::rng::stream;
use crate::strategies::{
    self, AccessLedger, EvaluatorState, StrategyConfig, StrategyKind, UpdateAccess,
};
use crate::{Error, Result};

pub use experiments::{
    ablate_training_size, gap_experiment, gap_for_seed, gap_of_state, summarize_ablation,
    AblationReport, GapReport, GapRow,
};
pub use report::{aggregate, SequenceReport, StrategyReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSettings {
    pub enabled: bool,
    /// Size of the unlabeled post/reference pool.
    pub posts: usize,
    pub config: PretrainConfig,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            posts: 600,
            config: PretrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// System ids in sequence order; empty means the source order.
    pub order: Vec<String>,
    pub strategies: Vec<StrategyKind>,
    pub seeds: Vec<u64>,
    pub train_fraction: f64,
    pub out_dir: PathBuf,
    /// Directory of `<system>.jsonl` files; synthetic data when absent.
    pub data_dir: Option<PathBuf>,
    pub max_len: usize,
    pub vocab_size: Option<usize>,
    pub split: SplitRatios,
    pub dims: ModelDims,
    pub pretrain: PretrainSettings,
    pub generator: GeneratorConfig,
    pub strategy: StrategyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            order: Vec::new(),
            strategies: StrategyKind::ALL.to_vec(),
            seeds: vec![1],
            train_fraction: 1.0,
            out_dir: PathBuf::from("runs"),
            data_dir: None,
            max_len: DEFAULT_MAX_LEN,
            vocab_size: None,
            split: SplitRatios::default(),
            dims: ModelDims::default(),
            pretrain: PretrainSettings::default(),
            generator: GeneratorConfig::default(),
            strategy: StrategyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: Self =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must be in (0, 1], got {}",
                self.train_fraction
            )));
        }
        if self.strategies.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config(
                "strategies and seeds must be non-empty".into(),
            ));
        }
        let unique: BTreeSet<_> = self.strategies.iter().collect();
        if unique.len() != self.strategies.len() {
            return Err(Error::Config("strategies must not repeat".into()));
        }
        if self.max_len == 0 || self.dims.embed == 0 || self.dims.hidden == 0 {
            return Err(Error::Config(
                "max_len and model dims must be positive".into(),
            ));
        }
        if self.data_dir.is_some() && self.order.is_empty() {
            return Err(Error::Config("data_dir requires an explicit order".into()));
        }
        let ids: BTreeSet<_> = self.order.iter().collect();
        if ids.len() != self.order.len() {
            return Err(Error::Config("order must not repeat systems".into()));
        }
        if self.data_dir.is_none() {
            let known: BTreeSet<&str> = self
                .generator
                .systems
                .iter()
                .map(|s| s.name.as_str())
                .collect();
            if let Some(bad) = self.order.iter().find(|id| !known.contains(id.as_str())) {
                return Err(Error::Config(format!("order names unknown system {bad:?}")));
            }
        }
        self.strategy.validate().map_err(|e| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        })
    }

    /// Quads of each system in sequence order.
    pub fn load_systems(&self, seed: u64) -> Result<Vec<Vec<Quad>>> {
        if let Some(dir) = &self.data_dir {
            return self
                .order
                .iter()
                .map(|id| load_jsonl(&dir.join(format!("{id}.jsonl"))))
                .collect();
        }
        let generated = self.generator.generate(seed)?;
        if self.order.is_empty() {
            return Ok(generated);
        }
        self.order
            .iter()
            .map(|id| {
                let i = self
                    .generator
                    .systems
                    .iter()
                    .position(|s| &s.name == id)
                    .ok_or_else(|| Error::Config(format!("unknown system {id:?}")))?;
                Ok(generated[i].clone())
            })
            .collect()
    }
}

/// Everything a run needs for one seed: encoded corpora in sequence order
/// and the shared fresh initialization.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub corpora: Vec<EncodedCorpus>,
    pub vocab: Vocabulary,
    pub init: ParamSet,
    pub pretrain_accuracy: Option<f64>,
}

impl Prepared {
    pub fn system_ids(&self) -> Vec<String> {
        self.corpora.iter().map(|c| c.system_id.clone()).collect()
    }

    /// The same corpora with every training split subsampled to `fraction`.
    /// Subsets are nested across fractions for a fixed seed.
    pub fn with_fraction(&self, fraction: f64, seed: u64, batch_size: usize) -> Result<Prepared> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!(
                "fraction must be in (0, 1], got {fraction}"
            )));
        }
        let mut out = self.clone();
        for c in &mut out.corpora {
            let n = c.train.len();
            let keep = ((n as f64) * fraction).round() as usize;
            if keep < batch_size {
                return Err(Error::Invalid(format!(
                    "fraction {fraction} leaves {keep} training examples of {}, less than one batch of {batch_size}",
                    c.system_id
                )));
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut stream(seed, &["fraction", &c.system_id]));
            let mut chosen = idx[..keep].to_vec();
            chosen.sort_unstable();
            c.train = chosen.into_iter().map(|i| c.train[i].clone()).collect();
        }
        Ok(out)
    }
}

fn pretraining_pairs(
    config: &RunConfig,
    seed: u64,
    systems: &[Vec<Quad>],
) -> Vec<(Vec<String>, Vec<String>)> {
    if config.data_dir.is_none() {
        let mut rng = stream(seed, &["pretrain-posts"]);
        return shared_posts(config.pretrain.posts, &config.generator.lexicon, &mut rng)
            .into_iter()
            .map(|p| (p.post, p.reference))
            .collect();
    }
    let mut seen = BTreeSet::new();
    systems
        .iter()
        .flatten()
        .filter(|q| seen.insert(q.post_id.clone()))
        .take(config.pretrain.posts)
        .map(|q| (q.post.clone(), q.reference.clone()))
        .collect()
}

/// Loads, splits and encodes every system, builds the vocabulary and the
/// (optionally pretrained) initial evaluator.
pub fn prepare(config: &RunConfig, seed: u64) -> Result<Prepared> {
    config.validate()?;
    let systems = config.load_systems(seed)?;
    let mut split = Vec::with_capacity(systems.len());
    for quads in systems.iter() {
        split.push(split_by_post(
            quads.clone(),
            config.split,
            &mut stream(seed, &["split"]),
        )?);
    }
    let raw_pairs = if config.pretrain.enabled {
        pretraining_pairs(config, seed, &systems)
    } else {
        Vec::new()
    };
    let mut vocab_source: Vec<Quad> = split.iter().flat_map(|c| c.train.iter().cloned()).collect();
    vocab_source.extend(raw_pairs.iter().map(|(p, r)| Quad {
        post: p.clone(),
        response: Vec::new(),
        reference: r.clone(),
        label: 0,
        system_id: String::new(),
        post_id: String::new(),
    }));
    let vocab = Vocabulary::build(&vocab_source, config.vocab_size);
    let corpora: Vec<EncodedCorpus> = split
        .iter()
        .map(|c| c.encode(&vocab, config.max_len))
        .collect();

    let mut encoder = EncoderParams::init(
        vocab.len(),
        config.dims.embed,
        config.dims.hidden,
        &mut stream(seed, &["encoder-init"]),
    )?;
    let mut pretrain_accuracy = None;
    if config.pretrain.enabled && config.pretrain.config.epochs > 0 {
        let pairs: Vec<(TokenSeq, TokenSeq)> = raw_pairs
            .iter()
            .map(|(p, r)| {
                (
                    preprocess(p, &vocab, config.max_len),
                    preprocess(r, &vocab, config.max_len),
                )
            })
            .collect();
        encoder = pretrain_encoder(
            &pairs,
            &encoder,
            &config.pretrain.config,
            &mut stream(seed, &["pretrain"]),
        )?;
        let negatives: Vec<(TokenSeq, TokenSeq)> = (0..pairs.len())
            .map(|i| (pairs[i].0.clone(), pairs[(i + 1) % pairs.len()].1.clone()))
            .collect();
        pretrain_accuracy = Some(matching_accuracy(&pairs, &negatives, &encoder)?);
    }
    let init = with_fresh_head(&encoder, &mut stream(seed, &["head-init"]))?;
    Ok(Prepared {
        corpora,
        vocab,
        init,
        pretrain_accuracy,
    })
}

/// Where and how far a run persists its progress.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Per-seed working directory; nothing is persisted when absent.
    pub work_dir: Option<PathBuf>,
    /// Continue from the steps already persisted in `work_dir`.
    pub resume: bool,
    /// Stop every strategy after this step.
    pub stop_after: Option<usize>,
}

const RECORDS: &str = "records.jsonl";
const ACCESS: &str = "access.jsonl";

fn state_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("state-{t}.json"))
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(item).map_err(|e| Error::Checkpoint(e.to_string()))?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_access(path: &Path) -> Result<Vec<UpdateAccess>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Checkpoint(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

struct Progress {
    state: EvaluatorState,
    records: Vec<PredictionRecord>,
    ledger: AccessLedger,
}

/// Restores the last fully persisted step. A step counts once its access
/// entry is written, which happens after its checkpoint and records.
fn restore(dir: &Path, kind: StrategyKind, init: &ParamSet) -> Result<Progress> {
    let access = read_access(&dir.join(ACCESS))?;
    let mut done = 0;
    for (i, a) in access.iter().enumerate() {
        if a.step != i + 1 || !state_path(dir, a.step).exists() {
            break;
        }
        done = a.step;
    }
    let mut ledger = AccessLedger::default();
    for a in access.into_iter().take(done) {
        ledger.record(a)?;
    }
    let records_path = dir.join(RECORDS);
    let records: Vec<PredictionRecord> = if records_path.exists() {
        read_records(&records_path)?
            .into_iter()
            .filter(|r| r.step <= done)
            .collect()
    } else {
        Vec::new()
    };
    let state = if done == 0 {
        EvaluatorState::initial(kind, init.clone())
    } else {
        let s = EvaluatorState::from_checkpoint(&Checkpoint::load(&state_path(dir, done))?)?;
        if s.kind != kind || s.step != done {
            return Err(Error::Checkpoint(format!(
                "{} holds a mismatched state",
                dir.display()
            )));
        }
        s
    };
    write_lines(&records_path, &records)?;
    write_lines(&dir.join(ACCESS), &ledger.updates)?;
    Ok(Progress {
        state,
        records,
        ledger,
    })
}

/// The evaluator a run persisted for `kind` after step `t`.
pub fn load_state(work_dir: &Path, kind: StrategyKind, t: usize) -> Result<EvaluatorState> {
    let s = EvaluatorState::from_checkpoint(&Checkpoint::load(&state_path(
        &work_dir.join(kind.name()),
        t,
    ))?)?;
    if s.kind != kind || s.step != t {
        return Err(Error::Checkpoint(format!(
            "state {t} of {kind} is mismatched"
        )));
    }
    Ok(s)
}

/// Predictions of `state` on the test splits of systems `1..=t`.
pub fn predict_seen(
    state: &EvaluatorState,
    corpora: &[EncodedCorpus],
    config: &StrategyConfig,
    seed: u64,
) -> Result<Vec<PredictionRecord>> {
    let t = state.step;
    (1..=t)
        .map(|i| {
            let c = &corpora[i - 1];
            let scores = strategies::predict(state, &c.test, config, seed, &format!("system-{i}"))?;
            let labels = c.test.iter().map(|q| q.grade).collect();
            Ok(PredictionRecord::new(
                t,
                i,
                c.system_id.clone(),
                scores,
                labels,
            ))
        })
        .collect()
}

fn run_strategy(
    kind: StrategyKind,
    prepared: &Prepared,
    config: &RunConfig,
    seed: u64,
    opts: &RunOptions,
) -> Result<Progress> {
    let dir = opts.work_dir.as_ref().map(|d| d.join(kind.name()));
    let mut progress = match &dir {
        Some(d) if opts.resume && d.exists() => restore(d, kind, &prepared.init)?,
        Some(d) => {
            if d.exists() {
                fs::remove_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            Progress {
                state: EvaluatorState::initial(kind, prepared.init.clone()),
                records: Vec::new(),
                ledger: AccessLedger::default(),
            }
        }
        None => Progress {
            state: EvaluatorState::initial(kind, prepared.init.clone()),
            records: Vec::new(),
            ledger: AccessLedger::default(),
        },
    };
    let total = prepared.corpora.len();
    let last = opts.stop_after.map_or(total, |s| s.min(total));
    for t in progress.state.step + 1..=last {
        let up = strategies::update(
            &progress.state,
            &prepared.corpora[..t],
            &prepared.init,
            &config.strategy,
            seed,
        )?;
        let records = predict_seen(&up.state, &prepared.corpora, &config.strategy, seed)?;
        if let Some(d) = &dir {
            up.state.to_checkpoint().save(&state_path(d, t))?;
            append_records(&d.join(RECORDS), &records)?;
            let line =
                serde_json::to_string(&up.access).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let path = d.join(ACCESS);
            let mut text = fs::read_to_string(&path).unwrap_or_default();
            text.push_str(&line);
            text.push('\n');
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        progress.ledger.record(up.access)?;
        progress.records.extend(records);
        progress.state = up.state;
    }
    Ok(progress)
}

/// Runs every configured strategy over the prepared sequence. A failing
/// strategy is reported with its error and marks the report partial.
pub fn run_prepared(
    prepared: &Prepared,
    config: &RunConfig,
    seed: u64,
    opts: &RunOptions,
) -> SequenceReport {
    let steps = prepared.corpora.len();
    let mut strategies = Vec::new();
    for &kind in &config.strategies {
        let started = Instant::now();
        let result = run_strategy(kind, prepared, config, seed, opts);
        let seconds = started.elapsed().as_secs_f64();
        let row = match result {
            Ok(p) => StrategyReport::from_records(kind, steps, &p.records, p.ledger, None),
            Err(e) => StrategyReport::from_records(
                kind,
                steps,
                &[],
                AccessLedger::default(),
                Some(e.to_string()),
            ),
        };
        strategies.push(StrategyReport { seconds, ..row });
    }
    let mut report = SequenceReport {
        seeds: vec![seed],
        systems: prepared.system_ids(),
        steps,
        strategies,
        partial: false,
    };
    report.partial = opts.stop_after.is_some_and(|s| s < steps)
        || report.strategies.iter().any(|s| s.error.is_some());
    report
}

/// Prepares the data for `seed` and runs the sequence.
pub fn run_sequence(config: &RunConfig, seed: u64, opts: &RunOptions) -> Result<SequenceReport> {
    let prepared = prepare(config, seed)?;
    Ok(run_prepared(&prepared, config, seed, opts))
}

/// Rebuilds a report from the records persisted under a per-seed work
/// directory, without loading any evaluator.
pub fn report_from_dir(dir: &Path, seed: u64) -> Result<SequenceReport> {
    let mut strategies = Vec::new();
    let mut systems: Vec<String> = Vec::new();
    let mut steps = 0;
    for kind in StrategyKind::ALL {
        let d = dir.join(kind.name());
        if !d.exists() {
            continue;
        }
        let mut ledger = AccessLedger::default();
        for a in read_access(&d.join(ACCESS))? {
            ledger.record(a)?;
        }
        let records = read_records(&d.join(RECORDS))?;
        for r in &records {
            if systems.len() < r.system {
                systems.resize(r.system, String::new());
            }
            systems[r.system - 1] = r.system_id.clone();
        }
        steps = steps.max(ledger.updates.len());
        strategies.push((kind, records, ledger));
    }
    let strategies: Vec<StrategyReport> = strategies
        .into_iter()
        .map(|(kind, records, ledger)| {
            StrategyReport::from_records(kind, steps, &records, ledger, None)
        })
        .collect();
    let partial = strategies.iter().any(|s| s.ledger.updates.len() < steps);
    Ok(SequenceReport {
        seeds: vec![seed],
        systems,
        steps,
        strategies,
        partial,
    })
}

/// Writes the generated corpora as `<system>.jsonl` files.
pub fn write_corpora(config: &RunConfig, seed: u64, dir: &Path) -> Result<Vec<PathBuf>> {
    let systems = config.load_systems(seed)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    systems
        .iter()
        .map(|quads| {
            let id = quads
                .first()
                .map(|q| q.system_id.clone())
                .ok_or(Error::Empty("system corpus"))?;
            let path = dir.join(format!("{id}.jsonl"));
            crate::corpus::write_jsonl(&path, quads)?;
            Ok(path)
        })
        .collect()
}

/// Pretrains and saves the shared initialization for `seed`.
pub fn write_pretrained(config: &RunConfig, seed: u64, path: &Path) -> Result<Prepared> {
    let prepared = prepare(config, seed)?;
    let mut ckpt = Checkpoint::new().with_group("params", prepared.init.clone());
    ckpt.meta.insert("seed".into(), seed.into());
    ckpt.meta
        .insert("vocab".into(), serde_json::json!(prepared.vocab));
    if let Some(a) = prepared.pretrain_accuracy {
        ckpt.meta.insert("matching_accuracy".into(), a.into());
    }
    ckpt.save(path)?;
    Ok(prepared)
}

#[cfg(test)]
mod tests;
