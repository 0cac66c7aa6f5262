//! The six evaluator update strategies behind one interface, with
//! per-update data-access accounting.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::corpus::{EncodedCorpus, EncodedQuad};
use crate::ewc::{compute_fisher, ewc_total_loss, FisherState};
use crate::model::{self, is_encoder, ModelNodes};
use crate::params::{Checkpoint, ParamSet};
use crate::rng::stream;
use crate::train::{train_loop, Objective, TrainConfig, TrainOutcome};
use crate::vcl::{
    initial_prior, mean_params, vcl_predict, vcl_update, GaussianPosterior, VclConfig,
};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    Stationary,
    Individual,
    Retraining,
    FineTuning,
    Ewc,
    Vcl,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        StrategyKind::Stationary,
        StrategyKind::Individual,
        StrategyKind::Retraining,
        StrategyKind::FineTuning,
        StrategyKind::Ewc,
        StrategyKind::Vcl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Stationary => "stationary",
            StrategyKind::Individual => "individual",
            StrategyKind::Retraining => "retraining",
            StrategyKind::FineTuning => "fine-tuning",
            StrategyKind::Ewc => "ewc",
            StrategyKind::Vcl => "vcl",
        }
    }

    /// Whether the strategy keeps a single evaluator that it updates in place.
    pub fn is_sequential(self) -> bool {
        matches!(
            self,
            StrategyKind::FineTuning | StrategyKind::Ewc | StrategyKind::Vcl
        )
    }

    /// Training (equivalently validation) sets an update at step `t` may read.
    pub fn allowed_reads(self, t: usize) -> Vec<usize> {
        match self {
            StrategyKind::Stationary if t == 1 => vec![1],
            StrategyKind::Stationary => Vec::new(),
            StrategyKind::Retraining => (1..=t).collect(),
            _ => vec![t],
        }
    }

    /// Evaluators and datasets that must be kept after step `t`.
    pub fn storage(self, t: usize) -> (usize, usize) {
        match self {
            StrategyKind::Individual => (t, 0),
            StrategyKind::Retraining => (1, t),
            _ => (1, 0),
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Attachment {
    None,
    /// One state per anchor; a single entry unless multi-anchor is enabled.
    Fisher(Vec<FisherState>),
    Posterior(GaussianPosterior),
}

/// An evaluator after `step` updates. For VCL `params` holds the weights at
/// the posterior mean.
#[derive(Clone, Debug, PartialEq)]
pub struct EvaluatorState {
    pub kind: StrategyKind,
    pub params: ParamSet,
    pub attachment: Attachment,
    pub step: usize,
}

impl EvaluatorState {
    pub fn initial(kind: StrategyKind, init: ParamSet) -> Self {
        Self {
            kind,
            params: init,
            attachment: Attachment::None,
            step: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match (&self.attachment, self.kind) {
            (Attachment::None, StrategyKind::Ewc | StrategyKind::Vcl) => self.step == 0,
            (Attachment::None, _) => true,
            (Attachment::Fisher(_), StrategyKind::Ewc) => true,
            (Attachment::Posterior(_), StrategyKind::Vcl) => true,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!(
                "{} evaluator at step {} has a mismatched attachment",
                self.kind, self.step
            )))
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new().with_group("params", self.params.clone());
        ckpt.meta.insert("strategy".into(), self.kind.name().into());
        ckpt.meta.insert("step".into(), self.step.into());
        match &self.attachment {
            Attachment::None => {}
            Attachment::Fisher(states) => {
                let lambdas: Vec<f64> = states.iter().map(|s| s.lambda).collect();
                ckpt.meta
                    .insert("lambdas".into(), serde_json::json!(lambdas));
                for (k, s) in states.iter().enumerate() {
                    ckpt = ckpt
                        .with_group(&format!("fisher.{k}"), s.fisher.clone())
                        .with_group(&format!("anchor.{k}"), s.anchor.clone());
                }
            }
            Attachment::Posterior(p) => {
                ckpt = ckpt
                    .with_group("posterior.mu", p.mu.clone())
                    .with_group("posterior.rho", p.rho.clone());
            }
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = |key: &str| {
            ckpt.meta
                .get(key)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint metadata lacks {key}")))
        };
        let kind: StrategyKind = meta("strategy")?
            .as_str()
            .ok_or_else(|| Error::Checkpoint("strategy must be a string".into()))?
            .parse()?;
        let step = meta("step")?
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("step must be an integer".into()))?
            as usize;
        let attachment = if let Some(l) = ckpt.meta.get("lambdas") {
            let lambdas: Vec<f64> = serde_json::from_value(l.clone())
                .map_err(|e| Error::Checkpoint(format!("lambdas: {e}")))?;
            let states = lambdas
                .iter()
                .enumerate()
                .map(|(k, &lambda)| {
                    FisherState::new(
                        ckpt.group(&format!("fisher.{k}"))?.clone(),
                        ckpt.group(&format!("anchor.{k}"))?.clone(),
                        lambda,
                    )
                })
                .collect::<Result<_>>()?;
            Attachment::Fisher(states)
        } else if ckpt.tensors.contains_key("posterior.mu") {
            Attachment::Posterior(GaussianPosterior {
                mu: ckpt.group("posterior.mu")?.clone(),
                rho: ckpt.group("posterior.rho")?.clone(),
            })
        } else {
            Attachment::None
        };
        let state = Self {
            kind,
            params: ckpt.group("params")?.clone(),
            attachment,
            step,
        };
        state.validate()?;
        Ok(state)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EwcConfig {
    /// λ for steps 2, 3, ...; the last entry repeats.
    pub lambdas: Vec<f64>,
    /// Multiplier applied to every scheduled λ.
    pub lambda_scale: f64,
    /// Keep one penalty per past task instead of only the latest.
    pub multi_anchor: bool,
}

impl Default for EwcConfig {
    fn default() -> Self {
        Self {
            lambdas: vec![1e4, 1e5, 1e6, 1e7],
            lambda_scale: 1.0,
            multi_anchor: false,
        }
    }
}

impl EwcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() {
            return Err(Error::Config("the EWC lambda schedule is empty".into()));
        }
        if self
            .lambdas
            .iter()
            .chain([&self.lambda_scale])
            .any(|l| !(*l >= 0.0) || !l.is_finite())
        {
            return Err(Error::Config("EWC lambdas must be finite and ≥ 0".into()));
        }
        Ok(())
    }

    /// λ used while training step `t` (t ≥ 2).
    pub fn lambda_for(&self, t: usize) -> f64 {
        let i = t.saturating_sub(2).min(self.lambdas.len() - 1);
        self.lambdas[i] * self.lambda_scale
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub train: TrainConfig,
    pub ewc: EwcConfig,
    pub vcl: VclConfig,
    /// Keep the pretrained encoder fixed and train only the head.
    pub freeze_encoder: bool,
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.ewc.validate()?;
        self.vcl.validate()
    }

    pub fn trainable(&self, name: &str) -> bool {
        !(self.freeze_encoder && is_encoder(name))
    }
}

/// What one update read and what it leaves stored.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateAccess {
    pub step: usize,
    /// 1-based indices of the training sets read, ascending.
    pub train_sets: Vec<usize>,
    pub valid_sets: Vec<usize>,
    /// Training examples processed by the optimizer, summed over epochs.
    pub example_passes: usize,
    /// Per-example backward passes spent on the Fisher estimate.
    pub fisher_passes: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub evaluators_stored: usize,
    pub datasets_stored: usize,
}

/// Accumulated accounting of a strategy run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessLedger {
    pub updates: Vec<UpdateAccess>,
}

impl AccessLedger {
    pub fn record(&mut self, access: UpdateAccess) -> Result<()> {
        let expected = self.updates.len() + 1;
        if access.step != expected {
            return Err(Error::Invalid(format!(
                "ledger expected step {expected}, got {}",
                access.step
            )));
        }
        self.updates.push(access);
        Ok(())
    }

    pub fn train_set_reads(&self) -> usize {
        self.updates.iter().map(|u| u.train_sets.len()).sum()
    }

    pub fn example_passes(&self) -> usize {
        self.updates
            .iter()
            .map(|u| u.example_passes + u.fisher_passes)
            .sum()
    }

    pub fn evaluators_stored(&self) -> usize {
        self.updates.last().map_or(0, |u| u.evaluators_stored)
    }

    pub fn datasets_stored(&self) -> usize {
        self.updates.last().map_or(0, |u| u.datasets_stored)
    }
}

/// Read access to `D_1..D_t` that enforces the strategy's data contract and
/// records every read.
pub struct History<'a> {
    sets: &'a [EncodedCorpus],
    allowed: Vec<usize>,
    kind: StrategyKind,
    access: UpdateAccess,
}

impl<'a> History<'a> {
    pub fn new(kind: StrategyKind, sets: &'a [EncodedCorpus]) -> Self {
        let t = sets.len();
        Self {
            sets,
            allowed: kind.allowed_reads(t),
            kind,
            access: UpdateAccess {
                step: t,
                ..Default::default()
            },
        }
    }

    fn check(&self, i: usize, what: &str) -> Result<&'a EncodedCorpus> {
        if !self.allowed.contains(&i) {
            return Err(Error::Contract(format!(
                "{} update at step {} may not read {what} set {i}",
                self.kind, self.access.step
            )));
        }
        Ok(&self.sets[i - 1])
    }

    pub fn train(&mut self, i: usize) -> Result<&'a [EncodedQuad]> {
        let c = self.check(i, "training")?;
        if !self.access.train_sets.contains(&i) {
            self.access.train_sets.push(i);
            self.access.train_sets.sort_unstable();
        }
        Ok(&c.train)
    }

    pub fn valid(&mut self, i: usize) -> Result<&'a [EncodedQuad]> {
        let c = self.check(i, "validation")?;
        if !self.access.valid_sets.contains(&i) {
            self.access.valid_sets.push(i);
            self.access.valid_sets.sort_unstable();
        }
        Ok(&c.valid)
    }

    pub fn into_access(self) -> UpdateAccess {
        self.access
    }
}

struct Regression<'a> {
    config: &'a StrategyConfig,
    penalties: &'a [FisherState],
}

impl Objective for Regression<'_> {
    fn batch_loss(
        &mut self,
        g: &mut Graph,
        weights: &ParamSet,
        batch: &[&EncodedQuad],
        _: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        let nodes = ModelNodes::register(g, weights, |n| self.config.trainable(n))?;
        let ids: BTreeMap<String, NodeId> = weights
            .names()
            .filter_map(|n| g.param_id(n).map(|id| (n.to_string(), id)))
            .collect();
        ewc_total_loss(g, &nodes, &ids, batch, self.penalties)
    }

    fn validation_scores(&self, weights: &ParamSet, valid: &[&EncodedQuad]) -> Result<Vec<f64>> {
        model::predict_refs(weights, valid)
    }
}

/// Result of one call to [`update`].
#[derive(Clone, Debug)]
pub struct Updated {
    pub state: EvaluatorState,
    pub access: UpdateAccess,
    /// `None` when the strategy did not train.
    pub outcome: Option<TrainOutcome>,
}

/// Advances `state` from step `t − 1` to `t = history.len()`. `init` is the
/// shared fresh initialization used wherever an evaluator starts over.
pub fn update(
    state: &EvaluatorState,
    history: &[EncodedCorpus],
    init: &ParamSet,
    config: &StrategyConfig,
    seed: u64,
) -> Result<Updated> {
    update_observed(state, history, init, config, seed, &mut |_, _| {})
}

/// [`update`] with a hook that sees the trainable weights after every
/// optimizer step.
pub fn update_observed(
    state: &EvaluatorState,
    history: &[EncodedCorpus],
    init: &ParamSet,
    config: &StrategyConfig,
    seed: u64,
    on_step: &mut dyn FnMut(usize, &ParamSet),
) -> Result<Updated> {
    config.validate()?;
    state.validate()?;
    let t = history.len();
    if t == 0 || state.step + 1 != t {
        return Err(Error::Invalid(format!(
            "update needs exactly step + 1 history entries: step {}, got {t}",
            state.step
        )));
    }
    let kind = state.kind;
    let mut h = History::new(kind, history);
    let ts = t.to_string();
    let mut shuffle = stream(seed, &["shuffle", &ts]);
    let mut noise = stream(seed, &["noise", &ts]);
    let train_cfg = &config.train;

    let (params, attachment, outcome) = match kind {
        StrategyKind::Stationary if t > 1 => (state.params.clone(), state.attachment.clone(), None),
        StrategyKind::Stationary | StrategyKind::Individual | StrategyKind::FineTuning => {
            let start = if kind == StrategyKind::FineTuning {
                &state.params
            } else {
                init
            };
            let train: Vec<&EncodedQuad> = h.train(t)?.iter().collect();
            let valid: Vec<&EncodedQuad> = h.valid(t)?.iter().collect();
            let mut obj = Regression {
                config,
                penalties: &[],
            };
            let out = train_loop(
                start.clone(),
                &train,
                &valid,
                &mut obj,
                train_cfg,
                &mut shuffle,
                &mut noise,
                on_step,
            )?;
            (out.weights.clone(), Attachment::None, Some(out))
        }
        StrategyKind::Retraining => {
            let mut train = Vec::new();
            let mut valid = Vec::new();
            for i in 1..=t {
                train.extend(h.train(i)?);
                valid.extend(h.valid(i)?);
            }
            let mut obj = Regression {
                config,
                penalties: &[],
            };
            let out = train_loop(
                init.clone(),
                &train,
                &valid,
                &mut obj,
                train_cfg,
                &mut shuffle,
                &mut noise,
                on_step,
            )?;
            (out.weights.clone(), Attachment::None, Some(out))
        }
        StrategyKind::Ewc => {
            let train: Vec<&EncodedQuad> = h.train(t)?.iter().collect();
            let valid: Vec<&EncodedQuad> = h.valid(t)?.iter().collect();
            let penalties: Vec<FisherState> = match &state.attachment {
                Attachment::Fisher(states) => states.clone(),
                _ => Vec::new(),
            };
            let mut obj = Regression {
                config,
                penalties: &penalties,
            };
            let out = train_loop(
                state.params.clone(),
                &train,
                &valid,
                &mut obj,
                train_cfg,
                &mut shuffle,
                &mut noise,
                on_step,
            )?;
            let fisher = compute_fisher(&train, &out.weights, &|n| config.trainable(n))?;
            let anchor: ParamSet = fisher
                .names()
                .map(|n| Ok((n.to_string(), out.weights.require(n)?.clone())))
                .collect::<Result<_>>()?;
            let next_lambda = config.ewc.lambda_for(t + 1);
            let fresh = FisherState::new(fisher, anchor, next_lambda)?;
            let states = if config.ewc.multi_anchor {
                let mut s: Vec<FisherState> = penalties
                    .iter()
                    .map(|p| p.with_lambda(next_lambda))
                    .collect::<Result<_>>()?;
                s.push(fresh);
                s
            } else {
                vec![fresh]
            };
            (out.weights.clone(), Attachment::Fisher(states), Some(out))
        }
        StrategyKind::Vcl => {
            let train: Vec<&EncodedQuad> = h.train(t)?.iter().collect();
            let valid: Vec<&EncodedQuad> = h.valid(t)?.iter().collect();
            let vcfg = VclConfig {
                head_only: config.vcl.head_only || config.freeze_encoder,
                ..config.vcl
            };
            let variational = |n: &str| vcfg.is_variational(n);
            let (prev, start) = match &state.attachment {
                Attachment::Posterior(p) => (p.clone(), p.clone()),
                _ => {
                    let mu: ParamSet = init
                        .iter()
                        .filter(|(k, _)| variational(k))
                        .map(|(k, v)| (k.to_string(), v.clone()))
                        .collect();
                    (
                        initial_prior(init, &vcfg)?,
                        GaussianPosterior::isotropic(mu, vcfg.init_sigma)?,
                    )
                }
            };
            let base = if state.step == 0 { init } else { &state.params };
            let (mut point, mut frozen) = (ParamSet::new(), ParamSet::new());
            for (k, v) in base.iter().filter(|(k, _)| !variational(k)) {
                if config.trainable(k) {
                    point.insert(k, v.clone());
                } else {
                    frozen.insert(k, v.clone());
                }
            }
            let up = vcl_update(
                &prev,
                &start,
                &point,
                &frozen,
                &train,
                &valid,
                &vcfg,
                train_cfg,
                &mut shuffle,
                &mut noise,
                on_step,
            )?;
            let mut fixed = up.point.clone();
            fixed.extend(frozen);
            let params = mean_params(&up.posterior, &fixed);
            (
                params,
                Attachment::Posterior(up.posterior),
                Some(up.outcome),
            )
        }
    };

    let mut access = h.into_access();
    if let Some(out) = &outcome {
        access.example_passes = out.example_passes;
        access.epochs_run = out.epochs_run;
        access.best_epoch = out.best_epoch;
    }
    if kind == StrategyKind::Ewc {
        access.fisher_passes = history[t - 1].train.len();
    }
    (access.evaluators_stored, access.datasets_stored) = kind.storage(t);
    Ok(Updated {
        state: EvaluatorState {
            kind,
            params,
            attachment,
            step: t,
        },
        access,
        outcome,
    })
}

/// Scores of `state` on `quads`. VCL averages sampled weights with a
/// stream keyed by `seed`, the state's step and `tag`; every other strategy
/// is deterministic.
pub fn predict(
    state: &EvaluatorState,
    quads: &[EncodedQuad],
    config: &StrategyConfig,
    seed: u64,
    tag: &str,
) -> Result<Vec<f64>> {
    match &state.attachment {
        Attachment::Posterior(post) if config.vcl.predict_samples > 0 => {
            let point: ParamSet = state
                .params
                .iter()
                .filter(|(k, _)| post.mu.get(k).is_none())
                .map(|(k, v)| (k.to_string(), v.clone()))
                .collect();
            let mut rng = stream(seed, &["predict", &state.step.to_string(), tag]);
            vcl_predict(post, &point, quads, config.vcl.predict_samples, &mut rng)
        }
        _ => model::predict(&state.params, quads),
    }
}
