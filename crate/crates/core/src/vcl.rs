//! Mean-field Gaussian variational continual learning.
//!
//! Each variational weight carries a mean `μ` and a carrier `ρ` with
//! `σ = softplus(ρ)`. The previous posterior is the prior of the next task.
//! In the graph, means and carriers are registered as `mu.<name>` and
//! `rho.<name>`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, softplus_inverse, Array, Graph, NodeId};
use crate::corpus::EncodedQuad;
use crate::model::{self, batch_loss, param_names, ModelNodes};
use crate::params::ParamSet;
use crate::train::{train_loop, Objective, TrainConfig, TrainOutcome};
use crate::{Error, Result};

pub const MU: &str = "mu.";
pub const RHO: &str = "rho.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorMean {
    Zero,
    /// Centered on the initial weights of the first task.
    Init,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlScaling {
    /// Divided by the number of training examples of the task.
    PerExample,
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VclConfig {
    pub prior_mean: PriorMean,
    pub prior_variance: f64,
    /// Posterior standard deviation at the start of the first task.
    pub init_sigma: f64,
    pub kl_scaling: KlScaling,
    /// Extra multiplier on the KL term.
    pub kl_weight: f64,
    pub train_samples: usize,
    pub predict_samples: usize,
    /// Only the scoring head is variational; the encoder is a point estimate.
    pub head_only: bool,
}

impl Default for VclConfig {
    fn default() -> Self {
        Self {
            prior_mean: PriorMean::Zero,
            prior_variance: 1e-6,
            init_sigma: 1e-3,
            kl_scaling: KlScaling::PerExample,
            kl_weight: 1.0,
            train_samples: 20,
            predict_samples: 20,
            head_only: false,
        }
    }
}

impl VclConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prior_variance > 0.0) || !(self.init_sigma > 0.0) {
            return Err(Error::Config(
                "VCL prior variance and initial sigma must be positive".into(),
            ));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::Config("VCL kl_weight must be ≥ 0".into()));
        }
        if self.train_samples == 0 || self.predict_samples == 0 {
            return Err(Error::Config("VCL sample counts must be at least 1".into()));
        }
        Ok(())
    }

    pub fn is_variational(&self, name: &str) -> bool {
        !(self.head_only && model::is_encoder(name))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub mu: ParamSet,
    pub rho: ParamSet,
}

impl GaussianPosterior {
    /// Every coordinate gets standard deviation `sigma`.
    pub fn isotropic(mu: ParamSet, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::Invalid(format!(
                "sigma must be positive, got {sigma}"
            )));
        }
        let r = softplus_inverse(sigma);
        let rho = mu
            .iter()
            .map(|(k, v)| (k.to_string(), Array::full(v.shape(), r)))
            .collect();
        Ok(Self { mu, rho })
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mu.same_layout(&self.rho) {
            return Err(Error::Invalid(
                "posterior mean and carrier layouts differ".into(),
            ));
        }
        for (name, r) in self.rho.iter() {
            if r.data().iter().any(|&x| !(softplus(x) > 0.0)) {
                return Err(Error::Invalid(format!("{name}: non-positive variance")));
            }
        }
        Ok(())
    }

    pub fn sigma(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self
            .rho
            .require(name)?
            .data()
            .iter()
            .map(|&r| softplus(r))
            .collect())
    }

    /// Trainable tensors in graph naming.
    pub fn to_weights(&self) -> ParamSet {
        let mut w = self.mu.prefixed(MU);
        w.extend(self.rho.prefixed(RHO));
        w
    }

    pub fn from_weights(w: &ParamSet) -> Self {
        Self {
            mu: w.strip_prefix(MU),
            rho: w.strip_prefix(RHO),
        }
    }
}

/// `Σ log(σp/σq) + (σq² + (μq − μp)²) / (2σp²) − 1/2` over all coordinates.
pub fn kl_gaussian(q: &GaussianPosterior, p: &GaussianPosterior) -> Result<f64> {
    q.validate()?;
    p.validate()?;
    if !q.mu.same_layout(&p.mu) {
        return Err(Error::Invalid(
            "KL between posteriors of different layouts".into(),
        ));
    }
    let mut total = 0.0;
    for (name, mq) in q.mu.iter() {
        let mp = p.mu.require(name)?;
        let (sq, sp) = (q.sigma(name)?, p.sigma(name)?);
        for i in 0..mq.len() {
            total += kl_scalar(mq.data()[i], sq[i], mp.data()[i], sp[i]);
        }
    }
    Ok(total)
}

pub fn kl_scalar(mq: f64, sq: f64, mp: f64, sp: f64) -> f64 {
    (sp / sq).ln() + (sq * sq + (mq - mp).powi(2)) / (2.0 * sp * sp) - 0.5
}

/// KL node of the posterior held in `mu`/`rho` nodes against a fixed `p`.
pub fn kl_node(
    g: &mut Graph,
    mu: &BTreeMap<String, NodeId>,
    rho: &BTreeMap<String, NodeId>,
    p: &GaussianPosterior,
) -> Result<NodeId> {
    let mut terms = Vec::new();
    let mut constant = 0.0;
    for (name, &m) in mu {
        let r = *rho
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("no carrier for {name}")))?;
        let mp = p.mu.require(name)?;
        let sp = p.sigma(name)?;
        if sp.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Invalid(format!(
                "{name}: non-positive prior variance"
            )));
        }
        constant += sp.iter().map(|s| s.ln() - 0.5).sum::<f64>();
        let inv = g.constant(Array::new(
            mp.shape().to_vec(),
            sp.iter().map(|s| 0.5 / (s * s)).collect(),
        )?);
        let mp = g.constant(mp.clone());
        let sq = g.softplus(r)?;
        let var = g.square(sq)?;
        let diff = g.sub(m, mp)?;
        let d2 = g.square(diff)?;
        let num = g.add(var, d2)?;
        let quad = g.mul(num, inv)?;
        let quad = g.sum(quad)?;
        let log_sq = g.log(sq)?;
        let log_sq = g.sum(log_sq)?;
        terms.push(g.sub(quad, log_sq)?);
    }
    if terms.is_empty() {
        return Err(Error::Empty("variational parameter set"));
    }
    let total = g.add_all(&terms)?;
    Ok(g.shift(total, constant)?)
}

/// Standard-normal draws shaped like `layout`, in name order.
pub fn draw_noise<R: Rng + ?Sized>(layout: &ParamSet, rng: &mut R) -> ParamSet {
    layout
        .iter()
        .map(|(k, v)| {
            let eps = Array::from_fn(v.shape(), |_| rng.sample::<f64, _>(StandardNormal))
                .expect("finite");
            (k.to_string(), eps)
        })
        .collect()
}

/// `θ = μ + σ ⊙ ε`.
pub fn sample_params<R: Rng + ?Sized>(
    posterior: &GaussianPosterior,
    rng: &mut R,
) -> Result<ParamSet> {
    let noise = draw_noise(&posterior.mu, rng);
    posterior
        .mu
        .iter()
        .map(|(name, mu)| {
            let sigma = posterior.sigma(name)?;
            let eps = noise.require(name)?;
            let data = mu
                .data()
                .iter()
                .zip(&sigma)
                .zip(eps.data())
                .map(|((m, s), e)| m + s * e)
                .collect();
            Ok((name.to_string(), Array::new(mu.shape().to_vec(), data)?))
        })
        .collect()
}

/// Registers `mu.*`/`rho.*` parameters, trainable point weights and
/// `frozen` constants. Returns name → node maps for means, carriers and
/// the remaining weights.
#[allow(clippy::type_complexity)]
fn register(
    g: &mut Graph,
    weights: &ParamSet,
    frozen: &ParamSet,
) -> Result<(
    BTreeMap<String, NodeId>,
    BTreeMap<String, NodeId>,
    BTreeMap<String, NodeId>,
)> {
    let (mut mu, mut rho, mut point) = (BTreeMap::new(), BTreeMap::new(), BTreeMap::new());
    for (name, v) in frozen.iter() {
        point.insert(name.to_string(), g.constant(v.clone()));
    }
    for (name, v) in weights.iter() {
        let id = g.param(name, v.clone())?;
        if let Some(base) = name.strip_prefix(MU) {
            mu.insert(base.to_string(), id);
        } else if let Some(base) = name.strip_prefix(RHO) {
            rho.insert(base.to_string(), id);
        } else {
            point.insert(name.to_string(), id);
        }
    }
    Ok((mu, rho, point))
}

/// Monte-Carlo regression loss plus the scaled KL to `prev`, with the
/// noise supplied explicitly (one `ParamSet` per sample).
pub fn vcl_loss_with_noise(
    g: &mut Graph,
    weights: &ParamSet,
    frozen: &ParamSet,
    batch: &[&EncodedQuad],
    prev: &GaussianPosterior,
    noise: &[ParamSet],
    kl_factor: f64,
) -> Result<NodeId> {
    if noise.is_empty() {
        return Err(Error::Invalid(
            "at least one Monte-Carlo sample is required".into(),
        ));
    }
    let (mu, rho, point) = register(g, weights, frozen)?;
    let mut sigma = BTreeMap::new();
    for (name, &r) in &rho {
        sigma.insert(name.clone(), g.softplus(r)?);
    }
    let mut losses = Vec::with_capacity(noise.len());
    for eps in noise {
        let mut ids: BTreeMap<&str, NodeId> = BTreeMap::new();
        for name in param_names() {
            let id = if let Some(&m) = mu.get(name) {
                let s = *sigma
                    .get(name)
                    .ok_or_else(|| Error::Invalid(format!("no carrier for {name}")))?;
                let e = g.constant(eps.require(name)?.clone());
                let se = g.mul(s, e)?;
                g.add(m, se)?
            } else {
                *point
                    .get(name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?
            };
            ids.insert(name, id);
        }
        let nodes = ModelNodes::from_ids(&ids)?;
        losses.push(batch_loss(g, &nodes, batch)?);
    }
    let sum = g.add_all(&losses)?;
    let mut loss = g.scale(sum, 1.0 / noise.len() as f64)?;
    if kl_factor != 0.0 {
        let kl = kl_node(g, &mu, &rho, prev)?;
        let kl = g.scale(kl, kl_factor)?;
        loss = g.add(loss, kl)?;
    }
    Ok(loss)
}

fn kl_factor(config: &VclConfig, n_train: usize) -> f64 {
    match config.kl_scaling {
        KlScaling::PerExample => config.kl_weight / n_train as f64,
        KlScaling::Raw => config.kl_weight,
    }
}

/// Noise-sampling form of the objective.
pub fn vcl_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    weights: &ParamSet,
    frozen: &ParamSet,
    batch: &[&EncodedQuad],
    prev: &GaussianPosterior,
    n_samples: usize,
    kl_factor: f64,
    rng: &mut R,
) -> Result<NodeId> {
    let layout = weights.strip_prefix(MU);
    let noise: Vec<ParamSet> = (0..n_samples).map(|_| draw_noise(&layout, rng)).collect();
    vcl_loss_with_noise(g, weights, frozen, batch, prev, &noise, kl_factor)
}

/// Full model weights at the posterior mean.
pub fn mean_params(posterior: &GaussianPosterior, point: &ParamSet) -> ParamSet {
    let mut p = point.clone();
    p.extend(posterior.mu.clone());
    p
}

/// Mean score over `n_samples` sampled weight sets.
pub fn vcl_predict<R: Rng + ?Sized>(
    posterior: &GaussianPosterior,
    point: &ParamSet,
    quads: &[EncodedQuad],
    n_samples: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if n_samples == 0 {
        return Err(Error::Invalid(
            "at least one prediction sample is required".into(),
        ));
    }
    let mut acc = vec![0.0; quads.len()];
    for _ in 0..n_samples {
        let mut p = point.clone();
        p.extend(sample_params(posterior, rng)?);
        for (a, s) in acc.iter_mut().zip(model::predict(&p, quads)?) {
            *a += s;
        }
    }
    Ok(acc.into_iter().map(|a| a / n_samples as f64).collect())
}

struct VclObjective<'a> {
    prev: &'a GaussianPosterior,
    frozen: &'a ParamSet,
    samples: usize,
    kl_factor: f64,
}

impl Objective for VclObjective<'_> {
    fn batch_loss(
        &mut self,
        g: &mut Graph,
        weights: &ParamSet,
        batch: &[&EncodedQuad],
        noise: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        vcl_loss(
            g,
            weights,
            self.frozen,
            batch,
            self.prev,
            self.samples,
            self.kl_factor,
            noise,
        )
    }

    fn validation_scores(&self, weights: &ParamSet, valid: &[&EncodedQuad]) -> Result<Vec<f64>> {
        let post = GaussianPosterior::from_weights(weights);
        let mut point = point_weights(weights);
        point.extend(self.frozen.clone());
        model::predict_refs(&mean_params(&post, &point), valid)
    }
}

fn point_weights(weights: &ParamSet) -> ParamSet {
    weights
        .iter()
        .filter(|(k, _)| !k.starts_with(MU) && !k.starts_with(RHO))
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect()
}

/// Result of one variational update.
#[derive(Clone, Debug)]
pub struct VclUpdate {
    pub posterior: GaussianPosterior,
    /// Point-estimate weights (the encoder in head-only mode).
    pub point: ParamSet,
    pub outcome: TrainOutcome,
}

/// The prior of the first task.
pub fn initial_prior(init: &ParamSet, config: &VclConfig) -> Result<GaussianPosterior> {
    let mu: ParamSet = init
        .iter()
        .filter(|(k, _)| config.is_variational(k))
        .map(|(k, v)| {
            let m = match config.prior_mean {
                PriorMean::Zero => Array::zeros(v.shape()),
                PriorMean::Init => v.clone(),
            };
            (k.to_string(), m)
        })
        .collect();
    GaussianPosterior::isotropic(mu, config.prior_variance.sqrt())
}

/// Fits `q_t` on one task, starting from `start` and regularized toward
/// `prev`. `point` weights are trained as point estimates, `frozen` ones
/// are held fixed. `prev` is not modified.
#[allow(clippy::too_many_arguments)]
pub fn vcl_update(
    prev: &GaussianPosterior,
    start: &GaussianPosterior,
    point: &ParamSet,
    frozen: &ParamSet,
    train: &[&EncodedQuad],
    valid: &[&EncodedQuad],
    config: &VclConfig,
    train_config: &TrainConfig,
    shuffle: &mut ChaCha8Rng,
    noise: &mut ChaCha8Rng,
    on_step: &mut dyn FnMut(usize, &ParamSet),
) -> Result<VclUpdate> {
    config.validate()?;
    prev.validate()?;
    start.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut weights = start.to_weights();
    weights.extend(point.clone());
    let mut objective = VclObjective {
        prev,
        frozen,
        samples: config.train_samples,
        kl_factor: kl_factor(config, train.len()),
    };
    let outcome = train_loop(
        weights,
        train,
        valid,
        &mut objective,
        train_config,
        shuffle,
        noise,
        on_step,
    )?;
    let posterior = GaussianPosterior::from_weights(&outcome.weights);
    let point = point_weights(&outcome.weights);
    Ok(VclUpdate {
        posterior,
        point,
        outcome,
    })
}
