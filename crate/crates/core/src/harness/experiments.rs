//! Training-size ablation and the in-scope versus out-of-scope gap.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::report::median;
use super::{prepare, run_prepared, Prepared, RunConfig, RunOptions, SequenceReport};
use crate::metrics::spearman;
use crate::strategies::{self, predict, EvaluatorState, StrategyKind};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub fractions: Vec<f64>,
    pub strategies: Vec<StrategyKind>,
    pub steps: usize,
    /// `[strategy][fraction][t − 1]`: median over seeds of `Pla^t(f) / Pla^t(1)`.
    pub normalized: Vec<Vec<Vec<Option<f64>>>>,
    /// Per-seed sequence reports, `[fraction][seed]`.
    pub runs: Vec<Vec<SequenceReport>>,
}

impl AblationReport {
    pub fn normalized_at(&self, kind: StrategyKind, fraction: f64, t: usize) -> Option<f64> {
        let s = self.strategies.iter().position(|&k| k == kind)?;
        let f = self.fractions.iter().position(|&x| x == fraction)?;
        self.normalized[s][f]
            .get(t.checked_sub(1)?)
            .copied()
            .flatten()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("strategy,fraction");
        for t in 1..=self.steps {
            write!(out, ",norm_pla_{t}").unwrap();
        }
        out.push('\n');
        for (s, kind) in self.strategies.iter().enumerate() {
            for (f, frac) in self.fractions.iter().enumerate() {
                write!(out, "{},{frac}", kind.name()).unwrap();
                for v in &self.normalized[s][f] {
                    out.push(',');
                    if let Some(v) = v {
                        write!(out, "{v:.6}").unwrap();
                    }
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Normalized plasticity `Pla^t(f) / Pla^t(1)` for one seed. Undefined when
/// the full-data plasticity is not positive.
fn normalize(
    run: &SequenceReport,
    full: &SequenceReport,
    kind: StrategyKind,
    t: usize,
) -> Option<f64> {
    let base = full.strategy(kind)?.pla(t)?;
    let v = run.strategy(kind)?.pla(t)?;
    (base > 0.0).then(|| v / base)
}

/// Reruns the sequence with each training fraction. `fractions` must be
/// strictly descending and start at 1.0.
pub fn ablate_training_size(config: &RunConfig, fractions: &[f64]) -> Result<AblationReport> {
    if fractions.first() != Some(&1.0) {
        return Err(Error::Config("fractions must start at 1.0".into()));
    }
    if fractions.windows(2).any(|w| !(w[1] < w[0]))
        || fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0))
    {
        return Err(Error::Config(
            "fractions must be strictly descending within (0, 1]".into(),
        ));
    }
    let mut runs: Vec<Vec<SequenceReport>> = vec![Vec::new(); fractions.len()];
    for &seed in &config.seeds {
        let full = prepare(config, seed)?;
        for (f, &fraction) in fractions.iter().enumerate() {
            let data = full.with_fraction(fraction, seed, config.strategy.train.batch_size)?;
            runs[f].push(run_prepared(&data, config, seed, &RunOptions::default()));
        }
    }
    Ok(summarize_ablation(
        config.strategies.clone(),
        fractions.to_vec(),
        runs,
    ))
}

/// Builds the normalized table from already computed runs,
/// `runs[fraction][seed]` with `fractions[0] == 1.0`.
pub fn summarize_ablation(
    strategies: Vec<StrategyKind>,
    fractions: Vec<f64>,
    runs: Vec<Vec<SequenceReport>>,
) -> AblationReport {
    let steps = runs.first().and_then(|r| r.first()).map_or(0, |r| r.steps);
    let normalized = strategies
        .iter()
        .map(|&kind| {
            (0..fractions.len())
                .map(|f| {
                    (1..=steps)
                        .map(|t| {
                            let vals = runs[f]
                                .iter()
                                .zip(&runs[0])
                                .filter_map(|(r, full)| normalize(r, full, kind, t))
                                .collect();
                            median(vals)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    AblationReport {
        fractions,
        strategies,
        steps,
        normalized,
        runs,
    }
}

/// Mean Spearman on in-scope and out-of-scope test sets for one `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub k: usize,
    /// Medians over seeds.
    pub in_scope: f64,
    pub out_of_scope: f64,
    /// Per-seed `(in, out)` pairs.
    pub per_seed: Vec<(f64, f64)>,
}

impl GapRow {
    pub fn from_seeds(k: usize, per_seed: Vec<(f64, f64)>) -> Self {
        Self {
            k,
            in_scope: median(per_seed.iter().map(|p| p.0).collect()).unwrap_or(f64::NAN),
            out_of_scope: median(per_seed.iter().map(|p| p.1).collect()).unwrap_or(f64::NAN),
            per_seed,
        }
    }

    pub fn gap(&self) -> f64 {
        self.in_scope - self.out_of_scope
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub rows: Vec<GapRow>,
}

impl GapReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,in_scope,out_of_scope,gap\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{:.6},{:.6},{:.6}",
                r.k,
                r.in_scope,
                r.out_of_scope,
                r.gap()
            )
            .unwrap();
        }
        out
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `(in, out)` mean Spearman of one evaluator trained on the first `k`
/// systems pooled.
pub fn gap_for_seed(
    prepared: &Prepared,
    config: &RunConfig,
    seed: u64,
    k: usize,
) -> Result<(f64, f64)> {
    let total = prepared.corpora.len();
    if k == 0 || k >= total {
        return Err(Error::Invalid(format!("k must be in 1..{total}, got {k}")));
    }
    // Pooled training is the retraining update at step k.
    let start = EvaluatorState {
        step: k - 1,
        ..EvaluatorState::initial(StrategyKind::Retraining, prepared.init.clone())
    };
    let up = strategies::update(
        &start,
        &prepared.corpora[..k],
        &prepared.init,
        &config.strategy,
        seed,
    )?;
    gap_of_state(prepared, &up.state, config, seed)
}

/// `(in, out)` mean Spearman of an evaluator that has seen the first
/// `state.step` systems.
pub fn gap_of_state(
    prepared: &Prepared,
    state: &EvaluatorState,
    config: &RunConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    let (k, total) = (state.step, prepared.corpora.len());
    if k == 0 || k >= total {
        return Err(Error::Invalid(format!(
            "the evaluator must have seen 1..{total} systems, saw {k}"
        )));
    }
    let mut corr = Vec::with_capacity(total);
    for (i, c) in prepared.corpora.iter().enumerate() {
        let scores = predict(
            state,
            &c.test,
            &config.strategy,
            seed,
            &format!("system-{}", i + 1),
        )?;
        let labels: Vec<f64> = c.test.iter().map(|q| q.label).collect();
        corr.push(spearman(&scores, &labels)?);
    }
    Ok((mean(&corr[..k]), mean(&corr[k..])))
}

/// The gap for every `k` in `ks`, as the median over the configured seeds.
pub fn gap_experiment(config: &RunConfig, ks: &[usize]) -> Result<GapReport> {
    let prepared: Vec<Prepared> = config
        .seeds
        .iter()
        .map(|&s| prepare(config, s))
        .collect::<Result<_>>()?;
    let rows = ks
        .iter()
        .map(|&k| {
            let per_seed = prepared
                .iter()
                .zip(&config.seeds)
                .map(|(p, &seed)| gap_for_seed(p, config, seed, k))
                .collect::<Result<Vec<_>>>()?;
            Ok(GapRow::from_seeds(k, per_seed))
        })
        .collect::<Result<_>>()?;
    Ok(GapReport { rows })
}
