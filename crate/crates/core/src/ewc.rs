//! Diagonal empirical Fisher information and the quadratic consolidation
//! penalty `Σ λ/2 · F · (θ − θ*)²`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Gradients, Graph, NodeId};
use crate::corpus::EncodedQuad;
use crate::model::{batch_loss, ModelNodes};
use crate::params::ParamSet;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherState {
    pub fisher: ParamSet,
    pub anchor: ParamSet,
    pub lambda: f64,
}

impl FisherState {
    pub fn new(fisher: ParamSet, anchor: ParamSet, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Invalid(format!(
                "EWC lambda must be finite and ≥ 0, got {lambda}"
            )));
        }
        if !fisher.same_layout(&anchor) {
            return Err(Error::Invalid("Fisher and anchor layouts differ".into()));
        }
        if fisher
            .iter()
            .any(|(_, f)| f.data().iter().any(|&v| v < 0.0))
        {
            return Err(Error::Invalid("Fisher entries must be non-negative".into()));
        }
        Ok(Self {
            fisher,
            anchor,
            lambda,
        })
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        Self::new(self.fisher.clone(), self.anchor.clone(), lambda)
    }
}

/// Mean of squared per-example gradients. `grad_of(i)` returns the gradient
/// of example `i`'s loss.
pub fn mean_squared_gradients(
    n: usize,
    mut grad_of: impl FnMut(usize) -> Result<Gradients>,
) -> Result<ParamSet> {
    if n == 0 {
        return Err(Error::Empty("Fisher dataset"));
    }
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut shapes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        for (name, g) in grad_of(i)? {
            let slot = acc
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            slot.iter_mut().zip(g.data()).for_each(|(a, v)| *a += v * v);
            shapes.entry(name).or_insert_with(|| g.shape().to_vec());
        }
    }
    acc.into_iter()
        .map(|(name, sums)| {
            let shape = shapes.remove(&name).expect("recorded");
            let mean = sums.into_iter().map(|s| s / n as f64).collect();
            Ok((name, Array::new(shape, mean)?))
        })
        .collect()
}

/// Empirical Fisher of the single-example squared error at `params`, for
/// the weights selected by `trainable`. `params` is not modified.
pub fn compute_fisher(
    dataset: &[&EncodedQuad],
    params: &ParamSet,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<ParamSet> {
    mean_squared_gradients(dataset.len(), |i| {
        let mut g = Graph::new();
        let nodes = ModelNodes::register(&mut g, params, trainable)?;
        let loss = batch_loss(&mut g, &nodes, &dataset[i..=i])?;
        Ok(g.backward(loss)?)
    })
}

/// Value of the penalty at `params`.
pub fn ewc_penalty(params: &ParamSet, state: &FisherState) -> Result<f64> {
    let mut total = 0.0;
    for (name, f) in state.fisher.iter() {
        let theta = params.require(name)?;
        let anchor = state.anchor.require(name)?;
        if theta.shape() != f.shape() {
            return Err(Error::Invalid(format!(
                "{name}: parameter shape {:?} differs from anchor {:?}",
                theta.shape(),
                anchor.shape()
            )));
        }
        total += f
            .data()
            .iter()
            .zip(theta.data().iter().zip(anchor.data()))
            .map(|(fi, (t, a))| fi * (t - a).powi(2))
            .sum::<f64>();
    }
    Ok(0.5 * state.lambda * total)
}

/// Penalty node over the weights in `nodes` (name → node). Entries of the
/// Fisher state without a node in `nodes` are skipped: they belong to
/// weights that are not trained.
pub fn ewc_penalty_node(
    g: &mut Graph,
    nodes: &BTreeMap<String, NodeId>,
    state: &FisherState,
) -> Result<Option<NodeId>> {
    let mut terms = Vec::new();
    for (name, f) in state.fisher.iter() {
        let Some(&theta) = nodes.get(name) else {
            continue;
        };
        if g.value(theta).shape() != f.shape() {
            return Err(Error::Invalid(format!(
                "{name}: parameter shape {:?} differs from anchor {:?}",
                g.value(theta).shape(),
                f.shape()
            )));
        }
        let anchor = g.constant(state.anchor.require(name)?.clone());
        let fisher = g.constant(f.clone());
        let diff = g.sub(theta, anchor)?;
        let sq = g.square(diff)?;
        let weighted = g.mul(sq, fisher)?;
        terms.push(g.sum(weighted)?);
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let total = g.add_all(&terms)?;
    Ok(Some(g.scale(total, 0.5 * state.lambda)?))
}

/// Regression loss of the batch plus every consolidation penalty.
pub fn ewc_total_loss(
    g: &mut Graph,
    nodes: &ModelNodes,
    weights: &BTreeMap<String, NodeId>,
    batch: &[&EncodedQuad],
    states: &[FisherState],
) -> Result<NodeId> {
    let mut loss = batch_loss(g, nodes, batch)?;
    for state in states {
        if let Some(p) = ewc_penalty_node(g, weights, state)? {
            loss = g.add(loss, p)?;
        }
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff, max_relative_error};
    use crate::corpus::TokenSeq;
    use crate::encoder::EncoderParams;
    use crate::model::{param_names, with_fresh_head};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(name: &str, v: Vec<f64>) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(name, Array::vector(v).unwrap());
        p
    }

    #[test]
    fn penalty_examples() {
        let state = FisherState::new(
            single("w", vec![1.0, 2.0]),
            single("w", vec![0.0, 0.0]),
            2.0,
        )
        .unwrap();
        assert_eq!(
            ewc_penalty(&single("w", vec![1.0, 1.0]), &state).unwrap(),
            3.0
        );
        assert_eq!(
            ewc_penalty(&single("w", vec![0.0, 0.0]), &state).unwrap(),
            0.0
        );
        let flat = FisherState::new(
            single("w", vec![0.0, 0.0]),
            single("w", vec![0.0, 0.0]),
            5.0,
        )
        .unwrap();
        assert_eq!(
            ewc_penalty(&single("w", vec![7.0, -3.0]), &flat).unwrap(),
            0.0
        );
        assert!(ewc_penalty(&single("w", vec![1.0]), &state).is_err());
    }

    #[test]
    fn penalty_node_value_and_gradient() {
        let state = FisherState::new(
            single("w", vec![1.0, 2.0]),
            single("w", vec![0.5, -1.0]),
            3.0,
        )
        .unwrap();
        let mut g = Graph::new();
        let w = g
            .param("w", Array::vector(vec![1.5, 0.0]).unwrap())
            .unwrap();
        let nodes = BTreeMap::from([("w".to_string(), w)]);
        let p = ewc_penalty_node(&mut g, &nodes, &state).unwrap().unwrap();
        // 1.5 · (1·1 + 2·1)
        assert!((g.value(p).item().unwrap() - 4.5).abs() < 1e-15);
        let grads = g.backward(p).unwrap();
        // λ F (θ − θ*)
        assert_eq!(grads["w"].data(), &[3.0, 6.0]);

        let mut g = Graph::new();
        let w = g
            .param("w", state.anchor.get("w").unwrap().clone())
            .unwrap();
        let nodes = BTreeMap::from([("w".to_string(), w)]);
        let p = ewc_penalty_node(&mut g, &nodes, &state).unwrap().unwrap();
        assert!(g.backward(p).unwrap()["w"].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_parameter_fisher() {
        let f = mean_squared_gradients(1, |_| {
            let mut g = Gradients::new();
            g.insert("theta".into(), Array::scalar(-1.0).unwrap());
            Ok(g)
        })
        .unwrap();
        assert_eq!(f.get("theta").unwrap().data(), &[1.0]);
        assert!(mean_squared_gradients(0, |_| Ok(Gradients::new())).is_err());
    }

    fn quad(ids: [&[usize]; 3], grade: u8) -> EncodedQuad {
        let seq = |ids: &[usize]| {
            let mut v = ids.to_vec();
            v.resize(5, 0);
            TokenSeq {
                ids: v,
                len: ids.len(),
            }
        };
        EncodedQuad {
            post: seq(ids[0]),
            response: seq(ids[1]),
            reference: seq(ids[2]),
            grade,
            label: f64::from(grade) / 2.0,
            post_id: String::new(),
        }
    }

    fn model(seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = EncoderParams::init(9, 3, 4, &mut rng).unwrap();
        with_fresh_head(&enc, &mut rng).unwrap()
    }

    fn dataset() -> Vec<EncodedQuad> {
        vec![
            quad([&[2, 3], &[4, 5, 2], &[3]], 2),
            quad([&[5], &[2], &[4, 4]], 0),
            quad([&[3, 2, 4], &[5, 3], &[2, 5]], 1),
        ]
    }

    #[test]
    fn fisher_properties() {
        let p = model(1);
        let data = dataset();
        let refs: Vec<&EncodedQuad> = data.iter().collect();
        let f = compute_fisher(&refs, &p, &|_| true).unwrap();
        assert!(f.iter().all(|(_, a)| a.data().iter().all(|&v| v >= 0.0)));
        // tokens 6..9 never occur, so their embedding rows carry no information
        let emb = f.get(crate::encoder::EMBEDDING).unwrap();
        assert!(emb.data()[6 * 3..].iter().all(|&v| v == 0.0));
        assert!(emb.data()[2 * 3..3 * 3].iter().any(|&v| v > 0.0));

        let doubled: Vec<&EncodedQuad> = refs.iter().chain(&refs).copied().collect();
        let f2 = compute_fisher(&doubled, &p, &|_| true).unwrap();
        assert!(f.max_abs_diff(&f2).unwrap() < 1e-15);

        let reversed: Vec<&EncodedQuad> = refs.iter().rev().copied().collect();
        let f3 = compute_fisher(&reversed, &p, &|_| true).unwrap();
        assert!(f.max_abs_diff(&f3).unwrap() < 1e-15);

        let empty: Vec<&EncodedQuad> = Vec::new();
        assert!(compute_fisher(&empty, &p, &|_| true).is_err());
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let p = model(2);
        let anchor = model(3);
        let data = dataset();
        let refs: Vec<&EncodedQuad> = data.iter().collect();
        let fisher = compute_fisher(&refs, &anchor, &|_| true).unwrap();
        let state = FisherState::new(fisher, anchor, 50.0).unwrap();

        let mut g = Graph::new();
        let nodes = ModelNodes::register(&mut g, &p, |_| true).unwrap();
        let weights: BTreeMap<String, NodeId> = param_names()
            .map(|n| (n.to_string(), g.param_id(n).unwrap()))
            .collect();
        let loss = ewc_total_loss(&mut g, &nodes, &weights, &refs, &[state.clone()]).unwrap();
        let expected =
            crate::model::dataset_loss(&p, &data).unwrap() + ewc_penalty(&p, &state).unwrap();
        assert!((g.value(loss).item().unwrap() - expected).abs() < 1e-12);
        let grads = g.backward(loss).unwrap();
        for name in param_names() {
            let fd = finite_diff(&mut g, name, loss, 1e-6).unwrap();
            assert!(max_relative_error(&grads[name], &fd) < 1e-4, "{name}");
        }
    }

    #[test]
    fn no_penalty_at_the_anchor() {
        let p = model(4);
        let data = dataset();
        let refs: Vec<&EncodedQuad> = data.iter().collect();
        let state = FisherState::new(
            compute_fisher(&refs, &p, &|_| true).unwrap(),
            p.clone(),
            1e4,
        )
        .unwrap();
        let mut g = Graph::new();
        let nodes = ModelNodes::register(&mut g, &p, |_| true).unwrap();
        let weights: BTreeMap<String, NodeId> = param_names()
            .map(|n| (n.to_string(), g.param_id(n).unwrap()))
            .collect();
        let with = ewc_total_loss(&mut g, &nodes, &weights, &refs, &[state]).unwrap();
        let without = ewc_total_loss(&mut g, &nodes, &weights, &refs, &[]).unwrap();
        assert_eq!(g.value(with).item(), g.value(without).item());
    }
}
