//! Bilinear scoring head `σ(cᵀMr + gᵀNr + b)` and the squared-error loss.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{sigmoid, Array, Graph, NodeId};
use crate::params::ParamSet;
use crate::{Error, Result};

pub const M: &str = "scorer.m";
pub const N: &str = "scorer.n";
pub const B: &str = "scorer.b";
pub const NAMES: [&str; 3] = [M, N, B];

pub const INIT_STD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct ScorerParams {
    pub m: Array,
    pub n: Array,
    pub b: Array,
}

impl ScorerParams {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            m: Array::zeros(&[hidden, hidden]),
            n: Array::zeros(&[hidden, hidden]),
            b: Array::zeros(&[1]),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.m.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.m.rows();
        if h == 0 || self.m.shape() != [h, h] || self.n.shape() != [h, h] || self.b.len() != 1 {
            return Err(Error::Invalid(format!(
                "scorer shapes M {:?}, N {:?}, b {:?}",
                self.m.shape(),
                self.n.shape(),
                self.b.shape()
            )));
        }
        Ok(())
    }

    pub fn to_params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(M, self.m.clone());
        p.insert(N, self.n.clone());
        p.insert(B, self.b.clone());
        p
    }

    pub fn from_params(p: &ParamSet) -> Result<Self> {
        let out = Self {
            m: p.require(M)?.clone(),
            n: p.require(N)?.clone(),
            b: p.require(B)?.clone(),
        };
        out.validate()?;
        Ok(out)
    }
}

/// Normal(0, 0.1) redrawn until it falls within two standard deviations.
fn truncated_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    loop {
        let x = normal.sample(rng);
        if x.abs() <= 2.0 * INIT_STD {
            return x;
        }
    }
}

pub fn init_scorer<R: Rng + ?Sized>(rng: &mut R, hidden: usize) -> Result<ScorerParams> {
    if hidden == 0 {
        return Err(Error::Invalid("hidden size must be at least 1".into()));
    }
    let mut draw =
        |shape: &[usize]| Array::from_fn(shape, |_| truncated_normal(rng)).expect("finite");
    Ok(ScorerParams {
        m: draw(&[hidden, hidden]),
        n: draw(&[hidden, hidden]),
        b: draw(&[1]),
    })
}

#[derive(Clone, Copy, Debug)]
pub struct ScorerNodes {
    pub m: NodeId,
    pub n: NodeId,
    pub b: NodeId,
}

impl ScorerNodes {
    pub fn register(g: &mut Graph, p: &ScorerParams, trainable: bool) -> Result<Self> {
        let mut add = |name: &str, v: &Array| -> Result<NodeId> {
            if trainable {
                Ok(g.param(name, v.clone())?)
            } else {
                Ok(g.constant(v.clone()))
            }
        };
        Ok(Self {
            m: add(M, &p.m)?,
            n: add(N, &p.n)?,
            b: add(B, &p.b)?,
        })
    }
}

/// Scores for a batch of encodings, each `[B, H]`; returns `[B, 1]`.
pub fn score_nodes(
    g: &mut Graph,
    nodes: &ScorerNodes,
    c: NodeId,
    r: NodeId,
    gref: NodeId,
) -> Result<NodeId> {
    let post_term = g.bilinear(c, nodes.m, r)?;
    let ref_term = g.bilinear(gref, nodes.n, r)?;
    let logit = g.add(post_term, ref_term)?;
    let logit = g.add(logit, nodes.b)?;
    Ok(g.sigmoid(logit)?)
}

pub fn score(c: &[f64], r: &[f64], gref: &[f64], p: &ScorerParams) -> Result<f64> {
    p.validate()?;
    let h = p.hidden_dim();
    if c.len() != h || r.len() != h || gref.len() != h {
        return Err(Error::Invalid(format!(
            "encodings of length {}/{}/{} for hidden size {h}",
            c.len(),
            r.len(),
            gref.len()
        )));
    }
    if !c.iter().chain(r).chain(gref).all(|v| v.is_finite()) {
        return Err(Error::Invalid("non-finite encoding".into()));
    }
    let bilinear = |x: &[f64], w: &Array| -> f64 {
        let w = w.data();
        (0..h)
            .map(|i| x[i] * (0..h).map(|j| w[i * h + j] * r[j]).sum::<f64>())
            .sum()
    };
    Ok(sigmoid(
        bilinear(c, &p.m) + bilinear(gref, &p.n) + p.b.data()[0],
    ))
}

/// A model score next to its normalized label.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredExample {
    pub score: f64,
    /// grade / 2
    pub label: f64,
}

pub fn regression_loss(batch: &[ScoredExample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("regression batch"));
    }
    Ok(batch
        .iter()
        .map(|e| (e.label - e.score).powi(2))
        .sum::<f64>()
        / batch.len() as f64)
}

/// Mean squared error of a `[B, 1]` score node against labels.
pub fn regression_loss_node(g: &mut Graph, scores: NodeId, labels: &[f64]) -> Result<NodeId> {
    if labels.is_empty() {
        return Err(Error::Empty("regression batch"));
    }
    let target = g.constant(Array::matrix(labels.len(), 1, labels.to_vec())?);
    let diff = g.sub(scores, target)?;
    let sq = g.square(diff)?;
    Ok(g.mean(sq)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one(v: f64) -> Array {
        Array::matrix(1, 1, vec![v]).unwrap()
    }

    #[test]
    fn zero_head_scores_half() {
        let p = ScorerParams::zeros(3);
        assert_eq!(
            score(&[1.0, 2.0, 3.0], &[0.5; 3], &[-1.0; 3], &p).unwrap(),
            0.5
        );
    }

    #[test]
    fn hand_evaluated_score() {
        let p = ScorerParams {
            m: one(0.5),
            n: one(1.0),
            b: Array::vector(vec![-1.0]).unwrap(),
        };
        // 2·0.5·1 + 3·1·1 − 1 = 3
        let expected = 1.0 / (1.0 + (-3.0f64).exp());
        assert!((score(&[2.0], &[1.0], &[3.0], &p).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.95257).abs() < 1e-5);
    }

    #[test]
    fn flipping_response_mirrors_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = init_scorer(&mut rng, 4).unwrap();
        p.b = Array::vector(vec![0.0]).unwrap();
        let (c, r, g) = (
            [0.3, -0.2, 0.9, 0.1],
            [0.5, 0.4, -0.7, 0.2],
            [-0.6, 0.8, 0.1, 0.3],
        );
        let neg: Vec<f64> = r.iter().map(|x| -x).collect();
        let s = score(&c, &r, &g, &p).unwrap();
        let s_neg = score(&c, &neg, &g, &p).unwrap();
        assert!((s + s_neg - 1.0).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_error() {
        assert!(score(&[1.0], &[1.0, 2.0], &[1.0], &ScorerParams::zeros(1)).is_err());
    }

    #[test]
    fn loss_examples() {
        let ex = |score, label| ScoredExample { score, label };
        assert_eq!(regression_loss(&[ex(0.5, 0.5), ex(1.0, 1.0)]).unwrap(), 0.0);
        assert_eq!(regression_loss(&[ex(0.5, 1.0)]).unwrap(), 0.25);
        let two = regression_loss(&[ex(0.5, 1.0), ex(0.3, 0.0)]).unwrap();
        assert!((two - 0.17).abs() < 1e-15);
        assert!(regression_loss(&[]).is_err());
    }

    #[test]
    fn node_loss_matches_value_loss() {
        let mut g = Graph::new();
        let s = g.constant(Array::matrix(2, 1, vec![0.5, 0.3]).unwrap());
        let l = regression_loss_node(&mut g, s, &[1.0, 0.0]).unwrap();
        assert!((g.value(l).item().unwrap() - 0.17).abs() < 1e-15);
    }

    #[test]
    fn truncated_normal_init() {
        let p = init_scorer(&mut ChaCha8Rng::seed_from_u64(8), 100).unwrap();
        let all: Vec<f64> = p.m.data().iter().copied().collect();
        assert_eq!(all.len(), 10_000);
        assert!(all.iter().all(|x| x.abs() <= 0.2));
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        assert!(mean.abs() <= 0.01, "{mean}");
        assert_eq!(
            p,
            init_scorer(&mut ChaCha8Rng::seed_from_u64(8), 100).unwrap()
        );
    }
}
