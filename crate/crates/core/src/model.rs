//! The full evaluator: shared encoder feeding the bilinear head.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Graph, NodeId};
use crate::corpus::{EncodedQuad, TokenSeq};
use crate::encoder::{self, encode_batch, EncoderNodes, EncoderParams};
use crate::params::ParamSet;
use crate::scorer::{self, init_scorer, regression_loss_node, score_nodes, ScorerNodes};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub embed: usize,
    pub hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            embed: 32,
            hidden: 32,
        }
    }
}

pub fn param_names() -> impl Iterator<Item = &'static str> {
    encoder::NAMES.into_iter().chain(scorer::NAMES)
}

pub fn is_encoder(name: &str) -> bool {
    name.starts_with("encoder.")
}

/// Encoder weights plus a freshly initialized head.
pub fn with_fresh_head<R: Rng + ?Sized>(enc: &EncoderParams, rng: &mut R) -> Result<ParamSet> {
    let mut p = enc.to_params();
    p.extend(init_scorer(rng, enc.hidden_dim())?.to_params());
    Ok(p)
}

/// Graph handles for every evaluator weight.
#[derive(Clone, Copy, Debug)]
pub struct ModelNodes {
    pub encoder: EncoderNodes,
    pub scorer: ScorerNodes,
}

impl ModelNodes {
    /// Adds every weight of `params` to the graph, as a parameter when
    /// `trainable(name)` holds and as a constant otherwise.
    pub fn register(
        g: &mut Graph,
        params: &ParamSet,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<Self> {
        let mut ids = BTreeMap::new();
        for name in param_names() {
            let v = params.require(name)?.clone();
            let id = if trainable(name) {
                g.param(name, v)?
            } else {
                g.constant(v)
            };
            ids.insert(name, id);
        }
        Self::from_ids(&ids)
    }

    pub fn from_ids(ids: &BTreeMap<&str, NodeId>) -> Result<Self> {
        let get = |name: &str| {
            ids.get(name)
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        Ok(Self {
            encoder: EncoderNodes {
                embedding: get(encoder::EMBEDDING)?,
                w_input: get(encoder::W_INPUT)?,
                w_recurrent: get(encoder::W_RECURRENT)?,
                bias: get(encoder::BIAS)?,
            },
            scorer: ScorerNodes {
                m: get(scorer::M)?,
                n: get(scorer::N)?,
                b: get(scorer::B)?,
            },
        })
    }
}

/// `[B, 1]` scores for a batch. Posts, responses and references share one
/// batched pass through the encoder.
pub fn forward_scores(g: &mut Graph, nodes: &ModelNodes, batch: &[&EncodedQuad]) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let n = batch.len();
    let seqs: Vec<&TokenSeq> = batch
        .iter()
        .map(|q| &q.post)
        .chain(batch.iter().map(|q| &q.response))
        .chain(batch.iter().map(|q| &q.reference))
        .collect();
    let enc = encode_batch(g, &nodes.encoder, &seqs)?;
    let c = g.slice(enc, 0, 0, n)?;
    let r = g.slice(enc, 0, n, n)?;
    let gref = g.slice(enc, 0, 2 * n, n)?;
    score_nodes(g, &nodes.scorer, c, r, gref)
}

pub fn batch_loss(g: &mut Graph, nodes: &ModelNodes, batch: &[&EncodedQuad]) -> Result<NodeId> {
    let scores = forward_scores(g, nodes, batch)?;
    let labels: Vec<f64> = batch.iter().map(|q| q.label).collect();
    regression_loss_node(g, scores, &labels)
}

const PREDICT_CHUNK: usize = 256;

/// Deterministic scores in (0, 1), in input order.
pub fn predict(params: &ParamSet, quads: &[EncodedQuad]) -> Result<Vec<f64>> {
    let refs: Vec<&EncodedQuad> = quads.iter().collect();
    predict_refs(params, &refs)
}

pub fn predict_refs(params: &ParamSet, quads: &[&EncodedQuad]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(quads.len());
    for chunk in quads.chunks(PREDICT_CHUNK) {
        let mut g = Graph::new();
        let nodes = ModelNodes::register(&mut g, params, |_| false)?;
        let s = forward_scores(&mut g, &nodes, chunk)?;
        out.extend_from_slice(g.value(s).data());
    }
    Ok(out)
}

/// Mean training loss over a dataset at fixed parameters.
pub fn dataset_loss(params: &ParamSet, quads: &[EncodedQuad]) -> Result<f64> {
    if quads.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let scores = predict(params, quads)?;
    Ok(scores
        .iter()
        .zip(quads)
        .map(|(s, q)| (s - q.label).powi(2))
        .sum::<f64>()
        / quads.len() as f64)
}

pub fn zeros_like(params: &ParamSet) -> ParamSet {
    params
        .iter()
        .map(|(k, v)| (k.to_string(), Array::zeros(v.shape())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::ScorerParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn quad(ids: [&[usize]; 3], grade: u8) -> EncodedQuad {
        let seq = |ids: &[usize]| {
            let mut v = ids.to_vec();
            v.resize(6, 0);
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
            post_id: "p".into(),
        }
    }

    #[test]
    fn zero_head_predicts_half_everywhere() {
        let enc = EncoderParams::init(8, 3, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut p = enc.to_params();
        p.extend(ScorerParams::zeros(4).to_params());
        let qs = vec![
            quad([&[2, 3], &[4], &[5, 6, 7]], 2),
            quad([&[7], &[2, 2], &[3]], 0),
        ];
        assert_eq!(predict(&p, &qs).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn batched_scores_match_pointwise_pipeline() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = EncoderParams::init(8, 3, 4, &mut rng).unwrap();
        let head = init_scorer(&mut rng, 4).unwrap();
        let mut p = enc.to_params();
        p.extend(head.to_params());
        let qs = vec![
            quad([&[2, 3], &[4], &[5, 6, 7]], 2),
            quad([&[7], &[2, 2, 1, 5], &[3]], 0),
        ];
        let batched = predict(&p, &qs).unwrap();
        for (q, b) in qs.iter().zip(batched) {
            let c = encoder::encode(&q.post, &enc).unwrap();
            let r = encoder::encode(&q.response, &enc).unwrap();
            let gv = encoder::encode(&q.reference, &enc).unwrap();
            let s = scorer::score(&c, &r, &gv, &head).unwrap();
            assert!((s - b).abs() < 1e-14);
        }
    }
}
