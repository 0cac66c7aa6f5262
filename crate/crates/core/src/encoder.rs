//! Token embedding and a single-layer LSTM. The last hidden state is the
//! representation of a post, a response or a reference.
//!
//! Gate columns are laid out as `[input | forget | candidate | output]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Graph, NodeId};
use crate::corpus::TokenSeq;
use crate::optim::{clip_global_norm, Adam, AdamConfig};
use crate::params::ParamSet;
use crate::{Error, Result};

pub const EMBEDDING: &str = "encoder.embedding";
pub const W_INPUT: &str = "encoder.w_input";
pub const W_RECURRENT: &str = "encoder.w_recurrent";
pub const BIAS: &str = "encoder.bias";
pub const NAMES: [&str; 4] = [EMBEDDING, W_INPUT, W_RECURRENT, BIAS];

const INIT_RANGE: f64 = 0.08;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub embedding: Array,
    pub w_input: Array,
    pub w_recurrent: Array,
    pub bias: Array,
}

fn uniform<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Array {
    Array::from_fn(shape, |_| rng.random_range(-INIT_RANGE..=INIT_RANGE)).expect("finite init")
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(
        vocab: usize,
        embed: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let p = Self {
            embedding: uniform(&[vocab, embed], rng),
            w_input: uniform(&[embed, 4 * hidden], rng),
            w_recurrent: uniform(&[hidden, 4 * hidden], rng),
            bias: uniform(&[1, 4 * hidden], rng),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.embedding.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_recurrent.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (v, e, h) = (self.vocab_size(), self.embed_dim(), self.hidden_dim());
        let ok = self.embedding.rank() == 2
            && v >= 2
            && e >= 1
            && h >= 1
            && self.w_input.shape() == [e, 4 * h]
            && self.w_recurrent.shape() == [h, 4 * h]
            && self.bias.shape() == [1, 4 * h];
        if !ok {
            return Err(Error::Invalid(format!(
                "encoder shapes embedding {:?}, w_input {:?}, w_recurrent {:?}, bias {:?}",
                self.embedding.shape(),
                self.w_input.shape(),
                self.w_recurrent.shape(),
                self.bias.shape()
            )));
        }
        Ok(())
    }

    pub fn to_params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(EMBEDDING, self.embedding.clone());
        p.insert(W_INPUT, self.w_input.clone());
        p.insert(W_RECURRENT, self.w_recurrent.clone());
        p.insert(BIAS, self.bias.clone());
        p
    }

    pub fn from_params(p: &ParamSet) -> Result<Self> {
        let out = Self {
            embedding: p.require(EMBEDDING)?.clone(),
            w_input: p.require(W_INPUT)?.clone(),
            w_recurrent: p.require(W_RECURRENT)?.clone(),
            bias: p.require(BIAS)?.clone(),
        };
        out.validate()?;
        Ok(out)
    }
}

/// Graph handles for the encoder weights. They may be parameters,
/// constants or derived nodes (sampled weights).
#[derive(Clone, Copy, Debug)]
pub struct EncoderNodes {
    pub embedding: NodeId,
    pub w_input: NodeId,
    pub w_recurrent: NodeId,
    pub bias: NodeId,
}

impl EncoderNodes {
    pub fn hidden_dim(&self, g: &Graph) -> usize {
        g.value(self.w_recurrent).rows()
    }

    /// Registers the weights, as parameters or as constants.
    pub fn register(g: &mut Graph, p: &EncoderParams, trainable: bool) -> Result<Self> {
        let mut add = |name: &str, v: &Array| -> Result<NodeId> {
            if trainable {
                Ok(g.param(name, v.clone())?)
            } else {
                Ok(g.constant(v.clone()))
            }
        };
        Ok(Self {
            embedding: add(EMBEDDING, &p.embedding)?,
            w_input: add(W_INPUT, &p.w_input)?,
            w_recurrent: add(W_RECURRENT, &p.w_recurrent)?,
            bias: add(BIAS, &p.bias)?,
        })
    }
}

fn gates(g: &mut Graph, z: NodeId, c: Option<NodeId>, hidden: usize) -> Result<(NodeId, NodeId)> {
    let zi = g.slice(z, 1, 0, hidden)?;
    let zf = g.slice(z, 1, hidden, hidden)?;
    let zg = g.slice(z, 1, 2 * hidden, hidden)?;
    let zo = g.slice(z, 1, 3 * hidden, hidden)?;
    let i = g.sigmoid(zi)?;
    let cand = g.tanh(zg)?;
    let o = g.sigmoid(zo)?;
    let ig = g.mul(i, cand)?;
    let c_new = match c {
        Some(c) => {
            let f = g.sigmoid(zf)?;
            let fc = g.mul(f, c)?;
            g.add(fc, ig)?
        }
        None => ig,
    };
    let tc = g.tanh(c_new)?;
    let h_new = g.mul(o, tc)?;
    Ok((h_new, c_new))
}

/// One LSTM step on a batch: `x` is `[B, E]`, `h` and `c` are `[B, H]`.
pub fn lstm_step(
    g: &mut Graph,
    nodes: &EncoderNodes,
    x: NodeId,
    h: NodeId,
    c: NodeId,
) -> Result<(NodeId, NodeId)> {
    let hidden = nodes.hidden_dim(g);
    let xw = g.matmul(x, nodes.w_input)?;
    let hw = g.matmul(h, nodes.w_recurrent)?;
    let z = g.add(xw, hw)?;
    let z = g.add(z, nodes.bias)?;
    gates(g, z, Some(c), hidden)
}

/// Value-level [`lstm_step`] on single vectors.
pub fn lstm_step_values(
    x: &[f64],
    h: &[f64],
    c: &[f64],
    p: &EncoderParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let nodes = EncoderNodes::register(&mut g, p, false)?;
    let x = g.constant(Array::matrix(1, x.len(), x.to_vec())?);
    let h = g.constant(Array::matrix(1, h.len(), h.to_vec())?);
    let c = g.constant(Array::matrix(1, c.len(), c.to_vec())?);
    let (h2, c2) = lstm_step(&mut g, &nodes, x, h, c)?;
    Ok((g.value(h2).data().to_vec(), g.value(c2).data().to_vec()))
}

/// Encodes a batch of sequences into `[S, H]` last hidden states. Each row
/// stops updating once its true length is consumed, so padding never
/// reaches the cell.
pub fn encode_batch(g: &mut Graph, nodes: &EncoderNodes, seqs: &[&TokenSeq]) -> Result<NodeId> {
    if seqs.is_empty() {
        return Err(Error::Empty("sequence batch"));
    }
    if let Some(bad) = seqs.iter().position(|s| s.len == 0 || s.len > s.ids.len()) {
        return Err(Error::Invalid(format!(
            "sequence {bad} has true length {} (of {} ids)",
            seqs[bad].len,
            seqs[bad].ids.len()
        )));
    }
    let hidden = nodes.hidden_dim(g);
    let s = seqs.len();
    let steps = seqs.iter().map(|q| q.len).max().unwrap_or(0);
    let ids: Vec<usize> = (0..steps)
        .flat_map(|t| seqs.iter().map(move |q| q.ids[t]))
        .collect();
    let x = g.gather_rows(nodes.embedding, ids)?;
    let xw_all = g.matmul(x, nodes.w_input)?;

    let mut state: Option<(NodeId, NodeId)> = None;
    for t in 0..steps {
        let xw = if steps == 1 {
            xw_all
        } else {
            g.slice(xw_all, 0, t * s, s)?
        };
        let (h_new, c_new) = match state {
            None => {
                let z = g.add(xw, nodes.bias)?;
                gates(g, z, None, hidden)?
            }
            Some((h, c)) => {
                let hw = g.matmul(h, nodes.w_recurrent)?;
                let z = g.add(xw, hw)?;
                let z = g.add(z, nodes.bias)?;
                gates(g, z, Some(c), hidden)?
            }
        };
        let mask: Vec<bool> = seqs.iter().map(|q| q.len > t).collect();
        state = Some(match state {
            Some((h, c)) if mask.iter().any(|&m| !m) => (
                g.select_rows(mask.clone(), h_new, h)?,
                g.select_rows(mask, c_new, c)?,
            ),
            _ => (h_new, c_new),
        });
    }
    Ok(state.expect("at least one step").0)
}

/// Value-level encoding of one sequence.
pub fn encode(seq: &TokenSeq, p: &EncoderParams) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let nodes = EncoderNodes::register(&mut g, p, false)?;
    let h = encode_batch(&mut g, &nodes, &[seq])?;
    Ok(g.value(h).data().to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub clip_norm: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            adam: AdamConfig {
                lr: 5e-3,
                ..AdamConfig::default()
            },
            clip_norm: 5.0,
        }
    }
}

/// For each row `j` a uniformly drawn partner `k ≠ j` from the same batch.
fn in_batch_negatives<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    (0..n)
        .map(|j| (j + 1 + rng.random_range(0..n - 1)) % n)
        .collect()
}

fn matching_logits(
    g: &mut Graph,
    nodes: &EncoderNodes,
    pairs: &[&(TokenSeq, TokenSeq)],
    negatives: &[usize],
) -> Result<(NodeId, NodeId)> {
    let n = pairs.len();
    let seqs: Vec<&TokenSeq> = pairs
        .iter()
        .map(|p| &p.0)
        .chain(pairs.iter().map(|p| &p.1))
        .collect();
    let enc = encode_batch(g, nodes, &seqs)?;
    let posts = g.slice(enc, 0, 0, n)?;
    let replies = g.slice(enc, 0, n, n)?;
    let wrong = g.gather_rows(replies, negatives.to_vec())?;
    let hidden = nodes.hidden_dim(g);
    let eye = g.constant(Array::from_fn(&[hidden, hidden], |i| {
        if i / hidden == i % hidden {
            1.0
        } else {
            0.0
        }
    })?);
    let pos = g.bilinear(posts, eye, replies)?;
    let neg = g.bilinear(posts, eye, wrong)?;
    Ok((pos, neg))
}

/// Trains the encoder as a matching model: `sigmoid(post · reply)` with
/// cross-entropy, one in-batch negative per positive pair.
pub fn pretrain_encoder<R: Rng + ?Sized>(
    pairs: &[(TokenSeq, TokenSeq)],
    params: &EncoderParams,
    config: &PretrainConfig,
    rng: &mut R,
) -> Result<EncoderParams> {
    if config.batch_size < 2 || pairs.len() < config.batch_size {
        return Err(Error::Invalid(format!(
            "pretraining needs at least one batch of ≥2 pairs ({} pairs, batch size {})",
            pairs.len(),
            config.batch_size
        )));
    }
    params.validate()?;
    let mut weights = params.to_params();
    let mut adam = Adam::new(config.adam);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut step = 0;
    for _ in 0..config.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            step += 1;
            let batch: Vec<&(TokenSeq, TokenSeq)> = chunk.iter().map(|&i| &pairs[i]).collect();
            let negatives = in_batch_negatives(batch.len(), rng);
            let mut g = Graph::new();
            let nodes =
                EncoderNodes::register(&mut g, &EncoderParams::from_params(&weights)?, true)?;
            let (pos, neg) = matching_logits(&mut g, &nodes, &batch, &negatives)?;
            // -log σ(z) = softplus(-z) and -log(1 - σ(z)) = softplus(z)
            let flipped = g.scale(pos, -1.0)?;
            let lp = g.softplus(flipped)?;
            let ln = g.softplus(neg)?;
            let lp = g.sum(lp)?;
            let ln = g.sum(ln)?;
            let total = g.add(lp, ln)?;
            let loss = g.scale(total, 0.5 / batch.len() as f64)?;
            let value = g.value(loss).item().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(Error::Divergence {
                    step,
                    reason: "pretraining loss is not finite".into(),
                });
            }
            let mut grads = g.backward(loss)?;
            clip_global_norm(&mut grads, config.clip_norm);
            adam.step(&mut weights, &grads)?;
        }
    }
    EncoderParams::from_params(&weights)
}

/// Fraction of correct decisions `σ(post · reply) > 0.5` over labelled
/// positive and negative pairs.
pub fn matching_accuracy(
    positives: &[(TokenSeq, TokenSeq)],
    negatives: &[(TokenSeq, TokenSeq)],
    params: &EncoderParams,
) -> Result<f64> {
    let total = positives.len() + negatives.len();
    if total == 0 {
        return Err(Error::Empty("matching pairs"));
    }
    let logits = |pairs: &[(TokenSeq, TokenSeq)]| -> Result<Vec<f64>> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let nodes = EncoderNodes::register(&mut g, params, false)?;
        let batch: Vec<&(TokenSeq, TokenSeq)> = pairs.iter().collect();
        let identity: Vec<usize> = (0..pairs.len()).collect();
        let (pos, _) = matching_logits(&mut g, &nodes, &batch, &identity)?;
        Ok(g.value(pos).data().to_vec())
    };
    let right = logits(positives)?.iter().filter(|&&z| z > 0.0).count()
        + logits(negatives)?.iter().filter(|&&z| z <= 0.0).count();
    Ok(right as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff, max_relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(ids: &[usize], max_len: usize) -> TokenSeq {
        let mut v = ids.to_vec();
        v.resize(max_len, 0);
        TokenSeq {
            ids: v,
            len: ids.len(),
        }
    }

    fn params(v: usize, e: usize, h: usize, seed: u64) -> EncoderParams {
        EncoderParams::init(v, e, h, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn zeros(v: usize, e: usize, h: usize) -> EncoderParams {
        EncoderParams {
            embedding: Array::zeros(&[v, e]),
            w_input: Array::zeros(&[e, 4 * h]),
            w_recurrent: Array::zeros(&[h, 4 * h]),
            bias: Array::zeros(&[1, 4 * h]),
        }
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn zero_cell_stays_zero() {
        let p = zeros(3, 2, 3);
        let (h, c) = lstm_step_values(&[0.7, -1.2], &[0.0; 3], &[0.0; 3], &p).unwrap();
        assert!(h.iter().chain(&c).all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let mut p = zeros(3, 1, 2);
        let mut bias = vec![0.0; 8];
        bias[2] = 1e3;
        bias[3] = 1e3;
        p.bias = Array::matrix(1, 8, bias).unwrap();
        let c = [0.37, -0.81];
        let (_, c2) = lstm_step_values(&[0.5], &[0.1, 0.2], &c, &p).unwrap();
        assert!((c2[0] - c[0]).abs() < 1e-12 && (c2[1] - c[1]).abs() < 1e-12);
    }

    #[test]
    fn one_unit_cell_matches_scalar_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let mut r = || rng.random_range(-1.5..1.5);
            let (wx, wh, b): (Vec<f64>, Vec<f64>, Vec<f64>) = (
                (0..4).map(|_| r()).collect(),
                (0..4).map(|_| r()).collect(),
                (0..4).map(|_| r()).collect(),
            );
            let (x, h, c) = (r(), r(), r());
            let p = EncoderParams {
                embedding: Array::zeros(&[2, 1]),
                w_input: Array::matrix(1, 4, wx.clone()).unwrap(),
                w_recurrent: Array::matrix(1, 4, wh.clone()).unwrap(),
                bias: Array::matrix(1, 4, b.clone()).unwrap(),
            };
            let z: Vec<f64> = (0..4).map(|k| wx[k] * x + wh[k] * h + b[k]).collect();
            let c_ref = sig(z[1]) * c + sig(z[0]) * z[2].tanh();
            let h_ref = sig(z[3]) * c_ref.tanh();
            let (h2, c2) = lstm_step_values(&[x], &[h], &[c], &p).unwrap();
            assert!((h2[0] - h_ref).abs() < 1e-12);
            assert!((c2[0] - c_ref).abs() < 1e-12);
            assert!(c2[0].abs() <= c.abs() + 1.0);
        }
    }

    #[test]
    fn length_one_sequence_is_one_step() {
        let p = params(6, 3, 4, 1);
        let s = seq(&[4], 50);
        let x = p.embedding.data()[4 * 3..5 * 3].to_vec();
        let (h, _) = lstm_step_values(&x, &[0.0; 4], &[0.0; 4], &p).unwrap();
        assert_eq!(encode(&s, &p).unwrap(), h);
    }

    #[test]
    fn padding_is_never_consumed() {
        let p = params(9, 3, 5, 2);
        let short = encode(&seq(&[2, 7, 3], 3), &p).unwrap();
        let long = encode(&seq(&[2, 7, 3], 50), &p).unwrap();
        assert_eq!(short, long);
        assert_eq!(short, encode(&seq(&[2, 7, 3], 50), &p).unwrap());
    }

    #[test]
    fn batched_rows_match_single_encodings() {
        let p = params(9, 3, 5, 3);
        let seqs = [seq(&[2, 7, 3], 8), seq(&[5], 8), seq(&[1, 1, 8, 4, 6], 8)];
        let mut g = Graph::new();
        let nodes = EncoderNodes::register(&mut g, &p, false).unwrap();
        let refs: Vec<&TokenSeq> = seqs.iter().collect();
        let out = encode_batch(&mut g, &nodes, &refs).unwrap();
        for (i, s) in seqs.iter().enumerate() {
            let row = &g.value(out).data()[i * 5..(i + 1) * 5];
            let single = encode(s, &p).unwrap();
            for (a, b) in row.iter().zip(&single) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn sixty_tokens_encode_as_first_fifty() {
        use crate::corpus::{preprocess, Vocabulary};
        let vocab =
            Vocabulary::from_tokens(["<pad>", "<unk>", "a", "b", "c"].map(String::from).to_vec());
        let toks: Vec<String> = (0..60)
            .map(|i| ["a", "b", "c"][i % 3].to_string())
            .collect();
        let p = params(5, 3, 4, 4);
        let full = encode(&preprocess(&toks, &vocab, 50), &p).unwrap();
        let prefix = encode(&preprocess(&toks[..50], &vocab, 50), &p).unwrap();
        assert_eq!(full, prefix);
    }

    #[test]
    fn empty_sequence_rejected() {
        let p = params(4, 2, 2, 0);
        assert!(encode(&seq(&[], 5), &p).is_err());
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let p = params(6, 3, 4, 5);
        let mut g = Graph::new();
        let nodes = EncoderNodes::register(&mut g, &p, true).unwrap();
        let seqs = [seq(&[1, 2, 3], 4), seq(&[5, 4], 4)];
        let refs: Vec<&TokenSeq> = seqs.iter().collect();
        let h = encode_batch(&mut g, &nodes, &refs).unwrap();
        let sq = g.square(h).unwrap();
        let root = g.sum(sq).unwrap();
        let grads = g.backward(root).unwrap();
        for name in NAMES {
            let fd = finite_diff(&mut g, name, root, 1e-6).unwrap();
            assert!(max_relative_error(&grads[name], &fd) < 1e-6, "{name}");
        }
    }

    fn utterance(topic: usize, rng: &mut ChaCha8Rng) -> TokenSeq {
        // six topics, each owning vocabulary ids 2 + 3k .. 2 + 3k + 3
        let len = rng.random_range(2..=4);
        let ids: Vec<usize> = (0..len)
            .map(|_| 2 + 3 * topic + rng.random_range(0..3))
            .collect();
        seq(&ids, 6)
    }

    fn topic_pairs(n: usize, rng: &mut ChaCha8Rng) -> Vec<(TokenSeq, TokenSeq)> {
        (0..n)
            .map(|_| {
                let topic = rng.random_range(0..6);
                (utterance(topic, rng), utterance(topic, rng))
            })
            .collect()
    }

    fn cross_topic_pairs(n: usize, rng: &mut ChaCha8Rng) -> Vec<(TokenSeq, TokenSeq)> {
        (0..n)
            .map(|_| {
                let a = rng.random_range(0..6);
                let b = (a + rng.random_range(1..6)) % 6;
                (utterance(a, rng), utterance(b, rng))
            })
            .collect()
    }

    #[test]
    fn pretraining_learns_a_separable_matching_task() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let train = topic_pairs(512, &mut rng);
        let positives = topic_pairs(200, &mut rng);
        let negatives = cross_topic_pairs(200, &mut rng);
        let p0 = params(20, 8, 8, 6);
        let cfg = PretrainConfig {
            epochs: 150,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            ..Default::default()
        };
        let before = matching_accuracy(&positives, &negatives, &p0).unwrap();
        let p = pretrain_encoder(&train, &p0, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let acc = matching_accuracy(&positives, &negatives, &p).unwrap();
        assert!(acc > 0.9, "held-out accuracy {acc} (before {before})");
        let again = pretrain_encoder(&train, &p0, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(p, again);
    }

    #[test]
    fn zero_epochs_leave_params_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pairs = topic_pairs(40, &mut rng);
        let p0 = params(20, 4, 4, 7);
        let cfg = PretrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert_eq!(pretrain_encoder(&pairs, &p0, &cfg, &mut rng).unwrap(), p0);
    }

    #[test]
    fn pretraining_needs_a_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pairs = topic_pairs(10, &mut rng);
        let p0 = params(20, 4, 4, 7);
        assert!(pretrain_encoder(&pairs, &p0, &PretrainConfig::default(), &mut rng).is_err());
    }
}
