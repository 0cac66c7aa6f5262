#![allow(dead_code)]

use std::collections::BTreeMap;

use cl_dialeval::autodiff::{finite_diff, max_relative_error, Array, Graph, NodeId};
use cl_dialeval::corpus::{EncodedQuad, TokenSeq};
use cl_dialeval::encoder::EncoderParams;
use cl_dialeval::ewc::{compute_fisher, ewc_total_loss, FisherState};
use cl_dialeval::model::{batch_loss, param_names, with_fresh_head, ModelNodes};
use cl_dialeval::params::ParamSet;
use cl_dialeval::vcl::{draw_noise, vcl_loss_with_noise, GaussianPosterior};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_REL_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub enum Objective {
    Regression,
    Ewc,
    Vcl,
}

/// A random model with hidden size at most 8 and a batch of random quads
/// whose sequences are at most 5 tokens long.
pub struct SmallProblem {
    pub params: ParamSet,
    pub data: Vec<EncodedQuad>,
    pub hidden: usize,
    pub max_len: usize,
}

pub fn small_problem(seed: u64) -> SmallProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hidden = rng.random_range(1..=8);
    let embed = rng.random_range(1..=4);
    let max_len = rng.random_range(1..=5);
    let vocab = 6;
    let enc = EncoderParams::init(vocab, embed, hidden, &mut rng).unwrap();
    let params = with_fresh_head(&enc, &mut rng).unwrap();
    let n = rng.random_range(1..=3);
    let seq = |rng: &mut ChaCha8Rng| {
        let len = rng.random_range(1..=max_len);
        let mut ids: Vec<usize> = (0..len).map(|_| rng.random_range(2..vocab)).collect();
        ids.resize(max_len, 0);
        TokenSeq { ids, len }
    };
    let data = (0..n)
        .map(|_| {
            let grade = rng.random_range(0..=2u8);
            EncodedQuad {
                post: seq(&mut rng),
                response: seq(&mut rng),
                reference: seq(&mut rng),
                grade,
                label: f64::from(grade) / 2.0,
                post_id: String::new(),
            }
        })
        .collect();
    SmallProblem {
        params,
        data,
        hidden,
        max_len,
    }
}

fn perturbed(p: &ParamSet, rng: &mut ChaCha8Rng, scale: f64) -> ParamSet {
    p.iter()
        .map(|(k, v)| {
            let data = v
                .data()
                .iter()
                .map(|x| x + scale * rng.random_range(-1.0..1.0))
                .collect();
            (k.to_string(), Array::new(v.shape().to_vec(), data).unwrap())
        })
        .collect()
}

/// Largest relative error between backpropagated and central-difference
/// gradients over every trainable weight of the chosen objective.
pub fn gradient_error(problem: &SmallProblem, objective: Objective, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let refs: Vec<&EncodedQuad> = problem.data.iter().collect();
    let mut g = Graph::new();
    let (loss, names): (NodeId, Vec<String>) = match objective {
        Objective::Regression => {
            let nodes = ModelNodes::register(&mut g, &problem.params, |_| true).unwrap();
            (
                batch_loss(&mut g, &nodes, &refs).unwrap(),
                param_names().map(String::from).collect(),
            )
        }
        Objective::Ewc => {
            let anchor = perturbed(&problem.params, &mut rng, 0.3);
            let fisher = compute_fisher(&refs, &anchor, &|_| true).unwrap();
            let state = FisherState::new(fisher, anchor, rng.random_range(1.0..100.0)).unwrap();
            let nodes = ModelNodes::register(&mut g, &problem.params, |_| true).unwrap();
            let weights: BTreeMap<String, NodeId> = param_names()
                .map(|n| (n.to_string(), g.param_id(n).unwrap()))
                .collect();
            let loss = ewc_total_loss(&mut g, &nodes, &weights, &refs, &[state]).unwrap();
            (loss, param_names().map(String::from).collect())
        }
        Objective::Vcl => {
            let q =
                GaussianPosterior::isotropic(problem.params.clone(), rng.random_range(0.01..0.2))
                    .unwrap();
            let prev = GaussianPosterior::isotropic(perturbed(&problem.params, &mut rng, 0.2), 0.3)
                .unwrap();
            let noise: Vec<ParamSet> = (0..2).map(|_| draw_noise(&q.mu, &mut rng)).collect();
            let weights = q.to_weights();
            let loss = vcl_loss_with_noise(
                &mut g,
                &weights,
                &ParamSet::new(),
                &refs,
                &prev,
                &noise,
                0.05,
            )
            .unwrap();
            (loss, weights.names().map(String::from).collect())
        }
    };
    let grads = g.backward(loss).unwrap();
    names
        .iter()
        .map(|name| {
            let fd = finite_diff(&mut g, name, loss, FD_STEP).unwrap();
            max_relative_error(&grads[name.as_str()], &fd)
        })
        .fold(0.0, f64::max)
}

/// Spearman correlation computed the long way: average ranks by counting,
/// then the textbook Pearson formula.
pub fn brute_force_spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        v.iter()
            .map(|&a| {
                let below = v.iter().filter(|&&b| b < a).count() as f64;
                let equal = v.iter().filter(|&&b| b == a).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// KL(N(mq, sq²) ‖ N(mp, sp²)) by composite Simpson integration of
/// q(x) · (log q(x) − log p(x)) over ±12 standard deviations of q.
pub fn quadrature_kl(mq: f64, sq: f64, mp: f64, sp: f64) -> f64 {
    let log_pdf = |x: f64, m: f64, s: f64| {
        -0.5 * ((x - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    };
    let f = |x: f64| {
        let lq = log_pdf(x, mq, sq);
        lq.exp() * (lq - log_pdf(x, mp, sp))
    };
    let (a, b) = (mq - 12.0 * sq, mq + 12.0 * sq);
    let n = 20_000;
    let h = (b - a) / n as f64;
    let mut total = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        total += w * f(a + i as f64 * h);
    }
    total * h / 3.0
}

pub fn scalar_posterior(mu: f64, sigma: f64) -> GaussianPosterior {
    let mut m = ParamSet::new();
    m.insert("w", Array::scalar(mu).unwrap());
    GaussianPosterior::isotropic(m, sigma).unwrap()
}

/// Random vectors with frequent ties (small integer support) or none.
pub fn random_pair(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let n = rng.random_range(3..40);
    let tied = rng.random_bool(0.5);
    let mut draw = || {
        if tied {
            f64::from(rng.random_range(0..5u8))
        } else {
            rng.random_range(-10.0..10.0)
        }
    };
    loop {
        let x: Vec<f64> = (0..n).map(|_| draw()).collect();
        let y: Vec<f64> = (0..n).map(|_| draw()).collect();
        let varies = |v: &[f64]| v.iter().any(|&a| a != v[0]);
        if varies(&x) && varies(&y) {
            return (x, y);
        }
    }
}
