//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xwalk_core::lm::{self, init_model, Gradients, Mode, ModelConfig, ModelParams};
use xwalk_core::lora::{attach, LoraConfig};
use xwalk_core::prompting::{TokenizedPrompt, Vocabulary, SPECIAL_TOKENS};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// Shapley: average marginal contribution over every ordering

/// Shapley values by enumerating all `n!` orderings (Heap's algorithm).
pub fn shapley_by_permutations(n: usize, v: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut phi = vec![0.0; n];
    let mut perm: Vec<usize> = (0..n).collect();
    let mut count = 0usize;
    let mut visit = |perm: &[usize]| {
        let mut mask = 0usize;
        for &p in perm {
            let before = v(mask);
            mask |= 1 << p;
            phi[p] += v(mask) - before;
        }
        count += 1;
    };
    let mut c = vec![0usize; n];
    visit(&perm);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            visit(&perm);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    phi.iter().map(|p| p / count as f64).collect()
}

// ---------------------------------------------------------------------------
// Normal quantiles from a from-scratch erf

/// Maclaurin series of erf; accurate to ~1e-15 for |x| <= 3.
pub fn erf(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    let x2 = x * x;
    for n in 1..200 {
        term *= -x2 / n as f64;
        let add = term / (2 * n + 1) as f64;
        sum += add;
        if add.abs() < 1e-18 {
            break;
        }
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Inverse normal CDF by bisection on `normal_cdf`.
pub fn probit(p: f64) -> f64 {
    let (mut lo, mut hi) = (-4.0, 4.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if normal_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// The 16 NormalFloat levels: 8 positive and 7 negative normal quantiles
/// plus zero, scaled to max-abs 1.
pub fn nf4_levels_oracle() -> [f64; 16] {
    let offset = 0.5 * ((1.0 - 1.0 / 30.0) + (1.0 - 1.0 / 32.0));
    let lin = |n: usize| (0..n).map(move |i| offset + (0.5 - offset) * i as f64 / (n - 1) as f64);
    let mut v: Vec<f64> = lin(9).take(8).map(probit).collect();
    v.extend(lin(8).take(7).map(|p| -probit(p)));
    v.push(0.0);
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    v.sort_by(f64::total_cmp);
    let mut out = [0.0; 16];
    for (o, x) in out.iter_mut().zip(v) {
        *o = x / max;
    }
    out
}

// ---------------------------------------------------------------------------
// Schedule and optimizer

/// Warmup then half-cosine, written from the textbook definition.
pub fn cosine_oracle(step: u64, total: u64, warmup: u64, base: f64) -> f64 {
    if step < warmup {
        base * step as f64 / warmup as f64
    } else {
        let t = (step - warmup) as f64 / (total - warmup) as f64;
        base * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
    }
}

/// One AdamW step on a scalar, spelled out.
#[allow(clippy::too_many_arguments)]
pub fn adamw_scalar(w: f64, g: f64, m: f64, v: f64, t: i32, lr: f64, wd: f64, b1: f64, b2: f64, eps: f64) -> (f64, f64, f64) {
    let m1 = b1 * m + (1.0 - b1) * g;
    let v1 = b2 * v + (1.0 - b2) * g * g;
    let mhat = m1 / (1.0 - b1.powi(t));
    let vhat = v1 / (1.0 - b2.powi(t));
    let w1 = w - lr * wd * w - lr * mhat / (vhat.sqrt() + eps);
    (w1, m1, v1)
}

// ---------------------------------------------------------------------------
// Toy models

pub fn toy_config(vocab: usize) -> ModelConfig {
    ModelConfig { n_layers: 2, n_heads: 2, d_model: 8, d_ff: 16, vocab_size: vocab, max_seq_len: 32, seed: 3 }
}

/// Adapted toy model with non-zero `B` so every path carries gradient.
pub fn toy_adapted(vocab: usize, seed: u64) -> ModelParams<f64> {
    let mut p = attach(init_model::<f64>(&toy_config(vocab)).unwrap(), &LoraConfig { rank: 2, ..Default::default() }, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for (_, lin) in p.linears_mut() {
        if let Some(l) = lin.lora.as_mut() {
            l.b = Array2::from_shape_simple_fn(l.b.dim(), || r.gen_range(-0.5..0.5));
        }
    }
    p
}

pub fn masked_loss(p: &ModelParams<f64>, inputs: &[u32], labels: &[u32], mask: &[bool]) -> f64 {
    let tr = lm::forward(p, inputs).unwrap();
    lm::masked_nll(&tr, labels, mask).unwrap()
}

/// Worst per-element relative error between `grads` and central differences
/// with step `h`, over every tensor in `grads`.
pub fn finite_difference_error(
    p: &ModelParams<f64>,
    grads: &Gradients<f64>,
    inputs: &[u32],
    labels: &[u32],
    mask: &[bool],
    h: f64,
) -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for (name, g) in &grads.tensors {
        for ((i, j), &ana) in g.indexed_iter() {
            let mut q = p.clone();
            q.tensor_mut(name).unwrap()[[i, j]] += h;
            let up = masked_loss(&q, inputs, labels, mask);
            q.tensor_mut(name).unwrap()[[i, j]] -= 2.0 * h;
            let down = masked_loss(&q, inputs, labels, mask);
            let num = (up - down) / (2.0 * h);
            worst = worst.max((num - ana).abs() / num.abs().max(ana.abs()).max(1e-6));
            n += 1;
        }
    }
    (worst, n)
}

pub fn eval_grads(p: &ModelParams<f64>, inputs: &[u32], labels: &[u32], mask: &[bool]) -> Gradients<f64> {
    let tr = lm::forward_with(p, inputs, 0, Mode::Eval).unwrap();
    lm::backward(p, &tr, labels, mask).unwrap().1
}

// ---------------------------------------------------------------------------
// Toy sequences

pub fn toy_vocab() -> Vocabulary {
    let mut t: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    t.extend((0..7).map(|i| format!("w{i}")));
    Vocabulary::from_tokens(t)
}

/// Sequences whose answer is decided by the parity of their last word.
pub fn toy_examples(vocab: &Vocabulary, n: usize, seed: u64) -> Vec<TokenizedPrompt> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let mut tokens = vec![vocab.bos()];
            for _ in 0..6 {
                tokens.push(vocab.id(&format!("w{}", r.gen_range(0..7))));
            }
            let odd = tokens[6] % 2 == 1;
            let target = if odd { vocab.midblock() } else { vocab.intersection() };
            tokens.push(target);
            let mut answer_mask = vec![false; tokens.len()];
            *answer_mask.last_mut().unwrap() = true;
            TokenizedPrompt { obs_id: format!("t{i}"), tokens, answer_mask, target_token: target }
        })
        .collect()
}
