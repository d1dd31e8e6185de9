//! Plain-loop reference implementations and random input generators.
//!
//! Nothing outside `cases` calls into the library's numerics; inputs are
//! built with the library's data types only so results can be compared
//! directly.

#![allow(dead_code, clippy::needless_range_loop, clippy::type_complexity)]

pub mod cases;

use appo_core::policy::{PolicyParams, Prompt};
use appo_core::trace::{AttentionCapture, Response, RewardBreakdown, RolloutGroup, TokenDistribution, VisualLayout};
use rand::Rng;

// ---------------------------------------------------------------------------
// generators

/// A random probability vector. Some entries are exact zeros.
pub fn distribution<R: Rng>(rng: &mut R, vocab: usize) -> Vec<f64> {
    let mut p: Vec<f64> = (0..vocab)
        .map(|_| if rng.random_bool(0.15) { 0.0 } else { rng.random::<f64>().powi(3) + 1e-9 })
        .collect();
    if p.iter().all(|&x| x == 0.0) {
        p[rng.random_range(0..vocab)] = 1.0;
    }
    let s: f64 = p.iter().sum();
    p.iter().map(|x| x / s).collect()
}

/// A random attention row over `width` visual tokens. Ties are common so that
/// tie-breaking is exercised.
pub fn attention_row<R: Rng>(rng: &mut R, width: usize) -> Vec<f64> {
    let quantized = rng.random_bool(0.3);
    let raw: Vec<f64> = (0..width)
        .map(|_| if quantized { f64::from(rng.random_range(0..4u8)) + 0.5 } else { rng.random::<f64>() + 1e-6 })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

pub struct GroupSpec {
    pub group_size: usize,
    pub tokens_per_frame: Vec<usize>,
    pub vocab: usize,
    pub lengths: Vec<usize>,
    pub layers: usize,
}

impl GroupSpec {
    /// G in 2..=8, T in 2..=16, vocab in 4..=64.
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let group_size = rng.random_range(2..=8);
        let frames = rng.random_range(2..=16);
        let tokens_per_frame = (0..frames).map(|_| rng.random_range(1..=3)).collect();
        let vocab = rng.random_range(4..=64);
        let lengths = (0..group_size).map(|_| rng.random_range(1..=12)).collect();
        let layers = rng.random_range(1..=3);
        Self { group_size, tokens_per_frame, vocab, lengths, layers }
    }
}

pub fn rollout_group<R: Rng>(rng: &mut R, spec: &GroupSpec) -> RolloutGroup {
    let layout = VisualLayout::new(spec.tokens_per_frame.clone()).unwrap();
    let width: usize = spec.tokens_per_frame.iter().sum();
    let responses = spec
        .lengths
        .iter()
        .map(|&n| {
            let distributions: Vec<TokenDistribution> =
                (0..n).map(|_| TokenDistribution::new(distribution(rng, spec.vocab))).collect();
            let tokens: Vec<u32> = distributions
                .iter()
                .map(|d| d.probs.iter().position(|&p| p > 0.0).unwrap() as u32)
                .collect();
            let old_logprobs = tokens.iter().zip(&distributions).map(|(&t, d)| d.probs[t as usize].ln()).collect();
            let layers = (0..spec.layers).map(|_| (0..n).map(|_| attention_row(rng, width)).collect()).collect();
            Response { tokens, old_logprobs, distributions, attention: AttentionCapture { layers } }
        })
        .collect();
    let rewards = (0..spec.group_size).map(|_| RewardBreakdown::new(rng.random_bool(0.5), rng.random_bool(0.8))).collect();
    RolloutGroup::new(layout, responses, rewards, serde_json::Value::Null)
}

// ---------------------------------------------------------------------------
// frame selection

/// `out[j][t]`: attention of response token `j` to frame `t`, averaged over
/// the last `n` layers and over the frame's visual tokens.
pub fn frame_attention(layers: &[Vec<Vec<f64>>], tokens_per_frame: &[usize], n: usize) -> Vec<Vec<f64>> {
    let depth = layers.len();
    let used = n.min(depth);
    let rows = layers[0].len();
    let mut out = vec![vec![0.0; tokens_per_frame.len()]; rows];
    for j in 0..rows {
        let mut start = 0;
        for (t, &count) in tokens_per_frame.iter().enumerate() {
            let mut total = 0.0;
            for layer in &layers[depth - used..] {
                let mut sub = 0.0;
                for v in start..start + count {
                    sub += layer[j][v];
                }
                total += sub;
            }
            out[j][t] = total / (used * count) as f64;
            start += count;
        }
    }
    out
}

/// Mean of the `k1` largest entries of each column, via a full sort.
pub fn frame_scores(fa: &[Vec<f64>], k1: usize) -> Vec<f64> {
    let frames = fa[0].len();
    (0..frames)
        .map(|t| {
            let mut col: Vec<f64> = fa.iter().map(|row| row[t]).collect();
            col.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let take = k1.max(1).min(col.len());
            col[..take].iter().sum::<f64>() / take as f64
        })
        .collect()
}

/// Best `min(k, n)`-subset by exhaustive enumeration: the subset whose
/// values, sorted descending, are lexicographically largest, with ties going
/// to the lexicographically smallest index list.
pub fn best_subset(values: &[f64], k: usize) -> Vec<usize> {
    let n = values.len();
    let k = k.max(1).min(n);
    let mut best: Option<(Vec<f64>, Vec<usize>)> = None;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let idx: Vec<usize> = (0..n).filter(|&i| mask & (1 << i) != 0).collect();
        let mut vals: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
        vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let better = match &best {
            None => true,
            Some((bv, bi)) => match cmp_desc(&vals, bv) {
                std::cmp::Ordering::Greater => true,
                std::cmp::Ordering::Less => false,
                std::cmp::Ordering::Equal => idx < *bi,
            },
        };
        if better {
            best = Some((vals, idx));
        }
    }
    best.unwrap().1
}

fn cmp_desc(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y).unwrap() {
            std::cmp::Ordering::Equal => continue,
            o => return o,
        }
    }
    std::cmp::Ordering::Equal
}

/// Indices of the `k` largest values, ordered by value then index, using a
/// selection loop.
pub fn ranked_top(values: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; values.len()];
    let mut out = Vec::new();
    for _ in 0..k.min(values.len()) {
        let mut best: Option<usize> = None;
        for i in 0..values.len() {
            if taken[i] {
                continue;
            }
            if best.is_none_or(|b| values[i] > values[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    out
}

pub struct SelectionOracle {
    pub high: Vec<usize>,
    pub low: Vec<usize>,
    pub frame_attention: Vec<Vec<Vec<f64>>>,
    pub focused: Vec<Vec<usize>>,
    pub psi_high: Vec<usize>,
    pub psi_low: Vec<usize>,
    pub targets: Vec<usize>,
}

pub fn strategy_frames(strategy: &str, high: &[usize], low: &[usize], frames: usize) -> Vec<usize> {
    (0..frames)
        .filter(|f| {
            let h = high.contains(f);
            let l = low.contains(f);
            match strategy {
                "hard" => h && !l,
                "soft" => h,
                "all" => h || l,
                _ => unreachable!(),
            }
        })
        .collect()
}

pub fn select(
    group: &RolloutGroup,
    rewards: &[f64],
    tau: f64,
    k1: usize,
    k2: usize,
    layers: usize,
    strategy: &str,
) -> SelectionOracle {
    let tpf = group.layout.tokens_per_frame().to_vec();
    let frames = tpf.len();
    let mut high = Vec::new();
    let mut low = Vec::new();
    for (i, &r) in rewards.iter().enumerate() {
        if r >= tau { high.push(i) } else { low.push(i) }
    }
    let fa: Vec<Vec<Vec<f64>>> =
        group.responses.iter().map(|r| frame_attention(&r.attention.layers, &tpf, layers)).collect();
    let focused: Vec<Vec<usize>> = fa.iter().map(|m| best_subset(&frame_scores(m, k1), k2)).collect();
    let union = |side: &[usize]| -> Vec<usize> {
        (0..frames).filter(|f| side.iter().any(|&i| focused[i].contains(f))).collect()
    };
    let psi_high = union(&high);
    let psi_low = union(&low);
    let targets = strategy_frames(strategy, &psi_high, &psi_low, frames);
    SelectionOracle { high, low, frame_attention: fa, focused, psi_high, psi_low, targets }
}

// ---------------------------------------------------------------------------
// re-weighting

/// `sum_v p_v (ln(p_v + eps) - ln(q_v + eps))`, skipping `p_v = 0`, floored
/// at zero.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    let eps = 1e-12;
    let mut s = 0.0;
    for v in 0..p.len() {
        if p[v] > 0.0 {
            s += p[v] * ((p[v] + eps).ln() - (q[v] + eps).ln());
        }
    }
    if s < 0.0 { 0.0 } else { s }
}

pub struct WeightOracle {
    /// `slots[k][i]`: positions of response `i` in group `k`.
    pub slots: Vec<Vec<Vec<usize>>>,
    pub raw: Vec<Vec<Vec<f64>>>,
    pub normalized: Vec<Vec<Vec<f64>>>,
    pub weights: Vec<Vec<f64>>,
}

pub fn reweight(
    responses: &[Response],
    targets: &[usize],
    frame_attention: &[Vec<Vec<f64>>],
    k3: usize,
    alpha: f64,
    per_token: bool,
    literal_k: bool,
) -> WeightOracle {
    let g = responses.len();
    let slots: Vec<Vec<Vec<usize>>> = targets
        .iter()
        .map(|&f| {
            frame_attention
                .iter()
                .map(|fa| ranked_top(&fa.iter().map(|row| row[f]).collect::<Vec<_>>(), k3.max(1)))
                .collect()
        })
        .collect();
    let mut raw = Vec::new();
    for group in &slots {
        let mut vals: Vec<Vec<f64>> = group.iter().map(|s| vec![0.0; s.len()]).collect();
        let depth = group.iter().map(Vec::len).max().unwrap_or(0);
        for j in 0..depth {
            let holders: Vec<usize> = (0..g).filter(|&i| group[i].len() > j).collect();
            if holders.len() < 2 {
                continue;
            }
            let vocab = responses[holders[0]].distributions[0].probs.len();
            let mut mean = vec![0.0; vocab];
            for &i in &holders {
                let p = &responses[i].distributions[group[i][j]].probs;
                for v in 0..vocab {
                    mean[v] += p[v] / holders.len() as f64;
                }
            }
            let kls: Vec<f64> = holders.iter().map(|&i| kl(&responses[i].distributions[group[i][j]].probs, &mean)).collect();
            let total: f64 = kls.iter().sum();
            for (n, &i) in holders.iter().enumerate() {
                vals[i][j] = if per_token { kls[n] } else { total };
            }
        }
        raw.push(vals);
    }
    let normalized: Vec<Vec<Vec<f64>>> = raw
        .iter()
        .map(|vals| {
            let flat: Vec<f64> = vals.iter().flatten().copied().collect();
            let lo = flat.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = flat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            vals.iter()
                .map(|row| row.iter().map(|&v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 }).collect())
                .collect()
        })
        .collect();
    let mut weights: Vec<Vec<f64>> = responses.iter().map(|r| vec![1.0; r.tokens.len()]).collect();
    for i in 0..g {
        for pos in 0..responses[i].tokens.len() {
            let mut cum = 0.0;
            let mut count = 0;
            for (k, group) in slots.iter().enumerate() {
                for (j, &p) in group[i].iter().enumerate() {
                    if p == pos {
                        cum += normalized[k][i][j];
                        count += 1;
                    }
                }
            }
            if count > 0 {
                let denom = if literal_k { slots.len() as f64 } else { count as f64 };
                weights[i][pos] = 1.0 + alpha * cum / denom;
            }
        }
    }
    WeightOracle { slots, raw, normalized, weights }
}

// ---------------------------------------------------------------------------
// objectives

pub fn advantages(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let mut ss = 0.0;
    for r in rewards {
        ss += (r - mean) * (r - mean);
    }
    let std = (ss / n).sqrt();
    rewards.iter().map(|r| if std < 1e-6 { 0.0 } else { (r - mean) / std }).collect()
}

fn clipped_term(r: f64, w: f64, a: f64, lo: f64, hi: f64) -> f64 {
    let rc = if r < 1.0 - lo { 1.0 - lo } else if r > 1.0 + hi { 1.0 + hi } else { r };
    (r * w * a).min(rc * w * a)
}

/// Negated token-level objective: the double sum over responses and tokens
/// divided by the total token count. `weights = None` is DAPO.
pub fn token_level_loss(
    new: &[Vec<f64>],
    old: &[Vec<f64>],
    adv: &[f64],
    weights: Option<&[Vec<f64>]>,
    lo: f64,
    hi: f64,
) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..new.len() {
        for t in 0..new[i].len() {
            let r = (new[i][t] - old[i][t]).exp();
            let w = weights.map_or(1.0, |w| w[i][t]);
            total += clipped_term(r, w, adv[i], lo, hi);
            count += 1;
        }
    }
    -total / count as f64
}

/// Negated GRPO objective with the `e^d - d - 1` reference penalty.
pub fn grpo_loss(new: &[Vec<f64>], old: &[Vec<f64>], refs: &[Vec<f64>], adv: &[f64], lo: f64, hi: f64, beta: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..new.len() {
        let mut inner = 0.0;
        for t in 0..new[i].len() {
            let r = (new[i][t] - old[i][t]).exp();
            let d = refs[i][t] - new[i][t];
            inner += clipped_term(r, 1.0, adv[i], lo, hi) - beta * (d.exp() - d - 1.0);
        }
        total += inner / new[i].len() as f64;
    }
    -total / new.len() as f64
}

// ---------------------------------------------------------------------------
// network

type Mat = Vec<Vec<f64>>;

fn mat(a: &ndarray::Array2<f64>) -> Mat {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

fn mul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for x in 0..k {
                s += a[i][x] * b[x][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn plus(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn plus_bias(a: &Mat, b: &Mat) -> Mat {
    a.iter().map(|x| x.iter().zip(&b[0]).map(|(p, q)| p + q).collect()).collect()
}

fn rms(a: &Mat) -> Mat {
    a.iter()
        .map(|row| {
            let ms = row.iter().map(|x| x * x).sum::<f64>() / row.len() as f64;
            let r = (ms + 1e-6).sqrt();
            row.iter().map(|x| x / r).collect()
        })
        .collect()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Multi-head attention. Returns the concatenated head outputs and, per
/// head, the attention probabilities.
fn attend(q: &Mat, k: &Mat, v: &Mat, heads: usize, causal: bool) -> (Mat, Vec<Mat>) {
    let d = q[0].len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![vec![0.0; d]; q.len()];
    let mut probs = Vec::new();
    for h in 0..heads {
        let mut p_head = Vec::new();
        for i in 0..q.len() {
            let visible = if causal { i + 1 } else { k.len() };
            let scores: Vec<f64> = (0..visible)
                .map(|j| (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>() * scale)
                .collect();
            let mut p = softmax(&scores);
            p.resize(k.len(), 0.0);
            for c in 0..dh {
                out[i][h * dh + c] = (0..k.len()).map(|j| p[j] * v[j][h * dh + c]).sum();
            }
            p_head.push(p);
        }
        probs.push(p_head);
    }
    (out, probs)
}

pub struct ForwardOracle {
    /// Log-probability of each response token.
    pub logprobs: Vec<f64>,
    /// `attention[l][j][v]`, head-averaged cross-attention of response token `j`.
    pub attention: Vec<Vec<Vec<f64>>>,
    /// Next-token distribution at each response position.
    pub distributions: Vec<Vec<f64>>,
}

/// Teacher-forced pass over `question ++ response` written with nested loops.
pub fn forward(params: &PolicyParams, prompt: &Prompt, response: &[u32]) -> ForwardOracle {
    let cfg = params.config;
    let stream: Vec<u32> = prompt.question.iter().chain(response).copied().collect();
    let tok = mat(&params.token_embedding);
    let pos = mat(&params.position_embedding);
    let mut h: Mat = stream.iter().enumerate().map(|(p, &t)| tok[t as usize].iter().zip(&pos[p]).map(|(a, b)| a + b).collect()).collect();
    let visual = mul(&mat(&prompt.visual), &mat(&params.visual_proj));
    let mut cross = Vec::new();
    for layer in &params.layers {
        let n = rms(&h);
        let (att, _) = attend(&mul(&n, &mat(&layer.self_q)), &mul(&n, &mat(&layer.self_k)), &mul(&n, &mat(&layer.self_v)), cfg.num_heads, true);
        h = plus(&h, &mul(&att, &mat(&layer.self_o)));

        let n = rms(&h);
        let (att, probs) = attend(&mul(&n, &mat(&layer.cross_q)), &mul(&visual, &mat(&layer.cross_k)), &mul(&visual, &mat(&layer.cross_v)), cfg.num_heads, false);
        h = plus(&h, &mul(&att, &mat(&layer.cross_o)));
        let rows: Mat = (0..stream.len())
            .map(|i| (0..visual.len()).map(|v| probs.iter().map(|p| p[i][v]).sum::<f64>() / cfg.num_heads as f64).collect())
            .collect();
        cross.push(rows);

        let n = rms(&h);
        let hidden: Mat = plus_bias(&mul(&n, &mat(&layer.ff_w1)), &mat(&layer.ff_b1)).iter().map(|r| r.iter().map(|x| x.tanh()).collect()).collect();
        h = plus(&h, &plus_bias(&mul(&hidden, &mat(&layer.ff_w2)), &mat(&layer.ff_b2)));
    }
    let logits = plus_bias(&mul(&rms(&h), &mat(&params.out_w)), &mat(&params.out_b));
    let q = prompt.question.len();
    let mut logprobs = Vec::new();
    let mut distributions = Vec::new();
    for (j, &t) in response.iter().enumerate() {
        let p = softmax(&logits[q - 1 + j]);
        logprobs.push(p[t as usize].ln());
        distributions.push(p);
    }
    let attention = cross.iter().map(|rows| rows[q - 1..q - 1 + response.len()].to_vec()).collect();
    ForwardOracle { logprobs, attention, distributions }
}

// ---------------------------------------------------------------------------
// comparison

pub fn max_abs_diff<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
