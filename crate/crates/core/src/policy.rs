//! A miniature autoregressive policy with cross-attention over visual tokens.
//!
//! The text stream is the question followed by the response. Each layer
//! applies causal multi-head self-attention, multi-head cross-attention whose
//! keys and values come only from the projected visual tokens, and a tanh
//! feed-forward block, all with residual connections. The output projection
//! at position `p` predicts the token at `p + 1`, so response token `j` is
//! predicted (and its cross-attention captured) at stream position
//! `question_len - 1 + j`.

use std::ops::Deref;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::trace::{token_entropy, AttentionCapture, Response, TokenDistribution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub max_response_len: usize,
    pub max_question_len: usize,
    /// Width of the raw visual token vectors fed to the input projection.
    pub visual_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            embed_dim: 32,
            num_heads: 2,
            num_layers: 2,
            max_response_len: 12,
            max_question_len: 4,
            visual_dim: 16,
        }
    }
}

const MAX_MODEL_DIM: usize = 4096;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("num_layers", self.num_layers),
            ("max_response_len", self.max_response_len),
            ("max_question_len", self.max_question_len),
            ("visual_dim", self.visual_dim),
        ];
        for (name, v) in dims {
            if v == 0 || v > MAX_MODEL_DIM {
                return Err(Error::Config(format!("{name} must be in 1..={MAX_MODEL_DIM}, got {v}")));
            }
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_layers > 64 {
            return Err(Error::Config(format!("num_layers {} is too deep", self.num_layers)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn ff_dim(&self) -> usize {
        2 * self.embed_dim
    }

    pub fn max_positions(&self) -> usize {
        self.max_question_len + self.max_response_len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub self_q: Array2<f64>,
    pub self_k: Array2<f64>,
    pub self_v: Array2<f64>,
    pub self_o: Array2<f64>,
    pub cross_q: Array2<f64>,
    pub cross_k: Array2<f64>,
    pub cross_v: Array2<f64>,
    pub cross_o: Array2<f64>,
    pub ff_w1: Array2<f64>,
    pub ff_b1: Array2<f64>,
    pub ff_w2: Array2<f64>,
    pub ff_b2: Array2<f64>,
}

impl LayerParams {
    const NAMES: [&'static str; 12] = [
        "self_q", "self_k", "self_v", "self_o", "cross_q", "cross_k", "cross_v", "cross_o", "ff_w1", "ff_b1",
        "ff_w2", "ff_b2",
    ];

    fn tensors(&self) -> [&Array2<f64>; 12] {
        [
            &self.self_q, &self.self_k, &self.self_v, &self.self_o, &self.cross_q, &self.cross_k, &self.cross_v,
            &self.cross_o, &self.ff_w1, &self.ff_b1, &self.ff_w2, &self.ff_b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Array2<f64>; 12] {
        [
            &mut self.self_q, &mut self.self_k, &mut self.self_v, &mut self.self_o, &mut self.cross_q,
            &mut self.cross_k, &mut self.cross_v, &mut self.cross_o, &mut self.ff_w1, &mut self.ff_b1,
            &mut self.ff_w2, &mut self.ff_b2,
        ]
    }
}

/// Policy weights. Also used as the gradient structure, which mirrors it.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub config: ModelConfig,
    pub token_embedding: Array2<f64>,
    pub position_embedding: Array2<f64>,
    pub visual_proj: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub out_w: Array2<f64>,
    pub out_b: Array2<f64>,
}

pub type Gradients = PolicyParams;

impl PolicyParams {
    /// All-zero tensors with the shapes implied by `config`.
    pub fn zeros(config: ModelConfig) -> Self {
        let d = config.embed_dim;
        let ff = config.ff_dim();
        let layer = || LayerParams {
            self_q: Array2::zeros((d, d)),
            self_k: Array2::zeros((d, d)),
            self_v: Array2::zeros((d, d)),
            self_o: Array2::zeros((d, d)),
            cross_q: Array2::zeros((d, d)),
            cross_k: Array2::zeros((d, d)),
            cross_v: Array2::zeros((d, d)),
            cross_o: Array2::zeros((d, d)),
            ff_w1: Array2::zeros((d, ff)),
            ff_b1: Array2::zeros((1, ff)),
            ff_w2: Array2::zeros((ff, d)),
            ff_b2: Array2::zeros((1, d)),
        };
        Self {
            config,
            token_embedding: Array2::zeros((config.vocab_size, d)),
            position_embedding: Array2::zeros((config.max_positions(), d)),
            visual_proj: Array2::zeros((config.visual_dim, d)),
            layers: (0..config.num_layers).map(|_| layer()).collect(),
            out_w: Array2::zeros((d, config.vocab_size)),
            out_b: Array2::zeros((1, config.vocab_size)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config)
    }

    /// Tensor names in canonical order.
    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["token_embedding".to_string(), "position_embedding".into(), "visual_proj".into()];
        for l in 0..self.layers.len() {
            names.extend(LayerParams::NAMES.iter().map(|n| format!("layers.{l}.{n}")));
        }
        names.push("out_w".into());
        names.push("out_b".into());
        names
    }

    /// Every tensor in canonical order.
    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut out = vec![&self.token_embedding, &self.position_embedding, &self.visual_proj];
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out.push(&self.out_w);
        out.push(&self.out_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding, &mut self.visual_proj];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.out_w);
        out.push(&mut self.out_b);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, other: &PolicyParams, c: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.scaled_add(c, b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Reads or writes a single scalar by flat index across all tensors.
    pub fn get_flat(&self, mut index: usize) -> f64 {
        for t in self.tensors() {
            if index < t.len() {
                return t.as_slice().expect("standard layout")[index];
            }
            index -= t.len();
        }
        panic!("flat index out of range");
    }

    pub fn set_flat(&mut self, mut index: usize, value: f64) {
        for t in self.tensors_mut() {
            if index < t.len() {
                t.as_slice_mut().expect("standard layout")[index] = value;
                return;
            }
            index -= t.len();
        }
        panic!("flat index out of range");
    }
}

/// Seeded initialization: weights are standard normal draws scaled by
/// `1 / sqrt(fan_in)`, biases start at zero.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<PolicyParams> {
    cfg.validate()?;
    let mut params = PolicyParams::zeros(*cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = params.names();
    let d = cfg.embed_dim as f64;
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        if name.ends_with("_b1") || name.ends_with("_b2") || name == "out_b" {
            continue;
        }
        let fan_in = if name.ends_with("embedding") { d } else { t.nrows() as f64 };
        let scale = 1.0 / fan_in.sqrt();
        t.mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal) * scale);
    }
    Ok(params)
}

/// Frozen weights used as the sampling (old) policy or the reference policy.
#[derive(Debug, Clone)]
pub struct PolicySnapshot(Arc<PolicyParams>);

impl PolicySnapshot {
    pub fn take(params: &PolicyParams) -> Self {
        Self(Arc::new(params.clone()))
    }
}

impl Deref for PolicySnapshot {
    type Target = PolicyParams;

    fn deref(&self) -> &PolicyParams {
        &self.0
    }
}

/// The conditioning input of one task: question tokens and raw visual tokens
/// (`V x visual_dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub question: Vec<u32>,
    pub visual: Array2<f64>,
}

struct LayerVars {
    self_qkvo: [Var; 4],
    cross_qkvo: [Var; 4],
    ff: [Var; 4],
}

struct Graph<'a> {
    tape: Tape<'a>,
    leaves: Vec<Var>,
    logits: Var,
    log_probs: Var,
    /// Per layer, per head cross-attention probabilities (`L x V`).
    cross_attention: Vec<Vec<Var>>,
}

fn check_prompt(params: &PolicyParams, prompt: &Prompt, prefix: &[u32]) -> Result<()> {
    let cfg = &params.config;
    if prompt.question.is_empty() || prompt.question.len() > cfg.max_question_len {
        return Err(Error::Shape(format!(
            "question has {} tokens, model accepts 1..={}",
            prompt.question.len(),
            cfg.max_question_len
        )));
    }
    if prefix.len() > cfg.max_response_len {
        return Err(Error::Length { len: prefix.len(), max: cfg.max_response_len });
    }
    if prompt.visual.ncols() != cfg.visual_dim || prompt.visual.nrows() == 0 {
        return Err(Error::Shape(format!(
            "visual tokens are {}x{}, model expects width {}",
            prompt.visual.nrows(),
            prompt.visual.ncols(),
            cfg.visual_dim
        )));
    }
    if let Some(&t) = prompt.question.iter().chain(prefix).find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Shape(format!("token {t} outside vocab of {}", cfg.vocab_size)));
    }
    Ok(())
}

fn multi_head(
    tape: &mut Tape<'_>,
    queries: Var,
    keys: Var,
    values: Var,
    cfg: &ModelConfig,
    causal: bool,
) -> (Var, Vec<Var>) {
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(cfg.num_heads);
    let mut probs = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let q = tape.slice_cols(queries, lo, hi);
        let k = tape.slice_cols(keys, lo, hi);
        let v = tape.slice_cols(values, lo, hi);
        let scores = tape.matmul_t(q, k);
        let scores = tape.scale(scores, scale);
        let p = tape.softmax(scores, causal.then_some(0));
        outs.push(tape.matmul(p, v));
        probs.push(p);
    }
    let out = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
    (out, probs)
}

fn build_graph<'a>(params: &'a PolicyParams, prompt: &'a Prompt, stream: &[u32], track: bool) -> Graph<'a> {
    let cfg = &params.config;
    let mut tape = Tape::new();
    let leaves: Vec<Var> = params.tensors().into_iter().map(|t| tape.leaf(t, track)).collect();
    let (tok_emb, pos_emb, vis_proj) = (leaves[0], leaves[1], leaves[2]);
    let layer_vars: Vec<LayerVars> = (0..cfg.num_layers)
        .map(|l| {
            let base = 3 + 12 * l;
            let v = |k: usize| leaves[base + k];
            LayerVars {
                self_qkvo: [v(0), v(1), v(2), v(3)],
                cross_qkvo: [v(4), v(5), v(6), v(7)],
                ff: [v(8), v(9), v(10), v(11)],
            }
        })
        .collect();
    let (out_w, out_b) = (leaves[leaves.len() - 2], leaves[leaves.len() - 1]);

    let visual_raw = tape.leaf(&prompt.visual, false);
    let visual = tape.matmul(visual_raw, vis_proj);

    let tokens = tape.gather_rows(tok_emb, stream.iter().map(|&t| t as usize).collect());
    let positions = tape.gather_rows(pos_emb, (0..stream.len()).collect());
    let mut h = tape.add(tokens, positions);

    let mut cross_attention = Vec::with_capacity(cfg.num_layers);
    for lv in &layer_vars {
        let [wq, wk, wv, wo] = lv.self_qkvo;
        let n = tape.rms_norm(h);
        let q = tape.matmul(n, wq);
        let k = tape.matmul(n, wk);
        let v = tape.matmul(n, wv);
        let (att, _) = multi_head(&mut tape, q, k, v, cfg, true);
        let att = tape.matmul(att, wo);
        h = tape.add(h, att);

        let [wq, wk, wv, wo] = lv.cross_qkvo;
        let n = tape.rms_norm(h);
        let q = tape.matmul(n, wq);
        let k = tape.matmul(visual, wk);
        let v = tape.matmul(visual, wv);
        let (att, probs) = multi_head(&mut tape, q, k, v, cfg, false);
        cross_attention.push(probs);
        let att = tape.matmul(att, wo);
        h = tape.add(h, att);

        let [w1, b1, w2, b2] = lv.ff;
        let n = tape.rms_norm(h);
        let hidden = tape.matmul(n, w1);
        let hidden = tape.add_row(hidden, b1);
        let hidden = tape.tanh(hidden);
        let ff = tape.matmul(hidden, w2);
        let ff = tape.add_row(ff, b2);
        h = tape.add(h, ff);
    }
    let h = tape.rms_norm(h);
    let logits = tape.matmul(h, out_w);
    let logits = tape.add_row(logits, out_b);
    let log_probs = tape.log_softmax(logits);
    Graph { tape, leaves, logits, log_probs, cross_attention }
}

impl Graph<'_> {
    /// Head-averaged cross-attention row of stream position `pos`, per layer.
    fn attention_rows(&self, pos: usize) -> Vec<Vec<f64>> {
        self.cross_attention
            .iter()
            .map(|heads| {
                let n = heads.len() as f64;
                let mut row = self.tape.value(heads[0]).row(pos).to_owned();
                for &h in &heads[1..] {
                    row += &self.tape.value(h).row(pos);
                }
                row.mapv(|x| x / n).to_vec()
            })
            .collect()
    }

    fn distribution(&self, pos: usize) -> TokenDistribution {
        TokenDistribution::new(self.tape.value(self.log_probs).row(pos).mapv(f64::exp).to_vec())
    }
}

/// Next-token prediction after `prefix`, with the captured cross-attention of
/// every response position so far.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Logits for the token following `prefix`.
    pub logits: Vec<f64>,
    /// Head-averaged cross-attention rows for response positions
    /// `0..=prefix.len()`, per layer.
    pub attention: AttentionCapture,
    /// Softmax distributions for response positions `0..=prefix.len()`.
    pub distributions: Vec<TokenDistribution>,
}

pub fn forward(params: &PolicyParams, prompt: &Prompt, prefix: &[u32]) -> Result<ForwardOutput> {
    check_prompt(params, prompt, prefix)?;
    let stream: Vec<u32> = prompt.question.iter().chain(prefix).copied().collect();
    let graph = build_graph(params, prompt, &stream, false);
    let q = prompt.question.len();
    let last = stream.len() - 1;
    let positions = q - 1..=last;
    let mut layers = vec![Vec::new(); params.config.num_layers];
    for pos in positions.clone() {
        for (l, row) in graph.attention_rows(pos).into_iter().enumerate() {
            layers[l].push(row);
        }
    }
    Ok(ForwardOutput {
        logits: graph.tape.value(graph.logits).row(last).to_vec(),
        attention: AttentionCapture { layers },
        distributions: positions.map(|p| graph.distribution(p)).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    Greedy,
    Temperature(f64),
}

/// Draws one response from `policy`. Generation stops when `stop` returns
/// true for the tokens so far or after `max_len` tokens. Stored
/// distributions and log-probabilities are the untempered policy's.
pub fn sample_rollout(
    policy: &PolicyParams,
    prompt: &Prompt,
    max_len: usize,
    sampling: Sampling,
    seed: u64,
    stop: &dyn Fn(&[u32]) -> bool,
) -> Result<Response> {
    if let Sampling::Temperature(t) = sampling {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::Param(format!("temperature must be positive, got {t}")));
        }
    }
    let max_len = max_len.min(policy.config.max_response_len).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens = Vec::with_capacity(max_len);
    let mut old_logprobs = Vec::with_capacity(max_len);
    let mut distributions = Vec::with_capacity(max_len);
    let mut layers = vec![Vec::with_capacity(max_len); policy.config.num_layers];
    check_prompt(policy, prompt, &[])?;
    let mut stream = prompt.question.clone();
    while tokens.len() < max_len {
        let graph = build_graph(policy, prompt, &stream, false);
        let pos = stream.len() - 1;
        let dist = graph.distribution(pos);
        let logits = graph.tape.value(graph.logits).row(pos).to_vec();
        let token = match sampling {
            Sampling::Greedy => argmax(&logits),
            Sampling::Temperature(t) => sample_index(&tempered(&logits, t), rng.random::<f64>()),
        };
        old_logprobs.push(graph.tape.value(graph.log_probs)[[pos, token]]);
        for (l, row) in graph.attention_rows(pos).into_iter().enumerate() {
            layers[l].push(row);
        }
        distributions.push(dist);
        tokens.push(token as u32);
        stream.push(token as u32);
        if stop(&tokens) {
            break;
        }
    }
    Ok(Response { tokens, old_logprobs, distributions, attention: AttentionCapture { layers } })
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn tempered(logits: &[f64], t: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| ((l - max) / t).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|x| x / sum).collect()
}

/// Inverse-CDF draw for `u` in `[0, 1)`.
fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Teacher-forced evaluation of a fixed response, kept around so the same
/// graph can be differentiated.
pub struct TeacherForced<'a> {
    graph: Graph<'a>,
    question_len: usize,
    tokens: Vec<u32>,
}

impl<'a> TeacherForced<'a> {
    pub fn new(params: &'a PolicyParams, prompt: &'a Prompt, tokens: &[u32], track_grad: bool) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Shape("cannot evaluate an empty response".into()));
        }
        let prefix = &tokens[..tokens.len() - 1];
        check_prompt(params, prompt, prefix)?;
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= params.config.vocab_size) {
            return Err(Error::Shape(format!("token {t} outside vocab of {}", params.config.vocab_size)));
        }
        let stream: Vec<u32> = prompt.question.iter().chain(prefix).copied().collect();
        Ok(Self {
            graph: build_graph(params, prompt, &stream, track_grad),
            question_len: prompt.question.len(),
            tokens: tokens.to_vec(),
        })
    }

    fn position(&self, j: usize) -> usize {
        self.question_len - 1 + j
    }

    pub fn logprobs(&self) -> Vec<f64> {
        let lp = self.graph.tape.value(self.graph.log_probs);
        self.tokens.iter().enumerate().map(|(j, &t)| lp[[self.position(j), t as usize]]).collect()
    }

    pub fn distributions(&self) -> Vec<TokenDistribution> {
        (0..self.tokens.len()).map(|j| self.graph.distribution(self.position(j))).collect()
    }

    pub fn attention(&self) -> AttentionCapture {
        let mut layers = vec![Vec::new(); self.graph.cross_attention.len()];
        for j in 0..self.tokens.len() {
            for (l, row) in self.graph.attention_rows(self.position(j)).into_iter().enumerate() {
                layers[l].push(row);
            }
        }
        AttentionCapture { layers }
    }

    /// Gradient of `sum_j dlogp[j] * logprob_j` with respect to every
    /// parameter. Requires the graph to have been built with tracking.
    pub fn backward(&self, params: &PolicyParams, dlogp: &[f64]) -> Result<Gradients> {
        if dlogp.len() != self.tokens.len() {
            return Err(Error::Shape(format!(
                "{} log-prob gradients for {} tokens",
                dlogp.len(),
                self.tokens.len()
            )));
        }
        let out = self.graph.log_probs;
        let mut seed = Array2::zeros(self.graph.tape.value(out).raw_dim());
        for (j, (&t, &g)) in self.tokens.iter().zip(dlogp).enumerate() {
            seed[[self.position(j), t as usize]] = g;
        }
        let mut grads = self.graph.tape.backward(out, seed);
        let mut result = params.zeros_like();
        for (slot, leaf) in result.tensors_mut().into_iter().zip(&self.graph.leaves) {
            if let Some(g) = grads[leaf.index()].take() {
                *slot = g;
            }
        }
        Ok(result)
    }
}

/// Per-token log-probabilities and distributions of `tokens` under `params`.
pub fn logprobs_under(
    params: &PolicyParams,
    tokens: &[u32],
    prompt: &Prompt,
) -> Result<(Vec<f64>, Vec<TokenDistribution>)> {
    let tf = TeacherForced::new(params, prompt, tokens, false)?;
    Ok((tf.logprobs(), tf.distributions()))
}

/// Gradient of `sum_j dlogp[j] * log pi(tokens_j | prefix)` for one response.
pub fn backward(params: &PolicyParams, prompt: &Prompt, tokens: &[u32], dlogp: &[f64]) -> Result<Gradients> {
    TeacherForced::new(params, prompt, tokens, true)?.backward(params, dlogp)
}

pub fn sgd_step(params: &mut PolicyParams, grads: &Gradients, lr: f64) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::Param(format!("learning rate must be positive, got {lr}")));
    }
    params.add_scaled(grads, -lr);
    Ok(())
}

pub fn grad_norm(grads: &Gradients) -> f64 {
    grads.tensors().iter().flat_map(|t| t.iter()).map(|g| g * g).sum::<f64>().sqrt()
}

/// Mean token entropy over every generated token in `responses`.
pub fn mean_entropy<'r>(responses: impl IntoIterator<Item = &'r Response>) -> f64 {
    let (sum, n) = responses
        .into_iter()
        .flat_map(|r| r.distributions.iter())
        .fold((0.0, 0usize), |(s, n), d| (s + token_entropy(d), n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub const CHECKPOINT_VERSION: &str = "appo-params/1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    version: String,
    config: ModelConfig,
    tensors: Vec<TensorRecord>,
}

pub fn checkpoint_to_string(params: &PolicyParams) -> String {
    let tensors = params
        .names()
        .into_iter()
        .zip(params.tensors())
        .map(|(name, t)| TensorRecord { name, shape: [t.nrows(), t.ncols()], data: t.iter().copied().collect() })
        .collect();
    let ck = Checkpoint { version: CHECKPOINT_VERSION.into(), config: params.config, tensors };
    serde_json::to_string(&ck).expect("checkpoint serializes")
}

pub fn checkpoint_from_str(text: &str) -> Result<PolicyParams> {
    let parse = |e: serde_json::Error| Error::Parse { line: e.line(), message: e.to_string() };
    let ck: Checkpoint = serde_json::from_str(text).map_err(parse)?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::Version { line: 1, found: ck.version, expected: CHECKPOINT_VERSION });
    }
    ck.config.validate()?;
    let mut params = PolicyParams::zeros(ck.config);
    let names = params.names();
    if ck.tensors.len() != names.len() {
        return Err(Error::Shape(format!("checkpoint has {} tensors, expected {}", ck.tensors.len(), names.len())));
    }
    for ((record, name), slot) in ck.tensors.into_iter().zip(&names).zip(params.tensors_mut()) {
        let shape = [slot.nrows(), slot.ncols()];
        if &record.name != name || record.shape != shape || record.data.len() != slot.len() {
            return Err(Error::Shape(format!("tensor {} does not match expected {name} {shape:?}", record.name)));
        }
        if record.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("tensor {name} has non-finite entries")));
        }
        *slot = Array2::from_shape_vec((shape[0], shape[1]), record.data).expect("length checked");
    }
    Ok(params)
}

pub fn save_checkpoint(params: &PolicyParams, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(params) + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyParams> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_str(&text)
}
