//! Built-in invariant suite behind the `selftest` subcommand.
//!
//! Every suite draws its cases from a fixed seed, so a run is reproducible.
//! `Faults` lets a caller break the implementation on purpose and confirm
//! the matching suite notices.

use std::collections::BTreeSet;
use std::fmt;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::Result;
use crate::frame_select::{
    focused_frames, select_frames, select_target_frames, top_k_indices, FrameSet, SelectionConfig, Strategy,
};
use crate::objective::{advantages, appo_loss, dapo_loss, loss_for, Algorithm, AdvantageVector, ObjectiveConfig};
use crate::policy::{init_params, logprobs_under, Gradients, ModelConfig, PolicyParams, Prompt, TeacherForced};
use crate::reweight::{
    kl_divergence_with, reweight_with, Faults, ReweightConfig, SlotReduction, TokenWeightMap, WeightAveraging, KL_EPS,
};
use crate::trace::{AttentionCapture, Response, RewardBreakdown, RolloutGroup, TokenDistribution, VisualLayout};

#[derive(Debug, Clone, Copy)]
pub struct SelftestOptions {
    pub seed: u64,
    /// Multiplies every suite's case count.
    pub scale: f64,
    pub faults: Faults,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        Self { seed: 0, scale: 1.0, faults: Faults::NONE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
    pub first_failure: Option<String>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.cases > 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelftestReport {
    pub suites: Vec<SuiteResult>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteResult::passed)
    }

    pub fn suite(&self, name: &str) -> Option<&SuiteResult> {
        self.suites.iter().find(|s| s.name == name)
    }
}

impl fmt::Display for SelftestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.suites {
            let status = if s.passed() { "PASS" } else { "FAIL" };
            writeln!(f, "{status} {:<20} {:>6} cases {:>6} failures", s.name, s.cases, s.failures)?;
            if let Some(msg) = &s.first_failure {
                writeln!(f, "     first failure: {msg}")?;
            }
        }
        let total: usize = self.suites.iter().map(|s| s.failures).sum();
        write!(f, "{}", if total == 0 { "all suites passed" } else { "selftest FAILED" })
    }
}

struct Suite {
    name: &'static str,
    cases: usize,
    failures: usize,
    first_failure: Option<String>,
}

impl Suite {
    fn new(name: &'static str) -> Self {
        Self { name, cases: 0, failures: 0, first_failure: None }
    }

    fn check(&mut self, ok: bool, describe: impl FnOnce() -> String) {
        self.cases += 1;
        if !ok {
            self.failures += 1;
            self.first_failure.get_or_insert_with(describe);
        }
    }

    fn error(&mut self, e: crate::Error) {
        self.check(false, || e.to_string());
    }

    fn finish(self) -> SuiteResult {
        SuiteResult { name: self.name, cases: self.cases, failures: self.failures, first_failure: self.first_failure }
    }
}

fn count(base: usize, scale: f64) -> usize {
    ((base as f64 * scale).round() as usize).max(1)
}

pub fn random_distribution<R: Rng>(rng: &mut R, vocab: usize, sharpness: f64) -> TokenDistribution {
    let logits: Vec<f64> = (0..vocab).map(|_| sharpness * rng.sample::<f64, _>(StandardNormal)).collect();
    softmax(&logits)
}

fn softmax(logits: &[f64]) -> TokenDistribution {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    TokenDistribution::new(e.into_iter().map(|x| x / z).collect())
}

/// Shape of a randomly generated group.
#[derive(Debug, Clone, Copy)]
pub struct GroupShape {
    pub group_size: usize,
    pub num_frames: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub layers: usize,
}

impl GroupShape {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        Self {
            group_size: rng.random_range(2..=8),
            num_frames: rng.random_range(2..=16),
            vocab: rng.random_range(4..=64),
            max_len: rng.random_range(1..=10),
            layers: rng.random_range(1..=3),
        }
    }
}

/// A valid rollout group with random layout, tokens, distributions,
/// attention and rewards. Some responses share distributions so that
/// degenerate divergences show up.
pub fn random_rollout_group<R: Rng>(rng: &mut R, shape: GroupShape) -> RolloutGroup {
    let per_frame: Vec<usize> = (0..shape.num_frames).map(|_| rng.random_range(1..=3)).collect();
    let layout = VisualLayout::new(per_frame).expect("small layout");
    let v = layout.num_visual_tokens();
    let shared = random_distribution(rng, shape.vocab, 2.0);
    let responses = (0..shape.group_size)
        .map(|_| {
            let len = rng.random_range(1..=shape.max_len);
            let copy = rng.random_bool(0.2);
            let distributions: Vec<TokenDistribution> = (0..len)
                .map(|_| if copy { shared.clone() } else { random_distribution(rng, shape.vocab, 2.0) })
                .collect();
            let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(0..shape.vocab as u32)).collect();
            let old_logprobs = tokens
                .iter()
                .zip(&distributions)
                .map(|(&t, d)| d.probs[t as usize].max(1e-300).ln())
                .collect();
            let layers = (0..shape.layers)
                .map(|_| {
                    (0..len)
                        .map(|_| {
                            let logits: Vec<f64> = (0..v).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
                            softmax(&logits).probs
                        })
                        .collect()
                })
                .collect();
            Response { tokens, old_logprobs, distributions, attention: AttentionCapture { layers } }
        })
        .collect();
    let rewards = (0..shape.group_size)
        .map(|_| RewardBreakdown::new(rng.random_bool(0.5), rng.random_bool(0.7)))
        .collect();
    RolloutGroup::new(layout, responses, rewards, serde_json::Value::Null)
}

fn random_strategy<R: Rng>(rng: &mut R) -> Strategy {
    Strategy::ALL[rng.random_range(0..3)]
}

fn random_frame_set<R: Rng>(rng: &mut R, t: usize) -> FrameSet {
    (0..t).filter(|_| rng.random_bool(0.4)).collect()
}

fn weight_bounds(opts: &SelftestOptions, rng: &mut ChaCha8Rng) -> SuiteResult {
    let mut suite = Suite::new("weight-bounds");
    for case in 0..count(2000, opts.scale) {
        let shape = GroupShape::random(rng);
        let group = random_rollout_group(rng, shape);
        let sel = SelectionConfig {
            tau: 0.5,
            k1: rng.random_range(1..=20),
            k2: rng.random_range(1..=shape.num_frames),
            attention_layers: rng.random_range(1..=3),
            strategy: random_strategy(rng),
        };
        let alpha = rng.random_range(0.0..3.0);
        let rw_cfg = ReweightConfig {
            k3: rng.random_range(1..=12),
            alpha,
            reduction: if rng.random_bool(0.5) { SlotReduction::PerSlot } else { SlotReduction::PerToken },
            averaging: if rng.random_bool(0.5) { WeightAveraging::Membership } else { WeightAveraging::Literal1OverK },
        };
        let split: Vec<f64> = group.rewards.iter().map(|r| r.accuracy).collect();
        let captures: Vec<_> = group.responses.iter().map(|r| &r.attention).collect();
        let result = select_frames(&group.layout, &captures, &split, &sel).and_then(|s| {
            reweight_with(&group.responses, &s.targets, &s.frame_attention, &rw_cfg, opts.faults)
        });
        match result {
            Err(e) => suite.error(e),
            Ok(rw) => {
                let members: BTreeSet<(usize, usize)> = rw
                    .groups
                    .groups
                    .iter()
                    .flat_map(|g| g.slots.iter().enumerate().flat_map(|(i, s)| s.iter().map(move |&t| (i, t))))
                    .collect();
                for (i, row) in rw.weights.weights.iter().enumerate() {
                    for (t, &w) in row.iter().enumerate() {
                        let ok = if members.contains(&(i, t)) { (1.0..=1.0 + alpha).contains(&w) } else { w == 1.0 };
                        suite.check(ok, || format!("case {case}: weight {w} at ({i}, {t}) with alpha {alpha}"));
                    }
                }
            }
        }
    }
    suite.finish()
}

fn kl_properties(opts: &SelftestOptions, rng: &mut ChaCha8Rng) -> SuiteResult {
    let mut suite = Suite::new("kl");
    for case in 0..count(2000, opts.scale) {
        let vocab = rng.random_range(2..=64);
        let (sp, sq) = (rng.random_range(0.1..5.0), rng.random_range(0.1..5.0));
        let p = random_distribution(rng, vocab, sp);
        let q = random_distribution(rng, vocab, sq);
        match (kl_divergence_with(&p, &q, KL_EPS, opts.faults), kl_divergence_with(&p, &p, KL_EPS, opts.faults)) {
            (Ok(pq), Ok(pp)) => {
                suite.check(pq >= 0.0 && pq.is_finite(), || format!("case {case}: KL(p||q) = {pq}"));
                suite.check(pp.abs() <= 1e-12, || format!("case {case}: KL(p||p) = {pp}"));
            }
            (Err(e), _) | (_, Err(e)) => suite.error(e),
        }
    }
    suite.finish()
}

fn top_k(opts: &SelftestOptions, rng: &mut ChaCha8Rng) -> SuiteResult {
    let mut suite = Suite::new("top-k");
    for case in 0..count(2000, opts.scale) {
        let n = rng.random_range(1..=12);
        // Coarse values so ties are common.
        let values: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..5u8)) / 4.0).collect();
        let k = rng.random_range(1..=n + 2);
        let got = top_k_indices(&values, k);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
        order.truncate(k);
        suite.check(got == order, || format!("case {case}: top-{k} of {values:?} gave {got:?}"));

        // A focused set of size k is one whose every member beats every
        // non-member, ties going to the lower index.
        let focus = focused_frames(&values, k);
        let beats = |a: usize, b: usize| values[a] > values[b] || (values[a] == values[b] && a < b);
        let ok = focus.len() == k.min(n)
            && focus.iter().all(|&a| (0..n).filter(|b| !focus.contains(b)).all(|b| beats(a, b)));
        suite.check(ok, || format!("case {case}: focused {focus:?} of {values:?}"));
    }
    suite.finish()
}

fn set_algebra(opts: &SelftestOptions, rng: &mut ChaCha8Rng) -> SuiteResult {
    let mut suite = Suite::new("set-algebra");
    for case in 0..count(2000, opts.scale) {
        let t = rng.random_range(1..=16);
        let (hi, lo) = (random_frame_set(rng, t), random_frame_set(rng, t));
        let hard = select_target_frames(&hi, &lo, Strategy::Hard).frames;
        let soft = select_target_frames(&hi, &lo, Strategy::Soft).frames;
        let all = select_target_frames(&hi, &lo, Strategy::All).frames;
        let expect_hard: FrameSet = (0..t).filter(|f| hi.contains(f) && !lo.contains(f)).collect();
        let expect_all: FrameSet = (0..t).filter(|f| hi.contains(f) || lo.contains(f)).collect();
        let ok = hard.is_subset(&soft) && soft.is_subset(&all) && hard == expect_hard && soft == hi && all == expect_all;
        suite.check(ok, || format!("case {case}: hi {hi:?} lo {lo:?}"));
    }
    suite.finish()
}

/// New, old and reference log-probs with matching lengths.
type LogprobBatch = (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>);

fn random_logprob_batch(rng: &mut ChaCha8Rng, g: usize) -> LogprobBatch {
    let lens: Vec<usize> = (0..g).map(|_| rng.random_range(1..=8)).collect();
    let new: Vec<Vec<f64>> =
        lens.iter().map(|&n| (0..n).map(|_| -rng.random_range(0.05..3.0)).collect()).collect();
    let mut shift = |spread: f64| -> Vec<Vec<f64>> {
        new.iter().map(|row| row.iter().map(|x| x + rng.random_range(-spread..spread)).collect()).collect()
    };
    let old = shift(0.5);
    let refs = shift(0.3);
    (new, old, refs)
}

fn random_advantages(rng: &mut ChaCha8Rng, g: usize) -> AdvantageVector {
    let rewards: Vec<f64> = (0..g).map(|_| f64::from(rng.random_range(0..3u8)) * 0.45).collect();
    advantages(&rewards, 1e-6)
}

fn reduction_identity(opts: &SelftestOptions, rng: &mut ChaCha8Rng) -> SuiteResult {
    let mut suite = Suite::new("reduction-identity");
    let cfg = ObjectiveConfig::default();
    for case in 0..count(1000, opts.scale) {
        let g = rng.random_range(2..=8);
        let (new, old, _) = random_logprob_batch(rng, g);
        let adv = random_advantages(rng, g);
        let lens: Vec<usize> = new.iter().map(Vec::len).collect();
        let ones = TokenWeightMap::ones(&lens);
        match (appo_loss(&new, &old, &adv, &ones, &cfg), dapo_loss(&new, &old, &adv, &cfg)) {
            (Ok(a), Ok(d)) => suite.check(a.loss.to_bits() == d.loss.to_bits() && a.grad_logprobs == d.grad_logprobs, || {
                format!("case {case}: APPO {} vs DAPO {}", a.loss, d.loss)
            }),
            (Err(e), _) | (_, Err(e)) => suite.error(e),
        }
    }
    suite.finish()
}

fn objective_gradients(opts: &SelftestOptions, rng: &mut ChaCha8Rng) -> SuiteResult {
    let mut suite = Suite::new("objective-gradients");
    for case in 0..count(300, opts.scale) {
        let g = rng.random_range(2..=6);
        let (new, old, refs) = random_logprob_batch(rng, g);
        let adv = random_advantages(rng, g);
        let algorithm = [Algorithm::Grpo, Algorithm::Dapo, Algorithm::Appo][case % 3];
        let cfg = ObjectiveConfig { algorithm, ..ObjectiveConfig::default() };
        let mut weights = TokenWeightMap::ones(&new.iter().map(Vec::len).collect::<Vec<_>>());
        for w in weights.weights.iter_mut().flatten() {
            *w = 1.0 + rng.random_range(0.0..1.7);
        }
        let loss = |x: &[Vec<f64>]| loss_for(x, &old, Some(&refs), &adv, Some(&weights), &cfg).map(|r| r.loss);
        let report = match loss_for(&new, &old, Some(&refs), &adv, Some(&weights), &cfg) {
            Ok(r) => r,
            Err(e) => {
                suite.error(e);
                continue;
            }
        };
        let h = 1e-6;
        for i in 0..new.len() {
            for t in 0..new[i].len() {
                let mut up = new.clone();
                let mut dn = new.clone();
                up[i][t] += h;
                dn[i][t] -= h;
                let (Ok(lu), Ok(ld)) = (loss(&up), loss(&dn)) else { continue };
                let fd = (lu - ld) / (2.0 * h);
                let an = report.grad_logprobs[i][t];
                // Skip points sitting on a clip boundary.
                let r = (new[i][t] - old[i][t]).exp();
                if (r - 0.8).abs() < 1e-5 || (r - 1.28).abs() < 1e-5 {
                    continue;
                }
                suite.check((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), || {
                    format!("case {case} ({algorithm}): d/dlogp[{i}][{t}] analytic {an} vs fd {fd}")
                });
            }
        }
    }
    suite.finish()
}

/// Everything needed to evaluate the surrogate as a function of the
/// parameters: fixed responses, old and reference log-probs, advantages and
/// weights.
pub struct LossProblem {
    pub prompt: Prompt,
    pub tokens: Vec<Vec<u32>>,
    pub old: Vec<Vec<f64>>,
    pub refs: Vec<Vec<f64>>,
    pub adv: AdvantageVector,
    pub weights: TokenWeightMap,
    pub cfg: ObjectiveConfig,
}

impl LossProblem {
    /// A random problem for `params`. Old log-probs are shifted away from
    /// the current ones so some tokens sit in the clipped regime.
    pub fn random<R: Rng>(rng: &mut R, params: &PolicyParams, algorithm: Algorithm) -> Result<Self> {
        let mc = &params.config;
        let q_len = rng.random_range(1..=mc.max_question_len);
        let question: Vec<u32> = (0..q_len).map(|_| rng.random_range(0..mc.vocab_size as u32)).collect();
        let v = rng.random_range(2..=6);
        let visual = Array2::from_shape_fn((v, mc.visual_dim), |_| 2.0 * rng.sample::<f64, _>(StandardNormal));
        let prompt = Prompt { question, visual };
        let g = rng.random_range(2..=4);
        let tokens: Vec<Vec<u32>> = (0..g)
            .map(|_| {
                let n = rng.random_range(1..=mc.max_response_len.min(4));
                (0..n).map(|_| rng.random_range(0..mc.vocab_size as u32)).collect()
            })
            .collect();
        let mut old = Vec::with_capacity(g);
        for t in &tokens {
            let (lp, _) = logprobs_under(params, t, &prompt)?;
            old.push(lp.iter().map(|x| x + rng.random_range(-0.6..0.6)).collect::<Vec<f64>>());
        }
        let refs = old.iter().map(|row| row.iter().map(|x| x + rng.random_range(-0.3..0.3)).collect()).collect();
        let rewards: Vec<f64> = (0..g).map(|i| if i == 0 { 1.0 } else { f64::from(rng.random_range(0..3u8)) * 0.45 }).collect();
        let adv = advantages(&rewards, 1e-6);
        let mut weights = TokenWeightMap::ones(&tokens.iter().map(Vec::len).collect::<Vec<_>>());
        if algorithm == Algorithm::Appo {
            for w in weights.weights.iter_mut().flatten() {
                if rng.random_bool(0.5) {
                    *w = 1.0 + rng.random_range(0.0..1.7);
                }
            }
        }
        let cfg = ObjectiveConfig { algorithm, ..ObjectiveConfig::default() };
        Ok(Self { prompt, tokens, old, refs, adv, weights, cfg })
    }

    pub fn loss(&self, params: &PolicyParams) -> Result<f64> {
        let new = self
            .tokens
            .iter()
            .map(|t| logprobs_under(params, t, &self.prompt).map(|(lp, _)| lp))
            .collect::<Result<Vec<_>>>()?;
        Ok(loss_for(&new, &self.old, Some(&self.refs), &self.adv, Some(&self.weights), &self.cfg)?.loss)
    }

    pub fn loss_and_grad(&self, params: &PolicyParams) -> Result<(f64, Gradients)> {
        let forced = self
            .tokens
            .iter()
            .map(|t| TeacherForced::new(params, &self.prompt, t, true))
            .collect::<Result<Vec<_>>>()?;
        let new: Vec<Vec<f64>> = forced.iter().map(TeacherForced::logprobs).collect();
        let report = loss_for(&new, &self.old, Some(&self.refs), &self.adv, Some(&self.weights), &self.cfg)?;
        let mut grads = params.zeros_like();
        for (tf, d) in forced.iter().zip(&report.grad_logprobs) {
            grads.add_scaled(&tf.backward(params, d)?, 1.0);
        }
        Ok((report.loss, grads))
    }
}

pub fn tiny_model_config<R: Rng>(rng: &mut R) -> ModelConfig {
    let heads = rng.random_range(1..=2);
    ModelConfig {
        vocab_size: rng.random_range(4..=10),
        embed_dim: heads * rng.random_range(2..=4),
        num_heads: heads,
        num_layers: rng.random_range(1..=2),
        max_response_len: 4,
        max_question_len: 3,
        visual_dim: rng.random_range(2..=5),
    }
}

/// Central differences on a random subset of parameters.
fn model_gradients(opts: &SelftestOptions, rng: &mut ChaCha8Rng) -> SuiteResult {
    let mut suite = Suite::new("model-gradients");
    for case in 0..count(6, opts.scale) {
        let algorithm = [Algorithm::Grpo, Algorithm::Dapo, Algorithm::Appo][case % 3];
        let mc = tiny_model_config(rng);
        let result = init_params(&mc, rng.random()).and_then(|params| {
            let problem = LossProblem::random(rng, &params, algorithm)?;
            let (_, grads) = problem.loss_and_grad(&params)?;
            let mut checks = Vec::new();
            for _ in 0..20 {
                let idx = rng.random_range(0..params.num_params());
                let h = 1e-5;
                let mut p = params.clone();
                let x = p.get_flat(idx);
                p.set_flat(idx, x + h);
                let up = problem.loss(&p)?;
                p.set_flat(idx, x - h);
                let dn = problem.loss(&p)?;
                checks.push((idx, (up - dn) / (2.0 * h), grads.get_flat(idx)));
            }
            Ok(checks)
        });
        match result {
            Err(e) => suite.error(e),
            Ok(checks) => {
                for (idx, fd, an) in checks {
                    if an.abs() <= 1e-8 && fd.abs() <= 1e-8 {
                        continue;
                    }
                    let rel = (fd - an).abs() / an.abs().max(fd.abs());
                    suite.check(rel <= 1e-4 || (fd - an).abs() <= 1e-9, || {
                        format!("case {case} ({algorithm}): param {idx} analytic {an} vs fd {fd}")
                    });
                }
            }
        }
    }
    suite.finish()
}

pub fn run_selftest(opts: &SelftestOptions) -> SelftestReport {
    type SuiteFn = fn(&SelftestOptions, &mut ChaCha8Rng) -> SuiteResult;
    let suites: [(u64, SuiteFn); 7] = [
        (1, weight_bounds),
        (2, kl_properties),
        (3, top_k),
        (4, set_algebra),
        (5, reduction_identity),
        (6, objective_gradients),
        (7, model_gradients),
    ];
    let suites = suites
        .iter()
        .map(|&(stream, f)| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(stream);
            f(opts, &mut rng)
        })
        .collect();
    SelftestReport { suites }
}
