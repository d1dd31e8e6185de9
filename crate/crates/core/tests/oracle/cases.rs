//! One randomized comparison between the library and an oracle per function.
//! `Ok` carries the largest absolute deviation; `Err` a structural mismatch.

use appo_core::frame_select::{
    frame_attention, response_frame_score, select_frames, select_target_frames, FrameSet, SelectionConfig, Strategy,
};
use appo_core::objective::{advantages, appo_loss, dapo_loss, grpo_loss, AdvantageVector, Algorithm, ObjectiveConfig};
use appo_core::policy::{init_params, ModelConfig, Prompt, TeacherForced};
use appo_core::reweight::{
    group_divergence, kl_divergence, reweight, ReweightConfig, SlotReduction, TokenWeightMap, WeightAveraging, KL_EPS,
};
use appo_core::selftest::{tiny_model_config, LossProblem};
use appo_core::trace::TokenDistribution;
use ndarray::Array2;
use rand::Rng;

use super::*;

pub type Outcome = Result<f64, String>;

const STRATEGIES: [(Strategy, &str); 3] = [(Strategy::Hard, "hard"), (Strategy::Soft, "soft"), (Strategy::All, "all")];

fn set(v: &[usize]) -> FrameSet {
    v.iter().copied().collect()
}

/// Frame attention pooled over the last `n` layers.
pub fn frame_attention_case<R: Rng>(rng: &mut R) -> Outcome {
    let spec = GroupSpec::random(rng);
    let group = rollout_group(rng, &spec);
    let n = rng.random_range(1..=4);
    let mut dev: f64 = 0.0;
    for r in &group.responses {
        let lib = frame_attention(&r.attention, &group.layout, n).map_err(|e| e.to_string())?;
        let want = super::frame_attention(&r.attention.layers, &spec.tokens_per_frame, n);
        if lib.values.len() != want.len() {
            return Err("row count differs".into());
        }
        dev = dev.max(max_abs_diff(lib.values.iter().flatten(), want.iter().flatten()));
    }
    Ok(dev)
}

/// Scores, focused sets, unions and all three strategies.
pub fn selection_case<R: Rng>(rng: &mut R) -> Outcome {
    let spec = GroupSpec::random(rng);
    let group = rollout_group(rng, &spec);
    let rewards: Vec<f64> = (0..spec.group_size).map(|_| f64::from(rng.random_range(0..5u8)) / 4.0).collect();
    let tau = [0.25, 0.5, 0.75][rng.random_range(0..3)];
    let k1 = rng.random_range(1..=16);
    let k2 = rng.random_range(1..=spec.tokens_per_frame.len());
    let layers = rng.random_range(1..=3);
    let mut dev: f64 = 0.0;
    let captures: Vec<_> = group.responses.iter().map(|r| &r.attention).collect();
    let want = select(&group, &rewards, tau, k1, k2, layers, "soft");
    for (strategy, name) in STRATEGIES {
        let cfg = SelectionConfig { tau, k1, k2, attention_layers: layers, strategy };
        let lib = select_frames(&group.layout, &captures, &rewards, &cfg).map_err(|e| e.to_string())?;
        if lib.split.high_set != want.high || lib.split.low_set != want.low {
            return Err(format!("split differs: {:?} vs {:?}", lib.split, (&want.high, &want.low)));
        }
        for (i, fa) in lib.frame_attention.iter().enumerate() {
            let scores = response_frame_score(fa, k1);
            dev = dev.max(max_abs_diff(&scores, &frame_scores(&want.frame_attention[i], k1)));
            if lib.focused[i] != set(&want.focused[i]) {
                return Err(format!("focused set of response {i}: {:?} vs {:?}", lib.focused[i], want.focused[i]));
            }
        }
        let t = &lib.targets;
        if t.high_frames != set(&want.psi_high) || t.low_frames != set(&want.psi_low) {
            return Err("union of focused frames differs".into());
        }
        let expected = strategy_frames(name, &want.psi_high, &want.psi_low, spec.tokens_per_frame.len());
        if t.frames != set(&expected) {
            return Err(format!("{name} targets {:?} vs {expected:?}", t.frames));
        }
    }
    Ok(dev)
}

/// A single KL value and a full raw slot-divergence table.
pub fn kl_case<R: Rng>(rng: &mut R) -> Outcome {
    let vocab = rng.random_range(4..=64);
    let p = distribution(rng, vocab);
    let q = distribution(rng, vocab);
    let lib = kl_divergence(&TokenDistribution::new(p.clone()), &TokenDistribution::new(q.clone()), KL_EPS)
        .map_err(|e| e.to_string())?;
    let mut dev = (lib - kl(&p, &q)).abs();

    let spec = GroupSpec::random(rng);
    let group = rollout_group(rng, &spec);
    let captures: Vec<_> = group.responses.iter().map(|r| &r.attention).collect();
    let rewards: Vec<f64> = (0..spec.group_size).map(|i| (i % 2) as f64).collect();
    let cfg = SelectionConfig { tau: 0.5, k1: 4, k2: 3, attention_layers: 2, strategy: Strategy::All };
    let sel = select_frames(&group.layout, &captures, &rewards, &cfg).map_err(|e| e.to_string())?;
    let k3 = rng.random_range(1..=12);
    for (reduction, per_token) in [(SlotReduction::PerSlot, false), (SlotReduction::PerToken, true)] {
        let rw = ReweightConfig { k3, alpha: 1.0, reduction, averaging: WeightAveraging::Membership };
        let lib = reweight(&group.responses, &sel.targets, &sel.frame_attention, &rw).map_err(|e| e.to_string())?;
        let targets: Vec<usize> = sel.targets.frames.iter().copied().collect();
        let fa: Vec<Vec<Vec<f64>>> = sel.frame_attention.iter().map(|m| m.values.clone()).collect();
        let want = super::reweight(&group.responses, &targets, &fa, k3, 1.0, per_token, false);
        let raw = group_divergence(&lib.groups, &group.responses, reduction).map_err(|e| e.to_string())?;
        for (k, g) in raw.groups.iter().enumerate() {
            if g.values.len() != want.raw[k].len() {
                return Err("divergence table shape differs".into());
            }
            dev = dev.max(max_abs_diff(g.values.iter().flatten(), want.raw[k].iter().flatten()));
        }
    }
    Ok(dev)
}

/// Perception groups, normalization and weights under every option pair.
pub fn weights_case<R: Rng>(rng: &mut R) -> Outcome {
    let spec = GroupSpec::random(rng);
    let group = rollout_group(rng, &spec);
    let frames = spec.tokens_per_frame.len();
    let targets: Vec<usize> = (0..frames).filter(|_| rng.random_bool(0.4)).collect();
    let fa: Vec<Vec<Vec<f64>>> =
        group.responses.iter().map(|r| super::frame_attention(&r.attention.layers, &spec.tokens_per_frame, 3)).collect();
    let lib_fa = group
        .responses
        .iter()
        .map(|r| frame_attention(&r.attention, &group.layout, 3))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let tf = select_target_frames(&set(&targets), &FrameSet::new(), Strategy::Soft);
    let k3 = rng.random_range(1..=12);
    let alpha = rng.random_range(0.0..3.0);
    let mut dev: f64 = 0.0;
    for (reduction, per_token) in [(SlotReduction::PerSlot, false), (SlotReduction::PerToken, true)] {
        for (averaging, literal) in [(WeightAveraging::Membership, false), (WeightAveraging::Literal1OverK, true)] {
            let cfg = ReweightConfig { k3, alpha, reduction, averaging };
            let lib = reweight(&group.responses, &tf, &lib_fa, &cfg).map_err(|e| e.to_string())?;
            let want = super::reweight(&group.responses, &targets, &fa, k3, alpha, per_token, literal);
            for (k, g) in lib.groups.groups.iter().enumerate() {
                if g.slots != want.slots[k] {
                    return Err(format!("perception group {k} slots differ"));
                }
            }
            for (k, g) in lib.normalized.groups.iter().enumerate() {
                dev = dev.max(max_abs_diff(g.values.iter().flatten(), want.normalized[k].iter().flatten()));
            }
            dev = dev.max(max_abs_diff(lib.weights.weights.iter().flatten(), want.weights.iter().flatten()));
        }
    }
    Ok(dev)
}

/// Advantages plus all three objectives on random log-probs.
pub fn loss_case<R: Rng>(rng: &mut R) -> Outcome {
    let g = rng.random_range(2..=8);
    let lens: Vec<usize> = (0..g).map(|_| rng.random_range(1..=12)).collect();
    let mk = |rng: &mut R| -> Vec<Vec<f64>> {
        lens.iter().map(|&n| (0..n).map(|_| -rng.random_range(0.01..4.0)).collect()).collect()
    };
    let old = mk(rng);
    let new: Vec<Vec<f64>> =
        old.iter().map(|row| row.iter().map(|x| x + rng.random_range(-0.5..0.5)).collect()).collect();
    let refs = mk(rng);
    let rewards: Vec<f64> = (0..g).map(|_| f64::from(rng.random_range(0..3u8)) * 0.45).collect();
    let weights: Vec<Vec<f64>> =
        lens.iter().map(|&n| (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { rng.random_range(1.0..2.7) }).collect()).collect();
    let adv = advantages(&rewards, 1e-6);
    let want_adv = super::advantages(&rewards);
    let mut dev = max_abs_diff(&adv.values, &want_adv);
    let cfg = ObjectiveConfig::default();
    let wmap = TokenWeightMap { weights: weights.clone(), ..TokenWeightMap::ones(&lens) };
    let appo = appo_loss(&new, &old, &adv, &wmap, &cfg).map_err(|e| e.to_string())?.loss;
    let dapo = dapo_loss(&new, &old, &adv, &cfg).map_err(|e| e.to_string())?.loss;
    let grpo = grpo_loss(&new, &old, &refs, &adv, &cfg).map_err(|e| e.to_string())?.loss;
    let av = &adv.values;
    dev = dev.max((appo - token_level_loss(&new, &old, av, Some(&weights), 0.2, 0.28)).abs());
    dev = dev.max((dapo - token_level_loss(&new, &old, av, None, 0.2, 0.28)).abs());
    dev = dev.max((grpo - super::grpo_loss(&new, &old, &refs, av, 0.2, 0.28, 0.01)).abs());
    Ok(dev)
}

/// Teacher-forced log-probs, distributions and cross-attention of a random
/// tiny model against the nested-loop forward pass.
pub fn forward_case<R: Rng>(rng: &mut R) -> Outcome {
    let cfg = tiny_model_config(rng);
    let params = init_params(&cfg, rng.random()).map_err(|e| e.to_string())?;
    let prompt = random_prompt(rng, &cfg);
    let n = rng.random_range(1..=cfg.max_response_len);
    let tokens: Vec<u32> = (0..n).map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect();
    let tf = TeacherForced::new(&params, &prompt, &tokens, false).map_err(|e| e.to_string())?;
    let want = super::forward(&params, &prompt, &tokens);
    let mut dev = max_abs_diff(&tf.logprobs(), &want.logprobs);
    for (d, w) in tf.distributions().iter().zip(&want.distributions) {
        dev = dev.max(max_abs_diff(&d.probs, w));
    }
    let att = tf.attention();
    if att.layers.len() != want.attention.len() {
        return Err("attention depth differs".into());
    }
    for (l, w) in att.layers.iter().zip(&want.attention) {
        dev = dev.max(max_abs_diff(l.iter().flatten(), w.iter().flatten()));
    }
    Ok(dev)
}

pub fn random_prompt<R: Rng>(rng: &mut R, cfg: &ModelConfig) -> Prompt {
    let q = rng.random_range(1..=cfg.max_question_len);
    let question = (0..q).map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect();
    let v = rng.random_range(1..=6);
    let visual = Array2::from_shape_fn((v, cfg.visual_dim), |_| rng.random_range(-2.0..2.0));
    Prompt { question, visual }
}

/// Analytic gradient against central differences on every parameter.
/// Returns the largest relative error over entries with `|g| > 1e-8`.
pub fn gradient_case<R: Rng>(rng: &mut R, algorithm: Algorithm) -> Outcome {
    let cfg = tiny_model_config(rng);
    let mut params = init_params(&cfg, rng.random()).map_err(|e| e.to_string())?;
    let problem = LossProblem::random(rng, &params, algorithm).map_err(|e| e.to_string())?;
    let (_, grads) = problem.loss_and_grad(&params).map_err(|e| e.to_string())?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for idx in 0..params.num_params() {
        let g = grads.get_flat(idx);
        let x = params.get_flat(idx);
        params.set_flat(idx, x + h);
        let up = problem.loss(&params).map_err(|e| e.to_string())?;
        params.set_flat(idx, x - h);
        let down = problem.loss(&params).map_err(|e| e.to_string())?;
        params.set_flat(idx, x);
        let fd = (up - down) / (2.0 * h);
        if g.abs() <= 1e-8 {
            continue;
        }
        let rel = (g - fd).abs() / g.abs().max(fd.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Number of tokens whose ratio lies outside the clip range in `problem`.
pub fn clipped_tokens(problem: &LossProblem, params: &appo_core::policy::PolicyParams) -> usize {
    let lo = 1.0 - problem.cfg.clip_low;
    let hi = 1.0 + problem.cfg.clip_high;
    problem
        .tokens
        .iter()
        .zip(&problem.old)
        .map(|(t, old)| {
            let tf = TeacherForced::new(params, &problem.prompt, t, false).unwrap();
            tf.logprobs().iter().zip(old).filter(|(n, o)| {
                let r = (*n - *o).exp();
                r < lo || r > hi
            }).count()
        })
        .sum()
}

pub fn adv(values: Vec<f64>) -> AdvantageVector {
    AdvantageVector { values, mean_reward: 0.0, std_reward: 1.0 }
}
