//! Group-relative advantages and the GRPO, DAPO and APPO surrogate losses.
//!
//! Every loss is returned as a minimization target together with its exact
//! gradient with respect to the current policy's per-token log-probabilities.
//! Old log-probabilities, advantages and token weights are constants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reweight::TokenWeightMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Grpo,
    Dapo,
    #[default]
    Appo,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Grpo => "grpo",
            Algorithm::Dapo => "dapo",
            Algorithm::Appo => "appo",
        })
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "grpo" => Ok(Algorithm::Grpo),
            "dapo" => Ok(Algorithm::Dapo),
            "appo" => Ok(Algorithm::Appo),
            other => Err(Error::Config(format!("unknown algorithm {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub algorithm: Algorithm,
    pub clip_low: f64,
    pub clip_high: f64,
    /// KL penalty coefficient; only GRPO uses it.
    pub kl_coeff: f64,
    pub sigma_eps: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Appo,
            clip_low: 0.2,
            clip_high: 0.28,
            kl_coeff: 0.01,
            sigma_eps: 1e-6,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.clip_low && self.clip_low <= self.clip_high && self.clip_high < 1.0) {
            return Err(Error::Config(format!(
                "clip bounds must satisfy 0 < low <= high < 1, got {} and {}",
                self.clip_low, self.clip_high
            )));
        }
        if !(self.kl_coeff >= 0.0) || !self.kl_coeff.is_finite() {
            return Err(Error::Config(format!("kl coefficient must be >= 0, got {}", self.kl_coeff)));
        }
        if !(self.sigma_eps > 0.0) {
            return Err(Error::Config(format!("sigma_eps must be > 0, got {}", self.sigma_eps)));
        }
        Ok(())
    }

    fn clip(&self, r: f64) -> f64 {
        r.clamp(1.0 - self.clip_low, 1.0 + self.clip_high)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdvantageVector {
    pub values: Vec<f64>,
    pub mean_reward: f64,
    pub std_reward: f64,
}

/// Standardizes rewards within the group using the population standard
/// deviation. Groups with `std < sigma_eps` get all-zero advantages.
pub fn advantages(rewards: &[f64], sigma_eps: f64) -> AdvantageVector {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let values = if std < sigma_eps {
        vec![0.0; rewards.len()]
    } else {
        rewards.iter().map(|r| (r - mean) / std).collect()
    };
    AdvantageVector { values, mean_reward: mean, std_reward: std }
}

/// Importance ratios `exp(new - old)`.
pub fn ratios(new_logprobs: &[f64], old_logprobs: &[f64]) -> Result<Vec<f64>> {
    if new_logprobs.len() != old_logprobs.len() {
        return Err(Error::Shape(format!(
            "{} new log-probs against {} old",
            new_logprobs.len(),
            old_logprobs.len()
        )));
    }
    new_logprobs
        .iter()
        .zip(old_logprobs)
        .map(|(&n, &o)| {
            if !n.is_finite() || !o.is_finite() {
                return Err(Error::Numeric(format!("non-finite log-prob pair ({n}, {o})")));
            }
            Ok((n - o).exp())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub loss: f64,
    /// Contribution of each token to the objective, already scaled by the
    /// algorithm's normalization, so the terms sum to `-loss`.
    pub per_token_terms: Vec<Vec<f64>>,
    /// `d loss / d new_logprob` per token.
    pub grad_logprobs: Vec<Vec<f64>>,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
}

struct Surrogate {
    term: f64,
    grad: f64,
    clipped: bool,
}

/// `min(r w A, clip(r) w A)` and its derivative with respect to `ln r`.
fn surrogate(r: f64, w: f64, a: f64, cfg: &ObjectiveConfig) -> Surrogate {
    let unclipped = r * w * a;
    let clipped = cfg.clip(r) * w * a;
    if unclipped <= clipped {
        Surrogate { term: unclipped, grad: unclipped, clipped: false }
    } else {
        Surrogate { term: clipped, grad: 0.0, clipped: true }
    }
}

fn check_shapes(new: &[Vec<f64>], old: &[Vec<f64>], adv: &AdvantageVector) -> Result<()> {
    if new.len() != old.len() || new.len() != adv.values.len() {
        return Err(Error::Shape(format!(
            "{} new, {} old log-prob sequences and {} advantages",
            new.len(),
            old.len(),
            adv.values.len()
        )));
    }
    if new.iter().any(Vec::is_empty) {
        return Err(Error::Shape("empty response".into()));
    }
    Ok(())
}

/// Clipped surrogate averaged per response, then over responses, minus a
/// KL penalty against the reference policy.
pub fn grpo_loss(
    new_logprobs: &[Vec<f64>],
    old_logprobs: &[Vec<f64>],
    ref_logprobs: &[Vec<f64>],
    adv: &AdvantageVector,
    cfg: &ObjectiveConfig,
) -> Result<LossReport> {
    check_shapes(new_logprobs, old_logprobs, adv)?;
    if ref_logprobs.len() != new_logprobs.len() {
        return Err(Error::Shape("reference log-probs do not match responses".into()));
    }
    let g = new_logprobs.len() as f64;
    let beta = cfg.kl_coeff;
    let mut acc = Accumulator::default();
    for (i, (new, old)) in new_logprobs.iter().zip(old_logprobs).enumerate() {
        let refs = &ref_logprobs[i];
        if refs.len() != new.len() {
            return Err(Error::Shape(format!("reference log-probs of response {i} have wrong length")));
        }
        let r = ratios(new, old)?;
        let coef = 1.0 / (g * new.len() as f64);
        let mut terms = Vec::with_capacity(new.len());
        let mut grads = Vec::with_capacity(new.len());
        for t in 0..new.len() {
            let s = surrogate(r[t], 1.0, adv.values[i], cfg);
            let delta = refs[t] - new[t];
            let kl = delta.exp() - delta - 1.0;
            let dkl = 1.0 - delta.exp();
            terms.push(coef * (s.term - beta * kl));
            grads.push(-coef * (s.grad - beta * dkl));
            acc.token(r[t], s.clipped);
        }
        acc.push(terms, grads);
    }
    acc.finish()
}

/// Token-normalized clipped surrogate without a KL term.
pub fn dapo_loss(
    new_logprobs: &[Vec<f64>],
    old_logprobs: &[Vec<f64>],
    adv: &AdvantageVector,
    cfg: &ObjectiveConfig,
) -> Result<LossReport> {
    token_normalized(new_logprobs, old_logprobs, adv, None, cfg)
}

/// Token-normalized clipped surrogate with per-token weights multiplying the
/// advantage.
pub fn appo_loss(
    new_logprobs: &[Vec<f64>],
    old_logprobs: &[Vec<f64>],
    adv: &AdvantageVector,
    weights: &TokenWeightMap,
    cfg: &ObjectiveConfig,
) -> Result<LossReport> {
    if weights.weights.len() != new_logprobs.len()
        || weights.weights.iter().zip(new_logprobs).any(|(w, n)| w.len() != n.len())
    {
        return Err(Error::Shape("token weights do not match responses".into()));
    }
    token_normalized(new_logprobs, old_logprobs, adv, Some(&weights.weights), cfg)
}

fn token_normalized(
    new_logprobs: &[Vec<f64>],
    old_logprobs: &[Vec<f64>],
    adv: &AdvantageVector,
    weights: Option<&[Vec<f64>]>,
    cfg: &ObjectiveConfig,
) -> Result<LossReport> {
    check_shapes(new_logprobs, old_logprobs, adv)?;
    let total: usize = new_logprobs.iter().map(Vec::len).sum();
    let n = total as f64;
    let mut acc = Accumulator::default();
    for (i, (new, old)) in new_logprobs.iter().zip(old_logprobs).enumerate() {
        let r = ratios(new, old)?;
        let mut terms = Vec::with_capacity(new.len());
        let mut grads = Vec::with_capacity(new.len());
        for t in 0..new.len() {
            let w = weights.map_or(1.0, |w| w[i][t]);
            let s = surrogate(r[t], w, adv.values[i], cfg);
            terms.push(s.term / n);
            grads.push(-s.grad / n);
            acc.token(r[t], s.clipped);
        }
        acc.push(terms, grads);
    }
    acc.finish()
}

/// Dispatches on `cfg.algorithm`. `weights` is required for APPO and
/// `ref_logprobs` for GRPO.
pub fn loss_for(
    new_logprobs: &[Vec<f64>],
    old_logprobs: &[Vec<f64>],
    ref_logprobs: Option<&[Vec<f64>]>,
    adv: &AdvantageVector,
    weights: Option<&TokenWeightMap>,
    cfg: &ObjectiveConfig,
) -> Result<LossReport> {
    match cfg.algorithm {
        Algorithm::Grpo => {
            let refs = ref_logprobs.ok_or_else(|| Error::Param("GRPO needs reference log-probs".into()))?;
            grpo_loss(new_logprobs, old_logprobs, refs, adv, cfg)
        }
        Algorithm::Dapo => dapo_loss(new_logprobs, old_logprobs, adv, cfg),
        Algorithm::Appo => {
            let w = weights.ok_or_else(|| Error::Param("APPO needs token weights".into()))?;
            appo_loss(new_logprobs, old_logprobs, adv, w, cfg)
        }
    }
}

#[derive(Default)]
struct Accumulator {
    terms: Vec<Vec<f64>>,
    grads: Vec<Vec<f64>>,
    tokens: usize,
    clipped: usize,
    ratio_sum: f64,
}

impl Accumulator {
    fn token(&mut self, r: f64, clipped: bool) {
        self.tokens += 1;
        self.clipped += usize::from(clipped);
        self.ratio_sum += r;
    }

    fn push(&mut self, terms: Vec<f64>, grads: Vec<f64>) {
        self.terms.push(terms);
        self.grads.push(grads);
    }

    fn finish(self) -> Result<LossReport> {
        let objective: f64 = self.terms.iter().map(|t| t.iter().sum::<f64>()).sum();
        let loss = -objective;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss is {loss}")));
        }
        let n = self.tokens as f64;
        Ok(LossReport {
            loss,
            per_token_terms: self.terms,
            grad_logprobs: self.grads,
            clip_fraction: self.clipped as f64 / n,
            mean_ratio: self.ratio_sum / n,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ObjectiveConfig {
        ObjectiveConfig { kl_coeff: 0.0, ..ObjectiveConfig::default() }
    }

    fn adv(values: Vec<f64>) -> AdvantageVector {
        AdvantageVector { values, mean_reward: 0.0, std_reward: 1.0 }
    }

    #[test]
    fn advantage_examples() {
        let a = advantages(&[1.0, 0.0], 1e-6);
        assert_eq!((a.mean_reward, a.std_reward), (0.5, 0.5));
        assert_eq!(a.values, vec![1.0, -1.0]);

        let a = advantages(&[0.3; 4], 1e-6);
        assert_eq!(a.values, vec![0.0; 4]);

        let a = advantages(&[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 1e-6);
        let std = 0.1875f64.sqrt();
        assert!((a.std_reward - std).abs() < 1e-15);
        for (i, v) in a.values.iter().enumerate() {
            let expected = if i < 2 { 0.75 / std } else { -0.25 / std };
            assert!((v - expected).abs() < 1e-12);
        }
        assert!((a.values[0] - 1.7321).abs() < 1e-4);
        assert!((a.values[7] + 0.5774).abs() < 1e-4);
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(ratios(&[-1.0, -2.0], &[-1.0, -2.0]).unwrap(), vec![1.0, 1.0]);
        let r = ratios(&[-1.0 + 2f64.ln()], &[-1.0]).unwrap();
        assert!((r[0] - 2.0).abs() < 1e-12);
        assert!(matches!(ratios(&[f64::NAN], &[0.0]), Err(Error::Numeric(_))));
        assert!(matches!(ratios(&[0.0], &[0.0, 1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn grpo_examples() {
        let lp = vec![vec![-1.0, -1.0], vec![-0.5]];
        let rep = grpo_loss(&lp, &lp, &lp, &adv(vec![1.0, 1.0]), &cfg()).unwrap();
        assert_eq!(rep.loss, -1.0);
        assert_eq!(rep.clip_fraction, 0.0);

        let rep = grpo_loss(&lp, &lp, &lp, &adv(vec![0.0, 0.0]), &cfg()).unwrap();
        assert_eq!(rep.loss, 0.0);

        let new = vec![vec![1.5f64.ln()], vec![0.0]];
        let old = vec![vec![0.0], vec![0.0]];
        let rep = grpo_loss(&new, &old, &old, &adv(vec![1.0, 0.0]), &cfg()).unwrap();
        assert!((rep.per_token_terms[0][0] * 2.0 - 1.28).abs() < 1e-12);
        assert_eq!(rep.clip_fraction, 0.5);
    }

    #[test]
    fn grpo_kl_penalty_is_nonnegative() {
        let new = vec![vec![-1.0], vec![-2.0]];
        let refs = vec![vec![-1.3], vec![-1.5]];
        let c = ObjectiveConfig { kl_coeff: 0.5, ..cfg() };
        let with = grpo_loss(&new, &new, &refs, &adv(vec![0.0, 0.0]), &c).unwrap();
        assert!(with.loss > 0.0);
    }

    #[test]
    fn dapo_examples() {
        let lp = vec![vec![0.0], vec![0.0; 3]];
        let rep = dapo_loss(&lp, &lp, &adv(vec![1.0, -1.0]), &cfg()).unwrap();
        assert_eq!(rep.loss, 0.5);

        let new = vec![vec![0.7f64.ln()], vec![0.0]];
        let old = vec![vec![0.0], vec![0.0]];
        let rep = dapo_loss(&new, &old, &adv(vec![-1.0, 0.0]), &cfg()).unwrap();
        assert!((rep.per_token_terms[0][0] * 2.0 + 0.8).abs() < 1e-12);
        assert_eq!(rep.grad_logprobs[0][0], 0.0);
    }

    #[test]
    fn dapo_matches_grpo_on_uniform_lengths() {
        let new = vec![vec![-0.1, -0.4], vec![-0.9, -0.2], vec![-0.3, -0.3]];
        let old = vec![vec![-0.2, -0.3], vec![-0.7, -0.25], vec![-0.3, -0.5]];
        let a = advantages(&[1.0, 0.1, 0.0], 1e-6);
        let d = dapo_loss(&new, &old, &a, &cfg()).unwrap();
        let g = grpo_loss(&new, &old, &new, &a, &cfg()).unwrap();
        assert!((d.loss - g.loss).abs() < 1e-15);
    }

    #[test]
    fn appo_examples() {
        let lp = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
        let mut w = TokenWeightMap::ones(&[2, 2]);
        w.weights[0] = vec![1.0, 2.0];
        let rep = appo_loss(&lp, &lp, &adv(vec![1.0, 0.0]), &w, &cfg()).unwrap();
        // Response 0 alone contributes (1 + 2) over 4 tokens.
        assert_eq!(rep.loss, -0.75);

        let single = vec![vec![0.0, 0.0]];
        let mut w = TokenWeightMap::ones(&[2]);
        w.weights[0] = vec![1.0, 2.0];
        let rep = appo_loss(&single, &single, &adv(vec![1.0]), &w, &cfg()).unwrap();
        assert_eq!(rep.loss, -1.5);
    }

    #[test]
    fn appo_with_unit_weights_is_dapo() {
        let new = vec![vec![-0.1, 0.4, -0.3], vec![0.5]];
        let old = vec![vec![0.0, 0.0, 0.1], vec![0.0]];
        let a = adv(vec![0.8, -1.3]);
        let d = dapo_loss(&new, &old, &a, &cfg()).unwrap();
        let p = appo_loss(&new, &old, &a, &TokenWeightMap::ones(&[3, 1]), &cfg()).unwrap();
        assert_eq!(d, p);
    }

    #[test]
    fn config_validation() {
        assert!(ObjectiveConfig::default().validate().is_ok());
        for bad in [
            ObjectiveConfig { clip_low: 0.0, ..cfg() },
            ObjectiveConfig { clip_low: 0.3, clip_high: 0.2, ..cfg() },
            ObjectiveConfig { clip_high: 1.0, ..cfg() },
            ObjectiveConfig { kl_coeff: -0.1, ..cfg() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
