//! Intra-group perception token re-weighting.
//!
//! For every target frame, each response contributes its `k3` tokens with the
//! highest attention to that frame, ranked by attention. The `j`-th ranked
//! token of every response forms slot `j`. Slots are scored by how far the
//! responses' token distributions spread around their mean (a sum of KL
//! divergences), min-max normalized within the frame's group, and averaged
//! per token into a weight `1 + alpha * intensity`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame_select::{top_k_indices, FrameAttentionMatrix, TargetFrames};
use crate::trace::{Response, TokenDistribution};

pub const KL_EPS: f64 = 1e-12;

/// Toggles used by the self-test to prove its suites catch real defects.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Faults {
    /// Divide by `max - min` even when it is zero.
    pub minmax_divide_degenerate: bool,
    /// Flip the sign of every KL value.
    pub kl_negate: bool,
}

impl Faults {
    pub const NONE: Faults = Faults { minmax_divide_degenerate: false, kl_negate: false };
}

/// `sum_v p_v ln((p_v + eps) / (q_v + eps))`, clamped at zero.
pub fn kl_divergence(p: &TokenDistribution, q: &TokenDistribution, eps: f64) -> Result<f64> {
    kl_divergence_with(p, q, eps, Faults::NONE)
}

#[doc(hidden)]
pub fn kl_divergence_with(p: &TokenDistribution, q: &TokenDistribution, eps: f64, faults: Faults) -> Result<f64> {
    if p.vocab_size() != q.vocab_size() {
        return Err(Error::Shape(format!(
            "KL between distributions of size {} and {}",
            p.vocab_size(),
            q.vocab_size()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::Param(format!("KL smoothing must be positive, got {eps}")));
    }
    let kl: f64 = p
        .probs
        .iter()
        .zip(&q.probs)
        .map(|(&pv, &qv)| if pv == 0.0 { 0.0 } else { pv * ((pv + eps) / (qv + eps)).ln() })
        .sum();
    let kl = kl.max(0.0);
    Ok(if faults.kl_negate { -kl } else { kl })
}

/// Tokens of each response that attend most to one target frame.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerceptionGroup {
    pub frame_index: usize,
    /// `slots[i]` lists response `i`'s positions, most attending first.
    pub slots: Vec<Vec<usize>>,
}

impl PerceptionGroup {
    /// Number of responses that hold slot `j`.
    pub fn contributors(&self, j: usize) -> usize {
        self.slots.iter().filter(|s| s.len() > j).count()
    }

    pub fn max_slots(&self) -> usize {
        self.slots.iter().map(Vec::len).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct PerceptionGroups {
    pub groups: Vec<PerceptionGroup>,
}

impl PerceptionGroups {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

/// Builds one group per target frame from each response's top-`k3` tokens.
pub fn build_perception_groups(
    targets: &TargetFrames,
    frame_attn: &[FrameAttentionMatrix],
    k3: usize,
) -> Result<PerceptionGroups> {
    let k3 = k3.max(1);
    let mut groups = Vec::with_capacity(targets.frames.len());
    for &frame in &targets.frames {
        let mut slots = Vec::with_capacity(frame_attn.len());
        for (i, fa) in frame_attn.iter().enumerate() {
            if frame >= fa.num_frames {
                return Err(Error::Shape(format!(
                    "target frame {frame} out of range for response {i} with {} frames",
                    fa.num_frames
                )));
            }
            let column: Vec<f64> = fa.column(frame).collect();
            slots.push(top_k_indices(&column, k3));
        }
        groups.push(PerceptionGroup { frame_index: frame, slots });
    }
    Ok(PerceptionGroups { groups })
}

/// How slot divergence is attributed to the tokens in a slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotReduction {
    /// Every token in slot `j` shares `sum_i KL(p_ij || mean_j)`.
    #[default]
    PerSlot,
    /// Token `(i, j)` gets its own `KL(p_ij || mean_j)`.
    PerToken,
}

impl fmt::Display for SlotReduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SlotReduction::PerSlot => "per_slot",
            SlotReduction::PerToken => "per_token",
        })
    }
}

impl FromStr for SlotReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "per_slot" => Ok(SlotReduction::PerSlot),
            "per_token" => Ok(SlotReduction::PerToken),
            other => Err(Error::Config(format!("unknown slot reduction {other:?}"))),
        }
    }
}

/// Divergence values for one perception group, laid out like its slots:
/// `values[i][j]` belongs to the token in response `i`, slot `j`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupDivergence {
    pub frame_index: usize,
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct SlotDivergence {
    pub groups: Vec<GroupDivergence>,
}

/// Raw slot divergences. Slot `j` is compared across the responses that hold
/// it; a slot held by fewer than two responses scores zero.
pub fn group_divergence(
    groups: &PerceptionGroups,
    responses: &[Response],
    reduction: SlotReduction,
) -> Result<SlotDivergence> {
    group_divergence_with(groups, responses, reduction, Faults::NONE)
}

#[doc(hidden)]
pub fn group_divergence_with(
    groups: &PerceptionGroups,
    responses: &[Response],
    reduction: SlotReduction,
    faults: Faults,
) -> Result<SlotDivergence> {
    let mut out = Vec::with_capacity(groups.len());
    for group in &groups.groups {
        if group.slots.len() != responses.len() {
            return Err(Error::Shape(format!(
                "perception group has {} responses, rollout has {}",
                group.slots.len(),
                responses.len()
            )));
        }
        let mut values: Vec<Vec<f64>> = group.slots.iter().map(|s| vec![0.0; s.len()]).collect();
        for j in 0..group.max_slots() {
            let members: Vec<(usize, &TokenDistribution)> = group
                .slots
                .iter()
                .enumerate()
                .filter_map(|(i, s)| {
                    s.get(j).map(|&pos| responses[i].distributions.get(pos).map(|d| (i, d)))
                })
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| Error::Shape("slot position beyond response length".into()))?;
            if members.len() < 2 {
                continue;
            }
            let mean = mean_distribution(members.iter().map(|(_, d)| *d))?;
            let kls = members
                .iter()
                .map(|(_, d)| kl_divergence_with(d, &mean, KL_EPS, faults))
                .collect::<Result<Vec<_>>>()?;
            match reduction {
                SlotReduction::PerSlot => {
                    let total: f64 = kls.iter().sum();
                    for (i, _) in &members {
                        values[*i][j] = total;
                    }
                }
                SlotReduction::PerToken => {
                    for ((i, _), kl) in members.iter().zip(kls) {
                        values[*i][j] = kl;
                    }
                }
            }
        }
        out.push(GroupDivergence { frame_index: group.frame_index, values });
    }
    Ok(SlotDivergence { groups: out })
}

fn mean_distribution<'a>(dists: impl Iterator<Item = &'a TokenDistribution>) -> Result<TokenDistribution> {
    let mut acc: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for d in dists {
        if n == 0 {
            acc = d.probs.clone();
        } else {
            if d.vocab_size() != acc.len() {
                return Err(Error::Shape("slot distributions differ in vocabulary size".into()));
            }
            for (a, p) in acc.iter_mut().zip(&d.probs) {
                *a += p;
            }
        }
        n += 1;
    }
    let n = n as f64;
    Ok(TokenDistribution::new(acc.into_iter().map(|a| a / n).collect()))
}

/// Per-group min-max scaling to `[0, 1]`. A group whose values are all equal
/// maps to zeros.
pub fn minmax_normalize(raw: &SlotDivergence) -> SlotDivergence {
    minmax_normalize_with(raw, Faults::NONE)
}

#[doc(hidden)]
pub fn minmax_normalize_with(raw: &SlotDivergence, faults: Faults) -> SlotDivergence {
    let groups = raw
        .groups
        .iter()
        .map(|g| {
            let all = g.values.iter().flatten().copied();
            let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            let degenerate = !(hi > lo);
            let values = g
                .values
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|&v| {
                            if degenerate && !faults.minmax_divide_degenerate {
                                0.0
                            } else {
                                (v - lo) / (hi - lo)
                            }
                        })
                        .collect()
                })
                .collect();
            GroupDivergence { frame_index: g.frame_index, values }
        })
        .collect();
    SlotDivergence { groups }
}

/// How a token that sits in several groups combines its intensities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightAveraging {
    /// Divide the cumulative intensity by the number of memberships.
    #[default]
    Membership,
    /// Divide by the total number of groups `K`.
    #[serde(rename = "literal_1_over_k")]
    Literal1OverK,
}

impl fmt::Display for WeightAveraging {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightAveraging::Membership => "membership",
            WeightAveraging::Literal1OverK => "literal_1_over_k",
        })
    }
}

impl FromStr for WeightAveraging {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").to_ascii_lowercase().as_str() {
            "membership" => Ok(WeightAveraging::Membership),
            "literal_1_over_k" => Ok(WeightAveraging::Literal1OverK),
            other => Err(Error::Config(format!("unknown weight averaging {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenWeightMap {
    pub weights: Vec<Vec<f64>>,
    pub membership_count: Vec<Vec<u32>>,
    pub cumulative_intensity: Vec<Vec<f64>>,
}

impl TokenWeightMap {
    /// All-ones weights for responses of the given lengths.
    pub fn ones(lengths: &[usize]) -> Self {
        Self {
            weights: lengths.iter().map(|&n| vec![1.0; n]).collect(),
            membership_count: lengths.iter().map(|&n| vec![0; n]).collect(),
            cumulative_intensity: lengths.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.weights.iter().map(Vec::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights.iter().flatten().copied()
    }
}

/// Accumulates normalized intensities over groups and slots (ascending
/// `(k, j)` order) into per-token weights in `[1, 1 + alpha]`.
pub fn token_weights(
    groups: &PerceptionGroups,
    normalized: &SlotDivergence,
    alpha: f64,
    lengths: &[usize],
    averaging: WeightAveraging,
) -> Result<TokenWeightMap> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::Param(format!("alpha must be finite and non-negative, got {alpha}")));
    }
    if groups.len() != normalized.groups.len() {
        return Err(Error::Shape("divergence does not match perception groups".into()));
    }
    let mut map = TokenWeightMap::ones(lengths);
    for (group, div) in groups.groups.iter().zip(&normalized.groups) {
        if group.slots.len() != lengths.len() || div.values.len() != lengths.len() {
            return Err(Error::Shape("perception group does not match response count".into()));
        }
        for j in 0..group.max_slots() {
            for (i, slots) in group.slots.iter().enumerate() {
                let Some(&pos) = slots.get(j) else { continue };
                let value = div
                    .values
                    .get(i)
                    .and_then(|row| row.get(j))
                    .ok_or_else(|| Error::Shape("divergence missing a slot".into()))?;
                if pos >= lengths[i] {
                    return Err(Error::Shape(format!("slot position {pos} beyond response {i}")));
                }
                map.cumulative_intensity[i][pos] += value;
                map.membership_count[i][pos] += 1;
            }
        }
    }
    let k = groups.len() as f64;
    for i in 0..lengths.len() {
        for t in 0..lengths[i] {
            let count = map.membership_count[i][t];
            if count == 0 {
                continue;
            }
            let denom = match averaging {
                WeightAveraging::Membership => f64::from(count),
                WeightAveraging::Literal1OverK => k,
            };
            map.weights[i][t] = 1.0 + alpha * (map.cumulative_intensity[i][t] / denom);
        }
    }
    Ok(map)
}

/// Knobs for the re-weighting pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReweightConfig {
    pub k3: usize,
    pub alpha: f64,
    pub reduction: SlotReduction,
    pub averaging: WeightAveraging,
}

impl Default for ReweightConfig {
    fn default() -> Self {
        Self {
            k3: 64,
            alpha: 1.7,
            reduction: SlotReduction::PerSlot,
            averaging: WeightAveraging::Membership,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Reweighting {
    pub groups: PerceptionGroups,
    pub raw: SlotDivergence,
    pub normalized: SlotDivergence,
    pub weights: TokenWeightMap,
}

/// Groups, divergence, normalization and weights for one rollout group.
pub fn reweight(
    responses: &[Response],
    targets: &TargetFrames,
    frame_attn: &[FrameAttentionMatrix],
    cfg: &ReweightConfig,
) -> Result<Reweighting> {
    reweight_with(responses, targets, frame_attn, cfg, Faults::NONE)
}

#[doc(hidden)]
pub fn reweight_with(
    responses: &[Response],
    targets: &TargetFrames,
    frame_attn: &[FrameAttentionMatrix],
    cfg: &ReweightConfig,
    faults: Faults,
) -> Result<Reweighting> {
    let groups = build_perception_groups(targets, frame_attn, cfg.k3)?;
    let raw = group_divergence_with(&groups, responses, cfg.reduction, faults)?;
    let normalized = minmax_normalize_with(&raw, faults);
    let lengths: Vec<usize> = responses.iter().map(Response::len).collect();
    let weights = token_weights(&groups, &normalized, cfg.alpha, &lengths, cfg.averaging)?;
    Ok(Reweighting { groups, raw, normalized, weights })
}
