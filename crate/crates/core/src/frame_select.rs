//! Attention-guided frame selection.
//!
//! Responses are split by reward into a high set and a low set. For every
//! response the per-layer cross-attention is pooled into frame attention, the
//! top tokens per frame give a response-to-frame score, and the best-scoring
//! frames form that response's focused set. Unions over each side of the
//! split are then combined by a [`Strategy`] into the target frames.
//!
//! Every top-k here breaks ties by the lowest index.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{AttentionCapture, VisualLayout};

pub type FrameSet = BTreeSet<usize>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RewardSplit {
    pub high_set: Vec<usize>,
    pub low_set: Vec<usize>,
    pub tau: f64,
}

/// Partitions response indices into `r >= tau` and `r < tau`.
pub fn split_by_reward(splitting_rewards: &[f64], tau: f64) -> RewardSplit {
    let (high_set, low_set) = (0..splitting_rewards.len()).partition(|&i| splitting_rewards[i] >= tau);
    RewardSplit { high_set, low_set, tau }
}

/// Frame attention for one response: `values[j][t]` is the mean attention
/// from response token `j` to the tokens of frame `t`, averaged over layers.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameAttentionMatrix {
    pub values: Vec<Vec<f64>>,
    pub num_frames: usize,
}

impl FrameAttentionMatrix {
    pub fn num_tokens(&self) -> usize {
        self.values.len()
    }

    pub fn column(&self, t: usize) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().map(move |row| row[t])
    }
}

/// Pools the last `last_layers` captured layers into per-frame attention.
/// `last_layers` is clamped to the capture depth.
pub fn frame_attention(
    attn: &AttentionCapture,
    layout: &VisualLayout,
    last_layers: usize,
) -> Result<FrameAttentionMatrix> {
    if last_layers == 0 {
        return Err(Error::Param("attention layer count must be at least 1".into()));
    }
    let depth = attn.num_layers();
    if depth == 0 {
        return Err(Error::Shape("attention capture has no layers".into()));
    }
    let used = &attn.layers[depth - last_layers.min(depth)..];
    let rows = used[0].len();
    let width = layout.num_visual_tokens();
    for layer in used {
        if layer.len() != rows {
            return Err(Error::Shape("captured layers disagree on row count".into()));
        }
        if let Some(row) = layer.iter().find(|r| r.len() != width) {
            return Err(Error::Shape(format!(
                "attention width {} does not match layout with {width} visual tokens",
                row.len()
            )));
        }
    }
    let num_frames = layout.num_frames();
    let h = used.len() as f64;
    let values = (0..rows)
        .map(|j| {
            (0..num_frames)
                .map(|t| {
                    let span = layout.frame_tokens(t);
                    let denom = h * span.len() as f64;
                    let total: f64 = used.iter().map(|layer| layer[j][span.clone()].iter().sum::<f64>()).sum();
                    total / denom
                })
                .collect()
        })
        .collect();
    Ok(FrameAttentionMatrix { values, num_frames })
}

/// Indices of the `k` largest values, largest first, ties to the lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k.min(values.len()));
    idx
}

/// Mean of the `k1` highest token attentions to each frame. Responses shorter
/// than `k1` average over all their tokens.
pub fn response_frame_score(fa: &FrameAttentionMatrix, k1: usize) -> Vec<f64> {
    let k1 = k1.max(1);
    (0..fa.num_frames)
        .map(|t| {
            let column: Vec<f64> = fa.column(t).collect();
            let top = top_k_indices(&column, k1);
            if top.is_empty() {
                return 0.0;
            }
            top.iter().map(|&j| column[j]).sum::<f64>() / top.len() as f64
        })
        .collect()
}

/// The `min(k2, T)` frames with the highest scores.
pub fn focused_frames(scores: &[f64], k2: usize) -> FrameSet {
    top_k_indices(scores, k2.max(1)).into_iter().collect()
}

/// Unions of the focused sets over the high and low sides of the split.
pub fn union_focused(split: &RewardSplit, per_response_frames: &[FrameSet]) -> (FrameSet, FrameSet) {
    let union = |set: &[usize]| -> FrameSet {
        set.iter().flat_map(|&i| per_response_frames[i].iter().copied()).collect()
    };
    (union(&split.high_set), union(&split.low_set))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Frames focused by high-reward responses and not by low-reward ones.
    Hard,
    /// Frames focused by high-reward responses.
    #[default]
    Soft,
    /// Frames focused by any response.
    All,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Hard, Strategy::Soft, Strategy::All];
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Hard => "hard",
            Strategy::Soft => "soft",
            Strategy::All => "all",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hard" => Ok(Strategy::Hard),
            "soft" => Ok(Strategy::Soft),
            "all" => Ok(Strategy::All),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TargetFrames {
    pub frames: FrameSet,
    pub strategy: Strategy,
    pub high_frames: FrameSet,
    pub low_frames: FrameSet,
}

impl TargetFrames {
    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

pub fn select_target_frames(high: &FrameSet, low: &FrameSet, strategy: Strategy) -> TargetFrames {
    let frames = match strategy {
        Strategy::Hard => high.difference(low).copied().collect(),
        Strategy::Soft => high.clone(),
        Strategy::All => high.union(low).copied().collect(),
    };
    TargetFrames {
        frames,
        strategy,
        high_frames: high.clone(),
        low_frames: low.clone(),
    }
}

/// Knobs for the whole selection pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionConfig {
    pub tau: f64,
    pub k1: usize,
    pub k2: usize,
    pub attention_layers: usize,
    pub strategy: Strategy,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            k1: 15,
            k2: 5,
            attention_layers: 3,
            strategy: Strategy::Soft,
        }
    }
}

/// Everything the selection pipeline produces for one rollout group.
#[derive(Debug, Clone)]
pub struct FrameSelection {
    pub split: RewardSplit,
    pub frame_attention: Vec<FrameAttentionMatrix>,
    pub focused: Vec<FrameSet>,
    pub targets: TargetFrames,
}

/// Runs split, pooling, scoring, focusing, union and strategy for one group.
pub fn select_frames(
    layout: &VisualLayout,
    attention: &[&AttentionCapture],
    splitting_rewards: &[f64],
    cfg: &SelectionConfig,
) -> Result<FrameSelection> {
    if attention.len() != splitting_rewards.len() {
        return Err(Error::Shape(format!(
            "{} attention captures for {} rewards",
            attention.len(),
            splitting_rewards.len()
        )));
    }
    let split = split_by_reward(splitting_rewards, cfg.tau);
    let frame_attention = attention
        .iter()
        .map(|a| frame_attention(a, layout, cfg.attention_layers))
        .collect::<Result<Vec<_>>>()?;
    let focused: Vec<FrameSet> = frame_attention
        .iter()
        .map(|fa| focused_frames(&response_frame_score(fa, cfg.k1), cfg.k2))
        .collect();
    let (high, low) = union_focused(&split, &focused);
    let targets = select_target_frames(&high, &low, cfg.strategy);
    Ok(FrameSelection { split, frame_attention, focused, targets })
}
