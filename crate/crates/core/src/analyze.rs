//! Offline inspection of a rollout trace: the full selection and
//! re-weighting pipeline, step by step, for every group.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::frame_select::{select_frames, select_target_frames, FrameSet, RewardSplit, Strategy};
use crate::reweight::{reweight, PerceptionGroup, SlotDivergence};
use crate::trace::{read_trace, RolloutGroup};
use crate::train::RunConfig;

pub const REPORT_SCHEMA: &str = "appo-analysis/1";
pub const HISTOGRAM_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyTargets {
    pub hard: FrameSet,
    pub soft: FrameSet,
    pub all: FrameSet,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightHistogram {
    /// `bins + 1` edges spanning `[1, 1 + alpha]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl WeightHistogram {
    pub fn build(weights: impl Iterator<Item = f64>, alpha: f64, bins: usize) -> Self {
        let bins = if alpha > 0.0 { bins.max(1) } else { 1 };
        let edges = (0..=bins).map(|b| 1.0 + alpha * b as f64 / bins as f64).collect();
        let mut counts = vec![0; bins];
        for w in weights {
            let pos = if alpha > 0.0 { ((w - 1.0) / alpha * bins as f64).floor() } else { 0.0 };
            counts[(pos.max(0.0) as usize).min(bins - 1)] += 1;
        }
        Self { edges, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupReport {
    pub group: usize,
    pub splitting_rewards: Vec<f64>,
    pub split: RewardSplit,
    pub focused_frames: Vec<FrameSet>,
    pub psi_high: FrameSet,
    pub psi_low: FrameSet,
    pub targets: StrategyTargets,
    /// Target frames under the configured strategy, which drive the rest.
    pub selected: FrameSet,
    pub perception_groups: Vec<PerceptionGroup>,
    pub raw_divergence: SlotDivergence,
    pub normalized_divergence: SlotDivergence,
    pub weights: Vec<Vec<f64>>,
    pub histogram: WeightHistogram,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisSettings {
    pub tau: f64,
    pub k1: usize,
    pub k2: usize,
    pub k3: usize,
    pub alpha: f64,
    pub strategy: Strategy,
    pub attention_layers: usize,
    pub split_source: String,
    pub slot_reduction: String,
    pub weight_averaging: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub schema: &'static str,
    pub settings: AnalysisSettings,
    pub groups: Vec<GroupReport>,
    pub histogram: WeightHistogram,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Numeric(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }
}

pub fn analyze_group(index: usize, group: &RolloutGroup, cfg: &RunConfig) -> Result<GroupReport> {
    let splitting_rewards: Vec<f64> = group.rewards.iter().map(|r| cfg.split_source.pick(r)).collect();
    let captures: Vec<_> = group.responses.iter().map(|r| &r.attention).collect();
    let selection = select_frames(&group.layout, &captures, &splitting_rewards, &cfg.selection())?;
    let targets = &selection.targets;
    let (high, low) = (&targets.high_frames, &targets.low_frames);
    let per = |s: Strategy| select_target_frames(high, low, s).frames;
    let rw = reweight(&group.responses, targets, &selection.frame_attention, &cfg.reweighting())?;
    Ok(GroupReport {
        group: index,
        splitting_rewards,
        split: selection.split.clone(),
        focused_frames: selection.focused.clone(),
        psi_high: high.clone(),
        psi_low: low.clone(),
        targets: StrategyTargets { hard: per(Strategy::Hard), soft: per(Strategy::Soft), all: per(Strategy::All) },
        selected: targets.frames.clone(),
        perception_groups: rw.groups.groups,
        raw_divergence: rw.raw,
        normalized_divergence: rw.normalized,
        histogram: WeightHistogram::build(rw.weights.iter(), cfg.alpha, HISTOGRAM_BINS),
        weights: rw.weights.weights,
    })
}

pub fn analyze(groups: &[RolloutGroup], cfg: &RunConfig) -> Result<Report> {
    let reports = groups
        .iter()
        .enumerate()
        .map(|(i, g)| analyze_group(i, g, cfg))
        .collect::<Result<Vec<_>>>()?;
    let histogram =
        WeightHistogram::build(reports.iter().flat_map(|r| r.weights.iter().flatten().copied()), cfg.alpha, HISTOGRAM_BINS);
    Ok(Report {
        schema: REPORT_SCHEMA,
        settings: AnalysisSettings {
            tau: cfg.tau,
            k1: cfg.k1,
            k2: cfg.k2,
            k3: cfg.k3,
            alpha: cfg.alpha,
            strategy: cfg.strategy,
            attention_layers: cfg.attention_layers,
            split_source: cfg.split_source.to_string(),
            slot_reduction: cfg.slot_reduction.to_string(),
            weight_averaging: cfg.weight_averaging.to_string(),
        },
        groups: reports,
        histogram,
    })
}

pub fn analyze_file(path: &Path, cfg: &RunConfig) -> Result<Report> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let groups = read_trace(std::io::BufReader::new(file))?;
    analyze(&groups, cfg)
}
