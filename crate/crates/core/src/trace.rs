//! Rollout data model and the line-delimited JSON trace format.
//!
//! A trace is UTF-8 text with one [`RolloutGroup`] per line. Each line is a
//! JSON object whose fields appear in a fixed order:
//!
//! ```text
//! {"version":"appo-trace/1","layout":{...},"responses":[...],"rewards":[...],"task_meta":...}
//! ```
//!
//! Floats are written with the shortest decimal representation that parses
//! back to the same IEEE-754 double, so `read_trace(write_trace(x)) == x`
//! bit for bit.

use std::fmt;
use std::io::{BufRead, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const TRACE_VERSION: &str = "appo-trace/1";

/// Upper bound on vocabulary size accepted in traces.
pub const MAX_VOCAB: usize = 4096;

const PROB_SUM_TOL: f64 = 1e-9;
const LOGPROB_TOL: f64 = 1e-9;
const ATTN_ROW_TOL: f64 = 1e-6;

/// Frame geometry of the visual token sequence. Frames occupy contiguous,
/// non-empty runs of visual tokens in frame order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LayoutRepr", into = "LayoutRepr")]
pub struct VisualLayout {
    tokens_per_frame: Vec<usize>,
    frame_of_token: Vec<usize>,
    offsets: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayoutRepr {
    num_frames: usize,
    tokens_per_frame: Vec<usize>,
}

impl TryFrom<LayoutRepr> for VisualLayout {
    type Error = Error;

    fn try_from(repr: LayoutRepr) -> Result<Self> {
        if repr.num_frames != repr.tokens_per_frame.len() {
            return Err(Error::Shape(format!(
                "num_frames is {} but tokens_per_frame has {} entries",
                repr.num_frames,
                repr.tokens_per_frame.len()
            )));
        }
        VisualLayout::new(repr.tokens_per_frame)
    }
}

impl From<VisualLayout> for LayoutRepr {
    fn from(layout: VisualLayout) -> Self {
        LayoutRepr {
            num_frames: layout.num_frames(),
            tokens_per_frame: layout.tokens_per_frame,
        }
    }
}

/// Refuse layouts whose visual-token count would not fit comfortably in memory.
const MAX_VISUAL_TOKENS: usize = 1 << 20;

impl VisualLayout {
    pub fn new(tokens_per_frame: Vec<usize>) -> Result<Self> {
        if tokens_per_frame.is_empty() {
            return Err(Error::Shape("layout has no frames".into()));
        }
        if let Some(t) = tokens_per_frame.iter().position(|&n| n == 0) {
            return Err(Error::Shape(format!("frame {t} has no visual tokens")));
        }
        let total = tokens_per_frame
            .iter()
            .try_fold(0usize, |acc, &n| acc.checked_add(n))
            .filter(|&v| v <= MAX_VISUAL_TOKENS)
            .ok_or_else(|| Error::Shape("too many visual tokens".into()))?;
        let mut frame_of_token = Vec::with_capacity(total);
        let mut offsets = Vec::with_capacity(tokens_per_frame.len() + 1);
        offsets.push(0);
        for (t, &n) in tokens_per_frame.iter().enumerate() {
            frame_of_token.extend(std::iter::repeat_n(t, n));
            offsets.push(frame_of_token.len());
        }
        Ok(Self {
            tokens_per_frame,
            frame_of_token,
            offsets,
        })
    }

    /// `num_frames` frames of `per_frame` tokens each.
    pub fn uniform(num_frames: usize, per_frame: usize) -> Result<Self> {
        Self::new(vec![per_frame; num_frames])
    }

    pub fn num_frames(&self) -> usize {
        self.tokens_per_frame.len()
    }

    pub fn tokens_per_frame(&self) -> &[usize] {
        &self.tokens_per_frame
    }

    pub fn frame_of_token(&self) -> &[usize] {
        &self.frame_of_token
    }

    pub fn num_visual_tokens(&self) -> usize {
        self.frame_of_token.len()
    }

    /// Visual-token indices belonging to frame `t`.
    pub fn frame_tokens(&self, t: usize) -> Range<usize> {
        self.offsets[t]..self.offsets[t + 1]
    }
}

/// A probability distribution over the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenDistribution {
    pub probs: Vec<f64>,
}

impl TokenDistribution {
    pub fn new(probs: Vec<f64>) -> Self {
        Self { probs }
    }

    pub fn uniform(vocab: usize) -> Self {
        Self::new(vec![1.0 / vocab as f64; vocab])
    }

    pub fn one_hot(vocab: usize, index: usize) -> Self {
        let mut probs = vec![0.0; vocab];
        probs[index] = 1.0;
        Self::new(probs)
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.len()
    }

    pub fn is_valid(&self) -> bool {
        !self.probs.is_empty()
            && self.probs.iter().all(|p| p.is_finite() && *p >= 0.0)
            && (self.probs.iter().sum::<f64>() - 1.0).abs() <= PROB_SUM_TOL
    }
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn token_entropy(d: &TokenDistribution) -> f64 {
    let h: f64 = d
        .probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    h.max(0.0)
}

/// Head-averaged cross-attention from response tokens to visual tokens.
/// `layers[l][j][v]` is the weight from response token `j` to visual token `v`
/// in captured layer `l` (layers ordered from first to last).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttentionCapture {
    pub layers: Vec<Vec<Vec<f64>>>,
}

impl AttentionCapture {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Response {
    pub tokens: Vec<u32>,
    pub old_logprobs: Vec<f64>,
    pub distributions: Vec<TokenDistribution>,
    pub attention: AttentionCapture,
}

impl Response {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Verifiable reward components and their weighted combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardBreakdown {
    pub accuracy: f64,
    pub format: f64,
    pub combined: f64,
}

pub const ACCURACY_WEIGHT: f64 = 0.9;
pub const FORMAT_WEIGHT: f64 = 0.1;

impl RewardBreakdown {
    pub fn new(accurate: bool, well_formed: bool) -> Self {
        let accuracy = if accurate { 1.0 } else { 0.0 };
        let format = if well_formed { 1.0 } else { 0.0 };
        Self {
            accuracy,
            format,
            combined: Self::combine(accuracy, format),
        }
    }

    pub fn combine(accuracy: f64, format: f64) -> f64 {
        ACCURACY_WEIGHT * accuracy + FORMAT_WEIGHT * format
    }
}

/// The G responses sampled for one task instance.
///
/// `task_meta` carries evaluation-only ground truth. Frame selection, token
/// re-weighting and the objectives take layouts, responses and rewards; none
/// of them read it.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub layout: VisualLayout,
    pub responses: Vec<Response>,
    pub rewards: Vec<RewardBreakdown>,
    task_meta: Value,
}

impl RolloutGroup {
    pub fn new(
        layout: VisualLayout,
        responses: Vec<Response>,
        rewards: Vec<RewardBreakdown>,
        task_meta: Value,
    ) -> Self {
        Self {
            layout,
            responses,
            rewards,
            task_meta,
        }
    }

    pub fn group_size(&self) -> usize {
        self.responses.len()
    }

    /// Ground truth for evaluation. Not for use by the optimization path.
    pub fn task_meta(&self) -> &Value {
        &self.task_meta
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.responses.iter().map(Response::len).collect()
    }
}

/// A single violated invariant found by [`validate_group`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    GroupTooSmall { size: usize },
    RewardCountMismatch { responses: usize, rewards: usize },
    EmptyResponse { response: usize },
    LengthMismatch { response: usize, field: &'static str, expected: usize, found: usize },
    TokenOutOfVocab { response: usize, position: usize, token: u32, vocab: usize },
    VocabMismatch { response: usize, position: usize, expected: usize, found: usize },
    VocabTooLarge { response: usize, position: usize, size: usize },
    DistributionInvalid { response: usize, position: usize },
    DistributionNotNormalized { response: usize, position: usize, sum: f64 },
    LogprobMismatch { response: usize, position: usize, stored: f64, expected: f64 },
    NoAttentionLayers { response: usize },
    LayerCountMismatch { response: usize, expected: usize, found: usize },
    AttentionRowCount { response: usize, layer: usize, expected: usize, found: usize },
    AttentionWidth { response: usize, layer: usize, row: usize, expected: usize, found: usize },
    AttentionOutOfRange { response: usize, layer: usize, row: usize },
    AttentionRowSum { response: usize, layer: usize, row: usize, sum: f64 },
    RewardComponent { response: usize },
    RewardCombination { response: usize, combined: f64, expected: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match self {
            GroupTooSmall { size } => write!(f, "group has {size} responses, need at least 2"),
            RewardCountMismatch { responses, rewards } => {
                write!(f, "{responses} responses but {rewards} rewards")
            }
            EmptyResponse { response } => write!(f, "response {response} is empty"),
            LengthMismatch { response, field, expected, found } => write!(
                f,
                "{field} length mismatch in response {response}: expected {expected}, found {found}"
            ),
            TokenOutOfVocab { response, position, token, vocab } => write!(
                f,
                "token {token} outside vocab of {vocab} at (resp {response}, pos {position})"
            ),
            VocabMismatch { response, position, expected, found } => write!(
                f,
                "distribution size {found} differs from group vocab {expected} at (resp {response}, pos {position})"
            ),
            VocabTooLarge { response, position, size } => write!(
                f,
                "distribution size {size} exceeds {MAX_VOCAB} at (resp {response}, pos {position})"
            ),
            DistributionInvalid { response, position } => write!(
                f,
                "distribution has negative or non-finite entries at (resp {response}, pos {position})"
            ),
            DistributionNotNormalized { response, position, .. } => write!(
                f,
                "distribution not normalized at (resp {response}, pos {position})"
            ),
            LogprobMismatch { response, position, stored, expected } => write!(
                f,
                "old logprob {stored} does not match distribution ({expected}) at (resp {response}, pos {position})"
            ),
            NoAttentionLayers { response } => {
                write!(f, "response {response} has no attention layers")
            }
            LayerCountMismatch { response, expected, found } => write!(
                f,
                "response {response} has {found} attention layers, group uses {expected}"
            ),
            AttentionRowCount { response, layer, expected, found } => write!(
                f,
                "attention row count mismatch in response {response}, layer {layer}: expected {expected}, found {found}"
            ),
            AttentionWidth { response, layer, row, expected, found } => write!(
                f,
                "attention width {found} != {expected} visual tokens at (resp {response}, layer {layer}, row {row})"
            ),
            AttentionOutOfRange { response, layer, row } => write!(
                f,
                "attention entry outside [0, 1] at (resp {response}, layer {layer}, row {row})"
            ),
            AttentionRowSum { response, layer, row, sum } => write!(
                f,
                "attention row sums to {sum} at (resp {response}, layer {layer}, row {row})"
            ),
            RewardComponent { response } => {
                write!(f, "reward components of response {response} are not in {{0, 1}}")
            }
            RewardCombination { response, combined, expected } => write!(
                f,
                "combined reward {combined} of response {response} should be {expected}"
            ),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return f.write_str("OK");
        }
        for (n, v) in self.violations.iter().enumerate() {
            if n > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Checks every data-model invariant of `group` and reports all violations.
pub fn validate_group(group: &RolloutGroup) -> ValidationReport {
    use Violation::*;
    let mut out = Vec::new();
    let g = group.responses.len();
    if g < 2 {
        out.push(GroupTooSmall { size: g });
    }
    if group.rewards.len() != g {
        out.push(RewardCountMismatch {
            responses: g,
            rewards: group.rewards.len(),
        });
    }
    let width = group.layout.num_visual_tokens();
    let vocab = group
        .responses
        .iter()
        .flat_map(|r| r.distributions.first())
        .map(TokenDistribution::vocab_size)
        .next();
    let depth = group.responses.first().map(|r| r.attention.num_layers());

    for (i, resp) in group.responses.iter().enumerate() {
        let n = resp.tokens.len();
        if n == 0 {
            out.push(EmptyResponse { response: i });
        }
        for (field, found) in [
            ("old_logprobs", resp.old_logprobs.len()),
            ("distributions", resp.distributions.len()),
        ] {
            if found != n {
                out.push(LengthMismatch { response: i, field, expected: n, found });
            }
        }
        let vocab = vocab.unwrap_or(0);
        for (t, dist) in resp.distributions.iter().enumerate() {
            let size = dist.vocab_size();
            if size > MAX_VOCAB {
                out.push(VocabTooLarge { response: i, position: t, size });
                continue;
            }
            if size != vocab {
                out.push(VocabMismatch { response: i, position: t, expected: vocab, found: size });
                continue;
            }
            if dist.probs.iter().any(|p| !p.is_finite() || *p < 0.0) || size == 0 {
                out.push(DistributionInvalid { response: i, position: t });
                continue;
            }
            let sum: f64 = dist.probs.iter().sum();
            if (sum - 1.0).abs() > PROB_SUM_TOL {
                out.push(DistributionNotNormalized { response: i, position: t, sum });
                continue;
            }
            if let (Some(&tok), Some(&stored)) = (resp.tokens.get(t), resp.old_logprobs.get(t)) {
                match dist.probs.get(tok as usize) {
                    None => out.push(TokenOutOfVocab { response: i, position: t, token: tok, vocab }),
                    Some(&p) => {
                        let expected = p.ln();
                        let ok = if expected.is_finite() {
                            (stored - expected).abs() <= LOGPROB_TOL
                        } else {
                            stored == expected
                        };
                        if !ok {
                            out.push(LogprobMismatch { response: i, position: t, stored, expected });
                        }
                    }
                }
            }
        }

        let layers = &resp.attention.layers;
        if layers.is_empty() {
            out.push(NoAttentionLayers { response: i });
        } else if let Some(d) = depth {
            if layers.len() != d {
                out.push(LayerCountMismatch { response: i, expected: d, found: layers.len() });
            }
        }
        for (l, rows) in layers.iter().enumerate() {
            if rows.len() != n {
                out.push(AttentionRowCount { response: i, layer: l, expected: n, found: rows.len() });
            }
            for (j, row) in rows.iter().enumerate() {
                if row.len() != width {
                    out.push(AttentionWidth { response: i, layer: l, row: j, expected: width, found: row.len() });
                    continue;
                }
                if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
                    out.push(AttentionOutOfRange { response: i, layer: l, row: j });
                    continue;
                }
                let sum: f64 = row.iter().sum();
                if sum > 1.0 + ATTN_ROW_TOL {
                    out.push(AttentionRowSum { response: i, layer: l, row: j, sum });
                }
            }
        }
    }

    for (i, r) in group.rewards.iter().enumerate() {
        let binary = |x: f64| x == 0.0 || x == 1.0;
        if !binary(r.accuracy) || !binary(r.format) {
            out.push(RewardComponent { response: i });
            continue;
        }
        let expected = RewardBreakdown::combine(r.accuracy, r.format);
        if r.combined.to_bits() != expected.to_bits() {
            out.push(RewardCombination { response: i, combined: r.combined, expected });
        }
    }
    ValidationReport { violations: out }
}

#[derive(Serialize)]
struct TraceLineRef<'a> {
    version: &'static str,
    layout: &'a VisualLayout,
    responses: &'a [Response],
    rewards: &'a [RewardBreakdown],
    task_meta: &'a Value,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceLine {
    #[allow(dead_code)]
    version: String,
    layout: VisualLayout,
    responses: Vec<Response>,
    rewards: Vec<RewardBreakdown>,
    task_meta: Value,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: String,
}

/// Serializes one group as a single trace line (without the trailing newline).
pub fn group_to_line(group: &RolloutGroup) -> Result<String> {
    let line = TraceLineRef {
        version: TRACE_VERSION,
        layout: &group.layout,
        responses: &group.responses,
        rewards: &group.rewards,
        task_meta: &group.task_meta,
    };
    serde_json::to_string(&line).map_err(|e| Error::Numeric(e.to_string()))
}

pub fn write_trace<W: Write>(groups: &[RolloutGroup], mut out: W) -> Result<()> {
    for group in groups {
        let report = validate_group(group);
        if !report.is_ok() {
            return Err(Error::Invalid { line: 0, message: report.to_string() });
        }
        out.write_all(group_to_line(group)?.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Parses one trace line. `line_no` is 1-based and only used for errors.
pub fn parse_trace_line(text: &str, line_no: usize) -> Result<RolloutGroup> {
    let parse_err = |e: serde_json::Error| Error::Parse { line: line_no, message: e.to_string() };
    let probe: VersionProbe = serde_json::from_str(text).map_err(parse_err)?;
    if probe.version != TRACE_VERSION {
        return Err(Error::Version { line: line_no, found: probe.version, expected: TRACE_VERSION });
    }
    let raw: TraceLine = serde_json::from_str(text).map_err(parse_err)?;
    let group = RolloutGroup::new(raw.layout, raw.responses, raw.rewards, raw.task_meta);
    let report = validate_group(&group);
    if !report.is_ok() {
        return Err(Error::Invalid { line: line_no, message: report.to_string() });
    }
    Ok(group)
}

/// Reads every group from a trace stream. Empty lines are skipped.
pub fn read_trace<R: BufRead>(input: R) -> Result<Vec<RolloutGroup>> {
    let mut groups = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse { line: n + 1, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        groups.push(parse_trace_line(&line, n + 1)?);
    }
    Ok(groups)
}

pub fn read_trace_bytes(bytes: &[u8]) -> Result<Vec<RolloutGroup>> {
    read_trace(bytes)
}
