//! Synthetic "video" question answering with a planted crucial frame.
//!
//! Token ids: `0` opens the question, `1` is the answer tag, the next
//! `alphabet_size` ids are the answers, and the remainder are free tokens.
//! A response is well formed when it ends in exactly one `<tag> <answer>`
//! pair.
//!
//! Visual token `v` is a `visual_dim` vector. Dimensions `0..alphabet_size`
//! are answer signature directions and dimension `alphabet_size` is an event
//! marker. Tokens of the crucial frame carry the marker plus the signature of
//! the right answer, distractor frames carry the signature of a wrong answer
//! without the marker, and every entry gets Gaussian noise.

use std::io::{BufRead, Write};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::frame_select::TargetFrames;
use crate::policy::Prompt;
use crate::trace::{Response, RewardBreakdown, VisualLayout};

pub const QUESTION_START: u32 = 0;
pub const ANSWER_TAG: u32 = 1;
const FIRST_ANSWER: u32 = 2;
pub const QUESTION_LEN: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub num_frames: usize,
    pub tokens_per_frame: usize,
    pub alphabet_size: usize,
    pub num_distractors: usize,
    /// Signature amplitude divided by the noise standard deviation.
    pub snr: f64,
    pub noise_std: f64,
    pub visual_dim: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_frames: 8,
            tokens_per_frame: 4,
            alphabet_size: 4,
            num_distractors: 2,
            snr: 40.0,
            noise_std: 0.5,
            visual_dim: 16,
            vocab_size: 32,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_frames < 2 || self.num_frames > 4096 {
            return fail(format!("num_frames must be in 2..=4096, got {}", self.num_frames));
        }
        if self.tokens_per_frame == 0 || self.tokens_per_frame > 4096 {
            return fail(format!("tokens_per_frame must be in 1..=4096, got {}", self.tokens_per_frame));
        }
        if self.alphabet_size < 2 {
            return fail(format!("alphabet_size must be at least 2, got {}", self.alphabet_size));
        }
        if self.num_distractors == 0 || self.num_distractors >= self.num_frames {
            return fail(format!(
                "num_distractors must be in 1..{}, got {}",
                self.num_frames, self.num_distractors
            ));
        }
        if self.visual_dim <= self.alphabet_size || self.visual_dim > 4096 {
            return fail(format!(
                "visual_dim must exceed alphabet_size ({}) to hold the marker, got {}",
                self.alphabet_size, self.visual_dim
            ));
        }
        if self.vocab_size < FIRST_ANSWER as usize + self.alphabet_size + 1 {
            return fail(format!(
                "vocab_size {} cannot hold 2 control tokens, {} answers and a free token",
                self.vocab_size, self.alphabet_size
            ));
        }
        if !(self.snr >= 0.0 && self.snr.is_finite() && self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail("snr and noise_std must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn protocol(&self) -> Protocol {
        Protocol { alphabet_size: self.alphabet_size }
    }
}

/// Answer-tag protocol shared by the sampler's stopping rule and the reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Protocol {
    pub alphabet_size: usize,
}

impl Protocol {
    pub fn answer_token(&self, k: usize) -> u32 {
        FIRST_ANSWER + k as u32
    }

    pub fn is_answer(&self, token: u32) -> bool {
        (FIRST_ANSWER..FIRST_ANSWER + self.alphabet_size as u32).contains(&token)
    }

    /// Generation ends once an answer follows the tag.
    pub fn is_terminated(&self, tokens: &[u32]) -> bool {
        matches!(tokens, [.., tag, ans] if *tag == ANSWER_TAG && self.is_answer(*ans))
    }

    pub fn is_well_formed(&self, tokens: &[u32]) -> bool {
        self.is_terminated(tokens) && tokens.iter().filter(|&&t| t == ANSWER_TAG).count() == 1
    }

    /// The token right after the last answer tag, if any.
    pub fn extract_answer(&self, tokens: &[u32]) -> Option<u32> {
        let tag = tokens.iter().rposition(|&t| t == ANSWER_TAG)?;
        tokens.get(tag + 1).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskInstance {
    pub index: u64,
    pub layout: VisualLayout,
    pub visual_tokens: Vec<Vec<f64>>,
    pub question_tokens: Vec<u32>,
    pub crucial_frame: usize,
    pub answer_token: u32,
    pub distractor_frames: Vec<usize>,
}

impl TaskInstance {
    pub fn prompt(&self) -> Prompt {
        let rows = self.visual_tokens.len();
        let cols = self.visual_tokens.first().map_or(0, Vec::len);
        let flat: Vec<f64> = self.visual_tokens.iter().flatten().copied().collect();
        Prompt {
            question: self.question_tokens.clone(),
            visual: Array2::from_shape_vec((rows, cols), flat).expect("visual tokens are rectangular"),
        }
    }

    /// Evaluation-only ground truth attached to rollout groups.
    pub fn task_meta(&self) -> serde_json::Value {
        json!({
            "index": self.index,
            "crucial_frame": self.crucial_frame,
            "answer_token": self.answer_token,
            "distractor_frames": self.distractor_frames,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.layout.num_frames();
        let bad = |m: String| Err(Error::Shape(m));
        if self.visual_tokens.len() != self.layout.num_visual_tokens() {
            return bad(format!(
                "{} visual tokens for a layout of {}",
                self.visual_tokens.len(),
                self.layout.num_visual_tokens()
            ));
        }
        let width = self.visual_tokens[0].len();
        if width == 0 || self.visual_tokens.iter().any(|v| v.len() != width || v.iter().any(|x| !x.is_finite())) {
            return bad("visual tokens must be non-empty, finite and of equal width".into());
        }
        if self.question_tokens.is_empty() {
            return bad("question is empty".into());
        }
        if self.crucial_frame >= t {
            return bad(format!("crucial frame {} out of {t} frames", self.crucial_frame));
        }
        if self.distractor_frames.is_empty()
            || self.distractor_frames.iter().any(|&d| d >= t || d == self.crucial_frame)
        {
            return bad("distractor frames must be valid and distinct from the crucial frame".into());
        }
        Ok(())
    }
}

fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Builds instance `index` of the stream defined by `cfg.seed`.
pub fn generate(cfg: &GeneratorConfig, index: u64) -> Result<TaskInstance> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, index);
    let t = cfg.num_frames;
    let a = cfg.alphabet_size;
    let layout = VisualLayout::uniform(t, cfg.tokens_per_frame)?;
    let answer = rng.random_range(0..a);
    let crucial = rng.random_range(0..t);

    let mut others: Vec<usize> = (0..t).filter(|&f| f != crucial).collect();
    let mut distractors = Vec::with_capacity(cfg.num_distractors);
    for _ in 0..cfg.num_distractors {
        distractors.push(others.swap_remove(rng.random_range(0..others.len())));
    }
    distractors.sort_unstable();
    let wrong: Vec<usize> = distractors
        .iter()
        .map(|_| {
            let k = rng.random_range(0..a - 1);
            if k >= answer { k + 1 } else { k }
        })
        .collect();

    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let amplitude = cfg.snr * cfg.noise_std;
    let mut visual_tokens = Vec::with_capacity(layout.num_visual_tokens());
    for (v, &frame) in layout.frame_of_token().iter().enumerate() {
        let mut x: Vec<f64> = (0..cfg.visual_dim).map(|_| noise.sample(&mut rng)).collect();
        if frame == crucial {
            x[answer] += amplitude;
            x[a] += amplitude;
        } else if let Some(d) = distractors.iter().position(|&d| d == frame) {
            x[wrong[d]] += amplitude;
        }
        debug_assert_eq!(visual_tokens.len(), v);
        visual_tokens.push(x);
    }
    let free_tokens = FIRST_ANSWER as usize + a..cfg.vocab_size;
    let question_tokens = vec![QUESTION_START, rng.random_range(free_tokens) as u32];

    Ok(TaskInstance {
        index,
        layout,
        visual_tokens,
        question_tokens,
        crucial_frame: crucial,
        answer_token: cfg.protocol().answer_token(answer),
        distractor_frames: distractors,
    })
}

/// Accuracy: the token after the last answer tag is the right answer.
/// Format: the response ends with its only `<tag> <answer>` pair.
pub fn reward(response: &Response, instance: &TaskInstance, protocol: &Protocol) -> RewardBreakdown {
    let tokens = &response.tokens;
    let accurate = protocol.extract_answer(tokens) == Some(instance.answer_token);
    RewardBreakdown::new(accurate, protocol.is_well_formed(tokens))
}

/// 1 when the instance's crucial frame is among the target frames.
pub fn perception_hit_rate(targets: &TargetFrames, instance: &TaskInstance) -> f64 {
    if targets.frames.contains(&instance.crucial_frame) {
        1.0
    } else {
        0.0
    }
}

pub const DATASET_VERSION: &str = "appo-dataset/1";

#[derive(Serialize)]
struct DatasetLineRef<'a> {
    version: &'static str,
    #[serde(flatten)]
    instance: &'a TaskInstance,
}

#[derive(Deserialize)]
struct DatasetLine {
    version: String,
    #[serde(flatten)]
    instance: serde_json::Map<String, serde_json::Value>,
}

pub fn write_dataset<W: Write>(instances: &[TaskInstance], mut out: W) -> Result<()> {
    for inst in instances {
        let line = DatasetLineRef { version: DATASET_VERSION, instance: inst };
        serde_json::to_writer(&mut out, &line).map_err(|e| Error::Numeric(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<Vec<TaskInstance>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line_no = n + 1;
        let parse = |e: serde_json::Error| Error::Parse { line: line_no, message: e.to_string() };
        let line = line.map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: DatasetLine = serde_json::from_str(&line).map_err(parse)?;
        if raw.version != DATASET_VERSION {
            return Err(Error::Version { line: line_no, found: raw.version, expected: DATASET_VERSION });
        }
        let inst: TaskInstance = serde_json::from_value(serde_json::Value::Object(raw.instance)).map_err(parse)?;
        inst.validate().map_err(|e| Error::Invalid { line: line_no, message: e.to_string() })?;
        out.push(inst);
    }
    Ok(out)
}
