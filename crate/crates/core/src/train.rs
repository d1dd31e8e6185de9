//! The training loop: snapshot, sample, score, select frames, re-weight,
//! compute the surrogate loss and take SGD steps.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::env::{self, GeneratorConfig, TaskInstance};
use crate::error::{Error, Result};
use crate::frame_select::{select_frames, FrameSelection, SelectionConfig, Strategy};
use crate::objective::{advantages, loss_for, Algorithm, LossReport, ObjectiveConfig};
use crate::policy::{
    grad_norm, init_params, logprobs_under, mean_entropy, sample_rollout, save_checkpoint, sgd_step,
    Gradients, ModelConfig, PolicyParams, PolicySnapshot, Prompt, Sampling, TeacherForced,
};
use crate::reweight::{reweight, ReweightConfig, SlotReduction, TokenWeightMap, WeightAveraging};
use crate::trace::{Response, RewardBreakdown, RolloutGroup};

pub const METRICS_SCHEMA: &str = "appo-metrics/1";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRACE_FILE: &str = "trace.jsonl";

/// Which reward component decides the high/low split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSource {
    #[default]
    Accuracy,
    Format,
    Combined,
}

impl SplitSource {
    pub fn pick(self, r: &RewardBreakdown) -> f64 {
        match self {
            SplitSource::Accuracy => r.accuracy,
            SplitSource::Format => r.format,
            SplitSource::Combined => r.combined,
        }
    }
}

impl fmt::Display for SplitSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitSource::Accuracy => "accuracy",
            SplitSource::Format => "format",
            SplitSource::Combined => "combined",
        })
    }
}

impl FromStr for SplitSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(SplitSource::Accuracy),
            "format" => Ok(SplitSource::Format),
            "combined" => Ok(SplitSource::Combined),
            _ => Err(Error::Config(format!("unknown split source {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(rename = "algo")]
    pub algorithm: Algorithm,
    pub seed: u64,
    pub steps: usize,
    pub group_size: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub k1: usize,
    pub k2: usize,
    pub k3: usize,
    pub alpha: f64,
    pub strategy: Strategy,
    #[serde(rename = "attn-layers")]
    pub attention_layers: usize,
    pub clip_low: f64,
    pub clip_high: f64,
    pub kl_coeff: f64,
    pub split_source: SplitSource,
    pub slot_reduction: SlotReduction,
    pub weight_averaging: WeightAveraging,
    pub inner_epochs: usize,
    pub lr: f64,
    pub temperature: f64,
    /// Record wall-clock seconds per step. Off by default so reruns are
    /// byte-identical.
    pub wall_time: bool,
    pub out: PathBuf,
    /// Also dump every step's rollout groups as a trace.
    pub dump_trace: bool,
    pub model: ModelConfig,
    pub generator: GeneratorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Appo,
            seed: 0,
            steps: 300,
            group_size: 8,
            batch_size: 16,
            tau: 0.5,
            k1: 15,
            k2: 5,
            k3: 64,
            alpha: 1.7,
            strategy: Strategy::Soft,
            attention_layers: 3,
            clip_low: 0.2,
            clip_high: 0.28,
            kl_coeff: 0.01,
            split_source: SplitSource::Accuracy,
            slot_reduction: SlotReduction::PerSlot,
            weight_averaging: WeightAveraging::Membership,
            inner_epochs: 1,
            lr: 0.08,
            temperature: 1.0,
            wall_time: false,
            out: PathBuf::from("run"),
            dump_trace: false,
            model: ModelConfig::default(),
            generator: GeneratorConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("group-size", self.group_size),
            ("batch-size", self.batch_size),
            ("k1", self.k1),
            ("k2", self.k2),
            ("k3", self.k3),
            ("attn-layers", self.attention_layers),
            ("inner-epochs", self.inner_epochs),
        ] {
            if v == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        if self.group_size < 2 {
            return fail("group-size must be at least 2".into());
        }
        if !self.tau.is_finite() {
            return fail(format!("tau must be finite, got {}", self.tau));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha must be finite and non-negative, got {}", self.alpha));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!("temperature must be positive, got {}", self.temperature));
        }
        self.objective().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.generator.validate()?;
        if self.model.visual_dim != self.generator.visual_dim {
            return fail(format!(
                "model visual_dim {} differs from generator visual_dim {}",
                self.model.visual_dim, self.generator.visual_dim
            ));
        }
        if self.model.vocab_size != self.generator.vocab_size {
            return fail(format!(
                "model vocab_size {} differs from generator vocab_size {}",
                self.model.vocab_size, self.generator.vocab_size
            ));
        }
        if self.model.max_question_len < env::QUESTION_LEN {
            return fail(format!("model max_question_len must be at least {}", env::QUESTION_LEN));
        }
        Ok(())
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            algorithm: self.algorithm,
            clip_low: self.clip_low,
            clip_high: self.clip_high,
            kl_coeff: self.kl_coeff,
            ..ObjectiveConfig::default()
        }
    }

    pub fn selection(&self) -> SelectionConfig {
        SelectionConfig {
            tau: self.tau,
            k1: self.k1,
            k2: self.k2,
            attention_layers: self.attention_layers,
            strategy: self.strategy,
        }
    }

    pub fn reweighting(&self) -> ReweightConfig {
        ReweightConfig {
            k3: self.k3,
            alpha: self.alpha,
            reduction: self.slot_reduction,
            averaging: self.weight_averaging,
        }
    }
}

/// SplitMix64 finalizer over a running state; used to derive independent
/// seeds for initialization, data and every rollout.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

const INIT_TAG: u64 = 1;
const DATA_TAG: u64 = 2;
const ROLLOUT_TAG: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub mean_reward: f64,
    pub mean_accuracy: f64,
    pub mean_format: f64,
    pub mean_entropy: f64,
    pub grad_norm: f64,
    pub clip_fraction: f64,
    pub perception_hit_rate: f64,
    /// Mean of `|target frames| / T`, the hit rate of a random frame choice.
    pub perception_baseline: f64,
    pub mean_weight: f64,
    pub frac_tokens_reweighted: f64,
    pub mean_response_len: f64,
    pub wall_time: Option<f64>,
}

impl StepMetrics {
    pub fn check(&self, alpha: f64) -> Result<()> {
        let rates = [
            self.mean_reward,
            self.mean_accuracy,
            self.mean_format,
            self.clip_fraction,
            self.perception_hit_rate,
            self.perception_baseline,
            self.frac_tokens_reweighted,
        ];
        let finite = [self.loss, self.mean_entropy, self.grad_norm, self.mean_weight, self.mean_response_len];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) || finite.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("step {} metrics out of range", self.step)));
        }
        if !(1.0..=1.0 + alpha).contains(&self.mean_weight) {
            return Err(Error::Numeric(format!("step {} mean weight {}", self.step, self.mean_weight)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsHeader {
    pub schema: String,
    pub seed: u64,
    pub steps: usize,
    pub group_size: usize,
    pub batch_size: usize,
}

/// One rollout group with everything the update needs.
#[derive(Debug, Clone)]
pub struct ScoredGroup {
    pub instance: TaskInstance,
    pub prompt: Prompt,
    pub group: RolloutGroup,
    pub selection: FrameSelection,
    pub weights: TokenWeightMap,
}

/// Samples `G` responses for `instance` from `policy` and scores them.
pub fn rollout_group(
    policy: &PolicySnapshot,
    instance: TaskInstance,
    cfg: &RunConfig,
    seeds: impl Fn(usize) -> u64,
) -> Result<ScoredGroup> {
    let protocol = cfg.generator.protocol();
    let prompt = instance.prompt();
    let stop = |t: &[u32]| protocol.is_terminated(t);
    let responses = (0..cfg.group_size)
        .map(|i| {
            sample_rollout(
                policy,
                &prompt,
                cfg.model.max_response_len,
                Sampling::Temperature(cfg.temperature),
                seeds(i),
                &stop,
            )
        })
        .collect::<Result<Vec<Response>>>()?;
    let rewards: Vec<RewardBreakdown> = responses.iter().map(|r| env::reward(r, &instance, &protocol)).collect();
    let group = RolloutGroup::new(instance.layout.clone(), responses, rewards, instance.task_meta());
    score_group(instance, prompt, group, cfg)
}

/// Frame selection and, for APPO, token weights. Selection runs for every
/// algorithm so the perception metrics are comparable.
pub fn score_group(instance: TaskInstance, prompt: Prompt, group: RolloutGroup, cfg: &RunConfig) -> Result<ScoredGroup> {
    let split: Vec<f64> = group.rewards.iter().map(|r| cfg.split_source.pick(r)).collect();
    let captures: Vec<_> = group.responses.iter().map(|r| &r.attention).collect();
    let selection = select_frames(&group.layout, &captures, &split, &cfg.selection())?;
    let weights = if cfg.algorithm == Algorithm::Appo {
        reweight(&group.responses, &selection.targets, &selection.frame_attention, &cfg.reweighting())?.weights
    } else {
        TokenWeightMap::ones(&group.lengths())
    };
    Ok(ScoredGroup { instance, prompt, group, selection, weights })
}

/// Loss and parameter gradient for one group under `params`.
pub fn group_loss_and_grad(
    params: &PolicyParams,
    reference: Option<&PolicyParams>,
    scored: &ScoredGroup,
    cfg: &ObjectiveConfig,
) -> Result<(LossReport, Gradients)> {
    let responses = &scored.group.responses;
    let forced = responses
        .iter()
        .map(|r| TeacherForced::new(params, &scored.prompt, &r.tokens, true))
        .collect::<Result<Vec<_>>>()?;
    let new: Vec<Vec<f64>> = forced.iter().map(TeacherForced::logprobs).collect();
    let old: Vec<Vec<f64>> = responses.iter().map(|r| r.old_logprobs.clone()).collect();
    let refs = match (cfg.algorithm, reference) {
        (Algorithm::Grpo, Some(p)) => Some(
            responses
                .iter()
                .map(|r| logprobs_under(p, &r.tokens, &scored.prompt).map(|(lp, _)| lp))
                .collect::<Result<Vec<_>>>()?,
        ),
        _ => None,
    };
    let combined: Vec<f64> = scored.group.rewards.iter().map(|r| r.combined).collect();
    let adv = advantages(&combined, cfg.sigma_eps);
    let report = loss_for(&new, &old, refs.as_deref(), &adv, Some(&scored.weights), cfg)?;
    let mut grads = params.zeros_like();
    for (tf, dlogp) in forced.iter().zip(&report.grad_logprobs) {
        grads.add_scaled(&tf.backward(params, dlogp)?, 1.0);
    }
    Ok((report, grads))
}

fn numeric_at(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numeric(_) => Error::NonFiniteLoss { step },
        other => other,
    }
}

/// In-memory trainer; `train` wraps it with file output.
pub struct Trainer {
    pub cfg: RunConfig,
    pub params: PolicyParams,
    reference: Option<PolicyParams>,
    data: GeneratorConfig,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(&cfg.model, derive_seed(cfg.seed, &[INIT_TAG]))?;
        let reference = (cfg.algorithm == Algorithm::Grpo).then(|| params.clone());
        let data = GeneratorConfig { seed: derive_seed(cfg.seed, &[DATA_TAG, cfg.generator.seed]), ..cfg.generator };
        Ok(Self { cfg, params, reference, data, step: 0 })
    }

    pub fn instance(&self, step: usize, b: usize) -> Result<TaskInstance> {
        env::generate(&self.data, (step * self.cfg.batch_size + b) as u64)
    }

    /// Samples and scores the batch for the current step under `policy`.
    pub fn collect(&self, policy: &PolicySnapshot) -> Result<Vec<ScoredGroup>> {
        let step = self.step;
        (0..self.cfg.batch_size)
            .map(|b| {
                let inst = self.instance(step, b)?;
                let seed = self.cfg.seed;
                rollout_group(policy, inst, &self.cfg, |i| {
                    derive_seed(seed, &[ROLLOUT_TAG, step as u64, b as u64, i as u64])
                })
            })
            .collect()
    }

    /// Runs one step and returns its metrics along with the sampled groups.
    pub fn step(&mut self) -> Result<(StepMetrics, Vec<ScoredGroup>)> {
        let started = Instant::now();
        let step = self.step;
        let old = PolicySnapshot::take(&self.params);
        let batch = self.collect(&old)?;
        drop(old);
        let objective = self.cfg.objective();
        let scale = 1.0 / batch.len() as f64;

        let mut first: Option<(f64, f64, f64)> = None;
        for _ in 0..self.cfg.inner_epochs {
            let mut total = self.params.zeros_like();
            let mut loss = 0.0;
            let mut clip = 0.0;
            for scored in &batch {
                let (report, grads) = group_loss_and_grad(&self.params, self.reference.as_ref(), scored, &objective)
                    .map_err(numeric_at(step))?;
                total.add_scaled(&grads, scale);
                loss += report.loss * scale;
                clip += report.clip_fraction * scale;
            }
            let norm = grad_norm(&total);
            if !loss.is_finite() || !norm.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            first.get_or_insert((loss, norm, clip));
            sgd_step(&mut self.params, &total, self.cfg.lr).map_err(numeric_at(step))?;
        }
        let (loss, grad_norm, clip_fraction) = first.expect("inner_epochs is at least 1");

        let mut m = StepMetrics {
            step,
            loss,
            mean_reward: 0.0,
            mean_accuracy: 0.0,
            mean_format: 0.0,
            mean_entropy: mean_entropy(batch.iter().flat_map(|s| &s.group.responses)),
            grad_norm,
            clip_fraction,
            perception_hit_rate: 0.0,
            perception_baseline: 0.0,
            mean_weight: 0.0,
            frac_tokens_reweighted: 0.0,
            mean_response_len: 0.0,
            wall_time: None,
        };
        let (mut responses, mut tokens, mut reweighted) = (0usize, 0usize, 0usize);
        for s in &batch {
            for r in &s.group.rewards {
                m.mean_reward += r.combined;
                m.mean_accuracy += r.accuracy;
                m.mean_format += r.format;
            }
            responses += s.group.group_size();
            m.perception_hit_rate += env::perception_hit_rate(&s.selection.targets, &s.instance);
            m.perception_baseline += s.selection.targets.frames.len() as f64 / s.group.layout.num_frames() as f64;
            for w in s.weights.iter() {
                m.mean_weight += w;
                tokens += 1;
                reweighted += usize::from(w != 1.0);
            }
        }
        let (n_resp, n_groups) = (responses as f64, batch.len() as f64);
        m.mean_reward /= n_resp;
        m.mean_accuracy /= n_resp;
        m.mean_format /= n_resp;
        m.perception_hit_rate /= n_groups;
        m.perception_baseline /= n_groups;
        m.mean_weight /= tokens as f64;
        m.frac_tokens_reweighted = reweighted as f64 / tokens as f64;
        m.mean_response_len = tokens as f64 / n_resp;
        if self.cfg.wall_time {
            m.wall_time = Some(started.elapsed().as_secs_f64());
        }
        self.step += 1;
        Ok((m, batch))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_line<W: Write>(out: &mut W, path: &Path, value: &impl Serialize) -> Result<()> {
    let mut line = serde_json::to_string(value).map_err(|e| Error::Numeric(e.to_string()))?;
    line.push('\n');
    out.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub metrics: Vec<StepMetrics>,
}

/// Runs `cfg.steps` steps, writing `metrics.jsonl` and `checkpoint.json`
/// (and `trace.jsonl` when asked) into `cfg.out`.
pub fn train(cfg: &RunConfig) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(cfg.clone())?;
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let metrics_path = cfg.out.join(METRICS_FILE);
    let trace_path = cfg.out.join(TRACE_FILE);
    let mut metrics_out = create(&metrics_path)?;
    let mut trace_out = cfg.dump_trace.then(|| create(&trace_path)).transpose()?;
    let header = MetricsHeader {
        schema: METRICS_SCHEMA.into(),
        seed: cfg.seed,
        steps: cfg.steps,
        group_size: cfg.group_size,
        batch_size: cfg.batch_size,
    };
    write_line(&mut metrics_out, &metrics_path, &header)?;
    let mut metrics = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let (m, batch) = trainer.step()?;
        write_line(&mut metrics_out, &metrics_path, &m)?;
        if let Some(out) = trace_out.as_mut() {
            for s in &batch {
                let mut line = crate::trace::group_to_line(&s.group)?;
                line.push('\n');
                out.write_all(line.as_bytes()).map_err(|e| Error::io(&trace_path, e))?;
            }
        }
        metrics.push(m);
    }
    metrics_out.flush().map_err(|e| Error::io(&metrics_path, e))?;
    if let Some(mut out) = trace_out {
        out.flush().map_err(|e| Error::io(&trace_path, e))?;
    }
    let checkpoint_path = cfg.out.join(CHECKPOINT_FILE);
    save_checkpoint(&trainer.params, &checkpoint_path)?;
    Ok(TrainOutput { metrics_path, checkpoint_path, metrics })
}

/// Parses a metrics file back into its header and steps.
pub fn read_metrics(text: &str) -> Result<(MetricsHeader, Vec<StepMetrics>)> {
    let mut lines = text.lines().enumerate();
    let parse = |n: usize, e: serde_json::Error| Error::Parse { line: n + 1, message: e.to_string() };
    let (n, first) = lines.next().ok_or(Error::Parse { line: 1, message: "empty metrics file".into() })?;
    let header: MetricsHeader = serde_json::from_str(first).map_err(|e| parse(n, e))?;
    if header.schema != METRICS_SCHEMA {
        return Err(Error::Version { line: 1, found: header.schema, expected: METRICS_SCHEMA });
    }
    let steps = lines
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| parse(n, e)))
        .collect::<Result<Vec<StepMetrics>>>()?;
    Ok((header, steps))
}
