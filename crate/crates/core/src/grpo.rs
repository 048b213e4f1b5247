//! Stage II: group-relative policy optimization over sampled responses.
//!
//! Each iteration samples `K` responses per record from a frozen snapshot
//! `π_old`, scores them, centers the rewards within the group, and ascends the
//! clipped surrogate with a KL penalty towards the Stage I reference. Latent
//! steps are replayed from the recorded trace as fixed conditioning, so only
//! discrete tokens carry ratios and KL terms.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::data::QualityRecord;
use crate::error::{Error, Result};
use crate::model::{generate, text_mask, DecodeConfig, Model, ReplayLayout, Response, Slot};
use crate::params::{AdamWConfig, Gradients};
use crate::sft::TrainState;
use crate::tensor::Matrix;
use crate::tokenizer::{TokenId, Vocab};

#[derive(Clone, Debug, PartialEq)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    /// Width of the Gaussian score kernel.
    pub sigma: f64,
    /// Errors beyond this earn no score reward.
    pub tau: f64,
    pub latent_budget: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_grad_norm: Option<f64>,
    pub epochs: usize,
    /// Records whose groups share one rollout phase.
    pub records_per_iteration: usize,
    /// Gradient steps taken on each rollout phase before `π_old` is refreshed.
    pub updates_per_phase: usize,
    /// Divide centered rewards by the group standard deviation.
    pub normalize_advantages: bool,
    /// Scale the KL sum by `1/K`, like the surrogate term.
    pub kl_group_mean: bool,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_epsilon: 0.2,
            kl_beta: 1e-3,
            sigma: 0.5,
            tau: 1.0,
            latent_budget: 8,
            temperature: 1.0,
            max_new_tokens: 24,
            learning_rate: 2e-4,
            weight_decay: 0.0,
            max_grad_norm: Some(1.0),
            epochs: 1,
            records_per_iteration: 4,
            updates_per_phase: 1,
            normalize_advantages: false,
            kl_group_mean: false,
            seed: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.group_size < 2 {
            return bad(format!("group size must be at least 2, got {}", self.group_size));
        }
        if !(self.sigma > 0.0) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad(format!("clip epsilon must lie in (0, 1), got {}", self.clip_epsilon));
        }
        if !(self.kl_beta >= 0.0) {
            return bad(format!("kl beta must be non-negative, got {}", self.kl_beta));
        }
        if self.records_per_iteration == 0 || self.updates_per_phase == 0 {
            return bad("records per iteration and updates per phase must be positive".into());
        }
        Ok(())
    }

    pub fn decode(&self) -> DecodeConfig {
        DecodeConfig {
            temperature: self.temperature,
            max_new_tokens: self.max_new_tokens,
            latent_budget: self.latent_budget,
            ..DecodeConfig::default()
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            max_grad_norm: self.max_grad_norm,
            ..AdamWConfig::default()
        }
    }
}

/// 1 for a well-formed response with a parsable score, else 0.
pub fn reward_format(response: &Response) -> f64 {
    if response.format_valid {
        1.0
    } else {
        0.0
    }
}

/// Truncated Gaussian kernel on the score error; an absent score earns 0.
pub fn reward_gauss(s_hat: Option<f64>, s: f64, sigma: f64, tau: f64) -> f64 {
    match s_hat {
        Some(p) if p.is_finite() && (p - s).abs() <= tau => (-(p - s).powi(2) / (2.0 * sigma * sigma)).exp(),
        _ => 0.0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reward {
    pub format: f64,
    pub gauss: f64,
    pub total: f64,
}

pub fn reward_total(response: &Response, s: f64, cfg: &GrpoConfig) -> Reward {
    let format = reward_format(response);
    let gauss = reward_gauss(response.parsed_score, s, cfg.sigma, cfg.tau);
    Reward {
        format,
        gauss,
        total: format + gauss,
    }
}

/// Rewards minus the group mean, optionally divided by the group standard deviation.
pub fn center_advantages(rewards: &[f64], normalize: bool) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let centered: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    if !normalize {
        return centered;
    }
    let std = (centered.iter().map(|a| a * a).sum::<f64>() / n).sqrt();
    if std < 1e-12 {
        return vec![0.0; rewards.len()];
    }
    centered.iter().map(|a| a / std).collect()
}

#[derive(Clone, Debug)]
pub struct Rollout {
    pub response: Response,
    /// `log π_old` of each policy token.
    pub old_logprobs: Vec<f64>,
    pub reward: Reward,
    pub advantage: f64,
}

#[derive(Clone, Debug)]
pub struct GroupBatch {
    /// Projected visual tokens of the record's image.
    pub visual: Matrix,
    pub prompt: Vec<TokenId>,
    pub target: f64,
    pub rollouts: Vec<Rollout>,
}

impl GroupBatch {
    pub fn advantages(&self) -> Vec<f64> {
        self.rollouts.iter().map(|r| r.advantage).collect()
    }
}

/// Samples `K` responses from `model_old` and fills in rewards and advantages.
pub fn sample_group(
    model_old: &Model,
    vocab: &Vocab,
    record: &QualityRecord,
    cfg: &GrpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GroupBatch> {
    let grid = model_old.encode_image(&record.image)?;
    let visual = model_old.project_visual(&grid)?;
    let prompt = vocab.encode(&record.prompt);
    if prompt.is_empty() {
        return Err(Error::InvalidInput("empty prompt".into()));
    }
    let decode = cfg.decode();
    let mut rollouts = Vec::with_capacity(cfg.group_size);
    for _ in 0..cfg.group_size {
        let response = generate(model_old, vocab, &visual, &prompt, &decode, rng);
        let reward = reward_total(&response, record.mos, cfg);
        rollouts.push(Rollout {
            old_logprobs: response.policy_logprobs(),
            response,
            reward,
            advantage: 0.0,
        });
    }
    let rewards: Vec<f64> = rollouts.iter().map(|r| r.reward.total).collect();
    for (r, a) in rollouts.iter_mut().zip(center_advantages(&rewards, cfg.normalize_advantages)) {
        r.advantage = a;
    }
    Ok(GroupBatch {
        visual,
        prompt,
        target: record.mos,
        rollouts,
    })
}

fn check_trace(rollout: &Rollout) -> Result<()> {
    let r = &rollout.response;
    let latent_slots = r.slots.iter().filter(|s| matches!(s, Slot::Latent)).count();
    let token_slots = r.slots.len() - latent_slots;
    if latent_slots != r.latent_trace.len() || latent_slots != r.latent_inputs.len() {
        return Err(Error::Shape(format!(
            "{latent_slots} latent slots but a trace of {} states and {} inputs",
            r.latent_trace.len(),
            r.latent_inputs.len()
        )));
    }
    if token_slots != r.tokens.len() || token_slots != r.policy_mask.len() {
        return Err(Error::Shape(format!("{token_slots} token slots but {} tokens", r.tokens.len())));
    }
    if rollout.old_logprobs.len() != r.num_policy_tokens() {
        return Err(Error::Shape(format!(
            "{} old log-probs for {} policy tokens",
            rollout.old_logprobs.len(),
            r.num_policy_tokens()
        )));
    }
    Ok(())
}

/// Replays a rollout on `tape`; the recorded latent inputs enter as constants.
pub fn replay_tape(model: &Model, tape: &mut Tape, group: &GroupBatch, rollout: &Rollout) -> Result<(Var, ReplayLayout)> {
    check_trace(rollout)?;
    let layout = rollout.response.replay(model, &group.visual, &group.prompt);
    let out = model.forward_tape(tape, &layout.inputs)?;
    Ok((out.logits, layout))
}

/// `log π_θ` of each policy token under the replayed conditioning.
pub fn replay_logprobs(model: &Model, group: &GroupBatch, rollout: &Rollout) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let (logits, layout) = replay_tape(model, &mut tape, group, rollout)?;
    let lp = tape.log_probs(logits, layout.policy_rows, layout.policy_targets, &text_mask());
    Ok(tape.value(lp).data().to_vec())
}

pub fn importance_ratios(new_logprobs: &[f64], old_logprobs: &[f64]) -> Result<Vec<f64>> {
    if new_logprobs.len() != old_logprobs.len() {
        return Err(Error::Shape(format!(
            "{} new vs {} old log-probs",
            new_logprobs.len(),
            old_logprobs.len()
        )));
    }
    Ok(new_logprobs.iter().zip(old_logprobs).map(|(n, o)| (n - o).exp()).collect())
}

/// Exact categorical KL between two logit rows under the text-mode mask.
pub fn categorical_kl(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    let mask = text_mask();
    let lp = mask.log_softmax(p_logits);
    let lq = mask.log_softmax(q_logits);
    lp.iter()
        .zip(&lq)
        .enumerate()
        .filter(|(j, _)| !mask.is_excluded(*j))
        .map(|(_, (a, b))| if a.is_finite() { a.exp() * (a - b) } else { 0.0 })
        .sum()
}

/// Reference log-probability rows at each policy position of a rollout.
fn reference_rows(reference: &Model, layout: &ReplayLayout) -> Result<Matrix> {
    let (logits, _) = reference.forward_teacher_forced(&layout.inputs)?;
    let mask = text_mask();
    let mut out = Matrix::zeros(layout.policy_rows.len(), logits.cols());
    for (k, &r) in layout.policy_rows.iter().enumerate() {
        out.row_mut(k).copy_from_slice(&mask.log_softmax(logits.row(r)));
    }
    Ok(out)
}

/// Per policy token `KL(π_θ ‖ π_ref)` in the replayed context.
pub fn kl_to_reference(model: &Model, reference: &Model, group: &GroupBatch, rollout: &Rollout) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let (logits, layout) = replay_tape(model, &mut tape, group, rollout)?;
    let ref_rows = reference_rows(reference, &layout)?;
    let kl = tape.kl_to_reference(logits, layout.policy_rows, &ref_rows, &text_mask());
    Ok(tape.value(kl).data().to_vec())
}

/// One token's clipped surrogate `min(r·Â, clip(r, 1−ε, 1+ε)·Â)`.
pub fn surrogate_term(ratio: f64, advantage: f64, eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    (ratio * advantage).min(clipped * advantage)
}

/// Derivative of [`surrogate_term`] with respect to the new log-probability.
/// Zero whenever the clipped branch is selected.
pub fn surrogate_grad_logp(ratio: f64, advantage: f64, eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    if clipped != ratio && clipped * advantage < ratio * advantage {
        0.0
    } else {
        ratio * advantage
    }
}

fn kl_weight(cfg: &GrpoConfig, k: usize) -> f64 {
    if cfg.kl_group_mean {
        cfg.kl_beta / k as f64
    } else {
        cfg.kl_beta
    }
}

/// `J = (1/K) Σ_k Σ_t min(r·Â_k, clip(r)·Â_k) − β Σ_k Σ_t KL_{k,t}`.
pub fn grpo_objective(group: &GroupBatch, new_logprobs: &[Vec<f64>], kl: &[Vec<f64>], cfg: &GrpoConfig) -> Result<f64> {
    let k = group.rollouts.len();
    if new_logprobs.len() != k || kl.len() != k {
        return Err(Error::Shape(format!(
            "{k} rollouts but {} log-prob and {} KL vectors",
            new_logprobs.len(),
            kl.len()
        )));
    }
    let mut surrogate = 0.0;
    let mut penalty = 0.0;
    for ((ro, lp), kl_k) in group.rollouts.iter().zip(new_logprobs).zip(kl) {
        if kl_k.len() != lp.len() {
            return Err(Error::Shape("KL and log-prob lengths differ".into()));
        }
        for r in importance_ratios(lp, &ro.old_logprobs)? {
            surrogate += surrogate_term(r, ro.advantage, cfg.clip_epsilon);
        }
        penalty += kl_k.iter().sum::<f64>();
    }
    Ok(surrogate / k as f64 - kl_weight(cfg, k) * penalty)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ObjectiveStats {
    pub objective: f64,
    /// Mean KL per policy token.
    pub mean_kl: f64,
    pub clipped_fraction: f64,
    pub policy_tokens: usize,
}

/// Objective value and its gradient `∂J/∂θ` for one group.
pub fn grpo_objective_grad(
    model: &Model,
    reference: &Model,
    group: &GroupBatch,
    cfg: &GrpoConfig,
) -> Result<(ObjectiveStats, Gradients)> {
    let k = group.rollouts.len();
    let mask = text_mask();
    let mut grads = Gradients::new(model.params.len());
    let mut stats = ObjectiveStats::default();
    let mut clipped = 0usize;
    let mut kl_total = 0.0;
    let beta = kl_weight(cfg, k);
    for ro in &group.rollouts {
        if ro.old_logprobs.is_empty() {
            continue;
        }
        let mut tape = Tape::new();
        let (logits, layout) = replay_tape(model, &mut tape, group, ro)?;
        let lp_var = tape.log_probs(logits, layout.policy_rows.clone(), layout.policy_targets.clone(), &mask);
        let new_lp = tape.value(lp_var).data().to_vec();
        let ratios = importance_ratios(&new_lp, &ro.old_logprobs)?;
        let mut seed_lp = Matrix::zeros(ratios.len(), 1);
        for (t, &r) in ratios.iter().enumerate() {
            stats.objective += surrogate_term(r, ro.advantage, cfg.clip_epsilon) / k as f64;
            let g = surrogate_grad_logp(r, ro.advantage, cfg.clip_epsilon);
            if g == 0.0 && ro.advantage != 0.0 {
                clipped += 1;
            }
            seed_lp.set(t, 0, g / k as f64);
        }
        let mut seeds = vec![(lp_var, seed_lp)];
        let need_kl = cfg.kl_beta > 0.0;
        if need_kl {
            let ref_rows = reference_rows(reference, &layout)?;
            let kl_var = tape.kl_to_reference(logits, layout.policy_rows.clone(), &ref_rows, &mask);
            let kl_sum: f64 = tape.value(kl_var).data().iter().sum();
            kl_total += kl_sum;
            stats.objective -= beta * kl_sum;
            seeds.push((kl_var, Matrix::filled(ratios.len(), 1, -beta)));
        }
        stats.policy_tokens += ratios.len();
        grads.merge(&tape.backward_seeded(&seeds, model.params.len()));
    }
    if stats.policy_tokens > 0 {
        stats.mean_kl = kl_total / stats.policy_tokens as f64;
        stats.clipped_fraction = clipped as f64 / stats.policy_tokens as f64;
    }
    Ok((stats, grads))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardRecord {
    pub iteration: usize,
    pub mean_r_total: f64,
    pub mean_r_gauss: f64,
    pub format_rate: f64,
    /// Mean `|ŝ − s|` over responses with a parsable score.
    pub mean_abs_err: f64,
    pub mean_kl: f64,
    pub objective: f64,
}

pub fn summarize_groups(iteration: usize, groups: &[GroupBatch]) -> RewardRecord {
    let all: Vec<(&Rollout, f64)> = groups
        .iter()
        .flat_map(|g| g.rollouts.iter().map(move |r| (r, g.target)))
        .collect();
    let n = all.len().max(1) as f64;
    let errs: Vec<f64> = all
        .iter()
        .filter_map(|(r, s)| r.response.parsed_score.map(|p| (p - s).abs()))
        .collect();
    RewardRecord {
        iteration,
        mean_r_total: all.iter().map(|(r, _)| r.reward.total).sum::<f64>() / n,
        mean_r_gauss: all.iter().map(|(r, _)| r.reward.gauss).sum::<f64>() / n,
        format_rate: all.iter().map(|(r, _)| r.reward.format).sum::<f64>() / n,
        mean_abs_err: if errs.is_empty() {
            f64::NAN
        } else {
            errs.iter().sum::<f64>() / errs.len() as f64
        },
        mean_kl: 0.0,
        objective: 0.0,
    }
}

/// Runs Stage II in place. `reference` is the frozen Stage I policy.
pub fn train_stage2(
    model: &mut Model,
    reference: &Model,
    vocab: &Vocab,
    records: &[QualityRecord],
    cfg: &GrpoConfig,
    state: &mut TrainState,
) -> Result<Vec<RewardRecord>> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::InvalidInput("empty Stage II corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (state.step as u64).wrapping_mul(0x9E37_79B9));
    let mut trace = Vec::new();
    let mut order: Vec<usize> = (0..records.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.records_per_iteration) {
            let old = model.clone();
            let groups = chunk
                .iter()
                .map(|&i| sample_group(&old, vocab, &records[i], cfg, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let iteration = trace.len() + 1;
            let mut rec = summarize_groups(state.step + 1, &groups);
            for update in 0..cfg.updates_per_phase {
                let mut grads = Gradients::new(model.params.len());
                let mut objective = 0.0;
                let mut kl = 0.0;
                for g in &groups {
                    let (stats, gr) = grpo_objective_grad(model, reference, g, cfg)?;
                    objective += stats.objective / groups.len() as f64;
                    kl += stats.mean_kl / groups.len() as f64;
                    grads.merge(&gr);
                }
                // Ascend J by descending −J.
                grads.scale(-1.0 / groups.len() as f64);
                if !objective.is_finite() || !grads.is_finite() {
                    return Err(Error::NonFinite {
                        step: state.step + 1,
                        detail: format!("objective={objective} at iteration {iteration}"),
                    });
                }
                state.optimizer.step(&mut model.params, &grads);
                state.step += 1;
                if update == 0 {
                    rec.objective = objective;
                    rec.mean_kl = kl;
                }
            }
            if iteration % 25 == 0 {
                log::info!(
                    "grpo iteration {iteration}: r_total={:.3} r_gauss={:.3} format={:.3} |err|={:.3}",
                    rec.mean_r_total,
                    rec.mean_r_gauss,
                    rec.format_rate,
                    rec.mean_abs_err
                );
            }
            trace.push(rec);
        }
    }
    Ok(trace)
}

pub fn write_reward_trace(path: &Path, trace: &[RewardRecord], append: bool) -> Result<()> {
    let exists = append && path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)?;
    let mut f = std::io::BufWriter::new(file);
    if !exists {
        writeln!(f, "iteration,mean_r_total,mean_r_gauss,format_rate,mean_abs_err,mean_kl,objective")?;
    }
    for r in trace {
        writeln!(
            f,
            "{},{:.6},{:.6},{:.6},{:.6},{:.8},{:.8}",
            r.iteration, r.mean_r_total, r.mean_r_gauss, r.format_rate, r.mean_abs_err, r.mean_kl, r.objective
        )?;
    }
    f.flush()?;
    Ok(())
}
