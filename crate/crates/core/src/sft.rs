//! Stage I: teacher-forced next-token prediction plus latent reconstruction.
//!
//! `L_SFT = L_NTP + λ·L_LVR`, where `L_NTP` is the mean cross-entropy over
//! discrete targets and `L_LVR` is the mean squared distance between `g(h_t)`
//! and the ROI visual token aligned to latent step `t`.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::data::TrainingExample;
use crate::error::{Error, Result};
use crate::model::{DecoderState, Model, SequenceBuilder, SequenceInputs};
use crate::params::{AdamW, AdamWConfig, Gradients, ParamStore};
use crate::roi::{build_phi, roi_to_patch_indices};
use crate::tensor::{log_softmax, Matrix};
use crate::tokenizer::{TokenId, Vocab, END_OF_TEXT, LVR_END, LVR_PLACEHOLDER, LVR_SLOT, LVR_START};

#[derive(Clone, Debug, PartialEq)]
pub struct SftConfig {
    pub lambda_lvr: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_grad_norm: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Caps the run regardless of `epochs`.
    pub max_steps: Option<usize>,
    pub seed: u64,
    /// Also supervise prompt tokens (answer-only by default).
    pub include_prompt_loss: bool,
    /// Latent steps followed by another latent step are trained to predict
    /// `<|lvr|>` (continue); the final one predicts `<|lvr_end|>`.
    pub supervise_stop: bool,
    pub latent_feed: LatentFeed,
    /// Cosine decay from `learning_rate` down to this fraction of it over the run.
    pub final_lr_fraction: f64,
}

/// Source of the inputs at latent steps 2..T during Stage I.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LatentFeed {
    /// Ground-truth ROI tokens `P(v)` of the previous step.
    #[default]
    Teacher,
    /// The model's own feedback `P(g(h))`, as at inference, without gradient.
    Model,
}

impl std::fmt::Display for LatentFeed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LatentFeed::Teacher => "teacher",
            LatentFeed::Model => "model",
        })
    }
}

impl std::str::FromStr for LatentFeed {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(LatentFeed::Teacher),
            "model" => Ok(LatentFeed::Model),
            _ => Err(Error::InvalidInput(format!("unknown latent feed {s:?}, expected teacher or model"))),
        }
    }
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            lambda_lvr: 0.1,
            learning_rate: 2e-3,
            weight_decay: 0.01,
            max_grad_norm: Some(1.0),
            epochs: 1,
            batch_size: 8,
            max_steps: None,
            seed: 0,
            include_prompt_loss: false,
            supervise_stop: true,
            latent_feed: LatentFeed::Teacher,
            final_lr_fraction: 1.0,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_lvr >= 0.0 && self.lambda_lvr.is_finite()) {
            return Err(Error::InvalidInput(format!("lambda_lvr must be >= 0, got {}", self.lambda_lvr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidInput("learning_rate must be positive".into()));
        }
        Ok(())
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

/// Mean cross-entropy over rows with a target; `None` rows are masked out.
pub fn loss_ntp(logits: &Matrix, targets: &[Option<usize>]) -> Result<f64> {
    if targets.len() != logits.rows() {
        return Err(Error::Shape(format!("{} targets for {} logit rows", targets.len(), logits.rows())));
    }
    let mut total = 0.0;
    let mut n = 0;
    for (r, t) in targets.iter().enumerate() {
        if let Some(t) = *t {
            total -= log_softmax(logits.row(r))[t];
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidInput("next-token loss over an empty mask".into()));
    }
    Ok(total / n as f64)
}

/// Mean over rows of `‖pred_i − target_i‖²`.
pub fn reconstruction_loss(pred: &Matrix, target: &Matrix) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    if pred.rows() == 0 {
        return Err(Error::InvalidInput("reconstruction loss over no latent slots".into()));
    }
    let total: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(total / pred.rows() as f64)
}

/// `L_LVR` from latent hidden states: row `t-1` of `latent_hidden` is `h_t`,
/// and `patch_targets[k]` is the visual token of the `k`-th ROI patch.
pub fn loss_lvr(model: &Model, latent_hidden: &Matrix, patch_targets: &Matrix) -> Result<f64> {
    let mut pred = Matrix::zeros(latent_hidden.rows(), model.config.visual_dim);
    for r in 0..latent_hidden.rows() {
        pred.row_mut(r).copy_from_slice(&model.latent_head(latent_hidden.row(r)));
    }
    reconstruction_loss(&pred, patch_targets)
}

pub fn loss_sft(l_ntp: f64, l_lvr: f64, lambda_lvr: f64) -> f64 {
    l_ntp + lambda_lvr * l_lvr
}

/// A Stage I example laid out for one teacher-forced pass.
#[derive(Clone, Debug)]
pub struct PreparedExample {
    pub inputs: SequenceInputs,
    pub ntp_rows: Vec<usize>,
    pub ntp_targets: Vec<usize>,
    /// Row of latent step `k` (1-based) at index `k-1`.
    pub latent_rows: Vec<usize>,
    /// Visual token aligned to each latent step.
    pub latent_targets: Matrix,
}

/// Expands the `<lvr>` placeholder into `T_v` latent steps, appends end-of-text,
/// and teacher-forces latent step `k ≥ 2` with the projected ROI token of step `k-1`.
pub fn prepare_example(model: &Model, vocab: &Vocab, ex: &TrainingExample, cfg: &SftConfig) -> Result<PreparedExample> {
    let c = &model.config;
    let grid = model.encode_image(&ex.image)?;
    let visual = model.project_visual(&grid)?;
    let indices = roi_to_patch_indices(&ex.roi, c.image_size, c.patch_size)?;
    let t_v = indices.len();
    if t_v > c.latent_budget {
        return Err(Error::InvalidInput(format!(
            "roi covers {t_v} patches, more than the latent budget {}",
            c.latent_budget
        )));
    }
    let phi = build_phi(&indices, t_v)?;
    let prompt = vocab.encode(&ex.prompt);
    let answer = vocab.encode(&ex.answer);
    if answer.iter().filter(|&&t| t == LVR_PLACEHOLDER).count() != 1 {
        return Err(Error::InvalidInput(format!("answer {:?} needs exactly one <lvr>", ex.answer)));
    }

    enum Item {
        Tok(TokenId),
        Latent(usize),
    }
    let mut items: Vec<Item> = Vec::new();
    for &t in &answer {
        if t == LVR_PLACEHOLDER {
            items.push(Item::Tok(LVR_START));
            items.extend((1..=t_v).map(Item::Latent));
            items.push(Item::Tok(LVR_END));
        } else {
            items.push(Item::Tok(t));
        }
    }
    items.push(Item::Tok(END_OF_TEXT));

    let mut b = SequenceBuilder::new(c.embed_dim);
    b.push_constants(&visual);
    let first_prompt_row = b.len();
    for t in &prompt {
        b.push_token(t.index());
    }
    let answer_start = b.len();
    let mut latent_rows = Vec::with_capacity(t_v);
    let mut latent_targets = Matrix::zeros(t_v, c.visual_dim);
    for item in &items {
        match *item {
            Item::Tok(t) => {
                b.push_token(t.index());
            }
            Item::Latent(k) => {
                if k == 1 {
                    latent_rows.push(b.push_token(LVR_SLOT.index()));
                } else {
                    let prev = phi.patch_at(k - 1).expect("bijective alignment");
                    latent_rows.push(b.push_constant(visual.row(prev)));
                }
                let patch = phi.patch_at(k).expect("bijective alignment");
                latent_targets.row_mut(k - 1).copy_from_slice(grid.token(patch));
            }
        }
    }
    let inputs = b.build();
    if inputs.len() > c.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: inputs.len(),
            max: c.max_seq_len,
        });
    }

    // Row r predicts item r+1 whenever that item is a token.
    let mut next: Vec<Option<usize>> = vec![None; inputs.len()];
    for (r, n) in next.iter_mut().enumerate().take(inputs.len() - 1) {
        *n = inputs.token_ids[r + 1];
    }
    let first_row = if cfg.include_prompt_loss {
        first_prompt_row.saturating_sub(1)
    } else {
        answer_start - 1
    };
    let mut ntp_rows = Vec::new();
    let mut ntp_targets = Vec::new();
    for (r, target) in next.iter().enumerate().skip(first_row) {
        let is_latent_row = latent_rows.contains(&r);
        let next_is_latent = latent_rows.contains(&(r + 1));
        let target = match (*target, next_is_latent) {
            // A slot input id is a placeholder, not a prediction target.
            (_, true) if is_latent_row && cfg.supervise_stop => Some(LVR_SLOT.index()),
            (_, true) => None,
            (t, false) => t,
        };
        if let Some(t) = target {
            ntp_rows.push(r);
            ntp_targets.push(t);
        }
    }
    Ok(PreparedExample {
        inputs,
        ntp_rows,
        ntp_targets,
        latent_rows,
        latent_targets,
    })
}

fn row_input(model: &Model, inputs: &SequenceInputs, row: usize) -> Vec<f64> {
    match inputs.token_ids[row] {
        Some(id) => model.token_embedding(id).to_vec(),
        None => inputs.constants.row(row).to_vec(),
    }
}

/// Replaces the inputs of latent steps 2..T with the model's own feedback
/// `P(g(h_{k-1}))`, computed by incremental decoding. Targets are unchanged.
pub fn self_feed(model: &Model, ex: &PreparedExample) -> PreparedExample {
    let mut out = ex.clone();
    let Some(&first) = ex.latent_rows.first() else {
        return out;
    };
    let mut state = DecoderState::new(model);
    for r in 0..first {
        state.step(model, &row_input(model, &ex.inputs, r), false);
    }
    for (k, &row) in ex.latent_rows.iter().enumerate() {
        let step = state.step(model, &row_input(model, &out.inputs, row), false);
        if let Some(&next) = ex.latent_rows.get(k + 1) {
            let z = model.project_vector(&model.latent_head(&step.hidden));
            out.inputs.constants.row_mut(next).copy_from_slice(&z);
        }
    }
    out
}

/// Loss terms recorded on a tape for one example.
#[derive(Clone, Copy, Debug)]
pub struct SftVars {
    pub total: Var,
    pub ntp: Var,
    pub lvr: Var,
}

pub fn sft_loss_tape(model: &Model, tape: &mut Tape, ex: &PreparedExample, lambda_lvr: f64) -> Result<SftVars> {
    if ex.ntp_rows.is_empty() {
        return Err(Error::InvalidInput("example has no discrete targets".into()));
    }
    let out = model.forward_tape(tape, &ex.inputs)?;
    let ntp = tape.cross_entropy(out.logits, ex.ntp_rows.clone(), ex.ntp_targets.clone());
    let h = tape.select_rows(out.hidden, ex.latent_rows.clone());
    let recon = model.latent_head_tape(tape, h);
    let lvr = tape.sq_dist_mean(recon, ex.latent_targets.clone());
    let total = tape.combine(&[(ntp, 1.0), (lvr, lambda_lvr)]);
    Ok(SftVars { total, ntp, lvr })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub l_ntp: f64,
    pub l_lvr: f64,
    pub l_sft: f64,
    pub learning_rate: f64,
}

/// Loss values and gradients averaged over a batch.
pub fn batch_loss_and_grads(
    model: &Model,
    batch: &[&PreparedExample],
    lambda_lvr: f64,
    feed: LatentFeed,
) -> Result<(LossRecord, Gradients)> {
    let mut grads = Gradients::new(model.params.len());
    let (mut ntp, mut lvr, mut total) = (0.0, 0.0, 0.0);
    let scale = 1.0 / batch.len() as f64;
    for &ex in batch {
        let fed;
        let ex = match feed {
            LatentFeed::Teacher => ex,
            LatentFeed::Model => {
                fed = self_feed(model, ex);
                &fed
            }
        };
        let mut tape = Tape::new();
        let vars = sft_loss_tape(model, &mut tape, ex, lambda_lvr)?;
        ntp += tape.scalar(vars.ntp) * scale;
        lvr += tape.scalar(vars.lvr) * scale;
        total += tape.scalar(vars.total) * scale;
        let mut g = tape.backward(vars.total, model.params.len());
        g.scale(scale);
        grads.merge(&g);
    }
    Ok((
        LossRecord {
            step: 0,
            l_ntp: ntp,
            l_lvr: lvr,
            l_sft: total,
            learning_rate: 0.0,
        },
        grads,
    ))
}

/// Mean `(L_NTP, L_LVR, L_SFT)` over a set of prepared examples, without gradients.
pub fn evaluate_losses(model: &Model, examples: &[PreparedExample], lambda_lvr: f64) -> Result<(f64, f64, f64)> {
    let mut acc = (0.0, 0.0, 0.0);
    for ex in examples {
        let mut tape = Tape::new();
        let v = sft_loss_tape(model, &mut tape, ex, lambda_lvr)?;
        acc.0 += tape.scalar(v.ntp);
        acc.1 += tape.scalar(v.lvr);
        acc.2 += tape.scalar(v.total);
    }
    let n = examples.len().max(1) as f64;
    Ok((acc.0 / n, acc.1 / n, acc.2 / n))
}

/// Optimizer plus the global step counter, carried across resumed runs.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub optimizer: AdamW,
    pub step: usize,
}

impl TrainState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            optimizer: AdamW::new(config),
            step: 0,
        }
    }
}

pub fn planned_steps(n_examples: usize, cfg: &SftConfig) -> usize {
    let per_epoch = n_examples.div_ceil(cfg.batch_size);
    let steps = cfg.epochs * per_epoch;
    cfg.max_steps.map_or(steps, |m| m.min(steps))
}

/// Runs Stage I. The returned trace has one record per optimizer step, numbered
/// from `state.step`. Frozen parameters are never touched.
pub fn train_stage1(
    model: &mut Model,
    vocab: &Vocab,
    corpus: &[TrainingExample],
    cfg: &SftConfig,
    state: &mut TrainState,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidInput("empty Stage I corpus".into()));
    }
    let prepared = corpus
        .iter()
        .map(|ex| prepare_example(model, vocab, ex, cfg))
        .collect::<Result<Vec<_>>>()?;
    train_stage1_prepared(model, &prepared, cfg, state)
}

pub fn train_stage1_prepared(
    model: &mut Model,
    prepared: &[PreparedExample],
    cfg: &SftConfig,
    state: &mut TrainState,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    let total_steps = planned_steps(prepared.len(), cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (state.step as u64).wrapping_mul(0x9E37_79B9));
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut trace = Vec::with_capacity(total_steps);
    let mut cursor = order.len();
    for i in 0..total_steps {
        let progress = i as f64 / total_steps.max(1) as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        state.optimizer.config.learning_rate =
            cfg.learning_rate * (cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * cosine);
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let batch: Vec<&PreparedExample> = order[cursor..end].iter().map(|&i| &prepared[i]).collect();
        cursor = end;
        let (mut rec, grads) = batch_loss_and_grads(model, &batch, cfg.lambda_lvr, cfg.latent_feed)?;
        if !rec.l_sft.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite {
                step: state.step + 1,
                detail: format!("L_NTP={} L_LVR={}", rec.l_ntp, rec.l_lvr),
            });
        }
        state.optimizer.step(&mut model.params, &grads);
        state.step += 1;
        rec.step = state.step;
        rec.learning_rate = state.optimizer.config.learning_rate;
        if state.step.is_multiple_of(100) {
            log::info!(
                "sft step {}: L_NTP={:.4} L_LVR={:.4} L_SFT={:.4}",
                rec.step,
                rec.l_ntp,
                rec.l_lvr,
                rec.l_sft
            );
        }
        trace.push(rec);
    }
    Ok(trace)
}

pub fn write_loss_trace(path: &Path, trace: &[LossRecord], append: bool) -> Result<()> {
    let exists = append && path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)?;
    let mut f = std::io::BufWriter::new(file);
    if !exists {
        writeln!(f, "step,L_NTP,L_LVR,L_SFT,learning_rate")?;
    }
    for r in trace {
        writeln!(f, "{},{:.8},{:.8},{:.8},{:e}", r.step, r.l_ntp, r.l_lvr, r.l_sft, r.learning_rate)?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: usize,
    /// Parameter name, flat index, analytic and numeric derivative at the worst probe.
    pub worst: Option<(String, usize, f64, f64)>,
    pub all_finite: bool,
}

/// Central-difference check of `grads` against `loss` on random trainable
/// coordinates. Relative error uses the denominator `max(|a|, |n|, 1e-8)`.
pub fn grad_check<R: Rng>(
    store: &mut ParamStore,
    grads: &Gradients,
    mut loss: impl FnMut(&ParamStore) -> f64,
    probes: usize,
    eps: f64,
    rng: &mut R,
) -> GradCheckReport {
    let trainable = store.trainable_ids();
    let sizes: Vec<usize> = trainable.iter().map(|&id| store.value(id).len()).collect();
    let total: usize = sizes.iter().sum();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        probes,
        worst: None,
        all_finite: true,
    };
    for _ in 0..probes {
        let mut k = rng.random_range(0..total);
        let mut which = 0;
        while k >= sizes[which] {
            k -= sizes[which];
            which += 1;
        }
        let id = trainable[which];
        let analytic = grads.get(id).map_or(0.0, |g| g.data()[k]);
        let orig = store.value(id).data()[k];
        store.value_mut(id).data_mut()[k] = orig + eps;
        let plus = loss(store);
        store.value_mut(id).data_mut()[k] = orig - eps;
        let minus = loss(store);
        store.value_mut(id).data_mut()[k] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let rel = if analytic.is_finite() && numeric.is_finite() {
            (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
        } else {
            report.all_finite = false;
            f64::INFINITY
        };
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel >= report.max_rel_error {
                report.worst = Some((store.get(id).name.clone(), k, analytic, numeric));
            }
        }
    }
    report
}
