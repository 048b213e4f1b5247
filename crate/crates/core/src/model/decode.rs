//! Incremental two-mode decoding with a key/value cache.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Model, SequenceBuilder, SequenceInputs};
use crate::autograd::TokenMask;
use crate::format::{parse_answer, validate_format};
use crate::tensor::{dot, gelu, layer_norm_row, softmax_in_place, Matrix};
use crate::tokenizer::{TokenId, Vocab, END_OF_TEXT, LVR_END, LVR_PLACEHOLDER, LVR_SLOT, LVR_START, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecoderMode {
    Text,
    Latent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    /// `0.0` selects greedy decoding.
    pub temperature: f64,
    pub max_new_tokens: usize,
    /// Total latent steps allowed per response.
    pub latent_budget: usize,
    /// When set, a latent segment ends early once `<|lvr_end|>` is the argmax of
    /// the latent-step logits; otherwise every segment runs to the budget.
    pub learnable_stop: bool,
    pub record_attention: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            max_new_tokens: 32,
            latent_budget: 8,
            learnable_stop: true,
            record_attention: false,
        }
    }
}

/// Tokens that text mode may never emit.
pub fn text_mask() -> TokenMask {
    TokenMask::excluding([PAD.index(), LVR_SLOT.index(), LVR_PLACEHOLDER.index()])
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub logits: Vec<f64>,
    pub hidden: Vec<f64>,
    /// Attention over positions `0..=pos`, averaged over layers and heads.
    pub attention: Option<Vec<f64>>,
}

/// Running decoder state: cached keys and values for every layer.
#[derive(Clone, Debug)]
pub struct DecoderState {
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
    pub mode: DecoderMode,
    pub latent_steps_taken: usize,
}

impl DecoderState {
    pub fn new(model: &Model) -> Self {
        let l = model.config.num_layers;
        Self {
            keys: vec![Vec::new(); l],
            values: vec![Vec::new(); l],
            mode: DecoderMode::Text,
            latent_steps_taken: 0,
        }
    }

    /// Number of positions consumed so far.
    pub fn pos(&self) -> usize {
        self.keys.first().map_or(0, Vec::len)
    }

    /// Feeds one input embedding at the next position.
    pub fn step(&mut self, model: &Model, input: &[f64], record_attention: bool) -> StepOutput {
        let c = &model.config;
        let ps = &model.params;
        let ids = &model.ids;
        let pos = self.pos();
        assert!(pos < c.max_seq_len, "decoder ran past max_seq_len");
        let d = c.embed_dim;
        let hd = c.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();

        let mut x: Vec<f64> = input
            .iter()
            .zip(ps.value(ids.pos_emb).row(pos))
            .map(|(a, b)| a + b)
            .collect();
        let mut attn_avg = record_attention.then(|| vec![0.0; pos + 1]);
        let norm = 1.0 / (c.num_layers * c.num_heads) as f64;
        let mut h = vec![0.0; d];
        for (li, layer) in ids.layers.iter().enumerate() {
            layer_norm_row(
                &x,
                ps.value(layer.ln1_g).row(0),
                ps.value(layer.ln1_b).row(0),
                &mut h,
            );
            let q = ps.value(layer.wq).vec_mul(&h);
            self.keys[li].push(ps.value(layer.wk).vec_mul(&h));
            self.values[li].push(ps.value(layer.wv).vec_mul(&h));
            let keys = &self.keys[li];
            let values = &self.values[li];
            let mut heads = vec![0.0; d];
            let mut p = vec![0.0; pos + 1];
            for head in 0..c.num_heads {
                let r = head * hd..(head + 1) * hd;
                for (j, k) in keys.iter().enumerate() {
                    p[j] = dot(&q[r.clone()], &k[r.clone()]) * scale;
                }
                softmax_in_place(&mut p);
                for (j, v) in values.iter().enumerate() {
                    for (o, &vv) in heads[r.clone()].iter_mut().zip(&v[r.clone()]) {
                        *o += p[j] * vv;
                    }
                }
                if let Some(avg) = attn_avg.as_mut() {
                    for (a, &pj) in avg.iter_mut().zip(&p) {
                        *a += pj * norm;
                    }
                }
            }
            let attn = ps.value(layer.wo).vec_mul(&heads);
            for ((xi, a), b) in x.iter_mut().zip(attn).zip(ps.value(layer.bo).row(0)) {
                *xi += a + b;
            }
            layer_norm_row(
                &x,
                ps.value(layer.ln2_g).row(0),
                ps.value(layer.ln2_b).row(0),
                &mut h,
            );
            let mut m = ps.value(layer.w1).vec_mul(&h);
            for (mi, b) in m.iter_mut().zip(ps.value(layer.b1).row(0)) {
                *mi = gelu(*mi + b);
            }
            let m = ps.value(layer.w2).vec_mul(&m);
            for ((xi, a), b) in x.iter_mut().zip(m).zip(ps.value(layer.b2).row(0)) {
                *xi += a + b;
            }
        }
        let mut hidden = vec![0.0; d];
        layer_norm_row(
            &x,
            ps.value(ids.lnf_g).row(0),
            ps.value(ids.lnf_b).row(0),
            &mut hidden,
        );
        let mut logits = ps.value(ids.lm_w).vec_mul(&hidden);
        for (l, b) in logits.iter_mut().zip(ps.value(ids.lm_b).row(0)) {
            *l += b;
        }
        StepOutput {
            logits,
            hidden,
            attention: attn_avg,
        }
    }
}

/// One position of a generated response, in sequence order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Token(TokenId),
    Latent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Response {
    /// Rows before the first generated position (visual tokens plus prompt).
    pub prefix_len: usize,
    pub slots: Vec<Slot>,
    /// The token slots, in order.
    pub tokens: Vec<TokenId>,
    /// `false` for the structural `<|lvr_end|>` that closes a latent segment.
    pub policy_mask: Vec<bool>,
    /// `log π(token)` at generation time; `0.0` for structural tokens.
    pub logprobs: Vec<f64>,
    /// Hidden state `h_t` at each latent step.
    pub latent_trace: Vec<Vec<f64>>,
    /// Realized feedback `P(g(h_t))` for each latent step.
    pub latent_inputs: Vec<Vec<f64>>,
    pub segment_lengths: Vec<usize>,
    pub forced_close: bool,
    pub truncated: bool,
    pub parsed_score: Option<f64>,
    pub format_valid: bool,
    /// Per slot: attention from that position over all earlier positions.
    pub attention: Option<Vec<Vec<f64>>>,
}

/// Replayed sequence plus where each policy token's distribution lives.
#[derive(Clone, Debug)]
pub struct ReplayLayout {
    pub inputs: SequenceInputs,
    /// Row whose logits predict the policy token.
    pub policy_rows: Vec<usize>,
    pub policy_targets: Vec<usize>,
}

impl Response {
    pub fn num_latent_steps(&self) -> usize {
        self.latent_trace.len()
    }

    /// Emitted tokens outside latent segments, excluding end-of-text.
    pub fn visible_tokens(&self) -> usize {
        self.tokens.iter().filter(|&&t| t != END_OF_TEXT).count()
    }

    /// Policy tokens, counted as `T_y` in the policy objective.
    pub fn num_policy_tokens(&self) -> usize {
        self.policy_mask.iter().filter(|&&p| p).count()
    }

    pub fn policy_logprobs(&self) -> Vec<f64> {
        self.logprobs
            .iter()
            .zip(&self.policy_mask)
            .filter(|(_, &m)| m)
            .map(|(&l, _)| l)
            .collect()
    }

    /// Rebuilds the teacher-forced input for this response. Latent feedback is
    /// replayed from the recorded trace as constants.
    pub fn replay(&self, model: &Model, visual: &Matrix, prompt: &[TokenId]) -> ReplayLayout {
        let mut b = SequenceBuilder::new(model.config.embed_dim);
        b.push_constants(visual);
        for t in prompt {
            b.push_token(t.index());
        }
        debug_assert_eq!(b.len(), self.prefix_len);
        let mut policy_rows = Vec::new();
        let mut policy_targets = Vec::new();
        let mut token_idx = 0;
        let mut latent_idx = 0;
        let mut prev_latent = false;
        let last = self.slots.len().saturating_sub(1);
        for (i, slot) in self.slots.iter().enumerate() {
            let row = self.prefix_len + i;
            match *slot {
                Slot::Token(t) => {
                    if self.policy_mask[token_idx] {
                        policy_rows.push(row - 1);
                        policy_targets.push(t.index());
                    }
                    token_idx += 1;
                    prev_latent = false;
                    // The final token's output predicts nothing and may never have been fed.
                    if i < last {
                        b.push_token(t.index());
                    }
                }
                Slot::Latent => {
                    if prev_latent {
                        b.push_constant(&self.latent_inputs[latent_idx - 1]);
                    } else {
                        b.push_token(LVR_SLOT.index());
                    }
                    latent_idx += 1;
                    prev_latent = true;
                }
            }
        }
        ReplayLayout {
            inputs: b.build(),
            policy_rows,
            policy_targets,
        }
    }
}

fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

fn sample_index<R: Rng + ?Sized>(logits: &[f64], mask: &TokenMask, temperature: f64, rng: &mut R) -> usize {
    if temperature <= 0.0 {
        return logits
            .iter()
            .enumerate()
            .filter(|(i, _)| !mask.is_excluded(*i))
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0;
    }
    let scaled: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    let probs = mask.softmax(&scaled);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut chosen = None;
    for (i, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            acc += p;
            chosen = Some(i);
            if u < acc {
                return i;
            }
        }
    }
    chosen.expect("masked softmax has support")
}

/// Autoregressive two-mode decoding after a visual-plus-prompt prefix.
pub fn generate<R: Rng + ?Sized>(
    model: &Model,
    vocab: &Vocab,
    visual: &Matrix,
    prompt: &[TokenId],
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Response {
    let rec = cfg.record_attention;
    let mask = text_mask();
    let mut state = DecoderState::new(model);
    let mut last = None;
    for r in 0..visual.rows() {
        last = Some(state.step(model, visual.row(r), false));
    }
    for t in prompt {
        last = Some(state.step(model, model.token_embedding(t.index()), false));
    }
    let prefix_len = state.pos();
    let mut last = last.expect("non-empty prefix");
    let max_len = model.config.max_seq_len;

    let mut resp = Response {
        prefix_len,
        slots: Vec::new(),
        tokens: Vec::new(),
        policy_mask: Vec::new(),
        logprobs: Vec::new(),
        latent_trace: Vec::new(),
        latent_inputs: Vec::new(),
        segment_lengths: Vec::new(),
        forced_close: false,
        truncated: false,
        parsed_score: None,
        format_valid: false,
        attention: rec.then(Vec::new),
    };
    let attn_of = |out: &StepOutput, resp: &mut Response| {
        if let (Some(all), Some(a)) = (resp.attention.as_mut(), out.attention.as_ref()) {
            all.push(a.clone());
        }
    };
    let mut seg_len = 0;
    let mut next_latent_input: Vec<f64> = Vec::new();

    loop {
        if resp.slots.len() >= cfg.max_new_tokens {
            resp.truncated = true;
            break;
        }
        match state.mode {
            DecoderMode::Text => {
                let id = sample_index(&last.logits, &mask, cfg.temperature, rng);
                let lp = mask.log_softmax(&last.logits)[id];
                let tok = TokenId(id as u32);
                resp.slots.push(Slot::Token(tok));
                resp.tokens.push(tok);
                resp.policy_mask.push(true);
                resp.logprobs.push(lp);
                if tok == END_OF_TEXT {
                    break;
                }
                if state.pos() >= max_len {
                    resp.truncated = true;
                    break;
                }
                last = state.step(model, model.token_embedding(id), rec);
                attn_of(&last, &mut resp);
                if tok == LVR_START {
                    state.mode = DecoderMode::Latent;
                    seg_len = 0;
                    next_latent_input = model.token_embedding(LVR_SLOT.index()).to_vec();
                }
            }
            DecoderMode::Latent => {
                let exhausted = state.latent_steps_taken >= cfg.latent_budget;
                let mut close = exhausted;
                if !exhausted {
                    if state.pos() >= max_len {
                        resp.truncated = true;
                        break;
                    }
                    let out = state.step(model, &next_latent_input, rec);
                    attn_of(&out, &mut resp);
                    let z = model.project_vector(&model.latent_head(&out.hidden));
                    resp.slots.push(Slot::Latent);
                    resp.latent_trace.push(out.hidden.clone());
                    resp.latent_inputs.push(z.clone());
                    seg_len += 1;
                    state.latent_steps_taken += 1;
                    let stop = cfg.learnable_stop && argmax(&out.logits) == LVR_END.index();
                    let at_budget = state.latent_steps_taken >= cfg.latent_budget;
                    // The closing token needs a slot of its own.
                    let out_of_room = resp.slots.len() + 1 >= cfg.max_new_tokens;
                    close = stop || at_budget || out_of_room;
                    if (at_budget || out_of_room) && !stop {
                        resp.forced_close = true;
                    }
                    next_latent_input = z;
                } else {
                    resp.forced_close = true;
                }
                if close {
                    resp.segment_lengths.push(seg_len);
                    resp.slots.push(Slot::Token(LVR_END));
                    resp.tokens.push(LVR_END);
                    resp.policy_mask.push(false);
                    resp.logprobs.push(0.0);
                    state.mode = DecoderMode::Text;
                    if state.pos() >= max_len {
                        resp.truncated = true;
                        break;
                    }
                    last = state.step(model, model.token_embedding(LVR_END.index()), rec);
                    attn_of(&last, &mut resp);
                }
            }
        }
    }
    if state.mode == DecoderMode::Latent {
        resp.segment_lengths.push(seg_len);
    }
    resp.parsed_score = parse_answer(vocab, &resp.tokens);
    resp.format_valid = validate_format(vocab, &resp.tokens).is_valid() && !resp.truncated;
    resp
}
