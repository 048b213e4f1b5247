//! Answer parsing and structural validation of decoded responses.

use crate::tokenizer::{TokenId, Vocab, ANSWER_CLOSE, ANSWER_OPEN, LVR_END, LVR_START};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FormatVerdict {
    Valid,
    Invalid,
}

impl FormatVerdict {
    pub fn is_valid(self) -> bool {
        self == FormatVerdict::Valid
    }
}

/// Token span strictly inside the first `<answer> … </answer>` pair.
fn answer_body(tokens: &[TokenId]) -> Option<(usize, &[TokenId])> {
    let open = tokens.iter().position(|&t| t == ANSWER_OPEN)?;
    let close = tokens[open + 1..].iter().position(|&t| t == ANSWER_CLOSE)? + open + 1;
    Some((open, &tokens[open + 1..close]))
}

/// The numeral between the first matched answer-tag pair. No clamping.
pub fn parse_answer(vocab: &Vocab, tokens: &[TokenId]) -> Option<f64> {
    let (_, body) = answer_body(tokens)?;
    if body.is_empty() || !body.iter().all(|&t| vocab.is_numeral(t)) {
        return None;
    }
    let text: String = body.iter().map(|&t| vocab.token(t)).collect();
    text.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Position of the single latent span, if the response has exactly one.
fn single_segment(tokens: &[TokenId]) -> Option<(usize, usize)> {
    let starts: Vec<usize> = positions(tokens, LVR_START);
    let ends: Vec<usize> = positions(tokens, LVR_END);
    match (starts.as_slice(), ends.as_slice()) {
        ([s], [e]) if s < e => Some((*s, *e)),
        _ => None,
    }
}

fn positions(tokens: &[TokenId], needle: TokenId) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == needle)
        .map(|(i, _)| i)
        .collect()
}

/// Valid iff there is exactly one latent span, a numeric answer, and the span
/// closes before the answer opens.
pub fn validate_format(vocab: &Vocab, tokens: &[TokenId]) -> FormatVerdict {
    let Some((_, end)) = single_segment(tokens) else {
        return FormatVerdict::Invalid;
    };
    let Some((open, _)) = answer_body(tokens) else {
        return FormatVerdict::Invalid;
    };
    if end < open && parse_answer(vocab, tokens).is_some() {
        FormatVerdict::Valid
    } else {
        FormatVerdict::Invalid
    }
}

/// Like [`validate_format`] but accepts non-numeric answer bodies; used for
/// supervised targets that name a distortion or an object.
pub fn validate_structure(tokens: &[TokenId]) -> FormatVerdict {
    match (single_segment(tokens), answer_body(tokens)) {
        (Some((_, end)), Some((open, body))) if end < open && !body.is_empty() => FormatVerdict::Valid,
        _ => FormatVerdict::Invalid,
    }
}
