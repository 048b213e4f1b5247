//! Fixed word-level vocabulary.
//!
//! Numerals are split into single characters (`0`-`9`, `.`, `-`) so any decimal
//! renders and re-parses exactly. Special tags are matched before word splitting.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

pub const PAD: TokenId = TokenId(0);
pub const UNK: TokenId = TokenId(1);
pub const LVR_START: TokenId = TokenId(2);
pub const LVR_END: TokenId = TokenId(3);
pub const LVR_SLOT: TokenId = TokenId(4);
pub const END_OF_TEXT: TokenId = TokenId(5);
pub const ANSWER_OPEN: TokenId = TokenId(6);
pub const ANSWER_CLOSE: TokenId = TokenId(7);
/// The `<lvr>` marker in answer templates; expands into a latent segment.
pub const LVR_PLACEHOLDER: TokenId = TokenId(8);

const SPECIALS: [&str; 9] = [
    "<pad>",
    "<unk>",
    "<|lvr_start|>",
    "<|lvr_end|>",
    "<|lvr|>",
    "<|endoftext|>",
    "<answer>",
    "</answer>",
    "<lvr>",
];

const NUMERAL_CHARS: [&str; 12] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9", ".", "-"];

const PUNCTUATION: [&str; 3] = ["?", ",", ":"];

const WORDS: &[&str] = &[
    // prompts
    "what", "which", "where", "how", "is", "are", "there", "any", "in", "of", "from", "to",
    "and", "its", "it", "the", "a", "this", "image", "picture", "photo", "identify",
    "describe", "name", "find", "rate", "give", "please", "score", "quality", "good",
    "strong", "level", "type", "severity", "distortion", "degradation", "affects", "present",
    "object", "shape", "visible", "locate", "overall", "assess", "predict",
    // distortion taxonomy
    "noise", "compression", "blur", "photometric", "null", "no", "clean",
    "slight", "moderate", "obvious", "serious", "catastrophic",
    // shapes
    "circle", "square", "triangle", "diamond",
];

#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let tokens: Vec<String> = SPECIALS
            .iter()
            .chain(NUMERAL_CHARS.iter())
            .chain(PUNCTUATION.iter())
            .chain(WORDS.iter())
            .map(|s| s.to_string())
            .collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), TokenId(i as u32)))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Panics on tokens outside the vocabulary; for building fixed templates.
    pub fn expect_id(&self, token: &str) -> TokenId {
        self.id(token)
            .unwrap_or_else(|| panic!("token {token:?} missing from vocabulary"))
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id.index()).map_or("<unk>", String::as_str)
    }

    pub fn is_numeral(&self, id: TokenId) -> bool {
        let t = self.token(id);
        t.len() == 1 && NUMERAL_CHARS.contains(&t)
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        let mut rest = text;
        'outer: while !rest.is_empty() {
            let c = rest.chars().next().expect("non-empty");
            if c.is_whitespace() {
                rest = &rest[c.len_utf8()..];
                continue;
            }
            if c == '<' {
                for (i, s) in SPECIALS.iter().enumerate() {
                    if rest.starts_with(s) {
                        out.push(TokenId(i as u32));
                        rest = &rest[s.len()..];
                        continue 'outer;
                    }
                }
            }
            if c.is_ascii_digit() || c == '.' || c == '-' {
                out.push(self.expect_id(&c.to_string()));
                rest = &rest[1..];
                continue;
            }
            if PUNCTUATION.contains(&c.to_string().as_str()) {
                out.push(self.expect_id(&c.to_string()));
                rest = &rest[1..];
                continue;
            }
            if c.is_alphabetic() {
                let end = rest
                    .char_indices()
                    .find(|&(_, ch)| !ch.is_alphabetic())
                    .map_or(rest.len(), |(i, _)| i);
                let word = rest[..end].to_lowercase();
                out.push(self.id(&word).unwrap_or(UNK));
                rest = &rest[end..];
                continue;
            }
            out.push(UNK);
            rest = &rest[c.len_utf8()..];
        }
        out
    }

    /// Renders ids as text; adjacent numeral characters are joined without spaces,
    /// as are answer tags touching a numeral.
    pub fn render(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        let mut prev: Option<TokenId> = None;
        for &id in ids {
            if let Some(p) = prev {
                let tight = (self.is_numeral(p) && self.is_numeral(id))
                    || (p == ANSWER_OPEN && self.is_numeral(id))
                    || (self.is_numeral(p) && id == ANSWER_CLOSE);
                if !tight {
                    out.push(' ');
                }
            }
            out.push_str(self.token(id));
            prev = Some(id);
        }
        out
    }
}

/// Canonical one-decimal rendering used for score targets.
pub fn render_score(score: f64) -> String {
    format!("{score:.1}")
}
