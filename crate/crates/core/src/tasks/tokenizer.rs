//! Character-level tokenizer with a handful of atomic chat-marker tokens.
//!
//! Vocabulary stays under 128: five special tokens followed by a fixed
//! character set (digits, letters, punctuation used by prompts and CoT).

use std::collections::HashMap;

use crate::error::{DlabError, Result};

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const SYS: u32 = 2;
pub const USER: u32 = 3;
pub const ASST: u32 = 4;

pub const PAD_STR: &str = "<|pad|>";
pub const EOS_STR: &str = "<|end|>";
pub const SYS_STR: &str = "<|system|>";
pub const USER_STR: &str = "<|user|>";
pub const ASST_STR: &str = "<|assistant|>";

const MARKERS: [(&str, u32); 5] = [
    (PAD_STR, PAD),
    (EOS_STR, EOS),
    (SYS_STR, SYS),
    (USER_STR, USER),
    (ASST_STR, ASST),
];

const CHARSET: &str = concat!(
    "0123456789",
    "abcdefghijklmnopqrstuvwxyz",
    "ABCDEFGHIJKLMNOPQRSTUVWXYZ",
    " \n.,:;\"'?!#$\\{}[]()+-*=/"
);

pub struct Tokenizer {
    pieces: Vec<String>,
    char_ids: HashMap<char, u32>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tokenizer {
    pub fn new() -> Self {
        let mut pieces: Vec<String> = MARKERS.iter().map(|(s, _)| s.to_string()).collect();
        let mut char_ids = HashMap::new();
        for c in CHARSET.chars() {
            char_ids.insert(c, pieces.len() as u32);
            pieces.push(c.to_string());
        }
        Tokenizer { pieces, char_ids }
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    /// Encode text; chat markers match atomically, everything else per char.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(text.len());
        let mut rest = text;
        'outer: while !rest.is_empty() {
            for (lit, id) in MARKERS {
                if let Some(stripped) = rest.strip_prefix(lit) {
                    out.push(id);
                    rest = stripped;
                    continue 'outer;
                }
            }
            let c = rest.chars().next().expect("non-empty");
            match self.char_ids.get(&c) {
                Some(&id) => out.push(id),
                None => {
                    return Err(DlabError::data(format!(
                        "character {c:?} is outside the tokenizer vocabulary"
                    )))
                }
            }
            rest = &rest[c.len_utf8()..];
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if let Some(p) = self.pieces.get(id as usize) {
                out.push_str(p);
            }
        }
        out
    }

    /// Decode skipping special tokens; used to turn sampled ids into text.
    pub fn decode_text(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id > ASST {
                if let Some(p) = self.pieces.get(id as usize) {
                    out.push_str(p);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_stays_small() {
        let tok = Tokenizer::new();
        assert!(tok.vocab_size() < 128, "vocab {}", tok.vocab_size());
    }

    #[test]
    fn markers_are_atomic() {
        let tok = Tokenizer::new();
        let ids = tok.encode("<|system|>hi<|end|>").unwrap();
        assert_eq!(ids[0], SYS);
        assert_eq!(*ids.last().unwrap(), EOS);
        assert_eq!(ids.len(), 4);
        assert_eq!(tok.decode(&ids), "<|system|>hi<|end|>");
    }

    #[test]
    fn roundtrips_cot_text() {
        let tok = Tokenizer::new();
        let text = "## Step 1: 12 + 7 = 19\nTherefore, the final answer is: $\\boxed{19}$.";
        let ids = tok.encode(text).unwrap();
        assert_eq!(tok.decode(&ids), text);
    }

    #[test]
    fn rejects_unknown_characters() {
        let tok = Tokenizer::new();
        assert!(tok.encode("héllo").is_err());
    }
}
