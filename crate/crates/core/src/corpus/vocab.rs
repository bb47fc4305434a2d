//! Vocabulary and the greedy longest-match subword tokenizer.

use std::collections::HashMap;

use crate::corpus::world::{Glyph, BRIGHTNESS_WORDS, COL_WORDS, ROW_WORDS, SIZE_WORDS};
use crate::error::{Error, Result};
use crate::masking::{TokenizedReport, CLS_ID, PAD_ID, UNK_ID};

pub const RESERVED: [&str; 4] = ["[PAD]", "[CLS]", "[MASK]", "[UNK]"];
pub const CONTINUATION: &str = "##";

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved tokens first, then `tokens` in order. Duplicates and
    /// reserved names are rejected.
    pub fn new<S: AsRef<str>>(tokens: &[S]) -> Result<Self> {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED.iter().copied().chain(tokens.iter().map(|s| s.as_ref())) {
            if t.is_empty() || t.chars().any(char::is_whitespace) || v.index.contains_key(t) {
                return Err(Error::invalid("Vocabulary::new", format!("bad or duplicate token {t:?}")));
            }
            v.index.insert(t.to_string(), v.tokens.len());
            v.tokens.push(t.to_string());
        }
        Ok(v)
    }

    /// The closed word set of the synthetic grammar plus a subword tail.
    /// `rectangle` only exists as `rect ##angle`.
    pub fn synthetic() -> Self {
        let mut words: Vec<&str> = vec!["a", "in", "the", "region"];
        words.extend(SIZE_WORDS);
        words.extend(BRIGHTNESS_WORDS);
        words.extend(ROW_WORDS);
        words.extend(COL_WORDS);
        words.extend(Glyph::ALL.iter().filter(|&&g| g != Glyph::Rectangle).map(|g| g.word()));
        words.extend(["rect", "##angle", "##s", "##er", "##est", "##ly", "un", "##render", "##able"]);
        Vocabulary::new(&words).expect("static vocabulary is well formed")
    }

    /// One token per line; line `i` is id `i`.
    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() || lines[..RESERVED.len()] != RESERVED {
            return Err(Error::invalid("Vocabulary::parse", "reserved tokens missing from the first lines"));
        }
        Vocabulary::new(&lines[RESERVED.len()..])
    }

    pub fn render(&self) -> String {
        self.tokens.iter().map(|t| format!("{t}\n")).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Pieces of one whitespace-free word. A word with no full match
    /// becomes a single `[UNK]`; reserved names in text never match.
    fn word_pieces(&self, word: &str, out: &mut Vec<usize>) {
        let chars: Vec<(usize, char)> = word.char_indices().collect();
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while end > start {
                let lo = chars[start].0;
                let hi = chars.get(end).map_or(word.len(), |c| c.0);
                let piece = &word[lo..hi];
                let key = if start == 0 {
                    piece.to_string()
                } else {
                    format!("{CONTINUATION}{piece}")
                };
                if let Some(id) = self.id(&key).filter(|&id| id >= RESERVED.len()) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    out.push(UNK_ID);
                    return;
                }
            }
        }
        out.extend(pieces);
    }

    /// `[CLS]` + pieces, truncated or padded to `len`.
    pub fn tokenize(&self, text: &str, len: usize) -> TokenizedReport {
        let mut ids = vec![CLS_ID];
        for word in text.split_whitespace() {
            self.word_pieces(word, &mut ids);
        }
        ids.truncate(len);
        let valid_len = ids.len();
        ids.resize(len, PAD_ID);
        TokenizedReport {
            valid: (0..len).map(|i| i < valid_len).collect(),
            ids,
            vocab_size: self.len(),
        }
    }

    /// Inverse of [`tokenize`](Self::tokenize) on in-vocabulary text:
    /// reserved tokens except `[MASK]`/`[UNK]` are dropped and continuation
    /// pieces are glued to their word.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == PAD_ID || id == CLS_ID {
                continue;
            }
            let tok = self.token(id).unwrap_or("[UNK]");
            match tok.strip_prefix(CONTINUATION) {
                Some(rest) if !out.is_empty() => out.push_str(rest),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        out
    }
}
