//! Word-level vocabulary and the prompt/target string conventions.
//!
//! Everything is lowercased and stripped of punctuation before it is split
//! on whitespace, so answer comparisons downstream are case-insensitive.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
/// The answer/explanation separator has a fixed id so output parsing never
/// depends on corpus statistics.
pub const BECAUSE: TokenId = 4;

pub const SEPARATOR_WORD: &str = "because";
const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", SEPARATOR_WORD];

const PROMPT_HEAD: &str = "answer the question by reasoning step by step. question: ";
const PROMPT_TAIL: &str = " answer:";

/// Lowercases, drops punctuation and collapses whitespace.
pub fn normalize(text: &str) -> String {
    words(text).join(" ")
}

/// The normalized words of `text`.
pub fn words(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds the vocabulary from raw strings. Words seen fewer than
    /// `min_count` times are left out (they tokenize to UNK).
    pub fn build<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Invalid("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in corpus {
            for w in words(line.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count && !RESERVED.contains(&w.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(w, _)| w))
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        words(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    /// Joins tokens with single spaces, skipping PAD/BOS/EOS.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids.iter().filter(|&&id| !matches!(id, PAD | BOS | EOS)) {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(self.token(id));
        }
        out
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            let _ = writeln!(s, "{t}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Invalid("vocabulary file lacks the reserved header".into()));
        }
        let vocab = Self::from_tokens(tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::Invalid("vocabulary file has duplicate tokens".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// The instruction prompt with the question substituted, normalized to
/// lowercase.
pub fn format_prompt(question: &str) -> Result<String> {
    let q = question.trim();
    if q.is_empty() {
        return Err(Error::Invalid("empty question".into()));
    }
    Ok(format!("{PROMPT_HEAD}{}{PROMPT_TAIL}", q.to_lowercase()))
}

/// `answer because explanation`.
pub fn format_target(answer: &str, explanation: &str) -> Result<String> {
    let (a, e) = (answer.trim(), explanation.trim());
    if a.is_empty() || e.is_empty() {
        return Err(Error::Invalid("answer and explanation must both be non-empty".into()));
    }
    Ok(format!("{a} {SEPARATOR_WORD} {e}"))
}

/// Generated output split into its two parts.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TargetString {
    pub answer: Vec<TokenId>,
    pub explanation: Vec<TokenId>,
    /// The output started with the separator, so there is no answer.
    pub degenerate: bool,
}

/// Splits at the first separator token. Stops at EOS if one is present.
pub fn parse_output(generated: &[TokenId]) -> TargetString {
    let end = generated.iter().position(|&t| t == EOS).unwrap_or(generated.len());
    let body = &generated[..end];
    match body.iter().position(|&t| t == BECAUSE) {
        Some(i) => TargetString {
            answer: body[..i].to_vec(),
            explanation: body[i + 1..].to_vec(),
            degenerate: i == 0,
        },
        None => TargetString {
            answer: body.to_vec(),
            explanation: Vec::new(),
            degenerate: body.is_empty(),
        },
    }
}
