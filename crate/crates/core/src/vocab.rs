use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const SOS: &str = "[SOS]";
pub const EOS: &str = "[EOS]";
/// Stand-in for destroyed question words.
pub const NULL: &str = "[NULL]";
pub const VIDEO: &str = "VIDEO:";
pub const QUESTION: &str = "QUESTION:";
pub const CHOICES: &str = "CHOICES:";
pub const ANSWER: &str = "ANSWER:";
pub const OPTION_LETTERS: [&str; 5] = ["(A)", "(B)", "(C)", "(D)", "(E)"];

pub const MIN_VOCAB: usize = 30;

/// Ids of the control tokens, resolved once.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ControlIds {
    pub sos: usize,
    pub eos: usize,
    pub null: usize,
    pub video: usize,
    pub question: usize,
    pub choices: usize,
    pub answer: usize,
    pub letters: [usize; 5],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
    control: ControlIds,
}

impl Vocabulary {
    /// Control tokens followed by `content` words, in order.
    pub fn with_content<S: AsRef<str>>(content: &[S]) -> Result<Self> {
        let mut tokens: Vec<String> = [SOS, EOS, NULL, VIDEO, QUESTION, CHOICES, ANSWER]
            .iter()
            .chain(OPTION_LETTERS.iter())
            .map(|s| s.to_string())
            .collect();
        tokens.extend(content.iter().map(|s| s.as_ref().to_string()));
        Self::from_tokens(tokens)
    }

    /// Rebuild from a full token list (e.g. a deserialized one).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config {
                    field: "vocabulary".into(),
                    reason: alloc::format!("duplicate token `{t}`"),
                });
            }
        }
        if tokens.len() < MIN_VOCAB {
            return Err(Error::Config {
                field: "vocabulary".into(),
                reason: alloc::format!("{} tokens, need at least {MIN_VOCAB}", tokens.len()),
            });
        }
        let get = |s: &str| {
            index.get(s).copied().ok_or_else(|| Error::Config {
                field: "vocabulary".into(),
                reason: alloc::format!("missing control token `{s}`"),
            })
        };
        let control = ControlIds {
            sos: get(SOS)?,
            eos: get(EOS)?,
            null: get(NULL)?,
            video: get(VIDEO)?,
            question: get(QUESTION)?,
            choices: get(CHOICES)?,
            answer: get(ANSWER)?,
            letters: [
                get(OPTION_LETTERS[0])?,
                get(OPTION_LETTERS[1])?,
                get(OPTION_LETTERS[2])?,
                get(OPTION_LETTERS[3])?,
                get(OPTION_LETTERS[4])?,
            ],
        };
        Ok(Self { tokens, index, control })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::Lookup(alloc::format!("unknown token `{token}`")))
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn control(&self) -> &ControlIds {
        &self.control
    }

    pub fn is_control(&self, id: usize) -> bool {
        let c = &self.control;
        [c.sos, c.eos, c.null, c.video, c.question, c.choices, c.answer].contains(&id)
            || c.letters.contains(&id)
    }

    pub fn encode(&self, words: &str) -> Result<Vec<usize>> {
        words.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(self.token(id));
        }
        out
    }
}
