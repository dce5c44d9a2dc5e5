//! Fixed small vocabulary and tokenized prompt conditions.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Rare identifier bound to a new concept during personalization.
pub const DEFAULT_IDENTIFIER: &str = "sks";
/// Alternate rare identifier for prompt-mismatch runs.
pub const ALT_IDENTIFIER: &str = "t@t";

/// Word-level vocabulary. At most 64 entries; index 0 is padding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Vocabulary {
    /// The stock vocabulary: articles and nouns for the template prompts,
    /// both rare identifiers, and one name token per procedural subject.
    pub fn default_toy(n_subjects: usize) -> Self {
        let mut words: Vec<String> = [
            "<pad>", "a", "photo", "of", "subject", "sks", "t@t", "the", "dslr", "portrait",
            "plain", "background",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for i in 0..n_subjects {
            words.push(format!("s{i}"));
        }
        assert!(words.len() <= 64, "vocabulary larger than 64 tokens");
        Vocabulary { words }
    }

    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() > 64 {
            return Err(Error::Config(format!(
                "vocabulary has {} tokens, limit is 64",
                words.len()
            )));
        }
        Ok(Vocabulary { words })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id_of(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    /// Whitespace tokenizer over the fixed vocabulary.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                self.id_of(w).ok_or_else(|| {
                    Error::Argument(format!(
                        "unknown token '{w}'; vocabulary: {}",
                        self.words.join(" ")
                    ))
                })
            })
            .collect()
    }
}

/// A tokenized prompt plus the position of its identifier token, when any.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptCondition {
    pub text: String,
    pub token_ids: Vec<usize>,
    /// Index *within the prompt* of the rare identifier token ("sks"/"t@t"),
    /// recorded for the localization module.
    pub identifier_index: Option<usize>,
}

impl PromptCondition {
    pub fn new(vocab: &Vocabulary, text: &str) -> Result<Self> {
        let token_ids = vocab.tokenize(text)?;
        if token_ids.is_empty() {
            return Err(Error::Argument("empty prompt".into()));
        }
        let identifier_index = token_ids.iter().position(|&id| {
            vocab.words[id] == DEFAULT_IDENTIFIER || vocab.words[id] == ALT_IDENTIFIER
        });
        Ok(PromptCondition {
            text: text.to_string(),
            token_ids,
            identifier_index,
        })
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Template prompt for a named subject, e.g. `a photo of s3 subject`.
pub fn subject_prompt(vocab: &Vocabulary, subject: usize) -> Result<PromptCondition> {
    PromptCondition::new(vocab, &format!("a photo of s{subject} subject"))
}

/// Template prompt with a rare identifier, e.g. `a photo of sks subject`.
pub fn identifier_prompt(vocab: &Vocabulary, identifier: &str) -> Result<PromptCondition> {
    let p = PromptCondition::new(vocab, &format!("a photo of {identifier} subject"))?;
    if p.identifier_index.is_none() {
        return Err(Error::Argument(format!(
            "'{identifier}' is not a known rare identifier"
        )));
    }
    Ok(p)
}
