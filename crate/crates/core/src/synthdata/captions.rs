//! Caption templates and the word-level tokenizer built from them.

use std::collections::HashMap;

use crate::error::{Result, TabError};
use crate::synthdata::{Change, Color, ObjectShape};

/// Placeholder replaced by `<color> <shape>`.
pub const SLOT: &str = "...";

pub const ADD_TEMPLATES: [&str; 3] = [
    "the ... has appeared",
    "the ... has been newly placed",
    "the ... has been added",
];

pub const DROP_TEMPLATES: [&str; 4] = [
    "the ... has disappeared",
    "the ... is missing",
    "the ... is gone",
    "the ... is no longer there",
];

pub const NO_CHANGE_TEMPLATES: [&str; 9] = [
    "no change was made",
    "there is no change",
    "the two scenes seem identical",
    "the scene is the same as before",
    "the scene remains the same",
    "nothing has changed",
    "nothing was modified",
    "no change has occurred",
    "there is no difference",
];

/// Every reference caption for a change record.
pub fn captions_for(change: &Change) -> Vec<String> {
    match change {
        Change::None => NO_CHANGE_TEMPLATES.iter().map(|s| s.to_string()).collect(),
        Change::Add(obj) => fill(&ADD_TEMPLATES, &obj.name()),
        Change::Remove(obj) => fill(&DROP_TEMPLATES, &obj.name()),
    }
}

fn fill(templates: &[&str], name: &str) -> Vec<String> {
    templates.iter().map(|t| t.replace(SLOT, name)).collect()
}

/// What a caption says, recovered by exact template matching.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParsedCaption {
    NoChange,
    Added(String),
    Removed(String),
    Unrecognized,
}

impl ParsedCaption {
    pub fn is_change(&self) -> bool {
        matches!(self, ParsedCaption::Added(_) | ParsedCaption::Removed(_))
    }

    pub fn object(&self) -> Option<&str> {
        match self {
            ParsedCaption::Added(o) | ParsedCaption::Removed(o) => Some(o),
            _ => None,
        }
    }
}

/// Matches `caption` verbatim against the templates; the slot captures the object name.
pub fn parse_caption(caption: &str) -> ParsedCaption {
    let caption = caption.trim();
    if NO_CHANGE_TEMPLATES.contains(&caption) {
        return ParsedCaption::NoChange;
    }
    let slot_match = |template: &str| -> Option<String> {
        let (prefix, suffix) = template.split_once(SLOT)?;
        let inner = caption.strip_prefix(prefix)?.strip_suffix(suffix)?;
        let inner = inner.trim();
        (!inner.is_empty()).then(|| inner.to_string())
    };
    for t in ADD_TEMPLATES {
        if let Some(obj) = slot_match(t) {
            return ParsedCaption::Added(obj);
        }
    }
    for t in DROP_TEMPLATES {
        if let Some(obj) = slot_match(t) {
            return ParsedCaption::Removed(obj);
        }
    }
    ParsedCaption::Unrecognized
}

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

/// Word-level vocabulary: specials, template words, colors and shapes.
#[derive(Clone, Debug)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::build()
    }
}

impl Vocab {
    pub fn build() -> Self {
        let mut words: Vec<String> = vec!["<pad>".into(), "<bos>".into(), "<eos>".into()];
        let mut index: HashMap<String, usize> =
            words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        let mut add = |w: &str| {
            if !index.contains_key(w) {
                index.insert(w.to_string(), words.len());
                words.push(w.to_string());
            }
        };
        for t in ADD_TEMPLATES.iter().chain(&DROP_TEMPLATES).chain(&NO_CHANGE_TEMPLATES) {
            t.split_whitespace().filter(|w| *w != SLOT).for_each(&mut add);
        }
        Color::ALL.iter().for_each(|c| add(c.name()));
        ObjectShape::ALL.iter().for_each(|s| add(s.name()));
        Vocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Word ids without specials.
    pub fn encode(&self, caption: &str) -> Result<Vec<usize>> {
        caption
            .split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| TabError::Parameter(format!("word `{w}` not in vocabulary"))))
            .collect()
    }

    /// Joins words up to the first EOS, skipping PAD/BOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .filter_map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
