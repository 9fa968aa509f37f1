use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BLANK: usize = 0;

const GRAPHEMES: [char; 28] = [
    'a', 'b', 'c', 'd', 'e', 'f', 'g', 'h', 'i', 'j', 'k', 'l', 'm', 'n', 'o', 'p', 'q', 'r',
    's', 't', 'u', 'v', 'w', 'x', 'y', 'z', ' ', '\'',
];

/// Grapheme ids; never contains the blank.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Ordered grapheme inventory with the CTC blank at index 0.
#[derive(Clone, Debug, Default)]
pub struct Vocabulary;

impl Vocabulary {
    pub fn new() -> Self {
        Self
    }

    /// Number of symbols including the blank.
    pub fn size(&self) -> usize {
        GRAPHEMES.len() + 1
    }

    pub fn id(&self, ch: char) -> Option<usize> {
        GRAPHEMES.iter().position(|&g| g == ch).map(|i| i + 1)
    }

    pub fn grapheme(&self, id: usize) -> Option<char> {
        if id == BLANK {
            None
        } else {
            GRAPHEMES.get(id - 1).copied()
        }
    }

    pub fn space_id(&self) -> usize {
        self.id(' ').expect("space is in the inventory")
    }

    pub fn graphemes(&self) -> &'static [char] {
        &GRAPHEMES
    }

    pub fn encode(&self, text: &str) -> Result<TokenSequence> {
        text.chars()
            .enumerate()
            .map(|(position, ch)| {
                self.id(ch)
                    .ok_or(Error::UnknownGrapheme { ch, position })
            })
            .collect::<Result<Vec<_>>>()
            .map(TokenSequence::new)
    }

    pub fn decode(&self, seq: &TokenSequence) -> Result<String> {
        seq.ids
            .iter()
            .map(|&id| {
                self.grapheme(id).ok_or_else(|| {
                    Error::contract(format!("id {id} is blank or outside the vocabulary"))
                })
            })
            .collect()
    }
}

/// Words separated by single spaces, with surrounding whitespace ignored.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}
