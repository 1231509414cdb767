//! The 31-symbol CTC character vocabulary and conversions between text,
//! frame-aligned character sequences and collapsed label sequences.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

pub const VOCAB_SIZE: usize = 31;
pub const BLANK: u8 = 0;
pub const BOS: u8 = 1;
pub const EOS: u8 = 2;
pub const SPACE: u8 = 3;
pub const APOSTROPHE: u8 = 4;
pub const FIRST_LETTER: u8 = 5;

const BLANK_NAME: &str = "<blank>";
const BOS_NAME: &str = "<bos>";
const EOS_NAME: &str = "<eos>";
const SPACE_NAME: &str = "<space>";

/// Ordered symbol inventory shared by the recogniser and the conditioning
/// dictionaries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharVocabulary {
    symbols: Vec<String>,
    index_of: HashMap<String, u8>,
}

impl Default for CharVocabulary {
    fn default() -> Self {
        Self::standard()
    }
}

impl CharVocabulary {
    /// blank, bos, eos, space, apostrophe, then `a`..`z`.
    pub fn standard() -> Self {
        let mut names: Vec<String> = [BLANK_NAME, BOS_NAME, EOS_NAME, SPACE_NAME, "'"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        names.extend(('a'..='z').map(|c| c.to_string()));
        Self::from_names(names).expect("standard vocabulary is valid")
    }

    pub fn from_names(names: Vec<String>) -> Result<Self> {
        if names.len() != VOCAB_SIZE {
            return Err(Error::InvalidValue(format!(
                "vocabulary must have {VOCAB_SIZE} entries, got {}",
                names.len()
            )));
        }
        let mut index_of = HashMap::with_capacity(VOCAB_SIZE);
        for (i, name) in names.iter().enumerate() {
            if index_of.insert(name.clone(), i as u8).is_some() {
                return Err(Error::InvalidValue(format!("duplicate symbol {name:?}")));
            }
        }
        let required = [BLANK_NAME, BOS_NAME, EOS_NAME, SPACE_NAME, "'"];
        for name in required
            .iter()
            .map(|s| s.to_string())
            .chain(('a'..='z').map(|c| c.to_string()))
        {
            if !index_of.contains_key(&name) {
                return Err(Error::InvalidValue(format!("missing symbol {name:?}")));
            }
        }
        Ok(Self { symbols: names, index_of })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn name(&self, index: u8) -> Option<&str> {
        self.symbols.get(index as usize).map(String::as_str)
    }

    pub fn index(&self, name: &str) -> Option<u8> {
        self.index_of.get(name).copied()
    }

    pub fn blank(&self) -> u8 {
        self.index_of[BLANK_NAME]
    }

    fn special(&self, index: u8) -> bool {
        matches!(self.name(index), Some(BLANK_NAME | BOS_NAME | EOS_NAME))
    }

    /// Index for a printable character (already lowercased).
    pub fn index_of_char(&self, ch: char) -> Option<u8> {
        match ch {
            ' ' => self.index(SPACE_NAME),
            c => {
                let mut buf = [0u8; 4];
                self.index(c.encode_utf8(&mut buf))
            }
        }
    }

    pub fn char_of(&self, index: u8) -> Option<char> {
        match self.name(index)? {
            SPACE_NAME => Some(' '),
            BLANK_NAME | BOS_NAME | EOS_NAME => None,
            name => name.chars().next(),
        }
    }

    /// One symbol name per line, in index order.
    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.symbols.join("\n");
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let names = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        Self::from_names(names)
    }
}

/// Frame-aligned character indices, one per vocoder frame.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CharSequence(Vec<u8>);

impl CharSequence {
    pub fn new(indices: Vec<u8>) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= VOCAB_SIZE) {
            return Err(Error::IndexOutOfRange {
                index: bad as usize,
                limit: VOCAB_SIZE,
            });
        }
        Ok(Self(indices))
    }

    pub fn blank(len: usize) -> Self {
        Self(vec![BLANK; len])
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.0
    }

    pub fn non_blank_fraction(&self) -> f64 {
        if self.0.is_empty() {
            return 0.0;
        }
        self.0.iter().filter(|&&i| i != BLANK).count() as f64 / self.0.len() as f64
    }

    pub fn slice(&self, start: usize, len: usize) -> Self {
        Self(self.0[start..start + len].to_vec())
    }
}

/// Blank-free label sequence without timing.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct LabelSequence(Vec<u8>);

impl LabelSequence {
    pub fn new(indices: Vec<u8>) -> Result<Self> {
        for &i in &indices {
            if i as usize >= VOCAB_SIZE {
                return Err(Error::IndexOutOfRange {
                    index: i as usize,
                    limit: VOCAB_SIZE,
                });
            }
            if i == BLANK {
                return Err(Error::InvalidValue("label sequence contains blank".into()));
            }
        }
        Ok(Self(indices))
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Minimum number of frames a CTC alignment of these labels needs:
    /// one per label plus one blank between each pair of equal neighbours.
    pub fn min_frames(&self) -> usize {
        let repeats = self.0.windows(2).filter(|w| w[0] == w[1]).count();
        self.0.len() + repeats
    }
}

impl fmt::Display for LabelSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// Lowercases `text` and maps each character to its vocabulary index.
pub fn encode_text(text: &str, vocab: &CharVocabulary) -> Result<LabelSequence> {
    let mut out = Vec::with_capacity(text.len());
    for (position, ch) in text.chars().enumerate() {
        let lower = ch.to_lowercase().next().unwrap_or(ch);
        match vocab.index_of_char(lower) {
            Some(i) if !vocab.special(i) => out.push(i),
            _ => return Err(Error::UnknownSymbol { ch, position }),
        }
    }
    Ok(LabelSequence(out))
}

/// Standard CTC collapse: merge consecutive repeats, then drop blanks.
pub fn collapse(c: &CharSequence) -> LabelSequence {
    let mut out = Vec::new();
    let mut prev = None;
    for &i in c.as_slice() {
        if prev != Some(i) && i != BLANK {
            out.push(i);
        }
        prev = Some(i);
    }
    LabelSequence(out)
}

/// Source index that output frame `i` samples when resizing `src_len` frames to
/// `target_len` frames: floor((i + 0.5) * src_len / target_len).
pub fn nearest_source_index(i: usize, src_len: usize, target_len: usize) -> usize {
    ((2 * i + 1) * src_len) / (2 * target_len)
}

/// Nearest-neighbour temporal resize to exactly `target_len` frames.
pub fn resize_nearest(c: &CharSequence, target_len: usize) -> Result<CharSequence> {
    if c.is_empty() || target_len == 0 {
        return Err(Error::EmptySequence);
    }
    let src = c.as_slice();
    if src.len() == target_len {
        return Ok(c.clone());
    }
    let out = (0..target_len)
        .map(|i| src[nearest_source_index(i, src.len(), target_len)])
        .collect();
    Ok(CharSequence(out))
}

/// Maps labels back to text, dropping bos/eos (and any stray blank).
pub fn to_text(labels: &LabelSequence, vocab: &CharVocabulary) -> String {
    labels
        .as_slice()
        .iter()
        .filter_map(|&i| vocab.char_of(i))
        .collect()
}
