//! Token vocabularies and their text file format.
//!
//! A vocabulary file is one canonical JSON header line followed by one token
//! per line (line index = token id). Backslash, newline and carriage return
//! inside tokens are escaped as `\\`, `\n` and `\r`.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::AlignError;
use crate::canonical::to_canonical_json;

pub const DEFAULT_SPACE_MARKER: &str = "\u{2581}";
/// Marker every vocabulary's own space marker is rewritten to before tokens
/// from different vocabularies are compared.
const CANONICAL_MARKER: &str = "\u{2581}";
const FORMAT_TAG: &str = "vocab";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct VocabHeader {
    format: String,
    format_version: u32,
    space_marker: String,
    special_ids: Vec<u32>,
    unk_id: Option<u32>,
    vocab_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    space_marker: String,
    unk_id: Option<u32>,
    special: BTreeSet<u32>,
    surfaces: Vec<String>,
    normalized: Vec<String>,
}

impl Vocabulary {
    /// `unk_id` is always treated as special. `extra_special` lists further
    /// unmatchable ids (padding, control tokens).
    pub fn new(
        tokens: Vec<String>,
        space_marker: impl Into<String>,
        unk_id: Option<u32>,
        extra_special: impl IntoIterator<Item = u32>,
    ) -> Result<Self, AlignError> {
        let space_marker = space_marker.into();
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(AlignError::InvalidVocabulary(format!("token {i} is empty")));
            }
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(AlignError::InvalidVocabulary(format!(
                    "duplicate token `{t}` at id {i}"
                )));
            }
        }
        let mut special: BTreeSet<u32> = extra_special.into_iter().collect();
        special.extend(unk_id);
        if let Some(&bad) = special.iter().find(|&&id| id as usize >= tokens.len()) {
            return Err(AlignError::InvalidVocabulary(format!(
                "special id {bad} out of range for {} tokens",
                tokens.len()
            )));
        }
        let surfaces = tokens
            .iter()
            .map(|t| strip_marker(t, &space_marker))
            .collect();
        let normalized = tokens
            .iter()
            .map(|t| {
                if space_marker.is_empty() {
                    t.clone()
                } else {
                    t.replace(&space_marker, CANONICAL_MARKER)
                }
            })
            .collect();
        Ok(Self {
            tokens,
            ids,
            space_marker,
            unk_id,
            special,
            surfaces,
            normalized,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn space_marker(&self) -> &str {
        &self.space_marker
    }

    pub fn unk_id(&self) -> Option<u32> {
        self.unk_id
    }

    pub fn is_special(&self, id: u32) -> bool {
        self.special.contains(&id)
    }

    pub fn special_ids(&self) -> &BTreeSet<u32> {
        &self.special
    }

    /// Token text with space markers removed; what the token contributes to
    /// the detokenized response.
    pub fn surface(&self, id: u32) -> &str {
        &self.surfaces[id as usize]
    }

    /// Token text with this vocabulary's space marker rewritten to a shared
    /// marker, used for cross-vocabulary string comparison.
    pub fn normalized(&self, id: u32) -> &str {
        &self.normalized[id as usize]
    }

    pub fn check_ids(&self, seq: &[u32]) -> Result<(), AlignError> {
        match seq.iter().find(|&&id| id as usize >= self.tokens.len()) {
            Some(&id) => Err(AlignError::TokenOutOfRange {
                id,
                vocab_size: self.tokens.len(),
            }),
            None => Ok(()),
        }
    }

    pub fn detokenize(&self, seq: &[u32]) -> String {
        seq.iter().map(|&id| self.surface(id)).collect()
    }

    pub fn to_text(&self) -> String {
        let header = VocabHeader {
            format: FORMAT_TAG.into(),
            format_version: 1,
            space_marker: self.space_marker.clone(),
            special_ids: self
                .special
                .iter()
                .copied()
                .filter(|&id| Some(id) != self.unk_id)
                .collect(),
            unk_id: self.unk_id,
            vocab_size: self.tokens.len(),
        };
        let mut out = to_canonical_json(&header).expect("header serializes");
        out.push('\n');
        for t in &self.tokens {
            out.push_str(&escape(t));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, AlignError> {
        let mut lines = text.split('\n');
        let header_line = lines
            .next()
            .ok_or_else(|| AlignError::InvalidVocabulary("empty file".into()))?;
        let header: VocabHeader = serde_json::from_str(header_line)
            .map_err(|e| AlignError::InvalidVocabulary(format!("bad header: {e}")))?;
        if header.format != FORMAT_TAG || header.format_version != 1 {
            return Err(AlignError::InvalidVocabulary(format!(
                "not a version-1 vocabulary file (format `{}`)",
                header.format
            )));
        }
        let mut tokens = Vec::with_capacity(header.vocab_size);
        for (i, line) in lines.enumerate() {
            if i == header.vocab_size {
                if line.is_empty() {
                    break;
                }
                return Err(AlignError::InvalidVocabulary(format!(
                    "more than {} token lines",
                    header.vocab_size
                )));
            }
            tokens.push(unescape(line).ok_or_else(|| {
                AlignError::InvalidVocabulary(format!("bad escape on token line {i}"))
            })?);
        }
        if tokens.len() != header.vocab_size {
            return Err(AlignError::InvalidVocabulary(format!(
                "header declares {} tokens, found {}",
                header.vocab_size,
                tokens.len()
            )));
        }
        Self::new(
            tokens,
            header.space_marker,
            header.unk_id,
            header.special_ids,
        )
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, AlignError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| AlignError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_text(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), AlignError> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| AlignError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }
}

fn strip_marker(token: &str, marker: &str) -> String {
    if marker.is_empty() {
        token.to_string()
    } else {
        token.replace(marker, "")
    }
}

fn escape(token: &str) -> String {
    let mut s = String::with_capacity(token.len());
    for c in token.chars() {
        match c {
            '\\' => s.push_str("\\\\"),
            '\n' => s.push_str("\\n"),
            '\r' => s.push_str("\\r"),
            c => s.push(c),
        }
    }
    s
}

fn unescape(line: &str) -> Option<String> {
    let mut s = String::with_capacity(line.len());
    let mut chars = line.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next()? {
                '\\' => s.push('\\'),
                'n' => s.push('\n'),
                'r' => s.push('\r'),
                _ => return None,
            }
        } else {
            s.push(c);
        }
    }
    Some(s)
}
