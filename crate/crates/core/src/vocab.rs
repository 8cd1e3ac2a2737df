//! Output-unit inventory and text ↔ id conversion.
//!
//! Ids 0..4 are reserved for `<PAD>`, `<UNK>`, `<S>` and `</S>`. Corpus
//! symbols follow in the order given. Segmentation is greedy longest match
//! over the symbol set:
//!
//! * if some symbol contains the word-boundary marker `▁`, text is rewritten
//!   as `▁word1▁word2…` before matching and `▁` turns back into a space when
//!   detokenizing (word pieces);
//! * otherwise each whitespace-separated word is matched on its own. Outputs
//!   are concatenated when every symbol is a single character, and joined
//!   with spaces otherwise.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "<PAD>";
pub const UNK: &str = "<UNK>";
pub const BOS: &str = "<S>";
pub const EOS: &str = "</S>";
pub const WORD_BOUNDARY: char = '▁';

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;
pub const NUM_SPECIAL: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unit {
    Char,
    Word,
    Piece,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
    max_chars: usize,
    unit: Unit,
}

impl Vocab {
    pub fn new<I, S>(symbols: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = [PAD, UNK, BOS, EOS].iter().map(|s| s.to_string()).collect();
        for s in symbols {
            let s = s.into();
            if s.is_empty() || s.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("invalid vocabulary symbol {s:?}")));
            }
            if [PAD, UNK, BOS, EOS].contains(&s.as_str()) {
                continue;
            }
            all.push(s);
        }
        let mut index = HashMap::new();
        for (i, s) in all.iter().enumerate() {
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary symbol {s:?}")));
            }
        }
        let corpus = &all[NUM_SPECIAL..];
        let unit = if corpus.iter().any(|s| s.contains(WORD_BOUNDARY)) {
            Unit::Piece
        } else if corpus.iter().all(|s| s.chars().count() == 1) {
            Unit::Char
        } else {
            Unit::Word
        };
        let max_chars = corpus.iter().map(|s| s.chars().count()).max().unwrap_or(1);
        Ok(Self { symbols: all, index, max_chars, unit })
    }

    /// One symbol per line; special tokens may be listed and are ignored.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::new(text.lines().map(str::trim).filter(|l| !l.is_empty()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for s in &self.symbols {
            out.push_str(s);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    /// Corpus symbols, specials excluded.
    pub fn corpus_symbols(&self) -> &[String] {
        &self.symbols[NUM_SPECIAL..]
    }

    fn match_greedy(&self, chars: &[char], out: &mut Vec<usize>) {
        let mut i = 0;
        while i < chars.len() {
            let longest = (1..=self.max_chars.min(chars.len() - i)).rev().find_map(|n| {
                let s: String = chars[i..i + n].iter().collect();
                self.index.get(&s).filter(|&&id| id >= NUM_SPECIAL).map(|&id| (id, n))
            });
            match longest {
                Some((id, n)) => {
                    out.push(id);
                    i += n;
                }
                None => {
                    out.push(UNK_ID);
                    i += 1;
                }
            }
        }
    }

    /// Text to ids, without `<S>`/`</S>`. Unknown characters map to `<UNK>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        match self.unit {
            Unit::Piece => {
                let chars: Vec<char> = text
                    .split_whitespace()
                    .flat_map(|w| std::iter::once(WORD_BOUNDARY).chain(w.chars()))
                    .collect();
                self.match_greedy(&chars, &mut out);
            }
            Unit::Char | Unit::Word => {
                for w in text.split_whitespace() {
                    let chars: Vec<char> = w.chars().collect();
                    self.match_greedy(&chars, &mut out);
                }
            }
        }
        out
    }

    /// Strict variant of [`Vocab::encode`]: any symbol outside the vocabulary
    /// is an error.
    pub fn encode_strict(&self, text: &str) -> Result<Vec<usize>> {
        let ids = self.encode(text);
        if ids.contains(&UNK_ID) {
            return Err(Error::invalid(format!("transcript {text:?} contains symbols outside the vocabulary")));
        }
        Ok(ids)
    }

    /// Ids to text. Special tokens are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        let syms = ids
            .iter()
            .filter(|&&i| i >= NUM_SPECIAL)
            .filter_map(|&i| self.symbol(i));
        match self.unit {
            Unit::Char => syms.collect(),
            Unit::Word => syms.collect::<Vec<_>>().join(" "),
            Unit::Piece => {
                let joined: String = syms.collect();
                joined
                    .split(WORD_BOUNDARY)
                    .filter(|w| !w.is_empty())
                    .collect::<Vec<_>>()
                    .join(" ")
            }
        }
    }

    /// Splits text into symbol strings (piece-level scoring).
    pub fn segment(&self, text: &str) -> Vec<String> {
        self.encode(text)
            .into_iter()
            .map(|id| self.symbols[id].clone())
            .collect()
    }
}
