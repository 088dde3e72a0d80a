//! Byte-level tokenizer with optional greedy longest-match vocabulary.
//!
//! Ids 0..=255 are raw bytes, followed by the specials BOS, EOS and PAD.
//! Extra vocabulary pieces, when loaded, take ids from 259 upward.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const BYTE_VOCAB_SIZE: usize = 259;

#[derive(Debug, Clone, Default)]
pub struct Tokenizer {
    pieces: Vec<Vec<u8>>,
    lookup: HashMap<Vec<u8>, u32>,
    max_piece_len: usize,
}

impl Tokenizer {
    pub fn byte_level() -> Self {
        Self::default()
    }

    /// Adds multi-byte pieces on top of the byte vocabulary.
    pub fn with_pieces<I, S>(pieces: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tok = Self::default();
        for piece in pieces {
            let bytes = piece.as_ref().as_bytes().to_vec();
            if bytes.len() < 2 {
                // Single bytes already have ids.
                continue;
            }
            if tok.lookup.contains_key(&bytes) {
                return Err(Error::Tokenizer(format!("duplicate vocabulary piece {:?}", piece.as_ref())));
            }
            let id = (BYTE_VOCAB_SIZE + tok.pieces.len()) as u32;
            tok.max_piece_len = tok.max_piece_len.max(bytes.len());
            tok.lookup.insert(bytes.clone(), id);
            tok.pieces.push(bytes);
        }
        Ok(tok)
    }

    /// One piece per line; blank lines are skipped.
    pub fn from_vocab_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::with_pieces(text.lines().filter(|l| !l.is_empty()))
    }

    pub fn vocab_size(&self) -> usize {
        BYTE_VOCAB_SIZE + self.pieces.len()
    }

    /// Fails when the tokenizer can emit ids the model cannot embed.
    pub fn check_model_vocab(&self, model_vocab: usize) -> Result<()> {
        if self.vocab_size() > model_vocab {
            return Err(Error::Tokenizer(format!(
                "tokenizer emits {} ids but the model vocabulary has {model_vocab}",
                self.vocab_size()
            )));
        }
        Ok(())
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let bytes = text.as_bytes();
        let mut out = Vec::with_capacity(bytes.len());
        let mut i = 0;
        while i < bytes.len() {
            let longest = (2..=self.max_piece_len.min(bytes.len() - i))
                .rev()
                .find_map(|len| self.lookup.get(&bytes[i..i + len]).map(|&id| (id, len)));
            match longest {
                Some((id, len)) => {
                    out.push(id);
                    i += len;
                }
                None => {
                    out.push(bytes[i] as u32);
                    i += 1;
                }
            }
        }
        out
    }

    /// `BOS` followed by the encoded text, truncated to `max_tokens` ids in total.
    pub fn encode_sample(&self, text: &str, max_tokens: usize) -> Vec<u32> {
        let mut ids = Vec::with_capacity(max_tokens.min(text.len() + 1));
        ids.push(BOS);
        ids.extend(self.encode(text));
        ids.truncate(max_tokens);
        ids
    }

    /// Lossy decode; special ids are dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::with_capacity(ids.len());
        for &id in ids {
            match id {
                0..=255 => bytes.push(id as u8),
                BOS | EOS | PAD => {}
                _ => {
                    if let Some(p) = self.pieces.get(id as usize - BYTE_VOCAB_SIZE) {
                        bytes.extend_from_slice(p);
                    }
                }
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }
}
