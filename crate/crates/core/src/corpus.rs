//! JSON-lines corpora and the synthetic bilingual fixture generator.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{GenItem, McqItem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub text: String,
}

/// Parses JSON-lines, skipping blank lines; errors carry the 1-based line number.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Corpus texts from a `{"text": ...}` JSON-lines file.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<String>> {
    Ok(read_jsonl::<Sample>(path)?.into_iter().map(|s| s.text).collect())
}

/// A word-level Markov language over a private alphabet.
#[derive(Debug, Clone)]
pub struct SyntheticLanguage {
    pub tag: String,
    pub separator: char,
    words: Vec<String>,
    /// Per word: successor indices, each preferred successor listed with its weight.
    successors: Vec<Vec<(usize, u32)>>,
}

impl SyntheticLanguage {
    pub fn new(tag: &str, alphabet: &[char], separator: char, n_words: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = BTreeSet::new();
        let mut words = Vec::with_capacity(n_words);
        while words.len() < n_words {
            let len = rng.gen_range(2..=5);
            let w: String = (0..len).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect();
            if seen.insert(w.clone()) {
                words.push(w);
            }
        }
        let successors = (0..n_words)
            .map(|_| (0..3).map(|rank| (rng.gen_range(0..n_words), 8 >> rank)).collect())
            .collect();
        Self { tag: tag.to_string(), separator, words, successors }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Word index sequence of a sentence with `n_words` words.
    pub fn word_chain(&self, rng: &mut impl Rng, n_words: usize) -> Vec<usize> {
        let mut chain = Vec::with_capacity(n_words);
        let mut cur = rng.gen_range(0..self.words.len());
        chain.push(cur);
        while chain.len() < n_words {
            // One step in eight jumps uniformly; otherwise follow the weighted successors.
            cur = if rng.gen_range(0..8) == 0 {
                rng.gen_range(0..self.words.len())
            } else {
                let total: u32 = self.successors[cur].iter().map(|s| s.1).sum();
                let mut pick = rng.gen_range(0..total);
                let mut next = self.successors[cur][0].0;
                for &(w, weight) in &self.successors[cur] {
                    if pick < weight {
                        next = w;
                        break;
                    }
                    pick -= weight;
                }
                next
            };
            chain.push(cur);
        }
        chain
    }

    pub fn render(&self, chain: &[usize]) -> String {
        let sep = self.separator.to_string();
        chain.iter().map(|&w| self.words[w].as_str()).collect::<Vec<_>>().join(&sep)
    }

    pub fn sentence(&self, rng: &mut impl Rng, n_words: usize) -> String {
        self.render(&self.word_chain(rng, n_words))
    }

    /// Most likely successor of a word.
    pub fn preferred_successor(&self, word: usize) -> usize {
        self.successors[word].iter().max_by_key(|s| (s.1, std::cmp::Reverse(s.0))).expect("successors").0
    }

    pub fn corpus(&self, n_samples: usize, words_per_sample: std::ops::RangeInclusive<usize>, seed: u64) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n_samples)
            .map(|_| {
                let n = rng.gen_range(words_per_sample.clone());
                self.sentence(&mut rng, n)
            })
            .collect()
    }
}

impl SyntheticLanguage {
    /// Next-word questions: a sentence prefix, its preferred successor and
    /// `n_options - 1` distinct distractor words, correct option at a random slot.
    pub fn mcq_items(&self, n_items: usize, n_options: usize, seed: u64) -> Vec<McqItem> {
        assert!(n_options >= 2 && n_options <= self.words.len(), "option count out of range");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n_items)
            .map(|_| {
                let n = rng.gen_range(3..=6);
                let chain = self.word_chain(&mut rng, n);
                let correct = self.preferred_successor(chain[n - 1]);
                let mut picked = vec![correct];
                while picked.len() < n_options {
                    let w = rng.gen_range(0..self.words.len());
                    if !picked.contains(&w) {
                        picked.push(w);
                    }
                }
                let answer = rng.gen_range(0..n_options);
                picked.swap(0, answer);
                McqItem {
                    question: self.render(&chain),
                    options: picked.iter().map(|&w| self.words[w].clone()).collect(),
                    answer,
                }
            })
            .collect()
    }
}

/// Small addition prompts (`"12+7="`) with numeric answers.
pub fn arithmetic_items(n_items: usize, seed: u64) -> Vec<GenItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_items)
        .map(|_| {
            let (a, b) = (rng.gen_range(0..50u32), rng.gen_range(0..50u32));
            GenItem { prompt: format!("{a}+{b}="), answer: (a + b).to_string() }
        })
        .collect()
}

/// Two languages with disjoint alphabets: lowercase words joined by spaces and
/// uppercase words joined by hyphens.
pub fn bilingual_pair(seed: u64) -> (SyntheticLanguage, SyntheticLanguage) {
    let lower: Vec<char> = ('a'..='z').collect();
    let upper: Vec<char> = ('A'..='Z').collect();
    (
        SyntheticLanguage::new("la", &lower, ' ', 48, seed.wrapping_mul(2).wrapping_add(1)),
        SyntheticLanguage::new("lb", &upper, '-', 48, seed.wrapping_mul(2).wrapping_add(2)),
    )
}
