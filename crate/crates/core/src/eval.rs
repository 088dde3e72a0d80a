//! Quality metrics with or without an expert mask: perplexity,
//! multiple-choice accuracy and greedy-generation exact match.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, forward_masked, neuron_keep, ModelBundle};
use crate::prune::PruneMask;
use crate::scalar::Scalar;
use crate::split::ExpertPartition;
use crate::tensor::Matrix;
use crate::tokenizer::{Tokenizer, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Perplexity,
    McqAccuracy,
    ExactMatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub metric: Metric,
    pub value: f64,
    pub n_samples: usize,
    /// Mask label, or `origin` for the unpruned model.
    pub mask: String,
    pub language_tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McqItem {
    pub question: String,
    pub options: Vec<String>,
    pub answer: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum AnswerText {
    Text(String),
    Int(i64),
    Real(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenItem {
    pub prompt: String,
    #[serde(deserialize_with = "answer_as_string")]
    pub answer: String,
}

fn answer_as_string<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<String, D::Error> {
    Ok(match AnswerText::deserialize(d)? {
        AnswerText::Text(s) => s,
        AnswerText::Int(i) => i.to_string(),
        AnswerText::Real(r) => r.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptionScoring {
    /// Mean log-likelihood per option token.
    #[default]
    Normalized,
    /// Summed log-likelihood.
    Raw,
}

/// `(Σ −log p(next token), predicted token count)` for a teacher-forced sequence.
pub fn sequence_nll<T: Scalar>(logits: &Matrix<T>, tokens: &[u32]) -> (f64, usize) {
    let mut total = 0.0;
    for t in 1..tokens.len() {
        total -= log_softmax_at(logits.row(t - 1), tokens[t] as usize);
    }
    (total, tokens.len().saturating_sub(1))
}

fn log_softmax_at<T: Scalar>(row: &[T], target: usize) -> f64 {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
    row[target].as_f64() - lse
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// The last signed/decimal digit run in `text`, with `+` and thousands separators dropped.
pub fn extract_number(text: &str) -> Option<String> {
    static NUMBER: OnceLock<Regex> = OnceLock::new();
    let re = NUMBER.get_or_init(|| Regex::new(r"[-+]?\d+(?:\.\d+)?").expect("valid regex"));
    let cleaned = text.replace(',', "");
    re.find_iter(&cleaned).last().map(|m| m.as_str().trim_start_matches('+').to_string())
}

/// Runs a model with an optional expert mask.
pub struct Evaluator<'a, T> {
    model: &'a ModelBundle<T>,
    tokenizer: &'a Tokenizer,
    masking: Option<(&'a ExpertPartition, &'a PruneMask)>,
}

impl<'a, T: Scalar> Evaluator<'a, T> {
    pub fn new(model: &'a ModelBundle<T>, tokenizer: &'a Tokenizer) -> Result<Self> {
        tokenizer.check_model_vocab(model.config.vocab_size)?;
        Ok(Self { model, tokenizer, masking: None })
    }

    pub fn with_mask(mut self, partition: &'a ExpertPartition, mask: &'a PruneMask) -> Result<Self> {
        neuron_keep(&self.model.config, partition, mask)?;
        self.masking = Some((partition, mask));
        Ok(self)
    }

    fn mask_label(&self) -> String {
        self.masking.map_or_else(|| "origin".to_string(), |(_, m)| m.label())
    }

    pub fn logits(&self, tokens: &[u32]) -> Result<Matrix<T>> {
        match self.masking {
            Some((p, m)) => forward_masked(self.model, tokens, p, m, None),
            None => forward(self.model, tokens, None),
        }
    }

    /// Token-weighted perplexity over a corpus; samples are `BOS + text`
    /// truncated to `max_tokens` (and the model's context length).
    pub fn perplexity(&self, corpus: &[String], max_tokens: usize, language_tag: &str) -> Result<EvalResult> {
        let max_len = max_tokens.min(self.model.config.max_seq_len);
        let mut nll = 0.0;
        let mut count = 0usize;
        for text in corpus {
            let tokens = self.tokenizer.encode_sample(text, max_len);
            if tokens.len() < 2 {
                continue;
            }
            let (s, n) = sequence_nll(&self.logits(&tokens)?, &tokens);
            nll += s;
            count += n;
        }
        if count == 0 {
            return Err(Error::Empty("corpus has no predictable tokens".into()));
        }
        Ok(EvalResult {
            metric: Metric::Perplexity,
            value: (nll / count as f64).exp(),
            n_samples: corpus.len(),
            mask: self.mask_label(),
            language_tag: language_tag.to_string(),
        })
    }

    /// Log-likelihood score of every option of one item.
    pub fn option_scores(&self, item: &McqItem, scoring: OptionScoring) -> Result<Vec<f64>> {
        if item.options.len() < 2 {
            return Err(Error::Empty(format!("question {:?} needs at least two options", item.question)));
        }
        if item.answer >= item.options.len() {
            return Err(Error::OutOfRange(format!("answer index {} with {} options", item.answer, item.options.len())));
        }
        let context = self.tokenizer.encode_sample(&item.question, usize::MAX);
        let max_len = self.model.config.max_seq_len;
        item.options
            .iter()
            .map(|opt| {
                let mut cont = self.tokenizer.encode(&format!(" {opt}"));
                cont.truncate(max_len - 1);
                let keep_ctx = (max_len - cont.len()).min(context.len());
                let mut seq = context[context.len() - keep_ctx..].to_vec();
                let start = seq.len();
                seq.extend(&cont);
                let logits = self.logits(&seq)?;
                let ll: f64 = (start..seq.len()).map(|t| log_softmax_at(logits.row(t - 1), seq[t] as usize)).sum();
                Ok(match scoring {
                    OptionScoring::Normalized => ll / cont.len() as f64,
                    OptionScoring::Raw => ll,
                })
            })
            .collect()
    }

    pub fn mcq_predictions(&self, items: &[McqItem], scoring: OptionScoring) -> Result<Vec<usize>> {
        items.iter().map(|item| self.option_scores(item, scoring).map(|s| argmax(&s))).collect()
    }

    pub fn mcq_accuracy(&self, items: &[McqItem], scoring: OptionScoring, language_tag: &str) -> Result<EvalResult> {
        if items.is_empty() {
            return Err(Error::Empty("no multiple-choice items".into()));
        }
        let preds = self.mcq_predictions(items, scoring)?;
        let correct = preds.iter().zip(items).filter(|(p, it)| **p == it.answer).count();
        Ok(EvalResult {
            metric: Metric::McqAccuracy,
            value: correct as f64 / items.len() as f64,
            n_samples: items.len(),
            mask: self.mask_label(),
            language_tag: language_tag.to_string(),
        })
    }

    /// Greedy continuation of `BOS + prompt`, stopping at EOS, `max_new_tokens`
    /// or the context limit.
    pub fn generate(&self, prompt: &str, max_new_tokens: usize) -> Result<String> {
        let max_len = self.model.config.max_seq_len;
        let mut tokens = self.tokenizer.encode_sample(prompt, max_len);
        let start = tokens.len();
        for _ in 0..max_new_tokens {
            if tokens.len() >= max_len {
                break;
            }
            let logits = self.logits(&tokens)?;
            let next = argmax(logits.row(tokens.len() - 1)) as u32;
            if next == EOS {
                break;
            }
            tokens.push(next);
        }
        Ok(self.tokenizer.decode(&tokens[start..]))
    }

    pub fn exact_match(&self, items: &[GenItem], max_new_tokens: usize, language_tag: &str) -> Result<EvalResult> {
        if items.is_empty() {
            return Err(Error::Empty("no generation items".into()));
        }
        let mut correct = 0;
        for item in items {
            let generated = self.generate(&item.prompt, max_new_tokens)?;
            let reference = extract_number(&item.answer).unwrap_or_else(|| item.answer.trim().to_string());
            if extract_number(&generated).is_some_and(|g| g == reference) {
                correct += 1;
            }
        }
        Ok(EvalResult {
            metric: Metric::ExactMatch,
            value: correct as f64 / items.len() as f64,
            n_samples: items.len(),
            mask: self.mask_label(),
            language_tag: language_tag.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn hand_set_logits() {
        // Two-token sequence [0, 1]: one prediction from row 0.
        let logits = Matrix::from_vec(2, 3, vec![1.0f64, 2.0, 0.5, 0.0, 0.0, 0.0]);
        let (nll, n) = sequence_nll(&logits, &[0, 1]);
        let z = 1f64.exp() + 2f64.exp() + 0.5f64.exp();
        let expected = -(2f64.exp() / z).ln();
        assert_eq!(n, 1);
        assert!((nll - expected).abs() < 1e-12);
        assert!(((nll / n as f64).exp() - z / 2f64.exp()).abs() < 1e-6);
    }

    #[test]
    fn uniform_model_perplexity_is_vocab() {
        let m = ModelBundle::<f32>::zeros(ModelConfig::new(1, 8, 16, 2, 300, 32));
        let tok = Tokenizer::byte_level();
        let r = Evaluator::new(&m, &tok).unwrap().perplexity(&["hello world".into()], 200, "en").unwrap();
        assert!((r.value - 300.0).abs() < 1e-3, "{}", r.value);
        assert_eq!(r.mask, "origin");
    }

    #[test]
    fn number_extraction() {
        assert_eq!(extract_number("the answer is 42."), Some("42".into()));
        assert_eq!(extract_number("maybe -3.5 or +7"), Some("7".into()));
        assert_eq!(extract_number("1,234 apples"), Some("1234".into()));
        assert_eq!(extract_number("no digits here"), None);
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 2.0]), 1);
    }

    #[test]
    fn gen_item_accepts_numeric_answer() {
        let a: GenItem = serde_json::from_str(r#"{"prompt":"2+2=","answer":4}"#).unwrap();
        assert_eq!(a.answer, "4");
        let b: GenItem = serde_json::from_str(r#"{"prompt":"x","answer":"18"}"#).unwrap();
        assert_eq!(b.answer, "18");
    }

    #[test]
    fn mcq_input_errors() {
        let m = ModelBundle::<f32>::zeros(ModelConfig::new(1, 8, 16, 2, 300, 32));
        let tok = Tokenizer::byte_level();
        let ev = Evaluator::new(&m, &tok).unwrap();
        let bad = McqItem { question: "q".into(), options: vec![], answer: 0 };
        assert!(matches!(ev.option_scores(&bad, OptionScoring::Normalized), Err(Error::Empty(_))));
        assert!(ev.mcq_accuracy(&[], OptionScoring::Normalized, "en").is_err());
    }
}
