//! Desk-scale pruning experiment on the synthetic bilingual fixture: train a
//! toy decoder on two disjoint languages, split it into experts, profile each
//! language, prune by frequency threshold and compare against matched random
//! masks.

use crate::corpus::{bilingual_pair, SyntheticLanguage};
use crate::error::{Error, Result};
use crate::eval::Evaluator;
use crate::model::{random_model, ModelBundle, ModelConfig};
use crate::profile::{default_top_k, profile_corpus, FrequencyMatrix, ProfileConfig};
use crate::prune::{mask_by_threshold, mask_random_like, PruneMask};
use crate::split::{split_model, ClusterConfig, ExpertPartition};
use crate::tokenizer::{Tokenizer, BYTE_VOCAB_SIZE};
use crate::train::{train, TrainConfig, TrainReport};

/// Kept-proportion target and admissible range for threshold masks.
pub const KEPT_TARGET: (f64, f64, f64) = (0.7, 0.7, 0.95);

/// Sizes for the bilingual toy experiment. The defaults keep the model near
/// 0.1 M parameters so a full repetition trains in well under a minute.
#[derive(Debug, Clone)]
pub struct ToySetup {
    pub model: ModelConfig,
    pub n_experts: usize,
    pub train: TrainConfig,
    pub train_samples: usize,
    pub profile_samples: usize,
    pub eval_samples: usize,
    pub words_per_sample: (usize, usize),
    pub max_tokens: usize,
}

impl Default for ToySetup {
    fn default() -> Self {
        Self {
            model: ModelConfig::new(2, 32, 512, 2, BYTE_VOCAB_SIZE, 64),
            n_experts: 64,
            train: TrainConfig { steps: 400, ..TrainConfig::default() },
            train_samples: 400,
            profile_samples: 400,
            eval_samples: 120,
            words_per_sample: (6, 14),
            max_tokens: 64,
        }
    }
}

/// Corpora for one synthetic language.
#[derive(Debug, Clone)]
pub struct LanguageData {
    pub language: SyntheticLanguage,
    pub train: Vec<String>,
    pub profile: Vec<String>,
    pub eval: Vec<String>,
}

pub fn bilingual_data(setup: &ToySetup, seed: u64) -> [LanguageData; 2] {
    let (a, b) = bilingual_pair(seed);
    let words = setup.words_per_sample.0..=setup.words_per_sample.1;
    let make = |lang: SyntheticLanguage, salt: u64| {
        let base = seed.wrapping_mul(1000).wrapping_add(salt * 10);
        LanguageData {
            train: lang.corpus(setup.train_samples, words.clone(), base + 1),
            profile: lang.corpus(setup.profile_samples, words.clone(), base + 2),
            eval: lang.corpus(setup.eval_samples, words.clone(), base + 3),
            language: lang,
        }
    };
    [make(a, 1), make(b, 2)]
}

/// Seeded toy model trained on both languages.
pub fn train_toy(setup: &ToySetup, data: &[LanguageData], seed: u64) -> Result<(ModelBundle<f32>, TrainReport)> {
    let tok = Tokenizer::byte_level();
    let mut model = random_model(&setup.model, seed)?;
    let samples: Vec<Vec<u32>> = data
        .iter()
        .flat_map(|d| d.train.iter().map(|t| tok.encode_sample(t, setup.max_tokens)))
        .collect();
    let cfg = TrainConfig { seed, ..setup.train.clone() };
    let report = train(&mut model, &samples, &cfg)?;
    Ok((model, report))
}

/// Smallest threshold present in the matrix whose kept proportion lies in
/// `[lo, hi]`, preferring the proportion closest to `target`.
pub fn threshold_for_kept(freq: &FrequencyMatrix, target: f64, lo: f64, hi: f64) -> Option<f64> {
    let mut values: Vec<f64> = freq.frequencies().into_vec();
    values.sort_by(f64::total_cmp);
    values.dedup();
    values
        .into_iter()
        .filter_map(|tau| {
            let kept = mask_by_threshold(freq, tau).ok()?.kept_proportion();
            (lo..=hi).contains(&kept).then_some((tau, (kept - target).abs()))
        })
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)))
        .map(|(tau, _)| tau)
}

#[derive(Debug, Clone)]
pub struct LanguageOutcome {
    pub tag: String,
    pub tau: f64,
    pub kept_proportion: f64,
    pub origin_ppl: f64,
    pub expert_ppl: f64,
    pub random_ppl: Vec<f64>,
}

impl LanguageOutcome {
    pub fn random_mean(&self) -> f64 {
        self.random_ppl.iter().sum::<f64>() / self.random_ppl.len() as f64
    }

    pub fn experts_beat_random(&self) -> bool {
        self.expert_ppl <= self.random_mean()
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub seed: u64,
    pub final_loss: f64,
    pub languages: Vec<LanguageOutcome>,
}

/// One full repetition: data, training, split, profiling, masks and perplexities.
pub fn pruning_vs_random(setup: &ToySetup, seed: u64, kept: (f64, f64, f64), random_seeds: &[u64]) -> Result<ExperimentOutcome> {
    let data = bilingual_data(setup, seed);
    let (model, report) = train_toy(setup, &data, seed)?;
    let partition = split_model(&model, &ClusterConfig::new(setup.n_experts, seed))?;
    let tok = Tokenizer::byte_level();
    let mut languages = Vec::new();
    for d in &data {
        let freq = profile_language(&model, &partition, &d.profile, &d.language.tag, setup)?;
        let (target, lo, hi) = kept;
        let tau = threshold_for_kept(&freq, target, lo, hi)
            .ok_or_else(|| Error::OutOfRange(format!("no threshold keeps a proportion in [{lo}, {hi}]")))?;
        let mask = mask_by_threshold(&freq, tau)?;
        let ppl = |mask: Option<&PruneMask>| -> Result<f64> {
            let ev = Evaluator::new(&model, &tok)?;
            let ev = match mask {
                Some(m) => ev.with_mask(&partition, m)?,
                None => ev,
            };
            Ok(ev.perplexity(&d.eval, setup.max_tokens, &d.language.tag)?.value)
        };
        let random_ppl = random_seeds
            .iter()
            .map(|&s| ppl(Some(&mask_random_like(&mask, s)?)))
            .collect::<Result<Vec<_>>>()?;
        languages.push(LanguageOutcome {
            tag: d.language.tag.clone(),
            tau,
            kept_proportion: mask.kept_proportion(),
            origin_ppl: ppl(None)?,
            expert_ppl: ppl(Some(&mask))?,
            random_ppl,
        });
    }
    Ok(ExperimentOutcome { seed, final_loss: *report.losses.last().unwrap_or(&f64::NAN), languages })
}

pub fn profile_language(
    model: &ModelBundle<f32>,
    partition: &ExpertPartition,
    corpus: &[String],
    tag: &str,
    setup: &ToySetup,
) -> Result<FrequencyMatrix> {
    let mut cfg = ProfileConfig::new(partition.n_layers(), partition.n_experts(), tag, "toy");
    cfg.top_k = default_top_k(partition.n_layers(), partition.n_experts());
    cfg.max_tokens_per_sample = setup.max_tokens;
    profile_corpus(model, partition, corpus, &Tokenizer::byte_level(), &cfg)
}
