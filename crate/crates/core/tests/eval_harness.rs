mod common;

use moe_lens::eval::{argmax, extract_number, sequence_nll, Evaluator, GenItem, McqItem, OptionScoring};
use moe_lens::model::{ModelBundle, ModelConfig};
use moe_lens::prune::PruneMask;
use moe_lens::split::{split_model, ClusterConfig};
use moe_lens::tensor::Matrix;
use moe_lens::tokenizer::Tokenizer;
use moe_lens::train::{train, TrainConfig};
use rand::Rng;

#[test]
fn uniform_logits_give_vocab_perplexity() {
    let model: ModelBundle<f32> = ModelBundle::zeros(ModelConfig::new(1, 8, 16, 2, 259, 32));
    let tok = Tokenizer::byte_level();
    let ppl = Evaluator::new(&model, &tok).unwrap().perplexity(&["hello there".into()], 200, "la").unwrap();
    assert!((ppl.value - 259.0).abs() < 1e-3, "{}", ppl.value);
}

#[test]
fn two_token_hand_computation() {
    let logits = Matrix::from_vec(2, 3, vec![1.0f64, 2.0, 0.5, 0.0, 0.0, 0.0]);
    let (nll, n) = sequence_nll(&logits, &[0, 1]);
    let expected = -(2.0f64.exp() / (1.0f64.exp() + 2.0f64.exp() + 0.5f64.exp())).ln();
    assert_eq!(n, 1);
    assert!((nll - expected).abs() < 1e-6);
    assert!(((nll / n as f64).exp() - expected.exp()).abs() < 1e-6);
    // Essentially all mass on the true token.
    let sharp = Matrix::from_vec(2, 3, vec![0.0f64, 60.0, 0.0, 0.0, 0.0, 0.0]);
    assert!((sequence_nll(&sharp, &[0, 1]).0).exp() - 1.0 < 1e-12);
}

#[test]
fn answer_extraction() {
    assert_eq!(extract_number("the answer is 42."), Some("42".into()));
    assert_eq!(extract_number("from 3 to 1,250"), Some("1250".into()));
    assert_eq!(extract_number("+7 or -2.5"), Some("-2.5".into()));
    assert_eq!(extract_number("no digits"), None);
}

#[test]
fn argmax_ties_and_shift_invariance() {
    assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    let s = [0.2, -1.0, 0.7, 0.7, 0.1];
    let shifted: Vec<f64> = s.iter().map(|v| v + 123.0).collect();
    assert_eq!(argmax(&s), argmax(&shifted));
}

#[test]
fn trained_continuation_is_chosen() {
    let tok = Tokenizer::byte_level();
    let mut model = moe_lens::model::random_model(&ModelConfig::new(1, 32, 64, 2, 259, 48), 1).unwrap();
    let text = "the cat sat on the mat";
    let data = vec![tok.encode_sample(text, 48)];
    let cfg = TrainConfig { steps: 150, batch_size: 1, learning_rate: 1e-2, warmup_steps: 5, ..TrainConfig::default() };
    train(&mut model, &data, &cfg).unwrap();
    let item = McqItem {
        question: "the cat sat on the".into(),
        options: vec!["dog".into(), "sky".into(), "mat".into(), "cup".into(), "hen".into()],
        answer: 2,
    };
    let ev = Evaluator::new(&model, &tok).unwrap();
    for scoring in [OptionScoring::Normalized, OptionScoring::Raw] {
        assert_eq!(ev.mcq_accuracy(std::slice::from_ref(&item), scoring, "en").unwrap().value, 1.0);
    }
}

fn random_word(rng: &mut impl Rng) -> String {
    (0..rng.gen_range(2..6)).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
}

#[test]
fn random_model_is_at_chance_on_five_options() {
    let model = common::small_model(21);
    let tok = Tokenizer::byte_level();
    let mut rng = common::rng(77);
    let items: Vec<McqItem> = (0..1000)
        .map(|_| McqItem {
            question: (0..3).map(|_| random_word(&mut rng)).collect::<Vec<_>>().join(" "),
            options: (0..5).map(|_| random_word(&mut rng)).collect(),
            answer: rng.gen_range(0..5),
        })
        .collect();
    let acc = Evaluator::new(&model, &tok).unwrap().mcq_accuracy(&items, OptionScoring::Normalized, "x").unwrap();
    assert!((acc.value - 0.2).abs() <= 0.04, "{}", acc.value);
}

#[test]
fn full_mask_reproduces_every_metric() {
    let model = common::small_model(5);
    let tok = Tokenizer::byte_level();
    let partition = split_model(&model, &ClusterConfig::new(8, 0)).unwrap();
    let full = PruneMask::full(2, 8);
    let origin = Evaluator::new(&model, &tok).unwrap();
    let masked = Evaluator::new(&model, &tok).unwrap().with_mask(&partition, &full).unwrap();
    let corpus = vec!["abc def".to_string(), "ghij".to_string()];
    assert_eq!(origin.perplexity(&corpus, 200, "x").unwrap().value, masked.perplexity(&corpus, 200, "x").unwrap().value);
    let items = vec![McqItem { question: "q".into(), options: vec!["a".into(), "bb".into(), "c".into()], answer: 0 }; 3];
    assert_eq!(
        origin.mcq_predictions(&items, OptionScoring::Normalized).unwrap(),
        masked.mcq_predictions(&items, OptionScoring::Normalized).unwrap()
    );
    assert_eq!(origin.generate("1+1=", 6).unwrap(), masked.generate("1+1=", 6).unwrap());
    let gen = vec![GenItem { prompt: "2+2=".into(), answer: "4".into() }];
    assert_eq!(origin.exact_match(&gen, 4, "x").unwrap().value, masked.exact_match(&gen, 4, "x").unwrap().value);
}
