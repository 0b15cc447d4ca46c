use std::collections::BTreeSet;

use nmtlab::backtranslate::{back_translate, AugmentationConfig, NeuralTranslator};
use nmtlab::corpus::{MonolingualCorpus, ParallelCorpus, SentencePair};
use nmtlab::model::{
    init_params, train_step, Batch, DecodeOptions, OptimConfig, TrainState, TransformerConfig, Vocab,
};
use nmtlab::subword::build_joint_bpe;

const GOLD: [(&str, &str); 8] = [
    ("i hob an hund", "ich habe einen hund"),
    ("mia san do", "wir sind da"),
    ("des is guad", "das ist gut"),
    ("heit is kalt", "heute ist es kalt"),
    ("wo is d katz", "wo ist die katze"),
    ("er geht hoam", "er geht nach hause"),
    ("i mog di", "ich mag dich"),
    ("servus beinand", "hallo zusammen"),
];

/// A reverse model that has memorized the gold pairs turns the gold targets
/// back into the gold sources, so the silver corpus equals the gold corpus.
#[test]
fn memorized_reverse_model_reproduces_gold() {
    let sources: Vec<&str> = GOLD.iter().map(|p| p.0).collect();
    let targets: Vec<&str> = GOLD.iter().map(|p| p.1).collect();
    let bpe = build_joint_bpe(&[sources.clone(), targets.clone()], 200).unwrap();
    let vocab = Vocab::from_bpe(&bpe);
    let config = TransformerConfig {
        vocab_size: vocab.len(),
        d_model: 32,
        num_heads: 2,
        num_encoder_layers: 1,
        num_decoder_layers: 1,
        ffn_dim: 64,
        max_positions: 32,
        dropout_p: 0.0,
        label_smoothing: 0.0,
    };
    // Reverse direction: target language in, source language out.
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = GOLD
        .iter()
        .map(|(s, t)| (vocab.encode_line(t, &bpe, 0.0, 0).unwrap(), vocab.encode_line(s, &bpe, 0.0, 0).unwrap()))
        .collect();
    let batch = Batch::new(&pairs);
    let optim = OptimConfig {
        peak_lr: 3e-3,
        warmup_steps: 10,
        ..OptimConfig::default()
    };
    let mut state = TrainState::new(init_params(&config, 11).unwrap(), 11);
    for _ in 0..300 {
        train_step(&mut state, &batch, &config, &optim).unwrap();
    }
    let translator =
        NeuralTranslator::new(state.params, config, bpe, DecodeOptions::default(), "memorized".into()).unwrap();

    let mono = MonolingualCorpus::new("de", targets.iter().map(|t| t.to_string()).collect());
    let aug = AugmentationConfig {
        mono_sample_size: GOLD.len(),
        ..AugmentationConfig::default()
    };
    let (silver, skips) = back_translate(&translator, &mono, "bar", &aug, 2).unwrap();
    assert_eq!(skips.skipped, 0);
    let gold = ParallelCorpus::from_pairs("bar", "de", GOLD.iter().map(|(s, t)| SentencePair::new(*s, *t).unwrap()).collect());
    assert_eq!((silver.source_lang.as_str(), silver.target_lang.as_str()), ("bar", "de"));
    let as_set = |c: &ParallelCorpus| c.pairs.iter().map(|p| (p.source.clone(), p.target.clone())).collect::<BTreeSet<_>>();
    assert_eq!(as_set(&silver), as_set(&gold));
}
