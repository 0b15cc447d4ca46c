use std::collections::BTreeMap;

use proptest::prelude::*;

use nmtlab::backtranslate::{mix, AugmentationConfig};
use nmtlab::corpus::{
    char_ngram_cosine, filter_misaligned, kfold_split, normalize_line, smart_truncate, FilterConfig, ParallelCorpus,
    SentencePair,
};
use nmtlab::metrics::ter::{edit_distance, ter};
use nmtlab::metrics::{bleu, chrf, score_lines, BleuOptions, ChrfOptions};
use nmtlab::stats::{bonferroni, ttest, TTestVariant};
use nmtlab::subword::{apply_bpe, decode_bpe, learn_bpe};

fn word() -> impl Strategy<Value = String> {
    "[a-zäöüß]{1,7}"
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 1..8).prop_map(|w| w.join(" "))
}

fn messy_line() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop_oneof![
            word(),
            Just("<b>".to_string()),
            Just("</i>".to_string()),
            Just("[applause]".to_string()),
            Just("(note)".to_string()),
            Just("\t".to_string()),
            Just("\u{200b}".to_string()),
            Just("A\u{0308}".to_string()),
            Just("ÉCOLE".to_string()),
            Just("<".to_string()),
            Just(">".to_string()),
            "[ -~]{0,4}",
        ],
        0..10,
    )
    .prop_map(|parts| parts.concat())
}

fn pair_corpus() -> impl Strategy<Value = Vec<(String, String)>> {
    prop::collection::vec((sentence(), sentence()), 1..25)
}

fn corpus_of(pairs: &[(String, String)], src: &str, tgt: &str) -> ParallelCorpus {
    ParallelCorpus::from_pairs(
        src,
        tgt,
        pairs
            .iter()
            .map(|(s, t)| SentencePair::new(s.clone(), t.clone()).unwrap())
            .collect(),
    )
}

fn scores() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..100.0, 5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn normalization_is_idempotent(raw in messy_line()) {
        let once = normalize_line(&raw);
        prop_assert_eq!(normalize_line(&once), once.clone());
        prop_assert!(!once.contains(['\n', '\r', '\t']));
        prop_assert_eq!(once.trim(), once.as_str());
    }

    #[test]
    fn cosine_is_symmetric_and_bounded(a in sentence(), b in sentence()) {
        let ab = char_ngram_cosine(&a, &b, 1, 3);
        let ba = char_ngram_cosine(&b, &a, 1, 3);
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((char_ngram_cosine(&a, &a, 1, 3) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn raising_threshold_never_keeps_more(pairs in pair_corpus(), t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
        let corpus = corpus_of(&pairs, "bar", "de");
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let cfg = |t| FilterConfig { cosine_threshold: t, ..FilterConfig::default() };
        let (_, r_lo) = filter_misaligned(&corpus, &cfg(lo));
        let (_, r_hi) = filter_misaligned(&corpus, &cfg(hi));
        prop_assert!(r_hi.kept_count <= r_lo.kept_count);
        prop_assert_eq!(r_lo.kept_count + r_lo.removed_misaligned, r_lo.input_count);
    }

    #[test]
    fn truncation_is_idempotent_and_never_lengthens(
        words in prop::collection::vec(prop_oneof![word(), Just("end.".to_string()), Just("ja!".to_string())], 1..40),
        limit in 1usize..30,
    ) {
        let text = words.join(" ");
        let pair = SentencePair::new(text.clone(), text.clone()).unwrap();
        let once = smart_truncate(&pair, limit);
        prop_assert_eq!(smart_truncate(&once, limit), once.clone());
        prop_assert!(once.source.len() <= pair.source.len());
        prop_assert!(once.source.split_whitespace().count() <= limit.max(1));
        prop_assert!(!once.source.is_empty());
    }

    #[test]
    fn kfold_partitions_and_repeats(n in 2usize..300, k in 2usize..8, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let split = kfold_split(n, k, seed).unwrap();
        let mut seen = vec![0usize; n];
        for f in 0..k {
            for i in split.test_indices(f) {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        let sizes = split.fold_sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(kfold_split(n, k, seed).unwrap(), split);
    }

    #[test]
    fn bpe_round_trips_under_any_dropout(
        train in prop::collection::vec(sentence(), 1..12),
        line in sentence(),
        merges in 0usize..60,
        dropout in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let model = learn_bpe(&train, merges).unwrap();
        let seg = apply_bpe(&line, &model, dropout, seed).unwrap();
        prop_assert_eq!(decode_bpe(&seg).unwrap(), line);
        for (tok, &unk) in seg.tokens.iter().zip(&seg.unknown) {
            prop_assert!(unk || model.contains(tok), "{} neither known nor flagged", tok);
        }
    }

    #[test]
    fn more_merges_never_more_tokens(
        train in prop::collection::vec(sentence(), 1..12),
        line in sentence(),
        a in 0usize..50,
        b in 0usize..50,
    ) {
        let (few, many) = if a <= b { (a, b) } else { (b, a) };
        let coarse = apply_bpe(&line, &learn_bpe(&train, many).unwrap(), 0.0, 0).unwrap();
        let fine = apply_bpe(&line, &learn_bpe(&train, few).unwrap(), 0.0, 0).unwrap();
        prop_assert!(coarse.len() <= fine.len());
    }

    #[test]
    fn metrics_are_bounded_and_perfect_on_identity(
        refs in prop::collection::vec(sentence(), 1..6),
        hyps in prop::collection::vec(prop_oneof![sentence(), Just(String::new())], 6),
    ) {
        let hyps = &hyps[..refs.len()];
        let s = score_lines(hyps, &refs).unwrap();
        prop_assert!((0.0..=100.0).contains(&s.bleu.value));
        prop_assert!((0.0..=100.0).contains(&s.chrf.value));
        prop_assert!(s.ter.value >= 0.0);
        for m in [&s.bleu, &s.chrf, &s.ter] {
            prop_assert!((m.components.recompute() - m.value).abs() < 1e-9);
        }
        let same = score_lines(&refs, &refs).unwrap();
        prop_assert!((same.bleu.value - 100.0).abs() < 1e-9);
        prop_assert!((same.chrf.value - 100.0).abs() < 1e-9);
        prop_assert_eq!(same.ter.value, 0.0);
    }

    #[test]
    fn ter_never_exceeds_levenshtein(
        pairs in prop::collection::vec((prop::collection::vec(0u8..4, 0..12), prop::collection::vec(0u8..4, 1..12)), 1..5),
    ) {
        let tok = |v: &Vec<u8>| v.iter().map(|x| x.to_string()).collect::<Vec<String>>();
        let hyps: Vec<Vec<String>> = pairs.iter().map(|(h, _)| tok(h)).collect();
        let refs: Vec<Vec<String>> = pairs.iter().map(|(_, r)| tok(r)).collect();
        let score = ter(&hyps, &refs).unwrap().value;
        let lev: usize = pairs.iter().map(|(h, r)| edit_distance(h, r)).sum();
        let ref_len: usize = refs.iter().map(Vec::len).sum();
        prop_assert!(score <= 100.0 * lev as f64 / ref_len as f64 + 1e-9);
    }

    #[test]
    fn concatenating_a_corpus_with_itself_keeps_scores(
        refs in prop::collection::vec(sentence(), 1..5),
        hyps in prop::collection::vec(sentence(), 5),
    ) {
        let hyps: Vec<Vec<&str>> = hyps[..refs.len()].iter().map(|h| h.split(' ').collect()).collect();
        let refs_t: Vec<Vec<&str>> = refs.iter().map(|r| r.split(' ').collect()).collect();
        fn twice<'a>(v: &[Vec<&'a str>]) -> Vec<Vec<&'a str>> {
            v.iter().chain(v).cloned().collect()
        }
        let once = bleu(&hyps, &refs_t, &BleuOptions::default()).unwrap().value;
        let double = bleu(&twice(&hyps), &twice(&refs_t), &BleuOptions::default()).unwrap().value;
        prop_assert!((once - double).abs() < 1e-9);
        let hl: Vec<String> = hyps.iter().map(|h| h.join(" ")).collect();
        let c1 = chrf(&hl, &refs, &ChrfOptions::default()).unwrap().value;
        let h2: Vec<String> = hl.iter().chain(&hl).cloned().collect();
        let r2: Vec<String> = refs.iter().chain(&refs).cloned().collect();
        let c2 = chrf(&h2, &r2, &ChrfOptions::default()).unwrap().value;
        prop_assert!((c1 - c2).abs() < 1e-9);
    }

    #[test]
    fn ttest_is_antisymmetric(a in scores(), b in scores(), welch in any::<bool>()) {
        let v = if welch { TTestVariant::Welch } else { TTestVariant::Paired };
        let ab = ttest(&a, &b, v).unwrap();
        let ba = ttest(&b, &a, v).unwrap();
        prop_assert_eq!(ab.t, -ba.t);
        prop_assert_eq!(ab.p, ba.p);
        prop_assert!((0.0..=1.0).contains(&ab.p));
    }

    #[test]
    fn ttest_is_scale_invariant(a in scores(), b in scores(), c in 0.01f64..100.0, welch in any::<bool>()) {
        let v = if welch { TTestVariant::Welch } else { TTestVariant::Paired };
        let base = ttest(&a, &b, v).unwrap();
        prop_assume!(!base.degenerate && base.t.abs() < 1e6);
        let sa: Vec<f64> = a.iter().map(|x| x * c).collect();
        let sb: Vec<f64> = b.iter().map(|x| x * c).collect();
        let scaled = ttest(&sa, &sb, v).unwrap();
        prop_assert!((scaled.t - base.t).abs() <= 1e-9 * base.t.abs().max(1.0));
        prop_assert!((scaled.p - base.p).abs() <= 1e-9);
    }

    #[test]
    fn bonferroni_decisions_and_monotonicity(p in prop::collection::vec(0.0f64..=1.0, 1..10), alpha in 0.001f64..0.5) {
        let m = p.len() as f64;
        let adj = bonferroni(&p, alpha);
        for a in &adj {
            prop_assert_eq!(a.corrected_p, (a.raw_p * m).min(1.0));
            prop_assert_eq!(a.reject, a.corrected_p < alpha);
            if a.raw_p * m <= 1.0 {
                prop_assert_eq!(a.reject, a.raw_p < alpha / m);
            }
        }
        let mut longer = p.clone();
        longer.push(0.5);
        for (short, long) in adj.iter().zip(bonferroni(&longer, alpha)) {
            prop_assert!(long.corrected_p >= short.corrected_p);
        }
    }

    #[test]
    fn mix_preserves_the_multiset(
        gold in pair_corpus(),
        silver in prop::collection::vec((sentence(), sentence()), 0..20),
        seed in any::<u64>(),
    ) {
        let aug = AugmentationConfig { seed, ..AugmentationConfig::default() };
        let g = corpus_of(&gold, "bar", "de");
        let s = corpus_of(&silver, "bar", "de");
        let mixed = mix(&g, &s, &aug).unwrap();
        let count = |pairs: &mut dyn Iterator<Item = &SentencePair>| {
            let mut m: BTreeMap<(String, String), usize> = BTreeMap::new();
            for p in pairs {
                *m.entry((p.source.clone(), p.target.clone())).or_default() += 1;
            }
            m
        };
        prop_assert_eq!(
            count(&mut mixed.pairs.iter()),
            count(&mut g.pairs.iter().chain(&s.pairs))
        );
    }
}
