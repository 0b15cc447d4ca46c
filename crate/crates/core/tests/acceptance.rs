//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! The end-to-end experiment and its determinism rerun write to
//! `target/acceptance/` (or `$NMTLAB_ACCEPTANCE_DIR`) and reuse finished
//! units from there, so only the first invocation pays for training.
#![allow(clippy::neg_cmp_op_on_partial_ord)]


use std::collections::{HashMap, VecDeque};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nmtlab::corpus::kfold_split;
use nmtlab::metrics::ter::align;
use nmtlab::metrics::{bleu, chrf, ter, BleuOptions, ChrfOptions, ScoreComponents};
use nmtlab::model::{
    forward_loss, init_params, loss_gradients, train_step, translate, Batch, DecodeOptions, OptimConfig, TrainState,
    TransformerConfig, NUM_SPECIAL,
};
use nmtlab::pipeline::{run_experiment, ExperimentConfig, ReportBody, BACK_TRANSLATION, BASELINE};
use nmtlab::stats::{bonferroni, ttest, TTestVariant};
use nmtlab::subword::{apply_bpe, decode_bpe, learn_bpe};
use nmtlab::synthetic::{generate, SyntheticSpec};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn acceptance_dir() -> PathBuf {
    std::env::var_os("NMTLAB_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace_root().join("target/acceptance"))
}

// Criterion 1 --------------------------------------------------------------

/// (direction, metric, group 1, group 2, raw p, printed corrected p, reject)
const PRINTED_TESTS: [(&str, &str, &str, &str, f64, f64, bool); 18] = [
    ("bar-de", "BLEU", "Baseline", "BT", 0.0012, 0.0036, true),
    ("bar-de", "BLEU", "Baseline", "Transfer", 0.0, 0.0, true),
    ("bar-de", "BLEU", "BT", "Transfer", 0.0, 0.0, true),
    ("bar-de", "chrF", "Baseline", "BT", 0.0004, 0.0012, true),
    ("bar-de", "chrF", "Baseline", "Transfer", 0.0, 0.0, true),
    ("bar-de", "chrF", "BT", "Transfer", 0.0, 0.0, true),
    ("bar-de", "TER", "Baseline", "BT", 0.0003, 0.0009, true),
    ("bar-de", "TER", "Baseline", "Transfer", 0.0, 0.0, true),
    ("bar-de", "TER", "BT", "Transfer", 0.0, 0.0, true),
    ("de-bar", "BLEU", "Baseline", "BT", 0.0214, 0.0641, false),
    ("de-bar", "BLEU", "Baseline", "Transfer", 0.0, 0.0, true),
    ("de-bar", "BLEU", "BT", "Transfer", 0.0, 0.0, true),
    ("de-bar", "chrF", "Baseline", "BT", 0.005, 0.0149, true),
    ("de-bar", "chrF", "Baseline", "Transfer", 0.0, 0.0, true),
    ("de-bar", "chrF", "BT", "Transfer", 0.0, 0.0, true),
    ("de-bar", "TER", "Baseline", "BT", 0.001, 0.0031, true),
    ("de-bar", "TER", "Baseline", "Transfer", 0.0, 0.0, true),
    ("de-bar", "TER", "BT", "Transfer", 0.0, 0.0, true),
];

fn bonferroni_reproduction() -> Outcome {
    let mut checked = 0;
    for family in PRINTED_TESTS.chunks(3) {
        let raw: Vec<f64> = family.iter().map(|r| r.4).collect();
        for (row, adj) in family.iter().zip(bonferroni(&raw, 0.05)) {
            let (dir, metric, g1, g2, _, printed, reject) = *row;
            ensure!(
                close(adj.corrected_p, printed, 0.0005),
                "{dir} {metric} {g1}/{g2}: corrected {} vs printed {printed}",
                adj.corrected_p
            );
            ensure!(adj.reject == reject, "{dir} {metric} {g1}/{g2}: reject {} vs printed {reject}", adj.reject);
            checked += 1;
        }
    }
    let lone = bonferroni(&[0.0214, 0.0, 0.0], 0.05)[0];
    Ok(format!(
        "{checked} rows; 0.0214 -> {:.4}, reject {}",
        lone.corrected_p, lone.reject
    ))
}

// Criterion 2 --------------------------------------------------------------

fn fold_sizes() -> Outcome {
    let split = kfold_split(42266, 5, 0).map_err(|e| e.to_string())?;
    let sizes: Vec<(usize, usize)> = (0..5)
        .map(|f| (split.train_indices(f).len(), split.test_indices(f).len()))
        .collect();
    let expected = vec![(33813, 8453), (33813, 8453), (33813, 8453), (33813, 8453), (33812, 8454)];
    ensure!(sizes == expected, "train/test sizes {sizes:?}");
    Ok(format!("{sizes:?}"))
}

// Criterion 3 --------------------------------------------------------------

fn toks(lines: &[&'static str]) -> Vec<Vec<&'static str>> {
    lines.iter().map(|l| l.split_whitespace().collect()).collect()
}

fn bleu_of(h: &[&'static str], r: &[&'static str]) -> f64 {
    bleu(&toks(h), &toks(r), &BleuOptions::default()).unwrap().value
}

fn chrf_of(h: &[&str], r: &[&str], max_n: usize) -> f64 {
    chrf(h, r, &ChrfOptions { max_n, beta: 2.0 }).unwrap().value
}

fn ter_of(h: &[&'static str], r: &[&'static str]) -> f64 {
    ter(&toks(h), &toks(r)).unwrap().value
}

/// Independent chrF: every substring enumerated and counted by linear scan.
fn chrf_brute(hyps: &[&str], refs: &[&str], max_n: usize, beta: f64) -> f64 {
    let mut hyp_tot = vec![0usize; max_n];
    let mut ref_tot = vec![0usize; max_n];
    let mut matched = vec![0usize; max_n];
    for (h, r) in hyps.iter().zip(refs) {
        let h: String = h.chars().filter(|c| *c != ' ').collect();
        let r: String = r.chars().filter(|c| *c != ' ').collect();
        let hc: Vec<char> = h.chars().collect();
        let rc: Vec<char> = r.chars().collect();
        for n in 1..=max_n {
            let grams = |cs: &[char]| -> Vec<String> {
                if cs.len() < n {
                    return Vec::new();
                }
                (0..=cs.len() - n).map(|i| cs[i..i + n].iter().collect()).collect()
            };
            let hg = grams(&hc);
            let mut rg = grams(&rc);
            hyp_tot[n - 1] += hg.len();
            ref_tot[n - 1] += rg.len();
            for g in &hg {
                if let Some(pos) = rg.iter().position(|x| x == g) {
                    rg.remove(pos);
                    matched[n - 1] += 1;
                }
            }
        }
    }
    let orders: Vec<usize> = (0..max_n).filter(|&i| hyp_tot[i] + ref_tot[i] > 0).collect();
    if orders.is_empty() {
        return 100.0;
    }
    let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let k = orders.len() as f64;
    let p: f64 = orders.iter().map(|&i| div(matched[i], hyp_tot[i])).sum::<f64>() / k;
    let r: f64 = orders.iter().map(|&i| div(matched[i], ref_tot[i])).sum::<f64>() / k;
    let b2 = beta * beta;
    if b2 * p + r == 0.0 {
        0.0
    } else {
        100.0 * (1.0 + b2) * p * r / (b2 * p + r)
    }
}

fn metric_oracles() -> Outcome {
    let tol = 1e-6;
    let mut n_bleu = 0;
    let mut check_bleu = |h: &[&'static str], r: &[&'static str], want: f64| -> Result<(), String> {
        let got = bleu_of(h, r);
        ensure!(close(got, want, tol), "BLEU {h:?} vs {r:?}: {got} != {want}");
        n_bleu += 1;
        Ok(())
    };
    check_bleu(&["the cat sat on the mat"], &["the cat sat on the mat"], 100.0)?;
    check_bleu(&["a b c"], &["d e f"], 0.0)?;
    check_bleu(&["a b c d"], &["a b c d e"], 100.0 * (1.0f64 - 5.0 / 4.0).exp())?;
    check_bleu(&["a b c d e"], &["a b c d"], 100.0 * (0.2f64).powf(0.25))?;
    check_bleu(&["a b c d e f"], &["a b c d e x"], 100.0 * (1.0f64 / 3.0).powf(0.25))?;
    check_bleu(
        &["a b c d", "e f g h"],
        &["a b c d", "e f g x"],
        100.0 * (7.0 / 8.0 * 5.0 / 6.0 * 3.0 / 4.0 * 0.5f64).powf(0.25),
    )?;
    check_bleu(&["a b"], &["a b c"], 100.0 * (-0.5f64).exp())?;
    check_bleu(&["a b"], &["a b"], 100.0)?;
    check_bleu(&["a a a a"], &["a b c d"], 0.0)?;
    check_bleu(&[""], &["a b"], 0.0)?;
    check_bleu(
        &["x a b c d", "a b c d"],
        &["a b c d", "a b c d"],
        100.0 * (8.0 / 9.0 * 6.0 / 7.0 * 4.0 / 5.0 * 2.0 / 3.0f64).powf(0.25),
    )?;
    let clipped = bleu(&toks(&["the the the the the the the"]), &toks(&["the cat is on the mat"]), &BleuOptions::default()).unwrap();
    match &clipped.components {
        ScoreComponents::Bleu { precisions, .. } => {
            ensure!(close(precisions[0], 2.0 / 7.0, 1e-12), "clipped unigram precision {}", precisions[0]);
            n_bleu += 1;
        }
        _ => return Err("BLEU components missing".into()),
    }
    ensure!(clipped.value == 0.0, "all-repeated hypothesis BLEU {}", clipped.value);

    let mut n_chrf = 0;
    let mut check_chrf = |h: &[&str], r: &[&str], max_n: usize, want: f64| -> Result<(), String> {
        let got = chrf_of(h, r, max_n);
        ensure!(close(got, want, tol), "chrF {h:?} vs {r:?}: {got} != {want}");
        n_chrf += 1;
        Ok(())
    };
    check_chrf(&["the cat sat"], &["the cat sat"], 6, 100.0)?;
    check_chrf(&["abc"], &["xyz"], 6, 0.0)?;
    check_chrf(&["abcd"], &["abce"], 2, 100.0 * 17.0 / 24.0)?;
    check_chrf(&["ab"], &["abc"], 6, 100.0 * 630.0 / 1485.0)?;
    check_chrf(&["a b"], &["ab"], 6, 100.0)?;
    check_chrf(&["ab cd"], &["cd ab"], 6, 100.0 * 5.0 / 12.0)?;
    for (h, r) in [
        (vec!["abcd"], vec!["abce"]),
        (vec!["s hod heit abend"], vec!["se hod heid obend"]),
        (vec!["im restaurant fisch bestöid"], vec!["im restaurant fisch bestejd"]),
        (vec!["aaaa bbb", "xyz"], vec!["aab bba", "xyzzy"]),
        (vec!["kurz"], vec!["ein deutlich längerer satz"]),
        (vec!["hallo welt", "guten morgen"], vec!["servus welt", "griaß di"]),
    ] {
        for max_n in [2, 6] {
            let want = chrf_brute(&h, &r, max_n, 2.0);
            check_chrf(&h, &r, max_n, want)?;
        }
    }

    let mut n_ter = 0;
    let mut check_ter = |h: &[&'static str], r: &[&'static str], want: f64| -> Result<(), String> {
        let got = ter_of(h, r);
        ensure!(close(got, want, tol), "TER {h:?} vs {r:?}: {got} != {want}");
        n_ter += 1;
        Ok(())
    };
    check_ter(&["a b c d"], &["a b c d"], 0.0)?;
    check_ter(&["a b x d"], &["a b c d"], 25.0)?;
    check_ter(&["d a b c"], &["a b c d"], 25.0)?;
    check_ter(&["c d a b"], &["a b c d"], 25.0)?;
    check_ter(&["a b c"], &["a b c d"], 25.0)?;
    check_ter(&["a b c d e"], &["a b c d"], 25.0)?;
    check_ter(&[""], &["a b c d"], 100.0)?;
    check_ter(&["x y"], &["a b c d"], 100.0)?;
    check_ter(&["b a"], &["a b"], 50.0)?;
    check_ter(&["d e f a b c"], &["a b c d e f"], 100.0 / 6.0)?;
    check_ter(&["a b", "c d e f"], &["a x", "c d e f"], 100.0 / 6.0)?;
    check_ter(&["a x c y e"], &["a b c d e"], 40.0)?;
    Ok(format!("BLEU {n_bleu}, chrF {n_chrf}, TER {n_ter} oracle cases"))
}

// Criterion 4 --------------------------------------------------------------

fn all_sequences(max_len: usize, alphabet: u8) -> Vec<Vec<u8>> {
    let mut out = vec![vec![]];
    let mut frontier: Vec<Vec<u8>> = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for a in 0..alphabet {
                let mut t = s.clone();
                t.push(a);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Every arrangement reachable from `h` by block moves, with the fewest moves.
fn shift_closure(h: &[u8]) -> Vec<(Vec<u8>, usize)> {
    let mut dist: HashMap<Vec<u8>, usize> = HashMap::new();
    let mut queue = VecDeque::new();
    dist.insert(h.to_vec(), 0);
    queue.push_back(h.to_vec());
    while let Some(s) = queue.pop_front() {
        let d = dist[&s];
        let n = s.len();
        for start in 0..n {
            for len in 1..=n - start {
                let mut rest = s[..start].to_vec();
                rest.extend_from_slice(&s[start + len..]);
                for dest in 0..=rest.len() {
                    let mut t = rest[..dest].to_vec();
                    t.extend_from_slice(&s[start..start + len]);
                    t.extend_from_slice(&rest[dest..]);
                    if !dist.contains_key(&t) {
                        dist.insert(t.clone(), d + 1);
                        queue.push_back(t);
                    }
                }
            }
        }
    }
    dist.into_iter().collect()
}

/// Levenshtein distance for sequences of at most six symbols.
fn small_levenshtein(a: &[u8], b: &[u8]) -> usize {
    let mut prev = [0usize; 7];
    let mut cur = [0usize; 7];
    for (j, p) in prev.iter_mut().enumerate().take(b.len() + 1) {
        *p = j;
    }
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

fn ter_exhaustive() -> Outcome {
    let seqs = all_sequences(6, 3);
    let mut pairs = 0usize;
    for h in &seqs {
        let closure = shift_closure(h);
        for r in &seqs {
            let brute = closure.iter().map(|(s, d)| d + small_levenshtein(s, r)).min().unwrap();
            let got = align(h, r).counts.total();
            ensure!(got == brute, "hyp {h:?} ref {r:?}: {got} edits, minimum is {brute}");
            pairs += 1;
        }
    }
    Ok(format!("{pairs} pairs equal to brute force"))
}

// Criterion 5 --------------------------------------------------------------

fn gradient_check() -> Outcome {
    let config = TransformerConfig {
        vocab_size: 11,
        d_model: 8,
        num_heads: 2,
        num_encoder_layers: 2,
        num_decoder_layers: 2,
        ffn_dim: 16,
        max_positions: 16,
        dropout_p: 0.0,
        label_smoothing: 0.1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // Perturb every tensor so biases and norm gains are away from 0 and 1.
    let tensors = init_params(&config, 5)
        .map_err(|e| e.to_string())?
        .into_tensors()
        .into_iter()
        .map(|(k, mut m)| {
            for v in m.data_mut() {
                *v += rng.gen_range(-0.2..0.2);
            }
            (k, m)
        })
        .collect();
    let params = nmtlab::model::ModelParams::from_tensors(&config, tensors).map_err(|e| e.to_string())?;
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = (0..3)
        .map(|_| {
            let s = (0..rng.gen_range(1..=4)).map(|_| rng.gen_range(NUM_SPECIAL..11)).collect();
            let t = (0..rng.gen_range(1..=4)).map(|_| rng.gen_range(NUM_SPECIAL..11)).collect();
            (s, t)
        })
        .collect();
    let batch = Batch::new(&pairs);
    let (_, grads) = loss_gradients(&params, &batch, &config).map_err(|e| e.to_string())?;
    ensure!(grads.len() == config.tensor_shapes().len(), "{} gradients for {} tensors", grads.len(), config.tensor_shapes().len());
    let h = 1e-5;
    let mut worst = (String::new(), 0.0f64);
    for (name, g) in &grads {
        let (mut diff2, mut norm2) = (0.0, 0.0);
        for idx in 0..g.data().len() {
            let mut p = params.clone();
            let base = p.tensor(name).data()[idx];
            p.get_mut(name).unwrap().data_mut()[idx] = base + h;
            let up = forward_loss(&p, &batch, &config).unwrap();
            p.get_mut(name).unwrap().data_mut()[idx] = base - h;
            let down = forward_loss(&p, &batch, &config).unwrap();
            let numeric = (up - down) / (2.0 * h);
            diff2 += (numeric - g.data()[idx]).powi(2);
            norm2 += numeric.powi(2).max(g.data()[idx].powi(2));
        }
        // Key projection biases get exactly zero gradient; compare them
        // against a small absolute floor.
        let rel = diff2.sqrt() / norm2.sqrt().max(1e-6);
        ensure!(rel < 1e-4, "{name}: relative error {rel:.2e}");
        if rel > worst.1 {
            worst = (name.clone(), rel);
        }
    }
    Ok(format!("{} tensors, worst {} at {:.2e}", grads.len(), worst.0, worst.1))
}

// Criterion 6 --------------------------------------------------------------

fn memorization() -> Outcome {
    let vocab = 24;
    let config = TransformerConfig {
        vocab_size: vocab,
        d_model: 32,
        num_heads: 2,
        num_encoder_layers: 1,
        num_decoder_layers: 1,
        ffn_dim: 64,
        max_positions: 16,
        dropout_p: 0.0,
        label_smoothing: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let sentence = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        (0..rng.gen_range(3..=6)).map(|_| rng.gen_range(NUM_SPECIAL..vocab)).collect()
    };
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = (0..32).map(|_| (sentence(&mut rng), sentence(&mut rng))).collect();
    let batch = Batch::new(&pairs);
    let optim = OptimConfig {
        peak_lr: 3e-3,
        warmup_steps: 20,
        ..OptimConfig::default()
    };
    let budget = 1500;
    let mut state = TrainState::new(init_params(&config, 32).map_err(|e| e.to_string())?, 32);
    let mut loss = f64::INFINITY;
    while state.step < budget {
        train_step(&mut state, &batch, &config, &optim).map_err(|e| e.to_string())?;
        if state.step.is_multiple_of(25) {
            loss = forward_loss(&state.params, &batch, &config).unwrap();
            if loss < 0.1 {
                break;
            }
        }
    }
    ensure!(loss < 0.1, "loss {loss:.4} after {} steps", state.step);
    let exact = pairs
        .iter()
        .filter(|(s, t)| translate(&state.params, &config, s, &DecodeOptions::default()).unwrap().tokens == *t)
        .count();
    ensure!(exact >= 30, "{exact}/32 targets reproduced");
    Ok(format!("loss {loss:.4} after {} steps (budget {budget}), {exact}/32 exact", state.step))
}

// Criterion 7 --------------------------------------------------------------

fn random_line(rng: &mut ChaCha8Rng) -> String {
    const SYLLABLES: [&str; 16] = ["ba", "de", "hoa", "mi", "sch", "st", "ei", "au", "ö", "ü", "ß", "n", "r", "t", "la", "gü"];
    let words = rng.gen_range(1..=10);
    (0..words)
        .map(|_| (0..rng.gen_range(1..=4)).map(|_| SYLLABLES[rng.gen_range(0..SYLLABLES.len())]).collect::<String>())
        .collect::<Vec<_>>()
        .join(" ")
}

fn bpe_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let train: Vec<String> = (0..1000).map(|_| random_line(&mut rng)).collect();
    let lines: Vec<String> = (0..1000).map(|_| random_line(&mut rng)).collect();
    let model = learn_bpe(&train, 300).map_err(|e| e.to_string())?;
    for (i, line) in lines.iter().enumerate() {
        ensure!(nmtlab::corpus::normalize_line(line) == *line, "generated line is not normalized: {line:?}");
        for dropout in [0.0, 0.5, 1.0] {
            let seg = apply_bpe(line, &model, dropout, i as u64).map_err(|e| e.to_string())?;
            let back = decode_bpe(&seg).map_err(|e| e.to_string())?;
            ensure!(back == *line, "dropout {dropout}: {line:?} came back as {back:?}");
        }
    }
    let schedule = [0, 10, 50, 100, 200, 300, 500];
    let models: Vec<_> = schedule.iter().map(|&m| learn_bpe(&train, m).unwrap()).collect();
    for line in &lines[..100] {
        let counts: Vec<usize> = models.iter().map(|m| apply_bpe(line, m, 0.0, 0).unwrap().len()).collect();
        ensure!(counts.windows(2).all(|w| w[1] <= w[0]), "{line:?}: token counts {counts:?} over merges {schedule:?}");
    }
    Ok(format!("1000 lines x 3 dropout rates round-trip; 100 lines monotone over merges {schedule:?}"))
}

// Criteria 8 and 10 --------------------------------------------------------

fn bundled_config(out: &Path, workers: usize) -> Result<ExperimentConfig, String> {
    let mut cfg = ExperimentConfig::load(&workspace_root().join("configs/synthetic.toml"), None).map_err(|e| e.to_string())?;
    cfg.output_dir = out.to_path_buf();
    cfg.workers = workers;
    Ok(cfg)
}

fn check_bundled_data(cfg: &ExperimentConfig) -> Result<(), String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fresh = generate(&SyntheticSpec::default())
        .and_then(|c| c.write(tmp.path()))
        .map_err(|e| e.to_string())?;
    let c = &cfg.corpus;
    for (bundled, regenerated) in [
        (&c.parallel_source, &fresh.gold_source),
        (&c.parallel_target, &fresh.gold_target),
        (&c.mono_source, &fresh.mono_source),
        (&c.mono_target, &fresh.mono_target),
        (&c.parent_source, &fresh.parent_source),
        (&c.parent_target, &fresh.parent_target),
    ] {
        let a = fs::read(bundled).map_err(|e| format!("{}: {e}", bundled.display()))?;
        let b = fs::read(regenerated).map_err(|e| e.to_string())?;
        ensure!(a == b, "{} differs from the generator output", bundled.display());
    }
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn directional_findings(body: &ReportBody) -> Outcome {
    let mut notes = Vec::new();
    for dir in &body.directions {
        let base = body.values(BASELINE, dir, nmtlab::metrics::MetricName::Bleu);
        let bt = body.values(BACK_TRANSLATION, dir, nmtlab::metrics::MetricName::Bleu);
        let (base_mean, bt_mean) = (mean(&base), mean(&bt));
        ensure!(base_mean >= 50.0, "(a) {dir}: baseline mean BLEU {base_mean:.2} < 50");
        ensure!(bt_mean >= base_mean - 0.5, "(b) {dir}: BT mean {bt_mean:.2} < baseline mean {base_mean:.2} - 0.5");

        let per_seed_gain: Vec<f64> = body
            .seeds
            .iter()
            .map(|&s| {
                let m = |sys| {
                    mean(&body.records(sys, dir).iter().filter(|r| r.seed == s).map(|r| r.scores.bleu.value).collect::<Vec<_>>())
                };
                m(BACK_TRANSLATION) - m(BASELINE)
            })
            .collect();
        let gain = median(per_seed_gain.clone());
        ensure!(gain > 0.0, "(b) {dir}: median per-seed BT gain {gain:.2} <= 0 ({per_seed_gain:?})");

        let steps = |s: u64, transfer: bool| -> f64 {
            median(
                body.convergence
                    .iter()
                    .filter(|c| c.seed == s && &c.direction == dir)
                    .map(|c| {
                        let v = if transfer { c.transfer_steps } else { c.baseline_steps };
                        v.map_or(f64::INFINITY, |x| x as f64)
                    })
                    .collect(),
            )
        };
        let transfer_steps = median(body.seeds.iter().map(|&s| steps(s, true)).collect());
        let random_steps = median(body.seeds.iter().map(|&s| steps(s, false)).collect());
        ensure!(
            transfer_steps <= random_steps,
            "(c) {dir}: transfer child needs {transfer_steps} steps, random init {random_steps}"
        );
        notes.push(format!(
            "{dir}: baseline {base_mean:.1}, BT {bt_mean:.1} (median seed gain {gain:+.1}), steps to target {transfer_steps} vs {random_steps}"
        ));
    }
    Ok(notes.join("; "))
}

fn end_to_end(slot: &mut Option<String>) -> Outcome {
    let cfg = bundled_config(&acceptance_dir().join("synthetic-a"), 0)?;
    check_bundled_data(&cfg)?;
    let started = Instant::now();
    let report = run_experiment(&cfg).map_err(|e| e.to_string())?;
    *slot = Some(serde_json::to_string(&report.body).map_err(|e| e.to_string())?);
    let findings = directional_findings(&report.body)?;
    Ok(format!("{findings} ({:.0}s)", started.elapsed().as_secs_f64()))
}

fn determinism(first: Option<String>) -> Outcome {
    let first = match first {
        Some(body) => body,
        None => {
            let cfg = bundled_config(&acceptance_dir().join("synthetic-a"), 0)?;
            let report = run_experiment(&cfg).map_err(|e| e.to_string())?;
            serde_json::to_string(&report.body).map_err(|e| e.to_string())?
        }
    };
    // Different directory and worker count; nothing is shared with the
    // first run.
    let cfg = bundled_config(&acceptance_dir().join("synthetic-b"), 1)?;
    let report = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let second = serde_json::to_string(&report.body).map_err(|e| e.to_string())?;
    ensure!(second == first, "report bodies differ");
    Ok(format!("report bodies byte-identical ({} bytes)", first.len()))
}

// Criterion 9 --------------------------------------------------------------

/// Two-tailed Student-t tail for df = 2 by composite Simpson integration of
/// the density over `u = 1/x` on `(0, 1/|t|]`.
fn t_tail_df2(t: f64) -> f64 {
    let density = |x: f64| (1.0 + x * x / 2.0).powf(-1.5) / (2.0 * 2f64.sqrt());
    let integrand = |u: f64| if u == 0.0 { 0.0 } else { density(1.0 / u) / (u * u) };
    let b = 1.0 / t.abs();
    let n = 20_000;
    let h = b / n as f64;
    let mut s = integrand(0.0) + integrand(b);
    for i in 1..n {
        s += integrand(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    2.0 * s * h / 3.0
}

fn ttest_oracle() -> Outcome {
    let r = ttest(&[1.0, 2.0, 3.0], &[1.0, 3.0, 4.0], TTestVariant::Paired).map_err(|e| e.to_string())?;
    ensure!(r.t == -2.0, "t = {}", r.t);
    ensure!(r.df == 2.0, "df = {}", r.df);
    let oracle = t_tail_df2(r.t);
    ensure!(close(r.p, oracle, 1e-6), "p = {} vs integrated {oracle}", r.p);
    let zero = ttest(&[4.0, 5.0, 6.0], &[4.0, 5.0, 6.0], TTestVariant::Paired).map_err(|e| e.to_string())?;
    ensure!(zero.t == 0.0 && zero.p == 1.0, "identical groups give t {} p {}", zero.t, zero.p);
    let sym = ttest(&[1.0, 2.0, 3.0], &[2.0, 1.0, 3.0], TTestVariant::Paired).map_err(|e| e.to_string())?;
    ensure!(sym.t == 0.0 && sym.p == 1.0, "zero mean difference gives t {} p {}", sym.t, sym.p);
    Ok(format!("t = {}, p = {:.9} (integrated {oracle:.9})", r.t, r.p))
}

// ---------------------------------------------------------------------------

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let started = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = started.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("PASS  {name} [{secs:.1}s]: {detail}");
            true
        }
        Err(detail) => {
            println!("FAIL  {name} [{secs:.1}s]: {detail}");
            false
        }
    }
}

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let wanted = |n: usize| filter.is_empty() || filter.iter().any(|f| f == &n.to_string());
    let mut results = Vec::new();
    let mut body = None;
    let mut step = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if wanted(n) {
            results.push(run(&format!("{n:>2} {name}"), f));
        }
    };
    step(1, "bonferroni reproduction", &mut bonferroni_reproduction);
    step(2, "cross-validation fold sizes", &mut fold_sizes);
    step(3, "metric oracles", &mut metric_oracles);
    step(4, "TER exhaustive equivalence", &mut ter_exhaustive);
    step(5, "gradient check", &mut gradient_check);
    step(6, "memorization", &mut memorization);
    step(7, "BPE properties", &mut bpe_properties);
    step(8, "end-to-end synthetic experiment", &mut || end_to_end(&mut body));
    step(9, "t-test oracle", &mut ttest_oracle);
    step(10, "determinism", &mut || determinism(body.take()));
    let failed = results.iter().filter(|ok| !**ok).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
