use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nmtlab::backtranslate::{back_translate, write_silver, AugmentationConfig, NeuralTranslator, SilverPaths, SilverProvenance, Translator};
use nmtlab::corpus::{
    kfold_split, prepare_parallel, read_lines, read_parallel_raw, FilterConfig, MonolingualCorpus,
    ParallelCorpus,
};
use nmtlab::metrics::score_lines;
use nmtlab::model::{
    init_params, train, Checkpoint, DecodeMode, DecodeOptions, OptimConfig, Pair, TrainState, TrainingSchedule,
    TransformerConfig, Vocab,
};
use nmtlab::pipeline::{run_experiment, synthetic_config, ExperimentConfig};
use nmtlab::stats::{bonferroni, SignificanceReport, TTestVariant, DEFAULT_ALPHA};
use nmtlab::subword::{apply_bpe, build_joint_bpe, BpeModel};
use nmtlab::synthetic::{generate, SyntheticSpec};
use nmtlab::transfer::{transfer_init, BpeFiles, TransferPlan};
use nmtlab::{Error, Result};

/// Low-resource NMT experiments: corpus preparation, subwords, training,
/// back-translation, transfer, scoring and significance tests.
#[derive(Parser)]
#[command(name = "nmtlab", version)]
struct Cli {
    /// Base for relative output paths.
    #[arg(long, global = true, env = "NMTLAB_OUTPUT_ROOT")]
    output_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic language family corpora.
    Synth(SynthArgs),
    /// Clean a parallel corpus and optionally write a k-fold split.
    Prepare(PrepareArgs),
    /// Learn or apply a BPE model.
    #[command(subcommand)]
    Bpe(BpeCommand),
    /// Train a model on a parallel corpus.
    Train(TrainArgs),
    /// Translate a file with a trained model.
    Translate(TranslateArgs),
    /// Make silver pairs from monolingual text with a reverse model.
    Backtranslate(BacktranslateArgs),
    /// Initialize a child model from a parent checkpoint.
    Transfer(TransferArgs),
    /// BLEU, chrF and TER of a hypothesis file.
    Score(ScoreArgs),
    /// Pairwise t-tests with Bonferroni correction.
    Sigtest(SigtestArgs),
    /// Run the full three-system experiment.
    Run(RunArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = SyntheticSpec::default().seed)]
    seed: u64,
    #[arg(long, default_value_t = SyntheticSpec::default().gold_pairs)]
    gold_pairs: usize,
    #[arg(long, default_value_t = SyntheticSpec::default().mono_lines)]
    mono_lines: usize,
    #[arg(long, default_value_t = SyntheticSpec::default().parent_pairs)]
    parent_pairs: usize,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long, default_value_t = FilterConfig::default().cosine_threshold)]
    cosine_threshold: f64,
    #[arg(long, default_value_t = FilterConfig::default().ngram_min)]
    ngram_min: usize,
    #[arg(long, default_value_t = FilterConfig::default().ngram_max)]
    ngram_max: usize,
    #[arg(long, default_value_t = FilterConfig::default().truncation_limit)]
    truncation_limit: usize,
}

impl FilterArgs {
    fn config(&self) -> FilterConfig {
        FilterConfig {
            cosine_threshold: self.cosine_threshold,
            ngram_min: self.ngram_min,
            ngram_max: self.ngram_max,
            truncation_limit: self.truncation_limit,
        }
    }
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long)]
    src_lang: String,
    #[arg(long)]
    tgt_lang: String,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    filter: FilterArgs,
    /// Also write a k-fold split.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum BpeCommand {
    /// Learn one model over all input files.
    Learn {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        merges: usize,
        /// Writes `<out>.merges` and `<out>.vocab`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment a file, one line per input line.
    Apply {
        /// Prefix given to `bpe learn --out`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        dropout: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 128)]
    ffn_dim: usize,
    #[arg(long, default_value_t = 128)]
    max_positions: usize,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    #[arg(long, default_value_t = 0.1)]
    label_smoothing: f64,
}

impl ModelArgs {
    fn config(&self, vocab_size: usize) -> TransformerConfig {
        TransformerConfig {
            vocab_size,
            d_model: self.d_model,
            num_heads: self.heads,
            num_encoder_layers: self.layers,
            num_decoder_layers: self.layers,
            ffn_dim: self.ffn_dim,
            max_positions: self.max_positions,
            dropout_p: self.dropout,
            label_smoothing: self.label_smoothing,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long)]
    dev_src: Option<PathBuf>,
    #[arg(long)]
    dev_tgt: Option<PathBuf>,
    /// BPE prefix.
    #[arg(long)]
    bpe: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Start from this checkpoint's parameters instead of a random init.
    #[arg(long)]
    init: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 600)]
    steps: u64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 50)]
    eval_every: u64,
    #[arg(long, default_value_t = 5e-3)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    warmup: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DecodeArgs {
    /// Beam size; 1 decodes greedily.
    #[arg(long, default_value_t = 1)]
    beam: usize,
    #[arg(long, default_value_t = 1.0)]
    length_penalty: f64,
    #[arg(long, default_value_t = 100)]
    max_len: usize,
}

impl DecodeArgs {
    fn options(&self) -> DecodeOptions {
        let mode = if self.beam <= 1 {
            DecodeMode::Greedy
        } else {
            DecodeMode::Beam {
                beam_size: self.beam,
                length_penalty: self.length_penalty,
            }
        };
        DecodeOptions {
            mode,
            max_len: self.max_len,
        }
    }
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    bpe: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args)]
struct BacktranslateArgs {
    /// Reverse-direction checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    bpe: PathBuf,
    #[arg(long)]
    mono: PathBuf,
    #[arg(long)]
    mono_lang: String,
    /// Language the model translates into.
    #[arg(long)]
    source_lang: String,
    #[arg(long, default_value_t = AugmentationConfig::default().mono_sample_size)]
    sample: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value = "silver")]
    stem: String,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    parent: PathBuf,
    #[arg(long)]
    bpe: PathBuf,
    /// Child checkpoint at step 0.
    #[arg(long)]
    out: PathBuf,
    /// Tensors to draw fresh instead of copying.
    #[arg(long)]
    fresh: Vec<String>,
    /// Tensors recorded as frozen in the plan.
    #[arg(long)]
    freeze: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the plan; defaults to `<out>.plan.json`.
    #[arg(long)]
    plan: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Print the full breakdown as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SigtestArgs {
    /// `NAME=v1,v2,...`; every pair of systems is tested.
    #[arg(long = "system")]
    systems: Vec<String>,
    #[arg(long, default_value = "score")]
    metric: String,
    #[arg(long, default_value = "-")]
    direction: String,
    #[arg(long)]
    welch: bool,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    /// Correct these raw p-values instead of running tests.
    #[arg(long, value_delimiter = ',')]
    bonferroni: Vec<f64>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, required_unless_present = "synthetic")]
    config: Option<PathBuf>,
    /// Generate the synthetic corpora under the output directory and run
    /// the bundled config on them.
    #[arg(long, conflicts_with = "config")]
    synthetic: bool,
    /// Overrides the config's output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Overrides the config's seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    workers: Option<usize>,
}

struct Ctx {
    root: Option<PathBuf>,
}

impl Ctx {
    fn out(&self, p: &Path) -> PathBuf {
        match &self.root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        }
    }
}

fn bpe_files(prefix: &Path) -> BpeFiles {
    let with = |ext: &str| {
        let mut s = prefix.as_os_str().to_owned();
        s.push(ext);
        PathBuf::from(s)
    };
    BpeFiles {
        merges: with(".merges"),
        vocab: with(".vocab"),
    }
}

fn load_bpe(prefix: &Path) -> Result<BpeModel> {
    let f = bpe_files(prefix);
    BpeModel::load(&f.merges, &f.vocab)
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn encode(vocab: &Vocab, bpe: &BpeModel, corpus: &ParallelCorpus, max_positions: usize) -> Result<Vec<Pair>> {
    let cap = max_positions.saturating_sub(1).max(1);
    corpus
        .pairs
        .iter()
        .map(|p| {
            let mut s = vocab.encode_line(&p.source, bpe, 0.0, 0)?;
            let mut t = vocab.encode_line(&p.target, bpe, 0.0, 0)?;
            s.truncate(cap);
            t.truncate(cap);
            Ok((s, t))
        })
        .collect()
}

fn cmd_synth(ctx: &Ctx, a: &SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        seed: a.seed,
        gold_pairs: a.gold_pairs,
        mono_lines: a.mono_lines,
        parent_pairs: a.parent_pairs,
        ..SyntheticSpec::default()
    };
    let paths = generate(&spec)?.write(&ctx.out(&a.out))?;
    println!("{}", serde_json::to_string_pretty(&paths)?);
    Ok(())
}

fn cmd_prepare(ctx: &Ctx, a: &PrepareArgs) -> Result<()> {
    let raw = read_parallel_raw(&a.src, &a.tgt)?;
    let (corpus, report) = prepare_parallel(&raw, &a.src_lang, &a.tgt_lang, &a.filter.config())?;
    let dir = ctx.out(&a.out_dir);
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    corpus.write(
        &dir.join(format!("clean.{}", a.src_lang)),
        &dir.join(format!("clean.{}", a.tgt_lang)),
    )?;
    let rep_path = dir.join("filter.json");
    std::fs::write(&rep_path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::Io { path: rep_path, source: e })?;
    if let Some(k) = a.k {
        let split = kfold_split(corpus.len(), k, a.seed)?;
        let p = dir.join("split.json");
        std::fs::write(&p, serde_json::to_string(&split)?).map_err(|e| Error::Io { path: p, source: e })?;
        println!("fold sizes: {:?}", split.fold_sizes());
    }
    println!(
        "kept {} of {} pairs ({} misaligned, {} empty, {} truncated)",
        report.kept_count,
        report.input_count + report.dropped_empty,
        report.removed_misaligned,
        report.dropped_empty,
        report.truncated_count
    );
    Ok(())
}

fn cmd_bpe(ctx: &Ctx, c: &BpeCommand) -> Result<()> {
    match c {
        BpeCommand::Learn { input, merges, out } => {
            let corpora = input.iter().map(|p| read_lines(p)).collect::<Result<Vec<_>>>()?;
            let model = build_joint_bpe(&corpora, *merges)?;
            let f = bpe_files(&ctx.out(out));
            model.save(&f.merges, &f.vocab)?;
            println!("{} merges, {} vocabulary entries", model.merges().len(), model.vocab().len());
        }
        BpeCommand::Apply {
            model,
            input,
            dropout,
            seed,
        } => {
            let model = load_bpe(model)?;
            let stdout = io::stdout();
            let mut w = BufWriter::new(stdout.lock());
            for (i, line) in read_lines(input)?.iter().enumerate() {
                let seg = apply_bpe(line, &model, *dropout, seed.wrapping_add(i as u64))?;
                let _ = writeln!(w, "{}", seg.tokens.join(" "));
            }
        }
    }
    Ok(())
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let bpe = load_bpe(&a.bpe)?;
    let vocab = Vocab::from_bpe(&bpe);
    let train_corpus = ParallelCorpus::read(&a.src, &a.tgt, "src", "tgt")?;
    let dev_corpus = match (&a.dev_src, &a.dev_tgt) {
        (Some(s), Some(t)) => ParallelCorpus::read(s, t, "src", "tgt")?,
        (None, None) => ParallelCorpus::new("src", "tgt"),
        _ => return Err(invalid("--dev-src and --dev-tgt go together")),
    };
    let (config, params) = match &a.init {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.config.vocab_size != vocab.len() {
                return Err(invalid("initial checkpoint was trained with a different vocabulary"));
            }
            (ck.config, ck.params)
        }
        None => {
            let config = a.model.config(vocab.len());
            let params = init_params(&config, a.seed)?;
            (config, params)
        }
    };
    let schedule = TrainingSchedule {
        steps: a.steps,
        batch_size: a.batch_size,
        eval_every: a.eval_every,
        optim: OptimConfig {
            peak_lr: a.lr,
            warmup_steps: a.warmup,
            ..OptimConfig::default()
        },
    };
    let train_ids = encode(&vocab, &bpe, &train_corpus, config.max_positions)?;
    let dev_ids = encode(&vocab, &bpe, &dev_corpus, config.max_positions)?;
    let mut state = TrainState::new(params, a.seed);
    let log = train(&mut state, &train_ids, &dev_ids, &config, &schedule)?;
    Checkpoint::from_state(&config, &state).save(&ctx.out(&a.out))?;
    for (step, loss) in &log.dev_curve {
        println!("step {step}\tdev loss {loss:.4}");
    }
    Ok(())
}

fn cmd_translate(a: &TranslateArgs) -> Result<()> {
    let t = NeuralTranslator::from_checkpoint(Checkpoint::load(&a.model)?, load_bpe(&a.bpe)?, a.decode.options())?;
    let stdout = io::stdout();
    let mut w = BufWriter::new(stdout.lock());
    for line in read_lines(&a.input)? {
        let out = match t.translate_line(&nmtlab::corpus::normalize_line(&line)) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("{e}");
                String::new()
            }
        };
        let _ = writeln!(w, "{out}");
    }
    Ok(())
}

fn cmd_backtranslate(ctx: &Ctx, a: &BacktranslateArgs) -> Result<()> {
    let t = NeuralTranslator::from_checkpoint(Checkpoint::load(&a.model)?, load_bpe(&a.bpe)?, a.decode.options())?;
    let mono = MonolingualCorpus::read(&a.mono, &a.mono_lang)?.normalized();
    let aug = AugmentationConfig {
        mono_sample_size: a.sample,
        seed: a.seed,
        ..AugmentationConfig::default()
    };
    let workers = if a.workers == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        a.workers
    };
    let (silver, skips) = back_translate(&t, &mono, &a.source_lang, &aug, workers)?;
    let prov = SilverProvenance {
        checkpoint: t.id(),
        seed: a.seed,
        source_lang: a.source_lang.clone(),
        target_lang: a.mono_lang.clone(),
        pairs: silver.len(),
        skips,
    };
    let dir = ctx.out(&a.out_dir);
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    write_silver(&SilverPaths::new(&dir, &a.stem, &a.source_lang, &a.mono_lang), &silver, &prov)?;
    println!("{} silver pairs, {} lines skipped", silver.len(), prov.skips.skipped);
    Ok(())
}

fn cmd_transfer(ctx: &Ctx, a: &TransferArgs) -> Result<()> {
    let parent = Checkpoint::load(&a.parent)?;
    let bpe = load_bpe(&a.bpe)?;
    if Vocab::from_bpe(&bpe).len() != parent.config.vocab_size {
        return Err(invalid("parent was not trained on this subword vocabulary"));
    }
    let mut plan = TransferPlan::full_copy(&parent.config, bpe_files(&a.bpe), a.parent.clone()).with_fresh(&a.fresh)?;
    plan.freeze = a.freeze.iter().cloned().collect();
    let child = transfer_init(&parent.params, &parent.config, &plan, a.seed)?;
    let out = ctx.out(&a.out);
    Checkpoint::from_params(&parent.config, child, a.seed).save(&out)?;
    let plan_path = a.plan.clone().map_or_else(
        || {
            let mut s = out.as_os_str().to_owned();
            s.push(".plan.json");
            PathBuf::from(s)
        },
        |p| ctx.out(&p),
    );
    plan.save(&plan_path)?;
    println!("child written to {}, plan to {}", out.display(), plan_path.display());
    Ok(())
}

fn cmd_score(a: &ScoreArgs) -> Result<()> {
    let hyps: Vec<String> = read_lines(&a.hyp)?.iter().map(|l| nmtlab::corpus::normalize_line(l)).collect();
    let refs: Vec<String> = read_lines(&a.reference)?.iter().map(|l| nmtlab::corpus::normalize_line(l)).collect();
    let s = score_lines(&hyps, &refs)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&s)?);
    } else {
        println!("BLEU {:.1}\nchrF {:.1}\nTER {:.1}", s.bleu.value, s.chrf.value, s.ter.value);
    }
    Ok(())
}

fn parse_system(spec: &str) -> Result<(String, Vec<f64>)> {
    let (name, values) = spec
        .split_once('=')
        .ok_or_else(|| invalid(format!("expected NAME=v1,v2,... in `{spec}`")))?;
    let values = values
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| invalid(format!("`{v}`: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok((name.to_string(), values))
}

fn cmd_sigtest(a: &SigtestArgs) -> Result<()> {
    if !a.bonferroni.is_empty() {
        println!("raw p\tcorrected p\treject H0");
        for r in bonferroni(&a.bonferroni, a.alpha) {
            println!("{:.4}\t{:.4}\t{}", r.raw_p, r.corrected_p, if r.reject { "True" } else { "False" });
        }
        return Ok(());
    }
    if a.systems.len() < 2 {
        return Err(invalid("give at least two --system NAME=values"));
    }
    let parsed = a.systems.iter().map(|s| parse_system(s)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<(&str, &[f64])> = parsed.iter().map(|(n, v)| (n.as_str(), v.as_slice())).collect();
    let variant = if a.welch { TTestVariant::Welch } else { TTestVariant::Paired };
    let metric = match a.metric.to_lowercase().as_str() {
        "bleu" | "score" => nmtlab::metrics::MetricName::Bleu,
        "chrf" => nmtlab::metrics::MetricName::Chrf,
        "ter" => nmtlab::metrics::MetricName::Ter,
        other => return Err(invalid(format!("unknown metric `{other}`"))),
    };
    let report = SignificanceReport::for_family(&a.direction, metric, &refs, variant, a.alpha)?;
    print!("{}", report.to_text());
    Ok(())
}

fn cmd_run(ctx: &Ctx, a: &RunArgs) -> Result<()> {
    let mut cfg = if a.synthetic {
        let out = ctx.out(a.out_dir.as_deref().unwrap_or(Path::new("runs/synthetic")));
        let paths = generate(&SyntheticSpec::default())?.write(&out.join("data"))?;
        synthetic_config(&paths, &out)?
    } else {
        let path = a.config.as_ref().expect("clap requires --config");
        ExperimentConfig::load(path, ctx.root.as_deref())?
    };
    if let Some(out) = &a.out_dir {
        cfg.output_dir = ctx.out(out);
    }
    if !a.seeds.is_empty() {
        cfg.seeds = a.seeds.clone();
    }
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    let report = run_experiment(&cfg)?;
    print!("{}", nmtlab::pipeline::render_text(&report.body));
    println!("report written to {}", cfg.output_dir.join("report.json").display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let ctx = Ctx {
        root: cli.output_root.clone(),
    };
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(&ctx, a),
        Command::Prepare(a) => cmd_prepare(&ctx, a),
        Command::Bpe(c) => cmd_bpe(&ctx, c),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Translate(a) => cmd_translate(a),
        Command::Backtranslate(a) => cmd_backtranslate(&ctx, a),
        Command::Transfer(a) => cmd_transfer(&ctx, a),
        Command::Score(a) => cmd_score(a),
        Command::Sigtest(a) => cmd_sigtest(a),
        Command::Run(a) => cmd_run(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
