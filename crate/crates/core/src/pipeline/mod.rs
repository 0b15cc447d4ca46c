//! The three-system experiment: a random-init baseline, a back-translation
//! system and a transfer-initialized system, each trained per fold in both
//! directions, scored on the fold's test set and compared with corrected
//! t-tests.
//!
//! Every unit of work (one trained model, one silver corpus) writes its
//! outputs under the output directory together with a key derived from the
//! config and input hashes; a rerun reuses finished units and recomputes the
//! rest. Units are independent given their inputs, so they run on worker
//! threads without changing any result.

mod config;
mod report;

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backtranslate::{
    back_translate, mix, read_silver, write_silver, AugmentationConfig, NeuralTranslator, SilverPaths, SilverProvenance,
};
use crate::corpus::{
    kfold_split, prepare_parallel, read_parallel_raw, FilterConfig, FilterReport, MonolingualCorpus, ParallelCorpus,
};
use crate::metrics::{score_lines, MetricName, ScoreSet};
use crate::model::{
    init_params, translate, Checkpoint, ModelParams, Pair, TrainState, TrainingLog, TrainingSchedule, TransformerConfig,
    Vocab,
};
use crate::par::{parallel_map, resolve_workers};
use crate::stats::SignificanceReport;
use crate::subword::{build_joint_bpe, BpeModel};
use crate::synthetic::SyntheticPaths;
use crate::transfer::{transfer_init, BpeFiles, TransferPlan};
use crate::{Error, Result};

pub use config::{
    BpeSettings, CorpusPaths, ExperimentConfig, ModelSettings, SignificanceSettings, TransferSettings,
};
pub use report::{
    best_record, emit_report, read_report, render_text, summary_table, ConvergenceRecord, DataSummary,
    ExperimentReport, FoldRecord, ParentRecord, Provenance, ReportBody, ReportFormat, SilverRecord, SummaryRow,
    BACK_TRANSLATION, BASELINE, SYSTEMS, TRANSFER,
};

/// Text of the bundled synthetic experiment config.
pub const SYNTHETIC_CONFIG: &str = include_str!("../../../../configs/synthetic.toml");

/// The bundled synthetic config pointed at generated corpora.
pub fn synthetic_config(data: &SyntheticPaths, output_dir: &Path) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_toml(SYNTHETIC_CONFIG)?;
    cfg.corpus = CorpusPaths {
        parallel_source: data.gold_source.clone(),
        parallel_target: data.gold_target.clone(),
        mono_source: data.mono_source.clone(),
        mono_target: data.mono_target.clone(),
        parent_source: data.parent_source.clone(),
        parent_target: data.parent_target.clone(),
    };
    cfg.output_dir = output_dir.to_path_buf();
    Ok(cfg)
}

/// Seed for the draw called `name` in replicate `replicate`.
pub fn derive_seed(replicate: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(replicate.to_le_bytes());
    h.update(name.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Append-only log in which every random draw appears with its seed name.
struct RunLog {
    file: Mutex<fs::File>,
}

impl RunLog {
    fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self { file: Mutex::new(file) })
    }

    fn line(&self, msg: &str) {
        log::info!("{msg}");
        let mut f = self.file.lock().expect("run log");
        let _ = writeln!(f, "{msg}");
    }

    fn seed(&self, replicate: u64, name: &str) -> u64 {
        let v = derive_seed(replicate, name);
        self.line(&format!("seed replicate={replicate} name={name} value={v}"));
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dir {
    Forward,
    Backward,
}

impl Dir {
    const BOTH: [Dir; 2] = [Dir::Forward, Dir::Backward];

    fn reverse(self) -> Dir {
        match self {
            Dir::Forward => Dir::Backward,
            Dir::Backward => Dir::Forward,
        }
    }

    fn langs(self, cfg: &ExperimentConfig) -> (&str, &str) {
        match self {
            Dir::Forward => (&cfg.source_lang, &cfg.target_lang),
            Dir::Backward => (&cfg.target_lang, &cfg.source_lang),
        }
    }

    fn name(self, cfg: &ExperimentConfig) -> String {
        let (s, t) = self.langs(cfg);
        format!("{s}-{t}")
    }

    fn orient<T: Clone>(self, pair: &(T, T)) -> (T, T) {
        match self {
            Dir::Forward => pair.clone(),
            Dir::Backward => (pair.1.clone(), pair.0.clone()),
        }
    }
}

/// Inputs shared by every replicate.
struct Prepared {
    gold: ParallelCorpus,
    filter: FilterReport,
    parent: ParallelCorpus,
    mono_source: MonolingualCorpus,
    mono_target: MonolingualCorpus,
    bpe: BpeModel,
    bpe_files: BpeFiles,
    vocab: Vocab,
    model: TransformerConfig,
    gold_ids: Vec<Pair>,
    parent_ids: Vec<Pair>,
    clipped: AtomicUsize,
    /// Gold and parent sequences clipped while preparing.
    clipped_prepared: usize,
    data_hash: String,
}

impl Prepared {
    /// Token ids of a normalized line, cut to fit the position table.
    fn encode(&self, line: &str) -> Result<Vec<usize>> {
        let mut ids = self.vocab.encode_line(line, &self.bpe, 0.0, 0)?;
        let cap = self.model.max_positions - 1;
        if ids.len() > cap {
            ids.truncate(cap);
            self.clipped.fetch_add(1, Ordering::Relaxed);
        }
        Ok(ids)
    }

    fn encode_corpus(&self, c: &ParallelCorpus) -> Result<Vec<Pair>> {
        c.pairs
            .iter()
            .map(|p| Ok((self.encode(&p.source)?, self.encode(&p.target)?)))
            .collect()
    }

    fn gold_text(&self, dir: Dir, i: usize) -> (String, String) {
        let p = &self.gold.pairs[i];
        dir.orient(&(p.source.clone(), p.target.clone()))
    }

    fn gold_corpus(&self, dir: Dir, idx: &[usize], cfg: &ExperimentConfig) -> ParallelCorpus {
        let sub = self.gold.subset(idx);
        match dir {
            Dir::Forward => sub,
            Dir::Backward => {
                let mut r = sub.reversed();
                r.source_lang = cfg.target_lang.clone();
                r.target_lang = cfg.source_lang.clone();
                r
            }
        }
    }

    /// Monolingual text on the target side of `dir`.
    fn mono_for(&self, dir: Dir) -> &MonolingualCorpus {
        match dir {
            Dir::Forward => &self.mono_target,
            Dir::Backward => &self.mono_source,
        }
    }
}

/// Train/dev/test indices into the gold corpus for one fold.
struct Fold {
    train: Vec<usize>,
    dev: Vec<usize>,
    test: Vec<usize>,
}

/// What a finished training unit leaves on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct UnitRecord {
    key: String,
    scores: Option<ScoreSet>,
    failed_translations: usize,
    dev_curve: Vec<(u64, f64)>,
    checkpoint: String,
}

impl UnitRecord {
    fn final_dev_loss(&self) -> f64 {
        self.dev_curve.last().map_or(f64::NAN, |x| x.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SilverMarker {
    key: String,
    reverse_fold: usize,
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    data: Prepared,
    log: RunLog,
    config_hash: String,
    workers: usize,
}

fn sha_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Option<T> {
    let bytes = fs::read(path).ok()?;
    serde_json::from_slice(&bytes).ok()
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn prepare(cfg: &ExperimentConfig, out: &Path, log: &RunLog) -> Result<Prepared> {
    let c = &cfg.corpus;
    let mut digest = Vec::new();
    for p in [
        &c.parallel_source,
        &c.parallel_target,
        &c.mono_source,
        &c.mono_target,
        &c.parent_source,
        &c.parent_target,
    ] {
        let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
        digest.push(Sha256::digest(&bytes).to_vec());
    }
    let data_hash = sha_hex(&digest.iter().map(Vec::as_slice).collect::<Vec<_>>());

    let raw = read_parallel_raw(&c.parallel_source, &c.parallel_target)?;
    let (gold, filter) = prepare_parallel(&raw, &cfg.source_lang, &cfg.target_lang, &cfg.filter)?;
    if gold.len() < cfg.k {
        return Err(Error::InfeasibleSplit(format!(
            "{} gold pairs survive filtering, fewer than k = {}",
            gold.len(),
            cfg.k
        )));
    }
    // The parent pair is clean but not cognate, so only the cosine filter is off.
    let parent_filter = FilterConfig {
        cosine_threshold: 0.0,
        ..cfg.filter.clone()
    };
    let raw = read_parallel_raw(&c.parent_source, &c.parent_target)?;
    let (parent, _) = prepare_parallel(&raw, &cfg.parent_lang, &cfg.target_lang, &parent_filter)?;
    if parent.len() <= cfg.parent_dev_size {
        return Err(Error::InvalidConfig(format!(
            "parent corpus has {} pairs, not more than parent_dev_size {}",
            parent.len(),
            cfg.parent_dev_size
        )));
    }
    let mono_source = MonolingualCorpus::read(&c.mono_source, &cfg.source_lang)?.normalized();
    let mono_target = MonolingualCorpus::read(&c.mono_target, &cfg.target_lang)?.normalized();
    log.line(&format!(
        "prepare: gold {} of {} pairs kept ({} misaligned, {} empty, {} truncated); parent {}; mono {} / {}",
        filter.kept_count,
        raw_len(&filter),
        filter.removed_misaligned,
        filter.dropped_empty,
        filter.truncated_count,
        parent.len(),
        mono_source.len(),
        mono_target.len()
    ));
    let dir = out.join("prepared");
    mkdir(&dir)?;
    gold.write(
        &dir.join(format!("gold.{}", cfg.source_lang)),
        &dir.join(format!("gold.{}", cfg.target_lang)),
    )?;
    write_json(&dir.join("filter.json"), &filter)?;

    let corpora: Vec<Vec<&str>> = vec![gold.sources(), gold.targets(), parent.sources(), parent.targets()];
    let bpe = build_joint_bpe(&corpora, cfg.bpe.merges)?;
    let bpe_dir = out.join("bpe");
    mkdir(&bpe_dir)?;
    let bpe_files = BpeFiles {
        merges: bpe_dir.join("joint.merges"),
        vocab: bpe_dir.join("joint.vocab"),
    };
    bpe.save(&bpe_files.merges, &bpe_files.vocab)?;
    let vocab = Vocab::from_bpe(&bpe);
    let model = cfg.model.with_vocab(vocab.len());
    model.validate()?;
    log.line(&format!("bpe: {} merges, vocabulary {}", bpe.merges().len(), vocab.len()));

    let mut data = Prepared {
        gold,
        filter,
        parent,
        mono_source,
        mono_target,
        bpe,
        bpe_files,
        vocab,
        model,
        gold_ids: Vec::new(),
        parent_ids: Vec::new(),
        clipped: AtomicUsize::new(0),
        clipped_prepared: 0,
        data_hash,
    };
    data.gold_ids = data.encode_corpus(&data.gold)?;
    data.parent_ids = data.encode_corpus(&data.parent)?;
    data.clipped_prepared = data.clipped.load(Ordering::Relaxed);
    Ok(data)
}

fn raw_len(f: &FilterReport) -> usize {
    f.input_count + f.dropped_empty
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Runs the whole experiment and writes `report.json` and `report.txt`
/// into the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let started_at = unix_now();
    let out = &cfg.output_dir;
    mkdir(out)?;
    let log = RunLog::open(&out.join("run.log"))?;
    let config_hash = cfg.hash()?;
    log.line(&format!("run: config {config_hash}, seeds {:?}", cfg.seeds));
    let data = prepare(cfg, out, &log).map_err(|e| Error::stage("prepare", e))?;
    let runner = Runner {
        cfg,
        data,
        log,
        config_hash,
        workers: resolve_workers(cfg.workers),
    };
    let body = runner.run()?;
    let report = ExperimentReport {
        provenance: Provenance {
            config_hash: runner.config_hash.clone(),
            data_hash: runner.data.data_hash.clone(),
            seeds: cfg.seeds.clone(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at,
            finished_at: unix_now(),
        },
        body,
    };
    emit_report(&report, out, &[ReportFormat::Json, ReportFormat::Text])?;
    runner.log.line("run: finished");
    Ok(report)
}

enum Job {
    Baseline { seed: usize, dir: Dir, fold: usize },
    Parent { seed: usize, dir: Dir },
    Bt { seed: usize, dir: Dir, fold: usize },
    Transfer { seed: usize, dir: Dir, fold: usize },
}

/// Per-replicate seeds and splits.
struct Replicate {
    seed: u64,
    folds: Vec<Fold>,
}

impl Runner<'_> {
    fn unit_key(&self, label: &str) -> String {
        sha_hex(&[
            self.config_hash.as_bytes(),
            self.data.data_hash.as_bytes(),
            label.as_bytes(),
        ])
    }

    fn replicate(&self, seed: u64) -> Result<Replicate> {
        let n = self.data.gold.len();
        let split = kfold_split(n, self.cfg.k, self.log.seed(seed, "split"))?;
        let mut folds = Vec::with_capacity(self.cfg.k);
        for f in 0..self.cfg.k {
            let mut train = split.train_indices(f);
            let mut rng = ChaCha8Rng::seed_from_u64(self.log.seed(seed, &format!("dev/fold-{f}")));
            train.shuffle(&mut rng);
            let n_dev = ((train.len() as f64 * self.cfg.dev_fraction).round() as usize).clamp(1, train.len() - 1);
            let dev = train.drain(..n_dev).collect();
            folds.push(Fold {
                train,
                dev,
                test: split.test_indices(f),
            });
        }
        let dir = self.cfg.output_dir.join(format!("seed-{seed}"));
        mkdir(&dir)?;
        write_json(&dir.join("split.json"), &split)?;
        Ok(Replicate { seed, folds })
    }

    fn unit_dir(&self, seed: u64, system: &str, dir: Dir, fold: Option<usize>) -> PathBuf {
        let mut p = self
            .cfg
            .output_dir
            .join(format!("seed-{seed}"))
            .join(system.to_lowercase())
            .join(dir.name(self.cfg));
        if let Some(f) = fold {
            p = p.join(format!("fold-{f}"));
        }
        p
    }

    fn cached(&self, dir: &Path, key: &str) -> Option<UnitRecord> {
        let rec: UnitRecord = read_json(&dir.join("result.json"))?;
        (rec.key == key && dir.join("model.ckpt").is_file()).then_some(rec)
    }

    fn ids(&self, dir: Dir, idx: &[usize]) -> Vec<Pair> {
        idx.iter().map(|&i| dir.orient(&self.data.gold_ids[i])).collect()
    }

    /// Trains from `state`, saves the model, scores it on `test` when given.
    #[allow(clippy::too_many_arguments)]
    fn train_unit(
        &self,
        label: &str,
        out: &Path,
        mut state: TrainState,
        train: &[Pair],
        dev: &[Pair],
        schedule: &TrainingSchedule,
        test: Option<(Dir, &[usize])>,
    ) -> Result<UnitRecord> {
        let key = self.unit_key(label);
        if let Some(rec) = self.cached(out, &key) {
            self.log.line(&format!("resume: {label} reused"));
            return Ok(rec);
        }
        mkdir(out)?;
        let t0 = Instant::now();
        let log: TrainingLog = crate::model::train(&mut state, train, dev, &self.data.model, schedule)?;
        let ck = Checkpoint {
            config: self.data.model.clone(),
            params: state.params,
            moments: None,
            step: state.step,
            seed: state.seed,
        };
        ck.save(&out.join("model.ckpt"))?;
        let mut rec = UnitRecord {
            key,
            scores: None,
            failed_translations: 0,
            dev_curve: log.dev_curve,
            checkpoint: ck.fingerprint()?,
        };
        if let Some((dir, idx)) = test {
            let (scores, failed, hyps) = self.evaluate(&ck.params, dir, idx)?;
            crate::corpus::write_lines(&out.join("test.hyp"), hyps.iter().map(String::as_str))?;
            rec.scores = Some(scores);
            rec.failed_translations = failed;
        }
        write_json(&out.join("result.json"), &rec)?;
        let bleu = rec.scores.as_ref().map(|s| format!(", BLEU {:.2}", s.bleu.value));
        self.log.line(&format!(
            "trained {label}: {} steps, final dev loss {:.4}{} ({:.1}s)",
            state.step,
            rec.final_dev_loss(),
            bleu.unwrap_or_default(),
            t0.elapsed().as_secs_f64()
        ));
        Ok(rec)
    }

    fn evaluate(&self, params: &ModelParams, dir: Dir, idx: &[usize]) -> Result<(ScoreSet, usize, Vec<String>)> {
        let mut hyps = Vec::with_capacity(idx.len());
        let mut refs = Vec::with_capacity(idx.len());
        let mut failed = 0;
        for &i in idx {
            let src = dir.orient(&self.data.gold_ids[i]).0;
            let hyp = match translate(params, &self.data.model, &src, &self.cfg.decode) {
                Ok(t) => self.data.vocab.decode_ids(&t.tokens),
                Err(e) => {
                    log::warn!("translation failed: {e}");
                    failed += 1;
                    String::new()
                }
            };
            hyps.push(hyp);
            refs.push(self.data.gold_text(dir, i).1);
        }
        Ok((score_lines(&hyps, &refs)?, failed, hyps))
    }

    fn baseline(&self, rep: &Replicate, dir: Dir, fold: usize) -> Result<UnitRecord> {
        let f = &rep.folds[fold];
        let d = dir.name(self.cfg);
        let init = self.log.seed(rep.seed, &format!("init/{d}/fold-{fold}"));
        let order = self.log.seed(rep.seed, &format!("train/{d}/fold-{fold}"));
        let state = TrainState::new(init_params(&self.data.model, init)?, order);
        self.train_unit(
            &format!("baseline seed {} {d} fold {fold}", rep.seed),
            &self.unit_dir(rep.seed, BASELINE, dir, Some(fold)),
            state,
            &self.ids(dir, &f.train),
            &self.ids(dir, &f.dev),
            &self.cfg.training,
            Some((dir, &f.test)),
        )
    }

    fn parent(&self, rep: &Replicate, dir: Dir) -> Result<UnitRecord> {
        let d = dir.name(self.cfg);
        let mut order: Vec<usize> = (0..self.data.parent_ids.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.log.seed(rep.seed, &format!("parent-dev/{d}")));
        order.shuffle(&mut rng);
        // parent -> target for the forward child, target -> parent otherwise
        let pick = |idx: &[usize]| -> Vec<Pair> { idx.iter().map(|&i| dir.orient(&self.data.parent_ids[i])).collect() };
        let (dev, train) = order.split_at(self.cfg.parent_dev_size);
        let init = self.log.seed(rep.seed, &format!("init/parent/{d}"));
        let order_seed = self.log.seed(rep.seed, &format!("train/parent/{d}"));
        let state = TrainState::new(init_params(&self.data.model, init)?, order_seed);
        self.train_unit(
            &format!("parent seed {} for {d}", rep.seed),
            &self.unit_dir(rep.seed, "parent", dir, None),
            state,
            &pick(train),
            &pick(dev),
            &self.cfg.parent_training,
            None,
        )
    }

    fn aug_config(&self, rep: &Replicate, dir: Dir, what: &str) -> AugmentationConfig {
        let name = format!("{what}/{}/{}", dir.name(self.cfg), self.cfg.augmentation.seed);
        AugmentationConfig {
            seed: self.log.seed(rep.seed, &name),
            ..self.cfg.augmentation.clone()
        }
    }

    /// Silver pairs for `dir`, made by the best baseline of the reverse
    /// direction from the target-side monolingual text.
    fn silver(&self, rep: &Replicate, dir: Dir, baselines: &BTreeMap<(u64, String, usize), FoldRecord>) -> Result<(ParallelCorpus, SilverRecord)> {
        let rev = dir.reverse();
        let rev_name = rev.name(self.cfg);
        let candidates: Vec<&FoldRecord> = (0..self.cfg.k)
            .map(|f| &baselines[&(rep.seed, rev_name.clone(), f)])
            .collect();
        let best = best_record(&candidates).expect("k >= 2 folds").fold;
        let out = self.unit_dir(rep.seed, BACK_TRANSLATION, dir, None);
        mkdir(&out)?;
        let (src_lang, tgt_lang) = dir.langs(self.cfg);
        let paths = SilverPaths::new(&out, "silver", src_lang, tgt_lang);
        let budget = self.cfg.augmentation.silver_budget(rep.folds[0].train.len());
        let aug = AugmentationConfig {
            mono_sample_size: budget,
            ..self.aug_config(rep, dir, "bt-sample")
        };
        let label = format!("silver seed {} {}", rep.seed, dir.name(self.cfg));
        let key = self.unit_key(&label);
        let marker_path = out.join("silver.done.json");
        let corpus = match read_json::<SilverMarker>(&marker_path) {
            Some(m) if m.key == key && m.reverse_fold == best && paths.exist() => {
                self.log.line(&format!("resume: {label} reused"));
                read_silver(&paths)?.0
            }
            _ => {
                let t0 = Instant::now();
                let ck_path = self.unit_dir(rep.seed, BASELINE, rev, Some(best)).join("model.ckpt");
                let ck = Checkpoint::load(&ck_path)?;
                let translator = NeuralTranslator::from_checkpoint(ck, self.data.bpe.clone(), self.cfg.decode)?;
                let mono = self.data.mono_for(dir);
                let (silver, skips) = back_translate(&translator, mono, src_lang, &aug, self.workers)?;
                let prov = SilverProvenance {
                    checkpoint: crate::backtranslate::Translator::id(&translator),
                    seed: aug.seed,
                    source_lang: src_lang.to_string(),
                    target_lang: tgt_lang.to_string(),
                    pairs: silver.len(),
                    skips,
                };
                write_silver(&paths, &silver, &prov)?;
                write_json(&marker_path, &SilverMarker { key, reverse_fold: best })?;
                self.log.line(&format!(
                    "back-translated {label}: {} pairs from {rev_name} fold {best}, {} skipped ({:.1}s)",
                    silver.len(),
                    prov.skips.skipped,
                    t0.elapsed().as_secs_f64()
                ));
                silver
            }
        };
        let (_, prov) = read_silver(&paths)?;
        let record = SilverRecord {
            seed: rep.seed,
            direction: dir.name(self.cfg),
            reverse_fold: best,
            sampled: prov.skips.sampled,
            skipped: prov.skips.skipped,
            pairs: corpus.len(),
        };
        Ok((corpus, record))
    }

    fn bt_unit(&self, rep: &Replicate, dir: Dir, fold: usize, silver: &ParallelCorpus) -> Result<UnitRecord> {
        let f = &rep.folds[fold];
        let d = dir.name(self.cfg);
        let gold = self.data.gold_corpus(dir, &f.train, self.cfg);
        let aug = self.aug_config(rep, dir, &format!("mix/fold-{fold}"));
        let mixed = mix(&gold, silver, &aug)?;
        let train = self.data.encode_corpus(&mixed)?;
        let init = self.log.seed(rep.seed, &format!("init/{d}/fold-{fold}"));
        let order = self.log.seed(rep.seed, &format!("train/{d}/fold-{fold}"));
        let state = TrainState::new(init_params(&self.data.model, init)?, order);
        self.train_unit(
            &format!("back-translation seed {} {d} fold {fold}", rep.seed),
            &self.unit_dir(rep.seed, BACK_TRANSLATION, dir, Some(fold)),
            state,
            &train,
            &self.ids(dir, &f.dev),
            &self.cfg.training,
            Some((dir, &f.test)),
        )
    }

    fn transfer_plan(&self, rep: &Replicate, dir: Dir) -> Result<TransferPlan> {
        let parent_ck = self.unit_dir(rep.seed, "parent", dir, None).join("model.ckpt");
        let mut plan = TransferPlan::full_copy(&self.data.model, self.data.bpe_files.clone(), parent_ck)
            .with_fresh(&self.cfg.transfer.fresh)?;
        plan.freeze = self.cfg.transfer.freeze.iter().cloned().collect();
        Ok(plan)
    }

    fn transfer_unit(&self, rep: &Replicate, dir: Dir, fold: usize) -> Result<UnitRecord> {
        let f = &rep.folds[fold];
        let d = dir.name(self.cfg);
        let plan = self.transfer_plan(rep, dir)?;
        let parent = Checkpoint::load(&plan.parent_checkpoint)?;
        // Same init and order seeds as the baseline: the only difference
        // between the two children is where their parameters start.
        let init = self.log.seed(rep.seed, &format!("init/{d}/fold-{fold}"));
        let order = self.log.seed(rep.seed, &format!("train/{d}/fold-{fold}"));
        let params = transfer_init(&parent.params, &self.data.model, &plan, init)?;
        let mut state = TrainState::new(params, order);
        state.frozen = plan.freeze.clone();
        let out = self.unit_dir(rep.seed, TRANSFER, dir, Some(fold));
        mkdir(&out)?;
        plan.save(&out.join("plan.json"))?;
        self.train_unit(
            &format!("transfer seed {} {d} fold {fold}", rep.seed),
            &out,
            state,
            &self.ids(dir, &f.train),
            &self.ids(dir, &f.dev),
            &self.cfg.training,
            Some((dir, &f.test)),
        )
    }

    fn run_jobs(&self, reps: &[Replicate], jobs: &[Job], silver: &BTreeMap<(u64, String), ParallelCorpus>) -> Result<Vec<UnitRecord>> {
        let results = parallel_map(jobs, self.workers, |job| match *job {
            Job::Baseline { seed, dir, fold } => self
                .baseline(&reps[seed], dir, fold)
                .map_err(|e| Error::stage(format!("baseline {} fold {fold} seed {}", dir.name(self.cfg), reps[seed].seed), e)),
            Job::Parent { seed, dir } => self
                .parent(&reps[seed], dir)
                .map_err(|e| Error::stage(format!("parent for {} seed {}", dir.name(self.cfg), reps[seed].seed), e)),
            Job::Bt { seed, dir, fold } => {
                let s = &silver[&(reps[seed].seed, dir.name(self.cfg))];
                self.bt_unit(&reps[seed], dir, fold, s).map_err(|e| {
                    Error::stage(format!("back-translation {} fold {fold} seed {}", dir.name(self.cfg), reps[seed].seed), e)
                })
            }
            Job::Transfer { seed, dir, fold } => self
                .transfer_unit(&reps[seed], dir, fold)
                .map_err(|e| Error::stage(format!("transfer {} fold {fold} seed {}", dir.name(self.cfg), reps[seed].seed), e)),
        });
        results.into_iter().collect()
    }

    fn fold_record(&self, seed: u64, system: &str, dir: Dir, fold: usize, rec: &UnitRecord) -> FoldRecord {
        FoldRecord {
            seed,
            system: system.to_string(),
            direction: dir.name(self.cfg),
            fold,
            scores: rec.scores.clone().expect("child units are scored"),
            final_dev_loss: rec.final_dev_loss(),
            failed_translations: rec.failed_translations,
        }
    }

    fn run(&self) -> Result<ReportBody> {
        let cfg = self.cfg;
        let reps: Vec<Replicate> = cfg
            .seeds
            .iter()
            .map(|&s| self.replicate(s))
            .collect::<Result<_>>()
            .map_err(|e| Error::stage("split", e))?;
        let k = cfg.k;

        // Baselines and parents only need the prepared data.
        let mut jobs = Vec::new();
        for s in 0..reps.len() {
            for dir in Dir::BOTH {
                jobs.push(Job::Parent { seed: s, dir });
            }
        }
        for s in 0..reps.len() {
            for dir in Dir::BOTH {
                for fold in 0..k {
                    jobs.push(Job::Baseline { seed: s, dir, fold });
                }
            }
        }
        let first = self.run_jobs(&reps, &jobs, &BTreeMap::new())?;
        let mut folds = Vec::new();
        let mut baselines = BTreeMap::new();
        let mut baseline_curves = BTreeMap::new();
        let mut parents = Vec::new();
        for (job, rec) in jobs.iter().zip(&first) {
            match *job {
                Job::Baseline { seed, dir, fold } => {
                    let r = self.fold_record(reps[seed].seed, BASELINE, dir, fold, rec);
                    baselines.insert((reps[seed].seed, dir.name(cfg), fold), r.clone());
                    baseline_curves.insert((reps[seed].seed, dir.name(cfg), fold), rec.dev_curve.clone());
                    folds.push(r);
                }
                Job::Parent { seed, dir } => {
                    let (s, t) = match dir {
                        Dir::Forward => (cfg.parent_lang.as_str(), cfg.target_lang.as_str()),
                        Dir::Backward => (cfg.target_lang.as_str(), cfg.parent_lang.as_str()),
                    };
                    parents.push(ParentRecord {
                        seed: reps[seed].seed,
                        direction: dir.name(cfg),
                        parent_direction: format!("{s}-{t}"),
                        dev_curve: rec.dev_curve.clone(),
                    });
                }
                _ => unreachable!("first phase runs baselines and parents"),
            }
        }

        let mut silver = BTreeMap::new();
        let mut silver_records = Vec::new();
        for rep in &reps {
            for dir in Dir::BOTH {
                let (corpus, record) = self
                    .silver(rep, dir, &baselines)
                    .map_err(|e| Error::stage(format!("back-translate {} seed {}", dir.name(cfg), rep.seed), e))?;
                silver.insert((rep.seed, dir.name(cfg)), corpus);
                silver_records.push(record);
            }
        }

        let mut jobs = Vec::new();
        for s in 0..reps.len() {
            for dir in Dir::BOTH {
                for fold in 0..k {
                    jobs.push(Job::Bt { seed: s, dir, fold });
                    jobs.push(Job::Transfer { seed: s, dir, fold });
                }
            }
        }
        let second = self.run_jobs(&reps, &jobs, &silver)?;
        let mut convergence = Vec::new();
        for (job, rec) in jobs.iter().zip(&second) {
            match *job {
                Job::Bt { seed, dir, fold } => {
                    folds.push(self.fold_record(reps[seed].seed, BACK_TRANSLATION, dir, fold, rec));
                }
                Job::Transfer { seed, dir, fold } => {
                    let s = reps[seed].seed;
                    folds.push(self.fold_record(s, TRANSFER, dir, fold, rec));
                    let base = TrainingLog {
                        dev_curve: baseline_curves[&(s, dir.name(cfg), fold)].clone(),
                        train_losses: Vec::new(),
                    };
                    let child = TrainingLog {
                        dev_curve: rec.dev_curve.clone(),
                        train_losses: Vec::new(),
                    };
                    let target = base.final_dev_loss().unwrap_or(f64::NAN);
                    convergence.push(ConvergenceRecord {
                        seed: s,
                        direction: dir.name(cfg),
                        fold,
                        target_dev_loss: target,
                        baseline_steps: base.steps_to_reach(target),
                        transfer_steps: child.steps_to_reach(target),
                    });
                }
                _ => unreachable!("second phase runs back-translation and transfer children"),
            }
        }

        let directions: Vec<String> = Dir::BOTH.iter().map(|d| d.name(cfg)).collect();
        let mut body = ReportBody {
            name: cfg.name.clone(),
            source_lang: cfg.source_lang.clone(),
            target_lang: cfg.target_lang.clone(),
            parent_lang: cfg.parent_lang.clone(),
            k,
            seeds: cfg.seeds.clone(),
            directions: directions.clone(),
            data: DataSummary {
                gold: self.data.filter.clone(),
                parent_pairs: self.data.parent.len(),
                mono_source_lines: self.data.mono_source.len(),
                mono_target_lines: self.data.mono_target.len(),
                vocab_size: self.data.vocab.len(),
                clipped_sequences: self.data.clipped_prepared,
            },
            folds,
            summary: Vec::new(),
            significance: Vec::new(),
            back_translation: silver_records,
            parents,
            convergence,
        };
        body.summary = summarize(&body);
        body.significance = significance(&body, &cfg.significance)?;
        Ok(body)
    }
}

fn summarize(body: &ReportBody) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for dir in &body.directions {
        for sys in SYSTEMS {
            if let Some(r) = best_record(&body.records(sys, dir)) {
                rows.push(SummaryRow {
                    direction: dir.clone(),
                    system: sys.to_string(),
                    seed: r.seed,
                    fold: r.fold,
                    bleu: r.scores.bleu.value,
                    chrf: r.scores.chrf.value,
                    ter: r.scores.ter.value,
                });
            }
        }
    }
    rows
}

/// One corrected family per direction and metric over the paired
/// `(seed, fold)` scores of the three systems.
fn significance(body: &ReportBody, s: &SignificanceSettings) -> Result<Vec<SignificanceReport>> {
    let mut out = Vec::new();
    for dir in &body.directions {
        for metric in MetricName::ALL {
            let values: Vec<(&str, Vec<f64>)> = SYSTEMS
                .iter()
                .map(|sys| (*sys, body.values(sys, dir, metric)))
                .collect();
            if values.iter().any(|(_, v)| v.len() < 2) {
                continue;
            }
            let refs: Vec<(&str, &[f64])> = values.iter().map(|(n, v)| (*n, v.as_slice())).collect();
            out.push(SignificanceReport::for_family(dir, metric, &refs, s.variant, s.alpha)?);
        }
    }
    Ok(out)
}
