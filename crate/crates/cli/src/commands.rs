use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use threadsum_core::config::{load_config, ConfigError, LoadedConfig, Source};
use threadsum_core::conv::{ConversationTree, Utterance};
use threadsum_core::corpus::{
    build_corpus as run_corpus, read_instances_file, read_shards, resolve_shards, CorpusError, CorpusOptions,
    FilterConfig, ShardWriter, Tokenizer,
};
use threadsum_core::decode::{beam_search, DecodeConfig, ModelScorer};
use threadsum_core::eval::evaluate_corpus;
use threadsum_core::model::{count_parameters, ConversationInput, ForwardCtx, Model, ModelError};
use threadsum_core::objectives::{example_loss, Example};
use threadsum_core::synthetic::{BOS, EOS, FIRST_CONTENT};
use threadsum_core::train::{encode_instance, TrainError, Trainer};
use threadsum_tensor::{grad_check as check_gradients, Checkpoint, GradCheckOptions, Tape, TensorError};

use crate::manifest::{write_atomic, RunManifest};
use crate::GlobalArgs;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

/// A run that finished but failed a numeric check.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct NumericFailure(String);

/// Bad flag combinations not caught by the argument parser.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(String);

pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() || cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if cause.is::<NumericFailure>() {
            return EXIT_NUMERIC;
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            match e {
                TrainError::NonFinite { .. } => return EXIT_NUMERIC,
                TrainError::Config(_) => return EXIT_USAGE,
                TrainError::Objective(_) | TrainError::Model(_) | TrainError::Tensor(_) => continue,
                _ => return EXIT_DATA,
            }
        }
        if cause.is::<ModelError>()
            || cause.is::<TensorError>()
            || cause.is::<CorpusError>()
            || cause.is::<std::io::Error>()
            || cause.is::<serde_json::Error>()
        {
            return EXIT_DATA;
        }
    }
    EXIT_DATA
}

fn load(global: &GlobalArgs, extra: Vec<String>) -> Result<LoadedConfig> {
    let mut overrides = global.overrides.clone();
    overrides.extend(extra);
    if let Some(seed) = global.seed {
        overrides.push(format!("seed={seed}"));
    }
    Ok(load_config(global.config.as_deref(), &overrides)?)
}

/// Runs `body` between the opening and closing manifest writes.
fn with_manifest(manifest: &mut RunManifest, body: impl FnOnce(&mut RunManifest) -> Result<()>) -> Result<()> {
    manifest.write().context("writing run manifest")?;
    let result = body(manifest);
    manifest.finish(&result).context("writing run manifest")?;
    result
}

fn manifest_path(global: &GlobalArgs, default: Option<PathBuf>) -> Option<PathBuf> {
    global.manifest.clone().or(default)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_tokenizer(dir: &Path) -> Result<Tokenizer> {
    Tokenizer::from_dir(dir).with_context(|| format!("loading vocabulary from {}", dir.display()))
}

#[derive(Debug, Args)]
pub struct BuildCorpusArgs {
    /// Post dump, one JSON record per line.
    #[arg(long)]
    pub input: PathBuf,
    /// Directory with vocab.json and merges.txt; enables token-level truncation.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Shard path prefix.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub min_comments: Option<usize>,
    #[arg(long)]
    pub max_utt: Option<usize>,
    #[arg(long)]
    pub max_utt_tokens: Option<usize>,
    #[arg(long)]
    pub max_summary_tokens: Option<usize>,
    /// Where to write the kept/rejected counts (default `<output>.stats.json`).
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

pub fn build_corpus(global: &GlobalArgs, args: BuildCorpusArgs) -> Result<()> {
    let mut extra = Vec::new();
    let flags = [
        ("corpus.min_comments", args.min_comments),
        ("model.max_utterances", args.max_utt),
        ("model.max_utterance_tokens", args.max_utt_tokens),
        ("model.max_summary_tokens", args.max_summary_tokens),
    ];
    for (key, v) in flags {
        if let Some(v) = v {
            extra.push(format!("{key}={v}"));
        }
    }
    let loaded = load(global, extra)?;
    let cfg = &loaded.config;
    let stats_path = args.stats.clone().unwrap_or_else(|| sibling(&args.output, ".stats.json"));
    let mut manifest = RunManifest::new(
        "build-corpus",
        &loaded,
        global.deterministic,
        manifest_path(global, Some(sibling(&args.output, ".manifest.json"))),
    );
    manifest.input("input", &args.input);
    if let Some(v) = &args.vocab {
        manifest.input("vocab", v);
    }
    manifest.output("stats", &stats_path);
    with_manifest(&mut manifest, |manifest| {
        let tok = args.vocab.as_deref().map(load_tokenizer).transpose()?;
        let opts = CorpusOptions {
            filter: FilterConfig {
                min_comments: cfg.corpus.min_comments,
            },
            max_utterances: cfg.model.max_utterances,
            max_utterance_tokens: cfg.model.max_utterance_tokens,
            max_summary_tokens: cfg.model.max_summary_tokens,
            chunk_size: cfg.corpus.chunk_size,
        };
        let input = File::open(&args.input).with_context(|| format!("opening {}", args.input.display()))?;
        let mut writer = ShardWriter::new(&args.output, cfg.corpus.shard_size);
        let stats = run_corpus(BufReader::new(input), tok.as_ref(), &opts, |inst| writer.write(inst))?;
        for (i, shard) in writer.finish()?.iter().enumerate() {
            manifest.output(&format!("shard.{i}"), shard);
        }
        write_atomic(&stats_path, serde_json::to_string_pretty(&stats)?.as_bytes())?;
        println!(
            "{} posts, {} threads, {} instances, {} malformed lines",
            stats.posts, stats.threads, stats.instances, stats.malformed_lines
        );
        Ok(())
    })
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Instance shards: a file, a directory, or a shard prefix.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory with vocab.json and merges.txt.
    #[arg(long)]
    pub vocab: PathBuf,
    /// Output directory for checkpoints, metrics and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a training checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many optimizer steps (default `train.total_steps`).
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Model checkpoint to start from.
    #[arg(long)]
    pub init: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
}

fn encode_all(instances: &[threadsum_core::corpus::TrainingInstance], tok: &Tokenizer, model: &Model) -> Result<Vec<Example>> {
    instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| encode_instance(inst, tok, model.config()).with_context(|| format!("instance {i}")))
        .collect()
}

fn train_loop(trainer: &mut Trainer, data: &[Example], args: &TrainArgs, manifest: &mut RunManifest) -> Result<()> {
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let metrics_path = args.out.join("metrics.jsonl");
    let metrics = OpenOptions::new()
        .create(true)
        .write(true)
        .append(args.resume.is_some())
        .truncate(args.resume.is_none())
        .open(&metrics_path)?;
    manifest.output("metrics", &metrics_path);
    let until = args.steps.unwrap_or(trainer.config.total_steps);
    let out = args.out.clone();
    let mut saved = Vec::new();
    let mut log = BufWriter::new(metrics);
    trainer.run(data, until, &mut log, |t| {
        let path = out.join(format!("step-{:08}.ckpt", t.step()));
        t.save(&path)?;
        saved.push(path);
        Ok(())
    })?;
    for path in &saved {
        manifest.output(&format!("checkpoint.{}", path.file_stem().unwrap_or_default().to_string_lossy()), path);
    }
    let last = args.out.join("last.ckpt");
    trainer.save(&last)?;
    manifest.output("checkpoint.last", &last);
    println!("trained to step {} -> {}", trainer.step(), last.display());
    Ok(())
}

pub fn pretrain(global: &GlobalArgs, args: TrainArgs) -> Result<()> {
    let loaded = load(global, Vec::new())?;
    let mut manifest = RunManifest::new(
        "pretrain",
        &loaded,
        global.deterministic,
        manifest_path(global, Some(args.out.join("manifest.json"))),
    );
    manifest.input("data", &args.data);
    manifest.input("vocab", &args.vocab);
    if let Some(r) = &args.resume {
        manifest.input("resume", r);
    }
    with_manifest(&mut manifest, |manifest| {
        let cfg = &loaded.config;
        let tok = load_tokenizer(&args.vocab)?;
        let instances = read_shards(&resolve_shards(&args.data)?)?;
        let mut trainer = match &args.resume {
            Some(path) => Trainer::load(path, Some(cfg.train.clone()))?,
            None => Trainer::new(Model::new(cfg.model.clone(), cfg.sub_seed("init"))?, cfg.train.clone())?,
        };
        let mut recorded = cfg.clone();
        recorded.model = trainer.model.config().clone();
        manifest.set_config(&recorded);
        let data = encode_all(&instances, &tok, &trainer.model)?;
        train_loop(&mut trainer, &data, &args, manifest)
    })
}

pub fn finetune(global: &GlobalArgs, args: FinetuneArgs) -> Result<()> {
    let mut loaded = load(global, Vec::new())?;
    let key = "train.objective.lambda_thread_pred";
    if loaded.provenance.get(key) == Some(&Source::Default) {
        loaded.config.train.objective.lambda_thread_pred = 0.0;
    }
    let args_train = &args.train;
    let mut manifest = RunManifest::new(
        "finetune",
        &loaded,
        global.deterministic,
        manifest_path(global, Some(args_train.out.join("manifest.json"))),
    );
    manifest.input("init", &args.init);
    manifest.input("data", &args_train.data);
    manifest.input("vocab", &args_train.vocab);
    with_manifest(&mut manifest, |manifest| {
        let cfg = &loaded.config;
        let tok = load_tokenizer(&args_train.vocab)?;
        let instances = read_shards(&resolve_shards(&args_train.data)?)?;
        let mut trainer = match &args_train.resume {
            Some(path) => Trainer::load(path, Some(cfg.train.clone()))?,
            None => {
                let ckpt = Checkpoint::load(&args.init)?;
                Trainer::new(Model::from_checkpoint(&ckpt)?, cfg.train.clone())?
            }
        };
        let mut recorded = cfg.clone();
        recorded.model = trainer.model.config().clone();
        manifest.set_config(&recorded);
        let data = encode_all(&instances, &tok, &trainer.model)?;
        train_loop(&mut trainer, &data, args_train, manifest)
    })
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Conversations as instance JSON lines; summaries are ignored.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Beam size (default `decode.beam_size`).
    #[arg(long)]
    pub beam: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Prediction {
    index: usize,
    summary: String,
}

pub fn generate(global: &GlobalArgs, args: GenerateArgs) -> Result<()> {
    let extra = args.beam.map(|b| vec![format!("decode.beam_size={b}")]).unwrap_or_default();
    let loaded = load(global, extra)?;
    let mut manifest = RunManifest::new(
        "generate",
        &loaded,
        global.deterministic,
        manifest_path(global, Some(sibling(&args.out, ".manifest.json"))),
    );
    manifest.input("ckpt", &args.ckpt);
    manifest.input("input", &args.input);
    manifest.input("vocab", &args.vocab);
    manifest.output("predictions", &args.out);
    with_manifest(&mut manifest, |manifest| {
        let tok = load_tokenizer(&args.vocab)?;
        let model = Model::from_checkpoint(&Checkpoint::load(&args.ckpt)?)?;
        let mut recorded = loaded.config.clone();
        recorded.model = model.config().clone();
        manifest.set_config(&recorded);
        let decode = DecodeConfig {
            max_len: loaded.config.decode.max_len.min(model.config().max_summary_tokens - 1),
            ..loaded.config.decode.clone()
        };
        let ids = tok.special_ids();
        let instances = read_instances_file(&args.input)?;
        let lines: Vec<String> = instances
            .par_iter()
            .enumerate()
            .map(|(index, inst)| -> Result<String> {
                let ex = encode_instance(inst, &tok, model.config()).with_context(|| format!("conversation {index}"))?;
                let mut scorer = ModelScorer::for_input(&model, &ex.input)?;
                let best = beam_search(&mut scorer, ids.bos, ids.eos, &decode)?;
                let summary = tok.decode_generated(&best.tokens)?;
                Ok(serde_json::to_string(&Prediction { index, summary })?)
            })
            .collect::<Result<_>>()?;
        let mut body = lines.join("\n");
        if !body.is_empty() {
            body.push('\n');
        }
        write_atomic(&args.out, body.as_bytes())?;
        println!("{} summaries -> {}", lines.len(), args.out.display());
        Ok(())
    })
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// JSON lines with a `summary` field.
    #[arg(long)]
    pub pred: PathBuf,
    /// JSON lines with a `summary` field, aligned with `--pred`.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Deserialize)]
struct SummaryLine {
    #[serde(default)]
    summary: String,
}

fn read_summaries(path: &Path) -> Result<Vec<String>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SummaryLine = serde_json::from_str(&line)
            .map_err(|e| CorpusError::Json { line: i + 1, source: e })
            .with_context(|| path.display().to_string())?;
        out.push(rec.summary);
    }
    Ok(out)
}

pub fn evaluate(global: &GlobalArgs, args: EvaluateArgs) -> Result<()> {
    let loaded = load(global, Vec::new())?;
    let mut manifest = RunManifest::new(
        "evaluate",
        &loaded,
        global.deterministic,
        manifest_path(global, Some(sibling(&args.out, ".manifest.json"))),
    );
    manifest.input("pred", &args.pred);
    manifest.input("ref", &args.reference);
    manifest.output("scores", &args.out);
    with_manifest(&mut manifest, |_| {
        let preds = read_summaries(&args.pred)?;
        let refs = read_summaries(&args.reference)?;
        let report = evaluate_corpus(&preds, &refs).ok_or_else(|| {
            anyhow!(CorpusError::Invalid(format!(
                "{} predictions but {} references",
                preds.len(),
                refs.len()
            )))
        })?;
        write_atomic(&args.out, serde_json::to_string_pretty(&report)?.as_bytes())?;
        let m = &report.mean;
        println!(
            "n={} R-1 {:.4} R-2 {:.4} R-L {:.4} R-SU4 {:.4}",
            report.count, m.rouge1.f1, m.rouge2.f1, m.rouge_l.f1, m.rouge_su4.f1
        );
        Ok(())
    })
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Finite-difference step.
    #[arg(long)]
    pub step: Option<f64>,
    /// Largest accepted relative error.
    #[arg(long)]
    pub tolerance: Option<f64>,
}

/// Five utterances: 0 <- 1 <- 3 <- 4 and 0 <- 2.
fn grad_check_example(vocab: usize, max_tokens: usize, seed: u64) -> Result<Example> {
    if vocab <= FIRST_CONTENT {
        return Err(UsageError(format!("vocabulary of {vocab} is too small for the check")).into());
    }
    let parents = [None, Some(0u64), Some(0), Some(1), Some(3)];
    let utts: Vec<Utterance> = parents
        .iter()
        .enumerate()
        .map(|(i, &p)| Utterance::new(i as u64, i as u64, p, String::new()))
        .collect();
    let tree = ConversationTree::from_utterances(utts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = max_tokens.clamp(2, 4);
    let mut token = || rng.random_range(FIRST_CONTENT..vocab);
    let ids = (0..tree.len())
        .map(|_| std::iter::once(BOS).chain((1..len).map(|_| token())).collect())
        .collect();
    let targets = (1..len).map(|_| token()).chain(std::iter::once(EOS)).collect();
    Ok(Example::new(ConversationInput::new(&tree, ids)?, targets, BOS)?)
}

pub fn grad_check(global: &GlobalArgs, args: GradCheckArgs) -> Result<()> {
    let loaded = load(global, Vec::new())?;
    let mut cfg = loaded.config.clone();
    cfg.model.dropout = 0.0;
    let mut manifest = RunManifest::new("grad-check", &loaded, global.deterministic, manifest_path(global, None));
    manifest.set_config(&cfg);
    with_manifest(&mut manifest, |_| {
        let mcfg = cfg.model.clone();
        let limit = mcfg.max_utterance_tokens.min(mcfg.max_summary_tokens);
        let ex = grad_check_example(mcfg.vocab_size, limit, cfg.sub_seed("grad_check.data"))?;
        let model = Model::new(mcfg.clone(), cfg.sub_seed("init"))?;
        let objective = cfg.train.objective.clone();
        let pair_seed = cfg.sub_seed("grad_check.pairs");
        let defaults = GradCheckOptions::default();
        let opts = GradCheckOptions {
            step: args.step.unwrap_or(defaults.step),
            tolerance: args.tolerance.unwrap_or(defaults.tolerance),
            ..defaults
        };
        example_loss(&model, &mut Tape::new(), &ex, &objective, pair_seed, &mut ForwardCtx::eval())?;
        let mut store = model.store().clone();
        let report = check_gradients(
            &mut store,
            |s, tape| {
                let m = Model::from_store(mcfg.clone(), s.clone()).expect("same layout");
                let parts = example_loss(&m, tape, &ex, &objective, pair_seed, &mut ForwardCtx::eval())
                    .expect("forward pass succeeded above");
                Ok(parts.total)
            },
            opts,
        )?;
        let width = report.params.iter().map(|p| p.name.len()).max().unwrap_or(0);
        for p in &report.params {
            println!(
                "{:<width$}  {:>8}  {:.3e}  {}",
                p.name,
                p.elements,
                p.max_rel_error,
                if p.passed { "ok" } else { "FAIL" }
            );
        }
        let failed = report.params.iter().filter(|p| !p.passed).count();
        println!(
            "loss {:.6}  {} parameters  max relative error {:.3e}  {} failed",
            report.loss,
            report.params.len(),
            report.max_rel_error(),
            failed
        );
        if failed > 0 {
            bail!(NumericFailure(format!("{failed} parameter gradients disagree with finite differences")));
        }
        Ok(())
    })
}

#[derive(Debug, Args)]
pub struct CountParamsArgs {}

pub fn count_params(global: &GlobalArgs, _args: CountParamsArgs) -> Result<()> {
    let loaded = load(global, Vec::new())?;
    let mut manifest = RunManifest::new("count-params", &loaded, global.deterministic, manifest_path(global, None));
    with_manifest(&mut manifest, |_| {
        println!("{}", count_parameters(&loaded.config.model));
        Ok(())
    })
}
