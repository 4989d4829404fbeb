//! Dump-to-shards driver: parse, extract, filter, truncate, emit.

use std::collections::BTreeMap;
use std::io::BufRead;

use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::instance::{build_instance, FilterConfig, Rejection, TrainingInstance};
use crate::corpus::post::{extract_threads, RawPost};
use crate::corpus::tokenizer::Tokenizer;
use crate::corpus::{CorpusError, MASK_TOKEN};

#[derive(Clone, Debug)]
pub struct CorpusOptions {
    pub filter: FilterConfig,
    pub max_utterances: usize,
    /// Per-utterance cap including the leading bos.
    pub max_utterance_tokens: usize,
    /// Summary cap including the trailing eos.
    pub max_summary_tokens: usize,
    /// Posts processed per parallel batch.
    pub chunk_size: usize,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self {
            filter: FilterConfig::default(),
            max_utterances: 124,
            max_utterance_tokens: 200,
            max_summary_tokens: 256,
            chunk_size: 256,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CorpusStats {
    pub posts: usize,
    pub malformed_lines: usize,
    pub threads: usize,
    pub instances: usize,
    pub skipped_comments: usize,
    pub rejected: BTreeMap<Rejection, usize>,
}

impl CorpusStats {
    fn new() -> Self {
        let rejected = [
            Rejection::Nsfw,
            Rejection::Quarantine,
            Rejection::Picture,
            Rejection::Video,
            Rejection::NegativeTitleScore,
            Rejection::TooFewComments,
            Rejection::NegativeLeadScore,
            Rejection::EmptySummary,
        ]
        .into_iter()
        .map(|r| (r, 0))
        .collect();
        Self {
            rejected,
            ..Self::default()
        }
    }
}

#[derive(Default)]
struct PostOutcome {
    malformed: bool,
    threads: usize,
    skipped: usize,
    instances: Vec<TrainingInstance>,
    rejections: Vec<Rejection>,
}

fn truncate_tokens(tok: &Tokenizer, text: &str, max: usize) -> Result<String, CorpusError> {
    let ids = tok.encode(text)?;
    if ids.len() <= max {
        return Ok(text.to_string());
    }
    tok.decode(&ids[..max])
}

fn process_post(line: &str, tok: Option<&Tokenizer>, opts: &CorpusOptions) -> Result<PostOutcome, CorpusError> {
    let Ok(post) = RawPost::from_json_line(line) else {
        return Ok(PostOutcome {
            malformed: true,
            ..PostOutcome::default()
        });
    };
    let extraction = extract_threads(&post);
    let mut outcome = PostOutcome {
        threads: extraction.threads.len(),
        skipped: extraction.skipped,
        ..PostOutcome::default()
    };
    for thread in &extraction.threads {
        match build_instance(&post, thread, &opts.filter) {
            Ok(mut inst) => {
                inst.tree = inst.tree.truncated(opts.max_utterances);
                if let Some(tok) = tok {
                    let utt_cap = opts.max_utterance_tokens.saturating_sub(1).max(1);
                    let mut err = None;
                    inst.tree.map_texts(|u| {
                        if u.text == MASK_TOKEN {
                            return u.text.clone();
                        }
                        truncate_tokens(tok, &u.text, utt_cap).unwrap_or_else(|e| {
                            err.get_or_insert(e);
                            u.text.clone()
                        })
                    });
                    if let Some(e) = err {
                        return Err(e);
                    }
                    inst.summary = truncate_tokens(tok, &inst.summary, opts.max_summary_tokens.saturating_sub(1).max(1))?;
                }
                if let Some(meta) = inst.meta.as_mut() {
                    meta.comment_ids.truncate(inst.tree.len());
                }
                outcome.instances.push(inst);
            }
            Err(reason) => outcome.rejections.push(reason),
        }
    }
    Ok(outcome)
}

/// Runs the corpus pipeline over a JSON-lines post dump. Posts are
/// processed in parallel batches; `emit` sees instances in input order.
/// Malformed lines are counted and skipped.
pub fn build_corpus<R: BufRead>(
    input: R,
    tok: Option<&Tokenizer>,
    opts: &CorpusOptions,
    mut emit: impl FnMut(&TrainingInstance) -> Result<(), CorpusError>,
) -> Result<CorpusStats, CorpusError> {
    let mut stats = CorpusStats::new();
    let mut lines = input.lines();
    loop {
        let mut batch = Vec::with_capacity(opts.chunk_size);
        for line in lines.by_ref() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            batch.push(line);
            if batch.len() == opts.chunk_size.max(1) {
                break;
            }
        }
        if batch.is_empty() {
            break;
        }
        let outcomes: Vec<Result<PostOutcome, CorpusError>> =
            batch.par_iter().map(|line| process_post(line, tok, opts)).collect();
        for outcome in outcomes {
            let outcome = outcome?;
            stats.posts += 1;
            if outcome.malformed {
                stats.malformed_lines += 1;
                continue;
            }
            stats.threads += outcome.threads;
            stats.skipped_comments += outcome.skipped;
            for r in outcome.rejections {
                *stats.rejected.entry(r).or_default() += 1;
            }
            for inst in &outcome.instances {
                emit(inst)?;
                stats.instances += 1;
            }
        }
    }
    Ok(stats)
}
