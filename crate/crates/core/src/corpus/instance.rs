//! Training instances, the cleaning filters that produce them, and their
//! JSON-lines serialisation.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conv::{ConversationTree, Utterance};
use crate::corpus::clean::{clean_text, MASK_TOKEN};
use crate::corpus::post::{PostFlag, RawPost};
use crate::corpus::CorpusError;

/// Where an instance came from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceMeta {
    #[serde(default)]
    pub post_id: String,
    #[serde(default)]
    pub comment_ids: Vec<String>,
}

/// A conversation paired with its (pseudo-)summary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingInstance {
    pub tree: ConversationTree,
    pub summary: String,
    pub meta: Option<SourceMeta>,
}

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    utterances: Vec<Utterance>,
    #[serde(default)]
    summary: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<SourceMeta>,
}

impl TrainingInstance {
    pub fn to_json_line(&self) -> String {
        let record = InstanceRecord {
            utterances: self.tree.utterances().to_vec(),
            summary: self.summary.clone(),
            meta: self.meta.clone(),
        };
        serde_json::to_string(&record).expect("instance serialises")
    }

    pub fn from_json_line(line: &str) -> Result<Self, CorpusError> {
        let record: InstanceRecord =
            serde_json::from_str(line).map_err(|e| CorpusError::Json { line: 0, source: e })?;
        let tree = ConversationTree::from_utterances(record.utterances)?;
        Ok(Self {
            tree,
            summary: record.summary,
            meta: record.meta,
        })
    }

    /// Checks the pretraining invariants: non-empty summary and exactly one masked utterance.
    pub fn check_pretraining(&self) -> Result<(), CorpusError> {
        if self.summary.trim().is_empty() {
            return Err(CorpusError::Invalid("empty summary".into()));
        }
        let masked = self.tree.utterances().iter().filter(|u| u.text == MASK_TOKEN).count();
        if masked != 1 {
            return Err(CorpusError::Invalid(format!("{masked} masked utterances")));
        }
        Ok(())
    }
}

/// Why a thread did not become an instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    Nsfw,
    Quarantine,
    Picture,
    Video,
    NegativeTitleScore,
    TooFewComments,
    NegativeLeadScore,
    EmptySummary,
}

#[derive(Clone, Copy, Debug)]
pub struct FilterConfig {
    /// Threads with fewer utterances (lead comment included) are dropped.
    pub min_comments: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { min_comments: 10 }
    }
}

/// Applies the cleaning heuristics to one thread of `post` and, if it
/// survives, builds the instance: the pseudo-summary is the cleaned title
/// followed by the cleaned lead comment, the lead comment's text becomes
/// [`MASK_TOKEN`] and every other utterance is cleaned.
pub fn build_instance(post: &RawPost, thread: &ConversationTree, cfg: &FilterConfig) -> Result<TrainingInstance, Rejection> {
    for (flag, reason) in [
        (PostFlag::Nsfw, Rejection::Nsfw),
        (PostFlag::Quarantine, Rejection::Quarantine),
        (PostFlag::Picture, Rejection::Picture),
        (PostFlag::Video, Rejection::Video),
    ] {
        if post.flags.contains(&flag) {
            return Err(reason);
        }
    }
    if post.title_score < 0 {
        return Err(Rejection::NegativeTitleScore);
    }
    if thread.len() < cfg.min_comments {
        return Err(Rejection::TooFewComments);
    }
    let lead = &thread.utterances()[0];
    if lead.score.unwrap_or(0) < 0 {
        return Err(Rejection::NegativeLeadScore);
    }

    let summary = [clean_text(&post.title), clean_text(&lead.text)]
        .into_iter()
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join(" ");
    if summary.is_empty() {
        return Err(Rejection::EmptySummary);
    }

    let mut tree = thread.clone();
    tree.map_texts(|u| if u.id == 0 { MASK_TOKEN.to_string() } else { clean_text(&u.text) });
    let comment_ids = thread
        .source_ids()
        .iter()
        .map(|&i| post.comments.get(i as usize).map(|c| c.id.clone()).unwrap_or_default())
        .collect();
    Ok(TrainingInstance {
        tree,
        summary,
        meta: Some(SourceMeta {
            post_id: post.id.clone(),
            comment_ids,
        }),
    })
}

/// Writes one JSON object per line.
pub fn write_instances<'a, W: Write>(mut w: W, instances: impl IntoIterator<Item = &'a TrainingInstance>) -> Result<usize, CorpusError> {
    let mut n = 0;
    for inst in instances {
        w.write_all(inst.to_json_line().as_bytes())?;
        w.write_all(b"\n")?;
        n += 1;
    }
    w.flush()?;
    Ok(n)
}

/// Streams instances from JSON lines; blank lines are skipped and errors
/// carry their 1-based line number.
pub fn read_instances<R: BufRead>(r: R) -> impl Iterator<Item = Result<TrainingInstance, CorpusError>> {
    r.lines().enumerate().filter_map(|(i, line)| {
        let line_no = i + 1;
        match line {
            Err(e) => Some(Err(CorpusError::Io(e))),
            Ok(l) if l.trim().is_empty() => None,
            Ok(l) => Some(TrainingInstance::from_json_line(&l).map_err(|e| e.at_line(line_no))),
        }
    })
}

pub fn read_instances_file(path: &Path) -> Result<Vec<TrainingInstance>, CorpusError> {
    let f = File::open(path).map_err(|e| CorpusError::Path { path: path.to_path_buf(), source: e })?;
    read_instances(BufReader::new(f)).collect()
}

/// Reads every shard in order.
pub fn read_shards(paths: &[PathBuf]) -> Result<Vec<TrainingInstance>, CorpusError> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(read_instances_file(p)?);
    }
    Ok(out)
}

/// Expands a path that is either a file, a directory of `*.jsonl` files, or
/// a shard prefix (`<prefix>-00000.jsonl`, ...) into sorted shard paths.
pub fn resolve_shards(path: &Path) -> Result<Vec<PathBuf>, CorpusError> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let (dir, prefix) = if path.is_dir() {
        (path.to_path_buf(), String::new())
    } else {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let prefix = path.file_name().map(|s| format!("{}-", s.to_string_lossy())).unwrap_or_default();
        (dir.to_path_buf(), prefix)
    };
    let entries = std::fs::read_dir(&dir).map_err(|e| CorpusError::Path { path: dir.clone(), source: e })?;
    let mut shards: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            name.starts_with(&prefix) && name.ends_with(".jsonl")
        })
        .collect();
    shards.sort();
    if shards.is_empty() {
        return Err(CorpusError::Invalid(format!("no shards found for {}", path.display())));
    }
    Ok(shards)
}

/// Splits output across `<prefix>-NNNNN.jsonl` files of at most `shard_size` instances.
pub struct ShardWriter {
    prefix: PathBuf,
    shard_size: usize,
    current: Option<BufWriter<File>>,
    in_shard: usize,
    paths: Vec<PathBuf>,
}

impl ShardWriter {
    pub fn new(prefix: impl Into<PathBuf>, shard_size: usize) -> Self {
        Self {
            prefix: prefix.into(),
            shard_size: shard_size.max(1),
            current: None,
            in_shard: 0,
            paths: Vec::new(),
        }
    }

    pub fn shard_path(prefix: &Path, index: usize) -> PathBuf {
        let mut name = prefix.file_name().map(|s| s.to_os_string()).unwrap_or_default();
        name.push(format!("-{index:05}.jsonl"));
        prefix.with_file_name(name)
    }

    pub fn write(&mut self, inst: &TrainingInstance) -> Result<(), CorpusError> {
        if self.current.is_none() || self.in_shard == self.shard_size {
            self.open_next()?;
        }
        let w = self.current.as_mut().expect("shard open");
        w.write_all(inst.to_json_line().as_bytes())?;
        w.write_all(b"\n")?;
        self.in_shard += 1;
        Ok(())
    }

    fn open_next(&mut self) -> Result<(), CorpusError> {
        if let Some(mut w) = self.current.take() {
            w.flush()?;
        }
        let path = Self::shard_path(&self.prefix, self.paths.len());
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let f = File::create(&path).map_err(|e| CorpusError::Path { path: path.clone(), source: e })?;
        self.current = Some(BufWriter::new(f));
        self.in_shard = 0;
        self.paths.push(path);
        Ok(())
    }

    /// Flushes and returns the written shard paths. An empty run still
    /// produces one empty shard so downstream readers find a file.
    pub fn finish(mut self) -> Result<Vec<PathBuf>, CorpusError> {
        if self.current.is_none() {
            self.open_next()?;
        }
        if let Some(mut w) = self.current.take() {
            w.flush()?;
        }
        Ok(self.paths)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::post::{extract_threads, RawComment};
    use std::collections::BTreeSet;

    fn thread_post(n: usize, title: &str, lead: &str) -> RawPost {
        let mut comments = vec![RawComment {
            id: "lead".into(),
            parent: None,
            timestamp: 1,
            author: "op".into(),
            text: lead.into(),
            score: 5,
        }];
        for i in 1..n {
            comments.push(RawComment {
                id: format!("r{i}"),
                parent: Some("lead".into()),
                timestamp: 1 + i as u64,
                author: format!("u{i}"),
                text: format!("reply *{i}*"),
                score: 0,
            });
        }
        RawPost {
            id: "p1".into(),
            title: title.into(),
            title_score: 2,
            flags: BTreeSet::new(),
            comments,
        }
    }

    fn build(post: &RawPost) -> Result<TrainingInstance, Rejection> {
        let ex = extract_threads(post);
        build_instance(post, &ex.threads[0], &FilterConfig::default())
    }

    #[test]
    fn nine_comments_rejected() {
        assert_eq!(build(&thread_post(9, "T", "L")), Err(Rejection::TooFewComments));
    }

    #[test]
    fn ten_comments_accepted() {
        let inst = build(&thread_post(10, "T", "L")).unwrap();
        assert_eq!(inst.summary, "T L");
        assert_eq!(inst.tree.utterances()[0].text, MASK_TOKEN);
        assert_eq!(inst.tree.utterances()[1].text, "reply 1");
        inst.check_pretraining().unwrap();
        let meta = inst.meta.unwrap();
        assert_eq!(meta.post_id, "p1");
        assert_eq!(meta.comment_ids[0], "lead");
    }

    #[test]
    fn negative_lead_rejected() {
        let mut post = thread_post(12, "T", "L");
        post.comments[0].score = -1;
        assert_eq!(build(&post), Err(Rejection::NegativeLeadScore));
    }

    #[test]
    fn flags_and_title_score() {
        let mut post = thread_post(12, "T", "L");
        post.title_score = -1;
        assert_eq!(build(&post), Err(Rejection::NegativeTitleScore));
        post.title_score = 0;
        post.flags.insert(PostFlag::Video);
        assert_eq!(build(&post), Err(Rejection::Video));
        post.flags.insert(PostFlag::Nsfw);
        assert_eq!(build(&post), Err(Rejection::Nsfw));
    }

    #[test]
    fn empty_summary_rejected() {
        assert_eq!(build(&thread_post(10, "**", "~~")), Err(Rejection::EmptySummary));
        assert_eq!(build(&thread_post(10, "", "lead only")).unwrap().summary, "lead only");
    }

    #[test]
    fn adding_comments_never_triggers_count_filter() {
        for n in 10..30 {
            assert!(build(&thread_post(n, "T", "L")).is_ok());
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let a = build(&thread_post(10, "T", "see http://x.y")).unwrap();
        let b = build(&thread_post(11, "Other", "L")).unwrap();
        let c = build(&thread_post(12, "Third", "L")).unwrap();
        let mut buf = Vec::new();
        write_instances(&mut buf, [&a, &b, &c]).unwrap();
        let back: Vec<_> = read_instances(buf.as_slice()).collect::<Result<_, _>>().unwrap();
        assert_eq!(back, vec![a, b, c]);

        let mut empty = Vec::new();
        write_instances(&mut empty, []).unwrap();
        assert!(empty.is_empty());
        assert_eq!(read_instances(empty.as_slice()).count(), 0);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let a = build(&thread_post(10, "T", "L")).unwrap();
        let text = format!("{}\n\n{{broken\n", a.to_json_line());
        let results: Vec<_> = read_instances(text.as_bytes()).collect();
        assert_eq!(results.len(), 2);
        let err = results[1].as_ref().unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn shard_writer_splits() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("out/rcs");
        let inst = build(&thread_post(10, "T", "L")).unwrap();
        let mut w = ShardWriter::new(&prefix, 2);
        for _ in 0..5 {
            w.write(&inst).unwrap();
        }
        let paths = w.finish().unwrap();
        assert_eq!(paths.len(), 3);
        assert!(paths[0].ends_with("rcs-00000.jsonl"));
        let resolved = resolve_shards(&prefix).unwrap();
        assert_eq!(resolved, paths);
        assert_eq!(read_shards(&resolved).unwrap().len(), 5);
    }
}
