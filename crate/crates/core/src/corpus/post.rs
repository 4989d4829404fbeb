//! Post dumps: the Pushshift-style record adapter and thread extraction.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Deserializer, Serialize};

use crate::conv::{ConversationTree, Utterance};
use crate::corpus::CorpusError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostFlag {
    Nsfw,
    Quarantine,
    Picture,
    Video,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawComment {
    pub id: String,
    /// `None` for top-level comments replying to the post itself.
    pub parent: Option<String>,
    pub timestamp: u64,
    pub author: String,
    pub text: String,
    pub score: i64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawPost {
    pub id: String,
    pub title: String,
    pub title_score: i64,
    pub flags: BTreeSet<PostFlag>,
    pub comments: Vec<RawComment>,
}

/// One line of the dump. Field names follow the Pushshift submission and
/// comment schemas, with comments nested under the submission.
#[derive(Debug, Deserialize)]
struct DumpPost {
    #[serde(default)]
    id: String,
    #[serde(default)]
    title: String,
    #[serde(default)]
    score: i64,
    #[serde(default)]
    over_18: bool,
    #[serde(default, deserialize_with = "quarantine_flag")]
    quarantine: bool,
    #[serde(default)]
    is_video: bool,
    #[serde(default)]
    post_hint: Option<String>,
    #[serde(default)]
    comments: Vec<DumpComment>,
}

#[derive(Debug, Deserialize)]
struct DumpComment {
    #[serde(deserialize_with = "string_or_number")]
    id: String,
    #[serde(default, deserialize_with = "opt_string_or_number")]
    parent_id: Option<String>,
    #[serde(default, alias = "created", deserialize_with = "timestamp")]
    created_utc: u64,
    #[serde(default)]
    author: Option<String>,
    #[serde(default)]
    body: String,
    #[serde(default)]
    score: i64,
}

fn string_or_number<'de, D: Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    match serde_json::Value::deserialize(d)? {
        serde_json::Value::String(s) => Ok(s),
        serde_json::Value::Number(n) => Ok(n.to_string()),
        other => Err(serde::de::Error::custom(format!("expected id, got {other}"))),
    }
}

fn opt_string_or_number<'de, D: Deserializer<'de>>(d: D) -> Result<Option<String>, D::Error> {
    match serde_json::Value::deserialize(d)? {
        serde_json::Value::Null => Ok(None),
        serde_json::Value::String(s) => Ok(Some(s)),
        serde_json::Value::Number(n) => Ok(Some(n.to_string())),
        other => Err(serde::de::Error::custom(format!("expected parent id, got {other}"))),
    }
}

fn timestamp<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
    let err = |v: &serde_json::Value| serde::de::Error::custom(format!("bad timestamp {v}"));
    let v = serde_json::Value::deserialize(d)?;
    match &v {
        serde_json::Value::Number(n) => n
            .as_u64()
            .or_else(|| n.as_f64().filter(|f| *f >= 0.0 && f.is_finite()).map(|f| f as u64))
            .ok_or_else(|| err(&v)),
        serde_json::Value::String(s) => s.trim().parse().map_err(|_| err(&v)),
        _ => Err(err(&v)),
    }
}

fn quarantine_flag<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
    Ok(match serde_json::Value::deserialize(d)? {
        serde_json::Value::Bool(b) => b,
        serde_json::Value::Null => false,
        serde_json::Value::String(s) => !s.is_empty() && s != "false",
        serde_json::Value::Number(n) => n.as_i64() != Some(0),
        _ => true,
    })
}

impl RawPost {
    /// Parses one dump line.
    pub fn from_json_line(line: &str) -> Result<Self, CorpusError> {
        let dump: DumpPost = serde_json::from_str(line).map_err(|e| CorpusError::Json { line: 0, source: e })?;
        Ok(Self::from_dump(dump))
    }

    fn from_dump(d: DumpPost) -> Self {
        let mut flags = BTreeSet::new();
        if d.over_18 {
            flags.insert(PostFlag::Nsfw);
        }
        if d.quarantine {
            flags.insert(PostFlag::Quarantine);
        }
        let hint = d.post_hint.as_deref().unwrap_or("");
        if d.is_video || hint.contains("video") {
            flags.insert(PostFlag::Video);
        }
        if hint == "image" {
            flags.insert(PostFlag::Picture);
        }
        let post_id = d.id;
        let comments = d
            .comments
            .into_iter()
            .map(|c| RawComment {
                parent: resolve_parent(c.parent_id.as_deref(), &post_id),
                id: c.id.strip_prefix("t1_").map(str::to_string).unwrap_or(c.id),
                timestamp: c.created_utc,
                author: c.author.unwrap_or_default(),
                text: c.body,
                score: c.score,
            })
            .collect();
        Self {
            id: post_id,
            title: d.title,
            title_score: d.score,
            flags,
            comments,
        }
    }
}

/// `t3_*` (a submission) or the post's own id means top-level; `t1_x` and bare `x` name comment `x`.
fn resolve_parent(parent: Option<&str>, post_id: &str) -> Option<String> {
    let p = parent?;
    if p.is_empty() || p.starts_with("t3_") || p == post_id {
        return None;
    }
    Some(p.strip_prefix("t1_").unwrap_or(p).to_string())
}

/// Threads of one post plus the number of comments that could not be placed.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ThreadExtraction {
    pub threads: Vec<ConversationTree>,
    /// Comments with a dangling parent, a duplicate id, a timestamp not
    /// after their parent's, or a descendant of any such comment.
    pub skipped: usize,
}

/// Splits a post into one tree per top-level comment. Utterance ids in the
/// returned trees are positions in `post.comments`.
pub fn extract_threads(post: &RawPost) -> ThreadExtraction {
    let mut index: HashMap<&str, usize> = HashMap::with_capacity(post.comments.len());
    let mut duplicate = vec![false; post.comments.len()];
    for (i, c) in post.comments.iter().enumerate() {
        if index.contains_key(c.id.as_str()) {
            duplicate[i] = true;
        } else {
            index.insert(&c.id, i);
        }
    }

    let mut children: Vec<Vec<usize>> = vec![Vec::new(); post.comments.len()];
    let mut roots = Vec::new();
    for (i, c) in post.comments.iter().enumerate() {
        if duplicate[i] {
            continue;
        }
        match &c.parent {
            None => roots.push(i),
            Some(pid) => {
                if let Some(&p) = index.get(pid.as_str()) {
                    if post.comments[p].timestamp < c.timestamp {
                        children[p].push(i);
                    }
                }
            }
        }
    }
    let order = |i: &usize| (post.comments[*i].timestamp, *i);
    roots.sort_by_key(order);

    let mut placed = 0;
    let mut threads = Vec::with_capacity(roots.len());
    for &root in &roots {
        let mut members = vec![root];
        let mut cursor = 0;
        while cursor < members.len() {
            let node = members[cursor];
            members.extend(children[node].iter().copied());
            cursor += 1;
        }
        placed += members.len();
        let utterances = members
            .iter()
            .map(|&i| {
                let c = &post.comments[i];
                Utterance {
                    id: i as u64,
                    author: c.author.clone(),
                    role: None,
                    timestamp: c.timestamp,
                    parent_id: c.parent.as_ref().map(|p| index[p.as_str()] as u64),
                    text: c.text.clone(),
                    score: Some(c.score),
                }
            })
            .collect();
        let tree = ConversationTree::from_utterances(utterances).expect("extracted subtree is a valid tree");
        threads.push(tree);
    }
    ThreadExtraction {
        threads,
        skipped: post.comments.len() - placed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn comment(id: &str, parent: Option<&str>, ts: u64) -> RawComment {
        RawComment {
            id: id.into(),
            parent: parent.map(str::to_string),
            timestamp: ts,
            author: format!("user_{id}"),
            text: format!("text {id}"),
            score: 1,
        }
    }

    fn post(comments: Vec<RawComment>) -> RawPost {
        RawPost {
            id: "p".into(),
            title: "title".into(),
            title_score: 3,
            flags: BTreeSet::new(),
            comments,
        }
    }

    #[test]
    fn forest_split() {
        let p = post(vec![
            comment("a", None, 1),
            comment("b", None, 2),
            comment("a1", Some("a"), 3),
            comment("b1", Some("b"), 4),
        ]);
        let ex = extract_threads(&p);
        assert_eq!(ex.threads.len(), 2);
        assert!(ex.threads.iter().all(|t| t.len() == 2));
        assert_eq!(ex.skipped, 0);
        assert_eq!(ex.threads[0].utterances()[1].text, "text a1");
    }

    #[test]
    fn empty_post() {
        let ex = extract_threads(&post(vec![]));
        assert!(ex.threads.is_empty());
        assert_eq!(ex.skipped, 0);
    }

    #[test]
    fn dangling_and_descendants_are_skipped() {
        let p = post(vec![
            comment("a", None, 1),
            comment("x", Some("missing"), 2),
            comment("x1", Some("x"), 3),
            comment("a1", Some("a"), 4),
            comment("early", Some("a"), 0),
            comment("a", None, 5),
        ]);
        let ex = extract_threads(&p);
        assert_eq!(ex.threads.len(), 1);
        assert_eq!(ex.threads[0].len(), 2);
        assert_eq!(ex.skipped, 4);
    }

    #[test]
    fn nested_replies_match_hand_enumeration() {
        // a ─┬─ b ─── d
        //    └─ c ─── e ─── f
        // g ─── h
        let p = post(vec![
            comment("e", Some("c"), 40),
            comment("a", None, 10),
            comment("c", Some("a"), 30),
            comment("b", Some("a"), 20),
            comment("g", None, 15),
            comment("d", Some("b"), 50),
            comment("h", Some("g"), 16),
            comment("f", Some("e"), 60),
        ]);
        let ex = extract_threads(&p);
        let texts: Vec<Vec<&str>> = ex
            .threads
            .iter()
            .map(|t| t.utterances().iter().map(|u| u.text.as_str()).collect())
            .collect();
        assert_eq!(
            texts,
            vec![
                vec!["text a", "text b", "text c", "text e", "text d", "text f"],
                vec!["text g", "text h"],
            ]
        );
        let first = &ex.threads[0];
        let depths: Vec<usize> = (0..first.len()).map(|i| first.depth(i).unwrap()).collect();
        assert_eq!(depths, vec![0, 1, 1, 2, 2, 3]);
        let parents: Vec<Option<usize>> = (0..first.len()).map(|i| first.parent(i).unwrap()).collect();
        assert_eq!(parents, vec![None, Some(0), Some(0), Some(2), Some(1), Some(3)]);
    }

    #[test]
    fn adapter_maps_pushshift_fields() {
        let line = r#"{"id":"abc","title":"T","score":-2,"over_18":true,"post_hint":"image",
            "comments":[{"id":"c1","parent_id":"t3_abc","created_utc":"17","author":"u","body":"hi","score":4},
                        {"id":"t1_c2","parent_id":"t1_c1","created_utc":18.0,"body":"yo"}]}"#;
        let p = RawPost::from_json_line(line).unwrap();
        assert_eq!(p.title_score, -2);
        assert!(p.flags.contains(&PostFlag::Nsfw) && p.flags.contains(&PostFlag::Picture));
        assert_eq!(p.comments[0].parent, None);
        assert_eq!(p.comments[0].timestamp, 17);
        assert_eq!(p.comments[1].id, "c2");
        assert_eq!(p.comments[1].parent.as_deref(), Some("c1"));
        assert_eq!(p.comments[1].author, "");
        assert!(RawPost::from_json_line("{not json").is_err());
    }
}
