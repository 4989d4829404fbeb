//! Conversation trees: utterances with reply links, depth and same-path relations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConvError {
    #[error("utterance index {index} out of range for a tree of {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("conversation has no utterances")]
    Empty,
    #[error("conversation has {0} root utterances, expected exactly one")]
    RootCount(usize),
    #[error("root utterance {0} is not the earliest utterance")]
    RootNotFirst(u64),
    #[error("utterance {child} refers to unknown parent {parent}")]
    UnknownParent { child: u64, parent: u64 },
    #[error("utterance {child} is not strictly later than its parent {parent}")]
    ParentNotEarlier { child: u64, parent: u64 },
    #[error("duplicate utterance id {0}")]
    DuplicateId(u64),
}

/// One turn of a conversation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: u64,
    #[serde(default)]
    pub author: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<String>,
    #[serde(rename = "ts", default)]
    pub timestamp: u64,
    #[serde(rename = "parent", default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<u64>,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<i64>,
}

impl Utterance {
    pub fn new(id: u64, timestamp: u64, parent_id: Option<u64>, text: impl Into<String>) -> Self {
        Self {
            id,
            author: String::new(),
            role: None,
            timestamp,
            parent_id,
            text: text.into(),
            score: None,
        }
    }
}

/// How two utterances of one tree relate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ThreadRelation {
    /// One is an ancestor of the other (or they are the same utterance);
    /// the payload is `depth(i) - depth(j)`.
    SamePath(i64),
    Unrelated,
}

impl ThreadRelation {
    pub fn reversed(self) -> Self {
        match self {
            Self::SamePath(d) => Self::SamePath(-d),
            Self::Unrelated => Self::Unrelated,
        }
    }
}

/// Timestamp-ordered utterances with dense ids `0..len`; the root sits at
/// position 0 and every parent precedes its children.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConversationTree {
    utterances: Vec<Utterance>,
    parents: Vec<Option<usize>>,
    depths: Vec<usize>,
    source_ids: Vec<u64>,
}

impl ConversationTree {
    /// Orders utterances by `(timestamp, id)`, validates the reply structure
    /// and renumbers ids densely. The original ids stay available through
    /// [`ConversationTree::source_ids`].
    pub fn from_utterances(mut utterances: Vec<Utterance>) -> Result<Self, ConvError> {
        if utterances.is_empty() {
            return Err(ConvError::Empty);
        }
        utterances.sort_by_key(|u| (u.timestamp, u.id));
        let mut position = std::collections::HashMap::with_capacity(utterances.len());
        for (i, u) in utterances.iter().enumerate() {
            if position.insert(u.id, i).is_some() {
                return Err(ConvError::DuplicateId(u.id));
            }
        }
        let roots = utterances.iter().filter(|u| u.parent_id.is_none()).count();
        if roots != 1 {
            return Err(ConvError::RootCount(roots));
        }
        if utterances[0].parent_id.is_some() {
            let root = utterances.iter().find(|u| u.parent_id.is_none()).expect("one root");
            return Err(ConvError::RootNotFirst(root.id));
        }

        let mut parents = Vec::with_capacity(utterances.len());
        for u in &utterances {
            let parent = match u.parent_id {
                None => None,
                Some(pid) => {
                    let &p = position.get(&pid).ok_or(ConvError::UnknownParent { child: u.id, parent: pid })?;
                    if utterances[p].timestamp >= u.timestamp {
                        return Err(ConvError::ParentNotEarlier { child: u.id, parent: pid });
                    }
                    Some(p)
                }
            };
            parents.push(parent);
        }
        let source_ids = utterances.iter().map(|u| u.id).collect();
        for (i, u) in utterances.iter_mut().enumerate() {
            u.id = i as u64;
            u.parent_id = parents[i].map(|p| p as u64);
        }
        Ok(Self::assemble(utterances, parents, source_ids))
    }

    fn assemble(utterances: Vec<Utterance>, parents: Vec<Option<usize>>, source_ids: Vec<u64>) -> Self {
        let mut depths = vec![0; utterances.len()];
        for i in 1..utterances.len() {
            depths[i] = parents[i].map_or(0, |p| depths[p] + 1);
        }
        Self {
            utterances,
            parents,
            depths,
            source_ids,
        }
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn utterance(&self, i: usize) -> Result<&Utterance, ConvError> {
        self.check(i)?;
        Ok(&self.utterances[i])
    }

    pub fn parent(&self, i: usize) -> Result<Option<usize>, ConvError> {
        self.check(i)?;
        Ok(self.parents[i])
    }

    pub fn source_ids(&self) -> &[u64] {
        &self.source_ids
    }

    /// Replaces the text of utterance `i`.
    pub fn set_text(&mut self, i: usize, text: impl Into<String>) -> Result<(), ConvError> {
        self.check(i)?;
        self.utterances[i].text = text.into();
        Ok(())
    }

    /// Rewrites every utterance text with `f`.
    pub fn map_texts(&mut self, mut f: impl FnMut(&Utterance) -> String) {
        for u in &mut self.utterances {
            u.text = f(u);
        }
    }

    fn check(&self, i: usize) -> Result<(), ConvError> {
        if i < self.len() {
            Ok(())
        } else {
            Err(ConvError::IndexOutOfRange { index: i, len: self.len() })
        }
    }

    /// Number of reply edges between utterance `i` and the root.
    pub fn depth(&self, i: usize) -> Result<usize, ConvError> {
        self.check(i)?;
        Ok(self.depths[i])
    }

    /// Whether `a` is a strict ancestor of `b`.
    pub fn is_ancestor(&self, a: usize, b: usize) -> Result<bool, ConvError> {
        self.check(a)?;
        self.check(b)?;
        let mut cur = self.parents[b];
        while let Some(p) = cur {
            if p == a {
                return Ok(true);
            }
            if p < a {
                break;
            }
            cur = self.parents[p];
        }
        Ok(false)
    }

    pub fn relation(&self, i: usize, j: usize) -> Result<ThreadRelation, ConvError> {
        self.check(i)?;
        self.check(j)?;
        let same_path = i == j || self.is_ancestor(i, j)? || self.is_ancestor(j, i)?;
        Ok(if same_path {
            ThreadRelation::SamePath(self.depths[i] as i64 - self.depths[j] as i64)
        } else {
            ThreadRelation::Unrelated
        })
    }

    /// Row-major `len x len` matrix of [`ThreadRelation`]s.
    pub fn relation_matrix(&self) -> Vec<ThreadRelation> {
        let n = self.len();
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                out.push(self.relation(i, j).expect("indices in range"));
            }
        }
        out
    }

    /// Keeps the first `n` utterances. Parents always precede children, so
    /// the prefix is still a valid tree.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.max(1).min(self.len());
        Self {
            utterances: self.utterances[..n].to_vec(),
            parents: self.parents[..n].to_vec(),
            depths: self.depths[..n].to_vec(),
            source_ids: self.source_ids[..n].to_vec(),
        }
    }

    /// Checks every structural invariant; used by tests and after deserialisation.
    pub fn validate(&self) -> Result<(), ConvError> {
        let rebuilt = Self::from_utterances(self.utterances.clone())?;
        if rebuilt.parents != self.parents || rebuilt.depths != self.depths {
            return Err(ConvError::RootNotFirst(self.utterances[0].id));
        }
        Ok(())
    }
}

/// `max(-k, min(k, x))`.
pub fn clip(x: i64, k: i64) -> i64 {
    debug_assert!(k >= 1);
    x.clamp(-k, k)
}

/// `"{participant} of role {role} said: {utterance}"`; the bare text when no role is known.
pub fn apply_role_template(u: &Utterance) -> String {
    match &u.role {
        Some(role) => format!("{} of role {} said: {}", u.author, role, u.text),
        None => u.text.clone(),
    }
}

/// Builds a single-path tree in which each utterance replies to the previous
/// one, for transcripts whose reply structure is unknown. Input order is
/// kept; timestamps are replaced by positions unless already strictly
/// increasing.
pub fn linearize(mut utterances: Vec<Utterance>) -> Result<ConversationTree, ConvError> {
    if utterances.is_empty() {
        return Err(ConvError::Empty);
    }
    let increasing = utterances.windows(2).all(|w| w[0].timestamp < w[1].timestamp);
    let source_ids = utterances.iter().map(|u| u.id).collect();
    let mut parents = Vec::with_capacity(utterances.len());
    for (i, u) in utterances.iter_mut().enumerate() {
        if !increasing {
            u.timestamp = i as u64;
        }
        u.id = i as u64;
        u.parent_id = i.checked_sub(1).map(|p| p as u64);
        parents.push(i.checked_sub(1));
    }
    Ok(ConversationTree::assemble(utterances, parents, source_ids))
}

/// Adapts a flat transcript (meeting, two-party dialogue) into a tree,
/// optionally folding speaker roles into the text.
pub fn adapt_transcript(utterances: Vec<Utterance>, with_roles: bool) -> Result<ConversationTree, ConvError> {
    let utterances = utterances
        .into_iter()
        .map(|mut u| {
            if with_roles {
                u.text = apply_role_template(&u);
            }
            u
        })
        .collect();
    linearize(utterances)
}
