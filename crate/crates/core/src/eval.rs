//! ROUGE-1/2/L/SU4 and corpus-level scoring.
//!
//! Text is lowercased and split on non-alphanumeric characters. There is no
//! stemming or stopword removal, and SU4 counts plain in-text skip-bigrams
//! (no sentence-start pairs).

use std::collections::HashMap;
use std::hash::Hash;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Longest gap between the two words of an SU4 skip-bigram, in positions.
pub const SU4_MAX_DISTANCE: usize = 5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    pub fn from_counts(overlap: usize, cand: usize, reference: usize) -> Self {
        let precision = if cand == 0 { 0.0 } else { overlap as f64 / cand as f64 };
        let recall = if reference == 0 { 0.0 } else { overlap as f64 / reference as f64 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f1 }
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

fn counts<K: Eq + Hash>(items: impl IntoIterator<Item = K>) -> HashMap<K, usize> {
    let mut m = HashMap::new();
    for k in items {
        *m.entry(k).or_insert(0) += 1;
    }
    m
}

fn clipped_overlap<K: Eq + Hash>(cand: &HashMap<K, usize>, reference: &HashMap<K, usize>) -> usize {
    cand.iter().map(|(k, &c)| c.min(reference.get(k).copied().unwrap_or(0))).sum()
}

fn multiset_score<K: Eq + Hash>(cand: Vec<K>, reference: Vec<K>) -> RougeScore {
    let (nc, nr) = (cand.len(), reference.len());
    let overlap = clipped_overlap(&counts(cand), &counts(reference));
    RougeScore::from_counts(overlap, nc, nr)
}

fn ngrams<T: AsRef<str>>(t: &[T], n: usize) -> Vec<Vec<&str>> {
    if n == 0 || t.len() < n {
        return Vec::new();
    }
    t.windows(n).map(|w| w.iter().map(AsRef::as_ref).collect()).collect()
}

pub fn rouge_n<T: AsRef<str>>(cand: &[T], reference: &[T], n: usize) -> RougeScore {
    multiset_score(ngrams(cand, n), ngrams(reference, n))
}

fn lcs<T: AsRef<str>>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: AsRef<str>>(cand: &[T], reference: &[T]) -> RougeScore {
    RougeScore::from_counts(lcs(cand, reference), cand.len(), reference.len())
}

/// Unigrams plus ordered pairs at most [`SU4_MAX_DISTANCE`] positions apart.
fn su4_units<T: AsRef<str>>(t: &[T]) -> Vec<(&str, Option<&str>)> {
    let mut units: Vec<(&str, Option<&str>)> = t.iter().map(|w| (w.as_ref(), None)).collect();
    for i in 0..t.len() {
        for j in i + 1..t.len().min(i + SU4_MAX_DISTANCE + 1) {
            units.push((t[i].as_ref(), Some(t[j].as_ref())));
        }
    }
    units
}

pub fn rouge_su4<T: AsRef<str>>(cand: &[T], reference: &[T]) -> RougeScore {
    multiset_score(su4_units(cand), su4_units(reference))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExampleScores {
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    #[serde(rename = "rougeL")]
    pub rouge_l: RougeScore,
    #[serde(rename = "rougeSU4")]
    pub rouge_su4: RougeScore,
}

pub fn score_pair(prediction: &str, reference: &str) -> ExampleScores {
    let (c, r) = (tokenize(prediction), tokenize(reference));
    ExampleScores {
        rouge1: rouge_n(&c, &r, 1),
        rouge2: rouge_n(&c, &r, 2),
        rouge_l: rouge_l(&c, &r),
        rouge_su4: rouge_su4(&c, &r),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub mean: ExampleScores,
    pub per_example: Vec<ExampleScores>,
}

fn mean_score(scores: impl Iterator<Item = RougeScore>, n: usize) -> RougeScore {
    let mut m = RougeScore::default();
    for s in scores {
        m.precision += s.precision;
        m.recall += s.recall;
        m.f1 += s.f1;
    }
    let d = n.max(1) as f64;
    RougeScore {
        precision: m.precision / d,
        recall: m.recall / d,
        f1: m.f1 / d,
    }
}

/// Scores aligned prediction/reference lists. Returns `None` when the lengths differ.
pub fn evaluate_corpus(predictions: &[String], references: &[String]) -> Option<EvalReport> {
    if predictions.len() != references.len() {
        return None;
    }
    let per_example: Vec<ExampleScores> =
        predictions.par_iter().zip(references).map(|(p, r)| score_pair(p, r)).collect();
    let n = per_example.len();
    let mean = ExampleScores {
        rouge1: mean_score(per_example.iter().map(|s| s.rouge1), n),
        rouge2: mean_score(per_example.iter().map(|s| s.rouge2), n),
        rouge_l: mean_score(per_example.iter().map(|s| s.rouge_l), n),
        rouge_su4: mean_score(per_example.iter().map(|s| s.rouge_su4), n),
    };
    Some(EvalReport {
        count: n,
        mean,
        per_example,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn w(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn tokenisation() {
        assert_eq!(w("Hello, WORLD! it's 42"), vec!["hello", "world", "it", "s", "42"]);
        assert!(w(" -- ").is_empty());
    }

    #[test]
    fn spec_cases() {
        let s = rouge_n(&w("a b d"), &w("a b c"), 2);
        assert_eq!((s.precision, s.recall, s.f1), (0.5, 0.5, 0.5));
        let s = rouge_l(&w("a c b d"), &w("a b c d"));
        assert_eq!((s.precision, s.recall, s.f1), (0.75, 0.75, 0.75));
        assert_eq!(rouge_l(&w(""), &w("a b")), RougeScore::default());
        assert_eq!(rouge_n(&w("x y"), &w("a b"), 1), RougeScore::default());
        let one = rouge_su4(&w("a"), &w("a"));
        assert_eq!(one.f1, 1.0);
        assert_eq!(rouge_su4(&w("a"), &w("b")), rouge_n(&w("a"), &w("b"), 1));
    }

    #[test]
    fn su4_distance_limit() {
        // "a" and "g" are six positions apart: not a unit. "a" and "f" are five apart: a unit.
        let c = w("a f");
        let r = w("a b c d e f");
        let s = rouge_su4(&c, &r);
        // cand units: a, f, (a,f) = 3; all match
        assert_abs_diff_eq!(s.precision, 1.0);
        let c = w("a g");
        let r = w("a b c d e f g");
        let s = rouge_su4(&c, &r);
        assert_abs_diff_eq!(s.precision, 2.0 / 3.0);
    }

    proptest! {
        #[test]
        fn components_bounded(a in prop::collection::vec(0u8..6, 0..12), b in prop::collection::vec(0u8..6, 0..12)) {
            let a: Vec<String> = a.iter().map(|x| x.to_string()).collect();
            let b: Vec<String> = b.iter().map(|x| x.to_string()).collect();
            for s in [rouge_n(&a, &b, 1), rouge_n(&a, &b, 2), rouge_l(&a, &b), rouge_su4(&a, &b)] {
                for v in [s.precision, s.recall, s.f1] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
                prop_assert!(s.f1 <= s.precision.max(s.recall) + 1e-12);
            }
            if a.len() == b.len() {
                prop_assert_eq!(rouge_n(&a, &b, 2).f1, rouge_n(&b, &a, 2).f1);
            }
        }
    }

    #[test]
    fn corpus_identity_and_mismatch() {
        let p = vec!["the cat sat".to_string(), "a dog ran far".to_string()];
        let r = evaluate_corpus(&p, &p).unwrap();
        assert_eq!(r.count, 2);
        for s in [r.mean.rouge1, r.mean.rouge2, r.mean.rouge_l, r.mean.rouge_su4] {
            assert_eq!(s.f1, 1.0);
        }
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), r);
        assert!(evaluate_corpus(&p, &p[..1]).is_none());
    }
}
