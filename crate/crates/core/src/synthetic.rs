//! Random toy conversations for smoke tests and overfitting checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::{ConversationTree, Utterance};
use crate::model::ConversationInput;
use crate::objectives::Example;

pub const BOS: usize = 0;
pub const PAD: usize = 1;
pub const EOS: usize = 2;
/// First id handed out to content tokens.
pub const FIRST_CONTENT: usize = 4;

#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub conversations: usize,
    pub vocab_size: usize,
    pub utterances: (usize, usize),
    /// Content tokens per utterance, bos excluded.
    pub utterance_len: (usize, usize),
    /// Content tokens per summary, eos excluded.
    pub summary_len: (usize, usize),
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            conversations: 8,
            vocab_size: 64,
            utterances: (3, 5),
            utterance_len: (2, 5),
            summary_len: (4, 7),
            seed: 0,
        }
    }
}

/// Random tree of `n` utterances: each reply picks an earlier parent.
pub fn random_tree(n: usize, rng: &mut impl Rng) -> ConversationTree {
    let utts = (0..n as u64)
        .map(|i| {
            let parent = (i > 0).then(|| rng.random_range(0..i));
            Utterance::new(i, i, parent, String::new())
        })
        .collect();
    ConversationTree::from_utterances(utts).expect("parents precede children")
}

pub fn synthetic_examples(spec: &SyntheticSpec) -> Vec<Example> {
    assert!(spec.vocab_size > FIRST_CONTENT + 1, "vocabulary too small");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let token = |rng: &mut ChaCha8Rng| rng.random_range(FIRST_CONTENT..spec.vocab_size);
    (0..spec.conversations)
        .map(|_| {
            let n = rng.random_range(spec.utterances.0..=spec.utterances.1);
            let tree = random_tree(n, &mut rng);
            let utts = (0..n)
                .map(|_| {
                    let len = rng.random_range(spec.utterance_len.0..=spec.utterance_len.1);
                    std::iter::once(BOS).chain((0..len).map(|_| token(&mut rng))).collect()
                })
                .collect();
            let len = rng.random_range(spec.summary_len.0..=spec.summary_len.1);
            let targets = (0..len).map(|_| token(&mut rng)).chain(std::iter::once(EOS)).collect();
            let input = ConversationInput::new(&tree, utts).expect("one sequence per utterance");
            Example::new(input, targets, BOS).expect("non-empty targets")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_in_range() {
        let spec = SyntheticSpec::default();
        let a = synthetic_examples(&spec);
        assert_eq!(a, synthetic_examples(&spec));
        assert_eq!(a.len(), 8);
        for ex in &a {
            assert!((3..=5).contains(&ex.input.len()));
            assert_eq!(*ex.targets.last().unwrap(), EOS);
            assert!(ex.input.utterances.iter().all(|u| u[0] == BOS && u.iter().all(|&t| t < 64)));
        }
    }
}
