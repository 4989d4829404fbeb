//! Byte-level BPE tokenizer reading GPT-2 style `vocab.json` / `merges.txt`.
//!
//! Text is split on special-token surface forms first, then pre-tokenised
//! with the GPT-2 pattern, mapped byte-wise onto printable code points and
//! merged greedily by merge rank. Decoding reverses the byte mapping, so
//! `decode(encode(s)) == s` whenever every byte symbol is in the vocabulary.

use std::collections::HashMap;
use std::path::Path;

use fancy_regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::clean::{MASK_TOKEN, URL_TOKEN};
use crate::corpus::CorpusError;

const PRETOKENIZE: &str = r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

/// Surface forms of the special tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpecialTokens {
    pub bos: String,
    pub pad: String,
    pub eos: String,
    pub mask: String,
    pub url: String,
}

impl Default for SpecialTokens {
    fn default() -> Self {
        Self {
            bos: "<s>".into(),
            pad: "<pad>".into(),
            eos: "</s>".into(),
            mask: MASK_TOKEN.into(),
            url: URL_TOKEN.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecialIds {
    pub bos: usize,
    pub pad: usize,
    pub eos: usize,
    pub mask: usize,
    pub url: usize,
}

#[derive(Clone, Debug)]
pub struct Tokenizer {
    encoder: HashMap<String, usize>,
    decoder: Vec<String>,
    ranks: HashMap<(String, String), usize>,
    byte_to_char: [char; 256],
    char_to_byte: HashMap<char, u8>,
    specials: SpecialTokens,
    special_ids: SpecialIds,
    /// Special surface forms, longest first, for splitting.
    special_forms: Vec<(String, usize)>,
    pattern: Regex,
}

/// GPT-2's reversible byte to printable-character mapping.
fn bytes_to_unicode() -> [char; 256] {
    let mut printable: Vec<u32> = (b'!' as u32..=b'~' as u32).collect();
    printable.extend(0xA1..=0xAC);
    printable.extend(0xAE..=0xFF);
    let mut table = ['\0'; 256];
    let mut extra = 0;
    for b in 0..256u32 {
        let c = if printable.contains(&b) {
            b
        } else {
            extra += 1;
            255 + extra
        };
        table[b as usize] = char::from_u32(c).expect("valid code point");
    }
    table
}

impl Tokenizer {
    /// Builds a tokenizer from an in-memory vocabulary and merge list.
    /// Special tokens missing from `vocab` are appended after the largest id.
    pub fn new(mut vocab: HashMap<String, usize>, merges: Vec<(String, String)>, specials: SpecialTokens) -> Result<Self, CorpusError> {
        for form in [&specials.bos, &specials.pad, &specials.eos, &specials.mask, &specials.url] {
            if !vocab.contains_key(form.as_str()) {
                let next = vocab.values().max().map_or(0, |m| m + 1);
                vocab.insert(form.clone(), next);
            }
        }
        let size = vocab.values().max().map_or(0, |m| m + 1);
        let mut decoder = vec![String::new(); size];
        for (tok, &id) in &vocab {
            if !decoder[id].is_empty() {
                return Err(CorpusError::Vocab(format!("id {id} assigned twice")));
            }
            decoder[id] = tok.clone();
        }
        if let Some(gap) = decoder.iter().position(String::is_empty) {
            return Err(CorpusError::Vocab(format!("vocabulary ids are not contiguous (missing {gap})")));
        }
        let special_ids = SpecialIds {
            bos: vocab[&specials.bos],
            pad: vocab[&specials.pad],
            eos: vocab[&specials.eos],
            mask: vocab[&specials.mask],
            url: vocab[&specials.url],
        };
        let mut ids = [special_ids.bos, special_ids.pad, special_ids.eos, special_ids.mask, special_ids.url];
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(CorpusError::Vocab("special tokens must be distinct".into()));
        }
        let mut special_forms: Vec<(String, usize)> = [
            (&specials.bos, special_ids.bos),
            (&specials.pad, special_ids.pad),
            (&specials.eos, special_ids.eos),
            (&specials.mask, special_ids.mask),
            (&specials.url, special_ids.url),
        ]
        .into_iter()
        .map(|(s, id)| (s.clone(), id))
        .collect();
        special_forms.sort_by(|a, b| b.0.len().cmp(&a.0.len()));

        let ranks = merges.into_iter().enumerate().map(|(i, m)| (m, i)).collect();
        let byte_to_char = bytes_to_unicode();
        let char_to_byte = byte_to_char.iter().enumerate().map(|(b, c)| (*c, b as u8)).collect();
        Ok(Self {
            encoder: vocab,
            decoder,
            ranks,
            byte_to_char,
            char_to_byte,
            specials,
            special_ids,
            special_forms,
            pattern: Regex::new(PRETOKENIZE).expect("static pattern compiles"),
        })
    }

    /// Loads `vocab.json` and `merges.txt` from `dir`, plus an optional
    /// `special_tokens.json` overriding the special surface forms.
    pub fn from_dir(dir: &Path) -> Result<Self, CorpusError> {
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| CorpusError::Path { path: p, source: e })
        };
        let vocab: HashMap<String, usize> =
            serde_json::from_str(&read("vocab.json")?).map_err(|e| CorpusError::Vocab(format!("vocab.json: {e}")))?;
        let merges = parse_merges(&read("merges.txt")?)?;
        let specials = if dir.join("special_tokens.json").exists() {
            serde_json::from_str(&read("special_tokens.json")?)
                .map_err(|e| CorpusError::Vocab(format!("special_tokens.json: {e}")))?
        } else {
            SpecialTokens::default()
        };
        Self::new(vocab, merges, specials)
    }

    pub fn vocab_size(&self) -> usize {
        self.decoder.len()
    }

    pub fn special_ids(&self) -> SpecialIds {
        self.special_ids
    }

    pub fn specials(&self) -> &SpecialTokens {
        &self.specials
    }

    pub fn token_to_id(&self, token: &str) -> Option<usize> {
        self.encoder.get(token).copied()
    }

    pub fn id_to_token(&self, id: usize) -> Option<&str> {
        self.decoder.get(id).map(String::as_str)
    }

    fn is_special(&self, id: usize) -> bool {
        self.special_forms.iter().any(|(_, s)| *s == id)
    }

    /// Encodes text to ids. Special surface forms map to their ids.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>, CorpusError> {
        let mut out = Vec::new();
        let mut rest = text;
        while !rest.is_empty() {
            let next = self
                .special_forms
                .iter()
                .filter_map(|(form, id)| rest.find(form.as_str()).map(|p| (p, form.len(), *id)))
                .min_by_key(|(p, len, _)| (*p, usize::MAX - len));
            match next {
                Some((pos, len, id)) => {
                    self.encode_plain(&rest[..pos], &mut out)?;
                    out.push(id);
                    rest = &rest[pos + len..];
                }
                None => {
                    self.encode_plain(rest, &mut out)?;
                    break;
                }
            }
        }
        Ok(out)
    }

    fn encode_plain(&self, text: &str, out: &mut Vec<usize>) -> Result<(), CorpusError> {
        for piece in self.pattern.find_iter(text) {
            let piece = piece.map_err(|e| CorpusError::Vocab(format!("pre-tokenizer: {e}")))?;
            let mapped: Vec<String> = piece.as_str().bytes().map(|b| self.byte_to_char[b as usize].to_string()).collect();
            for sym in self.bpe(mapped) {
                let id = self
                    .encoder
                    .get(&sym)
                    .copied()
                    .ok_or_else(|| CorpusError::Vocab(format!("symbol {sym:?} not in vocabulary")))?;
                out.push(id);
            }
        }
        Ok(())
    }

    fn bpe(&self, mut symbols: Vec<String>) -> Vec<String> {
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|r| (*r, i)))
                .min();
            let Some((_, i)) = best else { break };
            let (a, b) = (symbols[i].clone(), symbols[i + 1].clone());
            // Merge every occurrence of the pair left to right.
            let mut merged = Vec::with_capacity(symbols.len());
            let mut j = 0;
            while j < symbols.len() {
                if j + 1 < symbols.len() && symbols[j] == a && symbols[j + 1] == b {
                    merged.push(format!("{a}{b}"));
                    j += 2;
                } else {
                    merged.push(symbols[j].clone());
                    j += 1;
                }
            }
            symbols = merged;
        }
        symbols
    }

    /// Decodes ids back to text. Unknown ids are an error; invalid UTF-8 is
    /// replaced lossily.
    pub fn decode(&self, ids: &[usize]) -> Result<String, CorpusError> {
        let mut out = String::new();
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self
                .decoder
                .get(id)
                .ok_or_else(|| CorpusError::Vocab(format!("id {id} outside vocabulary of {}", self.decoder.len())))?;
            if self.is_special(id) {
                out.push_str(&String::from_utf8_lossy(&bytes));
                bytes.clear();
                out.push_str(tok);
            } else {
                bytes.extend(tok.chars().filter_map(|c| self.char_to_byte.get(&c)));
            }
        }
        out.push_str(&String::from_utf8_lossy(&bytes));
        Ok(out)
    }

    /// Decodes the content of a generated sequence: bos/pad are dropped and
    /// decoding stops at the first eos.
    pub fn decode_generated(&self, ids: &[usize]) -> Result<String, CorpusError> {
        let s = self.special_ids;
        let content: Vec<usize> = ids
            .iter()
            .copied()
            .take_while(|&i| i != s.eos)
            .filter(|&i| i != s.bos && i != s.pad)
            .collect();
        self.decode(&content)
    }
}

/// Parses `merges.txt`: one `left right` pair per line, `#` lines ignored.
pub fn parse_merges(text: &str) -> Result<Vec<(String, String)>, CorpusError> {
    let mut merges = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => merges.push((a.to_string(), b.to_string())),
            _ => return Err(CorpusError::Vocab(format!("merges.txt line {}: expected two symbols", i + 1))),
        }
    }
    Ok(merges)
}

/// `bos` followed by at most `max_tokens - 1` content ids; the tail is dropped.
pub fn tokenize_utterance(tok: &Tokenizer, text: &str, max_tokens: usize) -> Result<Vec<usize>, CorpusError> {
    assert!(max_tokens >= 2, "max_tokens must leave room for bos and one token");
    let mut ids = Vec::with_capacity(max_tokens);
    ids.push(tok.special_ids().bos);
    ids.extend(tok.encode(text)?.into_iter().take(max_tokens - 1));
    Ok(ids)
}

/// Summary target ids: at most `max_tokens - 1` content ids followed by eos.
pub fn tokenize_summary(tok: &Tokenizer, text: &str, max_tokens: usize) -> Result<Vec<usize>, CorpusError> {
    assert!(max_tokens >= 2, "max_tokens must leave room for eos and one token");
    let mut ids: Vec<usize> = tok.encode(text)?.into_iter().take(max_tokens - 1).collect();
    ids.push(tok.special_ids().eos);
    Ok(ids)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn fixture() -> Tokenizer {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/vocab");
        Tokenizer::from_dir(&dir).unwrap()
    }

    #[test]
    fn fixture_loads_with_distinct_specials() {
        let tok = fixture();
        let s = tok.special_ids();
        let mut ids = vec![s.bos, s.pad, s.eos, s.mask, s.url];
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 5);
        assert!(ids.iter().all(|&i| i < tok.vocab_size()));
    }

    #[test]
    fn utterance_truncation() {
        let tok = fixture();
        let bos = tok.special_ids().bos;
        assert_eq!(tokenize_utterance(&tok, "", 200).unwrap(), vec![bos]);
        let long = "zq ".repeat(400);
        assert!(tok.encode(&long).unwrap().len() >= 300);
        let ids = tokenize_utterance(&tok, &long, 200).unwrap();
        assert_eq!(ids.len(), 200);
        assert_eq!(ids[0], bos);
    }

    #[test]
    fn known_word_is_one_token() {
        let tok = fixture();
        let hello = tok.token_to_id("hello").expect("fixture has `hello`");
        assert_eq!(tokenize_utterance(&tok, "hello", 200).unwrap(), vec![tok.special_ids().bos, hello]);
        let space_the = tok.token_to_id("Ġthe").expect("fixture has `Ġthe`");
        assert_eq!(tok.encode(" the").unwrap(), vec![space_the]);
    }

    #[test]
    fn specials_are_split_out() {
        let tok = fixture();
        let s = tok.special_ids();
        let ids = tok.encode("see [URL] and [MASK]").unwrap();
        assert!(ids.contains(&s.url) && ids.contains(&s.mask));
        assert_eq!(tok.decode(&ids).unwrap(), "see [URL] and [MASK]");
    }

    #[test]
    fn summary_ends_with_eos() {
        let tok = fixture();
        let ids = tokenize_summary(&tok, "hello world", 4).unwrap();
        assert!(ids.len() <= 4);
        assert_eq!(*ids.last().unwrap(), tok.special_ids().eos);
        assert_eq!(tok.decode_generated(&ids).unwrap(), tok.decode(&ids[..ids.len() - 1]).unwrap());
    }

    #[test]
    fn bad_merges_rejected() {
        assert!(parse_merges("#version: 0.2\na b\n").is_ok());
        assert!(parse_merges("a b c\n").is_err());
    }

    proptest! {
        #[test]
        fn round_trip(s in any::<String>()) {
            let tok = fixture();
            let ids = tok.encode(&s).unwrap();
            prop_assert_eq!(tok.decode(&ids).unwrap(), s);
        }
    }
}
