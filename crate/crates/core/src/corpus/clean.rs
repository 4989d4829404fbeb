//! Text normalisation for comment bodies and titles.

/// Surface form substituted for every URL.
pub const URL_TOKEN: &str = "[URL]";
/// Surface form written in place of the lead comment.
pub const MASK_TOKEN: &str = "[MASK]";

const MARKUP: [char; 4] = ['*', '~', '[', ']'];
const URL_PREFIXES: [&str; 3] = ["http://", "https://", "www."];

/// Replaces URLs with [`URL_TOKEN`], strips the markup characters
/// `* ~ [ ]` and collapses whitespace runs to single spaces.
///
/// A URL is any run starting with `http://`, `https://` or `www.` (ASCII
/// case-insensitive) up to the next whitespace. Existing `[URL]` tokens are
/// preserved, which makes the function idempotent.
pub fn clean_text(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    for word in raw.split_whitespace() {
        let cleaned = clean_word(word);
        if cleaned.is_empty() {
            continue;
        }
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&cleaned);
    }
    out
}

fn strip_markup(s: &str, out: &mut String) {
    out.extend(s.chars().filter(|c| !MARKUP.contains(c)));
}

fn clean_word(word: &str) -> String {
    let mut stripped = String::with_capacity(word.len());
    let mut rest = word;
    while let Some(pos) = rest.find(URL_TOKEN) {
        strip_markup(&rest[..pos], &mut stripped);
        stripped.push_str(URL_TOKEN);
        rest = &rest[pos + URL_TOKEN.len()..];
    }
    strip_markup(rest, &mut stripped);

    if let Some(pos) = find_url(&stripped) {
        stripped.truncate(pos);
        stripped.push_str(URL_TOKEN);
    }
    stripped
}

fn find_url(s: &str) -> Option<usize> {
    let lower = s.to_ascii_lowercase();
    URL_PREFIXES.iter().filter_map(|p| lower.find(p)).min()
}
