//! Small text utilities shared by the stubs, the index and the summarizer.

/// Lowercased alphanumeric tokens. Everything that is not alphanumeric is a separator.
pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Budgeting estimate: whitespace words × 4/3, rounded up.
pub fn estimate_tokens(text: &str) -> usize {
    (word_count(text) * 4).div_ceil(3)
}

/// Splits on `.`, `!` or `?` followed by whitespace or end of text.
/// Returned sentences are trimmed and keep their terminal punctuation.
pub fn sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let end = i + c.len_utf8();
            let at_boundary = match chars.peek() {
                None => true,
                Some((_, next)) => next.is_whitespace(),
            };
            if at_boundary {
                let s = text[start..end].trim();
                if !s.is_empty() {
                    out.push(s);
                }
                start = end;
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// The first `n` sentences joined by single spaces, with inner whitespace collapsed.
pub fn first_sentences(text: &str, n: usize) -> String {
    sentences(text)
        .into_iter()
        .take(n)
        .map(collapse_whitespace)
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn truncate_words(text: &str, max_words: usize) -> String {
    text.split_whitespace()
        .take(max_words)
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// 64-bit FNV-1a. Stable across platforms and releases, unlike `std`'s hasher.
pub fn fnv1a64(bytes: &[u8], seed: u64) -> u64 {
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut hash = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(PRIME);
    }
    hash
}
