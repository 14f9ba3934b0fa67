//! Word tokenization shared by keyword matching and the hash embedder.
//!
//! A word is a maximal run of alphanumeric characters; everything else is a
//! boundary. Words are case-folded with full Unicode lowercasing.

/// Iterates the case-folded words of `text`.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(fold)
}

/// Case-folds a single word.
pub fn fold(word: &str) -> String {
    if word.bytes().all(|b| b.is_ascii() && !b.is_ascii_uppercase()) {
        word.to_owned()
    } else {
        word.to_lowercase()
    }
}

/// Number of maximal non-whitespace runs.
pub fn whitespace_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Returns at most `max_chars` leading characters of `text`, and whether it was cut.
pub fn truncate_chars(text: &str, max_chars: usize) -> (&str, bool) {
    match text.char_indices().nth(max_chars) {
        Some((byte, _)) => (&text[..byte], true),
        None => (text, false),
    }
}

/// 64-bit FNV-1a. Stable across platforms and releases, unlike `DefaultHasher`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn words_split_on_non_alphanumeric() {
        let got: Vec<_> = words("Run-of-mine ore, 3rd CRUSHER!").collect();
        assert_eq!(got, ["run", "of", "mine", "ore", "3rd", "crusher"]);
    }

    #[test]
    fn unicode_words_fold() {
        let got: Vec<_> = words("ÖRDEĞİ straße").collect();
        assert_eq!(got[1], "straße");
        assert_eq!(got.len(), 2);
    }

    #[test]
    fn truncation_respects_char_boundaries() {
        assert_eq!(truncate_chars("ördeği", 3), ("örd", true));
        assert_eq!(truncate_chars("abc", 3), ("abc", false));
        assert_eq!(truncate_chars("", 0), ("", false));
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
    }
}
