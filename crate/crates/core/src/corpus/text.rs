/// Keeps the first `max_words` whitespace-delimited words, joined by single
/// spaces.
pub fn truncate_words(text: &str, max_words: usize) -> String {
    text.split_whitespace()
        .take(max_words)
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cuts_at_word_limit() {
        assert_eq!(truncate_words("a b c", 2), "a b");
        assert_eq!(truncate_words("a b", 500), "a b");
        assert_eq!(truncate_words("  a\t\tb\nc ", 3), "a b c");
        assert_eq!(truncate_words("a b", 0), "");
    }

    #[test]
    fn five_hundred_word_mirror() {
        let text: Vec<String> = (0..502).map(|i| format!("w{i}")).collect();
        let cut = truncate_words(&text.join(" "), 500);
        assert_eq!(cut.split(' ').count(), 500);
        assert!(cut.ends_with("w499"));
    }

    #[test]
    fn unicode_whitespace_splits() {
        assert_eq!(truncate_words("a\u{3000}b\u{a0}c", 2), "a b");
    }
}
