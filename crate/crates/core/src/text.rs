//! Text normalisation shared by the miner and the classifier.
//!
//! Normalisation lowercases, collapses whitespace runs to one space and trims
//! the ends. Punctuation stays attached to words (`"wait,"` is a word), so the
//! normalised surface of a gram is exactly what the lexicon stores.

/// Identifies the normalisation rules; stored in SG set files so a set mined
/// under different rules is refused at match time.
pub const NORMALIZATION_VERSION: &str = "lower-ws-v1";

pub fn normalize(s: &str) -> String {
    NormalizedText::new(s).text
}

/// Normalised words of `s`.
pub fn words(s: &str) -> Vec<String> {
    normalize(s).split(' ').filter(|w| !w.is_empty()).map(str::to_owned).collect()
}

/// Normalised text together with a map back to the original characters.
#[derive(Debug, Clone)]
pub struct NormalizedText {
    pub text: String,
    /// Characters of `text`, for index-based scanning.
    pub chars: Vec<char>,
    /// `origin[i]` is the index of the original character that produced
    /// normalised character `i`.
    origin: Vec<usize>,
}

impl NormalizedText {
    pub fn new(original: &str) -> Self {
        let mut chars = Vec::with_capacity(original.len());
        let mut origin = Vec::with_capacity(original.len());
        let mut pending_space: Option<usize> = None;
        for (idx, c) in original.chars().enumerate() {
            if c.is_whitespace() {
                if !chars.is_empty() && pending_space.is_none() {
                    pending_space = Some(idx);
                }
                continue;
            }
            if let Some(sp) = pending_space.take() {
                chars.push(' ');
                origin.push(sp);
            }
            for lc in c.to_lowercase() {
                chars.push(lc);
                origin.push(idx);
            }
        }
        NormalizedText {
            text: chars.iter().collect(),
            chars,
            origin,
        }
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    /// Maps a half-open normalised character span to the original text.
    pub fn original_span(&self, start: usize, end: usize) -> (usize, usize) {
        debug_assert!(start < end && end <= self.chars.len());
        (self.origin[start], self.origin[end - 1] + 1)
    }

    fn is_word_at(&self, i: usize) -> bool {
        let c = self.chars[i];
        if c.is_alphanumeric() {
            return true;
        }
        // An apostrophe inside a word ("let's") does not split it.
        (c == '\'' || c == '\u{2019}')
            && i > 0
            && i + 1 < self.chars.len()
            && self.chars[i - 1].is_alphanumeric()
            && self.chars[i + 1].is_alphanumeric()
    }

    /// True when position `i` (between characters `i - 1` and `i`) does not
    /// split a word.
    pub fn is_boundary(&self, i: usize) -> bool {
        if i == 0 || i >= self.chars.len() {
            return true;
        }
        !(self.is_word_at(i - 1) && self.is_word_at(i))
    }

    /// Character spans of the space-separated words.
    pub fn word_spans(&self) -> Vec<(usize, usize)> {
        let mut spans = Vec::new();
        let mut start = None;
        for (i, &c) in self.chars.iter().enumerate() {
            match (c == ' ', start) {
                (false, None) => start = Some(i),
                (true, Some(s)) => {
                    spans.push((s, i));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            spans.push((s, self.chars.len()));
        }
        spans
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lowercases_and_collapses() {
        assert_eq!(normalize("  Wait,\n\tLet  ME verify "), "wait, let me verify");
        assert_eq!(words("So we  add"), vec!["so", "we", "add"]);
    }

    #[test]
    fn maps_spans_back() {
        let n = NormalizedText::new("  Let   me verify");
        assert_eq!(n.text, "let me verify");
        // "me" is normalised chars 4..6, original chars 8..10
        assert_eq!(n.original_span(4, 6), (8, 10));
    }

    #[test]
    fn boundaries_respect_apostrophes() {
        let n = NormalizedText::new("let's go, also");
        assert!(!n.is_boundary(3)); // let|'s
        assert!(n.is_boundary(8)); // go|,
        assert!(!n.is_boundary(12)); // al|so
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(s in "\\PC{0,40}") {
            let once = normalize(&s);
            prop_assert_eq!(normalize(&once), once.clone());
        }
    }
}
