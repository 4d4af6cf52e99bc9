//! Character-offset helpers and tokenization.
//!
//! All offsets in this crate count Unicode scalar values, never bytes.

/// Maps character offsets of a string onto byte offsets.
#[derive(Debug, Clone)]
pub struct CharIndex<'a> {
    text: &'a str,
    // byte position of every char boundary, including the final one
    bounds: Vec<usize>,
}

impl<'a> CharIndex<'a> {
    pub fn new(text: &'a str) -> Self {
        let mut bounds: Vec<usize> = text.char_indices().map(|(b, _)| b).collect();
        bounds.push(text.len());
        Self { text, bounds }
    }

    /// Number of characters.
    pub fn len(&self) -> usize {
        self.bounds.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Substring `[start, end)` in characters, `None` when out of range.
    pub fn slice(&self, start: usize, end: usize) -> Option<&'a str> {
        if start > end || end > self.len() {
            return None;
        }
        Some(&self.text[self.bounds[start]..self.bounds[end]])
    }

    /// Character offset of a byte offset, `None` if it is not a boundary.
    pub fn char_of_byte(&self, byte: usize) -> Option<usize> {
        self.bounds.binary_search(&byte).ok()
    }
}

/// Number of characters in `text`.
pub fn char_len(text: &str) -> usize {
    text.chars().count()
}

/// A maximal run of alphanumeric characters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub start: usize,
    pub end: usize,
    /// Case-folded token text.
    pub norm: String,
}

/// Splits `text` into maximal alphanumeric runs with character offsets.
pub fn alnum_tokens(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut current: Option<(usize, String)> = None;
    let mut pos = 0;
    for c in text.chars() {
        if c.is_alphanumeric() {
            match current.as_mut() {
                Some((_, buf)) => buf.extend(c.to_lowercase()),
                None => current = Some((pos, c.to_lowercase().collect())),
            }
        } else if let Some((start, norm)) = current.take() {
            out.push(Token { start, end: pos, norm });
        }
        pos += 1;
    }
    if let Some((start, norm)) = current {
        out.push(Token { start, end: pos, norm });
    }
    out
}

/// Lowercased words: alphanumeric runs that may contain inner apostrophes,
/// so that "doesn't" stays one word.
pub fn words(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut buf = String::new();
    for (i, &c) in chars.iter().enumerate() {
        let inner_apostrophe =
            (c == '\'' || c == '\u{2019}') && !buf.is_empty() && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
        if c.is_alphanumeric() {
            buf.extend(c.to_lowercase());
        } else if inner_apostrophe {
            buf.push('\'');
        } else if !buf.is_empty() {
            out.push(std::mem::take(&mut buf));
        }
    }
    if !buf.is_empty() {
        out.push(buf);
    }
    out
}

/// Function words ignored when counting content tokens.
pub const STOPWORDS: &[&str] = &[
    "a", "about", "all", "also", "am", "an", "and", "any", "are", "as", "at", "be", "been", "but", "by", "can",
    "could", "did", "do", "does", "for", "from", "had", "has", "have", "he", "her", "his", "i", "if", "in", "into",
    "is", "it", "its", "just", "may", "me", "might", "more", "my", "of", "on", "or", "our", "she", "so", "some",
    "than", "that", "the", "their", "them", "then", "there", "these", "they", "this", "those", "to", "too", "very",
    "was", "we", "were", "what", "when", "where", "which", "who", "why", "how", "will", "with", "would", "you", "your",
];

pub fn is_stopword(word: &str) -> bool {
    STOPWORDS.contains(&word)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slices_by_scalar_values() {
        let text = "fièvre → headache";
        let idx = CharIndex::new(text);
        assert_eq!(idx.len(), 17);
        assert_eq!(idx.slice(0, 6), Some("fièvre"));
        assert_eq!(idx.slice(9, 17), Some("headache"));
        assert_eq!(idx.slice(9, 18), None);
        assert_eq!(idx.char_of_byte(3), None);
        assert_eq!(idx.char_of_byte(4), Some(3));
    }

    #[test]
    fn tokens_are_alnum_runs() {
        let toks = alnum_tokens("Blood-clots, COVID-19!");
        let norms: Vec<_> = toks.iter().map(|t| t.norm.as_str()).collect();
        assert_eq!(norms, ["blood", "clots", "covid", "19"]);
        assert_eq!((toks[1].start, toks[1].end), (6, 11));
    }

    #[test]
    fn words_keep_contractions() {
        assert_eq!(
            words("Vaccines don't cause 'autism'."),
            ["vaccines", "don't", "cause", "autism"]
        );
        assert_eq!(words("doesn\u{2019}t"), ["doesn't"]);
    }
}
