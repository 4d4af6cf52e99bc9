//! Short-form/long-form abbreviation detection for `long form (SF)`
//! patterns, aligning the short form's characters right to left against
//! the words preceding the parenthesis.

use std::collections::BTreeMap;

use crate::corpus::Document;

const MAX_SHORT_FORM_CHARS: usize = 10;
const CLAUSE_BREAKS: [char; 8] = ['.', '!', '?', ';', ':', '(', ')', '\n'];

fn valid_short_form(sf: &str) -> bool {
    let n = sf.chars().count();
    (2..=MAX_SHORT_FORM_CHARS).contains(&n)
        && sf.split_whitespace().count() <= 2
        && sf.chars().next().is_some_and(char::is_alphanumeric)
        && sf.chars().any(char::is_alphabetic)
}

/// Aligns `sf` against the tail of `candidate` and returns the shortest
/// suffix of whole words that covers every alphanumeric short-form
/// character, the first one at a word start.
fn best_long_form(sf: &str, candidate: &str) -> Option<String> {
    let sf: Vec<char> = sf.chars().collect();
    let lf: Vec<char> = candidate.chars().collect();
    let lower = |c: char| c.to_lowercase().next().unwrap_or(c);
    let mut s = sf.len() as isize - 1;
    let mut l = lf.len() as isize - 1;
    while s >= 0 {
        let c = lower(sf[s as usize]);
        if !c.is_alphanumeric() {
            s -= 1;
            continue;
        }
        while l >= 0 && (lower(lf[l as usize]) != c || (s == 0 && l > 0 && lf[l as usize - 1].is_alphanumeric())) {
            l -= 1;
        }
        if l < 0 {
            return None;
        }
        l -= 1;
        s -= 1;
    }
    let first = (l + 1) as usize;
    let start = lf[..=first]
        .iter()
        .rposition(|c| c.is_whitespace())
        .map_or(0, |p| p + 1);
    let long_form: String = lf[start..].iter().collect();
    Some(long_form.trim().to_string())
}

/// Finds `long form (SF)` definitions in `text`. The first definition of a
/// short form wins.
pub fn find_abbreviations(text: &str) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut rest = text;
    let mut consumed = 0;
    while let Some(open) = rest.find('(') {
        let after = &rest[open + 1..];
        let Some(close) = after.find(')') else { break };
        let inner = &after[..close];
        let before = &text[..consumed + open];
        consumed += open + 1;
        rest = after;
        if inner.contains('(') {
            continue;
        }
        let sf = inner.split([',', ';']).next().unwrap_or("").trim();
        if !valid_short_form(sf) || out.contains_key(sf) {
            continue;
        }
        let clause = before.rsplit(CLAUSE_BREAKS).next().unwrap_or("");
        let sf_len = sf.chars().count();
        let max_words = (sf_len + 5).min(sf_len * 2);
        let words: Vec<&str> = clause.split_whitespace().collect();
        if words.is_empty() {
            continue;
        }
        let window = words[words.len().saturating_sub(max_words)..].join(" ");
        if let Some(lf) = best_long_form(sf, &window) {
            if lf.chars().count() > sf_len && !lf.split_whitespace().any(|w| w == sf) {
                out.insert(sf.to_string(), lf);
            }
        }
    }
    out
}

/// Abbreviation map of a document's text.
pub fn resolve_abbreviations(doc: &Document) -> BTreeMap<String, String> {
    find_abbreviations(&doc.text)
}

/// Returns the long form when `mention` is a detected short form.
pub fn expand<'a>(mention: &'a str, abbreviations: &'a BTreeMap<String, String>) -> &'a str {
    abbreviations.get(mention.trim()).map_or(mention, String::as_str)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initials_alignment() {
        let map = find_abbreviations("drospirenone raises venous thromboembolic events (VTE) risk");
        // the alignment stops at the word holding the first short-form letter
        assert_eq!(map.get("VTE").map(String::as_str), Some("venous thromboembolic events"));
        assert_eq!(map.len(), 1);
    }

    #[test]
    fn direct_pattern() {
        let map = find_abbreviations("venous thromboembolic events (VTE)");
        assert_eq!(map["VTE"], "venous thromboembolic events");
    }

    #[test]
    fn world_health_organization() {
        // W must start a word, so "the" is excluded from the long form
        let map = find_abbreviations("the World Health Organization (WHO) said");
        assert_eq!(map["WHO"], "World Health Organization");
    }

    #[test]
    fn no_parentheses_no_mapping() {
        assert!(find_abbreviations("masks cause plague").is_empty());
    }

    #[test]
    fn rejects_unalignable_and_invalid_forms() {
        assert!(find_abbreviations("a random thing (XYZ)").is_empty());
        assert!(find_abbreviations("see the note (1)").is_empty());
        assert!(find_abbreviations("a long note (this is a full sentence)").is_empty());
        assert!(find_abbreviations("unbalanced (ABC").is_empty());
    }

    #[test]
    fn prefix_letters_align_inside_words() {
        let map = find_abbreviations("treated with hydroxychloroquine (HCQ) daily");
        assert_eq!(map["HCQ"], "hydroxychloroquine");
    }

    #[test]
    fn expands_exact_short_forms_only() {
        let map = find_abbreviations("chronic fatigue syndrome (CFS) is real");
        assert_eq!(expand("CFS", &map), "chronic fatigue syndrome");
        assert_eq!(expand("cfs", &map), "cfs");
    }
}
