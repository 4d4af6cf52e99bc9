//! Claim candidate generation from entity pairs and relation triples.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{Document, EntitySpan, RelationTriple};
use crate::error::{Error, Result};
use crate::text::CharIndex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    /// Contiguous text from `first.start` to `second.end`.
    Pair {
        first: EntitySpan,
        second: EntitySpan,
    },
    Triple {
        triple: RelationTriple,
    },
    /// The unchanged post.
    FullText,
}

impl Provenance {
    /// Character onset of the candidate within its document.
    pub fn onset(&self) -> usize {
        match self {
            Provenance::Pair { first, .. } => first.start,
            Provenance::Triple { triple } => triple.subject.start.min(triple.object.start),
            Provenance::FullText => 0,
        }
    }

    /// Character span a pair candidate covers in its document.
    pub fn pair_span(&self) -> Option<(usize, usize)> {
        match self {
            Provenance::Pair { first, second } => Some((first.start, second.end.max(first.end))),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimCandidate {
    pub doc_id: String,
    pub text: String,
    pub provenance: Provenance,
    pub normalized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl ClaimCandidate {
    pub fn full_text(doc: &Document) -> Self {
        Self {
            doc_id: doc.id.clone(),
            text: doc.text.clone(),
            provenance: Provenance::FullText,
            normalized: false,
            score: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeqCandidates {
    pub candidates: Vec<ClaimCandidate>,
    /// Pairs dropped because an earlier pair covered the same span.
    pub duplicates: usize,
    /// Fewer than two distinct entities: the document yields no claim.
    pub skipped: bool,
}

/// Builds one candidate per entity pair: the document text from the onset of
/// the earlier entity to the offset of the later one. Entities are sorted by
/// onset first; pairs that produce an already emitted span are dropped.
pub fn condense_seq(doc: &Document, entities: &[EntitySpan]) -> Result<SeqCandidates> {
    let mut sorted: Vec<&EntitySpan> = entities.iter().collect();
    sorted.sort_by(|a, b| (a.start, a.end, &a.label).cmp(&(b.start, b.end, &b.label)));
    sorted.dedup_by(|a, b| a.same_offsets(b));
    if sorted.len() < 2 {
        return Ok(SeqCandidates {
            candidates: Vec::new(),
            duplicates: 0,
            skipped: true,
        });
    }
    let index = CharIndex::new(&doc.text);
    let mut seen = HashSet::new();
    let mut candidates = Vec::new();
    let mut duplicates = 0;
    for (i, first) in sorted.iter().enumerate() {
        for second in &sorted[i + 1..] {
            let span = (first.start, second.end.max(first.end));
            if !seen.insert(span) {
                duplicates += 1;
                continue;
            }
            let text = index.slice(span.0, span.1).ok_or_else(|| Error::InvalidDocument {
                doc_id: doc.id.clone(),
                message: format!("entity span [{}, {}) outside the text", span.0, span.1),
            })?;
            candidates.push(ClaimCandidate {
                doc_id: doc.id.clone(),
                text: text.to_string(),
                provenance: Provenance::Pair {
                    first: (*first).clone(),
                    second: (*second).clone(),
                },
                normalized: false,
                score: None,
            });
        }
    }
    if duplicates > 0 {
        log::debug!("{}: dropped {duplicates} duplicate pair spans", doc.id);
    }
    Ok(SeqCandidates {
        candidates,
        duplicates,
        skipped: false,
    })
}

fn join_triple(subject: &str, relation: &str, object: &str) -> String {
    format!("{subject} {relation} {object}")
}

/// Joins subject, relation and object with single spaces, normalizing the
/// two entity mentions when a normalizer is given.
pub fn condense_triple(
    doc: &Document,
    triple: &RelationTriple,
    normalizer: Option<&dyn Fn(&str) -> String>,
) -> Result<ClaimCandidate> {
    if triple.relation.trim().is_empty() {
        return Err(Error::MissingRelation);
    }
    let owned = |s: &EntitySpan| doc.gold_entities.iter().any(|e| e == s);
    if !owned(&triple.subject) || !owned(&triple.object) {
        return Err(Error::InvalidDocument {
            doc_id: doc.id.clone(),
            message: "relation spans do not belong to the document".into(),
        });
    }
    let (subject, object) = match normalizer {
        Some(f) => (f(&triple.subject.surface), f(&triple.object.surface)),
        None => (triple.subject.surface.clone(), triple.object.surface.clone()),
    };
    Ok(ClaimCandidate {
        doc_id: doc.id.clone(),
        text: join_triple(&subject, &triple.relation, &object),
        provenance: Provenance::Triple { triple: triple.clone() },
        normalized: normalizer.is_some(),
        score: None,
    })
}

/// Replaces the entity mentions of a candidate with normalized forms. The
/// replacement is positional: it uses the entity offsets recorded in the
/// provenance, never a text search. Already normalized candidates are
/// returned unchanged.
pub fn apply_normalization(candidate: &ClaimCandidate, normalizer: &dyn Fn(&str) -> String) -> ClaimCandidate {
    if candidate.normalized {
        return candidate.clone();
    }
    let text = match &candidate.provenance {
        Provenance::Pair { first, second } => {
            let chars: Vec<char> = candidate.text.chars().collect();
            let base = first.start;
            let first_end = first.end - base;
            let mut out = normalizer(&first.surface);
            if second.start >= first.end {
                let gap: String = chars[first_end..second.start - base].iter().collect();
                out.push_str(&gap);
                out.push_str(&normalizer(&second.surface));
            } else if second.end > first.end {
                // overlapping entities: only the earlier one is replaced
                out.extend(&chars[first_end..]);
            }
            out
        }
        Provenance::Triple { triple } => join_triple(
            &normalizer(&triple.subject.surface),
            &triple.relation,
            &normalizer(&triple.object.surface),
        ),
        Provenance::FullText => candidate.text.clone(),
    };
    ClaimCandidate {
        text,
        normalized: true,
        ..candidate.clone()
    }
}
