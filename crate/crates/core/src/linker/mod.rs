//! Concept normalization: mentions are matched against knowledge-base
//! aliases by cosine similarity of TF-IDF weighted character 3-grams.
//!
//! Alias text is case-folded, trimmed, whitespace-collapsed and padded with
//! one `#` on each side before 3-gram extraction. Aliases shorter than
//! three characters get a zero vector and are flagged; their concept stays
//! reachable through its other aliases. The idf of a gram is
//! `ln((1 + N) / (1 + df)) + 1` over the `N` alias rows.
//!
//! Retrieval is an exact scan over an inverted index, so the ranked output
//! equals a brute-force cosine over every alias.

pub mod abbrev;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use abbrev::{expand, find_abbreviations, resolve_abbreviations};

pub const DEFAULT_THRESHOLD: f64 = 0.7;
pub const DEFAULT_TOP_K: usize = 5;
pub const GRAM: usize = 3;
const PAD: char = '#';

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptEntry {
    pub concept_id: String,
    pub canonical_name: String,
    pub aliases: Vec<String>,
}

impl ConceptEntry {
    /// Builds an entry; the canonical name is always indexed as an alias.
    pub fn new<I, S>(concept_id: impl Into<String>, canonical_name: impl Into<String>, aliases: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut entry = Self {
            concept_id: concept_id.into(),
            canonical_name: canonical_name.into(),
            aliases: aliases.into_iter().map(Into::into).collect(),
        };
        entry.include_canonical();
        entry
    }

    fn include_canonical(&mut self) {
        if !self.aliases.contains(&self.canonical_name) {
            self.aliases.insert(0, self.canonical_name.clone());
        }
    }
}

/// Reads a line-delimited KB of `{concept_id, canonical_name, aliases}`.
pub fn load_kb(path: impl AsRef<Path>) -> Result<Vec<ConceptEntry>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kb = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut entry: ConceptEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.into(),
            line: i + 1,
            message: e.to_string(),
        })?;
        entry.include_canonical();
        kb.push(entry);
    }
    Ok(kb)
}

/// Case-folded, trimmed, whitespace-collapsed text.
pub fn fold(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// 3-gram counts of the boundary-padded folded text, `None` when the
/// folded text is shorter than three characters.
pub fn char_grams(text: &str) -> Option<BTreeMap<String, usize>> {
    let folded = fold(text);
    if folded.chars().count() < GRAM {
        return None;
    }
    let padded: Vec<char> = std::iter::once(PAD)
        .chain(folded.chars())
        .chain(std::iter::once(PAD))
        .collect();
    let mut grams = BTreeMap::new();
    for w in padded.windows(GRAM) {
        *grams.entry(w.iter().collect::<String>()).or_insert(0) += 1;
    }
    Some(grams)
}

/// Sparse vector as `(dimension, weight)` sorted by dimension.
pub type SparseVector = Vec<(usize, f64)>;

#[derive(Debug, Clone)]
pub struct LinkIndex {
    concepts: Vec<ConceptEntry>,
    vocabulary: HashMap<String, usize>,
    idf: Vec<f64>,
    alias_vectors: Vec<SparseVector>,
    alias_to_concept: Vec<usize>,
    short_aliases: Vec<usize>,
    // dimension -> (alias row, weight)
    postings: Vec<Vec<(usize, f64)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateLink {
    pub concept_id: String,
    pub canonical_name: String,
    pub score: f64,
}

fn normalize(vector: &mut SparseVector) {
    let norm = vector.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    if norm > 0.0 {
        for (_, w) in vector.iter_mut() {
            *w /= norm;
        }
    }
}

impl LinkIndex {
    pub fn build(kb: Vec<ConceptEntry>) -> Result<Self> {
        if kb.is_empty() {
            return Err(Error::EmptyKnowledgeBase);
        }
        let mut seen = HashSet::new();
        for entry in &kb {
            if !seen.insert(entry.concept_id.as_str()) {
                return Err(Error::Config(format!("duplicate concept id {:?}", entry.concept_id)));
            }
        }
        let mut vocabulary: HashMap<String, usize> = HashMap::new();
        let mut df: Vec<usize> = Vec::new();
        let mut raw: Vec<Option<Vec<(usize, usize)>>> = Vec::new();
        let mut alias_to_concept = Vec::new();
        for (ci, entry) in kb.iter().enumerate() {
            for alias in &entry.aliases {
                alias_to_concept.push(ci);
                let Some(grams) = char_grams(alias) else {
                    raw.push(None);
                    continue;
                };
                let mut counts = Vec::with_capacity(grams.len());
                for (gram, tf) in grams {
                    let next = vocabulary.len();
                    let dim = *vocabulary.entry(gram).or_insert(next);
                    if dim == df.len() {
                        df.push(0);
                    }
                    df[dim] += 1;
                    counts.push((dim, tf));
                }
                counts.sort_unstable();
                raw.push(Some(counts));
            }
        }
        let n = raw.len() as f64;
        let idf: Vec<f64> = df.iter().map(|&d| ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0).collect();
        let mut postings = vec![Vec::new(); idf.len()];
        let mut alias_vectors = Vec::with_capacity(raw.len());
        let mut short_aliases = Vec::new();
        for (row, counts) in raw.into_iter().enumerate() {
            let Some(counts) = counts else {
                short_aliases.push(row);
                alias_vectors.push(Vec::new());
                continue;
            };
            let mut v: SparseVector = counts.into_iter().map(|(d, tf)| (d, tf as f64 * idf[d])).collect();
            normalize(&mut v);
            for &(d, w) in &v {
                postings[d].push((row, w));
            }
            alias_vectors.push(v);
        }
        Ok(Self {
            concepts: kb,
            vocabulary,
            idf,
            alias_vectors,
            alias_to_concept,
            short_aliases,
            postings,
        })
    }

    pub fn concepts(&self) -> &[ConceptEntry] {
        &self.concepts
    }

    pub fn alias_count(&self) -> usize {
        self.alias_vectors.len()
    }

    pub fn alias_vector(&self, row: usize) -> &SparseVector {
        &self.alias_vectors[row]
    }

    /// Rows of aliases too short to featurize.
    pub fn short_aliases(&self) -> &[usize] {
        &self.short_aliases
    }

    pub fn idf(&self, gram: &str) -> Option<f64> {
        self.vocabulary.get(gram).map(|&d| self.idf[d])
    }

    pub fn min_idf(&self) -> f64 {
        self.idf.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Unit-norm query vector over the index vocabulary; grams unseen in
    /// the KB are dropped.
    pub fn embed(&self, mention: &str) -> SparseVector {
        let Some(grams) = char_grams(mention) else {
            return Vec::new();
        };
        let mut v: SparseVector = grams
            .into_iter()
            .filter_map(|(g, tf)| self.vocabulary.get(&g).map(|&d| (d, tf as f64 * self.idf[d])))
            .collect();
        v.sort_unstable_by_key(|&(d, _)| d);
        normalize(&mut v);
        v
    }

    /// Top-`k` concepts by best alias cosine, keeping scores `>= threshold`.
    /// Aliases sharing no gram with the mention are never candidates.
    pub fn link(&self, mention: &str, k: usize, threshold: f64) -> Vec<CandidateLink> {
        let query = self.embed(mention);
        if query.is_empty() || k == 0 {
            return Vec::new();
        }
        let mut scores = vec![0.0f64; self.alias_vectors.len()];
        let mut touched = Vec::new();
        for &(d, qw) in &query {
            for &(row, w) in &self.postings[d] {
                if scores[row] == 0.0 {
                    touched.push(row);
                }
                scores[row] += qw * w;
            }
        }
        let mut best: HashMap<usize, f64> = HashMap::new();
        for row in touched {
            let score = scores[row].min(1.0);
            let slot = best.entry(self.alias_to_concept[row]).or_insert(score);
            if score > *slot {
                *slot = score;
            }
        }
        let mut ranked: Vec<(usize, f64)> = best.into_iter().collect();
        ranked.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.concepts[a.0].concept_id.cmp(&self.concepts[b.0].concept_id))
        });
        ranked
            .into_iter()
            .take(k)
            .filter(|&(_, s)| s >= threshold)
            .map(|(ci, score)| CandidateLink {
                concept_id: self.concepts[ci].concept_id.clone(),
                canonical_name: self.concepts[ci].canonical_name.clone(),
                score,
            })
            .collect()
    }

    /// Case-folded canonical name of the top concept, or the mention itself
    /// when nothing links.
    pub fn normalize_mention(&self, mention: &str, threshold: f64) -> String {
        match self.link(mention, 1, threshold).into_iter().next() {
            Some(top) => fold(&top.canonical_name),
            None => mention.to_string(),
        }
    }
}

/// Index plus query settings.
#[derive(Debug, Clone)]
pub struct Linker {
    pub index: LinkIndex,
    pub top_k: usize,
    pub threshold: f64,
}

/// How one mention fared against the KB.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkOutcome {
    pub mention: String,
    /// Text actually queried, after abbreviation expansion.
    pub query: String,
    pub top: Option<CandidateLink>,
}

impl LinkOutcome {
    pub fn is_linked(&self) -> bool {
        self.top.is_some()
    }

    /// Normalized text: folded canonical name, or the original mention.
    pub fn normalized(&self) -> String {
        match &self.top {
            Some(top) => fold(&top.canonical_name),
            None => self.mention.clone(),
        }
    }
}

impl Linker {
    pub fn new(index: LinkIndex) -> Self {
        Self {
            index,
            top_k: DEFAULT_TOP_K,
            threshold: DEFAULT_THRESHOLD,
        }
    }

    pub fn link(&self, mention: &str) -> Vec<CandidateLink> {
        self.index.link(mention, self.top_k, self.threshold)
    }

    /// Links a mention, expanding it first when it is a known short form.
    pub fn resolve(&self, mention: &str, abbreviations: &BTreeMap<String, String>) -> LinkOutcome {
        let query = expand(mention, abbreviations).to_string();
        let top = self.link(&query).into_iter().next();
        LinkOutcome {
            mention: mention.to_string(),
            query,
            top,
        }
    }

    pub fn normalize_mention(&self, mention: &str) -> String {
        self.index.normalize_mention(mention, self.threshold)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub linked_count: usize,
    pub total_count: usize,
    pub fraction: f64,
    /// Set when there was nothing to link.
    pub empty: bool,
}

pub fn linking_coverage(outcomes: &[LinkOutcome]) -> Coverage {
    coverage_from_counts(outcomes.iter().filter(|o| o.is_linked()).count(), outcomes.len())
}

pub fn coverage_from_counts(linked_count: usize, total_count: usize) -> Coverage {
    if total_count == 0 {
        log::warn!("linking coverage requested for zero mentions");
    }
    Coverage {
        linked_count,
        total_count,
        fraction: crate::ner::ratio(linked_count, total_count),
        empty: total_count == 0,
    }
}
