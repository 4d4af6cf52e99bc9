//! End-to-end runs: entity recognition, linking, candidate generation,
//! main claim selection and verdict checking, with every stage written to
//! its own JSONL file.
//!
//! A run directory holds one file per stage plus `manifest.json`. Each
//! stage is keyed by a hash over its settings and the content hashes of
//! its inputs; when a re-run finds the same key and an intact output file
//! (checked against the recorded SHA-256), the stage is reused. The first
//! stage that has to be recomputed forces every later stage to recompute
//! too.
//!
//! # Configuration file
//!
//! `key = value` lines; `#` starts a comment. Relative paths are resolved
//! against the directory of the configuration file.
//!
//! ```text
//! corpus = corpus.jsonl            # required
//! output = run                     # required
//! scheme = covert                  # covert | bear:<scheme file>
//! offsets = chars                  # chars | bytes
//! entities = gazetteer:terms.tsv   # gold | gazetteer:<tsv> | annotations:<jsonl>
//! kb = kb.jsonl                    # required when normalize = true
//! threshold = 0.7
//! top_k = 5
//! normalize = false
//! mode = core_claim                # core_claim | random | gold_seq | gold_triple | full_text
//! scorer = builtin                 # builtin | cmd:<command> | http(s)://...
//! verifier = toy                   # toy | cmd:<command> | http(s)://...
//! overlap_floor = 0.4
//! seed = 0
//! metric = micro                   # micro | macro
//! ```
//!
//! `MEDCLAIM_SCORER` and `MEDCLAIM_VERIFIER` override `scorer` and
//! `verifier` (see [`RunConfig::apply_env`]).

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::claimgen::{apply_normalization, condense_seq, condense_triple, ClaimCandidate};
use crate::corpus::{load_documents, BearClasses, CorpusFormat, Document, EntitySpan, LabelScheme, OffsetUnit};
use crate::error::{Error, Result};
use crate::linker::{self, abbrev, linking_coverage, Coverage, LinkIndex, LinkOutcome, Linker};
use crate::ner::{ingest_annotations, Gazetteer};
use crate::select::{
    document_seed, score_candidates, select_main_claim, select_random, ClaimScorer, ScoredCandidate, ScorerHandle,
};
use crate::verdict::{check, evaluate_verdicts, MetricVariant, VerdictRecord, VerdictScore, Verifier, VerifierHandle};

pub const SCORER_ENV: &str = "MEDCLAIM_SCORER";
pub const VERIFIER_ENV: &str = "MEDCLAIM_VERIFIER";
pub const MANIFEST_FILE: &str = "manifest.json";
/// Bumped whenever a stage's output format or semantics change.
pub const STAGE_FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Candidates from recognized entities, main claim by scorer argmax.
    CoreClaim,
    /// Candidates from recognized entities, one uniform draw per document.
    Random,
    /// Candidates from gold entities; the main claim is the pair of the
    /// first gold relation, or the scorer argmax without one.
    GoldSeq,
    /// Subject, relation and object of the first gold relation.
    GoldTriple,
    /// The unchanged post.
    FullText,
}

impl SelectionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SelectionMode::CoreClaim => "core_claim",
            SelectionMode::Random => "random",
            SelectionMode::GoldSeq => "gold_seq",
            SelectionMode::GoldTriple => "gold_triple",
            SelectionMode::FullText => "full_text",
        }
    }

    fn uses_gold_entities(self) -> bool {
        matches!(self, SelectionMode::GoldSeq | SelectionMode::GoldTriple)
    }
}

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "core_claim" => SelectionMode::CoreClaim,
            "random" => SelectionMode::Random,
            "gold_seq" => SelectionMode::GoldSeq,
            "gold_triple" => SelectionMode::GoldTriple,
            "full_text" => SelectionMode::FullText,
            other => return Err(Error::Config(format!("unknown selection mode {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EntitySource {
    Gold,
    Gazetteer(PathBuf),
    Annotations(PathBuf),
}

impl EntitySource {
    fn parse(value: &str, base: &Path) -> Result<Self> {
        if value == "gold" {
            Ok(EntitySource::Gold)
        } else if let Some(p) = value.strip_prefix("gazetteer:") {
            Ok(EntitySource::Gazetteer(base.join(p.trim())))
        } else if let Some(p) = value.strip_prefix("annotations:") {
            Ok(EntitySource::Annotations(base.join(p.trim())))
        } else {
            Err(Error::Config(format!(
                "entities must be `gold`, `gazetteer:<file>` or `annotations:<file>`, got {value:?}"
            )))
        }
    }
}

impl fmt::Display for EntitySource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EntitySource::Gold => f.write_str("gold"),
            EntitySource::Gazetteer(p) => write!(f, "gazetteer:{}", p.display()),
            EntitySource::Annotations(p) => write!(f, "annotations:{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SchemeSource {
    Covert,
    Bear(PathBuf),
}

impl fmt::Display for SchemeSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchemeSource::Covert => f.write_str("covert"),
            SchemeSource::Bear(p) => write!(f, "bear:{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub output: PathBuf,
    pub scheme: SchemeSource,
    pub offsets: OffsetUnit,
    pub entities: EntitySource,
    pub kb: Option<PathBuf>,
    pub threshold: f64,
    pub top_k: usize,
    pub normalize: bool,
    pub mode: SelectionMode,
    pub scorer: ScorerHandle,
    pub verifier: VerifierHandle,
    pub overlap_floor: f64,
    pub seed: u64,
    pub metric: MetricVariant,
}

impl RunConfig {
    pub fn new(corpus: impl Into<PathBuf>, output: impl Into<PathBuf>) -> Self {
        Self {
            corpus: corpus.into(),
            output: output.into(),
            scheme: SchemeSource::Covert,
            offsets: OffsetUnit::Chars,
            entities: EntitySource::Gold,
            kb: None,
            threshold: linker::DEFAULT_THRESHOLD,
            top_k: linker::DEFAULT_TOP_K,
            normalize: false,
            mode: SelectionMode::CoreClaim,
            scorer: ScorerHandle::BuiltinLexical,
            verifier: VerifierHandle::Toy,
            overlap_floor: crate::verdict::DEFAULT_OVERLAP_FLOOR,
            seed: 0,
            metric: MetricVariant::Micro,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Parses the key/value format; relative paths are joined to `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut values: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let k = k.trim().to_string();
            if values.insert(k.clone(), (i + 1, v.trim().to_string())).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", i + 1)));
            }
        }
        let take = |values: &mut BTreeMap<String, (usize, String)>, k: &str| values.remove(k).map(|(_, v)| v);
        let corpus = take(&mut values, "corpus").ok_or_else(|| Error::Config("missing `corpus`".into()))?;
        let output = take(&mut values, "output").ok_or_else(|| Error::Config("missing `output`".into()))?;
        let mut cfg = RunConfig::new(base.join(corpus), base.join(output));
        let bad = |k: &str, v: &str| Error::Config(format!("invalid value {v:?} for `{k}`"));
        if let Some(v) = take(&mut values, "scheme") {
            cfg.scheme = match v.strip_prefix("bear:") {
                Some(p) => SchemeSource::Bear(base.join(p.trim())),
                None if v == "covert" => SchemeSource::Covert,
                None => return Err(bad("scheme", &v)),
            };
        }
        if let Some(v) = take(&mut values, "offsets") {
            cfg.offsets = match v.as_str() {
                "chars" => OffsetUnit::Chars,
                "bytes" => OffsetUnit::Bytes,
                _ => return Err(bad("offsets", &v)),
            };
        }
        if let Some(v) = take(&mut values, "entities") {
            cfg.entities = EntitySource::parse(&v, base)?;
        }
        if let Some(v) = take(&mut values, "kb") {
            cfg.kb = Some(base.join(v));
        }
        if let Some(v) = take(&mut values, "threshold") {
            cfg.threshold = v.parse().map_err(|_| bad("threshold", &v))?;
        }
        if let Some(v) = take(&mut values, "top_k") {
            cfg.top_k = v.parse().map_err(|_| bad("top_k", &v))?;
        }
        if let Some(v) = take(&mut values, "normalize") {
            cfg.normalize = v.parse().map_err(|_| bad("normalize", &v))?;
        }
        if let Some(v) = take(&mut values, "mode") {
            cfg.mode = v.parse()?;
        }
        if let Some(v) = take(&mut values, "scorer") {
            cfg.scorer = v.parse()?;
        }
        if let Some(v) = take(&mut values, "verifier") {
            cfg.verifier = v.parse()?;
        }
        if let Some(v) = take(&mut values, "overlap_floor") {
            cfg.overlap_floor = v.parse().map_err(|_| bad("overlap_floor", &v))?;
        }
        if let Some(v) = take(&mut values, "seed") {
            cfg.seed = v.parse().map_err(|_| bad("seed", &v))?;
        }
        if let Some(v) = take(&mut values, "metric") {
            cfg.metric = v.parse()?;
        }
        if let Some((k, (line, _))) = values.into_iter().next() {
            return Err(Error::Config(format!("line {line}: unknown key {k:?}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Replaces scorer and verifier with the endpoints named in
    /// `MEDCLAIM_SCORER` / `MEDCLAIM_VERIFIER` when those are set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SCORER_ENV) {
            self.scorer = v.parse()?;
        }
        if let Ok(v) = std::env::var(VERIFIER_ENV) {
            self.verifier = v.parse()?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.normalize && self.mode == SelectionMode::FullText {
            return Err(Error::Config(
                "normalize needs pair or triple candidates; it cannot be combined with mode full_text".into(),
            ));
        }
        if self.normalize && self.kb.is_none() {
            return Err(Error::Config("normalize = true requires `kb`".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.overlap_floor) {
            return Err(Error::Config(format!(
                "overlap_floor {} outside [0, 1]",
                self.overlap_floor
            )));
        }
        Ok(())
    }

    /// Entity source actually used: gold for the gold-entity modes.
    pub fn effective_entities(&self) -> EntitySource {
        if self.mode.uses_gold_entities() {
            EntitySource::Gold
        } else {
            self.entities.clone()
        }
    }

    pub fn label_scheme(&self) -> Result<LabelScheme> {
        Ok(match &self.scheme {
            SchemeSource::Covert => LabelScheme::Covert,
            SchemeSource::Bear(p) => LabelScheme::Bear(BearClasses::load(p)?),
        })
    }

    /// Settings as recorded in the manifest.
    pub fn describe(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("corpus", self.corpus.display().to_string());
        put("output", self.output.display().to_string());
        put("scheme", self.scheme.to_string());
        put("offsets", format!("{:?}", self.offsets).to_lowercase());
        put("entities", self.entities.to_string());
        put("kb", self.kb.as_ref().map_or("-".into(), |p| p.display().to_string()));
        put("threshold", self.threshold.to_string());
        put("top_k", self.top_k.to_string());
        put("normalize", self.normalize.to_string());
        put("mode", self.mode.to_string());
        put("scorer", self.scorer.to_string());
        put("verifier", self.verifier.to_string());
        put("overlap_floor", self.overlap_floor.to_string());
        put("seed", self.seed.to_string());
        put("metric", format!("{:?}", self.metric).to_lowercase());
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocEntities {
    pub doc_id: String,
    pub entities: Vec<EntitySpan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocLinks {
    pub doc_id: String,
    pub abbreviations: BTreeMap<String, String>,
    /// One outcome per distinct entity surface, in order of appearance.
    pub mentions: Vec<LinkOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocCandidates {
    pub doc_id: String,
    pub candidates: Vec<ClaimCandidate>,
    pub duplicates: usize,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocScores {
    pub doc_id: String,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub verdict: Option<VerdictScore>,
    pub coverage: Option<Coverage>,
}

/// Ids named by an error, for stage failure reports.
fn offending_ids(e: &Error) -> Vec<String> {
    match e {
        Error::InvalidDocument { doc_id, .. } => vec![doc_id.clone()],
        Error::UnknownDocument(id) => vec![id.clone()],
        Error::Protocol { batch, .. } => vec![batch.clone()],
        Error::Stage { ids, .. } => ids.clone(),
        _ => Vec::new(),
    }
}

/// Collects per-document results in order, or one error naming every
/// failing document.
fn gather<T>(stage: &'static str, results: Vec<Result<T>>) -> Result<Vec<T>> {
    let mut ok = Vec::with_capacity(results.len());
    let mut ids = Vec::new();
    let mut first = None;
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                ids.extend(offending_ids(&e));
                first.get_or_insert(e);
            }
        }
    }
    match first {
        None => Ok(ok),
        Some(e) => Err(Error::Stage {
            stage,
            ids,
            source: Box::new(e),
        }),
    }
}

fn stage_error(stage: &'static str, e: Error) -> Error {
    match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage,
            ids: offending_ids(&e),
            source: Box::new(e),
        },
    }
}

/// Entities per document, in corpus order.
pub fn recognize_entities(docs: &[Document], source: &EntitySource, labels: &LabelScheme) -> Result<Vec<DocEntities>> {
    let wrap = |doc: &Document, entities: Vec<EntitySpan>| DocEntities {
        doc_id: doc.id.clone(),
        entities,
    };
    Ok(match source {
        EntitySource::Gold => docs.iter().map(|d| wrap(d, d.gold_entities.clone())).collect(),
        EntitySource::Gazetteer(path) => {
            let gazetteer = Gazetteer::load(path, labels)?;
            docs.par_iter().map(|d| wrap(d, gazetteer.recognize(d))).collect()
        }
        EntitySource::Annotations(path) => {
            let mut spans = ingest_annotations(path, docs, labels)?;
            docs.iter()
                .map(|d| wrap(d, spans.remove(&d.id).unwrap_or_default()))
                .collect()
        }
    })
}

/// Links every distinct entity surface of every document.
pub fn link_entities(docs: &[Document], entities: &[DocEntities], linker: &Linker) -> Vec<DocLinks> {
    docs.par_iter()
        .zip(entities.par_iter())
        .map(|(doc, ents)| {
            let abbreviations = abbrev::resolve_abbreviations(doc);
            let mut seen = std::collections::HashSet::new();
            let mentions = ents
                .entities
                .iter()
                .filter(|e| seen.insert(e.surface.as_str()))
                .map(|e| linker.resolve(&e.surface, &abbreviations))
                .collect();
            DocLinks {
                doc_id: doc.id.clone(),
                abbreviations,
                mentions,
            }
        })
        .collect()
}

fn normalizer_for(links: &DocLinks) -> impl Fn(&str) -> String + '_ {
    let map: HashMap<&str, &LinkOutcome> = links.mentions.iter().map(|o| (o.mention.as_str(), o)).collect();
    move |surface: &str| map.get(surface).map_or_else(|| surface.to_string(), |o| o.normalized())
}

/// Claim candidates per document for `mode`; `links` turns on
/// normalization.
pub fn generate_candidates(
    docs: &[Document],
    entities: &[DocEntities],
    links: Option<&[DocLinks]>,
    mode: SelectionMode,
) -> Result<Vec<DocCandidates>> {
    let results: Vec<Result<DocCandidates>> = docs
        .par_iter()
        .enumerate()
        .map(|(i, doc)| {
            let doc_links = links.map(|l| &l[i]);
            let normalizer = doc_links.map(normalizer_for);
            let normalizer_ref = normalizer.as_ref().map(|f| f as &dyn Fn(&str) -> String);
            let (candidates, duplicates) = match mode {
                SelectionMode::FullText => (vec![ClaimCandidate::full_text(doc)], 0),
                SelectionMode::GoldTriple => match doc.gold_relations.first() {
                    Some(t) => (vec![condense_triple(doc, t, normalizer_ref)?], 0),
                    None => (Vec::new(), 0),
                },
                _ => {
                    let seq = condense_seq(doc, &entities[i].entities)?;
                    let cands = match normalizer_ref {
                        Some(f) => seq.candidates.iter().map(|c| apply_normalization(c, f)).collect(),
                        None => seq.candidates,
                    };
                    (cands, seq.duplicates)
                }
            };
            Ok(DocCandidates {
                doc_id: doc.id.clone(),
                skipped: candidates.is_empty(),
                candidates,
                duplicates,
            })
        })
        .collect();
    gather("candidates", results)
}

/// Pair candidate matching the document's first gold relation.
fn gold_relation_candidate<'a>(doc: &Document, cands: &'a DocCandidates) -> Option<&'a ClaimCandidate> {
    let t = doc.gold_relations.first()?;
    let span = (t.subject.start.min(t.object.start), t.subject.end.max(t.object.end));
    cands.candidates.iter().find(|c| c.provenance.pair_span() == Some(span))
}

fn needs_scores(mode: SelectionMode, doc: &Document, cands: &DocCandidates) -> bool {
    !cands.skipped
        && match mode {
            SelectionMode::CoreClaim => true,
            SelectionMode::GoldSeq => gold_relation_candidate(doc, cands).is_none(),
            _ => false,
        }
}

/// Claim probabilities for the documents whose selection needs them.
pub fn score_documents(
    docs: &[Document],
    candidates: &[DocCandidates],
    mode: SelectionMode,
    scorer: &mut dyn ClaimScorer,
) -> Result<Vec<DocScores>> {
    let pending: Vec<&DocCandidates> = docs
        .iter()
        .zip(candidates)
        .filter(|(d, c)| needs_scores(mode, d, c))
        .map(|(_, c)| c)
        .collect();
    if pending.is_empty() {
        return Ok(Vec::new());
    }
    let flat: Vec<ClaimCandidate> = pending.iter().flat_map(|c| c.candidates.iter().cloned()).collect();
    let scored = score_candidates(&flat, scorer)?;
    let mut scored = scored.into_iter();
    Ok(pending
        .iter()
        .map(|c| DocScores {
            doc_id: c.doc_id.clone(),
            scores: scored
                .by_ref()
                .take(c.candidates.len())
                .map(|s| s.claim_probability)
                .collect(),
        })
        .collect())
}

/// One main claim per document that has candidates.
pub fn select_claims(
    docs: &[Document],
    candidates: &[DocCandidates],
    scores: &[DocScores],
    mode: SelectionMode,
    seed: u64,
) -> Result<Vec<ClaimCandidate>> {
    let by_doc: HashMap<&str, &DocScores> = scores.iter().map(|s| (s.doc_id.as_str(), s)).collect();
    let argmax = |cands: &DocCandidates| -> Result<ClaimCandidate> {
        let s = by_doc
            .get(cands.doc_id.as_str())
            .ok_or_else(|| Error::InvalidDocument {
                doc_id: cands.doc_id.clone(),
                message: "no scores for this document".into(),
            })?;
        if s.scores.len() != cands.candidates.len() {
            return Err(Error::InvalidDocument {
                doc_id: cands.doc_id.clone(),
                message: "score count does not match the candidates".into(),
            });
        }
        let scored: Vec<ScoredCandidate> = cands
            .candidates
            .iter()
            .zip(&s.scores)
            .map(|(c, &p)| ScoredCandidate {
                candidate: ClaimCandidate {
                    score: Some(p),
                    ..c.clone()
                },
                claim_probability: p,
            })
            .collect();
        select_main_claim(&scored)
    };
    let results: Vec<Result<ClaimCandidate>> = docs
        .iter()
        .zip(candidates)
        .filter(|(_, c)| !c.skipped)
        .map(|(doc, cands)| match mode {
            SelectionMode::CoreClaim => argmax(cands),
            SelectionMode::Random => select_random(&cands.candidates, document_seed(seed, &doc.id)),
            SelectionMode::GoldSeq => match gold_relation_candidate(doc, cands) {
                Some(c) => Ok(c.clone()),
                None => argmax(cands),
            },
            SelectionMode::GoldTriple | SelectionMode::FullText => Ok(cands.candidates[0].clone()),
        })
        .collect();
    gather("claims", results)
}

/// Verdicts for every claim whose document carries a gold verdict.
pub fn check_claims(
    docs: &[Document],
    claims: &[ClaimCandidate],
    verifier: &mut dyn Verifier,
) -> Result<Vec<VerdictRecord>> {
    let by_id: HashMap<&str, &Document> = docs.iter().map(|d| (d.id.as_str(), d)).collect();
    let mut out = Vec::new();
    for claim in claims {
        let doc = by_id
            .get(claim.doc_id.as_str())
            .ok_or_else(|| Error::UnknownDocument(claim.doc_id.clone()))?;
        let Some(gold) = doc.gold_verdict else { continue };
        let predicted = check(&doc.id, &claim.text, &doc.evidence, verifier)?;
        out.push(VerdictRecord {
            doc_id: doc.id.clone(),
            claim_text: claim.text.clone(),
            evidence_text: doc.evidence.clone(),
            predicted,
            gold,
        });
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("stage records serialize");
        out.push(b'\n');
    }
    out
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    write_atomic(path.as_ref(), &to_jsonl(items))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub file: String,
    pub sha256: String,
    pub key: String,
    pub records: usize,
    pub cache_hit: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounts {
    pub documents_in: usize,
    pub skipped_documents: usize,
    pub candidates: usize,
    pub duplicate_pairs: usize,
    pub claims_emitted: usize,
    pub verdicts: usize,
    /// Claims not checked because their document has no gold verdict.
    pub unlabeled: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub stage_format: u32,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub stages: Vec<StageRecord>,
    pub counts: RunCounts,
    pub metrics: RunMetrics,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn all_cache_hits(&self) -> bool {
        self.stages.iter().all(|s| s.cache_hit)
    }
}

struct StageRunner {
    dir: PathBuf,
    previous: HashMap<String, StageRecord>,
    records: Vec<StageRecord>,
    invalidated: bool,
}

impl StageRunner {
    fn new(dir: &Path) -> Self {
        let previous = Manifest::load(dir.join(MANIFEST_FILE))
            .map(|m| m.stages.into_iter().map(|s| (s.name.clone(), s)).collect())
            .unwrap_or_default();
        Self {
            dir: dir.to_path_buf(),
            previous,
            records: Vec::new(),
            invalidated: false,
        }
    }

    fn cached<T: DeserializeOwned>(&self, name: &str, key: &str, path: &Path) -> Option<(Vec<T>, String)> {
        let prev = self.previous.get(name)?;
        if self.invalidated || prev.key != key {
            return None;
        }
        let bytes = fs::read(path).ok()?;
        let hash = sha256_hex(&bytes);
        if hash != prev.sha256 {
            log::info!("stage {name}: output file changed on disk, recomputing");
            return None;
        }
        let items = read_jsonl(path).ok()?;
        Some((items, hash))
    }

    /// Returns the stage output and its content hash.
    fn run<T, F>(&mut self, name: &'static str, settings: &[(&str, String)], compute: F) -> Result<(Vec<T>, String)>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce() -> Result<Vec<T>>,
    {
        let mut hasher = Sha256::new();
        hasher.update(format!("{name}\n{}\n{STAGE_FORMAT}\n", env!("CARGO_PKG_VERSION")));
        for (k, v) in settings {
            hasher.update(format!("{k}={v}\n"));
        }
        let key = hex::encode(hasher.finalize());
        let file = format!("{name}.jsonl");
        let path = self.dir.join(&file);
        let (items, hash, cache_hit) = match self.cached(name, &key, &path) {
            Some((items, hash)) => {
                log::info!("stage {name}: cache hit");
                (items, hash, true)
            }
            None => {
                self.invalidated = true;
                let items = compute().map_err(|e| stage_error(name, e))?;
                let bytes = to_jsonl(&items);
                write_atomic(&path, &bytes)?;
                log::info!("stage {name}: wrote {} records", items.len());
                (items, sha256_hex(&bytes), false)
            }
        };
        self.records.push(StageRecord {
            name: name.to_string(),
            file,
            sha256: hash.clone(),
            key,
            records: items.len(),
            cache_hit,
        });
        Ok((items, hash))
    }
}

/// Components injected in place of the configured scorer or verifier. A
/// stage using an injected component is keyed as `injected`, not by its
/// configured endpoint.
#[derive(Default)]
pub struct Components<'a> {
    pub scorer: Option<&'a mut dyn ClaimScorer>,
    pub verifier: Option<&'a mut dyn Verifier>,
}

pub fn run_pipeline(config: &RunConfig) -> Result<Manifest> {
    run_pipeline_with(config, Components::default())
}

pub fn run_pipeline_with(config: &RunConfig, components: Components<'_>) -> Result<Manifest> {
    config.validate()?;
    let Components { scorer, verifier } = components;
    fs::create_dir_all(&config.output).map_err(|e| Error::io(&config.output, e))?;
    let labels = config.label_scheme()?;
    let format = CorpusFormat {
        labels: labels.clone(),
        offsets: config.offsets,
    };
    let mut docs = load_documents(&config.corpus, &format)?;
    docs.sort_by(|a, b| a.id.cmp(&b.id));
    let corpus_hash = file_hash(&config.corpus)?;
    let scheme_hash = match &config.scheme {
        SchemeSource::Covert => "covert".to_string(),
        SchemeSource::Bear(p) => file_hash(p)?,
    };
    let mut runner = StageRunner::new(&config.output);

    let source = config.effective_entities();
    let source_hash = match &source {
        EntitySource::Gold => "gold".to_string(),
        EntitySource::Gazetteer(p) => format!("gazetteer:{}", file_hash(p)?),
        EntitySource::Annotations(p) => format!("annotations:{}", file_hash(p)?),
    };
    let (entities, entities_hash) = runner.run(
        "entities",
        &[
            ("corpus", corpus_hash.clone()),
            ("scheme", scheme_hash),
            ("offsets", format!("{:?}", config.offsets)),
            ("source", source_hash),
        ],
        || recognize_entities(&docs, &source, &labels),
    )?;

    let kb_hash = match &config.kb {
        Some(p) => file_hash(p)?,
        None => "-".into(),
    };
    let (links, links_hash) = runner.run(
        "links",
        &[
            ("entities", entities_hash.clone()),
            ("corpus", corpus_hash.clone()),
            ("kb", kb_hash),
            ("threshold", config.threshold.to_string()),
            ("top_k", config.top_k.to_string()),
        ],
        || match &config.kb {
            Some(p) => {
                let linker = Linker {
                    index: LinkIndex::build(linker::load_kb(p)?)?,
                    top_k: config.top_k,
                    threshold: config.threshold,
                };
                Ok(link_entities(&docs, &entities, &linker))
            }
            None => Ok(Vec::new()),
        },
    )?;

    let (candidates, candidates_hash) = runner.run(
        "candidates",
        &[
            ("corpus", corpus_hash.clone()),
            ("entities", entities_hash),
            (
                "links",
                if config.normalize {
                    links_hash.clone()
                } else {
                    "-".into()
                },
            ),
            ("mode", config.mode.to_string()),
            ("normalize", config.normalize.to_string()),
        ],
        || {
            let links = config.normalize.then_some(links.as_slice());
            generate_candidates(&docs, &entities, links, config.mode)
        },
    )?;

    let scorer_name = match &scorer {
        Some(_) => "injected".to_string(),
        None => config.scorer.to_string(),
    };
    let (scores, scores_hash) = runner.run(
        "scores",
        &[
            ("corpus", corpus_hash.clone()),
            ("candidates", candidates_hash.clone()),
            ("mode", config.mode.to_string()),
            ("scorer", scorer_name),
        ],
        || {
            let any = docs
                .iter()
                .zip(&candidates)
                .any(|(d, c)| needs_scores(config.mode, d, c));
            if !any {
                return Ok(Vec::new());
            }
            match scorer {
                Some(s) => score_documents(&docs, &candidates, config.mode, s),
                None => {
                    let mut s = config.scorer.connect()?;
                    score_documents(&docs, &candidates, config.mode, s.as_mut())
                }
            }
        },
    )?;

    let seed = match config.mode {
        SelectionMode::Random => config.seed.to_string(),
        _ => "-".into(),
    };
    let (claims, claims_hash) = runner.run(
        "claims",
        &[
            ("candidates", candidates_hash),
            ("scores", scores_hash),
            ("mode", config.mode.to_string()),
            ("seed", seed),
        ],
        || select_claims(&docs, &candidates, &scores, config.mode, config.seed),
    )?;

    let verifier_name = match &verifier {
        Some(_) => "injected".to_string(),
        None => config.verifier.to_string(),
    };
    let (verdicts, verdicts_hash) = runner.run(
        "verdicts",
        &[
            ("corpus", corpus_hash),
            ("claims", claims_hash),
            ("verifier", verifier_name),
            ("overlap_floor", config.overlap_floor.to_string()),
        ],
        || {
            let labeled = claims.iter().any(|c| {
                docs.binary_search_by(|d| d.id.as_str().cmp(c.doc_id.as_str()))
                    .is_ok_and(|i| docs[i].gold_verdict.is_some())
            });
            if !labeled {
                return Ok(Vec::new());
            }
            match verifier {
                Some(v) => check_claims(&docs, &claims, v),
                None => {
                    let mut v = config.verifier.connect(config.overlap_floor)?;
                    check_claims(&docs, &claims, v.as_mut())
                }
            }
        },
    )?;

    let (metrics, _) = runner.run(
        "metrics",
        &[
            ("verdicts", verdicts_hash),
            ("links", links_hash),
            ("metric", format!("{:?}", config.metric)),
        ],
        || {
            let verdict = if verdicts.is_empty() {
                None
            } else {
                Some(evaluate_verdicts(&verdicts, config.metric)?)
            };
            let outcomes: Vec<LinkOutcome> = links.iter().flat_map(|l| l.mentions.iter().cloned()).collect();
            let coverage = (config.kb.is_some()).then(|| linking_coverage(&outcomes));
            Ok(vec![RunMetrics { verdict, coverage }])
        },
    )?;

    let counts = RunCounts {
        documents_in: docs.len(),
        skipped_documents: candidates.iter().filter(|c| c.skipped).count(),
        candidates: candidates.iter().map(|c| c.candidates.len()).sum(),
        duplicate_pairs: candidates.iter().map(|c| c.duplicates).sum(),
        claims_emitted: claims.len(),
        verdicts: verdicts.len(),
        unlabeled: claims.len() - verdicts.len(),
    };
    debug_assert_eq!(counts.documents_in, counts.claims_emitted + counts.skipped_documents);
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        stage_format: STAGE_FORMAT,
        seed: config.seed,
        config: config.describe(),
        stages: runner.records,
        counts,
        metrics: metrics.into_iter().next().expect("one metrics record"),
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    bytes.push(b'\n');
    write_atomic(&config.output.join(MANIFEST_FILE), &bytes)?;
    Ok(manifest)
}
