//! Shared data model: documents, entity spans, label schemes and the
//! line-delimited corpus format.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::CharIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "BEAR")]
    Bear,
    #[serde(rename = "COVERT")]
    Covert,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Bear => "BEAR",
            Scheme::Covert => "COVERT",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "BEAR" => Ok(Scheme::Bear),
            "COVERT" => Ok(Scheme::Covert),
            other => Err(Error::Config(format!("unknown label scheme {other:?}"))),
        }
    }
}

/// The closed CoVERT class set.
pub const COVERT_CLASSES: [&str; 4] = ["Medical Condition", "Symptom/Side-effect", "Treatment", "OTHER"];

/// BEAR classes that have a CoVERT counterpart.
pub const MED_CONDITION: &str = "med_C";
pub const TREATMENT: &str = "treat_therapy";
pub const OTHER: &str = "other";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityClass {
    pub scheme: Scheme,
    pub name: String,
}

impl EntityClass {
    pub fn new(scheme: Scheme, name: impl Into<String>) -> Self {
        Self {
            scheme,
            name: name.into(),
        }
    }

    pub fn bear(name: impl Into<String>) -> Self {
        Self::new(Scheme::Bear, name)
    }

    pub fn covert(name: impl Into<String>) -> Self {
        Self::new(Scheme::Covert, name)
    }
}

/// Result of projecting a label onto the BEAR scheme for evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MappedLabel {
    Class(EntityClass),
    /// BEAR class without a CoVERT counterpart; excluded from evaluation.
    Ignored,
}

/// The BEAR class inventory, read from a scheme file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BearClasses {
    names: BTreeSet<String>,
}

impl BearClasses {
    pub fn new<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: BTreeSet<String> = names.into_iter().map(Into::into).collect();
        for required in [MED_CONDITION, TREATMENT, OTHER] {
            if !names.contains(required) {
                return Err(Error::Config(format!(
                    "BEAR scheme is missing the mapping target {required:?}"
                )));
            }
        }
        if names.len() != 14 {
            log::warn!("BEAR scheme declares {} classes, expected 14", names.len());
        }
        Ok(Self { names })
    }

    /// Reads a scheme file: a `# scheme: BEAR` header followed by one class
    /// name per line.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut scheme = None;
        let mut names = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(header) = line.strip_prefix('#') {
                if let Some(value) = header.trim().strip_prefix("scheme:") {
                    scheme = Some(value.parse::<Scheme>().map_err(|e| Error::Parse {
                        path: path.into(),
                        line: i + 1,
                        message: e.to_string(),
                    })?);
                }
                continue;
            }
            if scheme.is_none() {
                return Err(Error::Parse {
                    path: path.into(),
                    line: i + 1,
                    message: "class name before the scheme header".into(),
                });
            }
            names.push(line.to_string());
        }
        match scheme {
            Some(Scheme::Bear) => Self::new(names),
            Some(Scheme::Covert) => Err(Error::Config(format!(
                "{}: expected a BEAR scheme file",
                path.display()
            ))),
            None => Err(Error::Parse {
                path: path.into(),
                line: 1,
                message: "missing `# scheme:` header".into(),
            }),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    /// Maps a CoVERT or BEAR label onto the BEAR classes shared by both
    /// datasets. BEAR-only classes map to [`MappedLabel::Ignored`].
    pub fn map_label(&self, source: &EntityClass) -> Result<MappedLabel> {
        let unknown = || Error::UnknownLabel {
            scheme: source.scheme.to_string(),
            label: source.name.clone(),
        };
        let target = match source.scheme {
            Scheme::Covert => match source.name.as_str() {
                "Medical Condition" | "Symptom/Side-effect" => MED_CONDITION,
                "Treatment" => TREATMENT,
                "OTHER" => OTHER,
                _ => return Err(unknown()),
            },
            Scheme::Bear => {
                if !self.contains(&source.name) {
                    return Err(unknown());
                }
                match source.name.as_str() {
                    MED_CONDITION | TREATMENT | OTHER => source.name.as_str(),
                    _ => return Ok(MappedLabel::Ignored),
                }
            }
        };
        Ok(MappedLabel::Class(EntityClass::bear(target)))
    }
}

/// A labelled character span `[start, end)` of a document.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub label: EntityClass,
    pub surface: String,
}

impl EntitySpan {
    /// Builds a span, taking the surface from `text`.
    pub fn from_text(text: &str, start: usize, end: usize, label: EntityClass) -> Option<Self> {
        if start >= end {
            return None;
        }
        let surface = CharIndex::new(text).slice(start, end)?.to_string();
        Some(Self {
            start,
            end,
            label,
            surface,
        })
    }

    pub fn same_offsets(&self, other: &EntitySpan) -> bool {
        self.start == other.start && self.end == other.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationTriple {
    pub subject: EntitySpan,
    pub relation: String,
    pub object: EntitySpan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum VerdictLabel {
    Supports,
    Refutes,
    Nei,
}

impl VerdictLabel {
    pub const ALL: [VerdictLabel; 3] = [VerdictLabel::Supports, VerdictLabel::Refutes, VerdictLabel::Nei];

    pub fn index(self) -> usize {
        match self {
            VerdictLabel::Supports => 0,
            VerdictLabel::Refutes => 1,
            VerdictLabel::Nei => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            VerdictLabel::Supports => "SUPPORTS",
            VerdictLabel::Refutes => "REFUTES",
            VerdictLabel::Nei => "NEI",
        }
    }

    /// SUPPORTS or REFUTES, i.e. an actual verdict rather than an abstention.
    pub fn is_decisive(self) -> bool {
        self != VerdictLabel::Nei
    }
}

impl fmt::Display for VerdictLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VerdictLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "SUPPORTS" => Ok(VerdictLabel::Supports),
            "REFUTES" => Ok(VerdictLabel::Refutes),
            "NEI" => Ok(VerdictLabel::Nei),
            other => Err(Error::Config(format!("unknown verdict label {other:?}"))),
        }
    }
}

/// One social-media post.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub gold_entities: Vec<EntitySpan>,
    pub gold_relations: Vec<RelationTriple>,
    pub evidence: String,
    pub gold_verdict: Option<VerdictLabel>,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            gold_entities: Vec::new(),
            gold_relations: Vec::new(),
            evidence: String::new(),
            gold_verdict: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Issue {
    EmptySpan { entity: usize },
    SpanOutOfBounds { entity: usize },
    SurfaceMismatch { entity: usize },
    ForeignSpan { relation: usize },
    SelfRelation { relation: usize },
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Issue::EmptySpan { entity } => write!(f, "empty span (entity {entity})"),
            Issue::SpanOutOfBounds { entity } => write!(f, "span out of bounds (entity {entity})"),
            Issue::SurfaceMismatch { entity } => write!(f, "surface mismatch (entity {entity})"),
            Issue::ForeignSpan { relation } => write!(f, "foreign span (relation {relation})"),
            Issue::SelfRelation { relation } => {
                write!(f, "subject equals object (relation {relation})")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub ok: bool,
    pub issues: Vec<Issue>,
}

/// Checks every span and relation invariant of `doc`.
pub fn validate_document(doc: &Document) -> ValidationReport {
    let index = CharIndex::new(&doc.text);
    let mut issues = Vec::new();
    for (i, span) in doc.gold_entities.iter().enumerate() {
        if span.start >= span.end {
            issues.push(Issue::EmptySpan { entity: i });
            continue;
        }
        match index.slice(span.start, span.end) {
            None => issues.push(Issue::SpanOutOfBounds { entity: i }),
            Some(s) if s != span.surface => issues.push(Issue::SurfaceMismatch { entity: i }),
            Some(_) => {}
        }
    }
    for (i, rel) in doc.gold_relations.iter().enumerate() {
        let owned = |s: &EntitySpan| doc.gold_entities.iter().any(|e| e == s);
        if !owned(&rel.subject) || !owned(&rel.object) {
            issues.push(Issue::ForeignSpan { relation: i });
        }
        if rel.subject == rel.object {
            issues.push(Issue::SelfRelation { relation: i });
        }
    }
    ValidationReport {
        ok: issues.is_empty(),
        issues,
    }
}

/// How entity labels in a corpus file are interpreted.
#[derive(Debug, Clone)]
pub enum LabelScheme {
    Covert,
    Bear(BearClasses),
}

impl LabelScheme {
    pub fn parse_label(&self, name: &str) -> Result<EntityClass> {
        match self {
            LabelScheme::Covert if COVERT_CLASSES.contains(&name) => Ok(EntityClass::covert(name)),
            LabelScheme::Bear(classes) if classes.contains(name) => Ok(EntityClass::bear(name)),
            LabelScheme::Covert => Err(Error::UnknownLabel {
                scheme: Scheme::Covert.to_string(),
                label: name.into(),
            }),
            LabelScheme::Bear(_) => Err(Error::UnknownLabel {
                scheme: Scheme::Bear.to_string(),
                label: name.into(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OffsetUnit {
    #[default]
    Chars,
    /// UTF-8 byte offsets, converted to character offsets on load.
    Bytes,
}

#[derive(Debug, Clone)]
pub struct CorpusFormat {
    pub labels: LabelScheme,
    pub offsets: OffsetUnit,
}

impl CorpusFormat {
    pub fn covert() -> Self {
        Self {
            labels: LabelScheme::Covert,
            offsets: OffsetUnit::Chars,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EntityRecord {
    start: usize,
    end: usize,
    label: String,
    surface: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RelationRecord {
    subject_index: usize,
    relation: String,
    object_index: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct DocumentRecord {
    id: String,
    text: String,
    #[serde(default)]
    entities: Vec<EntityRecord>,
    #[serde(default)]
    relations: Vec<RelationRecord>,
    #[serde(default)]
    evidence: String,
    #[serde(default)]
    verdict: Option<VerdictLabel>,
}

fn document_from_record(rec: DocumentRecord, format: &CorpusFormat) -> Result<Document> {
    let invalid = |message: String| Error::InvalidDocument {
        doc_id: rec.id.clone(),
        message,
    };
    let index = CharIndex::new(&rec.text);
    let mut entities = Vec::with_capacity(rec.entities.len());
    for (i, e) in rec.entities.iter().enumerate() {
        let (start, end) = match format.offsets {
            OffsetUnit::Chars => (e.start, e.end),
            OffsetUnit::Bytes => {
                let convert = |b| {
                    index
                        .char_of_byte(b)
                        .ok_or_else(|| invalid(format!("entity {i}: byte offset {b} is not a character boundary")))
                };
                (convert(e.start)?, convert(e.end)?)
            }
        };
        let label = format
            .labels
            .parse_label(&e.label)
            .map_err(|err| invalid(format!("entity {i}: {err}")))?;
        entities.push(EntitySpan {
            start,
            end,
            label,
            surface: e.surface.clone(),
        });
    }
    let mut relations = Vec::with_capacity(rec.relations.len());
    for (i, r) in rec.relations.iter().enumerate() {
        let get = |idx: usize| {
            entities
                .get(idx)
                .cloned()
                .ok_or_else(|| invalid(format!("relation {i}: entity index {idx} out of range")))
        };
        relations.push(RelationTriple {
            subject: get(r.subject_index)?,
            relation: r.relation.clone(),
            object: get(r.object_index)?,
        });
    }
    let doc = Document {
        id: rec.id.clone(),
        text: rec.text.clone(),
        gold_entities: entities,
        gold_relations: relations,
        evidence: rec.evidence.clone(),
        gold_verdict: rec.verdict,
    };
    let report = validate_document(&doc);
    if !report.ok {
        let issues: Vec<String> = report.issues.iter().map(ToString::to_string).collect();
        return Err(invalid(issues.join("; ")));
    }
    Ok(doc)
}

fn record_from_document(doc: &Document) -> DocumentRecord {
    let position = |span: &EntitySpan| {
        doc.gold_entities
            .iter()
            .position(|e| e == span)
            .expect("relation spans are owned by the document")
    };
    DocumentRecord {
        id: doc.id.clone(),
        text: doc.text.clone(),
        entities: doc
            .gold_entities
            .iter()
            .map(|e| EntityRecord {
                start: e.start,
                end: e.end,
                label: e.label.name.clone(),
                surface: e.surface.clone(),
            })
            .collect(),
        relations: doc
            .gold_relations
            .iter()
            .map(|r| RelationRecord {
                subject_index: position(&r.subject),
                relation: r.relation.clone(),
                object_index: position(&r.object),
            })
            .collect(),
        evidence: doc.evidence.clone(),
        verdict: doc.gold_verdict,
    }
}

/// Reads a line-delimited corpus. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn read_documents<R: BufRead>(reader: R, path: &Path, format: &CorpusFormat) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DocumentRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.into(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::InvalidDocument {
                doc_id: rec.id,
                message: "duplicate document id".into(),
            });
        }
        docs.push(document_from_record(rec, format)?);
    }
    Ok(docs)
}

pub fn load_documents(path: impl AsRef<Path>, format: &CorpusFormat) -> Result<Vec<Document>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_documents(BufReader::new(file), path, format)
}

/// Writes documents in the corpus format with character offsets.
pub fn write_documents<W: Write>(mut writer: W, docs: &[Document]) -> std::io::Result<()> {
    for doc in docs {
        serde_json::to_writer(&mut writer, &record_from_document(doc))?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn save_documents(path: impl AsRef<Path>, docs: &[Document]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_documents(BufWriter::new(file), docs).map_err(|e| Error::io(path, e))
}
