//! Medical entity recognition: a longest-match gazetteer, ingestion of
//! externally predicted spans, and strict/relaxed span evaluation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{BearClasses, Document, EntityClass, EntitySpan, LabelScheme, MappedLabel};
use crate::error::{Error, Result};
use crate::text::{alnum_tokens, CharIndex};

/// Dictionary of case-folded terms with their entity class.
#[derive(Debug, Clone, Default)]
pub struct Gazetteer {
    entries: HashMap<String, EntityClass>,
    max_term_tokens: usize,
}

fn term_key(term: &str) -> Option<(String, usize)> {
    let tokens = alnum_tokens(term);
    if tokens.is_empty() {
        return None;
    }
    let key = tokens.iter().map(|t| t.norm.as_str()).collect::<Vec<_>>().join(" ");
    Some((key, tokens.len()))
}

impl Gazetteer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a term. Later insertions of the same term replace the class.
    pub fn insert(&mut self, term: &str, class: EntityClass) -> Result<()> {
        let (key, n) =
            term_key(term).ok_or_else(|| Error::Config(format!("gazetteer term {term:?} has no word characters")))?;
        self.max_term_tokens = self.max_term_tokens.max(n);
        self.entries.insert(key, class);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_term_tokens(&self) -> usize {
        self.max_term_tokens
    }

    /// Loads a tab-separated `term<TAB>label` file. Lines starting with `#`
    /// are comments.
    pub fn load(path: impl AsRef<Path>, labels: &LabelScheme) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut gaz = Self::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.into(),
                line: i + 1,
                message,
            };
            let (term, label) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected `term<TAB>label`".into()))?;
            let class = labels.parse_label(label.trim()).map_err(|e| parse_err(e.to_string()))?;
            gaz.insert(term, class).map_err(|e| parse_err(e.to_string()))?;
        }
        Ok(gaz)
    }

    /// Finds gazetteer terms in `text`, longest match first, on token
    /// boundaries. Returned spans are sorted and never overlap.
    pub fn recognize_text(&self, text: &str) -> Vec<EntitySpan> {
        let tokens = alnum_tokens(text);
        let index = CharIndex::new(text);
        let mut spans = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let longest = self.max_term_tokens.min(tokens.len() - i);
            let hit = (1..=longest).rev().find_map(|n| {
                let key = tokens[i..i + n]
                    .iter()
                    .map(|t| t.norm.as_str())
                    .collect::<Vec<_>>()
                    .join(" ");
                self.entries.get(&key).map(|class| (n, class))
            });
            match hit {
                Some((n, class)) => {
                    let (start, end) = (tokens[i].start, tokens[i + n - 1].end);
                    spans.push(EntitySpan {
                        start,
                        end,
                        label: class.clone(),
                        surface: index.slice(start, end).unwrap_or_default().to_string(),
                    });
                    i += n;
                }
                None => i += 1,
            }
        }
        spans
    }

    pub fn recognize(&self, doc: &Document) -> Vec<EntitySpan> {
        self.recognize_text(&doc.text)
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct AnnotationRecord {
    doc_id: String,
    start: usize,
    end: usize,
    label: String,
}

/// Reads externally predicted spans (`{doc_id, start, end, label}` per
/// line) and attaches them to corpus documents. Only ids present in the
/// file appear in the result; each list is sorted by onset.
pub fn ingest_annotations(
    path: impl AsRef<Path>,
    corpus: &[Document],
    labels: &LabelScheme,
) -> Result<BTreeMap<String, Vec<EntitySpan>>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_annotations(BufReader::new(file), path, corpus, labels)
}

pub fn read_annotations<R: BufRead>(
    reader: R,
    path: &Path,
    corpus: &[Document],
    labels: &LabelScheme,
) -> Result<BTreeMap<String, Vec<EntitySpan>>> {
    let by_id: HashMap<&str, &Document> = corpus.iter().map(|d| (d.id.as_str(), d)).collect();
    let mut out: BTreeMap<String, Vec<EntitySpan>> = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.into(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let doc = by_id
            .get(rec.doc_id.as_str())
            .ok_or_else(|| Error::UnknownDocument(rec.doc_id.clone()))?;
        let invalid = |message: String| Error::InvalidDocument {
            doc_id: rec.doc_id.clone(),
            message,
        };
        let label = labels.parse_label(&rec.label).map_err(|e| invalid(e.to_string()))?;
        let span = EntitySpan::from_text(&doc.text, rec.start, rec.end, label)
            .ok_or_else(|| invalid(format!("invalid span [{}, {})", rec.start, rec.end)))?;
        out.entry(rec.doc_id).or_default().push(span);
    }
    for spans in out.values_mut() {
        spans.sort_by_key(|s| (s.start, s.end));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Span and class must both match.
    Strict,
    /// Span must match; the class is ignored.
    Relaxed,
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strict" => Ok(EvalMode::Strict),
            "relaxed" => Ok(EvalMode::Relaxed),
            other => Err(Error::Config(format!("unknown evaluation mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Harmonic mean with the zero guard.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub(crate) fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Prf {
    pub fn from_counts(tp: usize, predicted: usize, gold: usize) -> Self {
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, gold);
        Self {
            precision,
            recall,
            f1: f1_score(precision, recall),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ClassCounts {
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NerScore {
    pub per_class: BTreeMap<String, Prf>,
    pub counts: BTreeMap<String, ClassCounts>,
    /// Unweighted mean over `evaluated_classes`.
    pub macro_avg: Prf,
    /// Classes present in gold, the ones macro-averaged.
    pub evaluated_classes: Vec<String>,
    /// Predictions whose class never occurs in gold.
    pub unscored_false_positives: usize,
}

/// Projects spans onto the shared BEAR classes, dropping ignored ones.
pub fn map_spans(spans: &[EntitySpan], classes: &BearClasses) -> Result<Vec<EntitySpan>> {
    let mut out = Vec::with_capacity(spans.len());
    for span in spans {
        if let MappedLabel::Class(label) = classes.map_label(&span.label)? {
            out.push(EntitySpan { label, ..span.clone() });
        }
    }
    Ok(out)
}

/// Per-class true positives of one document.
///
/// Spans are matched per offset pair. In relaxed mode a prediction on a gold
/// offset pair counts for the gold span's class whatever its own label, so
/// every class gains true positives relative to strict mode and only sheds
/// false positives.
fn match_document(
    pred: &[EntitySpan],
    gold: &[EntitySpan],
    mode: EvalMode,
    counts: &mut BTreeMap<String, ClassCounts>,
) {
    type Offsets = (usize, usize);
    let mut gold_at: BTreeMap<Offsets, Vec<&str>> = BTreeMap::new();
    for g in gold {
        gold_at.entry((g.start, g.end)).or_default().push(&g.label.name);
        counts.entry(g.label.name.clone()).or_default().gold += 1;
    }
    let mut pred_at: BTreeMap<Offsets, Vec<&str>> = BTreeMap::new();
    for p in pred {
        pred_at.entry((p.start, p.end)).or_default().push(&p.label.name);
    }
    for (offsets, mut preds) in pred_at {
        let mut golds = gold_at.remove(&offsets).unwrap_or_default();
        preds.sort_unstable();
        golds.sort_unstable();
        // exact label matches first
        let mut unmatched_pred = Vec::new();
        for p in preds {
            if let Some(pos) = golds.iter().position(|g| *g == p) {
                golds.remove(pos);
                let c = counts.entry(p.to_string()).or_default();
                c.true_positives += 1;
                c.predicted += 1;
            } else {
                unmatched_pred.push(p);
            }
        }
        for p in unmatched_pred {
            let credited = match mode {
                EvalMode::Relaxed if !golds.is_empty() => golds.remove(0),
                _ => p,
            };
            let c = counts.entry(credited.to_string()).or_default();
            c.predicted += 1;
            if credited != p {
                c.true_positives += 1;
            }
        }
    }
}

/// Scores predicted spans against gold spans per document. Gold labels are
/// expected to be mapped onto a single scheme already (see [`map_spans`]).
pub fn evaluate_ner(
    pred: &BTreeMap<String, Vec<EntitySpan>>,
    gold: &BTreeMap<String, Vec<EntitySpan>>,
    mode: EvalMode,
) -> Result<NerScore> {
    if let Some(id) = pred.keys().find(|id| !gold.contains_key(*id)) {
        return Err(Error::UnknownDocument(id.clone()));
    }
    if let Some(id) = gold.keys().find(|id| !pred.contains_key(*id)) {
        return Err(Error::UnknownDocument(id.clone()));
    }
    let mut counts: BTreeMap<String, ClassCounts> = BTreeMap::new();
    for (id, gold_spans) in gold {
        match_document(&pred[id], gold_spans, mode, &mut counts);
    }
    let evaluated: BTreeSet<String> = counts
        .iter()
        .filter(|(_, c)| c.gold > 0)
        .map(|(name, _)| name.clone())
        .collect();
    let unscored_false_positives = counts
        .iter()
        .filter(|(name, _)| !evaluated.contains(*name))
        .map(|(_, c)| c.predicted)
        .sum();
    counts.retain(|name, _| evaluated.contains(name));
    let per_class: BTreeMap<String, Prf> = counts
        .iter()
        .map(|(name, c)| (name.clone(), Prf::from_counts(c.true_positives, c.predicted, c.gold)))
        .collect();
    let n = per_class.len().max(1) as f64;
    let macro_avg = Prf {
        precision: per_class.values().map(|p| p.precision).sum::<f64>() / n,
        recall: per_class.values().map(|p| p.recall).sum::<f64>() / n,
        f1: per_class.values().map(|p| p.f1).sum::<f64>() / n,
    };
    Ok(NerScore {
        per_class,
        counts,
        macro_avg,
        evaluated_classes: evaluated.into_iter().collect(),
        unscored_false_positives,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gaz(entries: &[(&str, &str)]) -> Gazetteer {
        let mut g = Gazetteer::new();
        for (term, label) in entries {
            g.insert(term, EntityClass::bear(*label)).unwrap();
        }
        g
    }

    fn span(start: usize, end: usize, label: &str) -> EntitySpan {
        EntitySpan {
            start,
            end,
            label: EntityClass::bear(label),
            surface: "x".repeat(end - start),
        }
    }

    fn one_doc(spans: Vec<EntitySpan>) -> BTreeMap<String, Vec<EntitySpan>> {
        BTreeMap::from([("d".to_string(), spans)])
    }

    #[test]
    fn dictionary_hits() {
        let g = gaz(&[("aspirin", "treat_therapy"), ("headaches", "med_C")]);
        let spans = g.recognize_text("Aspirin cures headaches");
        let got: Vec<_> = spans.iter().map(|s| (s.start, s.end, s.label.name.as_str())).collect();
        assert_eq!(got, [(0, 7, "treat_therapy"), (14, 23, "med_C")]);
        assert_eq!(spans[0].surface, "Aspirin");
    }

    #[test]
    fn longest_match_wins() {
        let g = gaz(&[("blood", "other"), ("blood clots", "med_C")]);
        let spans = g.recognize_text("blood clots hurt");
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].surface, "blood clots");
        assert_eq!(spans[0].label.name, "med_C");
    }

    #[test]
    fn punctuation_tolerant_and_token_bounded() {
        let g = gaz(&[("blood clots", "med_C"), ("flu", "med_C")]);
        let spans = g.recognize_text("Blood-clots? influenza, not flu.");
        let got: Vec<_> = spans.iter().map(|s| s.surface.as_str()).collect();
        assert_eq!(got, ["Blood-clots", "flu"]);
    }

    #[test]
    fn no_terms_no_spans() {
        let g = gaz(&[("aspirin", "treat_therapy")]);
        assert!(g.recognize_text("nothing medical here").is_empty());
        assert!(Gazetteer::new().recognize_text("aspirin").is_empty());
    }

    #[test]
    fn empty_terms_rejected() {
        assert!(Gazetteer::new().insert(" -- ", EntityClass::bear("other")).is_err());
    }

    fn corpus() -> Vec<Document> {
        vec![Document::new("a", "vaccines cause autism"), Document::new("b", "masks")]
    }

    fn bear_labels() -> LabelScheme {
        LabelScheme::Bear(BearClasses::new(["med_C", "treat_therapy", "other"]).unwrap())
    }

    #[test]
    fn ingests_known_ids() {
        let file = r#"{"doc_id":"a","start":15,"end":21,"label":"med_C"}"#;
        let map = read_annotations(file.as_bytes(), Path::new("ann"), &corpus(), &bear_labels()).unwrap();
        assert_eq!(map.len(), 1);
        assert_eq!(map["a"][0].surface, "autism");
    }

    #[test]
    fn short_prediction_lists_are_kept() {
        let file = r#"{"doc_id":"b","start":0,"end":5,"label":"treat_therapy"}"#;
        let map = read_annotations(file.as_bytes(), Path::new("ann"), &corpus(), &bear_labels()).unwrap();
        assert_eq!(map["b"].len(), 1);
    }

    #[test]
    fn ingestion_errors() {
        let past_end = r#"{"doc_id":"b","start":0,"end":9,"label":"other"}"#;
        let err = read_annotations(past_end.as_bytes(), Path::new("ann"), &corpus(), &bear_labels()).unwrap_err();
        assert!(matches!(err, Error::InvalidDocument { ref doc_id, .. } if doc_id == "b"));
        let unknown = r#"{"doc_id":"zz","start":0,"end":1,"label":"other"}"#;
        let err = read_annotations(unknown.as_bytes(), Path::new("ann"), &corpus(), &bear_labels()).unwrap_err();
        assert!(matches!(err, Error::UnknownDocument(_)));
    }

    #[test]
    fn identical_predictions_score_one() {
        let gold = one_doc(vec![span(0, 5, "med_C"), span(8, 12, "treat_therapy")]);
        let s = evaluate_ner(&gold, &gold, EvalMode::Strict).unwrap();
        assert_eq!(
            s.macro_avg,
            Prf {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0
            }
        );
    }

    #[test]
    fn wrong_class_is_relaxed_hit_only() {
        let gold = one_doc(vec![span(0, 5, "med_C")]);
        let pred = one_doc(vec![span(0, 5, "treat_therapy")]);
        assert_eq!(evaluate_ner(&pred, &gold, EvalMode::Strict).unwrap().macro_avg.f1, 0.0);
        assert_eq!(evaluate_ner(&pred, &gold, EvalMode::Relaxed).unwrap().macro_avg.f1, 1.0);
    }

    #[test]
    fn two_of_three_with_one_spurious() {
        // tp = 2, fp = 1, fn = 1
        let gold = one_doc(vec![span(0, 3, "med_C"), span(5, 8, "med_C"), span(10, 13, "med_C")]);
        let pred = one_doc(vec![span(0, 3, "med_C"), span(5, 8, "med_C"), span(20, 23, "med_C")]);
        let s = evaluate_ner(&pred, &gold, EvalMode::Strict).unwrap();
        for v in [s.macro_avg.precision, s.macro_avg.recall, s.macro_avg.f1] {
            assert!((v - 2.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn predictions_of_absent_classes_are_reported_separately() {
        let gold = one_doc(vec![span(0, 3, "med_C")]);
        let pred = one_doc(vec![span(0, 3, "med_C"), span(5, 9, "other")]);
        let s = evaluate_ner(&pred, &gold, EvalMode::Strict).unwrap();
        assert_eq!(s.evaluated_classes, ["med_C"]);
        assert_eq!(s.unscored_false_positives, 1);
        assert_eq!(s.macro_avg.f1, 1.0);
    }

    #[test]
    fn mismatched_document_sets_rejected() {
        let gold = one_doc(vec![]);
        let pred = BTreeMap::from([("other".to_string(), vec![])]);
        assert!(evaluate_ner(&pred, &gold, EvalMode::Strict).is_err());
        assert!("lenient".parse::<EvalMode>().is_err());
    }

    #[test]
    fn mapped_covert_symptoms_merge_into_med_c() {
        let classes = BearClasses::new(["med_C", "treat_therapy", "other", "anatomy"]).unwrap();
        let gold_raw = vec![
            EntitySpan {
                start: 0,
                end: 4,
                label: EntityClass::covert("Medical Condition"),
                surface: "xxxx".into(),
            },
            EntitySpan {
                start: 6,
                end: 9,
                label: EntityClass::covert("Symptom/Side-effect"),
                surface: "xxx".into(),
            },
        ];
        let gold = one_doc(map_spans(&gold_raw, &classes).unwrap());
        let pred = one_doc(vec![span(0, 4, "med_C"), span(6, 9, "med_C")]);
        let s = evaluate_ner(&pred, &gold, EvalMode::Strict).unwrap();
        assert_eq!(s.evaluated_classes, ["med_C"]);
        assert_eq!(s.macro_avg.f1, 1.0);
        assert!(map_spans(&[span(0, 1, "anatomy")], &classes).unwrap().is_empty());
    }

    fn arb_spans() -> impl Strategy<Value = Vec<EntitySpan>> {
        proptest::collection::vec((0..20usize, 1..4usize, 0..3usize), 0..8).prop_map(|v| {
            v.into_iter()
                .map(|(s, len, c)| span(s, s + len, ["med_C", "treat_therapy", "other"][c]))
                .collect()
        })
    }

    fn arb_docs() -> impl Strategy<Value = (BTreeMap<String, Vec<EntitySpan>>, BTreeMap<String, Vec<EntitySpan>>)> {
        proptest::collection::vec((arb_spans(), arb_spans()), 1..5).prop_map(|docs| {
            let mut pred = BTreeMap::new();
            let mut gold = BTreeMap::new();
            for (i, (p, g)) in docs.into_iter().enumerate() {
                pred.insert(format!("d{i}"), p);
                gold.insert(format!("d{i}"), g);
            }
            (pred, gold)
        })
    }

    proptest! {
        #[test]
        fn relaxed_dominates_strict((pred, gold) in arb_docs()) {
            let strict = evaluate_ner(&pred, &gold, EvalMode::Strict).unwrap();
            let relaxed = evaluate_ner(&pred, &gold, EvalMode::Relaxed).unwrap();
            prop_assert!(relaxed.macro_avg.f1 + 1e-12 >= strict.macro_avg.f1);
            prop_assert!(relaxed.macro_avg.precision + 1e-12 >= strict.macro_avg.precision);
            prop_assert!(relaxed.macro_avg.recall + 1e-12 >= strict.macro_avg.recall);
        }

        #[test]
        fn document_order_is_irrelevant((pred, gold) in arb_docs()) {
            // rename ids so that BTreeMap iteration order reverses
            let rename = |m: &BTreeMap<String, Vec<EntitySpan>>| -> BTreeMap<String, Vec<EntitySpan>> {
                m.iter().map(|(k, v)| (format!("{}", 1000 - k[1..].parse::<i32>().unwrap()), v.clone())).collect()
            };
            let a = evaluate_ner(&pred, &gold, EvalMode::Strict).unwrap();
            let b = evaluate_ner(&rename(&pred), &rename(&gold), EvalMode::Strict).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn recognized_spans_are_disjoint_and_in_bounds(text in "[a-c ,.-]{0,60}") {
            let g = gaz(&[("a", "med_C"), ("a b", "other"), ("b c a", "treat_therapy"), ("cc", "med_C")]);
            let spans = g.recognize_text(&text);
            let n = text.chars().count();
            for w in spans.windows(2) {
                prop_assert!(w[0].end <= w[1].start);
            }
            for s in &spans {
                prop_assert!(s.start < s.end && s.end <= n);
            }
        }
    }
}
