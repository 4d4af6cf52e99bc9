//! Staged runs: caching, invalidation and the selection modes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use medclaim::claimgen::ClaimCandidate;
use medclaim::corpus::{load_documents, CorpusFormat};
use medclaim::pipeline::{read_jsonl, run_pipeline, DocCandidates, Manifest, RunConfig, SelectionMode};
use medclaim::select::ScorerHandle;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

/// Copies the synthetic fixtures into a scratch directory and loads the
/// run config from there, so tests can edit inputs freely.
fn scratch() -> (tempfile::TempDir, RunConfig) {
    let tmp = tempfile::tempdir().unwrap();
    for name in ["corpus.jsonl", "gazetteer.tsv", "kb.jsonl", "run.conf"] {
        std::fs::copy(fixture(&format!("synthetic/{name}")), tmp.path().join(name)).unwrap();
    }
    let config = RunConfig::load(tmp.path().join("run.conf")).unwrap();
    (tmp, config)
}

fn hits(m: &Manifest) -> BTreeMap<String, bool> {
    m.stages.iter().map(|s| (s.name.clone(), s.cache_hit)).collect()
}

fn claims(config: &RunConfig) -> Vec<ClaimCandidate> {
    read_jsonl(config.output.join("claims.jsonl")).unwrap()
}

#[test]
fn corpus_change_recomputes_everything() {
    let (_tmp, config) = scratch();
    run_pipeline(&config).unwrap();
    let text = std::fs::read_to_string(&config.corpus).unwrap();
    std::fs::write(&config.corpus, text.replace("headaches fast", "headaches quickly")).unwrap();
    let m = run_pipeline(&config).unwrap();
    assert!(m.stages.iter().all(|s| !s.cache_hit), "{:?}", hits(&m));
}

#[test]
fn tampered_stage_file_is_recomputed() {
    let (_tmp, config) = scratch();
    run_pipeline(&config).unwrap();
    let path = config.output.join("claims.jsonl");
    let original = std::fs::read(&path).unwrap();
    std::fs::write(&path, b"{}\n").unwrap();
    let m = run_pipeline(&config).unwrap();
    let h = hits(&m);
    assert!(h["entities"] && h["links"] && h["candidates"] && h["scores"]);
    assert!(!h["claims"] && !h["verdicts"] && !h["metrics"]);
    assert_eq!(std::fs::read(&path).unwrap(), original);
}

#[test]
fn seed_only_matters_in_random_mode() {
    let (_tmp, mut config) = scratch();
    run_pipeline(&config).unwrap();
    config.seed = 14;
    assert!(run_pipeline(&config).unwrap().all_cache_hits());

    config.mode = SelectionMode::Random;
    run_pipeline(&config).unwrap();
    let first = claims(&config);
    config.seed = 99;
    let m = run_pipeline(&config).unwrap();
    let h = hits(&m);
    assert!(h["entities"] && h["links"] && h["candidates"] && h["scores"], "{h:?}");
    assert!(!h["claims"]);
    let second = claims(&config);
    assert_eq!(first.len(), second.len());
    assert_ne!(first, second);

    let cands: Vec<DocCandidates> = read_jsonl(config.output.join("candidates.jsonl")).unwrap();
    for claim in &second {
        let doc = cands.iter().find(|c| c.doc_id == claim.doc_id).unwrap();
        assert!(doc.candidates.iter().any(|c| c.text == claim.text));
    }

    config.seed = 14;
    run_pipeline(&config).unwrap();
    let again = claims(&config);
    config.seed = 99;
    config.output = config.output.with_file_name("fresh");
    run_pipeline(&config).unwrap();
    assert_eq!(claims(&config), second);
    assert_ne!(again, second);
}

#[test]
fn gold_seq_uses_the_first_gold_relation() {
    let (_tmp, mut config) = scratch();
    config.mode = SelectionMode::GoldSeq;
    run_pipeline(&config).unwrap();
    let docs = load_documents(&config.corpus, &CorpusFormat::covert()).unwrap();
    let got = claims(&config);
    let mut checked = 0;
    for doc in docs {
        let Some(r) = doc.gold_relations.first() else { continue };
        let (s, e) = (r.subject.start.min(r.object.start), r.subject.end.max(r.object.end));
        let want: String = doc.text.chars().skip(s).take(e - s).collect();
        let claim = got.iter().find(|c| c.doc_id == doc.id).unwrap();
        assert_eq!(claim.text, want, "{}", doc.id);
        checked += 1;
    }
    assert!(checked > 0);
}

#[test]
fn gold_triple_and_full_text() {
    let (_tmp, mut config) = scratch();
    config.mode = SelectionMode::GoldTriple;
    run_pipeline(&config).unwrap();
    let triples = claims(&config);
    let syn01 = triples.iter().find(|c| c.doc_id == "syn-01").unwrap();
    assert_eq!(syn01.text, "aspirin cures headaches");

    config.mode = SelectionMode::FullText;
    run_pipeline(&config).unwrap();
    let docs = load_documents(&config.corpus, &CorpusFormat::covert()).unwrap();
    let full = claims(&config);
    assert_eq!(full.len(), docs.len());
    for claim in full {
        let doc = docs.iter().find(|d| d.id == claim.doc_id).unwrap();
        assert_eq!(claim.text, doc.text);
    }
}

#[test]
fn normalization_rewrites_linked_mentions() {
    let (_tmp, mut config) = scratch();
    run_pipeline(&config).unwrap();
    let surface = claims(&config);
    config.normalize = true;
    let m = run_pipeline(&config).unwrap();
    let h = hits(&m);
    assert!(h["entities"] && h["links"] && !h["candidates"]);
    let normalized = claims(&config);
    assert!(normalized.iter().all(|c| c.normalized));
    assert_ne!(surface, normalized);
    assert!(m.metrics.coverage.is_some());
}

#[test]
fn invalid_combinations_are_rejected() {
    let (_tmp, mut config) = scratch();
    config.normalize = true;
    config.mode = SelectionMode::FullText;
    assert_eq!(run_pipeline(&config).unwrap_err().exit_code(), 1);
    config.mode = SelectionMode::CoreClaim;
    config.kb = None;
    assert!(run_pipeline(&config).is_err());
    config.normalize = false;
    config.threshold = 1.5;
    assert!(run_pipeline(&config).is_err());
}

#[test]
fn external_scorer_matches_builtin() {
    let (_tmp, mut config) = scratch();
    run_pipeline(&config).unwrap();
    let builtin = claims(&config);
    config.scorer = format!("cmd:'{}' serve scorer", env!("CARGO_BIN_EXE_medclaim"))
        .parse::<ScorerHandle>()
        .unwrap();
    let m = run_pipeline(&config).unwrap();
    let h = hits(&m);
    assert!(h["candidates"] && !h["scores"]);
    assert_eq!(claims(&config), builtin);
}
