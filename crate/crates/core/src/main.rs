use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use medclaim::analysis::{label_distribution, load_predictions, restrict_to, transition_matrix, Predictions};
use medclaim::claimgen::ClaimCandidate;
use medclaim::corpus::{load_documents, BearClasses, CorpusFormat, Document, LabelScheme, OffsetUnit};
use medclaim::linker::{self, coverage_from_counts, LinkIndex, Linker};
use medclaim::ner::{evaluate_ner, map_spans, EvalMode};
use medclaim::pipeline::{
    self, generate_candidates, link_entities, read_jsonl, recognize_entities, run_pipeline, score_documents,
    select_claims, write_jsonl, DocCandidates, EntitySource, RunConfig, SelectionMode,
};
use medclaim::protocol;
use medclaim::select::{builtin_lexical_score, ScorerHandle};
use medclaim::tables::{ResultsTable, ROUNDING_TOLERANCE};
use medclaim::verdict::{
    evaluate_verdicts, toy_verdict, MetricVariant, VerdictRecord, VerifierHandle, DEFAULT_OVERLAP_FLOOR,
};
use medclaim::{Error, Result};

/// Entity-based claim extraction and by-proxy evaluation for medical posts.
#[derive(Parser)]
#[command(name = "medclaim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score predicted entity spans against the gold spans of a corpus.
    NerEval(NerEvalArgs),
    /// Link mentions to a knowledge base.
    Link(LinkArgs),
    /// Generate claim candidates for every document.
    Extract(ExtractArgs),
    /// Pick one main claim per document from its candidates.
    Select(SelectArgs),
    /// Check claims against the evidence of their documents.
    Check(CheckArgs),
    /// Build or check results tables, or compare two verdict runs.
    Report(ReportArgs),
    /// Run every stage from a configuration file.
    Run(RunArgs),
    /// Serve the builtin scorer or the toy verifier over the line protocol
    /// on stdin/stdout.
    Serve(ServeArgs),
}

#[derive(Args)]
struct ServeArgs {
    /// `scorer` or `verifier`.
    role: String,
    #[arg(long, default_value_t = DEFAULT_OVERLAP_FLOOR)]
    overlap_floor: f64,
}

#[derive(Args)]
struct CorpusArgs {
    /// Corpus file (JSON lines).
    #[arg(long)]
    corpus: PathBuf,
    /// Entity labels used in the corpus: `covert` or `bear:<scheme file>`.
    #[arg(long, default_value = "covert")]
    labels: String,
    /// Interpret entity offsets as UTF-8 byte offsets.
    #[arg(long)]
    byte_offsets: bool,
}

impl CorpusArgs {
    fn label_scheme(&self) -> Result<LabelScheme> {
        parse_labels(&self.labels)
    }

    fn load(&self) -> Result<(Vec<Document>, LabelScheme)> {
        let labels = self.label_scheme()?;
        let format = CorpusFormat {
            labels: labels.clone(),
            offsets: if self.byte_offsets {
                OffsetUnit::Bytes
            } else {
                OffsetUnit::Chars
            },
        };
        let mut docs = load_documents(&self.corpus, &format)?;
        docs.sort_by(|a, b| a.id.cmp(&b.id));
        Ok((docs, labels))
    }
}

fn parse_labels(s: &str) -> Result<LabelScheme> {
    match s.strip_prefix("bear:") {
        Some(p) => Ok(LabelScheme::Bear(BearClasses::load(p)?)),
        None if s == "covert" => Ok(LabelScheme::Covert),
        None => Err(Error::Config(format!(
            "labels must be `covert` or `bear:<file>`, got {s:?}"
        ))),
    }
}

fn parse_entities(s: &str) -> Result<EntitySource> {
    if s == "gold" {
        return Ok(EntitySource::Gold);
    }
    if let Some(p) = s.strip_prefix("gazetteer:") {
        return Ok(EntitySource::Gazetteer(p.into()));
    }
    if let Some(p) = s.strip_prefix("annotations:") {
        return Ok(EntitySource::Annotations(p.into()));
    }
    Err(Error::Config(format!(
        "entities must be `gold`, `gazetteer:<file>` or `annotations:<file>`, got {s:?}"
    )))
}

#[derive(Args)]
struct NerEvalArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Predicted spans: `gazetteer:<tsv>` or `annotations:<jsonl>`.
    #[arg(long)]
    pred: String,
    #[arg(long, default_value = "strict")]
    mode: String,
    /// BEAR scheme file; when given, both sides are mapped onto it.
    #[arg(long)]
    scheme: Option<PathBuf>,
}

#[derive(Args)]
struct LinkArgs {
    /// Knowledge base (JSON lines of concept_id, canonical_name, aliases).
    #[arg(long)]
    kb: PathBuf,
    #[arg(long, default_value_t = linker::DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = linker::DEFAULT_TOP_K)]
    top_k: usize,
    /// Link the entities of a corpus and report coverage instead of
    /// reading mentions.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "gold")]
    entities: String,
    #[arg(long, default_value = "covert")]
    labels: String,
    /// Comma-separated thresholds; prints coverage for each.
    #[arg(long, value_delimiter = ',')]
    sweep: Vec<f64>,
    /// Mentions to link; read from stdin, one per line, when absent.
    mentions: Vec<String>,
}

#[derive(Args)]
struct ExtractArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, default_value = "gold")]
    entities: String,
    #[arg(long, default_value = "core_claim")]
    mode: String,
    /// Replace entity mentions with linked canonical names.
    #[arg(long, requires = "kb")]
    normalize: bool,
    #[arg(long)]
    kb: Option<PathBuf>,
    #[arg(long, default_value_t = linker::DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Candidates file written by `extract`.
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long, default_value = "core_claim")]
    mode: String,
    /// `builtin`, `cmd:<command>` or an http(s) URL; defaults to
    /// MEDCLAIM_SCORER, then `builtin`.
    #[arg(long)]
    scorer: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Claims file written by `select`.
    #[arg(long)]
    claims: PathBuf,
    /// `toy`, `cmd:<command>` or an http(s) URL; defaults to
    /// MEDCLAIM_VERIFIER, then `toy`.
    #[arg(long)]
    verifier: Option<String>,
    #[arg(long, default_value_t = DEFAULT_OVERLAP_FLOOR)]
    overlap_floor: f64,
    #[arg(long, default_value = "micro")]
    metric: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Verdict files as `<model>:<variant>=<file>`; prints a P/R/F1/Δ table.
    #[arg(long = "results", conflicts_with_all = ["check_table", "compare"])]
    results: Vec<String>,
    /// Variant that Δ is computed against.
    #[arg(long)]
    baseline: Option<String>,
    #[arg(long, default_value = "micro")]
    metric: String,
    /// Check a stored results table (average row and Δ cells).
    #[arg(long, conflicts_with = "compare")]
    check_table: Option<PathBuf>,
    /// Two verdict files; prints label distributions and transitions.
    #[arg(long, num_args = 2, value_names = ["RUN_A", "RUN_B"])]
    compare: Vec<PathBuf>,
    /// Where to write machine-readable counts of a comparison.
    #[arg(long, requires = "compare")]
    counts_out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding the configuration file.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn scorer_handle(arg: Option<&str>) -> Result<ScorerHandle> {
    match arg {
        Some(s) => s.parse(),
        None => std::env::var(pipeline::SCORER_ENV).map_or(Ok(ScorerHandle::BuiltinLexical), |s| s.parse()),
    }
}

fn verifier_handle(arg: Option<&str>) -> Result<VerifierHandle> {
    match arg {
        Some(s) => s.parse(),
        None => std::env::var(pipeline::VERIFIER_ENV).map_or(Ok(VerifierHandle::Toy), |s| s.parse()),
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value).expect("value serializes");
    writeln!(out).map_err(|e| Error::io("<stdout>", e))
}

fn ner_eval(args: NerEvalArgs) -> Result<()> {
    let (docs, labels) = args.corpus.load()?;
    let mode: EvalMode = args.mode.parse()?;
    let source = parse_entities(&args.pred)?;
    if source == EntitySource::Gold {
        return Err(Error::Config("--pred must name a gazetteer or annotation file".into()));
    }
    let pred = recognize_entities(&docs, &source, &labels)?;
    let classes = args.scheme.as_deref().map(BearClasses::load).transpose()?;
    let project = |spans: &[medclaim::corpus::EntitySpan]| match &classes {
        Some(c) => map_spans(spans, c),
        None => Ok(spans.to_vec()),
    };
    let mut gold_map = BTreeMap::new();
    let mut pred_map = BTreeMap::new();
    for (doc, p) in docs.iter().zip(&pred) {
        gold_map.insert(doc.id.clone(), project(&doc.gold_entities)?);
        pred_map.insert(doc.id.clone(), project(&p.entities)?);
    }
    print_json(&evaluate_ner(&pred_map, &gold_map, mode)?)
}

fn link(args: LinkArgs) -> Result<()> {
    let index = LinkIndex::build(linker::load_kb(&args.kb)?)?;
    let mut linker = Linker {
        index,
        top_k: args.top_k,
        threshold: args.threshold,
    };
    let mut out = io::stdout().lock();
    let write_err = |e| Error::io("<stdout>", e);
    if let Some(corpus) = &args.corpus {
        let labels = parse_labels(&args.labels)?;
        let docs = load_documents(
            corpus,
            &CorpusFormat {
                labels: labels.clone(),
                offsets: OffsetUnit::Chars,
            },
        )?;
        let entities = recognize_entities(&docs, &parse_entities(&args.entities)?, &labels)?;
        let thresholds = if args.sweep.is_empty() {
            vec![args.threshold]
        } else {
            args.sweep.clone()
        };
        writeln!(out, "threshold\tlinked\ttotal\tcoverage").map_err(write_err)?;
        for t in thresholds {
            linker.threshold = t;
            let links = link_entities(&docs, &entities, &linker);
            let total = links.iter().map(|l| l.mentions.len()).sum();
            let linked = links.iter().flat_map(|l| &l.mentions).filter(|m| m.is_linked()).count();
            let c = coverage_from_counts(linked, total);
            writeln!(out, "{t}\t{}\t{}\t{:.4}", c.linked_count, c.total_count, c.fraction).map_err(write_err)?;
        }
        return Ok(());
    }
    let mentions: Vec<String> = if args.mentions.is_empty() {
        io::stdin()
            .lock()
            .lines()
            .collect::<io::Result<_>>()
            .map_err(|e| Error::io("<stdin>", e))?
    } else {
        args.mentions.clone()
    };
    let none = BTreeMap::new();
    for m in mentions.iter().filter(|m| !m.trim().is_empty()) {
        let outcome = linker.resolve(m, &none);
        let candidates = linker.link(&outcome.query);
        let line = serde_json::json!({
            "mention": m,
            "normalized": outcome.normalized(),
            "candidates": candidates,
        });
        writeln!(out, "{line}").map_err(write_err)?;
    }
    Ok(())
}

fn extract(args: ExtractArgs) -> Result<()> {
    let (docs, labels) = args.corpus.load()?;
    let mode: SelectionMode = args.mode.parse()?;
    if args.normalize && mode == SelectionMode::FullText {
        return Err(Error::Config(
            "--normalize cannot be combined with mode full_text".into(),
        ));
    }
    let source = match mode {
        SelectionMode::GoldSeq | SelectionMode::GoldTriple => EntitySource::Gold,
        _ => parse_entities(&args.entities)?,
    };
    let entities = recognize_entities(&docs, &source, &labels)?;
    let links = match (&args.kb, args.normalize) {
        (Some(kb), true) => {
            let linker = Linker {
                index: LinkIndex::build(linker::load_kb(kb)?)?,
                top_k: linker::DEFAULT_TOP_K,
                threshold: args.threshold,
            };
            Some(link_entities(&docs, &entities, &linker))
        }
        _ => None,
    };
    let cands = generate_candidates(&docs, &entities, links.as_deref(), mode)?;
    write_jsonl(&args.out, &cands)?;
    let skipped = cands.iter().filter(|c| c.skipped).count();
    let n: usize = cands.iter().map(|c| c.candidates.len()).sum();
    eprintln!("{} documents, {n} candidates, {skipped} skipped", docs.len());
    Ok(())
}

fn select(args: SelectArgs) -> Result<()> {
    let (docs, _) = args.corpus.load()?;
    let mode: SelectionMode = args.mode.parse()?;
    let mut cands: Vec<DocCandidates> = read_jsonl(&args.candidates)?;
    cands.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    let ids: Vec<&str> = docs.iter().map(|d| d.id.as_str()).collect();
    if cands.iter().map(|c| c.doc_id.as_str()).ne(ids.iter().copied()) {
        return Err(Error::Config(
            "candidates file does not cover exactly the documents of the corpus".into(),
        ));
    }
    let scores = if matches!(mode, SelectionMode::CoreClaim | SelectionMode::GoldSeq) {
        let mut scorer = scorer_handle(args.scorer.as_deref())?.connect()?;
        score_documents(&docs, &cands, mode, scorer.as_mut())?
    } else {
        Vec::new()
    };
    let claims = select_claims(&docs, &cands, &scores, mode, args.seed)?;
    write_jsonl(&args.out, &claims)?;
    eprintln!("{} claims from {} documents", claims.len(), docs.len());
    Ok(())
}

fn check_cmd(args: CheckArgs) -> Result<()> {
    let (docs, _) = args.corpus.load()?;
    let claims: Vec<ClaimCandidate> = read_jsonl(&args.claims)?;
    let metric: MetricVariant = args.metric.parse()?;
    let mut verifier = verifier_handle(args.verifier.as_deref())?.connect(args.overlap_floor)?;
    let records = pipeline::check_claims(&docs, &claims, verifier.as_mut())?;
    write_jsonl(&args.out, &records)?;
    print_json(&evaluate_verdicts(&records, metric)?)
}

fn report(args: ReportArgs) -> Result<()> {
    let mut out = io::stdout().lock();
    let write_err = |e| Error::io("<stdout>", e);
    if let Some(path) = &args.check_table {
        let table = ResultsTable::load(path)?;
        let mut failures = 0;
        for (kind, checks) in [("average", table.check_average()), ("delta", table.check_deltas()?)] {
            for c in checks {
                let ok = c.passes(ROUNDING_TOLERANCE);
                failures += usize::from(!ok);
                writeln!(
                    out,
                    "{}\t{kind}\t{}\t{}\tstored {:.2}\tcomputed {:.2}",
                    if ok { "ok" } else { "FAIL" },
                    c.row,
                    c.column,
                    c.stored,
                    c.computed
                )
                .map_err(write_err)?;
            }
        }
        if failures > 0 {
            return Err(Error::Config(format!(
                "{failures} cells differ by more than {ROUNDING_TOLERANCE}"
            )));
        }
        return Ok(());
    }
    if let [a, b] = args.compare.as_slice() {
        let (run_a, run_b) = (load_predictions(a)?, load_predictions(b)?);
        let m = transition_matrix(&run_a, &run_b);
        let dist = |p: &Predictions| label_distribution(p.values()).0;
        writeln!(out, "run\tSUPPORTS\tREFUTES\tNEI").map_err(write_err)?;
        for (name, d) in [("A", dist(&run_a)), ("B", dist(&run_b))] {
            writeln!(out, "{name}\t{}\t{}\t{}", d[0], d[1], d[2]).map_err(write_err)?;
        }
        write!(out, "\n{}", m.render()).map_err(write_err)?;
        if let Some(path) = &args.counts_out {
            let counts = serde_json::json!({
                "distribution_a": dist(&run_a),
                "distribution_b": dist(&run_b),
                "distribution_a_shared": dist(&restrict_to(&run_a, &run_b)),
                "distribution_b_shared": dist(&restrict_to(&run_b, &run_a)),
                "transitions": m,
                "unchanged": m.diagonal(),
                "shifted": m.off_diagonal(),
            });
            let mut text = serde_json::to_string_pretty(&counts).expect("counts serialize");
            text.push('\n');
            std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        }
        return Ok(());
    }
    if args.results.is_empty() {
        return Err(Error::Config(
            "report needs --results, --check-table or --compare".into(),
        ));
    }
    let metric: MetricVariant = args.metric.parse()?;
    let mut scores = BTreeMap::new();
    for spec in &args.results {
        let (key, file) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected <model>:<variant>=<file>, got {spec:?}")))?;
        let (model, variant) = key
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("expected <model>:<variant>=<file>, got {spec:?}")))?;
        let records: Vec<VerdictRecord> = read_jsonl(file)?;
        scores.insert(
            (model.to_string(), variant.to_string()),
            evaluate_verdicts(&records, metric)?,
        );
    }
    let table = ResultsTable::from_scores(&scores, args.baseline.as_deref())?;
    write!(out, "{}", table.to_tsv()).map_err(write_err)
}

fn run(args: RunArgs) -> Result<()> {
    let mut config = RunConfig::load(&args.config)?;
    config.apply_env()?;
    if let Some(out) = args.output {
        config.output = out;
    }
    let manifest = run_pipeline(&config)?;
    print_json(&manifest)
}

fn serve(args: ServeArgs) -> Result<()> {
    let (stdin, stdout) = (io::stdin().lock(), io::stdout().lock());
    let served = match args.role.as_str() {
        "scorer" => protocol::serve_scores(stdin, stdout, |texts| {
            texts.iter().map(|t| builtin_lexical_score(t)).collect()
        }),
        "verifier" => protocol::serve_verdicts(stdin, stdout, |claim, evidence| {
            toy_verdict(claim, evidence, args.overlap_floor)
        }),
        other => {
            return Err(Error::Config(format!(
                "serve role must be `scorer` or `verifier`, got {other:?}"
            )))
        }
    };
    served.map_err(|e| Error::io("<stdio>", e))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::NerEval(a) => ner_eval(a),
        Command::Link(a) => link(a),
        Command::Extract(a) => extract(a),
        Command::Select(a) => select(a),
        Command::Check(a) => check_cmd(a),
        Command::Report(a) => report(a),
        Command::Run(a) => run(a),
        Command::Serve(a) => serve(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors are input errors; exit code 2 is reserved for
            // protocol failures
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
