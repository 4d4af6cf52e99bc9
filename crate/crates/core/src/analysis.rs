//! Comparison of two prediction runs: label distributions and label
//! transitions over the shared document ids.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::VerdictLabel;
use crate::error::{Error, Result};

pub type Predictions = BTreeMap<String, VerdictLabel>;

/// The part of a verdict line analysis needs; verdict result files parse
/// as-is.
#[derive(Debug, Deserialize)]
struct PredictionRecord {
    doc_id: String,
    predicted: VerdictLabel,
}

/// Reads `{"doc_id", "predicted"}` lines; a repeated id is an error.
pub fn read_predictions<R: BufRead>(reader: R, path: &Path) -> Result<Predictions> {
    let mut out = Predictions::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: PredictionRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if out.insert(rec.doc_id.clone(), rec.predicted).is_some() {
            return Err(parse_err(format!("duplicate document id {:?}", rec.doc_id)));
        }
    }
    Ok(out)
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Predictions> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_predictions(std::io::BufReader::new(file), path)
}

/// Counts indexed by [`VerdictLabel::index`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts(pub [usize; 3]);

impl LabelCounts {
    pub fn get(&self, label: VerdictLabel) -> usize {
        self.0[label.index()]
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }
}

pub fn label_distribution<'a>(preds: impl IntoIterator<Item = &'a VerdictLabel>) -> LabelCounts {
    let mut c = LabelCounts::default();
    for l in preds {
        c.0[l.index()] += 1;
    }
    c
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    /// `counts[a][b]`: label `a` in run A, label `b` in run B.
    pub counts: [[usize; 3]; 3],
    pub n_only_a: usize,
    pub n_only_b: usize,
}

impl TransitionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// Documents whose label did not change.
    pub fn diagonal(&self) -> usize {
        (0..3).map(|i| self.counts[i][i]).sum()
    }

    pub fn off_diagonal(&self) -> usize {
        self.total() - self.diagonal()
    }

    pub fn row_sums(&self) -> LabelCounts {
        LabelCounts(self.counts.map(|r| r.iter().sum()))
    }

    pub fn column_sums(&self) -> LabelCounts {
        LabelCounts(std::array::from_fn(|j| self.counts.iter().map(|r| r[j]).sum()))
    }

    pub fn transpose(&self) -> Self {
        Self {
            counts: std::array::from_fn(|i| std::array::from_fn(|j| self.counts[j][i])),
            n_only_a: self.n_only_b,
            n_only_b: self.n_only_a,
        }
    }

    /// Plain-text table with run A labels as rows.
    pub fn render(&self) -> String {
        let mut out = String::from("A\\B");
        for l in VerdictLabel::ALL {
            let _ = write!(out, "\t{l}");
        }
        out.push('\n');
        for a in VerdictLabel::ALL {
            let _ = write!(out, "{a}");
            for b in VerdictLabel::ALL {
                let _ = write!(out, "\t{}", self.counts[a.index()][b.index()]);
            }
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "unchanged {}, shifted {}, only in A {}, only in B {}",
            self.diagonal(),
            self.off_diagonal(),
            self.n_only_a,
            self.n_only_b
        );
        out
    }
}

/// Transitions over ids present in both runs; the rest are tallied in
/// `n_only_a` / `n_only_b` instead of being coerced to a label.
pub fn transition_matrix(run_a: &Predictions, run_b: &Predictions) -> TransitionMatrix {
    let mut m = TransitionMatrix::default();
    for (id, a) in run_a {
        match run_b.get(id) {
            Some(b) => m.counts[a.index()][b.index()] += 1,
            None => m.n_only_a += 1,
        }
    }
    m.n_only_b = run_b.keys().filter(|id| !run_a.contains_key(*id)).count();
    m
}

/// `preds` restricted to ids that also occur in `other`.
pub fn restrict_to(preds: &Predictions, other: &Predictions) -> Predictions {
    preds
        .iter()
        .filter(|(id, _)| other.contains_key(*id))
        .map(|(id, l)| (id.clone(), *l))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use VerdictLabel::{Nei, Refutes, Supports};

    fn label() -> impl Strategy<Value = VerdictLabel> {
        prop_oneof![Just(Supports), Just(Refutes), Just(Nei)]
    }

    fn preds() -> impl Strategy<Value = Predictions> {
        proptest::collection::btree_map("[a-f][0-9]", label(), 0..40)
    }

    #[test]
    fn reads_prediction_lines() {
        let text = "{\"doc_id\":\"a\",\"predicted\":\"NEI\",\"gold\":\"SUPPORTS\"}\n\n{\"doc_id\":\"b\",\"predicted\":\"REFUTES\"}\n";
        let p = read_predictions(text.as_bytes(), Path::new("p.jsonl")).unwrap();
        assert_eq!(p["a"], Nei);
        assert_eq!(p["b"], Refutes);
        let dup = "{\"doc_id\":\"a\",\"predicted\":\"NEI\"}\n{\"doc_id\":\"a\",\"predicted\":\"NEI\"}\n";
        assert!(read_predictions(dup.as_bytes(), Path::new("p.jsonl")).is_err());
    }

    #[test]
    fn empty_distribution() {
        assert_eq!(label_distribution(Predictions::new().values()), LabelCounts([0, 0, 0]));
    }

    #[test]
    fn identical_runs_stay_on_the_diagonal() {
        let a: Predictions = [("x", Supports), ("y", Nei), ("z", Refutes)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let m = transition_matrix(&a, &a);
        assert_eq!((m.diagonal(), m.off_diagonal()), (3, 0));
    }

    #[test]
    fn one_sided_ids_are_counted_apart() {
        let a: Predictions = [("x".to_string(), Supports), ("y".to_string(), Nei)].into();
        let b: Predictions = [("y".to_string(), Supports), ("w".to_string(), Refutes)].into();
        let m = transition_matrix(&a, &b);
        assert_eq!(m.total(), 1);
        assert_eq!(m.counts[Nei.index()][Supports.index()], 1);
        assert_eq!((m.n_only_a, m.n_only_b), (1, 1));
    }

    proptest! {
        #[test]
        fn marginals_match_restricted_distributions(a in preds(), b in preds()) {
            let m = transition_matrix(&a, &b);
            prop_assert_eq!(m.row_sums(), label_distribution(restrict_to(&a, &b).values()));
            prop_assert_eq!(m.column_sums(), label_distribution(restrict_to(&b, &a).values()));
            prop_assert_eq!(m.total() + m.n_only_a, a.len());
        }

        #[test]
        fn swapping_runs_transposes(a in preds(), b in preds()) {
            prop_assert_eq!(transition_matrix(&a, &b).transpose(), transition_matrix(&b, &a));
        }
    }
}
