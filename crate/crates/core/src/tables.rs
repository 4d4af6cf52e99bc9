//! Results tables: P/R/F1/Δ per model and input-claim variant, stored as
//! tab-separated text on the percent scale.
//!
//! ```text
//! # baseline: full
//! model  seq.P  seq.R  seq.F1  seq.delta  full.P  full.R  full.F1
//! fever  83.3  1.9  3.7  3.7  0.0  0.0  0.0
//! average  83.3  1.9  3.7  3.7  0.0  0.0  0.0
//! ```
//!
//! Fields are separated by tabs (shown as spaces above). Columns are
//! `<variant>.<P|R|F1|delta>`; a `delta` column holds the
//! variant's F1 minus the baseline variant's F1. The row named `average`
//! is optional and must come last.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use crate::error::{Error, Result};
use crate::verdict::{delta_full, round1, VerdictScore, F1};

pub const AVERAGE_ROW: &str = "average";
/// Tolerance for checks against values printed with one decimal.
pub const ROUNDING_TOLERANCE: f64 = 0.05;
/// Slack for binary floating point on top of the rounding tolerance.
const EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub model: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultsTable {
    pub baseline: Option<String>,
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
    pub average: Option<Vec<f64>>,
}

/// One recomputed cell against its stored value.
#[derive(Debug, Clone, PartialEq)]
pub struct CellCheck {
    pub row: String,
    pub column: String,
    pub stored: f64,
    pub computed: f64,
}

impl CellCheck {
    pub fn diff(&self) -> f64 {
        (self.stored - self.computed).abs()
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.diff() <= tolerance + EPS
    }
}

fn split_column(name: &str) -> Option<(&str, &str)> {
    name.rsplit_once('.')
}

impl ResultsTable {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(std::io::BufReader::new(file), path)
    }

    pub fn read<R: BufRead>(reader: R, path: &Path) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut table = ResultsTable::default();
        let mut header_seen = false;
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let lineno = i + 1;
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(b) = comment.trim().strip_prefix("baseline:") {
                    table.baseline = Some(b.trim().to_string());
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
            if !header_seen {
                if fields.first() != Some(&"model") {
                    return Err(parse_err(lineno, "header must start with `model`".into()));
                }
                for c in &fields[1..] {
                    match split_column(c) {
                        Some((_, "P" | "R" | "F1" | "delta")) => {}
                        _ => return Err(parse_err(lineno, format!("bad column name {c:?}"))),
                    }
                }
                table.columns = fields[1..].iter().map(|s| s.to_string()).collect();
                header_seen = true;
                continue;
            }
            if table.average.is_some() {
                return Err(parse_err(lineno, "rows after the average row".into()));
            }
            if fields.len() != table.columns.len() + 1 {
                return Err(parse_err(
                    lineno,
                    format!("expected {} fields, found {}", table.columns.len() + 1, fields.len()),
                ));
            }
            let values = fields[1..]
                .iter()
                .map(|v| v.parse::<f64>().map_err(|e| parse_err(lineno, format!("{v:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if fields[0] == AVERAGE_ROW {
                table.average = Some(values);
            } else {
                table.rows.push(TableRow {
                    model: fields[0].to_string(),
                    values,
                });
            }
        }
        if !header_seen {
            return Err(parse_err(0, "missing header".into()));
        }
        Ok(table)
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    fn is_delta(name: &str) -> bool {
        split_column(name).is_some_and(|(_, m)| m == "delta")
    }

    /// Column means of the model rows against the stored average row, for
    /// every measured (non-delta) column. Empty when there is no average
    /// row.
    pub fn check_average(&self) -> Vec<CellCheck> {
        let Some(avg) = &self.average else {
            return Vec::new();
        };
        let n = self.rows.len() as f64;
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, c)| !Self::is_delta(c))
            .map(|(j, c)| CellCheck {
                row: AVERAGE_ROW.into(),
                column: c.clone(),
                stored: avg[j],
                computed: self.rows.iter().map(|r| r.values[j]).sum::<f64>() / n,
            })
            .collect()
    }

    /// Every stored Δ cell (average row included) against `delta_full` of
    /// the same row's variant and baseline F1.
    pub fn check_deltas(&self) -> Result<Vec<CellCheck>> {
        let mut out = Vec::new();
        let deltas: Vec<(usize, &str)> = self
            .columns
            .iter()
            .enumerate()
            .filter(|(_, c)| Self::is_delta(c))
            .map(|(j, c)| (j, split_column(c).expect("checked").0))
            .collect();
        if deltas.is_empty() {
            return Ok(out);
        }
        let baseline = self
            .baseline
            .as_deref()
            .ok_or_else(|| Error::Config("table has delta columns but no baseline".into()))?;
        let full = self
            .column(&format!("{baseline}.F1"))
            .ok_or_else(|| Error::Config(format!("no F1 column for baseline {baseline:?}")))?;
        let rows = self
            .rows
            .iter()
            .map(|r| (r.model.as_str(), &r.values))
            .chain(self.average.iter().map(|v| (AVERAGE_ROW, v)));
        for (model, values) in rows {
            for &(j, variant) in &deltas {
                let f1 = self
                    .column(&format!("{variant}.F1"))
                    .ok_or_else(|| Error::Config(format!("no F1 column for variant {variant:?}")))?;
                out.push(CellCheck {
                    row: model.to_string(),
                    column: self.columns[j].clone(),
                    stored: values[j],
                    computed: delta_full(F1::percent(values[f1])?, F1::percent(values[full])?)?,
                });
            }
        }
        Ok(out)
    }

    /// Builds a table from scores keyed by (model, variant). Values are
    /// percentages rounded to one decimal; Δ and the average row are
    /// computed from the rounded cells, so a written table passes its own
    /// checks.
    pub fn from_scores(scores: &BTreeMap<(String, String), VerdictScore>, baseline: Option<&str>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::EmptyInput("results table"));
        }
        let mut variants: Vec<&str> = Vec::new();
        for (_, v) in scores.keys() {
            if !variants.contains(&v.as_str()) {
                variants.push(v);
            }
        }
        variants.sort_unstable();
        if let Some(b) = baseline {
            if !variants.contains(&b) {
                return Err(Error::Config(format!("baseline variant {b:?} has no results")));
            }
        }
        let mut columns = Vec::new();
        for v in &variants {
            for m in ["P", "R", "F1"] {
                columns.push(format!("{v}.{m}"));
            }
            if baseline.is_some_and(|b| b != *v) {
                columns.push(format!("{v}.delta"));
            }
        }
        let mut models: Vec<&str> = scores.keys().map(|(m, _)| m.as_str()).collect();
        models.dedup();
        let mut table = ResultsTable {
            baseline: baseline.map(str::to_string),
            columns,
            rows: Vec::new(),
            average: None,
        };
        for model in models {
            let mut values = vec![0.0; table.columns.len()];
            for v in &variants {
                let s = scores
                    .get(&(model.to_string(), v.to_string()))
                    .ok_or_else(|| Error::Config(format!("model {model:?} has no results for variant {v:?}")))?;
                for (m, x) in [("P", s.precision), ("R", s.recall), ("F1", s.f1)] {
                    values[table.column(&format!("{v}.{m}")).expect("column exists")] = round1(100.0 * x);
                }
            }
            table.fill_deltas(&mut values)?;
            table.rows.push(TableRow {
                model: model.to_string(),
                values,
            });
        }
        let n = table.rows.len() as f64;
        let mut avg: Vec<f64> = (0..table.columns.len())
            .map(|j| round1(table.rows.iter().map(|r| r.values[j]).sum::<f64>() / n))
            .collect();
        table.fill_deltas(&mut avg)?;
        table.average = Some(avg);
        Ok(table)
    }

    fn fill_deltas(&self, values: &mut [f64]) -> Result<()> {
        let Some(b) = &self.baseline else { return Ok(()) };
        let full = values[self.column(&format!("{b}.F1")).expect("baseline column")];
        for (j, c) in self.columns.iter().enumerate() {
            if let Some((v, "delta")) = split_column(c) {
                let f1 = values[self.column(&format!("{v}.F1")).expect("variant column")];
                values[j] = round1(delta_full(F1::percent(f1)?, F1::percent(full)?)?);
            }
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        if let Some(b) = &self.baseline {
            let _ = writeln!(out, "# baseline: {b}");
        }
        let _ = writeln!(out, "model\t{}", self.columns.join("\t"));
        let fmt_row = |out: &mut String, name: &str, values: &[f64]| {
            let cells: Vec<String> = values.iter().map(|v| format!("{v:.1}")).collect();
            let _ = writeln!(out, "{name}\t{}", cells.join("\t"));
        };
        for r in &self.rows {
            fmt_row(&mut out, &r.model, &r.values);
        }
        if let Some(avg) = &self.average {
            fmt_row(&mut out, AVERAGE_ROW, avg);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verdict::VerdictCounts;

    const SMALL: &str = "# baseline: full\n\
        model\tseq.P\tseq.F1\tseq.delta\tfull.P\tfull.F1\n\
        a\t80.0\t30.0\t20.0\t50.0\t10.0\n\
        b\t60.0\t10.0\t-10.0\t70.0\t20.0\n\
        average\t70.0\t20.0\t5.0\t60.0\t15.0\n";

    fn parse(s: &str) -> Result<ResultsTable> {
        ResultsTable::read(s.as_bytes(), Path::new("t.tsv"))
    }

    #[test]
    fn parses_and_checks() {
        let t = parse(SMALL).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.baseline.as_deref(), Some("full"));
        let avg = t.check_average();
        assert_eq!(avg.len(), 4);
        assert!(avg.iter().all(|c| c.passes(ROUNDING_TOLERANCE)));
        let d = t.check_deltas().unwrap();
        assert_eq!(d.len(), 3);
        assert!(d.iter().all(|c| c.passes(ROUNDING_TOLERANCE)));
    }

    #[test]
    fn detects_inconsistent_average() {
        let t = parse(&SMALL.replace("average\t70.0", "average\t70.2")).unwrap();
        let bad: Vec<_> = t
            .check_average()
            .into_iter()
            .filter(|c| !c.passes(ROUNDING_TOLERANCE))
            .collect();
        assert_eq!(bad.len(), 1);
        assert_eq!(bad[0].column, "seq.P");
    }

    #[test]
    fn rejects_malformed_tables() {
        assert!(parse("name\ta.P\n").is_err());
        assert!(parse("model\ta.X\n").is_err());
        assert!(parse("model\ta.P\nx\t1\t2\n").is_err());
        assert!(parse("model\ta.P\naverage\t1\nx\t1\n").is_err());
        assert!(parse("model\ta.F1\ta.delta\nx\t1\t1\n")
            .unwrap()
            .check_deltas()
            .is_err());
    }

    #[test]
    fn written_tables_round_trip_and_pass_checks() {
        let score = |f1: f64| VerdictScore {
            precision: 0.5,
            recall: 0.25,
            f1,
            counts: VerdictCounts::default(),
        };
        let mut scores = BTreeMap::new();
        scores.insert(("m1".to_string(), "full".to_string()), score(0.104));
        scores.insert(("m1".to_string(), "seq".to_string()), score(0.376));
        scores.insert(("m2".to_string(), "full".to_string()), score(0.452));
        scores.insert(("m2".to_string(), "seq".to_string()), score(0.419));
        let t = ResultsTable::from_scores(&scores, Some("full")).unwrap();
        let again = parse(&t.to_tsv()).unwrap();
        assert_eq!(again, t);
        assert_eq!(t.rows[1].values[t.column("seq.delta").unwrap()], -3.3);
        assert!(t.check_deltas().unwrap().iter().all(|c| c.passes(ROUNDING_TOLERANCE)));
        assert!(t.check_average().iter().all(|c| c.passes(ROUNDING_TOLERANCE)));
    }
}
