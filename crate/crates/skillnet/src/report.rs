//! Result tables: aligned text for the terminal plus machine-readable
//! rows for logs and tests. Averages are always recomputed from the
//! row's own scores, never carried in from outside.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// One table row: a system or configuration name with per-task scores
/// and, optionally, how many parameters that configuration activates.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ReportRow {
    pub system: String,
    pub scores: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub active_params: Option<usize>,
}

impl ReportRow {
    /// Arithmetic mean of the scores present in this row.
    pub fn average(&self) -> Option<f64> {
        if self.scores.is_empty() {
            return None;
        }
        Some(self.scores.values().sum::<f64>() / self.scores.len() as f64)
    }
}

/// A fixed-column comparison table. Column order is the task order given
/// at construction; rows keep insertion order.
#[derive(Debug, Clone)]
pub struct Report {
    tasks: Vec<String>,
    rows: Vec<ReportRow>,
}

impl Report {
    pub fn new<S: Into<String>>(tasks: impl IntoIterator<Item = S>) -> Result<Self> {
        let tasks: Vec<String> = tasks.into_iter().map(Into::into).collect();
        if tasks.is_empty() {
            return Err(Error::InvalidArgument("a report needs columns".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &tasks {
            if !seen.insert(t.clone()) {
                return Err(Error::Duplicate(t.clone()));
            }
        }
        Ok(Self {
            tasks,
            rows: Vec::new(),
        })
    }

    pub fn tasks(&self) -> &[String] {
        &self.tasks
    }

    pub fn rows(&self) -> &[ReportRow] {
        &self.rows
    }

    /// Add a row. Every score must belong to a known column; columns with
    /// no score render as a dash and stay out of the average.
    pub fn push(&mut self, system: &str, scores: BTreeMap<String, f64>) -> Result<()> {
        self.push_row(system, scores, None)
    }

    /// Add a row that also reports its activated-parameter count.
    pub fn push_with_params(
        &mut self,
        system: &str,
        scores: BTreeMap<String, f64>,
        active_params: usize,
    ) -> Result<()> {
        self.push_row(system, scores, Some(active_params))
    }

    fn push_row(
        &mut self,
        system: &str,
        scores: BTreeMap<String, f64>,
        active_params: Option<usize>,
    ) -> Result<()> {
        if let Some(unknown) = scores.keys().find(|k| !self.tasks.contains(k)) {
            return Err(Error::InvalidArgument(format!(
                "score for `{unknown}` has no column"
            )));
        }
        self.rows.push(ReportRow {
            system: system.to_string(),
            scores,
            active_params,
        });
        Ok(())
    }

    /// Aligned text table with a trailing recomputed `avg` column. A
    /// `params` column appears after the system name whenever any row
    /// carries an activated-parameter count.
    pub fn render(&self) -> String {
        let with_params = self.rows.iter().any(|r| r.active_params.is_some());
        let mut headers = vec!["system".to_string()];
        if with_params {
            headers.push("params".to_string());
        }
        headers.extend(self.tasks.iter().cloned());
        headers.push("avg".to_string());
        let mut grid: Vec<Vec<String>> = vec![headers];
        for row in &self.rows {
            let mut cells = vec![row.system.clone()];
            if with_params {
                cells.push(match row.active_params {
                    Some(n) => n.to_string(),
                    None => "-".to_string(),
                });
            }
            for task in &self.tasks {
                cells.push(match row.scores.get(task) {
                    Some(v) => format!("{v:.3}"),
                    None => "-".to_string(),
                });
            }
            cells.push(match row.average() {
                Some(v) => format!("{v:.3}"),
                None => "-".to_string(),
            });
            grid.push(cells);
        }

        let cols = grid[0].len();
        let widths: Vec<usize> = (0..cols)
            .map(|c| grid.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &grid {
            let mut line = String::new();
            for (c, cell) in row.iter().enumerate() {
                if c > 0 {
                    line.push_str("  ");
                }
                line.push_str(cell);
                if c + 1 < cols {
                    for _ in cell.len()..widths[c] {
                        line.push(' ');
                    }
                }
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
        out
    }

    /// One JSON object per row, full precision, with the recomputed
    /// average attached.
    pub fn machine_rows(&self) -> Vec<serde_json::Value> {
        self.rows
            .iter()
            .map(|row| {
                let mut v = serde_json::to_value(row).expect("plain fields serialize");
                v["avg"] = serde_json::json!(row.average());
                v
            })
            .collect()
    }

    /// The machine rows as one JSON line each.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for row in self.machine_rows() {
            out.push_str(&row.to_string());
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn averages_are_recomputed_from_row_scores() {
        let mut report = Report::new(["sentiment", "topic", "ner"]).unwrap();
        report
            .push("skill-routed", scores(&[("sentiment", 0.9), ("topic", 0.8), ("ner", 0.7)]))
            .unwrap();
        let avg = report.rows()[0].average().unwrap();
        assert!((avg - 0.8).abs() < 1e-12);

        // a partial row averages over what it has
        report
            .push("dense", scores(&[("sentiment", 0.5), ("ner", 0.9)]))
            .unwrap();
        assert!((report.rows()[1].average().unwrap() - 0.7).abs() < 1e-12);
        assert!(ReportRow {
            system: "empty".into(),
            scores: BTreeMap::new(),
            active_params: None,
        }
        .average()
        .is_none());
    }

    #[test]
    fn rendered_columns_line_up() {
        let mut report = Report::new(["sentiment", "nli"]).unwrap();
        report
            .push("skill-routed", scores(&[("sentiment", 0.953), ("nli", 0.91)]))
            .unwrap();
        report
            .push("a-much-longer-system-name", scores(&[("sentiment", 1.0), ("nli", 0.5)]))
            .unwrap();
        let text = report.render();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);

        // every task header sits at the same offset as its column values
        for task in ["sentiment", "nli", "avg"] {
            let offset = lines[0].find(task).unwrap();
            for line in &lines[1..] {
                let cell: String = line[offset..]
                    .chars()
                    .take_while(|c| !c.is_whitespace())
                    .collect();
                assert!(
                    cell.parse::<f64>().is_ok() || cell == "-",
                    "column {task} misaligned: {cell:?}"
                );
            }
        }
        assert!(lines[1].starts_with("skill-routed "));
    }

    #[test]
    fn missing_scores_render_as_dashes_and_skip_the_average() {
        let mut report = Report::new(["sentiment", "topic"]).unwrap();
        report
            .push("dense", scores(&[("topic", 0.6)]))
            .unwrap();
        let text = report.render();
        let row = text.lines().nth(1).unwrap();
        assert!(row.contains('-'));
        assert!(row.trim_end().ends_with("0.600"));
    }

    #[test]
    fn machine_rows_keep_full_precision() {
        let mut report = Report::new(["sentiment"]).unwrap();
        let exact = 0.123_456_789_012_345_6;
        report.push("moe", scores(&[("sentiment", exact)])).unwrap();
        let rows = report.machine_rows();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0]["scores"]["sentiment"].as_f64().unwrap(), exact);
        assert_eq!(rows[0]["avg"].as_f64().unwrap(), exact);
        let jsonl = report.to_jsonl();
        assert_eq!(jsonl.lines().count(), 1);
        let parsed: serde_json::Value = serde_json::from_str(jsonl.trim()).unwrap();
        assert_eq!(parsed["system"], "moe");
    }

    #[test]
    fn parameter_counts_get_their_own_column_when_present() {
        let mut report = Report::new(["sentiment"]).unwrap();
        report
            .push_with_params("skill-routed", scores(&[("sentiment", 0.9)]), 1234)
            .unwrap();
        report.push("dense", scores(&[("sentiment", 0.8)])).unwrap();
        let text = report.render();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].contains("params"));
        assert!(lines[1].contains("1234"));
        // a row without a count shows a dash in that column
        let offset = lines[0].find("params").unwrap();
        assert_eq!(&lines[2][offset..offset + 1], "-");

        let rows = report.machine_rows();
        assert_eq!(rows[0]["active_params"].as_u64(), Some(1234));
        assert!(rows[1].get("active_params").is_none());

        // without counts the column stays out entirely
        let mut plain = Report::new(["sentiment"]).unwrap();
        plain.push("moe", scores(&[("sentiment", 0.7)])).unwrap();
        assert!(!plain.render().contains("params"));
    }

    #[test]
    fn unknown_columns_and_duplicate_columns_are_rejected() {
        let mut report = Report::new(["sentiment"]).unwrap();
        assert!(report.push("x", scores(&[("nli", 0.4)])).is_err());
        assert!(Report::new(["a", "a"]).is_err());
        assert!(Report::new(Vec::<String>::new()).is_err());
    }
}
