//! Bundled reference tables: a full image-level confusion matrix, four
//! worked vote examples, the voted case-level matrix, and three users'
//! metric rows with their means. They drive the exact-arithmetic
//! acceptance checks and the `tables` subcommand, no model required.
//!
//! The files live under `fixtures/` and are embedded at compile time; a
//! directory of the same file names can be supplied to override them.

use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::corpus::DiagnosticCategory;
use crate::error::{Error, Result};
use crate::eval::{self, aggregate_users, ConfusionMatrix2, ConfusionMatrix4, MetricRow};

pub const TABLE1_FILE: &str = "table1_image_confusion.json";
pub const TABLE3_FILE: &str = "table3_vote_examples.json";
pub const TABLE4_FILE: &str = "table4_case_confusion.json";
pub const TABLE5_FILE: &str = "table5_user_metrics.json";

#[derive(Debug, Clone, Deserialize)]
pub struct Table1Fixture {
    pub user: String,
    pub counts: [[u64; 4]; 4],
}

#[derive(Debug, Clone, Deserialize)]
pub struct VoteExample {
    pub observed: u8,
    pub predicted: [u8; 5],
    /// Votes agreeing with the observed binary label, as printed ("2/5").
    pub agree: String,
    pub outcome: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct Table4Fixture {
    pub user: String,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tp: u64,
}

#[derive(Debug, Clone, Deserialize)]
pub struct Table5Row {
    pub user: String,
    pub accuracy: String,
    pub sensitivity: String,
    pub specificity: String,
    pub ppv: String,
    pub npv: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct Table5Fixture {
    pub rows: Vec<Table5Row>,
    pub means: Table5Row,
}

#[derive(Debug, Clone)]
pub struct FixtureSet {
    pub table1: Table1Fixture,
    pub table3: Vec<VoteExample>,
    pub table4: Table4Fixture,
    pub table5: Table5Fixture,
}

impl Table1Fixture {
    pub fn matrix(&self) -> ConfusionMatrix4 {
        ConfusionMatrix4 { counts: self.counts }
    }
}

impl Table4Fixture {
    pub fn matrix(&self) -> ConfusionMatrix2 {
        ConfusionMatrix2::new(self.tn, self.fp, self.fn_, self.tp)
    }
}

impl Table5Row {
    pub fn metric_row(&self) -> Result<MetricRow> {
        let parse = |name: &str, s: &str| -> Result<Option<i64>> {
            eval::parse_percent_centi(s)
                .map(Some)
                .ok_or_else(|| Error::InvalidRecord {
                    kind: "table5 row".into(),
                    id: self.user.clone(),
                    reason: format!("unparseable {name} percentage {s:?}"),
                })
        };
        Ok(MetricRow {
            label: self.user.clone(),
            values: [
                parse("accuracy", &self.accuracy)?,
                parse("sensitivity", &self.sensitivity)?,
                parse("specificity", &self.specificity)?,
                parse("ppv", &self.ppv)?,
                parse("npv", &self.npv)?,
            ],
        })
    }
}

impl VoteExample {
    pub fn observed_category(&self) -> Result<DiagnosticCategory> {
        DiagnosticCategory::from_code(self.observed).ok_or_else(|| Error::UnknownCategory {
            kind: "vote example".into(),
            id: format!("observed {}", self.observed),
            code: self.observed as i64,
        })
    }

    pub fn predicted_categories(&self) -> Result<Vec<DiagnosticCategory>> {
        self.predicted
            .iter()
            .map(|&c| {
                DiagnosticCategory::from_code(c).ok_or_else(|| Error::UnknownCategory {
                    kind: "vote example".into(),
                    id: format!("predicted {c}"),
                    code: c as i64,
                })
            })
            .collect()
    }
}

fn parse_json<T: for<'de> Deserialize<'de>>(name: &str, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::InvalidRecord {
        kind: "fixture".into(),
        id: name.to_string(),
        reason: e.to_string(),
    })
}

/// The fixtures compiled into the binary.
pub fn embedded() -> FixtureSet {
    FixtureSet {
        table1: parse_json(TABLE1_FILE, include_str!("../fixtures/table1_image_confusion.json"))
            .expect("embedded table 1"),
        table3: parse_json(TABLE3_FILE, include_str!("../fixtures/table3_vote_examples.json"))
            .expect("embedded table 3"),
        table4: parse_json(TABLE4_FILE, include_str!("../fixtures/table4_case_confusion.json"))
            .expect("embedded table 4"),
        table5: parse_json(TABLE5_FILE, include_str!("../fixtures/table5_user_metrics.json"))
            .expect("embedded table 5"),
    }
}

/// Load the four fixture files from a directory.
pub fn load_dir(dir: &Path) -> Result<FixtureSet> {
    let read = |name: &str| -> Result<String> {
        let path = dir.join(name);
        fs::read_to_string(&path).map_err(|e| Error::io(path, e))
    };
    Ok(FixtureSet {
        table1: parse_json(TABLE1_FILE, &read(TABLE1_FILE)?)?,
        table3: parse_json(TABLE3_FILE, &read(TABLE3_FILE)?)?,
        table4: parse_json(TABLE4_FILE, &read(TABLE4_FILE)?)?,
        table5: parse_json(TABLE5_FILE, &read(TABLE5_FILE)?)?,
    })
}

/// Render the full table suite from fixtures: the image-level matrix, its
/// grouped collapse, the vote examples, the voted case matrix with its
/// metric block, and the per-user rows with a freshly computed means row.
pub fn render_tables(fixtures: &FixtureSet) -> Result<String> {
    let mut out = String::new();

    let m4 = fixtures.table1.matrix();
    out.push_str(&eval::render_confusion4(
        &format!("Table 1 - image-by-image confusion ({})", fixtures.table1.user),
        &m4,
    ));
    out.push('\n');

    let grouped = eval::group_confusion(&m4);
    out.push_str(&eval::render_confusion2(
        &format!("Table 2 - grouped ranking ({})", fixtures.table1.user),
        ("negative (0|1)", "positive (2|3)"),
        &grouped,
    ));
    out.push_str(&eval::render_metrics(
        "Image-level grouped metrics:",
        &eval::diagnostic_metrics(&grouped),
    ));
    out.push('\n');

    out.push_str("Table 3 - majority voting examples\n");
    for (i, example) in fixtures.table3.iter().enumerate() {
        let observed = example.observed_category()?;
        let predicted = example.predicted_categories()?;
        let votes: Vec<_> = predicted.iter().map(|c| c.group()).collect();
        let call = eval::majority_vote(&votes)?;
        let agree = votes.iter().filter(|&&v| v == observed.group()).count();
        let outcome = if call == observed.group() { "Correct" } else { "Incorrect" };
        let codes: Vec<String> = predicted.iter().map(|c| c.to_string()).collect();
        out.push_str(&format!(
            "  example {} observed {}  predicted [{}]  {}/5 -> {}\n",
            i + 1,
            observed.code(),
            codes.join(","),
            agree,
            outcome
        ));
    }
    out.push('\n');

    let case = fixtures.table4.matrix();
    out.push_str(&eval::render_confusion2(
        &format!("Table 4 - majority voting with grouped ranking ({})", fixtures.table4.user),
        ("negative", "positive"),
        &case,
    ));
    out.push_str(&eval::render_metrics(
        "Case-level voted metrics:",
        &eval::diagnostic_metrics(&case),
    ));
    out.push('\n');

    let rows: Vec<MetricRow> = fixtures
        .table5
        .rows
        .iter()
        .map(|r| r.metric_row())
        .collect::<Result<_>>()?;
    let means = aggregate_users(&rows)?;
    out.push_str(&eval::render_metric_table(
        "Table 5 - per-user metrics",
        &rows,
        Some(&means),
    ));
    Ok(out)
}
