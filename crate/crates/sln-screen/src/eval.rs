//! Results arithmetic: 4x4 and binary confusion matrices, grouped-rank
//! binarization, 5-patch majority voting, diagnostic statistics, and
//! multi-user aggregation.
//!
//! Metrics are exact integer rationals; percentages are a rendering
//! concern (two decimals, round half-up). A zero denominator is a
//! distinguished "not computable" value so it can never silently skew a
//! mean.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use crate::corpus::{BinaryLabel, DiagnosticCategory, VoteSet, VOTES_PER_SET};
use crate::error::{Error, Result};

pub const METRIC_NAMES: [&str; 5] = ["accuracy", "sensitivity", "specificity", "ppv", "npv"];

/// One scored patch: what was observed, what the model said.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub patch_id: String,
    pub slide_id: String,
    pub case_id: String,
    pub observed: DiagnosticCategory,
    pub predicted: DiagnosticCategory,
    pub probs: [f32; 4],
}

/// Counts indexed by observed then predicted category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix4 {
    pub counts: [[u64; 4]; 4],
}

impl ConfusionMatrix4 {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..4).map(|i| self.counts[i][i]).sum()
    }

    /// Image-by-image accuracy: trace / total.
    pub fn accuracy(&self) -> MetricValue {
        MetricValue::ratio(self.trace(), self.total())
    }
}

/// Binary counts: observed x predicted over the clinical grouping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix2 {
    pub true_negative: u64,
    pub false_positive: u64,
    pub false_negative: u64,
    pub true_positive: u64,
}

impl ConfusionMatrix2 {
    pub fn new(tn: u64, fp: u64, fn_: u64, tp: u64) -> Self {
        ConfusionMatrix2 {
            true_negative: tn,
            false_positive: fp,
            false_negative: fn_,
            true_positive: tp,
        }
    }

    pub fn total(&self) -> u64 {
        self.true_negative + self.false_positive + self.false_negative + self.true_positive
    }

    pub fn record(&mut self, observed: BinaryLabel, predicted: BinaryLabel) {
        match (observed, predicted) {
            (BinaryLabel::Negative, BinaryLabel::Negative) => self.true_negative += 1,
            (BinaryLabel::Negative, BinaryLabel::Positive) => self.false_positive += 1,
            (BinaryLabel::Positive, BinaryLabel::Negative) => self.false_negative += 1,
            (BinaryLabel::Positive, BinaryLabel::Positive) => self.true_positive += 1,
        }
    }
}

/// An exact rational metric, or the explicit marker for a zero
/// denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricValue {
    Ratio { num: u64, den: u64 },
    NotComputable,
}

impl MetricValue {
    pub fn ratio(num: u64, den: u64) -> Self {
        if den == 0 {
            MetricValue::NotComputable
        } else {
            MetricValue::Ratio { num, den }
        }
    }

    /// Percentage in hundredths of a point, rounded half-up:
    /// 59/64 -> 9219 (i.e. 92.19%).
    pub fn percent_centi(&self) -> Option<i64> {
        match *self {
            MetricValue::Ratio { num, den } => Some(div_round_half_up(10_000 * num, den) as i64),
            MetricValue::NotComputable => None,
        }
    }

    /// Canonical percentage rendering, two decimals.
    pub fn render_percent(&self) -> String {
        match self.percent_centi() {
            Some(c) => render_centi(c),
            None => "not computable".to_string(),
        }
    }

    pub fn render_fraction(&self) -> String {
        match *self {
            MetricValue::Ratio { num, den } => format!("{num}/{den}"),
            MetricValue::NotComputable => "-".to_string(),
        }
    }
}

impl fmt::Display for MetricValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricValue::Ratio { .. } => {
                write!(f, "{} = {}%", self.render_fraction(), self.render_percent())
            }
            MetricValue::NotComputable => write!(f, "not computable"),
        }
    }
}

pub fn div_round_half_up(a: u64, b: u64) -> u64 {
    assert!(b > 0);
    (2 * a + b) / (2 * b)
}

/// "9219" -> "92.19".
pub fn render_centi(centi: i64) -> String {
    format!("{}.{:02}", centi / 100, centi % 100)
}

/// Parse a percentage with up to two decimals into hundredths:
/// "92.19" -> 9219, "95" -> 9500, "87.5" -> 8750.
pub fn parse_percent_centi(s: &str) -> Option<i64> {
    let (int_part, frac_part) = match s.split_once('.') {
        Some((i, f)) => (i, f),
        None => (s, ""),
    };
    if frac_part.len() > 2 || int_part.is_empty() {
        return None;
    }
    let int: i64 = int_part.parse().ok()?;
    let frac: i64 = if frac_part.is_empty() {
        0
    } else {
        let padded = format!("{frac_part:0<2}");
        padded.parse().ok()?
    };
    Some(int * 100 + frac)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiagnosticMetrics {
    pub accuracy: MetricValue,
    pub sensitivity: MetricValue,
    pub specificity: MetricValue,
    pub ppv: MetricValue,
    pub npv: MetricValue,
}

impl DiagnosticMetrics {
    pub fn values(&self) -> [MetricValue; 5] {
        [self.accuracy, self.sensitivity, self.specificity, self.ppv, self.npv]
    }

    pub fn centi_row(&self) -> [Option<i64>; 5] {
        let v = self.values();
        [
            v[0].percent_centi(),
            v[1].percent_centi(),
            v[2].percent_centi(),
            v[3].percent_centi(),
            v[4].percent_centi(),
        ]
    }
}

/// The five diagnostic statistics of a binary confusion matrix.
pub fn diagnostic_metrics(m: &ConfusionMatrix2) -> DiagnosticMetrics {
    let (tn, fp, fn_, tp) = (m.true_negative, m.false_positive, m.false_negative, m.true_positive);
    DiagnosticMetrics {
        accuracy: MetricValue::ratio(tp + tn, m.total()),
        sensitivity: MetricValue::ratio(tp, tp + fn_),
        specificity: MetricValue::ratio(tn, tn + fp),
        ppv: MetricValue::ratio(tp, tp + fp),
        npv: MetricValue::ratio(tn, tn + fn_),
    }
}

/// Count observed vs predicted categories.
pub fn tabulate_confusion4(rows: &[PredictionRow]) -> ConfusionMatrix4 {
    let mut m = ConfusionMatrix4::default();
    for row in rows {
        m.counts[row.observed.code() as usize][row.predicted.code() as usize] += 1;
    }
    m
}

/// Collapse the 4x4 matrix onto the clinical binary grouping. The total
/// is preserved exactly.
pub fn group_confusion(m: &ConfusionMatrix4) -> ConfusionMatrix2 {
    let mut out = ConfusionMatrix2::default();
    for o in 0..4 {
        for p in 0..4 {
            let observed = DiagnosticCategory::from_code(o as u8).unwrap().group();
            let predicted = DiagnosticCategory::from_code(p as u8).unwrap().group();
            match (observed, predicted) {
                (BinaryLabel::Negative, BinaryLabel::Negative) => out.true_negative += m.counts[o][p],
                (BinaryLabel::Negative, BinaryLabel::Positive) => out.false_positive += m.counts[o][p],
                (BinaryLabel::Positive, BinaryLabel::Negative) => out.false_negative += m.counts[o][p],
                (BinaryLabel::Positive, BinaryLabel::Positive) => out.true_positive += m.counts[o][p],
            }
        }
    }
    out
}

/// Majority vote over exactly five grouped predictions: positive iff at
/// least three are positive. Five binary votes can never tie.
pub fn majority_vote(votes: &[BinaryLabel]) -> Result<BinaryLabel> {
    if votes.len() != VOTES_PER_SET {
        return Err(Error::VoteCount { got: votes.len() });
    }
    let positive = votes.iter().filter(|v| v.is_positive()).count();
    Ok(if positive * 2 > VOTES_PER_SET {
        BinaryLabel::Positive
    } else {
        BinaryLabel::Negative
    })
}

/// One vote set scored against its observed label.
#[derive(Debug, Clone)]
pub struct ScoredVote {
    pub set_id: String,
    pub slide_id: String,
    pub observed: BinaryLabel,
    pub predicted: BinaryLabel,
    /// Votes that agree with the observed binary label, out of 5.
    pub agree: usize,
    pub correct: bool,
}

/// Score vote sets against per-patch predictions and tally the
/// case-level binary confusion matrix.
pub fn case_confusion(
    sets: &[VoteSet],
    rows: &[PredictionRow],
) -> Result<(ConfusionMatrix2, Vec<ScoredVote>)> {
    let by_patch: BTreeMap<&str, &PredictionRow> =
        rows.iter().map(|r| (r.patch_id.as_str(), r)).collect();
    let mut matrix = ConfusionMatrix2::default();
    let mut scored = Vec::with_capacity(sets.len());
    for set in sets {
        let mut votes = Vec::with_capacity(VOTES_PER_SET);
        for pid in &set.patch_ids {
            let row = by_patch.get(pid.as_str()).ok_or_else(|| Error::InvalidRecord {
                kind: "vote set".into(),
                id: set.set_id.clone(),
                reason: format!("no prediction for patch {pid}"),
            })?;
            votes.push(row.predicted.group());
        }
        let observed = set.observed_dx.group();
        let predicted = majority_vote(&votes)?;
        let agree = votes.iter().filter(|&&v| v == observed).count();
        matrix.record(observed, predicted);
        scored.push(ScoredVote {
            set_id: set.set_id.clone(),
            slide_id: set.slide_id.clone(),
            observed,
            predicted,
            agree,
            correct: predicted == observed,
        });
    }
    Ok((matrix, scored))
}

/// Rebuild vote sets from prediction rows alone: per slide, in patch-id
/// order, chunks of five.
pub fn vote_sets_from_rows(rows: &[PredictionRow]) -> Result<Vec<VoteSet>> {
    let mut by_slide: BTreeMap<&str, Vec<&PredictionRow>> = BTreeMap::new();
    for row in rows {
        by_slide.entry(row.slide_id.as_str()).or_default().push(row);
    }
    let mut sets = Vec::new();
    for (slide_id, mut slide_rows) in by_slide {
        slide_rows.sort_by(|a, b| a.patch_id.cmp(&b.patch_id));
        if slide_rows.len() % VOTES_PER_SET != 0 {
            return Err(Error::VoteSetRemainder {
                slide_id: slide_id.to_string(),
                count: slide_rows.len(),
            });
        }
        for (n, chunk) in slide_rows.chunks(VOTES_PER_SET).enumerate() {
            let observed = chunk[0].observed;
            for row in chunk {
                if row.observed != observed {
                    return Err(Error::InvalidRecord {
                        kind: "vote set".into(),
                        id: format!("{slide_id}_v{n}"),
                        reason: format!(
                            "patch {} observed {} differs from the set's {}",
                            row.patch_id, row.observed, observed
                        ),
                    });
                }
            }
            sets.push(VoteSet {
                set_id: format!("{slide_id}_v{n}"),
                slide_id: slide_id.to_string(),
                patch_ids: chunk.iter().map(|r| r.patch_id.clone()).collect(),
                observed_dx: observed,
            });
        }
    }
    Ok(sets)
}

/// Five metric percentages (hundredths) for one user; `None` marks a
/// not-computable entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetricRow {
    pub label: String,
    pub values: [Option<i64>; 5],
}

/// Unweighted arithmetic mean per metric, half-up to two decimals.
pub fn aggregate_users(rows: &[MetricRow]) -> Result<MetricRow> {
    if rows.is_empty() {
        return Err(Error::InvalidRecord {
            kind: "metric rows".into(),
            id: "(empty)".into(),
            reason: "at least one row is required".into(),
        });
    }
    let mut sums = [0i64; 5];
    for row in rows {
        for (k, v) in row.values.iter().enumerate() {
            match v {
                Some(c) => sums[k] += c,
                None => {
                    return Err(Error::AggregateNotComputable {
                        user: row.label.clone(),
                        metric: METRIC_NAMES[k].to_string(),
                    })
                }
            }
        }
    }
    let n = rows.len() as i64;
    let mut values = [None; 5];
    for (v, sum) in values.iter_mut().zip(sums) {
        *v = Some(div_round_half_up(2 * sum as u64, 2 * n as u64) as i64);
    }
    Ok(MetricRow {
        label: "Means".to_string(),
        values,
    })
}

/// Everything derived from one user's predictions: image-level matrices
/// and metrics plus the voted case-level view.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub user: String,
    pub confusion4: ConfusionMatrix4,
    pub grouped: ConfusionMatrix2,
    pub grouped_metrics: DiagnosticMetrics,
    pub votes: Vec<ScoredVote>,
    pub case_matrix: ConfusionMatrix2,
    pub case_metrics: DiagnosticMetrics,
}

pub fn evaluate_predictions(user: &str, rows: &[PredictionRow]) -> Result<EvalReport> {
    let confusion4 = tabulate_confusion4(rows);
    let grouped = group_confusion(&confusion4);
    let sets = vote_sets_from_rows(rows)?;
    let (case_matrix, votes) = case_confusion(&sets, rows)?;
    Ok(EvalReport {
        user: user.to_string(),
        confusion4,
        grouped,
        grouped_metrics: diagnostic_metrics(&grouped),
        votes,
        case_matrix,
        case_metrics: diagnostic_metrics(&case_matrix),
    })
}

impl EvalReport {
    /// Image-level grouped metric row (sensitivity family matches the
    /// grouped matrix; accuracy included for completeness).
    pub fn image_row(&self) -> MetricRow {
        MetricRow {
            label: self.user.clone(),
            values: self.grouped_metrics.centi_row(),
        }
    }

    /// Case-level voted metric row.
    pub fn case_row(&self) -> MetricRow {
        MetricRow {
            label: self.user.clone(),
            values: self.case_metrics.centi_row(),
        }
    }
}

// ---------------------------------------------------------------------
// rendering

pub fn render_confusion4(title: &str, m: &ConfusionMatrix4) -> String {
    let mut out = String::new();
    out.push_str(&format!("{title}\n"));
    out.push_str(&format!(
        "{:>20} | {:>9} {:>9} {:>9} {:>9}\n",
        "observed \\ predicted", "Negative", "ITC", "Micro Met", "Macro Met"
    ));
    for (o, cat) in DiagnosticCategory::ALL.iter().enumerate() {
        out.push_str(&format!(
            "{:>20} | {:>9} {:>9} {:>9} {:>9}\n",
            cat.name(),
            m.counts[o][0],
            m.counts[o][1],
            m.counts[o][2],
            m.counts[o][3]
        ));
    }
    out.push_str(&format!("Accuracy: {}\n", m.accuracy()));
    out
}

pub fn render_confusion2(title: &str, labels: (&str, &str), m: &ConfusionMatrix2) -> String {
    let (neg, pos) = labels;
    let mut out = String::new();
    out.push_str(&format!("{title}\n"));
    out.push_str(&format!("{:>20} | {:>12} {:>12}\n", "observed \\ predicted", neg, pos));
    out.push_str(&format!(
        "{:>20} | {:>12} {:>12}\n",
        neg, m.true_negative, m.false_positive
    ));
    out.push_str(&format!(
        "{:>20} | {:>12} {:>12}\n",
        pos, m.false_negative, m.true_positive
    ));
    let metrics = diagnostic_metrics(m);
    out.push_str(&format!("Accuracy: {}\n", metrics.accuracy));
    out
}

pub fn render_metrics(title: &str, dm: &DiagnosticMetrics) -> String {
    let mut out = format!("{title}\n");
    for (name, value) in METRIC_NAMES.iter().zip(dm.values()) {
        out.push_str(&format!("  {:<12} {}\n", format!("{name}:"), value));
    }
    out
}

pub fn render_votes(votes: &[ScoredVote]) -> String {
    let mut out = String::new();
    out.push_str("set                 agree  predicted  observed  outcome\n");
    for v in votes {
        out.push_str(&format!(
            "{:<18} {:>4}/5  {:<9} {:<9} {}\n",
            v.set_id,
            v.agree,
            v.predicted.name(),
            v.observed.name(),
            if v.correct { "Correct" } else { "Incorrect" }
        ));
    }
    out
}

pub fn render_metric_table(title: &str, rows: &[MetricRow], means: Option<&MetricRow>) -> String {
    let mut out = format!("{title}\n");
    out.push_str(&format!(
        "{:<12} {:>9} {:>12} {:>12} {:>9} {:>9}\n",
        "User", "Accuracy", "Sensitivity", "Specificity", "PPV", "NPV"
    ));
    let fmt_row = |row: &MetricRow| -> String {
        let cell = |v: &Option<i64>| match v {
            Some(c) => render_centi(*c),
            None => "n/a".to_string(),
        };
        format!(
            "{:<12} {:>9} {:>12} {:>12} {:>9} {:>9}\n",
            row.label,
            cell(&row.values[0]),
            cell(&row.values[1]),
            cell(&row.values[2]),
            cell(&row.values[3]),
            cell(&row.values[4])
        )
    };
    for row in rows {
        out.push_str(&fmt_row(row));
    }
    if let Some(m) = means {
        out.push_str(&fmt_row(m));
    }
    out
}

/// Full plain-text report for one user's predictions.
pub fn render_report(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&render_confusion4(
        &format!("Table 1 - image-by-image confusion ({})", report.user),
        &report.confusion4,
    ));
    out.push('\n');
    out.push_str(&render_confusion2(
        &format!("Table 2 - grouped ranking ({})", report.user),
        ("negative (0|1)", "positive (2|3)"),
        &report.grouped,
    ));
    out.push_str(&render_metrics("Image-level grouped metrics:", &report.grouped_metrics));
    out.push('\n');
    out.push_str(&format!(
        "Table 3 - majority voting over {} sets ({})\n",
        report.votes.len(),
        report.user
    ));
    out.push_str(&render_votes(&report.votes));
    out.push('\n');
    out.push_str(&render_confusion2(
        &format!("Table 4 - majority voting with grouped ranking ({})", report.user),
        ("negative", "positive"),
        &report.case_matrix,
    ));
    out.push_str(&render_metrics("Case-level voted metrics:", &report.case_metrics));
    out
}

// ---------------------------------------------------------------------
// CSV interfaces

pub const PREDICTIONS_HEADER: &str = "patch_id,slide_id,case_id,observed_dx,predicted_dx,p0,p1,p2,p3";

pub fn predictions_to_csv(rows: &[PredictionRow]) -> String {
    let mut out = String::from(PREDICTIONS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
            r.patch_id,
            r.slide_id,
            r.case_id,
            r.observed.code(),
            r.predicted.code(),
            r.probs[0],
            r.probs[1],
            r.probs[2],
            r.probs[3]
        ));
    }
    out
}

pub fn parse_predictions_csv(path: &Path) -> Result<Vec<PredictionRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    let bad = |line: usize, reason: String| Error::CsvParse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line.trim() != PREDICTIONS_HEADER {
                return Err(bad(1, format!("expected header {PREDICTIONS_HEADER:?}")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(bad(i + 1, format!("expected 9 fields, found {}", fields.len())));
        }
        let category = |s: &str| -> Option<DiagnosticCategory> {
            s.parse::<u8>().ok().and_then(DiagnosticCategory::from_code)
        };
        let observed =
            category(fields[3]).ok_or_else(|| bad(i + 1, format!("bad observed_dx {:?}", fields[3])))?;
        let predicted =
            category(fields[4]).ok_or_else(|| bad(i + 1, format!("bad predicted_dx {:?}", fields[4])))?;
        let mut probs = [0.0f32; 4];
        for (k, p) in probs.iter_mut().enumerate() {
            *p = fields[5 + k]
                .parse()
                .map_err(|_| bad(i + 1, format!("bad probability {:?}", fields[5 + k])))?;
        }
        rows.push(PredictionRow {
            patch_id: fields[0].to_string(),
            slide_id: fields[1].to_string(),
            case_id: fields[2].to_string(),
            observed,
            predicted,
            probs,
        });
    }
    Ok(rows)
}

pub const METRICS_HEADER: &str = "scope,metric,numerator,denominator,rendered";

/// CSV of every metric rational for one report: three scopes
/// (image_multiclass accuracy, image_grouped, case_voted).
pub fn metrics_to_csv(report: &EvalReport) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    let mut push = |scope: &str, metric: &str, value: MetricValue| {
        match value {
            MetricValue::Ratio { num, den } => {
                out.push_str(&format!("{scope},{metric},{num},{den},{}\n", value.render_percent()));
            }
            MetricValue::NotComputable => {
                out.push_str(&format!("{scope},{metric},,,not computable\n"));
            }
        }
    };
    push("image_multiclass", "accuracy", report.confusion4.accuracy());
    for (name, value) in METRIC_NAMES.iter().zip(report.grouped_metrics.values()) {
        push("image_grouped", name, value);
    }
    for (name, value) in METRIC_NAMES.iter().zip(report.case_metrics.values()) {
        push("case_voted", name, value);
    }
    out
}

/// Extract one scope of a metrics CSV as a row of hundredth-percentages.
pub fn metric_row_from_csv(path: &Path, label: &str, scope: &str) -> Result<MetricRow> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut values: [Option<i64>; 5] = [None; 5];
    let mut seen = [false; 5];
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line.trim() != METRICS_HEADER {
                return Err(Error::CsvParse {
                    path: path.to_path_buf(),
                    line: 1,
                    reason: format!("expected header {METRICS_HEADER:?}"),
                });
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            continue;
        }
        if fields[0] != scope {
            continue;
        }
        if let Some(k) = METRIC_NAMES.iter().position(|n| *n == fields[1]) {
            seen[k] = true;
            if !fields[2].is_empty() && !fields[3].is_empty() {
                let num: u64 = fields[2].parse().map_err(|_| Error::CsvParse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    reason: format!("bad numerator {:?}", fields[2]),
                })?;
                let den: u64 = fields[3].parse().map_err(|_| Error::CsvParse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    reason: format!("bad denominator {:?}", fields[3]),
                })?;
                values[k] = MetricValue::ratio(num, den).percent_centi();
            }
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::CsvParse {
            path: path.to_path_buf(),
            line: 0,
            reason: format!("scope {scope:?} is missing metrics"),
        });
    }
    Ok(MetricRow {
        label: label.to_string(),
        values,
    })
}
