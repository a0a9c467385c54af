//! Flat CSV report plus a JSON summary with predicted-token histograms.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use saeval_core::evaluation::{EditOutcome, Test1Score};

use crate::artifacts::GroupsFile;
use crate::error::StageError;
use crate::manifest::StageContext;

pub const CSV_HEADER: &str = "group,attribute,sign,method,metric,budget,value";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportSummary {
    pub groups: Vec<GroupSummary>,
    pub test1: Vec<Test1Score>,
    pub test2: Vec<EditSummary>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub attribute: String,
    pub sign: String,
    pub retained: bool,
    pub selected_subset_size: Option<usize>,
    pub best_delta: f64,
    pub edge_count: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EditSummary {
    pub group: String,
    pub method: String,
    pub mode: String,
    pub budget: usize,
    pub success_rate: f64,
    /// Token id -> count over predictions produced by the edited runs; the
    /// record of what failed edits flip the model toward.
    pub predicted_token_histogram: BTreeMap<usize, usize>,
}

struct Row {
    group: String,
    attribute: String,
    sign: String,
    method: String,
    metric: String,
    budget: Option<usize>,
    value: f64,
}

fn split_group_id(group: &str) -> (String, String) {
    match group.rsplit_once('-') {
        Some((attr, sign)) => (attr.to_string(), sign.to_string()),
        None => (group.to_string(), String::new()),
    }
}

pub fn write_report(
    ctx: &mut StageContext,
    groups: &GroupsFile,
    scores: &[Test1Score],
    outcomes: &[EditOutcome],
) -> Result<(), StageError> {
    let mut rows: Vec<Row> = Vec::new();
    for score in scores {
        let (attribute, sign) = split_group_id(&score.group);
        rows.push(Row {
            group: score.group.clone(),
            attribute,
            sign,
            method: score.method.clone(),
            metric: score.kind.label().to_string(),
            budget: None,
            value: score.score,
        });
    }
    let mut edit_summaries = Vec::new();
    for outcome in outcomes {
        let (attribute, sign) = split_group_id(&outcome.group);
        rows.push(Row {
            group: outcome.group.clone(),
            attribute,
            sign,
            method: outcome.method.clone(),
            metric: String::from("edit_success"),
            budget: Some(outcome.budget),
            value: outcome.success_rate,
        });
        let mut histogram: BTreeMap<usize, usize> = BTreeMap::new();
        for record in &outcome.records {
            *histogram.entry(record.predicted_edit).or_default() += 1;
        }
        edit_summaries.push(EditSummary {
            group: outcome.group.clone(),
            method: outcome.method.clone(),
            mode: outcome.mode.label().to_string(),
            budget: outcome.budget,
            success_rate: outcome.success_rate,
            predicted_token_histogram: histogram,
        });
    }
    rows.sort_by(|a, b| {
        (&a.group, &a.method, &a.metric, a.budget).cmp(&(&b.group, &b.method, &b.metric, b.budget))
    });

    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for row in &rows {
        let budget = row.budget.map(|b| b.to_string()).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.group, row.attribute, row.sign, row.method, row.metric, budget, row.value
        ));
    }
    ctx.produce("report/report.csv", csv.as_bytes())?;

    let summary = ReportSummary {
        groups: groups
            .outcomes
            .iter()
            .map(|o| GroupSummary {
                group: o.group.id(),
                attribute: o.group.attribute.clone(),
                sign: o.group.sign.label().to_string(),
                retained: o.retained,
                selected_subset_size: o.group.selected_subset_size,
                best_delta: o.best_delta,
                edge_count: o.group.edges.len(),
            })
            .collect(),
        test1: scores.to_vec(),
        test2: edit_summaries,
    };
    let bytes = ctx.serialize_json(&summary)?;
    ctx.produce("report/report.json", &bytes)?;
    Ok(())
}
