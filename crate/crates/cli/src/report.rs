//! Five-row results table in markdown and JSON.

use busaug_core::eval::MetricsReport;
use busaug_core::pipeline::ExperimentArm;
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Column {
    Accuracy,
    F1,
    AucRoc,
    Ppv,
    Recall,
    Fid,
}

impl Column {
    pub const TABLE: [Column; 5] = [Column::Accuracy, Column::F1, Column::AucRoc, Column::Ppv, Column::Fid];

    pub fn header(self) -> &'static str {
        match self {
            Column::Accuracy => "Accuracy ↑",
            Column::F1 => "F1-Score ↑",
            Column::AucRoc => "AUC-ROC ↑",
            Column::Ppv => "PPV ↑",
            Column::Recall => "Recall ↑",
            Column::Fid => "FID ↓",
        }
    }

    fn key(self) -> &'static str {
        match self {
            Column::Accuracy => "accuracy",
            Column::F1 => "f1_score",
            Column::AucRoc => "auc_roc",
            Column::Ppv => "ppv",
            Column::Recall => "recall",
            Column::Fid => "fid",
        }
    }

    fn higher_is_better(self) -> bool {
        self != Column::Fid
    }

    fn value(self, r: &MetricsReport) -> Option<f64> {
        match self {
            Column::Accuracy => Some(r.accuracy),
            Column::F1 => Some(r.f1_macro),
            Column::AucRoc => Some(r.auc_roc_ovr_macro),
            Column::Ppv => Some(r.ppv_macro),
            Column::Recall => Some(r.recall_macro),
            Column::Fid => r.fid,
        }
    }

    fn format(self, v: f64) -> String {
        if self == Column::Fid {
            format!("{v:.2}")
        } else {
            format!("{v:.3}")
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedReport {
    pub markdown: String,
    pub json: String,
}

#[derive(Serialize)]
struct JsonRow<'a> {
    arm: &'a str,
    method: &'a str,
    accuracy: f64,
    f1_score: f64,
    auc_roc: f64,
    ppv: f64,
    recall: f64,
    fid: Option<f64>,
    best: Vec<&'static str>,
    report: &'a MetricsReport,
}

/// Rows are compared on their rendered values, so ties are decided at display precision.
fn best_rows(reports: &[MetricsReport], col: Column) -> Vec<bool> {
    let shown: Vec<Option<String>> = reports.iter().map(|r| col.value(r).map(|v| col.format(v))).collect();
    let parsed: Vec<Option<f64>> = shown.iter().map(|s| s.as_ref().map(|s| s.parse().expect("own format"))).collect();
    let best = parsed.iter().flatten().copied().fold(None, |acc: Option<f64>, v| match acc {
        None => Some(v),
        Some(b) if col.higher_is_better() => Some(b.max(v)),
        Some(b) => Some(b.min(v)),
    });
    parsed.iter().map(|v| v.is_some() && *v == best).collect()
}

/// Renders the five arm reports, in the fixed arm order, as a markdown table
/// (best value per column in bold, baseline FID as "-") plus matching JSON.
pub fn render_report(reports: &[MetricsReport], show_recall: bool) -> Result<RenderedReport, String> {
    if reports.len() != ExperimentArm::ALL.len() {
        return Err(format!("expected {} reports, got {}", ExperimentArm::ALL.len(), reports.len()));
    }
    let mut columns = Column::TABLE.to_vec();
    if show_recall {
        columns.insert(4, Column::Recall);
    }
    let best: Vec<Vec<bool>> = columns.iter().map(|&c| best_rows(reports, c)).collect();

    let mut md = String::from("| Method |");
    for c in &columns {
        md.push_str(&format!(" {} |", c.header()));
    }
    md.push_str("\n|---|");
    md.push_str(&"---:|".repeat(columns.len()));
    md.push('\n');
    let mut rows = Vec::new();
    for (i, (arm, r)) in ExperimentArm::ALL.iter().zip(reports).enumerate() {
        md.push_str(&format!("| {} |", arm.display_name()));
        let mut marked = Vec::new();
        for (j, &c) in columns.iter().enumerate() {
            let cell = match c.value(r) {
                None => "-".to_string(),
                Some(v) if best[j][i] => {
                    marked.push(c.key());
                    format!("**{}**", c.format(v))
                }
                Some(v) => c.format(v),
            };
            md.push_str(&format!(" {cell} |"));
        }
        md.push('\n');
        rows.push(JsonRow {
            arm: arm.name(),
            method: arm.display_name(),
            accuracy: r.accuracy,
            f1_score: r.f1_macro,
            auc_roc: r.auc_roc_ovr_macro,
            ppv: r.ppv_macro,
            recall: r.recall_macro,
            fid: r.fid,
            best: marked,
            report: r,
        });
    }
    let json = serde_json::to_string_pretty(&rows).map_err(|e| e.to_string())? + "\n";
    Ok(RenderedReport { markdown: md, json })
}
