//! Results tables: rows are methods, cells are `mean ± std` over seeds.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::eval::{ApReport, RetentionReport};
use crate::train::StrategyKind;

/// One adapted model on one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub config: ExperimentConfig,
    pub code_version: String,
    pub kind: StrategyKind,
    pub with_task_residuals: bool,
    pub seed: u64,
    /// Digest of every parameter of the evaluated checkpoint.
    pub checkpoint_digest: String,
    /// Evaluation on the target modality's test split.
    pub target: ApReport,
    /// Evaluation on the source modality's test split.
    pub retention: RetentionReport,
    pub frozen: FrozenAudit,
    /// Medians of the first and last tenth of the step losses.
    pub loss_trend: Option<(f64, f64)>,
    pub train_seconds: f64,
}

/// Digests of the frozen detector parts before and after adaptation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenAudit {
    pub detector_before: String,
    pub detector_after: String,
    pub base_embeddings_before: String,
    pub base_embeddings_after: String,
}

impl FrozenAudit {
    pub fn detector_unchanged(&self) -> bool {
        self.detector_before == self.detector_after
    }

    pub fn base_embeddings_unchanged(&self) -> bool {
        self.base_embeddings_before == self.base_embeddings_after
    }
}

impl ExperimentRecord {
    pub fn label(&self) -> String {
        if self.with_task_residuals {
            format!("{}+tr", self.kind)
        } else {
            self.kind.to_string()
        }
    }
}

/// Sample mean and sample (n − 1) standard deviation; the deviation of a
/// single value is 0.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

/// Fractions rendered as percent `mean ± std` with two decimals.
pub fn format_cell(values: &[f64]) -> Result<String> {
    let (m, s) = mean_std(values).ok_or_else(|| Error::Invalid("empty table cell".into()))?;
    Ok(format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s))
}

struct Row<'a> {
    label: String,
    kind: StrategyKind,
    with_task_residuals: bool,
    records: Vec<&'a ExperimentRecord>,
}

type Field = fn(&ExperimentRecord) -> f64;

const COLUMNS: [(&str, Field); 9] = [
    ("target_ap50", |r| r.target.ap50),
    ("target_ap75", |r| r.target.ap75),
    ("target_ap", |r| r.target.ap),
    ("source_ap50", |r| r.retention.adapted.ap50),
    ("source_ap75", |r| r.retention.adapted.ap75),
    ("source_ap", |r| r.retention.adapted.ap),
    ("stripped_ap50", |r| r.retention.stripped.ap50),
    ("stripped_ap75", |r| r.retention.stripped.ap75),
    ("stripped_ap", |r| r.retention.stripped.ap),
];

fn rows(records: &[ExperimentRecord]) -> Result<Vec<Row<'_>>> {
    let Some(first) = records.first() else {
        return Err(Error::Invalid("no records to report".into()));
    };
    let fp = first.config.table_fingerprint();
    if let Some(r) = records.iter().find(|r| r.config.table_fingerprint() != fp) {
        return Err(Error::Invalid(format!(
            "record {} seed {} was produced by a different configuration",
            r.label(),
            r.seed
        )));
    }
    let mut groups: BTreeMap<(usize, bool), Vec<&ExperimentRecord>> = BTreeMap::new();
    for r in records {
        let order = StrategyKind::ALL.iter().position(|k| *k == r.kind).unwrap_or(usize::MAX);
        groups.entry((order, r.with_task_residuals)).or_default().push(r);
    }
    let mut out = Vec::new();
    for (_, mut recs) in groups {
        recs.sort_by_key(|r| r.seed);
        if recs.windows(2).any(|w| w[0].seed == w[1].seed) {
            return Err(Error::Invalid(format!("duplicate seed for {}", recs[0].label())));
        }
        out.push(Row {
            label: recs[0].label(),
            kind: recs[0].kind,
            with_task_residuals: recs[0].with_task_residuals,
            records: recs,
        });
    }
    Ok(out)
}

fn values(row: &Row, f: Field) -> Vec<f64> {
    row.records.iter().map(|r| f(r)).collect()
}

/// Markdown tables and a full-precision CSV mirror.
pub fn emit_report(records: &[ExperimentRecord]) -> Result<(String, String)> {
    let rows = rows(records)?;
    let cfg = &records[0].config;
    let mut md = String::new();
    let _ = writeln!(md, "# Adaptation to {}\n", cfg.data.modality);
    let _ = writeln!(
        md,
        "AP in percent, mean ± sample standard deviation over seeds. Full fine-tuning is the upper bound.\n"
    );
    let _ = writeln!(md, "## Target modality ({})\n", cfg.data.modality);
    let _ = writeln!(md, "| Method | Seeds | AP50 | AP75 | AP |");
    let _ = writeln!(md, "|---|---|---|---|---|");
    for row in &rows {
        let name = if row.kind == StrategyKind::FullFinetune {
            format!("{} (upper bound)", row.label)
        } else {
            row.label.clone()
        };
        let _ = writeln!(
            md,
            "| {name} | {} | {} | {} | {} |",
            row.records.len(),
            format_cell(&values(row, COLUMNS[0].1))?,
            format_cell(&values(row, COLUMNS[1].1))?,
            format_cell(&values(row, COLUMNS[2].1))?,
        );
    }
    let _ = writeln!(md, "\n## Source modality (rgb)\n");
    let _ = writeln!(md, "Adapted model as deployed, and with its prompt and residuals removed.\n");
    let _ = writeln!(md, "| Method | AP50 adapted | AP adapted | AP50 removed | AP removed | Removed equals zero-shot |");
    let _ = writeln!(md, "|---|---|---|---|---|---|");
    for row in &rows {
        let same = row.records.iter().all(|r| r.retention.stripped_matches_zero_shot);
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} |",
            row.label,
            format_cell(&values(row, COLUMNS[3].1))?,
            format_cell(&values(row, COLUMNS[5].1))?,
            format_cell(&values(row, COLUMNS[6].1))?,
            format_cell(&values(row, COLUMNS[8].1))?,
            if same { "yes" } else { "no" },
        );
    }

    let mut csv = String::from("method,kind,task_residuals,seeds");
    for (name, _) in COLUMNS {
        let _ = write!(csv, ",{name}_mean,{name}_std");
    }
    csv.push('\n');
    for row in &rows {
        let seeds: Vec<String> = row.records.iter().map(|r| r.seed.to_string()).collect();
        let _ = write!(csv, "{},{},{},{}", row.label, row.kind, row.with_task_residuals, seeds.join(" "));
        for (_, f) in COLUMNS {
            let (m, s) = mean_std(&values(row, f)).expect("rows are non-empty");
            let _ = write!(csv, ",{m},{s}");
        }
        csv.push('\n');
    }
    Ok((md, csv))
}
