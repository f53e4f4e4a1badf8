//! Aggregation of run records into accuracy tables and rendering.
//!
//! The reporting layer works in percent. A [`ResultRow`] is one
//! `(algorithm, variant, target, seed, criterion)` cell; [`aggregate`] folds
//! rows into per-target `mean +/- std` cells (population std over seeds) plus
//! an average column whose mean is the arithmetic mean of the per-target
//! means and whose std is the mean of the per-target stds.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{RunRecord, SelectionCriterion};

impl SelectionCriterion {
    pub fn short_name(self) -> &'static str {
        match self {
            SelectionCriterion::TrainingDomainValidation => "validation",
            SelectionCriterion::Oracle => "oracle",
        }
    }

    pub fn from_short_name(s: &str) -> Result<Self> {
        match s {
            "validation" => Ok(SelectionCriterion::TrainingDomainValidation),
            "oracle" => Ok(SelectionCriterion::Oracle),
            other => Err(Error::Report(format!("unknown criterion '{other}'"))),
        }
    }
}

/// One aggregation input cell. `accuracy` is a percentage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub algorithm: String,
    pub variant: String,
    pub target_domain: usize,
    pub seed: u64,
    pub criterion: SelectionCriterion,
    pub accuracy: f64,
}

/// Flatten run records into result rows (two per record, one per selection
/// criterion), converting accuracies to percent.
pub fn records_to_rows(records: &[RunRecord]) -> Vec<ResultRow> {
    let mut rows = Vec::with_capacity(records.len() * 2);
    for r in records {
        for criterion in [
            SelectionCriterion::TrainingDomainValidation,
            SelectionCriterion::Oracle,
        ] {
            rows.push(ResultRow {
                algorithm: r.algorithm.to_string(),
                variant: r.variant.clone(),
                target_domain: r.target_domain,
                seed: r.seed,
                criterion,
                accuracy: 100.0 * r.reported_accuracy(criterion),
            });
        }
    }
    rows
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub algorithm: String,
    pub variant: String,
    pub criterion: SelectionCriterion,
    /// One cell per column, in table column order.
    pub cells: Vec<Cell>,
    pub average: Cell,
    /// Signed difference of this row's average against a reference row's
    /// average, when a diff column has been added.
    pub diff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    /// `(domain id, display name)` in column order.
    pub columns: Vec<(usize, String)>,
    pub rows: Vec<TableRow>,
    /// The rows the table was aggregated from, canonically sorted.
    pub backing: Vec<ResultRow>,
}

/// What to do when the `(row, target, seed)` grid is ragged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MissingCells {
    /// Reject with an error listing every missing cell.
    #[default]
    Reject,
    /// Aggregate whatever seeds each cell has.
    UseAvailable,
}

fn canonical_sort(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| {
        (
            &a.algorithm,
            &a.variant,
            a.criterion.short_name(),
            a.target_domain,
            a.seed,
        )
            .cmp(&(
                &b.algorithm,
                &b.variant,
                b.criterion.short_name(),
                b.target_domain,
                b.seed,
            ))
    });
}

/// Population mean and std.
fn cell_of(values: &[f64]) -> Cell {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    Cell {
        mean,
        std: var.sqrt(),
        n,
    }
}

/// Fold result rows into a table. Row order: first appearance of
/// `(algorithm, variant)` in the input, validation criterion before oracle.
pub fn aggregate(rows: &[ResultRow], policy: MissingCells) -> Result<ResultTable> {
    if rows.is_empty() {
        return Err(Error::Report("no result rows to aggregate".into()));
    }
    let mut columns: Vec<usize> = rows
        .iter()
        .map(|r| r.target_domain)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    columns.sort_unstable();

    // first-appearance order of row keys
    let mut key_order: Vec<(String, String, SelectionCriterion)> = Vec::new();
    for r in rows {
        let key = (r.algorithm.clone(), r.variant.clone(), r.criterion);
        if !key_order.iter().any(|k| *k == key) {
            key_order.push(key);
        }
    }
    key_order.sort_by_key(|(a, v, c)| {
        let first = rows
            .iter()
            .position(|r| r.algorithm == *a && r.variant == *v)
            .unwrap();
        (first, c.short_name())
    });
    // "oracle" < "validation" lexically; flip so validation renders first
    key_order.sort_by_key(|(a, v, c)| {
        let first = rows
            .iter()
            .position(|r| r.algorithm == *a && r.variant == *v)
            .unwrap();
        (
            first,
            match c {
                SelectionCriterion::TrainingDomainValidation => 0,
                SelectionCriterion::Oracle => 1,
            },
        )
    });
    key_order.dedup();

    let mut missing: Vec<String> = Vec::new();
    let mut table_rows = Vec::new();
    for (algorithm, variant, criterion) in &key_order {
        // collect per-target accuracy lists
        let mut per_target: BTreeMap<usize, Vec<(u64, f64)>> = BTreeMap::new();
        let mut seed_union: BTreeSet<u64> = BTreeSet::new();
        for r in rows {
            if r.algorithm == *algorithm && r.variant == *variant && r.criterion == *criterion {
                per_target
                    .entry(r.target_domain)
                    .or_default()
                    .push((r.seed, r.accuracy));
                seed_union.insert(r.seed);
            }
        }
        let mut cells = Vec::with_capacity(columns.len());
        for &target in &columns {
            let entry = per_target.get(&target);
            let seeds_here: BTreeSet<u64> = entry
                .map(|v| v.iter().map(|(s, _)| *s).collect())
                .unwrap_or_default();
            if seeds_here != seed_union {
                let absent: Vec<String> = seed_union
                    .difference(&seeds_here)
                    .map(|s| s.to_string())
                    .collect();
                missing.push(format!(
                    "{algorithm}/{variant}/{} target {target} missing seeds {{{}}}",
                    criterion.short_name(),
                    absent.join(", ")
                ));
                if policy == MissingCells::Reject {
                    continue;
                }
            }
            let values: Vec<f64> = entry
                .map(|v| v.iter().map(|(_, a)| *a).collect())
                .unwrap_or_default();
            if values.is_empty() {
                if policy == MissingCells::Reject {
                    continue;
                } else {
                    // row simply lacks this column entirely
                    cells.push(Cell {
                        mean: f64::NAN,
                        std: 0.0,
                        n: 0,
                    });
                    continue;
                }
            }
            cells.push(cell_of(&values));
        }
        if policy == MissingCells::Reject && !missing.is_empty() {
            continue;
        }
        let present: Vec<&Cell> = cells.iter().filter(|c| c.n > 0).collect();
        if present.is_empty() {
            continue;
        }
        let average = Cell {
            mean: present.iter().map(|c| c.mean).sum::<f64>() / present.len() as f64,
            std: present.iter().map(|c| c.std).sum::<f64>() / present.len() as f64,
            n: present.iter().map(|c| c.n).sum(),
        };
        table_rows.push(TableRow {
            algorithm: algorithm.clone(),
            variant: variant.clone(),
            criterion: *criterion,
            cells,
            average,
            diff: None,
        });
    }

    if policy == MissingCells::Reject && !missing.is_empty() {
        return Err(Error::Report(format!(
            "ragged result grid; missing cells:\n  {}",
            missing.join("\n  ")
        )));
    }

    let mut backing = rows.to_vec();
    canonical_sort(&mut backing);
    Ok(ResultTable {
        columns: columns.into_iter().map(|id| (id, format!("d{id}"))).collect(),
        rows: table_rows,
        backing,
    })
}

impl ResultTable {
    /// Rename columns in order (extra names are ignored).
    pub fn with_column_names(mut self, names: &[&str]) -> Self {
        for (col, name) in self.columns.iter_mut().zip(names) {
            col.1 = (*name).to_string();
        }
        self
    }

    pub fn row(
        &self,
        algorithm: &str,
        variant: &str,
        criterion: SelectionCriterion,
    ) -> Option<&TableRow> {
        self.rows.iter().find(|r| {
            r.algorithm == algorithm && r.variant == variant && r.criterion == criterion
        })
    }
}

/// Add a `Diff.` column: every row's average minus the reference row's
/// average (the reference row itself gets 0).
pub fn diff_column(
    table: &ResultTable,
    reference: (&str, &str, SelectionCriterion),
) -> Result<ResultTable> {
    let reference_avg = table
        .row(reference.0, reference.1, reference.2)
        .ok_or_else(|| {
            Error::Report(format!(
                "reference row {}/{}/{} not present",
                reference.0,
                reference.1,
                reference.2.short_name()
            ))
        })?
        .average
        .mean;
    let mut out = table.clone();
    for row in &mut out.rows {
        row.diff = Some(row.average.mean - reference_avg);
    }
    Ok(out)
}

fn format_diff(diff: f64) -> String {
    let rounded = (diff * 100.0).round() / 100.0;
    if rounded == 0.0 {
        "0.00".to_string()
    } else if rounded < 0.0 {
        format!("{:.2} (down)", -rounded)
    } else {
        format!("{rounded:.2} (up)")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderFormat {
    Markdown,
    Csv,
    Json,
}

impl std::str::FromStr for RenderFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "markdown" | "md" => Ok(RenderFormat::Markdown),
            "csv" => Ok(RenderFormat::Csv),
            "json" => Ok(RenderFormat::Json),
            other => Err(Error::Report(format!("unknown format '{other}'"))),
        }
    }
}

/// Render a table. Markdown shows `mean +/- std` percent cells; CSV emits the
/// canonical backing rows (so it round-trips through [`parse_rows_csv`] and
/// [`aggregate`]); JSON serializes the table structure.
pub fn render(table: &ResultTable, format: RenderFormat) -> Result<String> {
    match format {
        RenderFormat::Markdown => Ok(render_markdown(table)),
        RenderFormat::Csv => Ok(render_csv(table)),
        RenderFormat::Json => Ok(serde_json::to_string_pretty(table)? + "\n"),
    }
}

fn render_markdown(table: &ResultTable) -> String {
    let has_diff = table.rows.iter().any(|r| r.diff.is_some());
    let mut out = String::new();
    out.push_str("| Method | Criterion |");
    for (_, name) in &table.columns {
        out.push_str(&format!(" {name} |"));
    }
    out.push_str(" Avg. |");
    if has_diff {
        out.push_str(" Diff. |");
    }
    out.push('\n');
    out.push_str("|---|---|");
    for _ in &table.columns {
        out.push_str("---|");
    }
    out.push_str("---|");
    if has_diff {
        out.push_str("---|");
    }
    out.push('\n');
    for row in &table.rows {
        let method = if row.variant == "main" {
            row.algorithm.clone()
        } else {
            format!("{} ({})", row.algorithm, row.variant)
        };
        out.push_str(&format!("| {method} | {} |", row.criterion.short_name()));
        for cell in &row.cells {
            if cell.n == 0 {
                out.push_str(" - |");
            } else {
                out.push_str(&format!(" {:.2} ± {:.1} |", cell.mean, cell.std));
            }
        }
        out.push_str(&format!(
            " {:.2} ± {:.1} |",
            row.average.mean, row.average.std
        ));
        if has_diff {
            match row.diff {
                Some(d) => out.push_str(&format!(" {} |", format_diff(d))),
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out
}

pub const RESULTS_CSV_HEADER: &str = "algorithm,variant,target_domain,seed,criterion,accuracy";

fn render_csv(table: &ResultTable) -> String {
    let mut out = String::from(RESULTS_CSV_HEADER);
    out.push('\n');
    for r in &table.backing {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.algorithm,
            r.variant,
            r.target_domain,
            r.seed,
            r.criterion.short_name(),
            r.accuracy
        ));
    }
    out
}

/// Parse the results CSV schema back into rows.
pub fn parse_rows_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == RESULTS_CSV_HEADER => {}
        Some(h) => {
            return Err(Error::Report(format!(
                "expected header '{RESULTS_CSV_HEADER}', got '{h}'"
            )))
        }
        None => return Err(Error::Report("empty results file".into())),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            return Err(Error::Report(format!(
                "row {}: expected 6 fields, got {}",
                i + 2,
                parts.len()
            )));
        }
        let parse_err = |what: &str| Error::Report(format!("row {}: bad {what}", i + 2));
        rows.push(ResultRow {
            algorithm: parts[0].to_string(),
            variant: parts[1].to_string(),
            target_domain: parts[2].parse().map_err(|_| parse_err("target_domain"))?,
            seed: parts[3].parse().map_err(|_| parse_err("seed"))?,
            criterion: SelectionCriterion::from_short_name(parts[4])?,
            accuracy: parts[5].parse().map_err(|_| parse_err("accuracy"))?,
        });
    }
    if rows.is_empty() {
        return Err(Error::Report("results file has no rows".into()));
    }
    Ok(rows)
}
