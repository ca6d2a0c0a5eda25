//! Joins the CSV artifacts of a run directory into one summary table, one
//! row per (config hash, seed).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::error::{CliError, Result};
use crate::run::{write_atomic, SCHEMA_VERSION, STAMP_COLUMNS};

pub const REPORT_FILE: &str = "report.csv";

pub const REPORT_COLUMNS: [&str; 12] = [
    "config_hash",
    "seed",
    "step",
    "final_loss",
    "random_init_top1",
    "frozen_top1",
    "finetuned_top1",
    "supervised_bernoulli_top1",
    "active_bits",
    "active_fraction",
    "aggregate_variance",
    "units_f1_all",
];

#[derive(Default)]
struct Row {
    step: Option<u64>,
    values: BTreeMap<&'static str, String>,
    /// Largest `k` seen so far in the units file, with its F1.
    units: Option<(usize, String)>,
}

struct Table {
    file: String,
    header: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn col(&self, rec: &csv::StringRecord, name: &str) -> Result<String> {
        let i = self
            .header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Data(format!("{}: missing column `{name}`", self.file)))?;
        Ok(rec.get(i).unwrap_or_default().to_string())
    }
}

fn read_table(path: &Path) -> Result<Table> {
    let file = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{file}: {e}")))?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.len() < STAMP_COLUMNS.len() || header[..STAMP_COLUMNS.len()] != STAMP_COLUMNS {
        return Err(CliError::Data(format!("{file}: not a run artifact (unexpected header)")));
    }
    let rows = r.records().collect::<std::result::Result<Vec<_>, _>>()?;
    for rec in &rows {
        if rec.get(0) != Some(SCHEMA_VERSION.to_string().as_str()) {
            return Err(CliError::Data(format!("{file}: unsupported schema version {:?}", rec.get(0))));
        }
    }
    Ok(Table { file, header, rows })
}

/// Builds the summary, writes it to `report.csv` in `dir` and returns it as
/// an aligned text table. Rows with different config hashes are refused
/// unless `force` is set.
pub fn report(dir: &Path, force: bool) -> Result<String> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv") && p.file_name().is_some_and(|f| f != REPORT_FILE))
        .collect();
    paths.sort();
    let tables = paths.iter().map(|p| read_table(p)).collect::<Result<Vec<_>>>()?;
    let hashes: BTreeSet<&str> = tables.iter().flat_map(|t| t.rows.iter().filter_map(|r| r.get(1))).collect();
    if hashes.len() > 1 && !force {
        return Err(CliError::Data(format!(
            "artifacts carry {} different config hashes ({}); pass --force to join them anyway",
            hashes.len(),
            hashes.iter().copied().collect::<Vec<_>>().join(", ")
        )));
    }
    let mut rows: BTreeMap<(String, u64), Row> = BTreeMap::new();
    for t in &tables {
        let stem = t.file.trim_end_matches(".csv");
        for rec in &t.rows {
            let seed = rec[2].parse().map_err(|_| CliError::Data(format!("{}: bad seed", t.file)))?;
            let step: u64 = rec[3].parse().map_err(|_| CliError::Data(format!("{}: bad step", t.file)))?;
            let row = rows.entry((rec[1].to_string(), seed)).or_default();
            if stem != "supervised_bernoulli" {
                row.step = Some(row.step.map_or(step, |s| s.max(step)));
            }
            match stem {
                "steps" => {
                    row.values.insert("final_loss", t.col(rec, "loss")?);
                }
                "probe" => {
                    let key = if t.col(rec, "backbone")? == "random_init" { "random_init_top1" } else { "frozen_top1" };
                    row.values.insert(key, t.col(rec, "top1")?);
                }
                "finetune" => {
                    row.values.insert("finetuned_top1", t.col(rec, "top1")?);
                }
                "supervised_bernoulli" => {
                    row.values.insert("supervised_bernoulli_top1", t.col(rec, "top1")?);
                }
                "bits" => {
                    row.values.insert("active_bits", t.col(rec, "mean")?);
                    row.values.insert("active_fraction", t.col(rec, "active_fraction")?);
                }
                "variance" if t.col(rec, "dimension")? == "all" => {
                    row.values.insert("aggregate_variance", t.col(rec, "variance")?);
                }
                "units" => {
                    let k: usize = t.col(rec, "k")?.parse().map_err(|_| CliError::Data(format!("{}: bad k", t.file)))?;
                    if row.units.as_ref().is_none_or(|(best, _)| k > *best) {
                        row.units = Some((k, t.col(rec, "mean_f1")?));
                    }
                }
                _ => {}
            }
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_COLUMNS)?;
    let mut lines: Vec<Vec<String>> = vec![REPORT_COLUMNS.iter().map(|s| s.to_string()).collect()];
    for ((hash, seed), row) in rows {
        let mut fields = vec![hash, seed.to_string(), row.step.map(|s| s.to_string()).unwrap_or_default()];
        for col in &REPORT_COLUMNS[3..] {
            let v = if *col == "units_f1_all" {
                row.units.as_ref().map(|u| u.1.clone())
            } else {
                row.values.get(col).cloned()
            };
            fields.push(v.unwrap_or_default());
        }
        w.write_record(&fields)?;
        lines.push(fields);
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.into_error()))?;
    write_atomic(&dir.join(REPORT_FILE), &bytes)?;
    let widths: Vec<usize> = (0..REPORT_COLUMNS.len()).map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0)).collect();
    let mut text = String::new();
    for l in &lines {
        let cells: Vec<String> = l.iter().zip(&widths).map(|(v, w)| format!("{v:<w$}")).collect();
        text.push_str(cells.join("  ").trim_end());
        text.push('\n');
    }
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::run::{write_csv, Stamp};

    fn stamp(hash: &str, seed: u64) -> Stamp {
        Stamp { config_hash: hash.into(), seed, step: 70 }
    }

    #[test]
    fn empty_directory_gives_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let text = report(dir.path(), false).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("config_hash"));
    }

    #[test]
    fn joins_rows_by_hash_and_seed() {
        let dir = tempfile::tempdir().unwrap();
        let rows = [
            (stamp("h", 1), vec!["pretrained".into(), "frozen".into(), "0.9".into(), "100".into()]),
            (stamp("h", 1), vec!["random_init".into(), "frozen".into(), "0.7".into(), "100".into()]),
        ];
        write_csv(&dir.path().join("probe.csv"), &["backbone", "mode", "top1", "epochs"], &rows).unwrap();
        write_csv(&dir.path().join("finetune.csv"), &["top1", "epochs"], &[(stamp("h", 1), vec!["0.95".into(), "30".into()])])
            .unwrap();
        report(dir.path(), false).unwrap();
        let out = fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap();
        assert_eq!(out.lines().nth(1).unwrap(), "h,1,70,,0.7,0.9,0.95,,,,,");
    }

    #[test]
    fn conflicting_hashes_need_force() {
        let dir = tempfile::tempdir().unwrap();
        write_csv(&dir.path().join("finetune.csv"), &["top1", "epochs"], &[(stamp("a", 1), vec!["0.9".into(), "1".into()])])
            .unwrap();
        write_csv(&dir.path().join("bits.csv"), &["rule", "latent_dim", "mean", "std", "active_fraction"], &[(
            stamp("b", 1),
            vec!["ones".into(), "8".into(), "4".into(), "1".into(), "0.5".into()],
        )])
        .unwrap();
        assert_eq!(report(dir.path(), false).unwrap_err().exit_code(), 2);
        assert_eq!(report(dir.path(), true).unwrap().lines().count(), 3);
    }

    #[test]
    fn foreign_csv_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("other.csv"), "a,b\n1,2\n").unwrap();
        assert!(report(dir.path(), false).is_err());
    }
}
