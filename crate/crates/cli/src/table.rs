//! `table`: one row per report, per-domain MF1/Acc, averages and
//! forgetting rates, all in percent as mean ± std over seeds.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use cpt_core::eval::{MeanStd, Report};
use cpt_core::Error;
use walkdir::WalkDir;

use crate::error::{CliError, CliResult, Context};
use crate::run::{BaselineReport, REPORT_FILE};

pub enum Loaded {
    Sequence(Report),
    Baseline(BaselineReport),
}

/// Every `report.json` below the given directories (or the files
/// themselves), in path order.
pub fn collect_reports(paths: &[PathBuf]) -> CliResult<Vec<(PathBuf, Loaded)>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_file() {
            files.push(p.clone());
            continue;
        }
        if !p.is_dir() {
            return Err(CliError::Io {
                context: format!("reading {}", p.display()),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
            });
        }
        let mut found: Vec<PathBuf> = WalkDir::new(p)
            .into_iter()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_file() && e.file_name() == REPORT_FILE)
            .map(|e| e.into_path())
            .collect();
        found.sort();
        files.extend(found);
    }
    let mut out = Vec::with_capacity(files.len());
    for f in files {
        let text = std::fs::read_to_string(&f).context(|| format!("reading {}", f.display()))?;
        let loaded = match Report::from_json(&text) {
            Ok(r) => Loaded::Sequence(r),
            Err(_) => Loaded::Baseline(
                serde_json::from_str(&text)
                    .map_err(Error::from)
                    .context(|| format!("{} is neither a run report nor a baseline report", f.display()))?,
            ),
        };
        out.push((f, loaded));
    }
    if out.is_empty() {
        return Err(CliError::Runtime {
            context: "table".into(),
            source: Error::Lookup(format!("no {REPORT_FILE} found under the given paths")),
        });
    }
    Ok(out)
}

fn pct(m: &MeanStd) -> String {
    format!("{:.2}±{:.2}", 100.0 * m.mean, 100.0 * m.std)
}

struct Row {
    label: String,
    order: String,
    cells: Vec<String>,
}

/// Header, rows and an across-order average per variant with several orders.
pub fn render(reports: &[(PathBuf, Loaded)]) -> CliResult<String> {
    let domain_sets: Vec<(Vec<String>, &Path)> = reports
        .iter()
        .map(|(p, r)| {
            (
                match r {
                    Loaded::Sequence(r) => r.order.clone(),
                    Loaded::Baseline(b) => b.domains.clone(),
                },
                p.as_path(),
            )
        })
        .collect();
    let columns = domain_sets[0].0.clone();
    let reference: BTreeSet<&String> = columns.iter().collect();
    for (set, path) in &domain_sets {
        if set.iter().collect::<BTreeSet<_>>() != reference {
            return Err(CliError::Runtime {
                context: "table".into(),
                source: Error::Contract(format!(
                    "{} covers domains {set:?}, but {} covers {columns:?}",
                    path.display(),
                    domain_sets[0].1.display()
                )),
            });
        }
    }

    let mut header = vec!["Variant".to_string(), "Order".to_string()];
    for d in &columns {
        header.push(format!("{d} MF1"));
        header.push(format!("{d} Acc"));
    }
    header.extend(["Avg MF1", "Avg Acc", "Forget R. MF1", "Forget R. Acc"].map(String::from));

    let mut rows = Vec::new();
    let mut groups: Vec<(String, Vec<&Report>)> = Vec::new();
    for (_, r) in reports {
        match r {
            Loaded::Sequence(r) => {
                let mut cells = Vec::new();
                for d in &columns {
                    let s = r.per_domain.iter().find(|s| &s.domain == d).expect("domain sets checked");
                    cells.push(pct(&s.macro_f1));
                    cells.push(pct(&s.accuracy));
                }
                cells.extend([&r.average_macro_f1, &r.average_accuracy, &r.forgetting_macro_f1, &r.forgetting_accuracy].map(pct));
                rows.push(Row { label: r.variant.name().to_string(), order: r.order.join(">"), cells });
                match groups.iter_mut().find(|(v, _)| v == r.variant.name()) {
                    Some((_, g)) => g.push(r),
                    None => groups.push((r.variant.name().to_string(), vec![r])),
                }
            }
            Loaded::Baseline(b) => {
                let mut cells = Vec::new();
                for d in &columns {
                    let s = b.per_domain.iter().find(|s| &s.domain == d).expect("domain sets checked");
                    cells.push(pct(&s.macro_f1));
                    cells.push(pct(&s.accuracy));
                }
                cells.extend([pct(&b.average_macro_f1), pct(&b.average_accuracy), "-".into(), "-".into()]);
                rows.push(Row { label: "BACKBONE".into(), order: "-".into(), cells });
            }
        }
    }
    for (variant, group) in &groups {
        let orders: BTreeSet<&Vec<String>> = group.iter().map(|r| &r.order).collect();
        if orders.len() < 2 {
            continue;
        }
        // Mean over orders of the per-order means; std across orders.
        let across = |f: &dyn Fn(&Report) -> f64| pct(&MeanStd::of(&group.iter().map(|r| f(r)).collect::<Vec<_>>()));
        let mut cells = Vec::new();
        for d in &columns {
            let find = |r: &Report| r.per_domain.iter().find(|s| &s.domain == d).cloned().expect("domain sets checked");
            cells.push(across(&|r| find(r).macro_f1.mean));
            cells.push(across(&|r| find(r).accuracy.mean));
        }
        cells.push(across(&|r| r.average_macro_f1.mean));
        cells.push(across(&|r| r.average_accuracy.mean));
        cells.push(across(&|r| r.forgetting_macro_f1.mean));
        cells.push(across(&|r| r.forgetting_accuracy.mean));
        rows.push(Row { label: variant.clone(), order: format!("mean of {} orders", group.len()), cells });
    }

    let mut table: Vec<Vec<String>> = vec![header];
    for r in rows {
        let mut line = vec![r.label, r.order];
        line.extend(r.cells);
        table.push(line);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &table {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    Ok(out)
}

pub fn cmd_table(paths: &[PathBuf]) -> CliResult<String> {
    render(&collect_reports(paths)?)
}
