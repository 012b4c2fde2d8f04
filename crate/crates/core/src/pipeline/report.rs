use std::fmt::Write as _;
use std::path::Path;

use super::ledger::RunLedger;
use super::stages::STAGE_NAMES;
use super::Result;

pub const REPORT_FILE: &str = "report.txt";

fn section(out: &mut String, title: &str, path: &Path) {
    let _ = writeln!(out, "\n## {title}");
    match std::fs::read_to_string(path) {
        Ok(text) => out.push_str(text.trim_end()),
        Err(_) => out.push_str("absent"),
    }
    out.push('\n');
}

/// Summarises a run directory into `report.txt`. The text depends only on
/// the ledger and stage outputs, so re-running it is idempotent.
pub fn stage_report(run_dir: &Path) -> Result<String> {
    let ledger = RunLedger::load(run_dir)?;
    let mut out = String::new();
    let _ = writeln!(out, "# cgane run report");
    let _ = writeln!(out, "toolkit version: {}", ledger.toolkit_version);
    let _ = writeln!(out, "config hash: {}", ledger.config_hash);
    let _ = writeln!(out, "\n## Stages");
    for name in STAGE_NAMES {
        match ledger.stage(name) {
            Some(s) => {
                let _ = writeln!(
                    out,
                    "{name}: {:.1} s, {} outputs",
                    s.wall_clock_seconds,
                    s.outputs.len()
                );
            }
            None => {
                let _ = writeln!(out, "{name}: absent");
            }
        }
    }
    section(&mut out, "Dataset", &run_dir.join("dataset/summary.json"));
    section(
        &mut out,
        "Validation",
        &run_dir.join("validation/summary.json"),
    );
    section(
        &mut out,
        "AFP at fixed sensitivity",
        &run_dir.join("validation/afp_table.csv"),
    );
    section(
        &mut out,
        "Cross-validation",
        &run_dir.join("crossval/summary.json"),
    );
    section(
        &mut out,
        "Embedding",
        &run_dir.join("embedding/embedding.json"),
    );

    let _ = writeln!(out, "\n## Figures");
    let mut figures: Vec<String> = ledger
        .stages
        .iter()
        .flat_map(|s| s.outputs.iter())
        .filter(|o| o.path.ends_with(".svg"))
        .map(|o| o.path.clone())
        .collect();
    figures.sort();
    if figures.is_empty() {
        out.push_str("absent\n");
    }
    figures.iter().for_each(|f| {
        let _ = writeln!(out, "{f}");
    });
    std::fs::write(run_dir.join(REPORT_FILE), &out)?;
    Ok(out)
}
