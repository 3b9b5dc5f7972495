//! Output files: `report.json`, `records.jsonl`, `summary.txt` and plot data.
//!
//! `report.json` wraps the payload in an envelope whose header holds the
//! timestamp, so the payload itself is byte-identical across reruns.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::Result;
use crate::experiments::{AdherenceSummary, ComparisonReport, SweepReport};
use crate::runner::RunRecord;

#[derive(Serialize)]
struct Header {
    tool: &'static str,
    version: &'static str,
    created: String,
}

#[derive(Serialize)]
struct Envelope<'a, T> {
    header: Header,
    payload: &'a T,
}

/// Canonical serialized form used for reproducibility checks.
pub fn payload_json<T: Serialize>(payload: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(payload)?)
}

pub fn records_jsonl(records: &[RunRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Writes the standard files plus any `extra` (name, contents) pairs and
/// returns the paths written.
pub fn write_outputs<T: Serialize>(
    dir: &Path,
    payload: &T,
    records: &[RunRecord],
    summary: &str,
    extra: &[(&str, String)],
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let envelope = Envelope {
        header: Header {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            created: chrono::Utc::now().to_rfc3339(),
        },
        payload,
    };
    let mut files = vec![
        ("report.json", serde_json::to_string_pretty(&envelope)? + "\n"),
        ("records.jsonl", records_jsonl(records)?),
        ("summary.txt", summary.to_string()),
    ];
    files.extend(extra.iter().map(|(n, c)| (*n, c.clone())));
    let mut written = Vec::new();
    for (name, contents) in files {
        let path = dir.join(name);
        std::fs::File::create(&path)?.write_all(contents.as_bytes())?;
        written.push(path);
    }
    Ok(written)
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{:.2}", 100.0 * v))
}

fn failure_block(out: &mut String, failures: &[crate::experiments::Failure]) {
    if failures.is_empty() {
        return;
    }
    let _ = writeln!(out, "\n!! {} run(s) FAILED and were excluded:", failures.len());
    for f in failures {
        let _ = writeln!(out, "!!   {}: {}", f.run_id, f.error);
    }
}

pub fn sweep_summary(r: &SweepReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "sweep: {} combinations x {} dataset(s), {} seed(s) per combination, {} iterations, config {}",
        r.rows.len(),
        r.datasets.len(),
        r.meta.runs_per_config,
        r.meta.iterations,
        &r.meta.config_hash[..12]
    );
    let _ = writeln!(out, "\n{:<18} {:>10}  per-dataset ranks", "hidden-output", "mean rank");
    for row in &r.ranks.rows {
        let ranks: Vec<String> = row.ranks.iter().map(|x| format!("{x:.1}")).collect();
        let _ = writeln!(out, "{:<18} {:>5.1} ± {:<4.1} {}", row.label, row.mean, row.std, ranks.join(" "));
    }
    let _ = writeln!(out, "\nsame function in both layers:");
    for d in &r.diagonal {
        let _ = writeln!(out, "  {:<10} {:.1} ± {:.1}", d.aggregator.to_string(), d.mean_rank, d.std);
    }
    failure_block(&mut out, &r.failures);
    out
}

pub fn comparison_summary(r: &ComparisonReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "compare: {} run(s) per variant, {} iterations, config {}",
        r.meta.runs_per_config,
        r.meta.iterations,
        &r.meta.config_hash[..12]
    );
    for d in &r.results {
        let _ = writeln!(out, "\n{}", d.dataset);
        for v in &d.variants {
            let _ = writeln!(
                out,
                "  {:<14} {:>6} ± {:<6} ({} completed){}",
                v.variant.to_string(),
                pct(v.mean),
                pct(v.std),
                v.completed,
                if v.best { "  best" } else { "" }
            );
        }
        for t in &d.tests {
            let p = t.wilcoxon.as_ref().map_or_else(|| "n/a".into(), |w| format!("{:.4}", w.p_value));
            let _ = writeln!(out, "  {} vs {}: p = {} {}", t.a, t.b, p, t.marker);
        }
    }
    failure_block(&mut out, &r.failures);
    out
}

pub fn adherence_summary(r: &AdherenceSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "adherence on [{}, {}]: {} run(s), {} iterations, config {}",
        r.range.0,
        r.range.1,
        r.meta.runs_per_config,
        r.meta.iterations,
        &r.meta.config_hash[..12]
    );
    for e in &r.entries {
        let _ = writeln!(
            out,
            "  {:<16} {:>3} features  {:<14} layer {}  {:>6}%",
            e.dataset,
            e.n_features,
            e.variant.to_string(),
            e.layer,
            pct(e.fraction)
        );
    }
    failure_block(&mut out, &r.failures);
    out
}
