//! Artifacts: JSON reports, long-format CSV and a plain-text summary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stising::{Estimate, Result};

use crate::config::RunConfig;

pub const VERSION: &str = env!("STISING_VERSION");

/// Provenance embedded in every artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

impl Meta {
    pub fn of(cfg: &RunConfig) -> Self {
        Self { config_hash: cfg.hash(), seed: cfg.seed, version: VERSION.to_string() }
    }
}

/// One CSV row: `index,group,x,quantity,value,std_error`.
#[derive(Clone, Debug)]
pub struct Row {
    pub index: usize,
    pub group: String,
    pub x: f64,
    pub quantity: String,
    pub value: f64,
    pub std_error: f64,
}

/// What a command hands back to the driver.
#[derive(Debug)]
pub struct Outcome {
    /// File stem for the artifacts.
    pub name: String,
    /// `None` when the command makes no assertion.
    pub passed: Option<bool>,
    pub report: serde_json::Value,
    pub rows: Vec<Row>,
    pub summary: Vec<(String, String)>,
}

impl Outcome {
    pub fn new(name: &str, report: impl Serialize) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            passed: None,
            report: serde_json::to_value(report)?,
            rows: Vec::new(),
            summary: Vec::new(),
        })
    }

    pub fn row(&mut self, group: &str, x: f64, quantity: &str, e: Estimate) {
        let index = self.rows.len();
        self.rows.push(Row {
            index,
            group: group.to_string(),
            x,
            quantity: quantity.to_string(),
            value: e.value,
            std_error: e.std_error,
        });
    }

    pub fn line(&mut self, key: &str, value: impl std::fmt::Display) {
        self.summary.push((key.to_string(), value.to_string()));
    }

    pub fn estimate_line(&mut self, key: &str, e: Estimate) {
        self.line(key, format!("{:.6} ± {:.6}", e.value, e.std_error));
    }
}

pub fn csv(cfg: &RunConfig, rows: &[Row]) -> Result<String> {
    let meta = Meta::of(cfg);
    let mut out = String::new();
    writeln!(out, "# version={}", meta.version).unwrap();
    writeln!(out, "# seed={}", meta.seed).unwrap();
    writeln!(out, "# config_hash={}", meta.config_hash).unwrap();
    writeln!(out, "# config={}", serde_json::to_string(cfg)?).unwrap();
    out.push_str("index,group,x,quantity,value,std_error\n");
    for r in rows {
        writeln!(out, "{},{},{},{},{},{}", r.index, r.group, r.x, r.quantity, r.value, r.std_error).unwrap();
    }
    Ok(out)
}

pub fn json(cfg: &RunConfig, o: &Outcome) -> Result<String> {
    let doc = serde_json::json!({
        "meta": Meta::of(cfg),
        "config": cfg,
        "command": o.name,
        "passed": o.passed,
        "report": o.report,
    });
    Ok(serde_json::to_string_pretty(&doc)? + "\n")
}

/// Write `<out>/<name>.json` and `<out>/<name>.csv`; returns their paths.
pub fn write(cfg: &RunConfig, o: &Outcome) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(&cfg.out)?;
    let j = cfg.out.join(format!("{}.json", o.name));
    let c = cfg.out.join(format!("{}.csv", o.name));
    std::fs::write(&j, json(cfg, o)?)?;
    std::fs::write(&c, csv(cfg, &o.rows)?)?;
    Ok(vec![j, c])
}

pub fn print_summary(o: &Outcome, files: &[PathBuf]) {
    let width = o.summary.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    println!("{}", o.name);
    for (k, v) in &o.summary {
        println!("  {k:<width$}  {v}");
    }
    let status = match o.passed {
        Some(true) => "PASS",
        Some(false) => "FAIL",
        None => "done",
    };
    println!("  {:<width$}  {status}", "status");
    for f in files {
        println!("  wrote {}", display(f));
    }
}

fn display(p: &Path) -> String {
    p.display().to_string()
}
