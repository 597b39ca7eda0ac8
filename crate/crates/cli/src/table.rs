//! `imfnd report`: comparison tables over saved reports.

use std::path::Path;

use anyhow::{Context, Result};
use clap::ValueEnum;
use imfnd::evaluation::EvaluationReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TableFormat {
    Markdown,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flag {
    Best,
    Second,
    None,
}

impl Flag {
    fn as_str(self) -> &'static str {
        match self {
            Flag::Best => "best",
            Flag::Second => "second",
            Flag::None => "",
        }
    }
}

/// Best and second-best flags for a higher-is-better column. Rows sharing a
/// value share its flag.
pub fn rank_flags(values: &[f64]) -> Vec<Flag> {
    let mut distinct: Vec<f64> = values.to_vec();
    distinct.sort_by(|a, b| b.total_cmp(a));
    distinct.dedup();
    values
        .iter()
        .map(|v| match distinct.iter().position(|d| d == v) {
            Some(0) => Flag::Best,
            Some(1) => Flag::Second,
            _ => Flag::None,
        })
        .collect()
}

pub fn load_reports(paths: &[impl AsRef<Path>]) -> Result<Vec<EvaluationReport>> {
    paths
        .iter()
        .map(|p| {
            let p = p.as_ref();
            let raw = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            EvaluationReport::from_json(&raw).with_context(|| format!("parsing {}", p.display()))
        })
        .collect()
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

fn mark(cell: String, flag: Flag) -> String {
    match flag {
        Flag::Best => format!("**{cell}**"),
        Flag::Second => format!("<u>{cell}</u>"),
        Flag::None => cell,
    }
}

pub fn render(reports: &[EvaluationReport], format: TableFormat) -> String {
    let acc: Vec<f64> = reports.iter().map(|r| r.summary.mean_accuracy).collect();
    let f1: Vec<f64> = reports.iter().map(|r| r.summary.mean_macro_f1).collect();
    let (acc_flags, f1_flags) = (rank_flags(&acc), rank_flags(&f1));
    let mut out = String::new();
    match format {
        TableFormat::Markdown => {
            out.push_str("| Model | Mode | Shots | Seeds | Accuracy | Macro-F1 | Acc. std | Abstain |\n");
            out.push_str("|---|---|---:|---:|---:|---:|---:|---:|\n");
            for (i, r) in reports.iter().enumerate() {
                let s = &r.summary;
                out.push_str(&format!(
                    "| {} | {} | {} | {} | {} | {} | {} | {} |\n",
                    r.model_id,
                    r.mode(),
                    r.n_shots(),
                    r.seeds.len(),
                    mark(pct(s.mean_accuracy), acc_flags[i]),
                    mark(pct(s.mean_macro_f1), f1_flags[i]),
                    pct(s.std_accuracy),
                    pct(s.abstain_rate),
                ));
            }
        }
        TableFormat::Csv => {
            out.push_str("model,mode,n_shots,seeds,mean_accuracy,mean_macro_f1,std_accuracy,abstain_rate,accuracy_flag,macro_f1_flag\n");
            for (i, r) in reports.iter().enumerate() {
                let s = &r.summary;
                out.push_str(&format!(
                    "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{},{}\n",
                    r.model_id,
                    r.mode(),
                    r.n_shots(),
                    r.seeds.len(),
                    s.mean_accuracy,
                    s.mean_macro_f1,
                    s.std_accuracy,
                    s.abstain_rate,
                    acc_flags[i].as_str(),
                    f1_flags[i].as_str(),
                ));
            }
        }
    }
    out
}
