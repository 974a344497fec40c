use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::distill::QueryFidelity;

/// One table row: an interpreter at one split size and regime, or the base
/// ranker's own effectiveness (tau columns not applicable).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// Split size, or the base ranker's name for the base row.
    pub split: String,
    /// `AM`, `IM` or `base`.
    pub regime: String,
    pub ndcg_at_k: f64,
    pub precision_at_k: f64,
    pub tau: Option<f64>,
    pub tau_at_k: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub k: usize,
    /// AM rows by ascending split, then IM rows, then the base row.
    pub rows: Vec<ReportRow>,
}

/// Four decimals, exact ties rounded half to even; `-0.0000` prints as `0.0000`.
pub fn format_value(value: f64) -> String {
    let text = format!("{value:.4}");
    if text == "-0.0000" {
        "0.0000".to_string()
    } else {
        text
    }
}

fn cell(value: Option<f64>) -> String {
    value.map_or_else(|| "NA".to_string(), format_value)
}

impl FidelityReport {
    pub fn base_row(&self) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.regime == "base")
    }

    pub fn row(&self, split: usize, regime: &str) -> Option<&ReportRow> {
        let split = split.to_string();
        self.rows.iter().find(|r| r.split == split && r.regime == regime)
    }

    pub fn to_csv(&self) -> String {
        let k = self.k;
        let mut out = format!("split,regime,ndcg@{k},prec@{k},tau,tau@{k}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.split,
                r.regime,
                format_value(r.ndcg_at_k),
                format_value(r.precision_at_k),
                cell(r.tau),
                cell(r.tau_at_k)
            );
        }
        out
    }

    /// Side-by-side layout: one line per split with the AM block then the IM
    /// block, base ranker last.
    pub fn to_markdown(&self) -> String {
        let k = self.k;
        let block = format!("NDCG@{k} | Prec.@{k} | τ | τ@{k}");
        let mut out = format!("| Training Size | AM {} | IM {} |\n", block.replace(" | ", " | AM "), block.replace(" | ", " | IM "));
        out.push_str(&format!("|{}\n", "---:|".repeat(9)));
        let metrics = |r: Option<&ReportRow>| match r {
            Some(r) => format!(
                "{} | {} | {} | {}",
                format_value(r.ndcg_at_k),
                format_value(r.precision_at_k),
                cell(r.tau),
                cell(r.tau_at_k)
            ),
            None => "NA | NA | NA | NA".to_string(),
        };
        let mut splits: Vec<&str> = Vec::new();
        for r in self.rows.iter().filter(|r| r.regime != "base") {
            if !splits.contains(&r.split.as_str()) {
                splits.push(&r.split);
            }
        }
        for split in splits {
            let find = |regime: &str| self.rows.iter().find(|r| r.split == split && r.regime == regime);
            let _ = writeln!(out, "| {split} | {} | {} |", metrics(find("AM")), metrics(find("IM")));
        }
        if let Some(base) = self.base_row() {
            let m = metrics(Some(base));
            let _ = writeln!(out, "| {} | {m} | {m} |", base.split);
        }
        out
    }
}

/// `split,regime,query_id,ndcg@k,prec@k,tau,tau@k` lines for every
/// evaluated query.
pub fn per_query_csv(k: usize, entries: &[(String, String, Vec<QueryFidelity>)]) -> String {
    let mut out = format!("split,regime,query_id,ndcg@{k},prec@{k},tau,tau@{k}\n");
    for (split, regime, queries) in entries {
        for q in queries {
            let _ = writeln!(
                out,
                "{split},{regime},{},{},{},{},{}",
                q.query_id,
                format_value(q.ndcg_at_k),
                format_value(q.precision_at_k),
                cell(q.tau),
                cell(q.tau_at_k)
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(split: &str, regime: &str, tau: Option<f64>) -> ReportRow {
        ReportRow {
            split: split.into(),
            regime: regime.into(),
            ndcg_at_k: 0.33971,
            precision_at_k: 0.5,
            tau,
            tau_at_k: tau,
        }
    }

    #[test]
    fn one_row_csv_has_two_lines() {
        let report = FidelityReport { k: 10, rows: vec![row("100", "AM", Some(0.8664))] };
        assert_eq!(report.to_csv(), "split,regime,ndcg@10,prec@10,tau,tau@10\n100,AM,0.3397,0.5000,0.8664,0.8664\n");
    }

    #[test]
    fn base_row_prints_na() {
        let report = FidelityReport { k: 10, rows: vec![row("M-P", "base", None)] };
        assert!(report.to_csv().ends_with("M-P,base,0.3397,0.5000,NA,NA\n"));
    }

    #[test]
    fn rounding_is_half_even_on_exact_ties() {
        assert_eq!(format_value(0.03125), "0.0312");
        assert_eq!(format_value(0.09375), "0.0938");
        assert_eq!(format_value(1.0), "1.0000");
        assert_eq!(format_value(-0.00001), "0.0000");
        assert_eq!(format_value(-0.5), "-0.5000");
    }

    #[test]
    fn markdown_puts_base_last() {
        let report = FidelityReport {
            k: 10,
            rows: vec![row("2", "AM", Some(0.5)), row("2", "IM", Some(0.25)), row("M-L", "base", None)],
        };
        let md = report.to_markdown();
        let lines: Vec<&str> = md.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].contains("AM NDCG@10") && lines[0].contains("IM τ@10"));
        assert!(lines[2].starts_with("| 2 | 0.3397 | 0.5000 | 0.5000 | 0.5000 | 0.3397"));
        assert!(lines[3].starts_with("| M-L |") && lines[3].contains("NA"));
    }
}
