use std::fmt::Write as _;

use anonvec_core::ScenarioResult;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::AnonymizerKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scenario: String,
    /// Exact value returned by the EER computation.
    pub eer: f64,
    /// The same value rounded to six decimals, as shown in the table.
    pub eer_6dp: String,
    pub threshold: f64,
    pub n_genuine: usize,
    pub n_impostor: usize,
}

impl From<&ScenarioResult> for ReportRow {
    fn from(r: &ScenarioResult) -> Self {
        Self {
            scenario: r.scenario.to_string(),
            eer: r.eer,
            eer_6dp: format!("{:.6}", r.eer),
            threshold: r.threshold,
            n_genuine: r.n_genuine,
            n_impostor: r.n_impostor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub anonymizer: AnonymizerKind,
    pub seed: u64,
    pub results: Vec<ReportRow>,
    pub config: Value,
}

impl Report {
    pub fn row(&self, scenario: &str) -> Option<&ReportRow> {
        self.results.iter().find(|r| r.scenario == scenario)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "anonymizer  {}", self.anonymizer).unwrap();
        writeln!(s, "seed        {}", self.seed).unwrap();
        writeln!(s).unwrap();
        writeln!(s, "{:<9} {:>9} {:>10} {:>8} {:>9}", "scenario", "EER", "threshold", "genuine", "impostor").unwrap();
        for r in &self.results {
            writeln!(
                s,
                "{:<9} {:>9} {:>10.6} {:>8} {:>9}",
                r.scenario, r.eer_6dp, r.threshold, r.n_genuine, r.n_impostor
            )
            .unwrap();
        }
        writeln!(s).unwrap();
        writeln!(s, "config {}", serde_json::to_string(&self.config).expect("config serializes")).unwrap();
        s
    }
}
