//! Machine-readable reports shared by all checkers.
//!
//! A report is a flat list of cases, each carrying the maximal residual that
//! was observed and a witness of where it occurred. The verdict is `pass`
//! exactly when every residual is within tolerance. A passing check is
//! falsification-grade evidence (limited to the battery it ran on); a failing
//! one is a certified counterexample.

use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct CheckCase {
    /// Stopping times the case quantified over (two for pairs, three for triples).
    pub triple: Vec<String>,
    /// Label of the position (or other subject) the residual belongs to.
    #[serde(rename = "X")]
    pub label: String,
    pub residual: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness_atom: Option<String>,
    /// Atoms excluded because a penalty term was infinite there.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub skipped_atoms: Vec<String>,
}

impl CheckCase {
    pub fn new(triple: Vec<String>, label: impl Into<String>, residual: f64) -> Self {
        CheckCase {
            triple,
            label: label.into(),
            residual,
            witness_atom: None,
            skipped_atoms: Vec::new(),
        }
    }

    pub fn with_witness(mut self, atom: Option<String>) -> Self {
        self.witness_atom = atom;
        self
    }

    pub fn with_skipped(mut self, skipped: Vec<String>) -> Self {
        self.skipped_atoms = skipped;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConsistencyReport {
    pub cases: Vec<CheckCase>,
    pub tolerance: f64,
    pub verdict: Verdict,
}

impl ConsistencyReport {
    /// Assembles a report; the verdict is `pass` iff the maximal residual is
    /// within tolerance.
    pub fn from_cases(cases: Vec<CheckCase>, tolerance: f64) -> Self {
        let verdict = if cases.iter().all(|c| c.residual <= tolerance) {
            Verdict::Pass
        } else {
            Verdict::Fail
        };
        ConsistencyReport {
            cases,
            tolerance,
            verdict,
        }
    }

    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }

    pub fn max_residual(&self) -> f64 {
        self.cases.iter().map(|c| c.residual).fold(0.0, f64::max)
    }

    /// The case realizing the maximal residual.
    pub fn worst_case(&self) -> Option<&CheckCase> {
        self.cases
            .iter()
            .max_by(|a, b| a.residual.total_cmp(&b.residual))
    }
}
