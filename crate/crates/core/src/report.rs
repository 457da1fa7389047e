//! Text reports: summary JSON and per-step CSV.

use std::fmt::Write as _;

use crate::trajectory::{MechanicsSummary, StepMechanics};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    SummaryJson,
    PerStepCsv,
}

pub const PER_STEP_HEADER: &str = "t,K,V,L,H,E";

/// Renders a report. Floats use the shortest representation that round-trips,
/// so equal inputs give byte-identical text.
pub fn emit_report(summary: &MechanicsSummary, per_step: Option<&[StepMechanics]>, format: ReportFormat) -> String {
    match format {
        ReportFormat::SummaryJson => {
            let mut s = serde_json::to_string_pretty(summary).expect("summary serializes");
            s.push('\n');
            s
        }
        ReportFormat::PerStepCsv => per_step_csv(per_step.unwrap_or(&[])),
    }
}

pub fn per_step_csv(steps: &[StepMechanics]) -> String {
    let mut out = String::from(PER_STEP_HEADER);
    out.push('\n');
    for s in steps {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            s.t, s.kinetic, s.potential, s.lagrangian, s.log_energy, s.energy
        )
        .unwrap();
    }
    out
}
