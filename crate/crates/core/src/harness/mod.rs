//! Fixtures, batch I/O and the fidelity evaluator behind the command line tool.

pub mod evaluate;
pub mod fixtures;
pub mod io;

pub use evaluate::{
    compression_report, evaluate_fidelity, lossless_copy, CompressionReport, EvaluationReport, FidelityReport,
    REPORT_NOTE,
};
pub use fixtures::{fixture_inputs, fixture_model, gen_fixture, FixtureArch, FIXTURE_INPUTS};
pub use io::{read_batch, write_batch};
