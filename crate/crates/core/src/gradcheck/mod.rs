pub mod fd;
pub mod suite;

pub use suite::{format_table, op_names, run_suite, OpReport, SuiteOptions};
