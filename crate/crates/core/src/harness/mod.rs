//! Trace files, synthetic trace generation, the end-to-end pipeline and
//! report emission.

pub mod pipeline;
pub mod report;
pub mod synth;
pub mod trace;

pub use pipeline::{run_pipeline, CostModel, PipelineConfig};
pub use report::{emit_report, ReportFormat, RunReport, SCHEMA_VERSION};
pub use synth::{gen_trace, AttentionMode, OutlierSpec, SyntheticSpec};
pub use trace::{Trace, TraceHeader, TraceLayer};
