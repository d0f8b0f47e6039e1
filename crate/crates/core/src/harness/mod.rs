//! Multi-turn benchmark harness: trace loading, the turn driver and reports.

pub mod report;
pub mod run;
pub mod trace;

pub use report::{emit_report, metrics_csv, strip_timing_columns, ReportFiles, RunReport};
pub use run::{run_conversation, run_conversation_with, Checkpoints, RunConfig, Session, TurnMetrics};
pub use trace::{
    byte_tokenize, generate_synthetic, load_traces, ConversationTrace, SyntheticTrace, SyntheticTurn, TraceFormat,
    TraceShape, Turn,
};
