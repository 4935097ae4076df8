//! FLOP accounting, latency benchmarks and report emission.
//!
//! MACs count one multiply-accumulate each; GFLOPs are `2 * MACs / 1e9`.

mod bench;
mod report;

pub use bench::{
    bench_attention, bench_from_csv, bench_model, bench_to_csv, percentile, time_runs, write_bench_csv, AttentionPoint,
    BenchResult, KernelKind, DEFAULT_TILE, MIN_REPS, MIN_WARMUP,
};
pub use report::{
    emit_report, flop_report, from_csv, from_json, gflops, to_csv, to_json, verify_instrumented, FlopReport, FlopRow,
    ReportFormat, CSV_HEADER, SCHEMA_VERSION,
};

#[cfg(test)]
mod tests;
