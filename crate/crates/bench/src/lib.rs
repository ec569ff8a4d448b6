//! Criterion benchmarks for the numeric kernels and a full training step.
//! Run with `cargo bench -p stampnet-bench`.
