//! Criterion benchmarks for the numeric kernels, a training step and
//! inference. Run with `cargo bench -p xlner-bench`.
