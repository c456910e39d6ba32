//! Criterion benchmarks for the tensor kernels, metrics and RRAE training step.
