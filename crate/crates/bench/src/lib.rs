//! Benchmarks for the hot numeric paths.
