//! Benchmarks for the `claw-unet` kernels, forward pass, training step and
//! metrics. Run with `cargo bench -p claw-unet-bench`.
