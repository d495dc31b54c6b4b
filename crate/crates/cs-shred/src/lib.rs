//! Reconstruction of spatiotemporal fields from a few point sensors whose
//! time series are themselves incomplete.
//!
//! The pipeline has two stages. A compressed-sensing stage fills the gaps in
//! each sensor window by solving an l1-penalized least-squares problem in the
//! Fourier domain (basis pursuit denoising). The completed windows then drive
//! a recurrent encoder (stacked LSTM) whose final hidden state a shallow
//! decoder maps to the full spatial field. Training uses an SNR-adaptive loss
//! that shifts weight between reconstruction terms as recovery quality
//! changes. Skipping the recovery stage gives the plain sensing baseline, so
//! both models share one code path.
//!
//! Modules follow the data flow: [`field`] holds grids, scaling and sensor
//! datasets; [`subsample`] removes column/snapshot blocks to emulate failed
//! acquisition; [`linops`] and [`bpdn`] implement the measurement operators
//! and the sparse solver; [`net`] the encoder/decoder with hand-written
//! backpropagation; [`train`] the loss, optimizer and fit loop; [`metrics`]
//! the evaluation suite; [`synth`] test-signal generators; [`pipeline`] ties
//! everything to a run configuration.

pub mod bpdn;
pub mod field;
pub mod linops;
pub mod metrics;
pub mod net;
pub mod pipeline;
pub mod rng;
pub mod subsample;
pub mod synth;
pub mod train;

pub use rustfft::num_complex;
