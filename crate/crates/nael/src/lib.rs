//! Noise-aware ensemble learning (NAEL) for LPI radar modulation recognition.
//!
//! The pipeline: synthesize one of 12 LPI radar waveforms, push it through an
//! AWGN channel, transform it into a Choi-Williams time-frequency image, and
//! classify it with a cascade of small CNNs. A lightweight preliminary
//! recognizer (PRN) always runs; a gradient-map-based noise-aware network
//! (NAN) decides whether its verdict is trustworthy, and only when it is not
//! does the heavier advanced recognizer (ARN) run. Average compute cost is
//! tracked with an exact multiply-accumulate FLOPs model.

/// The numeric kernels allocate one large buffer per layer per batch;
/// an allocator that recycles big blocks instead of returning them to the
/// OS removes substantial page-fault overhead.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod tfa;
pub mod training;
pub mod waveform;

pub use error::{NaelError, Result};
