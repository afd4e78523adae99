//! Two-level gated recurrent decoding for visual dialogue, end to end:
//! a minimal reverse-mode tensor tape, LSTM cells, three context
//! encoders, the deliberation/abandon/memory decoder with its ablation
//! ladder, a deterministic synthetic dialogue benchmark, teacher-forced
//! training with Adam and cosine annealing, and likelihood-based
//! candidate ranking with retrieval metrics.
//!
//! The `examples/` directory is the guided tour; each example is
//! runnable on its own:
//!
//! ```text
//! cargo run --release --example generate_dataset   # synthetic data
//! cargo run --release --example gradient_check     # autodiff vs finite differences
//! cargo run --release --example train_overfit      # fit one small dataset
//! cargo run --release --example ablation_ladder    # 2lstm / 2l-m / 2l-dm / 2l-dam
//! cargo run --release --example evaluate_ranking   # retrieval metrics
//! cargo run --release --example decode_and_trace   # greedy decoding + gate ratios
//! ```
//!
//! The same capabilities ship as one thin binary with subcommands
//! (`gen-data`, `train`, `eval`, `decode`, `gate-trace`, `grad-check`);
//! see the README for the command-line surface.

pub mod cli;
pub mod data;
pub mod decoder;
pub mod encoder;
mod error;
pub mod eval;
pub mod gradcheck;
pub mod lstm;
pub mod model;
mod rng;
pub mod tensor;
pub mod train;

pub use decoder::{DecoderState, StepTrace, UnitConfig};
pub use encoder::{EncoderVariant, KnowledgeBase};
pub use error::{DamError, Result};
pub use eval::MetricsReport;
pub use model::{Model, ModelConfig};
pub use rng::DetRng;
pub use tensor::{Scalar, Tape, Tensor, Var};
pub use train::TrainConfig;
