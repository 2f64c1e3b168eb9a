//! Layer-wise instrumentation of transformer decoding and dominance-validated
//! token correction.
//!
//! The pieces:
//!
//! - [`tensor`]: dense `f64` kernels.
//! - [`trace`]: the JSON-lines decode trace format shared by every analyzer.
//! - [`model`]: an instrumented toy pre-norm decoder that produces traces.
//! - [`lens`]: logit-lens projection and token normalization.
//! - [`gate`]: attention ratios, visual heatmaps and stage difference maps.
//! - [`sad`]: dominant-token tracking and subdominant-accumulation detection.
//! - [`vdc`]: validated dominance correction, offline and online.
//! - [`chair`]: caption hallucination metrics.
//! - [`report`]: CSV/JSON export of all of the above.
//! - [`cli`]: the `domlens` command-line interface.

pub mod chair;
pub mod cli;
pub mod error;
pub mod gate;
pub mod lens;
pub mod model;
pub mod report;
pub mod sad;
pub mod tensor;
pub mod trace;
pub mod vdc;

pub use error::{Error, Result};
pub use lens::{Normalizer, Vocab};
pub use model::{generate, new_model, GenerateOptions, ModelConfig, Prompt, ToyModel};
pub use tensor::Matrix;
pub use trace::{read_trace, validate, write_trace, DecodeTrace, StepTrace, StreamKind};
pub use vdc::{correct_trace, decode_with_vdc, SourceSet, VdcConfig};
