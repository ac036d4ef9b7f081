//! Self-supervised audio-visual contrastive learning at desk scale.
//!
//! Two non-shared encoders embed a visual feature vector and a mel
//! spectrogram. An attention-style fusion module gates both embeddings with
//! one shared excitation vector, and training minimizes a weighted sum of a
//! cross-correlation alignment loss and a bidirectional cross-modal
//! contrastive loss. Everything runs on the small autodiff tape in
//! [`tensor`].

pub mod audio;
pub mod data;
pub mod error;
pub mod fsutil;
pub mod gradsuite;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
