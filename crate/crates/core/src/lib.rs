// SPDX-License-Identifier: MIT OR Apache-2.0

//! Domain-specific data curation and compression for small language models.
//!
//! The crate covers the whole path from a base model to a pruned,
//! distilled domain specialist:
//!
//! 1. [`saliency`] ranks activation coordinates at a hookpoint by their
//!    sensitivity to the input embedding, estimated with randomized
//!    Jacobian-vector products.
//! 2. [`sae`] trains a sparse autoencoder on the selected coordinates.
//! 3. [`curation`] embeds a large corpus with the SAE encoder and keeps the
//!    samples closest to a handful of seed examples.
//! 4. [`prune`] removes attention heads and feed-forward channels that matter
//!    least for the curated data.
//! 5. [`distill`] fine-tunes the pruned model on teacher-generated targets.
//!
//! [`pipeline`] strings the stages together behind a JSON config with
//! checksummed, resumable artifacts.

pub mod autodiff;
pub mod curation;
pub mod distill;
pub mod error;
pub mod io;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod prune;
pub mod rng;
pub mod sae;
pub mod saliency;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
