//! Continuous attribute words for text-conditioned diffusion models.
//!
//! A [`mapper::WordMapper`] turns attribute values into token embeddings that
//! are spliced into a prompt before the text encoder. Training happens in two
//! stages: an identity token first, then adapters and mappers with the
//! identity held fixed.

pub mod attribute;
pub mod backbone;
pub mod checkpoint;
pub mod conditioning;
pub mod data;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod inference;
pub mod mapper;
pub mod template;
pub mod training;
pub mod words;

pub use error::{Error, Result};
