//! Attribute-conditioned attention embeddings for attribute-specific image retrieval.
//!
//! An image and a one-hot attribute vector map to an attribute-specific
//! embedding. Embeddings of images sharing a sub-class of that attribute are
//! trained to be close under cosine similarity.

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod train;

pub use error::{AgmanError, Result};
