//! Neural parameter allocation search.
//!
//! Trains a layered network under an arbitrary fixed parameter budget by
//! sharing parameters between layers. Layers are mapped to parameter groups
//! ([`groupsearch`]), and every forward pass morphs each group's parameters
//! into the weights its layers need ([`weightgen`]).

pub mod archspec;
pub mod autodiff;
pub mod error;
pub mod groupsearch;
pub mod harness;
pub mod paramstore;
pub mod rng;
pub mod weightgen;

pub use error::{Error, Result};
