//! Distributed arrays with a single global index space.
//!
//! A [`DistMap`] block-distributes a 1-D or 2-D shape over the ranks of a job;
//! a [`DistArray`] holds one rank's block of such an array. Data moves only in
//! the two collectives [`DistArray::scatter_from_zero`] and [`DistArray::agg`],
//! both rooted at rank 0.

mod array;
mod map;
mod payload;

use thiserror::Error;

use crate::fabric::FabricError;

pub use array::{copy_block, place_block, DistArray, AGG_TAG, SCATTER_TAG};
pub use map::{block_extent, DistMap, Extent};
pub use payload::{Dtype, Element, TypedArrayPayload};

#[derive(Debug, Error)]
pub enum PgasError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("malformed distributed block: {0}")]
    Protocol(String),
    #[error(transparent)]
    Fabric(#[from] FabricError),
}

pub type Result<T> = std::result::Result<T, PgasError>;
