//! Relational table interpretation: learn cell and column representations
//! over a collection of tables by aggregating intra-table context (same
//! column/row, page topic) and inter-table context (same value, same schema
//! position, topic mentions), then predict per-column types and subject to
//! object column relations. Supports supervised multi-task training and
//! masked-cell pre-training.

pub mod checkpoint;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod index;
pub mod model;
pub mod parallel;
pub mod params;
pub mod seed;
pub mod synthgen;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Result, TcnError};
