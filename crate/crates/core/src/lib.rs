#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod calibration;
pub mod container;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod fft;
pub mod forcing;
pub mod field;
pub mod grid;
pub mod norms;
pub mod rescale;
pub mod solver;
pub mod spectral;
pub mod sweep;
pub mod synthesis;
pub mod timegrid;

pub use error::{Error, Result};
pub use field::{Components, FieldLike, Representation, ScalarField, TensorField, VectorField};
pub use grid::GridSpec;
pub use spectral::Spectral;
