#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod blur_event;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod field;
pub mod image;
pub mod io;
pub mod lie;
pub mod metrics;
pub mod optim;
pub mod render;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
