//! Monocular 3D pose-sequence reconstruction with a sparse pose dictionary.
//!
//! A sequence of 3D poses is modelled as sparse combinations of dictionary
//! atoms viewed by a weak-perspective camera. Given 2D joint locations, the
//! penalized fit is solved by block coordinate descent ([`bcd`]); given only
//! per-joint heat maps, the 2D locations are treated as latent and
//! marginalized by EM ([`em`]).

pub mod apg;
pub mod bcd;
pub mod config;
pub mod dict;
pub mod em;
pub mod error;
pub mod init;
pub mod io;
pub mod metrics;
pub mod objective;
pub mod pipeline;
pub mod so3;
pub mod synth;
pub mod types;
pub mod validate;

pub use error::{Error, FormatError, Result};
pub use types::*;
pub use validate::{Validate, Violation, ViolationKind};
