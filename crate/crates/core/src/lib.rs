//! Training-free spatio-temporal cross-attention editing for text-guided
//! diffusion models.
//!
//! An edit runs in two passes over a [`Backend`]. The first denoises the
//! original and the edited prompt side by side and records their
//! cross-attention. From that record, [`fwt`] derives a per-word temporal
//! scale and [`dps`] a per-pixel spatial scale. The second pass replays the
//! seed for the edited prompt while [`controller`] injects gated, blended
//! maps at every step.
//!
//! ```no_run
//! use adapedit::backend::toy::ToyBackend;
//! use adapedit::controller::{run_edit, EditParams};
//!
//! let mut backend = ToyBackend::new();
//! let out = run_edit(
//!     "a dog standing on the grass",
//!     "a dog sitting on the grass",
//!     &EditParams::default(),
//!     &mut backend,
//! )?;
//! out.edited.save("x_star.png")?;
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

pub mod align;
pub mod backend;
pub mod cli;
pub mod config;
pub mod controller;
pub mod dps;
pub mod error;
pub mod fwt;
pub mod output;
pub mod record;
pub mod tensor;

pub use backend::Backend;
pub use controller::{run_edit, EditOutcome, EditParams};
pub use error::{Error, Result};
pub use tensor::Matrix;
