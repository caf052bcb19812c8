//! Spatio-temporal lighting estimation from chrome-ball probes.

pub mod distill;
pub mod envmap;
pub mod error;
pub mod eval;
pub mod geom;
pub mod image;
pub mod io;
pub mod lightfield;
pub mod optim;
pub mod oracle;
pub mod probe;
pub mod rng;
pub mod scene;

pub use error::{Error, Result};
