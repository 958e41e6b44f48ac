//! Left-ventricular mesh generation and motion propagation from cine MRI.

pub mod align;
pub mod error;
pub mod geom;
pub mod io;
pub mod isosurface;
pub mod lbwarp;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod register;
pub mod tetmesh;
pub mod volume;

pub use error::{Error, Result};
