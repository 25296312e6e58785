//! Desk-scale tomographic reconstruction toolkit built around a masked
//! patch-wise Radon inversion layer, with MLEM/OSEM and FBP baselines,
//! synthetic phantom data, and the metrics needed to compare them.

pub mod baseline;
pub mod evalmetrics;
pub mod filters;
pub mod geom;
pub mod inversion;
pub mod maskgen;
pub mod objective;
pub mod phantom;
pub mod projector;
pub mod seeds;
pub mod tensorfile;
pub mod trainer;

pub use geom::{fov_pixel_list, ImageGeometry, ImageGrid, Sinogram, SinogramGeometry};
pub use projector::{back_project, forward_project, Projector, ProjectorConfig};
