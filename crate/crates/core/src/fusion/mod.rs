//! Ensembling of per-model probability masks and classical post-processing.

pub mod classical;
pub mod ensemble;
pub mod interchange;
pub mod polygon;
pub mod stitch;

pub use classical::{classical_segment, grayscale, otsu_threshold, slic, superpixel_fuse, watershed, ClassicalMethod};
pub use ensemble::{confidence_threshold, ensemble_merge, EnsembleConfig, ProbabilityMask};
pub use interchange::{read_probability_mask, write_probability_mask, MaskSidecar};
pub use polygon::{polygonize, rasterize, Polygon, PolygonSet, DEFAULT_MIN_AREA};
pub use stitch::stitch_tiles;
