//! Spatial primitives: kd-tree neighbour search, farthest-point sampling,
//! block partitioning and the coordinate/spectral normalisations.

mod kdtree;
mod normalize;
mod sampling;

pub use kdtree::{squared_distance, KdTree, Knn};
pub use normalize::{normalize_coords, normalize_spectra, SpectralNormalizer};
pub use sampling::{
    axis_origins, cover_block, fps, fps_from, partition_blocks, sample_block, seeded_rng, Block,
};
