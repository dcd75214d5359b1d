//! Point clouds, rasters and the glue between them.
//!
//! Formats: ASCII PLY and CSV clouds (columns `x,y,z`, any number of band
//! columns, optional `label`), ESRI ASCII grids (one file per band), and the
//! `HPF1` checkpoint container.

mod bridge;
mod checkpoint;
mod cloud;
mod raster;

pub use bridge::{
    attach_spectra, fill_nodata, nearest_pixels, project_labels_3d_to_2d, transfer_labels_2d_to_3d,
    Attached, GroundClassMap,
};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, ParamSet, MAGIC,
};
pub use cloud::{class_color, CloudFormat, PointCloud};
pub use raster::{
    band_paths, load_raster, load_raster_bands, save_raster, GridSpec, RasterGrid, DEFAULT_NODATA,
};
