//! Synthetic labeled shapes, datasets, and point-cloud file formats.

mod dataset;
mod io;
mod shapes;

pub use dataset::{load_dataset, make_dataset, write_dataset, Dataset, DatasetSpec, MANIFEST_FILE};
pub use io::{
    format_xyz, load_off, load_off_sampled, load_xyz, parse_off, parse_xyz, sample_mesh_surface, write_xyz, Mesh,
};
pub use shapes::{gen_shape, PartScheme, ShapeClass, ShapeSpec, MIN_SHAPE_POINTS};
