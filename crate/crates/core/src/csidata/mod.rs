//! CSI sample container, preprocessing into model input, and point-cloud
//! I/O and resampling.

mod cloud;
mod container;
mod dataset;
mod ply;
mod preprocess;

pub use cloud::{apply_rigid, resample_cloud, PointCloud};
pub use container::{load_csi_container, save_csi_container, write_csi_container, read_csi_container, CsiMeta, CsiSample, CONTAINER_MAGIC};
pub use dataset::{load_dataset, load_entries, manifest_path, split_train_val, Manifest, ManifestEntry, Sample, MANIFEST_FILE};
pub use ply::{read_ply, write_ply, parse_point_cloud, ply_string};
pub use preprocess::{preprocess, unwrap_phase, ModelInput, VARIANCE_FLOOR};
