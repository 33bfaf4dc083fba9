//! Synthetic identity data and image degradation.

mod dataset;
mod degrade;
mod image;
mod png_io;
mod render;

pub use dataset::{Dataset, DatasetConfig, ManifestRecord, Sample, Split, MANIFEST_FILE};
pub use degrade::{
    degrade_to, fixed_degrade, low_res, rsa_degrade, unpaired_degrade, unpaired_degrade_with,
    DegradationConfig, LowResMode, UnpairedJitter,
};
pub use image::{bicubic_resize, cubic_kernel, Image};
pub use png_io::{read_png, write_png16, ENCODING};
pub use render::{IdentityBank, IdentityTemplate, ILLUMINATION_RANGE, POSE_RANGE};
