//! Datasets: the FSDS container, class splits and synthetic generators.

mod container;
mod split;
mod synth;

pub use container::{load_container, save_container, ClassData, DatasetContainer, FSDS_MAGIC, FSDS_VERSION};
pub use split::{split_classes, SplitSpec};
pub use synth::{class_centers, gen_blobs, gen_outlier_blobs, outlier_draw, OutlierFlags, OutlierRule, SyntheticSpec};
