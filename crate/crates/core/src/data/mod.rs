//! Datasets, client partitioning and augmentation.

mod augment;
mod dataset;
mod partition;

pub use augment::{augment_batch, draw_transform, AugmentationSpec, Transform};
pub use dataset::{
    load_idx, subsample_fraction, synthesize_blobs, synthesize_blobs_split, write_idx, Dataset,
    IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};
pub use partition::{dirichlet_partition, PartitionPlan, PARTITION_RETRIES};
