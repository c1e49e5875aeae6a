//! File formats for images, float maps and masks.

mod dataset;
mod pfm;
mod png;

pub use dataset::{dataset_entries, load_dataset, load_sample, sample_dir, save_sample};
pub use pfm::{decode_pfm, encode_pfm, read_pfm, write_pfm, FloatMap};
pub use png::{
    read_confidence_pfm, read_disparity_pfm, read_kitti_disparity, read_mask_png, read_rgb_png,
    write_confidence_pfm, write_disparity_pfm, write_gray_png, write_mask_png, write_rgb_png,
};
