//! Dataset ingestion, class splits, episode sampling and image transforms.

mod episode;
mod image;
mod loader;
mod split;
pub mod synthetic;
mod transforms;

pub use self::episode::{sample_episode, Episode, EpisodeSampler};
pub use self::image::ImageTensor;
pub use self::loader::{
    load_dataset, load_image, resize_and_center_crop, rgb_to_tensor, shorter_edge_dims, tensor_to_rgb,
    Dataset, LabeledImage,
};
pub use self::split::{split_classes, split_images, split_sizes, ClassSplit, SplitFile};
pub use self::transforms::{
    degrade_low_resolution, jigsaw_cells, make_jigsaw, make_rotation, to_greyscale, Degradation,
    JigsawGeometry, JigsawSample, RotationSample,
};
