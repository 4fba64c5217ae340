//! Semantic correspondence, segmentation scoring and the label-scarce protocol.

mod correspond;
mod metrics;
mod protocol;
mod spair;

pub use correspond::{
    grid_to_image, image_to_grid, nn_correspond, predict, train_refiner, CorrespondenceSample, Refiner, RefinerConfig,
};
pub use metrics::{
    miou, pck, pck_report, within_threshold, ConfusionMatrix, KeypointPair, MiouResult, PckReport, PckResult,
    PckVariant, Point,
};
pub use protocol::{label_scarce_protocol, LabelScarceConfig, LabelScarceReport, SplitResult};
pub use spair::{load_spair_dir, parse_spair_pair};
