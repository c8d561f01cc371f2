//! Raster types and the low-level operations the rest of the crate composes.

pub mod filter;
pub mod io;
pub mod morphology;
pub mod raster;
pub mod threshold;

pub use filter::{gaussian_kernel, gaussian_smooth, smooth_field, sobel_gradient_magnitude};
pub use morphology::{
    close_mask, connected_components, dilate_mask, erode, erode_mask, fill_holes,
    remove_small_components, ElementShape, StructuringElement,
};
pub use raster::{
    is_legal_label, BinaryMask, GradientField, Image, LabelMap, BACKGROUND, IGNORE_LABEL,
    N_CLASSES, N_OUTPUTS,
};
pub use threshold::{background_stats, otsu_threshold, threshold_field, ThresholdMode};
