//! Compact per-pixel segmentation model: handcrafted local features, a
//! softmax linear classifier, Tversky loss, SGD training and sliding-window
//! inference.

pub mod augment;
pub mod features;
pub mod infer;
pub mod loss;
pub mod model;
pub mod train;

pub use augment::{augment, AugmentConfig};
pub use features::{featurize, featurize_at, FeatureMap, FeatureSpec};
pub use infer::{sliding_window_infer, sliding_window_probs, window_starts};
pub use loss::{tversky_loss, TverskyOutput, TverskyParams};
pub use model::{forward, PixelClassifier, ProbabilityMap};
pub use train::{train, LrSchedule, TrainConfig, TrainMode, TrainOutput};
