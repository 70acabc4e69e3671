//! The frozen segmentation network and its training procedures.

mod arch;
mod train;

pub use arch::{argmax_channels, SegNet, SegOutput, DROPOUT_RATE, NUM_TAPS, WIDTHS};
pub(crate) use train::validate_optimizer;
pub use train::{
    evaluate_segmenter, miou_globalacc, predict, train_segmenter, train_segmenter_robust, Confusion, SegEpoch,
    SegTrainConfig, SegTrainReport, EVAL_BATCH, SEG_IGNORE,
};
