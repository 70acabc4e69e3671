//! Out-of-distribution detection for semantic segmentation with an observer
//! network trained on failures triggered by local adversarial attacks.
//!
//! The crate is organised bottom-up:
//!
//! * [`ndgrad`]: reverse-mode autodiff over 4-d tensors, SGD, losses.
//! * [`synthdata`]: procedural scenes with test-only anomalies, Netpbm I/O.
//! * [`segmenter`]: the frozen encoder-decoder segmentation network.
//! * [`laa`]: attack masks and masked FGSM.
//! * [`obsnet`]: the observer network and its training loop.
//! * [`baselines`]: comparison uncertainty scorers.
//! * [`metrics`]: fpr95tpr, AuROC, AuPR, ACE and the evaluation driver.

pub mod baselines;
pub mod error;
pub mod io_util;
pub mod kv;
pub mod laa;
pub mod ndgrad;
pub mod metrics;
pub mod netpbm;
pub mod obsnet;
pub mod rng;
pub mod segmenter;
pub mod synthdata;

pub use error::{Error, ErrorCategory, Result};
pub use ndgrad::{Array4, Graph, Mode, ParamStore};
pub use rng::SeededRng;
