//! Small global-average-pooling CNNs trained from scratch, class activation
//! maps, and weakly-supervised localization on a synthetic shape dataset.

pub mod cam;
pub mod error;
pub mod eval;
pub mod features;
pub mod gapnet;
pub mod gradsuite;
pub mod io;
pub mod localize;
pub mod nn;
pub mod synthdata;
pub mod tensor;

pub use cam::{compute_cam, saliency_backprop, upsample_bilinear, verify_score_identity, Cam};
pub use error::{Error, FormatError, Result};
pub use gapnet::{build_gapnet, swap_head, ArchConfig, GapNet, PoolingKind};
pub use localize::{BBox, ProposalMode};
pub use tensor::{Real, Tensor};
