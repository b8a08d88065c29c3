//! Box-driven segmentation label synthesis.
//!
//! Turns bounding-box annotations into pixel-wise training labels (filled
//! boxes, inner-region boxes, GrabCut and boundary-driven GrabCut, voting
//! over perturbed GrabCut runs, proposal intersection), de-noises labels
//! between recursive training rounds, and scores label quality with mIoU,
//! mask mAP and average best overlap.
//!
//! The crate is `no_std` (with `alloc`) and performs no IO. File formats,
//! the CLI and parallel batch drivers live in the `boxlabel` crate.

#![cfg_attr(not(any(feature = "std", test)), no_std)]
// `!(x > 0.0)` style guards deliberately reject NaN; index loops mirror the maths.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

pub mod boundary;
pub mod denoise;
pub mod densecrf;
mod error;
pub mod gmm;
pub mod grabcut;
pub mod maxflow;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod synth;
pub mod weaklabels;

pub use error::{Error, Result};
pub use model::{
    clip_box, order_boxes, BBox, BoundaryMap, BoxSet, Detection, DetectionSet, Dims, Image, LabelMap, ProposalSet,
    Rect, Rgb, SegmentMask, Trimap, TrimapState, WeakLabelConfig, BACKGROUND, IGNORE,
};
