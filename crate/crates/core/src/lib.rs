//! Knowledge-augmented contrastive learning for lesion classification and
//! weakly supervised localization.
//!
//! An image encoder is trained jointly on a focal classification loss and a
//! contrastive loss whose positive view is a radiomic feature vector
//! extracted inside a bounding box. Boxes come from ground truth when an
//! image is annotated and from thresholded Grad-CAM heatmaps otherwise, and
//! are recomputed from the current weights at every step.

pub mod artifact;
pub mod bbox;
pub mod cam;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod image;
pub mod losses;
pub mod models;
pub mod radiomics;
pub mod sampling;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
