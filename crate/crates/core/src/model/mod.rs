//! Learned networks: the multi-context segmentation model, the refinement
//! network and the focal loss that trains both.

mod loss;
mod params;
mod refine;
mod seg;
mod suite;

pub use loss::focal_loss;
pub use params::{ParamStore, Parameter};
pub use refine::{RefineConfig, RefineNet};
pub use seg::{fuse, lcc, Aggregate, ContextFusion, SegModel, SegModelConfig, SegOutput};
pub use suite::{grad_check_suite, CheckOutcome, MODEL_TOLERANCE, OP_TOLERANCE};
