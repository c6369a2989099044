//! Oriented bounding box toolkit: exact rotated IoU, a complex-plane box
//! codec with a boundary-continuous trigonometric angle loss, a conformer
//! proposal head forward pass, class-aware dynamic label assignment, and
//! VOC-style oriented mAP evaluation, each paired with an independent
//! verification oracle.

pub mod assign;
pub mod codec;
pub mod dataio;
pub mod eval;
pub mod geometry;
pub mod head;
pub mod loss;
pub mod oracle;

pub use assign::{AssignmentResult, ProposalLabel, SampleSet, ScoreRecord};
pub use codec::{DeltaOffsets, OBB6};
pub use eval::{ApMode, Detection, GtRecord, PrCurve};
pub use geometry::{ConvexPolygon, IoUMatrix, Point, OBB};
pub use head::{ConvParams, FeatureMap, HeadParams, MHSAParams};
pub use loss::{BoxLossKind, LossParams, LossValue, SweepRow};
