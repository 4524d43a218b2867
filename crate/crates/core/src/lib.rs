//! Shared building blocks for the DTN evaluation toolkit.
//!
//! The statistics in [`stats`] are generic over the floating point type
//! (`f32` or `f64`). The aliases below pin the `f64` instantiations used by
//! the rest of the workspace.

pub mod clock;
pub mod plan;
pub mod records;
pub mod report;
pub mod stats;
pub mod tdist;
pub mod template;
pub mod timing;

pub use plan::{NodeDescriptor, NodeRole, PlanError, TestKind, TestPlan, TestSpec, Transport};
pub use records::{GoodputRecord, ResourceSample, RetentionRecord, RetentionSource, RttRecord};
pub use template::{AdapterConfig, RenderedScript, RuntimeVars};
pub use timing::{TimingEvent, TimingLogEntry};

/// Empirical CDF over `f64` samples.
pub type EcdfCurve = stats::Ecdf<f64>;
/// Summary statistics over `f64` samples.
pub type StatsSummary = stats::Summary<f64>;
/// Single precision variants, used where sample volume matters more than precision.
pub type EcdfCurveF32 = stats::Ecdf<f32>;
pub type StatsSummaryF32 = stats::Summary<f32>;
