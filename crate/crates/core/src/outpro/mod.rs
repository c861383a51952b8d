//! The outPro detector.
//!
//! For a query x, every tree contributes the rule it routes x to. A training
//! point co-occurs with x through a rule's release region on signal feature s
//! when dropping the bound on s from that rule admits the point. Counts per
//! signal feature form a frequency profile whose Gini dispersion, scaled by
//! the total count, ranks training points as neighbors. The score averages a
//! weighted subspace distance from x to the top-K neighbors (or, for OPTICS,
//! takes the reachability of x within them) and is calibrated against
//! self-excluded training scores.

mod metric;
mod model;
mod optics;
mod profile;

pub(crate) use metric::cholesky as cholesky_factor;
pub use metric::{MetricKind, MetricSpec, SubspaceMetric};
pub use model::{calibration_threshold, Aggregation, ModelParts, OodModel, OodParams, OodResult, OutProEngine};
pub use optics::optics_reachability;
pub use profile::{profiles_from_rules, select_neighborhood, Neighborhood, ProximityProfile};
