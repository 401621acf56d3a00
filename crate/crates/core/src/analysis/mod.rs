//! Composite analyses built on the metric, resampling and calibration layers.

pub mod bias;
pub mod disagreement;
pub mod ranking;
pub mod severe;
pub mod stability;

pub use bias::{bias_observations, same_provider_bias, BiasEstimate, BiasObservation};
pub use disagreement::{
    disagreement_curve, gaussian_kde, silverman_bandwidth, DisagreementBin, DisagreementCurve, KdeCurve,
};
pub use ranking::{agent_composites, rank_agents, AgentRanking, RankEntry};
pub use severe::{severe_error_flags, severe_overlap, OverlapTable, SevereErrorReport, SevereFlag};
pub use stability::{panel_stability, stability_summary, StabilityGroup, StabilityReport, StabilityRow};
