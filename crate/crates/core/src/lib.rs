//! Class-separation analysis and architecture refinement for convolutional
//! networks.
//!
//! The pipeline reads externally produced activation dumps for each
//! convolutional block, measures how inter-class correlation changes from a
//! block to its predecessors, and turns those tallies into per-block
//! stretch (wider output) and symmetric-split (grouped input) factors. The
//! factors are applied to a small textual network IR and the change in
//! convolutional parameter count is reported.
//!
//! Modules, in pipeline order:
//!
//! * [`netir`]: the network IR, its text format and parameter counting.
//! * [`featio`]: activation/label dump I/O, spatial pooling, class means.
//! * [`sepstats`]: correlation matrices and separation tallies.
//! * [`planner`]: stretch/split factor computation and the `lambda` bound.
//! * [`rewriter`]: plan application and size reports.
//! * [`evalkit`]: precision@k and synthetic activation generation.

pub mod evalkit;
pub mod featio;
pub mod matrix;
pub mod netir;
pub mod planner;
pub mod rewriter;
pub mod sepstats;

pub use evalkit::{precision_at_k, synth_activations, PredictionDump, SynthProfile};
pub use featio::{class_means, spatial_average_pool, ActivationSet, ClassMeans, Tensor};
pub use matrix::Matrix;
pub use netir::{analysis_sequence, param_count, parse_network, serialize_network, ConvBlock, NetworkIR};
pub use planner::{build_plan, lambda_upper_bound, PlannerConfig, RefinementPlan};
pub use rewriter::{apply_plan, size_report, SizeReport};
pub use sepstats::{correlation_matrix, separation_tally, SeparationTally, TallyTable};
