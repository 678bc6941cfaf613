//! Training-set search by bipartite mode matching.
//!
//! A server feature pool is split into balanced k-means leaves and merged
//! bottom-up into a binary mode tree. A target feature set is flat-clustered
//! into modes, every target mode is matched one-to-one to a tree node by
//! minimum total Fréchet distance, and the union of the matched nodes'
//! samples (each sample once) is the searched training set.

pub mod clustering;
pub mod dataset_io;
pub mod domain_gap;
pub mod error;
pub mod matching;
pub mod pipeline;
pub mod pruning;
pub mod synth;

pub use clustering::{build_hierarchy, fit_balanced_kmeans, fit_kmeans, FlatClustering, Linkage, ModeTree};
pub use dataset_io::{FeatureFormat, FeatureMatrix, Manifest};
pub use domain_gap::{cost_matrix, fid, gaussian_stats, ModeStats};
pub use error::{BmmError, Result};
pub use matching::{direct_match, select_training_set, solve_assignment, Assignment, AssignmentProblem, CostMatrix, SelectionResult};
pub use pipeline::PipelineConfig;
pub use pruning::{prune, Budget, Strategy};
