//! Muscle synergies: NMF decomposition, VAF curves, optimal synergy count and
//! k-means clustering of decompositions across participants.

mod cluster;
mod kmeans;
mod nmf;

pub use cluster::{cluster_procedure, cosine, match_synergies, ClusterAssignment, KMeansOptions, Procedure};
pub use kmeans::{agreement_up_to_permutation, kmeans, KMeansResult};
pub use nmf::{
    nmf, normalize_columns, objective, optimal_synergy_count, vaf, vaf_per_channel, EmgMatrix, NmfOptions,
    OscRule, SynergyCount, SynergyDecomposition, VafCurve,
};
