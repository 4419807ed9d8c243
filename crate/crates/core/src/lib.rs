//! Regression-based off-policy evaluation with linear features.
//!
//! The crate covers tabular MDP simulation with exact dynamic-programming
//! oracles, feature maps, the plug-in (conditional mean embedding) and fitted-Q
//! estimators, computable confidence bounds, distribution-mismatch diagnostics,
//! and hard-instance constructions.
//!
//! Feature matrices index rows by `s * n_actions + a`.

pub mod diagnostics;
pub mod error;
pub mod estimators;
pub mod features;
pub mod instances;
pub mod io;
pub mod linalg;
pub mod mdp;
pub mod uncertainty;

pub use diagnostics::{
    behavior_average_occupancy, contraction_check, mismatch_terms, pearson_chi_square, population_profile,
    restricted_chi_square, stationary_distribution, target_weighted_occupancy, theoretical_bound_rhs, BoundRhs,
    ContractionReport, MismatchTerms, OccupancyKind, OccupancyMeasure, PopulationProfile,
};
pub use error::{OpeError, Result};
pub use estimators::{
    cme_value, discounted_value, dualdice_value, fit_embeddings, fqi_regression_value, mis_weights,
    DiscountedEstimate, FittedEmbedding, FqiEstimate, ValueEstimate,
};
pub use features::{
    build_tabular_features, closure_residual, initial_feature_vector, policy_average_features, ClosureResidual,
    FeatureMap, PolicyFeatures,
};
pub use instances::{
    detect_value_sets, leaky_four_state, likelihood_ratio, optimal_perturbation_direction, perturb_instance,
    random_tabular_instance, two_state_instance, HardInstance, Instance, LikelihoodRatio, PerturbationSpec,
};
pub use mdp::{
    discounted_exact_value, exact_policy_value, exact_q_functions, sample_episodes, InitialDistribution, Policy,
    RewardNoise, TabularMdp, Transition, TransitionDataset,
};
pub use uncertainty::{
    confidence_bound, default_omega, discounted_confidence_bound, ConfidenceReport, OmegaEstimate, OmegaMethod,
};
