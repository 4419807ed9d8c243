//! Linear feature maps over state-action pairs.

use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, OpeError, Result};
use crate::linalg;
use crate::mdp::{InitialDistribution, Policy, TabularMdp};

/// Dense feature matrix with one row per pair, indexed by `s * n_actions + a`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub n_states: usize,
    pub n_actions: usize,
    pub matrix: DMatrix<f64>,
}

/// On-disk layout of a feature map.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureFile {
    pub dim: usize,
    pub matrix: Vec<Vec<f64>>,
}

impl FeatureMap {
    pub fn new(n_states: usize, n_actions: usize, matrix: DMatrix<f64>) -> Result<Self> {
        ensure_dim("feature rows", n_states * n_actions, matrix.nrows())?;
        if matrix.ncols() == 0 {
            return Err(OpeError::InvalidInput("feature dimension must be positive".into()));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(OpeError::InvalidInput("feature matrix has a non-finite entry".into()));
        }
        for j in 0..matrix.ncols() {
            if matrix.column(j).iter().all(|&v| v == 0.0) {
                return Err(OpeError::InvalidInput(format!("feature column {j} is identically zero")));
            }
        }
        Ok(FeatureMap {
            n_states,
            n_actions,
            matrix,
        })
    }

    /// Build from nested rows.
    pub fn from_rows(n_states: usize, n_actions: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        for row in rows {
            ensure_dim("feature row length", d, row.len())?;
        }
        let matrix = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
        Self::new(n_states, n_actions, matrix)
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn index(&self, state: usize, action: usize) -> usize {
        state * self.n_actions + action
    }

    /// `phi(s, a)` as a column vector.
    pub fn phi(&self, state: usize, action: usize) -> DVector<f64> {
        self.matrix.row(self.index(state, action)).transpose()
    }

    /// True iff the all-ones function lies in the column span (least-squares residual at most 1e-8).
    pub fn contains_constant(&self) -> bool {
        let ones = DVector::from_element(self.matrix.nrows(), 1.0);
        let coef = linalg::pinv(&self.matrix) * &ones;
        (&self.matrix * coef - ones).amax() <= 1e-8
    }

    /// Largest Euclidean row norm.
    pub fn max_norm(&self) -> f64 {
        self.matrix
            .row_iter()
            .map(|r| r.norm())
            .fold(0.0, f64::max)
    }

    pub fn check_model(&self, model: &TabularMdp) -> Result<()> {
        ensure_dim("feature states", model.n_states, self.n_states)?;
        ensure_dim("feature actions", model.n_actions, self.n_actions)
    }

    pub fn to_file(&self) -> FeatureFile {
        FeatureFile {
            dim: self.dim(),
            matrix: self
                .matrix
                .row_iter()
                .map(|r| r.iter().cloned().collect())
                .collect(),
        }
    }

    pub fn from_file(file: &FeatureFile, n_states: usize, n_actions: usize) -> Result<Self> {
        let map = Self::from_rows(n_states, n_actions, &file.matrix)?;
        ensure_dim("feature dim", file.dim, map.dim())?;
        Ok(map)
    }

    pub fn from_json_reader<R: Read>(reader: R, n_states: usize, n_actions: usize) -> Result<Self> {
        let file: FeatureFile = serde_json::from_reader(reader)?;
        Self::from_file(&file, n_states, n_actions)
    }

    pub fn load(path: &Path, n_states: usize, n_actions: usize) -> Result<Self> {
        Self::from_json_reader(std::fs::File::open(path)?, n_states, n_actions)
    }
}

impl Serialize for FeatureMap {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_file().serialize(serializer)
    }
}

/// Indicator features: `phi(s, a)` is the unit vector of pair `(s, a)`.
pub fn build_tabular_features(n_states: usize, n_actions: usize) -> FeatureMap {
    let n = n_states * n_actions;
    FeatureMap {
        n_states,
        n_actions,
        matrix: DMatrix::identity(n, n),
    }
}

/// Policy-averaged features `phi^pi(s) = sum_a pi(a|s) phi(s, a)`, one row per state.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyFeatures {
    pub matrix: DMatrix<f64>,
}

impl PolicyFeatures {
    pub fn phi(&self, state: usize) -> DVector<f64> {
        self.matrix.row(state).transpose()
    }
}

pub fn policy_average_features(features: &FeatureMap, policy: &Policy) -> Result<PolicyFeatures> {
    policy.check(features.n_states, features.n_actions)?;
    let mut matrix = DMatrix::zeros(features.n_states, features.dim());
    for s in 0..features.n_states {
        for a in 0..features.n_actions {
            let p = policy.action_probs[s][a];
            if p != 0.0 {
                let row = features.matrix.row(features.index(s, a)) * p;
                let mut target = matrix.row_mut(s);
                target += row;
            }
        }
    }
    Ok(PolicyFeatures { matrix })
}

/// `nu_0 = sum_{s,a} xi_0(s) pi(a|s) phi(s, a)`.
pub fn initial_feature_vector(
    features: &FeatureMap,
    policy: &Policy,
    init: &InitialDistribution,
) -> Result<DVector<f64>> {
    init.check(features.n_states)?;
    let phi_pi = policy_average_features(features, policy)?;
    Ok(phi_pi.matrix.transpose() * init.as_vector())
}

/// Sup-norm least-squares residuals of projecting `P^pi phi_j` and `r` onto the feature span.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClosureResidual {
    pub transition_residual: f64,
    pub reward_residual: f64,
}

impl ClosureResidual {
    pub fn is_closed(&self, tol: f64) -> bool {
        self.transition_residual <= tol && self.reward_residual <= tol
    }
}

/// Targets `E[phi^pi(s') | s, a]` stacked as a pair-by-d matrix.
pub fn next_feature_targets(
    model: &TabularMdp,
    target: &Policy,
    features: &FeatureMap,
) -> Result<DMatrix<f64>> {
    features.check_model(model)?;
    let phi_pi = policy_average_features(features, target)?;
    Ok(model.pair_kernel() * phi_pi.matrix)
}

pub fn closure_residual(
    model: &TabularMdp,
    target: &Policy,
    features: &FeatureMap,
) -> Result<ClosureResidual> {
    let targets = next_feature_targets(model, target, features)?;
    let phi = &features.matrix;
    let pinv = linalg::pinv(phi);
    let projected = phi * (&pinv * &targets);
    let transition_residual = (projected - &targets).amax();
    let r = model.reward_vector();
    let reward_residual = (phi * (&pinv * &r) - r).amax();
    Ok(ClosureResidual {
        transition_residual,
        reward_residual,
    })
}
