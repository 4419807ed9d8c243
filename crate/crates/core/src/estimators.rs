//! Regression-based value estimators: embedding fit, CME recursion, explicit FQI,
//! discounted estimate, MIS weights and the closed-form DualDICE solution.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{ensure_dim, OpeError, Result};
use crate::features::{initial_feature_vector, policy_average_features, FeatureMap};
use crate::linalg::{self, GramSolver};
use crate::mdp::{InitialDistribution, Policy, TransitionDataset};

/// Stacked regression design for a dataset: rows `phi(s_n, a_n)`, rows `phi^pi(s'_n)` and rewards.
#[derive(Clone, Debug)]
pub struct Design {
    pub x: DMatrix<f64>,
    pub x_next: DMatrix<f64>,
    pub rewards: DVector<f64>,
}

pub fn build_design(data: &TransitionDataset, features: &FeatureMap, target: &Policy) -> Result<Design> {
    data.check(features.n_states, features.n_actions)?;
    let phi_pi = policy_average_features(features, target)?;
    let n = data.len();
    let d = features.dim();
    let mut x = DMatrix::zeros(n, d);
    let mut x_next = DMatrix::zeros(n, d);
    let mut rewards = DVector::zeros(n);
    for (i, t) in data.iter().enumerate() {
        x.row_mut(i)
            .copy_from(&features.matrix.row(features.index(t.state, t.action)));
        x_next.row_mut(i).copy_from(&phi_pi.matrix.row(t.next_state));
        rewards[i] = t.reward;
    }
    Ok(Design { x, x_next, rewards })
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(OpeError::InvalidInput(format!(
            "ridge parameter {lambda} must be finite and nonnegative"
        )));
    }
    Ok(())
}

/// Empirical embeddings of the transition operator and reward.
#[derive(Clone, Debug)]
pub struct FittedEmbedding {
    /// `lambda I + sum_n phi phi^T`.
    pub sigma_hat: DMatrix<f64>,
    /// `Sigma_hat^{-1} sum_n phi(s_n, a_n) phi^pi(s'_n)^T`.
    pub m_hat: DMatrix<f64>,
    /// `Sigma_hat^{-1} sum_n r'_n phi(s_n, a_n)`.
    pub r_hat: DVector<f64>,
    pub nu0: DVector<f64>,
    pub lambda: f64,
    pub n_samples: usize,
    /// Episode length of the data, when all episodes share one.
    pub horizon_used: Option<usize>,
    /// `sum_n phi(s_n, a_n) phi^pi(s'_n)^T`.
    pub cross_moment: DMatrix<f64>,
    /// `sum_n r'_n phi(s_n, a_n)`.
    pub reward_moment: DVector<f64>,
    pub solver: GramSolver,
    /// The feature map the fit was built with.
    pub features: FeatureMap,
}

impl FittedEmbedding {
    pub fn dim(&self) -> usize {
        self.nu0.len()
    }

    /// `nu_hat_h^T = nu_0^T M_hat^h` for `h = 0..=H`.
    pub fn nu_hat_sequence(&self, horizon: usize) -> Vec<DVector<f64>> {
        let mt = self.m_hat.transpose();
        let mut out = Vec::with_capacity(horizon + 1);
        let mut nu = self.nu0.clone();
        for _ in 0..=horizon {
            let next = &mt * &nu;
            out.push(std::mem::replace(&mut nu, next));
        }
        out
    }

    pub fn spectral_radius(&self) -> f64 {
        linalg::spectral_radius(&self.m_hat)
    }

    /// Check the spectral condition `rho(gamma M_hat) < 1 - 1e-9`, returning `rho(M_hat)`.
    pub fn check_discount(&self, gamma: f64) -> Result<f64> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(OpeError::InvalidInput(format!(
                "discount {gamma} must lie in [0, 1)"
            )));
        }
        let rho = self.spectral_radius();
        if gamma * rho >= 1.0 - 1e-9 {
            return Err(OpeError::DivergentSeries {
                spectral_radius: rho,
                gamma,
            });
        }
        Ok(rho)
    }

    /// `(I - gamma M_hat)^{-T} nu_0`, the discounted sum of `nu_hat_h`.
    pub fn discounted_nu(&self, gamma: f64) -> Result<DVector<f64>> {
        let rho = self.check_discount(gamma)?;
        let d = self.dim();
        let a = (DMatrix::identity(d, d) - &self.m_hat * gamma).transpose();
        a.lu().solve(&self.nu0).ok_or(OpeError::DivergentSeries {
            spectral_radius: rho,
            gamma,
        })
    }
}

/// Fit `Sigma_hat`, `M_hat` and `R_hat` from logged transitions.
pub fn fit_embeddings(
    data: &TransitionDataset,
    features: &FeatureMap,
    target: &Policy,
    init: &InitialDistribution,
    lambda: f64,
) -> Result<FittedEmbedding> {
    check_lambda(lambda)?;
    let design = build_design(data, features, target)?;
    let d = features.dim();
    let xt = design.x.transpose();
    let sigma_hat = DMatrix::identity(d, d) * lambda + &xt * &design.x;
    let cross_moment = &xt * &design.x_next;
    let reward_moment = &xt * &design.rewards;
    let solver = GramSolver::factor(&sigma_hat, lambda)?;
    let m_hat = solver.solve_mat(&cross_moment);
    let r_hat = solver.solve_vec(&reward_moment);
    let nu0 = initial_feature_vector(features, target, init)?;
    Ok(FittedEmbedding {
        sigma_hat,
        m_hat,
        r_hat,
        nu0,
        lambda,
        n_samples: data.len(),
        horizon_used: data.horizon(),
        cross_moment,
        reward_moment,
        solver,
        features: features.clone(),
    })
}

/// Output of the finite-horizon recursion.
#[derive(Clone, Debug)]
pub struct ValueEstimate {
    pub value: f64,
    /// `w_hat_h` for `h = 0..=H+1`, with `w_hat_{H+1} = 0`.
    pub weight_sequence: Vec<DVector<f64>>,
    /// `nu_hat_h` for `h = 0..=H`.
    pub nu_hat_sequence: Vec<DVector<f64>>,
}

/// Backward recursion `w_{H+1} = 0`, `w_h = R_hat + M_hat w_{h+1}`, value `nu_0^T w_0`.
pub fn cme_value(fit: &FittedEmbedding, horizon: usize) -> ValueEstimate {
    let d = fit.dim();
    let mut weight_sequence = vec![DVector::zeros(d); horizon + 2];
    for h in (0..=horizon).rev() {
        weight_sequence[h] = &fit.r_hat + &fit.m_hat * &weight_sequence[h + 1];
    }
    ValueEstimate {
        value: fit.nu0.dot(&weight_sequence[0]),
        weight_sequence,
        nu_hat_sequence: fit.nu_hat_sequence(horizon),
    }
}

/// Output of explicit fitted-Q iteration.
#[derive(Clone, Debug)]
pub struct FqiEstimate {
    pub value: f64,
    /// Regression coefficients for `h = 0..=H+1`, with the last one zero.
    pub weight_sequence: Vec<DVector<f64>>,
}

/// Fitted-Q iteration with `H + 1` explicit ridge regressions.
///
/// Each step regresses `y_n = r'_n + sum_a pi(a|s'_n) Q_{h+1}(s'_n, a)` on `phi(s_n, a_n)`.
/// All steps share one factorization of `lambda I + sum_n phi phi^T`.
pub fn fqi_regression_value(
    data: &TransitionDataset,
    features: &FeatureMap,
    target: &Policy,
    init: &InitialDistribution,
    lambda: f64,
    horizon: usize,
) -> Result<FqiEstimate> {
    check_lambda(lambda)?;
    data.check(features.n_states, features.n_actions)?;
    target.check(features.n_states, features.n_actions)?;
    init.check(features.n_states)?;
    let d = features.dim();
    let n = data.len();
    let mut x = DMatrix::zeros(n, d);
    for (i, t) in data.iter().enumerate() {
        x.row_mut(i)
            .copy_from(&features.matrix.row(features.index(t.state, t.action)));
    }
    let xt = x.transpose();
    let solver = GramSolver::factor(&(DMatrix::identity(d, d) * lambda + &xt * &x), lambda)?;

    let mut weight_sequence = vec![DVector::zeros(d); horizon + 2];
    for h in (0..=horizon).rev() {
        let q_next = &features.matrix * &weight_sequence[h + 1];
        let y = DVector::from_iterator(
            n,
            data.iter().map(|t| {
                let continuation: f64 = (0..features.n_actions)
                    .map(|a| target.action_probs[t.next_state][a] * q_next[features.index(t.next_state, a)])
                    .sum();
                t.reward + continuation
            }),
        );
        weight_sequence[h] = solver.solve_vec(&(&xt * y));
    }
    let q0 = &features.matrix * &weight_sequence[0];
    let mut value = 0.0;
    for s in 0..features.n_states {
        for a in 0..features.n_actions {
            value += init.probs[s] * target.action_probs[s][a] * q0[features.index(s, a)];
        }
    }
    Ok(FqiEstimate {
        value,
        weight_sequence,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct DiscountedEstimate {
    pub value: f64,
    #[serde(skip)]
    pub w: DVector<f64>,
    /// Power-iteration estimate of `rho(M_hat)`.
    pub spectral_radius: f64,
}

/// `w = (I - gamma M_hat)^{-1} R_hat`, value `nu_0^T w`.
pub fn discounted_value(fit: &FittedEmbedding, gamma: f64) -> Result<DiscountedEstimate> {
    let rho = fit.check_discount(gamma)?;
    let d = fit.dim();
    let a = DMatrix::identity(d, d) - &fit.m_hat * gamma;
    let w = a.lu().solve(&fit.r_hat).ok_or(OpeError::DivergentSeries {
        spectral_radius: rho,
        gamma,
    })?;
    Ok(DiscountedEstimate {
        value: fit.nu0.dot(&w),
        w,
        spectral_radius: rho,
    })
}

/// Per-sample weights `N sum_{h=0}^{H} nu_hat_h^T Sigma_hat^{-1} phi(s_n, a_n)`.
pub fn mis_weights(
    fit: &FittedEmbedding,
    horizon: usize,
    data: &TransitionDataset,
) -> Result<Vec<f64>> {
    ensure_dim("dataset size", fit.n_samples, data.len())?;
    let features = &fit.features;
    data.check(features.n_states, features.n_actions)?;
    let total = fit
        .nu_hat_sequence(horizon)
        .into_iter()
        .fold(DVector::zeros(fit.dim()), |acc, nu| acc + nu);
    let z = fit.solver.solve_vec(&total);
    let scale = fit.n_samples as f64;
    Ok(data
        .iter()
        .map(|t| scale * features.matrix.row(features.index(t.state, t.action)).dot(&z.transpose()))
        .collect())
}

/// Closed-form linear DualDICE estimate.
///
/// Solves `(Sigma_hat - gamma B^T) y = N nu_0` with `B = sum_n phi(s_n, a_n) phi^pi(s'_n)^T`,
/// sets `g(s, a) = phi(s, a)^T y` and returns `(1/N) sum_n g(s_n, a_n) r'_n`.
/// `M_hat` is never formed.
pub fn dualdice_value(
    data: &TransitionDataset,
    features: &FeatureMap,
    target: &Policy,
    init: &InitialDistribution,
    gamma: f64,
    lambda: f64,
) -> Result<f64> {
    check_lambda(lambda)?;
    if !(0.0..1.0).contains(&gamma) {
        return Err(OpeError::InvalidInput(format!(
            "discount {gamma} must lie in [0, 1)"
        )));
    }
    if data.is_empty() {
        return Err(OpeError::InvalidInput("DualDICE needs at least one transition".into()));
    }
    let design = build_design(data, features, target)?;
    let d = features.dim();
    let xt = design.x.transpose();
    let sigma_hat = DMatrix::identity(d, d) * lambda + &xt * &design.x;
    // Reject a singular covariance the same way the embedding fit does.
    GramSolver::factor(&sigma_hat, lambda)?;
    let b = &xt * &design.x_next;
    let system = &sigma_hat - b.transpose() * gamma;
    let n = data.len() as f64;
    let nu0 = initial_feature_vector(features, target, init)?;
    let condition = {
        let sv = linalg::svd(&system).singular_values;
        let max = sv.iter().cloned().fold(0.0, f64::max);
        let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
        if min == 0.0 { f64::INFINITY } else { max / min }
    };
    let divergent = || OpeError::DivergentSeries {
        spectral_radius: linalg::spectral_radius(&(linalg::pinv(&sigma_hat) * &b)),
        gamma,
    };
    if condition > linalg::CONDITION_LIMIT {
        return Err(divergent());
    }
    let y = system.lu().solve(&(nu0 * n)).ok_or_else(divergent)?;
    let g = &design.x * y;
    Ok(g.dot(&design.rewards) / n)
}
