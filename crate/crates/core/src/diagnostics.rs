//! Population quantities computed from a known model: mean embedding, occupancy
//! covariances, mismatch terms, chi-square divergences, the contraction check and
//! the right-hand side of the finite-sample upper bound.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{ensure_dim, OpeError, Result};
use crate::features::{closure_residual, next_feature_targets, policy_average_features, ClosureResidual, FeatureMap};
use crate::linalg::{self, GramSolver};
use crate::mdp::{state_action_marginals, state_marginals, InitialDistribution, Policy, TabularMdp};

pub const STATIONARY_ITERATIONS: usize = 10_000;
pub const STATIONARY_TOLERANCE: f64 = 1e-12;
/// Fixed points from different starts farther apart than this (in l1) count as distinct.
const STATIONARY_DISTINCT: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OccupancyKind {
    /// Average of the behavior marginals over the episode.
    BehaviorAverage,
    /// Target marginals weighted by `H - h + 1`.
    TargetWeighted,
    /// Target marginal at a single step.
    Marginal,
}

/// A distribution over state-action pairs, indexed by `s * n_actions + a`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OccupancyMeasure {
    pub probs: Vec<f64>,
    pub kind: OccupancyKind,
}

impl OccupancyMeasure {
    pub fn new(probs: Vec<f64>, kind: OccupancyKind) -> Result<Self> {
        if probs.iter().any(|&p| !(p >= 0.0)) {
            return Err(OpeError::InvalidInput("occupancy has a negative entry".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-10 {
            return Err(OpeError::InvalidInput(format!("occupancy sums to {sum}")));
        }
        Ok(OccupancyMeasure { probs, kind })
    }

    pub fn as_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.probs)
    }
}

/// `mu_bar = (1/H) sum_{h=0}^{H-1} mu_h` under the behavior policy.
pub fn behavior_average_occupancy(
    model: &TabularMdp,
    behavior: &Policy,
    init: &InitialDistribution,
    horizon: usize,
) -> Result<OccupancyMeasure> {
    check_model_policy(model, behavior, init)?;
    if horizon == 0 {
        return Err(OpeError::InvalidInput("behavior horizon must be at least 1".into()));
    }
    let marginals = state_action_marginals(model, behavior, init, horizon);
    let avg = marginals.iter().fold(DVector::zeros(model.n_pairs()), |acc, m| acc + m) / horizon as f64;
    OccupancyMeasure::new(avg.iter().cloned().collect(), OccupancyKind::BehaviorAverage)
}

/// `mu^pi proportional to sum_{h=0}^{H} (H - h + 1) mu_h^pi`.
pub fn target_weighted_occupancy(
    model: &TabularMdp,
    target: &Policy,
    init: &InitialDistribution,
    horizon: usize,
) -> Result<OccupancyMeasure> {
    check_model_policy(model, target, init)?;
    let marginals = state_action_marginals(model, target, init, horizon + 1);
    let mut acc = DVector::zeros(model.n_pairs());
    let mut total = 0.0;
    for (h, m) in marginals.iter().enumerate() {
        let weight = (horizon - h + 1) as f64;
        acc += m * weight;
        total += weight;
    }
    OccupancyMeasure::new((acc / total).iter().cloned().collect(), OccupancyKind::TargetWeighted)
}

fn check_model_policy(model: &TabularMdp, policy: &Policy, init: &InitialDistribution) -> Result<()> {
    model.validate().into_result()?;
    policy.check(model.n_states, model.n_actions)?;
    init.check(model.n_states)
}

fn power_iterate(kernel_t: &DMatrix<f64>, start: DVector<f64>) -> DVector<f64> {
    let mut prev = start;
    let mut cesaro = prev.clone();
    for _ in 0..STATIONARY_ITERATIONS {
        let x = kernel_t * &prev;
        if (&x - &prev).lp_norm(1) <= STATIONARY_TOLERANCE {
            return x;
        }
        let next = kernel_t * &x;
        if (&next - &prev).lp_norm(1) <= STATIONARY_TOLERANCE {
            // Period-two oscillation: the midpoint of the two iterates is invariant.
            return (next + x) * 0.5;
        }
        cesaro += &x;
        prev = x;
    }
    cesaro / (STATIONARY_ITERATIONS + 1) as f64
}

/// Invariant distribution of the chain started from `start`.
pub fn stationary_from(kernel: &DMatrix<f64>, start: &DVector<f64>) -> DVector<f64> {
    power_iterate(&kernel.transpose(), start.clone())
}

/// The unique invariant distribution of a state kernel.
///
/// Iterates from the uniform start; also iterates from every point mass and
/// raises `StationaryAmbiguous` if any start settles elsewhere.
pub fn stationary_distribution(kernel: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = kernel.nrows();
    ensure_dim("kernel columns", n, kernel.ncols())?;
    let kt = kernel.transpose();
    let uniform = power_iterate(&kt, DVector::from_element(n, 1.0 / n as f64));
    for s in 0..n {
        let mut e = DVector::zeros(n);
        e[s] = 1.0;
        let other = power_iterate(&kt, e);
        let gap = (&other - &uniform).lp_norm(1);
        if gap > STATIONARY_DISTINCT {
            return Err(OpeError::StationaryAmbiguous { gap });
        }
    }
    Ok(uniform)
}

/// Population quantities for a behavior/target pair on a known model.
#[derive(Clone, Debug)]
pub struct PopulationProfile {
    pub horizon: usize,
    pub m_pi: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub sigma_pi: DMatrix<f64>,
    /// `nu_h = E^pi[phi(s_h, a_h) | s_0 ~ xi_0]` for `h = 0..=H`, by exact propagation.
    pub nu_h: Vec<DVector<f64>>,
    pub kappa1: f64,
    pub kappa2: f64,
    pub c1: f64,
    /// `Sigma` is singular; Sigma-inverse quantities use the pseudo-inverse.
    pub singular: bool,
    pub sigma_pi_singular: bool,
    /// Invariant distribution of the target chain reached from the target initial distribution.
    pub stationary: DVector<f64>,
    /// False when the target chain has more than one invariant distribution.
    pub stationary_unique: bool,
    pub closure: ClosureResidual,
    pub behavior_occupancy: OccupancyMeasure,
    /// Pseudo-inverse of `Sigma` (the inverse when nonsingular).
    pub sigma_inv: DMatrix<f64>,
    pub features: FeatureMap,
}

/// Serializable view of a profile.
#[derive(Clone, Debug, Serialize)]
pub struct ProfileDump {
    pub horizon: usize,
    pub m_pi: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
    pub sigma_pi: Vec<Vec<f64>>,
    pub nu_h: Vec<Vec<f64>>,
    pub kappa1: f64,
    pub kappa2: f64,
    pub c1: f64,
    pub singular: bool,
    pub sigma_pi_singular: bool,
    pub stationary: Vec<f64>,
    pub stationary_unique: bool,
    pub closure: ClosureResidual,
    pub behavior_occupancy: Vec<f64>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().cloned().collect()).collect()
}

impl PopulationProfile {
    pub fn dump(&self) -> ProfileDump {
        ProfileDump {
            horizon: self.horizon,
            m_pi: rows(&self.m_pi),
            sigma: rows(&self.sigma),
            sigma_pi: rows(&self.sigma_pi),
            nu_h: self.nu_h.iter().map(|v| v.iter().cloned().collect()).collect(),
            kappa1: self.kappa1,
            kappa2: self.kappa2,
            c1: self.c1,
            singular: self.singular,
            sigma_pi_singular: self.sigma_pi_singular,
            stationary: self.stationary.iter().cloned().collect(),
            stationary_unique: self.stationary_unique,
            closure: self.closure,
            behavior_occupancy: self.behavior_occupancy.probs.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    /// `x^T Sigma^{-1} y` through the stored (pseudo-)inverse.
    pub fn sigma_inner(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        x.dot(&(&self.sigma_inv * y))
    }
}

/// Covariance `sum_s w(s) psi(s) psi(s)^T` for rows `psi(s)`.
fn weighted_gram(psi: &DMatrix<f64>, weights: &DVector<f64>) -> DMatrix<f64> {
    let scaled = DMatrix::from_fn(psi.nrows(), psi.ncols(), |i, j| psi[(i, j)] * weights[i]);
    psi.transpose() * scaled
}

/// Ratio of the largest to the smallest nonzero eigenvalue of a PSD matrix.
fn pseudo_condition(a: &DMatrix<f64>) -> Result<f64> {
    let eig = linalg::psd_eigen(a)?;
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(1.0);
    }
    let cut = max * 1e-12 * a.nrows() as f64;
    let min = eig
        .eigenvalues
        .iter()
        .cloned()
        .filter(|&v| v > cut)
        .fold(f64::INFINITY, f64::min);
    Ok(max / min)
}

pub fn population_profile(
    model: &TabularMdp,
    behavior: &Policy,
    behavior_init: &InitialDistribution,
    target: &Policy,
    target_init: &InitialDistribution,
    features: &FeatureMap,
    horizon: usize,
) -> Result<PopulationProfile> {
    check_model_policy(model, behavior, behavior_init)?;
    check_model_policy(model, target, target_init)?;
    features.check_model(model)?;
    if horizon == 0 {
        return Err(OpeError::InvalidInput("profile horizon must be at least 1".into()));
    }
    let phi = &features.matrix;
    let d = features.dim();

    let behavior_occupancy = behavior_average_occupancy(model, behavior, behavior_init, horizon)?;
    let sigma = linalg::symmetrize(&weighted_gram(phi, &behavior_occupancy.as_vector()));
    let singular = linalg::psd_is_singular(&sigma)?;
    let sigma_inv = linalg::psd_pinv(&sigma)?;
    let sigma_inv_sqrt = linalg::psd_inv_sqrt(&sigma)?;

    let m_pi = linalg::pinv(phi) * next_feature_targets(model, target, features)?;
    let nu_h: Vec<DVector<f64>> = state_action_marginals(model, target, target_init, horizon + 1)
        .iter()
        .map(|mu| phi.transpose() * mu)
        .collect();

    let phi_pi = policy_average_features(features, target)?.matrix;
    let kernel = model.state_kernel(target);
    let stationary = stationary_from(&kernel, &target_init.as_vector());
    let stationary_unique = stationary_distribution(&kernel).is_ok();
    let sigma_pi = linalg::symmetrize(&weighted_gram(&phi_pi, &stationary));
    let sigma_pi_singular = linalg::psd_is_singular(&sigma_pi)?;

    let kappa1 = pseudo_condition(&(&sigma_inv_sqrt * &sigma_pi * &sigma_inv_sqrt))?;

    // Next-state second moment along the logged trajectory, steps 1..=H.
    let behavior_states = state_marginals(model, behavior, behavior_init, horizon + 1);
    let mut next_moment = DMatrix::zeros(d, d);
    for dist in &behavior_states[1..] {
        next_moment += weighted_gram(&phi_pi, dist);
    }
    next_moment /= horizon as f64;
    let kappa2 = linalg::spectral_norm(&(&sigma_inv_sqrt * next_moment * &sigma_inv_sqrt)).max(1.0);

    let c1 = phi
        .row_iter()
        .map(|r| {
            let v = r.transpose();
            v.dot(&(&sigma_inv * &v))
        })
        .fold(0.0, f64::max)
        / d as f64;

    Ok(PopulationProfile {
        horizon,
        m_pi,
        sigma,
        sigma_pi,
        nu_h,
        kappa1,
        kappa2,
        c1,
        singular,
        sigma_pi_singular,
        stationary,
        stationary_unique,
        closure: closure_residual(model, target, features)?,
        behavior_occupancy,
        sigma_inv,
        features: features.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MismatchTerms {
    /// `sqrt(nu_h^T Sigma^{-1} nu_h)` for `h = 0..=H`.
    pub per_h: Vec<f64>,
    /// `sqrt(nu^T Sigma^{-1} nu)` with `nu = sum_h (H - h + 1) nu_h`.
    pub weighted: f64,
    pub singular: bool,
}

pub fn mismatch_terms(profile: &PopulationProfile, horizon: usize) -> Result<MismatchTerms> {
    if horizon + 1 > profile.nu_h.len() {
        return Err(OpeError::InvalidInput(format!(
            "profile covers h <= {}, asked for {horizon}",
            profile.nu_h.len() - 1
        )));
    }
    let per_h = profile.nu_h[..=horizon]
        .iter()
        .map(|nu| profile.sigma_inner(nu, nu).max(0.0).sqrt())
        .collect();
    let bold = weighted_nu(profile, horizon);
    Ok(MismatchTerms {
        per_h,
        weighted: profile.sigma_inner(&bold, &bold).max(0.0).sqrt(),
        singular: profile.singular,
    })
}

/// `sum_{h=0}^{H} (H - h + 1) nu_h`.
pub fn weighted_nu(profile: &PopulationProfile, horizon: usize) -> DVector<f64> {
    profile.nu_h[..=horizon]
        .iter()
        .enumerate()
        .fold(DVector::zeros(profile.dim()), |acc, (h, nu)| acc + nu * (horizon - h + 1) as f64)
}

/// `nu^T Sigma^{-1} nu - 1`, the chi-square divergence restricted to a linear class.
///
/// The result is nonnegative when the class contains constants.
pub fn restricted_chi_square(nu: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    ensure_dim("second moment", nu.len(), sigma.nrows())?;
    let solver = GramSolver::factor(sigma, 0.0)?;
    Ok(solver.quad_form(nu) - 1.0)
}

/// `sum_x (p1(x) - p2(x))^2 / p2(x)`.
pub fn pearson_chi_square(p1: &OccupancyMeasure, p2: &OccupancyMeasure) -> Result<f64> {
    ensure_dim("occupancy length", p2.probs.len(), p1.probs.len())?;
    let mut total = 0.0;
    for (cell, (&a, &b)) in p1.probs.iter().zip(&p2.probs).enumerate() {
        if b == 0.0 {
            if a > 0.0 {
                return Err(OpeError::AbsoluteContinuity { cell, p1: a });
            }
            continue;
        }
        total += (a - b) * (a - b) / b;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContractionReport {
    /// `||Sigma_t^{1/2} M Sigma_{t+1}^{-1/2}||_2` for `t = 0..T`.
    pub norms: Vec<f64>,
    /// Residual of `P psi = psi M`.
    pub hypothesis_residual: f64,
    /// Some `Sigma_{t+1}` was singular and its pseudo-inverse root was used.
    pub singular: bool,
}

/// Check the contraction `||Sigma_t^{1/2} M Sigma_{t+1}^{-1/2}||_2 <= 1` along a chain.
pub fn contraction_check(
    chain_kernel: &DMatrix<f64>,
    psi: &DMatrix<f64>,
    m: &DMatrix<f64>,
    init: &InitialDistribution,
    steps: usize,
) -> Result<ContractionReport> {
    let n = chain_kernel.nrows();
    ensure_dim("kernel columns", n, chain_kernel.ncols())?;
    ensure_dim("psi rows", n, psi.nrows())?;
    ensure_dim("M rows", psi.ncols(), m.nrows())?;
    ensure_dim("M columns", psi.ncols(), m.ncols())?;
    init.check(n)?;
    let hypothesis_residual = (chain_kernel * psi - psi * m).amax();
    if !(hypothesis_residual <= 1e-8) {
        return Err(OpeError::LemmaHypothesisFailed {
            residual: hypothesis_residual,
        });
    }
    let kt = chain_kernel.transpose();
    let mut dist = init.as_vector();
    let mut sigma_t = weighted_gram(psi, &dist);
    let mut norms = Vec::with_capacity(steps);
    let mut singular = false;
    for _ in 0..steps {
        dist = &kt * dist;
        let sigma_next = weighted_gram(psi, &dist);
        singular |= linalg::psd_is_singular(&sigma_next)?;
        let lhs = linalg::psd_sqrt(&sigma_t)?;
        let rhs = linalg::psd_inv_sqrt(&sigma_next)?;
        norms.push(linalg::spectral_norm(&(lhs * m * rhs)));
        sigma_t = sigma_next;
    }
    Ok(ContractionReport {
        norms,
        hypothesis_residual,
        singular,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundRhs {
    pub first_order: f64,
    pub second_order: f64,
    pub total: f64,
    /// `C = 15 kappa1 C1 (3 + kappa2) sqrt(nu_0^T Sigma^{-1} nu_0)`.
    pub constant_c: f64,
    /// Smallest `N` for which the bound is claimed.
    pub sample_threshold: f64,
    /// Largest ridge parameter for which the bound is claimed.
    pub lambda_limit: f64,
    /// Whether the supplied `N` and `lambda` meet both conditions.
    pub conditions_met: bool,
}

/// Right-hand side of the finite-sample upper bound.
///
/// `improved` replaces the per-step mismatch sum by the single weighted term; it
/// requires `phi^T Sigma^{-1} phi' >= 0` on all pairs and is rejected otherwise.
pub fn theoretical_bound_rhs(
    profile: &PopulationProfile,
    horizon: usize,
    n: usize,
    delta: f64,
    lambda: f64,
    improved: bool,
) -> Result<BoundRhs> {
    if profile.singular {
        return Err(OpeError::SingularCovariance {
            condition: linalg::symmetric_condition(&profile.sigma),
        });
    }
    if n == 0 || horizon == 0 {
        return Err(OpeError::InvalidInput("bound needs N >= 1 and H >= 1".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(OpeError::InvalidInput(format!("delta {delta} must lie in (0, 1)")));
    }
    let terms = mismatch_terms(profile, horizon)?;
    let mismatch = if improved {
        let cross = &profile.features.matrix * &profile.sigma_inv * profile.features.matrix.transpose();
        let min_cross = cross.iter().cloned().fold(f64::INFINITY, f64::min);
        if min_cross < -1e-12 {
            return Err(OpeError::ImprovedBoundInapplicable { min_cross });
        }
        terms.weighted
    } else {
        terms
            .per_h
            .iter()
            .enumerate()
            .map(|(h, t)| (horizon - h + 1) as f64 * t)
            .sum()
    };
    let nf = n as f64;
    let hf = horizon as f64;
    let d = profile.dim() as f64;
    let first_order = mismatch * ((12.0 / delta).ln() / (2.0 * nf)).sqrt();
    let nu0 = &profile.nu_h[0];
    let constant_c = 15.0 * profile.kappa1 * profile.c1 * (3.0 + profile.kappa2) * profile.sigma_inner(nu0, nu0).sqrt();
    let log_term = (12.0 * d * hf / delta).ln();
    let second_order = constant_c * log_term * d * hf.powf(3.5) / nf;
    let sample_threshold =
        20.0 * profile.kappa1 * (2.0 + profile.kappa2).powi(2) * log_term * profile.c1 * d * hf.powi(3);
    let sigma_min = linalg::psd_eigen(&profile.sigma)?
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let lambda_limit = log_term * profile.c1 * d * hf * sigma_min;
    Ok(BoundRhs {
        first_order,
        second_order,
        total: first_order + second_order,
        constant_c,
        sample_threshold,
        lambda_limit,
        conditions_met: nf >= sample_threshold && lambda <= lambda_limit,
    })
}
