//! Hard-instance constructions: the two-state example, a four-state variant with
//! full-support behavior, random tabular instances, and the perturbation that
//! builds statistically close model pairs with a value gap.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diagnostics::PopulationProfile;
use crate::error::{ensure_dim, OpeError, Result};
use crate::features::{build_tabular_features, FeatureMap};
use crate::linalg::GramSolver;
use crate::mdp::{
    exact_q_functions, state_action_marginals, InitialDistribution, Policy, RewardNoise, TabularMdp,
    TransitionDataset,
};

/// A model together with the logging and evaluation setup.
#[derive(Clone, Debug)]
pub struct Instance {
    pub model: TabularMdp,
    pub behavior: Policy,
    pub behavior_init: InitialDistribution,
    pub target: Policy,
    pub target_init: InitialDistribution,
    pub features: FeatureMap,
}

/// An instance built for lower-bound experiments.
#[derive(Clone, Debug)]
pub struct HardInstance {
    pub instance: Instance,
    /// Mixing parameter of the two-state construction.
    pub z: Option<f64>,
    pub horizon: usize,
}

/// The two-state example with states `0` (high value) and `1` (low value).
///
/// Action `0` is the target action and keeps the state fixed, with reward `1` in
/// the high state and `0` in the low one. Action `1` is the behavior action: it
/// stays with probability `z` and switches otherwise. Features are
/// `phi(0,0) = [1,0]`, `phi(1,0) = [0,1]`, `phi(0,1) = [z,1-z]`, `phi(1,1) = [1-z,z]`,
/// and rewards are `phi^T [1,0]`, so the class is closed under the target with `M^pi = I`.
/// Behavior starts uniformly, the target starts in the high state.
pub fn two_state_instance(z: f64, horizon: usize) -> Result<HardInstance> {
    if !(0.25..=0.75).contains(&z) {
        return Err(OpeError::InvalidInput(format!("z = {z} must lie in [1/4, 3/4]")));
    }
    if (z - 0.5).abs() < 1e-12 {
        return Err(OpeError::SingularSigma { z });
    }
    let model = TabularMdp::new(
        vec![
            vec![vec![1.0, 0.0], vec![z, 1.0 - z]],
            vec![vec![0.0, 1.0], vec![1.0 - z, z]],
        ],
        vec![vec![1.0, z], vec![0.0, 1.0 - z]],
        RewardNoise::Deterministic,
    )?;
    let features = FeatureMap::from_rows(
        2,
        2,
        &[vec![1.0, 0.0], vec![z, 1.0 - z], vec![0.0, 1.0], vec![1.0 - z, z]],
    )?;
    Ok(HardInstance {
        instance: Instance {
            model,
            behavior: Policy::deterministic(&[1, 1], 2),
            behavior_init: InitialDistribution::uniform(2),
            target: Policy::deterministic(&[0, 0], 2),
            target_init: InitialDistribution::point_mass(2, 0),
            features,
        },
        z: Some(z),
        horizon,
    })
}

/// Four states, high set `{0, 1}` and low set `{2, 3}`, state one-hot features.
///
/// The behavior action `1` jumps uniformly over all states. The target action `0`
/// moves uniformly within the high set from a high state; from a low state it
/// moves uniformly within the low set except for probability `leak` spread over
/// the high set. Reward is `1` in high states and `0` in low states.
pub fn leaky_four_state(horizon: usize, leak: f64) -> Result<HardInstance> {
    if !(0.0..=1.0).contains(&leak) {
        return Err(OpeError::InvalidInput(format!("leak {leak} must lie in [0, 1]")));
    }
    let high = vec![0.5, 0.5, 0.0, 0.0];
    let low = vec![leak / 2.0, leak / 2.0, (1.0 - leak) / 2.0, (1.0 - leak) / 2.0];
    let uniform = vec![0.25; 4];
    let transition = (0..4)
        .map(|s| vec![if s < 2 { high.clone() } else { low.clone() }, uniform.clone()])
        .collect();
    let mean_reward = (0..4)
        .map(|s| if s < 2 { vec![1.0, 1.0] } else { vec![0.0, 0.0] })
        .collect();
    let model = TabularMdp::new(transition, mean_reward, RewardNoise::Deterministic)?;
    let rows: Vec<Vec<f64>> = (0..8)
        .map(|row| {
            let mut v = vec![0.0; 4];
            v[row / 2] = 1.0;
            v
        })
        .collect();
    Ok(HardInstance {
        instance: Instance {
            model,
            behavior: Policy::deterministic(&[1; 4], 2),
            behavior_init: InitialDistribution::uniform(4),
            target: Policy::deterministic(&[0; 4], 2),
            target_init: InitialDistribution::point_mass(4, 0),
            features: FeatureMap::from_rows(4, 2, &rows)?,
        },
        z: None,
        horizon,
    })
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // Exponential spacings give a uniform draw on the simplex.
    let raw: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let total: f64 = raw.iter().sum();
    let mut probs: Vec<f64> = raw.iter().map(|v| v / total).collect();
    // Put the rounding error on the largest entry so the row sums to 1 within 1e-15.
    let (imax, _) = probs
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |best, (i, &p)| if p > best.1 { (i, p) } else { best });
    let rest: f64 = probs.iter().enumerate().filter(|(i, _)| *i != imax).map(|(_, p)| p).sum();
    probs[imax] = 1.0 - rest;
    probs
}

/// Random dense model with uniform rewards in `[0, 1]`.
pub fn random_mdp(n_states: usize, n_actions: usize, noise: RewardNoise, rng: &mut ChaCha8Rng) -> TabularMdp {
    let transition = (0..n_states)
        .map(|_| (0..n_actions).map(|_| random_simplex(rng, n_states)).collect())
        .collect();
    let mean_reward = (0..n_states)
        .map(|_| (0..n_actions).map(|_| rng.random::<f64>()).collect())
        .collect();
    TabularMdp {
        n_states,
        n_actions,
        transition,
        mean_reward,
        reward_noise: noise,
    }
}

pub fn random_policy(n_states: usize, n_actions: usize, rng: &mut ChaCha8Rng) -> Policy {
    Policy {
        action_probs: (0..n_states).map(|_| random_simplex(rng, n_actions)).collect(),
    }
}

pub fn random_distribution(n: usize, rng: &mut ChaCha8Rng) -> InitialDistribution {
    InitialDistribution {
        probs: random_simplex(rng, n),
    }
}

/// Random model with tabular features, uniform behavior and a random target.
///
/// Tabular features make every model closed, and uniform behavior covers every pair.
pub fn random_tabular_instance(n_states: usize, n_actions: usize, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = random_mdp(n_states, n_actions, RewardNoise::Bernoulli, &mut rng);
    let target = random_policy(n_states, n_actions, &mut rng);
    let target_init = random_distribution(n_states, &mut rng);
    Instance {
        model,
        behavior: Policy::uniform(n_states, n_actions),
        behavior_init: InitialDistribution::uniform(n_states),
        target,
        target_init,
        features: build_tabular_features(n_states, n_actions),
    }
}

/// Parameters of a perturbation moving mass between high- and low-value states.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PerturbationSpec {
    pub direction: Vec<f64>,
    pub high_set: Vec<usize>,
    pub low_set: Vec<usize>,
    /// `sum over the high set of m(s')`, with `m(s') = min_s p(s' | s, behavior(s))`.
    pub p_bar: f64,
    /// Same sum over the low set.
    pub p_under: f64,
    /// `min(p_bar, p_under)`.
    pub c: f64,
    /// Optional bound on the per-pair total variation of the perturbation.
    pub epsilon: Option<f64>,
}

/// `m(s') = min_s p(s' | s, behavior(s))` for a deterministic behavior policy.
pub fn min_behavior_mass(model: &TabularMdp, behavior: &Policy) -> Result<Vec<f64>> {
    behavior.check(model.n_states, model.n_actions)?;
    let actions: Vec<usize> = (0..model.n_states)
        .map(|s| {
            behavior.deterministic_action(s).ok_or_else(|| {
                OpeError::InvalidInput(format!("behavior policy is not deterministic in state {s}"))
            })
        })
        .collect::<Result<_>>()?;
    Ok((0..model.n_states)
        .map(|sp| {
            (0..model.n_states)
                .map(|s| model.transition[s][actions[s]][sp])
                .fold(f64::INFINITY, f64::min)
        })
        .collect())
}

/// States whose target value stays above `3/4 (H - h + 1)` (high) or below
/// `1/4 (H - h + 1)` (low) at every step `h = 0..=H`.
pub fn detect_value_sets(model: &TabularMdp, target: &Policy, horizon: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let tables = exact_q_functions(model, target, horizon)?;
    let tol = 1e-12;
    let mut high = Vec::new();
    let mut low = Vec::new();
    for s in 0..model.n_states {
        let scale = |h: usize| (horizon - h + 1) as f64;
        if (0..=horizon).all(|h| tables.v_values[h][s] >= 0.75 * scale(h) - tol) {
            high.push(s);
        } else if (0..=horizon).all(|h| tables.v_values[h][s] <= 0.25 * scale(h) + tol) {
            low.push(s);
        }
    }
    if high.is_empty() || low.is_empty() {
        return Err(OpeError::HypothesisUnmet(format!(
            "need nonempty high and low value sets, found {} high and {} low",
            high.len(),
            low.len()
        )));
    }
    Ok((high, low))
}

impl PerturbationSpec {
    /// Detect the value sets and compute `p_bar`, `p_under` for a direction.
    pub fn for_instance(
        model: &TabularMdp,
        behavior: &Policy,
        target: &Policy,
        horizon: usize,
        direction: Vec<f64>,
        epsilon: Option<f64>,
    ) -> Result<Self> {
        let (high_set, low_set) = detect_value_sets(model, target, horizon)?;
        let mass = min_behavior_mass(model, behavior)?;
        let p_bar: f64 = high_set.iter().map(|&s| mass[s]).sum();
        let p_under: f64 = low_set.iter().map(|&s| mass[s]).sum();
        Ok(PerturbationSpec {
            direction,
            high_set,
            low_set,
            p_bar,
            p_under,
            c: p_bar.min(p_under),
            epsilon,
        })
    }

    pub fn with_direction(&self, direction: Vec<f64>) -> Self {
        PerturbationSpec {
            direction,
            ..self.clone()
        }
    }
}

/// Signed shift `Delta p(s' | s, a) = phi(s, a)^T x * m(s') * (p_under 1_high(s') - p_bar 1_low(s'))`,
/// indexed `[pair][s']`.
pub fn perturbation_delta(
    model: &TabularMdp,
    behavior: &Policy,
    features: &FeatureMap,
    spec: &PerturbationSpec,
) -> Result<DMatrix<f64>> {
    features.check_model(model)?;
    ensure_dim("perturbation direction", features.dim(), spec.direction.len())?;
    let mass = min_behavior_mass(model, behavior)?;
    let p_bar: f64 = spec.high_set.iter().map(|&s| mass[s]).sum();
    let p_under: f64 = spec.low_set.iter().map(|&s| mass[s]).sum();
    if (p_bar - spec.p_bar).abs() > 1e-12 || (p_under - spec.p_under).abs() > 1e-12 {
        return Err(OpeError::InvalidInput(format!(
            "perturbation masses ({}, {}) disagree with the behavior kernel ({p_bar}, {p_under})",
            spec.p_bar, spec.p_under
        )));
    }
    if spec.high_set.iter().any(|s| spec.low_set.contains(s)) {
        return Err(OpeError::InvalidInput("high and low sets overlap".into()));
    }
    let mut q = DVector::zeros(model.n_states);
    for &s in &spec.high_set {
        q[s] = mass[s] * p_under;
    }
    for &s in &spec.low_set {
        q[s] = -mass[s] * p_bar;
    }
    let scale = &features.matrix * DVector::from_column_slice(&spec.direction);
    Ok(&scale * q.transpose())
}

/// The perturbed model `p_tilde = p - Delta p`.
pub fn perturb_instance(
    model: &TabularMdp,
    behavior: &Policy,
    features: &FeatureMap,
    spec: &PerturbationSpec,
) -> Result<TabularMdp> {
    let delta = perturbation_delta(model, behavior, features, spec)?;
    let na = model.n_actions;
    let mut out = model.clone();
    let mut max_violation = 0.0f64;
    let mut max_tv = 0.0f64;
    for row in 0..model.n_pairs() {
        let (s, a) = (row / na, row % na);
        let mut tv = 0.0;
        for sp in 0..model.n_states {
            let v = model.transition[s][a][sp] - delta[(row, sp)];
            max_violation = max_violation.max(-v).max(v - 1.0);
            tv += delta[(row, sp)].abs();
            out.transition[s][a][sp] = v;
        }
        max_tv = max_tv.max(0.5 * tv);
    }
    if max_violation > 0.0 {
        return Err(OpeError::PerturbationTooLarge { max_violation });
    }
    if let Some(epsilon) = spec.epsilon {
        if max_tv > epsilon {
            return Err(OpeError::EpsilonExceeded { tv: max_tv, epsilon });
        }
    }
    // Re-close each row exactly so the perturbed model passes validation.
    for per_action in out.transition.iter_mut() {
        for row in per_action.iter_mut() {
            let sum: f64 = row.iter().sum();
            let (imax, _) = row
                .iter()
                .enumerate()
                .fold((0, f64::MIN), |best, (i, &p)| if p > best.1 { (i, p) } else { best });
            row[imax] += 1.0 - sum;
        }
    }
    out.validate().into_result()?;
    Ok(out)
}

/// `sum_{h=0}^{H-1} (H - h) nu_h` from a profile.
pub fn lower_bound_nu(profile: &PopulationProfile, horizon: usize) -> Result<DVector<f64>> {
    if horizon == 0 || horizon > profile.nu_h.len() {
        return Err(OpeError::InvalidInput(format!(
            "horizon {horizon} outside the profile range"
        )));
    }
    Ok(profile.nu_h[..horizon]
        .iter()
        .enumerate()
        .fold(DVector::zeros(profile.dim()), |acc, (h, nu)| acc + nu * (horizon - h) as f64))
}

/// `x* = Sigma^{-1} nu / (4 sqrt(N) sqrt(nu^T Sigma^{-1} nu) sqrt(p_bar p_under (p_bar + p_under)))`
/// with `nu = sum_{h=0}^{H-1} (H - h) nu_h`.
pub fn optimal_perturbation_direction(
    profile: &PopulationProfile,
    spec: &PerturbationSpec,
    n: usize,
    horizon: usize,
) -> Result<DVector<f64>> {
    if n == 0 {
        return Err(OpeError::InvalidInput("sample size must be positive".into()));
    }
    if !(spec.p_bar > 0.0 && spec.p_under > 0.0) {
        return Err(OpeError::HypothesisUnmet(format!(
            "need p_bar > 0 and p_under > 0, found {} and {}",
            spec.p_bar, spec.p_under
        )));
    }
    let solver = GramSolver::factor(&profile.sigma, 0.0)?;
    let nu = lower_bound_nu(profile, horizon)?;
    let direction = solver.solve_vec(&nu);
    let norm = nu.dot(&direction).sqrt();
    let mix = spec.p_bar * spec.p_under * (spec.p_bar + spec.p_under);
    Ok(direction / (4.0 * (n as f64).sqrt() * norm * mix.sqrt()))
}

/// `1 / (4 sqrt(N) sqrt(p_bar p_under (p_bar + p_under)))`, the radius `x^T Sigma x` is held to.
pub fn perturbation_radius(spec: &PerturbationSpec, n: usize) -> f64 {
    1.0 / (4.0 * (n as f64).sqrt() * (spec.p_bar * spec.p_under * (spec.p_bar + spec.p_under)).sqrt())
}

/// `1/2 p_bar p_under (sum_{h=0}^{H-1} (H - h) nu_tilde_h)^T x` with `nu_tilde_h` taken under `p_tilde`.
pub fn value_gap_lower_bound(
    p_tilde: &TabularMdp,
    instance: &Instance,
    spec: &PerturbationSpec,
    horizon: usize,
) -> Result<f64> {
    let features = &instance.features;
    ensure_dim("perturbation direction", features.dim(), spec.direction.len())?;
    let x = DVector::from_column_slice(&spec.direction);
    let marginals = state_action_marginals(p_tilde, &instance.target, &instance.target_init, horizon);
    let total: f64 = marginals
        .iter()
        .enumerate()
        .map(|(h, mu)| (horizon - h) as f64 * (features.matrix.transpose() * mu).dot(&x))
        .sum();
    Ok(0.5 * spec.p_bar * spec.p_under * total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LikelihoodRatio {
    pub log_ratio: f64,
    pub ratio: f64,
}

/// `sum_n ln p_tilde(s'_n | s_n, a_n) - ln p(s'_n | s_n, a_n)` over the observed transitions.
pub fn likelihood_ratio(data: &TransitionDataset, p: &TabularMdp, p_tilde: &TabularMdp) -> Result<LikelihoodRatio> {
    ensure_dim("perturbed states", p.n_states, p_tilde.n_states)?;
    ensure_dim("perturbed actions", p.n_actions, p_tilde.n_actions)?;
    data.check(p.n_states, p.n_actions)?;
    let mut log_ratio = 0.0;
    for t in data.iter() {
        let base = p.transition[t.state][t.action][t.next_state];
        if !(base > 0.0) {
            return Err(OpeError::InvalidInput(format!(
                "observed transition ({}, {}) -> {} has zero probability",
                t.state, t.action, t.next_state
            )));
        }
        let pert = p_tilde.transition[t.state][t.action][t.next_state];
        if pert != base {
            log_ratio += pert.ln() - base.ln();
        }
    }
    Ok(LikelihoodRatio {
        log_ratio,
        ratio: log_ratio.exp(),
    })
}

/// `sqrt(c) / (24 sqrt(N)) * ||sum_{h=0}^{H-1} (H - h) nu_h||_{Sigma^{-1}}`.
pub fn gap_radius(profile: &PopulationProfile, spec: &PerturbationSpec, n: usize, horizon: usize) -> Result<f64> {
    let nu = lower_bound_nu(profile, horizon)?;
    Ok(spec.c.sqrt() / (24.0 * (n as f64).sqrt()) * profile.sigma_inner(&nu, &nu).sqrt())
}
