//! Finite MDP models, episodic simulation and exact dynamic-programming oracles.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, OpeError, Result};

/// Tolerance used for probability row sums.
pub const PROB_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardNoise {
    /// The observed reward equals the mean reward.
    Deterministic,
    /// The observed reward is a Bernoulli draw with the mean reward as success probability.
    #[default]
    Bernoulli,
}

/// A finite MDP: `transition[s][a][s']` and `mean_reward[s][a]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub mean_reward: Vec<Vec<f64>>,
    #[serde(default)]
    pub reward_noise: RewardNoise,
}

/// A single failed model invariant.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Shape {
        what: String,
        expected: usize,
        found: usize,
    },
    NegativeProbability {
        state: usize,
        action: usize,
        next_state: usize,
        value: f64,
    },
    /// `deficit` is `1 - sum`, so a row summing to 0.9 has deficit 0.1.
    RowSum {
        state: usize,
        action: usize,
        deficit: f64,
    },
    RewardOutOfRange {
        state: usize,
        action: usize,
        value: f64,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            return Ok(());
        }
        let parts: Vec<String> = self.violations.iter().map(|v| format!("{v:?}")).collect();
        Err(OpeError::InvalidInput(format!(
            "invalid model: {}",
            parts.join("; ")
        )))
    }
}

fn shape(what: &str, expected: usize, found: usize) -> Violation {
    Violation::Shape {
        what: what.to_string(),
        expected,
        found,
    }
}

impl TabularMdp {
    /// Build and validate a model.
    pub fn new(
        transition: Vec<Vec<Vec<f64>>>,
        mean_reward: Vec<Vec<f64>>,
        reward_noise: RewardNoise,
    ) -> Result<Self> {
        let n_states = transition.len();
        let n_actions = transition.first().map_or(0, |row| row.len());
        let model = TabularMdp {
            n_states,
            n_actions,
            transition,
            mean_reward,
            reward_noise,
        };
        model.validate().into_result()?;
        Ok(model)
    }

    /// Check every model invariant and collect the failures.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        if self.n_states == 0 {
            violations.push(shape("n_states", 1, 0));
        }
        if self.n_actions == 0 {
            violations.push(shape("n_actions", 1, 0));
        }
        if self.transition.len() != self.n_states {
            violations.push(shape("transition rows", self.n_states, self.transition.len()));
        }
        if self.mean_reward.len() != self.n_states {
            violations.push(shape("mean_reward rows", self.n_states, self.mean_reward.len()));
        }
        for (s, per_action) in self.transition.iter().enumerate() {
            if per_action.len() != self.n_actions {
                violations.push(shape("transition actions", self.n_actions, per_action.len()));
                continue;
            }
            for (a, row) in per_action.iter().enumerate() {
                if row.len() != self.n_states {
                    violations.push(shape("transition next states", self.n_states, row.len()));
                    continue;
                }
                for (next_state, &value) in row.iter().enumerate() {
                    if !(value >= 0.0) {
                        violations.push(Violation::NegativeProbability {
                            state: s,
                            action: a,
                            next_state,
                            value,
                        });
                    }
                }
                let deficit = 1.0 - row.iter().sum::<f64>();
                if !(deficit.abs() <= PROB_TOL) {
                    violations.push(Violation::RowSum {
                        state: s,
                        action: a,
                        deficit,
                    });
                }
            }
        }
        for (s, row) in self.mean_reward.iter().enumerate() {
            if row.len() != self.n_actions {
                violations.push(shape("mean_reward actions", self.n_actions, row.len()));
                continue;
            }
            for (a, &value) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&value) {
                    violations.push(Violation::RewardOutOfRange {
                        state: s,
                        action: a,
                        value,
                    });
                }
            }
        }
        ValidationReport { violations }
    }

    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    /// State-action transition matrix with rows indexed by `s * n_actions + a`.
    pub fn pair_kernel(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_pairs(), self.n_states, |row, sp| {
            self.transition[row / self.n_actions][row % self.n_actions][sp]
        })
    }

    /// Mean rewards flattened over `s * n_actions + a`.
    pub fn reward_vector(&self) -> DVector<f64> {
        DVector::from_fn(self.n_pairs(), |row, _| {
            self.mean_reward[row / self.n_actions][row % self.n_actions]
        })
    }

    /// State-to-state kernel `P^pi[s][s']` under a policy.
    pub fn state_kernel(&self, policy: &Policy) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_states, self.n_states, |s, sp| {
            (0..self.n_actions)
                .map(|a| policy.action_probs[s][a] * self.transition[s][a][sp])
                .sum()
        })
    }

    /// Expected one-step reward per state under a policy.
    pub fn state_reward(&self, policy: &Policy) -> DVector<f64> {
        DVector::from_fn(self.n_states, |s, _| {
            (0..self.n_actions)
                .map(|a| policy.action_probs[s][a] * self.mean_reward[s][a])
                .sum()
        })
    }

    pub fn from_json_reader<R: Read>(reader: R) -> Result<Self> {
        let model: TabularMdp = serde_json::from_reader(reader)?;
        model.validate().into_result()?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_reader(std::fs::File::open(path)?)
    }
}

/// A stationary stochastic policy `action_probs[s][a]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub action_probs: Vec<Vec<f64>>,
}

impl Policy {
    pub fn new(action_probs: Vec<Vec<f64>>) -> Result<Self> {
        let policy = Policy { action_probs };
        let n_actions = policy.action_probs.first().map_or(0, |r| r.len());
        policy.check(policy.action_probs.len(), n_actions)?;
        Ok(policy)
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Policy {
            action_probs: vec![vec![1.0 / n_actions as f64; n_actions]; n_states],
        }
    }

    /// Deterministic policy choosing `actions[s]` in state `s`.
    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        let action_probs = actions
            .iter()
            .map(|&a| {
                let mut row = vec![0.0; n_actions];
                row[a] = 1.0;
                row
            })
            .collect();
        Policy { action_probs }
    }

    /// Row-wise mixture `alpha * self + (1 - alpha) * other`.
    pub fn mixture(&self, other: &Policy, alpha: f64) -> Policy {
        let action_probs = self
            .action_probs
            .iter()
            .zip(&other.action_probs)
            .map(|(r1, r2)| {
                r1.iter()
                    .zip(r2)
                    .map(|(p1, p2)| alpha * p1 + (1.0 - alpha) * p2)
                    .collect()
            })
            .collect();
        Policy { action_probs }
    }

    pub fn n_states(&self) -> usize {
        self.action_probs.len()
    }

    /// The action played with probability one in state `s`, if any.
    pub fn deterministic_action(&self, s: usize) -> Option<usize> {
        self.action_probs[s].iter().position(|&p| p == 1.0)
    }

    /// Validate shape against a model and the probability-row invariants.
    pub fn check(&self, n_states: usize, n_actions: usize) -> Result<()> {
        ensure_dim("policy states", n_states, self.action_probs.len())?;
        for (s, row) in self.action_probs.iter().enumerate() {
            ensure_dim("policy actions", n_actions, row.len())?;
            if row.iter().any(|&p| !(p >= 0.0)) {
                return Err(OpeError::InvalidInput(format!(
                    "policy row {s} has a negative probability"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > PROB_TOL {
                return Err(OpeError::InvalidInput(format!(
                    "policy row {s} sums to {sum}"
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let policy: Policy = serde_json::from_reader(std::fs::File::open(path)?)?;
        Policy::new(policy.action_probs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialDistribution {
    pub probs: Vec<f64>,
}

impl InitialDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let init = InitialDistribution { probs };
        init.check(init.probs.len())?;
        Ok(init)
    }

    pub fn uniform(n_states: usize) -> Self {
        InitialDistribution {
            probs: vec![1.0 / n_states as f64; n_states],
        }
    }

    pub fn point_mass(n_states: usize, state: usize) -> Self {
        let mut probs = vec![0.0; n_states];
        probs[state] = 1.0;
        InitialDistribution { probs }
    }

    pub fn check(&self, n_states: usize) -> Result<()> {
        ensure_dim("initial distribution", n_states, self.probs.len())?;
        if self.probs.iter().any(|&p| !(p >= 0.0)) {
            return Err(OpeError::InvalidInput(
                "initial distribution has a negative entry".into(),
            ));
        }
        let sum: f64 = self.probs.iter().sum();
        if (sum - 1.0).abs() > PROB_TOL {
            return Err(OpeError::InvalidInput(format!(
                "initial distribution sums to {sum}"
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let init: InitialDistribution = serde_json::from_reader(std::fs::File::open(path)?)?;
        InitialDistribution::new(init.probs)
    }

    pub fn as_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.probs)
    }
}

/// One logged step `(s, a, s', r')`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub next_state: usize,
    pub reward: f64,
}

/// Logged data grouped by episode.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransitionDataset {
    pub episodes: Vec<Vec<Transition>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    episode: usize,
    h: usize,
    state: usize,
    action: usize,
    next_state: usize,
    reward: f64,
}

impl TransitionDataset {
    /// Wrap a flat list of transitions, each as its own one-step episode.
    pub fn from_transitions(transitions: Vec<Transition>) -> Self {
        TransitionDataset {
            episodes: transitions.into_iter().map(|t| vec![t]).collect(),
        }
    }

    /// Total number of transitions `N`.
    pub fn len(&self) -> usize {
        self.episodes.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_episodes(&self) -> usize {
        self.episodes.len()
    }

    /// Episode length when every episode has the same length.
    pub fn horizon(&self) -> Option<usize> {
        let first = self.episodes.first()?.len();
        self.episodes
            .iter()
            .all(|e| e.len() == first)
            .then_some(first)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> + '_ {
        self.episodes.iter().flatten()
    }

    /// Concatenate episodes of two datasets.
    pub fn concat(&self, other: &TransitionDataset) -> TransitionDataset {
        let mut episodes = self.episodes.clone();
        episodes.extend(other.episodes.iter().cloned());
        TransitionDataset { episodes }
    }

    /// Check index ranges, reward range and within-episode chaining.
    pub fn check(&self, n_states: usize, n_actions: usize) -> Result<()> {
        for (k, episode) in self.episodes.iter().enumerate() {
            for (h, t) in episode.iter().enumerate() {
                if t.state >= n_states || t.next_state >= n_states || t.action >= n_actions {
                    return Err(OpeError::InvalidInput(format!(
                        "episode {k} step {h} has an index out of range"
                    )));
                }
                if !(0.0..=1.0).contains(&t.reward) {
                    return Err(OpeError::InvalidInput(format!(
                        "episode {k} step {h} has reward {} outside [0, 1]",
                        t.reward
                    )));
                }
            }
            for (h, pair) in episode.windows(2).enumerate() {
                if pair[0].next_state != pair[1].state {
                    return Err(OpeError::InvalidInput(format!(
                        "episode {k} breaks at step {h}: next_state {} but following state {}",
                        pair[0].next_state, pair[1].state
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["episode", "h", "state", "action", "next_state", "reward"])?;
        for (k, episode) in self.episodes.iter().enumerate() {
            for (h, t) in episode.iter().enumerate() {
                wtr.write_record([
                    k.to_string(),
                    h.to_string(),
                    t.state.to_string(),
                    t.action.to_string(),
                    t.next_state.to_string(),
                    crate::io::fmt_f64(t.reward),
                ])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    /// Read the CSV layout produced by [`TransitionDataset::write_csv`].
    /// Rows are grouped by `episode` and ordered by `h`.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut rows: Vec<CsvRow> = Vec::new();
        for row in rdr.deserialize() {
            rows.push(row?);
        }
        rows.sort_by_key(|r| (r.episode, r.h));
        let mut episodes: Vec<Vec<Transition>> = Vec::new();
        let mut current: Option<usize> = None;
        for row in rows {
            if current != Some(row.episode) {
                episodes.push(Vec::new());
                current = Some(row.episode);
            }
            episodes.last_mut().unwrap().push(Transition {
                state: row.state,
                action: row.action,
                next_state: row.next_state,
                reward: row.reward,
            });
        }
        Ok(TransitionDataset { episodes })
    }
}

struct Sampler {
    init: WeightedIndex<f64>,
    policy: Vec<WeightedIndex<f64>>,
    kernel: Vec<Vec<WeightedIndex<f64>>>,
}

fn weighted(probs: &[f64]) -> Result<WeightedIndex<f64>> {
    WeightedIndex::new(probs)
        .map_err(|e| OpeError::InvalidInput(format!("cannot sample from {probs:?}: {e}")))
}

impl Sampler {
    fn new(model: &TabularMdp, behavior: &Policy, init: &InitialDistribution) -> Result<Self> {
        Ok(Sampler {
            init: weighted(&init.probs)?,
            policy: behavior
                .action_probs
                .iter()
                .map(|r| weighted(r))
                .collect::<Result<_>>()?,
            kernel: model
                .transition
                .iter()
                .map(|per_action| per_action.iter().map(|r| weighted(r)).collect())
                .collect::<Result<_>>()?,
        })
    }
}

/// Simulate `k` independent episodes of `h` steps under the behavior policy.
///
/// Episode `i` uses its own ChaCha8 stream `i` under the given seed, so the
/// output does not depend on how episodes are scheduled across threads.
pub fn sample_episodes(
    model: &TabularMdp,
    behavior: &Policy,
    init: &InitialDistribution,
    k: usize,
    h: usize,
    seed: u64,
) -> Result<TransitionDataset> {
    model.validate().into_result()?;
    behavior.check(model.n_states, model.n_actions)?;
    init.check(model.n_states)?;
    if h == 0 {
        return Err(OpeError::InvalidInput("episode length must be at least 1".into()));
    }
    let sampler = Sampler::new(model, behavior, init)?;
    let episodes = (0..k)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut s = sampler.init.sample(&mut rng);
            let mut episode = Vec::with_capacity(h);
            for _ in 0..h {
                let a = sampler.policy[s].sample(&mut rng);
                let next_state = sampler.kernel[s][a].sample(&mut rng);
                let mean = model.mean_reward[s][a];
                let reward = match model.reward_noise {
                    RewardNoise::Deterministic => mean,
                    RewardNoise::Bernoulli => {
                        if rng.random_bool(mean) {
                            1.0
                        } else {
                            0.0
                        }
                    }
                };
                episode.push(Transition {
                    state: s,
                    action: a,
                    next_state,
                    reward,
                });
                s = next_state;
            }
            episode
        })
        .collect();
    Ok(TransitionDataset { episodes })
}

/// Exact state-action marginals `mu_h(s, a)` for `h = 0..steps`, flattened over `s * n_actions + a`.
pub fn state_action_marginals(
    model: &TabularMdp,
    policy: &Policy,
    init: &InitialDistribution,
    steps: usize,
) -> Vec<DVector<f64>> {
    let kernel_t = model.state_kernel(policy).transpose();
    let mut state = init.as_vector();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        out.push(DVector::from_fn(model.n_pairs(), |row, _| {
            let (s, a) = (row / model.n_actions, row % model.n_actions);
            state[s] * policy.action_probs[s][a]
        }));
        state = &kernel_t * &state;
    }
    out
}

/// Exact state marginals for `h = 0..steps`.
pub fn state_marginals(
    model: &TabularMdp,
    policy: &Policy,
    init: &InitialDistribution,
    steps: usize,
) -> Vec<DVector<f64>> {
    let kernel_t = model.state_kernel(policy).transpose();
    let mut state = init.as_vector();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let next = &kernel_t * &state;
        out.push(std::mem::replace(&mut state, next));
    }
    out
}

/// Exact Q- and V-tables for `h = 0..=H`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactValueTables {
    pub q_values: Vec<Vec<Vec<f64>>>,
    pub v_values: Vec<Vec<f64>>,
}

impl ExactValueTables {
    pub fn horizon(&self) -> usize {
        self.q_values.len() - 1
    }

    /// `v^pi = sum_s xi_0(s) V_0(s)`.
    pub fn policy_value(&self, init: &InitialDistribution) -> f64 {
        init.probs
            .iter()
            .zip(&self.v_values[0])
            .map(|(p, v)| p * v)
            .sum()
    }
}

/// Backward recursion `Q_H = r`, `Q_{h-1} = r + P V_h`, `V_h = sum_a pi(a|s) Q_h(s, a)`.
pub fn exact_q_functions(model: &TabularMdp, target: &Policy, horizon: usize) -> Result<ExactValueTables> {
    model.validate().into_result()?;
    target.check(model.n_states, model.n_actions)?;
    let (ns, na) = (model.n_states, model.n_actions);
    let mut q_values = vec![vec![vec![0.0; na]; ns]; horizon + 1];
    let mut v_values = vec![vec![0.0; ns]; horizon + 1];
    for h in (0..=horizon).rev() {
        for s in 0..ns {
            for a in 0..na {
                let future = if h == horizon {
                    0.0
                } else {
                    model.transition[s][a]
                        .iter()
                        .zip(&v_values[h + 1])
                        .map(|(p, v)| p * v)
                        .sum()
                };
                q_values[h][s][a] = model.mean_reward[s][a] + future;
            }
            v_values[h][s] = (0..na)
                .map(|a| target.action_probs[s][a] * q_values[h][s][a])
                .sum();
        }
    }
    Ok(ExactValueTables { q_values, v_values })
}

/// `v^pi` over the horizon `h = 0..=H`.
pub fn exact_policy_value(
    model: &TabularMdp,
    target: &Policy,
    init: &InitialDistribution,
    horizon: usize,
) -> Result<f64> {
    init.check(model.n_states)?;
    Ok(exact_q_functions(model, target, horizon)?.policy_value(init))
}

/// Discounted value `xi_0^T (I - gamma P^pi)^{-1} r^pi` for `gamma` in `[0, 1)`.
pub fn discounted_exact_value(
    model: &TabularMdp,
    target: &Policy,
    init: &InitialDistribution,
    gamma: f64,
) -> Result<f64> {
    model.validate().into_result()?;
    target.check(model.n_states, model.n_actions)?;
    init.check(model.n_states)?;
    if !(0.0..1.0).contains(&gamma) {
        return Err(OpeError::InvalidInput(format!(
            "discount {gamma} must lie in [0, 1)"
        )));
    }
    let n = model.n_states;
    let a = DMatrix::identity(n, n) - model.state_kernel(target) * gamma;
    let v = a
        .lu()
        .solve(&model.state_reward(target))
        .ok_or_else(|| OpeError::InvalidInput("Bellman system is singular".into()))?;
    Ok(init.as_vector().dot(&v))
}
