//! Independent oracles and random generators shared by the integration tests.
//!
//! Everything here works on plain nested vectors with direct loops and shares
//! no code paths with the library.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use ope_lab::{FeatureMap, InitialDistribution, Policy, RewardNoise, TabularMdp, TransitionDataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.05).collect();
    let total: f64 = raw.iter().sum();
    let mut p: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let head: f64 = p[..n - 1].iter().sum();
    p[n - 1] = 1.0 - head;
    p
}

pub fn random_model(rng: &mut ChaCha8Rng, ns: usize, na: usize, noise: RewardNoise) -> TabularMdp {
    let transition = (0..ns).map(|_| (0..na).map(|_| simplex(rng, ns)).collect()).collect();
    let mean_reward = (0..ns).map(|_| (0..na).map(|_| rng.random::<f64>()).collect()).collect();
    TabularMdp::new(transition, mean_reward, noise).unwrap()
}

pub fn random_policy(rng: &mut ChaCha8Rng, ns: usize, na: usize) -> Policy {
    Policy::new((0..ns).map(|_| simplex(rng, na)).collect()).unwrap()
}

pub fn random_init(rng: &mut ChaCha8Rng, ns: usize) -> InitialDistribution {
    InitialDistribution::new(simplex(rng, ns)).unwrap()
}

/// Random dense features with entries in `[-1, 1]`, rows scaled to norm at most 1.
pub fn random_features(rng: &mut ChaCha8Rng, ns: usize, na: usize, d: usize) -> FeatureMap {
    let mut rows: Vec<Vec<f64>> = (0..ns * na)
        .map(|_| (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
        .collect();
    let max = rows
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    for r in rows.iter_mut() {
        for v in r.iter_mut() {
            *v /= max;
        }
    }
    FeatureMap::from_rows(ns, na, &rows).unwrap()
}

/// Random policy evaluation problem.
pub struct Problem {
    pub model: TabularMdp,
    pub behavior: Policy,
    pub behavior_init: InitialDistribution,
    pub target: Policy,
    pub target_init: InitialDistribution,
    pub features: FeatureMap,
}

pub fn random_problem(rng: &mut ChaCha8Rng, ns: usize, na: usize, d: usize) -> Problem {
    Problem {
        model: random_model(rng, ns, na, RewardNoise::Bernoulli),
        behavior: random_policy(rng, ns, na),
        behavior_init: random_init(rng, ns),
        target: random_policy(rng, ns, na),
        target_init: random_init(rng, ns),
        features: random_features(rng, ns, na, d),
    }
}

/// Finite-horizon value over steps `0..=H` by backward induction on nested vectors.
pub fn dp_value(
    p: &[Vec<Vec<f64>>],
    r: &[Vec<f64>],
    pi: &[Vec<f64>],
    xi: &[f64],
    horizon: usize,
) -> f64 {
    let ns = p.len();
    let na = p[0].len();
    let mut v = vec![0.0; ns];
    for _ in 0..=horizon {
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            for a in 0..na {
                let mut q = r[s][a];
                for sp in 0..ns {
                    q += p[s][a][sp] * v[sp];
                }
                next[s] += pi[s][a] * q;
            }
        }
        v = next;
    }
    xi.iter().zip(&v).map(|(a, b)| a * b).sum()
}

/// Count-based empirical model: `p_hat = counts / n(s, a)` and `r_hat = mean observed reward`.
/// Returns `None` when some pair is unobserved.
pub fn empirical_model(data: &TransitionDataset, ns: usize, na: usize) -> Option<(Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut counts = vec![vec![0.0; na]; ns];
    let mut trans = vec![vec![vec![0.0; ns]; na]; ns];
    let mut rew = vec![vec![0.0; na]; ns];
    for t in data.iter() {
        counts[t.state][t.action] += 1.0;
        trans[t.state][t.action][t.next_state] += 1.0;
        rew[t.state][t.action] += t.reward;
    }
    for s in 0..ns {
        for a in 0..na {
            let c = counts[s][a];
            if c == 0.0 {
                return None;
            }
            for sp in 0..ns {
                trans[s][a][sp] /= c;
            }
            rew[s][a] /= c;
        }
    }
    Some((trans, rew, counts))
}

/// Monte-Carlo estimate of the value with its standard error, simulated with an independent sampler.
pub fn monte_carlo_value(
    model: &TabularMdp,
    pi: &Policy,
    init: &InitialDistribution,
    horizon: usize,
    episodes: usize,
    seed: u64,
) -> (f64, f64) {
    let mut rng = rng(seed);
    let draw = |rng: &mut ChaCha8Rng, probs: &[f64]| {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    };
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..episodes {
        let mut s = draw(&mut rng, &init.probs);
        let mut total = 0.0;
        for _ in 0..=horizon {
            let a = draw(&mut rng, &pi.action_probs[s]);
            total += model.mean_reward[s][a];
            s = draw(&mut rng, &model.transition[s][a]);
        }
        sum += total;
        sum_sq += total * total;
    }
    let n = episodes as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    (mean, (var / n).sqrt())
}

/// Forward propagation of state-action marginals `mu_h` for `h = 0..steps`, flattened `s * na + a`.
pub fn forward_marginals(model: &TabularMdp, pi: &Policy, init: &InitialDistribution, steps: usize) -> Vec<Vec<f64>> {
    let (ns, na) = (model.n_states, model.n_actions);
    let mut state = init.probs.clone();
    let mut out = Vec::new();
    for _ in 0..steps {
        let mut joint = vec![0.0; ns * na];
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            for a in 0..na {
                let m = state[s] * pi.action_probs[s][a];
                joint[s * na + a] = m;
                for sp in 0..ns {
                    next[sp] += m * model.transition[s][a][sp];
                }
            }
        }
        out.push(joint);
        state = next;
    }
    out
}

/// `sum_x w(x) phi(x) phi(x)^T` by direct sums.
pub fn weighted_second_moment(features: &FeatureMap, weights: &[f64]) -> DMatrix<f64> {
    let d = features.dim();
    let mut out = DMatrix::zeros(d, d);
    for (x, w) in weights.iter().enumerate() {
        for i in 0..d {
            for j in 0..d {
                out[(i, j)] += w * features.matrix[(x, i)] * features.matrix[(x, j)];
            }
        }
    }
    out
}

/// `sum_x w(x) phi(x)` by direct sums.
pub fn weighted_mean(features: &FeatureMap, weights: &[f64]) -> DVector<f64> {
    let d = features.dim();
    DVector::from_fn(d, |i, _| {
        weights
            .iter()
            .enumerate()
            .map(|(x, w)| w * features.matrix[(x, i)])
            .sum()
    })
}

/// Solve a small dense system by Gaussian elimination with partial pivoting.
pub fn gauss_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.nrows();
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).map(|j| a[(i, j)]).collect();
            row.push(b[i]);
            row
        })
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| m[x][col].abs().partial_cmp(&m[y][col].abs()).unwrap())
            .unwrap();
        m.swap(col, piv);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            for k in col..=n {
                m[row][k] -= f * m[col][k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut acc = m[i][n];
        for k in i + 1..n {
            acc -= m[i][k] * x[k];
        }
        x[i] = acc / m[i][i];
    }
    DVector::from_vec(x)
}

/// Log-log least-squares slope.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / lx.len() as f64;
    let my = ly.iter().sum::<f64>() / ly.len() as f64;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

/// Largest `||w||` over `{w in R^2 : 0 <= phi_x^T w <= 1}` by clipping a large square with each half-plane.
pub fn polygon_omega(features: &FeatureMap) -> f64 {
    assert_eq!(features.dim(), 2);
    let big = 1e6;
    let mut poly = vec![[-big, -big], [big, -big], [big, big], [-big, big]];
    for row in features.matrix.row_iter() {
        let (a, b) = (row[0], row[1]);
        // a x + b y <= 1 and -(a x + b y) <= 0
        poly = clip(&poly, a, b, 1.0);
        poly = clip(&poly, -a, -b, 0.0);
    }
    poly.iter().map(|p| (p[0] * p[0] + p[1] * p[1]).sqrt()).fold(0.0, f64::max)
}

fn clip(poly: &[[f64; 2]], a: f64, b: f64, c: f64) -> Vec<[f64; 2]> {
    let inside = |p: &[f64; 2]| a * p[0] + b * p[1] <= c + 1e-12;
    let mut out = Vec::new();
    for i in 0..poly.len() {
        let cur = poly[i];
        let nxt = poly[(i + 1) % poly.len()];
        let (ci, ni) = (inside(&cur), inside(&nxt));
        if ci {
            out.push(cur);
        }
        if ci != ni {
            let fc = a * cur[0] + b * cur[1] - c;
            let fn_ = a * nxt[0] + b * nxt[1] - c;
            let t = fc / (fc - fn_);
            out.push([cur[0] + t * (nxt[0] - cur[0]), cur[1] + t * (nxt[1] - cur[1])]);
        }
    }
    out
}
