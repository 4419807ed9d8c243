//! Data-dependent confidence bounds for the finite-horizon and discounted estimates,
//! and the feature-class radius `omega` they depend on.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{OpeError, Result};
use crate::estimators::FittedEmbedding;
use crate::features::FeatureMap;
use crate::linalg;

/// Slack allowed on `||phi||_2 <= 1` before features count as unnormalized.
const NORM_SLACK: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConfidenceReport {
    pub bound: f64,
    pub delta: f64,
    pub omega: f64,
    pub lambda: f64,
    /// Finite horizon: `(H - h + 1) sqrt(nu_hat_h^T Sigma_hat^{-1} nu_hat_h)` for `h = 0..=H`.
    /// Discounted: the single term `sqrt(nu^T Sigma_hat^{-1} nu) / (1 - gamma)`.
    pub per_h_terms: Vec<f64>,
    pub log_factor: f64,
}

fn check_common(fit: &FittedEmbedding, delta: f64, omega: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(OpeError::InvalidInput(format!("delta {delta} must lie in (0, 1)")));
    }
    if !(omega > 0.0) || !omega.is_finite() {
        return Err(OpeError::InvalidInput(format!("omega {omega} must be positive and finite")));
    }
    if !(fit.lambda > 0.0) {
        return Err(OpeError::InvalidInput(
            "confidence bounds need a positive ridge parameter".into(),
        ));
    }
    let max_norm = fit.features.max_norm();
    if max_norm > 1.0 + NORM_SLACK {
        return Err(OpeError::UnnormalizedFeatures { max_norm });
    }
    Ok(())
}

/// `d ln(1 + N / (lambda d))`.
fn log_det_term(fit: &FittedEmbedding) -> f64 {
    let d = fit.dim() as f64;
    d * (1.0 + fit.n_samples as f64 / (fit.lambda * d)).ln()
}

/// Finite-horizon bound
/// `sum_h (H-h+1) ||nu_hat_h||_{Sigma_hat^{-1}} * (sqrt(2 lambda) omega + 2 sqrt(2 d ln(1+N/(lambda d)) ln(3N^2H/delta)) + 4/3 ln(3N^2H/delta))`.
///
/// `N` and `H` inside `ln(3N^2H/delta)` are floored at 1 so the bound stays finite on empty data.
pub fn confidence_bound(
    fit: &FittedEmbedding,
    horizon: usize,
    delta: f64,
    omega: f64,
) -> Result<ConfidenceReport> {
    check_common(fit, delta, omega)?;
    let per_h_terms: Vec<f64> = fit
        .nu_hat_sequence(horizon)
        .iter()
        .enumerate()
        .map(|(h, nu)| (horizon - h + 1) as f64 * fit.solver.quad_form(nu).max(0.0).sqrt())
        .collect();
    let n = fit.n_samples.max(1) as f64;
    let hh = horizon.max(1) as f64;
    let ln_conf = (3.0 * n * n * hh / delta).ln();
    let log_factor = (2.0 * fit.lambda).sqrt() * omega
        + 2.0 * (2.0 * log_det_term(fit) * ln_conf).sqrt()
        + 4.0 / 3.0 * ln_conf;
    let bound = per_h_terms.iter().sum::<f64>() * log_factor;
    Ok(ConfidenceReport {
        bound,
        delta,
        omega,
        lambda: fit.lambda,
        per_h_terms,
        log_factor,
    })
}

/// Discounted bound
/// `||nu||_{Sigma_hat^{-1}} / (1-gamma) * (sqrt(2 lambda) omega + 2 sqrt(2) sqrt(d ln(1+N/(lambda d)) ln(2N^2/delta)) + 4/3 ln(2N^2/delta))`
/// with `nu = (I - gamma M_hat)^{-T} nu_0`.
pub fn discounted_confidence_bound(
    fit: &FittedEmbedding,
    gamma: f64,
    delta: f64,
    omega: f64,
) -> Result<ConfidenceReport> {
    check_common(fit, delta, omega)?;
    let nu = fit.discounted_nu(gamma)?;
    let term = fit.solver.quad_form(&nu).max(0.0).sqrt() / (1.0 - gamma);
    let n = fit.n_samples.max(1) as f64;
    let ln_conf = (2.0 * n * n / delta).ln();
    let log_factor = (2.0 * fit.lambda).sqrt() * omega
        + 2.0 * 2f64.sqrt() * (log_det_term(fit) * ln_conf).sqrt()
        + 4.0 / 3.0 * ln_conf;
    Ok(ConfidenceReport {
        bound: term * log_factor,
        delta,
        omega,
        lambda: fit.lambda,
        per_h_terms: vec![term],
        log_factor,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaMethod {
    /// Every feature row has one nonzero entry, so the polytope is a box.
    Box,
    /// All candidate vertices were enumerated.
    VertexEnumeration,
    /// Best vertex found by simplex walks in random directions.
    SampledVertices,
    /// The feature matrix is rank deficient and the polytope is unbounded.
    Unbounded,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OmegaEstimate {
    pub omega: f64,
    pub lower_estimate: bool,
    pub method: OmegaMethod,
}

/// Candidate vertex systems above this count switch enumeration to sampling.
const ENUMERATION_LIMIT: f64 = 2.0e5;
const SAMPLED_DIRECTIONS: usize = 2000;
const OMEGA_SEED: u64 = 0x6f6d_6567_61;
const FEAS_TOL: f64 = 1e-9;

/// `max ||w||_2` over `{w : 0 <= phi(s,a)^T w <= 1 for all (s,a)}`.
pub fn default_omega(features: &FeatureMap) -> OmegaEstimate {
    let phi = &features.matrix;
    let d = phi.ncols();
    if linalg::rank(phi) < d {
        return OmegaEstimate {
            omega: f64::INFINITY,
            lower_estimate: false,
            method: OmegaMethod::Unbounded,
        };
    }
    if let Some(omega) = box_omega(phi) {
        return OmegaEstimate {
            omega,
            lower_estimate: false,
            method: OmegaMethod::Box,
        };
    }
    let rows = distinct_rows(phi);
    let candidates = binomial(rows.len(), d) * 2f64.powi(d as i32);
    if candidates <= ENUMERATION_LIMIT {
        OmegaEstimate {
            omega: enumerate_vertices(phi, &rows),
            lower_estimate: false,
            method: OmegaMethod::VertexEnumeration,
        }
    } else {
        OmegaEstimate {
            omega: sampled_vertices(phi),
            lower_estimate: true,
            method: OmegaMethod::SampledVertices,
        }
    }
}

fn box_omega(phi: &DMatrix<f64>) -> Option<f64> {
    let d = phi.ncols();
    let mut lo = vec![f64::NEG_INFINITY; d];
    let mut hi = vec![f64::INFINITY; d];
    for row in phi.row_iter() {
        let nz: Vec<usize> = (0..d).filter(|&j| row[j] != 0.0).collect();
        match nz.as_slice() {
            [] => {}
            [j] => {
                let bound = 1.0 / row[*j];
                if bound > 0.0 {
                    lo[*j] = lo[*j].max(0.0);
                    hi[*j] = hi[*j].min(bound);
                } else {
                    lo[*j] = lo[*j].max(bound);
                    hi[*j] = hi[*j].min(0.0);
                }
            }
            _ => return None,
        }
    }
    Some(
        lo.iter()
            .zip(&hi)
            .map(|(l, h)| (l * l).max(h * h))
            .sum::<f64>()
            .sqrt(),
    )
}

fn distinct_rows(phi: &DMatrix<f64>) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for i in 0..phi.nrows() {
        if phi.row(i).iter().all(|&v| v == 0.0) {
            continue;
        }
        if !out.iter().any(|&j| phi.row(j) == phi.row(i)) {
            out.push(i);
        }
    }
    out
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn feasible(phi: &DMatrix<f64>, w: &DVector<f64>) -> bool {
    (phi * w).iter().all(|&v| v >= -FEAS_TOL && v <= 1.0 + FEAS_TOL)
}

fn enumerate_vertices(phi: &DMatrix<f64>, rows: &[usize]) -> f64 {
    let d = phi.ncols();
    let mut best = 0.0f64;
    let mut subset: Vec<usize> = (0..d).collect();
    loop {
        let a = DMatrix::from_fn(d, d, |i, j| phi[(rows[subset[i]], j)]);
        let lu = a.clone().full_piv_lu();
        if lu.is_invertible() && linalg::rank(&a) == d {
            for mask in 0u64..(1u64 << d) {
                let b = DVector::from_fn(d, |i, _| ((mask >> i) & 1) as f64);
                if let Some(w) = lu.solve(&b) {
                    if feasible(phi, &w) {
                        best = best.max(w.norm());
                    }
                }
            }
        }
        // Advance to the next d-subset in lexicographic order.
        let mut i = d;
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            if subset[i] != i + rows.len() - d {
                break;
            }
            if i == 0 {
                return best;
            }
        }
        subset[i] += 1;
        for j in i + 1..d {
            subset[j] = subset[j - 1] + 1;
        }
    }
}

/// Active constraint: row index and the level (0 or 1) it is tight at.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Active {
    row: usize,
    level: f64,
}

/// Maximize `c^T w` over the polytope by simplex pivots from the vertex `w = 0`.
fn simplex_walk(phi: &DMatrix<f64>, c: &DVector<f64>, start: &[Active]) -> Option<DVector<f64>> {
    let d = phi.ncols();
    let mut basis = start.to_vec();
    for _ in 0..10_000 {
        let a = DMatrix::from_fn(d, d, |i, j| phi[(basis[i].row, j)]);
        let inv = a.clone().try_inverse()?;
        let b = DVector::from_fn(d, |i, _| basis[i].level);
        let w = &inv * b;
        // Releasing constraint k moves along inv[:, k] scaled so the row leaves its bound inward.
        let mut entering = None;
        for k in 0..d {
            let sign = if basis[k].level == 0.0 { 1.0 } else { -1.0 };
            let dir = inv.column(k) * sign;
            if c.dot(&dir) > 1e-12 {
                entering = Some((k, dir));
                break;
            }
        }
        let Some((k, dir)) = entering else {
            return Some(w);
        };
        let values = phi * &w;
        let slopes = phi * &dir;
        let mut step = f64::INFINITY;
        let mut leaving = None;
        for i in 0..phi.nrows() {
            let g = slopes[i];
            if g.abs() <= 1e-14 || basis.iter().any(|b| b.row == i) {
                continue;
            }
            let (t, level) = if g > 0.0 {
                ((1.0 - values[i]) / g, 1.0)
            } else {
                (values[i] / -g, 0.0)
            };
            let t = t.max(0.0);
            if t < step - 1e-15 {
                step = t;
                leaving = Some(Active { row: i, level });
            }
        }
        // The row released in this pivot can also hit its opposite bound.
        let released = basis[k];
        let g = phi.row(released.row).dot(&dir.transpose());
        if g.abs() > 1e-14 {
            let t = 1.0 / g.abs();
            if t < step - 1e-15 {
                leaving = Some(Active {
                    row: released.row,
                    level: 1.0 - released.level,
                });
            }
        }
        basis[k] = leaving?;
    }
    None
}

fn sampled_vertices(phi: &DMatrix<f64>) -> f64 {
    let d = phi.ncols();
    // A starting basis: d independent rows, all tight at level 0 (the vertex w = 0).
    let mut start: Vec<Active> = Vec::new();
    for i in 0..phi.nrows() {
        let mut rows: Vec<usize> = start.iter().map(|a| a.row).collect();
        rows.push(i);
        let sub = DMatrix::from_fn(rows.len(), d, |r, j| phi[(rows[r], j)]);
        if linalg::rank(&sub) == rows.len() {
            start.push(Active { row: i, level: 0.0 });
            if start.len() == d {
                break;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(OMEGA_SEED);
    let mut best = 0.0f64;
    for _ in 0..SAMPLED_DIRECTIONS {
        let c = DVector::from_fn(d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        if let Some(w) = simplex_walk(phi, &c, &start) {
            if feasible(phi, &w) {
                best = best.max(w.norm());
            }
        }
    }
    best
}
