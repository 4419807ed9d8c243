mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use ope_lab::*;
use proptest::prelude::*;

/// Projection residuals computed with a Gram-Schmidt orthonormal basis of the columns of `Phi`.
fn projection_oracle(model: &TabularMdp, pi: &Policy, features: &FeatureMap) -> (f64, f64) {
    let (ns, na) = (model.n_states, model.n_actions);
    let phi = &features.matrix;
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for j in 0..phi.ncols() {
        let mut v = phi.column(j).into_owned();
        let scale = v.norm();
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&v);
                v -= q * c;
            }
        }
        if v.norm() > 1e-8 * scale {
            basis.push(v.normalize());
        }
    }
    let project = |y: &DVector<f64>| -> f64 {
        let mut resid = y.clone();
        for q in &basis {
            let c = q.dot(y);
            resid -= q * c;
        }
        resid.amax()
    };
    let mut trans = 0.0f64;
    for j in 0..features.dim() {
        let target = DVector::from_fn(ns * na, |row, _| {
            let (s, a) = (row / na, row % na);
            (0..ns)
                .map(|sp| {
                    let phi_pi: f64 = (0..na).map(|ap| pi.action_probs[sp][ap] * phi[(sp * na + ap, j)]).sum();
                    model.transition[s][a][sp] * phi_pi
                })
                .sum()
        });
        trans = trans.max(project(&target));
    }
    let r = DVector::from_fn(ns * na, |row, _| model.mean_reward[row / na][row % na]);
    (trans, project(&r))
}

#[test]
fn tabular_shapes() {
    assert_eq!(build_tabular_features(2, 2).matrix, DMatrix::identity(4, 4));
    assert_eq!(build_tabular_features(1, 1).matrix, DMatrix::from_element(1, 1, 1.0));
    for (m, n) in [(1, 3), (4, 2), (5, 5)] {
        assert!(build_tabular_features(m, n).contains_constant());
    }
}

#[test]
fn two_state_policy_features_are_one_hot() {
    let hi = two_state_instance(0.75, 3).unwrap();
    let pf = policy_average_features(&hi.instance.features, &hi.instance.target).unwrap();
    assert_eq!(pf.phi(0), DVector::from_vec(vec![1.0, 0.0]));
    assert_eq!(pf.phi(1), DVector::from_vec(vec![0.0, 1.0]));
    let nu0 = initial_feature_vector(&hi.instance.features, &hi.instance.target, &hi.instance.target_init).unwrap();
    assert_eq!(nu0, DVector::from_vec(vec![1.0, 0.0]));
}

#[test]
fn tabular_nu0_is_joint_distribution() {
    let mut r = rng(21);
    let pi = random_policy(&mut r, 4, 3);
    let init = random_init(&mut r, 4);
    let nu0 = initial_feature_vector(&build_tabular_features(4, 3), &pi, &init).unwrap();
    for s in 0..4 {
        for a in 0..3 {
            assert!((nu0[s * 3 + a] - init.probs[s] * pi.action_probs[s][a]).abs() < 1e-15);
        }
    }
    assert!((nu0.sum() - 1.0).abs() < 1e-12);
    let one_hot = initial_feature_vector(
        &build_tabular_features(3, 2),
        &Policy::deterministic(&[1, 0, 1], 2),
        &InitialDistribution::point_mass(3, 2),
    )
    .unwrap();
    assert_eq!(one_hot, DVector::from_vec(vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0]));
}

#[test]
fn rank_deficient_residual_matches_projection_oracle() {
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let model = random_model(&mut r, 4, 2, RewardNoise::Bernoulli);
        let pi = random_policy(&mut r, 4, 2);
        let base = random_features(&mut r, 4, 2, 3);
        // Append a dependent column to make the map rank deficient.
        let extra = base.matrix.column(0) * 0.5 - base.matrix.column(2) * 0.25;
        let matrix = base.matrix.clone().insert_column(3, 0.0);
        let mut matrix = matrix;
        matrix.set_column(3, &extra);
        let features = FeatureMap::new(4, 2, matrix).unwrap();
        let lib = closure_residual(&model, &pi, &features).unwrap();
        let (t, rw) = projection_oracle(&model, &pi, &features);
        assert!((lib.transition_residual - t).abs() < 1e-10, "{} vs {t}", lib.transition_residual);
        assert!((lib.reward_residual - rw).abs() < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn policy_average_is_linear_in_features(seed in any::<u64>(), ns in 1usize..5, na in 1usize..4, d in 1usize..5, scale in -3.0f64..3.0) {
        let mut r = rng(seed);
        let f = random_features(&mut r, ns, na, d);
        let pi = random_policy(&mut r, ns, na);
        let avg = policy_average_features(&f, &pi).unwrap().matrix;
        let mut scaled = f.matrix.clone();
        scaled.column_mut(0).scale_mut(scale);
        prop_assume!(scale != 0.0);
        let fs = FeatureMap::new(ns, na, scaled).unwrap();
        let avg_s = policy_average_features(&fs, &pi).unwrap().matrix;
        for s in 0..ns {
            prop_assert!((avg_s[(s, 0)] - scale * avg[(s, 0)]).abs() < 1e-12);
            for j in 1..d {
                prop_assert_eq!(avg_s[(s, j)], avg[(s, j)]);
            }
        }
    }

    #[test]
    fn mixture_policy_averages_mix(seed in any::<u64>(), ns in 1usize..5, na in 1usize..4, d in 1usize..5, alpha in 0.0f64..=1.0) {
        let mut r = rng(seed);
        let f = random_features(&mut r, ns, na, d);
        let p1 = random_policy(&mut r, ns, na);
        let p2 = random_policy(&mut r, ns, na);
        let mix = p1.mixture(&p2, alpha);
        let a = policy_average_features(&f, &mix).unwrap().matrix;
        let b = policy_average_features(&f, &p1).unwrap().matrix * alpha
            + policy_average_features(&f, &p2).unwrap().matrix * (1.0 - alpha);
        prop_assert!((a - b).amax() < 1e-12);
    }

    #[test]
    fn tabular_features_are_always_closed(seed in any::<u64>(), ns in 1usize..5, na in 1usize..4) {
        let mut r = rng(seed);
        let model = random_model(&mut r, ns, na, RewardNoise::Bernoulli);
        let pi = random_policy(&mut r, ns, na);
        let res = closure_residual(&model, &pi, &build_tabular_features(ns, na)).unwrap();
        prop_assert!(res.is_closed(1e-10));
    }
}
