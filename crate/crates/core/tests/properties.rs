mod common;

use flowfield::{
    gram_matrix, obs_covariance, state_posterior, Equicorr, HmmCounts, Locations, Mrgp, RbfKernel,
};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn points(max: usize, p: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, p), 1..max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn obs_covariance_symmetric_pd_and_blockwise(
        pts in points(12, 2),
        d in 1usize..4,
        rho_unit in 0.0f64..1.0,
        s0 in 0.1f64..3.0,
        ell in 0.1f64..3.0,
        s2 in 0.01f64..2.0,
    ) {
        let (lo, hi) = Equicorr::<f64>::valid_range(d);
        let lo = lo.unwrap_or(-0.99);
        let rho = lo + (hi - lo) * (0.01 + 0.98 * rho_unit);
        let k = gram_matrix(&RbfKernel::new(s0, ell).unwrap(), &Locations::from_points(2, &pts).unwrap()).unwrap();
        let omega = Equicorr::new(rho, d).unwrap();
        let a = obs_covariance(&k, &omega, s2).unwrap();
        prop_assert_eq!(&a, &a.transpose());
        prop_assert!(a.clone().cholesky().is_some());
        let n = pts.len();
        for i in 0..n {
            for j in 0..n {
                for x in 0..d {
                    for y in 0..d {
                        let noise = if i == j && x == y { s2 } else { 0.0 };
                        prop_assert_eq!(a[(i * d + x, j * d + y)], k[(i, j)] * omega.entry(x, y) + noise);
                    }
                }
            }
        }
    }

    #[test]
    fn kernel_bounded_by_variance(a in prop::collection::vec(-5.0f64..5.0, 3), b in prop::collection::vec(-5.0f64..5.0, 3), s0 in 0.1f64..3.0) {
        let k = RbfKernel::new(s0, 0.7).unwrap();
        let v = k.eval(&a, &b).unwrap();
        prop_assert!(v > 0.0 || (a != b && v == 0.0));
        prop_assert!(v <= s0);
        prop_assert_eq!(v, k.eval(&b, &a).unwrap());
        prop_assert_eq!(k.eval(&a, &a).unwrap(), s0);
    }

    #[test]
    fn transition_prior_sums_to_one(
        k in 1usize..8,
        seed in any::<u64>(),
        alpha in 0.01f64..20.0,
        gamma in 0.01f64..20.0,
    ) {
        use rand::Rng;
        let mut r = common::rng(seed);
        let n: Vec<Vec<u64>> = (0..k).map(|_| (0..k).map(|_| r.random_range(0..20)).collect()).collect();
        let m: Vec<u64> = (0..k).map(|_| r.random_range(0..20)).collect();
        let cur = r.random_range(0..k);
        let c = HmmCounts::from_parts(n, m, vec![1; k], cur, alpha, gamma).unwrap();
        let prior = c.transition_prior();
        prop_assert_eq!(prior.len(), k + 1);
        prop_assert!((prior.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(prior.iter().all(|&p| p >= 0.0));
        for j in 0..=k {
            let p = c.oracle_posterior(j).unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn state_posterior_normalized_with_first_argmax(
        ll in prop::collection::vec(-1e3f64..1e3, 1..10),
        shift in -1e5f64..1e5,
    ) {
        let k = ll.len();
        let prior = vec![1.0 / k as f64; k];
        let (post, s) = state_posterior(&prior, &ll).unwrap();
        prop_assert!((post.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let best = post.iter().cloned().fold(f64::MIN, f64::max);
        prop_assert_eq!(s, post.iter().position(|&p| p == best).unwrap());
        let shifted: Vec<f64> = ll.iter().map(|v| v + shift).collect();
        let (_, s2) = state_posterior(&prior, &shifted).unwrap();
        prop_assert_eq!(s, s2);
    }

    #[test]
    fn posterior_covariance_is_psd(seed in any::<u64>(), d in 1usize..4, n in 1usize..10, m in 1usize..5) {
        let mut r = common::rng(seed);
        let model = Mrgp::new(RbfKernel::new(1.0, 0.8).unwrap(), 0.3, d).unwrap();
        let (_, f) = common::random_frame(&mut r, 0, n, 2, d);
        let c = model.schur_extend(&model.empty_cluster(0), &f).unwrap();
        let (_, q) = common::random_frame(&mut r, 1, m, 2, d);
        let est = model.posterior_field(&c, &q.locations, false).unwrap();
        prop_assert_eq!(&est.cov, &est.cov.transpose());
        let eig = est.cov.clone().symmetric_eigenvalues();
        prop_assert!(eig.iter().all(|&v| v > -1e-10), "{eig}");
        prop_assert!(est.mean.iter().all(|v| v.is_finite()));
        let l = c.lambda().unwrap();
        prop_assert_eq!(&*l, &l.transpose());
    }

    #[test]
    fn running_mean_of_unique_locations_is_the_frame(seed in any::<u64>(), n in 1usize..8) {
        let mut r = common::rng(seed);
        let model = Mrgp::new(RbfKernel::new(1.0, 1.0).unwrap(), 0.5, 2).unwrap();
        let (_, f) = common::random_frame(&mut r, 0, n, 2, 2);
        let (_, g) = common::random_frame(&mut r, 1, n, 2, 2);
        let c = model.schur_extend(&model.empty_cluster(0), &f).unwrap();
        prop_assert_eq!(model.running_mean(&c, &g), g.stacked());
        let again = model.running_mean(&c, &f);
        let want = f.stacked();
        for (a, b) in again.iter().zip(want.iter()) {
            prop_assert!((a - b).abs() < 1e-15);
        }
    }
}

#[test]
fn gram_of_duplicates_is_rank_one() {
    let pts = vec![vec![0.5, 0.5]; 3];
    let k = gram_matrix(&RbfKernel::new(2.0, 1.0).unwrap(), &Locations::from_points(2, &pts).unwrap()).unwrap();
    assert_eq!(k, DMatrix::from_element(3, 3, 2.0));
}
