mod common;

use htan::apl::{apl_apply, mahalanobis_sq, AplBasis, AplCoordinates, MetricMatrix};
use htan::data::empirical_covariance;
use htan::spd::{
    bimap_forward, orthogonality_defect, reeig_forward, spd_project, stiefel_step, SpdMatrix, SpdReport,
    StepDirection, StiefelParam, REEIG_FLOOR, STIEFEL_TOL,
};
use htan::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spd_from_seed(seed: u64, m: usize) -> SpdMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SpdMatrix::new(common::random_spd(&mut rng, m, 1e-3)).unwrap()
}

fn vec_of(len: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(lo..hi, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn bimap_keeps_spd(seed in any::<u64>(), m in 1usize..5, scale in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = spd_from_seed(seed, m);
        let w = StiefelParam::random(m, &mut rng);
        let v = common::uniform(&mut rng, &[m, m], -scale, scale);
        let b = common::uniform(&mut rng, &[m], -scale, scale);
        let beta: Vec<f64> = common::uniform(&mut rng, &[m], -1.0, 1.0).into_data();
        let y = bimap_forward(&x, &beta, &w, &v, &b).unwrap();
        prop_assert!(SpdReport::of(y.tensor()).unwrap().is_valid());
    }

    #[test]
    fn reeig_keeps_spd(seed in any::<u64>(), m in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = spd_from_seed(seed, m);
        let q = common::uniform(&mut rng, &[m, m], -1.0, 1.0);
        let c = common::uniform(&mut rng, &[m], -1.0, 1.0);
        let beta: Vec<f64> = common::uniform(&mut rng, &[m], -1.0, 1.0).into_data();
        let y = reeig_forward(&x, &beta, &q, &c).unwrap();
        let r = SpdReport::of(y.tensor()).unwrap();
        prop_assert!(r.is_valid());
        prop_assert!(r.min_eigenvalue >= REEIG_FLOOR * (1.0 - 1e-6));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn stiefel_survives_many_steps(seed in any::<u64>(), m in 1usize..6, lr in 1e-3f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = StiefelParam::random(m, &mut rng);
        for k in 0..50 {
            let g = common::uniform(&mut rng, &[m, m], -1.0, 1.0);
            let dir = if k % 2 == 0 { StepDirection::Ascent } else { StepDirection::Descent };
            w = stiefel_step(&w, &g, lr, dir).unwrap();
            prop_assert!(orthogonality_defect(w.tensor()) < STIEFEL_TOL);
        }
    }

    #[test]
    fn reeig_floor_only_is_identity(seed in any::<u64>(), m in 1usize..5) {
        let x = spd_from_seed(seed, m);
        let q = Tensor::zeros(&[m, m]);
        let c = Tensor::zeros(&[m]);
        let y = reeig_forward(&x, &vec![0.3; m], &q, &c).unwrap();
        // eigenvalues below the floor would be lifted; shift the input above it
        let r = SpdReport::of(x.tensor()).unwrap();
        if r.min_eigenvalue > REEIG_FLOOR {
            let diff = y.tensor().data().iter().zip(x.tensor().data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(diff < 1e-8);
        }
    }

    #[test]
    fn projection_is_symmetric_and_positive(seed in any::<u64>(), m in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = common::uniform(&mut rng, &[m, m], -1.0, 1.0);
        let p = spd_project(&a).unwrap();
        prop_assert!(SpdReport::of(p.tensor()).unwrap().is_valid());
    }

    #[test]
    fn distances_behave_like_a_metric(seed in any::<u64>(), m in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let metric = MetricMatrix::new(common::random_spd(&mut rng, m, 0.1)).unwrap();
        let p: Vec<AplCoordinates> = (0..3)
            .map(|_| AplCoordinates::new(common::uniform(&mut rng, &[m], -2.0, 2.0).into_data()))
            .collect();
        let d = |i: usize, j: usize| mahalanobis_sq(&p[i], &p[j], &metric).unwrap();
        prop_assert_eq!(d(0, 1), d(1, 0));
        prop_assert!(d(0, 1) >= 0.0);
        prop_assert_eq!(d(2, 2), 0.0);
        prop_assert!(d(0, 2).sqrt() <= d(0, 1).sqrt() + d(1, 2).sqrt() + 1e-12);
    }

    #[test]
    fn zero_coordinates_are_relu(x in vec_of(8, -5.0, 5.0), beta in vec_of(4, -3.0, 3.0)) {
        let y = apl_apply(&Tensor::vector(x.clone()), &AplCoordinates::zeros(4), &AplBasis::new(beta).unwrap()).unwrap();
        for (a, b) in y.data().iter().zip(&x) {
            prop_assert_eq!(*a, b.max(0.0));
        }
    }

    #[test]
    fn covariance_symmetric(a in proptest::collection::vec(0usize..3, 1..60), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<usize> = a.iter().map(|_| rand::Rng::random_range(&mut rng, 0..3)).collect();
        let ab = empirical_covariance(&a, &b, (0, 1)).unwrap();
        let ba = empirical_covariance(&b, &a, (1, 0)).unwrap();
        prop_assert!((ab - ba).abs() < 1e-15);
    }
}
