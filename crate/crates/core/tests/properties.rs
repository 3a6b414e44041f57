use proptest::prelude::*;

use wavesolve::basis::{basis_eval, enumerate_family, mother_eval, MotherWavelet, ResolutionRange};
use wavesolve::network::{init, NetShape};
use wavesolve::problems::get_problem;
use wavesolve::report::relative_l2;
use wavesolve::sampling::PointSet;
use wavesolve::training::{train, LossWeights, Model, TrainConfig};

fn mother() -> impl Strategy<Value = MotherWavelet> {
    prop_oneof![Just(MotherWavelet::Gaussian), Just(MotherWavelet::MexicanHat)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn gaussian_derivative_is_minus_mexican_hat(x in -8.0f64..8.0) {
        let dg = mother_eval(MotherWavelet::Gaussian, 1, x).unwrap();
        let m = mother_eval(MotherWavelet::MexicanHat, 0, x).unwrap();
        prop_assert!((dg + m).abs() < 1e-12);
    }

    #[test]
    fn mother_derivatives_match_finite_differences(kind in mother(), order in 1u8..=2, x in -6.0f64..6.0) {
        let h = 1e-5;
        let fd = (mother_eval(kind, order - 1, x + h).unwrap() - mother_eval(kind, order - 1, x - h).unwrap()) / (2.0 * h);
        let an = mother_eval(kind, order, x).unwrap();
        if an.abs() < 1e-3 {
            prop_assert!((fd - an).abs() < 1e-8, "{} vs {}", fd, an);
        } else {
            prop_assert!(((fd - an) / an).abs() < 1e-5, "{} vs {}", fd, an);
        }
    }

    #[test]
    fn member_derivative_scaling(kind in mother(), j in 0i32..6, x in 0.0f64..1.0, pick in 0usize..1000) {
        let fam = enumerate_family(kind, &[(0.0, 1.0)], &[ResolutionRange::new(j, j)]).unwrap();
        let m = pick % fam.len();
        let k = fam.member(m)[0].k as f64;
        let s = 2f64.powi(j);
        let d1 = basis_eval(&fam, m, &[1], &[x]).unwrap();
        let direct = s * s.sqrt() * mother_eval(kind, 1, s * x - k).unwrap();
        prop_assert!((d1 - direct).abs() <= 1e-12 * direct.abs().max(1e-300));
        let h = 1e-4 / s;
        let fd = (basis_eval(&fam, m, &[0], &[x + h]).unwrap() - basis_eval(&fam, m, &[0], &[x - h]).unwrap()) / (2.0 * h);
        let tol = 1e-5 * d1.abs().max(s.sqrt() * s * 1e-3);
        prop_assert!((fd - d1).abs() < tol, "{} vs {}", fd, d1);
    }

    #[test]
    fn family_enumeration_is_pure(kind in mother(), a in -3i32..3, span in 0i32..4) {
        let r = [ResolutionRange::new(a, a + span)];
        let f1 = enumerate_family(kind, &[(-1.0, 1.0)], &r).unwrap();
        let f2 = enumerate_family(kind, &[(-1.0, 1.0)], &r).unwrap();
        prop_assert_eq!(f1, f2);
    }

    #[test]
    fn relative_l2_scale_invariant(
        u in prop::collection::vec(-10.0f64..10.0, 1..50),
        noise in prop::collection::vec(-1.0f64..1.0, 50),
        alpha in prop_oneof![-1e6f64..-1e-6, 1e-6f64..1e6],
    ) {
        prop_assume!(u.iter().any(|v| v.abs() > 1e-3));
        let v: Vec<f64> = u.iter().zip(&noise).map(|(a, b)| a + b).collect();
        let base = relative_l2(&u, &v).unwrap();
        let su: Vec<f64> = u.iter().map(|x| alpha * x).collect();
        let sv: Vec<f64> = v.iter().map(|x| alpha * x).collect();
        let scaled = relative_l2(&su, &sv).unwrap();
        prop_assert!((base - scaled).abs() <= 1e-12 * base.max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn exact_solutions_annihilate_residuals(
        which in 0usize..5,
        a in 0.0f64..1.0,
        b in 0.0f64..1.0,
    ) {
        let name = ["advdiff", "nonlinear_ivp", "heat2d", "helmholtz", "maxwell_homog"][which];
        let spec = get_problem(name, None).unwrap();
        let bounds = spec.geometry.bounds();
        let p: Vec<f64> = bounds.iter().zip([a, b]).map(|(&(lo, hi), s)| lo + s * (hi - lo)).collect();
        let jet = spec.exact_jet(&p).unwrap();
        let res = spec.residual(&p, &jet);
        let scale = spec.residual_scale(&p, &jet).max(1.0);
        for e in 0..spec.fields {
            prop_assert!(res.r[e].abs() / scale < 1e-8, "{} at {:?}: {}", name, p, res.r[e]);
        }
    }

    #[test]
    fn network_forward_is_deterministic_and_partitioned(
        seed in 0u64..1000,
        depth in 1usize..4,
        width in 1usize..8,
        fields in 1usize..=2,
        members in 1usize..10,
    ) {
        let shape = NetShape::new(3, depth, width, fields, members);
        let mut net = init(shape.clone(), seed).unwrap();
        let features = [0.1, -0.4, 0.9];
        let a = net.forward(&features).unwrap();
        let raw = net.raw_output().unwrap().to_vec();
        let b = net.forward(&features).unwrap();
        prop_assert_eq!(&a, &b);
        let joined: Vec<f64> = a.coefficients.concat();
        prop_assert_eq!(joined, raw);
        prop_assert_eq!(a.biases.as_slice(), net.expansion_biases());
        let mut again = init(shape, seed).unwrap();
        prop_assert_eq!(again.forward(&features).unwrap(), a);
    }
}

fn tiny(problem: &str) -> TrainConfig {
    let mut c = TrainConfig::preset(problem, MotherWavelet::Gaussian).unwrap();
    let dim = c.resolutions.len();
    c.resolutions = if dim == 1 { vec![(0, 2)] } else { vec![(-1, 0), (-1, 0)] };
    c.depth = 2;
    c.width = 4;
    c.encoder_width = 3;
    c.n_interior = 12;
    c.n_boundary = if dim == 1 { 0 } else { 8 };
    c.n_initial = if dim == 2 && c.spec().unwrap().geometry.has_time_axis() { 4 } else { 0 };
    c.iterations = 6;
    c.finetune_iterations = 0;
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn zero_learning_rate_freezes_training(which in 0usize..8, seed in 1u64..50) {
        let name = wavesolve::problems::PROBLEM_NAMES[which];
        let mut c = tiny(name);
        c.seed = seed;
        c.lr = 0.0;
        let out = train(&c).unwrap();
        let first = out.history[0].loss;
        for h in &out.history {
            prop_assert_eq!(h.loss, first);
            prop_assert!(h.loss.is_finite());
        }
        let mut fresh = Model::new(&c).unwrap();
        prop_assert_eq!(out.net.params(), fresh.net.params());
        prop_assert_eq!(fresh.loss(LossWeights::default()).unwrap(), first);
    }
}

#[test]
fn point_set_round_trip_through_concat() {
    let a = PointSet::new(2, vec![0.0, 1.0, 2.0, 3.0], wavesolve::sampling::PointRole::Interior);
    let b = PointSet::concat(&[&a], wavesolve::sampling::PointRole::Interior);
    assert_eq!(a, b);
}
