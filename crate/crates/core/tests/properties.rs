//! Property tests for the documented invariants, through the public API only.

use cfm::evaluate::in_sample_r2;
use cfm::extract::{extract_factors, select_rank, FactorEstimate, Loadings, LowRankFit, RankRule};
use cfm::matdecomp::{nuclear_norm, soft_threshold_singular};
use cfm::panel_io::{load_estimate, rank_transform, save_estimate, EstimateArchive, Provenance};
use cfm::problems::{gradient, loss, DecisionMatrix, FamilyKind, ModelFamily, Panel};
use cfm::prox_apg::{objective, solve, SolverConfig};
use cfm::tuning::{cross_validate, CvPlan};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_panel(seed: u64, n: usize, t: usize, p: usize, missing: f64) -> Panel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = DMatrix::from_fn(n, t, |_, _| rng.gen_range(-2.0..2.0));
    let mask = DMatrix::from_fn(n, t, |_, _| rng.gen::<f64>() >= missing);
    let xs: Vec<f64> = (0..n * t * p).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Panel::from_fn(y, mask, p, |i, tt, k| if k == 0 { 1.0 } else { xs[(i * t + tt) * p + k] }).unwrap()
}

fn random_decision(rng: &mut ChaCha8Rng, kind: FamilyKind, n: usize, t: usize, p: usize) -> DecisionMatrix {
    let mut m = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
    match kind {
        FamilyKind::Unconstrained => DecisionMatrix::Unconstrained(m(n * p, t)),
        FamilyKind::Semiparametric => DecisionMatrix::Semiparametric {
            diamond: m(n, t),
            star: m(p - 1, t),
        },
        FamilyKind::Homogeneous => DecisionMatrix::Homogeneous(m(p, t)),
    }
}

fn family_of(index: usize) -> FamilyKind {
    FamilyKind::ALL[index % 3]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn directional_derivative_matches_gradient(seed in any::<u64>(), fam in 0usize..3) {
        let kind = family_of(fam);
        let panel = random_panel(seed, 4, 5, 3, 0.2);
        let family = ModelFamily::new(kind);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let g0 = random_decision(&mut rng, kind, 4, 5, 3);
        let dir = random_decision(&mut rng, kind, 4, 5, 3);
        let h = 1e-4;
        let fd = (loss(&panel, family, &g0.axpy(h, &dir)).unwrap() - loss(&panel, family, &g0.axpy(-h, &dir)).unwrap()) / (2.0 * h);
        let analytic = gradient(&panel, family, &g0).unwrap().dot(&dir);
        prop_assert!((fd - analytic).abs() <= 1e-6 * (1.0 + analytic.abs()), "{} vs {}", fd, analytic);
    }

    #[test]
    fn masking_equals_zeroing(seed in any::<u64>(), homogeneous in any::<bool>(), cell in 0usize..20) {
        // the semiparametric family pins x_0 = 1, so zeroing is only expressible for the other two
        let kind = if homogeneous { FamilyKind::Homogeneous } else { FamilyKind::Unconstrained };
        let family = ModelFamily::new(kind);
        let panel = random_panel(seed, 4, 5, 3, 0.0);
        let (i, t) = (cell % 4, cell / 4);
        let masked = panel.mask_cells(&[(i, t)]);
        let mut y = panel.returns().clone();
        y[(i, t)] = 0.0;
        let zeroed = Panel::fully_observed(y, 3, |a, b, k| if (a, b) == (i, t) { 0.0 } else { panel.x(a, b)[k] }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let d = random_decision(&mut rng, kind, 4, 5, 3);
        prop_assert!((loss(&masked, family, &d).unwrap() - loss(&zeroed, family, &d).unwrap()).abs() < 1e-12);
        let gm = gradient(&masked, family, &d).unwrap();
        let gz = gradient(&zeroed, family, &d).unwrap();
        prop_assert!(gm.axpy(-1.0, &gz).norm_squared() < 1e-20);
    }

    #[test]
    fn homogeneous_objective_reduces(seed in any::<u64>(), lambda in 0.0f64..5.0) {
        let (n, t, p) = (5, 6, 3);
        let panel = random_panel(seed, n, t, p, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let small = random_decision(&mut rng, FamilyKind::Homogeneous, n, t, p);
        let big = DecisionMatrix::Unconstrained(small.expand(n, p));
        let lhs = objective(&panel, ModelFamily::homogeneous(), &small, (n as f64).sqrt() * lambda).unwrap();
        let rhs = objective(&panel, ModelFamily::unconstrained(), &big, lambda).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-8 * (1.0 + rhs.abs()), "{} vs {}", lhs, rhs);
    }

    #[test]
    fn semiparametric_objective_reduces(seed in any::<u64>(), lambda in 0.0f64..5.0) {
        let (n, t, p) = (5, 6, 3);
        let panel = random_panel(seed, n, t, p, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 4);
        let small = random_decision(&mut rng, FamilyKind::Semiparametric, n, t, p);
        let big = DecisionMatrix::Unconstrained(small.expand(n, p));
        let lhs = objective(&panel, ModelFamily::semiparametric(), &small, lambda).unwrap();
        let rhs = objective(&panel, ModelFamily::unconstrained(), &big, lambda).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-8 * (1.0 + rhs.abs()));
    }

    #[test]
    fn prox_subgradient_optimality(seed in any::<u64>(), x in 0.05f64..1.5) {
        // F(G) <= F(G + eps D) for the prox objective 1/2||G - A||^2 + x||G||_*
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(5, 4, |_, _| rng.gen_range(-1.0..1.0));
        let g = soft_threshold_singular(&a, x).unwrap();
        let f = |m: &DMatrix<f64>| 0.5 * (m - &a).norm_squared() + x * nuclear_norm(m).unwrap();
        let base = f(&g);
        for _ in 0..5 {
            let d = DMatrix::from_fn(5, 4, |_, _| rng.gen_range(-1.0..1.0));
            prop_assert!(base <= f(&(&g + d * 1e-3)) + 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn accepted_steps_respect_majorization_and_are_deterministic(seed in any::<u64>(), fam in 0usize..3, c in 0.05f64..1.0) {
        let kind = family_of(fam);
        let family = ModelFamily::new(kind);
        let panel = random_panel(seed, 6, 8, 3, 0.15);
        let lambda = cfm::prox_apg::default_lambda(&panel, family, c).unwrap();
        let config = SolverConfig::new(lambda).with_max_iterations(300);
        let (d1, r1) = solve(&panel, family, &config).unwrap();
        let (d2, r2) = solve(&panel, family, &config).unwrap();
        prop_assert_eq!(&d1, &d2);
        prop_assert_eq!(&r1.objective_trace, &r2.objective_trace);
        for (f, q) in r1.objective_trace.iter().zip(&r1.majorization_trace) {
            prop_assert!(*f <= q + 1e-9 * (1.0 + q.abs()), "{} > {}", f, q);
        }
    }

    #[test]
    fn extraction_normalization(seed in any::<u64>(), fam in 0usize..3, k in 0usize..3, zero_alpha in any::<bool>()) {
        let kind = family_of(fam);
        let (n, t, p) = (6, 9, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let matrix = random_decision(&mut rng, kind, n, t, p);
        let fit = LowRankFit::from_matrix(ModelFamily::new(kind).with_zero_alpha(zero_alpha), n, p, matrix, 0.0).unwrap();
        let est = extract_factors(&fit, RankRule::Fixed(k)).unwrap();
        let b = est.b_full(n, p);
        let a = est.a_full(n, p);
        prop_assert!(b.tr_mul(&a).amax() < 1e-8 * (1.0 + a.amax()));
        let gram = match &est.b_hat {
            Loadings::Homogeneous(phi) => phi.tr_mul(phi),
            _ => b.tr_mul(&b) / n as f64,
        };
        prop_assert!((gram - DMatrix::identity(k, k)).amax() < 1e-8);
        let f = &est.f_hat;
        let mf = f - DMatrix::from_fn(t, k, |_, j| f.column(j).mean());
        let cov = mf.tr_mul(&mf) / t as f64;
        for j in 1..k {
            if !zero_alpha {
                prop_assert!(cov[(j, j)] <= cov[(j - 1, j - 1)] * (1.0 + 1e-10));
            }
        }
    }

    #[test]
    fn select_rank_nonincreasing_in_delta(seed in any::<u64>(), fam in 0usize..3, d1 in 1e-3f64..10.0, d2 in 1e-3f64..10.0) {
        let kind = family_of(fam);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fit = LowRankFit::from_matrix(ModelFamily::new(kind), 5, 3, random_decision(&mut rng, kind, 5, 7, 3), 0.0).unwrap();
        let (lo, hi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
        prop_assert!(select_rank(&fit, hi).unwrap() <= select_rank(&fit, lo).unwrap());
    }

    #[test]
    fn rank_transform_range_order_and_invariance(values in prop::collection::vec(prop::option::weighted(0.8, -100.0f64..100.0), 1..30)) {
        let ranks = rank_transform(&values);
        let shifted: Vec<Option<f64>> = values.iter().map(|v| v.map(|x| x * x * x + 3.0 * x + 1.0)).collect();
        prop_assert_eq!(&ranks, &rank_transform(&shifted));
        for (i, (v, r)) in values.iter().zip(&ranks).enumerate() {
            prop_assert_eq!(v.is_some(), r.is_some());
            if let (Some(v), Some(r)) = (v, r) {
                prop_assert!((-0.5..=0.5).contains(r));
                for (w, s) in values.iter().zip(&ranks).skip(i + 1) {
                    if let (Some(w), Some(s)) = (w, s) {
                        if v < w { prop_assert!(r < s); }
                        if v == w { prop_assert_eq!(r, s); }
                    }
                }
            }
        }
    }

    #[test]
    fn archives_round_trip(seed in any::<u64>(), fam in 0usize..3, k in 0usize..4, zero_alpha in any::<bool>()) {
        let kind = family_of(fam);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fit = LowRankFit::from_matrix(ModelFamily::new(kind).with_zero_alpha(zero_alpha), 5, 3, random_decision(&mut rng, kind, 5, 6, 3), rng.gen()).unwrap();
        let archive = EstimateArchive { estimate: extract_factors(&fit, RankRule::Fixed(k)).unwrap(), provenance: Provenance::from_fit(&fit) };
        let dir = tempfile::tempdir().unwrap();
        save_estimate(&archive, dir.path()).unwrap();
        let back = load_estimate(dir.path()).unwrap();
        prop_assert_eq!(format!("{:?}", back), format!("{:?}", archive));
    }

    #[test]
    fn r2_invariant_to_sign_flips(seed in any::<u64>(), fam in 0usize..3, flip in 0usize..2) {
        let kind = family_of(fam);
        let panel = random_panel(seed, 5, 7, 3, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 5);
        let fit = LowRankFit::from_matrix(ModelFamily::new(kind), 5, 3, random_decision(&mut rng, kind, 5, 7, 3), 0.0).unwrap();
        let est = extract_factors(&fit, RankRule::Fixed(2)).unwrap();
        let flipped = flip_factor(&est, flip);
        let (s1, s2) = (in_sample_r2(&panel, &est).unwrap(), in_sample_r2(&panel, &flipped).unwrap());
        prop_assert!((s1.total - s2.total).abs() < 1e-12);
        prop_assert!((s1.ts_avg - s2.ts_avg).abs() < 1e-12);
        prop_assert!((s1.cs_avg - s2.cs_avg).abs() < 1e-12);
    }
}

fn flip_factor(est: &FactorEstimate, j: usize) -> FactorEstimate {
    let mut out = est.clone();
    match &mut out.b_hat {
        Loadings::Full(b) | Loadings::Homogeneous(b) => b.column_mut(j).neg_mut(),
        Loadings::Semiparametric { lambda, phi } => {
            lambda.column_mut(j).neg_mut();
            phi.column_mut(j).neg_mut();
        }
    }
    out.f_hat.column_mut(j).neg_mut();
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn cv_result_well_formed_and_reproducible(seed in any::<u64>(), fam in 0usize..3) {
        let kind = family_of(fam);
        let panel = random_panel(seed, 6, 8, 2, 0.1);
        let plan = CvPlan { n_folds: 3, grid: vec![0.0, 0.1, 0.5, 1.0], seed, warm_start: true };
        let a = cross_validate(&panel, ModelFamily::new(kind), &plan).unwrap();
        let b = cross_validate(&panel, ModelFamily::new(kind), &plan).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(plan.grid.contains(&a.chosen_c));
        prop_assert_eq!(a.per_c_mse.iter().map(|p| p.c).collect::<Vec<_>>(), plan.grid.clone());
    }
}
