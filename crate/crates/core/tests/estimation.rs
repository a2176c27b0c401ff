use drdid::estimator::{fit_response, pseudo_outcome, FitOptions, Penalty, SieveDesign};
use drdid::logistic::{fit_l1_logistic, fit_logistic_mle, sigmoid};
use drdid::nuisance::{cross_fit, LearnerSpec, NuisanceFit};
use drdid::sim::{gen_sample, DgpConfig, DgpFamily, RepEstimator, SemiDidRep};
use drdid::{fit_semidid, Error, Sample};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

#[test]
fn true_nuisances_recover_effect_slopes() {
    let cfg = DgpConfig::new(DgpFamily::Dgp1, 5000, 10, 5);
    let (sample, truth) = gen_sample(&cfg, 0).unwrap();
    let nuisance = NuisanceFit::from_truth(&sample, &truth, 0.01).unwrap();
    let ps = pseudo_outcome(&sample, &nuisance).unwrap();
    let design = SieveDesign::new(&sample, 8).unwrap();
    let fit = fit_response(&sample, &design, &ps.s_hat, &FitOptions { degree: 8, penalty: Penalty::Fixed(0.0), tol: 1e-10 }).unwrap();
    for j in 0..10 {
        assert!((fit.beta_hat[j] - truth.beta0[j]).abs() < 0.1, "coordinate {j}: {} vs {}", fit.beta_hat[j], truth.beta0[j]);
    }
}

#[test]
fn forced_half_propensity_gives_plus_minus_two() {
    let x = DMatrix::from_fn(6, 1, |i, _| i as f64);
    let z = DVector::from_fn(6, |i, _| (i as f64).sin());
    let d = vec![true, false, true, false, true, false];
    let sample = Sample::new(DVector::repeat(6, 1.0), d.clone(), x, z).unwrap();
    let nuisance = NuisanceFit::new(vec![0.5; 6], vec![0.0; 6], vec![0.0; 6], vec![0, 1, 0, 1, 0, 1], 0.01).unwrap();
    let ps = pseudo_outcome(&sample, &nuisance).unwrap();
    for (i, &t) in d.iter().enumerate() {
        assert_eq!(ps.s_hat[i], if t { 2.0 } else { -2.0 });
    }
}

#[test]
fn penalized_propensity_tracks_truth() {
    let cfg = DgpConfig::new(DgpFamily::Dgp1, 2000, 10, 6);
    let (sample, truth) = gen_sample(&cfg, 0).unwrap();
    let nf = cross_fit(&sample, &LearnerSpec::default_propensity(), &LearnerSpec::default_outcome(), 2, 0.01, 9).unwrap();
    let err: f64 = (0..sample.n())
        .map(|i| {
            let row: Vec<f64> = sample.x().row(i).iter().copied().collect();
            (nf.pi_hat[i] - truth.pi0(&row, sample.z()[i])).abs()
        })
        .sum::<f64>()
        / sample.n() as f64;
    assert!(err <= 0.08, "mean absolute propensity error {err}");
}

#[test]
fn light_penalty_logistic_agrees_with_maximum_likelihood() {
    let theta = [1.0, -0.5, 0.5, 0.0, 0.25];
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let x = DMatrix::from_fn(200, 5, |_, _| rng.sample(StandardNormal));
    let d: Vec<bool> = (0..200)
        .map(|i| {
            let eta: f64 = (0..5).map(|j| x[(i, j)] * theta[j]).sum();
            rng.random::<f64>() < sigmoid(eta)
        })
        .collect();
    let mle = fit_logistic_mle(&x, &d).unwrap();
    let pen = fit_l1_logistic(&x, &d, 0.005).unwrap();
    let truth = DVector::from_row_slice(&theta);
    assert!((&mle.coef - &truth).norm() < 0.5, "oracle far from truth: {}", (&mle.coef - &truth).norm());
    assert!((&pen.coef - &truth).norm() < 0.3 + (&mle.coef - &truth).norm());
    assert!((&pen.coef - &mle.coef).norm() < 0.3);
}

#[test]
fn out_of_fold_values_ignore_the_row_itself() {
    let cfg = DgpConfig::new(DgpFamily::Dgp1, 200, 8, 7);
    let (sample, _) = gen_sample(&cfg, 0).unwrap();
    let (prop, outc) = (LearnerSpec::default_propensity(), LearnerSpec::default_outcome());
    let base = cross_fit(&sample, &prop, &outc, 2, 0.01, 3).unwrap();
    let again = cross_fit(&sample, &prop, &outc, 2, 0.01, 3).unwrap();
    assert_eq!(base, again);

    // a wild outcome in row 0 may only move predictions outside its fold
    let mut dy = sample.dy().clone();
    dy[0] += 1e3;
    let bumped = Sample::new(dy, sample.d().to_vec(), sample.x().clone(), sample.z().clone()).unwrap();
    let moved = cross_fit(&bumped, &prop, &outc, 2, 0.01, 3).unwrap();
    assert_eq!(moved.fold_id, base.fold_id);
    let k = base.fold_id[0];
    let mut changed_elsewhere = false;
    for i in 0..sample.n() {
        if base.fold_id[i] == k {
            assert_eq!(moved.phi1_hat[i], base.phi1_hat[i]);
            assert_eq!(moved.phi0_hat[i], base.phi0_hat[i]);
            assert_eq!(moved.pi_hat[i], base.pi_hat[i]);
        } else {
            changed_elsewhere |= moved.phi1_hat[i] != base.phi1_hat[i] || moved.phi0_hat[i] != base.phi0_hat[i];
        }
    }
    assert!(changed_elsewhere);
}

#[test]
fn treated_changes_follow_the_treated_trend() {
    let cfg = DgpConfig::new(DgpFamily::Dgp1, 100_000, 15, 10);
    let (sample, truth) = gen_sample(&cfg, 0).unwrap();
    let resid: Vec<f64> = (0..sample.n())
        .filter(|&i| sample.d()[i])
        .map(|i| {
            let row: Vec<f64> = sample.x().row(i).iter().copied().collect();
            sample.dy()[i] - truth.phi1(&row, sample.z()[i])
        })
        .collect();
    let m = resid.len() as f64;
    let mean = resid.iter().sum::<f64>() / m;
    let sd = (resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
    assert!(mean.abs() < 3.0 * sd / m.sqrt(), "mean {mean}, se {}", sd / m.sqrt());
}

#[test]
fn effect_function_matches_direct_formula() {
    let cfg = DgpConfig::new(DgpFamily::Dgp2, 50, 20, 0);
    let truth = cfg.truth();
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    for _ in 0..100 {
        let x: Vec<f64> = (0..20).map(|_| rng.sample(StandardNormal)).collect();
        let z: f64 = rng.sample(StandardNormal);
        let direct: f64 = (0..15).map(|i| x[i] / (i + 1) as f64).sum::<f64>() + z.exp();
        assert!((truth.att(&x, z) - direct).abs() <= 1e-12 * direct.abs().max(1.0));
    }
}

#[test]
fn baseline_is_infeasible_without_enough_rows() {
    let cfg = DgpConfig::new(DgpFamily::Dgp1, 200, 500, 1);
    let (sample, _) = gen_sample(&cfg, 0).unwrap();
    assert!(matches!(fit_semidid(&sample, 8), Err(Error::SemiDidInfeasible { .. })));
    assert!(SemiDidRep { degree: 8 }.check(&cfg).is_err());
    let ok = DgpConfig::new(DgpFamily::Dgp1, 500, 10, 1);
    assert!(SemiDidRep { degree: 8 }.check(&ok).is_ok());
}
