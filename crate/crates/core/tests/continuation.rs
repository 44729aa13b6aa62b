use openrdm::continuation::*;

fn grid1(lo: f64, hi: f64, n: usize) -> Grid {
    Grid::spanning(&[lo], &[hi], &[n]).unwrap()
}

fn gaussian_error(step_fraction: f64) -> f64 {
    let f = |x: &[f64]| (-x[0] * x[0]).exp();
    let samples = SampledFunction::from_fn(grid1(0.0, 1.0, 101), f).unwrap();
    let params = ContinuationParams::new(10, step_fraction);
    let r = continue_along_path(
        &samples,
        &grid1(1.0, 2.0, 101),
        &[vec![0.5], vec![2.0]],
        &params,
    )
    .unwrap();
    r.values
        .rows()
        .map(|(x, v)| (v - f(&x)).abs() / f(&x))
        .fold(0.0, f64::max)
}

#[test]
fn halving_the_step_fraction_never_doubles_the_error() {
    let errors: Vec<f64> = [0.5, 0.25, 0.125, 0.0625, 0.03125]
        .iter()
        .map(|&s| gaussian_error(s))
        .collect();
    for w in errors.windows(2) {
        assert!(w[1] <= 2.0 * w[0], "{errors:?}");
    }
    assert!(errors[4] < errors[0], "{errors:?}");
}

#[test]
fn refit_in_continued_region_matches_derivatives() {
    let d = grid1(0.0, 1.0, 101);
    let u = grid1(1.0, 2.0, 101);
    let params = ContinuationParams::new(10, 0.5);
    type Real = fn(f64) -> f64;
    let cases: [(Real, [Real; 5]); 2] = [
        (
            f64::sin,
            [f64::sin, f64::cos, |x| -x.sin(), |x| -x.cos(), f64::sin],
        ),
        (f64::exp, [f64::exp; 5]),
    ];
    for (f, derivs) in cases {
        let samples = SampledFunction::from_fn(d.clone(), |x| f(x[0])).unwrap();
        let r = continue_along_path(&samples, &u, &[vec![0.5], vec![2.0]], &params).unwrap();
        let at = 1.25;
        let model = fit_taylor(&r.values, &[at], &FitOptions::new(10)).unwrap();
        for (k, df) in derivs.iter().enumerate() {
            let got = model.derivative(&MultiIndex::new(vec![k as u32]));
            assert!(
                (got - df(at)).abs() < 1e-4,
                "order {k}: {got} vs {}",
                df(at)
            );
        }
    }
}

#[test]
fn identical_samples_continue_identically() {
    let f = SampledFunction::from_fn(grid1(0.0, 1.0, 101), |x| (2.0 * x[0]).cos()).unwrap();
    let report = certify_uniqueness(
        &f,
        &f.clone(),
        &grid1(1.0, 3.0, 51),
        &[vec![vec![0.5], vec![3.0]]],
        &ContinuationParams::new(10, 0.5),
        1e-9,
    )
    .unwrap();
    assert!(report.agree_on_d);
    assert!(report.max_diff_on_u.unwrap() < 1e-9);
}

#[test]
fn disagreement_on_d_is_reported_before_continuing() {
    let d = grid1(0.0, 1.0, 101);
    let f = SampledFunction::from_fn(d.clone(), |x| x[0].sin()).unwrap();
    let g = SampledFunction::from_fn(d, |x| x[0].sin() + 1e-3 * x[0].powi(3)).unwrap();
    let report = certify_uniqueness(
        &f,
        &g,
        &grid1(1.0, 3.0, 51),
        &[vec![vec![0.5], vec![3.0]]],
        &ContinuationParams::new(10, 0.5),
        1e-9,
    )
    .unwrap();
    assert!(!report.agree_on_d);
    assert!((report.max_diff_on_d - 1e-3).abs() < 1e-12);
    assert!(report.max_diff_on_u.is_none());
    assert!(report.steps_f.is_empty());
}

#[test]
fn both_fit_methods_recover_exponential_series() {
    // finite differences of order 8 need a coarse grid to stay above roundoff
    for (method, n) in [
        (FitMethod::LeastSquares, 201),
        (FitMethod::FiniteDifference, 21),
    ] {
        let samples = SampledFunction::from_fn(grid1(-1.0, 1.0, n), |x| x[0].exp()).unwrap();
        let opts = FitOptions {
            max_order: 8,
            method,
        };
        let model = fit_taylor(&samples, &[0.0], &opts).unwrap();
        let mut factorial = 1.0;
        for k in 0..=8u32 {
            if k > 0 {
                factorial *= k as f64;
            }
            let c = model.coeff(&MultiIndex::new(vec![k]));
            assert!(
                (c - 1.0 / factorial).abs() < 1e-6,
                "{method:?} order {k}: {c}"
            );
        }
    }
}

#[test]
fn radius_estimate_tracks_distance_to_a_real_pole() {
    let ratio = |pole: f64| {
        let samples =
            SampledFunction::from_fn(grid1(0.0, 1.0, 101), |x| 1.0 / (pole - x[0])).unwrap();
        let model = fit_taylor(&samples, &[0.5], &FitOptions::new(10)).unwrap();
        model.raw_radius / (pole - 0.5)
    };
    for pole in [1.2, 1.5, 2.5] {
        let r = ratio(pole);
        assert!((0.8..=1.2).contains(&r), "pole {pole}: ratio {r}");
    }
    // a pole at the stencil edge spoils the fit; the estimate must stay on the safe side
    assert!(ratio(1.0005) < 1.0);
}

#[test]
fn two_dimensional_walk_with_two_paths() {
    let f = |x: &[f64]| (x[0] + 0.3 * x[1]).cos();
    let d = Grid::spanning(&[0.0, 0.0], &[1.0, 1.0], &[41, 41]).unwrap();
    let u = Grid::spanning(&[1.0, 0.0], &[1.5, 1.0], &[11, 21]).unwrap();
    let samples = SampledFunction::from_fn(d, f).unwrap();
    let paths = vec![
        vec![vec![0.5, 0.25], vec![1.5, 0.25]],
        vec![vec![0.5, 0.75], vec![1.5, 0.75]],
    ];
    let r = continue_along_paths(&samples, &u, &paths, &ContinuationParams::new(10, 0.5)).unwrap();
    let err = r
        .values
        .rows()
        .map(|(x, v)| (v - f(&x)).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-4, "{err}");
    assert!(r.steps.iter().all(|s| s.radius > 0.0 && s.trusted > 0.0));
}
