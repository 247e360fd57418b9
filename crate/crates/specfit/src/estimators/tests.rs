use super::*;
use crate::simulate::{self, gen_mixtures, gen_sources, ShiftModel};
use crate::spectra::{Grid, MixtureSet, SourceLibrary, Spectrum};
use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn paper_iid_config(seed: u64) -> simulate::SimConfig {
    let mut cfg = simulate::tests::two_source_config(1000, seed);
    cfg.m_observations = 100;
    cfg.shift_model = ShiftModel::Iid {
        sigma: vec![1.0, 1.0],
    };
    cfg.noise_tau = 0.05;
    cfg
}

fn mean_abs_error(a_hat: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    (a_hat - truth).abs().sum() / (truth.nrows() * truth.ncols()) as f64
}

/// A single centered Gaussian source on an odd grid: the sampled signal is
/// exactly even around the middle index, so its derivative is orthogonal to
/// it on the grid up to rounding.
fn orthogonal_design_library(p: usize, width: f64) -> SourceLibrary {
    assert!(p % 2 == 1);
    let grid = Grid::new(0.0, 1.0, p).unwrap();
    let center = (p / 2) as f64;
    let s = Spectrum::from_fn(grid, |nu| (-(nu - center).powi(2) / (2.0 * width * width)).exp())
        .unwrap();
    SourceLibrary::new(vec![s]).unwrap()
}

// ---------------------------------------------------------------------------
// ols_fit / gls_fit
// ---------------------------------------------------------------------------

#[test]
fn ols_recovers_exact_mixtures() {
    let cfg = simulate::tests::two_source_config(400, 5);
    let lib = gen_sources(&cfg).unwrap();
    let (mix, truth) = gen_mixtures(&lib, &cfg).unwrap();
    let fit = ols_fit(&mix, &lib).unwrap();
    assert_relative_eq!(fit.a_hat, truth.a, max_relative = 1e-10);
    assert!(fit.converged);
    assert_eq!(fit.iterations, 1);
}

#[test]
fn ols_with_orthogonal_noise_is_unbiased() {
    let grid = Grid::new(0.0, 1.0, 64).unwrap();
    let s = Spectrum::from_fn(grid, |nu| (0.5 * nu).sin() + 2.0).unwrap();
    let lib = SourceLibrary::new(vec![s.clone()]).unwrap();
    // Build a perturbation, then project out the s component.
    let sv = DVector::from_column_slice(s.values());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let raw = DVector::from_fn(64, |_, _| rng.gen_range(-1.0..1.0));
    let e = &raw - &sv * (raw.dot(&sv) / sv.norm_squared());
    let x_row = &sv * 3.0 + e;
    let mix = MixtureSet::new(grid, DMatrix::from_fn(1, 64, |_, j| x_row[j])).unwrap();
    let fit = ols_fit(&mix, &lib).unwrap();
    assert_relative_eq!(fit.a_hat[(0, 0)], 3.0, max_relative = 1e-10);
}

#[test]
fn ols_matches_normal_equation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let grid = Grid::new(0.0, 1.0, 200).unwrap();
    let sources: Vec<Spectrum> = (0..3)
        .map(|k| {
            Spectrum::from_fn(grid, |nu| (0.03 * (k + 1) as f64 * nu).sin() + 0.1 * nu.cos())
                .unwrap()
        })
        .collect();
    let lib = SourceLibrary::new(sources).unwrap();
    let s = lib.source_matrix();
    let x = DMatrix::from_fn(5, 200, |_, _| rng.gen_range(-1.0..1.0));
    let mix = MixtureSet::new(grid, x.clone()).unwrap();
    let fit = ols_fit(&mix, &lib).unwrap();
    let oracle = &x * s.transpose() * (&s * s.transpose()).try_inverse().unwrap();
    assert_relative_eq!(fit.a_hat, oracle, max_relative = 1e-8);
}

#[test]
fn gls_with_identity_equals_ols_and_scale_invariance() {
    let cfg = simulate::tests::two_source_config(300, 7);
    let lib = gen_sources(&cfg).unwrap();
    let (mix, _) = gen_mixtures(&lib, &cfg).unwrap();
    let ols = ols_fit(&mix, &lib).unwrap();
    let eye = DMatrix::identity(300, 300);
    let gls = gls_fit(&mix, &lib, &eye).unwrap();
    assert!((&gls.a_hat - &ols.a_hat).amax() <= 1e-12);

    let gls4 = gls_fit(&mix, &lib, &(eye * 4.0)).unwrap();
    assert!((&gls4.a_hat - &ols.a_hat).amax() <= 1e-9);
}

#[test]
fn gls_diagonal_matches_weighted_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p = 80;
    let grid = Grid::new(0.0, 1.0, p).unwrap();
    let sources: Vec<Spectrum> = (0..2)
        .map(|k| Spectrum::from_fn(grid, |nu| ((k + 1) as f64 * 0.1 * nu).cos()).unwrap())
        .collect();
    let lib = SourceLibrary::new(sources).unwrap();
    let x = DMatrix::from_fn(3, p, |_, _| rng.gen_range(-1.0..1.0));
    let mix = MixtureSet::new(grid, x.clone()).unwrap();

    // Q = diag(1/w) makes GLS a weighted least squares with weights w.
    let w: Vec<f64> = (0..p).map(|_| rng.gen_range(0.5..3.0)).collect();
    let q = DMatrix::from_diagonal(&DVector::from_fn(p, |j, _| 1.0 / w[j]));
    let fit = gls_fit(&mix, &lib, &q).unwrap();

    let s = lib.source_matrix();
    let wd = DMatrix::from_diagonal(&DVector::from_vec(w));
    let oracle =
        &x * &wd * s.transpose() * (&s * &wd * s.transpose()).try_inverse().unwrap();
    assert_relative_eq!(fit.a_hat, oracle, max_relative = 1e-8);
}

#[test]
fn gls_rejects_indefinite_covariance() {
    let cfg = simulate::tests::two_source_config(50, 1);
    let lib = gen_sources(&cfg).unwrap();
    let (mix, _) = gen_mixtures(&lib, &cfg).unwrap();
    let mut q = DMatrix::identity(50, 50);
    q[(0, 0)] = -1.0;
    assert!(matches!(
        gls_fit(&mix, &lib, &q),
        Err(crate::Error::NotPositiveDefinite(_))
    ));
}

// ---------------------------------------------------------------------------
// agls_fit / agls_scale_fit
// ---------------------------------------------------------------------------

#[test]
fn agls_derivative_weights_vanish_without_distortion() {
    let cfg = simulate::tests::two_source_config(500, 13);
    let lib = gen_sources(&cfg).unwrap();
    let (mix, truth) = gen_mixtures(&lib, &cfg).unwrap();
    let fit = agls_fit(&mix, &lib, &EstimatorConfig::default()).unwrap();
    assert_relative_eq!(fit.a_hat, truth.a, max_relative = 1e-8);
    let dw = fit.deriv_weights.unwrap();
    assert!(dw.amax() <= 1e-8 * truth.a.amax());
}

#[test]
fn agls_recovers_exact_first_order_data() {
    // X constructed in the augmented row-span: x = sum a_j s_j + (a_j xi_j) s'_j.
    let cfg = simulate::tests::two_source_config(600, 17);
    let lib = gen_sources(&cfg).unwrap();
    let s = lib.source_matrix();
    let sd = lib.derivative_matrix();
    let m = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let a = DMatrix::from_fn(m, 2, |_, _| rng.gen_range(0.5..2.0));
    let xi = DMatrix::from_fn(m, 2, |_, _| rng.gen_range(-0.8..0.8));
    let x = &a * &s + a.component_mul(&xi) * &sd;
    let mix = MixtureSet::new(*lib.grid(), x).unwrap();
    let fit = agls_fit(&mix, &lib, &EstimatorConfig::default()).unwrap();
    assert_relative_eq!(fit.a_hat, a, max_relative = 1e-8);
    assert_relative_eq!(
        fit.deriv_weights.unwrap(),
        a.component_mul(&xi),
        max_relative = 1e-7
    );
    assert_relative_eq!(fit.xi_hat.unwrap(), xi, max_relative = 1e-7);
}

#[test]
fn agls_beats_ols_on_shifted_mixtures() {
    let cfg = paper_iid_config(21);
    let lib = gen_sources(&cfg).unwrap();
    let (mix, truth) = gen_mixtures(&lib, &cfg).unwrap();
    let ols = ols_fit(&mix, &lib).unwrap();
    let agls = agls_fit(&mix, &lib, &EstimatorConfig::default()).unwrap();
    let e_ols = mean_abs_error(&ols.a_hat, &truth.a);
    let e_agls = mean_abs_error(&agls.a_hat, &truth.a);
    assert!(e_agls < e_ols, "agls {e_agls} vs ols {e_ols}");
}

#[test]
fn agls_second_order_basis_is_accepted() {
    let cfg = simulate::tests::two_source_config(500, 23);
    let lib = gen_sources(&cfg).unwrap();
    let (mix, truth) = gen_mixtures(&lib, &cfg).unwrap();
    let cfg2 = EstimatorConfig {
        taylor_order: 2,
        ..EstimatorConfig::default()
    };
    let fit = agls_fit(&mix, &lib, &cfg2).unwrap();
    assert_relative_eq!(fit.a_hat, truth.a, max_relative = 1e-7);
}

#[test]
fn agls_names_collinear_pair_on_rank_failure() {
    // Two identical sources make the basis structurally rank deficient.
    let grid = Grid::new(0.0, 1.0, 100).unwrap();
    let s = Spectrum::from_fn(grid, |nu| (-(nu - 50.0).powi(2) / 200.0).exp()).unwrap();
    let lib = SourceLibrary::new(vec![s.clone(), s]).unwrap();
    let x = DMatrix::from_fn(2, 100, |_, j| lib.source(0).values()[j]);
    let mix = MixtureSet::new(grid, x).unwrap();
    match agls_fit(&mix, &lib, &EstimatorConfig::default()) {
        Err(crate::Error::RankDeficient { detail, .. }) => {
            assert!(detail.contains("source"), "{detail}");
            assert!(detail.contains("collinear"), "{detail}");
        }
        other => panic!("expected RankDeficient, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn agls_scale_no_distortion_gives_zero_derivative_weights() {
    let mut cfg = simulate::tests::two_source_config(600, 29);
    // Centered grid keeps the abscissa-weighted basis well scaled.
    cfg.grid = Grid::new(-300.0, 1.0, 600).unwrap();
    for list in cfg.peaks.iter_mut() {
        for pk in list.iter_mut() {
            pk.center -= 300.0;
        }
    }
    let lib = gen_sources(&cfg).unwrap();
    let (mix, truth) = gen_mixtures(&lib, &cfg).unwrap();
    let fit = agls_scale_fit(&mix, &lib, &EstimatorConfig::default()).unwrap();
    assert_relative_eq!(fit.a_hat, truth.a, max_relative = 1e-8);
    assert!(fit.deriv_weights.unwrap().amax() <= 1e-8);
    for v in fit.scale_hat.unwrap() {
        assert_relative_eq!(v, 1.0, epsilon = 1e-8);
    }
}

#[test]
fn agls_scale_recovers_exact_first_order_instance() {
    // Single source, x = a (s + delta * nu .* s'): both coefficients exact.
    let grid = Grid::new(-100.0, 1.0, 201).unwrap();
    let s = Spectrum::from_fn(grid, |nu| (-(nu).powi(2) / (2.0 * 400.0)).exp()).unwrap();
    let lib = SourceLibrary::new(vec![s]).unwrap();
    let a = 2.5;
    let delta = 0.07;
    let sv = lib.source_matrix();
    let sd = lib.derivative_matrix();
    let x = DMatrix::from_fn(1, 201, |_, j| {
        a * (sv[(0, j)] + delta * grid.abscissa(j) * sd[(0, j)])
    });
    let mix = MixtureSet::new(grid, x).unwrap();
    let fit = agls_scale_fit(&mix, &lib, &EstimatorConfig::default()).unwrap();
    assert_relative_eq!(fit.a_hat[(0, 0)], a, max_relative = 1e-8);
    assert_relative_eq!(fit.scale_hat.unwrap()[0], 1.0 + delta, max_relative = 1e-8);
}

// ---------------------------------------------------------------------------
// estimate_shifts
// ---------------------------------------------------------------------------

#[test]
fn shifts_are_zero_for_zero_residual() {
    let cfg = simulate::tests::two_source_config(300, 31);
    let lib = gen_sources(&cfg).unwrap();
    let (mix, truth) = gen_mixtures(&lib, &cfg).unwrap();
    let est = estimate_shifts(&mix, &truth.a, &lib).unwrap();
    assert!(est.xi.amax() <= 1e-9);
    assert!(est.degenerate_rows.is_empty());
}

#[test]
fn shifts_recover_planted_gamma_component() {
    // Residual built exactly from source 2's derivative row.
    let lib = orthogonal_two_source_library();
    let s = lib.source_matrix();
    let sd = lib.derivative_matrix();
    let a = DMatrix::from_element(1, 2, 2.0);
    let planted = 0.7;
    // x = a S + planted * (a_2 s'_2)
    let x = &a * &s
        + DMatrix::from_fn(1, s.ncols(), |_, j| planted * a[(0, 1)] * sd[(1, j)]);
    let mix = MixtureSet::new(*lib.grid(), x).unwrap();
    let est = estimate_shifts(&mix, &a, &lib).unwrap();
    assert_relative_eq!(est.xi[(0, 1)], planted, max_relative = 1e-8);
    assert!(est.xi[(0, 0)].abs() <= 1e-8);
}

/// Two well-separated Gaussian peaks: sources and derivatives are mutually
/// near-orthogonal, which makes planted-component recovery exact.
fn orthogonal_two_source_library() -> SourceLibrary {
    let grid = Grid::new(0.0, 1.0, 801).unwrap();
    let a = Spectrum::from_fn(grid, |nu| (-(nu - 200.0).powi(2) / (2.0 * 225.0)).exp()).unwrap();
    let b = Spectrum::from_fn(grid, |nu| (-(nu - 600.0).powi(2) / (2.0 * 225.0)).exp()).unwrap();
    SourceLibrary::new(vec![a, b]).unwrap()
}

#[test]
fn shifts_vanish_when_residual_is_orthogonal_to_gamma_rows() {
    let lib = orthogonal_two_source_library();
    let s = lib.source_matrix();
    let sd = lib.derivative_matrix();
    let a = DMatrix::from_element(1, 2, 1.0);
    // Perturbation orthogonal to both derivative rows.
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let mut e = DVector::from_fn(s.ncols(), |_, _| rng.gen_range(-1.0..1.0));
    for k in 0..2 {
        let g = sd.row(k).transpose();
        e -= &g * (e.dot(&g) / g.norm_squared());
    }
    let x = &a * &s + DMatrix::from_fn(1, s.ncols(), |_, j| e[j]);
    let mix = MixtureSet::new(*lib.grid(), x).unwrap();
    let est = estimate_shifts(&mix, &a, &lib).unwrap();
    assert!(est.xi.amax() <= 1e-8, "max shift {}", est.xi.amax());
}

#[test]
fn shifts_drop_sources_with_negligible_weight() {
    let lib = orthogonal_two_source_library();
    let s = lib.source_matrix();
    let a = DMatrix::from_row_slice(1, 2, &[1.0, 1e-12]);
    let x = &a * &s;
    let mix = MixtureSet::new(*lib.grid(), x).unwrap();
    let est = estimate_shifts(&mix, &a, &lib).unwrap();
    assert_eq!(est.xi[(0, 1)], 0.0);
    assert_eq!(est.degenerate_rows, vec![0]);
}

// ---------------------------------------------------------------------------
// agmle_hetero
// ---------------------------------------------------------------------------

#[test]
fn agmle_hetero_fixed_point_on_exact_data() {
    let cfg = simulate::tests::two_source_config(400, 41);
    let lib = gen_sources(&cfg).unwrap();
    let (mix, truth) = gen_mixtures(&lib, &cfg).unwrap();
    let fit = agmle_hetero(&mix, &lib, &EstimatorConfig::default()).unwrap();
    assert!(fit.converged);
    assert_eq!(fit.iterations, 1);
    assert_relative_eq!(fit.a_hat, truth.a, max_relative = 1e-8);
    assert!(fit.xi_hat.unwrap().amax() <= 1e-8);
    for s in fit.sigma_hat.unwrap() {
        assert!(s <= 1e-8);
    }
}

#[test]
fn agmle_hetero_on_paper_setting_estimates_sigma_and_beats_ols() {
    let cfg = paper_iid_config(43);
    let lib = gen_sources(&cfg).unwrap();
    let (mix, truth) = gen_mixtures(&lib, &cfg).unwrap();
    let ols = ols_fit(&mix, &lib).unwrap();
    let fit = agmle_hetero(&mix, &lib, &EstimatorConfig::default()).unwrap();
    assert!(fit.converged, "no convergence in {} iterations", fit.iterations);
    let sigma = fit.sigma_hat.clone().unwrap();
    for s in &sigma {
        assert!((0.6..=1.4).contains(s), "sigma_hat {s} outside [0.6, 1.4]");
    }
    let e_mle = mean_abs_error(&fit.a_hat, &truth.a);
    let e_ols = mean_abs_error(&ols.a_hat, &truth.a);
    assert!(e_mle < e_ols, "mle {e_mle} vs ols {e_ols}");
    assert!(fit.ci_half_width.unwrap().iter().all(|&w| w >= 0.0));
    assert!(fit.final_loglik.unwrap().is_finite());
}

#[test]
fn agmle_hetero_sigma_tracks_planted_shift_spread() {
    // Single centered source (s orthogonal to s'), planted i.i.d. shifts,
    // no noise: sigma_hat stays within 15% of the realized shift spread.
    let lib = orthogonal_design_library(801, 30.0);
    let grid = *lib.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let m = 200;
    let sigma_true = 0.5;
    let mut xi = Vec::with_capacity(m);
    let mut data = DMatrix::zeros(m, 801);
    for i in 0..m {
        let shift: f64 = rng.gen_range(-1.0..1.0) * sigma_true * 1.7320508;
        xi.push(shift);
        let shifted = lib.source(0).shift_resample(shift).unwrap();
        for j in 0..801 {
            data[(i, j)] = 2.0 * shifted.values()[j];
        }
    }
    let mix = MixtureSet::new(grid, data).unwrap();
    let fit = agmle_hetero(&mix, &lib, &EstimatorConfig::default()).unwrap();
    let planted_sd = (xi.iter().map(|x| x * x).sum::<f64>() / m as f64).sqrt();
    let sigma_hat = fit.sigma_hat.unwrap()[0];
    assert!(
        (sigma_hat - planted_sd).abs() <= 0.15 * planted_sd,
        "sigma_hat {sigma_hat} vs planted spread {planted_sd}"
    );
}

// ---------------------------------------------------------------------------
// ar1_regress / agmle_ar1
// ---------------------------------------------------------------------------

#[test]
fn ar1_regress_clamps_perfect_correlation() {
    assert_eq!(ar1_regress(&[2.0; 50]), 0.99);
    let alternating: Vec<f64> = (0..50).map(|i| if i % 2 == 0 { 1.5 } else { -1.5 }).collect();
    assert_eq!(ar1_regress(&alternating), -0.99);
}

#[test]
fn ar1_regress_degenerate_inputs_return_zero() {
    assert_eq!(ar1_regress(&[0.0; 10]), 0.0);
    assert_eq!(ar1_regress(&[1.0, 2.0]), 0.0);
}

#[test]
fn ar1_regress_is_consistent_on_simulated_series() {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let rho = 0.5;
    let mut prev = 0.0;
    let col: Vec<f64> = (0..5000)
        .map(|_| {
            let u: f64 = rng.gen_range(-1.0..1.0) * 1.7320508;
            let x = rho * prev + u;
            prev = x;
            x
        })
        .collect();
    let r = ar1_regress(&col);
    assert!((0.45..=0.55).contains(&r), "rho_hat {r}");
}

#[test]
fn agmle_ar1_with_zero_rho_override_matches_hetero() {
    let mut cfg = paper_iid_config(59);
    cfg.grid = Grid::new(0.0, 1.0, 150).unwrap();
    let scale = 0.15;
    for list in cfg.peaks.iter_mut() {
        for pk in list.iter_mut() {
            pk.center *= scale;
            pk.width *= scale;
        }
    }
    cfg.m_observations = 40;
    let lib = gen_sources(&cfg).unwrap();
    let (mix, _) = gen_mixtures(&lib, &cfg).unwrap();
    let est_cfg = EstimatorConfig {
        rho_override: Some(0.0),
        ..EstimatorConfig::default()
    };
    let ar = agmle_ar1(&mix, &lib, &est_cfg).unwrap();
    let hetero = agmle_hetero(&mix, &lib, &EstimatorConfig::default()).unwrap();
    assert!(
        (&ar.a_hat - &hetero.a_hat).amax() <= 1e-6,
        "max diff {}",
        (&ar.a_hat - &hetero.a_hat).amax()
    );
}

#[test]
fn agmle_ar1_recovers_planted_first_order_shifts() {
    // Exact first-order AR data on an orthogonal design, no noise.
    let lib = orthogonal_design_library(401, 20.0);
    let s = lib.source_matrix();
    let sd = lib.derivative_matrix();
    let m = 30;
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let rho = 0.6;
    let mut prev = 0.0;
    let xi_col: Vec<f64> = (0..m)
        .map(|_| {
            let u: f64 = rng.gen_range(-0.5..0.5);
            let x = rho * prev + u;
            prev = x;
            x
        })
        .collect();
    let a = DMatrix::from_element(m, 1, 1.5);
    let x = DMatrix::from_fn(m, 401, |i, j| {
        a[(i, 0)] * s[(0, j)] + a[(i, 0)] * xi_col[i] * sd[(0, j)]
    });
    let mix = MixtureSet::new(*lib.grid(), x).unwrap();
    let fit = agmle_ar1(&mix, &lib, &EstimatorConfig::default()).unwrap();
    let xi_hat = fit.xi_hat.unwrap();
    for i in 0..m {
        assert_relative_eq!(xi_hat[(i, 0)], xi_col[i], epsilon = 1e-6);
    }
}

// ---------------------------------------------------------------------------
// loglik
// ---------------------------------------------------------------------------

#[test]
fn loglik_reduces_to_residual_norm_under_unit_covariance() {
    let cfg = simulate::tests::two_source_config(100, 67);
    let lib = gen_sources(&cfg).unwrap();
    let (mix, truth) = gen_mixtures(&lib, &cfg).unwrap();
    let ll = loglik(&truth.a, &[0.0, 0.0], 1.0, None, &mix, &lib).unwrap();
    let resid = mix.data() - &truth.a * lib.source_matrix();
    let mp = (mix.m() * mix.p()) as f64;
    let expected = -0.5 * resid.norm_squared() - 0.5 * mp * (2.0 * std::f64::consts::PI).ln();
    assert_relative_eq!(ll, expected, max_relative = 1e-10);
}

#[test]
fn loglik_matches_brute_force_density_oracle() {
    // m = 2, p = 3, n = 1: assemble the 6x6 covariance explicitly and
    // evaluate the multivariate normal log-density directly.
    let grid = Grid::new(0.0, 1.0, 3).unwrap();
    let s = Spectrum::new(grid, vec![1.0, 2.0, 1.5]).unwrap();
    let lib = SourceLibrary::new(vec![s]).unwrap();
    let x = DMatrix::from_row_slice(2, 3, &[2.1, 4.2, 3.0, 1.9, 3.8, 3.1]);
    let mix = MixtureSet::new(grid, x.clone()).unwrap();
    let a = DMatrix::from_column_slice(2, 1, &[2.0, 1.9]);
    let sigma = [0.4];
    let tau = 0.3;

    let sd = lib.derivative_matrix();
    let resid = &x - &a * lib.source_matrix();
    let r = DVector::from_fn(6, |t, _| resid[(t / 3, t % 3)]);
    let mp = 6.0;

    // Heteroscedastic: block diagonal.
    let mut v = DMatrix::zeros(6, 6);
    for i in 0..2 {
        for r1 in 0..3 {
            for c1 in 0..3 {
                v[(i * 3 + r1, i * 3 + c1)] = sigma[0] * sigma[0]
                    * a[(i, 0)]
                    * a[(i, 0)]
                    * sd[(0, r1)]
                    * sd[(0, c1)]
                    + if r1 == c1 { tau * tau } else { 0.0 };
            }
        }
    }
    let oracle = -0.5 * v.determinant().ln()
        - 0.5 * r.dot(&(v.clone().try_inverse().unwrap() * &r))
        - 0.5 * mp * (2.0 * std::f64::consts::PI).ln();
    let got = loglik(&a, &sigma, tau, None, &mix, &lib).unwrap();
    assert_relative_eq!(got, oracle, max_relative = 1e-8);

    // AR(1): add the cross-row blocks.
    let rho = [0.5];
    let f = sigma[0] * sigma[0] / (1.0 - rho[0] * rho[0]);
    let mut var = DMatrix::zeros(6, 6);
    for i in 0..2 {
        for j in 0..2 {
            let c = f * a[(i, 0)] * a[(j, 0)] * rho[0].powi((i as i32 - j as i32).abs());
            for r1 in 0..3 {
                for c1 in 0..3 {
                    var[(i * 3 + r1, j * 3 + c1)] = c * sd[(0, r1)] * sd[(0, c1)]
                        + if i == j && r1 == c1 { tau * tau } else { 0.0 };
                }
            }
        }
    }
    let oracle_ar = -0.5 * var.determinant().ln()
        - 0.5 * r.dot(&(var.clone().try_inverse().unwrap() * &r))
        - 0.5 * mp * (2.0 * std::f64::consts::PI).ln();
    let got_ar = loglik(&a, &sigma, tau, Some(&rho), &mix, &lib).unwrap();
    assert_relative_eq!(got_ar, oracle_ar, max_relative = 1e-8);
}

#[test]
fn loglik_doubling_tau_with_zero_residual_drops_by_mp_ln2() {
    let cfg = simulate::tests::two_source_config(60, 71);
    let lib = gen_sources(&cfg).unwrap();
    let (mix, truth) = gen_mixtures(&lib, &cfg).unwrap();
    let mp = (mix.m() * mix.p()) as f64;
    let l1 = loglik(&truth.a, &[0.0, 0.0], 0.2, None, &mix, &lib).unwrap();
    let l2 = loglik(&truth.a, &[0.0, 0.0], 0.4, None, &mix, &lib).unwrap();
    // Residual is exactly zero, so only the log-determinant changes.
    assert_relative_eq!(l1 - l2, mp * 2.0_f64.ln(), max_relative = 1e-9);
}

// ---------------------------------------------------------------------------
// Cross-cutting invariants
// ---------------------------------------------------------------------------

#[test]
fn estimators_are_deterministic() {
    let cfg = paper_iid_config(73);
    let lib = gen_sources(&cfg).unwrap();
    let (mix, _) = gen_mixtures(&lib, &cfg).unwrap();
    let f1 = agmle_hetero(&mix, &lib, &EstimatorConfig::default()).unwrap();
    let f2 = agmle_hetero(&mix, &lib, &EstimatorConfig::default()).unwrap();
    assert_eq!(f1.a_hat, f2.a_hat);
    assert_eq!(f1.sigma_hat, f2.sigma_hat);
    assert_eq!(f1.final_loglik, f2.final_loglik);
}

#[test]
fn iteration_count_respects_cap() {
    let cfg = paper_iid_config(79);
    let lib = gen_sources(&cfg).unwrap();
    let (mix, _) = gen_mixtures(&lib, &cfg).unwrap();
    let est_cfg = EstimatorConfig {
        max_iterations: 2,
        tol: 1e-15,
        ..EstimatorConfig::default()
    };
    let fit = agmle_hetero(&mix, &lib, &est_cfg).unwrap();
    assert!(fit.iterations <= 2);
    assert!(!fit.converged);
}
