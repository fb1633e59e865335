use mega_core::cohort::{CohortTable, Column};
use mega_core::sem::{
    build_mimic, fit_sem, latent_scores, parse_model_spec, rescale_reference, LatentBlock, ScoreMode, SemOptions,
    SemSe, Structural,
};
use mega_core::simulator::{simulate_clock_panel, SimConfig};
use mega_core::MegaError;

const CLOCKS: [&str; 4] = ["clock_horvath", "clock_hannum", "clock_phenoage", "clock_grimage"];

fn clock_model(covariates: &[&str]) -> mega_core::sem::SemModel {
    build_mimic(
        vec![LatentBlock::new("EA", &CLOCKS, CLOCKS[0])],
        Structural::LatentOnCovariates {
            covariates: covariates.iter().map(|s| s.to_string()).collect(),
        },
    )
    .unwrap()
}

fn corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

fn hidden(table: &CohortTable, name: &str) -> Vec<f64> {
    table.numeric(name).unwrap()
}

#[test]
fn noiseless_data_give_the_exact_fit() {
    let mut cfg = SimConfig::new(3);
    cfg.n = 300;
    cfg.loadings = vec![1.0; 4];
    cfg.intercepts = vec![0.0; 4];
    cfg.error_sds = vec![0.0; 4];
    cfg.gamma = vec![0.5];
    cfg.age_sd = 0.0;
    cfg.omega_sd = 0.0;
    let data = simulate_clock_panel(&cfg).unwrap();
    let fit = fit_sem(&clock_model(&["x1"]), &data, &SemOptions::new(1)).unwrap();
    assert!(fit.exact_fit);
    assert!(fit.loglik.is_infinite());
    for l in fit.loadings("EA").unwrap() {
        assert!((l - 1.0).abs() < 1e-12, "{l}");
    }
    assert!((fit.gamma("EA", "x1").unwrap() - 0.5).abs() < 1e-12);

    let scores = latent_scores(&fit, "EA", &data, ScoreMode::RegressionScore).unwrap();
    for (s, t) in scores.iter().zip(hidden(&data, "ea_star")) {
        assert!((s.unwrap() - t).abs() < 1e-9);
    }
}

#[test]
fn zero_noise_with_latent_disturbance_recovers_the_latent() {
    let mut cfg = SimConfig::new(4);
    cfg.n = 300;
    cfg.loadings = vec![1.0, 0.8, 1.2, 0.9];
    cfg.error_sds = vec![0.0; 4];
    cfg.gamma = vec![0.5];
    cfg.age_sd = 0.0;
    let data = simulate_clock_panel(&cfg).unwrap();
    let fit = fit_sem(&clock_model(&["x1"]), &data, &SemOptions::new(1)).unwrap();
    assert!(fit.exact_fit);
    for (l, t) in fit.loadings("EA").unwrap().iter().zip(&cfg.loadings) {
        assert!((l - t).abs() < 1e-9, "{l} vs {t}");
    }
    let scores = latent_scores(&fit, "EA", &data, ScoreMode::RegressionScore).unwrap();
    for (s, t) in scores.iter().zip(hidden(&data, "ea_star")) {
        assert!((s.unwrap() - t).abs() < 1e-8);
    }
}

#[test]
fn collinear_indicators_beyond_the_exact_case_are_rejected() {
    let mut cfg = SimConfig::new(5);
    cfg.n = 200;
    cfg.error_sds = vec![0.0, 0.0, 1.0, 1.0];
    let data = simulate_clock_panel(&cfg).unwrap();
    // Two indicators share the latent without noise: rank drops but stays above one.
    let dup = data.column("clock_horvath").unwrap().values().to_vec();
    let data = data
        .with_column(Column::continuous("dup", dup.iter().map(|v| v.map(|x| 2.0 * x + 1.0)).collect()))
        .unwrap();
    let model = build_mimic(
        vec![LatentBlock::new("EA", &["clock_horvath", "clock_hannum", "clock_phenoage", "dup"], "clock_horvath")],
        Structural::LatentOnCovariates {
            covariates: vec!["x1".into()],
        },
    )
    .unwrap();
    let err = fit_sem(&model, &data, &SemOptions::new(1)).unwrap_err();
    assert!(matches!(err, MegaError::RankDeficientCovariance(_)), "{err}");
}

#[test]
fn recovery_gradient_and_invariants_on_a_large_sample() {
    let mut cfg = SimConfig::new(11);
    cfg.n = 20_000;
    cfg.error_sds = vec![1.0; 4];
    let data = simulate_clock_panel(&cfg).unwrap();
    let model = clock_model(&["age_years", "x1", "x2"]);
    let fit = fit_sem(&model, &data, &SemOptions::new(7)).unwrap();
    assert!(fit.convergence.converged);
    assert!(fit.convergence.gradient_norm < 1e-6);
    assert!(fit.gradient_check() < 1e-5);
    let truth = [
        ("lambda:EA:clock_hannum", 0.8),
        ("lambda:EA:clock_phenoage", 1.2),
        ("lambda:EA:clock_grimage", 0.9),
        ("gamma:EA:age_years", 1.0),
        ("gamma:EA:x1", 0.5),
        ("gamma:EA:x2", -0.3),
        ("psi:EA", 1.0),
        ("theta:clock_horvath", 1.0),
        ("theta:clock_grimage", 1.0),
    ];
    for (name, t) in truth {
        let p = fit.param(name).unwrap();
        assert!((p.value - t).abs() < 3.0 * p.se, "{name}: {} ({}) vs {t}", p.value, p.se);
    }

    // Reduced form equals lambda * gamma.
    let pi = fit.reduced_form();
    for (k, l) in fit.loadings("EA").unwrap().iter().enumerate() {
        for q in 0..3 {
            assert!((pi[(k, q)] - l * fit.matrices.gamma[(0, q)]).abs() < 1e-12);
        }
    }

    // Monotone likelihood along the accepted steps.
    assert!(fit.convergence.trace.windows(2).all(|w| w[1] >= w[0] - 1e-9));

    // Rescaling keeps the likelihood; scores follow the reference clock's units.
    let g = rescale_reference(&fit, "clock_grimage").unwrap();
    let p = rescale_reference(&fit, "clock_phenoage").unwrap();
    assert!((g.loglik - fit.loglik).abs() <= 1e-10 * fit.loglik.abs());
    assert!((p.loglik - fit.loglik).abs() <= 1e-10 * fit.loglik.abs());
    let sd = |f: &mega_core::sem::SemFit| {
        let s: Vec<f64> = latent_scores(f, "EA", &data, ScoreMode::LinearPrediction)
            .unwrap()
            .into_iter()
            .map(Option::unwrap)
            .collect();
        let m = s.iter().sum::<f64>() / s.len() as f64;
        (s.iter().map(|x| (x - m).powi(2)).sum::<f64>() / s.len() as f64).sqrt()
    };
    assert!(sd(&p) > sd(&g));

    // Regression scores track the latent better than any clock.
    let ea = hidden(&data, "ea_star");
    let rs: Vec<f64> = latent_scores(&fit, "EA", &data, ScoreMode::RegressionScore)
        .unwrap()
        .into_iter()
        .map(Option::unwrap)
        .collect();
    let best_clock = CLOCKS
        .iter()
        .map(|c| corr(&data.numeric(c).unwrap(), &ea))
        .fold(f64::MIN, f64::max);
    assert!(corr(&rs, &ea) > best_clock);
}

#[test]
fn rescaling_a_two_indicator_fit() {
    let mut cfg = SimConfig::new(21);
    cfg.n = 4000;
    cfg.clock_names = vec!["c1".into(), "c2".into()];
    cfg.loadings = vec![1.0, 2.0];
    cfg.intercepts = vec![0.0, 0.0];
    cfg.error_sds = vec![1.0, 1.0];
    cfg.gamma = vec![0.5];
    cfg.age_sd = 0.0;
    let data = simulate_clock_panel(&cfg).unwrap();
    let model = build_mimic(
        vec![LatentBlock::new("EA", &["c1", "c2"], "c1")],
        Structural::LatentOnCovariates {
            covariates: vec!["x1".into()],
        },
    )
    .unwrap();
    assert_eq!(model.df, 0);
    let fit = fit_sem(&model, &data, &SemOptions::new(2)).unwrap();
    let c = fit.loading("c2").unwrap();
    let r = rescale_reference(&fit, "c2").unwrap();
    assert!((r.loading("c1").unwrap() - 1.0 / c).abs() < 1e-12);
    assert_eq!(r.loading("c2").unwrap(), 1.0);
    assert!((r.gamma("EA", "x1").unwrap() - c * fit.gamma("EA", "x1").unwrap()).abs() < 1e-12);
    assert!((r.psi("EA").unwrap() - c * c * fit.psi("EA").unwrap()).abs() < 1e-12);
    assert!((r.loglik - fit.loglik).abs() <= 1e-10 * fit.loglik.abs());
    // With c near 2: c1 loading near 0.5, gamma doubled, latent variance times four.
    assert!((r.loading("c1").unwrap() - 0.5).abs() < 0.05);
}

#[test]
fn zero_loading_reference_is_rejected() {
    let mut cfg = SimConfig::new(22);
    cfg.n = 500;
    let data = simulate_clock_panel(&cfg).unwrap();
    let fit = fit_sem(&clock_model(&["x1", "x2"]), &data, &SemOptions::new(1)).unwrap();
    let mut zeroed = fit.clone();
    zeroed.matrices.lambda[(2, 0)] = 0.0;
    assert!(rescale_reference(&zeroed, "clock_phenoage").is_err());
    assert!(rescale_reference(&fit, "x1").is_err());
}

#[test]
fn permuting_rows_leaves_estimates_unchanged() {
    let mut cfg = SimConfig::new(31);
    cfg.n = 800;
    let data = simulate_clock_panel(&cfg).unwrap();
    let model = clock_model(&["x1", "x2"]);
    let a = fit_sem(&model, &data, &SemOptions::new(1)).unwrap();
    let rev: Vec<usize> = (0..data.n_rows()).rev().collect();
    let b = fit_sem(&model, &data.take_rows(&rev), &SemOptions::new(1)).unwrap();
    for (p, q) in a.params.iter().zip(&b.params) {
        assert!((p.value - q.value).abs() < 1e-6 * p.value.abs().max(1.0), "{}", p.name);
    }
}

#[test]
fn same_seed_gives_identical_fits() {
    let mut cfg = SimConfig::new(32);
    cfg.n = 600;
    let data = simulate_clock_panel(&cfg).unwrap();
    let model = clock_model(&["x1", "x2"]);
    let a = fit_sem(&model, &data, &SemOptions::new(5)).unwrap();
    let b = fit_sem(&model, &data, &SemOptions::new(5)).unwrap();
    assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
    assert_eq!(a.convergence_log(), b.convergence_log());
}

#[test]
fn robust_standard_errors_are_close_under_normality() {
    let mut cfg = SimConfig::new(33);
    cfg.n = 5000;
    let data = simulate_clock_panel(&cfg).unwrap();
    let model = clock_model(&["x1", "x2"]);
    let a = fit_sem(&model, &data, &SemOptions::new(1)).unwrap();
    let mut opts = SemOptions::new(1);
    opts.se = SemSe::Robust;
    let b = fit_sem(&model, &data, &opts).unwrap();
    for (p, q) in a.params.iter().zip(&b.params) {
        assert_eq!(p.value, q.value);
        assert!((p.se / q.se - 1.0).abs() < 0.25, "{}: {} vs {}", p.name, p.se, q.se);
    }
}

#[test]
fn noiseless_indicator_is_pinned_as_heywood_case() {
    let mut cfg = SimConfig::new(41);
    cfg.n = 1000;
    cfg.error_sds = vec![0.0, 2.5, 6.2, 3.0];
    let data = simulate_clock_panel(&cfg).unwrap();
    let fit = fit_sem(&clock_model(&["x1", "x2"]), &data, &SemOptions::new(1)).unwrap();
    assert_eq!(fit.heywood, vec!["clock_horvath".to_string()]);
    assert_eq!(fit.theta("clock_horvath").unwrap(), 0.0);
    assert!(fit.param("theta:clock_horvath").is_err());
    assert!(fit.convergence_log().contains("heywood=clock_horvath"));
    assert!(fit.matrices.theta.iter().all(|t| *t >= 0.0));
}

#[test]
fn outcome_on_latent_recovers_the_effect() {
    let mut cfg = SimConfig::new(51);
    cfg.n = 5000;
    cfg.error_sds = vec![1.0; 4];
    let data = simulate_clock_panel(&cfg).unwrap();
    let ea = hidden(&data, "ea_star");
    let x1 = data.numeric("x1").unwrap();
    let noise = mega_core::simulator::substream(99, "y");
    let mut rng = noise;
    let y: Vec<f64> = ea
        .iter()
        .zip(&x1)
        .map(|(e, x)| {
            let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
            0.7 * e + 0.3 * x + z
        })
        .collect();
    let data = data.with_column(Column::from_f64("y", &y)).unwrap();
    let model = build_mimic(
        vec![LatentBlock::new("EA", &CLOCKS, CLOCKS[0])],
        Structural::OutcomeOnLatent {
            outcomes: vec!["y".into()],
            controls: vec!["x1".into()],
        },
    )
    .unwrap();
    let fit = fit_sem(&model, &data, &SemOptions::new(3)).unwrap();
    let delta = fit.param("lambda:EA:y").unwrap();
    assert!((delta.value - 0.7).abs() < 3.0 * delta.se, "{} ({})", delta.value, delta.se);
    let beta = fit.param("beta:y:x1").unwrap();
    assert!((beta.value - 0.3).abs() < 3.0 * beta.se);
    assert!(fit.gradient_check() < 1e-5);
    let err = latent_scores(&fit, "EA", &data, ScoreMode::LinearPrediction).unwrap_err();
    assert!(matches!(err, MegaError::InvalidArgument(_)));
    assert!(latent_scores(&fit, "EA", &data, ScoreMode::RegressionScore).is_ok());
}

#[test]
fn three_block_model_builds_and_fits() {
    let text = "\
[latent EA]
indicators = clock_horvath, clock_hannum, clock_phenoage, clock_grimage
reference = clock_horvath

[latent COG]
indicators = cog1, cog2, cog3, cog4

[latent SE]
indicators = se1, se2, se3, se4, se5

[structural]
covariates = x1, x2
";
    let model = parse_model_spec(text).unwrap();
    assert_eq!(model.n_latent(), 3);
    let mut cfg = SimConfig::new(61);
    cfg.n = 3000;
    let mut data = simulate_clock_panel(&cfg).unwrap();
    let x1 = data.numeric("x1").unwrap();
    let x2 = data.numeric("x2").unwrap();
    let mut rng = mega_core::simulator::substream(61, "blocks");
    let mut draw = || -> f64 { rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng) };
    let n = data.n_rows();
    let cog: Vec<f64> = (0..n).map(|i| 0.4 * x1[i] + draw()).collect();
    let se: Vec<f64> = (0..n).map(|i| -0.2 * x2[i] + 0.5 * cog[i] + draw()).collect();
    for (name, latent, lam) in [("cog", &cog, [1.0, 0.7, 1.1, 0.9].as_slice()), ("se", &se, &[1.0, 0.6, 0.8, 1.2, 0.5])] {
        for (k, l) in lam.iter().enumerate() {
            let col: Vec<f64> = latent.iter().map(|v| l * v + 0.6 * draw()).collect();
            data = data.with_column(Column::from_f64(format!("{name}{}", k + 1), &col)).unwrap();
        }
    }
    let fit = fit_sem(&model, &data, &SemOptions::new(8)).unwrap();
    assert!(fit.convergence.converged);
    assert!(fit.gradient_check() < 1e-5);
    let l = fit.param("lambda:SE:se4").unwrap();
    assert!((l.value - 1.2).abs() < 3.0 * l.se);
    let cov = fit.param("psi:COG:SE").unwrap();
    assert!((cov.value - 0.5).abs() < 3.0 * cov.se);
}

#[test]
fn too_few_rows_for_the_parameters() {
    let mut cfg = SimConfig::new(71);
    cfg.n = 10;
    let data = simulate_clock_panel(&cfg).unwrap();
    let err = fit_sem(&clock_model(&["x1", "x2"]), &data, &SemOptions::new(1)).unwrap_err();
    assert!(matches!(err, MegaError::InsufficientData(_)), "{err}");
}
