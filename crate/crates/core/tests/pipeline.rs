use mega_core::aggregation::{build_index, ClockPanel, Method};
use mega_core::cohort::{read_cohort, Column};
use mega_core::inference::{ols_fit, LinearModelSpec, SeType};
use mega_core::simulator::{simulate_abuse_cohort, SimConfig};

const CLOCKS: [&str; 4] = ["clock_horvath", "clock_hannum", "clock_phenoage", "clock_grimage"];

#[test]
fn csv_round_trip_then_index_then_regression() {
    let mut cfg = SimConfig::new(42);
    cfg.n = 4_000;
    cfg.loadings = vec![1.0; 4];
    let sim = simulate_abuse_cohort(&cfg).unwrap();
    let bytes = sim.to_csv(false).unwrap();
    let header = String::from_utf8_lossy(&bytes[..bytes.iter().position(|&b| b == b'\n').unwrap()]).to_string();
    assert!(!header.contains("ea_star") && !header.contains("true_any"));

    let (table, report) = read_cohort(bytes.as_slice(), &sim.schema()).unwrap();
    assert_eq!(table.n_rows(), cfg.n);
    assert_eq!(report.rows, cfg.n);
    assert!(report.invalid.is_empty());

    let panel = ClockPanel::from_table(&table, &CLOCKS, "age_years").unwrap();
    let wgt = build_index(&panel, Method::Wgt).unwrap();
    let fa = build_index(&panel, Method::Fa).unwrap();
    for r in [&wgt, &fa] {
        assert!((r.weights.normalized_weights.sum() - 1.0).abs() < 1e-12);
    }
    let truth = sim.column("true_any_0_10").unwrap().clone();
    let late = sim.column("true_any_11_18").unwrap().clone();
    let table = table
        .with_column(Column::from_f64("mega_wgt", &wgt.scores))
        .unwrap()
        .with_column(truth)
        .unwrap()
        .with_column(late)
        .unwrap();
    let spec = LinearModelSpec::new("mega_wgt", &["true_any_0_10", "true_any_11_18", "female", "age_years"])
        .unwrap()
        .with_se(SeType::Hc1);
    let fit = ols_fit(&spec, &table).unwrap();
    let (b, se) = (fit.coef("true_any_0_10").unwrap(), fit.se("true_any_0_10").unwrap());
    assert!((b - 0.5).abs() < 3.0 * se, "{b} ({se})");
    assert!(fit.coef("true_any_11_18").unwrap().abs() < 3.0 * fit.se("true_any_11_18").unwrap());
}

#[test]
fn leave_one_out_drops_exactly_one_clock() {
    let mut cfg = SimConfig::new(8);
    cfg.n = 1_000;
    let sim = simulate_abuse_cohort(&cfg).unwrap();
    let panel = ClockPanel::from_table(&sim, &CLOCKS, "age_years").unwrap();
    for clock in CLOCKS {
        let r = mega_core::aggregation::leave_one_out(&panel, clock, Method::Wgt).unwrap();
        assert_eq!(r.weights.clock_names.len(), 3);
        assert!(!r.weights.clock_names.iter().any(|c| c == clock));
        assert_eq!(r.weights.excluded_clocks, vec![clock.to_string()]);
    }
}
