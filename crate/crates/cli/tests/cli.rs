use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mega(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mega"))
        .args(args)
        .output()
        .expect("run mega")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn simulate(dir: &Path, seed: &str, extra: &[&str]) -> PathBuf {
    let out_dir = dir.join(format!("sim{seed}"));
    let mut args = vec!["--seed", seed, "--out-dir", p(&out_dir), "simulate"];
    args.extend_from_slice(extra);
    ok(&mega(&args));
    out_dir
}

fn csv_header(path: &Path) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.headers().unwrap().iter().map(str::to_string).collect()
}

fn manifest_outputs(dir: &Path) -> Vec<String> {
    fs::read_to_string(dir.join("manifest.txt"))
        .unwrap()
        .lines()
        .filter_map(|l| l.strip_prefix("output.").map(|r| r.split('=').next().unwrap().to_string()))
        .collect()
}

#[test]
fn simulate_is_deterministic_and_needs_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = simulate(dir.path(), "11", &["--n", "200"]);
    let b_dir = dir.path().join("again");
    ok(&mega(&["--seed", "11", "--out-dir", p(&b_dir), "simulate", "--n", "200"]));
    for f in ["cohort.csv", "truth.csv", "schema.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b_dir.join(f)).unwrap(), "{f}");
    }
    let out = mega(&["--out-dir", p(&dir.path().join("x")), "simulate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));
    assert!(!dir.path().join("x").exists());
}

#[test]
fn aggregate_writes_full_and_leave_one_out_scores() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "5", &["--n", "600"]);
    let out_dir = dir.path().join("agg");
    ok(&mega(&[
        "--input",
        p(&sim.join("cohort.csv")),
        "--schema",
        p(&sim.join("schema.txt")),
        "--out-dir",
        p(&out_dir),
        "--jobs",
        "2",
        "aggregate",
    ]));
    let header = csv_header(&out_dir.join("scores.csv"));
    assert_eq!(header.len(), 1 + 2 + 2 * 4);
    let diag = fs::read_to_string(out_dir.join("factor_diagnostics.txt")).unwrap();
    assert!(diag.contains("Retained factors (Kaiser): 1"));
    let mut outputs = manifest_outputs(&out_dir);
    outputs.sort();
    assert_eq!(
        outputs,
        ["factor_diagnostics.csv", "factor_diagnostics.txt", "scores.csv", "weights.csv"]
    );

    let wgt_dir = dir.path().join("wgt");
    ok(&mega(&[
        "--input",
        p(&sim.join("cohort.csv")),
        "--out-dir",
        p(&wgt_dir),
        "aggregate",
        "--methods",
        "wgt",
    ]));
    let header = csv_header(&wgt_dir.join("scores.csv"));
    assert_eq!(header.len(), 1 + 1 + 4);
    assert!(header.iter().all(|h| h == "subject_id" || h.starts_with("mega_wgt")));
}

#[test]
fn bad_column_is_an_input_error_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "6", &["--n", "100"]);
    let out_dir = dir.path().join("bad");
    let out = mega(&[
        "--input",
        p(&sim.join("cohort.csv")),
        "--out-dir",
        p(&out_dir),
        "aggregate",
        "--clocks",
        "clock_horvath,no_such_clock",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.trim().lines().count(), 1, "{stderr}");
    assert!(!out_dir.exists());
}

#[test]
fn numerical_failure_has_its_own_exit_status() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("flat.csv");
    let mut text = String::from("subject_id,age_years,clock_a,clock_b,clock_c\n");
    for i in 0..30 {
        text.push_str(&format!("s{i},{},{},5,{}\n", 17.0 + i as f64 * 0.01, i, 30 - i));
    }
    fs::write(&csv, text).unwrap();
    let out = mega(&["--input", p(&csv), "--out-dir", p(&dir.path().join("o")), "aggregate"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn sem_reports_every_reference_with_one_likelihood() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "8", &["--n", "800"]);
    let out_dir = dir.path().join("sem");
    ok(&mega(&[
        "--input",
        p(&sim.join("cohort.csv")),
        "--seed",
        "3",
        "--out-dir",
        p(&out_dir),
        "sem",
        "--covariates",
        "age_years,x1,x2",
        "--references",
        "all",
    ]));
    let header = csv_header(&out_dir.join("scores.csv"));
    assert_eq!(header.len(), 1 + 4);
    let text = fs::read_to_string(out_dir.join("sem.txt")).unwrap();
    let logliks: Vec<&str> = text
        .lines()
        .filter_map(|l| l.split_once("loglik=").map(|(_, v)| v))
        .collect();
    assert_eq!(logliks.len(), 4);
    let first: f64 = logliks[0].parse().unwrap();
    for l in &logliks {
        let v: f64 = l.parse().unwrap();
        assert!((v - first).abs() <= 1e-10 * first.abs());
    }
    assert!(fs::read_to_string(out_dir.join("convergence.log")).unwrap().contains("converged=true"));

    let no_seed = mega(&["--input", p(&sim.join("cohort.csv")), "--out-dir", p(&dir.path().join("n")), "sem"]);
    assert_eq!(no_seed.status.code(), Some(2));
}

#[test]
fn sem_monte_carlo_mode_writes_a_coverage_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("mc.txt");
    fs::write(&cfg, "n=500\n").unwrap();
    let out_dir = dir.path().join("mc");
    ok(&mega(&[
        "--config",
        p(&cfg),
        "--seed",
        "1",
        "--jobs",
        "2",
        "--out-dir",
        p(&out_dir),
        "sem",
        "--mc",
        "8",
    ]));
    let summary = fs::read_to_string(out_dir.join("coverage.txt")).unwrap();
    assert!(summary.contains("replications=8"));
    assert!(summary.contains("pooled_coverage="));
    assert!(fs::read_to_string(out_dir.join("manifest.txt")).unwrap().contains("config_sha256="));
}

#[test]
fn rdd_with_three_bandwidths_gives_three_panels() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "4", &["--kind", "rdd", "--n", "900"]);
    let out_dir = dir.path().join("rdd");
    ok(&mega(&[
        "--input",
        p(&sim.join("cohort.csv")),
        "--schema",
        p(&sim.join("schema.txt")),
        "--out-dir",
        p(&out_dir),
        "rdd",
        "--bandwidths",
        "4,3,2",
        "--class-column",
        "father_social_class",
    ]));
    let text = fs::read_to_string(out_dir.join("rdd.txt")).unwrap();
    assert!(text.contains("Panel A: May - December"));
    assert!(text.contains("Panel B: June - November"));
    assert!(text.contains("Panel C: July - October"));
    assert!(text.contains("Robust standard errors"));
    let het = fs::read_to_string(out_dir.join("heterogeneity.csv")).unwrap();
    assert!(het.contains("manual") && het.contains("non_manual"));
}

#[test]
fn pipeline_recovers_the_configured_effect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("abuse.txt");
    // Loadings near one so the index is on the latent's scale.
    fs::write(
        &cfg,
        "n=3000\nloadings=1,1,1,1\nerror_sds=2,2,2,2\nabuse_effect_early=0.5\n",
    )
    .unwrap();
    let sim = dir.path().join("sim");
    ok(&mega(&["--config", p(&cfg), "--seed", "21", "--out-dir", p(&sim), "simulate", "--kind", "abuse"]));
    let agg = dir.path().join("agg");
    ok(&mega(&[
        "--input",
        p(&sim.join("cohort.csv")),
        "--schema",
        p(&sim.join("schema.txt")),
        "--out-dir",
        p(&agg),
        "aggregate",
        "--no-leave-one-out",
    ]));
    let reg = dir.path().join("reg");
    ok(&mega(&[
        "--input",
        p(&sim.join("cohort.csv")),
        "--schema",
        p(&sim.join("schema.txt")),
        "--out-dir",
        p(&reg),
        "regress",
        "--derive-abuse",
        "--join",
        p(&agg.join("scores.csv")),
        "--outcomes",
        "mega_wgt",
        "--regressors",
        "any_cmp_0_10,any_cmp_11_18",
        "--controls",
        "female,age_years",
    ]));
    let mut r = csv::Reader::from_path(reg.join("table.csv")).unwrap();
    let rec = r
        .records()
        .map(|r| r.unwrap())
        .find(|r| &r[2] == "any_cmp_0_10")
        .unwrap();
    let est: f64 = rec[3].parse().unwrap();
    let se: f64 = rec[4].parse().unwrap();
    assert!((est - 0.5).abs() < 2.0 * se, "{est} ({se})");

    // The report verifies hashes and fails once an output is edited.
    let rep = dir.path().join("rep");
    ok(&mega(&["--out-dir", p(&rep), "report", "--run", p(&reg)]));
    assert!(fs::read_to_string(rep.join("report.txt")).unwrap().contains("ok      table.csv"));
    fs::write(reg.join("table.csv"), "tampered").unwrap();
    let out = mega(&["--out-dir", p(&dir.path().join("rep2")), "report", "--run", p(&reg)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn regress_side_by_side_standard_errors() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "9", &["--n", "300"]);
    let out_dir = dir.path().join("reg");
    ok(&mega(&[
        "--input",
        p(&sim.join("cohort.csv")),
        "--out-dir",
        p(&out_dir),
        "regress",
        "--outcomes",
        "clock_horvath,clock_grimage",
        "--regressors",
        "x1",
        "--controls",
        "age_years",
        "--se",
        "both",
    ]));
    for f in ["table_classical.txt", "table_hc1.txt", "plot_classical.csv", "plot_hc1.csv"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    assert!(fs::read_to_string(out_dir.join("table_hc1.txt")).unwrap().contains("Robust standard errors"));
}
