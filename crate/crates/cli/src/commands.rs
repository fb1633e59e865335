//! One function per subcommand. Each fills a `RunOutput`; the caller commits it.

use std::path::{Path, PathBuf};

use mega_core::cohort::{derive_abuse_indicators, SUBJECT_ID};
use mega_core::config::KeyValues;
use mega_core::inference::age_acceleration;
use mega_core::montecarlo::replicate;
use mega_core::rdd::{placebo_outcome, CUTOFF_MONTH};
use mega_core::report::csv_bytes;
use mega_core::sem::{LatentBlock, SemModel};
use mega_core::simulator::{
    clock_panel_moments, check_moments, simulate_abuse_cohort, simulate_clock_panel, simulate_rdd_cohort,
    truth_sidecar, RDD_OUTCOME,
};
use mega_core::{
    build_index, build_mimic, efa_with, fit_sem, latent_scores, leave_one_out, load_cohort, ols_fit,
    parse_model_spec, rdd_fit, rdd_heterogeneity, rescale_reference, sem_coverage, ClockPanel, CohortTable,
    EfaOptions, Extraction, HeterogeneityMode, KaiserBasis, LinearModelSpec, MegaError, Method,
    RddSpec, RddTable, RegressionTable, Result, Schema, ScoreMode, SeType, SemOptions, SemSe, SimConfig,
    Structural,
};

use crate::args::*;
use crate::output::{read_file, read_manifest, sha256_hex, RunOutput, MANIFEST};

/// Settings shared by every subcommand after merging flags and config file.
pub struct Context {
    pub input: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub config: KeyValues,
    pub seed: Option<u64>,
    pub jobs: usize,
}

impl Context {
    /// Flag value, else config-file value, else `None`.
    pub fn pick(&self, flag: Option<String>, key: &str) -> Option<String> {
        flag.or_else(|| self.config.get_str(key).map(str::to_string))
    }

    fn list(&self, flag: Option<String>, key: &str) -> Option<Vec<String>> {
        self.pick(flag, key).map(|s| split_list(&s))
    }

    fn seed(&self, subcommand: &str) -> Result<u64> {
        self.seed
            .ok_or_else(|| MegaError::InvalidArgument(format!("`{subcommand}` is stochastic: --seed is required")))
    }

    fn load(&self) -> Result<CohortTable> {
        let path = self
            .input
            .as_ref()
            .ok_or_else(|| MegaError::InvalidArgument("--input is required".into()))?;
        let schema = match &self.schema {
            Some(p) => Schema::parse(&String::from_utf8_lossy(&read_file(p)?))?,
            None => {
                let bytes = read_file(path)?;
                Schema::infer(bytes.as_slice(), &["NA", "."])?
            }
        };
        let (table, report) = load_cohort(path, &schema)?;
        for cell in &report.invalid {
            log::warn!("column `{}` row {}: `{}` fails its type, treated as missing", cell.column, cell.row, cell.raw);
        }
        Ok(table)
    }
}

pub fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect()
}

fn clock_columns(table: &CohortTable, explicit: Option<Vec<String>>) -> Result<Vec<String>> {
    let clocks = explicit.unwrap_or_else(|| {
        table
            .columns()
            .iter()
            .filter(|c| !c.is_hidden() && c.name().starts_with("clock_"))
            .map(|c| c.name().to_string())
            .collect()
    });
    if clocks.is_empty() {
        return Err(MegaError::InvalidArgument("no clock columns (use --clocks)".into()));
    }
    Ok(clocks)
}

fn panel_of(table: &CohortTable, clocks: &[String], age: &str) -> Result<ClockPanel> {
    let mut vars: Vec<&str> = clocks.iter().map(String::as_str).collect();
    vars.push(age);
    let (complete, report) = table.select_complete(&vars)?;
    if report.retained < report.before {
        log::info!("kept {} of {} rows with complete clocks", report.retained, report.before);
    }
    let refs: Vec<&str> = clocks.iter().map(String::as_str).collect();
    ClockPanel::from_table(&complete, &refs, age)
}

fn score_csv(ids: &[String], columns: &[(String, Vec<Option<f64>>)]) -> Result<Vec<u8>> {
    let mut header = vec![SUBJECT_ID];
    header.extend(columns.iter().map(|(n, _)| n.as_str()));
    let rows: Vec<Vec<String>> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let mut row = vec![id.clone()];
            row.extend(columns.iter().map(|(_, v)| v[i].map(|x| x.to_string()).unwrap_or_default()));
            row
        })
        .collect();
    csv_bytes(&header, &rows)
}

fn schema_text(table: &CohortTable) -> String {
    let mut out = format!("id={SUBJECT_ID}\n");
    for c in table.columns().iter().filter(|c| !c.is_hidden()) {
        out.push_str(&format!("{}={}\n", c.name(), c.kind().as_str()));
    }
    out
}

pub fn simulate(ctx: &Context, args: SimulateArgs, out: &mut RunOutput) -> Result<()> {
    let seed = ctx.seed("simulate")?;
    let mut kv = ctx.config.clone();
    kv.set("seed", seed.to_string());
    if let Some(n) = args.n {
        kv.set("n", n.to_string());
    }
    let cfg = SimConfig::from_key_values(&kv)?;
    let kind = ctx.pick(args.kind, "kind").unwrap_or_else(|| "panel".into());
    let table = match kind.as_str() {
        "panel" => simulate_clock_panel(&cfg)?,
        "abuse" => simulate_abuse_cohort(&cfg)?,
        "rdd" => simulate_rdd_cohort(&cfg)?,
        other => return Err(MegaError::InvalidArgument(format!("unknown simulation kind `{other}`"))),
    };
    if kind == "panel" {
        let checks = check_moments(&table, &clock_panel_moments(&cfg))?;
        let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
        if !failed.is_empty() {
            log::warn!("{} simulated moments outside their tolerance", failed.len());
        }
    }
    out.add("cohort.csv", table.to_csv(false)?);
    out.add("truth.csv", truth_sidecar(&table)?);
    out.add("schema.txt", schema_text(&table));
    out.add("config.txt", kv.render());
    out.meta("kind", &kind);
    out.meta("rows", table.n_rows());
    Ok(())
}

fn parse_methods(s: Option<String>) -> Result<Vec<Method>> {
    match s {
        None => Ok(vec![Method::Wgt, Method::Fa]),
        Some(s) => split_list(&s).iter().map(|m| Method::parse(m)).collect(),
    }
}

pub fn aggregate(ctx: &Context, args: AggregateArgs, out: &mut RunOutput) -> Result<()> {
    let table = ctx.load()?;
    let clocks = clock_columns(&table, ctx.list(args.clocks, "clocks"))?;
    let age = ctx.pick(args.age, "age").unwrap_or_else(|| "age_years".into());
    let methods = parse_methods(ctx.pick(args.methods, "methods"))?;
    if methods.is_empty() {
        return Err(MegaError::InvalidArgument("--methods is empty".into()));
    }
    let panel = panel_of(&table, &clocks, &age)?;

    let mut columns: Vec<(String, Vec<Option<f64>>)> = Vec::new();
    let mut weight_rows: Vec<Vec<String>> = Vec::new();
    let mut push_weights = |variant: &str, w: &mega_core::MegaWeights| {
        for (i, c) in w.clock_names.iter().enumerate() {
            weight_rows.push(vec![
                w.method.key().to_string(),
                variant.to_string(),
                c.clone(),
                w.raw_weights[i].to_string(),
                w.normalized_weights[i].to_string(),
            ]);
        }
    };
    let mut full = Vec::new();
    for &m in &methods {
        let r = build_index(&panel, m)?;
        push_weights("full", &r.weights);
        columns.push((format!("mega_{}", m.key()), r.scores.iter().map(|&s| Some(s)).collect()));
        full.push(r);
    }
    if !args.no_leave_one_out && panel.k() >= 3 {
        let jobs: Vec<(Method, String)> = methods
            .iter()
            .flat_map(|&m| clocks.iter().map(move |c| (m, c.clone())))
            .collect();
        let idx: Vec<u64> = (0..jobs.len() as u64).collect();
        let results = replicate(&idx, ctx.jobs, |i| {
            let (m, c) = &jobs[i as usize];
            leave_one_out(&panel, c, *m)
        })?;
        for ((m, c), r) in jobs.iter().zip(results) {
            let r = r?;
            push_weights(&format!("without_{c}"), &r.weights);
            columns.push((format!("mega_{}_without_{c}", m.key()), r.scores.iter().map(|&s| Some(s)).collect()));
        }
    }
    if args.age_acceleration {
        let age: Vec<f64> = panel.age_years().iter().copied().collect();
        let extra: Vec<_> = columns
            .iter()
            .map(|(n, v)| {
                let s: Vec<f64> = v.iter().map(|x| x.unwrap()).collect();
                age_acceleration(&s, &age).map(|r| (format!("{n}_accel"), r.into_iter().map(Some).collect()))
            })
            .collect::<Result<_>>()?;
        columns.extend(extra);
    }
    out.add("scores.csv", score_csv(panel.subject_ids(), &columns)?);
    out.add(
        "weights.csv",
        csv_bytes(&["method", "variant", "clock", "raw_weight", "normalized_weight"], &weight_rows)?,
    );
    if let Some(sol) = full.iter().find_map(|r| r.solution.as_ref()) {
        out.add("factor_diagnostics.csv", sol.to_csv()?);
        out.add("factor_diagnostics.txt", sol.to_string());
        out.meta("n_retained", sol.n_retained);
    }
    out.meta("clocks", clocks.join(","));
    out.meta("rows", panel.n());
    out.meta("score_columns", columns.len());
    Ok(())
}

pub fn efa(ctx: &Context, args: EfaArgs, out: &mut RunOutput) -> Result<()> {
    let table = ctx.load()?;
    let clocks = clock_columns(&table, ctx.list(args.clocks, "clocks"))?;
    let age = ctx.pick(args.age, "age").unwrap_or_else(|| "age_years".into());
    let panel = panel_of(&table, &clocks, &age)?;
    let mut opts = EfaOptions::default();
    if let Some(e) = ctx.pick(args.extraction, "extraction") {
        opts.extraction = match e.as_str() {
            "pf" | "principal_factor" => Extraction::PrincipalFactor,
            "pc" | "principal_component" => Extraction::PrincipalComponent,
            other => return Err(MegaError::InvalidArgument(format!("unknown extraction `{other}`"))),
        };
    }
    if let Some(k) = ctx.pick(args.kaiser, "kaiser") {
        opts.kaiser = match k.as_str() {
            "correlation" => KaiserBasis::Correlation,
            "reduced" => KaiserBasis::Reduced,
            other => return Err(MegaError::InvalidArgument(format!("unknown Kaiser basis `{other}`"))),
        };
    }
    let sol = efa_with(&panel, &opts)?;
    out.add("factor_diagnostics.csv", sol.to_csv()?);
    out.add("factor_diagnostics.txt", sol.to_string());
    out.meta("n_retained", sol.n_retained);
    Ok(())
}

fn sem_model(ctx: &Context, args: &SemArgs, table: Option<&CohortTable>) -> Result<SemModel> {
    if let Some(path) = ctx.pick(args.model.clone(), "model") {
        let text = String::from_utf8(read_file(Path::new(&path))?)
            .map_err(|_| MegaError::Config(format!("{path} is not UTF-8")))?;
        return parse_model_spec(&text);
    }
    let clocks = match table {
        Some(t) => clock_columns(t, ctx.list(args.clocks.clone(), "clocks"))?,
        None => ctx
            .list(args.clocks.clone(), "clocks")
            .ok_or_else(|| MegaError::InvalidArgument("--clocks or --model is required".into()))?,
    };
    let covariates = ctx
        .list(args.covariates.clone(), "covariates")
        .ok_or_else(|| MegaError::InvalidArgument("--covariates or --model is required".into()))?;
    build_mimic(
        vec![LatentBlock::new("EA", &clocks, &clocks[0])],
        Structural::LatentOnCovariates { covariates },
    )
}

pub fn sem(ctx: &Context, args: SemArgs, out: &mut RunOutput) -> Result<()> {
    let seed = ctx.seed("sem")?;
    if let Some(reps) = args.mc {
        let mut kv = ctx.config.clone();
        kv.set("seed", seed.to_string());
        let cfg = SimConfig::from_key_values(&kv)?;
        let summary = sem_coverage(&cfg, reps, ctx.jobs)?;
        out.add("coverage.csv", summary.to_csv()?);
        let mut text = format!(
            "replications={}\nfailed={}\npooled_coverage={:.4}\nmax_gradient_error={:e}\n",
            summary.replications, summary.failed, summary.pooled_coverage, summary.max_gradient_error
        );
        for p in &summary.params {
            text.push_str(&format!(
                "{:<32} truth {:>9.4}  mean {:>9.4}  se {:>8.4}  coverage {:.3}\n",
                p.name, p.truth, p.mean_estimate, p.mean_se, p.coverage
            ));
        }
        out.add("coverage.txt", text);
        out.meta("mc_replications", reps);
        return Ok(());
    }

    let table = ctx.load()?;
    let model = sem_model(ctx, &args, Some(&table))?;
    let mut opts = SemOptions::new(seed);
    if args.robust {
        opts.se = SemSe::Robust;
    }
    if let Some(r) = args.restarts {
        opts.random_starts = r;
    }
    let fit = fit_sem(&model, &table, &opts)?;
    let latent = ctx
        .pick(args.latent.clone(), "latent")
        .unwrap_or_else(|| model.blocks[0].name.clone());
    let a = model.latent_index(&latent)?;
    let block = &model.blocks[a];
    let references: Vec<String> = match ctx.pick(args.references.clone(), "references") {
        Some(s) if s == "all" => block.indicators.clone(),
        Some(s) => split_list(&s),
        None => vec![block.reference.clone()],
    };
    let mode = match ctx.pick(args.score_mode.clone(), "score_mode") {
        Some(m) => ScoreMode::parse(&m)?,
        None if model.is_latent_on_covariates() => ScoreMode::LinearPrediction,
        None => ScoreMode::RegressionScore,
    };

    let mut param_rows = Vec::new();
    let mut score_cols = Vec::new();
    let mut summary = format!("{model}\n");
    for r in &references {
        let f = rescale_reference(&fit, r)?;
        for p in &f.params {
            param_rows.push(vec![r.clone(), p.name.clone(), p.value.to_string(), p.se.to_string()]);
        }
        summary.push_str(&format!("reference={r} loglik={}\n", f.loglik));
        score_cols.push((format!("mega_sem_{r}"), latent_scores(&f, &latent, &table, mode)?));
    }
    summary.push_str(&format!("\n{fit}"));
    out.add("parameters.csv", csv_bytes(&["reference", "parameter", "estimate", "se"], &param_rows)?);
    out.add("convergence.log", fit.convergence_log());
    out.add("scores.csv", score_csv(table.ids(), &score_cols)?);
    out.add("sem.txt", summary);
    out.meta("loglik", fit.loglik);
    out.meta("df", fit.df);
    out.meta("score_mode", mode.key());
    Ok(())
}

/// Loads `--input`, joins `--join` tables and optionally derives abuse indicators.
fn analysis_table(ctx: &Context, joins: &[PathBuf], derive_abuse: bool) -> Result<CohortTable> {
    let mut table = ctx.load()?;
    for path in joins {
        let bytes = read_file(path)?;
        let schema = Schema::infer(bytes.as_slice(), &["NA", "."])?;
        let (other, _) = load_cohort(path, &schema)?;
        let before = table.n_rows();
        table = table.join(&other)?;
        if table.n_rows() < before {
            log::info!("join with {} kept {} of {before} rows", path.display(), table.n_rows());
        }
    }
    if derive_abuse {
        for ind in derive_abuse_indicators(&table)? {
            let name = ind.default_name();
            if !table.has_column(&name) {
                table = table.with_column(ind.to_column(name))?;
            }
        }
    }
    Ok(table)
}

fn se_types(s: Option<String>, default: SeType) -> Result<Vec<SeType>> {
    match s.as_deref() {
        None => Ok(vec![default]),
        Some("both") => Ok(vec![SeType::Classical, SeType::Hc1]),
        Some(s) => Ok(vec![SeType::parse(s)?]),
    }
}

pub fn regress(ctx: &Context, args: RegressArgs, out: &mut RunOutput) -> Result<()> {
    let table = analysis_table(ctx, &args.join, args.derive_abuse)?;
    let outcomes = ctx
        .list(args.outcomes, "outcomes")
        .ok_or_else(|| MegaError::InvalidArgument("--outcomes is required".into()))?;
    let regressors = ctx
        .list(args.regressors, "regressors")
        .ok_or_else(|| MegaError::InvalidArgument("--regressors is required".into()))?;
    let controls = ctx.list(args.controls, "controls").unwrap_or_default();
    let keep = ctx.list(args.keep, "keep").unwrap_or_else(|| regressors.clone());
    let mut all = regressors.clone();
    all.extend(controls);
    let rows: Vec<(String, String)> = keep.iter().map(|k| (k.clone(), k.clone())).collect();
    let types = se_types(ctx.pick(args.se, "se"), SeType::Classical)?;
    for se in &types {
        let fits = outcomes
            .iter()
            .map(|y| ols_fit(&LinearModelSpec::new(y, &all)?.with_se(*se), &table))
            .collect::<Result<Vec<_>>>()?;
        let table_out = RegressionTable::new(fits, rows.clone());
        let suffix = if types.len() > 1 { format!("_{}", se.key()) } else { String::new() };
        out.add(format!("table{suffix}.txt"), table_out.to_string());
        out.add(format!("table{suffix}.csv"), table_out.to_csv()?);
        out.add(format!("plot{suffix}.csv"), table_out.plot_data()?);
    }
    Ok(())
}

fn bandwidths(s: Option<String>) -> Result<Vec<u8>> {
    let list = s.map(|s| split_list(&s)).unwrap_or_else(|| vec!["4".into(), "3".into(), "2".into()]);
    list.iter()
        .map(|b| b.parse::<u8>().map_err(|_| MegaError::InvalidArgument(format!("bad bandwidth `{b}`"))))
        .collect()
}

pub fn rdd(ctx: &Context, args: RddArgs, out: &mut RunOutput) -> Result<()> {
    let table = analysis_table(ctx, &args.join, false)?;
    let outcomes = ctx
        .list(args.outcomes, "outcomes")
        .unwrap_or_else(|| vec![RDD_OUTCOME.to_string()]);
    let controls = ctx.list(args.controls, "controls").unwrap_or_default();
    let month = ctx.pick(args.month_column, "month_column").unwrap_or_else(|| "birth_month".into());
    let bws = bandwidths(ctx.pick(args.bandwidths, "bandwidths"))?;
    let se = se_types(ctx.pick(args.se, "se"), SeType::Hc1)?;
    if se.len() != 1 {
        return Err(MegaError::InvalidArgument("rdd takes a single --se type".into()));
    }
    let mut panels = Vec::new();
    for &bw in &bws {
        let base = RddSpec::new(&outcomes[0], bw)?.with_controls(&controls).with_month_column(&month);
        let base = RddSpec { se_type: se[0], ..base };
        let fits = outcomes
            .iter()
            .map(|y| rdd_fit(&base.with_outcome(y), &table))
            .collect::<Result<Vec<_>>>()?;
        panels.push(fits);
    }
    let rdd_table = RddTable {
        column_labels: outcomes.clone(),
        panels,
    };
    out.add("rdd.txt", rdd_table.to_string());
    out.add("rdd.csv", rdd_table.to_csv()?);

    if let Some(placebo) = ctx.pick(args.placebo, "placebo") {
        let spec = RddSpec::new(&outcomes[0], bws[0])?.with_controls(&controls).with_month_column(&month);
        let fit = placebo_outcome(&spec, &placebo, &table)?;
        out.add(
            "placebo.csv",
            csv_bytes(
                &["outcome", "bandwidth", "estimate", "se", "p"],
                &[vec![
                    placebo,
                    bws[0].to_string(),
                    fit.theta1.estimate.to_string(),
                    fit.theta1.se.to_string(),
                    fit.theta1.p_value.to_string(),
                ]],
            )?,
        );
    }
    if let Some(class) = ctx.pick(args.class_column, "class_column") {
        let mode = match ctx.pick(args.class_mode, "class_mode").as_deref() {
            None | Some("pooled") => HeterogeneityMode::Pooled,
            Some("split") => HeterogeneityMode::SplitSample,
            Some(other) => return Err(MegaError::InvalidArgument(format!("unknown class mode `{other}`"))),
        };
        let mut rows = Vec::new();
        let mut text = String::new();
        for y in &outcomes {
            let spec = RddSpec::new(y, bws[0])?.with_controls(&controls).with_month_column(&month);
            let het = rdd_heterogeneity(&spec, &class, &table, mode)?;
            for e in &het.effects {
                let (lo, hi) = e.theta1.ci(0.95);
                rows.push(vec![
                    y.clone(),
                    e.level.clone(),
                    e.n.to_string(),
                    e.theta1.estimate.to_string(),
                    e.theta1.se.to_string(),
                    lo.to_string(),
                    hi.to_string(),
                    e.theta1.p_value.to_string(),
                ]);
                text.push_str(&format!(
                    "{y:<20} {:<16} {:>10}  {}\n",
                    e.level,
                    mega_core::report::coef_cell(e.theta1.estimate, e.theta1.p_value),
                    mega_core::report::se_cell(e.theta1.se)
                ));
            }
            if let Some(w) = &het.equality_test {
                text.push_str(&format!("{y:<20} equality chi2({}) = {:.3}, p = {:.4}\n", w.df, w.statistic, w.p_value));
            }
        }
        out.add(
            "heterogeneity.csv",
            csv_bytes(&["outcome", "class", "n", "effect", "se", "ci_low", "ci_high", "p"], &rows)?,
        );
        out.add("heterogeneity.txt", text);
    }
    out.meta("cutoff_month", CUTOFF_MONTH);
    Ok(())
}

/// Verifies a finished run directory against its manifest and collects its
/// text tables.
pub fn report(ctx: &Context, args: ReportArgs, out: &mut RunOutput) -> Result<()> {
    let dir = args
        .run
        .or_else(|| ctx.input.clone())
        .ok_or_else(|| MegaError::InvalidArgument("report needs a run directory (--run)".into()))?;
    let manifest = read_manifest(&dir)?;
    let mut text = format!("run: {}\n", dir.display());
    let mut bad = Vec::new();
    for (k, v) in &manifest {
        if let Some(name) = k.strip_prefix("output.") {
            let bytes = read_file(&dir.join(name))?;
            let ok = sha256_hex(&bytes) == *v;
            if !ok {
                bad.push(name.to_string());
            }
            text.push_str(&format!("{} {name}\n", if ok { "ok     " } else { "CHANGED" }));
        } else if !k.ends_with("_unix") {
            text.push_str(&format!("{k}: {v}\n"));
        }
    }
    for (k, _) in &manifest {
        if let Some(name) = k.strip_prefix("output.") {
            if name.ends_with(".txt") && name != MANIFEST {
                text.push_str(&format!("\n== {name} ==\n"));
                text.push_str(&String::from_utf8_lossy(&read_file(&dir.join(name))?));
            }
        }
    }
    if !bad.is_empty() {
        return Err(MegaError::InvalidArgument(format!(
            "outputs differ from the manifest: {}",
            bad.join(", ")
        )));
    }
    out.add("report.txt", text);
    Ok(())
}
