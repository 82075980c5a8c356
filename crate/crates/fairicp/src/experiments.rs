//! The five commands. Each is a pure function of its config and input
//! files; parallel work is collected in key order before writing.

use std::path::{Path, PathBuf};

use fairicp_core::data::{gen_quality, gen_simulation, split, split_counts, Dataset, SimSpec, SimVariant};
use fairicp_core::density::{
    default_lasso_lambda, fit_a_given_y, fit_y_given_a, fit_y_given_a_classifier, CondDensity, ConditionalDensity,
    Direction, Penalty,
};
use fairicp_core::eotest::{eo_test, EoStatistic, EoTestResult};
use fairicp_core::linalg::{mean, variance, Matrix};
use fairicp_core::perm::{restricted_law, restricted_tv, PermMethod};
use fairicp_core::rng::derive_seed;
use fairicp_core::trainer::{arch_tag, evaluate_point, mu_seed, train_fairicp, TradeoffPoint, TrainConfig};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{
    AuditConfig, DensityConfig, Estimator, GenDataConfig, ParetoConfig, SimConfig, TrainCmdConfig,
    TvStudyConfig,
};
use crate::error::{CliError, CliResult};
use crate::io::{
    load_csv, read_envelope, read_matrix_csv, to_json_pretty, write_dataset, write_envelope, write_text, Cell,
    ColType, Table,
};

pub const RESOLVED_CONFIG: &str = "resolved_config.json";

/// Runs `f` on a pool of `threads` workers (0: rayon's default).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn write_resolved<C: Serialize>(out: &Path, cfg: &C) -> CliResult<PathBuf> {
    let path = out.join(RESOLVED_CONFIG);
    write_text(&path, &to_json_pretty(cfg)?)?;
    Ok(path)
}

fn generate(spec: &SimSpec) -> CliResult<Dataset> {
    Ok(match spec.variant {
        SimVariant::Quality => gen_quality(spec)?,
        SimVariant::Sim1 | SimVariant::Sim2 => gen_simulation(spec)?,
    })
}

/// Fits or builds `q(y | a)`. The oracle needs the generating spec.
pub fn fit_density(cfg: &DensityConfig, train: &Dataset, spec: Option<&SimSpec>) -> CliResult<CondDensity> {
    Ok(match cfg {
        DensityConfig::Oracle => {
            let spec = spec.ok_or_else(|| CliError::Config("the oracle density needs simulated data".into()))?;
            CondDensity::oracle(spec.clone(), Direction::YGivenA)
        }
        DensityConfig::Ridge { lambda } => CondDensity::GaussianLinear(fit_y_given_a(train, Penalty::Ridge(*lambda))?),
        DensityConfig::Lasso { lambda } => {
            let lambda = match lambda {
                Some(l) => *l,
                None => default_lasso_lambda(train)?,
            };
            CondDensity::GaussianLinear(fit_y_given_a(train, Penalty::Lasso(lambda))?)
        }
        DensityConfig::Logistic { lambda } => CondDensity::MultinomialLogistic(fit_y_given_a_classifier(train, *lambda)?),
    })
}

/// gen-data: `data.csv`, or `train.csv` and `test.csv` when split.
pub fn cmd_gen_data(cfg: &GenDataConfig, out: &Path) -> CliResult<Vec<PathBuf>> {
    let ds = generate(&cfg.sim.spec(cfg.seed)?)?;
    let mut written = Vec::new();
    match &cfg.split {
        None => {
            let p = out.join("data.csv");
            write_dataset(&p, &ds)?;
            written.push(p);
        }
        Some(s) => {
            let seed = derive_seed(cfg.seed, 1);
            let (train, test) = match (s.n_train, s.train_frac) {
                (Some(n), _) => split_counts(&ds, n, seed)?,
                (None, Some(f)) => split(&ds, f, seed)?,
                (None, None) => return Err(CliError::Config("split needs n_train or train_frac".into())),
            };
            for (name, part) in [("train.csv", &train), ("test.csv", &test)] {
                let p = out.join(name);
                write_dataset(&p, part)?;
                written.push(p);
            }
        }
    }
    written.push(write_resolved(out, cfg)?);
    Ok(written)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TvRow {
    pub trial: usize,
    pub k0: usize,
    pub k: usize,
    pub method: PermMethod,
    pub estimator: Estimator,
    pub tv: f64,
}

fn method_tag(m: PermMethod) -> &'static str {
    if m.is_inverse() {
        "icp"
    } else {
        "cp"
    }
}

/// Restricted-law TV of ICP and CP against the oracle law for one cell.
pub fn tv_cell(cfg: &TvStudyConfig, trial: usize, k0: usize, k: usize) -> CliResult<Vec<TvRow>> {
    let trial_seed = cfg.seed.wrapping_add(trial as u64);
    let sim = SimConfig {
        variant: SimVariant::Quality,
        n: cfg.n,
        k0,
        k,
        w: cfg.w,
        sigma: cfg.sigma,
        cov: cfg.cov,
    };
    let spec = sim.spec(derive_seed(trial_seed, ((k0 as u64) << 32) | k as u64))?;
    let ds = gen_quality(&spec)?;
    let y = ds.y().values();
    let oracle_y = CondDensity::oracle(spec.clone(), Direction::YGivenA);
    let reference = restricted_law(&oracle_y, ds.a(), &y, PermMethod::Icp)?;
    let mut rows = Vec::new();
    for &estimator in &cfg.estimators {
        let (icp, cp): (Box<dyn ConditionalDensity>, Box<dyn ConditionalDensity>) = match estimator {
            Estimator::Fit => {
                let lambda = match cfg.lasso_lambda {
                    Some(l) => l,
                    None if k0 + k == 1 => 0.0,
                    None => default_lasso_lambda(&ds)?,
                };
                (
                    Box::new(fit_y_given_a(&ds, Penalty::Lasso(lambda))?),
                    Box::new(fit_a_given_y(&ds, cfg.shrinkage)?),
                )
            }
            Estimator::OracleRef => (
                Box::new(oracle_y.clone()),
                Box::new(CondDensity::oracle(spec.clone(), Direction::AGivenY)),
            ),
        };
        for (method, q) in [(PermMethod::Icp, &icp), (PermMethod::Cp, &cp)] {
            let law = restricted_law(q.as_ref(), ds.a(), &y, method)?;
            rows.push(TvRow { trial, k0, k, method, estimator, tv: restricted_tv(&law, &reference)? });
        }
    }
    Ok(rows)
}

pub fn tv_rows(cfg: &TvStudyConfig) -> CliResult<Vec<TvRow>> {
    let mut jobs = Vec::new();
    for trial in 0..cfg.trials {
        for &k0 in &cfg.k0_grid {
            for &k in &cfg.k_grid {
                jobs.push((trial, k0, k));
            }
        }
    }
    let parts: Vec<Vec<TvRow>> = jobs.par_iter().map(|&(t, k0, k)| tv_cell(cfg, t, k0, k)).collect::<CliResult<_>>()?;
    let mut rows: Vec<TvRow> = parts.into_iter().flatten().collect();
    rows.sort_by_key(|r| (r.trial, r.k0, r.k, method_tag(r.method), r.estimator));
    Ok(rows)
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let sd = if xs.len() > 1 { variance(xs).sqrt() } else { f64::NAN };
    (mean(xs), sd)
}

/// tv-study: `tv_study.csv` with raw and log10 TV, and `tv_summary.csv`.
pub fn cmd_tv_study(cfg: &TvStudyConfig, out: &Path) -> CliResult<Vec<PathBuf>> {
    let rows = tv_rows(cfg)?;
    let mut table = Table::new(&[
        ("trial", ColType::Int),
        ("K0", ColType::Int),
        ("K", ColType::Int),
        ("method", ColType::Str),
        ("estimator", ColType::Str),
        ("tv", ColType::Float),
        ("log10_tv", ColType::Float),
    ]);
    for r in &rows {
        table.push(vec![
            Cell::Int(r.trial as i64),
            Cell::Int(r.k0 as i64),
            Cell::Int(r.k as i64),
            Cell::Str(method_tag(r.method).into()),
            Cell::Str(r.estimator.tag().into()),
            Cell::Float(r.tv),
            Cell::Float(r.tv.log10()),
        ]);
    }
    let main = out.join("tv_study.csv");
    table.write(&main)?;

    let mut summary = Table::new(&[
        ("K0", ColType::Int),
        ("K", ColType::Int),
        ("method", ColType::Str),
        ("estimator", ColType::Str),
        ("trials", ColType::Int),
        ("mean_log10_tv", ColType::Float),
        ("sd_log10_tv", ColType::Float),
        ("mean_tv", ColType::Float),
    ]);
    let mut keys: Vec<_> = rows.iter().map(|r| (r.k0, r.k, method_tag(r.method), r.estimator)).collect();
    keys.sort();
    keys.dedup();
    for key in keys {
        let cell: Vec<&TvRow> = rows.iter().filter(|r| (r.k0, r.k, method_tag(r.method), r.estimator) == key).collect();
        let logs: Vec<f64> = cell.iter().map(|r| r.tv.log10()).collect();
        let raw: Vec<f64> = cell.iter().map(|r| r.tv).collect();
        let (m, sd) = mean_sd(&logs);
        summary.push(vec![
            Cell::Int(key.0 as i64),
            Cell::Int(key.1 as i64),
            Cell::Str(key.2.into()),
            Cell::Str(key.3.tag().into()),
            Cell::Int(cell.len() as i64),
            Cell::Float(m),
            Cell::Float(sd),
            Cell::Float(mean(&raw)),
        ]);
    }
    let sum_path = out.join("tv_summary.csv");
    summary.write(&sum_path)?;
    Ok(vec![main, sum_path, write_resolved(out, cfg)?])
}

/// Train and test split for pareto run `run`, with its density.
pub fn pareto_run_data(cfg: &ParetoConfig, run: usize) -> CliResult<(Dataset, Dataset, CondDensity)> {
    let run_seed = cfg.seed.wrapping_add(run as u64);
    let spec = cfg.sim.spec(derive_seed(run_seed, 0))?;
    let ds = generate(&spec)?;
    let (train, test) = split_counts(&ds, cfg.n_train, derive_seed(run_seed, 1))?;
    let q = fit_density(&cfg.density, &train, Some(&spec))?;
    Ok((train, test, q))
}

/// Training config of run `run`; grid points then reseed with `mu_seed`.
pub fn pareto_train_config(cfg: &ParetoConfig, run: usize) -> TrainConfig {
    TrainConfig { seed: derive_seed(cfg.seed.wrapping_add(run as u64), 2), ..cfg.train.clone() }
}

pub fn pareto_points(cfg: &ParetoConfig) -> CliResult<Vec<(usize, TradeoffPoint)>> {
    let runs: Vec<Vec<(usize, TradeoffPoint)>> = (0..cfg.runs)
        .into_par_iter()
        .map(|run| {
            let (train, test, q) = pareto_run_data(cfg, run)?;
            let base = pareto_train_config(cfg, run);
            cfg.grid
                .par_iter()
                .map(|&mu| {
                    let seed = mu_seed(base.seed, mu);
                    let point_cfg = TrainConfig { mu, seed, ..base.clone() };
                    let p = evaluate_point(&train, &test, &q, &point_cfg, &cfg.test, derive_seed(seed, 7))?;
                    Ok((run, p))
                })
                .collect::<CliResult<Vec<_>>>()
        })
        .collect::<CliResult<_>>()?;
    Ok(runs.into_iter().flatten().collect())
}

/// pareto: `pareto.csv` with one row per (run, mu) and `pareto_summary.csv`.
pub fn cmd_pareto(cfg: &ParetoConfig, out: &Path) -> CliResult<Vec<PathBuf>> {
    let points = pareto_points(cfg)?;
    let mut table = Table::new(&[
        ("run", ColType::Int),
        ("mu", ColType::Float),
        ("test_loss", ColType::Float),
        ("kpc", ColType::Float),
        ("p_value", ColType::Float),
    ]);
    for (run, p) in &points {
        table.push(vec![
            Cell::Int(*run as i64),
            Cell::Float(p.mu),
            Cell::Float(p.test_loss),
            Cell::Float(p.kpc),
            Cell::Float(p.p_value),
        ]);
    }
    let main = out.join("pareto.csv");
    table.write(&main)?;

    let mut summary = Table::new(&[
        ("mu", ColType::Float),
        ("runs", ColType::Int),
        ("mean_test_loss", ColType::Float),
        ("sd_test_loss", ColType::Float),
        ("mean_kpc", ColType::Float),
        ("sd_kpc", ColType::Float),
        ("power", ColType::Float),
    ]);
    for &mu in &cfg.grid {
        let at: Vec<&TradeoffPoint> = points.iter().map(|(_, p)| p).filter(|p| p.mu == mu).collect();
        let loss: Vec<f64> = at.iter().map(|p| p.test_loss).collect();
        let kpc: Vec<f64> = at.iter().map(|p| p.kpc).collect();
        let rejections = at.iter().filter(|p| p.p_value < cfg.test.alpha).count();
        let (ml, sl) = mean_sd(&loss);
        let (mk, sk) = mean_sd(&kpc);
        summary.push(vec![
            Cell::Float(mu),
            Cell::Int(at.len() as i64),
            Cell::Float(ml),
            Cell::Float(sl),
            Cell::Float(mk),
            Cell::Float(sk),
            Cell::Float(rejections as f64 / at.len() as f64),
        ]);
    }
    let sum_path = out.join("pareto_summary.csv");
    summary.write(&sum_path)?;
    Ok(vec![main, sum_path, write_resolved(out, cfg)?])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub n: usize,
    pub density: String,
    pub kpc: f64,
    pub alpha: f64,
    pub reject: bool,
    pub result: EoTestResult,
    pub note: String,
}

fn density_label(q: &CondDensity) -> String {
    match q {
        CondDensity::GaussianLinear(_) => "gaussian_linear",
        CondDensity::GaussianMultivariate(_) => "gaussian_multivariate",
        CondDensity::MultinomialLogistic(_) => "multinomial_logistic",
        CondDensity::Oracle(_) => "oracle",
    }
    .into()
}

/// Runs the audit without writing anything.
pub fn audit_report(cfg: &AuditConfig) -> CliResult<AuditReport> {
    let ds = load_csv(&cfg.data, cfg.schema.as_ref())?;
    let yhat: Matrix = read_matrix_csv(&cfg.predictions)?;
    if yhat.rows() != ds.n() {
        return Err(CliError::data(
            &cfg.predictions,
            format!("{} prediction rows for {} data rows", yhat.rows(), ds.n()),
        ));
    }
    let q = match &cfg.density_model {
        Some(p) => read_envelope::<CondDensity>(p, "density")?,
        None => fit_density(&cfg.density, &ds, None)?,
    };
    let stat = &cfg.test.statistic;
    let result = eo_test(&yhat, ds.a(), ds.a_kinds(), ds.y(), &q, cfg.test.k, cfg.test.sweeps, stat, cfg.seed)?;
    let mut measure = stat.clone();
    measure.kpc.clamp = true;
    let kpc = measure.bind(&yhat, ds.a_kinds(), ds.y())?(ds.a())?;
    Ok(AuditReport {
        n: ds.n(),
        density: density_label(&q),
        kpc,
        alpha: cfg.test.alpha,
        reject: result.p_value < cfg.test.alpha,
        result,
        note: "p-values are valid when q(y | a) matches the true conditional; a misfit density can inflate the rejection rate".into(),
    })
}

/// audit: `audit.json`.
pub fn cmd_audit(cfg: &AuditConfig, out: &Path) -> CliResult<Vec<PathBuf>> {
    let report = audit_report(cfg)?;
    let path = out.join("audit.json");
    write_envelope(&path, "audit", None, &report)?;
    Ok(vec![path, write_resolved(out, cfg)?])
}

/// train: models, training history, the density used, and training-set
/// predictions (plus the simulated data when no file is given).
pub fn cmd_train(cfg: &TrainCmdConfig, out: &Path) -> CliResult<Vec<PathBuf>> {
    let mut written = Vec::new();
    let (ds, spec) = match &cfg.data {
        Some(p) => (load_csv(p, cfg.schema.as_ref())?, None),
        None => {
            let spec = cfg.sim.spec(derive_seed(cfg.seed, 0))?;
            let ds = generate(&spec)?;
            let p = out.join("data.csv");
            write_dataset(&p, &ds)?;
            written.push(p);
            (ds, Some(spec))
        }
    };
    let q = fit_density(&cfg.density, &ds, spec.as_ref())?;
    let train_cfg = TrainConfig { seed: derive_seed(cfg.seed, 1), ..cfg.train.clone() };
    let fit = train_fairicp(&ds, &q, &train_cfg)?;
    let arch = Some(arch_tag(train_cfg.arch));

    let p = out.join("predictor.json");
    write_envelope(&p, "predictor", arch.clone(), &fit.predictor)?;
    written.push(p);
    let p = out.join("discriminator.json");
    write_envelope(&p, "discriminator", None, &fit.discriminator)?;
    written.push(p);
    let p = out.join("density.json");
    write_envelope(&p, "density", None, &q)?;
    written.push(p);

    let mut history = Table::new(&[
        ("iteration", ColType::Int),
        ("lf", ColType::Float),
        ("ld", ColType::Float),
        ("disc_acc", ColType::Float),
    ]);
    for h in &fit.history {
        history.push(vec![
            Cell::Int(h.iteration as i64),
            Cell::Float(h.lf),
            Cell::Float(h.ld.unwrap_or(f64::NAN)),
            Cell::Float(h.disc_acc.unwrap_or(f64::NAN)),
        ]);
    }
    let p = out.join("history.csv");
    history.write(&p)?;
    written.push(p);

    let yhat = fit.predictor.predict(ds.x())?;
    let cols: Vec<String> = (0..yhat.cols()).map(|j| format!("yhat{j}")).collect();
    let col_refs: Vec<(&str, ColType)> = cols.iter().map(|c| (c.as_str(), ColType::Float)).collect();
    let mut preds = Table::new(&col_refs);
    for i in 0..yhat.rows() {
        preds.push(yhat.row(i).iter().map(|v| Cell::Float(*v)).collect());
    }
    let p = out.join("predictions.csv");
    preds.write(&p)?;
    written.push(p);

    written.push(write_resolved(out, cfg)?);
    Ok(written)
}
