//! Scenario runners behind the CLI. Each run produces one JSON report plus
//! CSV tables; nothing time-dependent is written, so reruns with the same
//! seed are byte-identical.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::concentration_lab::{
    check_gaussian_concentration, check_weakdep_concentration, epsilon_net, influence_matrix,
    net_sandwich, shipped_fixtures, singular_extremes, tensorization_check, BlockJoint,
    ConcentrationReport, FiniteJoint, GaussianDesignSpec, TensorizationReport,
};
use crate::config::{
    ConcentrationConfig, End2EndConfig, ExperimentConfig, MechanismConfig, RecoverConfig,
    RobustifyConfig, Scenario, StructuredSetting,
};
use crate::error::{Error, Result};
use crate::harness::{
    diag_dominant_design, estimate_bic_violation, evaluate, separable_design, Auction,
    AuctionEnvironment, Evaluation, BIC_NOTE,
};
use crate::latent_model::{
    conditional_cube_sample, sample_coupled, sample_latent, LatentPrior, ProkhorovKernel,
};
use crate::mechanisms::{GrandBundlePrice, LatentMechanism, SequentialPostedPrice};
use crate::query_protocol::{
    diag_dominance_params, run_protocol, BidderOracle, QueryPlan, Setting,
};
use crate::rng::ExperimentSeed;
use crate::robustify::{
    build_random_grid, compose_algorithm1, kappa_budget, round_to_grid, Algorithm1Params,
    BoundBudget, ComposedRun,
};
use crate::stats::{binomial_three_sigma, ks_critical_value, ks_statistic, EstimateWithCi};

pub const BUILD_TAG: &str = concat!("latent-auction-v", env!("CARGO_PKG_VERSION"));

/// Command-line overrides of config values.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    /// Runs, draws or trials, depending on the scenario.
    pub trials: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub limit: f64,
}

impl Assertion {
    /// `measured <= limit`.
    fn at_most(name: impl Into<String>, measured: f64, limit: f64) -> Self {
        Assertion {
            name: name.into(),
            passed: measured <= limit,
            measured,
            limit,
        }
    }

    /// `measured >= limit`.
    fn at_least(name: impl Into<String>, measured: f64, limit: f64) -> Self {
        Assertion {
            name: name.into(),
            passed: measured >= limit,
            measured,
            limit,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub name: String,
    pub scenario: &'static str,
    pub seed: u64,
    pub build: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<&'static str>,
    pub results: serde_json::Value,
    pub assertions: Vec<Assertion>,
    pub passed: bool,
}

impl Report {
    pub fn assertion(&self, name: &str) -> Option<&Assertion> {
        self.assertions.iter().find(|a| a.name == name)
    }
}

/// A CSV table: header plus rows of already formatted cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub file: &'static str,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(file: &'static str, header: &[&'static str]) -> Self {
        Table {
            file,
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(self.file);
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Io(e.to_string()))?;
        w.write_record(&self.header)
            .map_err(|e| Error::Io(e.to_string()))?;
        for r in &self.rows {
            w.write_record(r).map_err(|e| Error::Io(e.to_string()))?;
        }
        w.flush()?;
        Ok(path)
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioOutput {
    pub report: Report,
    pub tables: Vec<Table>,
}

impl ScenarioOutput {
    /// Writes `report.json` and every table into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("report.json");
        let mut text =
            serde_json::to_string_pretty(&self.report).map_err(|e| Error::Io(e.to_string()))?;
        text.push('\n');
        std::fs::write(&path, text)?;
        let mut out = vec![path];
        for t in &self.tables {
            out.push(t.write(dir)?);
        }
        Ok(out)
    }
}

/// Runs the configured scenario in memory.
pub fn run_scenario(cfg: &ExperimentConfig, ov: Overrides) -> Result<ScenarioOutput> {
    let seed = ov.seed.unwrap_or(cfg.seed);
    let s = ExperimentSeed(seed);
    let (results, assertions, tables, note) = match &cfg.scenario {
        Scenario::Recover(r) => {
            let (v, a, t) = run_recover(r, s, ov.trials)?;
            (v, a, t, None)
        }
        Scenario::Robustify(r) => {
            let (v, a, t) = run_robustify(r, s, ov.trials)?;
            (v, a, t, None)
        }
        Scenario::Concentration(c) => {
            let (v, a, t) = run_concentration(c, s, ov.trials)?;
            (v, a, t, None)
        }
        Scenario::End2end(e) => {
            let (v, a, t) = run_end2end(e, cfg, s, ov.trials)?;
            (v, a, t, Some(BIC_NOTE))
        }
    };
    let passed = assertions.iter().all(|a| a.passed);
    Ok(ScenarioOutput {
        report: Report {
            name: cfg.name.clone(),
            scenario: cfg.scenario.kind().name(),
            seed,
            build: BUILD_TAG,
            note,
            results,
            assertions,
            passed,
        },
        tables,
    })
}

/// Runs the scenario and writes its files into `out`.
pub fn run_experiment(cfg: &ExperimentConfig, ov: Overrides, out: &Path) -> Result<Report> {
    let output = run_scenario(cfg, ov)?;
    output.write(out)?;
    Ok(output.report)
}

fn to_value<T: Serialize>(x: &T) -> Result<serde_json::Value> {
    serde_json::to_value(x).map_err(|e| Error::Io(e.to_string()))
}

fn fmt(x: f64) -> String {
    format!("{x}")
}

type Scenario3 = (serde_json::Value, Vec<Assertion>, Vec<Table>);

// ---------------------------------------------------------------------------
// recover

#[derive(Debug, Serialize)]
struct RecoverResults {
    setting: &'static str,
    n_items: usize,
    k: usize,
    eps: f64,
    eta: f64,
    runs: usize,
    max_error: f64,
    /// Largest `error / delta_out` over runs.
    max_error_ratio: f64,
    bound_failures: usize,
    queries_per_bidder: usize,
    query_formula: usize,
    query_cap: Option<usize>,
    varah_max_ratio: Option<f64>,
}

struct RecoverRun {
    error: f64,
    delta_out: f64,
    queries: usize,
    formula: usize,
    cap: usize,
    varah: Option<(f64, f64)>,
}

fn mat_inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn run_recover(r: &RecoverConfig, s: ExperimentSeed, runs: Option<usize>) -> Result<Scenario3> {
    let runs = runs.unwrap_or(r.runs);
    let eta = r.eta.unwrap_or(r.eps);
    let prior = LatentPrior::uniform(r.k);
    let per_run: Vec<RecoverRun> = (0..runs as u64)
        .into_par_iter()
        .map(|run| -> Result<RecoverRun> {
            let mut rng = s.rng_labeled("recover", run);
            let (a, perm, c, setting) = match r.setting {
                StructuredSetting::Separable => {
                    let (a, perm) = separable_design(r.n_items, r.k, &mut rng)?;
                    (a, perm, DMatrix::identity(r.k, r.k), Setting::Separable)
                }
                StructuredSetting::DiagDominant => {
                    let (a, perm, c) = diag_dominant_design(r.n_items, r.k, &mut rng)?;
                    (a, perm, c, Setting::DiagDominant)
                }
            };
            let plan = QueryPlan::from_permutation(setting, &perm, r.k, r.eps)?.with_eta(eta);
            let kernel = ProkhorovKernel::new(r.eps, r.noise, 0.0, 0.0)?;
            let pair = sample_coupled(&a, &prior, &kernel, &mut rng)?;
            let mut oracle = BidderOracle::truthful(pair.true_type.clone());
            let rec = run_protocol(&mut oracle, &a, &plan)?;
            let error = rec
                .z_hat
                .iter()
                .zip(pair.latent.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            let norm = a.inf_norm();
            let range = 2.0 * (norm + r.eps + eta);
            let per_row = (range / eta).log2().ceil() as usize;
            let cap = r.k
                * (norm.log2().ceil().max(0.0) as usize
                    + 2 * (1.0 / r.eps).log2().ceil() as usize
                    + 2);
            let varah = match r.setting {
                StructuredSetting::Separable => None,
                StructuredSetting::DiagDominant => {
                    let (alpha, beta) = diag_dominance_params(&c)?;
                    let gram = c.transpose() * &c;
                    let inv = gram.try_inverse().ok_or(Error::RankDeficient {
                        sigma_min: 0.0,
                        sigma_max: singular_extremes(&c).sigma_max,
                    })?;
                    let lhs = mat_inf_norm(&inv) * mat_inf_norm(&c.transpose());
                    let dmax = c.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
                    Some((lhs, 2.0 * dmax / (alpha * beta)))
                }
            };
            Ok(RecoverRun {
                error,
                delta_out: rec.delta_out,
                queries: oracle.query_count(),
                formula: r.k * per_row,
                cap,
                varah,
            })
        })
        .collect::<Result<_>>()?;

    let slack = r.eps + eta;
    let mut table = Table::new(
        "recover_runs.csv",
        &["run", "error", "delta_out", "queries"],
    );
    for (i, x) in per_run.iter().enumerate() {
        table.push(vec![
            i.to_string(),
            fmt(x.error),
            fmt(x.delta_out),
            x.queries.to_string(),
        ]);
    }
    let max_error = per_run.iter().map(|x| x.error).fold(0.0, f64::max);
    let max_ratio = per_run
        .iter()
        .map(|x| x.error / x.delta_out)
        .fold(0.0, f64::max);
    let bound_failures = per_run.iter().filter(|x| x.error > x.delta_out).count();
    let query_mismatch = per_run.iter().filter(|x| x.queries != x.formula).count();
    let queries = per_run.first().map_or(0, |x| x.queries);
    let formula = per_run.first().map_or(0, |x| x.formula);
    let max_queries = per_run.iter().map(|x| x.queries).max().unwrap_or(0);
    let min_cap = per_run.iter().map(|x| x.cap).min().unwrap_or(0);
    let varah_max = per_run
        .iter()
        .filter_map(|x| x.varah.map(|(l, r)| l / r))
        .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));

    let mut assertions = vec![
        Assertion::at_most(
            "recovery error within delta_out in every run",
            bound_failures as f64,
            0.0,
        ),
        Assertion::at_most(
            "query count equals k ceil(log2(range / eta)) in every run",
            query_mismatch as f64,
            0.0,
        ),
    ];
    let setting = match r.setting {
        StructuredSetting::Separable => {
            assertions.push(Assertion::at_most(
                "max recovery error over 4 (eps + eta)",
                max_error,
                4.0 * slack,
            ));
            assertions.push(Assertion::at_most(
                "queries within k (ceil log2 ||A|| + 2 ceil log2(1/eps) + 2)",
                max_queries as f64,
                min_cap as f64,
            ));
            "separable"
        }
        StructuredSetting::DiagDominant => {
            let violations = per_run
                .iter()
                .filter(|x| matches!(x.varah, Some((l, r)) if l > r))
                .count();
            assertions.push(Assertion::at_most(
                "Varah inequality on every sampled block",
                violations as f64,
                0.0,
            ));
            "diag_dominant"
        }
    };
    let results = RecoverResults {
        setting,
        n_items: r.n_items,
        k: r.k,
        eps: r.eps,
        eta,
        runs,
        max_error,
        max_error_ratio: max_ratio,
        bound_failures,
        queries_per_bidder: queries,
        query_formula: formula,
        query_cap: matches!(r.setting, StructuredSetting::Separable).then_some(min_cap),
        varah_max_ratio: varah_max,
    };
    Ok((to_value(&results)?, assertions, vec![table]))
}

// ---------------------------------------------------------------------------
// robustify

#[derive(Debug, Serialize)]
struct MarginalCheck {
    prior: String,
    delta: f64,
    draws: usize,
    ks: Vec<f64>,
    critical: f64,
    empty_mass: usize,
}

fn run_robustify(
    r: &RobustifyConfig,
    s: ExperimentSeed,
    draws: Option<usize>,
) -> Result<Scenario3> {
    let n = draws.unwrap_or(r.draws);
    let critical = ks_critical_value(n, n, r.alpha);
    let mut checks = Vec::new();
    let mut table = Table::new(
        "ks.csv",
        &["prior", "delta", "coordinate", "statistic", "critical"],
    );
    let mut assertions = Vec::new();
    for (pi, pc) in r.priors.iter().enumerate() {
        let prior = pc.build(r.k)?;
        for (di, &delta) in r.deltas.iter().enumerate() {
            let label = format!("marginals-{pi}-{di}");
            let pairs: Vec<(DVector<f64>, Option<DVector<f64>>)> = (0..n as u64)
                .into_par_iter()
                .map(|t| -> Result<_> {
                    let mut rng = s.rng_labeled(&label, t);
                    let z = sample_latent(&prior, &mut rng);
                    let grid = build_random_grid(r.k, delta, &mut rng)?;
                    let corner = round_to_grid(&z, &grid)?;
                    let resampled = match conditional_cube_sample(&prior, &corner, delta, &mut rng)
                    {
                        Ok(v) => Some(v),
                        Err(Error::EmptyMass { .. }) => None,
                        Err(e) => return Err(e),
                    };
                    let reference = sample_latent(&prior, &mut rng);
                    Ok((reference, resampled))
                })
                .collect::<Result<_>>()?;
            let empty_mass = pairs.iter().filter(|p| p.1.is_none()).count();
            let ks: Vec<f64> = (0..r.k)
                .map(|j| {
                    let a: Vec<f64> = pairs.iter().map(|p| p.0[j]).collect();
                    let b: Vec<f64> = pairs
                        .iter()
                        .filter_map(|p| p.1.as_ref().map(|v| v[j]))
                        .collect();
                    ks_statistic(&a, &b)
                })
                .collect();
            for (j, &d) in ks.iter().enumerate() {
                table.push(vec![
                    pc.label(),
                    fmt(delta),
                    j.to_string(),
                    fmt(d),
                    fmt(critical),
                ]);
            }
            let worst = ks.iter().copied().fold(0.0, f64::max);
            assertions.push(Assertion::at_most(
                format!("{} delta={delta}: max KS statistic", pc.label()),
                worst,
                critical,
            ));
            assertions.push(Assertion::at_most(
                format!("{} delta={delta}: empty-mass cells", pc.label()),
                empty_mass as f64,
                0.0,
            ));
            checks.push(MarginalCheck {
                prior: pc.label(),
                delta,
                draws: n,
                ks,
                critical,
                empty_mass,
            });
        }
    }
    Ok((to_value(&checks)?, assertions, vec![table]))
}

// ---------------------------------------------------------------------------
// concentration

#[derive(Debug, Serialize)]
struct GaussianResult {
    dim: usize,
    k: usize,
    report: ConcentrationReport,
}

#[derive(Debug, Serialize)]
struct SandwichResult {
    matrices: usize,
    net_size: usize,
    net_size_cap: f64,
    failures: usize,
    min_upper_gap: f64,
    min_lower_gap: f64,
}

#[derive(Debug, Serialize)]
struct FixtureResult {
    name: String,
    product: bool,
    influence_norm: f64,
    tensorization: TensorizationReport,
}

#[derive(Debug, Default, Serialize)]
struct ConcentrationResults {
    gaussian: Vec<GaussianResult>,
    weakdep: Option<ConcentrationReport>,
    sandwich: Option<SandwichResult>,
    tensorization: Vec<FixtureResult>,
}

/// Whether the joint equals the product of its marginals up to `tol`.
fn is_product(joint: &FiniteJoint, tol: f64) -> bool {
    let d = joint.dim();
    let sup = joint.supports();
    let probs = joint.probs();
    let index = |i: usize, v: f64| {
        sup[i]
            .iter()
            .position(|&s| s == v)
            .expect("value from support")
    };
    let mut marg: Vec<Vec<f64>> = sup.iter().map(|s| vec![0.0; s.len()]).collect();
    for (cell, &p) in probs.iter().enumerate() {
        for (i, &v) in joint.value_of(cell).iter().enumerate() {
            marg[i][index(i, v)] += p;
        }
    }
    probs.iter().enumerate().all(|(cell, &p)| {
        let vals = joint.value_of(cell);
        let q: f64 = (0..d).map(|i| marg[i][index(i, vals[i])]).product();
        (p - q).abs() <= tol
    })
}

fn push_trials(table: &mut Table, check: &str, rep: &ConcentrationReport) {
    for (t, (hi, lo)) in rep.sigma_max.iter().zip(&rep.sigma_min).enumerate() {
        table.push(vec![
            check.to_string(),
            t.to_string(),
            fmt(*hi),
            fmt(*lo),
            fmt(rep.upper_bound),
            fmt(rep.lower_bound),
        ]);
    }
}

fn run_concentration(
    c: &ConcentrationConfig,
    s: ExperimentSeed,
    trials: Option<usize>,
) -> Result<Scenario3> {
    let mut out = ConcentrationResults::default();
    let mut assertions = Vec::new();
    let mut table = Table::new(
        "concentration_trials.csv",
        &[
            "check",
            "trial",
            "sigma_max",
            "sigma_min",
            "upper_bound",
            "lower_bound",
        ],
    );
    if let Some(g) = &c.gaussian {
        for &dim in &g.dims {
            let spec = GaussianDesignSpec::identity(dim)?;
            let mut rng = s.rng_labeled("gaussian", dim as u64);
            let rep =
                check_gaussian_concentration(&spec, g.k, trials.unwrap_or(g.trials), &mut rng);
            assertions.push(Assertion::at_most(
                format!("gaussian dim={dim} k={}: violations", g.k),
                rep.violations as f64,
                0.0,
            ));
            push_trials(&mut table, &format!("gaussian-{dim}"), &rep);
            out.gaussian.push(GaussianResult {
                dim,
                k: g.k,
                report: rep,
            });
        }
    }
    if let Some(w) = &c.weakdep {
        let sampler = BlockJoint::rademacher(w.m, w.c)?;
        let mut rng = s.rng_labeled("weakdep", 0);
        let rep = check_weakdep_concentration(
            &sampler,
            sampler.influence_norm(),
            w.k,
            trials.unwrap_or(w.trials),
            &mut rng,
        );
        assertions.push(Assertion::at_most(
            format!("weakdep m={} k={}: violations", w.m, w.k),
            rep.violations as f64,
            0.0,
        ));
        push_trials(&mut table, "weakdep", &rep);
        out.weakdep = Some(rep);
    }
    if let Some(sw) = &c.sandwich {
        let net = epsilon_net(sw.cols, sw.eps)?;
        let cap = (3.0 / sw.eps).powi(sw.cols as i32);
        let gaps: Vec<(f64, f64)> = (0..sw.matrices as u64)
            .map(|i| -> Result<_> {
                let mut rng = s.rng_labeled("sandwich", i);
                let m = crate::concentration_lab::gaussian_design_sample(
                    &GaussianDesignSpec::identity(sw.rows)?,
                    sw.cols,
                    &mut rng,
                );
                let exact = singular_extremes(&m);
                let (upper, lower) = net_sandwich(&m, &net, sw.eps)?;
                Ok((upper - exact.sigma_max, exact.sigma_min - lower))
            })
            .collect::<Result<_>>()?;
        let failures = gaps
            .iter()
            .filter(|(u, l)| !(*u > -1e-8 && *l > -1e-8))
            .count();
        assertions.push(Assertion::at_most(
            "net sandwich brackets the singular values",
            failures as f64,
            0.0,
        ));
        assertions.push(Assertion::at_most("net size", net.len() as f64, cap));
        out.sandwich = Some(SandwichResult {
            matrices: sw.matrices,
            net_size: net.len(),
            net_size_cap: cap,
            failures,
            min_upper_gap: gaps.iter().map(|g| g.0).fold(f64::INFINITY, f64::min),
            min_lower_gap: gaps.iter().map(|g| g.1).fold(f64::INFINITY, f64::min),
        });
    }
    if let Some(t) = &c.tensorization {
        let mut failures = 0usize;
        let mut product_nonzero = 0usize;
        for (name, joint) in shipped_fixtures() {
            let product = is_product(&joint, 1e-15);
            let single = influence_matrix(&joint);
            let rep = tensorization_check(&joint, t.copies)?;
            if !rep.holds {
                failures += 1;
            }
            if product && single.matrix.iter().any(|&v| v != 0.0) {
                product_nonzero += 1;
            }
            out.tensorization.push(FixtureResult {
                name,
                product,
                influence_norm: single.norm,
                tensorization: rep,
            });
        }
        assertions.push(Assertion::at_most(
            "tensorization fails on fixtures",
            failures as f64,
            0.0,
        ));
        assertions.push(Assertion::at_most(
            "product fixtures with nonzero influence",
            product_nonzero as f64,
            0.0,
        ));
    }
    Ok((to_value(&out)?, assertions, vec![table]))
}

// ---------------------------------------------------------------------------
// end2end

#[derive(Debug, Serialize)]
struct BudgetReport {
    #[serde(flatten)]
    inputs: BoundBudget,
    kappa: f64,
    budget: f64,
    rebate: f64,
}

#[derive(Debug, Serialize)]
struct BicSummary {
    types: usize,
    deviations: usize,
    opponent_draws: usize,
    delta_at_kappa: f64,
    max_gain: f64,
    mean_gain: f64,
}

#[derive(Debug, Serialize)]
struct End2EndResults {
    n_items: usize,
    k: usize,
    bidders: usize,
    design_norm: f64,
    query_rows: Vec<usize>,
    queries_per_bidder: usize,
    budget: BudgetReport,
    composed: Evaluation,
    latent: Evaluation,
    revenue_gap: f64,
    combined_std_error: f64,
    bic: BicSummary,
    sample_run: ComposedRun,
}

fn run_end2end(
    e: &End2EndConfig,
    cfg: &ExperimentConfig,
    s: ExperimentSeed,
    trials: Option<usize>,
) -> Result<Scenario3> {
    let trials = trials.unwrap_or(e.trials);
    if trials < 2 {
        return Err(Error::config("trials", "need at least 2 trials"));
    }
    let built = e.build(cfg, s)?;
    let m = built.valuations.len();
    let design = built.design.clone();
    let inner: Arc<dyn LatentMechanism> = match &e.mechanism {
        MechanismConfig::SequentialPostedPrice { order, .. } => {
            Arc::new(SequentialPostedPrice::new(
                design.clone(),
                built.valuations.clone(),
                e.prices(cfg, &design)?,
                order.clone().unwrap_or_else(|| (0..m).collect()),
            )?)
        }
        MechanismConfig::GrandBundle { price } => Arc::new(GrandBundlePrice::new(
            design.clone(),
            built.valuations[0].clone(),
            *price,
        )?),
    };
    let eps1 = e.environment.coupling.eps1;
    let composed = compose_algorithm1(
        inner.clone(),
        built.priors.clone(),
        design.clone(),
        built.plan.clone(),
        &built.valuations,
        Algorithm1Params {
            eps1,
            eps: e.protocol.eps,
            c0: e.algorithm1.c0,
            jump_cap: built.jump_cap,
            rebate: e.algorithm1.rebate,
        },
    )?;
    let env = AuctionEnvironment::new(
        design.clone(),
        built.priors.clone(),
        built.kernels.clone(),
        built.valuations.clone(),
        s,
    )?;
    let (kappa, budget) = kappa_budget(composed.budget());

    let composed_eval = evaluate(Auction::Composed(&composed), &env, trials)?;
    let latent_eval = evaluate(Auction::Direct(inner.as_ref()), &env, trials)?;
    let bic_params = e.bic.params();
    let curve = estimate_bic_violation(Auction::Composed(&composed), &env, &bic_params)?;

    let sample_run = {
        let pairs = env.draw_types(0)?;
        let mut oracles: Vec<BidderOracle> = pairs
            .into_iter()
            .map(|p| BidderOracle::truthful(p.true_type))
            .collect();
        composed.execute(&mut oracles, &mut s.rng_labeled("mechanism", 0))?
    };

    let se = combined_se(&composed_eval.revenue, &latent_eval.revenue);
    let gap = latent_eval.revenue.mean - composed_eval.revenue.mean;
    let delta_kappa = curve.delta_at(kappa);
    let ir_rate = composed_eval.ir.rate;

    let assertions = vec![
        Assertion::at_least(
            "composed revenue >= latent revenue - c0 m kappa - m^2 eps1 H - 3 stderr",
            composed_eval.revenue.mean,
            latent_eval.revenue.mean - budget - 3.0 * se,
        ),
        Assertion::at_most(
            "BIC violation delta(kappa)",
            delta_kappa,
            eps1 + binomial_three_sigma(eps1, curve.gains.len()),
        ),
        Assertion::at_most(
            "ex-post IR violation rate",
            ir_rate,
            eps1 + binomial_three_sigma(eps1, composed_eval.ir.checks),
        ),
    ];

    let mut bic_table = Table::new("bic_curve.csv", &["rank", "gain", "delta"]);
    for (i, g) in curve.gains.iter().enumerate() {
        bic_table.push(vec![i.to_string(), fmt(*g), fmt(curve.delta_at(*g))]);
    }
    let mut rev_table = Table::new("revenue_trials.csv", &["trial", "composed", "latent"]);
    for (t, (a, b)) in composed_eval
        .revenues
        .iter()
        .zip(&latent_eval.revenues)
        .enumerate()
    {
        rev_table.push(vec![t.to_string(), fmt(*a), fmt(*b)]);
    }

    let results = End2EndResults {
        n_items: design.n_items(),
        k: design.k(),
        bidders: m,
        design_norm: design.inf_norm(),
        query_rows: built.plan.rows.clone(),
        queries_per_bidder: built.plan.queries_per_bidder(&design),
        budget: BudgetReport {
            inputs: *composed.budget(),
            kappa,
            budget,
            rebate: composed.rebate(),
        },
        revenue_gap: gap,
        combined_std_error: se,
        bic: BicSummary {
            types: curve.gains.len(),
            deviations: curve.deviations,
            opponent_draws: curve.opponent_draws,
            delta_at_kappa: delta_kappa,
            max_gain: curve.max_gain(),
            mean_gain: EstimateWithCi::from_samples(&curve.gains).mean,
        },
        composed: composed_eval,
        latent: latent_eval,
        sample_run,
    };
    Ok((to_value(&results)?, assertions, vec![bic_table, rev_table]))
}

/// Standard error of a difference of two independent means.
fn combined_se(a: &EstimateWithCi, b: &EstimateWithCi) -> f64 {
    (a.std_error * a.std_error + b.std_error * b.std_error).sqrt()
}
