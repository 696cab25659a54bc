//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines are printed even when output is captured; the
//! process exits non-zero if any criterion fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use latent_auction::concentration_lab::{
    check_gaussian_concentration, check_weakdep_concentration, epsilon_net, gaussian_design_sample,
    influence_matrix, net_sandwich, shipped_fixtures, singular_extremes, tensorization_check,
    BlockJoint, FiniteJoint, GaussianDesignSpec,
};
use latent_auction::config::ExperimentConfig;
use latent_auction::experiment::{run_scenario, Overrides};
use latent_auction::harness::{diag_dominant_design, separable_design};
use latent_auction::latent_model::{
    prokhorov_perturb, sample_latent, LatentPrior, ProkhorovKernel, SmallNoise,
};
use latent_auction::mechanisms::{execute, utility, SequentialPostedPrice};
use latent_auction::query_protocol::{
    diag_dominance_params, run_protocol, BidderOracle, QueryPlan, Setting,
};
use latent_auction::rng::ExperimentSeed;
use latent_auction::valuation::ConstrainedAdditiveValuation;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

type Outcome = Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion {
            id: 1,
            name: "separable recovery",
            limit: Duration::from_secs(5),
            run: separable_recovery,
        },
        Criterion {
            id: 2,
            name: "diagonally dominant recovery",
            limit: Duration::from_secs(10),
            run: diag_recovery,
        },
        Criterion {
            id: 3,
            name: "gaussian concentration",
            limit: Duration::from_secs(20),
            run: gaussian_concentration,
        },
        Criterion {
            id: 4,
            name: "weak-dependence concentration",
            limit: Duration::from_secs(20),
            run: weakdep_concentration,
        },
        Criterion {
            id: 5,
            name: "epsilon-net sandwich",
            limit: Duration::from_secs(30),
            run: net_sandwich_check,
        },
        Criterion {
            id: 6,
            name: "influence tensorization",
            limit: Duration::from_secs(30),
            run: tensorization,
        },
        Criterion {
            id: 7,
            name: "coupling law",
            limit: Duration::from_secs(30),
            run: coupling_law,
        },
        Criterion {
            id: 8,
            name: "marginal preservation",
            limit: Duration::from_secs(60),
            run: marginal_preservation,
        },
        Criterion {
            id: 9,
            name: "end-to-end budget",
            limit: Duration::from_secs(180),
            run: end_to_end,
        },
        Criterion {
            id: 10,
            name: "posted-price DSIC",
            limit: Duration::from_secs(30),
            run: posted_price_dsic,
        },
        Criterion {
            id: 11,
            name: "CLI determinism",
            limit: Duration::from_secs(120),
            run: cli_determinism,
        },
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for c in &criteria {
        if !filter.is_empty()
            && !filter
                .iter()
                .any(|f| c.name.contains(f.as_str()) || c.id.to_string() == *f)
        {
            continue;
        }
        let start = Instant::now();
        let outcome = (c.run)();
        let took = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) if took <= c.limit => (true, d),
            Ok(d) => (false, format!("{d}; too slow")),
            Err(d) => (false, d),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "{} criterion {:>2} {}: {} [{:.2}s, limit {}s]",
            if ok { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            detail,
            took.as_secs_f64(),
            c.limit.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lib<T>(r: latent_auction::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn sup_dist(a: &[f64], b: &DVector<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// True types `Az + u`, `u` uniform on the sup ball of radius `eps`.
fn noisy_type<R: Rng>(
    a: &latent_auction::latent_model::DesignMatrix,
    z: &DVector<f64>,
    eps: f64,
    rng: &mut R,
) -> DVector<f64> {
    let base = a.apply(z).expect("dimensions agree");
    base.map(|v| v + rng.random_range(-eps..=eps))
}

// 1 ---------------------------------------------------------------------------

fn separable_recovery() -> Outcome {
    const N: usize = 200;
    const K: usize = 8;
    const EPS: f64 = 1e-3;
    const RUNS: u64 = 1000;
    let eta = EPS;
    let seed = ExperimentSeed(101);
    let mut worst = 0.0f64;
    for run in 0..RUNS {
        let mut rng = seed.rng_labeled("acceptance-separable", run);
        let (a, perm) = lib(separable_design(N, K, &mut rng))?;
        let z = DVector::from_fn(K, |_, _| rng.random::<f64>());
        let t = noisy_type(&a, &z, EPS, &mut rng);
        let plan = lib(QueryPlan::from_permutation(
            Setting::Separable,
            &perm,
            K,
            EPS,
        ))?
        .with_eta(eta);
        let mut oracle = BidderOracle::truthful(t);
        let rec = lib(run_protocol(&mut oracle, &a, &plan))?;
        let err = sup_dist(&rec.z_hat, &z);
        worst = worst.max(err);
        ensure(err <= 4.0 * (EPS + eta), || {
            format!("run {run}: error {err:e} above {:e}", 4.0 * (EPS + eta))
        })?;
        let norm = a.inf_norm();
        let range = 2.0 * (norm + EPS + eta);
        let exact = K * (range / eta).log2().ceil() as usize;
        let cap =
            K * (norm.log2().ceil().max(0.0) as usize + 2 * (1.0 / EPS).log2().ceil() as usize + 2);
        let q = oracle.query_count();
        ensure(q == exact, || {
            format!("run {run}: {q} queries, expected {exact}")
        })?;
        ensure(q <= cap, || {
            format!("run {run}: {q} queries above cap {cap}")
        })?;
    }
    Ok(format!(
        "{RUNS} runs, max error {worst:.3e} <= {:.0e}",
        4.0 * (EPS + eta)
    ))
}

// 2 ---------------------------------------------------------------------------

fn diag_recovery() -> Outcome {
    const N: usize = 200;
    const K: usize = 8;
    const EPS: f64 = 1e-3;
    const RUNS: u64 = 1000;
    let eta = EPS;
    let seed = ExperimentSeed(202);
    let mut worst_ratio = 0.0f64;
    let mut worst_varah = 0.0f64;
    for run in 0..RUNS {
        let mut rng = seed.rng_labeled("acceptance-diag", run);
        let (a, perm, c) = lib(diag_dominant_design(N, K, &mut rng))?;
        let (alpha, beta) = lib(diag_dominance_params(&c))?;
        ensure(alpha >= 1.0 && beta >= 1.0, || {
            format!("run {run}: margins {alpha}, {beta} below 1")
        })?;
        let dmax = c.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let factor = 2.0 * dmax / (alpha * beta);

        let gram_inv = (c.transpose() * &c)
            .try_inverse()
            .ok_or_else(|| format!("run {run}: singular C"))?;
        let varah = inf_norm(&gram_inv) * inf_norm(&c.transpose());
        ensure(varah <= factor, || {
            format!("run {run}: Varah product {varah} above {factor}")
        })?;
        worst_varah = worst_varah.max(varah / factor);

        let z = DVector::from_fn(K, |_, _| rng.random::<f64>());
        let t = noisy_type(&a, &z, EPS, &mut rng);
        let plan = lib(QueryPlan::from_permutation(
            Setting::DiagDominant,
            &perm,
            K,
            EPS,
        ))?
        .with_eta(eta);
        let rec = lib(run_protocol(&mut BidderOracle::truthful(t), &a, &plan))?;
        let err = sup_dist(&rec.z_hat, &z);
        let bound = factor * (EPS + eta);
        ensure(err <= bound, || {
            format!("run {run}: error {err:e} above {bound:e}")
        })?;
        worst_ratio = worst_ratio.max(err / bound);
    }
    Ok(format!(
        "{RUNS} runs, max error/bound {worst_ratio:.3}, max Varah ratio {worst_varah:.3}"
    ))
}

// 3 ---------------------------------------------------------------------------

fn gaussian_concentration() -> Outcome {
    const K: usize = 8;
    const TRIALS: usize = 200;
    let mut parts = Vec::new();
    for dim in [512usize, 640] {
        let spec = lib(GaussianDesignSpec::identity(dim))?;
        let mut rng = ExperimentSeed(303).rng_labeled("acceptance-gaussian", dim as u64);
        let rep = check_gaussian_concentration(&spec, K, TRIALS, &mut rng);
        let tr = dim as f64;
        ensure(
            (rep.upper_bound - 2.0 * tr.sqrt()).abs() < 1e-12
                && (rep.lower_bound - tr.sqrt() / 4.0).abs() < 1e-12,
            || {
                format!(
                    "dim {dim}: bounds [{}, {}]",
                    rep.lower_bound, rep.upper_bound
                )
            },
        )?;
        ensure(rep.trials == TRIALS && rep.violations == 0, || {
            format!(
                "dim {dim}: {} violations in {} trials",
                rep.violations, rep.trials
            )
        })?;
        let smax = rep.sigma_max.iter().copied().fold(0.0, f64::max);
        let smin = rep.sigma_min.iter().copied().fold(f64::INFINITY, f64::min);
        parts.push(format!(
            "Tr={dim}: sigma in [{smin:.2}, {smax:.2}] within [{:.2}, {:.2}]",
            rep.lower_bound, rep.upper_bound
        ));
    }
    Ok(parts.join("; "))
}

// 4 ---------------------------------------------------------------------------

fn weakdep_concentration() -> Outcome {
    const M: usize = 1024;
    const K: usize = 2;
    const TRIALS: usize = 200;
    let sampler = lib(BlockJoint::rademacher(M, 1.0))?;
    let norm = sampler.influence_norm();
    ensure(norm == 0.0, || {
        format!("independent coordinates have influence norm {norm}")
    })?;
    let mut rng = ExperimentSeed(404).rng_labeled("acceptance-weakdep", 0);
    let rep = check_weakdep_concentration(&sampler, norm, K, TRIALS, &mut rng);
    let v = 32.0;
    ensure(
        rep.upper_bound == 2.0 * v && rep.lower_bound == v / 4.0,
        || {
            format!(
                "bounds [{}, {}] instead of [8, 64]",
                rep.lower_bound, rep.upper_bound
            )
        },
    )?;
    ensure(rep.trials == TRIALS && rep.violations == 0, || {
        format!("{} violations", rep.violations)
    })?;
    let smax = rep.sigma_max.iter().copied().fold(0.0, f64::max);
    let smin = rep.sigma_min.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(format!(
        "{TRIALS} trials, sigma in [{smin:.2}, {smax:.2}] within [8, 64]"
    ))
}

// 5 ---------------------------------------------------------------------------

fn net_sandwich_check() -> Outcome {
    const TOL: f64 = 1e-8;
    let eps = 1.0 / 7.0;
    let net = lib(epsilon_net(3, eps))?;
    let cap = 21usize.pow(3);
    ensure(net.len() <= cap, || {
        format!("|K| = {} above {cap}", net.len())
    })?;
    let spec = lib(GaussianDesignSpec::identity(10))?;
    for i in 0..100u64 {
        let mut rng = ExperimentSeed(505).rng_labeled("acceptance-sandwich", i);
        let m = gaussian_design_sample(&spec, 3, &mut rng);
        let exact = singular_extremes(&m);
        let (upper, lower) = lib(net_sandwich(&m, &net, eps))?;
        ensure(
            upper > exact.sigma_max - TOL && lower < exact.sigma_min + TOL,
            || {
                format!(
                    "matrix {i}: [{lower}, {upper}] does not bracket [{}, {}]",
                    exact.sigma_min, exact.sigma_max
                )
            },
        )?;
    }
    Ok(format!(
        "100 matrices bracketed, |K| = {} <= {cap}",
        net.len()
    ))
}

// 6 ---------------------------------------------------------------------------

/// Whether the table equals the product of its marginals exactly.
fn is_product(j: &FiniteJoint) -> bool {
    let d = j.dim();
    let pos = |i: usize, v: f64| j.supports()[i].iter().position(|&s| s == v).unwrap();
    let mut marg: Vec<Vec<f64>> = j.supports().iter().map(|s| vec![0.0; s.len()]).collect();
    for (cell, &p) in j.probs().iter().enumerate() {
        for (i, &v) in j.value_of(cell).iter().enumerate() {
            marg[i][pos(i, v)] += p;
        }
    }
    j.probs().iter().enumerate().all(|(cell, &p)| {
        let vals = j.value_of(cell);
        let q: f64 = (0..d).map(|i| marg[i][pos(i, vals[i])]).product();
        (p - q).abs() <= 1e-15
    })
}

fn tensorization() -> Outcome {
    const TOL: f64 = 1e-10;
    let fixtures = shipped_fixtures();
    ensure(fixtures.len() == 20, || {
        format!("{} fixtures shipped", fixtures.len())
    })?;
    let mut products = 0;
    for (name, joint) in &fixtures {
        let single = influence_matrix(joint).matrix;
        let doubled = influence_matrix(&lib(joint.copies(2))?).matrix;
        let d = joint.dim();
        let mut expected = DMatrix::zeros(2 * d, 2 * d);
        expected.view_mut((0, 0), (d, d)).copy_from(&single);
        expected.view_mut((d, d), (d, d)).copy_from(&single);
        let gap = (&doubled - &expected).amax();
        ensure(gap <= TOL, || {
            format!("{name}: INF(U) differs from I_2 (x) INF(X) by {gap:e}")
        })?;
        let rep = lib(tensorization_check(joint, 2))?;
        ensure(rep.holds, || {
            format!(
                "{name}: tensorization_check reports a gap of {:e}",
                rep.max_entry_gap
            )
        })?;
        if is_product(joint) {
            products += 1;
            ensure(
                single.iter().all(|&v| v == 0.0) && doubled.iter().all(|&v| v == 0.0),
                || format!("{name}: product joint with nonzero influence"),
            )?;
        }
    }
    ensure(products > 0, || "no product fixtures found".into())?;
    Ok(format!(
        "{} fixtures, {products} products with INF exactly 0",
        fixtures.len()
    ))
}

// 7 ---------------------------------------------------------------------------

fn coupling_law() -> Outcome {
    const N_DRAWS: usize = 10_000;
    let mut parts = Vec::new();
    for (idx, eps1) in [0.01f64, 0.05].into_iter().enumerate() {
        let mut rng = ExperimentSeed(707).rng_labeled("acceptance-coupling", idx as u64);
        let (a, _) = lib(separable_design(20, 3, &mut rng))?;
        let kernel = lib(ProkhorovKernel::new(
            eps1,
            SmallNoise::Uniform,
            eps1,
            a.inf_norm(),
        ))?;
        let prior = LatentPrior::uniform(3);
        let mut violations = 0usize;
        for _ in 0..N_DRAWS {
            let z = sample_latent(&prior, &mut rng);
            let t = lib(prokhorov_perturb(&a, &z, &kernel, &mut rng))?;
            let base = lib(a.apply(&z))?;
            if (t - base).amax() > eps1 {
                violations += 1;
            }
        }
        let rate = violations as f64 / N_DRAWS as f64;
        let limit = eps1 + 3.0 * (eps1 / N_DRAWS as f64).sqrt();
        ensure(rate <= limit, || {
            format!("eps1 = {eps1}: violation rate {rate} above {limit:.4}")
        })?;
        parts.push(format!("eps1={eps1}: rate {rate:.4} <= {limit:.4}"));
    }
    Ok(parts.join("; "))
}

// 8 ---------------------------------------------------------------------------

fn marginal_preservation() -> Outcome {
    let text = r#"{
        "name": "acceptance-marginals",
        "seed": 808,
        "scenario": {
            "kind": "robustify",
            "priors": [{"kind": "uniform"}, {"kind": "truncated_gaussian", "mean": 0.4, "sd": 0.2}],
            "k": 3,
            "deltas": [0.05, 0.25],
            "draws": 10000,
            "alpha": 0.01
        }
    }"#;
    let cfg = lib(ExperimentConfig::from_json(text, "."))?;
    let out = lib(run_scenario(&cfg, Overrides::default()))?;
    // Two-sample KS critical value at 1% for n = m = 10^4.
    let critical = 1.628 * (2.0f64 / 10_000.0).sqrt();
    let rows = &out.tables[0].rows;
    ensure(rows.len() == 2 * 2 * 3, || {
        format!("{} KS rows", rows.len())
    })?;
    let mut worst = 0.0f64;
    for r in rows {
        let d: f64 = r[3].parse().map_err(|e| format!("{e}"))?;
        worst = worst.max(d);
        ensure(d < critical, || {
            format!(
                "{} delta {} coordinate {}: KS {d} >= {critical:.4}",
                r[0], r[1], r[2]
            )
        })?;
    }
    ensure(out.report.passed, || {
        "robustify scenario reported a failed assertion".into()
    })?;
    Ok(format!(
        "12 coordinate checks, max KS {worst:.4} < {critical:.4}"
    ))
}

// 9 ---------------------------------------------------------------------------

fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn get(v: &serde_json::Value, path: &str) -> Result<f64, String> {
    path.split('.')
        .try_fold(v, |acc, key| acc.get(key))
        .and_then(|x| x.as_f64())
        .ok_or_else(|| format!("report has no number at {path}"))
}

fn end_to_end() -> Outcome {
    let cfg = lib(ExperimentConfig::load(
        manifest_dir().join("configs/separable-benchmark.json"),
    ))?;
    let out = lib(run_scenario(&cfg, Overrides::default()))?;
    let r = &out.report.results;

    // The benchmark is the one the criterion describes.
    let m = get(r, "bidders")?;
    let eps1 = get(r, "budget.eps1")?;
    let eps = get(r, "budget.eps")?;
    let pinned = [
        ("bidders", m, 2.0),
        ("k", get(r, "k")?, 4.0),
        ("n_items", get(r, "n_items")?, 100.0),
        ("lipschitz", get(r, "budget.lipschitz")?, 2.0),
        ("eps1", eps1, 1e-3),
        ("eps", eps, 1e-3),
        ("c0", get(r, "budget.c0")?, 1.0),
        ("trials", get(r, "composed.revenue.trials")?, 1e4),
        ("types", get(r, "bic.types")?, 500.0),
        ("deviations", get(r, "bic.deviations")?, 16.0),
    ];
    for (name, got, want) in pinned {
        ensure(got == want, || {
            format!("benchmark {name} = {got}, expected {want}")
        })?;
    }
    let delta_grid = get(r, "budget.delta_grid")?;
    ensure((delta_grid - (m * eps).sqrt()).abs() < 1e-15, || {
        format!("grid side {delta_grid}")
    })?;

    // Budget recomputed from its definition.
    let l = 2.0;
    let norm = get(r, "design_norm")?;
    let kappa = l * eps1 + norm * l * m * eps + norm * l * (m * eps).sqrt();
    let h = l * (0.0 + norm + norm);
    let budget = m * kappa + m * m * eps1 * h;
    ensure((get(r, "budget.kappa")? - kappa).abs() < 1e-12, || {
        "kappa disagrees with its definition".into()
    })?;
    ensure((get(r, "budget.budget")? - budget).abs() < 1e-12, || {
        "budget disagrees with its definition".into()
    })?;

    // (a) revenue
    let rev = get(r, "composed.revenue.mean")?;
    let rev_hat = get(r, "latent.revenue.mean")?;
    let se = get(r, "composed.revenue.std_error")?.hypot(get(r, "latent.revenue.std_error")?);
    let floor = rev_hat - budget - 3.0 * se;
    ensure(rev >= floor, || {
        format!("(a) revenue {rev:.4} below {floor:.4}")
    })?;

    // (b) BIC at kappa
    let types = get(r, "bic.types")? as usize;
    let sigma3 = 3.0 * (eps1 * (1.0 - eps1) / types as f64).sqrt();
    let gains: Vec<f64> = out
        .tables
        .iter()
        .find(|t| t.file == "bic_curve.csv")
        .ok_or("no BIC curve table")?
        .rows
        .iter()
        .map(|row| row[1].parse::<f64>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    ensure(gains.len() == types, || {
        format!("{} gains for {types} types", gains.len())
    })?;
    let delta = gains.iter().filter(|&&g| g > kappa).count() as f64 / types as f64;
    ensure(delta <= eps1 + sigma3, || {
        format!("(b) delta(kappa) = {delta} above {:.4}", eps1 + sigma3)
    })?;

    // (c) ex-post IR with the rebate on
    ensure(get(r, "budget.rebate")? > 0.0, || "rebate is off".into())?;
    let checks = get(r, "composed.ir.checks")? as usize;
    let ir_rate = get(r, "composed.ir.rate")?;
    let ir_limit = eps1 + 3.0 * (eps1 * (1.0 - eps1) / checks as f64).sqrt();
    ensure(ir_rate <= ir_limit, || {
        format!("(c) IR violation rate {ir_rate} above {ir_limit:.4}")
    })?;

    Ok(format!(
        "(a) {rev:.4} >= {floor:.4}; (b) delta({kappa:.4}) = {delta} <= {:.4}, max gain {:.4}; (c) IR rate {ir_rate} <= {ir_limit:.4}",
        eps1 + sigma3,
        gains.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    ))
}

// 10 --------------------------------------------------------------------------

fn posted_price_dsic() -> Outcome {
    const TOL: f64 = 1e-12;
    let grid: Vec<DVector<f64>> = (0..25)
        .map(|c| DVector::from_vec(vec![(c / 5) as f64 / 4.0, (c % 5) as f64 / 4.0]))
        .collect();
    let mut checked = 0usize;
    for inst in 0..4u64 {
        let mut rng = ExperimentSeed(1010).rng_labeled("acceptance-dsic", inst);
        let a = Arc::new(lib(latent_auction::latent_model::DesignMatrix::new(
            DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..=1.0)),
        ))?);
        let mu = DVector::from_fn(4, |_, _| rng.random_range(0.0..0.5));
        let val = lib(ConstrainedAdditiveValuation::c_demand(
            mu,
            1 + inst as usize % 2,
        ))?;
        let prices = DVector::from_fn(4, |_, _| rng.random_range(0.0..1.0));
        let order = if inst % 2 == 0 {
            vec![0, 1]
        } else {
            vec![1, 0]
        };
        let mech = lib(SequentialPostedPrice::new(
            a.clone(),
            vec![val.clone(), val.clone()],
            prices,
            order,
        ))?;
        let mut mrng = ExperimentSeed(0).rng_labeled("unused", 0);
        for i in 0..2 {
            for z in &grid {
                let t = lib(a.apply(z))?;
                for other in &grid {
                    let profile = |mine: &DVector<f64>| {
                        if i == 0 {
                            vec![mine.clone(), other.clone()]
                        } else {
                            vec![other.clone(), mine.clone()]
                        }
                    };
                    let truth = lib(execute(&mech, &profile(z), &mut mrng))?;
                    let u_truth = lib(utility(&val, &t, &truth, i))?;
                    ensure(u_truth >= -TOL, || {
                        format!("instance {inst}: negative truthful utility {u_truth}")
                    })?;
                    for lie in &grid {
                        let dev = lib(execute(&mech, &profile(lie), &mut mrng))?;
                        let u_dev = lib(utility(&val, &t, &dev, i))?;
                        checked += 1;
                        ensure(u_dev <= u_truth + TOL, || {
                            format!(
                                "instance {inst}, bidder {i}: misreport gains {}",
                                u_dev - u_truth
                            )
                        })?;
                    }
                }
            }
        }
    }
    Ok(format!(
        "{checked} (type, misreport, opponent) triples, no profitable deviation"
    ))
}

// 11 --------------------------------------------------------------------------

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_latent-auction"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.code() == Some(0), || {
        format!(
            "{args:?} exited with {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn read_dir_bytes(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .map_err(|e| e.to_string())?
        .map(|e| {
            let p = e.map_err(|e| e.to_string())?.path();
            let bytes = std::fs::read(&p).map_err(|e| e.to_string())?;
            Ok((p.file_name().unwrap().to_string_lossy().into_owned(), bytes))
        })
        .collect::<Result<_, String>>()?;
    files.sort();
    Ok(files)
}

fn cli_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let small_e2e = tmp.path().join("e2e.json");
    std::fs::write(
        &small_e2e,
        r#"{
            "name": "determinism-e2e",
            "seed": 5,
            "scenario": {
                "kind": "end2end",
                "environment": {
                    "design": {"kind": "separable", "n_items": 12, "k": 2},
                    "bidders": 2,
                    "prior": {"kind": "uniform"},
                    "valuation": {"kind": "c_demand", "c": 2},
                    "coupling": {"eps1": 0.001}
                },
                "mechanism": {"kind": "sequential_posted_price", "prices": {"row_sum_factor": 0.55}},
                "protocol": {"eps": 0.001},
                "trials": 200,
                "bic": {"types": 20, "fresh_deviations": 4, "structured_deviations": 4, "opponent_draws": 16}
            }
        }"#,
    )
    .map_err(|e| e.to_string())?;
    let configs = manifest_dir().join("configs");
    let runs: Vec<(&str, PathBuf, &str)> = vec![
        ("recover", configs.join("separable-recover.json"), "100"),
        ("recover", configs.join("diag-dominant-recover.json"), "100"),
        (
            "robustify",
            configs.join("robustify-marginals.json"),
            "2000",
        ),
        ("concentration", configs.join("concentration.json"), "20"),
        ("end2end", small_e2e, "200"),
    ];
    for (idx, (cmd, cfg, trials)) in runs.iter().enumerate() {
        let mut reports = Vec::new();
        for rep in 0..2 {
            let dir = tmp.path().join(format!("run-{idx}-{rep}"));
            let cfg = cfg.to_string_lossy();
            let dir_s = dir.to_string_lossy();
            cli(&[
                cmd, "--config", &cfg, "--seed", "42", "--trials", trials, "--out", &dir_s,
            ])?;
            reports.push(read_dir_bytes(&dir)?);
        }
        ensure(reports[0].iter().any(|(n, _)| n == "report.json"), || {
            format!("{cmd}: no report.json")
        })?;
        ensure(reports[0] == reports[1], || {
            format!("{cmd} {}: outputs differ between runs", cfg.display())
        })?;
    }
    // A different seed must change the report.
    let a = tmp.path().join("seed-a");
    let b = tmp.path().join("seed-b");
    let cfg = configs.join("separable-recover.json");
    let cfg = cfg.to_string_lossy();
    cli(&[
        "recover",
        "--config",
        &cfg,
        "--seed",
        "1",
        "--trials",
        "20",
        "--out",
        &a.to_string_lossy(),
    ])?;
    cli(&[
        "recover",
        "--config",
        &cfg,
        "--seed",
        "2",
        "--trials",
        "20",
        "--out",
        &b.to_string_lossy(),
    ])?;
    let ra = std::fs::read(a.join("report.json")).map_err(|e| e.to_string())?;
    let rb = std::fs::read(b.join("report.json")).map_err(|e| e.to_string())?;
    ensure(ra != rb, || {
        "different seeds produced identical reports".into()
    })?;
    Ok(format!(
        "{} CLI runs repeated with byte-identical outputs",
        runs.len()
    ))
}
