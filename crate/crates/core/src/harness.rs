//! Monte Carlo estimation of revenue, interim incentive violations and
//! ex-post individual rationality.
//!
//! Every trial draws from streams derived from the environment seed and the
//! trial index, so estimates are reproducible and independent of thread
//! scheduling.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::latent_model::{
    sample_coupled, sample_latent, CoupledPair, DesignMatrix, LatentPrior, ProkhorovKernel,
};
use crate::mechanisms::{execute, LatentMechanism, Outcome};
use crate::query_protocol::{run_protocol, BidderOracle};
use crate::rng::{ExperimentSeed, SimRng};
use crate::robustify::ComposedMechanism;
use crate::stats::{pairwise_sum, EstimateWithCi};
use crate::valuation::ConstrainedAdditiveValuation;

pub use crate::stats::EstimateWithCi as Estimate;

/// Ex-post utilities below `-IR_TOL` count as IR violations; the slack only
/// absorbs summation-order round-off.
pub const IR_TOL: f64 = 1e-12;

/// Everything needed to draw bidders and evaluate their utilities.
#[derive(Debug, Clone)]
pub struct AuctionEnvironment {
    design: Arc<DesignMatrix>,
    priors: Vec<LatentPrior>,
    kernels: Vec<ProkhorovKernel>,
    valuations: Vec<ConstrainedAdditiveValuation>,
    seed: ExperimentSeed,
}

impl AuctionEnvironment {
    pub fn new(
        design: Arc<DesignMatrix>,
        priors: Vec<LatentPrior>,
        kernels: Vec<ProkhorovKernel>,
        valuations: Vec<ConstrainedAdditiveValuation>,
        seed: ExperimentSeed,
    ) -> Result<Self> {
        let m = priors.len();
        for len in [kernels.len(), valuations.len()] {
            if len != m {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    actual: len,
                });
            }
        }
        for p in &priors {
            if p.dim() != design.k() {
                return Err(Error::DimensionMismatch {
                    expected: design.k(),
                    actual: p.dim(),
                });
            }
            p.validate(1e-9)?;
        }
        if let Some(v) = valuations.iter().find(|v| v.n_items() != design.n_items()) {
            return Err(Error::DimensionMismatch {
                expected: design.n_items(),
                actual: v.n_items(),
            });
        }
        Ok(AuctionEnvironment {
            design,
            priors,
            kernels,
            valuations,
            seed,
        })
    }

    /// `m` identical bidders.
    pub fn symmetric(
        design: Arc<DesignMatrix>,
        bidders: usize,
        prior: LatentPrior,
        kernel: ProkhorovKernel,
        valuation: ConstrainedAdditiveValuation,
        seed: ExperimentSeed,
    ) -> Result<Self> {
        Self::new(
            design,
            vec![prior; bidders],
            vec![kernel; bidders],
            vec![valuation; bidders],
            seed,
        )
    }

    pub fn design(&self) -> &Arc<DesignMatrix> {
        &self.design
    }

    pub fn priors(&self) -> &[LatentPrior] {
        &self.priors
    }

    pub fn kernels(&self) -> &[ProkhorovKernel] {
        &self.kernels
    }

    pub fn valuations(&self) -> &[ConstrainedAdditiveValuation] {
        &self.valuations
    }

    pub fn seed(&self) -> ExperimentSeed {
        self.seed
    }

    pub fn bidders(&self) -> usize {
        self.priors.len()
    }

    pub fn n_items(&self) -> usize {
        self.design.n_items()
    }

    pub fn k(&self) -> usize {
        self.design.k()
    }

    /// Latent and true types of every bidder for one trial.
    pub fn draw_types(&self, trial: u64) -> Result<Vec<CoupledPair>> {
        let mut rng = self.seed.rng_labeled("types", trial);
        self.draw_with(&mut rng, 0..self.bidders())
    }

    fn draw_with(
        &self,
        rng: &mut SimRng,
        who: impl Iterator<Item = usize>,
    ) -> Result<Vec<CoupledPair>> {
        who.map(|i| sample_coupled(&self.design, &self.priors[i], &self.kernels[i], rng))
            .collect()
    }
}

/// What is being evaluated.
#[derive(Debug, Clone, Copy)]
pub enum Auction<'a> {
    /// The latent mechanism on truthful latent reports drawn from the model.
    Direct(&'a dyn LatentMechanism),
    /// The query-based composition interacting with bidders' true types.
    Composed(&'a ComposedMechanism),
}

/// One trial: the outcome and the item-space types utilities are measured in.
fn run_trial(
    auction: Auction<'_>,
    env: &AuctionEnvironment,
    trial: u64,
) -> Result<(Outcome, Vec<DVector<f64>>, TrialInfo)> {
    let pairs = env.draw_types(trial)?;
    let mut rng = env.seed.rng_labeled("mechanism", trial);
    match auction {
        Auction::Direct(m) => {
            let profile: Vec<DVector<f64>> = pairs.iter().map(|p| p.latent.clone()).collect();
            let outcome = execute(m, &profile, &mut rng)?;
            let types = profile
                .iter()
                .map(|z| env.design.apply(z))
                .collect::<Result<Vec<_>>>()?;
            Ok((outcome, types, TrialInfo::default()))
        }
        Auction::Composed(c) => {
            let mut oracles: Vec<BidderOracle> = pairs
                .iter()
                .map(|p| BidderOracle::truthful(p.true_type.clone()))
                .collect();
            let run = c.execute(&mut oracles, &mut rng)?;
            let info = TrialInfo {
                empty_mass: run.diagnostics.empty_mass.len(),
                rebate: run.diagnostics.rebate_total,
                queries: oracles.iter().map(|o| o.query_count()).sum(),
            };
            let types = pairs.into_iter().map(|p| p.true_type).collect();
            Ok((run.outcome, types, info))
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct TrialInfo {
    empty_mass: usize,
    rebate: f64,
    queries: usize,
}

/// Ex-post IR tally.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IrReport {
    /// Bidder-trial pairs checked.
    pub checks: usize,
    pub violations: usize,
    pub rate: f64,
    /// Largest shortfall `p_i - v_i(t_i, bundle_i)` over violations.
    pub max_deficit: f64,
}

/// Revenue, IR and bookkeeping from one pass of trials.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub revenue: EstimateWithCi,
    pub ir: IrReport,
    pub empty_mass_events: usize,
    pub rebate_total: f64,
    pub queries_total: usize,
    /// Per-trial revenue, in trial order.
    #[serde(skip)]
    pub revenues: Vec<f64>,
}

/// Runs `trials` independent trials and tallies revenue and IR together.
pub fn evaluate(
    auction: Auction<'_>,
    env: &AuctionEnvironment,
    trials: usize,
) -> Result<Evaluation> {
    let per_trial: Vec<(f64, Vec<f64>, TrialInfo)> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let (outcome, types, info) = run_trial(auction, env, t)?;
            let utils = (0..env.bidders())
                .map(|i| {
                    Ok(env.valuations[i].value(&types[i], &outcome.bundles[i])?
                        - outcome.payments[i])
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok((outcome.revenue(), utils, info))
        })
        .collect::<Result<_>>()?;
    let revenues: Vec<f64> = per_trial.iter().map(|(r, _, _)| *r).collect();
    let mut ir = IrReport {
        checks: 0,
        violations: 0,
        rate: 0.0,
        max_deficit: 0.0,
    };
    for (_, utils, _) in &per_trial {
        for &u in utils {
            ir.checks += 1;
            if u < -IR_TOL {
                ir.violations += 1;
                ir.max_deficit = ir.max_deficit.max(-u);
            }
        }
    }
    if ir.checks > 0 {
        ir.rate = ir.violations as f64 / ir.checks as f64;
    }
    let rebates: Vec<f64> = per_trial.iter().map(|(_, _, i)| i.rebate).collect();
    Ok(Evaluation {
        revenue: EstimateWithCi::from_samples(&revenues),
        ir,
        empty_mass_events: per_trial.iter().map(|(_, _, i)| i.empty_mass).sum(),
        rebate_total: pairwise_sum(&rebates),
        queries_total: per_trial.iter().map(|(_, _, i)| i.queries).sum(),
        revenues,
    })
}

/// Mean summed payments over `trials` draws of the bidders.
pub fn estimate_revenue(
    auction: Auction<'_>,
    env: &AuctionEnvironment,
    trials: usize,
) -> Result<EstimateWithCi> {
    if trials < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 trials, got {trials}"
        )));
    }
    Ok(evaluate(auction, env, trials)?.revenue)
}

/// Counts bidder-trials with negative ex-post utility, measured with the true type.
pub fn check_ir(auction: Auction<'_>, env: &AuctionEnvironment, trials: usize) -> Result<IrReport> {
    Ok(evaluate(auction, env, trials)?.ir)
}

// ---------------------------------------------------------------------------
// Interim incentive violations

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BicParams {
    /// Sampled true types; type `s` belongs to bidder `s mod m`.
    pub types: usize,
    /// Deviations that mimic a fresh draw from the bidder's prior.
    pub fresh_deviations: usize,
    /// Deviations `t + s A d` at scales `{scale, 2 scale}` along `+-1` and `+-e_j`.
    pub structured_deviations: usize,
    /// Opponent draws averaged per interim utility.
    pub opponent_draws: usize,
    /// Perturbation scale; the grid side for compositions when unset.
    pub scale: Option<f64>,
}

impl Default for BicParams {
    fn default() -> Self {
        BicParams {
            types: 500,
            fresh_deviations: 8,
            structured_deviations: 8,
            opponent_draws: 256,
            scale: None,
        }
    }
}

impl BicParams {
    pub fn deviations(&self) -> usize {
        self.fresh_deviations + self.structured_deviations
    }
}

pub const BIC_NOTE: &str =
    "interim gains are maximized over a finite deviation set only, so every \
                            delta(eps) reported here is a lower bound on the true violation";

/// Sorted per-type maximal interim gains and the induced `eps -> delta(eps)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BicViolationCurve {
    pub gains: Vec<f64>,
    pub deviations: usize,
    pub opponent_draws: usize,
    pub note: &'static str,
}

impl BicViolationCurve {
    pub fn from_gains(mut gains: Vec<f64>, deviations: usize, opponent_draws: usize) -> Self {
        gains.sort_by(f64::total_cmp);
        BicViolationCurve {
            gains,
            deviations,
            opponent_draws,
            note: BIC_NOTE,
        }
    }

    /// Fraction of sampled types whose best deviation gains more than `eps`.
    pub fn delta_at(&self, eps: f64) -> f64 {
        if self.gains.is_empty() {
            return 0.0;
        }
        let above = self.gains.len() - self.gains.partition_point(|&g| g <= eps);
        above as f64 / self.gains.len() as f64
    }

    pub fn max_gain(&self) -> f64 {
        self.gains.last().copied().unwrap_or(f64::NEG_INFINITY)
    }
}

/// Substitute reports for bidder `i` of type index `s`. Fresh deviations are
/// model types `A z'`; structured ones move the latent type by `s d`.
fn deviation_latents(
    env: &AuctionEnvironment,
    i: usize,
    s: usize,
    z: &DVector<f64>,
    params: &BicParams,
    scale: f64,
    rng: &mut SimRng,
) -> Vec<DVector<f64>> {
    let k = env.k();
    let mut out: Vec<DVector<f64>> = (0..params.fresh_deviations)
        .map(|_| sample_latent(&env.priors[i], rng))
        .collect();
    for idx in 0..params.structured_deviations {
        let step = scale * (1 + idx % 2) as f64;
        let j = (s + idx / 8) % k;
        let dir = match (idx / 2) % 4 {
            0 => DVector::from_element(k, 1.0),
            1 => DVector::from_element(k, -1.0),
            2 => DVector::from_fn(k, |r, _| if r == j { 1.0 } else { 0.0 }),
            _ => DVector::from_fn(k, |r, _| if r == j { -1.0 } else { 0.0 }),
        };
        out.push(z + dir * step);
    }
    out
}

/// Interim gains of the best deviation for `params.types` sampled types.
///
/// Truthful and deviating utilities for one type share the opponent draws
/// and the mechanism's random stream, so for a dominant-strategy mechanism
/// every gain is at most rounding error.
pub fn estimate_bic_violation(
    auction: Auction<'_>,
    env: &AuctionEnvironment,
    params: &BicParams,
) -> Result<BicViolationCurve> {
    if params.deviations() == 0 {
        return Err(Error::InvalidArgument(
            "at least one deviation is required".into(),
        ));
    }
    if params.opponent_draws == 0 {
        return Err(Error::InvalidArgument(
            "at least one opponent draw is required".into(),
        ));
    }
    let m = env.bidders();
    if m == 0 {
        return Ok(BicViolationCurve::from_gains(
            Vec::new(),
            params.deviations(),
            params.opponent_draws,
        ));
    }
    let scale = match (params.scale, auction) {
        (Some(s), _) => s,
        (None, Auction::Composed(c)) => c.delta_grid(),
        (None, Auction::Direct(_)) => 0.05,
    };
    let gains = (0..params.types)
        .into_par_iter()
        .map(|s| interim_gain(auction, env, params, scale, s))
        .collect::<Result<Vec<f64>>>()?;
    Ok(BicViolationCurve::from_gains(
        gains,
        params.deviations(),
        params.opponent_draws,
    ))
}

fn interim_gain(
    auction: Auction<'_>,
    env: &AuctionEnvironment,
    params: &BicParams,
    scale: f64,
    s: usize,
) -> Result<f64> {
    let m = env.bidders();
    let i = s % m;
    let a = &env.design;
    let mut rng = env.seed.rng_labeled("bic-type", s as u64);
    let me = env.draw_with(&mut rng, std::iter::once(i))?.remove(0);
    let dev_latents = deviation_latents(env, i, s, &me.latent, params, scale, &mut rng);
    // Utilities are measured in the model for direct runs.
    let my_type = match auction {
        Auction::Direct(_) => a.apply(&me.latent)?,
        Auction::Composed(_) => me.true_type.clone(),
    };

    // Bidder i's report under truth (index 0) and under each deviation.
    let my_reports: Vec<DVector<f64>> = match auction {
        Auction::Direct(_) => std::iter::once(me.latent.clone())
            .chain(dev_latents)
            .collect(),
        Auction::Composed(c) => {
            let mut reports = Vec::with_capacity(dev_latents.len() + 1);
            let mut truthful = BidderOracle::truthful(me.true_type.clone());
            reports.push(run_protocol(&mut truthful, a, c.plan())?.z_hat);
            for z in &dev_latents {
                // Answer as the type the deviation points at, keeping the
                // bidder's own noise realization.
                let shift = a.apply(&(z - &me.latent))?;
                let mut liar = BidderOracle::scripted(me.true_type.clone(), &me.true_type + shift)?;
                reports.push(run_protocol(&mut liar, a, c.plan())?.z_hat);
            }
            reports.into_iter().map(DVector::from_vec).collect()
        }
    };

    let mut totals = vec![0.0; my_reports.len()];
    let opp_label = format!("bic-opponents-{s}");
    let mech_label = format!("bic-mechanism-{s}");
    for o in 0..params.opponent_draws as u64 {
        let mut orng = env.seed.rng_labeled(&opp_label, o);
        let others = env.draw_with(&mut orng, (0..m).filter(|&j| j != i))?;
        let mut profile: Vec<DVector<f64>> = Vec::with_capacity(m);
        let mut it = others.iter();
        for j in 0..m {
            if j == i {
                profile.push(DVector::zeros(env.k()));
            } else {
                let p = it.next().expect("one draw per opponent");
                profile.push(match auction {
                    Auction::Direct(_) => p.latent.clone(),
                    Auction::Composed(c) => {
                        let mut oracle = BidderOracle::truthful(p.true_type.clone());
                        DVector::from_vec(run_protocol(&mut oracle, a, c.plan())?.z_hat)
                    }
                });
            }
        }
        let base_rng = env.seed.rng_labeled(&mech_label, o);
        for (v, report) in my_reports.iter().enumerate() {
            profile[i] = report.clone();
            let mut mrng = base_rng.clone();
            let outcome = match auction {
                Auction::Direct(mech) => execute(mech, &profile, &mut mrng)?,
                Auction::Composed(c) => c.run_on_reports(&profile, &mut mrng)?.0,
            };
            totals[v] +=
                env.valuations[i].value(&my_type, &outcome.bundles[i])? - outcome.payments[i];
        }
    }
    let n = params.opponent_draws as f64;
    let truth = totals[0] / n;
    Ok(totals[1..]
        .iter()
        .map(|t| t / n - truth)
        .fold(f64::NEG_INFINITY, f64::max))
}

// ---------------------------------------------------------------------------
// Benchmark designs

/// `A` with the identity at rows `perm[0..k]` and rows `perm[k..]` drawn as
/// nonnegative vectors whose entries sum to a uniform value in `[0.5, 1]`,
/// so `||A||_inf = 1`.
pub fn separable_design<R: Rng + ?Sized>(
    n: usize,
    k: usize,
    rng: &mut R,
) -> Result<(DesignMatrix, Vec<usize>)> {
    if k == 0 || k > n {
        return Err(Error::InvalidDesign(format!(
            "need 1 <= k <= N, got k = {k}, N = {n}"
        )));
    }
    let h = DMatrix::from_fn(n - k, k, |_, _| rng.random::<f64>());
    let mut h = h;
    for mut row in h.row_iter_mut() {
        let total: f64 = row.sum();
        let target = 0.5 + 0.5 * rng.random::<f64>();
        if total > 0.0 {
            row *= target / total;
        }
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let a = DesignMatrix::from_blocks(&DMatrix::identity(k, k), &h, &perm)?;
    Ok((a, perm))
}

/// `A` with a `k x k` block `C` at rows `perm[0..k]` that is diagonally
/// dominant by rows and by columns with margins at least 1; remaining rows
/// have entries uniform in `[-1, 1]`.
pub fn diag_dominant_design<R: Rng + ?Sized>(
    n: usize,
    k: usize,
    rng: &mut R,
) -> Result<(DesignMatrix, Vec<usize>, DMatrix<f64>)> {
    if k == 0 || k > n {
        return Err(Error::InvalidDesign(format!(
            "need 1 <= k <= N, got k = {k}, N = {n}"
        )));
    }
    let mut c = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0f64..=1.0));
    for i in 0..k {
        c[(i, i)] = 0.0;
    }
    for i in 0..k {
        let row: f64 = c.row(i).iter().map(|v| v.abs()).sum();
        let col: f64 = c.column(i).iter().map(|v| v.abs()).sum();
        c[(i, i)] = row.max(col) + 1.0 + rng.random::<f64>();
    }
    let h = DMatrix::from_fn(n - k, k, |_, _| rng.random_range(-1.0..=1.0));
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let a = DesignMatrix::from_blocks(&c, &h, &perm)?;
    Ok((a, perm, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanisms::{Claims, GrandBundlePrice, SequentialPostedPrice};
    use crate::query_protocol::{diag_dominance_params, QueryPlan, Setting};
    use crate::robustify::{compose_algorithm1, Algorithm1Params};
    use approx::assert_relative_eq;
    use rand::RngCore;

    /// Charges every bidder 1 and allocates nothing.
    #[derive(Debug)]
    struct Toll {
        n: usize,
        k: usize,
    }

    impl LatentMechanism for Toll {
        fn n_items(&self) -> usize {
            self.n
        }
        fn latent_dim(&self) -> usize {
            self.k
        }
        fn claims(&self) -> Claims {
            Claims {
                bic: true,
                ir: false,
            }
        }
        fn run(&self, profile: &[DVector<f64>], _rng: &mut dyn RngCore) -> Result<Outcome> {
            let mut o = Outcome::no_trade(profile.len());
            o.payments.iter_mut().for_each(|p| *p = 1.0);
            Ok(o)
        }
    }

    fn one_item_env(bidders: usize, seed: u64) -> AuctionEnvironment {
        let a = Arc::new(DesignMatrix::new(DMatrix::identity(1, 1)).unwrap());
        let v = ConstrainedAdditiveValuation::c_demand(DVector::zeros(1), 1).unwrap();
        AuctionEnvironment::symmetric(
            a,
            bidders,
            LatentPrior::uniform(1),
            ProkhorovKernel::exact(),
            v,
            ExperimentSeed(seed),
        )
        .unwrap()
    }

    #[test]
    fn constant_toll_revenue_is_exact() {
        let env = one_item_env(3, 1);
        let toll = Toll { n: 1, k: 1 };
        let est = estimate_revenue(Auction::Direct(&toll), &env, 50).unwrap();
        assert_eq!(est.mean, 3.0);
        assert_eq!(est.std_error, 0.0);
        assert!(estimate_revenue(Auction::Direct(&toll), &env, 1).is_err());
        let ir = check_ir(Auction::Direct(&toll), &env, 10).unwrap();
        assert_eq!(ir.violations, 30);
        assert_eq!(ir.max_deficit, 1.0);
    }

    #[test]
    fn grand_bundle_uniform_revenue() {
        let env = one_item_env(1, 2);
        let m =
            GrandBundlePrice::new(env.design().clone(), env.valuations()[0].clone(), 0.5).unwrap();
        let est = estimate_revenue(Auction::Direct(&m), &env, 10_000).unwrap();
        assert!((est.mean - 0.25).abs() <= 3.0 * est.std_error, "{est:?}");
        let again = estimate_revenue(Auction::Direct(&m), &env, 10_000).unwrap();
        assert_eq!(est, again);
    }

    #[test]
    fn empty_environment_has_no_violations() {
        let env = one_item_env(0, 3);
        let a = env.design().clone();
        let m =
            SequentialPostedPrice::new(a, vec![], DVector::from_element(1, 0.5), vec![]).unwrap();
        let ir = check_ir(Auction::Direct(&m), &env, 10).unwrap();
        assert_eq!((ir.checks, ir.violations), (0, 0));
    }

    fn small_separable(
        seed: u64,
        eps1: f64,
    ) -> (AuctionEnvironment, SequentialPostedPrice, Vec<usize>) {
        let mut r = ExperimentSeed(seed).rng_labeled("design", 0);
        let (a, perm) = separable_design(12, 3, &mut r).unwrap();
        let a = Arc::new(a);
        let v = ConstrainedAdditiveValuation::c_demand(DVector::zeros(12), 2).unwrap();
        let kernel = if eps1 == 0.0 {
            ProkhorovKernel::exact()
        } else {
            ProkhorovKernel::for_design(&a, eps1, eps1).unwrap()
        };
        let env = AuctionEnvironment::symmetric(
            a.clone(),
            2,
            LatentPrior::uniform(3),
            kernel,
            v.clone(),
            ExperimentSeed(seed),
        )
        .unwrap();
        let prices = DVector::from_fn(12, |j, _| 0.55 * a.entries().row(j).sum());
        let m = SequentialPostedPrice::new(a, vec![v; 2], prices, vec![0, 1]).unwrap();
        (env, m, perm)
    }

    #[test]
    fn posted_price_is_ir_on_exact_types() {
        let (env, m, _) = small_separable(4, 0.0);
        let ir = check_ir(Auction::Direct(&m), &env, 2000).unwrap();
        assert_eq!(ir.violations, 0);
    }

    #[test]
    fn dsic_gains_vanish_with_common_numbers() {
        let (env, m, _) = small_separable(5, 0.0);
        let params = BicParams {
            types: 40,
            opponent_draws: 16,
            ..BicParams::default()
        };
        let curve = estimate_bic_violation(Auction::Direct(&m), &env, &params).unwrap();
        assert_eq!(curve.gains.len(), 40);
        assert!(curve.max_gain() <= 1e-9, "max gain {}", curve.max_gain());
        assert_eq!(curve.delta_at(1e-9), 0.0);
        let none = BicParams {
            fresh_deviations: 0,
            structured_deviations: 0,
            ..params
        };
        assert!(estimate_bic_violation(Auction::Direct(&m), &env, &none).is_err());
    }

    #[test]
    fn curve_is_monotone() {
        let c = BicViolationCurve::from_gains(vec![0.3, -0.1, 0.0, 0.2, 0.2], 4, 8);
        assert_eq!(c.gains, vec![-0.1, 0.0, 0.2, 0.2, 0.3]);
        let grid: Vec<f64> = (-5..=8).map(|x| x as f64 * 0.05).collect();
        for w in grid.windows(2) {
            assert!(c.delta_at(w[1]) <= c.delta_at(w[0]));
        }
        assert_relative_eq!(c.delta_at(0.0), 0.6);
        assert_eq!(c.delta_at(f64::INFINITY), 0.0);
    }

    #[test]
    fn composed_run_is_deterministic_and_queries_once() {
        let (env, m, perm) = small_separable(6, 1e-3);
        let a = env.design().clone();
        let plan = QueryPlan::from_permutation(Setting::Separable, &perm, 3, 1e-3).unwrap();
        let params = Algorithm1Params {
            eps1: 1e-3,
            eps: 1e-3,
            c0: 1.0,
            jump_cap: a.inf_norm(),
            rebate: true,
        };
        let c = compose_algorithm1(
            Arc::new(m),
            env.priors().to_vec(),
            a.clone(),
            plan.clone(),
            env.valuations(),
            params,
        )
        .unwrap();
        let e1 = evaluate(Auction::Composed(&c), &env, 200).unwrap();
        let e2 = evaluate(Auction::Composed(&c), &env, 200).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(e1.queries_total, 200 * 2 * plan.queries_per_bidder(&a));
    }

    #[test]
    fn generated_designs_have_their_structure() {
        let mut r = ExperimentSeed(7).rng_labeled("design", 0);
        let (a, perm) = separable_design(30, 4, &mut r).unwrap();
        assert_relative_eq!(a.inf_norm(), 1.0, epsilon = 1e-12);
        assert_eq!(a.select_rows(&perm[..4]), DMatrix::identity(4, 4));
        assert!(a.entries().iter().all(|&x| x >= 0.0));
        let (a, perm, c) = diag_dominant_design(20, 5, &mut r).unwrap();
        assert_eq!(a.select_rows(&perm[..5]), c);
        let (alpha, beta) = diag_dominance_params(&c).unwrap();
        assert!(alpha >= 1.0 && beta >= 1.0);
        assert!(separable_design(3, 4, &mut r).is_err());
    }
}
