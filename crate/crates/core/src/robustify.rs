//! Grid-rounding robustification and the query-based indirect mechanism.
//!
//! Reports are rounded to a randomly shifted grid of side `delta_grid` and
//! replaced by a fresh draw from the prior conditioned on the reported cell.
//! When the report itself comes from the prior the replacement has exactly
//! the prior's law, so the wrapped mechanism sees what it was designed for.

use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, RngCore};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::latent_model::{conditional_cube_sample, sample_latent, DesignMatrix, LatentPrior};
use crate::mechanisms::{execute, Claims, LatentMechanism, Outcome};
use crate::query_protocol::{run_protocol, BidderOracle, QueryPlan, RecoveryResult};
use crate::valuation::ConstrainedAdditiveValuation;

/// Smallest grid side used, so `eps -> 0` never produces empty cells.
pub const GRID_FLOOR: f64 = 1.0 / (1u64 << 20) as f64;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RandomGrid {
    shift: Vec<f64>,
    delta: f64,
}

impl RandomGrid {
    pub fn new(shift: Vec<f64>, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "grid side must lie in (0, 1], got {delta}"
            )));
        }
        if let Some(u) = shift.iter().find(|&&u| !(0.0..delta).contains(&u)) {
            return Err(Error::InvalidArgument(format!(
                "grid shift {u} outside [0, {delta})"
            )));
        }
        Ok(RandomGrid { shift, delta })
    }

    pub fn shift(&self) -> &[f64] {
        &self.shift
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }
}

/// Grid of side `delta_grid` in `k` dimensions with a uniform shift.
pub fn build_random_grid<R: Rng + ?Sized>(
    k: usize,
    delta_grid: f64,
    rng: &mut R,
) -> Result<RandomGrid> {
    if !(delta_grid > 0.0 && delta_grid <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "grid side must lie in (0, 1], got {delta_grid}"
        )));
    }
    let shift = (0..k)
        .map(|_| {
            let u = rng.random::<f64>() * delta_grid;
            if u < delta_grid {
                u
            } else {
                0.0
            }
        })
        .collect();
    RandomGrid::new(shift, delta_grid)
}

const CORNER_SNAP: f64 = 1e-9;

/// Corner of the grid cell containing `z`, with `z` first clamped into
/// `[0,1]^k`. A cell whose corner would sit at 1 or above is replaced by the
/// cell below it, which is closed at 1.
pub fn round_to_grid(z: &DVector<f64>, grid: &RandomGrid) -> Result<DVector<f64>> {
    if z.len() != grid.dim() {
        return Err(Error::DimensionMismatch {
            expected: grid.dim(),
            actual: z.len(),
        });
    }
    let d = grid.delta;
    Ok(DVector::from_iterator(
        z.len(),
        z.iter().zip(&grid.shift).map(|(&v, &u)| {
            let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            let q = (v - u) / d;
            // Points within rounding error of a corner belong to that corner.
            let cell = if (q - q.round()).abs() <= CORNER_SNAP {
                q.round()
            } else {
                q.floor()
            };
            let mut x = u + d * cell;
            if x >= 1.0 {
                x -= d;
            }
            x
        }),
    ))
}

/// `L (eps1 + ||A||_inf (eps + delta_grid))`.
pub fn rebate_amount(
    lipschitz: f64,
    eps1: f64,
    design_norm: f64,
    eps: f64,
    delta_grid: f64,
) -> f64 {
    lipschitz * (eps1 + design_norm * (eps + delta_grid))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum RebateMode {
    Off,
    /// Fixed amount subtracted from every positive payment.
    On(f64),
}

impl RebateMode {
    pub fn amount(self) -> f64 {
        match self {
            RebateMode::Off => 0.0,
            RebateMode::On(r) => r,
        }
    }
}

/// Per-execution bookkeeping of the wrapper.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobustDiagnostics {
    /// Bidders whose cell carried no prior mass and were voided.
    pub empty_mass: Vec<usize>,
    pub rebate_total: f64,
    pub corners: Vec<Vec<f64>>,
    pub resampled: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct RobustifiedMechanism {
    inner: Arc<dyn LatentMechanism>,
    priors: Vec<LatentPrior>,
    grid: RandomGrid,
    rebate: f64,
}

/// Wraps `inner` with a freshly drawn grid of side `delta_grid`.
pub fn robustify<R: Rng + ?Sized>(
    inner: Arc<dyn LatentMechanism>,
    priors: Vec<LatentPrior>,
    delta_grid: f64,
    rebate: RebateMode,
    rng: &mut R,
) -> Result<RobustifiedMechanism> {
    let grid = build_random_grid(inner.latent_dim(), delta_grid, rng)?;
    RobustifiedMechanism::with_grid(inner, priors, grid, rebate)
}

impl RobustifiedMechanism {
    pub fn with_grid(
        inner: Arc<dyn LatentMechanism>,
        priors: Vec<LatentPrior>,
        grid: RandomGrid,
        rebate: RebateMode,
    ) -> Result<Self> {
        let k = inner.latent_dim();
        if grid.dim() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                actual: grid.dim(),
            });
        }
        if let Some(p) = priors.iter().find(|p| p.dim() != k) {
            return Err(Error::DimensionMismatch {
                expected: k,
                actual: p.dim(),
            });
        }
        let r = rebate.amount();
        if !(r >= 0.0 && r.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "rebate must be finite and >= 0, got {r}"
            )));
        }
        Ok(RobustifiedMechanism {
            inner,
            priors,
            grid,
            rebate: r,
        })
    }

    pub fn grid(&self) -> &RandomGrid {
        &self.grid
    }

    pub fn rebate(&self) -> f64 {
        self.rebate
    }

    pub fn run_with_diagnostics(
        &self,
        profile: &[DVector<f64>],
        mut rng: &mut dyn RngCore,
    ) -> Result<(Outcome, RobustDiagnostics)> {
        if profile.len() != self.priors.len() {
            return Err(Error::DimensionMismatch {
                expected: self.priors.len(),
                actual: profile.len(),
            });
        }
        let mut corners = Vec::with_capacity(profile.len());
        let mut bids = Vec::with_capacity(profile.len());
        let mut empty_mass = Vec::new();
        for (i, (b, prior)) in profile.iter().zip(&self.priors).enumerate() {
            let x = round_to_grid(b, &self.grid)?;
            let bid = match conditional_cube_sample(prior, &x, self.grid.delta, &mut rng) {
                Ok(v) => v,
                Err(Error::EmptyMass { .. }) => {
                    empty_mass.push(i);
                    sample_latent(prior, &mut rng)
                }
                Err(e) => return Err(e),
            };
            corners.push(x);
            bids.push(bid);
        }
        let mut outcome = execute(self.inner.as_ref(), &bids, rng)?;
        for &i in &empty_mass {
            outcome.bundles[i] = Default::default();
            outcome.payments[i] = 0.0;
        }
        let mut rebate_total = 0.0;
        for p in outcome.payments.iter_mut() {
            if *p > 0.0 {
                let cut = p.min(self.rebate);
                *p -= cut;
                rebate_total += cut;
            }
        }
        let diag = RobustDiagnostics {
            empty_mass,
            rebate_total,
            corners: corners
                .iter()
                .map(|c| c.iter().copied().collect())
                .collect(),
            resampled: bids.iter().map(|c| c.iter().copied().collect()).collect(),
        };
        Ok((outcome, diag))
    }
}

impl LatentMechanism for RobustifiedMechanism {
    fn n_items(&self) -> usize {
        self.inner.n_items()
    }

    fn latent_dim(&self) -> usize {
        self.inner.latent_dim()
    }

    fn claims(&self) -> Claims {
        self.inner.claims()
    }

    fn run(&self, profile: &[DVector<f64>], rng: &mut dyn RngCore) -> Result<Outcome> {
        self.run_with_diagnostics(profile, rng).map(|(o, _)| o)
    }
}

/// Inputs to the incentive and revenue budgets of the composed mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundBudget {
    pub lipschitz: f64,
    pub design_norm: f64,
    pub bidders: usize,
    pub eps: f64,
    pub eps1: f64,
    pub delta_grid: f64,
    /// Largest value any bidder can have for any bundle.
    pub max_value: f64,
    pub c0: f64,
}

impl BoundBudget {
    pub fn kappa(&self) -> f64 {
        let m = self.bidders as f64;
        let l = self.lipschitz;
        let a = self.design_norm;
        self.c0 * (l * self.eps1 + a * l * m * self.eps + a * l * (m * self.eps).sqrt())
    }
}

/// `(kappa, c0 m kappa + m^2 eps1 H)`.
pub fn kappa_budget(b: &BoundBudget) -> (f64, f64) {
    let kappa = b.kappa();
    let m = b.bidders as f64;
    (kappa, b.c0 * m * kappa + m * m * b.eps1 * b.max_value)
}

/// `max_i L_i (max_j mu_ij + ||A||_inf + J)`.
pub fn max_bidder_value(
    valuations: &[ConstrainedAdditiveValuation],
    design_norm: f64,
    jump_cap: f64,
) -> f64 {
    valuations
        .iter()
        .map(|v| {
            let mu = v.mu().iter().copied().fold(0.0, f64::max);
            v.lipschitz() as f64 * (mu + design_norm + jump_cap)
        })
        .fold(0.0, f64::max)
}

/// `sqrt(m eps)`, floored at [`GRID_FLOOR`] and capped at 1.
pub fn grid_side(bidders: usize, eps: f64) -> f64 {
    (bidders as f64 * eps).sqrt().clamp(GRID_FLOOR, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Algorithm1Params {
    pub eps1: f64,
    pub eps: f64,
    pub c0: f64,
    /// Jump cap of the coupling, used only for the value bound `H`.
    pub jump_cap: f64,
    pub rebate: bool,
}

/// Query each bidder once, then run the robustified mechanism on the
/// recovered latent reports.
#[derive(Debug, Clone)]
pub struct ComposedMechanism {
    inner: Arc<dyn LatentMechanism>,
    priors: Vec<LatentPrior>,
    design: Arc<DesignMatrix>,
    plan: QueryPlan,
    budget: BoundBudget,
    rebate: RebateMode,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComposedRun {
    pub outcome: Outcome,
    pub recoveries: Vec<RecoveryResult>,
    pub diagnostics: RobustDiagnostics,
    pub grid: RandomGrid,
}

pub fn compose_algorithm1(
    inner: Arc<dyn LatentMechanism>,
    priors: Vec<LatentPrior>,
    design: Arc<DesignMatrix>,
    plan: QueryPlan,
    valuations: &[ConstrainedAdditiveValuation],
    params: Algorithm1Params,
) -> Result<ComposedMechanism> {
    let Algorithm1Params {
        eps1,
        eps,
        c0,
        jump_cap,
        rebate,
    } = params;
    if !(eps1 >= 0.0 && eps >= eps1 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "need 0 <= eps1 <= eps, got eps1 = {eps1}, eps = {eps}"
        )));
    }
    if !(c0 >= 0.0 && jump_cap >= 0.0) {
        return Err(Error::InvalidArgument(
            "c0 and the jump cap must be nonnegative".into(),
        ));
    }
    if valuations.len() != priors.len() {
        return Err(Error::DimensionMismatch {
            expected: priors.len(),
            actual: valuations.len(),
        });
    }
    if inner.latent_dim() != design.k() || inner.n_items() != design.n_items() {
        return Err(Error::DimensionMismatch {
            expected: design.k(),
            actual: inner.latent_dim(),
        });
    }
    let m = priors.len();
    let lipschitz = valuations.iter().map(|v| v.lipschitz()).max().unwrap_or(0) as f64;
    let delta_grid = grid_side(m, eps);
    let budget = BoundBudget {
        lipschitz,
        design_norm: design.inf_norm(),
        bidders: m,
        eps,
        eps1,
        delta_grid,
        max_value: max_bidder_value(valuations, design.inf_norm(), jump_cap),
        c0,
    };
    let rebate = if rebate {
        RebateMode::On(rebate_amount(
            lipschitz,
            eps1,
            design.inf_norm(),
            eps,
            delta_grid,
        ))
    } else {
        RebateMode::Off
    };
    Ok(ComposedMechanism {
        inner,
        priors,
        design,
        plan,
        budget,
        rebate,
    })
}

impl ComposedMechanism {
    pub fn budget(&self) -> &BoundBudget {
        &self.budget
    }

    pub fn delta_grid(&self) -> f64 {
        self.budget.delta_grid
    }

    pub fn rebate(&self) -> f64 {
        self.rebate.amount()
    }

    pub fn plan(&self) -> &QueryPlan {
        &self.plan
    }

    pub fn design(&self) -> &Arc<DesignMatrix> {
        &self.design
    }

    pub fn bidders(&self) -> usize {
        self.priors.len()
    }

    /// One execution. Each oracle is queried through exactly one protocol
    /// run; the grid is redrawn from `rng` every time.
    pub fn execute(
        &self,
        oracles: &mut [BidderOracle],
        rng: &mut dyn RngCore,
    ) -> Result<ComposedRun> {
        let recoveries = self.recover(oracles)?;
        let reports: Vec<DVector<f64>> = recoveries
            .iter()
            .map(|r| DVector::from_column_slice(&r.z_hat))
            .collect();
        let (outcome, diagnostics, grid) = self.run_on_reports(&reports, rng)?;
        Ok(ComposedRun {
            outcome,
            recoveries,
            diagnostics,
            grid,
        })
    }

    /// The query phase: one protocol run per oracle.
    pub fn recover(&self, oracles: &mut [BidderOracle]) -> Result<Vec<RecoveryResult>> {
        if oracles.len() != self.priors.len() {
            return Err(Error::DimensionMismatch {
                expected: self.priors.len(),
                actual: oracles.len(),
            });
        }
        oracles
            .iter_mut()
            .map(|o| run_protocol(o, &self.design, &self.plan))
            .collect()
    }

    /// The mechanism phase on recovered latent reports, with a fresh grid.
    pub fn run_on_reports(
        &self,
        reports: &[DVector<f64>],
        rng: &mut dyn RngCore,
    ) -> Result<(Outcome, RobustDiagnostics, RandomGrid)> {
        let wrapped = robustify(
            self.inner.clone(),
            self.priors.clone(),
            self.budget.delta_grid,
            self.rebate,
            rng,
        )?;
        let (outcome, diagnostics) = wrapped.run_with_diagnostics(reports, rng)?;
        Ok((outcome, diagnostics, wrapped.grid))
    }
}
