//! Direct mechanisms over latent type reports.
//!
//! The baselines here are dominant-strategy truthful for the induced latent
//! valuations `v^A(z, S) = v(Az, S)`, so they are BIC and IR for every latent
//! prior. Other mechanisms plug in through [`LatentMechanism`].

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;
use rand::RngCore;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::latent_model::DesignMatrix;
use crate::valuation::{Bundle, ConstrainedAdditiveValuation};

/// One draw of a (possibly randomized) allocation with payments.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Outcome {
    pub bundles: Vec<Bundle>,
    pub payments: Vec<f64>,
}

impl Outcome {
    pub fn no_trade(bidders: usize) -> Self {
        Outcome {
            bundles: vec![Bundle::empty(); bidders],
            payments: vec![0.0; bidders],
        }
    }

    pub fn revenue(&self) -> f64 {
        self.payments.iter().sum()
    }

    /// `x[i][j] = 1` iff bidder `i` receives item `j`.
    pub fn allocation_matrix(&self, n_items: usize) -> Vec<Vec<u8>> {
        self.bundles
            .iter()
            .map(|b| {
                let mut row = vec![0u8; n_items];
                for &j in b.items() {
                    row[j] = 1;
                }
                row
            })
            .collect()
    }

    /// Finite payments and no item allocated twice.
    pub fn check_feasible(&self, n_items: usize) -> Result<()> {
        if self.bundles.len() != self.payments.len() {
            return Err(Error::InvalidArgument(
                "outcome bundles and payments disagree in length".into(),
            ));
        }
        if let Some(p) = self.payments.iter().find(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite payment {p}")));
        }
        let mut taken = vec![false; n_items];
        for b in &self.bundles {
            for &j in b.items() {
                if j >= n_items || taken[j] {
                    return Err(Error::InvalidArgument(format!(
                        "item {j} allocated twice or out of range"
                    )));
                }
                taken[j] = true;
            }
        }
        Ok(())
    }
}

/// Incentive properties a mechanism asserts about itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Claims {
    pub bic: bool,
    pub ir: bool,
}

/// A direct mechanism accessed only by executing it on a latent profile.
pub trait LatentMechanism: Send + Sync + fmt::Debug {
    fn n_items(&self) -> usize;
    fn latent_dim(&self) -> usize;
    fn claims(&self) -> Claims;
    /// One outcome draw on `profile`; all randomness comes from `rng`.
    fn run(&self, profile: &[DVector<f64>], rng: &mut dyn RngCore) -> Result<Outcome>;
}

/// Runs `mechanism` after checking the profile shape, and asserts the
/// allocation is feasible.
pub fn execute(
    mechanism: &dyn LatentMechanism,
    profile: &[DVector<f64>],
    rng: &mut dyn RngCore,
) -> Result<Outcome> {
    let k = mechanism.latent_dim();
    if let Some(z) = profile.iter().find(|z| z.len() != k) {
        return Err(Error::DimensionMismatch {
            expected: k,
            actual: z.len(),
        });
    }
    let outcome = mechanism.run(profile, rng)?;
    if outcome.bundles.len() != profile.len() {
        return Err(Error::InvalidArgument(format!(
            "mechanism returned {} bundles for {} bidders",
            outcome.bundles.len(),
            profile.len()
        )));
    }
    outcome.check_feasible(mechanism.n_items())?;
    Ok(outcome)
}

/// Bidder `i`'s ex-post utility `v_i(t, bundle_i) - p_i` for item-space type `t`.
pub fn utility(
    val: &ConstrainedAdditiveValuation,
    t: &DVector<f64>,
    outcome: &Outcome,
    i: usize,
) -> Result<f64> {
    Ok(val.value(t, &outcome.bundles[i])? - outcome.payments[i])
}

/// Bidders arrive in a fixed order; each buys the feasible bundle of remaining
/// items that maximizes `sum (mu_j + (Az)_j - price_j)` if that surplus is
/// positive, paying the posted prices.
#[derive(Debug, Clone)]
pub struct SequentialPostedPrice {
    design: Arc<DesignMatrix>,
    valuations: Vec<ConstrainedAdditiveValuation>,
    prices: DVector<f64>,
    order: Vec<usize>,
}

impl SequentialPostedPrice {
    pub fn new(
        design: Arc<DesignMatrix>,
        valuations: Vec<ConstrainedAdditiveValuation>,
        prices: DVector<f64>,
        order: Vec<usize>,
    ) -> Result<Self> {
        let n = design.n_items();
        if prices.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: prices.len(),
            });
        }
        if prices.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument("prices must be finite".into()));
        }
        if let Some(v) = valuations.iter().find(|v| v.n_items() != n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: v.n_items(),
            });
        }
        crate::latent_model::check_permutation(&order, valuations.len())?;
        Ok(SequentialPostedPrice {
            design,
            valuations,
            prices,
            order,
        })
    }

    pub fn prices(&self) -> &DVector<f64> {
        &self.prices
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn bidders(&self) -> usize {
        self.valuations.len()
    }
}

/// Free-function constructor.
pub fn sequential_posted_price(
    design: Arc<DesignMatrix>,
    valuations: Vec<ConstrainedAdditiveValuation>,
    prices: DVector<f64>,
    order: Vec<usize>,
) -> Result<SequentialPostedPrice> {
    SequentialPostedPrice::new(design, valuations, prices, order)
}

impl LatentMechanism for SequentialPostedPrice {
    fn n_items(&self) -> usize {
        self.design.n_items()
    }

    fn latent_dim(&self) -> usize {
        self.design.k()
    }

    fn claims(&self) -> Claims {
        // Nonnegative prices make buying a subset never cheaper than its
        // valued part, which is what truthfulness needs.
        let dsic = self.prices.iter().all(|&p| p >= 0.0);
        Claims {
            bic: dsic,
            ir: true,
        }
    }

    fn run(&self, profile: &[DVector<f64>], _rng: &mut dyn RngCore) -> Result<Outcome> {
        let m = self.valuations.len();
        if profile.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                actual: profile.len(),
            });
        }
        let n = self.design.n_items();
        let mut available = vec![true; n];
        let mut outcome = Outcome::no_trade(m);
        for &i in &self.order {
            let values = self.design.apply(&profile[i])?;
            let remaining = Bundle::from_sorted((0..n).filter(|&j| available[j]).collect());
            let (bundle, surplus) =
                self.valuations[i].best_subset(&values, &remaining, Some(&self.prices))?;
            if surplus <= 0.0 || bundle.is_empty() {
                continue;
            }
            debug_assert!(self.valuations[i].family().is_feasible(bundle.items()));
            for &j in bundle.items() {
                available[j] = false;
            }
            outcome.payments[i] = bundle.items().iter().map(|&j| self.prices[j]).sum();
            outcome.bundles[i] = bundle;
        }
        Ok(outcome)
    }
}

/// Single bidder: all items at one price, sold iff `v^A(z, [N]) >= price`.
#[derive(Debug, Clone)]
pub struct GrandBundlePrice {
    design: Arc<DesignMatrix>,
    valuation: ConstrainedAdditiveValuation,
    price: f64,
}

impl GrandBundlePrice {
    pub fn new(
        design: Arc<DesignMatrix>,
        valuation: ConstrainedAdditiveValuation,
        price: f64,
    ) -> Result<Self> {
        if !(price.is_finite() && price >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "bundle price must be finite and >= 0, got {price}"
            )));
        }
        if valuation.n_items() != design.n_items() {
            return Err(Error::DimensionMismatch {
                expected: design.n_items(),
                actual: valuation.n_items(),
            });
        }
        Ok(GrandBundlePrice {
            design,
            valuation,
            price,
        })
    }

    pub fn price(&self) -> f64 {
        self.price
    }
}

pub fn grand_bundle_price(
    design: Arc<DesignMatrix>,
    valuation: ConstrainedAdditiveValuation,
    price: f64,
) -> Result<GrandBundlePrice> {
    GrandBundlePrice::new(design, valuation, price)
}

impl LatentMechanism for GrandBundlePrice {
    fn n_items(&self) -> usize {
        self.design.n_items()
    }

    fn latent_dim(&self) -> usize {
        self.design.k()
    }

    fn claims(&self) -> Claims {
        Claims {
            bic: true,
            ir: true,
        }
    }

    fn run(&self, profile: &[DVector<f64>], _rng: &mut dyn RngCore) -> Result<Outcome> {
        if profile.len() != 1 {
            return Err(Error::MultiBidderUnsupported {
                bidders: profile.len(),
            });
        }
        let all = Bundle::all(self.design.n_items());
        let v = self
            .valuation
            .induced_latent_value(&self.design, &profile[0], &all)?;
        if v >= self.price {
            Ok(Outcome {
                bundles: vec![all],
                payments: vec![self.price],
            })
        } else {
            Ok(Outcome::no_trade(1))
        }
    }
}
