//! Constrained-additive valuations.
//!
//! `v(t, S) = max_{T feasible, T ⊆ S} sum_{j in T} (mu_j + t_j)` over a
//! downward-closed family of feasible sets. Such a valuation is L-Lipschitz
//! in the sup norm with L the largest feasible set size.

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::latent_model::DesignMatrix;

/// Bundles larger than this are refused by the brute-force path.
pub const EXACT_LIMIT: usize = 20;

/// A set of item indices, sorted and duplicate free.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, serde::Serialize)]
pub struct Bundle(Vec<usize>);

impl Bundle {
    pub fn new(mut items: Vec<usize>, n_items: usize) -> Result<Self> {
        items.sort_unstable();
        if items.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("bundle has duplicate items".into()));
        }
        if let Some(&j) = items.last() {
            if j >= n_items {
                return Err(Error::InvalidArgument(format!(
                    "item {j} out of range for {n_items} items"
                )));
            }
        }
        Ok(Bundle(items))
    }

    pub fn empty() -> Self {
        Bundle(Vec::new())
    }

    pub fn all(n_items: usize) -> Self {
        Bundle((0..n_items).collect())
    }

    pub(crate) fn from_sorted(items: Vec<usize>) -> Self {
        debug_assert!(items.windows(2).all(|w| w[0] < w[1]));
        Bundle(items)
    }

    pub fn items(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.0.binary_search(&j).is_ok()
    }
}

/// Membership oracle for a user-supplied downward-closed family.
pub trait FeasibilityOracle: Send + Sync + fmt::Debug {
    fn is_feasible(&self, items: &[usize]) -> bool;
}

/// Downward-closed set system over `[N]`.
#[derive(Debug, Clone)]
pub enum Family {
    /// All sets of size at most `c` (c-demand).
    Cardinality(usize),
    /// `part[j]` names the part of item `j`; at most `capacity[p]` items from part `p`.
    PartitionCapacity {
        part: Vec<usize>,
        capacity: Vec<usize>,
    },
    Custom(Arc<dyn FeasibilityOracle>),
}

impl Family {
    pub fn is_feasible(&self, items: &[usize]) -> bool {
        match self {
            Family::Cardinality(c) => items.len() <= *c,
            Family::PartitionCapacity { part, capacity } => {
                let mut used = vec![0usize; capacity.len()];
                for &j in items {
                    used[part[j]] += 1;
                    if used[part[j]] > capacity[part[j]] {
                        return false;
                    }
                }
                true
            }
            Family::Custom(o) => o.is_feasible(items),
        }
    }
}

/// A constrained-additive valuation with base values `mu`.
#[derive(Debug, Clone)]
pub struct ConstrainedAdditiveValuation {
    mu: DVector<f64>,
    family: Family,
    lipschitz: usize,
}

impl ConstrainedAdditiveValuation {
    pub fn new(mu: DVector<f64>, family: Family) -> Result<Self> {
        let n = mu.len();
        if mu.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidValuation("base values must be finite".into()));
        }
        let lipschitz = match &family {
            Family::Cardinality(c) => (*c).min(n),
            Family::PartitionCapacity { part, capacity } => {
                if part.len() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        actual: part.len(),
                    });
                }
                if let Some(&p) = part.iter().find(|&&p| p >= capacity.len()) {
                    return Err(Error::InvalidValuation(format!("unknown part {p}")));
                }
                let mut sizes = vec![0usize; capacity.len()];
                for &p in part {
                    sizes[p] += 1;
                }
                sizes.iter().zip(capacity).map(|(s, c)| (*s).min(*c)).sum()
            }
            Family::Custom(oracle) => {
                if n > EXACT_LIMIT {
                    return Err(Error::TooLargeForExact {
                        size: n,
                        limit: EXACT_LIMIT,
                    });
                }
                if !oracle.is_feasible(&[]) {
                    return Err(Error::InvalidValuation(
                        "family must contain the empty set".into(),
                    ));
                }
                max_feasible_size(n, |s| oracle.is_feasible(s))
            }
        };
        Ok(ConstrainedAdditiveValuation {
            mu,
            family,
            lipschitz,
        })
    }

    /// c-demand valuation.
    pub fn c_demand(mu: DVector<f64>, c: usize) -> Result<Self> {
        Self::new(mu, Family::Cardinality(c))
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    pub fn n_items(&self) -> usize {
        self.mu.len()
    }

    /// Largest feasible set size.
    pub fn lipschitz(&self) -> usize {
        self.lipschitz
    }

    /// `v(t, S)`.
    pub fn value(&self, t: &DVector<f64>, s: &Bundle) -> Result<f64> {
        let (_, v) = self.best_subset(t, s, None)?;
        Ok(v)
    }

    /// Feasible `T ⊆ S` maximizing `sum_{j in T} (mu_j + t_j - price_j)`,
    /// with its objective. Items of nonpositive weight are never chosen and
    /// ties prefer lower item indices.
    pub fn best_subset(
        &self,
        t: &DVector<f64>,
        s: &Bundle,
        prices: Option<&DVector<f64>>,
    ) -> Result<(Bundle, f64)> {
        let n = self.n_items();
        if t.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: t.len(),
            });
        }
        if let Some(p) = prices {
            if p.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: p.len(),
                });
            }
        }
        if s.items().last().is_some_and(|&j| j >= n) {
            return Err(Error::InvalidArgument("bundle item out of range".into()));
        }
        let weight = |j: usize| self.mu[j] + t[j] - prices.map_or(0.0, |p| p[j]);
        // Highest weight first; equal weights keep index order.
        let mut positive: Vec<(usize, f64)> = s
            .items()
            .iter()
            .map(|&j| (j, weight(j)))
            .filter(|(_, w)| *w > 0.0)
            .collect();
        positive.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

        let chosen: Vec<usize> = match &self.family {
            Family::Cardinality(c) => positive.iter().take(*c).map(|(j, _)| *j).collect(),
            Family::PartitionCapacity { part, capacity } => {
                let mut used = vec![0usize; capacity.len()];
                positive
                    .iter()
                    .filter(|(j, _)| {
                        let p = part[*j];
                        if used[p] < capacity[p] {
                            used[p] += 1;
                            true
                        } else {
                            false
                        }
                    })
                    .map(|(j, _)| *j)
                    .collect()
            }
            Family::Custom(oracle) => {
                if positive.len() > EXACT_LIMIT {
                    return Err(Error::TooLargeForExact {
                        size: positive.len(),
                        limit: EXACT_LIMIT,
                    });
                }
                let items: Vec<usize> = positive.iter().map(|(j, _)| *j).collect();
                let weights: Vec<f64> = positive.iter().map(|(_, w)| *w).collect();
                brute_force_best(&items, &weights, |set| oracle.is_feasible(set)).0
            }
        };
        let mut chosen = chosen;
        chosen.sort_unstable();
        let total = sum_in_order(&chosen, weight);
        Ok((Bundle::from_sorted(chosen), total))
    }

    /// Exhaustive optimum over every subset of `S` (no pruning), used as a
    /// reference by tests and for custom families.
    pub fn value_brute_force(&self, t: &DVector<f64>, s: &Bundle) -> Result<f64> {
        if s.len() > EXACT_LIMIT {
            return Err(Error::TooLargeForExact {
                size: s.len(),
                limit: EXACT_LIMIT,
            });
        }
        let items = s.items().to_vec();
        let weights: Vec<f64> = items.iter().map(|&j| self.mu[j] + t[j]).collect();
        Ok(brute_force_best(&items, &weights, |set| self.family.is_feasible(set)).1)
    }

    /// `v^A(z, S) = v(Az, S)`.
    pub fn induced_latent_value(
        &self,
        a: &DesignMatrix,
        z: &DVector<f64>,
        s: &Bundle,
    ) -> Result<f64> {
        if a.n_items() != self.n_items() {
            return Err(Error::DimensionMismatch {
                expected: self.n_items(),
                actual: a.n_items(),
            });
        }
        self.value(&a.apply(z)?, s)
    }
}

fn sum_in_order(items: &[usize], weight: impl Fn(usize) -> f64) -> f64 {
    items.iter().map(|&j| weight(j)).sum()
}

/// Best feasible subset of `items` by enumeration of all `2^len` masks.
fn brute_force_best(
    items: &[usize],
    weights: &[f64],
    feasible: impl Fn(&[usize]) -> bool,
) -> (Vec<usize>, f64) {
    let mut best = (Vec::new(), 0.0);
    let mut set = Vec::with_capacity(items.len());
    for mask in 1u64..(1u64 << items.len()) {
        set.clear();
        let mut total = 0.0;
        for (b, (&j, &w)) in items.iter().zip(weights).enumerate() {
            if mask >> b & 1 == 1 {
                set.push(j);
                total += w;
            }
        }
        if total > best.1 {
            let mut sorted = set.clone();
            sorted.sort_unstable();
            if feasible(&sorted) {
                best = (sorted, total);
            }
        }
    }
    best
}

fn max_feasible_size(n: usize, feasible: impl Fn(&[usize]) -> bool) -> usize {
    let mut best = 0;
    let mut set = Vec::with_capacity(n);
    for mask in 1u64..(1u64 << n) {
        let size = mask.count_ones() as usize;
        if size <= best {
            continue;
        }
        set.clear();
        set.extend((0..n).filter(|b| mask >> b & 1 == 1));
        if feasible(&set) {
            best = size;
        }
    }
    best
}

/// Free-function form of [`ConstrainedAdditiveValuation::value`].
pub fn value(val: &ConstrainedAdditiveValuation, t: &DVector<f64>, s: &Bundle) -> Result<f64> {
    val.value(t, s)
}

pub fn lipschitz_constant(val: &ConstrainedAdditiveValuation) -> f64 {
    val.lipschitz() as f64
}

pub fn induced_latent_value(
    val: &ConstrainedAdditiveValuation,
    a: &DesignMatrix,
    z: &DVector<f64>,
    s: &Bundle,
) -> Result<f64> {
    val.induced_latent_value(a, z, s)
}
