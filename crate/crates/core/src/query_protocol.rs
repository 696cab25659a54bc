//! Threshold-query elicitation of latent types.
//!
//! A bidder only answers questions of the form "is `t_j >= p`?" (equivalently,
//! "would you pay `p + mu_j` for item `j`?"). Binary search over `p` turns
//! these into noisy value queries with accuracy `eta`; querying the rows `S`
//! of the design and solving the least-squares problem `min_z ||A_S z - y||`
//! recovers the latent type.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent_model::{check_permutation, DesignMatrix};
use crate::linalg::{inf_norm as mat_inf_norm, least_squares};

/// "Is `t_item >= price`?"
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdQuery {
    pub item: usize,
    pub price: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnswerPolicy {
    Truthful,
    /// Answers every query as if the type were the substitute.
    Scripted(DVector<f64>),
}

/// A bidder reachable only through threshold queries. Keeps a ledger of the
/// number of queries answered.
#[derive(Debug, Clone)]
pub struct BidderOracle {
    true_type: DVector<f64>,
    policy: AnswerPolicy,
    queries: usize,
}

impl BidderOracle {
    pub fn truthful(true_type: DVector<f64>) -> Self {
        BidderOracle {
            true_type,
            policy: AnswerPolicy::Truthful,
            queries: 0,
        }
    }

    pub fn scripted(true_type: DVector<f64>, substitute: DVector<f64>) -> Result<Self> {
        if substitute.len() != true_type.len() {
            return Err(Error::DimensionMismatch {
                expected: true_type.len(),
                actual: substitute.len(),
            });
        }
        Ok(BidderOracle {
            true_type,
            policy: AnswerPolicy::Scripted(substitute),
            queries: 0,
        })
    }

    pub fn true_type(&self) -> &DVector<f64> {
        &self.true_type
    }

    pub fn policy(&self) -> &AnswerPolicy {
        &self.policy
    }

    pub fn query_count(&self) -> usize {
        self.queries
    }

    /// Ties answer yes.
    pub fn answer(&mut self, q: ThresholdQuery) -> Result<bool> {
        let reported = match &self.policy {
            AnswerPolicy::Truthful => &self.true_type,
            AnswerPolicy::Scripted(s) => s,
        };
        if q.item >= reported.len() {
            return Err(Error::InvalidArgument(format!(
                "query on item {} of {}",
                q.item,
                reported.len()
            )));
        }
        self.queries += 1;
        Ok(reported[q.item] >= q.price)
    }
}

/// Result of one simulated noisy value query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NoisyValue {
    pub estimate: f64,
    pub queries: usize,
    /// Every answer agreed, so the value may lie outside the search range
    /// and the estimate is clamped to an end bracket.
    pub saturated: bool,
}

/// `ceil(log2((hi - lo) / eta))`, computed without logarithms (zero when the
/// range is already within `eta`).
pub fn search_steps(lo: f64, hi: f64, eta: f64) -> usize {
    let width = hi - lo;
    let mut steps = 0usize;
    let mut covered = eta;
    while covered < width {
        covered *= 2.0;
        steps += 1;
    }
    steps
}

/// Bisection on the price for item `j` over `[lo, hi]`, stopping once the
/// bracket is at most `eta` wide and reporting its midpoint.
pub fn noisy_value_query(
    oracle: &mut BidderOracle,
    j: usize,
    lo: f64,
    hi: f64,
    eta: f64,
) -> Result<NoisyValue> {
    if !(lo < hi) || !(eta > 0.0) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "need finite lo < hi and eta > 0, got [{lo}, {hi}], eta = {eta}"
        )));
    }
    let steps = search_steps(lo, hi, eta);
    let (mut a, mut b) = (lo, hi);
    let (mut yes, mut no) = (0usize, 0usize);
    for _ in 0..steps {
        let p = 0.5 * (a + b);
        if oracle.answer(ThresholdQuery { item: j, price: p })? {
            a = p;
            yes += 1;
        } else {
            b = p;
            no += 1;
        }
    }
    Ok(NoisyValue {
        estimate: 0.5 * (a + b),
        queries: steps,
        saturated: steps > 0 && (yes == 0 || no == 0),
    })
}

/// Which structural assumption justifies the query rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Setting {
    /// The query rows of `A` form the identity.
    Separable,
    /// The query rows of `A` form a matrix diagonally dominant by rows and columns.
    DiagDominant,
    /// Archetypes are Gaussian; `trace` is `Tr(Sigma_S)`.
    Gaussian { trace: f64 },
    /// Archetypes are bounded and weakly dependent; `variance_sum` is `sum_{i in S} Var(theta_i)`.
    WeakDep { variance_sum: f64 },
}

impl Setting {
    pub fn is_deterministic(&self) -> bool {
        matches!(self, Setting::Separable | Setting::DiagDominant)
    }
}

/// Rows to query plus accuracy parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPlan {
    pub setting: Setting,
    pub rows: Vec<usize>,
    /// Accuracy of each noisy value query.
    pub eta: f64,
    /// Tolerated distance between the true type and the model.
    pub eps: f64,
}

impl QueryPlan {
    /// `eta = eps`.
    pub fn new(setting: Setting, rows: Vec<usize>, eps: f64) -> Self {
        QueryPlan {
            setting,
            rows,
            eta: eps,
            eps,
        }
    }

    /// Deterministic plan: the structured `k x k` block sits at rows
    /// `perm[0..k]`, where stacked row `i` of `[C; H]` is row `perm[i]` of `A`.
    pub fn from_permutation(setting: Setting, perm: &[usize], k: usize, eps: f64) -> Result<Self> {
        check_permutation(perm, perm.len())?;
        if k > perm.len() {
            return Err(Error::InvalidArgument(format!(
                "k = {k} exceeds N = {}",
                perm.len()
            )));
        }
        Ok(Self::new(setting, perm[..k].to_vec(), eps))
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = eta;
        self
    }

    /// Symmetric search range `[-(||A|| + eps + eta), ||A|| + eps + eta]`:
    /// every `|(Az)_j| <= ||A||_inf` on `[0,1]^k`, widened by the type
    /// tolerance and one accuracy guard band.
    pub fn search_range(&self, a: &DesignMatrix) -> (f64, f64) {
        let half = a.inf_norm() + self.eps + self.eta;
        (-half, half)
    }

    pub fn queries_per_row(&self, a: &DesignMatrix) -> usize {
        let (lo, hi) = self.search_range(a);
        search_steps(lo, hi, self.eta)
    }

    pub fn queries_per_bidder(&self, a: &DesignMatrix) -> usize {
        self.rows.len() * self.queries_per_row(a)
    }
}

/// Row and column diagonal-dominance margins `(alpha, beta)`.
pub fn diag_dominance_params(c: &DMatrix<f64>) -> Result<(f64, f64)> {
    if !c.is_square() || c.is_empty() {
        return Err(Error::InvalidArgument(
            "margins need a nonempty square matrix".into(),
        ));
    }
    let k = c.nrows();
    let off_row = |i: usize| {
        (0..k)
            .filter(|&j| j != i)
            .map(|j| c[(i, j)].abs())
            .sum::<f64>()
    };
    let off_col = |j: usize| {
        (0..k)
            .filter(|&i| i != j)
            .map(|i| c[(i, j)].abs())
            .sum::<f64>()
    };
    let alpha = (0..k)
        .map(|i| c[(i, i)].abs() - off_row(i))
        .fold(f64::INFINITY, f64::min);
    let beta = (0..k)
        .map(|j| c[(j, j)].abs() - off_col(j))
        .fold(f64::INFINITY, f64::min);
    Ok((alpha, beta))
}

/// Validates the plan against `A` and returns the rows defining `Q`.
pub fn select_query_rows(a: &DesignMatrix, plan: &QueryPlan) -> Result<Vec<usize>> {
    let k = a.k();
    if let Some(&r) = plan.rows.iter().find(|&&r| r >= a.n_items()) {
        return Err(Error::InvalidArgument(format!(
            "query row {r} out of range"
        )));
    }
    let mut sorted = plan.rows.clone();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidArgument("query rows repeat".into()));
    }
    if !(plan.eta > 0.0) || !(plan.eps >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need eta > 0 and eps >= 0, got eta = {}, eps = {}",
            plan.eta, plan.eps
        )));
    }
    if plan.setting.is_deterministic() {
        if plan.rows.len() != k {
            return Err(Error::InvalidArgument(format!(
                "structured plans query exactly k = {k} rows, got {}",
                plan.rows.len()
            )));
        }
        let c = a.select_rows(&plan.rows);
        let (alpha, beta) = diag_dominance_params(&c)?;
        if !(alpha > 0.0 && beta > 0.0) {
            return Err(Error::NotDiagonallyDominant(describe_margins(&c)));
        }
    } else if plan.rows.len() < k {
        return Err(Error::InvalidArgument(format!(
            "need at least k = {k} query rows, got {}",
            plan.rows.len()
        )));
    }
    Ok(plan.rows.clone())
}

fn describe_margins(c: &DMatrix<f64>) -> String {
    let k = c.nrows();
    let mut parts = Vec::new();
    for i in 0..k {
        let row = c[(i, i)].abs()
            - (0..k)
                .filter(|&j| j != i)
                .map(|j| c[(i, j)].abs())
                .sum::<f64>();
        if row <= 0.0 {
            parts.push(format!("row {} margin {row}", i + 1));
        }
        let col = c[(i, i)].abs()
            - (0..k)
                .filter(|&j| j != i)
                .map(|j| c[(j, i)].abs())
                .sum::<f64>();
        if col <= 0.0 {
            parts.push(format!("column {} margin {col}", i + 1));
        }
    }
    parts.join(", ")
}

/// `argmin_z ||B z - y||_2`.
pub fn least_squares_recover(b: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    least_squares(b, y)
}

/// Certified sup-norm recovery error of the plan (the protocol is an
/// `(eps, delta_out)`-query protocol).
///
/// Deterministic settings: `2 max_j |C_jj| / (alpha beta) * (eps + eta)`.
/// Ex-ante settings: `32 sqrt(|S| k) / sqrt(D) * (eps + eta)` with `D` the
/// trace or the variance sum; with `eta = eps` these are the familiar
/// `4 max C_jj / (alpha beta) eps` and `64 sqrt(|S| k) / sqrt(D) eps`.
pub fn recovery_error_bound(a: &DesignMatrix, plan: &QueryPlan) -> Result<f64> {
    let slack = plan.eps + plan.eta;
    let k = a.k() as f64;
    let ell = plan.rows.len() as f64;
    match &plan.setting {
        Setting::Separable | Setting::DiagDominant => {
            let c = a.select_rows(&plan.rows);
            deterministic_bound(&c, slack)
        }
        Setting::Gaussian { trace } => ex_ante_bound(ell, k, *trace, slack),
        Setting::WeakDep { variance_sum } => ex_ante_bound(ell, k, *variance_sum, slack),
    }
}

/// `2 max_j |C_jj| / (alpha beta) * slack`.
pub fn deterministic_bound(c: &DMatrix<f64>, slack: f64) -> Result<f64> {
    let (alpha, beta) = diag_dominance_params(c)?;
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::NotDiagonallyDominant(describe_margins(c)));
    }
    let dmax = c.diagonal().iter().fold(0.0f64, |m, x| m.max(x.abs()));
    Ok(2.0 * dmax / (alpha * beta) * slack)
}

/// `32 sqrt(ell k) / sqrt(spread) * slack`.
pub fn ex_ante_bound(ell: f64, k: f64, spread: f64, slack: f64) -> Result<f64> {
    if !(spread > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "ex-ante bound needs a positive trace / variance sum, got {spread}"
        )));
    }
    Ok(32.0 * (ell * k).sqrt() / spread.sqrt() * slack)
}

/// `||(B^T B)^{-1}||_inf ||B^T||_inf * slack`: the error-decomposition bound
/// that every recovery obeys when `||t - Az||_inf <= eps`.
pub fn decomposition_bound(b: &DMatrix<f64>, slack: f64) -> Result<f64> {
    let gram = b.transpose() * b;
    let inv = gram.try_inverse().ok_or(Error::RankDeficient {
        sigma_min: 0.0,
        sigma_max: crate::linalg::singular_extremes(b).sigma_max,
    })?;
    Ok(mat_inf_norm(&inv) * mat_inf_norm(&b.transpose()) * slack)
}

/// Everything the protocol learned about one bidder.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Transcript {
    pub rows: Vec<usize>,
    pub queries: usize,
    pub queries_per_row: usize,
    pub search_range: (f64, f64),
    pub eta: f64,
    pub y_hat: Vec<f64>,
    pub saturated_rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryResult {
    pub z_hat: Vec<f64>,
    pub transcript: Transcript,
    pub delta_out: f64,
}

/// Runs the full protocol against one bidder.
pub fn run_protocol(
    oracle: &mut BidderOracle,
    a: &DesignMatrix,
    plan: &QueryPlan,
) -> Result<RecoveryResult> {
    let rows = select_query_rows(a, plan)?;
    if oracle.true_type().len() != a.n_items() {
        return Err(Error::DimensionMismatch {
            expected: a.n_items(),
            actual: oracle.true_type().len(),
        });
    }
    let delta_out = recovery_error_bound(a, plan)?;
    let (lo, hi) = plan.search_range(a);
    let before = oracle.query_count();
    let mut y_hat = Vec::with_capacity(rows.len());
    let mut saturated_rows = Vec::new();
    for &r in &rows {
        let v = noisy_value_query(oracle, r, lo, hi, plan.eta)?;
        if v.saturated {
            saturated_rows.push(r);
        }
        y_hat.push(v.estimate);
    }
    let b = a.select_rows(&rows);
    let z_hat = least_squares_recover(&b, &DVector::from_vec(y_hat.clone()))?;
    let queries = oracle.query_count() - before;
    debug_assert_eq!(queries, rows.len() * search_steps(lo, hi, plan.eta));
    Ok(RecoveryResult {
        z_hat: z_hat.iter().copied().collect(),
        transcript: Transcript {
            queries_per_row: search_steps(lo, hi, plan.eta),
            rows,
            queries,
            search_range: (lo, hi),
            eta: plan.eta,
            y_hat,
            saturated_rows,
        },
        delta_out,
    })
}
