//! Empirical checks of the random-matrix facts behind the ex-ante recovery
//! guarantees: epsilon-net sandwiches, singular-value concentration for
//! Gaussian and weakly dependent columns, and influence matrices.

use std::collections::HashMap;
use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::{ExperimentSeed, SimRng};

pub use crate::linalg::{singular_extremes, SpectralSummary};

/// Largest sphere dimension for which nets are built.
pub const MAX_NET_DIM: usize = 4;

/// Influence entries below this are reported as 0; exact products only
/// produce normalization round-off of order 1e-16.
pub const TV_FLOOR: f64 = 1e-13;

/// Largest joint table enumerated exhaustively.
pub const MAX_TABLE: usize = 1 << 20;

// ---------------------------------------------------------------------------
// epsilon-nets

/// A set `K` of unit vectors in `R^n` with every unit vector within `eps`
/// of some member, and `|K| <= (3/eps)^n`.
///
/// Candidates come from a cell-centred grid on each face of the cube,
/// projected radially onto the sphere, with covering radius `r_c`. A greedy
/// pass keeps each candidate farther than `eps - r_c` from everything kept,
/// so the result covers at radius `eps` and is `(eps - r_c)`-separated.
pub fn epsilon_net(n: usize, eps: f64) -> Result<Vec<DVector<f64>>> {
    if n > MAX_NET_DIM {
        return Err(Error::DimensionTooLarge(n));
    }
    if n == 0 {
        return Err(Error::InvalidArgument(
            "net dimension must be at least 1".into(),
        ));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "net radius must lie in (0, 1), got {eps}"
        )));
    }
    if n == 1 {
        return Ok(vec![
            DVector::from_element(1, -1.0),
            DVector::from_element(1, 1.0),
        ]);
    }
    let r_c = 0.5 * eps * (1.0 - eps) / (3.0 - eps);
    let sep = eps - r_c;
    let per_axis = (((n - 1) as f64).sqrt() / r_c).ceil() as usize;
    let step = 2.0 / per_axis as f64;

    let mut net: Vec<DVector<f64>> = Vec::new();
    let mut buckets: HashMap<[i64; MAX_NET_DIM], Vec<usize>> = HashMap::new();
    let key = |x: &DVector<f64>| {
        let mut k = [0i64; MAX_NET_DIM];
        for (j, v) in x.iter().enumerate() {
            k[j] = (v / sep).floor() as i64;
        }
        k
    };
    let offsets: Vec<[i64; MAX_NET_DIM]> = (0..3usize.pow(n as u32))
        .map(|mut c| {
            let mut o = [0i64; MAX_NET_DIM];
            for slot in o.iter_mut().take(n) {
                *slot = (c % 3) as i64 - 1;
                c /= 3;
            }
            o
        })
        .collect();

    let face_points = per_axis.pow((n - 1) as u32);
    for axis in 0..n {
        for sign in [-1.0, 1.0] {
            for idx in 0..face_points {
                let mut x = DVector::zeros(n);
                let mut rest = idx;
                for j in (0..n).filter(|&j| j != axis) {
                    x[j] = -1.0 + step * ((rest % per_axis) as f64 + 0.5);
                    rest /= per_axis;
                }
                x[axis] = sign;
                let x = x.normalize();
                let kx = key(&x);
                let near = offsets.iter().any(|o| {
                    let mut c = kx;
                    for j in 0..n {
                        c[j] += o[j];
                    }
                    buckets
                        .get(&c)
                        .is_some_and(|ids| ids.iter().any(|&p| (&net[p] - &x).norm() <= sep))
                });
                if !near {
                    buckets.entry(kx).or_default().push(net.len());
                    net.push(x);
                }
            }
        }
    }
    Ok(net)
}

/// `(a / (1 - eps), b - eps a / (1 - eps))` with `a`, `b` the largest and
/// smallest `||M x||` over the net: an upper bound on `sigma_max(M)` and a
/// lower bound on `sigma_min(M)`.
pub fn net_sandwich(m: &DMatrix<f64>, net: &[DVector<f64>], eps: f64) -> Result<(f64, f64)> {
    if net.is_empty() {
        return Err(Error::InvalidArgument("empty net".into()));
    }
    if let Some(x) = net.iter().find(|x| x.len() != m.ncols()) {
        return Err(Error::DimensionMismatch {
            expected: m.ncols(),
            actual: x.len(),
        });
    }
    if !(eps >= 0.0 && eps < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "net radius must lie in [0, 1), got {eps}"
        )));
    }
    let (mut a, mut b) = (0.0f64, f64::INFINITY);
    for x in net {
        let v = (m * x).norm();
        a = a.max(v);
        b = b.min(v);
    }
    let upper = a / (1.0 - eps);
    Ok((upper, b - eps * upper))
}

// ---------------------------------------------------------------------------
// Concentration reports

/// Per-trial singular values against a two-sided bound.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConcentrationReport {
    pub trials: usize,
    pub upper_bound: f64,
    pub lower_bound: f64,
    pub sigma_max: Vec<f64>,
    pub sigma_min: Vec<f64>,
    pub upper_violations: usize,
    pub lower_violations: usize,
    /// Trials violating either side.
    pub violations: usize,
    /// Failure probability per trial as stated for the bound itself.
    pub failure_bound: f64,
    /// The same probability in the form used when the bound is applied.
    pub failure_bound_alt: f64,
    pub admissible: bool,
}

impl ConcentrationReport {
    fn assemble(
        sigmas: Vec<SpectralSummary>,
        upper_bound: f64,
        lower_bound: f64,
        failure_bound: f64,
        failure_bound_alt: f64,
        admissible: bool,
    ) -> Self {
        let upper_hit: Vec<bool> = sigmas.iter().map(|s| s.sigma_max > upper_bound).collect();
        let lower_hit: Vec<bool> = sigmas.iter().map(|s| s.sigma_min < lower_bound).collect();
        ConcentrationReport {
            trials: sigmas.len(),
            upper_bound,
            lower_bound,
            upper_violations: upper_hit.iter().filter(|&&h| h).count(),
            lower_violations: lower_hit.iter().filter(|&&h| h).count(),
            violations: upper_hit
                .iter()
                .zip(&lower_hit)
                .filter(|(a, b)| **a || **b)
                .count(),
            sigma_max: sigmas.iter().map(|s| s.sigma_max).collect(),
            sigma_min: sigmas.iter().map(|s| s.sigma_min).collect(),
            failure_bound: failure_bound.min(1.0),
            failure_bound_alt: failure_bound_alt.min(1.0),
            admissible,
        }
    }

    pub fn violation_rate(&self) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            self.violations as f64 / self.trials as f64
        }
    }
}

/// Runs `trials` independent trials in parallel, each on its own stream
/// derived from one draw of `rng`.
fn per_trial<T: Send>(
    trials: usize,
    label: &str,
    rng: &mut dyn RngCore,
    f: impl Fn(&mut SimRng) -> T + Sync,
) -> Vec<T> {
    let base = ExperimentSeed(rng.next_u64());
    (0..trials)
        .into_par_iter()
        .map(|t| f(&mut base.rng_labeled(label, t as u64)))
        .collect()
}

// ---------------------------------------------------------------------------
// Gaussian designs

/// A covariance matrix with its spectral data.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDesignSpec {
    cov: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
    trace: f64,
    rho: f64,
}

impl GaussianDesignSpec {
    pub fn new(cov: DMatrix<f64>) -> Result<Self> {
        if !cov.is_square() || cov.is_empty() {
            return Err(Error::InvalidArgument(
                "covariance must be square and nonempty".into(),
            ));
        }
        if cov.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "covariance has non-finite entries".into(),
            ));
        }
        let scale = cov.amax().max(1.0);
        if (&cov - cov.transpose()).amax() > 1e-10 * scale {
            return Err(Error::InvalidArgument("covariance is not symmetric".into()));
        }
        let eig = SymmetricEigen::new(cov.clone());
        let min = eig.eigenvalues.min();
        if min < -1e-10 {
            return Err(Error::NotPsd(min));
        }
        let trace = cov.trace();
        let rho = eig.eigenvalues.max().max(0.0);
        Ok(GaussianDesignSpec {
            eigenvalues: eig.eigenvalues,
            eigenvectors: eig.eigenvectors,
            cov,
            trace,
            rho,
        })
    }

    pub fn identity(dim: usize) -> Result<Self> {
        Self::new(DMatrix::identity(dim, dim))
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn trace(&self) -> f64 {
        self.trace
    }

    /// Largest eigenvalue.
    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// `Tr / rho > 64 k`, strictly.
    pub fn admissible(&self, k: usize) -> bool {
        self.rho > 0.0 && self.trace > 64.0 * k as f64 * self.rho
    }
}

/// `dim x k` matrix with independent `N(0, Sigma)` columns, built as
/// `V diag(sqrt(lambda)) G` for standard normal `G`.
pub fn gaussian_design_sample<R: Rng + ?Sized>(
    spec: &GaussianDesignSpec,
    k: usize,
    rng: &mut R,
) -> DMatrix<f64> {
    let d = spec.dim();
    let g = DMatrix::from_fn(d, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let root = spec.eigenvalues.map(|l| l.max(0.0).sqrt());
    let factor = &spec.eigenvectors * DMatrix::from_diagonal(&root);
    factor * g
}

/// Trials of `sigma(U)` against `[sqrt(Tr)/4, 2 sqrt(Tr)]` for `U` with `k`
/// Gaussian columns.
pub fn check_gaussian_concentration(
    spec: &GaussianDesignSpec,
    k: usize,
    trials: usize,
    rng: &mut dyn RngCore,
) -> ConcentrationReport {
    let sigmas = per_trial(trials, "gaussian-concentration", rng, |r| {
        singular_extremes(&gaussian_design_sample(spec, k, r))
    });
    let tr = spec.trace;
    let (fail, fail_alt) = if spec.rho > 0.0 {
        (
            2.0 * (-tr / (8.0 * spec.rho) + 4.0 * k as f64).exp(),
            2.0 * (-tr / (16.0 * spec.rho)).exp(),
        )
    } else {
        (0.0, 0.0)
    };
    ConcentrationReport::assemble(
        sigmas,
        2.0 * tr.sqrt(),
        tr.sqrt() / 4.0,
        fail,
        fail_alt,
        spec.admissible(k),
    )
}

// ---------------------------------------------------------------------------
// Finite joints and influence

/// Explicit joint law of a discrete random vector. Cells are indexed in
/// row-major order over the coordinates' supports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FiniteJoint {
    supports: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

impl FiniteJoint {
    pub const MAX_SUPPORT: usize = 8;
    pub const MAX_DIM: usize = 8;

    pub fn new(supports: Vec<Vec<f64>>, probs: Vec<f64>) -> Result<Self> {
        if supports.is_empty() || supports.len() > Self::MAX_DIM {
            return Err(Error::InvalidJoint(format!(
                "dimension must be in 1..={}, got {}",
                Self::MAX_DIM,
                supports.len()
            )));
        }
        if let Some(s) = supports
            .iter()
            .find(|s| s.is_empty() || s.len() > Self::MAX_SUPPORT)
        {
            return Err(Error::InvalidJoint(format!(
                "support sizes must be in 1..={}, got {}",
                Self::MAX_SUPPORT,
                s.len()
            )));
        }
        if supports.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidJoint("support values must be finite".into()));
        }
        let cells = supports
            .iter()
            .try_fold(1usize, |acc, s| acc.checked_mul(s.len()));
        match cells {
            Some(c) if c <= MAX_TABLE => {
                if probs.len() != c {
                    return Err(Error::InvalidJoint(format!(
                        "expected {c} probabilities, got {}",
                        probs.len()
                    )));
                }
            }
            _ => {
                return Err(Error::TooLarge(format!(
                    "joint table exceeds {MAX_TABLE} cells"
                )))
            }
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::InvalidJoint(
                "probabilities must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidJoint(format!("probabilities sum to {total}")));
        }
        Ok(FiniteJoint { supports, probs })
    }

    /// Independent coordinates with the given marginals `(values, probs)`.
    pub fn product(marginals: &[(Vec<f64>, Vec<f64>)]) -> Result<Self> {
        let parts = marginals
            .iter()
            .map(|(v, p)| FiniteJoint::new(vec![v.clone()], p.clone()))
            .collect::<Result<Vec<_>>>()?;
        Self::independent(&parts)
    }

    /// Joint of independent blocks, coordinates concatenated in order.
    pub fn independent(parts: &[FiniteJoint]) -> Result<Self> {
        let supports: Vec<Vec<f64>> = parts
            .iter()
            .flat_map(|p| p.supports.iter().cloned())
            .collect();
        let cells = parts
            .iter()
            .try_fold(1usize, |acc, p| acc.checked_mul(p.probs.len()));
        if supports.len() > Self::MAX_DIM || !matches!(cells, Some(c) if c <= MAX_TABLE) {
            return Err(Error::TooLarge(format!(
                "independent joint of {} coordinates exceeds the enumeration limit",
                supports.len()
            )));
        }
        let mut probs = vec![1.0];
        for p in parts {
            probs = probs
                .iter()
                .flat_map(|&a| p.probs.iter().map(move |&b| a * b))
                .collect();
        }
        FiniteJoint::new(supports, probs)
    }

    /// `n` independent copies.
    pub fn copies(&self, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("need at least one copy".into()));
        }
        Self::independent(&vec![self.clone(); n])
    }

    pub fn dim(&self) -> usize {
        self.supports.len()
    }

    pub fn supports(&self) -> &[Vec<f64>] {
        &self.supports
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    fn strides(&self) -> Vec<usize> {
        let mut s = vec![1usize; self.dim()];
        for i in (0..self.dim().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.supports[i + 1].len();
        }
        s
    }

    fn digit(&self, cell: usize, i: usize, strides: &[usize]) -> usize {
        (cell / strides[i]) % self.supports[i].len()
    }

    pub fn value_of(&self, cell: usize) -> Vec<f64> {
        let st = self.strides();
        (0..self.dim())
            .map(|i| self.supports[i][self.digit(cell, i, &st)])
            .collect()
    }

    pub fn means(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (cell, &p) in self.probs.iter().enumerate() {
            for (mi, v) in m.iter_mut().zip(self.value_of(cell)) {
                *mi += p * v;
            }
        }
        m
    }

    pub fn variances(&self) -> Vec<f64> {
        let means = self.means();
        let mut var = vec![0.0; self.dim()];
        for (cell, &p) in self.probs.iter().enumerate() {
            for (i, v) in self.value_of(cell).into_iter().enumerate() {
                var[i] += p * (v - means[i]).powi(2);
            }
        }
        var
    }

    pub fn max_abs_value(&self) -> f64 {
        self.supports
            .iter()
            .flatten()
            .fold(0.0, |a, v| a.max(v.abs()))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (cell, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                last = cell;
                acc += p;
                if u < acc {
                    return self.value_of(cell);
                }
            }
        }
        self.value_of(last)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InfluenceReport {
    #[serde(serialize_with = "crate::linalg::serialize_rows")]
    pub matrix: DMatrix<f64>,
    /// Spectral norm.
    pub norm: f64,
}

/// Exact influence matrix by enumerating every conditioning assignment.
/// Assignments of zero probability are skipped.
pub fn influence_matrix(joint: &FiniteJoint) -> InfluenceReport {
    let d = joint.dim();
    let st = joint.strides();
    let mut inf = DMatrix::zeros(d, d);
    for i in 0..d {
        let si = joint.supports[i].len();
        for j in (0..d).filter(|&j| j != i) {
            let sj = joint.supports[j].len();
            let mut worst = 0.0f64;
            for base in 0..joint.probs.len() {
                if joint.digit(base, i, &st) != 0 || joint.digit(base, j, &st) != 0 {
                    continue;
                }
                let conditionals: Vec<Vec<f64>> = (0..sj)
                    .filter_map(|b| {
                        let col: Vec<f64> = (0..si)
                            .map(|a| joint.probs[base + a * st[i] + b * st[j]])
                            .collect();
                        let mass: f64 = col.iter().sum();
                        (mass > 0.0).then(|| col.iter().map(|p| p / mass).collect())
                    })
                    .collect();
                for (x, p) in conditionals.iter().enumerate() {
                    for q in &conditionals[x + 1..] {
                        let tv = 0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>();
                        worst = worst.max(tv);
                    }
                }
            }
            inf[(i, j)] = if worst < TV_FLOOR { 0.0 } else { worst };
        }
    }
    let norm = singular_extremes(&inf).sigma_max;
    InfluenceReport { matrix: inf, norm }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorizationReport {
    pub copies: usize,
    pub single_norm: f64,
    pub product_norm: f64,
    /// Largest entrywise gap between `INF(U)` and `I_n (x) INF(X)`.
    pub max_entry_gap: f64,
    pub holds: bool,
}

pub const TENSOR_TOL: f64 = 1e-10;

/// Compares the influence matrix of `n` independent copies of `joint` with
/// the block-diagonal `I_n (x) INF(X)`.
pub fn tensorization_check(joint: &FiniteJoint, n: usize) -> Result<TensorizationReport> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one copy".into()));
    }
    if n * joint.dim() > FiniteJoint::MAX_DIM {
        return Err(Error::TooLarge(format!(
            "{n} copies of a {}-dimensional joint exceed {} coordinates",
            joint.dim(),
            FiniteJoint::MAX_DIM
        )));
    }
    let single = influence_matrix(joint);
    let product = influence_matrix(&joint.copies(n)?);
    let expected = DMatrix::<f64>::identity(n, n).kronecker(&single.matrix);
    let gap = (&product.matrix - &expected).amax();
    Ok(TensorizationReport {
        copies: n,
        single_norm: single.norm,
        product_norm: product.norm,
        max_entry_gap: gap,
        holds: gap <= TENSOR_TOL && (single.norm - product.norm).abs() <= TENSOR_TOL,
    })
}

/// The joint-law fixtures used for influence and tensorization checks.
pub fn shipped_fixtures() -> Vec<(String, FiniteJoint)> {
    let mut out = Vec::new();
    let mut push = |name: &str, j: Result<FiniteJoint>| {
        out.push((name.to_string(), j.expect("fixture is valid")))
    };
    let fair = (vec![0.0, 1.0], vec![0.5, 0.5]);
    let pm = (vec![-1.0, 1.0], vec![0.5, 0.5]);

    push(
        "product-fair-bits-2",
        FiniteJoint::product(&[fair.clone(), fair.clone()]),
    );
    push(
        "product-skewed-3",
        FiniteJoint::product(&[
            (vec![0.0, 1.0], vec![0.3, 0.7]),
            (vec![-1.0, 0.0, 2.0], vec![0.2, 0.5, 0.3]),
            (vec![0.5, 1.5], vec![0.9, 0.1]),
        ]),
    );
    push(
        "product-rademacher-4",
        FiniteJoint::product(&vec![pm.clone(); 4]),
    );
    push(
        "product-ternary-2",
        FiniteJoint::product(&[
            (vec![-1.0, 0.0, 1.0], vec![0.25, 0.5, 0.25]),
            (vec![0.0, 1.0, 2.0], vec![0.6, 0.3, 0.1]),
        ]),
    );
    push(
        "single-coordinate",
        FiniteJoint::new(vec![vec![0.0, 1.0, 3.0]], vec![0.2, 0.3, 0.5]),
    );
    push(
        "point-mass-2",
        FiniteJoint::new(vec![vec![0.0], vec![0.0]], vec![1.0]),
    );
    push(
        "coupled-bits",
        FiniteJoint::new(vec![vec![0.0, 1.0]; 2], vec![0.5, 0.0, 0.0, 0.5]),
    );
    push(
        "influence-0.6",
        FiniteJoint::new(vec![vec![0.0, 1.0]; 2], vec![0.4, 0.1, 0.1, 0.4]),
    );
    push(
        "anti-correlated",
        FiniteJoint::new(vec![vec![-1.0, 1.0]; 2], vec![0.1, 0.4, 0.4, 0.1]),
    );
    push(
        "asymmetric-pair",
        FiniteJoint::new(vec![vec![0.0, 1.0]; 2], vec![0.3, 0.2, 0.1, 0.4]),
    );
    push(
        "zero-cell-pair",
        FiniteJoint::new(vec![vec![0.0, 1.0]; 2], vec![0.5, 0.25, 0.0, 0.25]),
    );
    push(
        "ternary-binary",
        FiniteJoint::new(
            vec![vec![-1.0, 0.0, 1.0], vec![0.0, 1.0]],
            vec![0.2, 0.1, 0.15, 0.15, 0.05, 0.35],
        ),
    );
    for (name, beta) in [("ising-chain-weak", 0.2), ("ising-chain-strong", 0.9)] {
        push(name, ising(3, beta, 0.0, false));
    }
    push("ising-ring-4", ising(4, 0.3, 0.0, true));
    push("ising-field-3", ising(3, 0.4, 0.5, false));
    push("ising-chain-4", ising(4, 0.15, -0.2, false));
    push(
        "product-times-pair",
        FiniteJoint::independent(&[
            FiniteJoint::new(vec![vec![0.0, 1.0]; 2], vec![0.4, 0.1, 0.1, 0.4]).unwrap(),
            FiniteJoint::product(&[fair]).unwrap(),
        ]),
    );
    let mut r = ExperimentSeed(20_240_601).rng_labeled("fixtures", 0);
    for (name, sizes) in [
        ("random-2x3", vec![2usize, 3]),
        ("random-2x2x2", vec![2, 2, 2]),
    ] {
        let cells: usize = sizes.iter().product();
        let raw: Vec<f64> = (0..cells).map(|_| r.random::<f64>() + 0.05).collect();
        let total: f64 = raw.iter().sum();
        let supports = sizes
            .iter()
            .map(|&s| (0..s).map(|v| v as f64).collect())
            .collect();
        push(
            name,
            FiniteJoint::new(supports, raw.iter().map(|p| p / total).collect()),
        );
    }
    out
}

/// Ising model on `d` spins in `{-1, 1}` with coupling `beta` between
/// neighbours on a chain (or ring) and external field `h`.
pub fn ising(d: usize, beta: f64, h: f64, ring: bool) -> Result<FiniteJoint> {
    if d == 0 || d > FiniteJoint::MAX_DIM {
        return Err(Error::InvalidArgument(format!(
            "ising size must be in 1..={}",
            FiniteJoint::MAX_DIM
        )));
    }
    let cells = 1usize << d;
    let spin = |cell: usize, i: usize| {
        if (cell >> (d - 1 - i)) & 1 == 1 {
            1.0
        } else {
            -1.0
        }
    };
    let mut w: Vec<f64> = (0..cells)
        .map(|c| {
            let mut e = h * (0..d).map(|i| spin(c, i)).sum::<f64>();
            for i in 0..d.saturating_sub(1) {
                e += beta * spin(c, i) * spin(c, i + 1);
            }
            if ring && d > 2 {
                e += beta * spin(c, d - 1) * spin(c, 0);
            }
            e.exp()
        })
        .collect();
    let z: f64 = w.iter().sum();
    w.iter_mut().for_each(|p| *p /= z);
    FiniteJoint::new(vec![vec![-1.0, 1.0]; d], w)
}

// ---------------------------------------------------------------------------
// Weak dependence

/// A bounded random vector with known coordinate variances and influence
/// norm.
pub trait BoundedVectorSampler: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    /// `c` with every coordinate in `[-c, c]`.
    fn bound(&self) -> f64;
    fn variances(&self) -> Vec<f64>;
    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64>;
}

/// Independent blocks, each an exactly sampled [`FiniteJoint`]. The influence
/// matrix is block diagonal, so its norm is the largest block norm.
#[derive(Debug, Clone)]
pub struct BlockJoint {
    blocks: Vec<FiniteJoint>,
}

impl BlockJoint {
    pub fn new(blocks: Vec<FiniteJoint>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidArgument("need at least one block".into()));
        }
        Ok(BlockJoint { blocks })
    }

    /// `m` independent uniform signs `+-c`.
    pub fn rademacher(m: usize, c: f64) -> Result<Self> {
        let sign = FiniteJoint::new(vec![vec![-c, c]], vec![0.5, 0.5])?;
        Self::new(vec![sign; m])
    }

    /// The constant zero vector of length `m`.
    pub fn zero(m: usize) -> Result<Self> {
        Self::new(vec![FiniteJoint::new(vec![vec![0.0]], vec![1.0])?; m])
    }

    /// `m / block.dim()` independent copies of `block`.
    pub fn repeated(block: FiniteJoint, copies: usize) -> Result<Self> {
        Self::new(vec![block; copies])
    }

    pub fn influence_norm(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| influence_matrix(b).norm)
            .fold(0.0, f64::max)
    }

    pub fn means(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.means()).collect()
    }
}

impl BoundedVectorSampler for BlockJoint {
    fn dim(&self) -> usize {
        self.blocks.iter().map(|b| b.dim()).sum()
    }

    fn bound(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.max_abs_value())
            .fold(0.0, f64::max)
    }

    fn variances(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.variances()).collect()
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.sample(rng)).collect()
    }
}

/// Trials of `sigma(U)` against `[v/4, 2v]`, `v^2 = sum_i Var(X_i)`, for `U`
/// with `k` independent columns drawn from `sampler`.
pub fn check_weakdep_concentration(
    sampler: &dyn BoundedVectorSampler,
    norm_bound: f64,
    k: usize,
    trials: usize,
    rng: &mut dyn RngCore,
) -> ConcentrationReport {
    let m = sampler.dim();
    let sigmas = per_trial(trials, "weakdep-concentration", rng, |r| {
        let mut u = DMatrix::zeros(m, k);
        for col in 0..k {
            let x = sampler.sample(r);
            u.set_column(col, &DVector::from_vec(x));
        }
        singular_extremes(&u)
    });
    let v2: f64 = sampler.variances().iter().sum();
    let v = v2.sqrt();
    let c = sampler.bound();
    let gap = (1.0 - norm_bound).max(0.0);
    let (n, mf) = (k as f64, m as f64);
    let (fail, fail_alt, admissible) = if c > 0.0 && gap > 0.0 {
        let c4 = c.powi(4);
        (
            2.0 * (-gap * v2 * v2 / (32.0 * c4 * n * mf) + 4.0 * n).exp(),
            2.0 * (-gap * v2 * v2 / (64.0 * c4 * n * mf)).exp(),
            v2 > 16.0 * c * c * n * mf.sqrt() / gap,
        )
    } else {
        (1.0, 1.0, false)
    };
    ConcentrationReport::assemble(sigmas, 2.0 * v, v / 4.0, fail, fail_alt, admissible)
}
