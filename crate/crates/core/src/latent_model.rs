//! The matrix-factorization type model.
//!
//! A bidder's latent type `z` lives in `[0,1]^k` and induces item values `Az`
//! through an `N x k` design matrix. True types are generated by coupling
//! `Az` with bounded noise so that, with probability at least `1 - eps1`, the
//! true type is within `eps1` of `Az` in the sup norm.

use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Attempts made by the rejection fallback before reporting `EmptyMass`.
pub const REJECTION_CAP: usize = 100_000;

/// The `N x k` archetype matrix with its cached sup-operator norm.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    entries: DMatrix<f64>,
    inf_norm: f64,
}

impl DesignMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        let (n, k) = entries.shape();
        if k == 0 || n < k {
            return Err(Error::InvalidDesign(format!(
                "need N >= k >= 1, got N = {n}, k = {k}"
            )));
        }
        if let Some(bad) = entries.iter().find(|x| !x.is_finite()) {
            return Err(Error::InvalidDesign(format!("non-finite entry {bad}")));
        }
        let inf_norm = row_abs_sum_max(&entries);
        Ok(DesignMatrix { entries, inf_norm })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let k = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != k) {
            return Err(Error::DimensionMismatch {
                expected: k,
                actual: r.len(),
            });
        }
        Self::new(DMatrix::from_fn(n, k, |i, j| rows[i][j]))
    }

    /// Stacks a `k x k` block `C` on top of an `(N-k) x k` block `H` and
    /// places stacked row `i` at row `perm[i]` of the result.
    pub fn from_blocks(block: &DMatrix<f64>, rest: &DMatrix<f64>, perm: &[usize]) -> Result<Self> {
        let k = block.ncols();
        if block.nrows() != k {
            return Err(Error::InvalidDesign(
                "structured block must be square".into(),
            ));
        }
        if rest.ncols() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                actual: rest.ncols(),
            });
        }
        let n = k + rest.nrows();
        check_permutation(perm, n)?;
        let mut a = DMatrix::zeros(n, k);
        for (i, &target) in perm.iter().enumerate() {
            let src = if i < k { block.row(i) } else { rest.row(i - k) };
            a.row_mut(target).copy_from(&src);
        }
        Self::new(a)
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn n_items(&self) -> usize {
        self.entries.nrows()
    }

    pub fn k(&self) -> usize {
        self.entries.ncols()
    }

    /// `max_i sum_j |A_ij|`.
    pub fn inf_norm(&self) -> f64 {
        self.inf_norm
    }

    /// Rows `rows` of `A`, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), self.k(), |i, j| self.entries[(rows[i], j)])
    }

    /// `t = Az`.
    pub fn apply(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        if z.len() != self.k() {
            return Err(Error::DimensionMismatch {
                expected: self.k(),
                actual: z.len(),
            });
        }
        Ok(&self.entries * z)
    }

    /// Parses the CSV layout: a `# N,k` comment line followed by `N` rows of
    /// `k` comma-separated values.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut reader = BufReader::new(reader);
        let mut header = String::new();
        reader.read_line(&mut header)?;
        let dims = header
            .trim()
            .strip_prefix('#')
            .ok_or_else(|| Error::InvalidDesign("missing `# N,k` header line".into()))?;
        let dims: Vec<usize> = dims
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidDesign(format!("bad header `{}`: {e}", header.trim())))?;
        let [n, k] = dims[..] else {
            return Err(Error::InvalidDesign(format!(
                "bad header `{}`",
                header.trim()
            )));
        };

        let mut csv = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut rows = Vec::with_capacity(n);
        for record in csv.records() {
            let record = record.map_err(|e| Error::InvalidDesign(e.to_string()))?;
            let row: Vec<f64> = record
                .iter()
                .map(str::parse::<f64>)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidDesign(format!("row {}: {e}", rows.len() + 1)))?;
            if row.len() != k {
                return Err(Error::InvalidDesign(format!(
                    "row {} has {} columns, header says {k}",
                    rows.len() + 1,
                    row.len()
                )));
            }
            rows.push(row);
        }
        if rows.len() != n {
            return Err(Error::InvalidDesign(format!(
                "header says {n} rows, found {}",
                rows.len()
            )));
        }
        Self::from_rows(&rows)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# {},{}", self.n_items(), self.k())?;
        for row in self.entries.row_iter() {
            let cells: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

/// `max_i sum_j |M_ij|` for any dense matrix.
pub fn row_abs_sum_max(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Free-function form of [`DesignMatrix::inf_norm`].
pub fn inf_norm(a: &DesignMatrix) -> f64 {
    a.inf_norm()
}

/// Free-function form of [`DesignMatrix::apply`].
pub fn apply_design(a: &DesignMatrix, z: &DVector<f64>) -> Result<DVector<f64>> {
    a.apply(z)
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: perm.len(),
        });
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::InvalidArgument(format!(
                "not a permutation of 0..{n}"
            )));
        }
        seen[p] = true;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Latent priors

/// A distribution on `[0,1]` with CDF and generalized inverse CDF.
#[derive(Debug, Clone, PartialEq)]
pub enum Marginal {
    Uniform,
    /// Gaussian `N(mean, sd^2)` conditioned on `[0,1]`.
    TruncatedGaussian {
        mean: f64,
        sd: f64,
        lo_cdf: f64,
        mass: f64,
    },
    /// Finitely many atoms in `[0,1]`, sorted ascending.
    Discrete {
        values: Vec<f64>,
        probs: Vec<f64>,
        cum: Vec<f64>,
    },
}

fn std_normal() -> Normal {
    Normal::standard()
}

impl Marginal {
    pub fn uniform() -> Self {
        Marginal::Uniform
    }

    pub fn truncated_gaussian(mean: f64, sd: f64) -> Result<Self> {
        if !(mean.is_finite() && sd.is_finite() && sd > 0.0) {
            return Err(Error::InvalidPrior(format!(
                "truncated gaussian needs finite mean and sd > 0, got ({mean}, {sd})"
            )));
        }
        let n = std_normal();
        let lo_cdf = n.cdf((0.0 - mean) / sd);
        let hi_cdf = n.cdf((1.0 - mean) / sd);
        let mass = hi_cdf - lo_cdf;
        if mass <= 0.0 {
            return Err(Error::InvalidPrior(format!(
                "N({mean}, {sd}^2) has no numerically representable mass on [0,1]"
            )));
        }
        Ok(Marginal::TruncatedGaussian {
            mean,
            sd,
            lo_cdf,
            mass,
        })
    }

    pub fn discrete(values: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.len() != probs.len() {
            return Err(Error::InvalidPrior(
                "discrete marginal needs equally many (>= 1) values and probabilities".into(),
            ));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidPrior(
                "discrete atoms must lie in [0,1]".into(),
            ));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::InvalidPrior(
                "probabilities must be nonnegative".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidPrior(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        let mut atoms: Vec<(f64, f64)> = values.into_iter().zip(probs).collect();
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        if atoms.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidPrior("duplicate atom".into()));
        }
        let (values, probs): (Vec<f64>, Vec<f64>) =
            atoms.into_iter().map(|(v, p)| (v, p / total)).unzip();
        let cum = probs
            .iter()
            .scan(0.0, |acc, p| {
                *acc += p;
                Some(*acc)
            })
            .collect();
        Ok(Marginal::Discrete { values, probs, cum })
    }

    pub fn point_mass(at: f64) -> Result<Self> {
        Self::discrete(vec![at], vec![1.0])
    }

    pub fn is_continuous(&self) -> bool {
        !matches!(self, Marginal::Discrete { .. })
    }

    /// `P(X <= x)`.
    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            Marginal::Uniform => x.clamp(0.0, 1.0),
            Marginal::TruncatedGaussian {
                mean,
                sd,
                lo_cdf,
                mass,
            } => {
                let x = x.clamp(0.0, 1.0);
                ((std_normal().cdf((x - mean) / sd) - lo_cdf) / mass).clamp(0.0, 1.0)
            }
            Marginal::Discrete { values, cum, .. } => {
                let idx = values.partition_point(|v| *v <= x);
                if idx == 0 {
                    0.0
                } else {
                    cum[idx - 1]
                }
            }
        }
    }

    /// `P(X < x)`.
    pub fn cdf_left(&self, x: f64) -> f64 {
        match self {
            Marginal::Discrete { values, cum, .. } => {
                let idx = values.partition_point(|v| *v < x);
                if idx == 0 {
                    0.0
                } else {
                    cum[idx - 1]
                }
            }
            _ => self.cdf(x),
        }
    }

    /// Generalized inverse `min { x : F(x) >= u }` for `u` in `[0,1]`.
    pub fn inv_cdf(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        match self {
            Marginal::Uniform => u,
            Marginal::TruncatedGaussian {
                mean,
                sd,
                lo_cdf,
                mass,
            } => {
                let p = (lo_cdf + u * mass).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
                (mean + sd * std_normal().inverse_cdf(p)).clamp(0.0, 1.0)
            }
            Marginal::Discrete { values, cum, .. } => {
                let idx = cum.partition_point(|c| *c < u);
                values[idx.min(values.len() - 1)]
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            Marginal::Uniform => 0.5,
            Marginal::TruncatedGaussian { mean, sd, mass, .. } => {
                let n = std_normal();
                let a = (0.0 - mean) / sd;
                let b = (1.0 - mean) / sd;
                mean + sd * (n.pdf(a) - n.pdf(b)) / mass
            }
            Marginal::Discrete { values, probs, .. } => {
                values.iter().zip(probs).map(|(v, p)| v * p).sum()
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.inv_cdf(rng.random::<f64>())
    }

    /// Draws from the marginal conditioned on `[lo, hi)`, or on `[lo, 1]` when
    /// `hi >= 1`. Returns `None` when the interval carries no mass.
    pub fn sample_interval<R: Rng + ?Sized>(&self, lo: f64, hi: f64, rng: &mut R) -> Option<f64> {
        let lo = lo.max(0.0);
        let closed_top = hi >= 1.0;
        if lo > 1.0 || hi <= lo {
            return None;
        }
        match self {
            Marginal::Discrete { values, probs, .. } => {
                let first = values.partition_point(|v| *v < lo);
                let last = if closed_top {
                    values.len()
                } else {
                    values.partition_point(|v| *v < hi)
                };
                let mass: f64 = probs[first..last].iter().sum();
                if last <= first || mass <= 0.0 {
                    return None;
                }
                let mut u = rng.random::<f64>() * mass;
                for i in first..last {
                    u -= probs[i];
                    if u < 0.0 && probs[i] > 0.0 {
                        return Some(values[i]);
                    }
                }
                (first..last)
                    .rev()
                    .find(|&i| probs[i] > 0.0)
                    .map(|i| values[i])
            }
            _ => {
                let f_lo = self.cdf(lo);
                let f_hi = if closed_top { 1.0 } else { self.cdf(hi) };
                let mass = f_hi - f_lo;
                if mass <= 0.0 {
                    return None;
                }
                // u in (F(lo), F(hi)] keeps the inverse inside [lo, hi].
                let u = f_hi - rng.random::<f64>() * mass;
                let mut x = self.inv_cdf(u).clamp(lo, hi.min(1.0));
                if !closed_top && x >= hi {
                    x = hi.next_down().max(lo);
                }
                Some(x)
            }
        }
    }

    /// Largest `|Q(F(x)) - x|` over a grid of support points of a continuous
    /// marginal, or over the atoms of a discrete one.
    pub fn inversion_error(&self, grid: usize) -> f64 {
        match self {
            Marginal::Discrete { values, .. } => values
                .iter()
                .map(|&v| (self.inv_cdf(self.cdf(v)) - v).abs())
                .fold(0.0, f64::max),
            _ => (0..=grid)
                .map(|i| {
                    let x = i as f64 / grid as f64;
                    (self.inv_cdf(self.cdf(x)) - x).abs()
                })
                .fold(0.0, f64::max),
        }
    }
}

/// Joint sampler for non-product latent priors.
pub trait JointLatentSampler: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    /// One draw, which must lie in `[0,1]^dim`.
    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64>;
}

/// A bidder's latent-type distribution on `[0,1]^k`.
#[derive(Debug, Clone)]
pub enum LatentPrior {
    /// Independent coordinates; conditional sampling is exact.
    Product(Vec<Marginal>),
    /// Arbitrary joint law; conditional sampling falls back to rejection.
    Custom(Arc<dyn JointLatentSampler>),
}

impl LatentPrior {
    pub fn iid(marginal: Marginal, k: usize) -> Self {
        LatentPrior::Product(vec![marginal; k])
    }

    pub fn uniform(k: usize) -> Self {
        Self::iid(Marginal::Uniform, k)
    }

    pub fn dim(&self) -> usize {
        match self {
            LatentPrior::Product(m) => m.len(),
            LatentPrior::Custom(s) => s.dim(),
        }
    }

    pub fn is_product(&self) -> bool {
        matches!(self, LatentPrior::Product(_))
    }

    /// Checks the dimension and, for product priors, that inversion is
    /// accurate to `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        if self.dim() == 0 {
            return Err(Error::InvalidPrior("zero-dimensional prior".into()));
        }
        if let LatentPrior::Product(ms) = self {
            for (j, m) in ms.iter().enumerate() {
                let err = m.inversion_error(1000);
                if err > tol {
                    return Err(Error::InvalidPrior(format!(
                        "coordinate {j}: inverse CDF round trip error {err:e} exceeds {tol:e}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One draw from the prior: inverse-CDF transform of independent uniforms.
pub fn sample_latent<R: Rng>(prior: &LatentPrior, rng: &mut R) -> DVector<f64> {
    match prior {
        LatentPrior::Product(ms) => {
            DVector::from_iterator(ms.len(), ms.iter().map(|m| m.sample(rng)))
        }
        LatentPrior::Custom(s) => DVector::from_vec(s.sample(rng)),
    }
}

/// A draw from the prior conditioned on the cube `prod_j [x_j, x_j + delta)`
/// intersected with `[0,1]^k`. Cells reaching past 1 are closed at 1, so the
/// cells of any grid partition `[0,1]^k`.
pub fn conditional_cube_sample<R: Rng>(
    prior: &LatentPrior,
    corner: &DVector<f64>,
    delta: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if corner.len() != prior.dim() {
        return Err(Error::DimensionMismatch {
            expected: prior.dim(),
            actual: corner.len(),
        });
    }
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "cube side must be positive, got {delta}"
        )));
    }
    match prior {
        LatentPrior::Product(ms) => {
            let mut out = DVector::zeros(ms.len());
            for (j, m) in ms.iter().enumerate() {
                out[j] = m
                    .sample_interval(corner[j], corner[j] + delta, rng)
                    .ok_or(Error::EmptyMass { coordinate: j })?;
            }
            Ok(out)
        }
        LatentPrior::Custom(s) => {
            for _ in 0..REJECTION_CAP {
                let z = s.sample(rng);
                if z.iter()
                    .enumerate()
                    .all(|(j, &v)| in_cell(v, corner[j], delta))
                {
                    return Ok(DVector::from_vec(z));
                }
            }
            Err(Error::EmptyMass { coordinate: 0 })
        }
    }
}

/// Membership in `[x, x + delta)`, closed at 1 when the cell reaches past 1.
pub fn in_cell(v: f64, x: f64, delta: f64) -> bool {
    let hi = x + delta;
    v >= x && (v < hi || (hi >= 1.0 && v <= 1.0))
}

// ---------------------------------------------------------------------------
// Prokhorov couplings

/// Shape of the always-present small perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmallNoise {
    /// Uniform on the sup-norm ball of radius `eps1`.
    Uniform,
    /// Independent signs times `eps1`: every draw sits on the ball's boundary.
    Corners,
}

/// Generator of true types within Prokhorov distance `eps1` of `A o D_z`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProkhorovKernel {
    eps1: f64,
    small_noise: SmallNoise,
    jump_probability: f64,
    jump_cap: f64,
}

impl ProkhorovKernel {
    pub fn new(
        eps1: f64,
        small_noise: SmallNoise,
        jump_probability: f64,
        jump_cap: f64,
    ) -> Result<Self> {
        if !(eps1.is_finite() && (0.0..=1.0).contains(&eps1)) {
            return Err(Error::InvalidKernel(format!(
                "eps1 must lie in [0,1], got {eps1}"
            )));
        }
        if !(0.0..=eps1).contains(&jump_probability) {
            return Err(Error::InvalidKernel(format!(
                "jump probability {jump_probability} must lie in [0, eps1 = {eps1}]"
            )));
        }
        if !(jump_cap.is_finite() && jump_cap >= 0.0) {
            return Err(Error::InvalidKernel(format!(
                "jump cap must be finite and >= 0, got {jump_cap}"
            )));
        }
        Ok(ProkhorovKernel {
            eps1,
            small_noise,
            jump_probability,
            jump_cap,
        })
    }

    /// Uniform small noise and jump cap `J = ||A||_inf`.
    pub fn for_design(a: &DesignMatrix, eps1: f64, jump_probability: f64) -> Result<Self> {
        Self::new(eps1, SmallNoise::Uniform, jump_probability, a.inf_norm())
    }

    /// The exact model: `t = Az`.
    pub fn exact() -> Self {
        ProkhorovKernel {
            eps1: 0.0,
            small_noise: SmallNoise::Uniform,
            jump_probability: 0.0,
            jump_cap: 0.0,
        }
    }

    pub fn eps1(&self) -> f64 {
        self.eps1
    }

    pub fn jump_probability(&self) -> f64 {
        self.jump_probability
    }

    pub fn jump_cap(&self) -> f64 {
        self.jump_cap
    }

    pub fn small_noise(&self) -> SmallNoise {
        self.small_noise
    }

    fn noise<R: Rng>(&self, n: usize, rng: &mut R) -> DVector<f64> {
        // The jump decision is always drawn so the stream layout does not
        // depend on the parameters.
        let jump = rng.random::<f64>() < self.jump_probability;
        if jump {
            return DVector::from_fn(n, |_, _| rng.random_range(-1.0..=1.0) * self.jump_cap);
        }
        match self.small_noise {
            SmallNoise::Uniform => {
                DVector::from_fn(n, |_, _| rng.random_range(-1.0..=1.0) * self.eps1)
            }
            SmallNoise::Corners => DVector::from_fn(n, |_, _| {
                if rng.random::<bool>() {
                    self.eps1
                } else {
                    -self.eps1
                }
            }),
        }
    }
}

/// A latent type together with the true type coupled to it.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledPair {
    pub latent: DVector<f64>,
    pub true_type: DVector<f64>,
}

/// `t = Az + noise`, where the noise is within `eps1` in sup norm except on a
/// jump event of probability at most `eps1`.
pub fn prokhorov_perturb<R: Rng>(
    a: &DesignMatrix,
    z: &DVector<f64>,
    kernel: &ProkhorovKernel,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let base = a.apply(z)?;
    let noise = kernel.noise(a.n_items(), rng);
    Ok(base + noise)
}

/// Draws `z` from the prior and a coupled true type.
pub fn sample_coupled<R: Rng>(
    a: &DesignMatrix,
    prior: &LatentPrior,
    kernel: &ProkhorovKernel,
    rng: &mut R,
) -> Result<CoupledPair> {
    let latent = sample_latent(prior, rng);
    let true_type = prokhorov_perturb(a, &latent, kernel, rng)?;
    Ok(CoupledPair { latent, true_type })
}

/// Rounding slack when recomputing `t - Az` for a perturbation on the ball boundary.
pub const COUPLING_TOL: f64 = 1e-12;

/// Fraction of pairs with `||t - Az||_inf > eps` (up to [`COUPLING_TOL`]).
pub fn verify_coupling(a: &DesignMatrix, pairs: &[CoupledPair], eps: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no pairs to check".into()));
    }
    let mut violations = 0usize;
    for p in pairs {
        let az = a.apply(&p.latent)?;
        if (&p.true_type - az).amax() > eps + COUPLING_TOL {
            violations += 1;
        }
    }
    Ok(violations as f64 / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{ExperimentSeed, Stream};
    use crate::stats::{ks_critical_value, ks_statistic};
    use approx::assert_relative_eq;

    fn rng(i: u64) -> crate::rng::SimRng {
        ExperimentSeed(11).rng(Stream::Model, i)
    }

    #[test]
    fn design_validation() {
        assert!(DesignMatrix::new(DMatrix::zeros(1, 2)).is_err());
        assert!(DesignMatrix::new(DMatrix::from_element(2, 1, f64::NAN)).is_err());
        assert!(DesignMatrix::new(DMatrix::zeros(3, 2)).is_ok());
    }

    #[test]
    fn inf_norm_examples() {
        assert_eq!(
            DesignMatrix::new(DMatrix::identity(4, 4))
                .unwrap()
                .inf_norm(),
            1.0
        );
        let a = DesignMatrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 0.5]]).unwrap();
        assert_eq!(inf_norm(&a), 3.0);
        assert_eq!(
            DesignMatrix::new(DMatrix::zeros(3, 2)).unwrap().inf_norm(),
            0.0
        );
    }

    #[test]
    fn apply_design_examples() {
        let id = DesignMatrix::new(DMatrix::identity(2, 2)).unwrap();
        let z = DVector::from_vec(vec![0.3, 0.7]);
        assert_eq!(apply_design(&id, &z).unwrap(), z);

        let a = DesignMatrix::from_rows(&[vec![1.0, 1.0], vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap();
        assert_eq!(a.apply(&DVector::zeros(2)).unwrap(), DVector::zeros(3));
        let t = a.apply(&DVector::from_vec(vec![0.5, 0.5])).unwrap();
        assert_eq!(t.as_slice(), &[1.0, 1.0, 1.5]);

        assert!(matches!(
            a.apply(&DVector::zeros(3)),
            Err(Error::DimensionMismatch {
                expected: 2,
                actual: 3
            })
        ));
    }

    #[test]
    fn from_blocks_places_rows() {
        let c = DMatrix::identity(2, 2);
        let h = DMatrix::from_row_slice(1, 2, &[0.25, 0.5]);
        let a = DesignMatrix::from_blocks(&c, &h, &[2, 0, 1]).unwrap();
        assert_eq!(
            a.entries().row(2).iter().copied().collect::<Vec<_>>(),
            vec![1.0, 0.0]
        );
        assert_eq!(
            a.entries().row(0).iter().copied().collect::<Vec<_>>(),
            vec![0.0, 1.0]
        );
        assert_eq!(
            a.entries().row(1).iter().copied().collect::<Vec<_>>(),
            vec![0.25, 0.5]
        );
        assert!(DesignMatrix::from_blocks(&c, &h, &[0, 0, 1]).is_err());
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let a =
            DesignMatrix::from_rows(&[vec![1.0, 0.1], vec![-2.5, 1e-17], vec![0.0, 3.0]]).unwrap();
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# 3,2\n"));
        assert_eq!(DesignMatrix::read_csv(&buf[..]).unwrap(), a);

        assert!(DesignMatrix::read_csv("1,2\n3,4\n".as_bytes()).is_err());
        assert!(DesignMatrix::read_csv("# 3,2\n1,2\n3,4\n".as_bytes()).is_err());
        assert!(DesignMatrix::read_csv("# 2,2\n1,2\n3\n".as_bytes()).is_err());
    }

    #[test]
    fn sample_latent_support_and_point_mass() {
        let prior = LatentPrior::uniform(5);
        let mut r = rng(0);
        for _ in 0..1000 {
            let z = sample_latent(&prior, &mut r);
            assert!(z.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let pm = LatentPrior::iid(Marginal::point_mass(0.5).unwrap(), 3);
        assert_eq!(sample_latent(&pm, &mut r).as_slice(), &[0.5, 0.5, 0.5]);
    }

    /// Composite Simpson integration of `f` on `[a, b]`.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn truncated_gaussian_empirical_mean() {
        let (m, s) = (0.3, 0.25);
        let dens = |x: f64| (-(x - m) * (x - m) / (2.0 * s * s)).exp();
        let z = simpson(dens, 0.0, 1.0, 2000);
        let mean_oracle = simpson(|x| x * dens(x), 0.0, 1.0, 2000) / z;
        let var_oracle = simpson(|x| (x - mean_oracle).powi(2) * dens(x), 0.0, 1.0, 2000) / z;

        let marg = Marginal::truncated_gaussian(m, s).unwrap();
        assert_relative_eq!(marg.mean(), mean_oracle, epsilon = 1e-9);

        let prior = LatentPrior::iid(marg, 2);
        let mut r = rng(1);
        let n = 100_000;
        let mut sums = [0.0; 2];
        for _ in 0..n {
            let z = sample_latent(&prior, &mut r);
            sums[0] += z[0];
            sums[1] += z[1];
        }
        let se = (var_oracle / n as f64).sqrt();
        for s in sums {
            assert!((s / n as f64 - mean_oracle).abs() < 3.0 * se);
        }
    }

    #[test]
    fn inversion_round_trip() {
        for m in [
            Marginal::Uniform,
            Marginal::truncated_gaussian(0.5, 0.2).unwrap(),
            Marginal::truncated_gaussian(0.9, 0.5).unwrap(),
            Marginal::discrete(vec![0.0, 0.3, 1.0], vec![0.2, 0.5, 0.3]).unwrap(),
        ] {
            assert!(m.inversion_error(1000) < 1e-9, "{m:?}");
        }
        assert!(LatentPrior::uniform(3).validate(1e-9).is_ok());
    }

    #[test]
    fn conditional_cube_membership() {
        let prior = LatentPrior::uniform(2);
        let corner = DVector::from_vec(vec![0.2, 0.2]);
        let mut r = rng(2);
        for _ in 0..10_000 {
            let z = conditional_cube_sample(&prior, &corner, 0.1, &mut r).unwrap();
            assert!(z.iter().all(|&v| (0.2..0.3).contains(&v)), "{z}");
        }
    }

    #[test]
    fn conditional_cube_full_support_matches_unconditional() {
        let prior = LatentPrior::iid(Marginal::truncated_gaussian(0.4, 0.3).unwrap(), 2);
        let corner = DVector::zeros(2);
        let n = 10_000;
        let mut r1 = rng(3);
        let mut r2 = rng(3);
        let mut a = vec![Vec::new(), Vec::new()];
        let mut b = vec![Vec::new(), Vec::new()];
        for _ in 0..n {
            let x = conditional_cube_sample(&prior, &corner, 1.0, &mut r1).unwrap();
            let y = sample_latent(&prior, &mut r2);
            for j in 0..2 {
                a[j].push(x[j]);
                b[j].push(y[j]);
            }
        }
        let crit = ks_critical_value(n, n, 0.01);
        for j in 0..2 {
            assert!(ks_statistic(&a[j], &b[j]) < crit);
        }
    }

    #[test]
    fn conditional_cube_empty_mass() {
        let prior = LatentPrior::iid(Marginal::point_mass(0.5).unwrap(), 1);
        let corner = DVector::from_vec(vec![0.6]);
        assert_eq!(
            conditional_cube_sample(&prior, &corner, 0.1, &mut rng(4)),
            Err(Error::EmptyMass { coordinate: 0 })
        );
    }

    #[test]
    fn discrete_cell_closed_at_one() {
        let m = Marginal::discrete(vec![0.5, 1.0], vec![0.5, 0.5]).unwrap();
        let prior = LatentPrior::iid(m, 1);
        let corner = DVector::from_vec(vec![0.75]);
        let z = conditional_cube_sample(&prior, &corner, 0.25, &mut rng(5)).unwrap();
        assert_eq!(z[0], 1.0);
    }

    #[derive(Debug)]
    struct Diagonal;
    impl JointLatentSampler for Diagonal {
        fn dim(&self) -> usize {
            2
        }
        fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
            let u: f64 = rng.random();
            vec![u, u]
        }
    }

    #[test]
    fn rejection_fallback() {
        let prior = LatentPrior::Custom(Arc::new(Diagonal));
        let mut r = rng(6);
        let z = conditional_cube_sample(&prior, &DVector::from_vec(vec![0.5, 0.5]), 0.25, &mut r)
            .unwrap();
        assert!(z[0] == z[1] && (0.5..0.75).contains(&z[0]));
        // Off-diagonal cell has zero mass.
        let err = conditional_cube_sample(&prior, &DVector::from_vec(vec![0.0, 0.5]), 0.25, &mut r);
        assert!(matches!(err, Err(Error::EmptyMass { .. })));
    }

    #[test]
    fn kernel_validation() {
        assert!(ProkhorovKernel::new(0.01, SmallNoise::Uniform, 0.02, 1.0).is_err());
        assert!(ProkhorovKernel::new(-0.1, SmallNoise::Uniform, 0.0, 1.0).is_err());
        assert!(ProkhorovKernel::new(0.1, SmallNoise::Uniform, 0.1, f64::INFINITY).is_err());
    }

    #[test]
    fn perturb_zero_radius_is_exact() {
        let a = DesignMatrix::from_rows(&[vec![1.0, 1.0], vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap();
        let z = DVector::from_vec(vec![0.5, 0.25]);
        let t = prokhorov_perturb(&a, &z, &ProkhorovKernel::exact(), &mut rng(7)).unwrap();
        assert_eq!(t, a.apply(&z).unwrap());
    }

    #[test]
    fn perturb_without_jumps_stays_in_ball() {
        let a = DesignMatrix::new(DMatrix::from_fn(20, 3, |i, j| {
            ((i * 7 + j * 3) % 5) as f64 * 0.2
        }))
        .unwrap();
        let prior = LatentPrior::uniform(3);
        let mut r = rng(8);
        for noise in [SmallNoise::Uniform, SmallNoise::Corners] {
            let kernel = ProkhorovKernel::new(0.01, noise, 0.0, a.inf_norm()).unwrap();
            let pairs: Vec<_> = (0..2000)
                .map(|_| sample_coupled(&a, &prior, &kernel, &mut r).unwrap())
                .collect();
            assert_eq!(verify_coupling(&a, &pairs, 0.01).unwrap(), 0.0);
        }
    }

    #[test]
    fn perturb_with_jumps_obeys_coupling_law() {
        let a =
            DesignMatrix::new(DMatrix::from_fn(10, 2, |i, j| ((i + j) % 3) as f64 * 0.5)).unwrap();
        let prior = LatentPrior::uniform(2);
        let kernel = ProkhorovKernel::for_design(&a, 0.05, 0.05).unwrap();
        let mut r = rng(9);
        let n = 10_000;
        let pairs: Vec<_> = (0..n)
            .map(|_| sample_coupled(&a, &prior, &kernel, &mut r).unwrap())
            .collect();
        let rate = verify_coupling(&a, &pairs, 0.05).unwrap();
        assert!(
            rate <= 0.05 + 3.0 * (0.05f64 * 0.95 / n as f64).sqrt(),
            "rate {rate}"
        );
        assert!(rate > 0.0);
    }

    #[test]
    fn verify_coupling_forced_cases() {
        let a = DesignMatrix::new(DMatrix::identity(2, 2)).unwrap();
        let z = DVector::from_vec(vec![0.5, 0.5]);
        let exact = CoupledPair {
            latent: z.clone(),
            true_type: z.clone(),
        };
        assert_eq!(
            verify_coupling(&a, &[exact.clone(), exact], 0.1).unwrap(),
            0.0
        );
        let far = CoupledPair {
            latent: z.clone(),
            true_type: &z + DVector::from_vec(vec![0.2, 0.0]),
        };
        assert_eq!(verify_coupling(&a, &[far], 0.1).unwrap(), 1.0);
        assert!(verify_coupling(&a, &[], 0.1).is_err());
    }
}
