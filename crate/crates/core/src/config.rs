//! Experiment configuration: one JSON document per run.
//!
//! Relative paths inside a config (design or price CSVs) resolve against the
//! directory holding the config file.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::harness::{diag_dominant_design, separable_design, BicParams};
use crate::latent_model::{DesignMatrix, LatentPrior, Marginal, ProkhorovKernel, SmallNoise};
use crate::query_protocol::{QueryPlan, Setting};
use crate::rng::ExperimentSeed;
use crate::valuation::{ConstrainedAdditiveValuation, Family};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Recover,
    Robustify,
    Concentration,
    End2end,
}

impl ScenarioKind {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Recover => "recover",
            ScenarioKind::Robustify => "robustify",
            ScenarioKind::Concentration => "concentration",
            ScenarioKind::End2end => "end2end",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub scenario: Scenario,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Scenario {
    Recover(RecoverConfig),
    Robustify(RobustifyConfig),
    Concentration(ConcentrationConfig),
    End2end(Box<End2EndConfig>),
}

impl Scenario {
    pub fn kind(&self) -> ScenarioKind {
        match self {
            Scenario::Recover(_) => ScenarioKind::Recover,
            Scenario::Robustify(_) => ScenarioKind::Robustify,
            Scenario::Concentration(_) => ScenarioKind::Concentration,
            Scenario::End2end(_) => ScenarioKind::End2end,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructuredSetting {
    Separable,
    DiagDominant,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecoverConfig {
    pub setting: StructuredSetting,
    pub n_items: usize,
    pub k: usize,
    pub eps: f64,
    #[serde(default)]
    pub eta: Option<f64>,
    pub runs: usize,
    #[serde(default = "default_noise")]
    pub noise: SmallNoise,
}

fn default_noise() -> SmallNoise {
    SmallNoise::Uniform
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustifyConfig {
    pub priors: Vec<PriorConfig>,
    pub k: usize,
    pub deltas: Vec<f64>,
    pub draws: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_alpha() -> f64 {
    0.01
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConcentrationConfig {
    #[serde(default)]
    pub gaussian: Option<GaussianCheckConfig>,
    #[serde(default)]
    pub weakdep: Option<WeakDepCheckConfig>,
    #[serde(default)]
    pub sandwich: Option<SandwichCheckConfig>,
    #[serde(default)]
    pub tensorization: Option<TensorizationCheckConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianCheckConfig {
    /// Identity covariances of these sizes.
    pub dims: Vec<usize>,
    pub k: usize,
    pub trials: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeakDepCheckConfig {
    /// Rademacher coordinates `+-c`.
    pub m: usize,
    pub c: f64,
    pub k: usize,
    pub trials: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SandwichCheckConfig {
    pub matrices: usize,
    pub rows: usize,
    pub cols: usize,
    pub eps: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorizationCheckConfig {
    pub copies: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct End2EndConfig {
    pub environment: EnvironmentConfig,
    pub mechanism: MechanismConfig,
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub algorithm1: Algorithm1Config,
    pub trials: usize,
    #[serde(default)]
    pub bic: BicConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentConfig {
    pub design: DesignConfig,
    pub bidders: usize,
    pub prior: PriorConfig,
    pub valuation: ValuationConfig,
    pub coupling: CouplingConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DesignConfig {
    /// Generated from the seed: identity block plus nonnegative rows.
    Separable { n_items: usize, k: usize },
    /// Generated from the seed: diagonally dominant block plus random rows.
    DiagDominant { n_items: usize, k: usize },
    Csv {
        path: PathBuf,
        setting: Setting,
        query_rows: Vec<usize>,
    },
    Inline {
        rows: Vec<Vec<f64>>,
        setting: Setting,
        query_rows: Vec<usize>,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorConfig {
    Uniform,
    TruncatedGaussian { mean: f64, sd: f64 },
    Discrete { values: Vec<f64>, probs: Vec<f64> },
}

impl PriorConfig {
    pub fn build(&self, k: usize) -> Result<LatentPrior> {
        let m = match self {
            PriorConfig::Uniform => Marginal::uniform(),
            PriorConfig::TruncatedGaussian { mean, sd } => {
                Marginal::truncated_gaussian(*mean, *sd)?
            }
            PriorConfig::Discrete { values, probs } => {
                Marginal::discrete(values.clone(), probs.clone())?
            }
        };
        Ok(LatentPrior::iid(m, k))
    }

    pub fn label(&self) -> String {
        match self {
            PriorConfig::Uniform => "uniform".into(),
            PriorConfig::TruncatedGaussian { mean, sd } => {
                format!("truncated_gaussian({mean},{sd})")
            }
            PriorConfig::Discrete { values, .. } => format!("discrete({} atoms)", values.len()),
        }
    }
}

/// A scalar applied to every item, or one value per item.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum PerItem {
    Scalar(f64),
    List(Vec<f64>),
}

impl PerItem {
    fn expand(&self, n: usize, field: &str) -> Result<DVector<f64>> {
        match self {
            PerItem::Scalar(x) => Ok(DVector::from_element(n, *x)),
            PerItem::List(v) if v.len() == n => Ok(DVector::from_column_slice(v)),
            PerItem::List(v) => Err(Error::config(
                field,
                format!("expected {n} values, got {}", v.len()),
            )),
        }
    }
}

impl Default for PerItem {
    fn default() -> Self {
        PerItem::Scalar(0.0)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ValuationConfig {
    CDemand {
        c: usize,
        #[serde(default)]
        mu: PerItem,
    },
    Partition {
        part: Vec<usize>,
        capacity: Vec<usize>,
        #[serde(default)]
        mu: PerItem,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingConfig {
    pub eps1: f64,
    /// Defaults to `eps1`.
    #[serde(default)]
    pub jump_probability: Option<f64>,
    /// Defaults to `||A||_inf`.
    #[serde(default)]
    pub jump_cap: Option<f64>,
    #[serde(default = "default_noise")]
    pub small_noise: SmallNoise,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MechanismConfig {
    SequentialPostedPrice {
        prices: PriceConfig,
        #[serde(default)]
        order: Option<Vec<usize>>,
    },
    GrandBundle {
        price: f64,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum PriceConfig {
    Inline(Vec<f64>),
    /// `price_j = factor * sum_l |A_jl|`.
    RowSumFactor {
        row_sum_factor: f64,
    },
    /// One price per line.
    Csv {
        csv: PathBuf,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub eps: f64,
    /// Defaults to `eps`.
    #[serde(default)]
    pub eta: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Algorithm1Config {
    #[serde(default = "default_c0")]
    pub c0: f64,
    #[serde(default = "default_true")]
    pub rebate: bool,
}

fn default_c0() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

impl Default for Algorithm1Config {
    fn default() -> Self {
        Algorithm1Config {
            c0: 1.0,
            rebate: true,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BicConfig {
    #[serde(default = "default_types")]
    pub types: usize,
    #[serde(default = "default_half_deviations")]
    pub fresh_deviations: usize,
    #[serde(default = "default_half_deviations")]
    pub structured_deviations: usize,
    #[serde(default = "default_opponents")]
    pub opponent_draws: usize,
}

fn default_types() -> usize {
    500
}

fn default_half_deviations() -> usize {
    8
}

fn default_opponents() -> usize {
    256
}

impl Default for BicConfig {
    fn default() -> Self {
        BicConfig {
            types: default_types(),
            fresh_deviations: 8,
            structured_deviations: 8,
            opponent_draws: default_opponents(),
        }
    }
}

impl BicConfig {
    pub fn params(&self) -> BicParams {
        BicParams {
            types: self.types,
            fresh_deviations: self.fresh_deviations,
            structured_deviations: self.structured_deviations,
            opponent_draws: self.opponent_draws,
            scale: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| {
            Error::config(
                format!("line {} column {}", e.line(), e.column()),
                e.to_string(),
            )
        })?;
        cfg.base_dir = base_dir.into();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("path", format!("cannot read {}: {e}", path.display())))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json(&text, dir)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Field-level checks that do not need any randomness.
    pub fn validate(&self) -> Result<()> {
        match &self.scenario {
            Scenario::Recover(r) => {
                check_k_n("scenario.k", r.k, r.n_items)?;
                check_positive("scenario.eps", r.eps)?;
                if let Some(eta) = r.eta {
                    check_positive("scenario.eta", eta)?;
                }
                check_nonzero("scenario.runs", r.runs)
            }
            Scenario::Robustify(r) => {
                if r.priors.is_empty() {
                    return Err(Error::config(
                        "scenario.priors",
                        "at least one prior is required",
                    ));
                }
                if r.k == 0 {
                    return Err(Error::config("scenario.k", "k must be at least 1"));
                }
                for (i, d) in r.deltas.iter().enumerate() {
                    if !(*d > 0.0 && *d <= 1.0) {
                        return Err(Error::config(
                            format!("scenario.deltas[{i}]"),
                            format!("grid side {d} outside (0, 1]"),
                        ));
                    }
                }
                if !(r.alpha > 0.0 && r.alpha < 1.0) {
                    return Err(Error::config(
                        "scenario.alpha",
                        "significance level must lie in (0, 1)",
                    ));
                }
                check_nonzero("scenario.draws", r.draws)
            }
            Scenario::Concentration(c) => {
                if let Some(s) = &c.sandwich {
                    if s.cols == 0 || s.cols > crate::concentration_lab::MAX_NET_DIM {
                        return Err(Error::config(
                            "scenario.sandwich.cols",
                            format!(
                                "net dimension must be in 1..={}",
                                crate::concentration_lab::MAX_NET_DIM
                            ),
                        ));
                    }
                    if !(s.eps > 0.0 && s.eps < 1.0) {
                        return Err(Error::config(
                            "scenario.sandwich.eps",
                            "net radius must lie in (0, 1)",
                        ));
                    }
                }
                if let Some(w) = &c.weakdep {
                    check_positive("scenario.weakdep.c", w.c)?;
                }
                Ok(())
            }
            Scenario::End2end(e) => {
                let env = &e.environment;
                match &env.design {
                    DesignConfig::Separable { n_items, k }
                    | DesignConfig::DiagDominant { n_items, k } => {
                        check_k_n("scenario.environment.design.k", *k, *n_items)?
                    }
                    DesignConfig::Inline { rows, .. } => {
                        let n = rows.len();
                        let k = rows.first().map_or(0, |r| r.len());
                        check_k_n("scenario.environment.design.rows", k, n)?
                    }
                    DesignConfig::Csv { .. } => {}
                }
                let eps1 = env.coupling.eps1;
                if !(0.0..=1.0).contains(&eps1) {
                    return Err(Error::config(
                        "scenario.environment.coupling.eps1",
                        "must lie in [0, 1]",
                    ));
                }
                check_positive("scenario.protocol.eps", e.protocol.eps)?;
                if e.protocol.eps < eps1 {
                    return Err(Error::config(
                        "scenario.protocol.eps",
                        format!("protocol tolerance {} is below the coupling eps1 = {eps1} (need eps >= eps1)", e.protocol.eps),
                    ));
                }
                if e.trials < 2 {
                    return Err(Error::config("scenario.trials", "need at least 2 trials"));
                }
                if e.bic.fresh_deviations + e.bic.structured_deviations == 0 {
                    return Err(Error::config(
                        "scenario.bic",
                        "at least one deviation is required",
                    ));
                }
                check_nonzero("scenario.bic.opponent_draws", e.bic.opponent_draws)?;
                if let MechanismConfig::GrandBundle { .. } = e.mechanism {
                    if env.bidders != 1 {
                        return Err(Error::config(
                            "scenario.mechanism",
                            format!(
                                "grand bundle pricing needs exactly 1 bidder, got {}",
                                env.bidders
                            ),
                        ));
                    }
                }
                Ok(())
            }
        }
    }
}

fn check_k_n(field: &str, k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::config(
            field,
            format!("need 1 <= k <= N, got k = {k} and N = {n}"),
        ));
    }
    Ok(())
}

fn check_positive(field: &str, x: f64) -> Result<()> {
    if !(x > 0.0 && x.is_finite()) {
        return Err(Error::config(
            field,
            format!("must be positive and finite, got {x}"),
        ));
    }
    Ok(())
}

fn check_nonzero(field: &str, x: usize) -> Result<()> {
    if x == 0 {
        return Err(Error::config(field, "must be at least 1"));
    }
    Ok(())
}

/// The concrete objects an end-to-end config describes.
#[derive(Debug, Clone)]
pub struct BuiltEnvironment {
    pub design: Arc<DesignMatrix>,
    pub plan: QueryPlan,
    pub priors: Vec<LatentPrior>,
    pub kernels: Vec<ProkhorovKernel>,
    pub valuations: Vec<ConstrainedAdditiveValuation>,
    pub jump_cap: f64,
}

impl End2EndConfig {
    pub fn build(&self, cfg: &ExperimentConfig, seed: ExperimentSeed) -> Result<BuiltEnvironment> {
        let env = &self.environment;
        let eps = self.protocol.eps;
        let mut design_rng = seed.rng_labeled("design", 0);
        let (design, plan) = match &env.design {
            DesignConfig::Separable { n_items, k } => {
                let (a, perm) = separable_design(*n_items, *k, &mut design_rng)?;
                (
                    a,
                    QueryPlan::from_permutation(Setting::Separable, &perm, *k, eps)?,
                )
            }
            DesignConfig::DiagDominant { n_items, k } => {
                let (a, perm, _) = diag_dominant_design(*n_items, *k, &mut design_rng)?;
                (
                    a,
                    QueryPlan::from_permutation(Setting::DiagDominant, &perm, *k, eps)?,
                )
            }
            DesignConfig::Csv {
                path,
                setting,
                query_rows,
            } => {
                let a = DesignMatrix::load(cfg.resolve(path)).map_err(|e| {
                    Error::config("scenario.environment.design.path", e.to_string())
                })?;
                (a, QueryPlan::new(setting.clone(), query_rows.clone(), eps))
            }
            DesignConfig::Inline {
                rows,
                setting,
                query_rows,
            } => {
                let a = DesignMatrix::from_rows(rows).map_err(|e| {
                    Error::config("scenario.environment.design.rows", e.to_string())
                })?;
                (a, QueryPlan::new(setting.clone(), query_rows.clone(), eps))
            }
        };
        let plan = match self.protocol.eta {
            Some(eta) => plan.with_eta(eta),
            None => plan,
        };
        if let Some(&r) = plan.rows.iter().find(|&&r| r >= design.n_items()) {
            return Err(Error::config(
                "scenario.environment.design.query_rows",
                format!("row {r} out of range for N = {}", design.n_items()),
            ));
        }
        let n = design.n_items();
        let k = design.k();
        let prior = env
            .prior
            .build(k)
            .map_err(|e| Error::config("scenario.environment.prior", e.to_string()))?;
        let jump_cap = env.coupling.jump_cap.unwrap_or(design.inf_norm());
        let kernel = ProkhorovKernel::new(
            env.coupling.eps1,
            env.coupling.small_noise,
            env.coupling.jump_probability.unwrap_or(env.coupling.eps1),
            jump_cap,
        )
        .map_err(|e| Error::config("scenario.environment.coupling", e.to_string()))?;
        let valuation = match &env.valuation {
            ValuationConfig::CDemand { c, mu } => ConstrainedAdditiveValuation::c_demand(
                mu.expand(n, "scenario.environment.valuation.mu")?,
                *c,
            ),
            ValuationConfig::Partition { part, capacity, mu } => ConstrainedAdditiveValuation::new(
                mu.expand(n, "scenario.environment.valuation.mu")?,
                Family::PartitionCapacity {
                    part: part.clone(),
                    capacity: capacity.clone(),
                },
            ),
        }
        .map_err(|e| Error::config("scenario.environment.valuation", e.to_string()))?;
        let m = env.bidders;
        Ok(BuiltEnvironment {
            design: Arc::new(design),
            plan,
            priors: vec![prior; m],
            kernels: vec![kernel; m],
            valuations: vec![valuation; m],
            jump_cap,
        })
    }

    pub fn prices(&self, cfg: &ExperimentConfig, design: &DesignMatrix) -> Result<DVector<f64>> {
        let MechanismConfig::SequentialPostedPrice { prices, .. } = &self.mechanism else {
            return Err(Error::config(
                "scenario.mechanism",
                "not a posted-price mechanism",
            ));
        };
        let n = design.n_items();
        let v = match prices {
            PriceConfig::Inline(v) => v.clone(),
            PriceConfig::RowSumFactor { row_sum_factor } => {
                let abs: DMatrix<f64> = design.entries().abs();
                abs.row_iter().map(|r| row_sum_factor * r.sum()).collect()
            }
            PriceConfig::Csv { csv } => read_price_csv(&cfg.resolve(csv))?,
        };
        if v.len() != n {
            return Err(Error::config(
                "scenario.mechanism.prices",
                format!("expected {n} prices, got {}", v.len()),
            ));
        }
        Ok(DVector::from_vec(v))
    }
}

fn read_price_csv(path: &Path) -> Result<Vec<f64>> {
    let field = "scenario.mechanism.prices.csv";
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::config(field, format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::config(field, e.to_string()))?;
        for cell in rec.iter().filter(|c| !c.is_empty()) {
            out.push(
                cell.parse::<f64>()
                    .map_err(|e| Error::config(field, format!("bad price {cell:?}: {e}")))?,
            );
        }
    }
    Ok(out)
}
