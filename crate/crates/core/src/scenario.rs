//! Scenario documents: market and risk-aversion coefficients, utility family,
//! simulation sizes, and the (s, t) pairs at which conditional checks run.
//!
//! A scenario is a JSON document with sections `market`, `risk`, `utility`,
//! `sim`, and `checks`. Coefficients are either plain numbers or expressions
//! in `t` and `w` with an explicit magnitude bound. Parsing fills every
//! default so a serialized scenario always shows the values actually used.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::paths::TimeGrid;
use crate::real::Real;

/// Tolerance for placing check times on the simulation grid.
const GRID_SNAP: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub enum CoeffForm<R> {
    Constant(R),
    TimeFn { src: String, ast: Expr<R> },
    StateFn { src: String, ast: Expr<R> },
}

/// A coefficient of the model: constant, function of time, or function of
/// time and Brownian state, together with a bound on its magnitude.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientFn<R> {
    form: CoeffForm<R>,
    bound: R,
}

impl<R: Real> CoefficientFn<R> {
    pub fn constant(v: R) -> Self {
        CoefficientFn {
            bound: v.abs(),
            form: CoeffForm::Constant(v),
        }
    }

    /// Parses an expression coefficient. The bound is the caller's declared
    /// sup of |value| and must be positive and finite.
    pub fn from_expr(src: &str, bound: R) -> Result<Self> {
        if !(bound > R::zero()) || !bound.is_finite() {
            return Err(Error::domain(format!(
                "coefficient bound must be positive and finite, got {bound}"
            )));
        }
        let ast = Expr::parse(src)?;
        let form = if ast.uses_w() {
            CoeffForm::StateFn {
                src: src.to_string(),
                ast,
            }
        } else if ast.uses_t() {
            CoeffForm::TimeFn {
                src: src.to_string(),
                ast,
            }
        } else {
            // An expression without variables collapses to a constant, and
            // its bound tightens to the value itself so the collapse
            // round-trips through serialization.
            let v = ast.eval(R::zero(), R::zero());
            return Ok(CoefficientFn::constant(v));
        };
        Ok(CoefficientFn { form, bound })
    }

    #[inline]
    pub fn eval(&self, t: R, w: R) -> R {
        match &self.form {
            CoeffForm::Constant(v) => *v,
            CoeffForm::TimeFn { ast, .. } => ast.eval(t, R::zero()),
            CoeffForm::StateFn { ast, .. } => ast.eval(t, w),
        }
    }

    pub fn bound(&self) -> R {
        self.bound
    }

    pub fn form(&self) -> &CoeffForm<R> {
        &self.form
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.form, CoeffForm::Constant(_))
    }

    pub fn depends_on_state(&self) -> bool {
        matches!(self.form, CoeffForm::StateFn { .. })
    }

    fn to_doc(&self) -> CoeffDoc {
        match &self.form {
            CoeffForm::Constant(v) => CoeffDoc::Num(v.f64()),
            CoeffForm::TimeFn { src, .. } | CoeffForm::StateFn { src, .. } => CoeffDoc::Expr {
                expr: src.clone(),
                bound: self.bound.f64(),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseBase {
    DetExp,
    Power,
}

/// Utility family of a scenario.
#[derive(Clone, Debug, PartialEq)]
pub enum UtilitySpec<R> {
    /// Exponential with risk aversion driven by the scenario's (eta, beta).
    StateDepExp,
    /// Exponential with fixed risk aversion.
    DetExp { gamma: R },
    /// Power utility x^gamma / gamma with gamma in (0, 1).
    Power { gamma: R },
    Log,
    /// Deterministic base utility scaled by a multiplicative noise process
    /// X with dX = X beta_x dW under the physical measure.
    MultNoise {
        base: NoiseBase,
        gamma: R,
        beta_x: CoefficientFn<R>,
        /// Declared deterministic value of (theta - beta_x)^2, if any.
        k: Option<CoefficientFn<R>>,
    },
}

impl<R: Real> UtilitySpec<R> {
    pub fn family_name(&self) -> &'static str {
        match self {
            UtilitySpec::StateDepExp => "state_dep_exp",
            UtilitySpec::DetExp { .. } => "det_exp",
            UtilitySpec::Power { .. } => "power",
            UtilitySpec::Log => "log",
            UtilitySpec::MultNoise { .. } => "mult_noise",
        }
    }
}

/// Fully resolved scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSpec<R> {
    pub mu: CoefficientFn<R>,
    pub sigma: CoefficientFn<R>,
    pub r: R,
    pub gamma0: R,
    pub eta: CoefficientFn<R>,
    pub beta: CoefficientFn<R>,
    pub utility: UtilitySpec<R>,
    pub x0: R,
    pub t_end: R,
    pub steps_per_unit: u32,
    pub n_paths: usize,
    pub seed: u64,
    pub check_pairs: Vec<(R, R)>,
}

// ---------------------------------------------------------------------------
// document layer

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum CoeffDoc {
    Num(f64),
    Expr { expr: String, bound: f64 },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MarketDoc {
    mu: CoeffDoc,
    sigma: CoeffDoc,
    #[serde(default)]
    r: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RiskDoc {
    #[serde(default = "one")]
    gamma0: f64,
    #[serde(default)]
    eta: Option<CoeffDoc>,
    #[serde(default)]
    beta: Option<CoeffDoc>,
}

impl Default for RiskDoc {
    fn default() -> Self {
        RiskDoc {
            gamma0: one(),
            eta: None,
            beta: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UtilityDoc {
    family: String,
    #[serde(default)]
    params: serde_json::Map<String, Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimDoc {
    #[serde(default = "one")]
    x0: f64,
    #[serde(rename = "T", default = "one")]
    t_end: f64,
    #[serde(default = "default_steps")]
    steps_per_unit: u32,
    #[serde(default = "default_paths")]
    n_paths: usize,
    #[serde(default = "default_seed")]
    seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChecksDoc {
    pairs: Vec<(f64, f64)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Doc {
    market: MarketDoc,
    #[serde(default)]
    risk: Option<RiskDoc>,
    #[serde(default)]
    utility: Option<UtilityDoc>,
    #[serde(default)]
    sim: Option<SimDoc>,
    #[serde(default)]
    checks: Option<ChecksDoc>,
}

fn one() -> f64 {
    1.0
}
fn default_steps() -> u32 {
    256
}
fn default_paths() -> usize {
    10_000
}
fn default_seed() -> u64 {
    1
}

fn coeff_from_doc<R: Real>(doc: &CoeffDoc, field: &str) -> Result<CoefficientFn<R>> {
    match doc {
        CoeffDoc::Num(v) => {
            if !v.is_finite() {
                return Err(Error::domain(format!("{field}: non-finite constant")));
            }
            Ok(CoefficientFn::constant(R::of(*v)))
        }
        CoeffDoc::Expr { expr, bound } => CoefficientFn::from_expr(expr, R::of(*bound))
            .map_err(|e| prefix_error(field, e)),
    }
}

fn prefix_error(field: &str, e: Error) -> Error {
    match e {
        Error::Parse { offset, message } => Error::Parse {
            offset,
            message: format!("{field}: {message}"),
        },
        Error::Domain(m) => Error::Domain(format!("{field}: {m}")),
        other => other,
    }
}

fn param_f64(params: &serde_json::Map<String, Value>, key: &str) -> Result<Option<f64>> {
    match params.get(key) {
        None => Ok(None),
        Some(v) => v
            .as_f64()
            .map(Some)
            .ok_or_else(|| Error::domain(format!("utility.params.{key} must be a number"))),
    }
}

fn param_coeff<R: Real>(
    params: &serde_json::Map<String, Value>,
    key: &str,
) -> Result<Option<CoefficientFn<R>>> {
    let Some(v) = params.get(key) else {
        return Ok(None);
    };
    let doc: CoeffDoc = serde_json::from_value(v.clone())
        .map_err(|e| Error::domain(format!("utility.params.{key}: {e}")))?;
    coeff_from_doc(&doc, &format!("utility.params.{key}")).map(Some)
}

/// Parses and validates a scenario document.
pub fn parse_scenario<R: Real>(text: &str) -> Result<ScenarioSpec<R>> {
    let doc: Doc = serde_json::from_str(text)?;
    let risk = doc.risk.unwrap_or_default();
    let sim = doc.sim.unwrap_or(SimDoc {
        x0: 1.0,
        t_end: 1.0,
        steps_per_unit: default_steps(),
        n_paths: default_paths(),
        seed: default_seed(),
    });

    let mu = coeff_from_doc(&doc.market.mu, "market.mu")?;
    let sigma = coeff_from_doc(&doc.market.sigma, "market.sigma")?;
    let eta = match &risk.eta {
        Some(c) => coeff_from_doc(c, "risk.eta")?,
        None => CoefficientFn::constant(R::zero()),
    };
    let beta = match &risk.beta {
        Some(c) => coeff_from_doc(c, "risk.beta")?,
        None => CoefficientFn::constant(R::zero()),
    };

    let gamma0 = R::of(risk.gamma0);
    if !(gamma0 > R::zero()) {
        return Err(Error::domain(format!(
            "risk.gamma0 must be positive, got {}",
            risk.gamma0
        )));
    }
    if let CoeffForm::Constant(s) = sigma.form() {
        if !(*s > R::zero()) {
            return Err(Error::domain(format!("market.sigma must be positive, got {s}")));
        }
    }

    let utility = match &doc.utility {
        None => UtilitySpec::StateDepExp,
        Some(u) => {
            let p = &u.params;
            match u.family.as_str() {
                "state_dep_exp" => UtilitySpec::StateDepExp,
                "det_exp" => UtilitySpec::DetExp {
                    gamma: R::of(param_f64(p, "gamma")?.unwrap_or(risk.gamma0)),
                },
                "power" => {
                    let g = param_f64(p, "gamma")?
                        .ok_or_else(|| Error::domain("utility.params.gamma required for power"))?;
                    if !(g > 0.0 && g < 1.0) {
                        return Err(Error::domain(format!(
                            "power utility requires gamma in (0,1), got {g}"
                        )));
                    }
                    UtilitySpec::Power { gamma: R::of(g) }
                }
                "log" => UtilitySpec::Log,
                "mult_noise" => {
                    let base = match p.get("base").and_then(|v| v.as_str()).unwrap_or("det_exp") {
                        "det_exp" => NoiseBase::DetExp,
                        "power" => NoiseBase::Power,
                        other => {
                            return Err(Error::domain(format!(
                                "utility.params.base must be det_exp or power, got {other}"
                            )))
                        }
                    };
                    let beta_x = param_coeff(p, "beta")?.ok_or_else(|| {
                        Error::domain("utility.params.beta required for mult_noise")
                    })?;
                    UtilitySpec::MultNoise {
                        base,
                        gamma: R::of(param_f64(p, "gamma")?.unwrap_or(risk.gamma0)),
                        beta_x,
                        k: param_coeff(p, "k")?,
                    }
                }
                other => {
                    return Err(Error::domain(format!("unknown utility family '{other}'")))
                }
            }
        }
    };
    if let UtilitySpec::DetExp { gamma } | UtilitySpec::MultNoise { gamma, .. } = &utility {
        if !(*gamma > R::zero()) {
            return Err(Error::domain("utility gamma must be positive"));
        }
    }

    if !(sim.t_end > 0.0) {
        return Err(Error::domain(format!("sim.T must be positive, got {}", sim.t_end)));
    }
    if sim.steps_per_unit == 0 {
        return Err(Error::domain("sim.steps_per_unit must be at least 1"));
    }
    if sim.n_paths < 2 {
        return Err(Error::domain("sim.n_paths must be at least 2"));
    }

    let pairs_f64 = match &doc.checks {
        None => vec![(sim.t_end / 2.0, sim.t_end)],
        Some(c) => c.pairs.clone(),
    };
    if pairs_f64.is_empty() {
        return Err(Error::domain("checks.pairs must not be empty"));
    }

    let spec = ScenarioSpec {
        mu,
        sigma,
        r: R::of(doc.market.r),
        gamma0,
        eta,
        beta,
        utility,
        x0: R::of(sim.x0),
        t_end: R::of(sim.t_end),
        steps_per_unit: sim.steps_per_unit,
        n_paths: sim.n_paths,
        seed: sim.seed,
        check_pairs: pairs_f64.iter().map(|&(s, t)| (R::of(s), R::of(t))).collect(),
    };

    let grid = spec.grid()?;
    for &(s, t) in &pairs_f64 {
        if !(0.0 <= s && s < t && t <= sim.t_end + GRID_SNAP) {
            return Err(Error::domain(format!(
                "check pair ({s}, {t}) must satisfy 0 <= s < t <= T"
            )));
        }
        grid.index_of(R::of(s)).map_err(|e| prefix_error("checks.pairs", e))?;
        grid.index_of(R::of(t)).map_err(|e| prefix_error("checks.pairs", e))?;
    }

    Ok(spec)
}

impl<R: Real> ScenarioSpec<R> {
    /// Market price of risk, theta = -(mu - r) / sigma.
    #[inline]
    pub fn theta(&self, t: R, w: R) -> R {
        -(self.mu.eval(t, w) - self.r) / self.sigma.eval(t, w)
    }

    pub fn grid(&self) -> Result<TimeGrid<R>> {
        let steps = self.t_end.f64() * f64::from(self.steps_per_unit);
        let n = steps.round();
        if (steps - n).abs() > GRID_SNAP * steps.max(1.0) || n < 1.0 {
            return Err(Error::domain(format!(
                "T = {} does not give a whole number of steps at {} steps per unit",
                self.t_end, self.steps_per_unit
            )));
        }
        Ok(TimeGrid::new(self.t_end, n as usize))
    }

    /// Check pairs resolved to grid indices.
    pub fn check_indices(&self) -> Result<Vec<(usize, usize)>> {
        let grid = self.grid()?;
        self.check_pairs
            .iter()
            .map(|&(s, t)| Ok((grid.index_of(s)?, grid.index_of(t)?)))
            .collect()
    }

    /// Distinct check times (both endpoints of every pair), sorted.
    pub fn check_times(&self) -> Vec<R> {
        let mut ts: Vec<R> = Vec::new();
        for &(s, t) in &self.check_pairs {
            for v in [s, t] {
                if v > R::zero() && !ts.iter().any(|&x| x == v) {
                    ts.push(v);
                }
            }
        }
        ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ts
    }

    /// True when the scenario's (eta, beta) equals the self-consistent pair
    /// (0, -theta/2) on a sample of grid times and states.
    pub fn has_consistent_pair(&self) -> bool {
        let tol = 1e-9;
        for (t, w) in self.sample_points(16) {
            let eta = self.eta.eval(t, w).f64();
            let beta = self.beta.eval(t, w).f64();
            let theta = self.theta(t, w).f64();
            if eta.abs() > tol || (beta + theta / 2.0).abs() > tol * theta.abs().max(1.0) {
                return false;
            }
        }
        true
    }

    /// True when theta varies with the Brownian state.
    pub fn theta_is_stochastic(&self) -> bool {
        if !(self.mu.depends_on_state() || self.sigma.depends_on_state()) {
            return false;
        }
        let mut spread = 0.0f64;
        for i in 0..=16 {
            let t = self.t_end * R::of(i as f64 / 16.0);
            let lo = self.theta(t, R::of(-1.0)).f64();
            let mid = self.theta(t, R::zero()).f64();
            let hi = self.theta(t, R::one()).f64();
            spread = spread
                .max((hi - mid).abs())
                .max((mid - lo).abs())
                .max((hi - lo).abs());
        }
        spread > 1e-12
    }

    fn sample_points(&self, n_times: usize) -> Vec<(R, R)> {
        let mut pts = Vec::new();
        for i in 0..=n_times {
            let t = self.t_end * R::of(i as f64 / n_times as f64);
            for w in [-3.0, -1.0, 0.0, 1.0, 3.0] {
                pts.push((t, R::of(w)));
            }
        }
        pts
    }

    /// Stable identifier derived from the canonical serialized form.
    pub fn id(&self) -> String {
        let text = self.to_json_string();
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    fn to_doc(&self) -> Doc {
        let params = match &self.utility {
            UtilitySpec::StateDepExp | UtilitySpec::Log => serde_json::Map::new(),
            UtilitySpec::DetExp { gamma } => {
                let mut m = serde_json::Map::new();
                m.insert("gamma".into(), Value::from(gamma.f64()));
                m
            }
            UtilitySpec::Power { gamma } => {
                let mut m = serde_json::Map::new();
                m.insert("gamma".into(), Value::from(gamma.f64()));
                m
            }
            UtilitySpec::MultNoise {
                base,
                gamma,
                beta_x,
                k,
            } => {
                let mut m = serde_json::Map::new();
                m.insert("base".into(), serde_json::to_value(base).unwrap());
                m.insert("gamma".into(), Value::from(gamma.f64()));
                m.insert("beta".into(), serde_json::to_value(beta_x.to_doc()).unwrap());
                if let Some(k) = k {
                    m.insert("k".into(), serde_json::to_value(k.to_doc()).unwrap());
                }
                m
            }
        };
        Doc {
            market: MarketDoc {
                mu: self.mu.to_doc(),
                sigma: self.sigma.to_doc(),
                r: self.r.f64(),
            },
            risk: Some(RiskDoc {
                gamma0: self.gamma0.f64(),
                eta: Some(self.eta.to_doc()),
                beta: Some(self.beta.to_doc()),
            }),
            utility: Some(UtilityDoc {
                family: self.utility.family_name().to_string(),
                params,
            }),
            sim: Some(SimDoc {
                x0: self.x0.f64(),
                t_end: self.t_end.f64(),
                steps_per_unit: self.steps_per_unit,
                n_paths: self.n_paths,
                seed: self.seed,
            }),
            checks: Some(ChecksDoc {
                pairs: self
                    .check_pairs
                    .iter()
                    .map(|&(s, t)| (s.f64(), t.f64()))
                    .collect(),
            }),
        }
    }

    pub fn to_json_value(&self) -> Value {
        serde_json::to_value(self.to_doc()).expect("scenario serializes")
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_json_value()).expect("scenario serializes")
    }
}

/// Result of sampling the model assumptions over the grid and a state range.
#[derive(Clone, Debug, Serialize)]
pub struct AssumptionReport {
    /// Market price of risk is finite, bounded, and non-vanishing on samples.
    pub hp_theta_ok: bool,
    /// eta and beta stay within their declared bounds.
    pub assumption_a_ok: bool,
    /// theta genuinely depends on the Brownian state.
    pub theta_stochastic: bool,
    /// Largest |theta| seen across samples.
    pub theta_sup: f64,
    pub witnesses: Vec<String>,
}

/// Samples sigma, theta, eta, and beta on grid times times a range of
/// Brownian states and reports which standing assumptions hold.
pub fn validate_assumptions<R: Real>(spec: &ScenarioSpec<R>) -> Result<AssumptionReport> {
    let grid = spec.grid()?;
    let mut report = AssumptionReport {
        hp_theta_ok: true,
        assumption_a_ok: true,
        theta_stochastic: spec.theta_is_stochastic(),
        theta_sup: 0.0,
        witnesses: Vec::new(),
    };
    // Cap the number of per-violation witness lines so reports stay readable.
    let mut complaints: BTreeMap<&'static str, usize> = BTreeMap::new();
    let mut note = |report: &mut AssumptionReport, kind: &'static str, msg: String| {
        let c = complaints.entry(kind).or_insert(0);
        *c += 1;
        if *c <= 3 {
            report.witnesses.push(msg);
        }
    };

    let stride = (grid.n_steps() / 64).max(1);
    for i in (0..=grid.n_steps()).step_by(stride) {
        let t = grid.time(i);
        for wf in [-3.0, -1.0, 0.0, 1.0, 3.0] {
            let w = R::of(wf);
            let sigma = spec.sigma.eval(t, w).f64();
            if !(sigma > 0.0) || !sigma.is_finite() {
                report.hp_theta_ok = false;
                note(&mut report, "sigma", format!("sigma = {sigma} at (t={t}, w={wf})"));
                continue;
            }
            if sigma > spec.sigma.bound().f64() + 1e-12 {
                report.assumption_a_ok = false;
                note(&mut report, "sigma_bound", format!(
                    "sigma = {sigma} exceeds bound {} at (t={t}, w={wf})",
                    spec.sigma.bound()
                ));
            }
            let theta = spec.theta(t, w).f64();
            if !theta.is_finite() {
                report.hp_theta_ok = false;
                note(&mut report, "theta_fin", format!("theta non-finite at (t={t}, w={wf})"));
                continue;
            }
            report.theta_sup = report.theta_sup.max(theta.abs());
            if theta == 0.0 {
                report.hp_theta_ok = false;
                note(&mut report, "theta_zero", format!("theta vanishes at (t={t}, w={wf})"));
            }
            for (name, coeff) in [("eta", &spec.eta), ("beta", &spec.beta)] {
                let v = coeff.eval(t, w).f64();
                if !v.is_finite() || v.abs() > coeff.bound().f64() + 1e-12 {
                    report.assumption_a_ok = false;
                    note(&mut report, "risk_bound", format!(
                        "{name} = {v} outside bound {} at (t={t}, w={wf})",
                        coeff.bound()
                    ));
                }
            }
        }
    }
    report
        .witnesses
        .push(format!("theta_sup = {:.6} over sampled grid", report.theta_sup));
    Ok(report)
}
