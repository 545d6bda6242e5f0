//! Utility families and their evaluation along simulated paths.
//!
//! The state-dependent exponential family reads the reciprocal risk
//! aversion from the "gamma_inv" channel; the multiplicative-noise family
//! reads the noise level from "X". Evaluation never clamps: wealth outside
//! a family's domain (power, log) is a domain error naming the offending
//! paths rather than a silently patched value.

use crate::error::{Error, Result};
use crate::paths::{PathBatch, CH_GAMMA_INV, CH_X};
use crate::real::Real;
use crate::scenario::{NoiseBase, ScenarioSpec, UtilitySpec};

/// Exponential utility -exp(-gamma x) / gamma.
#[inline]
pub fn exp_utility<R: Real>(gamma: R, x: R) -> R {
    -(-(gamma * x)).exp() / gamma
}

/// Power utility x^gamma / gamma for x > 0, gamma in (0, 1).
#[inline]
pub fn power_utility<R: Real>(gamma: R, x: R) -> R {
    x.powf(gamma) / gamma
}

fn base_value<R: Real>(base: NoiseBase, gamma: R, x: R) -> R {
    match base {
        NoiseBase::DetExp => exp_utility(gamma, x),
        NoiseBase::Power => power_utility(gamma, x),
    }
}

fn positive_domain<R: Real>(family: &str, wealth: &[R], row_len: usize) -> Result<()> {
    let mut bad = Vec::new();
    for (k, &v) in wealth.iter().enumerate() {
        if !(v > R::zero()) {
            bad.push((k / row_len, k % row_len, v));
            if bad.len() >= 5 {
                break;
            }
        }
    }
    if bad.is_empty() {
        return Ok(());
    }
    let list: Vec<String> = bad
        .iter()
        .map(|(p, i, v)| format!("path {p} step {i} (wealth {v})"))
        .collect();
    Err(Error::domain(format!(
        "{family} utility undefined at non-positive wealth: {}",
        list.join(", ")
    )))
}

/// Evaluates the scenario's utility process u_t(.) at every grid point of a
/// wealth channel. Returns one value per (path, step) in the batch's layout.
pub fn evaluate_utility<R: Real>(
    spec: &ScenarioSpec<R>,
    batch: &PathBatch<R>,
    wealth: &str,
) -> Result<Vec<R>> {
    let v = batch.channel(wealth)?;
    let l = batch.row_len();
    match &spec.utility {
        UtilitySpec::StateDepExp => {
            let gi = batch.channel(CH_GAMMA_INV).map_err(|_| {
                Error::StateInsufficient(
                    "state-dependent utility needs the gamma_inv channel".into(),
                )
            })?;
            Ok(v.iter()
                .zip(gi)
                .map(|(&x, &g)| -g * (-(x / g)).exp())
                .collect())
        }
        UtilitySpec::DetExp { gamma } => Ok(v.iter().map(|&x| exp_utility(*gamma, x)).collect()),
        UtilitySpec::Power { gamma } => {
            positive_domain("power", v, l)?;
            Ok(v.iter().map(|&x| power_utility(*gamma, x)).collect())
        }
        UtilitySpec::Log => {
            positive_domain("log", v, l)?;
            Ok(v.iter().map(|&x| x.ln()).collect())
        }
        UtilitySpec::MultNoise { base, gamma, .. } => {
            let xs = batch.channel(CH_X).map_err(|_| {
                Error::StateInsufficient("multiplicative-noise utility needs the X channel".into())
            })?;
            if *base == NoiseBase::Power {
                positive_domain("power", v, l)?;
            }
            Ok(v.iter()
                .zip(xs)
                .map(|(&x, &n)| base_value(*base, *gamma, x) * n)
                .collect())
        }
    }
}

/// Utility of the initial endowment, u_0(x0).
pub fn initial_utility<R: Real>(spec: &ScenarioSpec<R>) -> Result<R> {
    let x = spec.x0;
    match &spec.utility {
        UtilitySpec::StateDepExp => Ok(exp_utility(spec.gamma0, x)),
        UtilitySpec::DetExp { gamma } => Ok(exp_utility(*gamma, x)),
        UtilitySpec::Power { gamma } => {
            if !(x > R::zero()) {
                return Err(Error::domain("power utility needs positive x0"));
            }
            Ok(power_utility(*gamma, x))
        }
        UtilitySpec::Log => {
            if !(x > R::zero()) {
                return Err(Error::domain("log utility needs positive x0"));
            }
            Ok(x.ln())
        }
        UtilitySpec::MultNoise { base, gamma, .. } => Ok(base_value(*base, *gamma, x)),
    }
}
