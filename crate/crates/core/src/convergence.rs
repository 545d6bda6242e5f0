//! Discretization study: how fast the simulated optimal-wealth replication
//! approaches the closed-form optimum as the time step shrinks.
//!
//! For each step count in a ladder, the self-financing wealth driven by the
//! optimal exposure rule is integrated on a fresh batch and compared with
//! the exact optimum at the horizon. The terminal RMS gap is fitted to a
//! power law in dt; the Euler scheme should show order one half.

use std::io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paths::{integrate_wealth, simulate_market, simulate_risk_aversion, MarketOpts,
    CH_EXPOSURE, CH_GAMMA_INV, CH_V_STAR, CH_XI_STAR};
use crate::real::Real;
use crate::rng::{NoiseKey, STREAM_MAIN};
use crate::scenario::{ScenarioSpec, UtilitySpec};
use crate::strategies::consistent_optimal_wealth;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub steps_per_unit: u32,
    pub dt: f64,
    pub rms_error: f64,
    pub n_paths: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub scenario: String,
    pub seed: u64,
    pub strategy: String,
    pub rows: Vec<ConvergenceRow>,
    /// Fitted power of dt; absent when the strategy does not converge by
    /// construction (zero exposure).
    pub order: Option<f64>,
    /// True when the RMS error strictly decreases along the ladder.
    pub monotone: bool,
}

/// Runs the ladder. With `zero_exposure` the wealth stays at x and the gap
/// column records the spread of the optimum itself, which does not shrink
/// with dt; no order is fitted in that mode.
pub fn run_convergence<R: Real>(
    spec: &ScenarioSpec<R>,
    ladder: &[u32],
    zero_exposure: bool,
) -> Result<ConvergenceReport> {
    let mut steps: Vec<u32> = ladder.to_vec();
    steps.sort_unstable();
    steps.dedup();
    if steps.len() < 2 {
        return Err(Error::domain(
            "convergence ladder needs at least two distinct step counts",
        ));
    }
    if steps[0] == 0 {
        return Err(Error::domain("steps per unit must be at least 1"));
    }
    if !matches!(spec.utility, UtilitySpec::StateDepExp) || !spec.has_consistent_pair() {
        return Err(Error::domain(
            "the convergence study replicates the closed-form optimum and needs \
             the self-consistent exponential pair (eta = 0, beta = -theta/2)",
        ));
    }

    let mut rows = Vec::with_capacity(steps.len());
    for &spu in &steps {
        let mut level = spec.clone();
        level.steps_per_unit = spu;
        let grid = level.grid()?;
        let key = NoiseKey::new(spec.seed, STREAM_MAIN).child(u64::from(spu));
        let mut batch = simulate_market(&level, spec.n_paths, key, MarketOpts::default())?;
        simulate_risk_aversion(&level, &mut batch)?;
        consistent_optimal_wealth(&level, &mut batch)?;

        let last = grid.n_steps();
        let xi = batch.slice_at(CH_XI_STAR, last)?;
        let sq: Vec<R> = if zero_exposure {
            xi.iter().map(|&v| (v - spec.x0) * (v - spec.x0)).collect()
        } else {
            let l = batch.row_len();
            let gi = batch.channel(CH_GAMMA_INV)?.to_vec();
            integrate_wealth(&mut batch, CH_V_STAR, CH_EXPOSURE, spec.x0, |b, p, i, v| {
                let t = grid.time(i);
                let w = b.w(p, i);
                level.beta.eval(t, w) * v - b.theta(p, i) * gi[p * l + i]
            })?;
            let v = batch.slice_at(CH_V_STAR, last)?;
            v.iter().zip(&xi).map(|(&a, &b)| (a - b) * (a - b)).collect()
        };
        let mean_sq = crate::estimators::pairwise_sum(&sq).f64() / sq.len() as f64;
        if !mean_sq.is_finite() {
            return Err(Error::Estimator("non-finite replication error".into()));
        }
        rows.push(ConvergenceRow {
            steps_per_unit: spu,
            dt: grid.dt().f64(),
            rms_error: mean_sq.sqrt(),
            n_paths: spec.n_paths,
        });
    }
    // Ascending step counts leave the coarsest grid first.
    let order = if zero_exposure {
        None
    } else {
        for r in &rows {
            if !(r.rms_error > 0.0) {
                return Err(Error::Estimator(format!(
                    "degenerate RMS error {} at {} steps per unit",
                    r.rms_error, r.steps_per_unit
                )));
            }
        }
        let xs: Vec<f64> = rows.iter().map(|r| r.dt.ln()).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.rms_error.ln()).collect();
        let xbar = xs.iter().sum::<f64>() / xs.len() as f64;
        let ybar = ys.iter().sum::<f64>() / ys.len() as f64;
        let mut num = 0.0;
        let mut den = 0.0;
        for (x, y) in xs.iter().zip(&ys) {
            num += (x - xbar) * (y - ybar);
            den += (x - xbar) * (x - xbar);
        }
        Some(num / den)
    };
    let monotone = rows.windows(2).all(|w| w[0].rms_error > w[1].rms_error);

    Ok(ConvergenceReport {
        scenario: spec.id(),
        seed: spec.seed,
        strategy: if zero_exposure { "zero".into() } else { "optimal".into() },
        rows,
        order,
        monotone,
    })
}

/// Writes the ladder as CSV, coarsest grid first.
pub fn write_convergence_csv(report: &ConvergenceReport, out: &mut dyn io::Write) -> Result<()> {
    let mut buf = io::BufWriter::new(out);
    use io::Write;
    writeln!(buf, "steps_per_unit,dt,rms_error,n_paths")?;
    for r in &report.rows {
        writeln!(buf, "{},{},{},{}", r.steps_per_unit, r.dt, r.rms_error, r.n_paths)?;
    }
    buf.flush()?;
    Ok(())
}
