//! Closed-form optimal wealth and strategy processes, constructed as
//! channels on a simulated batch.
//!
//! Measure-changed constants (c_t, k_t, H_t, entropy terms) are estimated
//! on an independent batch drawn from a dedicated noise stream, so the
//! constants' estimation error is uncorrelated with the paths the checks
//! run on. The constants carry standard errors for downstream error
//! propagation.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimators::QRatioChunks;
use crate::paths::{
    simulate_market, simulate_noise, simulate_risk_aversion, MarketOpts, PathBatch, CH_ALPHA,
    CH_EXPOSURE, CH_GAMMA_INV, CH_LOG_Z, CH_V_STAR, CH_X, CH_XI_STAR,
};
use crate::real::Real;
use crate::rng::{NoiseKey, STREAM_CONSTANTS};
use crate::scenario::{CoefficientFn, ScenarioSpec, UtilitySpec};

/// Static optimum profile for one horizon per grid index (general case).
pub const CH_XI_STAR_T: &str = "xi_star_t";
/// Forward-family proportion view.
pub const CH_ALPHA_STAR: &str = "alpha_star";
/// Forward-family drift coefficient eta computed state by state.
pub const CH_ETA_STAR: &str = "eta_star";

/// Wealth below which proportion-of-wealth views are reported as missing.
const WEALTH_FLOOR: f64 = 1e-8;

/// Measure-changed constants per grid index, with standard errors.
#[derive(Clone, Debug)]
pub struct DerivedConstants<R> {
    /// c_t = 1 / E_Q[1/gamma_t] (exponential families).
    pub c: Vec<R>,
    pub c_se: Vec<R>,
    /// m_t = E_Q[(1/gamma_t) ln Z_t].
    pub m: Vec<R>,
    pub m_se: Vec<R>,
    /// k_t = c_t (x + m_t).
    pub k: Vec<R>,
    /// Entropy term E_Q[ln Z_t].
    pub e0: Vec<R>,
    pub e0_se: Vec<R>,
    /// H_t = E_Q[Z_t^b] with b = -1/(1-gamma) (power family only).
    pub h: Vec<R>,
    pub h_se: Vec<R>,
    /// E_Q[ln phi_t] with phi = Z/X (multiplicative-noise family only).
    pub phi0: Vec<R>,
    pub phi0_se: Vec<R>,
    pub x0: R,
    pub n_const: usize,
}

/// Paths per slice when the constants batch is simulated in pieces. Large
/// batches stream through memory; the noise per global path index is the
/// same as one contiguous run would draw.
const CONST_CHUNK: usize = 1 << 18;

/// Estimates the constants on an independent batch of `n_const` paths drawn
/// from the constants noise stream of the scenario's seed.
pub fn estimate_constants<R: Real>(
    spec: &ScenarioSpec<R>,
    n_const: usize,
) -> Result<DerivedConstants<R>> {
    let key = NoiseKey::new(spec.seed, STREAM_CONSTANTS);
    let grid = spec.grid()?;
    let n_pts = grid.n_points();

    // Statistic 0 is always E_Q[logZ]; the family-specific ones follow.
    let n_stats = match &spec.utility {
        UtilitySpec::StateDepExp => 3,
        UtilitySpec::Power { .. } | UtilitySpec::MultNoise { .. } => 2,
        UtilitySpec::DetExp { .. } | UtilitySpec::Log => 1,
    };
    let mut acc = QRatioChunks::new(n_stats, n_pts);
    let mut start = 0usize;
    while start < n_const {
        let nc = (n_const - start).min(CONST_CHUNK);
        let opts = MarketOpts { path_offset: start as u64, ..MarketOpts::default() };
        let mut batch = simulate_market(spec, nc, key, opts)?;
        match &spec.utility {
            UtilitySpec::StateDepExp => simulate_risk_aversion(spec, &mut batch)?,
            UtilitySpec::MultNoise { beta_x, .. } => simulate_noise(beta_x, &mut batch)?,
            _ => {}
        }
        acc.begin_chunk();
        for i in 0..n_pts {
            let lnz = batch.slice_at(CH_LOG_Z, i)?;
            let z: Vec<R> = lnz.iter().map(|&lz| lz.exp()).collect();
            match &spec.utility {
                UtilitySpec::StateDepExp => {
                    let gi = batch.slice_at(CH_GAMMA_INV, i)?;
                    let gz: Vec<R> = gi.iter().zip(&lnz).map(|(&g, &lz)| g * lz).collect();
                    acc.add_slice(i, &z, &[&lnz, &gi, &gz])?;
                }
                UtilitySpec::Power { gamma } => {
                    let b = -R::one() / (R::one() - *gamma);
                    let zb: Vec<R> = lnz.iter().map(|&lz| (b * lz).exp()).collect();
                    acc.add_slice(i, &z, &[&lnz, &zb])?;
                }
                UtilitySpec::MultNoise { .. } => {
                    let x = batch.slice_at(CH_X, i)?;
                    let lphi: Vec<R> =
                        lnz.iter().zip(&x).map(|(&lz, &xv)| lz - xv.ln()).collect();
                    acc.add_slice(i, &z, &[&lnz, &lphi])?;
                }
                _ => acc.add_slice(i, &z, &[&lnz])?,
            }
        }
        start += nc;
    }
    let stats = acc.finish()?;

    let mut out = DerivedConstants {
        c: Vec::new(),
        c_se: Vec::new(),
        m: Vec::new(),
        m_se: Vec::new(),
        k: Vec::new(),
        e0: stats[0].iter().map(|e| e.mean).collect(),
        e0_se: stats[0].iter().map(|e| e.se).collect(),
        h: Vec::new(),
        h_se: Vec::new(),
        phi0: Vec::new(),
        phi0_se: Vec::new(),
        x0: spec.x0,
        n_const,
    };

    match &spec.utility {
        UtilitySpec::StateDepExp => {
            out.c = vec![R::zero(); n_pts];
            out.c_se = vec![R::zero(); n_pts];
            out.m = vec![R::zero(); n_pts];
            out.m_se = vec![R::zero(); n_pts];
            out.k = vec![R::zero(); n_pts];
            for i in 0..n_pts {
                let a = stats[1][i];
                if !(a.mean > R::zero()) {
                    return Err(Error::Estimator(format!(
                        "E_Q[1/gamma] estimate {} at index {i} is not positive",
                        a.mean
                    )));
                }
                out.c[i] = R::one() / a.mean;
                out.c_se[i] = a.se / (a.mean * a.mean);
                let m = stats[2][i];
                out.m[i] = m.mean;
                out.m_se[i] = m.se;
                out.k[i] = out.c[i] * (spec.x0 + m.mean);
            }
        }
        UtilitySpec::DetExp { gamma } => {
            out.c = vec![*gamma; n_pts];
            out.c_se = vec![R::zero(); n_pts];
            out.m = out.e0.iter().map(|&v| v / *gamma).collect();
            out.m_se = out.e0_se.iter().map(|&v| v / *gamma).collect();
            out.k = out.m.iter().map(|&m| *gamma * (spec.x0 + m)).collect();
        }
        UtilitySpec::Power { .. } => {
            out.h = vec![R::zero(); n_pts];
            out.h_se = vec![R::zero(); n_pts];
            for i in 0..n_pts {
                let h = stats[1][i];
                if !(h.mean > R::zero()) {
                    return Err(Error::Estimator(format!(
                        "H estimate {} at index {i} is not positive",
                        h.mean
                    )));
                }
                out.h[i] = h.mean;
                out.h_se[i] = h.se;
            }
        }
        UtilitySpec::MultNoise { .. } => {
            out.phi0 = stats[1].iter().map(|e| e.mean).collect();
            out.phi0_se = stats[1].iter().map(|e| e.se).collect();
        }
        UtilitySpec::Log => {}
    }
    Ok(out)
}

fn fill_channel<R: Real>(
    batch: &PathBatch<R>,
    f: impl Fn(&PathBatch<R>, usize, usize) -> R + Sync,
) -> Vec<R> {
    let l = batch.row_len();
    let mut v = vec![R::zero(); batch.n_paths() * l];
    v.par_chunks_mut(l).enumerate().for_each(|(p, row)| {
        for (i, slot) in row.iter_mut().enumerate() {
            *slot = f(batch, p, i);
        }
    });
    v
}

/// Optimal wealth in the self-consistent regime (eta = 0, beta = -theta/2):
/// xi*_t = (1/gamma_t)(gamma_0 x - ln Z_t). Fills "xi_star".
pub fn consistent_optimal_wealth<R: Real>(
    spec: &ScenarioSpec<R>,
    batch: &mut PathBatch<R>,
) -> Result<()> {
    if !spec.has_consistent_pair() {
        return Err(Error::Assertion(
            "scenario (eta, beta) is not the self-consistent pair (0, -theta/2)".into(),
        ));
    }
    batch.channel(CH_GAMMA_INV)?;
    let g0x = spec.gamma0 * spec.x0;
    let xi = fill_channel(batch, |b, p, i| {
        b.value(CH_GAMMA_INV, p, i).unwrap() * (g0x - b.log_z(p, i))
    });
    batch.insert_channel(CH_XI_STAR, xi);
    Ok(())
}

/// Replicating exposure of the self-consistent optimum,
/// e_t = -(theta_t/2) xi*_t - theta_t/gamma_t, with the proportion view
/// alpha = e/(sigma xi*) where wealth is away from zero. Fills "exposure"
/// and "alpha".
pub fn consistent_optimal_exposure<R: Real>(
    spec: &ScenarioSpec<R>,
    batch: &mut PathBatch<R>,
) -> Result<()> {
    batch.channel(CH_XI_STAR)?;
    batch.channel(CH_GAMMA_INV)?;
    let half = R::of(0.5);
    let e = fill_channel(batch, |b, p, i| {
        let th = b.theta(p, i);
        let xi = b.value(CH_XI_STAR, p, i).unwrap();
        let gi = b.value(CH_GAMMA_INV, p, i).unwrap();
        -(th * half) * xi - th * gi
    });
    batch.insert_channel(CH_EXPOSURE, e);
    let floor = R::of(WEALTH_FLOOR);
    let grid = *batch.grid();
    let a = fill_channel(batch, |b, p, i| {
        let xi = b.value(CH_XI_STAR, p, i).unwrap();
        if xi.abs() > floor {
            let sg = spec.sigma.eval(grid.time(i), b.w(p, i));
            b.value(CH_EXPOSURE, p, i).unwrap() / (sg * xi)
        } else {
            R::nan()
        }
    });
    batch.insert_channel(CH_ALPHA, a);
    Ok(())
}

/// Deterministic-exponential (Merton) optimum,
/// xi*_t = x + (E_Q[ln Z_t] - ln Z_t)/gamma, with the entropy term taken
/// from the estimated constants. Fills "xi_star".
pub fn merton_exponential_wealth<R: Real>(
    spec: &ScenarioSpec<R>,
    batch: &mut PathBatch<R>,
    gamma: R,
    consts: &DerivedConstants<R>,
) -> Result<()> {
    if !(gamma > R::zero()) {
        return Err(Error::domain("gamma must be positive"));
    }
    let x0 = spec.x0;
    let xi = fill_channel(batch, |b, p, i| {
        x0 + (consts.e0[i] - b.log_z(p, i)) / gamma
    });
    batch.insert_channel(CH_XI_STAR, xi);
    Ok(())
}

/// Power-utility optimum, xi*_t = x Z_t^b / H_t with b = -1/(1-gamma).
/// Fills "xi_star".
pub fn power_optimal_wealth<R: Real>(
    spec: &ScenarioSpec<R>,
    batch: &mut PathBatch<R>,
    gamma: R,
    consts: &DerivedConstants<R>,
) -> Result<()> {
    if !(spec.x0 > R::zero()) {
        return Err(Error::domain("power utility needs positive initial wealth"));
    }
    if consts.h.is_empty() {
        return Err(Error::Estimator("constants were not estimated for the power family".into()));
    }
    let b_exp = -R::one() / (R::one() - gamma);
    let x0 = spec.x0;
    let xi = fill_channel(batch, |b, p, i| {
        x0 * (b_exp * b.log_z(p, i)).exp() / consts.h[i]
    });
    batch.insert_channel(CH_XI_STAR, xi);
    Ok(())
}

/// Log-utility optimum, xi*_t = x / Z_t. Fills "xi_star".
pub fn log_optimal_wealth<R: Real>(spec: &ScenarioSpec<R>, batch: &mut PathBatch<R>) -> Result<()> {
    if !(spec.x0 > R::zero()) {
        return Err(Error::domain("log utility needs positive initial wealth"));
    }
    let x0 = spec.x0;
    let xi = fill_channel(batch, |b, p, i| x0 * (-b.log_z(p, i)).exp());
    batch.insert_channel(CH_XI_STAR, xi);
    Ok(())
}

/// General static optimum for each horizon up to `horizon_index`:
/// xi*_t = (1/gamma_t)(c_t (x + m_t) - ln Z_t), any (eta, beta).
/// Entries beyond the horizon are NaN. Fills "xi_star_t".
pub fn general_exp_optimal_wealth<R: Real>(
    spec: &ScenarioSpec<R>,
    batch: &mut PathBatch<R>,
    horizon_index: usize,
    consts: &DerivedConstants<R>,
) -> Result<()> {
    if horizon_index > batch.grid().n_steps() {
        return Err(Error::domain("horizon index beyond the grid"));
    }
    if consts.c.is_empty() {
        return Err(Error::Estimator(
            "constants were not estimated for an exponential family".into(),
        ));
    }
    let gamma_det = match &spec.utility {
        UtilitySpec::StateDepExp => {
            batch.channel(CH_GAMMA_INV)?;
            None
        }
        UtilitySpec::DetExp { gamma } => Some(*gamma),
        other => {
            return Err(Error::domain(format!(
                "static exponential optimum does not apply to the {} family",
                other.family_name()
            )))
        }
    };
    let x0 = spec.x0;
    let xi = fill_channel(batch, |b, p, i| {
        if i > horizon_index {
            return R::nan();
        }
        let gi = match gamma_det {
            Some(g) => R::one() / g,
            None => b.value(CH_GAMMA_INV, p, i).unwrap(),
        };
        gi * (consts.c[i] * (x0 + consts.m[i]) - b.log_z(p, i))
    });
    batch.insert_channel(CH_XI_STAR_T, xi);
    Ok(())
}

/// Euler-integrates the candidate wealth of the scenario's declared
/// (eta, beta) family: risk aversion is read from the "gamma_inv" channel
/// (simulate_risk_aversion) and V advances with the family's myopic
/// exposure e_i = beta_i V_i - theta_i / gamma_i from V_0 = x.
/// Fills "V_star".
pub fn declared_family_wealth<R: Real>(
    spec: &ScenarioSpec<R>,
    batch: &mut PathBatch<R>,
) -> Result<()> {
    batch.channel(CH_GAMMA_INV)?;
    let l = batch.row_len();
    let grid = *batch.grid();
    let n = grid.n_steps();
    let offset = batch.path_offset() as usize;

    let mut v = vec![R::zero(); batch.n_paths() * l];
    let results: Vec<Result<()>> = v
        .par_chunks_mut(l)
        .enumerate()
        .map(|(p, vr)| {
            vr[0] = spec.x0;
            for i in 0..n {
                let t = grid.time(i);
                let wv = batch.w(p, i);
                let beta = spec.beta.eval(t, wv);
                let gi = batch.value(CH_GAMMA_INV, p, i).unwrap();
                let expo = beta * vr[i] - batch.theta(p, i) * gi;
                vr[i + 1] = vr[i] + expo * batch.dwq(p, i);
                if !vr[i + 1].is_finite() {
                    return Err(Error::NonFinite {
                        channel: CH_V_STAR,
                        path: offset + p,
                        step: i + 1,
                    });
                }
            }
            Ok(())
        })
        .collect();
    results.into_iter().collect::<Result<Vec<()>>>()?;
    batch.insert_channel(CH_V_STAR, v);
    Ok(())
}

/// Jointly Euler-integrates the forward family of Prop-style construction:
/// at each step eta_i = theta_i(theta_i + 2 beta_i) / (2(gamma_i V*_i + 1)),
/// risk aversion advances with (eta_i, beta_i), and V* advances with
/// exposure e_i = beta_i V*_i - theta_i/gamma_i, V*_0 = x. Fills
/// "gamma_inv", "V_star", "alpha_star", and "eta_star".
pub fn forward_family_simulate<R: Real>(
    spec: &ScenarioSpec<R>,
    batch: &mut PathBatch<R>,
) -> Result<()> {
    let l = batch.row_len();
    let grid = *batch.grid();
    let dt = grid.dt();
    let n = grid.n_steps();
    let half = R::of(0.5);
    let floor = R::of(WEALTH_FLOOR);
    let two = R::of(2.0);

    let mut gi = vec![R::zero(); batch.n_paths() * l];
    let mut v = vec![R::zero(); batch.n_paths() * l];
    let mut eta = vec![R::zero(); batch.n_paths() * l];
    let mut alpha = vec![R::zero(); batch.n_paths() * l];

    let results: Vec<Result<()>> = gi
        .par_chunks_mut(l)
        .zip(v.par_chunks_mut(l))
        .zip(eta.par_chunks_mut(l))
        .zip(alpha.par_chunks_mut(l))
        .enumerate()
        .map(|(p, (((gr, vr), er), ar))| {
            let mut lg = -spec.gamma0.ln();
            gr[0] = lg.exp();
            vr[0] = spec.x0;
            for i in 0..=n {
                let t = grid.time(i);
                let wv = batch.w(p, i);
                let theta = batch.theta(p, i);
                let beta = spec.beta.eval(t, wv);
                let gamma_v = vr[i] / gr[i];
                let denom = gamma_v + R::one();
                if denom.abs() < R::of(1e-6) {
                    return Err(Error::NonFinite {
                        channel: CH_ETA_STAR,
                        path: p,
                        step: i,
                    });
                }
                er[i] = theta * (theta + two * beta) / (two * denom);
                let expo = beta * vr[i] - theta * gr[i];
                ar[i] = if vr[i].abs() > floor {
                    expo / (spec.sigma.eval(t, wv) * vr[i])
                } else {
                    R::nan()
                };
                if i < n {
                    let dwq = batch.dwq(p, i);
                    vr[i + 1] = vr[i] + expo * dwq;
                    lg += (er[i] - half * beta * beta) * dt + beta * dwq;
                    gr[i + 1] = lg.exp();
                    if !vr[i + 1].is_finite() || !gr[i + 1].is_finite() {
                        return Err(Error::NonFinite {
                            channel: CH_V_STAR,
                            path: p,
                            step: i + 1,
                        });
                    }
                }
            }
            Ok(())
        })
        .collect();
    results.into_iter().collect::<Result<Vec<()>>>()?;

    batch.insert_channel(CH_GAMMA_INV, gi);
    batch.insert_channel(CH_V_STAR, v);
    batch.insert_channel(CH_ETA_STAR, eta);
    batch.insert_channel(CH_ALPHA_STAR, alpha);
    Ok(())
}

/// Optimal wealth for the multiplicative-noise family (deterministic base
/// risk aversion): xi*_t = x + (E_Q[ln phi_t] - ln phi_t)/gamma with
/// phi = Z/X, using the estimated phi constants. Fills "xi_star_t".
pub fn noise_optimal_wealth<R: Real>(
    spec: &ScenarioSpec<R>,
    batch: &mut PathBatch<R>,
    consts: &DerivedConstants<R>,
) -> Result<()> {
    let UtilitySpec::MultNoise { gamma, .. } = &spec.utility else {
        return Err(Error::domain("noise optimum needs the mult_noise family"));
    };
    if consts.phi0.is_empty() {
        return Err(Error::Estimator(
            "constants were not estimated for the mult_noise family".into(),
        ));
    }
    batch.channel(CH_X)?;
    let gamma = *gamma;
    let x0 = spec.x0;
    let xi = fill_channel(batch, |b, p, i| {
        let lphi = b.log_z(p, i) - b.value(CH_X, p, i).unwrap().ln();
        x0 + (consts.phi0[i] - lphi) / gamma
    });
    batch.insert_channel(CH_XI_STAR_T, xi);
    Ok(())
}

/// Strategy of the consistent multiplicative-noise regime, where
/// (theta - beta_x)^2 equals the declared deterministic k(t): monetary
/// exposure e_t = k(t)/gamma, proportion alpha = e/(sigma xi*) away from
/// zero wealth. Also fills the induced optimum xi*_t = x + (half-integral
/// of k minus ln phi_t)/gamma, which the exposure replicates. Fills
/// "xi_star", "exposure", and "alpha".
pub fn noise_strategy<R: Real>(
    spec: &ScenarioSpec<R>,
    batch: &mut PathBatch<R>,
    k: &CoefficientFn<R>,
) -> Result<()> {
    let UtilitySpec::MultNoise { gamma, beta_x, .. } = &spec.utility else {
        return Err(Error::domain("noise strategy needs the mult_noise family"));
    };
    let gamma = *gamma;
    batch.channel(CH_X)?;
    if k.depends_on_state() {
        return Err(Error::domain("k must be a deterministic function of time"));
    }

    // The regime premise: (theta - beta_x)^2 must equal k(t) everywhere.
    let grid = *batch.grid();
    for i in (0..=grid.n_steps()).step_by((grid.n_steps() / 64).max(1)) {
        let t = grid.time(i);
        for wf in [-3.0, -1.0, 0.0, 1.0, 3.0] {
            let w = R::of(wf);
            let tb = spec.theta(t, w) - beta_x.eval(t, w);
            let kv = k.eval(t, R::zero());
            if (tb * tb - kv).abs().f64() > 1e-10 {
                return Err(Error::Assertion(format!(
                    "(theta - beta_x)^2 = {} differs from declared k = {kv} at (t={t}, w={wf})",
                    tb * tb
                )));
            }
        }
    }

    // E_Q[ln phi_t] = half the running integral of k, exact for the scheme
    // (left-endpoint increments).
    let dt = grid.dt();
    let half = R::of(0.5);
    let mut phi_mean = vec![R::zero(); grid.n_points()];
    for i in 0..grid.n_steps() {
        phi_mean[i + 1] = phi_mean[i] + half * k.eval(grid.time(i), R::zero()) * dt;
    }

    let x0 = spec.x0;
    let xi = fill_channel(batch, |b, p, i| {
        let lphi = b.log_z(p, i) - b.value(CH_X, p, i).unwrap().ln();
        x0 + (phi_mean[i] - lphi) / gamma
    });
    batch.insert_channel(CH_XI_STAR, xi);

    let e = fill_channel(batch, |_, _, i| k.eval(grid.time(i), R::zero()) / gamma);
    batch.insert_channel(CH_EXPOSURE, e);

    let floor = R::of(WEALTH_FLOOR);
    let a = fill_channel(batch, |b, p, i| {
        let xi = b.value(CH_XI_STAR, p, i).unwrap();
        if xi.abs() > floor {
            b.value(CH_EXPOSURE, p, i).unwrap() / (spec.sigma.eval(grid.time(i), b.w(p, i)) * xi)
        } else {
            R::nan()
        }
    });
    batch.insert_channel(CH_ALPHA, a);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::q_expectation;
    use crate::paths::{integrate_wealth, CH_V};
    use crate::preferences::evaluate_utility;
    use crate::rng::STREAM_MAIN;
    use crate::scenario::parse_scenario;

    fn consistent_tanh(x0: f64, n_paths: usize, spu: u32) -> ScenarioSpec<f64> {
        parse_scenario(&format!(
            r#"{{"market": {{"mu": {{"expr": "0.05 + 0.02*tanh(w)", "bound": 0.07}},
                            "sigma": 0.2, "r": 0.01}},
                "risk": {{"gamma0": 1.0, "eta": 0.0,
                          "beta": {{"expr": "0.1 + 0.05*tanh(w)", "bound": 0.15}}}},
                "sim": {{"x0": {x0}, "T": 1.0, "steps_per_unit": {spu},
                         "n_paths": {n_paths}, "seed": 42}}}}"#
        ))
        .unwrap()
    }

    fn consistent_const(x0: f64, n_paths: usize, spu: u32) -> ScenarioSpec<f64> {
        parse_scenario(&format!(
            r#"{{"market": {{"mu": 0.05, "sigma": 0.2, "r": 0.01}},
                "risk": {{"gamma0": 1.0, "eta": 0.0, "beta": 0.1}},
                "sim": {{"x0": {x0}, "T": 1.0, "steps_per_unit": {spu},
                         "n_paths": {n_paths}, "seed": 42}}}}"#
        ))
        .unwrap()
    }

    fn prepared(spec: &ScenarioSpec<f64>) -> PathBatch<f64> {
        let mut b = simulate_market(
            spec,
            spec.n_paths,
            NoiseKey::new(spec.seed, STREAM_MAIN),
            MarketOpts::default(),
        )
        .unwrap();
        simulate_risk_aversion(spec, &mut b).unwrap();
        b
    }

    #[test]
    fn consistent_wealth_points_and_exposure() {
        let spec = consistent_const(0.0, 8, 16);
        let mut b = prepared(&spec);
        consistent_optimal_wealth(&spec, &mut b).unwrap();
        consistent_optimal_exposure(&spec, &mut b).unwrap();
        // At step 0: logZ = 0 and x = 0, so xi* = 0 and e = -theta/gamma = 0.2.
        for p in 0..8 {
            assert_eq!(b.value(CH_XI_STAR, p, 0).unwrap(), 0.0);
            let e0 = b.value(CH_EXPOSURE, p, 0).unwrap();
            assert!((e0 - 0.2).abs() < 1e-15, "e0 = {e0}");
            assert!(b.value(CH_ALPHA, p, 0).unwrap().is_nan());
        }
    }

    #[test]
    fn consistent_wealth_rejects_wrong_pair() {
        let spec = parse_scenario::<f64>(
            r#"{"market": {"mu": 0.05, "sigma": 0.2, "r": 0.01},
                "risk": {"beta": 0.0},
                "sim": {"steps_per_unit": 8, "n_paths": 4}}"#,
        )
        .unwrap();
        let mut b = prepared(&spec);
        assert!(matches!(
            consistent_optimal_wealth(&spec, &mut b),
            Err(Error::Assertion(_))
        ));
    }

    #[test]
    fn consistent_budget_constraint() {
        let spec = consistent_tanh(1.0, 20_000, 64);
        let mut b = prepared(&spec);
        consistent_optimal_wealth(&spec, &mut b).unwrap();
        let n = b.grid().n_steps();
        let xi = b.slice_at(CH_XI_STAR, n).unwrap();
        let lz = b.slice_at(CH_LOG_Z, n).unwrap();
        let e = q_expectation(&xi, &lz).unwrap();
        assert!(
            (e.mean - 1.0).abs() < 4.0 * e.se,
            "E_Q[xi*] = {} +- {}",
            e.mean,
            e.se
        );
    }

    #[test]
    fn pathwise_value_identity() {
        // u_t(xi*_t) must equal -(1/gamma_t) Z_t exp(-gamma0 x) to machine
        // precision on every path and step.
        let spec = consistent_tanh(1.0, 512, 32);
        let mut b = prepared(&spec);
        consistent_optimal_wealth(&spec, &mut b).unwrap();
        let u = evaluate_utility(&spec, &b, CH_XI_STAR).unwrap();
        let l = b.row_len();
        let scale = (-1.0f64).exp();
        for p in 0..b.n_paths() {
            for i in 0..l {
                let gi = b.value(CH_GAMMA_INV, p, i).unwrap();
                let z = b.log_z(p, i).exp();
                let expect = -gi * z * scale;
                let got = u[p * l + i];
                assert!(
                    (got - expect).abs() <= 1e-12 * expect.abs(),
                    "path {p} step {i}: {got} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn declared_wealth_identity_for_constant_gamma() {
        // With beta = 0 and constant gamma the myopic wealth telescopes to
        // x + (I - ln Z)/gamma pathwise, where I is the running half
        // quadratic variation of theta; the Euler loop must reproduce that
        // identity to rounding.
        let spec = parse_scenario::<f64>(
            r#"{"market": {"mu": {"expr": "0.05 + 0.02*tanh(w)", "bound": 0.07},
                           "sigma": 0.2, "r": 0.01},
                "risk": {"gamma0": 2.0, "eta": 0.0, "beta": 0.0},
                "sim": {"x0": 1.0, "T": 1.0, "steps_per_unit": 32,
                        "n_paths": 256, "seed": 9}}"#,
        )
        .unwrap();
        let mut b = prepared(&spec);
        declared_family_wealth(&spec, &mut b).unwrap();
        let dt = b.grid().dt();
        for p in 0..b.n_paths() {
            let mut qv = 0.0f64;
            for i in 0..=b.grid().n_steps() {
                let expect = 1.0 + (0.5 * qv * dt - b.log_z(p, i)) / 2.0;
                let got = b.value(CH_V_STAR, p, i).unwrap();
                assert!(
                    (got - expect).abs() < 1e-12,
                    "path {p} step {i}: {got} vs {expect}"
                );
                let th = b.theta(p, i);
                qv += th * th;
            }
        }
    }

    #[test]
    fn replication_residual_shrinks_linearly_in_dt() {
        let max_mean_residual = |spu: u32| {
            let spec = consistent_tanh(1.0, 4000, spu);
            let mut b = prepared(&spec);
            consistent_optimal_wealth(&spec, &mut b).unwrap();
            consistent_optimal_exposure(&spec, &mut b).unwrap();
            let l = b.row_len();
            let xi = b.channel(CH_XI_STAR).unwrap();
            let e = b.channel(CH_EXPOSURE).unwrap();
            let mut worst = 0.0f64;
            for i in 0..b.grid().n_steps() {
                let mut acc = 0.0;
                for p in 0..b.n_paths() {
                    let row = p * l;
                    acc += xi[row + i + 1] - xi[row + i] - e[row + i] * b.dwq(p, i);
                }
                worst = worst.max((acc / b.n_paths() as f64).abs());
            }
            worst
        };
        let coarse = max_mean_residual(8);
        let fine = max_mean_residual(32);
        assert!(coarse < 0.02, "coarse residual {coarse}");
        assert!(
            fine < coarse / 2.0,
            "residual should shrink ~linearly: {fine} vs {coarse}"
        );
    }

    #[test]
    fn merton_channel_and_entropy() {
        let spec = parse_scenario::<f64>(
            r#"{"market": {"mu": 0.05, "sigma": 0.2, "r": 0.01},
                "utility": {"family": "det_exp", "params": {"gamma": 1.0}},
                "sim": {"x0": 0.0, "T": 1.0, "steps_per_unit": 32,
                        "n_paths": 20000, "seed": 6}}"#,
        )
        .unwrap();
        let consts = estimate_constants(&spec, 20_000).unwrap();
        let n = spec.grid().unwrap().n_steps();
        // Constant theta = -0.2: E_Q[lnZ_T] = theta^2 T / 2 = 0.02.
        assert!(
            (consts.e0[n] - 0.02).abs() < 4.0 * consts.e0_se[n],
            "e0 = {} +- {}",
            consts.e0[n],
            consts.e0_se[n]
        );
        let mut b = prepared(&spec);
        merton_exponential_wealth(&spec, &mut b, 1.0, &consts).unwrap();
        for p in 0..4 {
            let expect = 0.0 + (consts.e0[n] - b.log_z(p, n)) / 1.0;
            assert_eq!(b.value(CH_XI_STAR, p, n).unwrap(), expect);
        }
        let xi = b.slice_at(CH_XI_STAR, n).unwrap();
        let lz = b.slice_at(CH_LOG_Z, n).unwrap();
        let e = q_expectation(&xi, &lz).unwrap();
        assert!((e.mean - 0.0).abs() < 4.0 * e.se);
    }

    #[test]
    fn general_reduces_to_merton_for_deterministic_gamma() {
        let spec = parse_scenario::<f64>(
            r#"{"market": {"mu": 0.05, "sigma": 0.2, "r": 0.01},
                "utility": {"family": "det_exp", "params": {"gamma": 2.0}},
                "sim": {"x0": 1.0, "T": 1.0, "steps_per_unit": 16,
                        "n_paths": 4000, "seed": 6}}"#,
        )
        .unwrap();
        let consts = estimate_constants(&spec, 4000).unwrap();
        let mut b = prepared(&spec);
        let n = b.grid().n_steps();
        merton_exponential_wealth(&spec, &mut b, 2.0, &consts).unwrap();
        general_exp_optimal_wealth(&spec, &mut b, n, &consts).unwrap();
        let l = b.row_len();
        for p in 0..b.n_paths() {
            for i in 0..l {
                let a = b.value(CH_XI_STAR, p, i).unwrap();
                let g = b.value(CH_XI_STAR_T, p, i).unwrap();
                assert!(
                    (a - g).abs() < 1e-10 * (1.0 + a.abs()),
                    "path {p} step {i}: merton {a} vs general {g}"
                );
            }
        }
    }

    #[test]
    fn general_matches_consistent_within_constant_noise() {
        let spec = consistent_tanh(1.0, 4000, 32);
        let consts = estimate_constants(&spec, 20_000).unwrap();
        let n = spec.grid().unwrap().n_steps();
        // In the consistent regime c_t = gamma0 and m_t = 0, so the
        // estimated scalars must sit within their own bands.
        let dev = (consts.c[n] * (1.0 + consts.m[n]) - 1.0).abs();
        let band = 4.0 * (consts.c_se[n] * (1.0 + consts.m[n].abs()) + consts.c[n] * consts.m_se[n]);
        assert!(dev <= band, "constant deviation {dev} vs band {band}");

        let mut b = prepared(&spec);
        consistent_optimal_wealth(&spec, &mut b).unwrap();
        general_exp_optimal_wealth(&spec, &mut b, n, &consts).unwrap();
        let xi_c = b.slice_at(CH_XI_STAR, n).unwrap();
        let xi_g = b.slice_at(CH_XI_STAR_T, n).unwrap();
        let max_gi = b
            .slice_at(CH_GAMMA_INV, n)
            .unwrap()
            .iter()
            .fold(0.0f64, |m, &g| m.max(g));
        for (a, g) in xi_c.iter().zip(&xi_g) {
            assert!((a - g).abs() <= max_gi * band + 1e-12);
        }
    }

    #[test]
    fn power_wealth_constants_and_budget() {
        let spec = parse_scenario::<f64>(
            r#"{"market": {"mu": 0.05, "sigma": 0.2, "r": 0.01},
                "utility": {"family": "power", "params": {"gamma": 0.5}},
                "sim": {"x0": 1.0, "T": 1.0, "steps_per_unit": 32,
                        "n_paths": 20000, "seed": 8}}"#,
        )
        .unwrap();
        let consts = estimate_constants(&spec, 20_000).unwrap();
        let grid = spec.grid().unwrap();
        let n = grid.n_steps();
        // Constant theta: H_t = exp(b(b+1)/2 theta^2 t) with b = -2.
        let expect = (1.0f64 * 0.04 * 1.0).exp();
        assert!(
            (consts.h[n] - expect).abs() < 4.0 * consts.h_se[n],
            "H = {} vs {expect}",
            consts.h[n]
        );
        let mut b = prepared(&spec);
        power_optimal_wealth(&spec, &mut b, 0.5, &consts).unwrap();
        for p in 0..4 {
            let expect = (-2.0 * b.log_z(p, n)).exp() / consts.h[n];
            let got = b.value(CH_XI_STAR, p, n).unwrap();
            assert!((got - expect).abs() < 1e-14 * expect);
        }
        let xi = b.slice_at(CH_XI_STAR, n).unwrap();
        let lz = b.slice_at(CH_LOG_Z, n).unwrap();
        let e = q_expectation(&xi, &lz).unwrap();
        assert!((e.mean - 1.0).abs() < 4.0 * e.se, "budget {} +- {}", e.mean, e.se);
    }

    #[test]
    fn log_wealth_is_reciprocal_density() {
        let spec = parse_scenario::<f64>(
            r#"{"market": {"mu": 0.05, "sigma": 0.2, "r": 0.01},
                "utility": {"family": "log"},
                "sim": {"x0": 2.0, "T": 1.0, "steps_per_unit": 8, "n_paths": 64, "seed": 3}}"#,
        )
        .unwrap();
        let mut b = prepared(&spec);
        log_optimal_wealth(&spec, &mut b).unwrap();
        for p in 0..8 {
            let got = b.value(CH_XI_STAR, p, 8).unwrap();
            let expect = 2.0 * (-b.log_z(p, 8)).exp();
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn forward_family_consistent_pair_kills_eta() {
        let spec = consistent_tanh(1.0, 256, 32);
        let mut b = prepared(&spec);
        forward_family_simulate(&spec, &mut b).unwrap();
        let eta = b.channel(CH_ETA_STAR).unwrap();
        for &v in eta {
            assert!(v.abs() <= 1e-15, "eta = {v}");
        }
    }

    #[test]
    fn forward_family_positive_eta_for_flat_beta() {
        let spec = parse_scenario::<f64>(
            r#"{"market": {"mu": 0.05, "sigma": 0.2, "r": 0.01},
                "risk": {"gamma0": 1.0, "beta": 0.0},
                "sim": {"x0": 1.0, "T": 1.0, "steps_per_unit": 32, "n_paths": 128, "seed": 4}}"#,
        )
        .unwrap();
        let mut b = prepared(&spec);
        forward_family_simulate(&spec, &mut b).unwrap();
        let eta = b.channel(CH_ETA_STAR).unwrap();
        assert!(eta.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn forward_family_singularity_aborts() {
        let spec = parse_scenario::<f64>(
            r#"{"market": {"mu": 0.05, "sigma": 0.2, "r": 0.01},
                "risk": {"gamma0": 1.0, "beta": 0.0},
                "sim": {"x0": -1.0, "T": 1.0, "steps_per_unit": 8, "n_paths": 4, "seed": 4}}"#,
        )
        .unwrap();
        let mut b = prepared(&spec);
        let err = forward_family_simulate(&spec, &mut b).unwrap_err();
        assert!(err.to_string().contains("numerical abort"), "{err}");
    }

    #[test]
    fn noise_strategy_zero_k_is_flat() {
        // beta_x = theta makes phi constant and the exposure vanish.
        let spec = parse_scenario::<f64>(
            r#"{"market": {"mu": {"expr": "0.05 + 0.02*tanh(w)", "bound": 0.07},
                           "sigma": 0.2, "r": 0.01},
                "utility": {"family": "mult_noise",
                            "params": {"gamma": 1.0,
                                       "beta": {"expr": "-(0.2 + 0.1*tanh(w))", "bound": 0.3},
                                       "k": 0.0}},
                "sim": {"x0": 1.0, "T": 1.0, "steps_per_unit": 16, "n_paths": 64, "seed": 5}}"#,
        )
        .unwrap();
        let mut b = simulate_market(
            &spec,
            spec.n_paths,
            NoiseKey::new(spec.seed, STREAM_MAIN),
            MarketOpts::default(),
        )
        .unwrap();
        let UtilitySpec::MultNoise { beta_x, .. } = spec.utility.clone() else {
            unreachable!()
        };
        simulate_noise(&beta_x, &mut b).unwrap();
        let k = CoefficientFn::constant(0.0);
        noise_strategy(&spec, &mut b, &k).unwrap();
        let e = b.channel(CH_EXPOSURE).unwrap();
        assert!(e.iter().all(|&v| v == 0.0));
        let xi = b.channel(CH_XI_STAR).unwrap();
        for &v in xi {
            assert!((v - 1.0).abs() < 1e-10, "xi = {v}");
        }
        // Zero exposure leaves wealth at x.
        integrate_wealth(&mut b, CH_V, "e_chk", 1.0, |_, _, _, _| 0.0).unwrap();
        let v = b.channel(CH_V).unwrap();
        assert!(v.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn noise_strategy_constant_k_and_assertion() {
        let spec = parse_scenario::<f64>(
            r#"{"market": {"mu": 0.05, "sigma": 0.2, "r": 0.01},
                "utility": {"family": "mult_noise",
                            "params": {"gamma": 2.0, "beta": 0.0}},
                "sim": {"x0": 1.0, "T": 1.0, "steps_per_unit": 16, "n_paths": 32, "seed": 5}}"#,
        )
        .unwrap();
        let mut b = simulate_market(
            &spec,
            spec.n_paths,
            NoiseKey::new(spec.seed, STREAM_MAIN),
            MarketOpts::default(),
        )
        .unwrap();
        let UtilitySpec::MultNoise { beta_x, .. } = spec.utility.clone() else {
            unreachable!()
        };
        simulate_noise(&beta_x, &mut b).unwrap();
        // theta = -0.2, beta_x = 0: k = 0.04.
        let k = CoefficientFn::constant(0.04);
        noise_strategy(&spec, &mut b, &k).unwrap();
        for p in 0..4 {
            let e = b.value(CH_EXPOSURE, p, 3).unwrap();
            assert!((e - 0.02).abs() < 1e-15);
            let xi = b.value(CH_XI_STAR, p, 3).unwrap();
            let a = b.value(CH_ALPHA, p, 3).unwrap();
            assert!((a - 0.02 / (0.2 * xi)).abs() < 1e-12 * a.abs());
        }
        let bad = CoefficientFn::constant(0.05);
        assert!(matches!(
            noise_strategy(&spec, &mut b, &bad),
            Err(Error::Assertion(_))
        ));
    }
}
