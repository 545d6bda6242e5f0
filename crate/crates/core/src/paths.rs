//! Path simulation on a uniform time grid.
//!
//! A [`PathBatch`] holds per-path, per-step channels in row-major layout
//! (path-contiguous rows). Brownian increments are never stored: they are
//! recomputed on demand from the batch's counter-based noise key, so memory
//! stays one f64 per stored channel per grid point.
//!
//! All simulators abort with a numerical-abort error the moment any path
//! produces a non-finite value, identifying the channel, path, and step.

use std::collections::BTreeMap;
use std::io;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::NoiseKey;
use crate::scenario::ScenarioSpec;

pub const CH_W: &str = "W";
pub const CH_THETA: &str = "theta";
pub const CH_LOG_Z: &str = "logZ";
pub const CH_S: &str = "S";
pub const CH_GAMMA_INV: &str = "gamma_inv";
pub const CH_X: &str = "X";
pub const CH_XI_STAR: &str = "xi_star";
pub const CH_V: &str = "V";
pub const CH_V_STAR: &str = "V_star";
pub const CH_EXPOSURE: &str = "exposure";
pub const CH_ALPHA: &str = "alpha";
pub const CH_ETA_STAR: &str = "eta_star";

/// Uniform grid on [0, T] with n_steps intervals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid<R> {
    t_end: R,
    n_steps: usize,
}

impl<R: Real> TimeGrid<R> {
    pub fn new(t_end: R, n_steps: usize) -> Self {
        assert!(n_steps >= 1, "grid needs at least one step");
        TimeGrid { t_end, n_steps }
    }

    #[inline]
    pub fn dt(&self) -> R {
        self.t_end / R::of(self.n_steps as f64)
    }

    #[inline]
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    #[inline]
    pub fn n_points(&self) -> usize {
        self.n_steps + 1
    }

    #[inline]
    pub fn t_end(&self) -> R {
        self.t_end
    }

    #[inline]
    pub fn time(&self, i: usize) -> R {
        self.t_end * R::of(i as f64) / R::of(self.n_steps as f64)
    }

    /// Grid index of a time, failing when it does not lie on the grid.
    pub fn index_of(&self, t: R) -> Result<usize> {
        let x = (t / self.dt()).f64();
        let i = x.round();
        if (x - i).abs() > 1e-6 || i < 0.0 || i > self.n_steps as f64 {
            return Err(Error::domain(format!(
                "time {t} is not a grid point (dt = {})",
                self.dt()
            )));
        }
        Ok(i as usize)
    }
}

/// Options for the market simulator.
#[derive(Clone, Copy, Debug, Default)]
pub struct MarketOpts {
    /// Also record the asset price channel "S" (with S_0 = 1).
    pub record_s: bool,
    /// Index of the first path in the noise stream. Lets a large batch be
    /// simulated in slices that reproduce the noise of one contiguous run.
    pub path_offset: u64,
}

/// A batch of simulated paths sharing one grid and one noise key.
pub struct PathBatch<R: Real> {
    grid: TimeGrid<R>,
    n_paths: usize,
    key: NoiseKey,
    path_offset: u64,
    dt: R,
    sqrt_dt: R,
    w: Vec<R>,
    theta: Vec<R>,
    log_z: Vec<R>,
    extra: BTreeMap<String, Vec<R>>,
}

impl<R: Real> PathBatch<R> {
    #[inline]
    pub fn grid(&self) -> &TimeGrid<R> {
        &self.grid
    }

    #[inline]
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    #[inline]
    pub fn row_len(&self) -> usize {
        self.grid.n_points()
    }

    #[inline]
    fn at(&self, v: &[R], p: usize, i: usize) -> R {
        v[p * self.row_len() + i]
    }

    #[inline]
    pub fn w(&self, p: usize, i: usize) -> R {
        self.at(&self.w, p, i)
    }

    #[inline]
    pub fn theta(&self, p: usize, i: usize) -> R {
        self.at(&self.theta, p, i)
    }

    #[inline]
    pub fn log_z(&self, p: usize, i: usize) -> R {
        self.at(&self.log_z, p, i)
    }

    /// Brownian increment over step i, recomputed from the noise key.
    #[inline]
    pub fn dw(&self, p: usize, i: usize) -> R {
        self.key
            .normal_scaled(self.path_offset + p as u64, i as u64, self.sqrt_dt)
    }

    /// Risk-neutral increment dW^Q = dW - theta dt over step i.
    #[inline]
    pub fn dwq(&self, p: usize, i: usize) -> R {
        self.dw(p, i) - self.theta(p, i) * self.dt
    }

    pub fn noise_key(&self) -> NoiseKey {
        self.key
    }

    /// Index of this batch's first path in the noise stream.
    #[inline]
    pub fn path_offset(&self) -> u64 {
        self.path_offset
    }

    /// Read-only view of a channel. The base channels "W", "theta", and
    /// "logZ" are always present; others exist once a simulator adds them.
    pub fn channel(&self, name: &str) -> Result<&[R]> {
        match name {
            CH_W => Ok(&self.w),
            CH_THETA => Ok(&self.theta),
            CH_LOG_Z => Ok(&self.log_z),
            _ => self
                .extra
                .get(name)
                .map(Vec::as_slice)
                .ok_or_else(|| Error::domain(format!("channel '{name}' not simulated"))),
        }
    }

    #[inline]
    pub fn value(&self, name: &str, p: usize, i: usize) -> Result<R> {
        Ok(self.channel(name)?[p * self.row_len() + i])
    }

    pub fn has_channel(&self, name: &str) -> bool {
        matches!(name, CH_W | CH_THETA | CH_LOG_Z) || self.extra.contains_key(name)
    }

    pub fn channel_names(&self) -> Vec<String> {
        let mut names = vec![CH_W.to_string(), CH_THETA.to_string(), CH_LOG_Z.to_string()];
        names.extend(self.extra.keys().cloned());
        names
    }

    pub fn insert_channel(&mut self, name: &str, data: Vec<R>) {
        assert_eq!(
            data.len(),
            self.n_paths * self.row_len(),
            "channel '{name}' has wrong length"
        );
        self.extra.insert(name.to_string(), data);
    }

    /// Values of one channel at a fixed grid index, one per path.
    pub fn slice_at(&self, name: &str, i: usize) -> Result<Vec<R>> {
        let ch = self.channel(name)?;
        let l = self.row_len();
        Ok((0..self.n_paths).map(|p| ch[p * l + i]).collect())
    }
}

fn ensure_finite<R: Real>(v: R, channel: &'static str, p: usize, i: usize) -> Result<R> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { channel, path: p, step: i })
    }
}

/// Simulates W, theta, and logZ (and optionally S) under the physical
/// measure for `n_paths` paths on the scenario's grid.
pub fn simulate_market<R: Real>(
    spec: &ScenarioSpec<R>,
    n_paths: usize,
    key: NoiseKey,
    opts: MarketOpts,
) -> Result<PathBatch<R>> {
    let grid = spec.grid()?;
    let l = grid.n_points();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();

    let mut w = vec![R::zero(); n_paths * l];
    let mut theta = vec![R::zero(); n_paths * l];
    let mut log_z = vec![R::zero(); n_paths * l];

    let results: Vec<Result<()>> = w
        .par_chunks_mut(l)
        .zip(theta.par_chunks_mut(l))
        .zip(log_z.par_chunks_mut(l))
        .enumerate()
        .map(|(p, ((wr, thr), zr))| {
            let half = R::of(0.5);
            let gp = opts.path_offset as usize + p;
            wr[0] = R::zero();
            zr[0] = R::zero();
            for i in 0..grid.n_steps() {
                let t = grid.time(i);
                let th = ensure_finite(spec.theta(t, wr[i]), CH_THETA, gp, i)?;
                thr[i] = th;
                let dw = key.normal_scaled(opts.path_offset + p as u64, i as u64, sqrt_dt);
                zr[i + 1] =
                    ensure_finite(zr[i] - half * th * th * dt + th * dw, CH_LOG_Z, gp, i + 1)?;
                wr[i + 1] = wr[i] + dw;
            }
            let n = grid.n_steps();
            thr[n] = ensure_finite(spec.theta(grid.time(n), wr[n]), CH_THETA, gp, n)?;
            Ok(())
        })
        .collect();
    results.into_iter().collect::<Result<Vec<()>>>()?;

    let mut batch = PathBatch {
        grid,
        n_paths,
        key,
        path_offset: opts.path_offset,
        dt,
        sqrt_dt,
        w,
        theta,
        log_z,
        extra: BTreeMap::new(),
    };

    if opts.record_s {
        let mut s = vec![R::zero(); n_paths * l];
        let results: Vec<Result<()>> = s
            .par_chunks_mut(l)
            .enumerate()
            .map(|(p, sr)| {
                let half = R::of(0.5);
                let gp = batch.path_offset as usize + p;
                sr[0] = R::one();
                for i in 0..grid.n_steps() {
                    let t = grid.time(i);
                    let wv = batch.w(p, i);
                    let mu = spec.mu.eval(t, wv);
                    let sg = spec.sigma.eval(t, wv);
                    let dw = batch.dw(p, i);
                    let growth = ((mu - half * sg * sg) * dt + sg * dw).exp();
                    sr[i + 1] = ensure_finite(sr[i] * growth, CH_S, gp, i + 1)?;
                }
                Ok(())
            })
            .collect();
        results.into_iter().collect::<Result<Vec<()>>>()?;
        batch.insert_channel(CH_S, s);
    }

    Ok(batch)
}

/// Simulates the reciprocal risk aversion 1/gamma driven by the scenario's
/// (eta, beta) through d ln(1/gamma) = (eta - beta^2/2) dt + beta dW^Q,
/// starting from 1/gamma_0. Adds the channel "gamma_inv".
pub fn simulate_risk_aversion<R: Real>(
    spec: &ScenarioSpec<R>,
    batch: &mut PathBatch<R>,
) -> Result<()> {
    let l = batch.row_len();
    let dt = batch.dt;
    let grid = batch.grid;
    let mut gi = vec![R::zero(); batch.n_paths * l];
    let results: Vec<Result<()>> = gi
        .par_chunks_mut(l)
        .enumerate()
        .map(|(p, gr)| {
            let half = R::of(0.5);
            let gp = batch.path_offset as usize + p;
            let mut lg = -spec.gamma0.ln();
            gr[0] = lg.exp();
            for i in 0..grid.n_steps() {
                let t = grid.time(i);
                let wv = batch.w(p, i);
                let eta = spec.eta.eval(t, wv);
                let beta = spec.beta.eval(t, wv);
                lg += (eta - half * beta * beta) * dt + beta * batch.dwq(p, i);
                gr[i + 1] = ensure_finite(lg.exp(), CH_GAMMA_INV, gp, i + 1)?;
            }
            Ok(())
        })
        .collect();
    results.into_iter().collect::<Result<Vec<()>>>()?;
    batch.insert_channel(CH_GAMMA_INV, gi);
    Ok(())
}

/// Simulates the multiplicative noise process X with dX = X beta_x dW under
/// the physical measure, X_0 = 1. Adds the channel "X".
pub fn simulate_noise<R: Real>(
    beta_x: &crate::scenario::CoefficientFn<R>,
    batch: &mut PathBatch<R>,
) -> Result<()> {
    let l = batch.row_len();
    let dt = batch.dt;
    let grid = batch.grid;
    let mut x = vec![R::zero(); batch.n_paths * l];
    let results: Vec<Result<()>> = x
        .par_chunks_mut(l)
        .enumerate()
        .map(|(p, xr)| {
            let half = R::of(0.5);
            let gp = batch.path_offset as usize + p;
            let mut lx = R::zero();
            xr[0] = R::one();
            for i in 0..grid.n_steps() {
                let b = beta_x.eval(grid.time(i), batch.w(p, i));
                lx += -half * b * b * dt + b * batch.dw(p, i);
                xr[i + 1] = ensure_finite(lx.exp(), CH_X, gp, i + 1)?;
            }
            Ok(())
        })
        .collect();
    results.into_iter().collect::<Result<Vec<()>>>()?;
    batch.insert_channel(CH_X, x);
    Ok(())
}

/// Integrates self-financing wealth in exposure form, V_{i+1} = V_i + e_i dW^Q_i,
/// where the rule maps (batch, path, step, current wealth) to the exposure
/// e = sigma alpha V. Adds the wealth and exposure channels under the given
/// names.
pub fn integrate_wealth<R: Real>(
    batch: &mut PathBatch<R>,
    wealth_name: &str,
    exposure_name: &str,
    v0: R,
    rule: impl Fn(&PathBatch<R>, usize, usize, R) -> R + Sync,
) -> Result<()> {
    let l = batch.row_len();
    let n = batch.grid.n_steps();
    let mut v = vec![R::zero(); batch.n_paths * l];
    let mut e = vec![R::zero(); batch.n_paths * l];
    let results: Vec<Result<()>> = v
        .par_chunks_mut(l)
        .zip(e.par_chunks_mut(l))
        .enumerate()
        .map(|(p, (vr, er))| {
            let gp = batch.path_offset as usize + p;
            vr[0] = v0;
            for i in 0..n {
                let ev = ensure_finite(rule(batch, p, i, vr[i]), CH_EXPOSURE, gp, i)?;
                er[i] = ev;
                vr[i + 1] = ensure_finite(vr[i] + ev * batch.dwq(p, i), CH_V, gp, i + 1)?;
            }
            er[n] = rule(batch, p, n, vr[n]);
            Ok(())
        })
        .collect();
    results.into_iter().collect::<Result<Vec<()>>>()?;
    batch.insert_channel(wealth_name, v);
    batch.insert_channel(exposure_name, e);
    Ok(())
}

/// Derives the fraction-of-wealth control alpha = e / (sigma V) from an
/// exposure channel. Where |V| <= 1e-8 the fraction is ill-defined and the
/// entry is NaN. Adds the channel "alpha".
pub fn derive_alpha<R: Real>(
    spec: &ScenarioSpec<R>,
    batch: &mut PathBatch<R>,
    wealth_name: &str,
    exposure_name: &str,
) -> Result<()> {
    let l = batch.row_len();
    let grid = batch.grid;
    let v = batch.channel(wealth_name)?;
    let e = batch.channel(exposure_name)?;
    let floor = R::of(1e-8);
    let mut a = vec![R::nan(); batch.n_paths * l];
    for p in 0..batch.n_paths {
        for i in 0..l {
            let vv = v[p * l + i];
            if vv.abs() > floor {
                let sg = spec.sigma.eval(grid.time(i), batch.w(p, i));
                a[p * l + i] = e[p * l + i] / (sg * vv);
            }
        }
    }
    batch.insert_channel(CH_ALPHA, a);
    Ok(())
}

/// Writes the named channels as CSV with header `path,step,t,<names...>`.
/// Values print in shortest round-trip form.
pub fn write_csv<R: Real>(
    batch: &PathBatch<R>,
    names: &[&str],
    out: &mut dyn io::Write,
) -> Result<()> {
    let mut cols = Vec::with_capacity(names.len());
    for name in names {
        cols.push(batch.channel(name)?);
    }
    let mut buf = io::BufWriter::new(out);
    use io::Write;
    write!(buf, "path,step,t")?;
    for name in names {
        write!(buf, ",{name}")?;
    }
    writeln!(buf)?;
    let l = batch.row_len();
    for p in 0..batch.n_paths {
        for i in 0..l {
            write!(buf, "{p},{i},{}", batch.grid.time(i))?;
            for col in &cols {
                write!(buf, ",{}", col[p * l + i])?;
            }
            writeln!(buf)?;
        }
    }
    buf.flush()?;
    Ok(())
}
