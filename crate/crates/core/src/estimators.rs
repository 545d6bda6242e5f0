//! Monte Carlo estimators: plain and measure-changed means, a nested
//! conditional estimator that restarts the dynamics under the risk-neutral
//! measure from a stored state, and a cross-sectional regression
//! alternative.
//!
//! All sums run through fixed-order pairwise accumulation so results are
//! bit-identical across runs regardless of thread count.

use crate::error::{Error, Result};
use crate::paths::{PathBatch, CH_GAMMA_INV, CH_X};
use crate::real::Real;
use crate::rng::STREAM_INNER;
use crate::scenario::{ScenarioSpec, UtilitySpec};

/// A point estimate with its standard error.
#[derive(Clone, Copy, Debug)]
pub struct Estimate<R> {
    pub mean: R,
    pub se: R,
    pub n: usize,
    pub method: &'static str,
}

impl<R: Real> Estimate<R> {
    /// Half-width of the k-sigma band.
    pub fn band(&self, sigmas: f64) -> R {
        self.se * R::of(sigmas)
    }

    /// True when the target lies inside the k-sigma band.
    pub fn covers(&self, target: R, sigmas: f64) -> bool {
        (self.mean - target).abs() <= self.band(sigmas)
    }
}

/// Fixed-order pairwise sum. Deterministic for a given slice, and more
/// accurate than left-to-right accumulation on large batches.
pub fn pairwise_sum<R: Real>(xs: &[R]) -> R {
    if xs.len() <= 8 {
        let mut acc = R::zero();
        for &x in xs {
            acc += x;
        }
        return acc;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Sample mean with standard error. Needs at least two samples.
pub fn mc_mean<R: Real>(xs: &[R]) -> Result<Estimate<R>> {
    if xs.len() < 2 {
        return Err(Error::Estimator(format!(
            "mean needs at least 2 samples, got {}",
            xs.len()
        )));
    }
    let n = R::of(xs.len() as f64);
    let mean = pairwise_sum(xs) / n;
    let sq: Vec<R> = xs.iter().map(|&x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&sq) / (n - R::one());
    Ok(Estimate {
        mean,
        se: (var / n).sqrt(),
        n: xs.len(),
        method: "mc",
    })
}

/// Estimates an expectation under the risk-neutral measure from paths drawn
/// under the physical measure, weighting by the density Z = exp(logZ).
pub fn q_expectation<R: Real>(values: &[R], log_z: &[R]) -> Result<Estimate<R>> {
    if values.len() != log_z.len() {
        return Err(Error::Estimator("value and density lengths differ".into()));
    }
    let zy: Vec<R> = values
        .iter()
        .zip(log_z)
        .map(|(&v, &lz)| v * lz.exp())
        .collect();
    let mut e = mc_mean(&zy)?;
    e.method = "mc_q";
    Ok(e)
}

/// Self-normalized estimate of E_Q[Y] = E_P[Z Y] / E_P[Z]: the ratio
/// estimator divides by the empirical density mean, so expectations that
/// factorize (deterministic integrands) are recovered exactly. Standard
/// error by the delta method.
pub fn q_ratio<R: Real>(values: &[R], log_z: &[R]) -> Result<Estimate<R>> {
    if values.len() != log_z.len() || values.len() < 2 {
        return Err(Error::Estimator(
            "ratio estimator needs matching inputs with at least 2 samples".into(),
        ));
    }
    let z: Vec<R> = log_z.iter().map(|&lz| lz.exp()).collect();
    let zsum = pairwise_sum(&z);
    if !(zsum > R::zero()) {
        return Err(Error::Estimator("density weights must have positive sum".into()));
    }
    let zy: Vec<R> = values.iter().zip(&z).map(|(&v, &w)| v * w).collect();
    let mean = pairwise_sum(&zy) / zsum;
    let dev: Vec<R> = values
        .iter()
        .zip(&z)
        .map(|(&v, &w)| {
            let d = w * (v - mean);
            d * d
        })
        .collect();
    let se = pairwise_sum(&dev).sqrt() / zsum;
    Ok(Estimate {
        mean,
        se,
        n: values.len(),
        method: "mc_q_ratio",
    })
}

/// Streaming form of [`q_ratio`] for several integrands observed at every
/// grid index: each chunk's moments are kept around the chunk's own ratio
/// mean and recentred when the chunks merge, so batches too large to hold in
/// memory can be consumed slice by slice. A single chunk reproduces
/// [`q_ratio`] bit for bit.
pub(crate) struct QRatioChunks<R> {
    n_stats: usize,
    n_pts: usize,
    n: usize,
    chunks: Vec<ChunkMoments<R>>,
}

struct ChunkMoments<R> {
    /// Per grid index: (sum of Z, sum of Z^2, paths).
    z: Vec<(R, R, usize)>,
    /// Per statistic and grid index: (sum of Z v, chunk ratio mean rm,
    /// sum of Z^2 (v - rm), sum of (Z (v - rm))^2).
    v: Vec<Vec<(R, R, R, R)>>,
}

impl<R: Real> QRatioChunks<R> {
    pub fn new(n_stats: usize, n_pts: usize) -> Self {
        QRatioChunks { n_stats, n_pts, n: 0, chunks: Vec::new() }
    }

    pub fn begin_chunk(&mut self) {
        self.chunks.push(ChunkMoments {
            z: vec![(R::zero(), R::zero(), 0); self.n_pts],
            v: vec![vec![(R::zero(), R::zero(), R::zero(), R::zero()); self.n_pts]; self.n_stats],
        });
    }

    /// Adds one grid index of the current chunk: `z` holds the density
    /// weights exp(logZ) per path and `integrands[s]` the matching values.
    pub fn add_slice(&mut self, i: usize, z: &[R], integrands: &[&[R]]) -> Result<()> {
        if integrands.len() != self.n_stats || integrands.iter().any(|v| v.len() != z.len()) {
            return Err(Error::Estimator("ratio accumulator inputs have mismatched lengths".into()));
        }
        let chunk = self
            .chunks
            .last_mut()
            .ok_or_else(|| Error::Estimator("ratio accumulator has no open chunk".into()))?;
        let zsum = pairwise_sum(z);
        if !(zsum > R::zero()) {
            return Err(Error::Estimator("density weights must have positive sum".into()));
        }
        let z2: Vec<R> = z.iter().map(|&w| w * w).collect();
        chunk.z[i] = (zsum, pairwise_sum(&z2), z.len());
        if i == 0 {
            self.n += z.len();
        }
        for (s, vals) in integrands.iter().enumerate() {
            let zy: Vec<R> = vals.iter().zip(z).map(|(&v, &w)| v * w).collect();
            let szv = pairwise_sum(&zy);
            let rm = szv / zsum;
            let q1: Vec<R> = vals.iter().zip(z).map(|(&v, &w)| w * w * (v - rm)).collect();
            let q2: Vec<R> = vals
                .iter()
                .zip(z)
                .map(|(&v, &w)| {
                    let d = w * (v - rm);
                    d * d
                })
                .collect();
            chunk.v[s][i] = (szv, rm, pairwise_sum(&q1), pairwise_sum(&q2));
        }
        Ok(())
    }

    /// Merged estimates, indexed as `[statistic][grid index]`.
    pub fn finish(self) -> Result<Vec<Vec<Estimate<R>>>> {
        if self.n < 2 {
            return Err(Error::Estimator(
                "ratio estimator needs matching inputs with at least 2 samples".into(),
            ));
        }
        let mut out = vec![Vec::with_capacity(self.n_pts); self.n_stats];
        for i in 0..self.n_pts {
            let mut zsum = R::zero();
            for c in &self.chunks {
                zsum += c.z[i].0;
            }
            if !(zsum > R::zero()) {
                return Err(Error::Estimator("density weights must have positive sum".into()));
            }
            for s in 0..self.n_stats {
                let mut szv = R::zero();
                for c in &self.chunks {
                    szv += c.v[s][i].0;
                }
                let gm = szv / zsum;
                // Each chunk contributes sum of Z^2 (v - gm)^2, expanded
                // around its own mean; the regrouped form is a square, so
                // negative rounding residue is clamped away.
                let mut dev = R::zero();
                for c in &self.chunks {
                    let (_, rm, q1, q2) = c.v[s][i];
                    let a = rm - gm;
                    dev += (q2 + R::of(2.0) * a * q1 + a * a * c.z[i].1).max(R::zero());
                }
                out[s].push(Estimate {
                    mean: gm,
                    se: dev.sqrt() / zsum,
                    n: self.n,
                    method: "mc_q_ratio",
                });
            }
        }
        Ok(out)
    }
}

/// State of one inner path while restarting the dynamics under Q.
#[derive(Clone, Copy, Debug)]
pub struct InnerState<R> {
    pub t: R,
    pub w: R,
    pub log_z: R,
    /// ln(1/gamma); meaningful only when the estimator tracks risk aversion.
    pub log_gamma_inv: R,
    /// ln(Z/X) for multiplicative-noise scenarios; NaN when untracked.
    pub log_phi: R,
}

/// Which state components the conditional target reads.
#[derive(Clone, Copy, Debug, Default)]
pub struct InnerNeeds {
    pub gamma: bool,
    pub noise: bool,
}

/// Nested estimator of E_Q[f(state_t) | F_s] for one outer path.
///
/// Restarts from the stored state (W_s, logZ_s, and when needed 1/gamma_s
/// and X_s) and advances `m_inner` fresh inner paths from s to t with
/// increments drawn under Q from a child stream of the batch's key, so inner
/// noise is independent of the outer paths and deterministic per outer path.
pub fn conditional_q_expectation<R: Real>(
    spec: &ScenarioSpec<R>,
    batch: &PathBatch<R>,
    outer_path: usize,
    s_index: usize,
    t_index: usize,
    m_inner: usize,
    needs: InnerNeeds,
    target: impl Fn(&InnerState<R>) -> R,
) -> Result<Estimate<R>> {
    if s_index >= t_index || t_index > batch.grid().n_steps() {
        return Err(Error::Estimator(format!(
            "conditional window needs s < t on the grid, got indices ({s_index}, {t_index})"
        )));
    }
    if m_inner < 2 {
        return Err(Error::Estimator("inner sample size must be at least 2".into()));
    }

    let grid = *batch.grid();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let half = R::of(0.5);

    let w0 = batch.w(outer_path, s_index);
    let log_z0 = batch.log_z(outer_path, s_index);
    let log_gi0 = if needs.gamma {
        let gi = batch.channel(CH_GAMMA_INV).map_err(|_| {
            Error::StateInsufficient(
                "conditional target reads risk aversion but the batch has no gamma_inv channel"
                    .into(),
            )
        })?;
        gi[outer_path * batch.row_len() + s_index].ln()
    } else {
        R::zero()
    };
    let (track_phi, beta_x) = match (&spec.utility, needs.noise) {
        (UtilitySpec::MultNoise { beta_x, .. }, true) => (true, Some(beta_x.clone())),
        (_, true) => {
            return Err(Error::StateInsufficient(
                "conditional target reads the noise ratio but the scenario has no noise process"
                    .into(),
            ))
        }
        _ => (false, None),
    };
    let log_phi0 = if track_phi {
        let x = batch.channel(CH_X).map_err(|_| {
            Error::StateInsufficient(
                "conditional target reads the noise ratio but the batch has no X channel".into(),
            )
        })?;
        log_z0 - x[outer_path * batch.row_len() + s_index].ln()
    } else {
        R::nan()
    };

    let inner = batch
        .noise_key()
        .child(STREAM_INNER)
        .child(outer_path as u64);
    let mut values = Vec::with_capacity(m_inner);
    for m in 0..m_inner {
        let mut w = w0;
        let mut log_z = log_z0;
        let mut log_gi = log_gi0;
        let mut log_phi = log_phi0;
        for i in s_index..t_index {
            let t = grid.time(i);
            let theta = spec.theta(t, w);
            let dwq = inner.normal_scaled(m as u64, i as u64, sqrt_dt);
            log_z += half * theta * theta * dt + theta * dwq;
            if needs.gamma {
                let eta = spec.eta.eval(t, w);
                let beta = spec.beta.eval(t, w);
                log_gi += (eta - half * beta * beta) * dt + beta * dwq;
            }
            if track_phi {
                let tb = theta - beta_x.as_ref().unwrap().eval(t, w);
                log_phi += half * tb * tb * dt + tb * dwq;
            }
            w += dwq + theta * dt;
        }
        let state = InnerState {
            t: grid.time(t_index),
            w,
            log_z,
            log_gamma_inv: log_gi,
            log_phi,
        };
        let v = target(&state);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                channel: "inner_target",
                path: outer_path,
                step: t_index,
            });
        }
        values.push(v);
    }
    let mut e = mc_mean(&values)?;
    e.method = "nested_q";
    Ok(e)
}

/// Result of a cross-sectional regression: fitted conditional means and
/// their standard errors, one per sample.
#[derive(Clone, Debug)]
pub struct RegressionFit<R> {
    pub fitted: Vec<R>,
    pub se: Vec<R>,
    pub method: &'static str,
}

/// Feature columns for the regression estimator at a grid index: intercept,
/// powers of logZ_s (or of ln(Z/X) for noise scenarios) and, when present,
/// powers of ln(1/gamma_s).
pub fn regression_features<R: Real>(
    spec: &ScenarioSpec<R>,
    batch: &PathBatch<R>,
    s_index: usize,
) -> Result<Vec<Vec<R>>> {
    let n = batch.n_paths();
    let z: Vec<R> = if matches!(spec.utility, UtilitySpec::MultNoise { .. }) {
        let x = batch.slice_at(CH_X, s_index)?;
        batch
            .slice_at(crate::paths::CH_LOG_Z, s_index)?
            .iter()
            .zip(&x)
            .map(|(&lz, &xv)| lz - xv.ln())
            .collect()
    } else {
        batch.slice_at(crate::paths::CH_LOG_Z, s_index)?
    };
    let mut cols = vec![vec![R::one(); n], z.clone()];
    cols.push(z.iter().map(|&v| v * v).collect());
    cols.push(z.iter().map(|&v| v * v * v).collect());
    if batch.has_channel(CH_GAMMA_INV) {
        let g: Vec<R> = batch
            .slice_at(CH_GAMMA_INV, s_index)?
            .iter()
            .map(|&v| v.ln())
            .collect();
        cols.push(g.clone());
        cols.push(g.iter().map(|&v| v * v).collect());
        cols.push(g.iter().map(|&v| v * v * v).collect());
    }
    Ok(cols)
}

/// Weighted least squares of y on the given columns. Near-constant
/// non-intercept columns are dropped; genuine collinearity among the
/// survivors is a rank-deficiency error. Returns fitted values with
/// hat-matrix standard errors.
pub fn weighted_regression<R: Real>(
    cols: &[Vec<R>],
    weights: &[R],
    y: &[R],
) -> Result<RegressionFit<R>> {
    let n = y.len();
    if n < 4 {
        return Err(Error::Estimator("regression needs at least 4 samples".into()));
    }
    if cols.is_empty() || cols.iter().any(|c| c.len() != n) || weights.len() != n {
        return Err(Error::Estimator("regression inputs have mismatched lengths".into()));
    }
    // Normalize weights to sum to n.
    let wsum = pairwise_sum(weights);
    if !(wsum > R::zero()) {
        return Err(Error::Estimator("regression weights must have positive sum".into()));
    }
    let scale_w = R::of(n as f64) / wsum;
    let w: Vec<R> = weights.iter().map(|&v| v * scale_w).collect();

    // Standardize columns and drop the ones with no variation (other than
    // the intercept, which is assumed to be column 0).
    let mut kept: Vec<usize> = Vec::new();
    let mut xcols: Vec<Vec<R>> = Vec::new();
    for (j, c) in cols.iter().enumerate() {
        if j == 0 {
            kept.push(0);
            xcols.push(vec![R::one(); n]);
            continue;
        }
        let mean = pairwise_sum(c) / R::of(n as f64);
        let dev: Vec<R> = c.iter().map(|&v| (v - mean) * (v - mean)).collect();
        let sd = (pairwise_sum(&dev) / R::of((n - 1) as f64)).sqrt();
        if sd.f64() < 1e-12 * (1.0 + mean.abs().f64()) {
            continue;
        }
        kept.push(j);
        xcols.push(c.iter().map(|&v| (v - mean) / sd).collect());
    }
    let k = xcols.len();
    if n <= k + 1 {
        return Err(Error::Estimator("regression needs more samples than features".into()));
    }

    // Normal equations A b = c with A = X' W X, c = X' W y.
    let mut a = vec![R::zero(); k * k];
    let mut rhs = vec![R::zero(); k];
    for p in 0..k {
        for q in p..k {
            let prod: Vec<R> = (0..n).map(|i| xcols[p][i] * xcols[q][i] * w[i]).collect();
            let v = pairwise_sum(&prod);
            a[p * k + q] = v;
            a[q * k + p] = v;
        }
        let prod: Vec<R> = (0..n).map(|i| xcols[p][i] * y[i] * w[i]).collect();
        rhs[p] = pairwise_sum(&prod);
    }

    let inv = invert_symmetric(&a, k).ok_or_else(|| {
        Error::RankDeficient(format!(
            "regression features are collinear (columns kept: {kept:?})"
        ))
    })?;
    let beta: Vec<R> = (0..k)
        .map(|p| {
            let terms: Vec<R> = (0..k).map(|q| inv[p * k + q] * rhs[q]).collect();
            pairwise_sum(&terms)
        })
        .collect();

    let fitted: Vec<R> = (0..n)
        .map(|i| {
            let terms: Vec<R> = (0..k).map(|p| beta[p] * xcols[p][i]).collect();
            pairwise_sum(&terms)
        })
        .collect();
    let resid_sq: Vec<R> = (0..n)
        .map(|i| {
            let r = y[i] - fitted[i];
            r * r * w[i]
        })
        .collect();
    let sigma2 = pairwise_sum(&resid_sq) / R::of((n - k) as f64);
    let se: Vec<R> = (0..n)
        .map(|i| {
            let mut h = R::zero();
            for p in 0..k {
                for q in 0..k {
                    h += xcols[p][i] * inv[p * k + q] * xcols[q][i];
                }
            }
            (sigma2 * h).max(R::zero()).sqrt()
        })
        .collect();
    Ok(RegressionFit {
        fitted,
        se,
        method: "regression_q",
    })
}

/// Inverse of a small symmetric positive definite matrix by Gaussian
/// elimination with partial pivoting. None when numerically singular.
fn invert_symmetric<R: Real>(a: &[R], k: usize) -> Option<Vec<R>> {
    let mut m = vec![R::zero(); k * 2 * k];
    for i in 0..k {
        for j in 0..k {
            m[i * 2 * k + j] = a[i * k + j];
        }
        m[i * 2 * k + k + i] = R::one();
    }
    for col in 0..k {
        let mut piv = col;
        for row in col + 1..k {
            if m[row * 2 * k + col].abs() > m[piv * 2 * k + col].abs() {
                piv = row;
            }
        }
        if m[piv * 2 * k + col].abs().f64() < 1e-10 {
            return None;
        }
        if piv != col {
            for j in 0..2 * k {
                m.swap(col * 2 * k + j, piv * 2 * k + j);
            }
        }
        let d = m[col * 2 * k + col];
        for j in 0..2 * k {
            m[col * 2 * k + j] /= d;
        }
        for row in 0..k {
            if row == col {
                continue;
            }
            let f = m[row * 2 * k + col];
            if f == R::zero() {
                continue;
            }
            for j in 0..2 * k {
                let v = m[col * 2 * k + j] * f;
                m[row * 2 * k + j] -= v;
            }
        }
    }
    let mut inv = vec![R::zero(); k * k];
    for i in 0..k {
        for j in 0..k {
            inv[i * k + j] = m[i * 2 * k + k + j];
        }
    }
    Some(inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::{simulate_market, simulate_risk_aversion, MarketOpts};
    use crate::rng::{NoiseKey, STREAM_MAIN};
    use crate::scenario::parse_scenario;

    fn spec_const() -> ScenarioSpec<f64> {
        parse_scenario(
            r#"{"market": {"mu": 0.05, "sigma": 0.2, "r": 0.01},
                "risk": {"gamma0": 2.0, "eta": 0.03, "beta": 0.1},
                "sim": {"T": 1.0, "steps_per_unit": 32, "n_paths": 256, "seed": 17}}"#,
        )
        .unwrap()
    }

    fn make_batch(spec: &ScenarioSpec<f64>) -> PathBatch<f64> {
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
    fn mean_frozen_examples() {
        let e = mc_mean(&[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(e.mean, 1.0);
        assert_eq!(e.se, 0.0);
        let e = mc_mean(&[0.0, 2.0]).unwrap();
        assert_eq!(e.mean, 1.0);
        assert_eq!(e.se, 1.0);
        assert!(mc_mean(&[1.0]).is_err());
    }

    #[test]
    fn pairwise_sum_is_exact_on_integers() {
        let xs: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 500_500.0);
        assert_eq!(pairwise_sum(&[] as &[f64]), 0.0);
    }

    #[test]
    fn q_expectation_of_one_is_density_mean() {
        let spec = spec_const();
        let b = make_batch(&spec);
        let n = b.grid().n_steps();
        let lz = b.slice_at("logZ", n).unwrap();
        let ones = vec![1.0; lz.len()];
        let q = q_expectation(&ones, &lz).unwrap();
        let z: Vec<f64> = lz.iter().map(|v| v.exp()).collect();
        let direct = mc_mean(&z).unwrap();
        assert_eq!(q.mean, direct.mean);
        assert!((q.mean - 1.0).abs() < 4.0 * q.se);
    }

    #[test]
    fn ratio_estimator_is_exact_on_deterministic_integrands() {
        let lz = [0.3, -0.1, 0.0, 0.7, -1.2];
        let vals = [7.0; 5];
        let e = q_ratio(&vals, &lz).unwrap();
        assert_eq!(e.mean, 7.0);
        assert_eq!(e.se, 0.0);

        // Agrees with the plain measure-changed mean up to normalization noise.
        let spec = spec_const();
        let b = make_batch(&spec);
        let n = b.grid().n_steps();
        let lz = b.slice_at("logZ", n).unwrap();
        let w = b.slice_at("W", n).unwrap();
        let plain = q_expectation(&w, &lz).unwrap();
        let ratio = q_ratio(&w, &lz).unwrap();
        assert!((plain.mean - ratio.mean).abs() < 3.0 * (plain.se + ratio.se));
    }

    #[test]
    fn chunked_ratio_matches_the_direct_estimator() {
        // Deterministic synthetic weights and two integrands on one index.
        let n = 1000usize;
        let lz: Vec<f64> = (0..n).map(|i| 0.4 * ((i * 37 + 11) % 97) as f64 / 97.0 - 0.2).collect();
        let v0 = lz.clone();
        let v1: Vec<f64> = lz.iter().map(|&x| 1.0 + x * x).collect();
        let z: Vec<f64> = lz.iter().map(|&x| x.exp()).collect();

        // One chunk reproduces q_ratio bit for bit.
        let mut acc = QRatioChunks::new(2, 1);
        acc.begin_chunk();
        acc.add_slice(0, &z, &[&v0, &v1]).unwrap();
        let got = acc.finish().unwrap();
        for (s, vals) in [&v0, &v1].iter().enumerate() {
            let direct = q_ratio(vals, &lz).unwrap();
            assert_eq!(got[s][0].mean, direct.mean);
            assert_eq!(got[s][0].se, direct.se);
        }

        // Uneven chunks agree up to summation reordering.
        let mut acc = QRatioChunks::new(2, 1);
        for range in [0..300, 300..301, 301..n] {
            acc.begin_chunk();
            acc.add_slice(0, &z[range.clone()], &[&v0[range.clone()], &v1[range.clone()]])
                .unwrap();
        }
        let got = acc.finish().unwrap();
        for (s, vals) in [&v0, &v1].iter().enumerate() {
            let direct = q_ratio(vals, &lz).unwrap();
            assert!((got[s][0].mean - direct.mean).abs() < 1e-13);
            assert!((got[s][0].se - direct.se).abs() < 1e-13 * (1.0 + direct.se));
        }
    }

    #[test]
    fn nested_estimator_matches_constant_coefficient_targets() {
        let spec = spec_const();
        let b = make_batch(&spec);
        let theta: f64 = -(0.05 - 0.01) / 0.2;
        let (s, t) = (16usize, 32usize);
        let tau = 0.5;
        for p in [0usize, 7, 100] {
            // E_Q[W_t | F_s] = W_s + theta (t - s).
            let e = conditional_q_expectation(
                &spec, &b, p, s, t, 4000,
                InnerNeeds::default(),
                |st| st.w,
            )
            .unwrap();
            let target = b.w(p, s) + theta * tau;
            assert!(
                (e.mean - target).abs() < 4.0 * e.se,
                "W: {} vs {target} +- {}",
                e.mean,
                e.se
            );

            // E_Q[logZ_t | F_s] = logZ_s + theta^2 (t - s) / 2.
            let e = conditional_q_expectation(
                &spec, &b, p, s, t, 4000,
                InnerNeeds::default(),
                |st| st.log_z,
            )
            .unwrap();
            let target = b.log_z(p, s) + 0.5 * theta * theta * tau;
            assert!((e.mean - target).abs() < 4.0 * e.se);

            // E_Q[1/gamma_t | F_s] = (1/gamma_s) exp(eta (t - s)).
            let e = conditional_q_expectation(
                &spec, &b, p, s, t, 4000,
                InnerNeeds { gamma: true, noise: false },
                |st| st.log_gamma_inv.exp(),
            )
            .unwrap();
            let target = b.value("gamma_inv", p, s).unwrap() * (0.03f64 * tau).exp();
            assert!((e.mean - target).abs() < 4.0 * e.se);
        }
    }

    #[test]
    fn nested_estimator_rejects_missing_state() {
        let spec = spec_const();
        let b = simulate_market(
            &spec,
            8,
            NoiseKey::new(1, STREAM_MAIN),
            MarketOpts::default(),
        )
        .unwrap();
        let err = conditional_q_expectation(
            &spec, &b, 0, 0, 8, 16,
            InnerNeeds { gamma: true, noise: false },
            |st| st.log_gamma_inv,
        )
        .unwrap_err();
        assert!(matches!(err, Error::StateInsufficient(_)));
        let err = conditional_q_expectation(
            &spec, &b, 0, 0, 8, 16,
            InnerNeeds { gamma: false, noise: true },
            |st| st.log_phi,
        )
        .unwrap_err();
        assert!(matches!(err, Error::StateInsufficient(_)));
    }

    #[test]
    fn inner_noise_shrinks_with_sample_size() {
        let spec = spec_const();
        let b = make_batch(&spec);
        let run = |m: usize| {
            conditional_q_expectation(
                &spec, &b, 3, 8, 32, m,
                InnerNeeds::default(),
                |st| st.w * st.w,
            )
            .unwrap()
        };
        let coarse = run(1000);
        let fine = run(4000);
        assert!(
            fine.se < coarse.se * 0.5 * 1.2,
            "se {} at 4x samples vs {}",
            fine.se,
            coarse.se
        );
    }

    #[test]
    fn regression_recovers_polynomial_signal() {
        // State-dependent beta: with constant coefficients the risk-aversion
        // features would be exact polynomials in logZ and the basis would be
        // collinear by construction.
        let spec = parse_scenario::<f64>(
            r#"{"market": {"mu": 0.05, "sigma": 0.2, "r": 0.01},
                "risk": {"gamma0": 2.0, "eta": 0.03,
                         "beta": {"expr": "0.1 + 0.05*tanh(w)", "bound": 0.16}},
                "sim": {"T": 1.0, "steps_per_unit": 32, "n_paths": 256, "seed": 17}}"#,
        )
        .unwrap();
        let b = make_batch(&spec);
        let s = 16usize;
        let cols = regression_features(&spec, &b, s).unwrap();
        let z = &cols[1];
        // Deterministic function of the feature: fit must be near-exact.
        let y: Vec<f64> = z.iter().map(|&v| 1.0 + 2.0 * v - 0.5 * v * v).collect();
        let w = vec![1.0; y.len()];
        let fit = weighted_regression(&cols, &w, &y).unwrap();
        for i in 0..y.len() {
            assert!(
                (fit.fitted[i] - y[i]).abs() < 1e-8,
                "fit {} vs {}",
                fit.fitted[i],
                y[i]
            );
        }
    }

    #[test]
    fn regression_flags_collinearity_and_drops_constants() {
        let n = 64usize;
        let x: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let dup = x.clone();
        let cols = vec![vec![1.0; n], x.clone(), dup];
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v).collect();
        let w = vec![1.0; n];
        assert!(matches!(
            weighted_regression(&cols, &w, &y),
            Err(Error::RankDeficient(_))
        ));

        // A constant non-intercept column is dropped, not fatal.
        let cols = vec![vec![1.0; n], vec![7.0; n], x.clone()];
        let fit = weighted_regression(&cols, &w, &y).unwrap();
        for i in 0..n {
            assert!((fit.fitted[i] - y[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn regression_weights_change_the_fit() {
        let n = 128usize;
        let x: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / n as f64).collect();
        let cols = vec![vec![1.0; n], x.clone()];
        // Piecewise target: weights that mask the right half must fit the left.
        let y: Vec<f64> = x.iter().map(|&v| if v < 0.0 { v } else { 10.0 }).collect();
        let w: Vec<f64> = x.iter().map(|&v| if v < 0.0 { 1.0 } else { 1e-9 }).collect();
        let fit = weighted_regression(&cols, &w, &y).unwrap();
        for i in 0..n / 2 {
            assert!((fit.fitted[i] - y[i]).abs() < 1e-3);
        }
    }
}
