//! Exact static optimizer on a finite probability space, used as an
//! independent oracle for the continuous-time closed forms.
//!
//! The problem: maximize sum_i p_i u_i(xi_i) over allocations xi subject to
//! the linear budget sum_i q_i xi_i = x0, where p is the physical
//! distribution and q the pricing distribution. Two deliberately different
//! solvers are provided: a Lagrangian dual root-finder (bisection on the
//! log multiplier) and a derivative-free refining grid search. They share
//! no code beyond the objective, so agreement is evidence, not tautology.

use crate::error::{Error, Result};
use crate::real::Real;

/// A finite market: physical probabilities p and pricing probabilities q.
#[derive(Clone, Debug)]
pub struct FiniteMarket<R> {
    p: Vec<R>,
    q: Vec<R>,
}

impl<R: Real> FiniteMarket<R> {
    pub fn new(p: Vec<R>, q: Vec<R>) -> Result<Self> {
        if p.len() != q.len() || p.len() < 2 {
            return Err(Error::domain(
                "market needs matching p and q with at least 2 states",
            ));
        }
        for (name, v) in [("p", &p), ("q", &q)] {
            if v.iter().any(|&x| !(x > R::zero()) || !x.is_finite()) {
                return Err(Error::domain(format!("{name} must be strictly positive")));
            }
            let sum: f64 = v.iter().map(|&x| x.f64()).sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::domain(format!("{name} sums to {sum}, not 1")));
            }
        }
        Ok(FiniteMarket { p, q })
    }

    pub fn n_states(&self) -> usize {
        self.p.len()
    }

    pub fn p(&self) -> &[R] {
        &self.p
    }

    pub fn q(&self) -> &[R] {
        &self.q
    }

    /// Pricing density Y_i = q_i / p_i.
    pub fn density(&self) -> Vec<R> {
        self.p
            .iter()
            .zip(&self.q)
            .map(|(&p, &q)| q / p)
            .collect()
    }
}

/// Utility specification for the static problem.
#[derive(Clone, Debug)]
pub enum OracleUtility<R> {
    Exp { gamma: R },
    /// Exponential with a state-dependent risk aversion gamma_i.
    ExpStateDep { gammas: Vec<R> },
    Power { gamma: R },
}

impl<R: Real> OracleUtility<R> {
    fn validate(&self, n: usize) -> Result<()> {
        match self {
            OracleUtility::Exp { gamma } => {
                if !(*gamma > R::zero()) {
                    return Err(Error::domain("gamma must be positive"));
                }
            }
            OracleUtility::ExpStateDep { gammas } => {
                if gammas.len() != n {
                    return Err(Error::domain("one gamma per state required"));
                }
                if gammas.iter().any(|&g| !(g > R::zero())) {
                    return Err(Error::domain("gammas must be positive"));
                }
            }
            OracleUtility::Power { gamma } => {
                if !(*gamma > R::zero() && *gamma < R::one()) {
                    return Err(Error::domain("power gamma must lie in (0,1)"));
                }
            }
        }
        Ok(())
    }

    fn value(&self, state: usize, x: R) -> R {
        match self {
            OracleUtility::Exp { gamma } => -(-(*gamma * x)).exp() / *gamma,
            OracleUtility::ExpStateDep { gammas } => {
                let g = gammas[state];
                -(-(g * x)).exp() / g
            }
            OracleUtility::Power { gamma } => {
                if x <= R::zero() {
                    return R::neg_infinity();
                }
                x.powf(*gamma) / *gamma
            }
        }
    }

    /// Inverse marginal utility: the x with u_i'(x) = y.
    fn inverse_marginal(&self, state: usize, y: R) -> R {
        match self {
            OracleUtility::Exp { gamma } => -y.ln() / *gamma,
            OracleUtility::ExpStateDep { gammas } => -y.ln() / gammas[state],
            OracleUtility::Power { gamma } => y.powf(R::one() / (*gamma - R::one())),
        }
    }
}

/// Expected utility of an allocation; -inf outside the utility's domain.
pub fn objective<R: Real>(
    market: &FiniteMarket<R>,
    utility: &OracleUtility<R>,
    xi: &[R],
) -> R {
    let mut acc = R::zero();
    for (i, (&p, &x)) in market.p.iter().zip(xi).enumerate() {
        let u = utility.value(i, x);
        if u == R::neg_infinity() {
            return R::neg_infinity();
        }
        acc += p * u;
    }
    acc
}

fn budget_value<R: Real>(market: &FiniteMarket<R>, xi: &[R]) -> R {
    market
        .q
        .iter()
        .zip(xi)
        .map(|(&q, &x)| q * x)
        .fold(R::zero(), |a, b| a + b)
}

/// Solves the budget-constrained problem through its Lagrangian dual:
/// xi_i = (u_i')^{-1}(lambda Y_i), with the multiplier found by bisection
/// on ln(lambda) until the budget residual is at machine scale.
pub fn solve_lagrangian<R: Real>(
    market: &FiniteMarket<R>,
    utility: &OracleUtility<R>,
    x0: R,
) -> Result<Vec<R>> {
    utility.validate(market.n_states())?;
    if matches!(utility, OracleUtility::Power { .. }) && !(x0 > R::zero()) {
        return Err(Error::domain("power utility needs positive budget"));
    }
    let y = market.density();
    let alloc = |log_lambda: f64| -> Vec<R> {
        let lam = R::of(log_lambda.exp());
        y.iter()
            .enumerate()
            .map(|(i, &yi)| utility.inverse_marginal(i, lam * yi))
            .collect()
    };
    let residual = |log_lambda: f64| -> f64 {
        (budget_value(market, &alloc(log_lambda)) - x0).f64()
    };

    // The budget is strictly decreasing in lambda. Expand a bracket, then
    // bisect.
    let (mut lo, mut hi) = (-1.0f64, 1.0f64);
    let mut r_lo = residual(lo);
    let mut r_hi = residual(hi);
    let mut grow = 2.0f64;
    while r_lo < 0.0 && lo > -600.0 {
        lo -= grow;
        grow *= 2.0;
        r_lo = residual(lo);
    }
    grow = 2.0;
    while r_hi > 0.0 && hi < 600.0 {
        hi += grow;
        grow *= 2.0;
        r_hi = residual(hi);
    }
    if !(r_lo >= 0.0 && r_hi <= 0.0) {
        return Err(Error::Assertion(format!(
            "dual root not bracketed: residuals ({r_lo}, {r_hi}) at log-multiplier ({lo}, {hi})"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if residual(mid) >= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-16 * (1.0 + lo.abs()) {
            break;
        }
    }
    Ok(alloc(0.5 * (lo + hi)))
}

/// Shape of the refining grid search.
#[derive(Clone, Copy, Debug)]
pub struct GridSpec {
    /// Odd number of candidate points per coordinate scan.
    pub points_per_dim: usize,
    /// Number of shrink rounds.
    pub rounds: usize,
    /// Initial half-width of each coordinate scan.
    pub span: f64,
    /// Factor applied to the span between rounds.
    pub shrink: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            points_per_dim: 33,
            rounds: 9,
            span: 8.0,
            shrink: 0.2,
        }
    }
}

/// Derivative-free solver: cyclic coordinate ascent over the first n-1
/// allocations with the last one eliminated through the budget, scanning a
/// shrinking grid per coordinate. Walks outward when an optimum sits on the
/// scan edge, so the reachable region is unbounded.
pub fn brute_force<R: Real>(
    market: &FiniteMarket<R>,
    utility: &OracleUtility<R>,
    x0: R,
    grid: &GridSpec,
) -> Result<Vec<R>> {
    utility.validate(market.n_states())?;
    if grid.points_per_dim < 5 || grid.rounds == 0 || !(grid.span > 0.0) {
        return Err(Error::domain("grid needs >= 5 points, >= 1 round, positive span"));
    }
    let n = market.n_states();
    let qn = market.q[n - 1];

    // Start from the flat allocation, which always satisfies the budget.
    let mut xi = vec![x0; n];
    let complete = |xi: &mut Vec<R>| {
        let partial: R = market.q[..n - 1]
            .iter()
            .zip(xi.iter())
            .map(|(&q, &x)| q * x)
            .fold(R::zero(), |a, b| a + b);
        xi[n - 1] = (x0 - partial) / qn;
    };
    complete(&mut xi);
    let mut best = objective(market, utility, &xi);
    if best == R::neg_infinity() {
        // Positive-domain utilities: the flat allocation x0 > 0 is interior,
        // so this can only happen for a non-positive budget.
        return Err(Error::domain("starting allocation outside the utility domain"));
    }

    let mut span = grid.span;
    for _ in 0..grid.rounds {
        // Sweep coordinates until a full pass stops improving.
        for _sweep in 0..12 {
            let mut improved = false;
            for c in 0..n - 1 {
                // Scan around the current value; walk while the edge wins.
                for _walk in 0..64 {
                    let center = xi[c];
                    let mut best_local = best;
                    let mut best_x = center;
                    let mut best_idx = None;
                    let g = grid.points_per_dim;
                    for j in 0..g {
                        let frac = 2.0 * j as f64 / (g - 1) as f64 - 1.0;
                        let cand = center + R::of(span * frac);
                        xi[c] = cand;
                        complete(&mut xi);
                        let v = objective(market, utility, &xi);
                        if v > best_local {
                            best_local = v;
                            best_x = cand;
                            best_idx = Some(j);
                        }
                    }
                    xi[c] = best_x;
                    complete(&mut xi);
                    if best_local > best {
                        best = best_local;
                        improved = true;
                    }
                    match best_idx {
                        Some(j) if j == 0 || j == g - 1 => continue,
                        _ => break,
                    }
                }
            }
            if !improved {
                break;
            }
        }
        span *= grid.shrink;
    }
    Ok(xi)
}

/// Closed form for common exponential utility:
/// xi_i = x0 + (E_Q[ln Y] - ln Y_i) / gamma.
pub fn closed_form_exponential<R: Real>(
    market: &FiniteMarket<R>,
    gamma: R,
    x0: R,
) -> Result<Vec<R>> {
    OracleUtility::Exp { gamma }.validate(market.n_states())?;
    let y = market.density();
    let mean_ln_y: R = market
        .q
        .iter()
        .zip(&y)
        .map(|(&q, &yi)| q * yi.ln())
        .fold(R::zero(), |a, b| a + b);
    Ok(y.iter()
        .map(|&yi| x0 + (mean_ln_y - yi.ln()) / gamma)
        .collect())
}

/// Closed form for state-dependent exponential utility:
/// xi_i = (1/gamma_i)(c (x0 + m) - ln Y_i) with c = 1/sum_j q_j/gamma_j and
/// m = sum_j q_j ln(Y_j)/gamma_j.
pub fn closed_form_state_dep<R: Real>(
    market: &FiniteMarket<R>,
    gammas: &[R],
    x0: R,
) -> Result<Vec<R>> {
    OracleUtility::ExpStateDep {
        gammas: gammas.to_vec(),
    }
    .validate(market.n_states())?;
    let y = market.density();
    let inv_c: R = market
        .q
        .iter()
        .zip(gammas)
        .map(|(&q, &g)| q / g)
        .fold(R::zero(), |a, b| a + b);
    let c = R::one() / inv_c;
    let m: R = market
        .q
        .iter()
        .zip(&y)
        .zip(gammas)
        .map(|((&q, &yi), &g)| q * yi.ln() / g)
        .fold(R::zero(), |a, b| a + b);
    Ok(y.iter()
        .zip(gammas)
        .map(|(&yi, &g)| (c * (x0 + m) - yi.ln()) / g)
        .collect())
}

/// Closed form for power utility:
/// xi_i = x0 Y_i^b / E_Q[Y^b] with b = 1/(gamma - 1).
pub fn closed_form_power<R: Real>(market: &FiniteMarket<R>, gamma: R, x0: R) -> Result<Vec<R>> {
    OracleUtility::Power { gamma }.validate(market.n_states())?;
    if !(x0 > R::zero()) {
        return Err(Error::domain("power utility needs positive budget"));
    }
    let b = R::one() / (gamma - R::one());
    let y = market.density();
    let norm: R = market
        .q
        .iter()
        .zip(&y)
        .map(|(&q, &yi)| q * yi.powf(b))
        .fold(R::zero(), |a, b| a + b);
    Ok(y.iter().map(|&yi| x0 * yi.powf(b) / norm).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state() -> FiniteMarket<f64> {
        FiniteMarket::new(vec![0.5, 0.5], vec![0.75, 0.25]).unwrap()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn market_validation() {
        assert!(FiniteMarket::new(vec![0.5, 0.5], vec![0.5]).is_err());
        assert!(FiniteMarket::new(vec![1.0], vec![1.0]).is_err());
        assert!(FiniteMarket::new(vec![0.5, 0.5], vec![0.6, 0.5]).is_err());
        assert!(FiniteMarket::new(vec![-0.5, 1.5], vec![0.5, 0.5]).is_err());
        let m = two_state();
        assert_eq!(m.density(), vec![1.5, 0.5]);
    }

    #[test]
    fn frozen_two_state_exponential() {
        // gamma = 1, x0 = 0: E_Q[ln Y] = 0.75 ln 1.5 + 0.25 ln 0.5 = 0.130812...
        let m = two_state();
        let xi = closed_form_exponential(&m, 1.0, 0.0).unwrap();
        assert!((xi[0] - (-0.274653)).abs() < 1e-6, "{}", xi[0]);
        assert!((xi[1] - 0.823959).abs() < 1e-6, "{}", xi[1]);
        let solver = solve_lagrangian(&m, &OracleUtility::Exp { gamma: 1.0 }, 0.0).unwrap();
        assert!(max_abs_diff(&xi, &solver) < 1e-10);
    }

    #[test]
    fn frozen_two_state_power() {
        // gamma = 0.5 -> b = -2: Y^b = (4/9, 4), E_Q[Y^b] = 4/3, xi = (1/3, 3).
        let m = two_state();
        let xi = closed_form_power(&m, 0.5, 1.0).unwrap();
        assert!((xi[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((xi[1] - 3.0).abs() < 1e-12);
        let solver = solve_lagrangian(&m, &OracleUtility::Power { gamma: 0.5 }, 1.0).unwrap();
        assert!(max_abs_diff(&xi, &solver) < 1e-10);
    }

    #[test]
    fn state_dependent_gamma_matches_dual_solver() {
        let m = FiniteMarket::new(vec![0.3, 0.45, 0.25], vec![0.5, 0.3, 0.2]).unwrap();
        let gammas = vec![1.0, 2.5, 0.7];
        let closed = closed_form_state_dep(&m, &gammas, 0.4).unwrap();
        let solver = solve_lagrangian(
            &m,
            &OracleUtility::ExpStateDep { gammas: gammas.clone() },
            0.4,
        )
        .unwrap();
        assert!(max_abs_diff(&closed, &solver) < 1e-10);
        // Budget holds exactly.
        let budget: f64 = m.q().iter().zip(&closed).map(|(q, x)| q * x).sum();
        assert!((budget - 0.4).abs() < 1e-12);
    }

    #[test]
    fn grid_search_agrees_with_dual_solver() {
        let m = FiniteMarket::new(vec![0.2, 0.3, 0.5], vec![0.4, 0.35, 0.25]).unwrap();
        let grid = GridSpec::default();
        for (utility, x0) in [
            (OracleUtility::Exp { gamma: 1.3 }, -0.5),
            (OracleUtility::Exp { gamma: 0.6 }, 1.5),
            (OracleUtility::Power { gamma: 0.4 }, 1.0),
            (
                OracleUtility::ExpStateDep {
                    gammas: vec![0.8, 1.6, 2.4],
                },
                0.7,
            ),
        ] {
            let dual = solve_lagrangian(&m, &utility, x0).unwrap();
            let brute = brute_force(&m, &utility, x0, &grid).unwrap();
            let d = max_abs_diff(&dual, &brute);
            assert!(d < 1e-4, "disagreement {d} for {utility:?}");
            // The dual solution is the optimum; the grid cannot beat it by
            // more than numerical slack.
            let gap = objective(&m, &utility, &brute) - objective(&m, &utility, &dual);
            assert!(gap < 1e-9, "grid beat the dual solver by {gap}");
        }
    }

    #[test]
    fn optimum_is_a_strict_local_max_along_the_budget() {
        let m = two_state();
        let utility = OracleUtility::Exp { gamma: 1.0 };
        let xi = solve_lagrangian(&m, &utility, 0.0).unwrap();
        let base = objective(&m, &utility, &xi);
        for delta in [1e-3, -1e-3] {
            // Budget-preserving direction: (q2, -q1).
            let perturbed = vec![xi[0] + delta * m.q()[1], xi[1] - delta * m.q()[0]];
            assert!(objective(&m, &utility, &perturbed) < base);
        }
    }

    #[test]
    fn exponential_budget_shift_moves_allocations_uniformly() {
        let m = two_state();
        let a = closed_form_exponential(&m, 2.0, 0.0).unwrap();
        let b = closed_form_exponential(&m, 2.0, 1.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((y - x - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn power_rejects_nonpositive_budget() {
        let m = two_state();
        assert!(closed_form_power(&m, 0.5, 0.0).is_err());
        assert!(solve_lagrangian(&m, &OracleUtility::Power { gamma: 0.5 }, -1.0).is_err());
    }

    fn normalized(ws: Vec<f64>) -> Vec<f64> {
        let s: f64 = ws.iter().sum();
        ws.iter().map(|w| w / s).collect()
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        #[test]
        fn dual_solver_matches_exponential_closed_form(
            pw in proptest::collection::vec(0.05f64..1.0, 2..6),
            qw in proptest::collection::vec(0.05f64..1.0, 2..6),
            gamma in 0.2f64..3.0,
            x0 in -1.0f64..2.0,
        ) {
            let n = pw.len().min(qw.len());
            let m = FiniteMarket::new(normalized(pw[..n].to_vec()), normalized(qw[..n].to_vec())).unwrap();
            let solved = solve_lagrangian(&m, &OracleUtility::Exp { gamma }, x0).unwrap();
            let closed = closed_form_exponential(&m, gamma, x0).unwrap();
            for (a, b) in solved.iter().zip(&closed) {
                proptest::prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
            }
            let budget = budget_value(&m, &solved);
            proptest::prop_assert!((budget - x0).abs() <= 1e-10 * (1.0 + x0.abs()));
        }

        #[test]
        fn dual_solver_matches_power_closed_form(
            pw in proptest::collection::vec(0.05f64..1.0, 2..6),
            qw in proptest::collection::vec(0.05f64..1.0, 2..6),
            gamma in 0.05f64..0.95,
            x0 in 0.1f64..3.0,
        ) {
            let n = pw.len().min(qw.len());
            let m = FiniteMarket::new(normalized(pw[..n].to_vec()), normalized(qw[..n].to_vec())).unwrap();
            let solved = solve_lagrangian(&m, &OracleUtility::Power { gamma }, x0).unwrap();
            let closed = closed_form_power(&m, gamma, x0).unwrap();
            for (a, b) in solved.iter().zip(&closed) {
                proptest::prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn state_dependent_solution_is_budget_feasible_and_undominated(
            pw in proptest::collection::vec(0.05f64..1.0, 3..5),
            qw in proptest::collection::vec(0.05f64..1.0, 3..5),
            gw in proptest::collection::vec(0.3f64..3.0, 3..5),
            x0 in -0.5f64..1.5,
        ) {
            let n = pw.len().min(qw.len()).min(gw.len());
            let m = FiniteMarket::new(normalized(pw[..n].to_vec()), normalized(qw[..n].to_vec())).unwrap();
            let u = OracleUtility::ExpStateDep { gammas: gw[..n].to_vec() };
            let xi = solve_lagrangian(&m, &u, x0).unwrap();
            let budget = budget_value(&m, &xi);
            proptest::prop_assert!((budget - x0).abs() <= 1e-10 * (1.0 + x0.abs()));
            let base = objective(&m, &u, &xi);
            // Budget-preserving pairwise perturbations never improve.
            for i in 0..n - 1 {
                for delta in [1e-4, -1e-4] {
                    let mut bent = xi.clone();
                    bent[i] += delta * m.q()[i + 1];
                    bent[i + 1] -= delta * m.q()[i];
                    proptest::prop_assert!(objective(&m, &u, &bent) <= base + 1e-12);
                }
            }
        }
    }
}
