//! EM fitting of the discretized DNP and SNP priors.
//!
//! Both fitters work on the grid-discretized marginal likelihood
//! `sum_i log sum_j phi(y_i | tau_j, sigma_i) w_j`. The likelihood kernel is
//! evaluated once per fit, stored scaled by each row's maximum (the
//! log-sum-exp shift), and reused across iterations. Rows whose scaled sum
//! falls into the subnormal range are recomputed in log space.
//!
//! The SNP M-step is a generalized M-step: the nonparametric weights, the
//! spike rate `lambda0` and the spike weight `omega` are updated in turn, and
//! each update is only accepted when it does not decrease the expected
//! complete-data log-likelihood. That makes the marginal log-likelihood
//! nondecreasing across iterations.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{
    check_simplex, log_normal_density, mix_weights, spike_weights, Dataset, DnpPrior, Grid, MixturePrior,
    SnpPrior,
};
use crate::roots::brent;

pub const OMEGA_MIN: f64 = 1e-6;
pub const OMEGA_MAX: f64 = 1.0 - 1e-6;
pub const LAMBDA0_MIN: f64 = 1e-3;
pub const LAMBDA0_MAX: f64 = 1e4;

/// Rows whose scaled likelihood sum drops below this use the log-space path.
const SCALED_SUM_FLOOR: f64 = 1e-280;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Relative change of the marginal log-likelihood that stops the loop.
    pub rel_tol: f64,
    pub lambda0_init: f64,
    pub omega_init: f64,
    pub root_tol: f64,
    pub root_max_iter: usize,
    /// Hold `omega` at this value instead of estimating it.
    #[serde(default)]
    pub fixed_omega: Option<f64>,
    /// Hold `lambda0` at this value instead of estimating it.
    #[serde(default)]
    pub fixed_lambda0: Option<f64>,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iter: 1000,
            rel_tol: 1e-8,
            lambda0_init: 5.0,
            omega_init: 0.5,
            root_tol: 1e-10,
            root_max_iter: 200,
            fixed_omega: None,
            fixed_lambda0: None,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter < 1 {
            return Err(invalid("max_iter must be at least 1"));
        }
        if !(self.rel_tol > 0.0) {
            return Err(invalid("rel_tol must be positive"));
        }
        if !(self.omega_init > 0.0 && self.omega_init < 1.0) {
            return Err(invalid("omega_init must lie strictly inside (0, 1)"));
        }
        if !(self.lambda0_init > 0.0 && self.lambda0_init.is_finite()) {
            return Err(invalid("lambda0_init must be positive"));
        }
        if !(self.root_tol > 0.0) || self.root_max_iter == 0 {
            return Err(invalid("root solver tolerances must be positive"));
        }
        if let Some(w) = self.fixed_omega {
            if !(0.0..1.0).contains(&w) {
                return Err(invalid("fixed_omega must lie in [0, 1)"));
            }
        }
        if let Some(l) = self.fixed_lambda0 {
            if !(l > 0.0 && l.is_finite()) {
                return Err(invalid("fixed_lambda0 must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EmTrace {
    /// Marginal log-likelihood at the start of each iteration, plus the
    /// final parameters.
    pub loglik_per_iter: Vec<f64>,
    pub iterations_run: usize,
    pub converged: bool,
    /// M-steps where the closed-form weight update was replaced by the exact
    /// constrained maximizer.
    pub exact_weight_steps: usize,
    /// M-steps where a spike parameter ended on its clamp.
    pub boundary_steps: usize,
}

impl EmTrace {
    pub fn final_loglik(&self) -> f64 {
        *self.loglik_per_iter.last().unwrap_or(&f64::NEG_INFINITY)
    }
}

/// Row-stochastic `n x M` matrix of atom memberships.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    n: usize,
    m: usize,
    values: Vec<f64>,
}

impl Responsibilities {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if n == 0 || m == 0 {
            return Err(invalid("responsibilities need at least one row and column"));
        }
        let mut values = Vec::with_capacity(n * m);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != m {
                return Err(invalid(format!("row {i} has the wrong length")));
            }
            check_simplex(&row, "responsibility row")?;
            values.extend(row);
        }
        Ok(Responsibilities { n, m, values })
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn n_atoms(&self) -> usize {
        self.m
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.m..(i + 1) * self.m]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.m)
    }

    /// Expected number of observations per atom.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut col = vec![0.0; self.m];
        for row in self.rows() {
            for (c, r) in col.iter_mut().zip(row) {
                *c += r;
            }
        }
        col
    }
}

pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[inline]
fn ln_or_neg_inf(x: f64) -> f64 {
    if x > 0.0 {
        x.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Normalized row of `phi(y | tau_j, sigma) w_j` and its log normalizer,
/// computed in log space.
pub(crate) fn log_space_row(grid: &Grid, y: f64, sigma: f64, weights: &[f64]) -> (Vec<f64>, f64) {
    let logs: Vec<f64> = grid
        .points()
        .iter()
        .zip(weights)
        .map(|(&t, &w)| log_normal_density(y, t, sigma) + ln_or_neg_inf(w))
        .collect();
    let lse = log_sum_exp(logs.iter().copied());
    if lse == f64::NEG_INFINITY {
        return (logs, lse);
    }
    (logs.into_iter().map(|l| (l - lse).exp()).collect(), lse)
}

/// `sum_i log sum_j phi(y_i | tau_j, sigma_i) w_j` for any grid prior.
pub fn marginal_loglik<P: MixturePrior + ?Sized>(prior: &P, data: &Dataset) -> Result<f64> {
    let grid = prior.grid();
    let weights = prior.atom_weights();
    let mut total = 0.0;
    for (i, (y, s)) in data.iter().enumerate() {
        let lse = log_sum_exp(
            grid.points()
                .iter()
                .zip(weights.iter())
                .map(|(&t, &w)| log_normal_density(y, t, s) + ln_or_neg_inf(w)),
        );
        if lse == f64::NEG_INFINITY {
            return Err(Error::NumericalUnderflow { index: i });
        }
        total += lse;
    }
    Ok(total)
}

fn e_step(weights: &[f64], grid: &Grid, data: &Dataset) -> Result<Responsibilities> {
    if data.is_empty() {
        return Err(invalid("E-step needs at least one observation"));
    }
    let m = grid.len();
    let mut values = Vec::with_capacity(data.len() * m);
    for (i, (y, s)) in data.iter().enumerate() {
        let (row, lse) = log_space_row(grid, y, s, weights);
        if lse == f64::NEG_INFINITY {
            return Err(Error::NumericalUnderflow { index: i });
        }
        values.extend(row);
    }
    Ok(Responsibilities { n: data.len(), m, values })
}

/// E-step for the Dirac prior: row-normalized `phi(y_i | tau_j, sigma_i) pi_j`.
pub fn dnp_e_step(pi: &[f64], grid: &Grid, data: &Dataset) -> Result<Responsibilities> {
    if pi.len() != grid.len() {
        return Err(invalid("weight vector length differs from grid size"));
    }
    check_simplex(pi, "DNP weights")?;
    e_step(pi, grid, data)
}

/// M-step for the Dirac prior: column means of the responsibilities.
pub fn dnp_m_step(resp: &Responsibilities) -> Vec<f64> {
    let n = resp.n_rows() as f64;
    resp.column_sums().into_iter().map(|c| c / n).collect()
}

/// E-step for the spike prior, with the spike renormalized on the grid.
pub fn snp_e_step(prior: &SnpPrior, data: &Dataset) -> Result<Responsibilities> {
    e_step(&prior.theta(), prior.grid(), data)
}

/// Closed-form update of the nonparametric weights given `omega` and
/// `lambda0`: `max(0, c_j / ((1 - omega) sum c) - omega / (1 - omega) * spike_j)`,
/// renormalized to sum to one.
pub fn snp_m_step_pi(col_resp: &[f64], omega: f64, lambda0: f64, grid: &Grid) -> Result<Vec<f64>> {
    if col_resp.len() != grid.len() {
        return Err(invalid("column mass length differs from grid size"));
    }
    if col_resp.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
        return Err(invalid("column mass must be nonnegative"));
    }
    if !(0.0..1.0).contains(&omega) {
        return Err(invalid(format!("omega must lie in [0, 1), got {omega}")));
    }
    if !(lambda0 > 0.0) {
        return Err(invalid(format!("lambda0 must be positive, got {lambda0}")));
    }
    let spike = spike_weights(grid, lambda0);
    closed_form_weights(col_resp, omega, &spike)
}

fn closed_form_weights(col: &[f64], omega: f64, spike: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = col.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateUpdate("column mass is zero".into()));
    }
    let scale = (1.0 - omega) * total;
    let ratio = omega / (1.0 - omega);
    let mut pi: Vec<f64> = col.iter().zip(spike).map(|(c, s)| (c / scale - ratio * s).max(0.0)).collect();
    let sum: f64 = pi.iter().sum();
    if !(sum > 0.0) {
        return Err(Error::DegenerateUpdate("spike term exceeds every atom's share of the mass".into()));
    }
    for p in &mut pi {
        *p /= sum;
    }
    Ok(pi)
}

/// Exact maximizer of `sum_j c_j log(omega s_j + (1 - omega) pi_j)` over the
/// simplex (water-filling on the Lagrange multiplier).
pub fn snp_weights_exact(col: &[f64], omega: f64, spike: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = col.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateUpdate("column mass is zero".into()));
    }
    let b = 1.0 - omega;
    // pi_j = max(0, c_j / nu - a_j / b), a_j = omega * s_j; active atoms are
    // those with the largest c_j b / a_j.
    let mut order: Vec<usize> = (0..col.len()).filter(|&j| col[j] > 0.0).collect();
    let key = |j: usize| {
        let a = omega * spike[j];
        if a > 0.0 {
            col[j] * b / a
        } else {
            f64::INFINITY
        }
    };
    order.sort_by(|&x, &y| key(y).total_cmp(&key(x)));
    let mut sum_c = 0.0;
    let mut sum_a = 0.0;
    let mut nu = f64::NAN;
    for (k, &j) in order.iter().enumerate() {
        sum_c += col[j];
        sum_a += omega * spike[j] / b;
        let candidate = sum_c / (1.0 + sum_a);
        let next_key = order.get(k + 1).map_or(0.0, |&nj| key(nj));
        if next_key <= candidate {
            nu = candidate;
            break;
        }
    }
    let mut pi: Vec<f64> = col.iter().zip(spike).map(|(c, s)| (c / nu - omega * s / b).max(0.0)).collect();
    let sum: f64 = pi.iter().sum();
    for p in &mut pi {
        *p /= sum;
    }
    Ok(pi)
}

/// Expected complete-data log-likelihood (up to the kernel term) of atom
/// weights `theta` under column mass `col`.
pub fn expected_loglik(col: &[f64], theta: &[f64]) -> f64 {
    col.iter().zip(theta).filter(|(c, _)| **c > 0.0).map(|(c, t)| c * ln_or_neg_inf(*t)).sum()
}

/// Log of the renormalized spike on the grid.
fn log_spike(grid: &Grid, lambda0: f64) -> Vec<f64> {
    let raw: Vec<f64> = grid.points().iter().map(|t| -lambda0 * t.abs()).collect();
    let lse = log_sum_exp(raw.iter().copied());
    raw.into_iter().map(|r| r - lse).collect()
}

fn expected_loglik_spike(col: &[f64], gamma: &[f64], grid: &Grid, omega: f64, lambda0: f64) -> f64 {
    let ls = log_spike(grid, lambda0);
    let lw = ln_or_neg_inf(omega);
    let l1w = ln_or_neg_inf(1.0 - omega);
    col.iter()
        .zip(gamma)
        .zip(&ls)
        .filter(|((c, _), _)| **c > 0.0)
        .map(|((c, g), s)| {
            let a = lw + s;
            let b = l1w + ln_or_neg_inf(*g);
            let hi = a.max(b);
            let lt = if hi == f64::NEG_INFINITY { hi } else { hi + ((a - hi).exp() + (b - hi).exp()).ln() };
            c * lt
        })
        .sum()
}

/// Score in `omega`, divided by the total column mass:
/// `sum_j c_j (s_j - pi_j) / theta_j / sum c`.
pub fn omega_score(col: &[f64], gamma: &[f64], grid: &Grid, omega: f64, lambda0: f64) -> f64 {
    let spike = spike_weights(grid, lambda0);
    omega_score_with(col, gamma, &spike, omega)
}

fn omega_score_with(col: &[f64], gamma: &[f64], spike: &[f64], omega: f64) -> f64 {
    let total: f64 = col.iter().sum();
    let mut acc = 0.0;
    for ((&c, &g), &s) in col.iter().zip(gamma).zip(spike) {
        if c <= 0.0 {
            continue;
        }
        let ratio = if g == 0.0 { 1.0 / omega } else { (s - g) / (omega * s + (1.0 - omega) * g) };
        acc += c * ratio;
    }
    acc / total
}

/// Score in `lambda0` for the renormalized spike, divided by the total
/// column mass. With `m1 = sum_k s_k |tau_k|` the spike derivative is
/// `s_j (m1 - |tau_j|)`.
pub fn lambda0_score(col: &[f64], gamma: &[f64], grid: &Grid, omega: f64, lambda0: f64) -> f64 {
    let spike = spike_weights(grid, lambda0);
    let m1: f64 = spike.iter().zip(grid.points()).map(|(s, t)| s * t.abs()).sum();
    let total: f64 = col.iter().sum();
    let mut acc = 0.0;
    for (((&c, &g), &s), &t) in col.iter().zip(gamma).zip(&spike).zip(grid.points()) {
        if c <= 0.0 {
            continue;
        }
        let d = m1 - t.abs();
        let term = if g == 0.0 { d } else { omega * s * d / (omega * s + (1.0 - omega) * g) };
        acc += c * term;
    }
    acc / total
}

/// Outcome of the spike-parameter M-step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpikeSolution {
    pub omega: f64,
    pub lambda0: f64,
    /// `omega` ended on a clamp because its score had no sign change.
    pub omega_at_bound: bool,
    /// `lambda0` ended on a clamp because its score had no sign change.
    pub lambda0_at_bound: bool,
    pub omega_residual: f64,
    pub lambda0_residual: f64,
}

fn solve_lambda0(
    col: &[f64],
    gamma: &[f64],
    grid: &Grid,
    omega: f64,
    current: f64,
    cfg: &EmConfig,
) -> (f64, bool) {
    let score = |l: f64| lambda0_score(col, gamma, grid, omega, l);
    let current = current.clamp(LAMBDA0_MIN, LAMBDA0_MAX);
    let s0 = score(current);
    if s0 == 0.0 {
        return (current, false);
    }
    // expand geometrically toward the ascent direction until the score flips
    let up = s0 > 0.0;
    let mut inner = current;
    let mut outer = current;
    let mut flipped = false;
    loop {
        let next = if up { (outer * 2.0).min(LAMBDA0_MAX) } else { (outer / 2.0).max(LAMBDA0_MIN) };
        if next == outer {
            break;
        }
        inner = outer;
        outer = next;
        let s = score(outer);
        if (s > 0.0) != up || s == 0.0 {
            flipped = true;
            break;
        }
    }
    let (candidate, at_bound) = if flipped {
        let (a, b) = if up { (inner, outer) } else { (outer, inner) };
        match brent(score, a, b, cfg.root_tol, cfg.root_max_iter) {
            Some(r) => (r.x, false),
            None => (outer, true),
        }
    } else {
        (outer, true)
    };
    let q_new = expected_loglik_spike(col, gamma, grid, omega, candidate);
    let q_old = expected_loglik_spike(col, gamma, grid, omega, current);
    if q_new >= q_old {
        (candidate, at_bound)
    } else {
        (current, false)
    }
}

fn solve_omega(
    col: &[f64],
    gamma: &[f64],
    grid: &Grid,
    lambda0: f64,
    current: f64,
    cfg: &EmConfig,
) -> (f64, bool) {
    let spike = spike_weights(grid, lambda0);
    let score = |w: f64| omega_score_with(col, gamma, &spike, w);
    let (candidate, at_bound) = if score(OMEGA_MIN) <= 0.0 {
        (OMEGA_MIN, true)
    } else if score(OMEGA_MAX) >= 0.0 {
        (OMEGA_MAX, true)
    } else {
        match brent(score, OMEGA_MIN, OMEGA_MAX, cfg.root_tol, cfg.root_max_iter) {
            Some(r) => (r.x, false),
            None => (current, false),
        }
    };
    let current = current.clamp(OMEGA_MIN, OMEGA_MAX);
    let q_new = expected_loglik_spike(col, gamma, grid, candidate, lambda0);
    let q_old = expected_loglik_spike(col, gamma, grid, current, lambda0);
    if q_new >= q_old {
        (candidate, at_bound)
    } else {
        (current, false)
    }
}

/// Joint Newton iteration on both scores from an interior start, with a
/// finite-difference Jacobian and step halving on the residual norm. Returns
/// the polished point only if it does not lower the expected log-likelihood
/// beyond rounding.
fn newton_polish(
    col: &[f64],
    gamma: &[f64],
    grid: &Grid,
    start: (f64, f64),
    cfg: &EmConfig,
) -> Option<(f64, f64)> {
    let res = |w: f64, l: f64| (omega_score(col, gamma, grid, w, l), lambda0_score(col, gamma, grid, w, l));
    let inside = |w: f64, l: f64| w > OMEGA_MIN && w < OMEGA_MAX && l > LAMBDA0_MIN && l < LAMBDA0_MAX;
    let (mut w, mut l) = start;
    let mut r = res(w, l);
    let norm = |r: (f64, f64)| r.0.abs().max(r.1.abs());
    for _ in 0..cfg.root_max_iter.min(50) {
        if norm(r) < cfg.root_tol {
            break;
        }
        let hw = 1e-6 * w.min(1.0 - w);
        let hl = 1e-6 * l;
        let (a1, b1) = res(w + hw, l);
        let (a0, b0) = res(w - hw, l);
        let (c1, d1) = res(w, l + hl);
        let (c0, d0) = res(w, l - hl);
        let (j11, j21) = ((a1 - a0) / (2.0 * hw), (b1 - b0) / (2.0 * hw));
        let (j12, j22) = ((c1 - c0) / (2.0 * hl), (d1 - d0) / (2.0 * hl));
        let det = j11 * j22 - j12 * j21;
        if !(det.is_finite() && det != 0.0) {
            return None;
        }
        let dw = (j22 * r.0 - j12 * r.1) / det;
        let dl = (j11 * r.1 - j21 * r.0) / det;
        let mut t = 1.0;
        loop {
            let (nw, nl) = (w - t * dw, l - t * dl);
            if inside(nw, nl) {
                let nr = res(nw, nl);
                if norm(nr) < norm(r) {
                    w = nw;
                    l = nl;
                    r = nr;
                    break;
                }
            }
            t *= 0.5;
            if t < 1e-8 {
                return None;
            }
        }
    }
    let q_new = expected_loglik_spike(col, gamma, grid, w, l);
    let q_old = expected_loglik_spike(col, gamma, grid, start.0, start.1);
    // both sides carry rounding from an M-term sum
    (q_new >= q_old - 16.0 * f64::EPSILON * q_old.abs()).then_some((w, l))
}

/// Solves the two spike score equations by alternating bracketed 1-D
/// solves: `lambda0` given `omega`, then `omega` given `lambda0`. Runs up to
/// `passes` alternations and stops early once both residuals are below
/// `cfg.root_tol`. Parameters whose score has no sign change inside the
/// clamps are returned on the clamp with the matching flag set.
pub fn solve_omega_lambda0(
    col_resp: &[f64],
    gamma_pi: &[f64],
    grid: &Grid,
    start: (f64, f64),
    cfg: &EmConfig,
    passes: usize,
) -> Result<SpikeSolution> {
    if col_resp.len() != grid.len() || gamma_pi.len() != grid.len() {
        return Err(invalid("vector lengths differ from grid size"));
    }
    if !(col_resp.iter().sum::<f64>() > 0.0) {
        return Err(invalid("column mass is zero"));
    }
    check_simplex(gamma_pi, "nonparametric weights")?;
    let (mut omega, mut lambda0) = start;
    let mut sol = SpikeSolution {
        omega,
        lambda0,
        omega_at_bound: false,
        lambda0_at_bound: false,
        omega_residual: f64::NAN,
        lambda0_residual: f64::NAN,
    };
    for _ in 0..passes.max(1) {
        let (l, lb) = match cfg.fixed_lambda0 {
            Some(l) => (l, false),
            None => solve_lambda0(col_resp, gamma_pi, grid, omega, lambda0, cfg),
        };
        lambda0 = l;
        let (w, wb) = match cfg.fixed_omega {
            Some(w) => (w, false),
            None => solve_omega(col_resp, gamma_pi, grid, lambda0, omega, cfg),
        };
        omega = w;
        sol = SpikeSolution {
            omega,
            lambda0,
            omega_at_bound: wb,
            lambda0_at_bound: lb,
            omega_residual: omega_score(col_resp, gamma_pi, grid, omega, lambda0),
            lambda0_residual: lambda0_score(col_resp, gamma_pi, grid, omega, lambda0),
        };
        let w_done = wb || cfg.fixed_omega.is_some() || sol.omega_residual.abs() < cfg.root_tol;
        let l_done = lb || cfg.fixed_lambda0.is_some() || sol.lambda0_residual.abs() < cfg.root_tol;
        if w_done && l_done {
            return Ok(sol);
        }
    }
    let free = cfg.fixed_omega.is_none() && cfg.fixed_lambda0.is_none();
    if free && !sol.omega_at_bound && !sol.lambda0_at_bound {
        if let Some((w, l)) = newton_polish(col_resp, gamma_pi, grid, (omega, lambda0), cfg) {
            sol.omega = w;
            sol.lambda0 = l;
            sol.omega_residual = omega_score(col_resp, gamma_pi, grid, w, l);
            sol.lambda0_residual = lambda0_score(col_resp, gamma_pi, grid, w, l);
        }
    }
    Ok(sol)
}

/// Kernel `phi(y_i | tau_j, sigma_i)` scaled by each row's maximum.
pub(crate) struct Kernel<'a> {
    grid: &'a Grid,
    data: &'a Dataset,
    scaled: Vec<f64>,
    row_shift: Vec<f64>,
}

impl<'a> Kernel<'a> {
    pub(crate) fn new(grid: &'a Grid, data: &'a Dataset) -> Self {
        let m = grid.len();
        let mut scaled = Vec::with_capacity(data.len() * m);
        let mut row_shift = Vec::with_capacity(data.len());
        for (y, s) in data.iter() {
            let start = scaled.len();
            scaled.extend(grid.points().iter().map(|&t| log_normal_density(y, t, s)));
            let row = &mut scaled[start..];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for v in row.iter_mut() {
                *v = (*v - max).exp();
            }
            row_shift.push(max);
        }
        Kernel { grid, data, scaled, row_shift }
    }

    /// Marginal log-likelihood at `weights`; accumulates the column sums of
    /// the responsibilities into `col`.
    pub(crate) fn accumulate(&self, weights: &[f64], col: &mut [f64]) -> Result<f64> {
        let m = self.grid.len();
        col.iter_mut().for_each(|c| *c = 0.0);
        let mut inv_sum = vec![0.0; m];
        let mut loglik = 0.0;
        for (i, row) in self.scaled.chunks_exact(m).enumerate() {
            let s: f64 = row.iter().zip(weights).map(|(k, w)| k * w).sum();
            if s >= SCALED_SUM_FLOOR {
                loglik += self.row_shift[i] + s.ln();
                let r = 1.0 / s;
                for (acc, k) in inv_sum.iter_mut().zip(row) {
                    *acc += k * r;
                }
            } else {
                let (y, sg) = (self.data.y()[i], self.data.sigma()[i]);
                let (resp, lse) = log_space_row(self.grid, y, sg, weights);
                if lse == f64::NEG_INFINITY {
                    return Err(Error::NumericalUnderflow { index: i });
                }
                loglik += lse;
                for (c, r) in col.iter_mut().zip(&resp) {
                    *c += r;
                }
            }
        }
        for ((c, g), w) in col.iter_mut().zip(&inv_sum).zip(weights) {
            *c += w * g;
        }
        Ok(loglik)
    }
}

fn check_inputs(data: &Dataset, cfg: &EmConfig) -> Result<()> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(invalid("cannot fit a prior to an empty dataset"));
    }
    Ok(())
}

fn converged(prev: f64, cur: f64, rel_tol: f64) -> bool {
    (cur - prev).abs() <= rel_tol * prev.abs().max(f64::MIN_POSITIVE)
}

/// Fits the Dirac prior from uniform weights.
pub fn fit_dnp(data: &Dataset, grid: &Grid, cfg: &EmConfig) -> Result<(DnpPrior, EmTrace)> {
    check_inputs(data, cfg)?;
    let m = grid.len();
    let n = data.len() as f64;
    let kernel = Kernel::new(grid, data);
    let mut pi = vec![1.0 / m as f64; m];
    let mut col = vec![0.0; m];
    let mut trace = EmTrace::default();
    loop {
        let ll = kernel.accumulate(&pi, &mut col)?;
        if let Some(&prev) = trace.loglik_per_iter.last() {
            if converged(prev, ll, cfg.rel_tol) {
                trace.converged = true;
            }
        }
        trace.loglik_per_iter.push(ll);
        if trace.converged || trace.iterations_run == cfg.max_iter {
            break;
        }
        for (p, c) in pi.iter_mut().zip(&col) {
            *p = c / n;
        }
        trace.iterations_run += 1;
    }
    // renormalize away accumulated rounding before handing out the prior
    let total: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|p| *p /= total);
    Ok((DnpPrior::new(grid.clone(), pi)?, trace))
}

/// Fits the spike-and-nonparametric prior from `(omega_init, lambda0_init,
/// uniform gamma)`.
pub fn fit_snp(data: &Dataset, grid: &Grid, cfg: &EmConfig) -> Result<(SnpPrior, EmTrace)> {
    check_inputs(data, cfg)?;
    let m = grid.len();
    let kernel = Kernel::new(grid, data);
    let mut omega = cfg.fixed_omega.unwrap_or(cfg.omega_init);
    let mut lambda0 = cfg.fixed_lambda0.unwrap_or(cfg.lambda0_init);
    let mut gamma = vec![1.0 / m as f64; m];
    let mut spike = spike_weights(grid, lambda0);
    let mut theta = mix_weights(omega, &spike, &gamma);
    let mut col = vec![0.0; m];
    let mut trace = EmTrace::default();
    loop {
        let ll = kernel.accumulate(&theta, &mut col)?;
        if let Some(&prev) = trace.loglik_per_iter.last() {
            if converged(prev, ll, cfg.rel_tol) {
                trace.converged = true;
            }
        }
        trace.loglik_per_iter.push(ll);
        if trace.converged || trace.iterations_run == cfg.max_iter {
            break;
        }

        let q_old = expected_loglik(&col, &theta);
        let mut next = match closed_form_weights(&col, omega, &spike) {
            Ok(pi) => pi,
            Err(Error::DegenerateUpdate(_)) => {
                // spike explains everything: keep gamma a valid density
                let total: f64 = col.iter().sum();
                omega = OMEGA_MAX;
                col.iter().map(|c| c / total).collect()
            }
            Err(e) => return Err(e),
        };
        if expected_loglik(&col, &mix_weights(omega, &spike, &next)) < q_old {
            next = snp_weights_exact(&col, omega, &spike)?;
            trace.exact_weight_steps += 1;
        }
        gamma = next;

        let needs_spike = cfg.fixed_omega.is_none() || cfg.fixed_lambda0.is_none();
        if needs_spike && !(omega == 0.0 && cfg.fixed_omega.is_some()) {
            let sol = solve_omega_lambda0(&col, &gamma, grid, (omega, lambda0), cfg, 1)?;
            omega = sol.omega;
            lambda0 = sol.lambda0;
            if sol.omega_at_bound || sol.lambda0_at_bound {
                trace.boundary_steps += 1;
            }
            spike = spike_weights(grid, lambda0);
        }
        theta = mix_weights(omega, &spike, &gamma);
        trace.iterations_run += 1;
    }
    let total: f64 = gamma.iter().sum();
    gamma.iter_mut().for_each(|g| *g /= total);
    Ok((SnpPrior::new(grid.clone(), omega, lambda0, gamma)?, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_grid, normal_density, Prior};
    use approx::assert_abs_diff_eq;

    fn grid(points: &[f64]) -> Grid {
        Grid::from_points(points.to_vec()).unwrap()
    }

    #[test]
    fn loglik_single_atom() {
        let g = grid(&[-1.0, 0.0, 1.0]);
        let prior = DnpPrior::new(g, vec![0.0, 1.0, 0.0]).unwrap();
        let data = Dataset::new(vec![0.0], vec![1.0]).unwrap();
        let ll = marginal_loglik(&prior, &data).unwrap();
        assert_abs_diff_eq!(ll, -0.918_938_5, epsilon = 1e-7);
        assert_eq!(marginal_loglik(&prior, &Dataset::empty()).unwrap(), 0.0);
    }

    #[test]
    fn loglik_uniform_three_atoms() {
        let g = grid(&[-1.0, 0.0, 1.0]);
        let prior = DnpPrior::uniform(g);
        let data = Dataset::new(vec![0.5], vec![1.0]).unwrap();
        let phi = |mu: f64| (-(0.5 - mu) * (0.5 - mu) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let direct = ((phi(-1.0) + phi(0.0) + phi(1.0)) / 3.0).ln();
        assert_abs_diff_eq!(marginal_loglik(&prior, &data).unwrap(), direct, epsilon = 1e-14);
    }

    #[test]
    fn loglik_underflow_reports_index() {
        let g = grid(&[0.0, 1.0]);
        let prior = DnpPrior::new(g, vec![1.0, 0.0]).unwrap();
        let data = Dataset::new(vec![0.0, 1e200], vec![1.0, 1e-100]).unwrap();
        match marginal_loglik(&prior, &data) {
            Err(Error::NumericalUnderflow { index }) => assert_eq!(index, 1),
            other => panic!("expected underflow, got {other:?}"),
        }
        assert!(matches!(
            dnp_e_step(&[1.0, 0.0], &grid(&[0.0, 1.0]), &data),
            Err(Error::NumericalUnderflow { index: 1 })
        ));
    }

    #[test]
    fn dnp_e_step_cases() {
        let g = grid(&[0.0, 2.0]);
        let data = Dataset::new(vec![1.0], vec![1.0]).unwrap();
        let r = dnp_e_step(&[0.5, 0.5], &g, &data).unwrap();
        assert_abs_diff_eq!(r.row(0)[0], 0.5, epsilon = 1e-15);
        let r = dnp_e_step(&[0.3, 0.7], &g, &data).unwrap();
        assert_abs_diff_eq!(r.row(0)[0], 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(r.row(0)[1], 0.7, epsilon = 1e-15);

        let g3 = grid(&[-1.0, 0.0, 1.0]);
        let data = Dataset::new(vec![-3.0, 0.2, 4.0], vec![1.0, 0.5, 2.0]).unwrap();
        let r = dnp_e_step(&[1.0, 0.0, 0.0], &g3, &data).unwrap();
        for row in r.rows() {
            assert_eq!(row, &[1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn dnp_m_step_cases() {
        let r = Responsibilities::from_rows(vec![vec![0.2, 0.8]]).unwrap();
        assert_eq!(dnp_m_step(&r), vec![0.2, 0.8]);
        let r = Responsibilities::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(dnp_m_step(&r), vec![0.5, 0.5]);
        let rows: Vec<Vec<f64>> = (0..7)
            .map(|i| {
                let a = (i as f64 + 1.0) / 10.0;
                vec![a, (1.0 - a) / 3.0, 2.0 * (1.0 - a) / 3.0]
            })
            .collect();
        let r = Responsibilities::from_rows(rows).unwrap();
        assert_abs_diff_eq!(dnp_m_step(&r).iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn snp_e_step_collapses() {
        let g = grid(&[-1.0, 0.0, 1.0, 2.0]);
        let data = Dataset::new(vec![0.4, 1.7, -0.9], vec![1.0, 0.6, 1.4]).unwrap();
        let gamma = vec![0.1, 0.2, 0.3, 0.4];
        let p0 = SnpPrior::new(g.clone(), 0.0, 3.0, gamma.clone()).unwrap();
        let a = snp_e_step(&p0, &data).unwrap();
        let b = dnp_e_step(&gamma, &g, &data).unwrap();
        for (x, y) in a.rows().zip(b.rows()) {
            for (u, v) in x.iter().zip(y) {
                assert_abs_diff_eq!(u, v, epsilon = 1e-15);
            }
        }
        let p1 = SnpPrior::new(g.clone(), 1.0, 3.0, gamma).unwrap();
        let spike = spike_weights(&g, 3.0);
        let r = snp_e_step(&p1, &data).unwrap();
        for (i, (y, s)) in data.iter().enumerate() {
            let w: Vec<f64> =
                g.points().iter().zip(&spike).map(|(&t, sp)| normal_density(y, t, s).unwrap() * sp).collect();
            let tot: f64 = w.iter().sum();
            for (j, v) in w.iter().enumerate() {
                assert_abs_diff_eq!(r.row(i)[j], v / tot, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn snp_e_step_two_atoms_by_hand() {
        let g = grid(&[0.0, 1.0]);
        let lambda0 = 2.0;
        // spike on {0, 1}: (1, e^-2) / (1 + e^-2)
        let e2 = (-2.0f64).exp();
        let spike = [1.0 / (1.0 + e2), e2 / (1.0 + e2)];
        let gamma = [0.25, 0.75];
        let theta = [0.5 * spike[0] + 0.5 * gamma[0], 0.5 * spike[1] + 0.5 * gamma[1]];
        let prior = SnpPrior::new(g, 0.5, lambda0, gamma.to_vec()).unwrap();
        let data = Dataset::new(vec![0.3], vec![0.8]).unwrap();
        let r = snp_e_step(&prior, &data).unwrap();
        let phi0 = (-(0.3f64).powi(2) / (2.0 * 0.64)).exp();
        let phi1 = (-(0.7f64).powi(2) / (2.0 * 0.64)).exp();
        let den = phi0 * theta[0] + phi1 * theta[1];
        assert_abs_diff_eq!(r.row(0)[0], phi0 * theta[0] / den, epsilon = 1e-12);
        assert_abs_diff_eq!(r.row(0)[1], phi1 * theta[1] / den, epsilon = 1e-12);
    }

    #[test]
    fn closed_form_pi_update() {
        let g = grid(&[-1.0, 0.0, 1.0]);
        let col = [1.0, 2.0, 1.0];
        let out = snp_m_step_pi(&col, 0.0, 4.0, &g).unwrap();
        assert_eq!(out, vec![0.25, 0.5, 0.25]);

        // omega = 0.5, lambda0 = 10: spike = (e^-10, 1, e^-10) / (1 + 2 e^-10)
        let e = (-10.0f64).exp();
        let s = [e / (1.0 + 2.0 * e), 1.0 / (1.0 + 2.0 * e), e / (1.0 + 2.0 * e)];
        // c_j / ((1 - w) sum c) - w / (1 - w) s_j = c_j / 2 - s_j
        let raw = [0.5 - s[0], (1.0f64 - s[1]).max(0.0), 0.5 - s[2]];
        let tot: f64 = raw.iter().sum();
        let out = snp_m_step_pi(&col, 0.5, 10.0, &g).unwrap();
        for j in 0..3 {
            assert_abs_diff_eq!(out[j], raw[j] / tot, epsilon = 1e-14);
        }
        assert_abs_diff_eq!(out.iter().sum::<f64>(), 1.0, epsilon = 1e-14);

        assert!(matches!(snp_m_step_pi(&[0.0, 0.0, 0.0], 0.5, 10.0, &g), Err(Error::DegenerateUpdate(_))));
        assert!(snp_m_step_pi(&col, 1.0, 10.0, &g).is_err());
    }

    #[test]
    fn exact_weights_dominate_closed_form() {
        let g = build_grid(&[-2.0, 0.0, 3.0], 21).unwrap();
        let spike = spike_weights(&g, 3.0);
        let col: Vec<f64> = (0..21).map(|j| 1.0 + ((j * 7) % 5) as f64).collect();
        for &w in &[0.1, 0.5, 0.9] {
            let exact = snp_weights_exact(&col, w, &spike).unwrap();
            let closed = closed_form_weights(&col, w, &spike).unwrap();
            assert_abs_diff_eq!(exact.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            let qe = expected_loglik(&col, &mix_weights(w, &spike, &exact));
            let qc = expected_loglik(&col, &mix_weights(w, &spike, &closed));
            assert!(qe >= qc - 1e-12);
            // KKT: active atoms share c_j / theta_j; inactive ones do not exceed it
            let theta = mix_weights(w, &spike, &exact);
            let nu: Vec<f64> = (0..21).filter(|&j| exact[j] > 0.0).map(|j| col[j] / theta[j]).collect();
            for v in &nu {
                assert_abs_diff_eq!(*v, nu[0], epsilon = 1e-9 * nu[0]);
            }
            for j in (0..21).filter(|&j| exact[j] == 0.0) {
                assert!(col[j] / theta[j] <= nu[0] * (1.0 + 1e-9));
            }
        }
    }

    #[test]
    fn spike_solver_boundaries() {
        let g = build_grid(&[-3.0, 0.0, 3.0], 31).unwrap();
        let cfg = EmConfig::default();
        let m = g.len();
        let uniform = vec![1.0 / m as f64; m];

        let mut col = vec![0.0; m];
        col[g.zero_index()] = 100.0;
        let sol = solve_omega_lambda0(&col, &uniform, &g, (0.5, 5.0), &cfg, 20).unwrap();
        assert_eq!(sol.omega, OMEGA_MAX);
        assert!(sol.omega_at_bound);

        // mass shaped like gamma itself, spike negligible
        let gamma: Vec<f64> = g.points().iter().map(|t| (-(t - 2.0f64).powi(2)).exp()).collect();
        let tot: f64 = gamma.iter().sum();
        let gamma: Vec<f64> = gamma.iter().map(|v| v / tot).collect();
        let col: Vec<f64> = gamma.iter().map(|v| v * 500.0).collect();
        let sol = solve_omega_lambda0(&col, &gamma, &g, (0.5, 5.0), &cfg, 20).unwrap();
        assert_eq!(sol.omega, OMEGA_MIN);
        assert!(sol.omega_at_bound);
    }

    #[test]
    fn spike_solver_interior_residuals() {
        let g = build_grid(&[-3.0, 0.0, 4.0], 41).unwrap();
        let cfg = EmConfig::default();
        let gamma: Vec<f64> = g.points().iter().map(|t| (-(t - 2.0f64).powi(2)).exp() + 1e-3).collect();
        let tot: f64 = gamma.iter().sum();
        let gamma: Vec<f64> = gamma.iter().map(|v| v / tot).collect();
        // column mass from a mixture with omega = 0.6 and a spike at lambda0 = 2.5
        let spike = spike_weights(&g, 2.5);
        let col: Vec<f64> = mix_weights(0.6, &spike, &gamma).iter().map(|v| v * 1000.0).collect();
        let sol = solve_omega_lambda0(&col, &gamma, &g, (0.5, 5.0), &cfg, 20).unwrap();
        assert!(!sol.omega_at_bound && !sol.lambda0_at_bound);
        // evaluate the stationarity equations directly
        let s = spike_weights(&g, sol.lambda0);
        let theta = mix_weights(sol.omega, &s, &gamma);
        let m1: f64 = s.iter().zip(g.points()).map(|(a, t)| a * t.abs()).sum();
        let total: f64 = col.iter().sum();
        let mut eq_w = 0.0;
        let mut eq_l = 0.0;
        for j in 0..g.len() {
            eq_w += col[j] * (s[j] - gamma[j]) / theta[j];
            eq_l += col[j] * sol.omega * s[j] * (m1 - g.points()[j].abs()) / theta[j];
        }
        assert!((eq_w / total).abs() < cfg.root_tol);
        assert!((eq_l / total).abs() < cfg.root_tol);
        assert_abs_diff_eq!(sol.omega, 0.6, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.lambda0, 2.5, epsilon = 1e-5);
    }

    #[test]
    fn fit_dnp_single_observation() {
        let data = Dataset::new(vec![1.3], vec![0.2]).unwrap();
        let g = build_grid(data.y(), 11).unwrap();
        let (prior, trace) = fit_dnp(&data, &g, &EmConfig::default()).unwrap();
        let nearest = g
            .points()
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 1.3).abs().total_cmp(&(b.1 - 1.3).abs()))
            .unwrap()
            .0;
        let argmax = prior.pi().iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(argmax, nearest);
        assert!(prior.pi()[nearest] > 0.9);
        for w in trace.loglik_per_iter.windows(2) {
            assert!(w[1] >= w[0] - 1e-9);
        }
    }

    #[test]
    fn fit_snp_ascends_from_initialization() {
        let y: Vec<f64> =
            (0..200).map(|i| if i % 10 == 0 { 2.5 } else { ((i * 37) % 17) as f64 / 17.0 - 0.5 }).collect();
        let sigma = vec![1.0; 200];
        let data = Dataset::new(y, sigma).unwrap();
        let g = build_grid(data.y(), 60).unwrap();
        let cfg = EmConfig { max_iter: 200, ..EmConfig::default() };
        let init = SnpPrior::new(g.clone(), cfg.omega_init, cfg.lambda0_init, vec![1.0 / 60.0; 60]).unwrap();
        let ll0 = marginal_loglik(&init, &data).unwrap();
        let (fit, trace) = fit_snp(&data, &g, &cfg).unwrap();
        let ll1 = marginal_loglik(&Prior::Snp(fit), &data).unwrap();
        assert!(ll1 >= ll0 - 1e-9);
        assert_abs_diff_eq!(trace.loglik_per_iter[0], ll0, epsilon = 1e-9);
        assert_abs_diff_eq!(trace.final_loglik(), ll1, epsilon = 1e-8);
        for w in trace.loglik_per_iter.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn frozen_zero_omega_matches_dnp() {
        let y: Vec<f64> = (0..80).map(|i| ((i * 13) % 29) as f64 / 7.0 - 1.5).collect();
        let sigma: Vec<f64> = (0..80).map(|i| 0.6 + (i % 5) as f64 * 0.2).collect();
        let data = Dataset::new(y, sigma).unwrap();
        let g = build_grid(data.y(), 25).unwrap();
        for iters in 1..=6 {
            let cfg =
                EmConfig { max_iter: iters, rel_tol: 1e-300, fixed_omega: Some(0.0), ..EmConfig::default() };
            let (d, _) = fit_dnp(&data, &g, &cfg).unwrap();
            let (s, _) = fit_snp(&data, &g, &cfg).unwrap();
            for (a, b) in d.pi().iter().zip(s.gamma_pi()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(EmConfig { max_iter: 0, ..EmConfig::default() }.validate().is_err());
        assert!(EmConfig { omega_init: 1.0, ..EmConfig::default() }.validate().is_err());
        assert!(EmConfig { rel_tol: 0.0, ..EmConfig::default() }.validate().is_err());
        assert!(EmConfig::default().validate().is_ok());
    }
}
