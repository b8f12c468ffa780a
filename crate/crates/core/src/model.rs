//! Domain types shared by the fitters and the inference routines: the
//! support grid, observations, the two mixture priors and per-observation
//! posterior tables, plus the density primitives they are built from.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Simplex tolerance for probability vectors.
pub const SIMPLEX_TOL: f64 = 1e-10;

const SPACING_REL_TOL: f64 = 1e-12;

/// Equally spaced support points containing an exact zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Grid {
    points: Vec<f64>,
    spacing: f64,
    zero_index: usize,
}

impl Grid {
    /// Validates an explicit list of points: at least two, strictly
    /// increasing, equally spaced, one of them exactly `0.0`.
    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(invalid("a grid needs at least two points"));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(invalid("grid points must be finite"));
        }
        let m = points.len();
        let spacing = (points[m - 1] - points[0]) / (m - 1) as f64;
        if !(spacing > 0.0) {
            return Err(invalid("grid points must be strictly increasing"));
        }
        let scale = points[0].abs().max(points[m - 1].abs());
        let slack = SPACING_REL_TOL * spacing + 4.0 * f64::EPSILON * scale;
        for w in points.windows(2) {
            let d = w[1] - w[0];
            if !(d > 0.0) {
                return Err(invalid("grid points must be strictly increasing"));
            }
            if (d - spacing).abs() > slack {
                return Err(invalid(format!("grid spacing is not constant: step {d} vs mean {spacing}")));
            }
        }
        let zero_index =
            points.iter().position(|&p| p == 0.0).ok_or_else(|| invalid("grid must contain 0 exactly"))?;
        Ok(Grid { points, spacing, zero_index })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn zero_index(&self) -> usize {
        self.zero_index
    }

    pub fn min(&self) -> f64 {
        self.points[0]
    }

    pub fn max(&self) -> f64 {
        self.points[self.points.len() - 1]
    }
}

impl TryFrom<Vec<f64>> for Grid {
    type Error = Error;

    fn try_from(points: Vec<f64>) -> Result<Self> {
        Grid::from_points(points)
    }
}

impl From<Grid> for Vec<f64> {
    fn from(grid: Grid) -> Self {
        grid.points
    }
}

/// Builds an `m`-point equally spaced grid covering
/// `[min(y) - 2 sd(y), max(y) + 2 sd(y)]` with `0` as one of its points.
///
/// Points are laid out as integer multiples of the spacing, so zero is hit
/// exactly. The spacing is `span / (m - 2)`, which leaves one spare step so
/// that aligning to the zero lattice never uncovers either end. When the
/// span does not contain zero it is widened to reach it. A sample standard
/// deviation of zero (or a single observation) falls back to
/// `[min(y) - 1, max(y) + 1]`.
pub fn build_grid(y: &[f64], m: usize) -> Result<Grid> {
    if m < 3 {
        return Err(invalid(format!("grid size must be at least 3, got {m}")));
    }
    if y.is_empty() {
        return Err(invalid("cannot build a grid from an empty sample"));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(invalid("observations must be finite"));
    }
    let (ymin, ymax) =
        y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let sd = sample_sd(y);
    let (mut lo, mut hi) =
        if sd > 0.0 { (ymin - 2.0 * sd, ymax + 2.0 * sd) } else { (ymin - 1.0, ymax + 1.0) };
    lo = lo.min(0.0);
    hi = hi.max(0.0);

    let spacing = (hi - lo) / (m - 2) as f64;
    let mut first = (lo / spacing).floor() as i64;
    // rounding in the floor can leave the top uncovered by a hair
    if ((first + m as i64 - 1) as f64) * spacing < hi {
        first -= 1;
    }
    let points: Vec<f64> = (0..m as i64).map(|k| (first + k) as f64 * spacing).collect();
    let zero_index = (-first) as usize;
    debug_assert_eq!(points[zero_index], 0.0);
    Ok(Grid { points, spacing, zero_index })
}

/// Sample standard deviation with `n - 1` denominator; zero for `n < 2`.
pub fn sample_sd(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let ss: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (n - 1) as f64).sqrt()
}

/// Observations `y` with known noise standard deviations `sigma`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vec<f64>,
    sigma: Vec<f64>,
}

impl Dataset {
    pub fn new(y: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if y.len() != sigma.len() {
            return Err(invalid(format!("y has {} entries but sigma has {}", y.len(), sigma.len())));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("y[{i}] is not finite")));
        }
        if let Some(i) = sigma.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(invalid(format!("sigma[{i}] = {} must be positive and finite", sigma[i])));
        }
        Ok(Dataset { y, sigma })
    }

    pub fn empty() -> Self {
        Dataset { y: Vec::new(), sigma: Vec::new() }
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.y.iter().copied().zip(self.sigma.iter().copied())
    }

    /// Standardized statistics `y / sigma`.
    pub fn z_values(&self) -> Vec<f64> {
        self.iter().map(|(y, s)| y / s).collect()
    }
}

/// `N(mu, sigma^2)` density at `y`.
pub fn normal_density(y: f64, mu: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(invalid(format!("sigma must be positive, got {sigma}")));
    }
    Ok(log_normal_density(y, mu, sigma).exp())
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[inline]
pub(crate) fn log_normal_density(y: f64, mu: f64, sigma: f64) -> f64 {
    let z = (y - mu) / sigma;
    -0.5 * z * z - sigma.ln() - HALF_LN_2PI
}

/// Laplace density `(lambda0 / 2) exp(-lambda0 |x|)`.
pub fn laplace_spike_density(x: f64, lambda0: f64) -> Result<f64> {
    if !(lambda0 > 0.0) {
        return Err(invalid(format!("lambda0 must be positive, got {lambda0}")));
    }
    Ok(0.5 * lambda0 * (-lambda0 * x.abs()).exp())
}

/// Laplace spike restricted to the grid and renormalized to sum to one.
///
/// The `lambda0 / 2` factor cancels in the ratio, and the exponent is
/// referenced to `|0| = 0`, so large `lambda0` underflows toward a unit
/// mass on the zero atom instead of producing `0 / 0`.
pub fn spike_weights(grid: &Grid, lambda0: f64) -> Vec<f64> {
    let mut w: Vec<f64> = grid.points().iter().map(|t| (-lambda0 * t.abs()).exp()).collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

/// `1 / sqrt(2 pi)`.
pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn check_simplex(weights: &[f64], what: &str) -> Result<()> {
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(invalid(format!("{what} must be nonnegative and finite")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(invalid(format!("{what} sums to {total}, expected 1")));
    }
    Ok(())
}

/// Anything that places a discrete prior on grid atoms.
pub trait MixturePrior {
    fn grid(&self) -> &Grid;

    /// Prior probability of each grid atom.
    fn atom_weights(&self) -> Cow<'_, [f64]>;
}

/// Dirac spike at zero plus nonparametric weights; after discretization the
/// spike is simply the zero atom's weight.
#[derive(Debug, Clone, PartialEq)]
pub struct DnpPrior {
    grid: Grid,
    pi: Vec<f64>,
}

impl DnpPrior {
    pub fn new(grid: Grid, pi: Vec<f64>) -> Result<Self> {
        if pi.len() != grid.len() {
            return Err(invalid("weight vector length differs from grid size"));
        }
        check_simplex(&pi, "DNP weights")?;
        Ok(DnpPrior { grid, pi })
    }

    pub fn uniform(grid: Grid) -> Self {
        let m = grid.len();
        DnpPrior { grid, pi: vec![1.0 / m as f64; m] }
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    /// Prior mass at exactly zero.
    pub fn sparsity(&self) -> f64 {
        self.pi[self.grid.zero_index()]
    }
}

impl MixturePrior for DnpPrior {
    fn grid(&self) -> &Grid {
        &self.grid
    }

    fn atom_weights(&self) -> Cow<'_, [f64]> {
        Cow::Borrowed(&self.pi)
    }
}

/// Laplace spike with weight `omega` plus nonparametric `gamma_pi`.
#[derive(Debug, Clone, PartialEq)]
pub struct SnpPrior {
    grid: Grid,
    omega: f64,
    lambda0: f64,
    gamma_pi: Vec<f64>,
}

impl SnpPrior {
    pub fn new(grid: Grid, omega: f64, lambda0: f64, gamma_pi: Vec<f64>) -> Result<Self> {
        if !(0.0..=1.0).contains(&omega) {
            return Err(invalid(format!("omega must lie in [0, 1], got {omega}")));
        }
        if !(lambda0 > 0.0 && lambda0.is_finite()) {
            return Err(invalid(format!("lambda0 must be positive, got {lambda0}")));
        }
        if gamma_pi.len() != grid.len() {
            return Err(invalid("weight vector length differs from grid size"));
        }
        check_simplex(&gamma_pi, "SNP nonparametric weights")?;
        Ok(SnpPrior { grid, omega, lambda0, gamma_pi })
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn lambda0(&self) -> f64 {
        self.lambda0
    }

    pub fn gamma_pi(&self) -> &[f64] {
        &self.gamma_pi
    }

    /// Renormalized spike on the grid.
    pub fn spike(&self) -> Vec<f64> {
        spike_weights(&self.grid, self.lambda0)
    }

    /// Mixture weights `omega * spike + (1 - omega) * gamma` per atom.
    pub fn theta(&self) -> Vec<f64> {
        mix_weights(self.omega, &self.spike(), &self.gamma_pi)
    }
}

pub(crate) fn mix_weights(omega: f64, spike: &[f64], gamma: &[f64]) -> Vec<f64> {
    spike.iter().zip(gamma).map(|(s, g)| omega * s + (1.0 - omega) * g).collect()
}

impl MixturePrior for SnpPrior {
    fn grid(&self) -> &Grid {
        &self.grid
    }

    fn atom_weights(&self) -> Cow<'_, [f64]> {
        Cow::Owned(self.theta())
    }
}

/// Either fitted prior.
#[derive(Debug, Clone, PartialEq)]
pub enum Prior {
    Dnp(DnpPrior),
    Snp(SnpPrior),
}

impl Prior {
    pub fn kind(&self) -> PriorKind {
        match self {
            Prior::Dnp(_) => PriorKind::Dnp,
            Prior::Snp(_) => PriorKind::Snp,
        }
    }
}

impl MixturePrior for Prior {
    fn grid(&self) -> &Grid {
        match self {
            Prior::Dnp(p) => p.grid(),
            Prior::Snp(p) => p.grid(),
        }
    }

    fn atom_weights(&self) -> Cow<'_, [f64]> {
        match self {
            Prior::Dnp(p) => p.atom_weights(),
            Prior::Snp(p) => p.atom_weights(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    Dnp,
    Snp,
}

impl std::fmt::Display for PriorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PriorKind::Dnp => "dnp",
            PriorKind::Snp => "snp",
        })
    }
}

/// Discrete posterior over grid atoms for one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorTable<'g> {
    pub(crate) grid: &'g Grid,
    pub(crate) mass: Vec<f64>,
    pub(crate) log_marginal: f64,
}

impl<'g> PosteriorTable<'g> {
    pub fn grid(&self) -> &'g Grid {
        self.grid
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    /// Plug-in marginal density of the observation.
    pub fn marginal(&self) -> f64 {
        self.log_marginal.exp()
    }

    pub fn log_marginal(&self) -> f64 {
        self.log_marginal
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn lattice_ok(g: &Grid) {
        let h = g.spacing();
        for w in g.points().windows(2) {
            assert!(w[1] > w[0]);
            assert!(((w[1] - w[0]) - h).abs() <= 1e-12 * h + 1e-15 * g.max().abs());
        }
        assert_eq!(g.points()[g.zero_index()].to_bits(), 0f64.to_bits());
    }

    #[test]
    fn grid_covers_two_point_sample() {
        // sd({-1, 1}) = sqrt(2) with the n - 1 denominator
        let sd = 2f64.sqrt();
        assert_abs_diff_eq!(sample_sd(&[-1.0, 1.0]), sd, epsilon = 1e-15);
        let g = build_grid(&[-1.0, 1.0], 5).unwrap();
        assert_eq!(g.len(), 5);
        lattice_ok(&g);
        assert!(g.min() <= -1.0 - 2.0 * sd);
        assert!(g.max() >= 1.0 + 2.0 * sd);
    }

    #[test]
    fn grid_degenerate_sample_uses_unit_margin() {
        let g = build_grid(&[0.0, 0.0, 0.0], 3).unwrap();
        assert_eq!(g.len(), 3);
        lattice_ok(&g);
        assert!(g.min() <= -1.0 && g.max() >= 1.0);
        let single = build_grid(&[3.5], 4).unwrap();
        lattice_ok(&single);
        assert!(single.min() <= 0.0 && single.max() >= 4.5);
    }

    #[test]
    fn grid_reaches_zero_for_positive_data() {
        let g = build_grid(&[5.0, 6.0, 7.0], 10).unwrap();
        lattice_ok(&g);
        assert!(g.min() <= 0.0);
        assert!(g.max() >= 7.0 + 2.0);
    }

    #[test]
    fn grid_rejects_bad_arguments() {
        assert!(matches!(build_grid(&[1.0], 2), Err(Error::InvalidArgument(_))));
        assert!(matches!(build_grid(&[], 10), Err(Error::InvalidArgument(_))));
        assert!(Grid::from_points(vec![-1.0, 0.5, 1.0]).is_err());
        assert!(Grid::from_points(vec![1.0, 2.0, 3.0]).is_err());
        assert!(Grid::from_points(vec![-1.0, 0.0, 1.0]).is_ok());
    }

    #[test]
    fn normal_density_constants() {
        assert_abs_diff_eq!(normal_density(0.0, 0.0, 1.0).unwrap(), 0.398_942_280_4, epsilon = 1e-10);
        for &(mu, s) in &[(3.0, 0.5), (-2.0, 2.0), (0.0, 1.7)] {
            assert_abs_diff_eq!(normal_density(mu, mu, s).unwrap(), INV_SQRT_2PI / s, epsilon = 1e-14);
        }
        assert!(normal_density(0.0, 0.0, 0.0).is_err());
        assert!(normal_density(0.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn normal_density_integrates_to_one() {
        // composite Simpson over [-20, 22] for N(1, 2^2)
        let (a, b, n) = (-20.0, 22.0, 20_000usize);
        let h = (b - a) / n as f64;
        let mut s = 0.0;
        for k in 0..=n {
            let x = a + k as f64 * h;
            let w = if k == 0 || k == n {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            s += w * normal_density(x, 1.0, 2.0).unwrap();
        }
        assert_abs_diff_eq!(s * h / 3.0, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn laplace_values() {
        for &l in &[0.1, 1.0, 7.0] {
            assert_abs_diff_eq!(laplace_spike_density(0.0, l).unwrap(), l / 2.0);
            for &x in &[0.3, 2.0, 11.0] {
                assert_eq!(laplace_spike_density(x, l).unwrap(), laplace_spike_density(-x, l).unwrap());
            }
        }
        // (2 / 2) * e^{-2}
        let direct = 1.0 / std::f64::consts::E.powi(2);
        assert_abs_diff_eq!(laplace_spike_density(1.0, 2.0).unwrap(), direct, epsilon = 1e-15);
        assert_abs_diff_eq!(direct, 0.135_335, epsilon = 1e-6);
        assert!(laplace_spike_density(0.0, 0.0).is_err());
    }

    #[test]
    fn spike_weights_normalize() {
        let g = build_grid(&[-2.0, 0.3, 4.0], 50).unwrap();
        for &l in &[1e-3, 1.0, 30.0, 1e4] {
            let w = spike_weights(&g, l);
            assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-14);
            assert!(w.iter().all(|v| *v >= 0.0));
        }
        let sharp = spike_weights(&g, 1e4);
        assert_abs_diff_eq!(sharp[g.zero_index()], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn priors_validate_simplex() {
        let g = Grid::from_points(vec![-1.0, 0.0, 1.0]).unwrap();
        assert!(DnpPrior::new(g.clone(), vec![0.2, 0.2, 0.2]).is_err());
        assert!(DnpPrior::new(g.clone(), vec![0.5, -0.1, 0.6]).is_err());
        let p = DnpPrior::new(g.clone(), vec![0.2, 0.5, 0.3]).unwrap();
        assert_eq!(p.sparsity(), 0.5);
        assert!(SnpPrior::new(g.clone(), 1.2, 1.0, vec![0.2, 0.5, 0.3]).is_err());
        assert!(SnpPrior::new(g.clone(), 0.5, 0.0, vec![0.2, 0.5, 0.3]).is_err());
        let s = SnpPrior::new(g, 0.5, 3.0, vec![0.2, 0.5, 0.3]).unwrap();
        assert_abs_diff_eq!(s.theta().iter().sum::<f64>(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn dataset_validation() {
        assert!(Dataset::new(vec![1.0], vec![]).is_err());
        assert!(Dataset::new(vec![1.0], vec![0.0]).is_err());
        assert!(Dataset::new(vec![f64::NAN], vec![1.0]).is_err());
        assert!(Dataset::new(vec![1.0], vec![f64::INFINITY]).is_err());
        let d = Dataset::new(vec![1.0, -2.0], vec![0.5, 2.0]).unwrap();
        assert_eq!(d.z_values(), vec![2.0, -1.0]);
    }
}
