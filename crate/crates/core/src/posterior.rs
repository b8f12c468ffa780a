//! Plug-in posterior summaries: point estimates, null probabilities,
//! sparsity and equal-tailed credible intervals.

use serde::Serialize;

use crate::em::log_space_row;
use crate::error::{invalid, Error, Result};
use crate::model::{Dataset, Grid, MixturePrior, PosteriorTable, Prior, SnpPrior};

/// Grid interval around zero where the spike dominates the slab.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NullRegion {
    pub delta_l: f64,
    pub delta_r: f64,
}

impl NullRegion {
    pub fn contains(&self, x: f64) -> bool {
        self.delta_l <= x && x <= self.delta_r
    }
}

/// How the spike and slab curves are compared when locating the region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RegionWeighting {
    /// `omega * spike_j` against `(1 - omega) * gamma_j`.
    #[default]
    Weighted,
    /// `spike_j` against `gamma_j`.
    Unweighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CredibleInterval {
    pub lower: f64,
    pub upper: f64,
    pub nominal_level: f64,
}

impl CredibleInterval {
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Posterior over the grid for one observation.
pub fn posterior_table<'g, P: MixturePrior + ?Sized>(
    prior: &'g P,
    y: f64,
    sigma: f64,
) -> Result<PosteriorTable<'g>> {
    table_at(prior.grid(), &prior.atom_weights(), y, sigma, 0)
}

fn table_at<'g>(
    grid: &'g Grid,
    weights: &[f64],
    y: f64,
    sigma: f64,
    index: usize,
) -> Result<PosteriorTable<'g>> {
    if !(sigma > 0.0 && sigma.is_finite()) || !y.is_finite() {
        return Err(invalid("observation must be finite with positive sigma"));
    }
    let (mass, lse) = log_space_row(grid, y, sigma, weights);
    if lse == f64::NEG_INFINITY {
        return Err(Error::NumericalUnderflow { index });
    }
    Ok(PosteriorTable { grid, mass, log_marginal: lse })
}

/// Posterior tables for every observation in `data`.
pub fn posterior_tables<'g, P: MixturePrior + ?Sized>(
    prior: &'g P,
    data: &Dataset,
) -> Result<Vec<PosteriorTable<'g>>> {
    let weights = prior.atom_weights();
    data.iter().enumerate().map(|(i, (y, s))| table_at(prior.grid(), &weights, y, s, i)).collect()
}

pub fn posterior_mean(table: &PosteriorTable<'_>) -> f64 {
    table.grid.points().iter().zip(&table.mass).map(|(t, p)| t * p).sum()
}

/// Atom of maximal posterior mass. Ties go to the smallest `|tau|`, then to
/// the smaller `tau`.
pub fn posterior_mode(table: &PosteriorTable<'_>) -> f64 {
    let pts = table.grid.points();
    let mut best = 0;
    for j in 1..pts.len() {
        let (pj, pb) = (table.mass[j], table.mass[best]);
        let better = pj > pb
            || (pj == pb
                && (pts[j].abs() < pts[best].abs()
                    || (pts[j].abs() == pts[best].abs() && pts[j] < pts[best])));
        if better {
            best = j;
        }
    }
    pts[best]
}

/// Locates `[delta_l, delta_r]` by scanning outward from zero for the first
/// sign change of the spike-minus-slab difference, whichever component wins
/// at zero. The crossing is placed by linear interpolation between the
/// bracketing atoms, and the nearer of the two atoms becomes the bound. No
/// sign change on a side gives an infinite bound; an exact tie at zero gives
/// `[0, 0]`.
pub fn null_region(prior: &SnpPrior, weighting: RegionWeighting) -> NullRegion {
    let grid = prior.grid();
    let spike = prior.spike();
    let gamma = prior.gamma_pi();
    let (ws, wg) = match weighting {
        RegionWeighting::Weighted => (prior.omega(), 1.0 - prior.omega()),
        RegionWeighting::Unweighted => (1.0, 1.0),
    };
    let diff: Vec<f64> = spike.iter().zip(gamma).map(|(s, g)| ws * s - wg * g).collect();
    let z = grid.zero_index();
    if diff[z] == 0.0 {
        return NullRegion { delta_l: 0.0, delta_r: 0.0 };
    }
    let positive = diff[z] > 0.0;
    let flipped = |j: usize| if positive { diff[j] < 0.0 } else { diff[j] > 0.0 };
    let pts = grid.points();
    let crossing = |inner: usize, outer: usize| -> f64 {
        let (di, d_o) = (diff[inner], diff[outer]);
        let frac = if di == 0.0 { 0.0 } else { di / (di - d_o) };
        if frac <= 0.5 {
            pts[inner]
        } else {
            pts[outer]
        }
    };
    let delta_r = (z + 1..pts.len()).find(|&j| flipped(j)).map_or(f64::INFINITY, |j| crossing(j - 1, j));
    let delta_l = (0..z).rev().find(|&j| flipped(j)).map_or(f64::NEG_INFINITY, |j| crossing(j + 1, j));
    NullRegion { delta_l, delta_r }
}

/// Posterior probability that the observation is null: the zero atom's mass
/// under DNP, the region's mass under SNP. A missing SNP region is computed
/// with the weighted comparison.
pub fn null_probability(prior: &Prior, table: &PosteriorTable<'_>, region: Option<&NullRegion>) -> f64 {
    match prior {
        Prior::Dnp(p) => table.mass[p.grid().zero_index()],
        Prior::Snp(p) => {
            let owned;
            let region = match region {
                Some(r) => r,
                None => {
                    owned = null_region(p, RegionWeighting::Weighted);
                    &owned
                }
            };
            region_mass(table, region)
        }
    }
}

fn region_mass(table: &PosteriorTable<'_>, region: &NullRegion) -> f64 {
    let p: f64 = table
        .grid
        .points()
        .iter()
        .zip(&table.mass)
        .filter(|(t, _)| region.contains(**t))
        .map(|(_, m)| m)
        .sum();
    p.clamp(0.0, 1.0)
}

/// Mean posterior null probability over the dataset.
pub fn sparsity_estimate(prior: &Prior, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(invalid("sparsity estimate needs at least one observation"));
    }
    let region = match prior {
        Prior::Snp(p) => Some(null_region(p, RegionWeighting::Weighted)),
        Prior::Dnp(_) => None,
    };
    let tables = posterior_tables(prior, data)?;
    let total: f64 = tables.iter().map(|t| null_probability(prior, t, region.as_ref())).sum();
    Ok(total / data.len() as f64)
}

/// Equal-tailed interval from conservative discrete quantiles: the bounds
/// are the first atoms whose cumulative mass reaches `alpha / 2` and
/// `1 - alpha / 2`.
pub fn credible_interval(table: &PosteriorTable<'_>, alpha: f64) -> Result<CredibleInterval> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let pts = table.grid.points();
    let quantile = |level: f64| -> f64 {
        let mut cum = 0.0;
        for (t, m) in pts.iter().zip(&table.mass) {
            cum += m;
            if cum >= level {
                return *t;
            }
        }
        pts[pts.len() - 1]
    };
    Ok(CredibleInterval {
        lower: quantile(alpha / 2.0),
        upper: quantile(1.0 - alpha / 2.0),
        nominal_level: 1.0 - alpha,
    })
}

/// Everything the testing and reporting layers need from one fitted prior.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub posterior_mean: Vec<f64>,
    pub posterior_mode: Vec<f64>,
    pub intervals: Vec<CredibleInterval>,
    pub null_probs: Vec<f64>,
    pub sparsity: f64,
    pub region: Option<NullRegion>,
}

/// Runs every per-observation summary for `data` under `prior`.
pub fn infer(prior: &Prior, data: &Dataset, ci_alpha: f64, weighting: RegionWeighting) -> Result<Inference> {
    if data.is_empty() {
        return Err(invalid("inference needs at least one observation"));
    }
    let region = match prior {
        Prior::Snp(p) => Some(null_region(p, weighting)),
        Prior::Dnp(_) => None,
    };
    let tables = posterior_tables(prior, data)?;
    let mut out = Inference {
        posterior_mean: Vec::with_capacity(tables.len()),
        posterior_mode: Vec::with_capacity(tables.len()),
        intervals: Vec::with_capacity(tables.len()),
        null_probs: Vec::with_capacity(tables.len()),
        sparsity: 0.0,
        region,
    };
    for t in &tables {
        out.posterior_mean.push(posterior_mean(t));
        out.posterior_mode.push(posterior_mode(t));
        out.intervals.push(credible_interval(t, ci_alpha)?);
        out.null_probs.push(null_probability(prior, t, region.as_ref()));
    }
    out.sparsity = out.null_probs.iter().sum::<f64>() / tables.len() as f64;
    Ok(out)
}
