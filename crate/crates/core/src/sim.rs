//! Monte Carlo harness for the two-group simulation designs.
//!
//! Each repetition draws `mu_i = 0` with probability `w` and `N(V, 1)`
//! otherwise, noise variances `sigma_i^2 ~ U(0.5, u)`, and observations
//! `y_i ~ N(mu_i, sigma_i^2)`. Both priors are fitted and every estimator and
//! testing procedure is scored against the truth.

use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::em::{fit_dnp, fit_snp, EmConfig};
use crate::error::{invalid, Error, Result};
use crate::model::{build_grid, Dataset, Prior};
use crate::posterior::{infer, CredibleInterval, Inference, RegionWeighting};
use crate::testing::{adaptive_bh, adaptive_storey, bh, neb_opt, storey, z_to_pvalue, TestDecision};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimDesign {
    pub n: usize,
    pub w: f64,
    #[serde(rename = "V")]
    pub v: f64,
    pub u: f64,
    pub seed: u64,
    pub reps: usize,
}

impl Default for SimDesign {
    fn default() -> Self {
        SimDesign { n: 1000, w: 0.95, v: 2.0, u: 1.5, seed: 0, reps: 100 }
    }
}

impl SimDesign {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(invalid("n must be positive"));
        }
        if !(0.0..=1.0).contains(&self.w) {
            return Err(invalid(format!("w must lie in [0, 1], got {}", self.w)));
        }
        if !self.v.is_finite() {
            return Err(invalid("V must be finite"));
        }
        if !(self.u > 0.5 && self.u.is_finite()) {
            return Err(invalid(format!("u must exceed 0.5, got {}", self.u)));
        }
        if self.reps == 0 {
            return Err(invalid("reps must be positive"));
        }
        Ok(())
    }

    /// The full sweep: `w` in 0.55..=0.95, `V` in 1..=3, `u` in 1..=2.5.
    pub fn sweep(seed: u64, reps: usize) -> Vec<SimDesign> {
        let ws = [0.55, 0.65, 0.75, 0.85, 0.95];
        let vs = [1.0, 1.5, 2.0, 2.5, 3.0];
        let us = [1.0, 1.5, 2.0, 2.5];
        let mut out = Vec::new();
        for &w in &ws {
            for &v in &vs {
                for &u in &us {
                    out.push(SimDesign { n: 1000, w, v, u, seed, reps });
                }
            }
        }
        out
    }
}

/// Draws repetition `rep` of `design`. Returns the data and the true means.
pub fn generate_dataset(design: &SimDesign, rep: usize) -> Result<(Dataset, Vec<f64>)> {
    design.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(design.seed);
    rng.set_stream(rep as u64);
    let var = Uniform::new_inclusive(0.5, design.u).map_err(|e| invalid(e.to_string()))?;
    let mut y = Vec::with_capacity(design.n);
    let mut sigma = Vec::with_capacity(design.n);
    let mut mu = Vec::with_capacity(design.n);
    for _ in 0..design.n {
        let null = rng.random::<f64>() < design.w;
        let signal: f64 = StandardNormal.sample(&mut rng);
        let m = if null { 0.0 } else { design.v + signal };
        let s = var.sample(&mut rng).sqrt();
        let e: f64 = StandardNormal.sample(&mut rng);
        mu.push(m);
        sigma.push(s);
        y.push(m + s * e);
    }
    Ok((Dataset::new(y, sigma)?, mu))
}

/// Outcome counts of one testing experiment. `U`/`V` are accepted/rejected
/// nulls, `T`/`S` accepted/rejected signals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Classification {
    pub u: usize,
    pub v: usize,
    pub t: usize,
    pub s: usize,
}

impl Classification {
    pub fn count(true_mu: &[f64], reject: &[bool]) -> Result<Self> {
        if true_mu.len() != reject.len() {
            return Err(invalid("truth and decisions differ in length"));
        }
        let mut c = Classification::default();
        for (mu, r) in true_mu.iter().zip(reject) {
            match (*mu == 0.0, *r) {
                (true, false) => c.u += 1,
                (true, true) => c.v += 1,
                (false, false) => c.t += 1,
                (false, true) => c.s += 1,
            }
        }
        Ok(c)
    }

    pub fn rejected(&self) -> usize {
        self.v + self.s
    }

    pub fn signals(&self) -> usize {
        self.t + self.s
    }

    pub fn fdp(&self) -> f64 {
        match self.rejected() {
            0 => 0.0,
            r => self.v as f64 / r as f64,
        }
    }

    pub fn power(&self) -> f64 {
        match self.signals() {
            0 => 0.0,
            m1 => self.s as f64 / m1 as f64,
        }
    }
}

pub fn mse(true_mu: &[f64], estimate: &[f64]) -> Result<f64> {
    if true_mu.len() != estimate.len() || true_mu.is_empty() {
        return Err(invalid("mse needs aligned non-empty vectors"));
    }
    let sum: f64 = true_mu.iter().zip(estimate).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / true_mu.len() as f64)
}

pub fn coverage(true_mu: &[f64], intervals: &[CredibleInterval]) -> Result<f64> {
    if true_mu.len() != intervals.len() || true_mu.is_empty() {
        return Err(invalid("coverage needs aligned non-empty vectors"));
    }
    let hit = true_mu.iter().zip(intervals).filter(|(m, ci)| ci.contains(**m)).count();
    Ok(hit as f64 / true_mu.len() as f64)
}

/// Point estimates and intervals produced by one estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimates {
    pub mean: Vec<f64>,
    pub mode: Vec<f64>,
    pub intervals: Vec<CredibleInterval>,
    pub sparsity: Option<f64>,
}

impl From<&Inference> for Estimates {
    fn from(inf: &Inference) -> Self {
        Estimates {
            mean: inf.posterior_mean.clone(),
            mode: inf.posterior_mode.clone(),
            intervals: inf.intervals.clone(),
            sparsity: Some(inf.sparsity),
        }
    }
}

/// One repetition's scores. Estimator fields are `None` for a pure testing
/// procedure and vice versa.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct RepMetrics {
    pub mse_mean: Option<f64>,
    pub mse_mode: Option<f64>,
    pub sparsity_bias: Option<f64>,
    pub ci_coverage: Option<f64>,
    pub empirical_fdp: Option<f64>,
    pub empirical_power: Option<f64>,
}

/// Scores estimates against the truth. `w` is the design sparsity used for
/// the sparsity bias.
pub fn compute_metrics(
    true_mu: &[f64],
    estimates: Option<&Estimates>,
    decision: Option<&TestDecision>,
    w: f64,
) -> Result<RepMetrics> {
    let mut out = RepMetrics::default();
    if let Some(e) = estimates {
        out.mse_mean = Some(mse(true_mu, &e.mean)?);
        out.mse_mode = Some(mse(true_mu, &e.mode)?);
        out.ci_coverage = Some(coverage(true_mu, &e.intervals)?);
        out.sparsity_bias = e.sparsity.map(|s| s - w);
    }
    if let Some(d) = decision {
        let c = Classification::count(true_mu, &d.reject)?;
        out.empirical_fdp = Some(c.fdp());
        out.empirical_power = Some(c.power());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    Snp,
    Dnp,
    /// The observations themselves, with `y +/- z sigma` intervals.
    Mle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Procedure {
    SnpOpt,
    DnpOpt,
    Bh,
    Storey,
    /// BH with the SNP sparsity estimate.
    AdaptiveBh,
    /// Storey with the SNP sparsity estimate.
    AdaptiveStorey,
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimator::Snp => "snp",
            Estimator::Dnp => "dnp",
            Estimator::Mle => "mle",
        })
    }
}

impl fmt::Display for Procedure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Procedure::SnpOpt => "snp-opt",
            Procedure::DnpOpt => "dnp-opt",
            Procedure::Bh => "bh",
            Procedure::Storey => "storey",
            Procedure::AdaptiveBh => "adaptive-bh",
            Procedure::AdaptiveStorey => "adaptive-storey",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloConfig {
    pub grid_size: usize,
    pub em: EmConfig,
    pub ci_alpha: f64,
    pub storey_lambda: f64,
    pub estimators: Vec<Estimator>,
    pub procedures: Vec<Procedure>,
    pub alphas: Vec<f64>,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        MonteCarloConfig {
            grid_size: 400,
            em: EmConfig::default(),
            ci_alpha: 0.05,
            storey_lambda: 0.5,
            estimators: vec![Estimator::Snp, Estimator::Dnp, Estimator::Mle],
            procedures: vec![
                Procedure::SnpOpt,
                Procedure::DnpOpt,
                Procedure::Bh,
                Procedure::Storey,
                Procedure::AdaptiveBh,
                Procedure::AdaptiveStorey,
            ],
            alphas: vec![0.05],
        }
    }
}

impl MonteCarloConfig {
    pub fn validate(&self) -> Result<()> {
        self.em.validate()?;
        if self.grid_size < 3 {
            return Err(invalid("grid_size must be at least 3"));
        }
        if !(self.ci_alpha > 0.0 && self.ci_alpha < 1.0) {
            return Err(invalid("ci_alpha must lie in (0, 1)"));
        }
        if !(self.storey_lambda > 0.0 && self.storey_lambda < 1.0) {
            return Err(invalid("storey_lambda must lie in (0, 1)"));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(invalid(format!("alpha must lie in (0, 1), got {a}")));
        }
        Ok(())
    }
}

/// Mean, Monte Carlo standard error and the per-rep values of one metric.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub se: f64,
    pub values: Vec<f64>,
}

impl Summary {
    pub fn from_values(values: Vec<f64>) -> Self {
        let r = values.len() as f64;
        let mean = values.iter().sum::<f64>() / r;
        let se = if values.len() < 2 {
            0.0
        } else {
            let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
            (ss / (r - 1.0)).sqrt() / r.sqrt()
        };
        Summary { mean, se, values }
    }
}

/// Aggregated scores of one method, and one level for testing procedures.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub method: String,
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse_mean: Option<Summary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse_mode: Option<Summary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sparsity_bias: Option<Summary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci_coverage: Option<Summary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub empirical_fdp: Option<Summary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub empirical_power: Option<Summary>,
}

impl MetricReport {
    fn aggregate(method: String, alpha: Option<f64>, reps: &[RepMetrics]) -> Self {
        let pick = |f: fn(&RepMetrics) -> Option<f64>| -> Option<Summary> {
            let values: Option<Vec<f64>> = reps.iter().map(f).collect();
            values.filter(|v| !v.is_empty()).map(Summary::from_values)
        };
        MetricReport {
            method,
            alpha,
            mse_mean: pick(|r| r.mse_mean),
            mse_mode: pick(|r| r.mse_mode),
            sparsity_bias: pick(|r| r.sparsity_bias),
            ci_coverage: pick(|r| r.ci_coverage),
            empirical_fdp: pick(|r| r.empirical_fdp),
            empirical_power: pick(|r| r.empirical_power),
        }
    }

    /// `(metric name, summary)` pairs that are present.
    pub fn metrics(&self) -> Vec<(&'static str, &Summary)> {
        [
            ("mse_mean", &self.mse_mean),
            ("mse_mode", &self.mse_mode),
            ("sparsity_bias", &self.sparsity_bias),
            ("ci_coverage", &self.ci_coverage),
            ("empirical_fdp", &self.empirical_fdp),
            ("empirical_power", &self.empirical_power),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_ref().map(|s| (k, s)))
        .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailedRep {
    pub rep: usize,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonteCarloReport {
    pub design: SimDesign,
    /// Indices of the repetitions that contribute to every report.
    pub completed_reps: Vec<usize>,
    pub failed_reps: Vec<FailedRep>,
    pub reports: Vec<MetricReport>,
}

impl MonteCarloReport {
    pub fn find(&self, method: &str, alpha: Option<f64>) -> Option<&MetricReport> {
        self.reports.iter().find(|r| r.method == method && r.alpha == alpha)
    }

    pub fn estimator(&self, e: Estimator) -> Option<&MetricReport> {
        self.find(&e.to_string(), None)
    }

    pub fn procedure(&self, p: Procedure, alpha: f64) -> Option<&MetricReport> {
        self.find(&p.to_string(), Some(alpha))
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    /// One row per (method, alpha, metric, rep) with the design fields in
    /// front. Estimator rows leave `alpha` empty.
    pub fn write_long_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["n", "w", "V", "u", "seed", "method", "alpha", "metric", "value", "rep"])?;
        let d = &self.design;
        let design = [d.n.to_string(), d.w.to_string(), d.v.to_string(), d.u.to_string(), d.seed.to_string()];
        for report in &self.reports {
            let alpha = report.alpha.map(|a| a.to_string()).unwrap_or_default();
            for (metric, summary) in report.metrics() {
                for (value, rep) in summary.values.iter().zip(&self.completed_reps) {
                    let mut row: Vec<String> = design.to_vec();
                    row.extend([
                        report.method.clone(),
                        alpha.clone(),
                        metric.to_string(),
                        value.to_string(),
                        rep.to_string(),
                    ]);
                    out.write_record(&row)?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Per-rep outputs in report order: estimators first, then procedures by
/// level.
fn run_rep(design: &SimDesign, cfg: &MonteCarloConfig, rep: usize) -> Result<Vec<RepMetrics>> {
    let (data, mu) = generate_dataset(design, rep)?;
    let grid = build_grid(data.y(), cfg.grid_size)?;
    let (snp, _) = fit_snp(&data, &grid, &cfg.em)?;
    let (dnp, _) = fit_dnp(&data, &grid, &cfg.em)?;
    let snp = Prior::Snp(snp);
    let dnp = Prior::Dnp(dnp);
    let snp_inf = infer(&snp, &data, cfg.ci_alpha, RegionWeighting::Weighted)?;
    let dnp_inf = infer(&dnp, &data, cfg.ci_alpha, RegionWeighting::Weighted)?;
    let w_hat = snp_inf.sparsity.clamp(f64::MIN_POSITIVE, 1.0);

    let mut out = Vec::new();
    for e in &cfg.estimators {
        let est = match e {
            Estimator::Snp => Estimates::from(&snp_inf),
            Estimator::Dnp => Estimates::from(&dnp_inf),
            Estimator::Mle => mle_estimates(&data, cfg.ci_alpha),
        };
        out.push(compute_metrics(&mu, Some(&est), None, design.w)?);
    }
    let pvals = data.z_values().iter().map(|z| z_to_pvalue(*z, 1.0)).collect::<Result<Vec<_>>>()?;
    for &alpha in &cfg.alphas {
        for p in &cfg.procedures {
            let d = match p {
                Procedure::SnpOpt => neb_opt(&snp_inf.null_probs, alpha)?,
                Procedure::DnpOpt => neb_opt(&dnp_inf.null_probs, alpha)?,
                Procedure::Bh => bh(&pvals, alpha)?,
                Procedure::Storey => storey(&pvals, alpha, cfg.storey_lambda)?,
                Procedure::AdaptiveBh => adaptive_bh(&pvals, alpha, w_hat)?,
                Procedure::AdaptiveStorey => adaptive_storey(&pvals, alpha, w_hat)?,
            };
            out.push(compute_metrics(&mu, None, Some(&d), design.w)?);
        }
    }
    Ok(out)
}

fn mle_estimates(data: &Dataset, ci_alpha: f64) -> Estimates {
    let q = Normal::standard().inverse_cdf(1.0 - ci_alpha / 2.0);
    Estimates {
        mean: data.y().to_vec(),
        mode: data.y().to_vec(),
        intervals: data
            .iter()
            .map(|(y, s)| CredibleInterval {
                lower: y - q * s,
                upper: y + q * s,
                nominal_level: 1.0 - ci_alpha,
            })
            .collect(),
        sparsity: None,
    }
}

/// Worker pool honouring `SNPEB_THREADS`.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var("SNPEB_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| invalid(format!("SNPEB_THREADS must be a non-negative integer, got {v:?}")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| invalid(e.to_string()))
}

/// Runs every repetition of `design` and aggregates the scores in rep order.
/// Repetitions whose fit fails are listed in `failed_reps` and left out.
pub fn run_monte_carlo(design: &SimDesign, cfg: &MonteCarloConfig) -> Result<MonteCarloReport> {
    design.validate()?;
    cfg.validate()?;
    let pool = thread_pool()?;
    let results: Vec<Result<Vec<RepMetrics>>> =
        pool.install(|| (0..design.reps).into_par_iter().map(|r| run_rep(design, cfg, r)).collect());

    let mut completed_reps = Vec::new();
    let mut failed_reps = Vec::new();
    let mut rows: Vec<Vec<RepMetrics>> = Vec::new();
    for (rep, res) in results.into_iter().enumerate() {
        match res {
            Ok(r) => {
                completed_reps.push(rep);
                rows.push(r);
            }
            Err(e @ (Error::InvalidArgument(_) | Error::MalformedPrior(_))) => return Err(e),
            Err(e) => failed_reps.push(FailedRep { rep, kind: e.kind().to_string(), message: e.to_string() }),
        }
    }

    let mut labels: Vec<(String, Option<f64>)> =
        cfg.estimators.iter().map(|e| (e.to_string(), None)).collect();
    for &a in &cfg.alphas {
        labels.extend(cfg.procedures.iter().map(|p| (p.to_string(), Some(a))));
    }
    let reports = if rows.is_empty() {
        Vec::new()
    } else {
        labels
            .into_iter()
            .enumerate()
            .map(|(k, (method, alpha))| {
                let column: Vec<RepMetrics> = rows.iter().map(|r| r[k]).collect();
                MetricReport::aggregate(method, alpha, &column)
            })
            .collect()
    };
    Ok(MonteCarloReport { design: *design, completed_reps, failed_reps, reports })
}
