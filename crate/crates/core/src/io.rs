//! Input parsing, two-group preprocessing, prior files and result tables.
//!
//! Observation CSVs carry a header with at least the columns `y` and
//! `sigma`. Two-group CSVs have a gene identifier in the first column and one
//! column per subject whose header cell is `1` or `2` (optionally followed by
//! `:label`), naming the subject's group.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::em::{fit_dnp, fit_snp, EmConfig, EmTrace};
use crate::error::{invalid, Error, Result};
use crate::model::{
    build_grid, sample_sd, Dataset, DnpPrior, Grid, MixturePrior, Prior, PriorKind, SnpPrior,
};
use crate::posterior::{infer, Inference, RegionWeighting};
use crate::testing::{adaptive_bh, adaptive_storey, bh, neb_opt, storey, z_to_pvalue, TestDecision};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum InputFormat {
    #[default]
    YzCsv,
    TwoGroupCsv,
}

/// Pairing of group sizes and variances in the pooled variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// `[(n2 - 1) s1^2 + (n1 - 1) s2^2] / (n - 2)`.
    #[default]
    Printed,
    /// `[(n1 - 1) s1^2 + (n2 - 1) s2^2] / (n - 2)`.
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum TestMethod {
    /// NEB-OPT on the fitted prior's null probabilities.
    #[default]
    NebOpt,
    Bh,
    /// BH scaled by the fitted prior's sparsity estimate.
    AdaptiveBh,
    Storey,
    /// Storey with the fitted prior's sparsity estimate as null fraction.
    AdaptiveStorey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub prior_kind: PriorKind,
    pub grid_size: usize,
    pub alpha: f64,
    pub em: EmConfig,
    pub method: TestMethod,
    pub null_sd: f64,
    pub storey_lambda: f64,
    /// Level of the reported credible intervals is `1 - ci_alpha`.
    pub ci_alpha: f64,
    pub format: InputFormat,
    pub pooling: Pooling,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            prior_kind: PriorKind::Snp,
            grid_size: 400,
            alpha: 0.05,
            em: EmConfig::default(),
            method: TestMethod::NebOpt,
            null_sd: 1.0,
            storey_lambda: 0.5,
            ci_alpha: 0.05,
            format: InputFormat::YzCsv,
            pooling: Pooling::Printed,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.em.validate()?;
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(invalid(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.grid_size < 3 {
            return Err(invalid("grid_size must be at least 3"));
        }
        if !(self.null_sd > 0.0 && self.null_sd.is_finite()) {
            return Err(invalid("null_sd must be positive"));
        }
        if !(self.storey_lambda > 0.0 && self.storey_lambda < 1.0) {
            return Err(invalid("storey_lambda must lie in (0, 1)"));
        }
        if !(self.ci_alpha > 0.0 && self.ci_alpha < 1.0) {
            return Err(invalid("ci_alpha must lie in (0, 1)"));
        }
        Ok(())
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

fn csv_reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(r)
}

/// Maps csv's record-level failures to row-numbered errors.
fn record_error(e: csv::Error, row: usize) -> Error {
    match e.kind() {
        csv::ErrorKind::UnequalLengths { .. } => {
            Error::InvalidRow { row, message: "wrong number of fields".into() }
        }
        csv::ErrorKind::Utf8 { .. } => Error::InvalidRow { row, message: "invalid UTF-8".into() },
        _ => Error::Csv(e),
    }
}

fn parse_number(cell: &str, row: usize, column: &str) -> Result<f64> {
    cell.parse::<f64>().map_err(|e| Error::Parse {
        row,
        column: column.to_string(),
        message: format!("{cell:?}: {e}"),
    })
}

/// Reads a `y,sigma` table. Rows are numbered from 1 after the header.
pub fn parse_observations<R: Read>(r: R) -> Result<Dataset> {
    let mut rdr = csv_reader(r);
    let headers = rdr.headers().map_err(|e| record_error(e, 0))?.clone();
    if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
        return Err(Error::EmptyInput("no header row".into()));
    }
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let (yi, si) = (col("y")?, col("sigma")?);
    let mut y = Vec::new();
    let mut sigma = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 1;
        let rec = rec.map_err(|e| record_error(e, row))?;
        let yv = parse_number(&rec[yi], row, "y")?;
        let sv = parse_number(&rec[si], row, "sigma")?;
        if !yv.is_finite() {
            return Err(Error::InvalidRow { row, message: format!("y = {yv} is not finite") });
        }
        if !(sv > 0.0 && sv.is_finite()) {
            return Err(Error::InvalidRow {
                row,
                message: format!("sigma = {sv} must be finite and positive"),
            });
        }
        y.push(yv);
        sigma.push(sv);
    }
    if y.is_empty() {
        return Err(Error::EmptyInput("no data rows".into()));
    }
    Dataset::new(y, sigma)
}

/// Per-gene measurements of the two groups.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoGroupData {
    pub genes: Vec<String>,
    pub group1: Vec<Vec<f64>>,
    pub group2: Vec<Vec<f64>>,
}

fn group_of(cell: &str, column: usize) -> Result<u8> {
    let tag = cell.split(':').next().unwrap_or("").trim();
    match tag {
        "1" => Ok(1),
        "2" => Ok(2),
        _ => Err(Error::Parse {
            row: 0,
            column: format!("#{column}"),
            message: format!("group label {cell:?} must be 1 or 2"),
        }),
    }
}

pub fn parse_two_group<R: Read>(r: R) -> Result<TwoGroupData> {
    let mut rdr = csv_reader(r);
    let headers = rdr.headers().map_err(|e| record_error(e, 0))?.clone();
    if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
        return Err(Error::EmptyInput("no header row".into()));
    }
    let groups: Vec<u8> =
        headers.iter().enumerate().skip(1).map(|(j, h)| group_of(h, j)).collect::<Result<_>>()?;
    if !groups.contains(&1) {
        return Err(Error::MissingColumn("group 1".into()));
    }
    if !groups.contains(&2) {
        return Err(Error::MissingColumn("group 2".into()));
    }
    let mut out = TwoGroupData { genes: Vec::new(), group1: Vec::new(), group2: Vec::new() };
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 1;
        let rec = rec.map_err(|e| record_error(e, row))?;
        let mut g1 = Vec::new();
        let mut g2 = Vec::new();
        for (j, g) in groups.iter().enumerate() {
            let v = parse_number(&rec[j + 1], row, &headers[j + 1])?;
            if !v.is_finite() {
                return Err(Error::InvalidRow { row, message: format!("value {v} is not finite") });
            }
            if *g == 1 {
                g1.push(v)
            } else {
                g2.push(v)
            }
        }
        out.genes.push(rec[0].to_string());
        out.group1.push(g1);
        out.group2.push(g2);
    }
    if out.genes.is_empty() {
        return Err(Error::EmptyInput("no gene rows".into()));
    }
    Ok(out)
}

/// Mean difference `mean2 - mean1` per gene with its pooled standard error.
pub fn pooled_two_sample(group1: &[Vec<f64>], group2: &[Vec<f64>], pooling: Pooling) -> Result<Dataset> {
    if group1.len() != group2.len() {
        return Err(invalid(format!("groups have {} and {} genes", group1.len(), group2.len())));
    }
    if group1.is_empty() {
        return Err(Error::EmptyInput("no genes".into()));
    }
    let mut y = Vec::with_capacity(group1.len());
    let mut sigma = Vec::with_capacity(group1.len());
    for (gene, (a, b)) in group1.iter().zip(group2).enumerate() {
        if a.len() < 2 || b.len() < 2 {
            return Err(invalid(format!("gene {gene}: each group needs at least 2 samples")));
        }
        let (n1, n2) = (a.len() as f64, b.len() as f64);
        let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
        let (v1, v2) = (sample_sd(a).powi(2), sample_sd(b).powi(2));
        let pooled = match pooling {
            Pooling::Printed => ((n2 - 1.0) * v1 + (n1 - 1.0) * v2) / (n1 + n2 - 2.0),
            Pooling::Standard => ((n1 - 1.0) * v1 + (n2 - 1.0) * v2) / (n1 + n2 - 2.0),
        };
        let s = (pooled * (1.0 / n1 + 1.0 / n2)).sqrt();
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::Preprocessing { gene, message: format!("pooled standard error is {s}") });
        }
        y.push(mean(b) - mean(a));
        sigma.push(s);
    }
    Dataset::new(y, sigma)
}

pub fn load_observations(path: &Path, format: InputFormat, pooling: Pooling) -> Result<Dataset> {
    let r = open(path)?;
    match format {
        InputFormat::YzCsv => parse_observations(r),
        InputFormat::TwoGroupCsv => {
            let d = parse_two_group(r)?;
            pooled_two_sample(&d.group1, &d.group2, pooling)
        }
    }
}

/// Writes `y,sigma` rows that [`parse_observations`] reads back exactly.
pub fn write_observations<W: Write>(data: &Dataset, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["y", "sigma"])?;
    for (y, s) in data.iter() {
        out.write_record([format!("{y:?}"), format!("{s:?}")])?;
    }
    out.flush()?;
    Ok(())
}

/// Fit diagnostics stored next to a prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// On-disk form of a fitted prior. `weights` are the DNP atom weights or the
/// SNP slab weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorFile {
    pub kind: PriorKind,
    pub grid: Vec<f64>,
    pub weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitSummary>,
}

impl PriorFile {
    pub fn from_prior(prior: &Prior, trace: Option<&EmTrace>) -> Self {
        let fit = trace.map(|t| FitSummary {
            loglik: t.final_loglik(),
            iterations: t.iterations_run,
            converged: t.converged,
        });
        match prior {
            Prior::Dnp(p) => PriorFile {
                kind: PriorKind::Dnp,
                grid: p.grid().points().to_vec(),
                weights: p.pi().to_vec(),
                omega: None,
                lambda0: None,
                fit,
            },
            Prior::Snp(p) => PriorFile {
                kind: PriorKind::Snp,
                grid: p.grid().points().to_vec(),
                weights: p.gamma_pi().to_vec(),
                omega: Some(p.omega()),
                lambda0: Some(p.lambda0()),
                fit,
            },
        }
    }

    pub fn to_prior(&self) -> Result<Prior> {
        let bad = |e: Error| Error::MalformedPrior(e.to_string());
        let grid = Grid::from_points(self.grid.clone()).map_err(bad)?;
        match self.kind {
            PriorKind::Dnp => {
                if self.omega.is_some() || self.lambda0.is_some() {
                    return Err(Error::MalformedPrior("dnp prior has no omega or lambda0".into()));
                }
                Ok(Prior::Dnp(DnpPrior::new(grid, self.weights.clone()).map_err(bad)?))
            }
            PriorKind::Snp => {
                let (Some(omega), Some(lambda0)) = (self.omega, self.lambda0) else {
                    return Err(Error::MalformedPrior("snp prior needs omega and lambda0".into()));
                };
                Ok(Prior::Snp(SnpPrior::new(grid, omega, lambda0, self.weights.clone()).map_err(bad)?))
            }
        }
    }
}

pub fn parse_prior_json(text: &str) -> Result<Prior> {
    let file: PriorFile = serde_json::from_str(text).map_err(|e| Error::MalformedPrior(e.to_string()))?;
    file.to_prior()
}

pub fn read_prior(path: &Path) -> Result<Prior> {
    let mut text = String::new();
    open(path)?.read_to_string(&mut text)?;
    parse_prior_json(&text)
}

pub fn write_prior<W: Write>(prior: &Prior, trace: Option<&EmTrace>, w: W) -> Result<()> {
    serde_json::to_writer_pretty(w, &PriorFile::from_prior(prior, trace))?;
    Ok(())
}

/// Fits the configured prior on a grid built from the data.
pub fn fit_prior(cfg: &RunConfig, data: &Dataset) -> Result<(Prior, EmTrace)> {
    cfg.validate()?;
    let grid = build_grid(data.y(), cfg.grid_size)?;
    Ok(match cfg.prior_kind {
        PriorKind::Dnp => {
            let (p, t) = fit_dnp(data, &grid, &cfg.em)?;
            (Prior::Dnp(p), t)
        }
        PriorKind::Snp => {
            let (p, t) = fit_snp(data, &grid, &cfg.em)?;
            (Prior::Snp(p), t)
        }
    })
}

/// One line of the per-hypothesis results table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub index: usize,
    pub y: f64,
    pub sigma: f64,
    pub z: f64,
    pub null_prob: f64,
    pub p_value: f64,
    pub posterior_mean: f64,
    pub posterior_mode: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub reject: bool,
}

/// Column order of the results table.
pub const RESULT_COLUMNS: [&str; 11] = [
    "index",
    "y",
    "sigma",
    "z",
    "null_prob",
    "p_value",
    "posterior_mean",
    "posterior_mode",
    "ci_lower",
    "ci_upper",
    "reject",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestSummary {
    pub method: TestMethod,
    pub prior: PriorKind,
    pub alpha: f64,
    pub k_rejected: usize,
    pub n: usize,
    /// Mean posterior null probability under the fitted prior.
    pub sparsity_estimate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda0: Option<f64>,
    /// Bounds of the SNP null region; `null` marks an unbounded side.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub null_region: Option<[Option<f64>; 2]>,
    pub null_sd: f64,
    pub storey_lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestOutput {
    pub rows: Vec<ResultRow>,
    pub decision: TestDecision,
    pub inference: Inference,
    pub summary: TestSummary,
}

/// Posterior summaries and the configured testing procedure under `prior`.
pub fn run_test(cfg: &RunConfig, data: &Dataset, prior: &Prior) -> Result<TestOutput> {
    cfg.validate()?;
    let inf = infer(prior, data, cfg.ci_alpha, RegionWeighting::Weighted)?;
    let z = data.z_values();
    let pvals = z.iter().map(|z| z_to_pvalue(*z, cfg.null_sd)).collect::<Result<Vec<_>>>()?;
    let w_hat = inf.sparsity.clamp(f64::MIN_POSITIVE, 1.0);
    let decision = match cfg.method {
        TestMethod::NebOpt => neb_opt(&inf.null_probs, cfg.alpha)?,
        TestMethod::Bh => bh(&pvals, cfg.alpha)?,
        TestMethod::AdaptiveBh => adaptive_bh(&pvals, cfg.alpha, w_hat)?,
        TestMethod::Storey => storey(&pvals, cfg.alpha, cfg.storey_lambda)?,
        TestMethod::AdaptiveStorey => adaptive_storey(&pvals, cfg.alpha, w_hat)?,
    };
    let rows = (0..data.len())
        .map(|i| ResultRow {
            index: i,
            y: data.y()[i],
            sigma: data.sigma()[i],
            z: z[i],
            null_prob: inf.null_probs[i],
            p_value: pvals[i],
            posterior_mean: inf.posterior_mean[i],
            posterior_mode: inf.posterior_mode[i],
            ci_lower: inf.intervals[i].lower,
            ci_upper: inf.intervals[i].upper,
            reject: decision.reject[i],
        })
        .collect();
    let finite = |x: f64| x.is_finite().then_some(x);
    let (omega, lambda0) = match prior {
        Prior::Snp(p) => (Some(p.omega()), Some(p.lambda0())),
        Prior::Dnp(_) => (None, None),
    };
    let summary = TestSummary {
        method: cfg.method,
        prior: prior.kind(),
        alpha: cfg.alpha,
        k_rejected: decision.k_rejected,
        n: data.len(),
        sparsity_estimate: inf.sparsity,
        omega,
        lambda0,
        null_region: inf.region.map(|r| [finite(r.delta_l), finite(r.delta_r)]),
        null_sd: cfg.null_sd,
        storey_lambda: cfg.storey_lambda,
    };
    Ok(TestOutput { rows, decision, inference: inf, summary })
}

pub fn write_results_csv<W: Write>(rows: &[ResultRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(RESULT_COLUMNS)?;
    for r in rows {
        out.write_record([
            r.index.to_string(),
            r.y.to_string(),
            r.sigma.to_string(),
            r.z.to_string(),
            r.null_prob.to_string(),
            r.p_value.to_string(),
            r.posterior_mean.to_string(),
            r.posterior_mode.to_string(),
            r.ci_lower.to_string(),
            r.ci_upper.to_string(),
            r.reject.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
