//! Empirical Bayes estimation and multiple testing for heteroscedastic normal
//! means under a discretized spike-and-nonparametric prior.
//!
//! The pipeline: build a [`Grid`], fit a prior with [`fit_snp`] or
//! [`fit_dnp`], summarise posteriors with [`infer`], and test with
//! [`neb_opt`] or one of the p-value procedures in [`testing`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod em;
pub mod error;
pub mod io;
pub mod model;
pub mod posterior;
pub mod roots;
pub mod sim;
pub mod testing;

pub use em::{fit_dnp, fit_snp, marginal_loglik, EmConfig, EmTrace};
pub use error::{Error, Result};
pub use model::{
    build_grid, Dataset, DnpPrior, Grid, MixturePrior, PosteriorTable, Prior, PriorKind, SnpPrior,
};
pub use posterior::{
    credible_interval, infer, null_probability, null_region, posterior_mean, posterior_mode, posterior_table,
    sparsity_estimate, CredibleInterval, Inference, NullRegion, RegionWeighting,
};
pub use sim::{generate_dataset, run_monte_carlo, MonteCarloConfig, MonteCarloReport, SimDesign};
pub use testing::{adaptive_bh, adaptive_storey, bh, neb_opt, storey, z_to_pvalue, TestDecision};
