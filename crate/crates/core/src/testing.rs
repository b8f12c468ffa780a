//! Rejection procedures: NEB-OPT on posterior null probabilities, and the
//! p-value step-up family (BH, Storey, and their sparsity-adaptive forms).

use libm::erfc;
use serde::Serialize;

use crate::error::{invalid, Error, Result};

/// Largest problem size accepted by [`brute_force_optimal`].
pub const ORACLE_MAX_M: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestDecision {
    pub reject: Vec<bool>,
    pub k_rejected: usize,
    /// Sorted null probabilities; empty for p-value procedures.
    pub ordered_null_probs: Vec<f64>,
    pub alpha: f64,
}

impl TestDecision {
    fn from_flags(reject: Vec<bool>, ordered_null_probs: Vec<f64>, alpha: f64) -> Self {
        let k_rejected = reject.iter().filter(|r| **r).count();
        Self { reject, k_rejected, ordered_null_probs, alpha }
    }

    pub fn rejected_indices(&self) -> Vec<usize> {
        (0..self.reject.len()).filter(|&i| self.reject[i]).collect()
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

fn check_unit(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(i) => Err(invalid(format!("{what}[{i}] = {} is outside [0, 1]", values[i]))),
        None => Ok(()),
    }
}

fn check_w_hat(w_hat: f64) -> Result<()> {
    if w_hat > 0.0 && w_hat <= 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("w_hat must lie in (0, 1], got {w_hat}")))
    }
}

/// Indices ordered by value, ties kept in index order.
fn ascending_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    idx
}

/// Mean of the `k` smallest null probabilities; zero when `k = 0`.
pub fn conditional_fdr(sorted_probs: &[f64], k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let k = k.min(sorted_probs.len());
    sorted_probs[..k].iter().sum::<f64>() / k as f64
}

/// Rejects the largest prefix of the ascending null probabilities whose
/// running mean stays at or below `alpha`.
pub fn neb_opt(null_probs: &[f64], alpha: f64) -> Result<TestDecision> {
    check_alpha(alpha)?;
    check_unit(null_probs, "null_probs")?;
    let order = ascending_order(null_probs);
    let sorted: Vec<f64> = order.iter().map(|&i| null_probs[i]).collect();
    let mut cum = 0.0;
    let mut k = 0;
    for (j, p) in sorted.iter().enumerate() {
        cum += p;
        if cum / (j + 1) as f64 <= alpha {
            k = j + 1;
        }
    }
    let mut reject = vec![false; null_probs.len()];
    for &i in &order[..k] {
        reject[i] = true;
    }
    Ok(TestDecision::from_flags(reject, sorted, alpha))
}

/// Exhaustive search for the size-`k` rejection set minimising the expected
/// number of missed signals, `sum over accepted i of (1 - p_i)`.
pub fn brute_force_optimal(null_probs: &[f64], k: usize) -> Result<Vec<usize>> {
    let m = null_probs.len();
    if m > ORACLE_MAX_M {
        return Err(Error::OracleScale { m, max: ORACLE_MAX_M });
    }
    if k > m {
        return Err(invalid(format!("k = {k} exceeds m = {m}")));
    }
    let mut best: Option<(f64, u32)> = None;
    for mask in 0u32..(1u32 << m) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let loss: f64 = (0..m).filter(|i| mask & (1 << i) == 0).map(|i| 1.0 - null_probs[i]).sum();
        if best.is_none_or(|(b, _)| loss < b) {
            best = Some((loss, mask));
        }
    }
    let mask = best.map_or(0, |(_, m)| m);
    Ok((0..m).filter(|i| mask & (1 << i) != 0).collect())
}

/// Two-sided p-value `2 * Phi(-|z| / null_sd)`.
pub fn z_to_pvalue(z: f64, null_sd: f64) -> Result<f64> {
    if !(null_sd > 0.0 && null_sd.is_finite()) {
        return Err(invalid(format!("null_sd must be positive, got {null_sd}")));
    }
    if z.is_nan() {
        return Err(invalid("z is NaN"));
    }
    Ok(erfc(z.abs() / (null_sd * std::f64::consts::SQRT_2)).clamp(0.0, 1.0))
}

/// Benjamini-Hochberg step-up.
pub fn bh(pvals: &[f64], alpha: f64) -> Result<TestDecision> {
    adaptive_bh(pvals, alpha, 1.0)
}

/// Step-up with thresholds `i * alpha / (m * w_hat)`.
pub fn adaptive_bh(pvals: &[f64], alpha: f64, w_hat: f64) -> Result<TestDecision> {
    check_alpha(alpha)?;
    check_unit(pvals, "pvals")?;
    check_w_hat(w_hat)?;
    let m = pvals.len();
    let order = ascending_order(pvals);
    let k =
        (1..=m).rev().find(|&i| pvals[order[i - 1]] <= i as f64 * alpha / (m as f64 * w_hat)).unwrap_or(0);
    let mut reject = vec![false; m];
    for &i in &order[..k] {
        reject[i] = true;
    }
    Ok(TestDecision::from_flags(reject, Vec::new(), alpha))
}

/// Storey's null-count estimate, capped at `m` and floored at 1.
pub fn storey_m0(pvals: &[f64], lambda: f64) -> f64 {
    let m = pvals.len() as f64;
    let above = pvals.iter().filter(|p| **p > lambda).count() as f64;
    (above / (1.0 - lambda)).min(m).max(1.0)
}

/// Storey's procedure with tuning parameter `lambda`.
pub fn storey(pvals: &[f64], alpha: f64, lambda: f64) -> Result<TestDecision> {
    check_alpha(alpha)?;
    check_unit(pvals, "pvals")?;
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(invalid(format!("lambda must lie in (0, 1), got {lambda}")));
    }
    Ok(storey_with_m0(pvals, alpha, storey_m0(pvals, lambda)))
}

/// Storey's threshold search with `m0` replaced by `w_hat * m`.
pub fn adaptive_storey(pvals: &[f64], alpha: f64, w_hat: f64) -> Result<TestDecision> {
    check_alpha(alpha)?;
    check_unit(pvals, "pvals")?;
    check_w_hat(w_hat)?;
    Ok(storey_with_m0(pvals, alpha, w_hat * pvals.len() as f64))
}

/// Rejects every p-value at or below the largest observed `t` with
/// `m0 * t / max(R(t), 1) <= alpha`.
fn storey_with_m0(pvals: &[f64], alpha: f64, m0: f64) -> TestDecision {
    let m = pvals.len();
    let order = ascending_order(pvals);
    let mut cutoff = None;
    let mut i = 0;
    while i < m {
        let t = pvals[order[i]];
        // R(t) counts every tied value
        let mut r = i + 1;
        while r < m && pvals[order[r]] == t {
            r += 1;
        }
        if m0 * t / r as f64 <= alpha {
            cutoff = Some(r);
        }
        i = r;
    }
    let mut reject = vec![false; m];
    for &j in &order[..cutoff.unwrap_or(0)] {
        reject[j] = true;
    }
    TestDecision::from_flags(reject, Vec::new(), alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn neb_opt_examples() {
        assert_eq!(neb_opt(&[0.0; 4], 0.05).unwrap().k_rejected, 4);
        assert_eq!(neb_opt(&[1.0; 4], 0.05).unwrap().k_rejected, 0);
        let d = neb_opt(&[0.20, 0.01, 0.04], 0.05).unwrap();
        assert_eq!(d.k_rejected, 2);
        assert_eq!(d.reject, vec![false, true, true]);
        assert_eq!(d.ordered_null_probs, vec![0.01, 0.04, 0.20]);
        assert!(neb_opt(&[], 0.05).unwrap().reject.is_empty());
        assert!(neb_opt(&[0.5], 1.0).is_err());
        assert!(neb_opt(&[1.5], 0.1).is_err());
    }

    #[test]
    fn neb_opt_ties_follow_index_order() {
        let d = neb_opt(&[0.0, 0.1, 0.1, 0.1], 0.05).unwrap();
        // prefix means 0, 0.05, 0.0667: two rejections, first tied index wins
        assert_eq!(d.reject, vec![true, true, false, false]);
    }

    #[test]
    fn conditional_fdr_examples() {
        assert_abs_diff_eq!(conditional_fdr(&[0.3; 5], 5), 0.3, epsilon = 1e-15);
        assert_eq!(conditional_fdr(&[0.01, 0.04, 0.2], 1), 0.01);
        assert_abs_diff_eq!(conditional_fdr(&[0.01, 0.04, 0.2], 3), 0.25 / 3.0, epsilon = 1e-15);
        assert_eq!(conditional_fdr(&[0.01], 0), 0.0);
    }

    #[test]
    fn brute_force_examples() {
        let p = [0.3, 0.1, 0.7, 0.05];
        assert_eq!(brute_force_optimal(&p, 4).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(brute_force_optimal(&p, 1).unwrap(), vec![3]);
        assert_eq!(brute_force_optimal(&p, 2).unwrap(), vec![1, 3]);
        assert!(brute_force_optimal(&p, 0).unwrap().is_empty());
        assert!(matches!(brute_force_optimal(&[0.5; 21], 3), Err(Error::OracleScale { m: 21, max: 20 })));
    }

    #[test]
    fn pvalue_examples() {
        assert_eq!(z_to_pvalue(0.0, 1.0).unwrap(), 1.0);
        assert_abs_diff_eq!(z_to_pvalue(1.959964, 1.0).unwrap(), 0.05, epsilon = 1e-6);
        assert_abs_diff_eq!(z_to_pvalue(-1.959964, 1.0).unwrap(), 0.05, epsilon = 1e-6);
        assert!(z_to_pvalue(1.0, 0.0).is_err());
        assert_eq!(z_to_pvalue(f64::INFINITY, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn bh_examples() {
        assert_eq!(bh(&[0.0; 3], 0.05).unwrap().k_rejected, 3);
        assert_eq!(bh(&[1.0; 3], 0.05).unwrap().k_rejected, 0);
        let d = bh(&[0.01, 0.02, 0.9], 0.05).unwrap();
        assert_eq!(d.reject, vec![true, true, false]);
        // step-up: a large p early does not block later qualifiers
        let d = bh(&[0.04, 0.045, 0.03], 0.05).unwrap();
        assert_eq!(d.k_rejected, 3);
    }

    #[test]
    fn adaptive_bh_examples() {
        let p = [0.01, 0.02, 0.9];
        let d = adaptive_bh(&p, 0.05, 0.5).unwrap();
        assert_eq!(d.k_rejected, 2);
        // 0.06 sits between the bh threshold 0.05 and the doubled 0.1
        let p = [0.01, 0.02, 0.06];
        assert_eq!(bh(&p, 0.05).unwrap().k_rejected, 2);
        assert_eq!(adaptive_bh(&p, 0.05, 0.5).unwrap().k_rejected, 3);
        assert_eq!(adaptive_bh(&p, 0.05, 1.0).unwrap(), bh(&p, 0.05).unwrap());
        assert!(adaptive_bh(&p, 0.05, 0.0).is_err());
        assert!(adaptive_bh(&p, 0.05, 1.5).is_err());
    }

    #[test]
    fn storey_examples() {
        let d = storey(&[0.7, 0.8, 0.9], 0.05, 0.5).unwrap();
        assert_eq!(d.k_rejected, 0);
        assert_eq!(storey(&[0.0; 4], 0.05, 0.5).unwrap().k_rejected, 4);
        let p = [0.001, 0.002, 0.6, 0.7, 0.8];
        // three values exceed 0.5, so m0 = 3 / 0.5 = 6, capped at 5
        assert_eq!(storey_m0(&p, 0.5), 5.0);
        let d = storey(&p, 0.05, 0.5).unwrap();
        assert_eq!(d.reject, vec![true, true, false, false, false]);
        assert_eq!(storey_m0(&[0.01, 0.02], 0.5), 1.0);
        assert!(storey(&p, 0.05, 1.0).is_err());
    }

    #[test]
    fn adaptive_storey_examples() {
        let p = [0.001, 0.002, 0.6];
        let d = adaptive_storey(&p, 0.05, 2.0 / 3.0).unwrap();
        assert_eq!(d.reject, vec![true, true, false]);
        let full = adaptive_storey(&p, 0.05, 1.0).unwrap();
        assert_eq!(full, storey_with_m0(&p, 0.05, 3.0));
        let tiny = adaptive_storey(&[0.2, 0.5, 0.9], 0.05, 1e-12).unwrap();
        assert_eq!(tiny.k_rejected, 3);
    }

    #[test]
    fn storey_counts_ties_together() {
        // R(t) at t = 0.02 is 3, so m0 * t / R = 5 * 0.02 / 3 qualifies
        let p = [0.02, 0.02, 0.02, 0.9, 0.95];
        let d = adaptive_storey(&p, 0.05, 1.0).unwrap();
        assert_eq!(d.k_rejected, 3);
    }
}
