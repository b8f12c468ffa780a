#![allow(dead_code)]

use snpeb::*;

pub fn small_grid(left: usize, right: usize, h: f64) -> Grid {
    let pts = (0..=left + right).map(|j| (j as f64 - left as f64) * h).collect();
    Grid::from_points(pts).unwrap()
}

pub fn normalize(w: &[f64]) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

pub fn phi(y: f64, mu: f64, s: f64) -> f64 {
    let z = (y - mu) / s;
    (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
}

/// Direct-space Bayes rule on the grid.
pub fn oracle_posterior(points: &[f64], prior: &[f64], y: f64, s: f64) -> Vec<f64> {
    let joint: Vec<f64> = points.iter().zip(prior).map(|(t, p)| p * phi(y, *t, s)).collect();
    normalize(&joint)
}

pub fn oracle_interval(points: &[f64], post: &[f64], alpha: f64) -> (f64, f64) {
    let quantile = |q: f64| {
        let mut cum = 0.0;
        for (t, p) in points.iter().zip(post) {
            cum += p;
            if cum >= q {
                return *t;
            }
        }
        *points.last().unwrap()
    };
    (quantile(alpha / 2.0), quantile(1.0 - alpha / 2.0))
}

pub fn oracle_spike(points: &[f64], lambda0: f64) -> Vec<f64> {
    normalize(&points.iter().map(|t| (-lambda0 * t.abs()).exp()).collect::<Vec<_>>())
}

pub fn oracle_region(points: &[f64], spike: &[f64], gamma: &[f64], omega: f64) -> (f64, f64) {
    let z = points.iter().position(|t| *t == 0.0).unwrap();
    let d: Vec<f64> = (0..points.len()).map(|j| omega * spike[j] - (1.0 - omega) * gamma[j]).collect();
    if d[z] == 0.0 {
        return (0.0, 0.0);
    }
    let sign = d[z].signum();
    let pick = |inner: usize, outer: usize| {
        if d[inner] / (d[inner] - d[outer]) <= 0.5 {
            points[inner]
        } else {
            points[outer]
        }
    };
    let flipped = |j: &usize| d[*j].signum() == -sign && d[*j] != 0.0;
    let hi = (z + 1..points.len()).find(flipped).map_or(f64::INFINITY, |j| pick(j - 1, j));
    let lo = (0..z).rev().find(flipped).map_or(f64::NEG_INFINITY, |j| pick(j + 1, j));
    (lo, hi)
}

/// Compares every per-observation summary of `prior` with the direct
/// computation from `theta` and the null set `[lo, hi]`.
pub fn check_bayes(
    prior: &Prior,
    theta: &[f64],
    (lo, hi): (f64, f64),
    y: &[f64],
    s: &[f64],
    alpha: f64,
) -> std::result::Result<(), String> {
    let grid = match prior {
        Prior::Dnp(p) => p.grid(),
        Prior::Snp(p) => p.grid(),
    };
    let pts = grid.points();
    let data = Dataset::new(y.to_vec(), s.to_vec()).unwrap();
    let inf = infer(prior, &data, alpha, RegionWeighting::Weighted).map_err(|e| e.to_string())?;
    let close = |a: f64, b: f64, what: &str, i: usize| {
        if (a - b).abs() <= 1e-12 {
            Ok(())
        } else {
            Err(format!("{what} at {i}: {a} vs {b}"))
        }
    };
    for i in 0..y.len() {
        let post = oracle_posterior(pts, theta, y[i], s[i]);
        let table = posterior_table(prior, y[i], s[i]).map_err(|e| e.to_string())?;
        for (a, b) in table.mass().iter().zip(&post) {
            close(*a, *b, "table", i)?;
        }
        let mean: f64 = pts.iter().zip(&post).map(|(t, p)| t * p).sum();
        close(inf.posterior_mean[i], mean, "mean", i)?;
        let null: f64 = pts.iter().zip(&post).filter(|(t, _)| lo <= **t && **t <= hi).map(|(_, p)| p).sum();
        close(inf.null_probs[i], null, "null probability", i)?;
        let ci = oracle_interval(pts, &post, alpha);
        if (inf.intervals[i].lower, inf.intervals[i].upper) != ci {
            return Err(format!("interval at {i}: {:?} vs {ci:?}", inf.intervals[i]));
        }
    }
    Ok(())
}

/// Standard normal upper tail from the Maclaurin series of erf.
pub fn upper_tail(x: f64) -> f64 {
    let u = x / 2f64.sqrt();
    let (mut term, mut erf) = (u, 0.0);
    for n in 0..200 {
        erf += term / (2 * n + 1) as f64;
        term *= -u * u / (n + 1) as f64;
    }
    0.5 - erf / std::f64::consts::PI.sqrt()
}
