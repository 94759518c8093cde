//! Coverage of posterior credible regions and posterior-predictive goodness of fit.
//!
//! With a standard-normal base, the highest-density region of mass `alpha` is the pullback
//! of the ball `|zhat|^2 <= chi2_quantile(n, alpha)`. The coverage of a label is therefore
//! decided by the squared norm of its base point alone.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::condmodel::{Model, ModelError};
use crate::specfun::{chi2_quantile, SpecFunError};
use crate::toymc::{event_rng, Event};

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("no events")]
    Empty,
    #[error("event {0} has no label")]
    MissingLabel(usize),
    #[error("credibility levels must lie in (0, 1)")]
    Levels,
    #[error("n_sim must be at least 1")]
    NoSimulations,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Special(#[from] SpecFunError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// `-2 (ln p_b(zhat) - ln p_b(0)) = |zhat|^2`.
pub fn lambda_base(zhat: &[f64]) -> f64 {
    zhat.iter().map(|v| v * v).sum()
}

/// Levels 0.05, 0.10, ..., 0.95.
pub fn default_levels() -> Vec<f64> {
    (1..20).map(|i| i as f64 * 0.05).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    pub levels: Vec<f64>,
    pub actual: Vec<f64>,
    pub binomial_errors: Vec<f64>,
    pub n_events: usize,
    /// Events whose base point could not be computed; they are excluded.
    pub n_failed: usize,
}

#[derive(Serialize)]
struct CoverageRow {
    expected: f64,
    actual: f64,
    binomial_error: f64,
    n_events: usize,
    n_failed: usize,
}

impl CoverageReport {
    /// Coverage from `lambda` values of a posterior with a `dim`-dimensional base.
    pub fn from_lambdas(lambdas: &[f64], dim: u32, levels: &[f64], n_failed: usize) -> Result<Self, CalibError> {
        if levels.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
            return Err(CalibError::Levels);
        }
        if lambdas.is_empty() {
            return Err(CalibError::Empty);
        }
        let n = lambdas.len();
        let mut actual = Vec::with_capacity(levels.len());
        for &a in levels {
            let q = chi2_quantile(dim, a)?;
            actual.push(lambdas.iter().filter(|&&l| l <= q).count() as f64 / n as f64);
        }
        let binomial_errors = levels.iter().map(|a| (a * (1.0 - a) / n as f64).sqrt()).collect();
        Ok(CoverageReport { levels: levels.to_vec(), actual, binomial_errors, n_events: n, n_failed })
    }

    /// Largest `|actual - expected|` over the levels accepted by `keep`.
    pub fn max_deviation(&self, keep: impl Fn(f64) -> bool) -> f64 {
        self.levels
            .iter()
            .zip(&self.actual)
            .filter(|(l, _)| keep(**l))
            .map(|(l, a)| (a - l).abs())
            .fold(0.0, f64::max)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), CalibError> {
        let mut w = csv::Writer::from_path(path)?;
        for i in 0..self.levels.len() {
            w.serialize(CoverageRow {
                expected: self.levels[i],
                actual: self.actual[i],
                binomial_error: self.binomial_errors[i],
                n_events: self.n_events,
                n_failed: self.n_failed,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_svg(&self) -> String {
        let s = 300.0;
        let m = 30.0;
        let px = |v: f64| m + v * s;
        let py = |v: f64| m + (1.0 - v) * s;
        let mut out = String::new();
        let _ = write!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{w}"><rect x="{m}" y="{m}" width="{s}" height="{s}" fill="none" stroke="black"/><line x1="{}" y1="{}" x2="{}" y2="{}" stroke="gray" stroke-dasharray="4"/>"#,
            px(0.0),
            py(0.0),
            px(1.0),
            py(1.0),
            w = s + 2.0 * m
        );
        let pts: Vec<String> =
            self.levels.iter().zip(&self.actual).map(|(l, a)| format!("{:.2},{:.2}", px(*l), py(*a))).collect();
        let _ = write!(out, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#, pts.join(" "));
        let _ = write!(
            out,
            r#"<text x="{}" y="{}" font-size="12">expected</text><text x="4" y="{}" font-size="12">actual</text></svg>"#,
            px(0.4),
            py(0.0) + 20.0,
            py(0.5)
        );
        out
    }
}

/// Coverage of the posterior at the true labels of `events`.
pub fn coverage_curve(model: &Model, events: &[Event], levels: &[f64]) -> Result<CoverageReport, CalibError> {
    if events.is_empty() {
        return Err(CalibError::Empty);
    }
    if let Some(i) = events.iter().position(|e| e.label.is_none()) {
        return Err(CalibError::MissingLabel(i));
    }
    let lam: Vec<Option<f64>> = events
        .par_iter()
        .map(|e| {
            let post = model.posterior(e).ok()?;
            let z = post.base_point(&e.label.expect("checked")).ok()?;
            let l = lambda_base(&z);
            l.is_finite().then_some(l)
        })
        .collect();
    let ok: Vec<f64> = lam.iter().flatten().copied().collect();
    CoverageReport::from_lambdas(&ok, model.config.base_dim() as u32, levels, lam.len() - ok.len())
}

/// Outcome of one posterior-predictive check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GofOutcome {
    /// Fraction of simulations with `T(x_sim, z) > T(x_obs, z)`; NaN if none succeeded.
    pub p_value: f64,
    pub n_used: usize,
    /// Simulations lost to flow inversion failures.
    pub n_failed: usize,
}

/// Fraction of `(observed, simulated)` test-quantity pairs with `simulated > observed`;
/// NaN for an empty set.
pub fn predictive_pvalue(pairs: &[(f64, f64)]) -> f64 {
    if pairs.is_empty() {
        return f64::NAN;
    }
    pairs.iter().filter(|(o, s)| s > o).count() as f64 / pairs.len() as f64
}

/// Posterior-predictive p-value with the test quantity `ln p(x | z) / N_hits`.
pub fn gof_pvalue<R: Rng + ?Sized>(model: &Model, event: &Event, n_sim: usize, rng: &mut R) -> Result<GofOutcome, CalibError> {
    if n_sim == 0 {
        return Err(CalibError::NoSimulations);
    }
    let post = model.posterior(event)?;
    let mut pairs = Vec::with_capacity(n_sim);
    for _ in 0..n_sim {
        let zhat: Vec<f64> = (0..model.config.base_dim()).map(|_| rng.sample(StandardNormal)).collect();
        let Ok(s) = post.forward(&zhat) else {
            continue;
        };
        let resp = model.decoder_response(&[s.label.x, s.label.y])?;
        let sim = resp.sample(rng);
        pairs.push((resp.test_quantity(event), resp.test_quantity(&sim)));
    }
    let used = pairs.len();
    let p_value = predictive_pvalue(&pairs);
    Ok(GofOutcome { p_value, n_used: used, n_failed: n_sim - used })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GofReport {
    pub name: String,
    pub p_values: Vec<f64>,
    pub n_sim: usize,
    pub test_quantity: String,
    /// Failed simulations summed over events.
    pub n_failed: usize,
}

pub const TEST_QUANTITY: &str = "loglik_per_hit";

impl GofReport {
    /// Counts in `bins` equal bins on `[0, 1]`; NaN p-values are not counted.
    pub fn histogram(&self, bins: usize) -> Vec<usize> {
        let mut h = vec![0; bins];
        for &p in self.p_values.iter().filter(|p| p.is_finite()) {
            h[((p * bins as f64) as usize).min(bins - 1)] += 1;
        }
        h
    }

    /// Fraction of (finite) p-values strictly below `cut`.
    pub fn fraction_below(&self, cut: f64) -> f64 {
        let f: Vec<f64> = self.p_values.iter().copied().filter(|p| p.is_finite()).collect();
        f.iter().filter(|&&p| p < cut).count() as f64 / f.len().max(1) as f64
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), CalibError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["event", "p_value", "n_sim", "test_quantity"])?;
        for (i, p) in self.p_values.iter().enumerate() {
            w.write_record([i.to_string(), format!("{p}"), self.n_sim.to_string(), self.test_quantity.clone()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// p-values for several datasets under one model. Event `i` of dataset `k` uses the random
/// stream `(seed + k, i)`, so results do not depend on the worker count.
pub fn pvalue_histograms(
    model: &Model,
    datasets: &[(String, Vec<Event>)],
    n_sim: usize,
    seed: u64,
) -> Result<Vec<GofReport>, CalibError> {
    if datasets.is_empty() || datasets.iter().any(|d| d.1.is_empty()) {
        return Err(CalibError::Empty);
    }
    datasets
        .iter()
        .enumerate()
        .map(|(k, (name, events))| {
            let out: Result<Vec<GofOutcome>, CalibError> = events
                .par_iter()
                .enumerate()
                .map(|(i, e)| gof_pvalue(model, e, n_sim, &mut event_rng(seed.wrapping_add(k as u64), i as u64)))
                .collect();
            let out = out?;
            Ok(GofReport {
                name: name.clone(),
                p_values: out.iter().map(|o| o.p_value).collect(),
                n_sim,
                test_quantity: TEST_QUANTITY.into(),
                n_failed: out.iter().map(|o| o.n_failed).sum(),
            })
        })
        .collect()
}

/// Shared-bin histogram table: one row per bin, one count column per report.
pub fn write_histogram_csv(path: &Path, reports: &[GofReport], bins: usize) -> Result<(), CalibError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut head = vec!["bin_lo".to_string(), "bin_hi".to_string()];
    head.extend(reports.iter().map(|r| r.name.clone()));
    w.write_record(&head)?;
    let hs: Vec<Vec<usize>> = reports.iter().map(|r| r.histogram(bins)).collect();
    for b in 0..bins {
        let mut row = vec![format!("{}", b as f64 / bins as f64), format!("{}", (b + 1) as f64 / bins as f64)];
        row.extend(hs.iter().map(|h| h[b].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Normalized step histograms of several reports on shared bins.
pub fn histogram_svg(reports: &[GofReport], bins: usize) -> String {
    let (wd, ht, m) = (400.0, 250.0, 30.0);
    let colors = ["steelblue", "darkorange", "seagreen", "crimson", "purple"];
    let hs: Vec<Vec<f64>> = reports
        .iter()
        .map(|r| {
            let h = r.histogram(bins);
            let n = h.iter().sum::<usize>().max(1) as f64;
            h.iter().map(|&c| c as f64 / n * bins as f64).collect()
        })
        .collect();
    let top = hs.iter().flatten().cloned().fold(1.0, f64::max) * 1.1;
    let mut out = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}"><rect x="{m}" y="{m}" width="{wd}" height="{ht}" fill="none" stroke="black"/>"#,
        wd + 2.0 * m,
        ht + 2.0 * m
    );
    for (k, h) in hs.iter().enumerate() {
        let mut pts = Vec::new();
        for (b, v) in h.iter().enumerate() {
            let y = m + ht * (1.0 - v / top);
            pts.push(format!("{:.1},{:.1}", m + wd * b as f64 / bins as f64, y));
            pts.push(format!("{:.1},{:.1}", m + wd * (b + 1) as f64 / bins as f64, y));
        }
        let c = colors[k % colors.len()];
        let _ = write!(out, r#"<polyline points="{}" fill="none" stroke="{c}"/>"#, pts.join(" "));
        let _ = write!(out, r#"<text x="{}" y="{}" font-size="12" fill="{c}">{}</text>"#, m + 5.0, m + 15.0 * (k + 1) as f64, reports[k].name);
    }
    out.push_str("</svg>");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::ks_statistic;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lambda_examples() {
        assert_eq!(lambda_base(&[0.0, 0.0]), 0.0);
        assert_eq!(lambda_base(&[1.0, 1.0]), 2.0);
    }

    #[test]
    fn exact_gaussian_posterior_is_calibrated_and_narrow_one_undercovers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 20_000;
        let levels = default_levels();
        let mut exact = Vec::with_capacity(n);
        let mut narrow = Vec::with_capacity(n);
        for _ in 0..n {
            let z: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
            exact.push(lambda_base(&z));
            narrow.push(lambda_base(&[2.0 * z[0], 2.0 * z[1]]));
        }
        let a = CoverageReport::from_lambdas(&exact, 2, &levels, 0).unwrap();
        for i in 0..levels.len() {
            assert!((a.actual[i] - levels[i]).abs() < 3.0 * a.binomial_errors[i] + 1e-12);
        }
        let b = CoverageReport::from_lambdas(&narrow, 2, &levels, 0).unwrap();
        assert!(b.actual.iter().zip(&levels).all(|(x, l)| x < l));
        assert!(a.actual.windows(2).all(|w| w[0] <= w[1]));
        let ks = ks_statistic(&exact, |x| 1.0 - (-x / 2.0).exp());
        assert!(ks < 1.63 / (n as f64).sqrt());
    }

    #[test]
    fn histogram_and_fractions() {
        let r = GofReport { name: "a".into(), p_values: vec![0.0, 0.01, 0.5, 1.0, f64::NAN], n_sim: 100, test_quantity: TEST_QUANTITY.into(), n_failed: 0 };
        assert_eq!(r.histogram(10), vec![2, 0, 0, 0, 0, 1, 0, 0, 0, 1]);
        assert_eq!(r.fraction_below(0.05), 0.5);
    }
}
