//! Exact likelihood of the toy detector and brute-force posterior grids.
//!
//! The grid posterior uses a flat prior over the grid extent, which is the exact posterior
//! for data generated with a uniform label prior on the same region (the trigger
//! probability cancels between the retained-event likelihood and the retained prior).

use std::f64::consts::PI;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::specfun::ln_gamma;
use crate::toymc::{arrival_params, DatasetSpec, Event, Label, Topology};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("grid axis {0} needs at least 2 points")]
    AxisTooShort(usize),
    #[error("grid needs 2 or 3 axes matching the label, got {0}")]
    AxisCount(usize),
    #[error("no samples given")]
    Empty,
    #[error("event {0} has no label")]
    MissingLabel(usize),
    #[error("mass must lie in (0, 1], got {0}")]
    Mass(f64),
    #[error("likelihood is zero on the whole grid")]
    ZeroLikelihood,
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// `ln k!` for hit counts.
pub fn ln_factorial(k: usize) -> f64 {
    ln_gamma(k as f64 + 1.0)
}

/// Per-module arrival-time law of a point emitter, with the expensive constants cached.
struct TimeLaw {
    offset: f64,
    shape_m1: f64,
    inv_scale: f64,
    norm: f64,
}

impl TimeLaw {
    fn new(spec: &DatasetSpec, d: f64) -> Self {
        let (offset, k, theta) = arrival_params(&spec.config, d);
        TimeLaw { offset, shape_m1: k - 1.0, inv_scale: 1.0 / theta, norm: -k * theta.ln() - ln_gamma(k) }
    }

    fn ln_pdf(&self, t: f64) -> f64 {
        let u = t - self.offset;
        if u > 0.0 {
            self.shape_m1 * u.ln() - u * self.inv_scale + self.norm
        } else if u == 0.0 && self.shape_m1 == 0.0 {
            self.norm
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// Extended Poisson-process log-likelihood
/// `sum_j [-lambda_j + k_j ln lambda_j - ln k_j!] + sum_i ln p_{j(i)}(t_i)`.
///
/// Returns `-inf` when a hit arrives before the causal offset of every emitter (zero
/// likelihood) or a module with zero expectation has hits.
pub fn log_likelihood(spec: &DatasetSpec, event: &Event, label: &Label, nu: f64) -> f64 {
    let n_mod = spec.config.modules.len();
    let emitters = spec.emitters(label);
    let mut lam = vec![0.0; n_mod];
    // laws[j] holds (relative weight, law) for each emitter.
    let mut laws: Vec<Vec<(f64, TimeLaw)>> = (0..n_mod).map(|_| Vec::with_capacity(emitters.len())).collect();
    for (p, dir, w) in &emitters {
        for (j, m) in spec.config.modules.iter().enumerate() {
            let l = w * crate::toymc::point_yield(&spec.config, *p, *dir, *m, nu);
            let d = ((m[0] - p[0]).powi(2) + (m[1] - p[1]).powi(2)).sqrt();
            lam[j] += l;
            laws[j].push((l, TimeLaw::new(spec, d)));
        }
    }
    let counts = event.counts(n_mod);
    let mut ll = 0.0;
    for j in 0..n_mod {
        let k = counts[j];
        if lam[j] > 0.0 {
            ll += -lam[j] + k as f64 * lam[j].ln() - ln_factorial(k);
        } else if k > 0 {
            return f64::NEG_INFINITY;
        }
    }
    for h in &event.hits {
        let ls = &laws[h.module];
        let lp = if ls.len() == 1 {
            ls[0].1.ln_pdf(h.t)
        } else {
            let total: f64 = ls.iter().map(|l| l.0).sum();
            let s: f64 = ls.iter().map(|(w, law)| w * law.ln_pdf(h.t).exp()).sum();
            (s / total).ln()
        };
        ll += lp;
        if ll == f64::NEG_INFINITY {
            return ll;
        }
    }
    ll
}

/// Evenly spaced grid axis. Non-periodic axes include both end points; periodic axes
/// place `n` points at `lo + i (hi - lo) / n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    pub periodic: bool,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, n: usize) -> Self {
        Axis { lo, hi, n, periodic: false }
    }

    pub fn angle(n: usize) -> Self {
        Axis { lo: 0.0, hi: 2.0 * PI, n, periodic: true }
    }

    pub fn step(&self) -> f64 {
        if self.periodic {
            (self.hi - self.lo) / self.n as f64
        } else {
            (self.hi - self.lo) / (self.n - 1) as f64
        }
    }

    pub fn point(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.step()
    }
}

/// Default grid for a dataset: 200 x 200 over the label region, plus 128 angle points for
/// directional labels.
pub fn default_axes(spec: &DatasetSpec) -> Vec<Axis> {
    let h = spec.half_width;
    let mut axes = vec![Axis::new(-h, h, 200), Axis::new(-h, h, 200)];
    if spec.directional {
        axes.push(Axis::angle(128));
    }
    axes
}

/// Normalized posterior density on a grid (Riemann normalization with the cell volume).
#[derive(Debug, Clone, PartialEq)]
pub struct GridPosterior {
    pub axes: Vec<Axis>,
    /// Row-major over the axes (last axis fastest). Cells with zero likelihood hold a
    /// finite floor far below the maximum.
    pub log_density: Vec<f64>,
    /// `ln` of the grid normalization constant of the likelihood.
    pub log_norm: f64,
    pub topology: Topology,
}

/// Floor below the maximum used for cells with zero likelihood.
pub const LOG_DENSITY_FLOOR: f64 = 1000.0;

fn grid_label(axes: &[Axis], idx: &[usize], topology: Topology) -> Label {
    Label {
        x: axes[0].point(idx[0]),
        y: axes[1].point(idx[1]),
        theta: if axes.len() == 3 { Some(axes[2].point(idx[2])) } else { None },
        topology,
    }
}

fn unravel(axes: &[Axis], mut flat: usize) -> Vec<usize> {
    let mut idx = vec![0; axes.len()];
    for (k, a) in axes.iter().enumerate().rev() {
        idx[k] = flat % a.n;
        flat /= a.n;
    }
    idx
}

/// Evaluates the exact posterior of `event` on the grid spanned by `axes`.
pub fn posterior_grid(spec: &DatasetSpec, event: &Event, axes: &[Axis]) -> Result<GridPosterior, OracleError> {
    let want = if spec.directional { 3 } else { 2 };
    if axes.len() != want {
        return Err(OracleError::AxisCount(axes.len()));
    }
    if let Some(i) = axes.iter().position(|a| a.n < 2) {
        return Err(OracleError::AxisTooShort(i));
    }
    let total: usize = axes.iter().map(|a| a.n).product();
    let topology = event.label.map(|l| l.topology).unwrap_or(spec.topology);
    let mut ll: Vec<f64> = (0..total)
        .map(|f| log_likelihood(spec, event, &grid_label(axes, &unravel(axes, f), topology), 1.0))
        .collect();
    let mx = ll.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return Err(OracleError::ZeroLikelihood);
    }
    let vol: f64 = axes.iter().map(|a| a.step()).product();
    let s: f64 = ll.iter().map(|v| (v - mx).exp()).sum();
    let log_norm = mx + (s * vol).ln();
    for v in ll.iter_mut() {
        *v = (*v - log_norm).max(mx - log_norm - LOG_DENSITY_FLOOR);
    }
    Ok(GridPosterior { axes: axes.to_vec(), log_density: ll, log_norm, topology })
}

impl GridPosterior {
    pub fn cell_volume(&self) -> f64 {
        self.axes.iter().map(|a| a.step()).product()
    }

    /// Total probability mass (1 up to rounding).
    pub fn mass(&self) -> f64 {
        self.log_density.iter().map(|v| v.exp()).sum::<f64>() * self.cell_volume()
    }

    /// Exact normalized log density at an arbitrary label.
    pub fn exact_log_density(&self, spec: &DatasetSpec, event: &Event, label: &Label) -> f64 {
        log_likelihood(spec, event, label, 1.0) - self.log_norm
    }

    /// Multilinear interpolation of the log density; periodic axes wrap.
    pub fn interpolate(&self, point: &[f64]) -> f64 {
        let d = self.axes.len();
        let mut base = vec![0usize; d];
        let mut frac = vec![0.0; d];
        for (k, a) in self.axes.iter().enumerate() {
            let mut u = (point[k] - a.lo) / a.step();
            if a.periodic {
                u = u.rem_euclid(a.n as f64);
                let i = (u.floor() as usize).min(a.n - 1);
                base[k] = i;
                frac[k] = u - i as f64;
            } else {
                u = u.clamp(0.0, (a.n - 1) as f64);
                let i = (u.floor() as usize).min(a.n - 2);
                base[k] = i;
                frac[k] = u - i as f64;
            }
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut flat = 0;
            for (k, a) in self.axes.iter().enumerate() {
                let bit = (corner >> k) & 1;
                let mut i = base[k] + bit;
                if a.periodic {
                    i %= a.n;
                }
                w *= if bit == 1 { frac[k] } else { 1.0 - frac[k] };
                flat = flat * a.n + i;
            }
            if w != 0.0 {
                acc += w * self.log_density[flat];
            }
        }
        acc
    }

    /// Grid points and their values, one row per cell in storage order.
    pub fn write_csv(&self, path: &Path) -> Result<(), OracleError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["x", "y"];
        if self.axes.len() == 3 {
            header.push("theta");
        }
        header.extend(["log_density", "density"]);
        w.write_record(&header)?;
        for (f, v) in self.log_density.iter().enumerate() {
            let idx = unravel(&self.axes, f);
            let mut row: Vec<String> = idx.iter().zip(&self.axes).map(|(i, a)| format!("{}", a.point(*i))).collect();
            row.push(format!("{v}"));
            row.push(format!("{}", v.exp()));
            w.write_record(&row)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Largest density threshold `tau` such that the cells with density `>= tau` carry at
/// least `mass` of the probability.
pub fn hpd_contour(grid: &GridPosterior, mass: f64) -> Result<f64, OracleError> {
    if !(mass > 0.0 && mass <= 1.0) {
        return Err(OracleError::Mass(mass));
    }
    let vol = grid.cell_volume();
    let mut dens: Vec<f64> = grid.log_density.iter().map(|v| v.exp()).collect();
    dens.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = dens.iter().sum::<f64>() * vol;
    let mut acc = 0.0;
    for &d in &dens {
        acc += d * vol;
        if acc >= mass * total * (1.0 - 1e-12) {
            return Ok(d);
        }
    }
    Ok(*dens.last().unwrap_or(&0.0))
}

/// Sample-based estimate `(1/N) sum_i [ln P_t(z_i | x_i) - ln q(z_i | x_i)]` of the KL
/// divergence from the true posterior to a model, where `z_i` are the true labels of
/// the events. The true log density at each label is the exact likelihood minus the
/// grid normalization of that event's posterior.
pub fn sample_kl_to_truth<F>(
    spec: &DatasetSpec,
    events: &[Event],
    axes: &[Axis],
    model_logprob: F,
) -> Result<f64, OracleError>
where
    F: Fn(usize, &Event) -> f64 + Sync,
{
    if events.is_empty() {
        return Err(OracleError::Empty);
    }
    if let Some(i) = events.iter().position(|e| e.label.is_none()) {
        return Err(OracleError::MissingLabel(i));
    }
    let terms: Result<Vec<f64>, OracleError> = events
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let g = posterior_grid(spec, e, axes)?;
            let truth = g.exact_log_density(spec, e, &e.label.unwrap());
            Ok(truth - model_logprob(i, e))
        })
        .collect();
    let terms = terms?;
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymc::{generate_dataset, PhotonHit, SystematicsSpec};

    /// Independent re-derivation of the likelihood for a single cascade.
    fn naive_ll(spec: &DatasetSpec, ev: &Event, l: &Label) -> f64 {
        let mut ll = 0.0;
        for (j, m) in spec.config.modules.iter().enumerate() {
            let d = ((m[0] - l.x).powi(2) + (m[1] - l.y).powi(2)).sqrt();
            let cos = if d > 0.0 { (m[0] - l.x) / d } else { 1.0 };
            let lam = 50.0 * (-d / 10.0).exp() * (1.0 + 0.5 * cos) / 1.5;
            let k = ev.hits.iter().filter(|h| h.module == j).count();
            let mut lk = 0.0;
            for i in 1..=k {
                lk += (i as f64).ln();
            }
            ll += -lam + k as f64 * lam.ln() - lk;
            let shape = 1.0 + d / 5.0;
            let scale = 5.0 * shape;
            for h in ev.hits.iter().filter(|h| h.module == j) {
                let u = h.t - d / 0.2;
                ll += (shape - 1.0) * u.ln() - u / scale - shape * scale.ln() - ln_gamma(shape);
            }
        }
        ll
    }

    #[test]
    fn likelihood_matches_naive_formula() {
        let data = generate_dataset(2, 20, 3, SystematicsSpec::default()).unwrap();
        let spec = &data.header.spec;
        for e in &data.events {
            let l = e.label.unwrap();
            let a = log_likelihood(spec, e, &l, 1.0);
            let b = naive_ll(spec, e, &l);
            assert!((a - b).abs() < 1e-9 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn single_hit_example() {
        // One module at the origin, label at 10 m, single hit at t = 60 ns.
        let spec = DatasetSpec::reference(1).unwrap();
        let l = Label::cascade(-10.0, 0.0);
        let ev = Event { label: Some(l), nu: 1.0, hits: vec![PhotonHit { module: 0, t: 60.0 }] };
        let lam = 50.0 * (-1f64).exp();
        // shape 3, scale 15, offset 50 ns
        let lt = 2.0 * 10f64.ln() - 10.0 / 15.0 - 3.0 * 15f64.ln() - 2f64.ln();
        let want = -lam + lam.ln() + lt;
        assert!((log_likelihood(&spec, &ev, &l, 1.0) - want).abs() < 1e-12);
    }

    #[test]
    fn grid_normalization_and_errors() {
        let data = generate_dataset(1, 3, 9, SystematicsSpec::default()).unwrap();
        let spec = &data.header.spec;
        let axes = [Axis::new(-20.0, 20.0, 80), Axis::new(-20.0, 20.0, 80)];
        for e in &data.events {
            let g = posterior_grid(spec, e, &axes).unwrap();
            assert!((g.mass() - 1.0).abs() < 1e-6);
            assert!(g.log_density.iter().all(|v| v.is_finite()));
            let tau = hpd_contour(&g, 0.68).unwrap();
            let inside: f64 = g.log_density.iter().map(|v| v.exp()).filter(|d| *d >= tau).sum::<f64>() * g.cell_volume();
            assert!(inside >= 0.68 - 1e-9);
        }
        let e = &data.events[0];
        assert!(matches!(
            posterior_grid(spec, e, &[Axis::new(-1.0, 1.0, 1), Axis::new(-1.0, 1.0, 5)]),
            Err(OracleError::AxisTooShort(0))
        ));
        assert!(matches!(sample_kl_to_truth(spec, &[], &axes, |_, _| 0.0), Err(OracleError::Empty)));
    }

    #[test]
    fn kl_of_truth_against_itself_is_zero() {
        let data = generate_dataset(1, 4, 11, SystematicsSpec::default()).unwrap();
        let spec = &data.header.spec;
        let axes = [Axis::new(-20.0, 20.0, 60), Axis::new(-20.0, 20.0, 60)];
        let kl = sample_kl_to_truth(spec, &data.events, &axes, |_, e| {
            let g = posterior_grid(spec, e, &axes).unwrap();
            g.exact_log_density(spec, e, &e.label.unwrap())
        })
        .unwrap();
        assert!(kl.abs() < 1e-3);
    }

    #[test]
    fn interpolation_hits_grid_points_and_wraps() {
        let data = generate_dataset(3, 1, 5, SystematicsSpec::default()).unwrap();
        let spec = &data.header.spec;
        let axes = [Axis::new(-20.0, 20.0, 161), Axis::new(-20.0, 20.0, 161), Axis::angle(8)];
        let g = posterior_grid(spec, &data.events[0], &axes).unwrap();
        let l = data.events[0].label.unwrap();
        let (i, j) = (((l.x + 20.0) / 0.25).round() as usize, ((l.y + 20.0) / 0.25).round() as usize);
        let f = i * 161 * 8 + j * 8 + 7;
        let p = [axes[0].point(i), axes[1].point(j), axes[2].point(7)];
        assert!((g.interpolate(&p) - g.log_density[f]).abs() < 1e-9);
        let wrapped = [p[0], p[1], p[2] + 2.0 * PI];
        assert!((g.interpolate(&wrapped) - g.log_density[f]).abs() < 1e-9);
        assert!((g.mass() - 1.0).abs() < 1e-9);
    }
}
