//! Flat-to-sphere map: a standard normal on R^d is carried to the uniform distribution on
//! S^d by matching radial CDFs with the stereographic projection.
//!
//! `rho_tot(r, d)` is the polar angle (measured from the north pole) assigned to a base
//! point of norm `r`. Both tails are handled through the upper incomplete gamma and the
//! inversion symmetry `1 - CDF_f(r) = CDF_f(1 / r)` of the projected radial CDF, so no
//! probability is ever formed as `1 - p` close to one.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use super::FlowError;
use crate::specfun::{
    gauss_2f1, ln_gamma, reg_lower_gamma, reg_upper_gamma, solve_monotone_newton, RootBracket,
};

/// `ln` of the surface area of the unit sphere `S^d` embedded in `R^{d+1}`.
pub fn ln_sphere_area(d: usize) -> f64 {
    let h = (d as f64 + 1.0) / 2.0;
    std::f64::consts::LN_2 + h * PI.ln() - ln_gamma(h)
}

/// Radial CDF of the stereographic projection of the uniform sphere, for `r <= 1`.
fn flat_cdf_small(d: usize, r: f64) -> f64 {
    if r <= 0.0 {
        return 0.0;
    }
    let df = d as f64;
    let pref = (ln_sphere_area(d - 1) - ln_sphere_area(d) + df * (2.0 * r).ln() - df.ln()).exp();
    pref * gauss_2f1(df / 2.0, df, df / 2.0 + 1.0, -r * r).expect("argument is non-positive and small")
}

/// Radial density matching [`flat_cdf_small`].
fn flat_pdf(d: usize, r: f64) -> f64 {
    let df = d as f64;
    (ln_sphere_area(d - 1) - ln_sphere_area(d) + (df - 1.0) * r.ln() + df * (2.0 / (1.0 + r * r)).ln()).exp()
}

/// Radial CDF of the projected uniform sphere, `CDF_f(r)`.
pub fn flat_cdf(d: usize, r: f64) -> f64 {
    if r <= 1.0 {
        flat_cdf_small(d, r)
    } else {
        1.0 - flat_cdf_small(d, 1.0 / r)
    }
}

/// Solves `flat_cdf_small(d, s) = p` for `s in [0, 1]`, with `p <= 1/2`.
fn flat_cdf_small_inverse(d: usize, p: f64) -> Result<f64, FlowError> {
    if p <= 0.0 {
        return Ok(0.0);
    }
    let f = |s: f64| (flat_cdf_small(d, s) - p, flat_pdf(d, s));
    let b = RootBracket { lo: 0.0, hi: 1.0, f_lo: -p, f_hi: 0.5 - p };
    if p >= 0.5 {
        return Ok(1.0);
    }
    Ok(solve_monotone_newton(f, b, 1e-16)?)
}

fn check_d(d: usize) -> Result<(), FlowError> {
    if d == 0 {
        Err(FlowError::Domain("sphere dimension must be >= 1".into()))
    } else {
        Ok(())
    }
}

/// Polar angle assigned to a base point of norm `r`.
pub fn rho_tot(r: f64, d: usize) -> Result<f64, FlowError> {
    check_d(d)?;
    if !(r >= 0.0) || !r.is_finite() {
        return Err(FlowError::Domain(format!("radius must be finite and non-negative, got {r}")));
    }
    let a = d as f64 / 2.0;
    let x = r * r / 2.0;
    let lower = reg_lower_gamma(a, x)?;
    if lower <= 0.5 {
        let rf = flat_cdf_small_inverse(d, lower)?;
        Ok(PI - 2.0 * rf.atan())
    } else {
        let upper = reg_upper_gamma(a, x)?;
        let s = flat_cdf_small_inverse(d, upper)?;
        Ok(2.0 * s.atan())
    }
}

/// Inverse of [`rho_tot`]; the poles `rho = 0` and `rho = pi` are outside the domain.
pub fn rho_tot_inverse(rho: f64, d: usize) -> Result<f64, FlowError> {
    check_d(d)?;
    if !(rho > 0.0 && rho < PI) {
        return Err(FlowError::Domain(format!("polar angle must lie in (0, pi), got {rho}")));
    }
    let a = d as f64 / 2.0;
    // Stereographic radius r_f = cot(rho / 2); its inverse-side radius s = tan(rho / 2).
    let s = (rho / 2.0).tan();
    let lower_target = |p: f64| -> Result<f64, FlowError> {
        // Solve P(a, r^2/2) = p for r.
        let mut hi = 1.0;
        while reg_lower_gamma(a, hi * hi / 2.0)? < p {
            hi *= 2.0;
        }
        let b = RootBracket::new(|r| reg_lower_gamma(a, r * r / 2.0).unwrap_or(f64::NAN) - p, 0.0, hi)?;
        Ok(solve_monotone_newton(
            |r| (reg_lower_gamma(a, r * r / 2.0).unwrap_or(f64::NAN) - p, chi_pdf(d, r)),
            b,
            1e-15,
        )?)
    };
    if s >= 1.0 {
        // Lower half of the flat CDF: CDF_f(r_f) with r_f = 1 / s <= 1.
        lower_target(flat_cdf_small(d, 1.0 / s))
    } else {
        // Upper tail: Q(a, r^2/2) = CDF_f(s).
        let q = flat_cdf_small(d, s);
        let mut hi = 2.0;
        while reg_upper_gamma(a, hi * hi / 2.0)? > q {
            hi *= 2.0;
        }
        let g = |r: f64| -(reg_upper_gamma(a, r * r / 2.0).unwrap_or(f64::NAN).ln()) + q.ln();
        let lo = 0.0;
        let b = RootBracket::new(g, lo, hi)?;
        Ok(solve_monotone_newton(
            |r| {
                let qq = reg_upper_gamma(a, r * r / 2.0).unwrap_or(f64::NAN);
                (-(qq.ln()) + q.ln(), chi_pdf(d, r) / qq)
            },
            b,
            1e-15,
        )?)
    }
}

/// Density of the norm of a standard normal vector in `R^d` (chi distribution).
fn chi_pdf(d: usize, r: f64) -> f64 {
    let df = d as f64;
    ((df - 1.0) * r.ln() - r * r / 2.0 - (df / 2.0 - 1.0) * std::f64::consts::LN_2 - ln_gamma(df / 2.0)).exp()
}

/// Closed form of [`rho_tot`] for `d = 1`.
pub fn rho_tot_closed_d1(r: f64) -> f64 {
    PI * crate::specfun::erfc(r / std::f64::consts::SQRT_2)
}

/// Closed form of [`rho_tot`] for `d = 2`.
pub fn rho_tot_closed_d2(r: f64) -> f64 {
    // arccos(1 - 2u) = 2 asin(sqrt(u)), which avoids cancellation for small u.
    2.0 * (-r * r / 4.0).exp().asin()
}

/// Maps a base point in `R^d` onto the unit sphere `S^d` in `R^{d+1}`.
pub fn flat_to_sphere(zhat: &[f64]) -> Result<Vec<f64>, FlowError> {
    let d = zhat.len();
    let r = zhat.iter().map(|v| v * v).sum::<f64>().sqrt();
    let rho = rho_tot(r, d)?;
    let (s, c) = rho.sin_cos();
    let mut y: Vec<f64> = if r > 0.0 { zhat.iter().map(|v| s * v / r).collect() } else { vec![0.0; d] };
    y.push(c);
    Ok(y)
}

/// Inverse of [`flat_to_sphere`]; the poles have no preimage.
pub fn sphere_to_flat(y: &[f64]) -> Result<Vec<f64>, FlowError> {
    let d = y.len() - 1;
    let c = y[d].clamp(-1.0, 1.0);
    let s = y[..d].iter().map(|v| v * v).sum::<f64>().sqrt();
    let rho = s.atan2(c);
    let r = rho_tot_inverse(rho, d)?;
    Ok(y[..d].iter().map(|v| r * v / s).collect())
}

/// Base-to-sphere block. By construction the pushforward of the standard normal is the
/// uniform distribution, so `ln |det J|` of the sphere-ward map is `ln N(zhat) + ln |S^d|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphereFlatBlock {
    pub d: usize,
}

impl SphereFlatBlock {
    pub fn log_det_forward(&self, zhat: &[f64]) -> f64 {
        super::ln_normal(zhat) + ln_sphere_area(self.d)
    }
}

/// Uniform samples on `S^d`, drawn by pushing standard normals through the flat block.
pub fn sample_uniform_sphere_via_flow<R: Rng + ?Sized>(d: usize, n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>, FlowError> {
    check_d(d)?;
    (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            flat_to_sphere(&z)
        })
        .collect()
}

/// Log density of a point on `S^d` under the flat-block chain, `ln N(zhat) - ln |det J|`.
pub fn sphere_log_prob(y: &[f64]) -> Result<f64, FlowError> {
    let z = sphere_to_flat(y)?;
    let b = SphereFlatBlock { d: z.len() };
    Ok(super::ln_normal(&z) - b.log_det_forward(&z))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms_agree() {
        for &r in &[1e-6, 0.01, 0.3, 1.0, 2.5, 6.0, 9.0] {
            let a = rho_tot(r, 1).unwrap();
            assert!((a - rho_tot_closed_d1(r)).abs() < 1e-8 * PI.max(a), "d=1 r={r}: {a}");
            let b = rho_tot(r, 2).unwrap();
            assert!((b - rho_tot_closed_d2(r)).abs() < 1e-8, "d=2 r={r}: {b}");
        }
    }

    #[test]
    fn flat_cdf_special_cases() {
        for &r in &[0.1f64, 0.7, 1.0, 3.0] {
            assert!((flat_cdf(1, r) - 2.0 / PI * r.atan()).abs() < 1e-14);
            assert!((flat_cdf(2, r) - r * r / (1.0 + r * r)).abs() < 1e-14);
        }
        assert!((flat_cdf(3, 1.0) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn round_trips() {
        for d in 1..=4 {
            for &r in &[1e-3, 0.2, 1.0, 2.0, 4.0, 7.0] {
                let rho = rho_tot(r, d).unwrap();
                let back = rho_tot_inverse(rho, d).unwrap();
                assert!((back - r).abs() < 1e-6, "d={d} r={r} back={back}");
            }
        }
        assert!(rho_tot_inverse(0.0, 2).is_err());
        assert!(rho_tot_inverse(PI, 2).is_err());
    }

    #[test]
    fn uniform_chain_density() {
        let y = flat_to_sphere(&[0.3, -1.1]).unwrap();
        assert!((y.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((sphere_log_prob(&y).unwrap() + (4.0 * PI).ln()).abs() < 1e-12);
    }
}
