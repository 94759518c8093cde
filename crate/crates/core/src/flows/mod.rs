//! Normalizing flows on R^n, the circle and spheres.
//!
//! Every block is parameterized in the normalizing direction `g: target -> base`, which
//! makes densities, log-determinants and the base point of any label analytic. Sampling
//! inverts the Gaussianization and Moebius blocks numerically. When a sample has to carry
//! gradients, the inverted point `u*` enters the tape through one Newton step
//! `u = u* - J^{-1} (g(u*) - v)` with `J` held constant. Its value equals `u*` and its
//! first derivatives equal those of the exact inverse (implicit function theorem).
//!
//! [`FlowChain`] holds blocks in normalizing order together with concrete parameters.
//! [`ChainSpec`] describes a chain whose parameters come from a flat vector (a network
//! output or a free parameter slot) and builds both the numeric chain and tape graphs.

pub mod sphere;

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradcore::{Tape, Var};
use crate::specfun::{norm_ln_cdf, norm_ln_pdf, probit_from_logs, solve_monotone_newton, RootBracket, SpecFunError};

pub use sphere::{
    flat_to_sphere, ln_sphere_area, rho_tot, rho_tot_inverse, sample_uniform_sphere_via_flow, sphere_log_prob,
    sphere_to_flat, SphereFlatBlock,
};

const TWO_PI: f64 = 2.0 * PI;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
/// Moebius centers live strictly inside this radius.
pub const MOEBIUS_MAX_RADIUS: f64 = 0.99;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("root finding failed: {0}")]
    Root(#[from] SpecFunError),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("parameter vector has length {got}, expected {expected}")]
    Params { expected: usize, got: usize },
}

/// `ln N(z; 0, I)`.
pub fn ln_normal(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - z.len() as f64 * LN_SQRT_2PI
}

fn log_sigmoid(x: f64) -> f64 {
    -crate::gradcore::softplus(-x)
}

fn lse(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax_log(logits: &[f64]) -> Vec<f64> {
    let l = lse(logits);
    logits.iter().map(|x| x - l).collect()
}

/// Affine block `g(u) = (u - mu) / sigma` with one scalar scale.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineBlock {
    pub mu: Vec<f64>,
    pub log_sigma: f64,
}

/// One Gaussianization layer: per-dimension logistic-mixture CDF, probit, then a product of
/// Householder reflections. Kernel arrays are `K x D`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianizationBlock {
    pub dim: usize,
    pub kernels: usize,
    /// Normalized log mixture weights.
    pub ln_w: Vec<f64>,
    pub loc: Vec<f64>,
    pub log_width: Vec<f64>,
    pub householder: Vec<Vec<f64>>,
}

impl GaussianizationBlock {
    /// `(ln F, ln(1 - F), ln f)` of the mixture in dimension `d`.
    pub fn mixture(&self, d: usize, u: f64) -> (f64, f64, f64) {
        let k = self.kernels;
        let mut a1 = Vec::with_capacity(k);
        let mut a2 = Vec::with_capacity(k);
        let mut a3 = Vec::with_capacity(k);
        for j in 0..k {
            let i = j * self.dim + d;
            let a = (u - self.loc[i]) * (-self.log_width[i]).exp();
            let (lp, ln) = (log_sigmoid(a), log_sigmoid(-a));
            a1.push(self.ln_w[i] + lp);
            a2.push(self.ln_w[i] + ln);
            a3.push(self.ln_w[i] + lp + ln - self.log_width[i]);
        }
        (lse(&a1), lse(&a2), lse(&a3))
    }

    fn reflect(&self, v: &mut [f64], r: usize) {
        let h = &self.householder[r];
        let hh: f64 = h.iter().map(|x| x * x).sum();
        let c = 2.0 * h.iter().zip(v.iter()).map(|(a, b)| a * b).sum::<f64>() / hh;
        for (x, hv) in v.iter_mut().zip(h) {
            *x -= c * hv;
        }
    }

    /// The orthogonal matrix `H` with `v = H y` (row-major).
    pub fn rotation(&self) -> Vec<f64> {
        let d = self.dim;
        let mut m = vec![0.0; d * d];
        for j in 0..d {
            let mut e = vec![0.0; d];
            e[j] = 1.0;
            for r in 0..self.householder.len() {
                self.reflect(&mut e, r);
            }
            for i in 0..d {
                m[i * d + j] = e[i];
            }
        }
        m
    }

    fn solve_dim(&self, d: usize, y: f64) -> Result<f64, FlowError> {
        // Increasing residual in log space on the smaller tail.
        let (target, lower) = if y <= 0.0 { (norm_ln_cdf(y), true) } else { (norm_ln_cdf(-y), false) };
        let resid = |u: f64| -> (f64, f64) {
            let (lf, l1, lpdf) = self.mixture(d, u);
            if lower {
                (lf - target, (lpdf - lf).exp())
            } else {
                (target - l1, (lpdf - l1).exp())
            }
        };
        let k = self.kernels;
        let locs: Vec<f64> = (0..k).map(|j| self.loc[j * self.dim + d]).collect();
        let smax = (0..k).map(|j| self.log_width[j * self.dim + d].exp()).fold(0.0, f64::max);
        let mut lo = locs.iter().cloned().fold(f64::INFINITY, f64::min) - 10.0 * smax;
        let mut hi = locs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 10.0 * smax;
        let mut tries = 0;
        while resid(lo).0 > 0.0 {
            lo -= (hi - lo).max(1.0);
            tries += 1;
            if tries > 80 {
                return Err(FlowError::Domain(format!("cannot bracket inverse mixture CDF for y = {y}")));
            }
        }
        while resid(hi).0 < 0.0 {
            hi += (hi - lo).max(1.0);
            tries += 1;
            if tries > 160 {
                return Err(FlowError::Domain(format!("cannot bracket inverse mixture CDF for y = {y}")));
            }
        }
        let b = RootBracket { lo, hi, f_lo: resid(lo).0, f_hi: resid(hi).0 };
        Ok(solve_monotone_newton(resid, b, 1e-13 * (1.0 + lo.abs().max(hi.abs())))?)
    }
}

/// Moebius circle block: convex combination of `K` Moebius-induced circle maps plus a rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct MoebiusBlock {
    /// Centers `omega_k` with `|omega_k| < 0.99`.
    pub centers: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
    pub rotation: f64,
}

fn moebius_phase(w: [f64; 2], c: f64, s: f64) -> (f64, f64) {
    let (dx, dy) = (c - w[0], s - w[1]);
    let r2 = dx * dx + dy * dy;
    let onem = 1.0 - w[0] * w[0] - w[1] * w[1];
    let sc = onem / r2;
    ((sc * dy - w[1]).atan2(sc * dx - w[0]), sc)
}

/// Wraps `raw` into `[0, 2 pi)` for a monotone circle map evaluated at `theta in [0, 2 pi)`;
/// values that round across the seam are assigned to the side implied by `theta`.
fn wrap_monotone(raw: f64, theta: f64) -> f64 {
    let mut w = raw.rem_euclid(TWO_PI);
    if w > TWO_PI - 1e-9 && theta < PI {
        w -= TWO_PI;
    } else if w < 1e-9 && theta > PI {
        w += TWO_PI;
    }
    w
}

impl MoebiusBlock {
    /// `(F(theta), F'(theta))` before the rotation, for `theta in [0, 2 pi]`.
    pub fn mixture(&self, theta: f64) -> (f64, f64) {
        if theta >= TWO_PI {
            let d: f64 = self.centers.iter().zip(&self.weights).map(|(w, a)| a * moebius_phase(*w, 1.0, 0.0).1).sum();
            return (TWO_PI, d);
        }
        let (s, c) = theta.sin_cos();
        let mut f = 0.0;
        let mut d = 0.0;
        for (w, a) in self.centers.iter().zip(&self.weights) {
            let (ph, sc) = moebius_phase(*w, c, s);
            let (ph0, _) = moebius_phase(*w, 1.0, 0.0);
            f += a * wrap_monotone(ph - ph0, theta);
            d += a * sc;
        }
        (f, d)
    }
}

/// One block of a chain with concrete parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    /// `g(u) = u / c`.
    Scale(f64),
    Affine(AffineBlock),
    Gaussianization(GaussianizationBlock),
    Moebius(MoebiusBlock),
    /// Circle angle `psi` to a standard normal: `psi = 2 pi Phi(-zhat)`.
    CircleFlat,
    /// Unit vector in `R^{d+1}` to `R^d`.
    SphereFlat(SphereFlatBlock),
}

impl Block {
    /// Normalizing map and `ln |det dg/du|`.
    pub fn normalize(&self, u: &[f64]) -> Result<(Vec<f64>, f64), FlowError> {
        match self {
            Block::Scale(c) => Ok((u.iter().map(|x| x / c).collect(), -(u.len() as f64) * c.ln())),
            Block::Affine(a) => {
                check_dim(a.mu.len(), u.len())?;
                let inv = (-a.log_sigma).exp();
                Ok((u.iter().zip(&a.mu).map(|(x, m)| (x - m) * inv).collect(), -(u.len() as f64) * a.log_sigma))
            }
            Block::Gaussianization(g) => {
                check_dim(g.dim, u.len())?;
                let mut y = vec![0.0; g.dim];
                let mut ld = 0.0;
                for d in 0..g.dim {
                    let (lf, l1, lpdf) = g.mixture(d, u[d]);
                    y[d] = probit_from_logs(lf, l1);
                    ld += lpdf - norm_ln_pdf(y[d]);
                }
                for r in 0..g.householder.len() {
                    g.reflect(&mut y, r);
                }
                Ok((y, ld))
            }
            Block::Moebius(m) => {
                check_dim(1, u.len())?;
                let th = u[0].rem_euclid(TWO_PI);
                let (f, d) = m.mixture(th);
                Ok((vec![(f + m.rotation).rem_euclid(TWO_PI)], d.ln()))
            }
            Block::CircleFlat => {
                check_dim(1, u.len())?;
                let psi = u[0].rem_euclid(TWO_PI);
                let z = probit_from_logs((TWO_PI - psi).ln() - TWO_PI.ln(), psi.ln() - TWO_PI.ln());
                Ok((vec![z], -TWO_PI.ln() - norm_ln_pdf(z)))
            }
            Block::SphereFlat(b) => {
                check_dim(b.d + 1, u.len())?;
                let z = sphere_to_flat(u)?;
                let ld = -b.log_det_forward(&z);
                Ok((z, ld))
            }
        }
    }

    /// Inverse of [`Block::normalize`].
    pub fn forward(&self, v: &[f64]) -> Result<Vec<f64>, FlowError> {
        match self {
            Block::Scale(c) => Ok(v.iter().map(|x| x * c).collect()),
            Block::Affine(a) => {
                check_dim(a.mu.len(), v.len())?;
                let s = a.log_sigma.exp();
                Ok(v.iter().zip(&a.mu).map(|(x, m)| m + s * x).collect())
            }
            Block::Gaussianization(g) => {
                check_dim(g.dim, v.len())?;
                let mut y = v.to_vec();
                for r in (0..g.householder.len()).rev() {
                    g.reflect(&mut y, r);
                }
                (0..g.dim).map(|d| g.solve_dim(d, y[d])).collect()
            }
            Block::Moebius(m) => {
                check_dim(1, v.len())?;
                let target = (v[0] - m.rotation).rem_euclid(TWO_PI);
                let f = |th: f64| {
                    let (val, d) = m.mixture(th);
                    (val - target, d)
                };
                let b = RootBracket { lo: 0.0, hi: TWO_PI, f_lo: -target, f_hi: TWO_PI - target };
                Ok(vec![solve_monotone_newton(f, b, 1e-14)?])
            }
            Block::CircleFlat => {
                check_dim(1, v.len())?;
                Ok(vec![TWO_PI * crate::specfun::norm_cdf(-v[0])])
            }
            Block::SphereFlat(b) => {
                check_dim(b.d, v.len())?;
                flat_to_sphere(v)
            }
        }
    }
}

fn check_dim(expected: usize, got: usize) -> Result<(), FlowError> {
    if expected == got {
        Ok(())
    } else {
        Err(FlowError::Dimension { expected, got })
    }
}

/// Blocks in normalizing order (`blocks[0]` acts on the target space) over a standard
/// normal base.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowChain {
    pub blocks: Vec<Block>,
}

impl FlowChain {
    /// Base point and summed normalizing log-determinant.
    pub fn normalize(&self, x: &[f64]) -> Result<(Vec<f64>, f64), FlowError> {
        let mut cur = x.to_vec();
        let mut ld = 0.0;
        for b in &self.blocks {
            let (v, l) = b.normalize(&cur)?;
            cur = v;
            ld += l;
        }
        Ok((cur, ld))
    }

    /// `ln q(x) = ln N(g(x)) + ln |det dg/dx|`.
    pub fn log_prob(&self, x: &[f64]) -> Result<f64, FlowError> {
        let (z, ld) = self.normalize(x)?;
        Ok(ln_normal(&z) + ld)
    }

    /// Maps a base point to the target space.
    pub fn forward(&self, zhat: &[f64]) -> Result<Vec<f64>, FlowError> {
        let mut cur = zhat.to_vec();
        for b in self.blocks.iter().rev() {
            cur = b.forward(&cur)?;
        }
        Ok(cur)
    }

    /// Intermediate points: `out[i]` is the input of normalizing block `i`; `out[n]` is `zhat`.
    pub fn forward_trace(&self, zhat: &[f64]) -> Result<Vec<Vec<f64>>, FlowError> {
        let n = self.blocks.len();
        let mut out = vec![Vec::new(); n + 1];
        out[n] = zhat.to_vec();
        for i in (0..n).rev() {
            out[i] = self.blocks[i].forward(&out[i + 1])?;
        }
        Ok(out)
    }

    pub fn base_dim(&self) -> usize {
        match self.blocks.last() {
            Some(Block::CircleFlat) => 1,
            Some(Block::SphereFlat(b)) => b.d,
            Some(Block::Affine(a)) => a.mu.len(),
            Some(Block::Gaussianization(g)) => g.dim,
            _ => 1,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<Vec<Vec<f64>>, FlowError> {
        let d = self.base_dim();
        (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                self.forward(&z)
            })
            .collect()
    }
}

/// Family of a parameterized chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ChainKind {
    /// Location and a single free scale.
    Affine,
    /// Location only, unit scale in label units.
    Mse,
    /// Affine block followed by `layers` Gaussianization layers with `kernels` kernels.
    Gaussianization { layers: usize, kernels: usize },
    /// `blocks` Moebius blocks with `components` centers each, then the circle flat block.
    Moebius { blocks: usize, components: usize },
}

/// Parameterized chain on `dim` label dimensions. Euclidean chains start with a fixed
/// scale block dividing labels by `scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub kind: ChainKind,
    pub dim: usize,
    pub scale: f64,
}

#[derive(Debug, Clone, Copy)]
enum Part {
    Scale,
    Affine { off: usize },
    Mse { off: usize },
    Gf { off: usize },
    Moebius { off: usize },
    CircleFlat,
}

impl ChainSpec {
    pub fn new(kind: ChainKind, dim: usize, scale: f64) -> Self {
        ChainSpec { kind, dim, scale }
    }

    fn n_house(&self) -> usize {
        if self.dim > 1 {
            self.dim
        } else {
            0
        }
    }

    fn gf_len(&self, k: usize) -> usize {
        3 * k * self.dim + self.n_house() * self.dim
    }

    fn parts(&self) -> Vec<Part> {
        match self.kind {
            ChainKind::Affine => vec![Part::Scale, Part::Affine { off: 0 }],
            ChainKind::Mse => vec![Part::Scale, Part::Mse { off: 0 }],
            ChainKind::Gaussianization { layers, kernels } => {
                let mut v = vec![Part::Scale, Part::Affine { off: 0 }];
                let mut off = self.dim + 1;
                for _ in 0..layers {
                    v.push(Part::Gf { off });
                    off += self.gf_len(kernels);
                }
                v
            }
            ChainKind::Moebius { blocks, components } => {
                let mut v: Vec<Part> = (0..blocks).map(|b| Part::Moebius { off: b * (3 * components + 1) }).collect();
                v.push(Part::CircleFlat);
                v
            }
        }
    }

    pub fn is_circle(&self) -> bool {
        matches!(self.kind, ChainKind::Moebius { .. })
    }

    /// Number of free parameters.
    pub fn n_params(&self) -> usize {
        match self.kind {
            ChainKind::Affine => self.dim + 1,
            ChainKind::Mse => self.dim,
            ChainKind::Gaussianization { layers, kernels } => self.dim + 1 + layers * self.gf_len(kernels),
            ChainKind::Moebius { blocks, components } => blocks * (3 * components + 1),
        }
    }

    /// Parameters of a near-identity chain (standard normal in units of `scale`).
    pub fn default_params(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.n_params()];
        let d = self.dim;
        match self.kind {
            ChainKind::Gaussianization { kernels, .. } => {
                for part in self.parts() {
                    if let Part::Gf { off } = part {
                        let kd = kernels * d;
                        for j in 0..kernels {
                            let loc = if kernels > 1 { -0.5 + j as f64 / (kernels - 1) as f64 } else { 0.0 };
                            for i in 0..d {
                                p[off + kd + j * d + i] = loc;
                                p[off + 2 * kd + j * d + i] = (0.55f64).ln();
                            }
                        }
                        for r in 0..self.n_house() {
                            p[off + 3 * kd + r * d] = 1.0;
                        }
                    }
                }
            }
            ChainKind::Moebius { blocks, components } => {
                for b in 0..blocks {
                    let off = b * (3 * components + 1);
                    for k in 0..components {
                        let a = TWO_PI * k as f64 / components as f64 + 0.7 * b as f64;
                        p[off + 2 * k] = 0.3 * a.cos();
                        p[off + 2 * k + 1] = 0.3 * a.sin();
                    }
                }
            }
            ChainKind::Affine | ChainKind::Mse => {}
        }
        p
    }

    /// Numeric chain for a parameter vector.
    pub fn build(&self, p: &[f64]) -> Result<FlowChain, FlowError> {
        if p.len() != self.n_params() {
            return Err(FlowError::Params { expected: self.n_params(), got: p.len() });
        }
        let d = self.dim;
        let blocks = self
            .parts()
            .into_iter()
            .map(|part| match part {
                Part::Scale => Block::Scale(self.scale),
                Part::Affine { off } => Block::Affine(AffineBlock { mu: p[off..off + d].to_vec(), log_sigma: p[off + d] }),
                Part::Mse { off } => Block::Affine(AffineBlock { mu: p[off..off + d].to_vec(), log_sigma: -self.scale.ln() }),
                Part::Gf { off } => {
                    let k = match self.kind {
                        ChainKind::Gaussianization { kernels, .. } => kernels,
                        _ => unreachable!(),
                    };
                    let kd = k * d;
                    let mut ln_w = vec![0.0; kd];
                    for i in 0..d {
                        let col: Vec<f64> = (0..k).map(|j| p[off + j * d + i]).collect();
                        for (j, v) in softmax_log(&col).into_iter().enumerate() {
                            ln_w[j * d + i] = v;
                        }
                    }
                    Block::Gaussianization(GaussianizationBlock {
                        dim: d,
                        kernels: k,
                        ln_w,
                        loc: p[off + kd..off + 2 * kd].to_vec(),
                        log_width: p[off + 2 * kd..off + 3 * kd].to_vec(),
                        householder: (0..self.n_house())
                            .map(|r| p[off + 3 * kd + r * d..off + 3 * kd + (r + 1) * d].to_vec())
                            .collect(),
                    })
                }
                Part::Moebius { off } => {
                    let k = match self.kind {
                        ChainKind::Moebius { components, .. } => components,
                        _ => unreachable!(),
                    };
                    let centers = (0..k)
                        .map(|j| {
                            let (cx, cy) = (p[off + 2 * j], p[off + 2 * j + 1]);
                            let f = MOEBIUS_MAX_RADIUS / (1.0 + cx * cx + cy * cy).sqrt();
                            [cx * f, cy * f]
                        })
                        .collect();
                    let weights = softmax_log(&p[off + 2 * k..off + 3 * k]).into_iter().map(f64::exp).collect();
                    Block::Moebius(MoebiusBlock { centers, weights, rotation: p[off + 3 * k] })
                }
                Part::CircleFlat => Block::CircleFlat,
            })
            .collect();
        Ok(FlowChain { blocks })
    }

    /// Label dimension seen by the chain (1 for circle chains).
    pub fn target_dim(&self) -> usize {
        if self.is_circle() {
            1
        } else {
            self.dim
        }
    }

    /// Normalizing pass on the tape: `(zhat, ln |det|)` for a target point `x` (column vector).
    pub fn normalize_tape(&self, t: &mut Tape, p: Var, x: Var) -> (Var, Var) {
        let mut cur = x;
        let mut ld = t.scalar_const(0.0);
        for part in self.parts() {
            let (v, l) = self.part_normalize_tape(t, part, p, cur);
            cur = v;
            ld = t.add(ld, l);
        }
        (cur, ld)
    }

    /// `ln q(x)` on the tape.
    pub fn log_prob_tape(&self, t: &mut Tape, p: Var, x: Var) -> Var {
        let (z, ld) = self.normalize_tape(t, p, x);
        let z2 = t.square(z);
        let s = t.sum(z2);
        let s = t.scale(s, -0.5);
        let s = t.offset(s, -(self.base_dim() as f64) * LN_SQRT_2PI);
        t.add(s, ld)
    }

    pub fn base_dim(&self) -> usize {
        if self.is_circle() {
            1
        } else {
            self.dim
        }
    }

    fn part_normalize_tape(&self, t: &mut Tape, part: Part, p: Var, u: Var) -> (Var, Var) {
        let d = self.dim;
        match part {
            Part::Scale => {
                let v = t.scale(u, 1.0 / self.scale);
                let ld = t.scalar_const(-(d as f64) * self.scale.ln());
                (v, ld)
            }
            Part::Affine { off } => {
                let mu = t.slice(p, off, d, 1);
                let ls = t.slice(p, off + d, 1, 1);
                let diff = t.sub(u, mu);
                let nls = t.neg(ls);
                let inv = t.exp(nls);
                let v = t.mul(diff, inv);
                let ld = t.scale(ls, -(d as f64));
                (v, ld)
            }
            Part::Mse { off } => {
                let mu = t.slice(p, off, d, 1);
                let diff = t.sub(u, mu);
                let v = t.scale(diff, self.scale);
                let ld = t.scalar_const(d as f64 * self.scale.ln());
                (v, ld)
            }
            Part::Gf { off } => {
                let k = match self.kind {
                    ChainKind::Gaussianization { kernels, .. } => kernels,
                    _ => unreachable!(),
                };
                gf_normalize_tape(t, d, k, self.n_house(), p, off, u)
            }
            Part::Moebius { off } => {
                let k = match self.kind {
                    ChainKind::Moebius { components, .. } => components,
                    _ => unreachable!(),
                };
                moebius_normalize_tape(t, k, p, off, u)
            }
            Part::CircleFlat => {
                let psi = t.value(u)[0];
                let wrap = psi.rem_euclid(TWO_PI) - psi;
                let psi_w = t.offset(u, wrap);
                let npsi = t.neg(psi_w);
                let a = t.offset(npsi, TWO_PI);
                let la = t.log(a);
                let la = t.offset(la, -TWO_PI.ln());
                let lb = t.log(psi_w);
                let lb = t.offset(lb, -TWO_PI.ln());
                let z = t.probit(la, lb);
                let z2 = t.square(z);
                let ld = t.scale(z2, 0.5);
                let ld = t.offset(ld, LN_SQRT_2PI - TWO_PI.ln());
                (z, ld)
            }
        }
    }

    /// Draws `x = rho(zhat)` on the tape so that it carries gradients with respect to the
    /// chain parameters `p` (reparameterization). `zhat` enters as a constant.
    pub fn sample_tape(&self, t: &mut Tape, p: Var, zhat: &[f64]) -> Result<Var, FlowError> {
        let pv = t.value(p).to_vec();
        let chain = self.build(&pv)?;
        let trace = chain.forward_trace(zhat)?;
        let parts = self.parts();
        let mut v = t.vector(zhat);
        for i in (0..parts.len()).rev() {
            v = self.part_forward_tape(t, parts[i], p, v, &trace[i], &chain.blocks[i]);
        }
        Ok(v)
    }

    fn part_forward_tape(&self, t: &mut Tape, part: Part, p: Var, v: Var, u_star: &[f64], block: &Block) -> Var {
        let d = self.dim;
        match part {
            Part::Scale => t.scale(v, self.scale),
            Part::Affine { off } => {
                let mu = t.slice(p, off, d, 1);
                let ls = t.slice(p, off + d, 1, 1);
                let s = t.exp(ls);
                let sv = t.mul(v, s);
                t.add(mu, sv)
            }
            Part::Mse { off } => {
                let mu = t.slice(p, off, d, 1);
                let sv = t.scale(v, 1.0 / self.scale);
                t.add(mu, sv)
            }
            Part::CircleFlat => {
                // psi = pi * erfc(zhat / sqrt 2) = pi (1 - erf(zhat / sqrt 2))
                let a = t.scale(v, std::f64::consts::FRAC_1_SQRT_2);
                let e = t.erf(a);
                let e = t.scale(e, -PI);
                t.offset(e, PI)
            }
            Part::Gf { .. } => {
                let g = match block {
                    Block::Gaussianization(g) => g,
                    _ => unreachable!(),
                };
                let us = t.vector(u_star);
                let (gv, _) = self.part_normalize_tape(t, part, p, us);
                let r = t.sub(gv, v);
                // J = H diag(y'), so J^{-1} = diag(1 / y') H^T.
                let h = g.rotation();
                let mut jinv = vec![0.0; d * d];
                for i in 0..d {
                    let (lf, l1, lpdf) = g.mixture(i, u_star[i]);
                    let y = probit_from_logs(lf, l1);
                    let dy = (lpdf - norm_ln_pdf(y)).exp();
                    for j in 0..d {
                        jinv[i * d + j] = h[j * d + i] / dy;
                    }
                }
                let jm = t.constant(&jinv, d, d);
                let step = t.matmul(jm, r);
                t.sub(us, step)
            }
            Part::Moebius { .. } => {
                let m = match block {
                    Block::Moebius(m) => m,
                    _ => unreachable!(),
                };
                let us = t.vector(u_star);
                let (gv, _) = self.part_normalize_tape(t, part, p, us);
                let r = t.sub(gv, v);
                let rv = t.value(r)[0];
                let r = t.offset(r, -TWO_PI * (rv / TWO_PI).round());
                let (_, der) = m.mixture(u_star[0].rem_euclid(TWO_PI));
                let step = t.scale(r, 1.0 / der);
                t.sub(us, step)
            }
        }
    }
}

fn gf_normalize_tape(t: &mut Tape, d: usize, k: usize, nh: usize, p: Var, off: usize, u: Var) -> (Var, Var) {
    let kd = k * d;
    let logits = t.slice(p, off, k, d);
    let loc = t.slice(p, off + kd, k, d);
    let logw = t.slice(p, off + 2 * kd, k, d);
    let urow = t.slice(u, 0, 1, d);
    let l = t.logsumexp_cols(logits);
    let lnw = t.sub(logits, l);
    let diff = t.sub(urow, loc);
    let nlw = t.neg(logw);
    let invs = t.exp(nlw);
    let a = t.mul(diff, invs);
    let lp = t.log_sigmoid(a);
    let na = t.neg(a);
    let ln = t.log_sigmoid(na);
    let x1 = t.add(lnw, lp);
    let lf = t.logsumexp_cols(x1);
    let x2 = t.add(lnw, ln);
    let l1 = t.logsumexp_cols(x2);
    let x3 = t.add(x1, ln);
    let x3 = t.sub(x3, logw);
    let lpdf = t.logsumexp_cols(x3);
    let y = t.probit(lf, l1);
    let s1 = t.sum(lpdf);
    let y2 = t.square(y);
    let s2 = t.sum(y2);
    let s2 = t.scale(s2, 0.5);
    let ld = t.add(s1, s2);
    let ld = t.offset(ld, d as f64 * LN_SQRT_2PI);
    let mut v = t.slice(y, 0, d, 1);
    for r in 0..nh {
        let h = t.slice(p, off + 3 * kd + r * d, d, 1);
        let hv = t.mul(h, v);
        let dot = t.sum(hv);
        let hh = t.square(h);
        let nrm = t.sum(hh);
        let c = t.div(dot, nrm);
        let c = t.scale(c, 2.0);
        let hc = t.mul(h, c);
        v = t.sub(v, hc);
    }
    (v, ld)
}

fn moebius_normalize_tape(t: &mut Tape, k: usize, p: Var, off: usize, theta: Var) -> (Var, Var) {
    let th = t.value(theta)[0];
    let thw = th.rem_euclid(TWO_PI);
    let theta = t.offset(theta, thw - th);
    let craw = t.slice(p, off, k, 2);
    let cx = t.select_cols(craw, &[0]);
    let cy = t.select_cols(craw, &[1]);
    let cx2 = t.square(cx);
    let cy2 = t.square(cy);
    let n2 = t.add(cx2, cy2);
    let n2 = t.offset(n2, 1.0);
    let rt = t.sqrt(n2);
    let one = t.scalar_const(MOEBIUS_MAX_RADIUS);
    let fac = t.div(one, rt);
    let wx = t.mul(cx, fac);
    let wy = t.mul(cy, fac);
    let wx2 = t.square(wx);
    let wy2 = t.square(wy);
    let w2 = t.add(wx2, wy2);
    let nw2 = t.neg(w2);
    let onem = t.offset(nw2, 1.0);
    let phase = |t: &mut Tape, c: Var, s: Var| -> (Var, Var) {
        let dx = t.sub(c, wx);
        let dy = t.sub(s, wy);
        let dx2 = t.square(dx);
        let dy2 = t.square(dy);
        let r2 = t.add(dx2, dy2);
        let sc = t.div(onem, r2);
        let hx = t.mul(sc, dx);
        let hx = t.sub(hx, wx);
        let hy = t.mul(sc, dy);
        let hy = t.sub(hy, wy);
        (t.atan2(hy, hx), sc)
    };
    let c = t.cos(theta);
    let s = t.sin(theta);
    let (ph, sc) = phase(t, c, s);
    let c0 = t.scalar_const(1.0);
    let s0 = t.scalar_const(0.0);
    let (ph0, _) = phase(t, c0, s0);
    let raw = t.sub(ph, ph0);
    let shift: Vec<f64> = t.value(raw).iter().map(|r| wrap_monotone(*r, thw) - r).collect();
    let shift = t.vector(&shift);
    let f = t.add(raw, shift);
    let logits = t.slice(p, off + 2 * k, k, 1);
    let w = t.softmax(logits);
    let wf = t.mul(w, f);
    let big_f = t.sum(wf);
    let ws = t.mul(w, sc);
    let der = t.sum(ws);
    let ld = t.log(der);
    let rot = t.slice(p, off + 3 * k, 1, 1);
    let g = t.add(big_f, rot);
    let gv = t.value(g)[0];
    let g = t.offset(g, gv.rem_euclid(TWO_PI) - gv);
    (g, ld)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::{check_gradients, ParamVector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn perturbed(spec: &ChainSpec, seed: u64, amp: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        spec.default_params().iter().map(|v| v + amp * rng.gen_range(-1.0..1.0)).collect()
    }

    fn specs() -> Vec<ChainSpec> {
        vec![
            ChainSpec::new(ChainKind::Affine, 2, 10.0),
            ChainSpec::new(ChainKind::Mse, 2, 10.0),
            ChainSpec::new(ChainKind::Gaussianization { layers: 3, kernels: 4 }, 2, 10.0),
            ChainSpec::new(ChainKind::Gaussianization { layers: 2, kernels: 3 }, 1, 1.0),
            ChainSpec::new(ChainKind::Moebius { blocks: 2, components: 5 }, 1, 1.0),
        ]
    }

    #[test]
    fn forward_inverts_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for spec in specs() {
            let chain = spec.build(&perturbed(&spec, 2, 0.8)).unwrap();
            for _ in 0..20 {
                let z: Vec<f64> = (0..spec.base_dim()).map(|_| rng.sample::<f64, _>(StandardNormal) * 1.5).collect();
                let x = chain.forward(&z).unwrap();
                let (z2, _) = chain.normalize(&x).unwrap();
                for (a, b) in z.iter().zip(&z2) {
                    assert!((a - b).abs() < 1e-8, "{spec:?}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn tape_matches_numeric_and_gradients_check() {
        for spec in specs() {
            let pv = perturbed(&spec, 5, 0.5);
            let chain = spec.build(&pv).unwrap();
            let x = if spec.is_circle() { vec![2.1] } else if spec.dim == 2 { vec![3.0, -7.5] } else { vec![0.4] };
            let want = chain.log_prob(&x).unwrap();
            let mut params = ParamVector::new();
            let slot = params.add("chain", pv.len(), 1, &pv);
            let mut t = Tape::new();
            let p = t.param(&params, slot);
            let xv = t.vector(&x);
            let lp = spec.log_prob_tape(&mut t, p, xv);
            assert!((t.scalar(lp) - want).abs() < 1e-10, "{spec:?}");
            let chk = check_gradients(&mut t, lp, &params, 1e-6, 1e-6, None).unwrap();
            assert!(chk.max_rel_error < 1e-5, "{spec:?}: {chk:?}");
        }
    }

    #[test]
    fn reparameterized_samples_have_implicit_gradients() {
        for spec in specs() {
            let pv = perturbed(&spec, 9, 0.5);
            let mut params = ParamVector::new();
            let slot = params.add("chain", pv.len(), 1, &pv);
            let zhat: Vec<f64> = (0..spec.base_dim()).map(|i| 0.7 - 0.9 * i as f64).collect();
            let mut t = Tape::new();
            let p = t.param(&params, slot);
            let x = spec.sample_tape(&mut t, p, &zhat).unwrap();
            let want = spec.build(&pv).unwrap().forward(&zhat).unwrap();
            for (a, b) in t.value(x).iter().zip(&want) {
                assert!((a - b).abs() < 1e-9);
            }
            let s = t.sum(x);
            let analytic = t.backward(s, params.len()).unwrap();
            // Central differences through the numeric inverse.
            let eps = 1e-6;
            for i in 0..pv.len() {
                let mut a = pv.clone();
                a[i] += eps;
                let mut b = pv.clone();
                b[i] -= eps;
                let fa: f64 = spec.build(&a).unwrap().forward(&zhat).unwrap().iter().sum();
                let fb: f64 = spec.build(&b).unwrap().forward(&zhat).unwrap().iter().sum();
                let num = (fa - fb) / (2.0 * eps);
                let err = (num - analytic[i]).abs() / num.abs().max(analytic[i].abs()).max(1e-4);
                assert!(err < 1e-5, "{spec:?} param {i}: {num} vs {}", analytic[i]);
            }
        }
    }

    #[test]
    fn densities_integrate_to_one() {
        let spec = ChainSpec::new(ChainKind::Gaussianization { layers: 2, kernels: 3 }, 1, 1.0);
        let chain = spec.build(&perturbed(&spec, 3, 0.7)).unwrap();
        let h = 0.005;
        let s: f64 = (0..160_000).map(|i| chain.log_prob(&[-400.0 + (i as f64 + 0.5) * h]).unwrap().exp() * h).sum();
        assert!((s - 1.0).abs() < 1e-6, "{s}");
        let circ = ChainSpec::new(ChainKind::Moebius { blocks: 1, components: 8 }, 1, 1.0);
        let chain = circ.build(&perturbed(&circ, 4, 1.0)).unwrap();
        let n = 20_000;
        let h = TWO_PI / n as f64;
        let s: f64 = (0..n).map(|i| chain.log_prob(&[(i as f64 + 0.5) * h]).unwrap().exp() * h).sum();
        assert!((s - 1.0).abs() < 1e-6, "{s}");
    }

    #[test]
    fn rotation_is_orthonormal_and_centers_bounded() {
        let spec = ChainSpec::new(ChainKind::Gaussianization { layers: 1, kernels: 2 }, 3, 1.0);
        let chain = spec.build(&perturbed(&spec, 8, 2.0)).unwrap();
        if let Block::Gaussianization(g) = &chain.blocks[2] {
            let h = g.rotation();
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|k| h[k * 3 + i] * h[k * 3 + j]).sum();
                    assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-10);
                }
            }
        } else {
            panic!("expected a Gaussianization block");
        }
        let circ = ChainSpec::new(ChainKind::Moebius { blocks: 1, components: 8 }, 1, 1.0);
        let p: Vec<f64> = (0..circ.n_params()).map(|i| 1e6 * (i as f64 - 3.0)).collect();
        if let Block::Moebius(m) = &circ.build(&p).unwrap().blocks[0] {
            assert!(m.centers.iter().all(|c| (c[0] * c[0] + c[1] * c[1]).sqrt() < 0.99 + 1e-15));
        }
    }

    #[test]
    fn mse_log_prob_at_mean() {
        let spec = ChainSpec::new(ChainKind::Mse, 2, 10.0);
        let chain = spec.build(&[0.3, -0.4]).unwrap();
        let lp = chain.log_prob(&[3.0, -4.0]).unwrap();
        assert!((lp + (TWO_PI).ln()).abs() < 1e-12);
    }
}
