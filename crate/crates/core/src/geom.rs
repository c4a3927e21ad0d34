//! Torus geometry, Maxwellian velocities, elastic scattering and the
//! hard-sphere exclusion predicate.
//!
//! Positions live on the unit torus [0,1)^d with d in {2,3}; we store
//! them as fixed-size `[f64; 3]` arrays and ignore the trailing
//! component in two dimensions.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub type Vect = [f64; 3];

pub const ZERO_V: Vect = [0.0; 3];

#[inline]
pub fn dot(a: &Vect, b: &Vect) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm_sq(a: &Vect) -> f64 {
    dot(a, a)
}

#[inline]
pub fn norm(a: &Vect) -> f64 {
    norm_sq(a).sqrt()
}

#[inline]
pub fn sub(a: &Vect, b: &Vect) -> Vect {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: &Vect, b: &Vect) -> Vect {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: &Vect, c: f64) -> Vect {
    [c * a[0], c * a[1], c * a[2]]
}

#[inline]
pub fn axpy(a: &Vect, c: f64, b: &Vect) -> Vect {
    [a[0] + c * b[0], a[1] + c * b[1], a[2] + c * b[2]]
}

/// Wrap a point back into [0,1)^dim componentwise.
#[inline]
pub fn wrap_position(x: &mut Vect, dim: usize) {
    for c in x.iter_mut().take(dim) {
        *c -= c.floor();
        // floor() of a tiny negative number can round the difference to 1.0
        if *c >= 1.0 {
            *c = 0.0;
        }
    }
}

/// Minimal-image representative of x1 - x2 with each component in
/// [-1/2, 1/2). The half-open convention resolves antipodal ties.
#[inline]
pub fn torus_displacement(x1: &Vect, x2: &Vect, dim: usize) -> Vect {
    let mut out = ZERO_V;
    for k in 0..dim {
        let d = x1[k] - x2[k];
        out[k] = d - (d + 0.5).floor();
    }
    out
}

#[inline]
pub fn torus_distance(x1: &Vect, x2: &Vect, dim: usize) -> f64 {
    norm(&torus_displacement(x1, x2, dim))
}

/// Mixed Boltzmann-Grad scaling for the gas mixture: the background
/// density mu is tied to the diameter by mu * eps^(d-1) = 1 while the
/// tagged intensity lambda stays well below mu.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScalingParams {
    pub epsilon: f64,
    pub beta: f64,
    pub dim: usize,
    pub lambda: f64,
    pub mu: f64,
}

impl ScalingParams {
    /// Physical constructor: mu is derived from epsilon.
    pub fn new(epsilon: f64, beta: f64, dim: usize, lambda: f64) -> Result<Self> {
        if !(dim == 2 || dim == 3) {
            return Err(Error::InvalidParams(format!("dim must be 2 or 3, got {dim}")));
        }
        if !(epsilon > 0.0 && epsilon < 0.25) {
            return Err(Error::InvalidParams(format!(
                "epsilon must lie in (0, 1/4), got {epsilon}"
            )));
        }
        if !(beta > 0.0) {
            return Err(Error::InvalidParams(format!("beta must be positive, got {beta}")));
        }
        let mu = epsilon.powi(1 - dim as i32);
        if !(lambda >= 0.0 && lambda < mu) {
            return Err(Error::InvalidParams(format!(
                "lambda must satisfy 0 <= lambda < mu = {mu}, got {lambda}"
            )));
        }
        Ok(Self { epsilon, beta, dim, lambda, mu })
    }

    /// Test/analytic constructor with mu decoupled from epsilon.
    /// Used to reach closed-form Poisson regimes (mu fixed, exclusion
    /// negligible) and exclusion-free series checks (epsilon = 0).
    pub fn with_mu(epsilon: f64, beta: f64, dim: usize, lambda: f64, mu: f64) -> Result<Self> {
        if !(dim == 2 || dim == 3) {
            return Err(Error::InvalidParams(format!("dim must be 2 or 3, got {dim}")));
        }
        if !(epsilon >= 0.0 && epsilon < 0.25) {
            return Err(Error::InvalidParams(format!(
                "epsilon must lie in [0, 1/4), got {epsilon}"
            )));
        }
        if !(beta > 0.0 && mu > 0.0 && lambda >= 0.0) {
            return Err(Error::InvalidParams(
                "beta and mu must be positive, lambda nonnegative".into(),
            ));
        }
        Ok(Self { epsilon, beta, dim, lambda, mu })
    }

    /// Scaling consistency mu * eps^(d-1) = 1; false for test-only params.
    pub fn is_physical(&self) -> bool {
        (self.mu * self.epsilon.powi(self.dim as i32 - 1) - 1.0).abs() <= 1e-12
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tag {
    Background = 0,
    Tagged = 1,
}

impl Tag {
    #[inline]
    pub fn as_u8(self) -> u8 {
        match self {
            Tag::Background => 0,
            Tag::Tagged => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ParticleState {
    pub x: Vect,
    pub v: Vect,
    pub tag: Tag,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemState {
    pub time: f64,
    pub particles: Vec<ParticleState>,
}

impl SystemState {
    pub fn new(particles: Vec<ParticleState>) -> Self {
        Self { time: 0.0, particles }
    }

    pub fn kinetic_energy(&self) -> f64 {
        self.particles.iter().map(|p| norm_sq(&p.v)).sum::<f64>() / 2.0
    }

    pub fn momentum(&self) -> Vect {
        let mut m = ZERO_V;
        for p in &self.particles {
            m = add(&m, &p.v);
        }
        m
    }

    pub fn tagged_count(&self) -> usize {
        self.particles.iter().filter(|p| p.tag == Tag::Tagged).count()
    }
}

/// Post-collisional velocities for impact direction omega (Eq. of
/// specular reflection): each particle loses/gains the normal component
/// of the relative velocity.
pub fn scatter(v_i: &Vect, v_j: &Vect, omega: &Vect) -> Result<(Vect, Vect)> {
    let n = norm(omega);
    if (n - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidParams(format!("omega must be a unit vector, |omega| = {n}")));
    }
    let p = dot(&sub(v_i, v_j), omega);
    Ok((axpy(v_i, -p, omega), axpy(v_j, p, omega)))
}

/// Maxwellian density M_beta(v) = (beta/2pi)^(d/2) exp(-beta |v|^2 / 2).
pub fn maxwellian(v: &Vect, beta: f64, dim: usize) -> f64 {
    let z = (beta / (2.0 * std::f64::consts::PI)).powf(dim as f64 / 2.0);
    z * (-beta * norm_sq(v) / 2.0).exp()
}

/// Draw a velocity with i.i.d. centered Gaussian components of variance 1/beta.
pub fn sample_maxwellian<R: Rng + ?Sized>(beta: f64, dim: usize, rng: &mut R) -> Vect {
    let normal = Normal::new(0.0, (1.0 / beta).sqrt()).expect("beta > 0");
    let mut v = ZERO_V;
    for c in v.iter_mut().take(dim) {
        *c = normal.sample(rng);
    }
    v
}

/// Uniform point on the unit sphere S^(dim-1).
pub fn sample_sphere<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vect {
    if dim == 2 {
        let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        [theta.cos(), theta.sin(), 0.0]
    } else {
        let normal = Normal::new(0.0, 1.0).unwrap();
        loop {
            let g: Vect = [normal.sample(rng), normal.sample(rng), normal.sample(rng)];
            let n = norm(&g);
            if n > 1e-12 {
                return scale(&g, 1.0 / n);
            }
        }
    }
}

/// Uniform position on the torus.
pub fn sample_position<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vect {
    let mut x = ZERO_V;
    for c in x.iter_mut().take(dim) {
        *c = rng.random_range(0.0..1.0);
    }
    x
}

/// Hard-sphere exclusion: every pair strictly further than epsilon apart.
pub fn exclusion_ok(positions: &[Vect], epsilon: f64, dim: usize) -> bool {
    for i in 0..positions.len() {
        for j in (i + 1)..positions.len() {
            if torus_distance(&positions[i], &positions[j], dim) <= epsilon {
                return false;
            }
        }
    }
    true
}

/// Volume of the unit ball in dimension d.
pub fn unit_ball_volume(dim: usize) -> f64 {
    match dim {
        2 => std::f64::consts::PI,
        3 => 4.0 * std::f64::consts::PI / 3.0,
        _ => panic!("dim must be 2 or 3"),
    }
}
