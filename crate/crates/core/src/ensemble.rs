//! Grand-canonical sampling of the gas mixture initial law, the
//! unnormalized density, partition-function estimation and the C0
//! constant bounding weighted norms of the initial data.

use crate::error::{Error, Result};
use crate::geom::{
    exclusion_ok, maxwellian, sample_maxwellian, sample_position, ScalingParams, ParticleState,
    SystemState, Tag, Vect,
};
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use std::sync::Arc;

type EvalFn = dyn Fn(&Vect, &Vect) -> f64 + Send + Sync;
type MassFn = dyn Fn(f64, usize) -> f64 + Send + Sync;
type MarginalFn = dyn Fn(&Vect, f64, usize) -> f64 + Send + Sync;

/// A nonnegative bounded perturbation phi_0 of the tagged species.
/// `bound` is a declared B with 0 <= phi_0 <= B; `mass` returns
/// the equilibrium-weighted mass m(beta, dim) = int M_beta phi_0 dx dv
/// and `marginal` the velocity marginal int M_beta(v) phi_0(x, v) dv.
#[derive(Clone)]
pub struct Perturbation {
    pub name: String,
    pub bound: f64,
    eval: Arc<EvalFn>,
    mass: Arc<MassFn>,
    marginal: Arc<MarginalFn>,
}

impl std::fmt::Debug for Perturbation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Perturbation")
            .field("name", &self.name)
            .field("bound", &self.bound)
            .finish()
    }
}

impl Perturbation {
    /// Fully explicit constructor; `marginal(x, beta, dim)` must return
    /// int M_beta(v) phi_0(x, v) dv.
    pub fn custom_with_marginal<F, M, G>(
        name: &str,
        bound: f64,
        eval: F,
        mass: M,
        marginal: G,
    ) -> Self
    where
        F: Fn(&Vect, &Vect) -> f64 + Send + Sync + 'static,
        M: Fn(f64, usize) -> f64 + Send + Sync + 'static,
        G: Fn(&Vect, f64, usize) -> f64 + Send + Sync + 'static,
    {
        Self {
            name: name.to_string(),
            bound,
            eval: Arc::new(eval),
            mass: Arc::new(mass),
            marginal: Arc::new(marginal),
        }
    }

    /// Constructor that fills the velocity marginal in by quadrature.
    pub fn custom<F, M>(name: &str, bound: f64, eval: F, mass: M) -> Self
    where
        F: Fn(&Vect, &Vect) -> f64 + Send + Sync + Clone + 'static,
        M: Fn(f64, usize) -> f64 + Send + Sync + 'static,
    {
        let ev = eval.clone();
        Self::custom_with_marginal(name, bound, eval, mass, move |x, beta, dim| {
            marginal_by_quadrature(&ev, x, beta, dim)
        })
    }

    /// phi_0 = 1: pure mixture with unperturbed tagged particles.
    pub fn uniform() -> Self {
        Self::custom_with_marginal("uniform", 1.0, |_, _| 1.0, |_, _| 1.0, |_, _, _| 1.0)
    }

    /// phi_0 = 1 + cos(2 pi x_1)/2, a spatial density wave.
    pub fn cosine() -> Self {
        let f = |x: &Vect| 1.0 + 0.5 * (std::f64::consts::TAU * x[0]).cos();
        Self::custom_with_marginal(
            "cosine",
            1.5,
            move |x, _| f(x),
            |_, _| 1.0,
            move |x, _, _| f(x),
        )
    }

    /// phi_0 = exp(-|v - u|^2 / 2) with u = e_1: a velocity-shifted bump.
    pub fn gauss_shift() -> Self {
        let mass = |beta: f64, dim: usize| {
            (beta / (beta + 1.0)).powf(dim as f64 / 2.0) * (-beta / (2.0 * (beta + 1.0))).exp()
        };
        Self::custom_with_marginal(
            "gauss-shift",
            1.0,
            |_, v| {
                let d = [v[0] - 1.0, v[1], v[2]];
                (-crate::geom::norm_sq(&d) / 2.0).exp()
            },
            mass,
            move |_, beta, dim| mass(beta, dim),
        )
    }

    /// phi_0 = 0: no tagged mass at all.
    pub fn zero() -> Self {
        Self::custom_with_marginal("zero", 1.0, |_, _| 0.0, |_, _| 0.0, |_, _, _| 0.0)
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "uniform" => Some(Self::uniform()),
            "cosine" => Some(Self::cosine()),
            "gauss-shift" => Some(Self::gauss_shift()),
            "zero" => Some(Self::zero()),
            _ => None,
        }
    }

    /// Rescale phi_0 by a nonnegative constant.
    pub fn scaled(&self, c: f64) -> Self {
        let eval = self.eval.clone();
        let mass = self.mass.clone();
        let marginal = self.marginal.clone();
        Self {
            name: format!("{}*{c}", self.name),
            bound: self.bound * c,
            eval: Arc::new(move |x: &Vect, v: &Vect| c * eval(x, v)),
            mass: Arc::new(move |b, d| c * mass(b, d)),
            marginal: Arc::new(move |x: &Vect, b, d| c * marginal(x, b, d)),
        }
    }

    #[inline]
    pub fn eval(&self, x: &Vect, v: &Vect) -> f64 {
        (self.eval)(x, v)
    }

    /// int M_beta(v) phi_0(x, v) dx dv.
    pub fn mass(&self, beta: f64, dim: usize) -> f64 {
        (self.mass)(beta, dim)
    }

    /// int M_beta(v) phi_0(x, v) dv at fixed position.
    pub fn velocity_marginal(&self, x: &Vect, beta: f64, dim: usize) -> f64 {
        (self.marginal)(x, beta, dim)
    }
}

fn marginal_by_quadrature<F: Fn(&Vect, &Vect) -> f64>(
    eval: &F,
    x: &Vect,
    beta: f64,
    dim: usize,
) -> f64 {
    let l = 8.0 / beta.sqrt();
    let n = 48usize;
    let h = 2.0 * l / n as f64;
    let mut acc = 0.0;
    let count = n.pow(dim as u32);
    for idx in 0..count {
        let mut rem = idx;
        let mut v = [0.0; 3];
        for c in v.iter_mut().take(dim) {
            *c = -l + (rem % n) as f64 * h + 0.5 * h;
            rem /= n;
        }
        acc += maxwellian(&v, beta, dim) * eval(x, &v);
    }
    acc * h.powi(dim as i32)
}

/// Unnormalized grand-canonical density of a configuration:
/// lambda^(#tagged) mu^(#background) prod M_beta(v_i) prod_tagged phi_0
/// times the exclusion indicator.
pub fn initial_density_unnormalized(
    state: &SystemState,
    params: &ScalingParams,
    phi0: &Perturbation,
) -> f64 {
    let positions: Vec<Vect> = state.particles.iter().map(|p| p.x).collect();
    if !exclusion_ok(&positions, params.epsilon, params.dim) {
        return 0.0;
    }
    let mut dens = 1.0;
    for p in &state.particles {
        dens *= maxwellian(&p.v, params.beta, params.dim);
        match p.tag {
            Tag::Background => dens *= params.mu,
            Tag::Tagged => dens *= params.lambda * phi0.eval(&p.x, &p.v),
        }
    }
    dens
}

pub fn sample_poisson<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> usize {
    if rate <= 0.0 {
        return 0;
    }
    let d = Poisson::new(rate).expect("positive finite rate");
    d.sample(rng) as usize
}

/// Rejection-round bookkeeping of the exact sampler. Acceptance rate
/// times exp(mu + lambda * mass) estimates the partition function.
#[derive(Debug, Default, Clone, Copy)]
pub struct SamplerStats {
    pub attempts: u64,
    pub accepted: u64,
}

impl SamplerStats {
    pub fn acceptance_rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.accepted as f64 / self.attempts as f64
        }
    }
}

pub const REJECTION_CAP: u64 = 1_000_000;

/// Draw one exact sample of the mixture law. Background particles form
/// a Poisson(mu) cloud of Maxwellian velocities; tagged proposals with
/// intensity lambda*B are thinned per particle with probability
/// phi_0/B (an exact sampling of the Poisson process with intensity
/// lambda M_beta phi_0); the whole configuration is then rejected
/// until the hard-sphere exclusion holds.
pub fn sample_initial_state<R: Rng + ?Sized>(
    params: &ScalingParams,
    phi0: &Perturbation,
    rng: &mut R,
) -> Result<SystemState> {
    let mut stats = SamplerStats::default();
    sample_initial_state_tracked(params, phi0, rng, &mut stats)
}

pub fn sample_initial_state_tracked<R: Rng + ?Sized>(
    params: &ScalingParams,
    phi0: &Perturbation,
    rng: &mut R,
    stats: &mut SamplerStats,
) -> Result<SystemState> {
    let expected = params.mu + params.lambda * phi0.bound;
    if expected > 1e4 {
        return Err(Error::CapViolation {
            module: "ensemble",
            what: format!("expected particle count mu + lambda*B = {expected} exceeds 1e4"),
        });
    }
    for _ in 0..REJECTION_CAP {
        stats.attempts += 1;
        let n0 = sample_poisson(params.mu, rng);
        let n1 = sample_poisson(params.lambda * phi0.bound, rng);
        let mut particles = Vec::with_capacity(n0 + n1);
        for _ in 0..n0 {
            particles.push(ParticleState {
                x: sample_position(params.dim, rng),
                v: sample_maxwellian(params.beta, params.dim, rng),
                tag: Tag::Background,
            });
        }
        for _ in 0..n1 {
            let x = sample_position(params.dim, rng);
            let v = sample_maxwellian(params.beta, params.dim, rng);
            if rng.random_range(0.0..1.0) < phi0.eval(&x, &v) / phi0.bound {
                particles.push(ParticleState { x, v, tag: Tag::Tagged });
            }
        }
        let positions: Vec<Vect> = particles.iter().map(|p| p.x).collect();
        if exclusion_ok(&positions, params.epsilon, params.dim) {
            stats.accepted += 1;
            return Ok(SystemState::new(particles));
        }
    }
    Err(Error::RejectionCap(REJECTION_CAP))
}

/// Importance-sampling estimate of the partition function Z_mu: sample
/// the non-interacting reference (background Poisson(mu), tagged
/// proposals Poisson(lambda*B)), average the exclusion indicator
/// weighted by prod phi_0/B, multiply by the reference normalization
/// exp(mu + lambda*B). Returns (estimate, standard error).
pub fn estimate_partition_function<R: Rng + ?Sized>(
    params: &ScalingParams,
    phi0: &Perturbation,
    samples: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if samples < 2 {
        return Err(Error::InvalidParams("need at least 2 samples".into()));
    }
    let expected = params.mu + params.lambda * phi0.bound;
    if expected > 50.0 {
        return Err(Error::CapViolation {
            module: "ensemble",
            what: format!("mu + lambda*B = {expected} exceeds 50"),
        });
    }
    let norm = expected.exp();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..samples {
        let n0 = sample_poisson(params.mu, rng);
        let n1 = sample_poisson(params.lambda * phi0.bound, rng);
        let mut positions = Vec::with_capacity(n0 + n1);
        for _ in 0..n0 {
            positions.push(sample_position(params.dim, rng));
        }
        let mut w = 1.0;
        for _ in 0..n1 {
            let x = sample_position(params.dim, rng);
            let v = sample_maxwellian(params.beta, params.dim, rng);
            w *= phi0.eval(&x, &v) / phi0.bound;
            positions.push(x);
        }
        let y = if w != 0.0 && exclusion_ok(&positions, params.epsilon, params.dim) {
            w
        } else {
            0.0
        };
        sum += y;
        sum_sq += y * y;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) / (n - 1.0);
    Ok((norm * mean, norm * var.sqrt()))
}

/// The constant C0: maximum of three weighted sup-norms of the initial
/// data, maximized over a velocity box of radius 6/sqrt(beta) and a
/// position grid (the Gaussian weights decay beyond the box).
#[derive(Debug, Clone, Copy)]
pub struct C0Constant {
    pub value: f64,
    /// the three maximized expressions, in the order they appear
    pub terms: [f64; 3],
}

pub fn compute_c0(phi0: &Perturbation, beta: f64, dim: usize) -> C0Constant {
    compute_c0_resolution(phi0, beta, dim, if dim == 2 { 201 } else { 61 })
}

pub fn compute_c0_resolution(
    phi0: &Perturbation,
    beta: f64,
    dim: usize,
    nv: usize,
) -> C0Constant {
    let coef = (beta / (2.0 * std::f64::consts::PI)).powf(dim as f64 / 2.0);
    // sup_v M_beta exp(beta |v|^2 / 2) is constant in v
    let term1 = coef;
    let c3 = coef * (4.0 * std::f64::consts::PI / beta).powf(dim as f64 / 4.0);
    let vmax = 6.0 / beta.sqrt();
    let nx = if dim == 2 { 33 } else { 9 };
    let mut term2: f64 = 0.0;
    let mut term3: f64 = 0.0;
    let mut vidx = vec![0usize; dim];
    let mut xidx = vec![0usize; dim];
    loop {
        let mut v: Vect = [0.0; 3];
        for k in 0..dim {
            v[k] = -vmax + 2.0 * vmax * vidx[k] as f64 / (nv - 1) as f64;
        }
        let vsq = crate::geom::norm_sq(&v);
        let w2 = coef * (-beta * vsq / 4.0).exp();
        let w3 = c3 * (-3.0 * beta * vsq / 8.0).exp();
        for k in xidx.iter_mut() {
            *k = 0;
        }
        loop {
            let mut x: Vect = [0.0; 3];
            for k in 0..dim {
                x[k] = xidx[k] as f64 / nx as f64;
            }
            let p = phi0.eval(&x, &v).abs();
            term2 = term2.max(w2 * p);
            term3 = term3.max(w3 * p);
            if !advance(&mut xidx, nx) {
                break;
            }
        }
        if !advance(&mut vidx, nv) {
            break;
        }
    }
    C0Constant { value: term1.max(term2).max(term3), terms: [term1, term2, term3] }
}

fn advance(idx: &mut [usize], n: usize) -> bool {
    for k in idx.iter_mut() {
        *k += 1;
        if *k < n {
            return true;
        }
        *k = 0;
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::derive_stream;
    use approx::assert_abs_diff_eq;

    #[test]
    fn density_empty_state_is_one() {
        let params = ScalingParams::new(0.1, 1.0, 2, 0.0).unwrap();
        let s = SystemState::new(vec![]);
        assert_eq!(initial_density_unnormalized(&s, &params, &Perturbation::uniform()), 1.0);
    }

    #[test]
    fn density_single_background() {
        let params = ScalingParams::new(0.1, 2.0, 2, 0.0).unwrap();
        let v = [0.3, -0.4, 0.0];
        let s = SystemState::new(vec![ParticleState {
            x: [0.5, 0.5, 0.0],
            v,
            tag: Tag::Background,
        }]);
        let got = initial_density_unnormalized(&s, &params, &Perturbation::uniform());
        assert_abs_diff_eq!(got, params.mu * maxwellian(&v, 2.0, 2), epsilon = 1e-12);
    }

    #[test]
    fn density_vanishes_on_overlap() {
        let params = ScalingParams::new(0.1, 1.0, 2, 0.0).unwrap();
        let mk = |x: Vect| ParticleState { x, v: [0.0; 3], tag: Tag::Background };
        let s = SystemState::new(vec![mk([0.5, 0.5, 0.0]), mk([0.55, 0.5, 0.0])]);
        assert_eq!(initial_density_unnormalized(&s, &params, &Perturbation::uniform()), 0.0);
    }

    #[test]
    fn sampler_poisson_regime() {
        // mu decoupled at 1, epsilon tiny: exclusion almost never binds
        let params = ScalingParams::with_mu(1e-6, 1.0, 2, 0.0, 1.0).unwrap();
        let mut rng = derive_stream(100, "test-sampler", 0);
        let n = 100_000;
        let mut zeros = 0u64;
        for _ in 0..n {
            let s = sample_initial_state(&params, &Perturbation::uniform(), &mut rng).unwrap();
            if s.particles.is_empty() {
                zeros += 1;
            }
        }
        let p0 = zeros as f64 / n as f64;
        let target = (-1.0f64).exp();
        let sigma = (target * (1.0 - target) / n as f64).sqrt();
        assert!((p0 - target).abs() < 3.0 * sigma, "p0={p0}, target={target}");
    }

    #[test]
    fn sampler_tagged_mean() {
        let params = ScalingParams::with_mu(1e-6, 1.0, 2, 0.5, 1.0).unwrap();
        let mut rng = derive_stream(101, "test-sampler", 0);
        let n = 20_000;
        let mut tagged = 0u64;
        for _ in 0..n {
            let s = sample_initial_state(&params, &Perturbation::uniform(), &mut rng).unwrap();
            tagged += s.tagged_count() as u64;
        }
        let mean = tagged as f64 / n as f64;
        let sigma = (0.5 / n as f64).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * sigma, "mean={mean}");
    }

    #[test]
    fn sampler_exclusion_always_holds() {
        let params = ScalingParams::with_mu(0.05, 1.0, 2, 1.0, 8.0).unwrap();
        let mut rng = derive_stream(102, "test-sampler", 0);
        for _ in 0..500 {
            let s = sample_initial_state(&params, &Perturbation::cosine(), &mut rng).unwrap();
            let pos: Vec<Vect> = s.particles.iter().map(|p| p.x).collect();
            assert!(exclusion_ok(&pos, params.epsilon, params.dim));
        }
    }

    #[test]
    fn sampler_mean_count_vs_brute_force() {
        // lambda = 0, mu = 2, eps = 0.1, d = 2: E[N] from the density
        // directly, with a_n = int of the exclusion indicator estimated
        // by plain quadrature MC over n uniform points.
        let params = ScalingParams::with_mu(0.1, 1.0, 2, 0.0, 2.0).unwrap();
        let mut rng = derive_stream(103, "test-oracle", 0);
        let mut a = vec![1.0f64; 12];
        for n in 2..12usize {
            let trials = 200_000;
            let mut hits = 0u64;
            for _ in 0..trials {
                let pts: Vec<Vect> = (0..n).map(|_| sample_position(2, &mut rng)).collect();
                if exclusion_ok(&pts, params.epsilon, 2) {
                    hits += 1;
                }
            }
            a[n] = hits as f64 / trials as f64;
        }
        let mut num = 0.0;
        let mut den = 0.0;
        let mut fact = 1.0;
        for n in 0..12usize {
            if n > 0 {
                fact *= n as f64;
            }
            let w = params.mu.powi(n as i32) / fact * a[n];
            num += n as f64 * w;
            den += w;
        }
        let expected_mean = num / den;

        let mut rng2 = derive_stream(104, "test-sampler", 0);
        let n_samp = 20_000;
        let mut count_sum = 0.0;
        let mut count_sq = 0.0;
        for _ in 0..n_samp {
            let s = sample_initial_state(&params, &Perturbation::uniform(), &mut rng2).unwrap();
            let c = s.particles.len() as f64;
            count_sum += c;
            count_sq += c * c;
        }
        let mean = count_sum / n_samp as f64;
        let var = count_sq / n_samp as f64 - mean * mean;
        let se = (var / n_samp as f64).sqrt();
        assert!(
            (mean - expected_mean).abs() < 3.0 * se + 0.01,
            "sampler mean {mean} vs brute-force {expected_mean}"
        );
    }

    #[test]
    fn partition_function_no_exclusion() {
        let params = ScalingParams::with_mu(0.0, 1.0, 2, 1.0, 1.5).unwrap();
        let mut rng = derive_stream(105, "test-z", 0);
        let (z, se) =
            estimate_partition_function(&params, &Perturbation::uniform(), 50_000, &mut rng)
                .unwrap();
        let target = (params.mu + params.lambda).exp();
        assert!((z - target).abs() < 3.0 * se.max(1e-9), "z={z} target={target} se={se}");
    }

    #[test]
    fn partition_function_zero_phi_matches_lambda_zero() {
        let params0 = ScalingParams::with_mu(0.1, 1.0, 2, 0.0, 1.0).unwrap();
        let params1 = ScalingParams::with_mu(0.1, 1.0, 2, 0.7, 1.0).unwrap();
        let mut rng = derive_stream(106, "test-z", 0);
        let (z0, se0) =
            estimate_partition_function(&params0, &Perturbation::uniform(), 40_000, &mut rng)
                .unwrap();
        let (z1, se1) =
            estimate_partition_function(&params1, &Perturbation::zero(), 40_000, &mut rng)
                .unwrap();
        let se = (se0 * se0 + se1 * se1).sqrt();
        assert!((z0 - z1).abs() < 3.0 * se, "z0={z0} z1={z1}");
    }

    #[test]
    fn bookkeeping_matches_partition_estimator() {
        let params = ScalingParams::with_mu(0.08, 1.0, 2, 0.5, 4.0).unwrap();
        let phi0 = Perturbation::cosine();
        let mut rng = derive_stream(107, "test-z", 0);
        let mut stats = SamplerStats::default();
        for _ in 0..20_000 {
            sample_initial_state_tracked(&params, &phi0, &mut rng, &mut stats).unwrap();
        }
        let m = phi0.mass(params.beta, params.dim);
        let book = (params.mu + params.lambda * m).exp() * stats.acceptance_rate();
        let (z, se) =
            estimate_partition_function(&params, &phi0, 40_000, &mut rng).unwrap();
        let p = stats.acceptance_rate();
        let se_book = (params.mu + params.lambda * m).exp()
            * (p * (1.0 - p) / stats.attempts as f64).sqrt();
        let tol = 3.0 * (se * se + se_book * se_book).sqrt();
        assert!((book - z).abs() < tol, "book={book} z={z} tol={tol}");
    }

    #[test]
    fn c0_zero_perturbation() {
        let c = compute_c0(&Perturbation::zero(), 1.0, 2);
        assert_abs_diff_eq!(c.value, 1.0 / (2.0 * std::f64::consts::PI), epsilon = 1e-6);
    }

    #[test]
    fn c0_uniform_closed_form() {
        // third term dominates: sup M_beta M_{beta/2}^{-1/2} = 1/sqrt(pi)
        let c = compute_c0(&Perturbation::uniform(), 1.0, 2);
        assert_abs_diff_eq!(c.value, 1.0 / std::f64::consts::PI.sqrt(), epsilon = 1e-6);
        // double-resolution grid agrees
        let c2 = compute_c0_resolution(&Perturbation::uniform(), 1.0, 2, 401);
        assert_abs_diff_eq!(c.value, c2.value, epsilon = 1e-6);
    }

    #[test]
    fn c0_scaling_at_most_doubles() {
        let p = Perturbation::cosine();
        let c1 = compute_c0(&p, 1.0, 2);
        let c2 = compute_c0(&p.scaled(2.0), 1.0, 2);
        assert!(c2.value <= 2.0 * c1.value + 1e-12);
        assert!(c2.value >= c1.value - 1e-12);
    }

    #[test]
    fn gauss_shift_mass_formula() {
        // cross-check the closed form by 2D quadrature
        let p = Perturbation::gauss_shift();
        let beta = 1.3;
        let l = 8.0;
        let n = 600;
        let h = 2.0 * l / n as f64;
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                let v = [-l + (i as f64 + 0.5) * h, -l + (j as f64 + 0.5) * h, 0.0];
                acc += maxwellian(&v, beta, 2) * p.eval(&[0.0; 3], &v) * h * h;
            }
        }
        assert_abs_diff_eq!(acc, p.mass(beta, 2), epsilon = 1e-6);
    }
}
