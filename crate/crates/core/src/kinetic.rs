//! Solvers for the linear Rayleigh-Boltzmann equation: the collision
//! rate nu(v), a Monte Carlo jump process for test particles against
//! the Maxwellian background, and a deterministic discrete-velocity
//! oracle (d = 2, Fourier modes in x_1).

use crate::ensemble::Perturbation;
use crate::error::{Error, Result};
use crate::geom::{
    axpy, dot, maxwellian, norm, sample_maxwellian, sample_sphere, scatter, sub, wrap_position,
    Vect, ZERO_V,
};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::Distribution;

const TAU: f64 = std::f64::consts::TAU;
const PI: f64 = std::f64::consts::PI;

/// Angular factor int_{S^{d-1}} <omega, u>_+ domega = kappa_d |u|.
pub fn angular_factor(dim: usize) -> f64 {
    match dim {
        2 => 2.0,
        3 => PI,
        _ => panic!("dim must be 2 or 3"),
    }
}

/// Complete elliptic integral of the second kind,
/// E(m) = int_0^{pi/2} sqrt(1 - m sin^2 t) dt, by the AGM method.
pub fn elliptic_e(m: f64) -> f64 {
    assert!((0.0..=1.0).contains(&m));
    if m == 1.0 {
        return 1.0;
    }
    let mut a = 1.0f64;
    let mut b = (1.0 - m).sqrt();
    let mut c = m.sqrt();
    let mut sum = 0.5 * c * c;
    let mut p = 0.5;
    // quadratic convergence; the iteration cap guards against the terminal
    // one-ulp cycle of (a, b) in floating point, where c stagnates
    for _ in 0..64 {
        if c.abs() <= f64::EPSILON * a {
            break;
        }
        let an = 0.5 * (a + b);
        let bn = (a * b).sqrt();
        c = 0.5 * (a - b);
        a = an;
        b = bn;
        p *= 2.0;
        sum += p * c * c;
    }
    let k = PI / (2.0 * a);
    k * (1.0 - sum)
}

/// Gauss-Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            // evaluate P_n and P_n' by the recurrence
            let (mut p0, mut p1) = (1.0f64, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (mut p0, mut p1) = (1.0f64, x);
        for k in 2..=n {
            let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
            p0 = p1;
            p1 = p2;
        }
        let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        weights[i] = w;
        nodes[n - 1 - i] = x;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Spherical mean of |u - w| over directions of w at fixed |w| = r,
/// |u| = s: the angular reduction of E|v_c - v|.
fn angular_mean(r: f64, s: f64, dim: usize) -> f64 {
    if r == 0.0 || s == 0.0 {
        return r + s;
    }
    match dim {
        2 => {
            let m = 4.0 * r * s / ((r + s) * (r + s));
            2.0 * (r + s) / PI * elliptic_e(m.min(1.0))
        }
        3 => {
            let a = r + s;
            let b = (r - s).abs();
            (a * a * a - b * b * b) / (6.0 * r * s)
        }
        _ => panic!("dim must be 2 or 3"),
    }
}

/// E_{M_beta} |v_c - v| as a radial quadrature with the integrand split
/// at the kink r = |v|.
pub fn expected_relative_speed_order(speed: f64, beta: f64, dim: usize, order: usize) -> f64 {
    let rmax = 14.0 / beta.sqrt();
    let (gx, gw) = gauss_legendre(order);
    let density = |r: f64| -> f64 {
        let g = (-beta * r * r / 2.0).exp();
        match dim {
            2 => beta * r * g,
            3 => (2.0 / PI).sqrt() * beta.powf(1.5) * r * r * g,
            _ => unreachable!(),
        }
    };
    let panel = |a: f64, b: f64| -> f64 {
        let (c, h) = (0.5 * (a + b), 0.5 * (b - a));
        let mut acc = 0.0;
        for (x, w) in gx.iter().zip(gw.iter()) {
            let r = c + h * x;
            acc += w * density(r) * angular_mean(r, speed, dim);
        }
        acc * h
    };
    if speed > 0.0 && speed < rmax {
        panel(0.0, speed) + panel(speed, rmax)
    } else {
        panel(0.0, rmax)
    }
}

/// Collision rate nu(v) of the Rayleigh-Boltzmann loss term:
/// the double integral of M_beta(v_c) <omega, v_c - v>_+ reduces to
/// kappa_d E|v_c - v|.
pub fn collision_rate(v: &Vect, beta: f64, dim: usize) -> f64 {
    collision_rate_order(v, beta, dim, 48)
}

pub fn collision_rate_order(v: &Vect, beta: f64, dim: usize, order: usize) -> f64 {
    angular_factor(dim) * expected_relative_speed_order(norm(v), beta, dim, order)
}

/// Radial lookup table for nu(|v|) with linear interpolation, for the
/// inner loop of the jump process.
#[derive(Debug, Clone)]
pub struct RateTable {
    pub beta: f64,
    pub dim: usize,
    smax: f64,
    step: f64,
    vals: Vec<f64>,
}

impl RateTable {
    pub fn new(beta: f64, dim: usize) -> Self {
        let smax = 24.0 / beta.sqrt();
        let n = 2048usize;
        let step = smax / (n - 1) as f64;
        let vals = (0..n)
            .map(|i| {
                angular_factor(dim)
                    * expected_relative_speed_order(i as f64 * step, beta, dim, 48)
            })
            .collect();
        Self { beta, dim, smax, step, vals }
    }

    pub fn nu_speed(&self, s: f64) -> f64 {
        if s >= self.smax {
            return angular_factor(self.dim)
                * expected_relative_speed_order(s, self.beta, self.dim, 48);
        }
        let u = s / self.step;
        let i = (u as usize).min(self.vals.len() - 2);
        let f = u - i as f64;
        self.vals[i] * (1.0 - f) + self.vals[i + 1] * f
    }

    pub fn nu(&self, v: &Vect) -> f64 {
        self.nu_speed(norm(v))
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct RejectionStats {
    pub attempts: u64,
    pub accepted: u64,
}

/// Draw a background velocity and impact direction with density
/// proportional to M_beta(v_c) <omega, v_c - v>_+, by rejection from
/// M_beta x uniform sphere under the envelope C(v) = |v| + 12/sqrt(beta).
/// Returns (v_star, omega, v_c) with v_star the post-collisional test
/// particle velocity.
pub fn sample_collision<R: Rng + ?Sized>(
    v: &Vect,
    beta: f64,
    dim: usize,
    rng: &mut R,
) -> Result<(Vect, Vect, Vect)> {
    let mut stats = RejectionStats::default();
    sample_collision_tracked(v, beta, dim, rng, &mut stats)
}

pub fn sample_collision_tracked<R: Rng + ?Sized>(
    v: &Vect,
    beta: f64,
    dim: usize,
    rng: &mut R,
    stats: &mut RejectionStats,
) -> Result<(Vect, Vect, Vect)> {
    let cap = norm(v) + 12.0 / beta.sqrt();
    for _ in 0..1_000_000u64 {
        stats.attempts += 1;
        let vc = sample_maxwellian(beta, dim, rng);
        let omega = sample_sphere(dim, rng);
        let flux = dot(&omega, &sub(&vc, v)).max(0.0);
        // flux > cap has probability below exp(-72); accept outright
        if flux >= cap || rng.random_range(0.0..1.0) * cap < flux {
            stats.accepted += 1;
            let (v_star, _) = scatter(v, &vc, &omega)?;
            return Ok((v_star, omega, vc));
        }
    }
    Err(Error::RejectionCap(1_000_000))
}

/// A test-particle path: free flight broken by velocity jumps.
#[derive(Debug, Clone)]
pub struct TestTrajectory {
    /// time of each jump, increasing
    pub jump_times: Vec<f64>,
    /// states[0] at time 0; states[i+1] holds (position, velocity)
    /// immediately after jump i
    pub states: Vec<(Vect, Vect)>,
    pub t_end: f64,
}

impl TestTrajectory {
    pub fn state_at(&self, t: f64, dim: usize) -> (Vect, Vect) {
        let seg = self.jump_times.partition_point(|&s| s <= t);
        let t0 = if seg == 0 { 0.0 } else { self.jump_times[seg - 1] };
        let (x0, v) = self.states[seg];
        let mut x = axpy(&x0, t - t0, &v);
        wrap_position(&mut x, dim);
        (x, v)
    }

    pub fn final_velocity(&self) -> Vect {
        self.states.last().unwrap().1
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("jump_time,vx,vy,vz\n");
        for (i, &t) in self.jump_times.iter().enumerate() {
            let v = self.states[i + 1].1;
            s.push_str(&format!("{:.17e},{:.17e},{:.17e},{:.17e}\n", t, v[0], v[1], v[2]));
        }
        s
    }
}

/// Simulate the stochastic characteristics of the Rayleigh-Boltzmann
/// equation: free flight at rate nu(v) interrupted by collisions with
/// the Maxwellian background. Thinning from a constant majorant that
/// covers a velocity ball of radius 8/sqrt(beta) and is recomputed
/// whenever the velocity leaves it (nu is increasing in |v|).
pub fn simulate_test_particle<R: Rng + ?Sized>(
    z0: (Vect, Vect),
    t: f64,
    beta: f64,
    dim: usize,
    table: &RateTable,
    rng: &mut R,
) -> Result<TestTrajectory> {
    let ball = 8.0 / beta.sqrt();
    let (mut x, mut v) = z0;
    let mut nu_max = 1.1 * table.nu_speed(ball.max(norm(&v)));
    let mut traj = TestTrajectory {
        jump_times: vec![],
        states: vec![(x, v)],
        t_end: t,
    };
    let mut now = 0.0f64;
    loop {
        let dt: f64 = rand_distr::Exp::new(nu_max)
            .map_err(|_| Error::InvalidParams("nonpositive thinning rate".into()))?
            .sample(rng);
        now += dt;
        if now >= t {
            break;
        }
        if rng.random_range(0.0..1.0) * nu_max < table.nu(&v) {
            // realize the jump: advance the stored anchor to `now`
            x = axpy(&x, now - last_anchor(&traj), &v);
            wrap_position(&mut x, dim);
            let (v_star, _, _) = sample_collision(&v, beta, dim, rng)?;
            v = v_star;
            traj.jump_times.push(now);
            traj.states.push((x, v));
            if norm(&v) > ball {
                nu_max = 1.1 * table.nu_speed(norm(&v));
            } else {
                nu_max = 1.1 * table.nu_speed(ball);
            }
        }
    }
    Ok(traj)
}

fn last_anchor(traj: &TestTrajectory) -> f64 {
    traj.jump_times.last().copied().unwrap_or(0.0)
}

/// Uniform midpoint lattice in velocity space with cell-volume weights.
#[derive(Debug, Clone)]
pub struct VelocityGrid {
    pub beta: f64,
    pub dim: usize,
    pub per_axis: usize,
    pub vmax: f64,
    pub nodes: Vec<Vect>,
    pub weight: f64,
}

impl VelocityGrid {
    pub fn new(beta: f64, dim: usize, per_axis: usize) -> Self {
        let vmax = 6.0 / beta.sqrt();
        let h = 2.0 * vmax / per_axis as f64;
        let n = per_axis.pow(dim as u32);
        let mut nodes = Vec::with_capacity(n);
        for idx in 0..n {
            let mut rem = idx;
            let mut v = ZERO_V;
            for c in v.iter_mut().take(dim) {
                *c = -vmax + (rem % per_axis) as f64 * h + 0.5 * h;
                rem /= per_axis;
            }
            nodes.push(v);
        }
        Self { beta, dim, per_axis, vmax, nodes, weight: h.powi(dim as i32) }
    }

    pub fn maxwellian_mass(&self) -> f64 {
        self.nodes.iter().map(|v| maxwellian(v, self.beta, self.dim)).sum::<f64>() * self.weight
    }

    /// index of the grid node nearest to v
    pub fn nearest_node(&self, v: &Vect) -> usize {
        let h = 2.0 * self.vmax / self.per_axis as f64;
        let mut idx = 0usize;
        let mut strd = 1usize;
        for k in 0..self.dim {
            let u = ((v[k] + self.vmax) / h - 0.5).round().clamp(0.0, (self.per_axis - 1) as f64);
            idx += strd * u as usize;
            strd *= self.per_axis;
        }
        idx
    }
}

/// Discretized collision operator of (the velocity part of) the
/// Rayleigh-Boltzmann equation on a velocity grid, d = 2.
///
/// `gain[k + n*l]` is the jump rate from node l to node k. Raw rates
/// are assembled by quadrature over (v_c, omega) with bilinear deposit
/// of the post-collisional velocity, then symmetrized in the
/// M_beta-weighted sense so that the discrete operator conserves
/// int M_beta phi exactly and kills constants exactly.
pub struct RbOperator {
    pub n: usize,
    pub gain: Vec<f64>,
    pub nu: Vec<f64>,
    pub m: Vec<f64>,
}

impl RbOperator {
    pub fn new(grid: &VelocityGrid, n_angles: usize) -> Self {
        assert_eq!(grid.dim, 2, "grid oracle is two-dimensional");
        let n = grid.nodes.len();
        let per = grid.per_axis;
        let h = 2.0 * grid.vmax / per as f64;
        let mut raw = vec![0.0f64; n * n];
        let dw = TAU / n_angles as f64;
        for l in 0..n {
            let v = grid.nodes[l];
            for vc in grid.nodes.iter() {
                let mc = maxwellian(vc, grid.beta, 2) * grid.weight;
                if mc < 1e-300 {
                    continue;
                }
                let rel = sub(vc, &v);
                for a in 0..n_angles {
                    let th = (a as f64 + 0.5) * dw;
                    let om = [th.cos(), th.sin(), 0.0];
                    let flux = dot(&om, &rel);
                    if flux <= 0.0 {
                        continue;
                    }
                    let rate = mc * flux * dw;
                    let vs = axpy(&v, flux, &om);
                    // bilinear deposit of v* on the lattice
                    let ux = ((vs[0] + grid.vmax) / h - 0.5).clamp(0.0, (per - 1) as f64);
                    let uy = ((vs[1] + grid.vmax) / h - 0.5).clamp(0.0, (per - 1) as f64);
                    let (i0, j0) = (ux as usize, uy as usize);
                    let (i1, j1) = ((i0 + 1).min(per - 1), (j0 + 1).min(per - 1));
                    let (fx, fy) = (ux - i0 as f64, uy - j0 as f64);
                    raw[(i0 + per * j0) + n * l] += rate * (1.0 - fx) * (1.0 - fy);
                    raw[(i1 + per * j0) + n * l] += rate * fx * (1.0 - fy);
                    raw[(i0 + per * j1) + n * l] += rate * (1.0 - fx) * fy;
                    raw[(i1 + per * j1) + n * l] += rate * fx * fy;
                }
            }
        }
        let m: Vec<f64> = grid.nodes.iter().map(|v| maxwellian(v, grid.beta, 2)).collect();
        let mut gain = vec![0.0f64; n * n];
        for l in 0..n {
            for k in 0..n {
                let s = 0.5 * (m[l] * raw[k + n * l] + m[k] * raw[l + n * k]);
                gain[k + n * l] = s / m[l];
            }
        }
        let nu = (0..n)
            .map(|l| (0..n).map(|k| gain[k + n * l]).sum::<f64>())
            .collect();
        Self { n, gain, nu, m }
    }

    /// (L phi)_l = sum_k gain[k + n l] phi_k - nu_l phi_l
    pub fn apply(&self, phi: &[f64], out: &mut [f64]) {
        let n = self.n;
        for l in 0..n {
            let col = &self.gain[n * l..n * l + n];
            let mut acc = 0.0;
            for (k, g) in col.iter().enumerate() {
                acc += g * phi[k];
            }
            out[l] = acc - self.nu[l] * phi[l];
        }
    }

    pub fn max_rate(&self) -> f64 {
        self.nu.iter().cloned().fold(0.0, f64::max)
    }

    /// The similarity transform D L D^{-1} with D = diag(sqrt M_beta):
    /// symmetric, its spectrum is that of L in L^2(M_beta).
    pub fn symmetrized_matrix(&self) -> Vec<f64> {
        let n = self.n;
        let mut b = vec![0.0f64; n * n];
        for l in 0..n {
            for k in 0..n {
                let mut x = self.gain[k + n * l] * (self.m[l] / self.m[k]).sqrt();
                if k == l {
                    x -= self.nu[l];
                }
                b[k + n * l] = x;
            }
        }
        b
    }
}

/// Solution of the grid-discretized equation, stored as Fourier
/// coefficients in x_1 per velocity node.
pub struct GridSolution {
    pub beta: f64,
    pub weight: f64,
    pub nodes: Vec<Vect>,
    pub modes: Vec<i64>,
    pub coeffs: Vec<Vec<Complex64>>,
    pub t: f64,
}

impl GridSolution {
    /// sum_l w M_beta(v_l) phihat_m(v_l) h(v_l)
    pub fn moment<F: Fn(&Vect) -> f64>(&self, mode: i64, h: F) -> Complex64 {
        let mi = self.modes.iter().position(|&m| m == mode).expect("mode present");
        let mut acc = Complex64::new(0.0, 0.0);
        for (l, v) in self.nodes.iter().enumerate() {
            acc += self.coeffs[mi][l] * maxwellian(v, self.beta, 2) * h(v);
        }
        acc * self.weight
    }

    /// int M_beta phi(t) dx dv
    pub fn mass(&self) -> f64 {
        self.moment(0, |_| 1.0).re
    }

    /// int M_beta phi(t, x, v) cos(2 pi x_1) h(v) dx dv
    pub fn observable_cos<F: Fn(&Vect) -> f64 + Copy>(&self, h: F) -> f64 {
        let mut acc = 0.0;
        if self.modes.contains(&1) {
            acc += 0.5 * self.moment(1, h).re;
        }
        if self.modes.contains(&-1) {
            acc += 0.5 * self.moment(-1, h).re;
        }
        acc
    }

    /// phi(t, x1, v_node), real by conjugate symmetry of the data
    pub fn value_at(&self, x1: f64, node: usize) -> f64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for (mi, &m) in self.modes.iter().enumerate() {
            acc += self.coeffs[mi][node] * Complex64::from_polar(1.0, TAU * m as f64 * x1);
        }
        acc.re
    }

    /// weighted L2 distance squared to the constant c: int M |phi - c|^2
    /// for the spatial mean mode
    pub fn l2_distance_uniform(&self, c: f64) -> f64 {
        let mi = self.modes.iter().position(|&m| m == 0).unwrap();
        let mut acc = 0.0;
        for (l, v) in self.nodes.iter().enumerate() {
            acc += (self.coeffs[mi][l] - c).norm_sqr() * maxwellian(v, self.beta, 2);
        }
        acc * self.weight
    }
}

fn fourier_init(phi0: &Perturbation, grid: &VelocityGrid, modes: &[i64]) -> Vec<Vec<Complex64>> {
    let nx = 256usize;
    modes
        .iter()
        .map(|&m| {
            grid.nodes
                .iter()
                .map(|v| {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for i in 0..nx {
                        let x1 = i as f64 / nx as f64;
                        let p = phi0.eval(&[x1, 0.0, 0.0], v);
                        acc += Complex64::from_polar(p, -TAU * m as f64 * x1);
                    }
                    acc / nx as f64
                })
                .collect()
        })
        .collect()
}

/// Explicit RK4 evolution of d/dt phihat_m = -2 pi i m v_1 phihat_m
/// + L phihat_m up to time t.
pub fn solve_rb_grid(
    phi0: &Perturbation,
    t: f64,
    beta: f64,
    grid: &VelocityGrid,
    space_modes: usize,
) -> Result<GridSolution> {
    let op = RbOperator::new(grid, 64);
    solve_rb_grid_with(phi0, t, beta, grid, space_modes, &op)
}

pub fn solve_rb_grid_with(
    phi0: &Perturbation,
    t: f64,
    beta: f64,
    grid: &VelocityGrid,
    space_modes: usize,
    op: &RbOperator,
) -> Result<GridSolution> {
    if grid.dim != 2 {
        return Err(Error::InvalidParams("grid solver requires d = 2".into()));
    }
    if t > 10.0 {
        return Err(Error::CapViolation {
            module: "kinetic",
            what: format!("t = {t} exceeds the solver horizon 10"),
        });
    }
    let m_max = space_modes as i64;
    let modes: Vec<i64> = (-m_max..=m_max).collect();
    let mut coeffs = fourier_init(phi0, grid, &modes);
    let norm0: f64 = coeffs
        .iter()
        .flat_map(|c| c.iter())
        .map(|z| z.norm_sqr())
        .sum::<f64>()
        .sqrt()
        .max(1e-300);
    let rate = op.max_rate() + TAU * m_max as f64 * grid.vmax * 1.5;
    let dt = (0.5 / rate).min(t.max(1e-12));
    let steps = (t / dt).ceil().max(1.0) as usize;
    let dt = t / steps as f64;
    let n = grid.nodes.len();
    let mut k1 = vec![Complex64::new(0.0, 0.0); n];
    let mut k2 = k1.clone();
    let mut k3 = k1.clone();
    let mut k4 = k1.clone();
    let mut tmp = k1.clone();
    for (mi, &m) in modes.iter().enumerate() {
        let phase: Vec<Complex64> = grid
            .nodes
            .iter()
            .map(|v| Complex64::new(0.0, -TAU * m as f64 * v[0]))
            .collect();
        let rhs = |y: &[Complex64], out: &mut [Complex64],
                   op: &RbOperator, phase: &[Complex64]| {
            apply_complex(op, y, out);
            for l in 0..y.len() {
                out[l] += phase[l] * y[l];
            }
        };
        let y = &mut coeffs[mi];
        for _ in 0..steps {
            rhs(y, &mut k1, op, &phase);
            for l in 0..n {
                tmp[l] = y[l] + 0.5 * dt * k1[l];
            }
            rhs(&tmp, &mut k2, op, &phase);
            for l in 0..n {
                tmp[l] = y[l] + 0.5 * dt * k2[l];
            }
            rhs(&tmp, &mut k3, op, &phase);
            for l in 0..n {
                tmp[l] = y[l] + dt * k3[l];
            }
            rhs(&tmp, &mut k4, op, &phase);
            for l in 0..n {
                y[l] += dt / 6.0 * (k1[l] + 2.0 * k2[l] + 2.0 * k3[l] + k4[l]);
            }
        }
    }
    let norm1: f64 = coeffs
        .iter()
        .flat_map(|c| c.iter())
        .map(|z| z.norm_sqr())
        .sum::<f64>()
        .sqrt();
    if norm1 > 10.0 * norm0.max(1.0) {
        return Err(Error::Unstable(norm1 / norm0));
    }
    Ok(GridSolution {
        beta,
        weight: grid.weight,
        nodes: grid.nodes.clone(),
        modes,
        coeffs,
        t,
    })
}

fn apply_complex(op: &RbOperator, y: &[Complex64], out: &mut [Complex64]) {
    let n = op.n;
    for l in 0..n {
        let col = &op.gain[n * l..n * l + n];
        let mut acc = Complex64::new(0.0, 0.0);
        for (k, g) in col.iter().enumerate() {
            acc += g * y[k];
        }
        out[l] = acc - op.nu[l] * y[l];
    }
}

/// First Duhamel iterate int_0^t T(t-s) L T(s) phi_0 ds evaluated at
/// (x1, node): the oracle for the one-collision term of the Dyson
/// expansion. Composite Simpson in s.
pub fn duhamel_first_iterate(
    phi0: &Perturbation,
    t: f64,
    grid: &VelocityGrid,
    space_modes: usize,
    op: &RbOperator,
    x1: f64,
    node: usize,
) -> f64 {
    let m_max = space_modes as i64;
    let modes: Vec<i64> = (-m_max..=m_max).collect();
    let coeffs0 = fourier_init(phi0, grid, &modes);
    let n = grid.nodes.len();
    let segs = 40usize; // Simpson: even count
    let mut total = Complex64::new(0.0, 0.0);
    let mut w = vec![Complex64::new(0.0, 0.0); n];
    let mut lw = vec![Complex64::new(0.0, 0.0); n];
    for (mi, &m) in modes.iter().enumerate() {
        let freq: Vec<f64> = grid.nodes.iter().map(|v| TAU * m as f64 * v[0]).collect();
        let mut acc = Complex64::new(0.0, 0.0);
        for j in 0..=segs {
            let s = t * j as f64 / segs as f64;
            let simpson = if j == 0 || j == segs {
                1.0
            } else if j % 2 == 1 {
                4.0
            } else {
                2.0
            };
            for l in 0..n {
                w[l] = coeffs0[mi][l] * Complex64::from_polar(1.0, -freq[l] * s);
            }
            apply_complex(op, &w, &mut lw);
            let r = lw[node] * Complex64::from_polar(1.0, -freq[node] * (t - s));
            acc += simpson * r;
        }
        acc *= t / (3.0 * segs as f64);
        total += acc * Complex64::from_polar(1.0, TAU * m as f64 * x1);
    }
    total.re
}
