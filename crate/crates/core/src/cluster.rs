//! Exclusion cumulants over connected graphs, labeled-tree enumeration,
//! the tree inequality, cumulant integrals, and the two partition-function
//! representations (direct series and cumulant exponential) together with
//! the fugacity-quotient estimate.

use crate::ensemble::Perturbation;
use crate::error::{Error, Result};
use crate::exec::{derive_stream, map_indexed};
use crate::geom::{
    sample_position, sample_sphere, scale, torus_distance, unit_ball_volume, wrap_position, Vect,
    ScalingParams, ZERO_V,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Hard cap on the order of exhaustive connected-graph enumeration.
pub const CONNECTED_GRAPH_CAP: usize = 6;
/// Absolute cap, reachable only with an explicit override.
pub const CONNECTED_GRAPH_HARD_CAP: usize = 7;
/// Cap on tree enumeration (Pruefer decoding).
pub const TREE_CAP: usize = 9;

/// A labeled graph on vertices 0..k with an explicit edge list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledGraph {
    pub k: usize,
    /// Unordered pairs (i, j) with i < j < k, no duplicates, no loops.
    pub edges: Vec<(usize, usize)>,
}

impl LabeledGraph {
    pub fn new(k: usize, mut edges: Vec<(usize, usize)>) -> Result<Self> {
        for e in edges.iter_mut() {
            if e.0 > e.1 {
                *e = (e.1, e.0);
            }
            if e.0 == e.1 || e.1 >= k {
                return Err(Error::InvalidParams(format!(
                    "bad edge {:?} on {k} vertices",
                    e
                )));
            }
        }
        edges.sort_unstable();
        edges.dedup();
        Ok(Self { k, edges })
    }

    pub fn is_connected(&self) -> bool {
        if self.k == 0 {
            return false;
        }
        let mut uf = UnionFind::new(self.k);
        for &(i, j) in &self.edges {
            uf.union(i, j);
        }
        uf.component_count() == 1
    }

    pub fn is_tree(&self) -> bool {
        self.edges.len() + 1 == self.k && self.is_connected()
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }
    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }
    fn union(&mut self, i: usize, j: usize) {
        let (ri, rj) = (self.find(i), self.find(j));
        if ri != rj {
            self.parent[ri] = rj;
        }
    }
    fn component_count(&mut self) -> usize {
        let n = self.parent.len();
        (0..n).filter(|&i| self.find(i) == i).count()
    }
}

/// All connected labeled graphs on k vertices, by brute-force filtering of
/// every edge subset. `override_cap` unlocks k = 7 (2^21 subsets).
pub fn connected_graphs_with_cap(k: usize, override_cap: bool) -> Result<Vec<LabeledGraph>> {
    let cap = if override_cap {
        CONNECTED_GRAPH_HARD_CAP
    } else {
        CONNECTED_GRAPH_CAP
    };
    if k == 0 || k > cap {
        return Err(Error::CapViolation {
            module: "cluster",
            what: format!("connected_graphs order {k} exceeds cap {cap}"),
        });
    }
    let pairs: Vec<(usize, usize)> = (0..k)
        .flat_map(|i| ((i + 1)..k).map(move |j| (i, j)))
        .collect();
    let m = pairs.len();
    let mut out = Vec::new();
    for mask in 0u64..(1u64 << m) {
        let edges: Vec<(usize, usize)> = (0..m)
            .filter(|b| mask >> b & 1 == 1)
            .map(|b| pairs[b])
            .collect();
        let g = LabeledGraph { k, edges };
        if g.is_connected() {
            out.push(g);
        }
    }
    Ok(out)
}

pub fn connected_graphs(k: usize) -> Result<Vec<LabeledGraph>> {
    connected_graphs_with_cap(k, false)
}

/// Number of connected labeled graphs on n vertices by the classical
/// recurrence C_n = 2^(n choose 2) - sum_{k<n} (n-1 choose k-1) C_k 2^((n-k) choose 2).
pub fn connected_graph_count(n: usize) -> u128 {
    fn choose(n: usize, k: usize) -> u128 {
        if k > n {
            return 0;
        }
        let mut r: u128 = 1;
        for i in 0..k {
            r = r * (n - i) as u128 / (i + 1) as u128;
        }
        r
    }
    let pow2 = |m: usize| 1u128 << (m * (m.max(1) - 1) / 2);
    let mut c = vec![0u128; n + 1];
    for i in 1..=n {
        let mut s = pow2(i);
        for k in 1..i {
            s -= choose(i - 1, k - 1) * c[k] * pow2(i - k);
        }
        c[i] = s;
    }
    c[n]
}

/// All labeled trees on k vertices via Pruefer decoding; k^(k-2) of them.
pub fn enumerate_trees(k: usize) -> Result<Vec<LabeledGraph>> {
    if k == 0 || k > TREE_CAP {
        return Err(Error::CapViolation {
            module: "cluster",
            what: format!("enumerate_trees order {k} exceeds cap {TREE_CAP}"),
        });
    }
    if k == 1 {
        return Ok(vec![LabeledGraph { k, edges: vec![] }]);
    }
    if k == 2 {
        return Ok(vec![LabeledGraph {
            k,
            edges: vec![(0, 1)],
        }]);
    }
    let len = k - 2;
    let total = (k as u64).pow(len as u32);
    let mut out = Vec::with_capacity(total as usize);
    let mut seq = vec![0usize; len];
    for code in 0..total {
        let mut c = code;
        for s in seq.iter_mut() {
            *s = (c % k as u64) as usize;
            c /= k as u64;
        }
        out.push(decode_pruefer(k, &seq));
    }
    Ok(out)
}

fn decode_pruefer(k: usize, seq: &[usize]) -> LabeledGraph {
    let mut degree = vec![1usize; k];
    for &s in seq {
        degree[s] += 1;
    }
    let mut edges = Vec::with_capacity(k - 1);
    let mut ptr = 0; // smallest leaf candidate not yet used
    let mut leaf = usize::MAX;
    for &s in seq {
        if leaf == usize::MAX {
            while degree[ptr] != 1 {
                ptr += 1;
            }
            leaf = ptr;
            ptr += 1;
        }
        edges.push((leaf.min(s), leaf.max(s)));
        degree[leaf] -= 1;
        degree[s] -= 1;
        // if s became a leaf below the scan pointer it must be picked next
        leaf = if degree[s] == 1 && s < ptr {
            s
        } else {
            usize::MAX
        };
    }
    // two vertices of degree 1 remain
    let mut last = [0usize; 2];
    let mut idx = 0;
    for (v, &d) in degree.iter().enumerate() {
        if d == 1 {
            last[idx] = v;
            idx += 1;
        }
    }
    edges.push((last[0].min(last[1]), last[0].max(last[1])));
    edges.sort_unstable();
    LabeledGraph { k, edges }
}

#[inline]
fn overlaps(a: &Vect, b: &Vect, epsilon: f64, dim: usize) -> bool {
    torus_distance(a, b, dim) <= epsilon
}

/// Overlap adjacency of a configuration: edge iff torus distance <= epsilon.
fn overlap_edges(positions: &[Vect], epsilon: f64, dim: usize) -> Vec<(usize, usize)> {
    let k = positions.len();
    let mut edges = Vec::new();
    for i in 0..k {
        for j in (i + 1)..k {
            if overlaps(&positions[i], &positions[j], epsilon, dim) {
                edges.push((i, j));
            }
        }
    }
    edges
}

/// Exclusion cumulant: sum over connected graphs whose edges all lie in the
/// overlap graph, of (-1)^(edge count). Integer-valued; returned as i64.
pub fn cumulant_phi_int(positions: &[Vect], epsilon: f64, dim: usize) -> Result<i64> {
    let k = positions.len();
    if k == 0 || k > CONNECTED_GRAPH_CAP {
        return Err(Error::CapViolation {
            module: "cluster",
            what: format!("cumulant order {k} exceeds cap {CONNECTED_GRAPH_CAP}"),
        });
    }
    if k == 1 {
        return Ok(1);
    }
    // Enumerate connected subgraphs of the overlap graph directly: filter
    // subsets of the overlap edges for connectivity on all k vertices.
    let edges = overlap_edges(positions, epsilon, dim);
    let m = edges.len();
    if m < k - 1 {
        return Ok(0);
    }
    let mut total: i64 = 0;
    for mask in 0u64..(1u64 << m) {
        let cnt = mask.count_ones() as usize;
        if cnt < k - 1 {
            continue;
        }
        let mut uf = UnionFind::new(k);
        for (b, &(i, j)) in edges.iter().enumerate() {
            if mask >> b & 1 == 1 {
                uf.union(i, j);
            }
        }
        if uf.component_count() == 1 {
            total += if cnt % 2 == 0 { 1 } else { -1 };
        }
    }
    Ok(total)
}

pub fn cumulant_phi(positions: &[Vect], epsilon: f64, dim: usize) -> Result<f64> {
    cumulant_phi_int(positions, epsilon, dim).map(|v| v as f64)
}

/// Tree-restricted majorant: the number of spanning trees of the overlap
/// graph, computed by the matrix-tree theorem with exact integer arithmetic.
pub fn tree_bound(positions: &[Vect], epsilon: f64, dim: usize) -> Result<f64> {
    let k = positions.len();
    if k == 0 || k > TREE_CAP {
        return Err(Error::CapViolation {
            module: "cluster",
            what: format!("tree_bound order {k} exceeds cap {TREE_CAP}"),
        });
    }
    if k == 1 {
        return Ok(1.0);
    }
    let edges = overlap_edges(positions, epsilon, dim);
    Ok(spanning_tree_count(k, &edges) as f64)
}

/// Spanning trees of a graph by the Kirchhoff determinant (Laplacian minor),
/// evaluated with fraction-free Gaussian elimination in i128.
pub fn spanning_tree_count(k: usize, edges: &[(usize, usize)]) -> i128 {
    if k == 1 {
        return 1;
    }
    let n = k - 1;
    let mut a = vec![vec![0i128; n]; n];
    for &(i, j) in edges {
        if i < n {
            a[i][i] += 1;
        }
        if j < n {
            a[j][j] += 1;
        }
        if i < n && j < n {
            a[i][j] -= 1;
            a[j][i] -= 1;
        }
    }
    // Bareiss algorithm: exact determinant of an integer matrix.
    let mut prev: i128 = 1;
    let mut sign: i128 = 1;
    for p in 0..n {
        if a[p][p] == 0 {
            let swap = (p + 1..n).find(|&r| a[r][p] != 0);
            match swap {
                Some(r) => {
                    a.swap(p, r);
                    sign = -sign;
                }
                None => return 0,
            }
        }
        for r in (p + 1)..n {
            for c in (p + 1)..n {
                a[r][c] = (a[r][c] * a[p][p] - a[r][p] * a[p][c]) / prev;
            }
            a[r][p] = 0;
        }
        prev = a[p][p];
    }
    sign * a[n - 1][n - 1]
}

/// Slow oracle for the tree bound: explicit sum over all labeled trees.
pub fn tree_bound_by_enumeration(positions: &[Vect], epsilon: f64, dim: usize) -> Result<f64> {
    let k = positions.len();
    let trees = enumerate_trees(k)?;
    let mut total = 0u64;
    'trees: for t in &trees {
        for &(i, j) in &t.edges {
            if !overlaps(&positions[i], &positions[j], epsilon, dim) {
                continue 'trees;
            }
        }
        total += 1;
    }
    Ok(total as f64)
}

/// Cayley count k^(k-2) as a float, the a-priori majorant of the tree bound
/// after integrating out all but one point.
pub fn cayley(k: usize) -> f64 {
    if k <= 2 {
        1.0
    } else {
        (k as f64).powi(k as i32 - 2)
    }
}

/// One row of evidence for the tree inequality.
#[derive(Debug, Clone)]
pub struct CumulantRow {
    pub positions: Vec<Vect>,
    pub phi: f64,
    pub tree_bound: f64,
}

/// Table of sampled cumulant evaluations with their tree majorants.
#[derive(Debug, Clone)]
pub struct CumulantTable {
    pub k: usize,
    pub samples: Vec<CumulantRow>,
}

impl CumulantTable {
    /// Sample random configurations biased so the overlap graph is often
    /// nontrivial (half the draws cluster inside a 2*epsilon*k box).
    pub fn sample(k: usize, epsilon: f64, dim: usize, n: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut samples = Vec::with_capacity(n);
        for s in 0..n {
            let mut pos = Vec::with_capacity(k);
            if s % 2 == 0 {
                let center = sample_position(dim, rng);
                for _ in 0..k {
                    let mut x = center;
                    for c in x.iter_mut().take(dim) {
                        *c += rng.random_range(-1.2 * epsilon..1.2 * epsilon) * k as f64 / 2.0;
                    }
                    wrap_position(&mut x, dim);
                    pos.push(x);
                }
            } else {
                for _ in 0..k {
                    pos.push(sample_position(dim, rng));
                }
            }
            let phi = cumulant_phi(&pos, epsilon, dim)?;
            let tb = tree_bound(&pos, epsilon, dim)?;
            if phi.abs() > tb {
                return Err(Error::CapViolation {
                    module: "cluster",
                    what: format!("tree inequality violated: |{phi}| > {tb}"),
                });
            }
            samples.push(CumulantRow {
                positions: pos,
                phi,
                tree_bound: tb,
            });
        }
        Ok(Self { k, samples })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,l,estimate,std_error,bound\n");
        for row in &self.samples {
            s.push_str(&format!(
                "{},0,{:.17e},0.0,{:.17e}\n",
                self.k, row.phi, row.tree_bound
            ));
        }
        s
    }
}

/// Monte Carlo estimate of the integral of |phi_k| over the torus with the
/// first point pinned at the origin (translation invariance).
pub fn integral_abs_cumulant(
    k: usize,
    epsilon: f64,
    dim: usize,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    if k > CONNECTED_GRAPH_CAP {
        return Err(Error::CapViolation {
            module: "cluster",
            what: format!("integral_abs_cumulant order {k} exceeds cap"),
        });
    }
    if samples < 2 {
        return Err(Error::InvalidParams("need at least 2 samples".into()));
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut pos = vec![ZERO_V; k];
    for _ in 0..samples {
        for p in pos.iter_mut().skip(1) {
            *p = sample_position(dim, rng);
        }
        let v = cumulant_phi(&pos, epsilon, dim)?.abs();
        sum += v;
        sum_sq += v * v;
    }
    let mean = sum / samples as f64;
    let var = (sum_sq / samples as f64 - mean * mean).max(0.0);
    Ok((mean, (var / samples as f64).sqrt()))
}

/// Uniform point in the epsilon-ball around `center`, wrapped to the torus.
fn sample_ball_offset(center: &Vect, epsilon: f64, dim: usize, rng: &mut ChaCha8Rng) -> Vect {
    let dir = sample_sphere(dim, rng);
    let r = epsilon * rng.random::<f64>().powf(1.0 / dim as f64);
    let mut x = crate::geom::add(center, &scale(&dir, r));
    wrap_position(&mut x, dim);
    x
}

/// Draw a uniform labeled tree on k vertices (uniform Pruefer sequence).
fn random_tree(k: usize, rng: &mut ChaCha8Rng) -> LabeledGraph {
    if k <= 2 {
        return enumerate_trees(k).unwrap().pop().unwrap();
    }
    let seq: Vec<usize> = (0..k - 2).map(|_| rng.random_range(0..k)).collect();
    decode_pruefer(k, &seq)
}

/// Importance-sampled estimate of the same integral: configurations are
/// proposed as chains of epsilon-balls along a uniform random labeled tree,
/// whose mixture density is tree_bound / (k^(k-2) |B| epsilon^d)^(k-1)).
/// Weights are bounded by the Cayley majorant, taming the variance.
pub fn integral_abs_cumulant_is(
    k: usize,
    epsilon: f64,
    dim: usize,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    if k > CONNECTED_GRAPH_CAP {
        return Err(Error::CapViolation {
            module: "cluster",
            what: format!("integral_abs_cumulant_is order {k} exceeds cap"),
        });
    }
    if samples < 2 {
        return Err(Error::InvalidParams("need at least 2 samples".into()));
    }
    let vball = unit_ball_volume(dim) * epsilon.powi(dim as i32);
    let norm = cayley(k) * vball.powi(k as i32 - 1);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..samples {
        let tree = random_tree(k, rng);
        let mut pos = vec![ZERO_V; k];
        let mut placed = vec![false; k];
        placed[0] = true; // pinned at the origin
        // place children along tree edges outward from vertex 0
        let mut frontier = vec![0usize];
        while let Some(u) = frontier.pop() {
            for &(a, b) in &tree.edges {
                let (p, c) = if a == u && !placed[b] {
                    (a, b)
                } else if b == u && !placed[a] {
                    (b, a)
                } else {
                    continue;
                };
                pos[c] = sample_ball_offset(&pos[p], epsilon, dim, rng);
                placed[c] = true;
                frontier.push(c);
            }
        }
        let tb = tree_bound(&pos, epsilon, dim)?;
        // tb >= 1 by construction: the proposal tree's edges all overlap
        let w = cumulant_phi(&pos, epsilon, dim)?.abs() * norm / tb;
        sum += w;
        sum_sq += w * w;
    }
    let mean = sum / samples as f64;
    let var = (sum_sq / samples as f64 - mean * mean).max(0.0);
    Ok((mean, (var / samples as f64).sqrt()))
}

/// All set partitions of {0..n-1} as block lists, via restricted growth strings.
pub fn set_partitions(n: usize) -> Vec<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    let mut rgs = vec![0usize; n];
    loop {
        let blocks = rgs.iter().copied().max().unwrap_or(0) + 1;
        let mut part = vec![Vec::new(); blocks];
        for (i, &b) in rgs.iter().enumerate() {
            part[b].push(i);
        }
        out.push(part);
        // next restricted growth string
        let mut i = n;
        loop {
            if i == 1 {
                return out;
            }
            i -= 1;
            let cap = rgs[..i].iter().copied().max().unwrap_or(0) + 1;
            if rgs[i] < cap {
                rgs[i] += 1;
                for r in rgs.iter_mut().skip(i + 1) {
                    *r = 0;
                }
                break;
            }
        }
    }
}

/// Exact check of the partition-of-unity decomposition: the sum over set
/// partitions of products of block cumulants equals the exclusion indicator.
pub fn partition_of_unity_check(positions: &[Vect], epsilon: f64, dim: usize) -> Result<bool> {
    let n = positions.len();
    let mut total: i64 = 0;
    for part in set_partitions(n) {
        let mut prod: i64 = 1;
        for block in &part {
            let sub: Vec<Vect> = block.iter().map(|&i| positions[i]).collect();
            prod *= cumulant_phi_int(&sub, epsilon, dim)?;
            if prod == 0 {
                break;
            }
        }
        total += prod;
    }
    let excl = crate::geom::exclusion_ok(positions, epsilon, dim);
    Ok(total == i64::from(excl))
}

/// A truncated-series estimate with its statistical and truncation errors.
#[derive(Debug, Clone, Copy)]
pub struct SeriesEstimate {
    pub estimate: f64,
    pub std_error: f64,
    /// Analytic bound on the discarded tail of the expansion.
    pub tail_bound: f64,
}

const STRATA: usize = 8;

/// Mean and standard error of f over `samples` draws, split across parallel
/// strata with independent derived streams.
fn stratified_mc<F>(samples: usize, seed: u64, label: &str, f: F) -> (f64, f64)
where
    F: Fn(&mut ChaCha8Rng) -> f64 + Sync + Send,
{
    let per = samples.div_ceil(STRATA);
    let chunks = map_indexed(STRATA, |s| {
        let mut rng = derive_stream(seed, label, s as u64);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..per {
            let v = f(&mut rng);
            sum += v;
            sum_sq += v * v;
        }
        (sum, sum_sq)
    });
    let n = (per * STRATA) as f64;
    let sum: f64 = chunks.iter().map(|c| c.0).sum();
    let sum_sq: f64 = chunks.iter().map(|c| c.1).sum();
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    (mean, (var / n).sqrt())
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// Tail of the exponential series: sum_{n > nmax} r^n / n!.
fn exp_tail(r: f64, nmax: usize) -> f64 {
    let mut head = 0.0;
    let mut term = 1.0;
    for n in 0..=nmax {
        if n > 0 {
            term *= r / n as f64;
        }
        head += term;
    }
    (r.exp() - head).max(0.0)
}

/// Direct truncated series for the partition function: the double sum over
/// background count p and tagged count q of mu^p lambda^q / (p! q!) times the
/// Monte Carlo estimate of the excluded-volume integral weighted by the
/// velocity marginal of phi_0 at each tagged position.
pub fn partition_function_series(
    params: &ScalingParams,
    phi0: &Perturbation,
    n_max: usize,
    samples: usize,
    seed: u64,
) -> Result<SeriesEstimate> {
    if params.mu > 2.0 + 1e-12 || params.lambda > 1.0 + 1e-12 {
        return Err(Error::InvalidParams(
            "series estimator needs mu <= 2 and lambda <= 1".into(),
        ));
    }
    if n_max > 10 {
        return Err(Error::CapViolation {
            module: "cluster",
            what: format!("series order {n_max} exceeds cap 10"),
        });
    }
    let (eps, beta, dim) = (params.epsilon, params.beta, params.dim);
    let bound = phi0.bound;
    let mut estimate = 1.0; // p = q = 0 term
    let mut var = 0.0;
    for n in 1..=n_max {
        for q in 0..=n {
            let p = n - q;
            let coeff = params.mu.powi(p as i32) * params.lambda.powi(q as i32)
                / (factorial(p) * factorial(q));
            if coeff == 0.0 {
                continue;
            }
            let label = format!("series-{p}-{q}");
            let (mean, se) = stratified_mc(samples, seed, &label, |rng| {
                let pos: Vec<Vect> = (0..n).map(|_| sample_position(dim, rng)).collect();
                if !crate::geom::exclusion_ok(&pos, eps, dim) {
                    return 0.0;
                }
                pos[p..]
                    .iter()
                    .map(|x| phi0.velocity_marginal(x, beta, dim))
                    .product()
            });
            estimate += coeff * mean;
            var += (coeff * se).powi(2);
        }
    }
    let r = params.mu + params.lambda * bound.max(phi0.mass(beta, dim).abs());
    Ok(SeriesEstimate {
        estimate,
        std_error: var.sqrt(),
        tail_bound: exp_tail(r, n_max),
    })
}

/// Signed cumulant integral J_{k,l} = int phi_{k+l}(x) prod_{tagged} g(x_j) dx
/// where g is the velocity marginal of M_beta phi_0. Estimated by the same
/// tree-chain importance sampling as the absolute integral, with the whole
/// cluster translated uniformly over the torus.
fn cumulant_integral(
    k: usize,
    l: usize,
    params: &ScalingParams,
    phi0: &Perturbation,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let m = k + l;
    let (eps, beta, dim) = (params.epsilon, params.beta, params.dim);
    if m == 1 {
        // exact: phi_1 = 1
        let v = if l == 1 { phi0.mass(beta, dim) } else { 1.0 };
        return Ok((v, 0.0));
    }
    let vball = unit_ball_volume(dim) * eps.powi(dim as i32);
    let norm = cayley(m) * vball.powi(m as i32 - 1);
    let label = format!("cumulant-{k}-{l}");
    let (mean, se) = stratified_mc(samples, seed, &label, |rng| {
        let tree = random_tree(m, rng);
        let mut pos = vec![ZERO_V; m];
        let mut placed = vec![false; m];
        pos[0] = sample_position(dim, rng);
        placed[0] = true;
        let mut frontier = vec![0usize];
        while let Some(u) = frontier.pop() {
            for &(a, b) in &tree.edges {
                let (p, c) = if a == u && !placed[b] {
                    (a, b)
                } else if b == u && !placed[a] {
                    (b, a)
                } else {
                    continue;
                };
                pos[c] = sample_ball_offset(&pos[p], eps, dim, rng);
                placed[c] = true;
                frontier.push(c);
            }
        }
        let tb = tree_bound(&pos, eps, dim).unwrap_or(1.0);
        let phi = cumulant_phi(&pos, eps, dim).unwrap_or(0.0);
        let weight: f64 = pos[k..]
            .iter()
            .map(|x| phi0.velocity_marginal(x, beta, dim))
            .product();
        phi * weight * norm / tb
    });
    Ok((mean, se))
}

/// Cumulant (exponential) form of the partition function: exp of the
/// truncated double sum mu^k lambda^l / (k! l!) J_{k,l}; the first-order
/// terms are exact.
pub fn partition_function_cumulant(
    params: &ScalingParams,
    phi0: &Perturbation,
    k_max: usize,
    samples: usize,
    seed: u64,
) -> Result<SeriesEstimate> {
    if k_max > 5 {
        return Err(Error::CapViolation {
            module: "cluster",
            what: format!("cumulant order {k_max} exceeds cap 5"),
        });
    }
    let mut exponent = 0.0;
    let mut exp_var = 0.0;
    for m in 1..=k_max {
        for l in 0..=m {
            let k = m - l;
            let coeff = params.mu.powi(k as i32) * params.lambda.powi(l as i32)
                / (factorial(k) * factorial(l));
            if coeff == 0.0 {
                continue;
            }
            let (j, se) = cumulant_integral(k, l, params, phi0, samples, seed)?;
            exponent += coeff * j;
            exp_var += (coeff * se).powi(2);
        }
    }
    let estimate = exponent.exp();
    // first-order delta method for the exponential of a noisy exponent
    let std_error = estimate * exp_var.sqrt();
    // tail of the exponent: orders above k_max, bounded by the Cayley
    // majorant of each cumulant integral
    let vball = unit_ball_volume(params.dim) * params.epsilon.powi(params.dim as i32);
    let g = params.mu + params.lambda * phi0.bound;
    let mut tail = 0.0;
    for m in (k_max + 1)..=(k_max + 12) {
        tail += g.powi(m as i32) / factorial(m) * cayley(m) * vball.powi(m as i32 - 1);
    }
    Ok(SeriesEstimate {
        estimate,
        std_error,
        tail_bound: estimate * ((tail).exp() - 1.0),
    })
}

/// Constant (dimension-only) entry for reporting the quotient bound.
pub fn cd_constant(dim: usize) -> f64 {
    match dim {
        2 => 4.0,
        3 => 4.0,
        _ => 4.0,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QuotientReport {
    pub value: f64,
    pub std_error: f64,
    /// Declared reporting bound C_d^(C0 lambda).
    pub declared_bound: f64,
    /// Intermediate chain bound exp(4 e C0 lambda * 2).
    pub chain_bound: f64,
    pub exceeded: bool,
}

/// Fugacity quotient: (1/Z_mu) * sum over q, r of (lambda C0)^q mu^r/(q! r!)
/// times the excluded-volume integral, evaluated as the exponential of the
/// difference of the cumulant expansions of numerator and denominator. The
/// tagged weight in the numerator is the constant C0, so the shared
/// background cumulants cancel exactly and only the l >= 1 terms survive.
pub fn quotient_estimate(
    params: &ScalingParams,
    c0: f64,
    k_max: usize,
    samples: usize,
    seed: u64,
) -> Result<QuotientReport> {
    if k_max > 5 {
        return Err(Error::CapViolation {
            module: "cluster",
            what: format!("quotient order {k_max} exceeds cap 5"),
        });
    }
    // constant perturbation with eval = 1; tagged factor C0 enters through
    // the fugacity lambda * C0
    let unit = Perturbation::uniform();
    let eff = ScalingParams {
        lambda: params.lambda * c0,
        ..*params
    };
    let mut exponent = 0.0;
    let mut exp_var = 0.0;
    for m in 1..=k_max {
        for l in 1..=m {
            let k = m - l;
            let coeff = eff.mu.powi(k as i32) * eff.lambda.powi(l as i32)
                / (factorial(k) * factorial(l));
            if coeff == 0.0 {
                continue;
            }
            let (j, se) = cumulant_integral(k, l, &eff, &unit, samples, seed)?;
            exponent += coeff * j;
            exp_var += (coeff * se).powi(2);
        }
    }
    let value = exponent.exp();
    let std_error = value * exp_var.sqrt();
    let declared_bound = cd_constant(params.dim).powf(c0 * params.lambda);
    let chain_bound = (4.0 * std::f64::consts::E * c0 * params.lambda * 2.0).exp();
    Ok(QuotientReport {
        value,
        std_error,
        declared_bound,
        chain_bound,
        exceeded: value - 3.0 * std_error > declared_bound,
    })
}

/// CSV export of a list of (k, l, estimate, std_error, bound) rows.
pub fn estimates_to_csv(rows: &[(usize, usize, f64, f64, f64)]) -> String {
    let mut s = String::from("k,l,estimate,std_error,bound\n");
    for &(k, l, est, se, b) in rows {
        s.push_str(&format!("{k},{l},{est:.17e},{se:.17e},{b:.17e}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::estimate_partition_function;
    use approx::assert_relative_eq;

    #[test]
    fn connected_graph_counts() {
        assert_eq!(connected_graphs(1).unwrap().len(), 1);
        assert_eq!(connected_graphs(2).unwrap().len(), 1);
        assert_eq!(connected_graphs(3).unwrap().len(), 4);
        assert_eq!(connected_graphs(4).unwrap().len(), 38);
        assert_eq!(connected_graphs(5).unwrap().len(), 728);
        assert_eq!(connected_graphs(6).unwrap().len(), 26704);
        // recurrence oracle agrees with the brute-force filter
        for k in 1..=6 {
            assert_eq!(
                connected_graph_count(k),
                connected_graphs(k).unwrap().len() as u128
            );
        }
        assert_eq!(connected_graph_count(7), 1_866_256);
        assert!(connected_graphs(7).is_err());
        assert_eq!(
            connected_graphs_with_cap(7, true).unwrap().len(),
            1_866_256
        );
    }

    #[test]
    fn tree_enumeration_cayley() {
        for k in 1..=7 {
            let trees = enumerate_trees(k).unwrap();
            assert_eq!(trees.len() as f64, cayley(k), "k = {k}");
            for t in &trees {
                assert!(t.is_tree());
            }
            // all distinct
            let mut sorted: Vec<_> = trees.iter().map(|t| t.edges.clone()).collect();
            sorted.sort();
            sorted.dedup();
            assert_eq!(sorted.len(), trees.len());
        }
        assert_eq!(enumerate_trees(2).unwrap().len(), 1);
        assert_eq!(enumerate_trees(4).unwrap().len(), 16);
        assert_eq!(enumerate_trees(7).unwrap().len(), 16807);
        assert!(enumerate_trees(10).is_err());
    }

    #[test]
    fn cumulant_small_cases() {
        let eps = 0.1;
        assert_eq!(cumulant_phi_int(&[ZERO_V], eps, 2).unwrap(), 1);
        let near = [ZERO_V, [0.05, 0.0, 0.0]];
        let far = [ZERO_V, [0.5, 0.5, 0.0]];
        assert_eq!(cumulant_phi_int(&near, eps, 2).unwrap(), -1);
        assert_eq!(cumulant_phi_int(&far, eps, 2).unwrap(), 0);
        // three mutually overlapping points: 3 trees - 1 triangle = 2
        let tri = [ZERO_V, [0.03, 0.0, 0.0], [0.0, 0.03, 0.0]];
        assert_eq!(cumulant_phi_int(&tri, eps, 2).unwrap(), 2);
        // chain (1-2, 2-3 overlap, 1-3 not): two trees survive minus nothing
        let chain = [ZERO_V, [0.09, 0.0, 0.0], [0.18, 0.0, 0.0]];
        assert_eq!(cumulant_phi_int(&chain, eps, 2).unwrap(), 1);
    }

    #[test]
    fn tree_bound_cases_and_dominance() {
        let eps = 0.1;
        let coincident = [ZERO_V, ZERO_V, ZERO_V];
        assert_relative_eq!(tree_bound(&coincident, eps, 2).unwrap(), 3.0);
        let far = [ZERO_V, [0.4, 0.0, 0.0], [0.0, 0.4, 0.0]];
        assert_relative_eq!(tree_bound(&far, eps, 2).unwrap(), 0.0);

        let mut rng = derive_stream(11, "tree-dom", 0);
        for k in 3..=5 {
            let table = CumulantTable::sample(k, eps, 2, 10_000, &mut rng).unwrap();
            for row in &table.samples {
                assert!(row.phi.abs() <= row.tree_bound + 1e-12);
                // matrix-tree agrees with explicit enumeration
                let slow = tree_bound_by_enumeration(&row.positions, eps, 2).unwrap();
                assert_eq!(row.tree_bound, slow);
            }
        }
    }

    #[test]
    fn partition_of_unity() {
        let eps = 0.12;
        let mut rng = derive_stream(5, "pou", 0);
        for n in 1..=5 {
            for s in 0..1000 {
                let mut pos = Vec::with_capacity(n);
                if s % 2 == 0 {
                    let c = sample_position(2, &mut rng);
                    for _ in 0..n {
                        let mut x = [
                            c[0] + rng.random_range(-0.2..0.2),
                            c[1] + rng.random_range(-0.2..0.2),
                            0.0,
                        ];
                        wrap_position(&mut x, 2);
                        pos.push(x);
                    }
                } else {
                    for _ in 0..n {
                        pos.push(sample_position(2, &mut rng));
                    }
                }
                assert!(partition_of_unity_check(&pos, eps, 2).unwrap());
            }
        }
    }

    #[test]
    fn integral_abs_cumulant_k2() {
        // integral of the overlap indicator = pi eps^2 in d = 2
        let eps = 0.1;
        let mut rng = derive_stream(21, "iac", 0);
        let (est, se) = integral_abs_cumulant(2, eps, 2, 200_000, &mut rng).unwrap();
        let exact = std::f64::consts::PI * eps * eps;
        assert!((est - exact).abs() <= 3.0 * se.max(1e-6), "{est} vs {exact}");
        // importance-sampled version is exact for k = 2 (weight constant)
        let (est_is, se_is) = integral_abs_cumulant_is(2, eps, 2, 10_000, &mut rng).unwrap();
        assert!((est_is - exact).abs() <= 3.0 * se_is + 1e-12);
    }

    #[test]
    fn integral_abs_cumulant_k3_bound_and_cross_validation() {
        let eps = 0.1;
        let mut rng = derive_stream(22, "iac3", 0);
        let exact_bound = 3.0 * (std::f64::consts::PI * eps * eps).powi(2);
        let (est_is, se_is) = integral_abs_cumulant_is(3, eps, 2, 40_000, &mut rng).unwrap();
        assert!(est_is <= exact_bound + 3.0 * se_is);
        // naive estimator agrees within combined error; the k = 3 support is
        // tiny so the naive variance dominates the combined sigma
        let (est_naive, se_naive) = integral_abs_cumulant(3, eps, 2, 400_000, &mut rng).unwrap();
        let sigma = (se_is * se_is + se_naive * se_naive).sqrt();
        assert!(
            (est_is - est_naive).abs() <= 3.0 * sigma.max(1e-6),
            "{est_is} vs {est_naive} (sigma {sigma})"
        );
    }

    #[test]
    fn series_no_exclusion_resums_exponential() {
        // epsilon tiny enough that no exclusion ever triggers at these orders
        let params = ScalingParams::with_mu(1e-9, 1.0, 2, 1.0, 1.0).unwrap();
        let phi0 = Perturbation::uniform();
        let est = partition_function_series(&params, &phi0, 8, 20_000, 7).unwrap();
        let exact = (2.0f64).exp();
        assert!(
            (est.estimate - exact).abs() <= est.tail_bound + 3.0 * est.std_error + 1e-9,
            "{} vs {exact}",
            est.estimate
        );
    }

    #[test]
    fn series_lambda_zero_matches_sampler_bookkeeping() {
        let params = ScalingParams::with_mu(0.1, 1.0, 2, 0.0, 1.0).unwrap();
        let phi0 = Perturbation::uniform();
        let est = partition_function_series(&params, &phi0, 8, 40_000, 3).unwrap();
        let mut rng = derive_stream(3, "zmu", 9);
        let (z, z_se) = estimate_partition_function(&params, &phi0, 40_000, &mut rng).unwrap();
        let sigma = (est.std_error.powi(2) + z_se.powi(2)).sqrt();
        assert!(
            (est.estimate - z).abs() <= 3.0 * sigma + est.tail_bound,
            "{} vs {z}",
            est.estimate
        );
    }

    #[test]
    fn series_monotone_under_exclusion() {
        let with_excl = ScalingParams::with_mu(0.15, 1.0, 2, 0.5, 1.5).unwrap();
        let without = ScalingParams::with_mu(1e-9, 1.0, 2, 0.5, 1.5).unwrap();
        let phi0 = Perturbation::uniform();
        let a = partition_function_series(&with_excl, &phi0, 6, 30_000, 17).unwrap();
        let b = partition_function_series(&without, &phi0, 6, 30_000, 17).unwrap();
        let sigma = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
        assert!(a.estimate <= b.estimate + 3.0 * sigma);
    }

    #[test]
    fn cumulant_form_first_order_exact() {
        // truncation at k + l = 1 without exclusion: exp(mu + lambda * mass)
        let params = ScalingParams::with_mu(1e-9, 1.0, 2, 0.5, 1.0).unwrap();
        let phi0 = Perturbation::gauss_shift();
        let est = partition_function_cumulant(&params, &phi0, 1, 100, 5).unwrap();
        let exact = (params.mu + params.lambda * phi0.mass(1.0, 2)).exp();
        assert_relative_eq!(est.estimate, exact, max_relative = 1e-12);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn cumulant_and_series_forms_agree() {
        let params = ScalingParams::with_mu(0.1, 1.0, 2, 0.5, 1.0).unwrap();
        let phi0 = Perturbation::uniform();
        let a = partition_function_series(&params, &phi0, 8, 60_000, 29).unwrap();
        let b = partition_function_cumulant(&params, &phi0, 4, 60_000, 31).unwrap();
        let allowance =
            3.0 * (a.std_error.powi(2) + b.std_error.powi(2)).sqrt() + a.tail_bound + b.tail_bound;
        assert!(
            (a.estimate - b.estimate).abs() <= allowance.max(0.01 * a.estimate),
            "{} vs {}",
            a.estimate,
            b.estimate
        );
    }

    #[test]
    fn log_cumulant_additive_without_exclusion() {
        // with exclusion off only the first cumulants survive, so the log of
        // the estimate is mu + lambda * mass: additive in the two species
        let phi0 = Perturbation::uniform();
        let p1 = ScalingParams::with_mu(1e-9, 1.0, 2, 0.0, 0.7).unwrap();
        let p2 = ScalingParams::with_mu(1e-9, 1.0, 2, 0.4, 1e-12).unwrap();
        let joint = ScalingParams::with_mu(1e-9, 1.0, 2, 0.4, 0.7).unwrap();
        let a = partition_function_cumulant(&p1, &phi0, 3, 5_000, 1).unwrap();
        let b = partition_function_cumulant(&p2, &phi0, 3, 5_000, 1).unwrap();
        let c = partition_function_cumulant(&joint, &phi0, 3, 5_000, 1).unwrap();
        assert_relative_eq!(
            a.estimate.ln() + b.estimate.ln(),
            c.estimate.ln(),
            epsilon = 1e-6
        );
    }

    #[test]
    fn quotient_lambda_zero_is_one() {
        let params = ScalingParams::with_mu(0.1, 1.0, 2, 0.0, 1.0).unwrap();
        let rep = quotient_estimate(&params, 0.3, 4, 1_000, 2).unwrap();
        assert_relative_eq!(rep.value, 1.0);
        assert_eq!(rep.std_error, 0.0);
    }

    #[test]
    fn quotient_at_least_one_and_bounded() {
        let params = ScalingParams::with_mu(0.1, 1.0, 2, 0.5, 1.0).unwrap();
        let c0 = 1.0 / (2.0 * std::f64::consts::PI);
        let rep = quotient_estimate(&params, c0, 4, 40_000, 13).unwrap();
        assert!(rep.value >= 1.0 - 3.0 * rep.std_error - 1e-9, "{}", rep.value);
        assert!(!rep.exceeded, "{} > {}", rep.value, rep.declared_bound);
        assert!(rep.value <= rep.chain_bound);
    }

    #[test]
    fn csv_headers() {
        let s = estimates_to_csv(&[(1, 0, 1.0, 0.0, 2.0)]);
        assert!(s.starts_with("k,l,estimate,std_error,bound\n"));
        let mut rng = derive_stream(1, "csv", 0);
        let t = CumulantTable::sample(2, 0.1, 2, 3, &mut rng).unwrap();
        assert!(t.to_csv().starts_with("k,l,estimate,std_error,bound\n"));
    }
}
