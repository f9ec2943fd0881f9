//! Quenched limit diagnostics: twisted characteristic functions, variance
//! series, Kolmogorov distances with Esseen bounds and moderate deviations.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::environment::EnvPath;
use crate::error::{arg, Error, Result};
use crate::par;
use crate::rpf::RPFTriplet;
use crate::stats::{ks_normal, linear_fit, simpson, LinearFit};
use crate::systems::{CircleFiber, FiberedSystem, FnSpec, RandomFunction};
use crate::transfer::CocycleWindow;

/// Series variances at or below this count as degenerate.
pub const DEGENERATE_SIGMA2: f64 = 1e-6;

/// Additive constant in Esseen's smoothing inequality.
pub const ESSEEN_CONSTANT: f64 = 24.0 / PI;

/// Size of the uniform kick added after each map step of a sampled orbit.
pub const ORBIT_NOISE: f64 = 1.0 / (1u64 << 30) as f64;

/// Everything needed to evaluate quenched statistics along one orbit.
#[derive(Clone, Copy)]
pub struct Quenched<'a> {
    pub system: &'a FiberedSystem,
    pub path: &'a EnvPath,
    pub potential: &'a RandomFunction,
    pub observable: &'a RandomFunction,
    /// Normalized window.
    pub window: &'a CocycleWindow,
    pub triplet: &'a RPFTriplet,
}

impl<'a> Quenched<'a> {
    pub fn new(
        system: &'a FiberedSystem,
        path: &'a EnvPath,
        potential: &'a RandomFunction,
        observable: &'a RandomFunction,
        window: &'a CocycleWindow,
        triplet: &'a RPFTriplet,
    ) -> Result<Self> {
        if !window.is_normalized() {
            return arg("limit diagnostics need the normalized window");
        }
        observable.validate(system)?;
        if window.start_offset < triplet.start || window.end() > triplet.end() {
            return Err(Error::Dimension("triplet does not cover the window".into()));
        }
        Ok(Quenched { system, path, potential, observable, window, triplet })
    }

    /// f̄ = f − μ(f) on the cells of fiber `k`, and μ(f).
    pub fn centered(&self, k: i64) -> Result<(Vec<f64>, f64)> {
        let f = self.window.sample_function(self.system, self.path, self.observable, k)?;
        let mu = self.triplet.mu_at(k)?;
        let m: f64 = f.iter().zip(&mu).map(|(a, b)| a * b).sum();
        Ok((f.iter().map(|v| v - m).collect(), m))
    }

    /// μ(S_n f) from fiber `from`.
    pub fn mean_sum(&self, from: i64, n: usize) -> Result<f64> {
        (0..n as i64).map(|k| Ok(self.centered(from + k)?.1)).sum()
    }

    /// E_μ[e^{zS_n f}] = μ_{from+n}(L_z^n 1).
    pub fn mgf(&self, from: i64, n: usize, z: Complex64) -> Result<Complex64> {
        let d = self.window.dim(from)?;
        let ones = vec![Complex64::new(1.0, 0.0); d];
        let v = if n == 0 {
            ones
        } else {
            let w = self.window.slice(from, n)?.twisted(self.system, self.path, self.potential, self.observable, z)?;
            w.push(from, n, &ones)?
        };
        let mu = self.triplet.mu_at(from + n as i64)?;
        Ok(v.iter().zip(&mu).map(|(a, b)| a * b).sum())
    }
}

/// E_μ[e^{itS_n f}] computed through twisted normalized operators.
pub fn char_fn(q: &Quenched, from: i64, t: f64, n: usize) -> Result<Complex64> {
    if t == 0.0 {
        return Ok(Complex64::new(1.0, 0.0));
    }
    q.mgf(from, n, Complex64::new(0.0, t))
}

/// Exact Σ²_{ω,n} = Var_μ(S_n f) at every n in `grid` (ascending).
/// Uses G_{i+1} = L_i(G_i + f̄_i): Σ²_n = Σ_{i<n} μ_i(f̄_i²) + 2μ_i(f̄_i G_i).
pub fn quenched_variances(q: &Quenched, from: i64, grid: &[usize]) -> Result<Vec<f64>> {
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return arg("variance grid must be ascending");
    }
    let n_max = grid.last().copied().unwrap_or(0);
    q.window.check_range(from, n_max)?;
    let mut out = Vec::with_capacity(grid.len());
    let mut g = vec![0.0; q.window.dim(from)?];
    let mut acc = 0.0f64;
    let mut gi = 0;
    for i in 0..=n_max {
        while gi < grid.len() && grid[gi] == i {
            out.push(acc.max(0.0));
            gi += 1;
        }
        if i == n_max {
            break;
        }
        let k = from + i as i64;
        let (fb, _) = q.centered(k)?;
        let mu = q.triplet.mu_at(k)?;
        for c in 0..fb.len() {
            acc += mu[c] * fb[c] * (fb[c] + 2.0 * g[c]);
        }
        let sum: Vec<f64> = g.iter().zip(&fb).map(|(a, b)| a + b).collect();
        g = q.window.apply_re(k, &sum)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    /// (n, Σ²_{ω,n}/n).
    pub per_n: Vec<(usize, f64)>,
    pub sigma2_series: f64,
    /// b(k) averaged over environment starts, k = 0..=k_max.
    pub b_k: Vec<f64>,
    /// |b(k)| ≤ C k^{−β} for k ≥ 1.
    pub envelope_c: f64,
    pub envelope_beta: f64,
    pub tail_bound: f64,
    /// Log-log slope of |Σ²_{ω,n}/n − Σ²| over the grid points above 1e-12.
    pub convergence_slope: Option<f64>,
}

/// Values below this are treated as exact zeros in decay fits.
const CORRELATION_FLOOR: f64 = 1e-13;

/// Σ²_{ω,n} on powers of two up to `n_max` plus the correlation series
/// with b(k) averaged over `env_samples` consecutive starts.
pub fn variance(q: &Quenched, from: i64, n_max: usize, k_max: usize, env_samples: usize) -> Result<VarianceReport> {
    if n_max == 0 || k_max == 0 || env_samples == 0 {
        return arg("variance needs n_max, k_max and env_samples positive");
    }
    let mut grid: Vec<usize> = (0..).map(|e| 1usize << e).take_while(|&n| n <= n_max).collect();
    if *grid.last().unwrap() != n_max {
        grid.push(n_max);
    }
    let vars = quenched_variances(q, from, &grid)?;
    let per_n: Vec<(usize, f64)> = grid.iter().zip(&vars).map(|(&n, &v)| (n, v / n as f64)).collect();

    q.window.check_range(from, env_samples + k_max)?;
    let rows: Vec<Result<Vec<f64>>> = par::map_range(env_samples, |j| {
        let start = from + j as i64;
        let (mut v, _) = q.centered(start)?;
        let mut row = Vec::with_capacity(k_max + 1);
        for k in 0..=k_max {
            let at = start + k as i64;
            let (fb, _) = q.centered(at)?;
            let mu = q.triplet.mu_at(at)?;
            row.push(fb.iter().zip(&v).zip(&mu).map(|((a, b), m)| a * b * m).sum());
            if k < k_max {
                v = q.window.apply_re(at, &v)?;
            }
        }
        Ok(row)
    });
    let mut b_k = vec![0.0; k_max + 1];
    for r in rows {
        for (acc, v) in b_k.iter_mut().zip(r?) {
            *acc += v / env_samples as f64;
        }
    }
    let sigma2 = b_k[0] + 2.0 * b_k[1..].iter().sum::<f64>();
    let scale = CORRELATION_FLOOR * b_k[0].abs().max(1.0);
    let above: Vec<(f64, f64)> = (1..=k_max)
        .filter(|&k| b_k[k].abs() > scale)
        .map(|k| ((k as f64).ln(), b_k[k].abs().ln()))
        .collect();
    let (envelope_c, envelope_beta, tail_bound) = if above.len() >= 2 {
        let (x, y): (Vec<f64>, Vec<f64>) = above.iter().cloned().unzip();
        let beta = -linear_fit(&x, &y).map_or(0.0, |f| f.slope);
        let c = above.iter().map(|(lk, lb)| (lb + beta * lk).exp()).fold(0.0, f64::max);
        let tail = if beta > 1.0 { 2.0 * c * (k_max as f64).powf(1.0 - beta) / (beta - 1.0) } else { f64::INFINITY };
        (c, beta, tail)
    } else {
        let c = b_k[1..].iter().map(|b| b.abs()).fold(0.0, f64::max);
        // too few points to fit: the tail is only controlled if the series is already dead
        let tail = if b_k[k_max].abs() > scale { f64::INFINITY } else { 0.0 };
        (c, f64::INFINITY, tail)
    };
    if tail_bound > (0.01 * sigma2.abs()).max(1e-10) {
        return Err(Error::Truncation(format!(
            "correlation tail bound {tail_bound:.3e} exceeds 1% of Σ² = {sigma2:.3e} at k_max = {k_max}"
        )));
    }
    let pts: Vec<(f64, f64)> = per_n
        .iter()
        .filter(|(n, _)| *n >= 4)
        .map(|(n, v)| ((*n as f64).ln(), (v - sigma2).abs()))
        .filter(|(_, d)| *d > 1e-12)
        .map(|(ln, d)| (ln, d.ln()))
        .collect();
    let convergence_slope = if pts.len() >= 3 {
        let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        linear_fit(&x, &y).map(|f| f.slope)
    } else {
        None
    };
    Ok(VarianceReport { per_n, sigma2_series: sigma2, b_k, envelope_c, envelope_beta, tail_bound, convergence_slope })
}

/// Birkhoff sums S_n f of μ-distributed orbits of the circle maps,
/// recorded at `checkpoints`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrbitSums {
    pub checkpoints: Vec<usize>,
    /// sums[c][s] is S_{checkpoints[c]} of sample s.
    pub sums: Vec<Vec<f64>>,
}

/// Cells are drawn with the masses h·ν, points uniformly inside; each map
/// step is followed by a uniform kick of size `ORBIT_NOISE` so that the
/// binary expansion of the state never runs dry.
pub fn sample_orbit_sums(q: &Quenched, from: i64, checkpoints: &[usize], samples: usize, seed: u64) -> Result<OrbitSums> {
    let fibers = match &q.system.family {
        crate::systems::Family::Circle(f) => f,
        _ => return arg("orbit sampling is implemented for circle families"),
    };
    if checkpoints.is_empty() || checkpoints.windows(2).any(|w| w[1] <= w[0]) {
        return arg("checkpoints must be strictly ascending and nonempty");
    }
    if samples == 0 {
        return arg("at least one sample is required");
    }
    let n_max = *checkpoints.last().unwrap();
    let steps: Vec<(&CircleFiber, &FnSpec)> = (0..n_max as i64)
        .map(|k| {
            let s = q.path.at(from + k)?;
            Ok((&fibers[s], q.observable.spec(s)))
        })
        .collect::<Result<_>>()?;
    let mu = q.triplet.mu_at(from)?;
    let cells = mu.len();
    let pick = WeightedIndex::new(mu.iter().map(|m| m.max(0.0))).map_err(|e| Error::Model(format!("cell masses: {e}")))?;
    let chunks = par::mc_chunks(samples, seed, |rng, count| {
        let mut out = vec![Vec::with_capacity(count); checkpoints.len()];
        for _ in 0..count {
            let c = pick.sample(rng);
            let mut x = (c as f64 + rng.gen::<f64>()) / cells as f64;
            let mut s = 0.0;
            let mut next = 0;
            for (k, (fiber, spec)) in steps.iter().enumerate() {
                s += spec.eval_circle(fiber, x);
                x = (fiber.apply(x) + ORBIT_NOISE * rng.gen::<f64>()).rem_euclid(1.0);
                if k + 1 == checkpoints[next] {
                    out[next].push(s);
                    next += 1;
                }
            }
        }
        out
    });
    let mut sums = vec![Vec::with_capacity(samples); checkpoints.len()];
    for chunk in chunks {
        for (dst, src) in sums.iter_mut().zip(chunk) {
            dst.extend(src);
        }
    }
    Ok(OrbitSums { checkpoints: checkpoints.to_vec(), sums })
}

/// Monte Carlo ‖S_n f − μ(S_n f)‖_{L^p(μ)} from `from` and the relative
/// standard error of the p-th moment.
pub fn centered_lp_norm(q: &Quenched, from: i64, n: usize, p: f64, samples: usize, seed: u64) -> Result<(f64, f64)> {
    if !(p >= 1.0) || n == 0 {
        return arg("need p ≥ 1 and n ≥ 1");
    }
    let mean = q.mean_sum(from, n)?;
    let orbits = sample_orbit_sums(q, from, &[n], samples, seed)?;
    let pow: Vec<f64> = orbits.sums[0].iter().map(|s| (s - mean).abs().powf(p)).collect();
    let (m, se) = crate::stats::mean_se(&pow);
    let rel = if m > 0.0 { se / m } else { 0.0 };
    Ok((m.powf(1.0 / p), rel))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CltOptions {
    pub samples: usize,
    pub seed: u64,
    /// Esseen cutoff T = c·Σ_{ω,n}.
    pub cutoff_factor: f64,
    pub panels: usize,
    /// Skip the operator integral (KS only).
    pub esseen: bool,
}

impl Default for CltOptions {
    fn default() -> Self {
        CltOptions { samples: 200_000, seed: 1, cutoff_factor: 1.0, panels: 128, esseen: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CltRow {
    pub n: usize,
    pub mean: f64,
    pub sigma_n: f64,
    pub ks: f64,
    /// KS with σ√n in place of Σ_{ω,n}.
    pub ks_sigma: f64,
    pub cutoff: f64,
    pub esseen_integral: f64,
    pub esseen_bound: f64,
}

impl CltRow {
    pub fn esseen_dominates(&self) -> bool {
        self.esseen_bound >= self.ks
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CLTReport {
    pub rows: Vec<CltRow>,
    pub be_fit: Option<LinearFit>,
    /// (n, t, E[e^{itS_n}]) on a small t-grid.
    pub char_fn_values: Vec<(usize, f64, Complex64)>,
}

impl CLTReport {
    pub fn be_slope(&self) -> Option<f64> {
        self.be_fit.map(|f| f.slope)
    }

    pub fn ks_decreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].ks <= w[0].ks)
    }
}

/// 2∫_0^T |φ_W(t) − e^{−t²/2}|/t dt + C_E/T for W = (S_n − mean)/Σ_{ω,n}.
pub fn esseen_bound(q: &Quenched, from: i64, n: usize, mean: f64, sigma_n: f64, cutoff: f64, panels: usize) -> Result<(f64, f64)> {
    let h = cutoff / panels.max(2).next_multiple_of(2) as f64;
    let ts: Vec<f64> = (0..=panels.max(2).next_multiple_of(2)).map(|i| i as f64 * h).collect();
    let vals: Vec<Result<f64>> = par::map_slice(&ts, |&t| {
        if t == 0.0 {
            return Ok(0.0);
        }
        let s = t / sigma_n;
        let phi = char_fn(q, from, s, n)? * Complex64::from_polar(1.0, -s * mean);
        Ok((phi - (-0.5 * t * t).exp()).norm() / t)
    });
    let vals: Vec<f64> = vals.into_iter().collect::<Result<_>>()?;
    let integral = 2.0 * simpson(|t| vals[(t / h).round() as usize], 0.0, cutoff, ts.len() - 1);
    Ok((integral, integral + ESSEEN_CONSTANT / cutoff))
}

/// KS distances of the normalized sums against Φ on `n_grid`, each with
/// its Esseen bound from the exact characteristic function.
/// `sigma2` is the series variance certified by [`variance`]; values at or
/// below `DEGENERATE_SIGMA2` are rejected.
pub fn clt_report(q: &Quenched, from: i64, n_grid: &[usize], sigma2: f64, opts: &CltOptions) -> Result<CLTReport> {
    if n_grid.is_empty() || n_grid.windows(2).any(|w| w[1] <= w[0]) || n_grid[0] == 0 {
        return arg("n_grid must be strictly ascending positive integers");
    }
    if !(sigma2 > DEGENERATE_SIGMA2) {
        return Err(Error::Degenerate(format!("Σ² = {sigma2:.3e}; the observable behaves like a coboundary")));
    }
    let vars = quenched_variances(q, from, n_grid)?;
    if vars.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Degenerate("Σ_{ω,n} vanishes on the grid".into()));
    }
    let orbits = sample_orbit_sums(q, from, n_grid, opts.samples, opts.seed)?;
    let mut rows = Vec::with_capacity(n_grid.len());
    let mut char_fn_values = Vec::new();
    for (c, &n) in n_grid.iter().enumerate() {
        let mean = q.mean_sum(from, n)?;
        let sigma_n = vars[c].sqrt();
        let mut w: Vec<f64> = orbits.sums[c].iter().map(|s| (s - mean) / sigma_n).collect();
        let ks = ks_normal(&mut w);
        let scale = (sigma2 * n as f64).sqrt();
        let mut w: Vec<f64> = orbits.sums[c].iter().map(|s| (s - mean) / scale).collect();
        let ks_sigma = ks_normal(&mut w);
        let cutoff = opts.cutoff_factor * sigma_n;
        let (integral, bound) = if opts.esseen {
            esseen_bound(q, from, n, mean, sigma_n, cutoff, opts.panels)?
        } else {
            (f64::NAN, f64::NAN)
        };
        for t in [0.0, 0.5 / sigma_n, 1.0 / sigma_n] {
            char_fn_values.push((n, t, char_fn(q, from, t, n)?));
        }
        rows.push(CltRow { n, mean, sigma_n, ks, ks_sigma, cutoff, esseen_integral: integral, esseen_bound: bound });
    }
    let x: Vec<f64> = rows.iter().map(|r| (r.n as f64).ln()).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.ks.ln()).collect();
    Ok(CLTReport { rows, be_fit: linear_fit(&x, &y), char_fn_values })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpOptions {
    /// a_n = n^exponent.
    pub exponent: f64,
    pub n_grid: Vec<usize>,
    pub t_grid: Vec<f64>,
    /// Intervals [lo, hi]; hi may be infinite.
    pub sets: Vec<(f64, f64)>,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CumulantRow {
    pub n: usize,
    pub a_n: f64,
    pub t: f64,
    pub z: f64,
    /// a_n⁻² ln E[e^{t a_n² W_n}], W_n = (S_n − μ(S_n))/(a_n Σ_{ω,n}).
    pub value: f64,
    pub limit: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetRate {
    pub n: usize,
    pub lo: f64,
    pub hi: f64,
    pub probability: f64,
    /// a_n⁻² ln μ(W_n ∈ Γ); −∞ when no sample lands in Γ.
    pub empirical_rate: f64,
    /// −inf of ½x² over the closure and the interior of Γ.
    pub closure_rate: f64,
    pub interior_rate: f64,
    /// −inf_Γ sup_t (tx − Λ_n(t)) with the exact scaled cumulants.
    pub legendre_rate: f64,
}

impl SetRate {
    pub fn relative_error(&self) -> f64 {
        ((self.empirical_rate - self.closure_rate) / self.closure_rate).abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MDPReport {
    pub exponent: f64,
    pub cumulants: Vec<CumulantRow>,
    pub convex: bool,
    pub sets: Vec<SetRate>,
}

impl MDPReport {
    /// Largest relative cumulant error at the largest n.
    pub fn limit_error_at_largest(&self) -> f64 {
        let n = self.cumulants.iter().map(|r| r.n).max().unwrap_or(0);
        self.cumulants.iter().filter(|r| r.n == n && r.t != 0.0).map(|r| r.rel_error).fold(0.0, f64::max)
    }
}

fn half_square_inf(lo: f64, hi: f64) -> f64 {
    if lo <= 0.0 && hi >= 0.0 {
        0.0
    } else {
        0.5 * lo.abs().min(hi.abs()).powi(2)
    }
}

/// Scaled cumulants through real twists and interval rates from sampled
/// orbits.
pub fn mdp_report(q: &Quenched, from: i64, opts: &MdpOptions) -> Result<MDPReport> {
    if !(opts.exponent > 0.0 && opts.exponent < 0.5) {
        return arg(format!("a_n = n^{} must satisfy 0 < exponent < 1/2", opts.exponent));
    }
    if opts.n_grid.is_empty() || opts.n_grid.windows(2).any(|w| w[1] <= w[0]) {
        return arg("n_grid must be strictly ascending");
    }
    if opts.sets.iter().any(|(lo, hi)| !(lo < hi)) {
        return arg("sets must be nondegenerate intervals");
    }
    let vars = quenched_variances(q, from, &opts.n_grid)?;
    let mut t_grid = opts.t_grid.clone();
    t_grid.push(0.0);
    for (lo, hi) in &opts.sets {
        let near = if *lo > 0.0 { *lo } else if *hi < 0.0 { *hi } else { 0.0 };
        t_grid.push(near);
    }
    t_grid.sort_by(|a, b| a.total_cmp(b));
    t_grid.dedup();
    let mut cumulants = Vec::new();
    let mut convex = true;
    let mut legendre: Vec<Vec<(f64, f64)>> = Vec::new();
    for (c, &n) in opts.n_grid.iter().enumerate() {
        let a_n = (n as f64).powf(opts.exponent);
        let sigma_n = vars[c].sqrt();
        if !(sigma_n > 0.0) {
            return Err(Error::Degenerate(format!("Σ_{{ω,{n}}} = 0")));
        }
        let mean = q.mean_sum(from, n)?;
        let vals: Vec<Result<CumulantRow>> = par::map_slice(&t_grid, |&t| {
            let z = t * a_n / sigma_n;
            let value = if t == 0.0 {
                0.0
            } else {
                let m = q.mgf(from, n, Complex64::new(z, 0.0))?;
                if !(m.re > 0.0 && m.re.is_finite()) {
                    return Err(Error::Domain(format!("moment generating function not positive at z = {z}")));
                }
                (m.re.ln() - z * mean) / (a_n * a_n)
            };
            let limit = 0.5 * t * t;
            let rel_error = if t == 0.0 { 0.0 } else { (value - limit).abs() / limit };
            Ok(CumulantRow { n, a_n, t, z, value, limit, rel_error })
        });
        let rows: Vec<CumulantRow> = vals.into_iter().collect::<Result<_>>()?;
        for w in rows.windows(3) {
            let (h1, h2) = (w[1].t - w[0].t, w[2].t - w[1].t);
            let second = (w[2].value - w[1].value) / h2 - (w[1].value - w[0].value) / h1;
            if second < -1e-10 {
                convex = false;
            }
        }
        legendre.push(rows.iter().map(|r| (r.t, r.value)).collect());
        cumulants.extend(rows);
    }
    let orbits = sample_orbit_sums(q, from, &opts.n_grid, opts.samples, opts.seed)?;
    let mut sets = Vec::new();
    for (c, &n) in opts.n_grid.iter().enumerate() {
        let a_n = (n as f64).powf(opts.exponent);
        let sigma_n = vars[c].sqrt();
        let mean = q.mean_sum(from, n)?;
        for &(lo, hi) in &opts.sets {
            let hits = orbits.sums[c]
                .iter()
                .map(|s| (s - mean) / (a_n * sigma_n))
                .filter(|w| *w >= lo && *w <= hi)
                .count();
            let probability = hits as f64 / opts.samples as f64;
            let near = if lo > 0.0 { lo } else if hi < 0.0 { hi } else { 0.0 };
            let rate_at = legendre[c].iter().map(|(t, l)| t * near - l).fold(f64::NEG_INFINITY, f64::max);
            let inf = half_square_inf(lo, hi);
            sets.push(SetRate {
                n,
                lo,
                hi,
                probability,
                empirical_rate: probability.ln() / (a_n * a_n),
                closure_rate: -inf,
                interior_rate: -inf,
                legendre_rate: -rate_at.max(0.0),
            });
        }
    }
    Ok(MDPReport { exponent: opts.exponent, cumulants, convex, sets })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthFit {
    /// A = sup_k k^{−a−ε}W_k.
    pub constant: f64,
    pub argmax: usize,
    /// The supremum is still growing at the end of the range.
    pub diverging: bool,
}

/// Envelope constant for W_k ≤ A k^{a+ε}; `series[0]` is W_1.
pub fn growth_fit(series: &[f64], a: f64, p: f64, eps: f64) -> Result<GrowthFit> {
    if series.is_empty() {
        return arg("growth fit needs a nonempty series");
    }
    if !(p > 0.0 && eps > 1.0 / p) {
        return arg(format!("ε = {eps} must exceed 1/p = {}", 1.0 / p));
    }
    let scaled: Vec<f64> = series
        .iter()
        .enumerate()
        .map(|(i, w)| w / ((i + 1) as f64).powf(a + eps))
        .collect();
    let (argmax, constant) = scaled
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
    if !constant.is_finite() {
        return Err(Error::Calibration("growth envelope is not finite".into()));
    }
    let cut = (3 * series.len()) / 4;
    let head = scaled[..cut.max(1)].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let diverging = series.len() >= 8 && argmax >= cut && constant > 1.01 * head;
    Ok(GrowthFit { constant, argmax: argmax + 1, diverging })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn growth_fit_examples() {
        let a = 0.3;
        let exact: Vec<f64> = (1..=200).map(|k| (k as f64).powf(a)).collect();
        let g = growth_fit(&exact, a, 4.0, 0.5).unwrap();
        assert_eq!(g.constant, 1.0);
        assert_eq!(g.argmax, 1);
        assert!(!g.diverging);

        let bounded: Vec<f64> = (0..200).map(|k| 2.0 + (k as f64).sin()).collect();
        let g = growth_fit(&bounded, 0.0, 4.0, 0.5).unwrap();
        assert!(g.constant <= 3.0);

        let fast: Vec<f64> = (1..=200).map(|k| (k as f64).powf(a + 1.0)).collect();
        assert!(growth_fit(&fast, a, 4.0, 0.5).unwrap().diverging);
        assert!(growth_fit(&fast, a, 4.0, 0.2).is_err());
    }

    #[test]
    fn half_square_infimum() {
        assert_eq!(half_square_inf(0.5, f64::INFINITY), 0.125);
        assert_eq!(half_square_inf(-1.0, 2.0), 0.0);
        assert_eq!(half_square_inf(f64::NEG_INFINITY, -2.0), 2.0);
    }
}
