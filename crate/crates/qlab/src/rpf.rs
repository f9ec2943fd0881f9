//! Random Gibbs triplets (λ_ω, h_ω, ν_ω), the normalized potential and
//! effective decay of the normalized cocycle.

use serde::{Deserialize, Serialize};

use crate::environment::EnvPath;
use crate::error::{arg, Error, Result};
use crate::geometry::{holder_norm, sup_norm, CellGeometry};
use crate::stats::{linear_fit, LinearFit};
use crate::systems::{FiberedSystem, RandomFunction};
use crate::transfer::{CocycleWindow, Normalization};

/// Entries below this are treated as converged to zero in decay fits.
pub const DECAY_FLOOR: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RPFTriplet {
    /// Absolute index of the first fiber carrying h and ν.
    pub start: i64,
    /// λ per operator, one fewer than the fibers.
    pub lambdas: Vec<f64>,
    pub h: Vec<Vec<f64>>,
    pub nu: Vec<Vec<f64>>,
    pub eigen_residual: Vec<f64>,
    pub dual_residual: Vec<f64>,
    pub normalization_residual: Vec<f64>,
    /// Orthant Hilbert distance between two sweeps from different starts.
    pub convergence: f64,
}

impl RPFTriplet {
    /// Number of operators covered.
    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }

    pub fn end(&self) -> i64 {
        self.start + self.lambdas.len() as i64
    }

    fn rel(&self, index: i64) -> Result<usize> {
        let k = index - self.start;
        if k < 0 || k as usize > self.lambdas.len() {
            return Err(Error::RangeEscape { from: index, n: 0, len: self.lambdas.len() });
        }
        Ok(k as usize)
    }

    pub fn h_at(&self, index: i64) -> Result<&[f64]> {
        Ok(&self.h[self.rel(index)?])
    }

    pub fn nu_at(&self, index: i64) -> Result<&[f64]> {
        Ok(&self.nu[self.rel(index)?])
    }

    /// Cell masses of μ = h·ν.
    pub fn mu_at(&self, index: i64) -> Result<Vec<f64>> {
        let k = self.rel(index)?;
        Ok(self.h[k].iter().zip(&self.nu[k]).map(|(a, b)| a * b).collect())
    }

    pub fn log_lambda_sum(&self, from: i64, n: usize) -> Result<f64> {
        let k = self.rel(from)?;
        if k + n > self.lambdas.len() {
            return Err(Error::RangeEscape { from, n, len: self.lambdas.len() });
        }
        Ok(self.lambdas[k..k + n].iter().map(|l| l.ln()).sum())
    }

    pub fn max_residual(&self) -> f64 {
        self.eigen_residual
            .iter()
            .chain(&self.dual_residual)
            .chain(&self.normalization_residual)
            .cloned()
            .fold(0.0, f64::max)
    }

    /// The window restricted to the triplet range, with L = 𝓛(·h)/(λh′).
    pub fn normalized_window(&self, window: &CocycleWindow) -> Result<CocycleWindow> {
        window.slice(self.start, self.len())?.with_normalization(Normalization {
            lambda: self.lambdas.clone(),
            h: self.h.clone(),
        })
    }
}

/// ln σ₁ of the composed plain cocycle against its λ-product bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProductSandwich {
    pub from: i64,
    pub n: usize,
    pub lower: f64,
    pub log_sigma: f64,
    pub upper: f64,
}

impl ProductSandwich {
    pub fn holds(&self, tol: f64) -> bool {
        self.lower <= self.log_sigma + tol && self.log_sigma <= self.upper + tol
    }
}

/// With Pⁿh_a = Λh_b: Λ‖h_b‖₂/‖h_a‖₂ ≤ σ₁(Pⁿ) ≤ √d_b·Λ·max h_b/min h_a.
pub fn lambda_product_sandwich(triplet: &RPFTriplet, window: &CocycleWindow, from: i64, n: usize) -> Result<ProductSandwich> {
    if window.is_normalized() {
        return arg("the sandwich compares the plain cocycle");
    }
    let log_lambda = triplet.log_lambda_sum(from, n)?;
    let ha = triplet.h_at(from)?;
    let hb = triplet.h_at(from + n as i64)?;
    let p = window.compose(from, n)?.dense_re();
    let sigma = p.singular_values().max();
    let l2 = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let max_b = hb.iter().cloned().fold(0.0, f64::max);
    let min_a = ha.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(ProductSandwich {
        from,
        n,
        lower: log_lambda + (l2(hb) / l2(ha)).ln(),
        log_sigma: sigma.ln(),
        upper: log_lambda + 0.5 * (hb.len() as f64).ln() + (max_b / min_a).ln(),
    })
}

/// log(max r/min r) for r = f/g on strictly positive vectors.
pub fn orthant_distance(f: &[f64], g: &[f64]) -> f64 {
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for (a, b) in f.iter().zip(g) {
        if !(*a > 0.0 && *b > 0.0) {
            return f64::INFINITY;
        }
        let r = a / b;
        lo = lo.min(r);
        hi = hi.max(r);
    }
    (hi / lo).ln()
}

fn sup_normalize(v: &mut [f64]) {
    let m = v.iter().cloned().fold(0.0, f64::max);
    if m > 0.0 {
        v.iter_mut().for_each(|x| *x /= m);
    }
}

fn l1_normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
    }
}

/// Forward sweep for h and backward sweep for ν over an unnormalized window.
/// The reported range drops `burn_in` operators at each end.
pub fn solve_triplet(window: &CocycleWindow, burn_in: usize, tol: f64) -> Result<RPFTriplet> {
    if window.is_normalized() {
        return arg("solve_triplet expects the plain cocycle");
    }
    let len = window.len();
    if len < 2 * burn_in + 1 {
        return Err(Error::Demand { required: 2 * burn_in + 1, available: len });
    }
    let s0 = window.start_offset;
    let a = s0 + burn_in as i64;
    let b = window.end() - burn_in as i64;
    let span = (b - a) as usize;

    let d0 = window.dim(s0)?;
    let mut h1 = vec![1.0; d0];
    let mut h2: Vec<f64> = (0..d0).map(|i| 1.0 + i as f64 / d0 as f64).collect();
    let mut hs = Vec::with_capacity(span + 1);
    let mut trace = Vec::new();
    for i in s0..b {
        if i >= a {
            hs.push(h1.clone());
        }
        h1 = window.apply_re(i, &h1)?;
        h2 = window.apply_re(i, &h2)?;
        sup_normalize(&mut h1);
        sup_normalize(&mut h2);
        if (i - s0) % 8 == 7 || i + 1 == a {
            trace.push(orthant_distance(&h1, &h2));
        }
        if i + 1 == a {
            let conv = orthant_distance(&h1, &h2);
            if !(conv <= tol) {
                return Err(Error::Convergence {
                    message: format!("forward sweep distance {conv:e} exceeds {tol:e} after {burn_in} steps"),
                    trace,
                });
            }
        }
    }
    if burn_in == 0 {
        // No burn-in: the sweep starts inside the report range.
        hs.clear();
        let mut v = vec![1.0; d0];
        for i in a..b {
            hs.push(v.clone());
            v = window.apply_re(i, &v)?;
            sup_normalize(&mut v);
        }
        hs.push(v);
    } else {
        hs.push(h1.clone());
    }
    let conv_h = orthant_distance(&h1, &h2);

    let de = window.dim(window.end())?;
    let mut n1 = vec![1.0 / de as f64; de];
    let mut n2: Vec<f64> = (0..de).map(|i| 1.0 + (i % 3) as f64).collect();
    l1_normalize(&mut n2);
    let mut nus = vec![Vec::new(); span + 1];
    let mut conv_nu = 0.0;
    let mut i = window.end();
    loop {
        if i <= b && i >= a {
            nus[(i - a) as usize] = n1.clone();
        }
        if i == b {
            conv_nu = orthant_distance(&n1, &n2);
            if burn_in > 0 && !(conv_nu <= tol) {
                return Err(Error::Convergence {
                    message: format!("backward sweep distance {conv_nu:e} exceeds {tol:e}"),
                    trace: vec![conv_nu],
                });
            }
        }
        if i == a {
            break;
        }
        n1 = window.op(i - 1)?.apply_adjoint_re(&n1);
        n2 = window.op(i - 1)?.apply_adjoint_re(&n2);
        l1_normalize(&mut n1);
        l1_normalize(&mut n2);
        i -= 1;
    }

    let mut norm_res = Vec::with_capacity(span + 1);
    for (h, nu) in hs.iter_mut().zip(&nus) {
        let s: f64 = h.iter().zip(nu).map(|(x, y)| x * y).sum();
        if !(s > 0.0) {
            return Err(Error::Convergence {
                message: "ν(h) vanished".into(),
                trace: vec![s],
            });
        }
        h.iter_mut().for_each(|x| *x /= s);
        let check: f64 = h.iter().zip(nu).map(|(x, y)| x * y).sum();
        norm_res.push((check - 1.0).abs());
    }
    let mut lambdas = Vec::with_capacity(span);
    let mut eig = Vec::with_capacity(span);
    let mut dual = Vec::with_capacity(span);
    for k in 0..span {
        let op = window.op(a + k as i64)?;
        let lh = op.apply_re(&hs[k]);
        let lam: f64 = lh.iter().zip(&nus[k + 1]).map(|(x, y)| x * y).sum();
        let e = lh
            .iter()
            .zip(&hs[k + 1])
            .map(|(x, y)| (x - lam * y).abs())
            .fold(0.0, f64::max)
            / (lam * sup_norm(&hs[k + 1]));
        let ln = op.apply_adjoint_re(&nus[k + 1]);
        let dres = ln.iter().zip(&nus[k]).map(|(x, y)| (x - lam * y).abs()).sum::<f64>() / lam;
        lambdas.push(lam);
        eig.push(e);
        dual.push(dres);
    }
    Ok(RPFTriplet {
        start: a,
        lambdas,
        h: hs,
        nu: nus,
        eigen_residual: eig,
        dual_residual: dual,
        normalization_residual: norm_res,
        convergence: conv_h.max(conv_nu),
    })
}

/// (D·e^{‖φ‖∞})⁻¹ ≤ λ ≤ D·e^{‖φ‖∞} at every operator of the triplet.
pub fn lambda_bounds_hold(
    triplet: &RPFTriplet,
    system: &FiberedSystem,
    path: &EnvPath,
    potential: &RandomFunction,
) -> Result<bool> {
    for (k, lam) in triplet.lambdas.iter().enumerate() {
        let s = path.at(triplet.start + k as i64)?;
        let d = system.states[s].degree as f64;
        let c = d * potential.bounds(system, s).sup_norm.exp();
        if *lam > c * (1.0 + 1e-12) || *lam < (1.0 - 1e-12) / c {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Q, Q̃ and H̃ along the whole stored path. Q_{i+1} = γ_i^{−α}(H_i + Q_i),
/// started at the path origin from the stationary envelope E[H]·e/(1−e),
/// e = E[γ^{−α}]; the start is forgotten geometrically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QSeries {
    pub offset: i64,
    pub h: Vec<f64>,
    pub q: Vec<f64>,
    pub h_tilde: Vec<f64>,
    pub q_tilde: Vec<f64>,
    /// Weight ∏γ^{−α} still carried by the start value at each index.
    pub start_weight: Vec<f64>,
}

impl QSeries {
    fn rel(&self, index: i64) -> Result<usize> {
        let k = index - self.offset;
        if k < 0 || k as usize >= self.q.len() {
            return Err(Error::RangeEscape { from: index, n: 0, len: self.q.len() });
        }
        Ok(k as usize)
    }

    pub fn q_at(&self, index: i64) -> Result<f64> {
        Ok(self.q[self.rel(index)?])
    }

    pub fn q_tilde_at(&self, index: i64) -> Result<f64> {
        Ok(self.q_tilde[self.rel(index)?])
    }

    pub fn h_at(&self, index: i64) -> Result<f64> {
        Ok(self.h[self.rel(index)?])
    }

    pub fn h_tilde_at(&self, index: i64) -> Result<f64> {
        Ok(self.h_tilde[self.rel(index)?])
    }
}

pub fn q_series(
    system: &FiberedSystem,
    path: &EnvPath,
    marginal: &[f64],
    potential: &RandomFunction,
    s: f64,
) -> Result<QSeries> {
    let alpha = system.alpha;
    let e = system.mean_inverse_expansion(marginal, alpha);
    if e >= 1.0 {
        return Err(Error::Truncation(format!("E[γ^(−α)] = {e} ≥ 1, Q diverges")));
    }
    let hs: Vec<f64> = (0..system.state_count()).map(|st| potential.bounds(system, st).h_bound).collect();
    let mean_h: f64 = hs.iter().zip(marginal).map(|(h, p)| h * p).sum();
    let n = path.len();
    let mut h = Vec::with_capacity(n);
    let mut q = Vec::with_capacity(n + 1);
    let mut w = Vec::with_capacity(n + 1);
    q.push(mean_h * e / (1.0 - e));
    w.push(1.0);
    for k in 0..n {
        let st = path.states[k];
        let g = system.states[st].gamma.powf(-alpha);
        h.push(hs[st]);
        q.push(g * (hs[st] + q[k]));
        w.push(w[k] * g);
    }
    let mut h_tilde = Vec::with_capacity(n);
    for k in 0..n {
        let st = path.states[k];
        h_tilde.push(h[k] + s * q[k] + s * q[k + 1] * system.states[st].holder_bound);
    }
    let mean_nb: f64 = system
        .states
        .iter()
        .zip(marginal)
        .map(|(g, p)| p * g.holder_bound)
        .sum();
    let mean_q = mean_h * e / (1.0 - e);
    let mean_ht = mean_h + s * mean_q + s * mean_q * mean_nb;
    let mut q_tilde = Vec::with_capacity(n);
    q_tilde.push(mean_ht * e / (1.0 - e));
    for k in 0..n - 1 {
        let st = path.states[k];
        let g = system.states[st].gamma.powf(-alpha);
        q_tilde.push(g * (h_tilde[k] + q_tilde[k]));
    }
    q.truncate(n);
    w.truncate(n);
    Ok(QSeries {
        offset: path.offset,
        h,
        q,
        h_tilde,
        q_tilde,
        start_weight: w,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedPotential {
    pub index: i64,
    /// max_x |Σ_branches e^{φ̃} − 1|.
    pub branch_sum_error: f64,
    /// max |φ̃ − φ| over entries, zero when h ≡ 1 and λ = 1.
    pub shift_from_phi: f64,
    pub q: f64,
    pub q_tilde: f64,
    pub h_tilde: f64,
}

/// φ̃ = φ + ln h − ln h∘T + ln λ entrywise: the logarithms of the
/// normalized operator entries.
pub fn normalized_potential(
    triplet: &RPFTriplet,
    window: &CocycleWindow,
    qs: &QSeries,
    s: f64,
) -> Result<Vec<NormalizedPotential>> {
    if !(s > 2.0) {
        return arg(format!("cone parameter s = {s} must exceed 2"));
    }
    if triplet.h.iter().flatten().any(|&v| !(v > 0.0)) {
        return arg("h must be strictly positive");
    }
    let mut out = Vec::with_capacity(triplet.len());
    for k in 0..triplet.len() {
        let i = triplet.start + k as i64;
        let op = window.op(i)?;
        let hs = &triplet.h[k];
        let ht = &triplet.h[k + 1];
        let lam = triplet.lambdas[k];
        let mut bs: f64 = 0.0;
        let mut shift: f64 = 0.0;
        for (r, row) in op.entries.iter().enumerate() {
            let mut sum = 0.0;
            for &(c, v) in row {
                let phi = v.re.ln();
                let tilde = phi + hs[c].ln() - ht[r].ln() - lam.ln();
                sum += tilde.exp();
                shift = shift.max((tilde - phi).abs());
            }
            bs = bs.max((sum - 1.0).abs());
        }
        out.push(NormalizedPotential {
            index: i,
            branch_sum_error: bs,
            shift_from_phi: shift,
            q: qs.q_at(i)?,
            q_tilde: qs.q_tilde_at(i)?,
            h_tilde: qs.h_tilde_at(i)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Exponential,
    Polynomial,
    Indeterminate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub test_labels: Vec<String>,
    /// (n, sup_tests ‖Lⁿg − μ(g)‖∞/‖g‖_α)
    pub sup_norm_decay: Vec<(usize, f64)>,
    pub poly_fit: Option<LinearFit>,
    pub exp_fit: Option<LinearFit>,
    pub regime: Regime,
    /// β from the polynomial fit, log d ≈ log R − β log n.
    pub fitted_exponent: f64,
    /// Exponential rate from log d ≈ a + rate·n.
    pub exp_rate: f64,
    /// max_n n^β·decay(n) over the table.
    pub envelope_constant: f64,
    /// Running max of n^β·decay(n).
    pub envelope: Vec<f64>,
}

impl DecayReport {
    /// Relative growth of the running envelope over the last half of n.
    pub fn envelope_growth_last_half(&self) -> f64 {
        let n = self.envelope.len();
        if n < 2 {
            return 0.0;
        }
        let mid = self.envelope[n / 2 - 1];
        let last = self.envelope[n - 1];
        if mid > 0.0 {
            last / mid - 1.0
        } else {
            f64::INFINITY
        }
    }
}

/// Tabulates the decay of the normalized cocycle from fiber `from` and
/// classifies it by comparing residuals of log-log and log-linear fits on
/// the last half of the table above [`DECAY_FLOOR`].
pub fn decay_rate(
    window: &CocycleWindow,
    mu_from: &[f64],
    from: i64,
    tests: &[(String, Vec<f64>)],
    n_max: usize,
    alpha: f64,
) -> Result<DecayReport> {
    if !window.is_normalized() {
        return arg("decay_rate needs a normalized window");
    }
    window.check_range(from, n_max)?;
    let geom: &CellGeometry = window.geometry(from)?;
    let mut table = vec![0.0f64; n_max];
    for (_, g) in tests {
        let norm = holder_norm(g, geom, alpha, None);
        if norm == 0.0 {
            continue;
        }
        let mean: f64 = g.iter().zip(mu_from).map(|(a, b)| a * b).sum();
        let mut v = g.clone();
        for (n, slot) in table.iter_mut().enumerate() {
            v = window.apply_re(from + n as i64, &v)?;
            let d = v.iter().map(|x| (x - mean).abs()).fold(0.0, f64::max) / norm;
            *slot = slot.max(d);
        }
    }
    let rows: Vec<(usize, f64)> = table.iter().enumerate().map(|(i, &d)| (i + 1, d)).collect();
    let usable: Vec<(usize, f64)> = rows.iter().cloned().filter(|(_, d)| *d > DECAY_FLOOR).collect();
    let half: Vec<(usize, f64)> = usable.iter().cloned().skip(usable.len() / 2).collect();
    let fit_on = if half.len() >= 3 { &half } else { &usable };
    let lx: Vec<f64> = fit_on.iter().map(|(n, _)| (*n as f64).ln()).collect();
    let nx: Vec<f64> = fit_on.iter().map(|(n, _)| *n as f64).collect();
    let ly: Vec<f64> = fit_on.iter().map(|(_, d)| d.ln()).collect();
    let poly = linear_fit(&lx, &ly);
    let expf = linear_fit(&nx, &ly);
    let regime = match (poly, expf) {
        _ if usable.len() < n_max && usable.len() >= 2 && usable.len() < rows.len() => {
            // Reached the floor: faster than any power.
            Regime::Exponential
        }
        (Some(p), Some(e)) => {
            let scale = p.rms.max(e.rms).max(1e-12);
            if (p.rms - e.rms).abs() <= 0.05 * scale {
                Regime::Indeterminate
            } else if e.rms < p.rms {
                Regime::Exponential
            } else {
                Regime::Polynomial
            }
        }
        _ => Regime::Indeterminate,
    };
    // Exponential rate from all usable points when the table hits the floor.
    let all_n: Vec<f64> = usable.iter().map(|(n, _)| *n as f64).collect();
    let all_l: Vec<f64> = usable.iter().map(|(_, d)| d.ln()).collect();
    let exp_rate = if usable.len() < rows.len() {
        linear_fit(&all_n, &all_l).map_or(f64::NEG_INFINITY, |f| f.slope)
    } else {
        expf.map_or(f64::NAN, |f| f.slope)
    };
    let beta = poly.map_or(0.0, |f| (-f.slope).max(0.0));
    let mut run: f64 = 0.0;
    let envelope: Vec<f64> = rows
        .iter()
        .map(|(n, d)| {
            run = run.max((*n as f64).powf(beta) * d);
            run
        })
        .collect();
    Ok(DecayReport {
        test_labels: tests.iter().map(|(l, _)| l.clone()).collect(),
        sup_norm_decay: rows,
        poly_fit: poly,
        exp_fit: expf,
        regime,
        fitted_exponent: beta,
        exp_rate,
        envelope_constant: run,
        envelope,
    })
}

/// |μ(f·(g∘Tⁿ))| computed as |μ_{n}((Lⁿf̄)·g)| with f̄ centred.
pub fn correlation(window: &CocycleWindow, mu_from: &[f64], mu_to: &[f64], from: i64, n: usize, f: &[f64], g: &[f64]) -> Result<f64> {
    let mean: f64 = f.iter().zip(mu_from).map(|(a, b)| a * b).sum();
    let fbar: Vec<f64> = f.iter().map(|x| x - mean).collect();
    let pushed = window.push_re(from, n, &fbar)?;
    Ok(pushed.iter().zip(g).zip(mu_to).map(|((a, b), m)| a * b * m).sum::<f64>().abs())
}

/// Multi-scale test family on circle cells: dist(x, 2^{−k}ℤ) for k < levels,
/// plus cos and sin of 2πx.
pub fn circle_tests(cells: usize, levels: u32) -> Vec<(String, Vec<f64>)> {
    let geom = CellGeometry::circle(cells);
    let mut out = Vec::new();
    for k in 0..levels {
        let h = 0.5f64.powi(k as i32);
        out.push((
            format!("saw{k}"),
            (0..cells)
                .map(|i| {
                    let r = geom.midpoint(i).rem_euclid(h);
                    r.min(h - r)
                })
                .collect(),
        ));
    }
    let tau = 2.0 * std::f64::consts::PI;
    out.push(("cos".into(), (0..cells).map(|i| (tau * geom.midpoint(i)).cos()).collect()));
    out.push(("sin".into(), (0..cells).map(|i| (tau * geom.midpoint(i)).sin()).collect()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{make_circle_family, make_sft_family, CircleFiber, FnSpec};
    use crate::transfer::Discretization;
    use approx::assert_abs_diff_eq;
    use num_complex::Complex64;

    fn zero() -> Complex64 {
        Complex64::new(0.0, 0.0)
    }

    #[test]
    fn full_shift_triplet() {
        let sys = make_sft_family(vec![vec![vec![1, 1], vec![1, 1]]], 1.0).unwrap();
        let path = EnvPath { offset: 0, states: vec![0; 40] };
        let w = CocycleWindow::build(&sys, &path, &RandomFunction::zero(), &Discretization::Cylinder { depth: 1 }, 0, 30, zero(), None).unwrap();
        let t = solve_triplet(&w, 5, 1e-10).unwrap();
        for l in &t.lambdas {
            assert_abs_diff_eq!(*l, 2.0, epsilon = 1e-12);
        }
        for (h, nu) in t.h.iter().zip(&t.nu) {
            h.iter().for_each(|v| assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-12));
            nu.iter().for_each(|v| assert_abs_diff_eq!(*v, 0.5, epsilon = 1e-12));
        }
        assert!(lambda_bounds_hold(&t, &sys, &path, &RandomFunction::zero()).unwrap());
    }

    #[test]
    fn doubling_triplet_and_normalized_potential() {
        let sys = make_circle_family(vec![CircleFiber::linear(2)], 1.0).unwrap();
        let path = EnvPath { offset: -100, states: vec![0; 300] };
        let phi = RandomFunction::uniform(FnSpec::NegLogDerivative);
        let w = CocycleWindow::build(&sys, &path, &phi, &Discretization::Ulam { cells: 64 }, 0, 40, zero(), None).unwrap();
        let t = solve_triplet(&w, 10, 1e-10).unwrap();
        t.lambdas.iter().for_each(|l| assert_abs_diff_eq!(*l, 1.0, epsilon = 1e-12));
        t.h.iter().flatten().for_each(|v| assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-12));
        let qs = q_series(&sys, &path, &[1.0], &phi, 3.0).unwrap();
        // H ≡ 1 (‖φ‖_α = log 2 < 1), γ ≡ 2, α = 1: Q = Σ 2^{−j} = 1.
        assert_abs_diff_eq!(qs.q_at(0).unwrap(), 1.0, epsilon = 1e-12);
        let np = normalized_potential(&t, &w, &qs, 3.0).unwrap();
        for p in &np {
            assert!(p.branch_sum_error < 1e-8);
            assert!(p.shift_from_phi < 1e-12);
        }
        assert!(normalized_potential(&t, &w, &qs, 2.0).is_err());
    }

    #[test]
    fn weighted_sft_lambda_is_perron_root() {
        let sys = make_sft_family(vec![vec![vec![1, 1], vec![1, 0]]], 1.0).unwrap();
        let pot = RandomFunction::uniform(FnSpec::Pair { values: vec![vec![0.3, -0.2], vec![0.5, 0.0]] });
        let path = EnvPath { offset: 0, states: vec![0; 120] };
        let w = CocycleWindow::build(&sys, &path, &pot, &Discretization::Cylinder { depth: 1 }, 0, 100, zero(), None).unwrap();
        let t = solve_triplet(&w, 40, 1e-10).unwrap();
        let m = nalgebra::DMatrix::from_row_slice(2, 2, &[0.3f64.exp(), (-0.2f64).exp(), 0.5f64.exp(), 0.0]);
        let perron = m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
        t.lambdas.iter().for_each(|l| assert_abs_diff_eq!(*l, perron, epsilon = 1e-10));
    }

    #[test]
    fn short_window_is_a_demand_error() {
        let sys = make_sft_family(vec![vec![vec![1, 1], vec![1, 1]]], 1.0).unwrap();
        let path = EnvPath { offset: 0, states: vec![0; 10] };
        let w = CocycleWindow::build(&sys, &path, &RandomFunction::zero(), &Discretization::Cylinder { depth: 1 }, 0, 8, zero(), None).unwrap();
        assert!(matches!(solve_triplet(&w, 5, 1e-8), Err(Error::Demand { .. })));
    }

    #[test]
    fn doubling_cosine_vanishes_in_one_step() {
        let sys = make_circle_family(vec![CircleFiber::linear(2)], 1.0).unwrap();
        let path = EnvPath { offset: -20, states: vec![0; 100] };
        let phi = RandomFunction::uniform(FnSpec::NegLogDerivative);
        let w = CocycleWindow::build(&sys, &path, &phi, &Discretization::Ulam { cells: 256 }, 0, 60, zero(), None).unwrap();
        let t = solve_triplet(&w, 10, 1e-10).unwrap();
        let nw = t.normalized_window(&w).unwrap();
        let mu = t.mu_at(10).unwrap();
        let tests = circle_tests(256, 0);
        let cos = vec![tests[0].clone()];
        let r = decay_rate(&nw, &mu, 10, &cos, 5, 1.0).unwrap();
        assert!(r.sup_norm_decay[0].1 < 1e-14);
        let one = vec![("one".to_string(), vec![1.0; 256])];
        let r = decay_rate(&nw, &mu, 10, &one, 5, 1.0).unwrap();
        assert!(r.sup_norm_decay.iter().all(|(_, d)| *d < 1e-14));
    }

    #[test]
    fn doubling_sawtooths_decay_at_log_two() {
        let sys = make_circle_family(vec![CircleFiber::linear(2)], 1.0).unwrap();
        let path = EnvPath { offset: -20, states: vec![0; 100] };
        let phi = RandomFunction::uniform(FnSpec::NegLogDerivative);
        let w = CocycleWindow::build(&sys, &path, &phi, &Discretization::Ulam { cells: 4096 }, 0, 40, zero(), None).unwrap();
        let t = solve_triplet(&w, 12, 1e-10).unwrap();
        let nw = t.normalized_window(&w).unwrap();
        let from = t.start;
        let r = decay_rate(&nw, &t.mu_at(from).unwrap(), from, &circle_tests(4096, 10), 14, 1.0).unwrap();
        assert_eq!(r.regime, Regime::Exponential);
        assert!((r.exp_rate / -(2f64.ln()) - 1.0).abs() < 0.15, "rate {}", r.exp_rate);
        assert!(r.sup_norm_decay.iter().all(|(_, d)| *d <= 2.0));
    }
}
