//! Stationary random environments: iid or finite-state Markov base processes,
//! analytic mixing bounds, product-decay lemmas and visiting times.
//!
//! Per-state functionals depend on ω₀ only, so every conditional-expectation
//! approximation coefficient vanishes beyond radius zero and the bounds below
//! apply directly to single coordinates spaced by a gap L:
//!
//! ```text
//! |E∏U_j − ∏E U_j| ≤ 4·Σ_j α(gap_j)
//! E∏Y_i ≤ (1 + ψ_U(L))^{d−1}·∏E Y_i
//! ```

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::par;
use crate::stats::Moments;

const ROW_TOL: f64 = 1e-12;
const STATIONARY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Iid,
    Markov,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentModel {
    pub kind: EnvKind,
    pub state_count: usize,
    /// Row-stochastic matrix, Markov kind only.
    pub transition: Option<Vec<Vec<f64>>>,
    pub marginal: Vec<f64>,
    pub seed: u64,
}

impl EnvironmentModel {
    pub fn iid(marginal: Vec<f64>, seed: u64) -> Result<Self> {
        let env = EnvironmentModel {
            kind: EnvKind::Iid,
            state_count: marginal.len(),
            transition: None,
            marginal,
            seed,
        };
        env.validate()?;
        Ok(env)
    }

    /// Markov environment started from its stationary law.
    pub fn markov(transition: Vec<Vec<f64>>, seed: u64) -> Result<Self> {
        let n = transition.len();
        check_stochastic(&transition)?;
        let marginal = stationary(&transition)?;
        let env = EnvironmentModel {
            kind: EnvKind::Markov,
            state_count: n,
            transition: Some(transition),
            marginal,
            seed,
        };
        env.validate()?;
        Ok(env)
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_count == 0 || self.marginal.len() != self.state_count {
            return Err(Error::Model(format!(
                "marginal has {} entries for {} states",
                self.marginal.len(),
                self.state_count
            )));
        }
        if self.marginal.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::Model("marginal has a negative entry".into()));
        }
        let mass: f64 = self.marginal.iter().sum();
        if (mass - 1.0).abs() > ROW_TOL {
            return Err(Error::Model(format!("marginal sums to {mass}")));
        }
        match (&self.kind, &self.transition) {
            (EnvKind::Iid, None) => Ok(()),
            (EnvKind::Iid, Some(_)) => Err(Error::Model("iid model carries a transition matrix".into())),
            (EnvKind::Markov, None) => Err(Error::Model("Markov model without transition matrix".into())),
            (EnvKind::Markov, Some(p)) => {
                if p.len() != self.state_count {
                    return Err(Error::Model("transition matrix has wrong size".into()));
                }
                check_stochastic(p)?;
                let mut resid = 0.0;
                for j in 0..self.state_count {
                    let v: f64 = (0..self.state_count).map(|i| self.marginal[i] * p[i][j]).sum();
                    resid += (v - self.marginal[j]).abs();
                }
                if resid > STATIONARY_TOL {
                    return Err(Error::Model(format!(
                        "marginal is not stationary (‖πP − π‖₁ = {resid:e})"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Transition row for `state`; for iid models every row is the marginal.
    pub fn row(&self, state: usize) -> &[f64] {
        match &self.transition {
            Some(p) => &p[state],
            None => &self.marginal,
        }
    }

    /// Dense transition matrix (the rank-one marginal matrix for iid).
    pub fn transition_matrix(&self) -> DMatrix<f64> {
        let n = self.state_count;
        DMatrix::from_fn(n, n, |i, j| self.row(i)[j])
    }

    pub fn expectation(&self, g: &[f64]) -> f64 {
        self.marginal.iter().zip(g).map(|(p, v)| p * v).sum()
    }
}

fn check_stochastic(p: &[Vec<f64>]) -> Result<()> {
    let n = p.len();
    if n == 0 {
        return Err(Error::Model("empty transition matrix".into()));
    }
    for (i, row) in p.iter().enumerate() {
        if row.len() != n {
            return Err(Error::Model(format!("transition row {i} has {} entries", row.len())));
        }
        if row.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Model(format!("transition row {i} has a negative entry")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_TOL {
            return Err(Error::Model(format!("transition row {i} sums to {s}")));
        }
    }
    Ok(())
}

fn strongly_connected(p: &[Vec<f64>]) -> bool {
    let n = p.len();
    let reach = |forward: bool| {
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                let w = if forward { p[i][j] } else { p[j][i] };
                if w > 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    reach(true) && reach(false)
}

/// Stationary law of an irreducible chain by power iteration on πP.
fn stationary(p: &[Vec<f64>]) -> Result<Vec<f64>> {
    if !strongly_connected(p) {
        return Err(Error::Model("reducible Markov chain has no spectral gap".into()));
    }
    let n = p.len();
    // Lazy chain (P + I)/2 has the same stationary law and is aperiodic.
    let mut pi = vec![1.0 / n as f64; n];
    for _ in 0..1_000_000 {
        let mut next = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                next[j] += pi[i] * 0.5 * (p[i][j] + if i == j { 1.0 } else { 0.0 });
            }
        }
        let s: f64 = next.iter().sum();
        next.iter_mut().for_each(|v| *v /= s);
        let diff: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if diff < 1e-16 {
            break;
        }
    }
    Ok(pi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvPath {
    /// Index of the first stored coordinate.
    pub offset: i64,
    pub states: Vec<usize>,
}

impl EnvPath {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// State at absolute coordinate `index`.
    pub fn at(&self, index: i64) -> Result<usize> {
        let k = index - self.offset;
        if k < 0 || k as usize >= self.states.len() {
            return Err(Error::WindowExhausted(format!(
                "coordinate {index} outside stored window [{}, {})",
                self.offset,
                self.offset + self.states.len() as i64
            )));
        }
        Ok(self.states[k as usize])
    }

    /// The same window seen from θω: coordinate k of θω is coordinate k+1 of ω.
    pub fn shifted(&self) -> EnvPath {
        EnvPath {
            offset: self.offset - 1,
            states: self.states.clone(),
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["index", "state"])?;
        for (k, s) in self.states.iter().enumerate() {
            wr.write_record([(self.offset + k as i64).to_string(), s.to_string()])?;
        }
        wr.flush()
    }
}

fn draw(rng: &mut impl Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Draws a stationary window of `length` coordinates starting at `offset`.
pub fn sample_path(env: &EnvironmentModel, offset: i64, length: i64, seed: u64) -> Result<EnvPath> {
    if length < 1 {
        return arg(format!("path length must be positive, got {length}"));
    }
    env.validate()?;
    let mut rng = par::stream_rng(seed ^ env.seed.rotate_left(17), offset as u64);
    let mut states = Vec::with_capacity(length as usize);
    let mut s = draw(&mut rng, &env.marginal);
    states.push(s);
    for _ in 1..length {
        s = draw(&mut rng, env.row(s));
        states.push(s);
    }
    Ok(EnvPath { offset, states })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    /// Closed-form spectral bound (iid, or reversible Markov chains).
    Analytic,
    /// Constant calibrated from exact matrix powers (non-reversible chains).
    Assumed,
}

/// Bounds α(n) ≤ min(¼, C_α·ρⁿ) and ψ_U(n) ≤ C_ψ·ρⁿ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingProfile {
    pub kind: EnvKind,
    pub rho: f64,
    pub alpha_const: f64,
    pub psi_const: f64,
    pub provenance: Provenance,
}

impl MixingProfile {
    pub fn alpha_bound(&self, n: usize) -> f64 {
        if n == 0 {
            return 0.25;
        }
        if self.kind == EnvKind::Iid || self.rho == 0.0 {
            return 0.0;
        }
        (self.alpha_const * self.rho.powi(n as i32)).min(0.25)
    }

    pub fn psi_u_bound(&self, n: usize) -> f64 {
        if n == 0 {
            return f64::INFINITY;
        }
        if self.kind == EnvKind::Iid || self.rho == 0.0 {
            return 0.0;
        }
        self.psi_const * self.rho.powi(n as i32)
    }

    /// 4·Σα(gap) for blocks separated by the given gaps.
    pub fn alpha_product_bound(&self, gaps: &[usize]) -> f64 {
        4.0 * gaps.iter().map(|&g| self.alpha_bound(g)).sum::<f64>()
    }

    /// (1 + ψ_U(L))^{d−1}·∏E Y_i for d blocks with minimal gap L.
    pub fn psi_product_bound(&self, means: &[f64], gap: usize) -> f64 {
        let d = means.len();
        if d == 0 {
            return 1.0;
        }
        (1.0 + self.psi_u_bound(gap)).powi(d as i32 - 1) * means.iter().product::<f64>()
    }
}

fn second_modulus(p: &DMatrix<f64>) -> f64 {
    let mut mods: Vec<f64> = p.complex_eigenvalues().iter().map(|z| z.norm()).collect();
    mods.sort_by(|a, b| b.total_cmp(a));
    mods.get(1).copied().unwrap_or(0.0).max(0.0)
}

pub fn mixing_bounds(env: &EnvironmentModel) -> Result<MixingProfile> {
    env.validate()?;
    if env.kind == EnvKind::Iid {
        return Ok(MixingProfile {
            kind: EnvKind::Iid,
            rho: 0.0,
            alpha_const: 0.0,
            psi_const: 0.0,
            provenance: Provenance::Analytic,
        });
    }
    let rows = env.transition.as_ref().expect("validated Markov model");
    if !strongly_connected(rows) {
        return Err(Error::Model("reducible Markov chain has no spectral gap".into()));
    }
    let p = env.transition_matrix();
    let rho = second_modulus(&p);
    if rho > 1.0 - 1e-12 {
        return Err(Error::Model("periodic Markov chain has no spectral gap".into()));
    }
    let n = env.state_count;
    let pi = &env.marginal;
    let pi_min = pi.iter().cloned().fold(f64::INFINITY, f64::min);
    let reversible = (0..n).all(|i| (0..n).all(|j| (pi[i] * p[(i, j)] - pi[j] * p[(j, i)]).abs() <= 1e-12));
    if reversible {
        let tv = pi
            .iter()
            .map(|&q| ((1.0 - q) / q).sqrt())
            .fold(0.0, f64::max);
        return Ok(MixingProfile {
            kind: EnvKind::Markov,
            rho,
            alpha_const: 0.5 * tv,
            psi_const: 1.0 / pi_min,
            provenance: Provenance::Analytic,
        });
    }
    // Non-reversible: calibrate the constants on exact powers until ρⁿ is negligible.
    let mut pow = p.clone();
    let (mut ca, mut cp): (f64, f64) = (0.0, 0.0);
    let mut k = 1;
    while rho > 0.0 && rho.powi(k) > 1e-14 && k < 10_000 {
        let scale = rho.powi(k);
        let mut tv: f64 = 0.0;
        let mut psi: f64 = 0.0;
        for i in 0..n {
            let row: f64 = (0..n).map(|j| (pow[(i, j)] - pi[j]).abs()).sum::<f64>() * 0.5;
            tv = tv.max(row);
            for j in 0..n {
                psi = psi.max((pow[(i, j)] / pi[j] - 1.0).abs());
            }
        }
        ca = ca.max(tv / scale);
        cp = cp.max(psi / scale);
        pow = &pow * &p;
        k += 1;
    }
    Ok(MixingProfile {
        kind: EnvKind::Markov,
        rho,
        alpha_const: ca,
        psi_const: cp,
        provenance: Provenance::Assumed,
    })
}

/// Exponent 1 − x(M+1) of the α-product lemma.
pub fn alpha_exp_exponent(m: f64, x: f64) -> f64 {
    1.0 - x * (m + 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProductDecayRow {
    pub n: usize,
    pub mc_estimate: f64,
    pub mc_se: f64,
    /// E∏g computed exactly through the transition matrix.
    pub exact: f64,
    pub lemma_bound: f64,
}

/// Exact E[∏_{j<n} g(ω_j)] for n = 0..=n_max.
pub fn product_expectations(env: &EnvironmentModel, g: &[f64], n_max: usize) -> Vec<f64> {
    let mut out = vec![1.0];
    let mut v: Vec<f64> = env.marginal.iter().zip(g).map(|(p, x)| p * x).collect();
    for n in 1..=n_max {
        out.push(v.iter().sum());
        if n < n_max {
            let mut next = vec![0.0; env.state_count];
            for i in 0..env.state_count {
                let row = env.row(i);
                for j in 0..env.state_count {
                    next[j] += v[i] * row[j] * g[j];
                }
            }
            v = next;
        }
    }
    out
}

/// Best single-coordinate spacing bound for E∏_{j<n} g(ω_j), g ∈ [0,1].
pub fn product_lemma_bound(profile: &MixingProfile, mean_g: f64, n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let mut best = f64::INFINITY;
    for gap in 1..=n {
        let d = (n - 1) / gap + 1;
        let psi = (1.0 + profile.psi_u_bound(gap)).powi(d as i32 - 1) * mean_g.powi(d as i32);
        let alpha = mean_g.powi(d as i32) + 4.0 * (d - 1) as f64 * profile.alpha_bound(gap);
        best = best.min(psi).min(alpha);
        if profile.kind == EnvKind::Iid {
            break;
        }
    }
    best.min(1.0)
}

/// Checks lim sup ψ_U(k) < 1/E[g] − 1; returns the first gap at which
/// (1 + ψ_U(L))·E[g] < 1, the contraction the product lemma needs.
pub fn psi_condition_gap(profile: &MixingProfile, mean_g: f64) -> Option<usize> {
    if mean_g >= 1.0 {
        return None;
    }
    (1..=100_000).find(|&l| (1.0 + profile.psi_u_bound(l)) * mean_g < 1.0)
}

pub fn product_decay(
    env: &EnvironmentModel,
    g: &[f64],
    n_max: usize,
    mc_samples: usize,
    seed: u64,
) -> Result<Vec<ProductDecayRow>> {
    if g.len() != env.state_count {
        return arg("g must have one value per state");
    }
    if g.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return arg("g must take values in [0, 1]");
    }
    let mean = env.expectation(g);
    if mean >= 1.0 {
        return Err(Error::Precondition(format!("E[g] = {mean} ≥ 1, no decay")));
    }
    let profile = mixing_bounds(env)?;
    let exact = product_expectations(env, g, n_max);
    let chunks = par::mc_chunks(mc_samples, seed, |rng, count| {
        let mut acc = vec![Moments::default(); n_max + 1];
        for _ in 0..count {
            let mut s = draw(rng, &env.marginal);
            let mut prod = 1.0;
            acc[0].push(1.0);
            for slot in acc.iter_mut().skip(1) {
                prod *= g[s];
                slot.push(prod);
                s = draw(rng, env.row(s));
            }
        }
        acc
    });
    let mut total = vec![Moments::default(); n_max + 1];
    for c in &chunks {
        for (t, m) in total.iter_mut().zip(c) {
            t.merge(m);
        }
    }
    Ok((0..=n_max)
        .map(|n| ProductDecayRow {
            n,
            mc_estimate: total[n].mean(),
            mc_se: total[n].se(),
            exact: exact[n],
            lemma_bound: product_lemma_bound(&profile, mean, n),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitRecord {
    pub level_set_id: String,
    /// Visit times n ≥ 1 relative to the path start (m₁ < m₂ < …).
    pub visit_indices: Vec<usize>,
    pub path_length: usize,
}

/// Visits of the path to the level set at times n ≥ 1; time 0 is the base point.
pub fn visiting_times(path: &EnvPath, level_set: &[bool], label: &str) -> Result<VisitRecord> {
    let visits: Vec<usize> = path
        .states
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, &s)| level_set.get(s).copied().unwrap_or(false))
        .map(|(n, _)| n)
        .collect();
    if visits.is_empty() {
        return Err(Error::EmptyRecord(label.to_string()));
    }
    Ok(VisitRecord {
        level_set_id: label.to_string(),
        visit_indices: visits,
        path_length: path.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisitDiagnostics {
    pub visits: usize,
    /// Least-squares slope of m_k against k through the origin.
    pub fitted_gap: f64,
    pub inverse_probability: f64,
    /// sup_k m_k / k^{1+1/p+δ}.
    pub envelope_sup: f64,
}

pub fn visit_diagnostics(rec: &VisitRecord, prob: f64, p: f64, delta: f64) -> VisitDiagnostics {
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut sup: f64 = 0.0;
    let expo = 1.0 + 1.0 / p + delta;
    for (k0, &m) in rec.visit_indices.iter().enumerate() {
        let k = (k0 + 1) as f64;
        sxx += k * k;
        sxy += k * m as f64;
        sup = sup.max(m as f64 / k.powf(expo));
    }
    VisitDiagnostics {
        visits: rec.visit_indices.len(),
        fitted_gap: sxy / sxx,
        inverse_probability: 1.0 / prob,
        envelope_sup: sup,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndicatorBound {
    pub mc_estimate: f64,
    pub mc_se: f64,
    pub exact: f64,
    /// Fitted constant c₁ of the polynomial term.
    pub c1: f64,
    pub bound: f64,
    pub holds: bool,
}

fn exp_count(c: f64, count: usize) -> f64 {
    if count == 0 {
        1.0
    } else {
        (-c * count as f64).exp()
    }
}

/// Exact E[exp(−c·Σ_{j=0}^{n} 1_A(ω_{kj}))] through the transition matrix.
pub fn indicator_exp_exact(env: &EnvironmentModel, in_a: &[bool], c: f64, k_stride: usize, n: usize) -> f64 {
    let s = env.state_count;
    let w: Vec<f64> = in_a.iter().map(|&a| if a { exp_count(c, 1) } else { 1.0 }).collect();
    let p = env.transition_matrix();
    let mut pk = DMatrix::<f64>::identity(s, s);
    for _ in 0..k_stride {
        pk = &pk * &p;
    }
    let mut v: Vec<f64> = (0..s).map(|i| env.marginal[i] * w[i]).collect();
    for _ in 0..n {
        let mut next = vec![0.0; s];
        for i in 0..s {
            for j in 0..s {
                next[j] += v[i] * pk[(i, j)] * w[j];
            }
        }
        v = next;
    }
    v.iter().sum()
}

/// Polynomial bound c₁n^{2−εa} + ℙ(ℓ ≥ [n/2]) with ℓ ≡ 1; c₁ is fitted on
/// exact values over n ≤ 4·`n`, the Monte Carlo estimate is then tested
/// against it.
#[allow(clippy::too_many_arguments)]
pub fn indicator_exp_bound(
    env: &EnvironmentModel,
    in_a: &[bool],
    c: f64,
    k_stride: usize,
    n: usize,
    a: f64,
    eps: f64,
    mc_samples: usize,
    seed: u64,
) -> Result<IndicatorBound> {
    if in_a.len() != env.state_count {
        return arg("level set must have one flag per state");
    }
    let prob: f64 = env.marginal.iter().zip(in_a).filter(|(_, &a)| a).map(|(p, _)| p).sum();
    if !(prob > 0.0 && prob < 1.0) {
        return arg(format!("ℙ(A) = {prob} must lie in (0, 1)"));
    }
    if !(c >= 0.0) || k_stride == 0 {
        return arg("c must be nonnegative and the stride positive");
    }
    let expo = 2.0 - eps * a;
    let tail = |m: usize| if 1 >= m / 2 { 1.0 } else { 0.0 };
    let c1 = (4..=(4 * n).max(4))
        .map(|m| indicator_exp_exact(env, in_a, c, k_stride, m) / (m as f64).powf(expo))
        .fold(0.0, f64::max);
    let bound = c1 * (n.max(1) as f64).powf(expo) + tail(n);
    let chunks = par::mc_chunks(mc_samples, seed, |rng, count| {
        let mut m = Moments::default();
        for _ in 0..count {
            let mut s = draw(rng, &env.marginal);
            let mut hits = usize::from(in_a[s]);
            for _ in 0..n {
                for _ in 0..k_stride {
                    s = draw(rng, env.row(s));
                }
                hits += usize::from(in_a[s]);
            }
            m.push(exp_count(c, hits));
        }
        m
    });
    let mut tot = Moments::default();
    chunks.iter().for_each(|m| tot.merge(m));
    let est = tot.mean();
    let se = tot.se();
    Ok(IndicatorBound {
        mc_estimate: est,
        mc_se: se,
        exact: indicator_exp_exact(env, in_a, c, k_stride, n),
        c1,
        bound,
        holds: est <= bound + 3.0 * se,
    })
}

/// sup_n b_n·g_n for a product sequence g_n.
pub fn weighted_running_sup(products: &[f64], b: impl Fn(usize) -> f64) -> f64 {
    products
        .iter()
        .enumerate()
        .map(|(n, g)| b(n) * g)
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn sticky() -> EnvironmentModel {
        EnvironmentModel::markov(vec![vec![0.9, 0.1], vec![0.1, 0.9]], 3).unwrap()
    }

    #[test]
    fn paths_are_seed_deterministic() {
        let env = EnvironmentModel::iid(vec![0.5, 0.5], 1).unwrap();
        let a = sample_path(&env, 0, 8, 7).unwrap();
        let b = sample_path(&env, 0, 8, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(sample_path(&env, 5, 1, 7).unwrap().len(), 1);
        assert!(matches!(sample_path(&env, 0, 0, 7), Err(Error::Argument(_))));
    }

    #[test]
    fn sticky_chain_marginal_and_gap() {
        let env = sticky();
        assert_abs_diff_eq!(env.marginal[0], 0.5, epsilon = 1e-12);
        let prof = mixing_bounds(&env).unwrap();
        assert_abs_diff_eq!(prof.rho, 0.8, epsilon = 1e-12);
        assert_eq!(prof.provenance, Provenance::Analytic);
        let path = sample_path(&env, 0, 200_000, 11).unwrap();
        let f0 = path.states.iter().filter(|&&s| s == 0).count() as f64 / 200_000.0;
        assert!((f0 - 0.5).abs() < 0.02);
    }

    #[test]
    fn alpha_bound_dominates_exact_total_variation() {
        let env = EnvironmentModel::markov(
            vec![vec![0.5, 0.3, 0.2], vec![0.2, 0.6, 0.2], vec![0.3, 0.3, 0.4]],
            0,
        )
        .unwrap();
        let prof = mixing_bounds(&env).unwrap();
        let p = env.transition_matrix();
        let mut pow = p.clone();
        for n in 1..30 {
            let tv = (0..3)
                .map(|i| 0.5 * (0..3).map(|j| (pow[(i, j)] - env.marginal[j]).abs()).sum::<f64>())
                .fold(0.0, f64::max);
            assert!(tv.min(0.25) <= prof.alpha_bound(n) + 1e-15, "n={n}");
            pow = &pow * &p;
        }
    }

    #[test]
    fn reducible_chain_rejected() {
        let r = EnvironmentModel::markov(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 0);
        assert!(matches!(r, Err(Error::Model(_))));
        let per = EnvironmentModel::markov(vec![vec![0.0, 1.0], vec![1.0, 0.0]], 0).unwrap();
        assert!(matches!(mixing_bounds(&per), Err(Error::Model(_))));
    }

    #[test]
    fn iid_profile_vanishes() {
        let env = EnvironmentModel::iid(vec![0.3, 0.7], 0).unwrap();
        let prof = mixing_bounds(&env).unwrap();
        for n in 1..10 {
            assert_eq!(prof.alpha_bound(n), 0.0);
            assert_eq!(prof.psi_u_bound(n), 0.0);
        }
        assert_abs_diff_eq!(prof.psi_product_bound(&[0.5, 0.5, 0.5], 1), 0.125);
    }

    #[test]
    fn two_block_alpha_bound() {
        let prof = mixing_bounds(&sticky()).unwrap();
        assert_abs_diff_eq!(prof.alpha_product_bound(&[5]), 4.0 * prof.alpha_bound(5));
    }

    #[test]
    fn alpha_exponent_example() {
        assert_abs_diff_eq!(alpha_exp_exponent(3.0, 0.9), -2.6, epsilon = 1e-12);
    }

    #[test]
    fn iid_product_decay_is_three_quarters_power() {
        let env = EnvironmentModel::iid(vec![0.5, 0.5], 0).unwrap();
        let rows = product_decay(&env, &[0.5, 1.0], 20, 20_000, 9).unwrap();
        for r in &rows {
            let truth = 0.75f64.powi(r.n as i32);
            assert_abs_diff_eq!(r.exact, truth, epsilon = 1e-14);
            assert_abs_diff_eq!(r.lemma_bound, truth, epsilon = 1e-14);
            assert!((r.mc_estimate - truth).abs() <= 3.0 * r.mc_se + 1e-15, "n={}", r.n);
        }
        assert!(matches!(
            product_decay(&env, &[1.0, 1.0], 3, 10, 0),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn markov_product_bound_dominates_exact() {
        let env = sticky();
        let prof = mixing_bounds(&env).unwrap();
        let g = [0.5, 1.0];
        let exact = product_expectations(&env, &g, 60);
        for (n, e) in exact.iter().enumerate() {
            assert!(*e <= product_lemma_bound(&prof, 0.75, n) + 1e-14, "n={n}");
        }
        assert!(psi_condition_gap(&prof, 0.75).is_some());
    }

    #[test]
    fn visits_of_full_level_set() {
        let env = EnvironmentModel::iid(vec![0.5, 0.5], 0).unwrap();
        let path = sample_path(&env, 0, 50, 1).unwrap();
        let rec = visiting_times(&path, &[true, true], "all").unwrap();
        assert_eq!(rec.visit_indices, (1..50).collect::<Vec<_>>());
        assert!(matches!(
            visiting_times(&path, &[false, false], "none"),
            Err(Error::EmptyRecord(_))
        ));
    }

    #[test]
    fn first_visit_mean_is_geometric() {
        let env = EnvironmentModel::iid(vec![0.5, 0.5], 0).unwrap();
        let mut tot = 0.0;
        let seeds = 4000;
        for s in 0..seeds {
            let path = sample_path(&env, 0, 64, s).unwrap();
            tot += visiting_times(&path, &[false, true], "A").unwrap().visit_indices[0] as f64;
        }
        assert!((tot / seeds as f64 - 2.0).abs() < 0.1);
    }

    #[test]
    fn visit_rate_matches_kac() {
        let env = sticky();
        let path = sample_path(&env, 0, 40_000, 5).unwrap();
        let rec = visiting_times(&path, &[true, false], "zero").unwrap();
        let k = 10_000;
        let ratio = rec.visit_indices[k - 1] as f64 / k as f64;
        assert!((ratio - 2.0).abs() < 0.1, "ratio {ratio}");
        let diag = visit_diagnostics(&rec, 0.5, 2.0, 0.1);
        assert!(diag.envelope_sup.is_finite());
    }

    #[test]
    fn indicator_examples() {
        let env = EnvironmentModel::iid(vec![0.5, 0.5], 0).unwrap();
        let a = [false, true];
        for n in [1usize, 4, 9] {
            let inf = indicator_exp_exact(&env, &a, f64::INFINITY, 1, n);
            assert_abs_diff_eq!(inf, 0.5f64.powi(n as i32 + 1), epsilon = 1e-15);
            assert_abs_diff_eq!(indicator_exp_exact(&env, &a, 0.0, 1, n), 1.0, epsilon = 1e-15);
            let one = indicator_exp_exact(&env, &a, 1.0, 1, n);
            assert_abs_diff_eq!(one, ((1.0 + (-1.0f64).exp()) / 2.0).powi(n as i32 + 1), epsilon = 1e-15);
        }
        let r = indicator_exp_bound(&env, &a, 1.0, 2, 12, 4.0, 0.9, 20_000, 3).unwrap();
        assert!(r.holds);
        assert!((r.mc_estimate - r.exact).abs() <= 3.0 * r.mc_se);
    }

    #[test]
    fn path_csv_and_shift() {
        let p = EnvPath { offset: -2, states: vec![0, 1, 1] };
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "index,state\n-2,0\n-1,1\n0,1\n");
        let s = p.shifted();
        assert_eq!(s.at(-3).unwrap(), p.at(-2).unwrap());
        assert!(p.at(1).is_err());
    }
}
