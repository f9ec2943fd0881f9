//! Random cones, Hilbert projective metrics, projective diameters and the
//! contraction ledger of the normalized cocycle.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::environment::EnvPath;
use crate::error::{arg, Error, Result};
use crate::geometry::{holder_norm, seminorm, sup_norm, CellGeometry};
use crate::par;
use crate::rpf::{orthant_distance, QSeries};
use crate::systems::{CoveringTimes, FiberedSystem};
use crate::transfer::{CocycleWindow, OperatorMatrix};

/// Default κ of the block cones.
pub const KAPPA_DEFAULT: f64 = std::f64::consts::FRAC_1_SQRT_2;
/// Cone members drawn per sampled verification.
pub const CONE_SAMPLES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConeKind {
    /// g > 0 with v_{α,ξ}(ln g) ≤ s·q.
    LogOscillation { s: f64, q: f64 },
    /// g ≥ 0 with g(x) ≤ C·g(x′) for all x, x′.
    BoundedRatio { c: f64 },
    /// v_α(g) ≤ κ·inf g.
    Kappa { kappa: f64 },
    Orthant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConeSpec {
    pub kind: ConeKind,
    pub alpha: f64,
    /// Locality scale; pairs further apart are unconstrained.
    pub xi: Option<f64>,
}

impl ConeSpec {
    pub fn orthant() -> Self {
        ConeSpec { kind: ConeKind::Orthant, alpha: 1.0, xi: None }
    }

    pub fn log_oscillation(s: f64, q: f64, alpha: f64, xi: f64) -> Self {
        ConeSpec { kind: ConeKind::LogOscillation { s, q }, alpha, xi: Some(xi) }
    }

    pub fn kappa(kappa: f64, alpha: f64) -> Self {
        ConeSpec { kind: ConeKind::Kappa { kappa }, alpha, xi: None }
    }

    pub fn bounded_ratio(c: f64) -> Self {
        ConeSpec { kind: ConeKind::BoundedRatio { c }, alpha: 1.0, xi: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return arg(format!("Hölder exponent {} outside (0, 1]", self.alpha));
        }
        if let Some(x) = self.xi {
            if !(x > 0.0) {
                return arg(format!("scale ξ = {x} must be positive"));
            }
        }
        match self.kind {
            ConeKind::LogOscillation { s, q } if !(s > 0.0 && q > 0.0) => arg(format!("cone parameters s = {s}, Q = {q} must be positive")),
            ConeKind::BoundedRatio { c } if !(c >= 1.0) => arg(format!("ratio bound C = {c} must be at least 1")),
            ConeKind::Kappa { kappa } if !(kappa > 0.0 && kappa < 1.0) => arg(format!("κ = {kappa} outside (0, 1)")),
            _ => Ok(()),
        }
    }

    fn local(&self, d: f64) -> bool {
        d > 0.0 && self.xi.is_none_or(|x| d <= x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Membership {
    pub member: bool,
    /// (bound − attained)/bound for the tightest constraint.
    pub margin: f64,
    pub constraint: String,
}

pub fn cone_membership(g: &[f64], cone: &ConeSpec, geom: &CellGeometry) -> Membership {
    let min = g.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let negative = Membership { member: false, margin: -1.0, constraint: "nonnegativity".into() };
    match cone.kind {
        ConeKind::Orthant => {
            if !(min > 0.0) {
                return negative;
            }
            Membership { member: true, margin: min / max, constraint: "positivity".into() }
        }
        ConeKind::LogOscillation { s, q } => {
            if !(min > 0.0) {
                return negative;
            }
            let lg: Vec<f64> = g.iter().map(|v| v.ln()).collect();
            let v = seminorm(&lg, geom, cone.alpha, cone.xi);
            let bound = s * q;
            let margin = (bound - v) / bound;
            Membership { member: margin >= 0.0, margin, constraint: "log-oscillation".into() }
        }
        ConeKind::BoundedRatio { c } => {
            if !(min >= 0.0) {
                return negative;
            }
            if max == 0.0 {
                return Membership { member: true, margin: 1.0, constraint: "ratio".into() };
            }
            let attained = if min > 0.0 { max / min } else { f64::INFINITY };
            let margin = (c - attained) / c;
            Membership { member: margin >= 0.0, margin, constraint: "ratio".into() }
        }
        ConeKind::Kappa { kappa } => {
            let v = seminorm(g, geom, cone.alpha, cone.xi);
            let bound = kappa * min;
            if !(bound > 0.0) {
                let member = v == 0.0 && min >= 0.0;
                return Membership { member, margin: if member { 0.0 } else { -1.0 }, constraint: "κ-oscillation".into() };
            }
            let margin = (bound - v) / bound;
            Membership { member: margin >= 0.0, margin, constraint: "κ-oscillation".into() }
        }
    }
}

/// Hilbert distance: for a cone cut out by linear functionals ℓ ≥ 0 it is
/// ln(max ℓ(f)/ℓ(g) / min ℓ(f)/ℓ(g)) over functionals with ℓ(g) > 0.
pub fn hilbert_metric(f: &[f64], g: &[f64], cone: &ConeSpec, geom: &CellGeometry) -> Result<f64> {
    if f.len() != g.len() || f.len() != geom.len() {
        return Err(Error::Dimension("vectors and geometry disagree".into()));
    }
    cone.validate()?;
    for (name, v) in [("first", f), ("second", g)] {
        let m = cone_membership(v, cone, geom);
        if !m.member {
            return Err(Error::Membership(format!("{name} argument violates {} (margin {:.3e})", m.constraint, m.margin)));
        }
    }
    if let ConeKind::Orthant = cone.kind {
        return Ok(orthant_distance(f, g));
    }
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    let mut take = |nf: f64, ng: f64| {
        if ng > 1e-300 {
            let r = nf / ng;
            lo = lo.min(r);
            hi = hi.max(r);
        } else if nf.abs() > 1e-300 {
            hi = f64::INFINITY;
        }
    };
    for i in 0..f.len() {
        take(f[i], g[i]);
    }
    match cone.kind {
        ConeKind::LogOscillation { s, q } => {
            for (i, j) in geom.pairs() {
                let d = geom.dist(i, j);
                if !cone.local(d) {
                    continue;
                }
                let e = (s * q * d.powf(cone.alpha)).exp();
                take(e * f[j] - f[i], e * g[j] - g[i]);
                take(e * f[i] - f[j], e * g[i] - g[j]);
            }
        }
        ConeKind::BoundedRatio { c } => {
            let n = f.len();
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        take(c * f[j] - f[i], c * g[j] - g[i]);
                    }
                }
            }
        }
        ConeKind::Kappa { kappa } => {
            let pairs = geom.pairs();
            for y in 0..f.len() {
                for &(i, j) in &pairs {
                    let d = geom.dist(i, j).powf(cone.alpha);
                    if d <= 0.0 {
                        continue;
                    }
                    take(kappa * d * f[y] - (f[i] - f[j]), kappa * d * g[y] - (g[i] - g[j]));
                    take(kappa * d * f[y] + (f[i] - f[j]), kappa * d * g[y] + (g[i] - g[j]));
                }
            }
        }
        ConeKind::Orthant => unreachable!(),
    }
    if !(lo > 0.0) || hi.is_infinite() {
        return Ok(f64::INFINITY);
    }
    Ok((hi / lo).ln().max(0.0))
}

/// g = g₁ + g₂ + g₃ + g₄ with each piece in C ∪ (−C).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub pieces: [Vec<f64>; 4],
    pub signs: [i8; 4],
    pub norm_sum: f64,
    pub norm_bound: f64,
    pub reconstruction_error: f64,
}

/// Shift by a constant c = ‖g‖∞ + 2v_{α,ξ}(g)/(sQ), which puts g + c in the
/// cone; the remaining slots stay zero.
pub fn decompose(g: &[f64], cone: &ConeSpec, geom: &CellGeometry) -> Result<Decomposition> {
    let (s, q) = match cone.kind {
        ConeKind::LogOscillation { s, q } => (s, q),
        _ => return arg("decompose needs a log-oscillation cone"),
    };
    cone.validate()?;
    let n = g.len();
    let xi = cone.xi.unwrap_or(1.0).min(1.0);
    let bound_factor = 12.0 / xi * (1.0 + 4.0 / (s * q));
    let zero = vec![0.0; n];
    let gnorm = holder_norm(g, geom, cone.alpha, None);
    let finish = |pieces: [Vec<f64>; 4], signs: [i8; 4]| {
        let norm_sum = pieces.iter().map(|p| holder_norm(p, geom, cone.alpha, None)).sum();
        let err = (0..n)
            .map(|i| (pieces.iter().map(|p| p[i]).sum::<f64>() - g[i]).abs())
            .fold(0.0, f64::max);
        Decomposition { pieces, signs, norm_sum, norm_bound: bound_factor * gnorm, reconstruction_error: err }
    };
    if g.iter().all(|&v| v == 0.0) {
        return Ok(finish([zero.clone(), zero.clone(), zero.clone(), zero], [1, 1, 1, 1]));
    }
    if cone_membership(g, cone, geom).member {
        return Ok(finish([g.to_vec(), zero.clone(), zero.clone(), zero], [1, -1, 1, -1]));
    }
    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
    if cone_membership(&neg, cone, geom).member {
        return Ok(finish([zero.clone(), g.to_vec(), zero.clone(), zero], [1, -1, 1, -1]));
    }
    let v = seminorm(g, geom, cone.alpha, cone.xi);
    let c = sup_norm(g) + 2.0 * v / (s * q);
    let g1: Vec<f64> = g.iter().map(|x| x + c).collect();
    let g2 = vec![-c; n];
    Ok(finish([g1, g2, zero.clone(), zero], [1, -1, 1, -1]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingBound {
    pub alpha_norm: f64,
    pub k_omega: f64,
    pub functional: f64,
    pub holds: bool,
}

/// ‖g‖_α ≤ K·l(g) with l(g) = Σ g(centers) and
/// K = 3(e^{sξ^αQ̃} + sQ̃e^{2sξ^αQ̃})ξ⁻¹.
pub fn sampling_functional_bound(g: &[f64], cone: &ConeSpec, geom: &CellGeometry, centers: &[usize]) -> Result<SamplingBound> {
    let (s, q) = match cone.kind {
        ConeKind::LogOscillation { s, q } => (s, q),
        _ => return arg("sampling bound needs a log-oscillation cone"),
    };
    if centers.is_empty() {
        return arg("empty sample set");
    }
    let m = cone_membership(g, cone, geom);
    if !m.member {
        return Err(Error::Membership(format!("{} violated (margin {:.3e})", m.constraint, m.margin)));
    }
    let xi = cone.xi.unwrap_or(1.0).min(1.0);
    let a = s * xi.powf(cone.alpha) * q;
    let k = 3.0 * (a.exp() + s * q * (2.0 * a).exp()) / xi;
    let l: f64 = centers.iter().map(|&c| g[c]).sum();
    let norm = holder_norm(g, geom, cone.alpha, None);
    Ok(SamplingBound { alpha_norm: norm, k_omega: k, functional: l, holds: norm <= k * l })
}

/// Random members of a cone: the constant plus exponentiated smooth noise
/// (circle) or cell noise (words) scaled to 90% of the admissible oscillation.
pub fn sample_members(cone: &ConeSpec, geom: &CellGeometry, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = geom.len();
    let mut out = vec![vec![1.0; n]];
    while out.len() < count.max(1) {
        let noise: Vec<f64> = match geom {
            CellGeometry::Circle { .. } => {
                let modes: Vec<(f64, f64)> = (0..6).map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(0.0..1.0))).collect();
                (0..n)
                    .map(|i| {
                        let x = geom.midpoint(i);
                        modes
                            .iter()
                            .enumerate()
                            .map(|(k, (a, ph))| a / (k + 1) as f64 * (2.0 * std::f64::consts::PI * ((k + 1) as f64 * x + ph)).cos())
                            .sum()
                    })
                    .collect()
            }
            CellGeometry::Words { .. } => (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let amp: f64 = rng.gen_range(0.1..0.9);
        let g = match cone.kind {
            ConeKind::LogOscillation { s, q } => {
                let v = seminorm(&noise, geom, cone.alpha, cone.xi).max(1e-300);
                let t = amp * s * q / v;
                noise.iter().map(|x| (t * x).exp()).collect()
            }
            ConeKind::Kappa { kappa } => {
                // v(1 + t·noise) = t·v(noise) ≤ κ(1 − t) when t = κ/(v + κ).
                let v = seminorm(&noise, geom, cone.alpha, cone.xi).max(1e-300);
                let t = amp * kappa / (v + kappa);
                noise.iter().map(|x| 1.0 + t * x).collect()
            }
            ConeKind::BoundedRatio { c } => {
                let r = c.ln() * amp / 2.0;
                noise.iter().map(|x| (r * x).exp()).collect()
            }
            ConeKind::Orthant => noise.iter().map(|x| (2.0 * amp * x).exp()).collect(),
        };
        out.push(g);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BirkhoffReport {
    /// Orthant diameter of the image cone.
    pub diameter: f64,
    /// max over sampled pairs of d(Af, Ag)/d(f, g).
    pub max_ratio: f64,
    pub tanh_quarter: f64,
    pub tanh_full: f64,
}

impl BirkhoffReport {
    pub fn holds(&self, slack: f64) -> bool {
        self.max_ratio <= self.tanh_quarter + slack
    }
}

/// Orthant contraction of a positive matrix over sampled pairs.
pub fn birkhoff_contraction(m: &DMatrix<f64>, pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<BirkhoffReport> {
    if m.iter().any(|&v| !(v > 0.0)) {
        return arg("matrix must be entrywise positive");
    }
    let cols: Vec<Vec<f64>> = (0..m.ncols()).map(|j| m.column(j).iter().cloned().collect()).collect();
    let mut diameter: f64 = 0.0;
    for i in 0..cols.len() {
        for j in i + 1..cols.len() {
            diameter = diameter.max(orthant_distance(&cols[i], &cols[j]));
        }
    }
    let ratios = par::map_slice(pairs, |(f, g)| {
        let d0 = orthant_distance(f, g);
        if !(d0 > 0.0) {
            return 0.0;
        }
        let af: Vec<f64> = (m * nalgebra::DVector::from_column_slice(f)).iter().cloned().collect();
        let ag: Vec<f64> = (m * nalgebra::DVector::from_column_slice(g)).iter().cloned().collect();
        orthant_distance(&af, &ag) / d0
    });
    Ok(BirkhoffReport {
        diameter,
        max_ratio: ratios.into_iter().fold(0.0, f64::max),
        tanh_quarter: (diameter / 4.0).tanh(),
        tanh_full: diameter.tanh(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaReport {
    pub kappa: f64,
    pub eps0: f64,
    pub zeta: f64,
    pub checked: usize,
    pub worst_margin: f64,
    pub holds: bool,
}

/// κ/((2κ+1)(κ+1)), the admissibility threshold for ε₀.
pub fn kappa_threshold(kappa: f64) -> f64 {
    kappa / ((2.0 * kappa + 1.0) * (kappa + 1.0))
}

/// ζ = ε₀/(κ((2κ+1)⁻¹ − ε₀)).
pub fn kappa_zeta(eps0: f64, kappa: f64) -> f64 {
    eps0 / (kappa * (1.0 / (2.0 * kappa + 1.0) - eps0))
}

/// Checks 𝒜_j C_{j,κ} ⊂ C_{j+1,κζ} on sampled members. `geoms` has one
/// more entry than `ops`.
pub fn kappa_invariance_check(
    ops: &[OperatorMatrix],
    geoms: &[CellGeometry],
    alpha: f64,
    eps0: f64,
    kappa: f64,
    seed: u64,
) -> Result<KappaReport> {
    if !(kappa > 0.0 && kappa < 1.0) {
        return arg(format!("κ = {kappa} outside (0, 1)"));
    }
    let thr = kappa_threshold(kappa);
    if !(eps0 > 0.0 && eps0 < thr) {
        return arg(format!("ε₀ = {eps0} outside (0, {thr:.4}) for κ = {kappa}"));
    }
    if geoms.len() != ops.len() + 1 {
        return Err(Error::Dimension("need one geometry per block boundary".into()));
    }
    let zeta = kappa_zeta(eps0, kappa);
    let src = ConeSpec::kappa(kappa, alpha);
    let tgt = ConeSpec::kappa(kappa * zeta, alpha);
    let margins: Vec<(usize, f64)> = par::map_range(ops.len(), |j| {
        let mut rng = par::stream_rng(seed, j as u64);
        let members = sample_members(&src, &geoms[j], CONE_SAMPLES, &mut rng);
        let mut worst = f64::INFINITY;
        for g in &members {
            let img = ops[j].apply_re(g);
            let m = cone_membership(&img, &tgt, &geoms[j + 1]);
            worst = worst.min(m.margin);
        }
        (members.len(), worst)
    });
    let checked = margins.iter().map(|m| m.0).sum();
    let worst = margins.iter().map(|m| m.1).fold(f64::INFINITY, f64::min);
    Ok(KappaReport { kappa, eps0, zeta, checked, worst_margin: worst, holds: worst >= 0.0 })
}

/// Worst margin of v_{α,ξ′}(ln 𝓛g) ≤ s′·Q′ over sampled members of
/// C_{ω,s}, with s′ = (sQ_ω + H_ω)/(Q_ω + H_ω) and Q′ = Q_{θω}.
#[allow(clippy::too_many_arguments)]
pub fn nesting_margin(
    window: &CocycleWindow,
    index: i64,
    qs: &QSeries,
    s: f64,
    alpha: f64,
    xi_src: f64,
    xi_tgt: f64,
    seed: u64,
) -> Result<f64> {
    let q = qs.q_at(index)?;
    let h = qs.h_at(index)?;
    let q1 = qs.q_at(index + 1)?;
    let s1 = (s * q + h) / (q + h);
    let src = ConeSpec::log_oscillation(s, q, alpha, xi_src);
    let tgt = ConeSpec::log_oscillation(s1, q1, alpha, xi_tgt);
    let mut rng = par::stream_rng(seed, 0);
    let members = sample_members(&src, window.geometry(index)?, CONE_SAMPLES, &mut rng);
    let gt = window.geometry(index + 1)?;
    let mut worst = f64::INFINITY;
    for g in &members {
        let img = window.apply_re(index, g)?;
        worst = worst.min(cone_membership(&img, &tgt, gt).margin);
    }
    Ok(worst)
}

/// c = −ln tanh(D), stable for large D.
pub fn contraction_exponent(d0: f64) -> f64 {
    let e = (-2.0 * d0).exp();
    e.ln_1p() - (-e).ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub m0: usize,
    pub j0: usize,
    pub d0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub index: i64,
    pub in_a: bool,
    pub in_a0: bool,
    pub d_bar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionLedger {
    pub thresholds: Thresholds,
    pub c: f64,
    pub rows: Vec<LedgerRow>,
    pub prob_a: f64,
    pub prob_a0: f64,
    pub base: i64,
    pub m_base: usize,
    /// U(ω) = d_{m(ω)}(ω) at the base index.
    pub u_omega: f64,
    /// Σ_{j=m}^{[(n−1)/M₀]} 1_A(θ^{M₀j}ω) for n = 1, 2, …
    pub contraction_count: Vec<usize>,
    pub envelope: Vec<f64>,
}

impl ContractionLedger {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Argument(format!("csv: {e}"));
        wr.write_record(["index", "in_A", "d_value", "cumulative_count", "envelope"]).map_err(io)?;
        for (k, (cnt, env)) in self.contraction_count.iter().zip(&self.envelope).enumerate() {
            let idx = self.base + k as i64 + 1;
            let row = self.rows.iter().find(|r| r.index == idx);
            wr.write_record([
                idx.to_string(),
                row.map_or("".into(), |r| u8::from(r.in_a).to_string()),
                row.map_or("".into(), |r| format!("{:.16e}", r.d_bar)),
                cnt.to_string(),
                format!("{env:.16e}"),
            ])
            .map_err(io)?;
        }
        wr.flush().map_err(|e| Error::Argument(format!("csv: {e}")))?;
        Ok(())
    }
}

/// Everything the diameter bound d_n needs along the path.
pub struct LedgerInputs<'a> {
    pub system: &'a FiberedSystem,
    pub path: &'a EnvPath,
    pub qs: &'a QSeries,
    /// Contiguous covering times.
    pub times: &'a [CoveringTimes],
    pub s: f64,
}

impl LedgerInputs<'_> {
    fn time(&self, index: i64) -> Result<&CoveringTimes> {
        let k = index - self.times.first().map_or(0, |t| t.index);
        if k < 0 || k as usize >= self.times.len() {
            return Err(Error::WindowExhausted(format!("no covering time at {index}")));
        }
        Ok(&self.times[k as usize])
    }

    fn ln_deg(&self, index: i64) -> Result<f64> {
        Ok((self.system.states[self.path.at(index)?].degree as f64).ln())
    }

    /// R_{J,M}(ω) = 3Σ_{k=−J}^{M}(H + ln D)(θ^kω) + 2s·max_{−J≤ℓ≤M} Q_{θ^ℓω}.
    pub fn r_jm(&self, index: i64, j: usize, m: usize) -> Result<f64> {
        let mut sum = 0.0;
        let mut qmax: f64 = 0.0;
        for k in -(j as i64)..=m as i64 {
            sum += self.qs.h_at(index + k)? + self.ln_deg(index + k)?;
            qmax = qmax.max(self.qs.q_at(index + k)?);
        }
        Ok(3.0 * sum + 2.0 * self.s * qmax)
    }

    /// s̃″_ω = (2s/(s−1))·Q̃_{θ⁻¹ω}/(2H̃_{θ⁻¹ω}) + 1 + (s+1)/(s−1).
    pub fn s_double_prime(&self, index: i64) -> Result<f64> {
        let s = self.s;
        let qt = self.qs.q_tilde_at(index - 1)?;
        let ht = self.qs.h_tilde_at(index - 1)?;
        Ok(2.0 * s / (s - 1.0) * qt / (2.0 * ht) + 1.0 + (s + 1.0) / (s - 1.0))
    }

    /// d_{J,M}(ω) = 4R_{J,M} + 2 ln D_{ω,M} + 2 ln s̃″_{θ^Mω} + 2sQ̃_ω.
    pub fn d_jm(&self, index: i64, j: usize, m: usize) -> Result<f64> {
        let mut ln_d = 0.0;
        for k in 0..m as i64 {
            ln_d += self.ln_deg(index + k)?;
        }
        Ok(4.0 * self.r_jm(index, j, m)?
            + 2.0 * ln_d
            + 2.0 * self.s_double_prime(index + m as i64)?.ln()
            + 2.0 * self.s * self.qs.q_tilde_at(index)?)
    }

    /// d_n(ω) with J_n = max(j_ω, j_{θⁿω}).
    pub fn d_n(&self, index: i64, n: usize) -> Result<f64> {
        let jn = self.time(index)?.j.max(self.time(index + n as i64)?.j);
        self.d_jm(index, jn, n)
    }

    fn d_bar(&self, index: i64, j0: usize, m0: usize) -> Result<f64> {
        let mut best = f64::NEG_INFINITY;
        for k in 0..=j0 {
            best = best.max(self.d_jm(index, k, m0)?);
        }
        Ok(best)
    }
}

fn quantile_threshold(mut xs: Vec<usize>) -> Option<usize> {
    xs.sort_unstable();
    let n = xs.len();
    // Smallest value v with #{x ≤ v} > 3n/4.
    (0..n).find(|&k| 4 * (k + 1) > 3 * n && (k + 1 == n || xs[k + 1] != xs[k])).map(|k| xs[k])
}

/// Calibrates (M₀, J₀, D₀) on `indices` from path frequencies, unless
/// supplied, and tabulates the contraction count from `base` for n ≤ n_max.
pub fn contraction_ledger(
    inputs: &LedgerInputs,
    indices: std::ops::Range<i64>,
    thresholds: Option<Thresholds>,
    base: i64,
    n_max: usize,
) -> Result<ContractionLedger> {
    let count = (indices.end - indices.start).max(0) as usize;
    if count < 4 {
        return Err(Error::Calibration(format!("{count} indices are too few to calibrate thresholds")));
    }
    let s = inputs.s;
    if !(s > 2.0) {
        return arg(format!("cone parameter s = {s} must exceed 2"));
    }
    let th = match thresholds {
        Some(t) => {
            if t.m0 == 0 || !(t.d0 > 1.0) {
                return arg("thresholds need M₀ ≥ 1 and D₀ > 1");
            }
            t
        }
        None => {
            let ms: Vec<usize> = indices.clone().map(|i| inputs.time(i).map(|t| t.m)).collect::<Result<_>>()?;
            let m0 = quantile_threshold(ms).ok_or_else(|| Error::Calibration("no M₀ reaches frequency 3/4".into()))?;
            let js: Vec<usize> = indices
                .clone()
                .map(|i| Ok(inputs.time(i)?.j.max(inputs.time(i + m0 as i64)?.j)))
                .collect::<Result<_>>()?;
            let j0 = quantile_threshold(js).ok_or_else(|| Error::Calibration("no J₀ reaches frequency 3/4".into()))?;
            let mut ds: Vec<f64> = indices.clone().map(|i| inputs.d_bar(i, j0, m0)).collect::<Result<_>>()?;
            ds.sort_by(|a, b| a.total_cmp(b));
            let k = (3 * count) / 4;
            let v = ds[k.min(count - 1)];
            if !v.is_finite() {
                return Err(Error::Calibration("diameter bounds are not finite".into()));
            }
            // P(d̄ ≤ D₀ − 1) > 3/4 with D₀ > 1.
            Thresholds { m0, j0, d0: (v + 1.0).max(1.0 + f64::EPSILON) }
        }
    };
    let in_a = |i: i64| -> Result<(bool, bool, f64)> {
        let t = inputs.time(i)?;
        let jmax = t.j.max(inputs.time(i + th.m0 as i64)?.j);
        let db = inputs.d_bar(i, th.j0, th.m0)?;
        let base_ok = t.m <= th.m0 && jmax <= th.j0;
        Ok((base_ok && db <= th.d0, base_ok && db <= th.d0 - 1.0, db))
    };
    let mut rows = Vec::with_capacity(count);
    for i in indices.clone() {
        let (a, a0, db) = in_a(i)?;
        rows.push(LedgerRow { index: i, in_a: a, in_a0: a0, d_bar: db });
    }
    let prob_a = rows.iter().filter(|r| r.in_a).count() as f64 / count as f64;
    let prob_a0 = rows.iter().filter(|r| r.in_a0).count() as f64 / count as f64;
    if thresholds.is_none() && prob_a0 < 0.25 {
        return Err(Error::Calibration(format!("P(A₀) = {prob_a0:.3} < 1/4 on the window")));
    }
    let c = contraction_exponent(th.d0);
    let m_base = inputs.time(base)?.m;
    let u = inputs.d_n(base, m_base)?;
    let mut counts = Vec::with_capacity(n_max);
    let mut env = Vec::with_capacity(n_max);
    let mut acc = 0usize;
    let mut next_j = m_base;
    for n in 1..=n_max {
        let top = (n - 1) / th.m0;
        while next_j <= top {
            let idx = base + (th.m0 * next_j) as i64;
            let hit = match rows.iter().find(|r| r.index == idx) {
                Some(r) => r.in_a,
                None => in_a(idx).map(|x| x.0).unwrap_or(false),
            };
            acc += usize::from(hit);
            next_j += 1;
        }
        counts.push(acc);
        env.push(u * (-c * acc as f64).exp());
    }
    Ok(ContractionLedger {
        thresholds: th,
        c,
        rows,
        prob_a,
        prob_a0,
        base,
        m_base,
        u_omega: u,
        contraction_count: counts,
        envelope: env,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiameterCheck {
    pub index: i64,
    /// Measured projective diameter of sampled L^{M₀}-images in C̃.
    pub diameter: f64,
    pub contraction: f64,
    pub tanh_d0: f64,
    pub tanh_quarter: f64,
}

/// Measures diameters of L^{M₀}-images of sampled C̃_{ω,s} members at
/// A-indices. `xi_at` gives the cone scale at each fiber.
#[allow(clippy::too_many_arguments)]
pub fn diameter_checks(
    window: &CocycleWindow,
    ledger: &ContractionLedger,
    qs: &QSeries,
    s: f64,
    alpha: f64,
    xi_at: &(dyn Fn(i64) -> Result<f64> + Sync),
    max_checks: usize,
    seed: u64,
) -> Result<Vec<DiameterCheck>> {
    if !window.is_normalized() {
        return arg("diameter checks need the normalized window");
    }
    let m0 = ledger.thresholds.m0;
    let cand: Vec<i64> = ledger
        .rows
        .iter()
        .filter(|r| r.in_a && window.check_range(r.index, m0).is_ok())
        .map(|r| r.index)
        .take(max_checks)
        .collect();
    let out: Vec<Result<DiameterCheck>> = par::map_slice(&cand, |&i| {
        let src = ConeSpec::log_oscillation(s, qs.q_tilde_at(i)?, alpha, xi_at(i)?);
        let tgt = ConeSpec::log_oscillation(s, qs.q_tilde_at(i + m0 as i64)?, alpha, xi_at(i + m0 as i64)?);
        let mut rng = par::stream_rng(seed, (i - ledger.base).unsigned_abs());
        let members = sample_members(&src, window.geometry(i)?, 16, &mut rng);
        let imgs: Vec<Vec<f64>> = members.iter().map(|g| window.push_re(i, m0, g)).collect::<Result<_>>()?;
        let gs = window.geometry(i)?;
        let gt = window.geometry(i + m0 as i64)?;
        let mut diam: f64 = 0.0;
        let mut ratio: f64 = 0.0;
        for a in 0..members.len() {
            for b in a + 1..members.len() {
                let d1 = hilbert_metric(&imgs[a], &imgs[b], &tgt, gt)?;
                diam = diam.max(d1);
                let d0 = hilbert_metric(&members[a], &members[b], &src, gs)?;
                if d0 > 0.0 && d0.is_finite() {
                    ratio = ratio.max(d1 / d0);
                }
            }
        }
        Ok(DiameterCheck {
            index: i,
            diameter: diam,
            contraction: ratio,
            tanh_d0: ledger.thresholds.d0.tanh(),
            tanh_quarter: (diam / 4.0).tanh(),
        })
    });
    out.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    #[test]
    fn orthant_distance_closed_form() {
        let geom = CellGeometry::circle(2);
        let d = hilbert_metric(&[1.0, 2.0], &[2.0, 1.0], &ConeSpec::orthant(), &geom).unwrap();
        assert_abs_diff_eq!(d, 4f64.ln(), epsilon = 1e-15);
        let d = hilbert_metric(&[1.0, 2.0], &[3.0, 6.0], &ConeSpec::orthant(), &geom).unwrap();
        assert_abs_diff_eq!(d, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn two_by_two_birkhoff_grid() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let mut pairs = Vec::new();
        for a in 1..12 {
            for b in 1..12 {
                pairs.push((vec![a as f64, 1.0], vec![1.0, b as f64]));
            }
        }
        let r = birkhoff_contraction(&m, &pairs).unwrap();
        assert_abs_diff_eq!(r.diameter, 6f64.ln(), epsilon = 1e-12);
        assert!(r.holds(1e-9));
    }

    #[test]
    fn projective_invariance_and_symmetry() {
        let geom = CellGeometry::circle(32);
        let cone = ConeSpec::log_oscillation(3.0, 1.0, 1.0, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ms = sample_members(&cone, &geom, 8, &mut rng);
        for f in &ms {
            assert!(cone_membership(f, &cone, &geom).member);
            for g in &ms {
                let d = hilbert_metric(f, g, &cone, &geom).unwrap();
                let e = hilbert_metric(g, f, &cone, &geom).unwrap();
                assert_abs_diff_eq!(d, e, epsilon = 1e-9);
                let g3: Vec<f64> = g.iter().map(|x| 3.0 * x).collect();
                assert_abs_diff_eq!(hilbert_metric(f, &g3, &cone, &geom).unwrap(), d, epsilon = 1e-9);
            }
            assert!(hilbert_metric(f, f, &cone, &geom).unwrap() < 1e-12);
        }
    }

    #[test]
    fn constants_are_members_everywhere() {
        let geom = CellGeometry::circle(16);
        let one = vec![2.0; 16];
        for cone in [ConeSpec::log_oscillation(3.0, 0.5, 1.0, 0.25), ConeSpec::kappa(0.7, 1.0), ConeSpec::bounded_ratio(2.0)] {
            assert!(cone_membership(&one, &cone, &geom).member);
        }
    }

    #[test]
    fn boundary_violation_margin() {
        let geom = CellGeometry::circle(16);
        let lg: Vec<f64> = (0..16).map(|i| (2.0 * std::f64::consts::PI * geom.midpoint(i)).cos()).collect();
        let v = seminorm(&lg, &geom, 1.0, None);
        let cone = ConeSpec { kind: ConeKind::LogOscillation { s: 3.0, q: v / (3.0 * 1.01) }, alpha: 1.0, xi: None };
        let g: Vec<f64> = lg.iter().map(|x| x.exp()).collect();
        let m = cone_membership(&g, &cone, &geom);
        assert!(!m.member);
        assert_abs_diff_eq!(m.margin, -0.01, epsilon = 1e-12);
        assert!(matches!(hilbert_metric(&g, &g, &cone, &geom), Err(Error::Membership(_))));
    }

    #[test]
    fn kappa_members_have_large_infimum() {
        let geom = CellGeometry::circle(64);
        let cone = ConeSpec::kappa(KAPPA_DEFAULT, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for g in sample_members(&cone, &geom, 32, &mut rng) {
            let n = holder_norm(&g, &geom, 1.0, None);
            let inf = g.iter().cloned().fold(f64::INFINITY, f64::min) / n;
            assert!(inf >= 1.0 / (2.0 * KAPPA_DEFAULT + 1.0) - 1e-12);
        }
    }

    #[test]
    fn zeta_arithmetic() {
        assert_abs_diff_eq!(kappa_zeta(0.1, KAPPA_DEFAULT), 0.4501, epsilon = 1e-4);
        assert!(kappa_threshold(KAPPA_DEFAULT) > 0.17 && kappa_threshold(KAPPA_DEFAULT) < 0.172);
        let ops = vec![OperatorMatrix::identity(0, 4)];
        let geoms = vec![CellGeometry::circle(4); 2];
        assert!(kappa_invariance_check(&ops, &geoms, 1.0, 0.18, KAPPA_DEFAULT, 0).is_err());
    }

    #[test]
    fn decompose_cosine() {
        let geom = CellGeometry::circle(128);
        let cone = ConeSpec::log_oscillation(3.0, 0.4, 1.0, 0.3);
        let g: Vec<f64> = (0..128).map(|i| (2.0 * std::f64::consts::PI * geom.midpoint(i)).cos()).collect();
        let d = decompose(&g, &cone, &geom).unwrap();
        // (g + c) − c rounds once at the scale of c.
        assert!(d.reconstruction_error <= 2.0 * f64::EPSILON * (1.0 + d.pieces[1][0].abs()));
        assert!(d.norm_sum <= d.norm_bound);
        for (p, s) in d.pieces.iter().zip(d.signs) {
            let q: Vec<f64> = p.iter().map(|x| s as f64 * x).collect();
            assert!(q.iter().all(|&v| v == 0.0) || cone_membership(&q, &cone, &geom).member);
        }
        let neg: Vec<f64> = vec![-1.0; 128];
        let d = decompose(&neg, &cone, &geom).unwrap();
        assert_eq!(d.pieces[1], neg);
    }

    #[test]
    fn sampling_functional_on_constant() {
        let geom = CellGeometry::circle(64);
        let cone = ConeSpec::log_oscillation(3.0, 0.5, 1.0, 1.0);
        let centers = crate::geometry::xi_cover(&geom, 1.0);
        let b = sampling_functional_bound(&vec![1.0; 64], &cone, &geom, &centers).unwrap();
        assert!(b.holds);
        assert_abs_diff_eq!(b.functional, centers.len() as f64);
        assert!(sampling_functional_bound(&vec![1.0; 64], &cone, &geom, &[]).is_err());
    }

    #[test]
    fn contraction_exponent_is_stable() {
        assert_abs_diff_eq!(contraction_exponent(1.0), -(1f64.tanh().ln()), epsilon = 1e-15);
        assert!(contraction_exponent(40.0) > 0.0);
    }
}
